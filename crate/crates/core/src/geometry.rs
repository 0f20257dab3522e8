//! Exact SIM(2) group operations in (x, y, tau, theta) coordinates with
//! tau = ln a, plus exponential/logarithm maps, the left-invariant frame,
//! structure constants and the weighted modulus driving kernel estimates.
//!
//! All operations are pure functions on value types.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Threshold on c1^2 + c4^2 (exp) and on the log-map denominator below which
/// the closed forms are 0/0 and the analytic limit branches take over.
pub const EPS_SING: f64 = 1e-10;

/// Group element (x, y, tau, theta); theta canonical in (-pi, pi], a = e^tau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim2Point {
    pub x: f64,
    pub y: f64,
    pub tau: f64,
    pub theta: f64,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(2.0 * PI);
    if r == 0.0 {
        PI
    } else {
        r - PI
    }
}

impl Sim2Point {
    pub fn new(x: f64, y: f64, tau: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            tau,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            tau: 0.0,
            theta: 0.0,
        }
    }

    /// a = e^tau.
    pub fn scale(&self) -> f64 {
        self.tau.exp()
    }
}

/// Lie-algebra coordinates (c1 angular, c2 xi, c3 eta, c4 tau).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LieCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl LieCoefficients {
    pub fn new(c1: f64, c2: f64, c3: f64, c4: f64) -> Self {
        Self { c1, c2, c3, c4 }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }
}

/// (x,a,theta)(x',a',theta') = (x + a R_theta x', a a', theta + theta').
pub fn group_mul(g: Sim2Point, h: Sim2Point) -> Sim2Point {
    let a = g.tau.exp();
    let (s, c) = g.theta.sin_cos();
    Sim2Point::new(
        g.x + a * (c * h.x - s * h.y),
        g.y + a * (s * h.x + c * h.y),
        g.tau + h.tau,
        g.theta + h.theta,
    )
}

pub fn group_inv(g: Sim2Point) -> Sim2Point {
    let inv_a = (-g.tau).exp();
    let (s, c) = g.theta.sin_cos();
    // R_{-theta} (-x) / a
    Sim2Point::new(
        -inv_a * (c * g.x + s * g.y),
        -inv_a * (-s * g.x + c * g.y),
        -g.tau,
        -g.theta,
    )
}

/// Exponential curve g0 * exp(t sum c^i A_i) in closed form; the degenerate
/// rotation/scaling-free case falls back to the straight-line limit.
pub fn exp_map(c: LieCoefficients, t: f64, g0: Sim2Point) -> Sim2Point {
    let LieCoefficients { c1, c2, c3, c4 } = c;
    let denom = c1 * c1 + c4 * c4;
    let a0 = g0.tau.exp();
    let (s0, co0) = g0.theta.sin_cos();

    if denom < EPS_SING {
        return Sim2Point::new(
            g0.x + t * a0 * (co0 * c2 - s0 * c3),
            g0.y + t * a0 * (s0 * c2 + co0 * c3),
            g0.tau + t * c4,
            g0.theta + t * c1,
        );
    }

    let e = (t * c4).exp();
    let (s1, co1) = (t * c1 + g0.theta).sin_cos();

    let x = (a0 * c1 * ((-s0 + e * s1) * c2 + (-co0 + e * co1) * c3)
        + c1 * c1 * g0.x
        + c4 * (a0 * (-co0 + e * co1) * c2 + a0 * (s0 - e * s1) * c3 + c4 * g0.x))
        / denom;
    let y = (a0 * c1 * ((co0 - e * co1) * c2 + (-s0 + e * s1) * c3)
        + c1 * c1 * g0.y
        + c4 * (a0 * (-s0 + e * s1) * c2 + a0 * (-co0 + e * co1) * c3 + c4 * g0.y))
        / denom;

    Sim2Point::new(x, y, g0.tau + t * c4, g0.theta + t * c1)
}

/// Logarithm map at t = 1: solves g = exp(sum c^i A_i). The translation-only
/// limit applies when the denominator 1 + e^{2 tau} - 2 e^tau cos theta
/// degenerates (only possible near the identity in (tau, theta)).
pub fn log_map(g: Sim2Point) -> LieCoefficients {
    let Sim2Point { x, y, tau, theta } = g;
    let et = tau.exp();
    let d = 1.0 + (2.0 * tau).exp() - 2.0 * et * theta.cos();
    if d < EPS_SING {
        return LieCoefficients::new(theta, x, y, tau);
    }
    let (s, c) = theta.sin_cos();
    let xi = et * (x * c + y * s);
    let eta = et * (-x * s + y * c);
    let c2 = ((y * theta - x * tau) + (-theta * eta + tau * xi)) / d;
    let c3 = (-(x * theta + y * tau) + (theta * xi + tau * eta)) / d;
    LieCoefficients::new(theta, c2, c3, tau)
}

/// Both weighted moduli of a tangent vector: the original
/// sqrt((c1^2+c2^2+c4^2) + |c3|) and the smooth fourth-root variant
/// ((c1^2+c2^2+c4^2)^2 + c3^2)^{1/4}; weights (1,1,2,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedModulus {
    pub original: f64,
    pub smooth: f64,
}

pub fn weighted_modulus(c: LieCoefficients) -> WeightedModulus {
    let q = c.c1 * c.c1 + c.c2 * c.c2 + c.c4 * c.c4;
    let original = (q + c.c3.abs()).sqrt();
    let smooth = (q * q + c.c3 * c.c3).sqrt().sqrt();
    WeightedModulus { original, smooth }
}

/// Change-of-frame matrix at g: rows express {d_theta, d_xi, d_eta, d_tau}
/// in the coordinate frame {d_theta, d_x, d_y, d_tau}. Determinant e^{2 tau}.
pub fn left_frame_coefficients(g: Sim2Point) -> [[f64; 4]; 4] {
    let a = g.tau.exp();
    let (s, c) = g.theta.sin_cos();
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, a * c, a * s, 0.0],
        [0.0, -a * s, a * c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Structure constants c[i][j][k] of the Lie algebra, 0-indexed over the
/// basis order (A1, A2, A3, A4) = (d_theta, d_xi, d_eta, d_tau).
#[derive(Debug, Clone, Copy)]
pub struct StructureConstants {
    table: [[[f64; 4]; 4]; 4],
}

impl StructureConstants {
    pub fn new() -> Self {
        let mut table = [[[0.0; 4]; 4]; 4];
        // [A1,A2] = A3, [A1,A3] = -A2, [A4,A2] = A2, [A4,A3] = A3
        table[0][1][2] = 1.0;
        table[1][0][2] = -1.0;
        table[0][2][1] = -1.0;
        table[2][0][1] = 1.0;
        table[3][1][1] = 1.0;
        table[1][3][1] = -1.0;
        table[3][2][2] = 1.0;
        table[2][3][2] = -1.0;
        Self { table }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.table[i][j][k]
    }
}

impl Default for StructureConstants {
    fn default() -> Self {
        Self::new()
    }
}
