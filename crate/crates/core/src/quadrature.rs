//! Gauss–Hermite quadrature for expectations under a normal law.

use std::f64::consts::PI;

/// Nodes and weights for ∫ e^{-x²} f(x) dx with `n` points.
///
/// Roots are found by Newton iteration on the orthonormal Hermite
/// recurrence, which avoids the overflow of the raw polynomials.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        for _ in 0..100 {
            let (p1, p2) = orthonormal_hermite(n, z);
            let dz = p1 / ((2.0 * nf).sqrt() * p2);
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, p2) = orthonormal_hermite(n, z);
        let pp = (2.0 * nf).sqrt() * p2;
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Ascending order of nodes.
    x.reverse();
    w.reverse();
    (x, w)
}

/// (h_n(z), h_{n-1}(z)) of the orthonormal Hermite recurrence.
fn orthonormal_hermite(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

/// E[f(Z)] for Z ~ N(mean, sd²), with precomputed Gauss–Hermite nodes.
pub struct NormalQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl NormalQuadrature {
    pub fn new(n: usize) -> Self {
        let (x, w) = gauss_hermite(n);
        let scale = PI.sqrt();
        Self {
            nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v / scale).collect(),
        }
    }

    pub fn expect(&self, mean: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(mean + sd * z))
            .sum()
    }
}
