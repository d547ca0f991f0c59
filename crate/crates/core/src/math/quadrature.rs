//! Gauss-Hermite quadrature and moments of logit-normal variables.

use crate::math::sigmoid;

/// Number of quadrature nodes used for probability-scale moments.
pub const GH_POINTS: usize = 15;

/// Nodes and weights for ∫ exp(-x²) f(x) dx ≈ Σ w_i f(x_i).
///
/// Roots of the order-n Hermite polynomial found by Newton iteration on the
/// orthonormal recurrence; weights from the derivative at the root.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Precomputed nodes/weights reused across cells.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    inv_sqrt_pi: f64,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_hermite(n);
        GaussHermite {
            nodes,
            weights,
            inv_sqrt_pi: 1.0 / std::f64::consts::PI.sqrt(),
        }
    }

    /// E[f(Z)] for Z ~ Normal(mu, sd²).
    pub fn expect(&self, mu: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        if sd == 0.0 {
            return f(mu);
        }
        let scale = std::f64::consts::SQRT_2 * sd;
        let mut acc = 0.0;
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mu + scale * t);
        }
        acc * self.inv_sqrt_pi
    }

    /// Mean and variance of logistic(Z) for Z ~ Normal(mu, sd²).
    pub fn logit_normal_moments(&self, mu: f64, sd: f64) -> (f64, f64) {
        if sd == 0.0 {
            return (sigmoid(mu), 0.0);
        }
        let m1 = self.expect(mu, sd, sigmoid);
        let m2 = self.expect(mu, sd, |t| {
            let p = sigmoid(t);
            p * p
        });
        (m1, (m2 - m1 * m1).max(0.0))
    }
}

impl Default for GaussHermite {
    fn default() -> Self {
        GaussHermite::new(GH_POINTS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn weights_recover_gaussian_moments() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for &n in &[5usize, 15, 31] {
            let (x, w) = gauss_hermite(n);
            let s0: f64 = w.iter().sum();
            let s2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            let s4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            assert!((s0 - sqrt_pi).abs() < 1e-12, "n={n}");
            assert!((s2 - sqrt_pi / 2.0).abs() < 1e-12, "n={n}");
            assert!((s4 - 0.75 * sqrt_pi).abs() < 1e-11, "n={n}");
        }
    }

    #[test]
    fn expectation_of_polynomials_is_exact() {
        let gh = GaussHermite::default();
        let (mu, sd) = (0.7, 1.3);
        assert!((gh.expect(mu, sd, |x| x) - mu).abs() < 1e-12);
        let ex2 = gh.expect(mu, sd, |x| x * x);
        assert!((ex2 - (mu * mu + sd * sd)).abs() < 1e-11);
    }

    #[test]
    fn point_mass_moments() {
        let gh = GaussHermite::default();
        let (m, v) = gh.logit_normal_moments(0.0, 0.0);
        assert_eq!(m, 0.5);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn symmetric_logit_normal_mean_is_half() {
        let gh = GaussHermite::default();
        for &sd in &[0.3, 1.0, 2.5] {
            let (m, _) = gh.logit_normal_moments(0.0, sd);
            assert!((m - 0.5).abs() < 1e-12, "sd={sd}");
        }
    }

    #[test]
    fn matches_monte_carlo_transform() {
        let gh = GaussHermite::default();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for &(mu, sd) in &[(-1.2, 0.8), (0.4, 0.5), (2.0, 1.5)] {
            let n = 400_000;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for _ in 0..n {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let p = sigmoid(mu + sd * z);
                s1 += p;
                s2 += p * p;
            }
            let mc_mean = s1 / n as f64;
            let mc_var = s2 / n as f64 - mc_mean * mc_mean;
            let (m, v) = gh.logit_normal_moments(mu, sd);
            assert!((m - mc_mean).abs() < 1e-3, "mu={mu} sd={sd}");
            assert!((v - mc_var).abs() < 1e-3, "mu={mu} sd={sd}");
        }
    }
}
