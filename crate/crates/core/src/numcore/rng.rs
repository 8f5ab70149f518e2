//! Seeded pseudo-random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea, Flood 2014). State advances by
//! the golden-ratio increment `0x9E3779B97F4A7C15`; each output is the state
//! passed through the finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! with wrapping 64-bit arithmetic. Uniform doubles take the top 53 bits:
//! `u = (x >> 11) · 2⁻⁵³ ∈ [0, 1)`.
//!
//! Gaussians use the basic (trigonometric) Box–Muller transform on two
//! consecutive uniforms `u₁, u₂`:
//! `r = sqrt(−2 ln(1 − u₁))`, `z₀ = r cos(2π u₂)`, `z₁ = r sin(2π u₂)`.
//! Both outputs are used, `z₀` first. [`Rng::normal`] caches `z₁` for the
//! next call; [`randn`] fills a matrix in row-major order from the same
//! stream.

use super::Matrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream derived from this seed and a label.
    pub fn fork(&self, stream: u64) -> Self {
        let mut probe = Rng::new(self.state ^ stream.wrapping_mul(MIX_2));
        Rng::new(probe.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. Uses a 128-bit multiply-shift, so the
    /// bias is at most `n / 2⁶⁴`.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let (z0, z1) = self.box_muller();
        self.spare_normal = Some(z1);
        z0
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// Standard normal matrix.
pub fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Matrix of uniforms in `[lo, hi)`.
pub fn rand_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_outputs() {
        // First outputs for seed 1234567 from the published C reference.
        let mut rng = Rng::new(1234567);
        let expected: [u64; 3] = [6457827717110365317, 3203168211198807973, 9817491932198370423];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = randn(&mut Rng::new(7), 5, 6);
        let b = randn(&mut Rng::new(7), 5, 6);
        assert_eq!(a, b);
        let c = rand_uniform(&mut Rng::new(7), 5, 6, -1.0, 1.0);
        let d = rand_uniform(&mut Rng::new(7), 5, 6, -1.0, 1.0);
        assert_eq!(c, d);
    }

    #[test]
    fn uniform_mean_near_zero() {
        let m = rand_uniform(&mut Rng::new(11), 100, 100, -1.0, 1.0);
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(m.data().iter().all(|&x| (-1.0..1.0).contains(&x)));
    }

    #[test]
    fn normal_variance_near_one() {
        let m = randn(&mut Rng::new(12), 100, 100);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(3);
        for n in [1u64, 2, 7, 1000] {
            for _ in 0..200 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
