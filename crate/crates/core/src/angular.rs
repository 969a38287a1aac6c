//! Spatial-frequency <-> angular-delay transforms.
//!
//! The antenna axis is transformed per polarization by a unitary DFT
//! block (antennas [0, n_t/2) are polarization 0, the rest polarization
//! 1), the subband axis by a unitary DFT. Unitary scaling keeps
//! Frobenius norms identical in both domains.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::cmat::CMat;
use crate::error::{Error, Result};

/// The pair of transform matrices for a given (n_t, m) geometry:
/// `f_a = diag(B, B)` with `B` the n_t/2-point unitary DFT, and `f_d`
/// the m-point unitary DFT.
#[derive(Debug, Clone)]
pub struct DftPair {
    n_t: usize,
    m: usize,
    f_a: CMat,
    f_a_h: CMat,
    f_d: CMat,
    f_d_h: CMat,
}

fn unitary_dft(n: usize) -> CMat {
    let mut out = CMat::zeros(n, n);
    let scale = 1.0 / (n as f64).sqrt();
    for r in 0..n {
        for c in 0..n {
            let phase = -2.0 * PI * (r * c) as f64 / n as f64;
            out[(r, c)] = Complex64::from_polar(scale, phase);
        }
    }
    out
}

impl DftPair {
    pub fn new(n_t: usize, m: usize) -> Result<Self> {
        if n_t == 0 || n_t % 2 != 0 || m == 0 {
            return Err(Error::Config(format!(
                "transform needs even n_t >= 2 and m >= 1, got n_t={n_t}, m={m}"
            )));
        }
        let b = unitary_dft(n_t / 2);
        let mut f_a = CMat::zeros(n_t, n_t);
        let half = n_t / 2;
        for r in 0..half {
            for c in 0..half {
                f_a[(r, c)] = b[(r, c)];
                f_a[(half + r, half + c)] = b[(r, c)];
            }
        }
        let f_d = unitary_dft(m);
        Ok(DftPair {
            n_t,
            m,
            f_a_h: f_a.hermitian(),
            f_a,
            f_d_h: f_d.hermitian(),
            f_d,
        })
    }

    pub fn f_a(&self) -> &CMat {
        &self.f_a
    }

    pub fn f_d(&self) -> &CMat {
        &self.f_d
    }

    fn check(&self, h: &CMat, op: &'static str) -> Result<()> {
        if h.rows() != self.n_t || h.cols() != self.m {
            return Err(Error::Shape {
                op,
                left: vec![h.rows(), h.cols()],
                right: vec![self.n_t, self.m],
            });
        }
        Ok(())
    }

    /// Spatial-frequency to angular-delay: `F_Aᴴ H F_D`.
    pub fn to_angular_delay(&self, h: &CMat) -> Result<CMat> {
        self.check(h, "to_angular_delay")?;
        self.f_a_h.matmul(h)?.matmul(&self.f_d)
    }

    /// Angular-delay back to spatial-frequency: `F_A H̃ F_Dᴴ`.
    pub fn from_angular_delay(&self, h: &CMat) -> Result<CMat> {
        self.check(h, "from_angular_delay")?;
        self.f_a.matmul(h)?.matmul(&self.f_d_h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cmat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMat {
        let data = (0..rows * cols)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        CMat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn dft_blocks_are_unitary() {
        let pair = DftPair::new(32, 16).unwrap();
        for (mat, n) in [(pair.f_a(), 32), (pair.f_d(), 16)] {
            let prod = mat.hermitian().matmul(mat).unwrap();
            let eye = CMat::identity(n);
            let max_err = prod
                .data()
                .iter()
                .zip(eye.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-12, "unitarity violated: {max_err}");
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let pair = DftPair::new(4, 2).unwrap();
        let z = CMat::zeros(4, 2);
        assert_eq!(pair.to_angular_delay(&z).unwrap().frob_norm(), 0.0);
        assert_eq!(pair.from_angular_delay(&z).unwrap().frob_norm(), 0.0);
    }

    #[test]
    fn norm_preserved_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = DftPair::new(32, 16).unwrap();
        let h = random_cmat(32, 16, &mut rng);
        let t = pair.to_angular_delay(&h).unwrap();
        assert!((t.frob_norm() - h.frob_norm()).abs() < 1e-10);
        let back = pair.from_angular_delay(&t).unwrap();
        let max_err = back
            .data()
            .iter()
            .zip(h.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-10, "roundtrip error {max_err}");
    }

    #[test]
    fn single_entry_matches_dense_products() {
        // H = e1 e1ᵀ at n_t=4 (B is the 2x2 DFT), M=2; compare against
        // explicitly multiplied dense matrices.
        let pair = DftPair::new(4, 2).unwrap();
        let mut h = CMat::zeros(4, 2);
        h[(1, 1)] = Complex64::ONE;
        let got = pair.to_angular_delay(&h).unwrap();
        let expect = pair
            .f_a()
            .hermitian()
            .matmul(&h)
            .unwrap()
            .matmul(pair.f_d())
            .unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn single_port_inverse_is_rank_one_outer_product() {
        let pair = DftPair::new(8, 4).unwrap();
        let (r, c) = (5, 2);
        let mut t = CMat::zeros(8, 4);
        t[(r, c)] = Complex64::new(0.8, -0.3);
        let h = pair.from_angular_delay(&t).unwrap();
        // F_A ejᵀ F_Dᴴ = (col r of F_A) (conj of col c of F_D)ᵀ scaled.
        for i in 0..8 {
            for j in 0..4 {
                let expect = t[(r, c)] * pair.f_a()[(i, r)] * pair.f_d()[(j, c)].conj();
                assert!((h[(i, j)] - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn transform_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = DftPair::new(8, 4).unwrap();
        let h1 = random_cmat(8, 4, &mut rng);
        let h2 = random_cmat(8, 4, &mut rng);
        let (a, b) = (Complex64::new(1.3, -0.2), Complex64::new(-0.4, 2.0));
        let combo = h1.scale(a).add(&h2.scale(b)).unwrap();
        let lhs = pair.to_angular_delay(&combo).unwrap();
        let rhs = pair
            .to_angular_delay(&h1)
            .unwrap()
            .scale(a)
            .add(&pair.to_angular_delay(&h2).unwrap().scale(b))
            .unwrap();
        let max_err = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }
}
