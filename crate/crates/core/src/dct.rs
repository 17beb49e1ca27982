//! Orthonormal DCT-II and its inverse, plus contiguous frequency grouping.
//!
//! The transform is evaluated directly from a cached cosine basis; with the
//! orthonormal scaling the basis matrix is orthogonal, so the inverse is its
//! transpose and L2 norms are preserved.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_vector, Matrix};

/// DCT coefficients of an embedding split into contiguous frequency groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySpectrum {
    pub coefficients: Vec<f64>,
    pub group_bounds: Vec<(usize, usize)>,
}

impl FrequencySpectrum {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn group(&self, g: usize) -> &[f64] {
        let (s, e) = self.group_bounds[g];
        &self.coefficients[s..e]
    }
}

/// Cached orthonormal DCT-II basis for one signal length.
#[derive(Clone, Debug)]
pub struct DctBasis {
    basis: Matrix,
}

impl DctBasis {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("DCT length must be at least 1"));
        }
        let n = len as f64;
        let mut basis = Matrix::zeros(len, len);
        for k in 0..len {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..len {
                basis[(k, i)] = scale * (PI * (i as f64 + 0.5) * k as f64 / n).cos();
            }
        }
        Ok(Self { basis })
    }

    pub fn len(&self) -> usize {
        self.basis.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_vector(z, "dct_forward")?;
        self.basis.matvec(z)
    }

    /// Applies the transpose of the basis, which is the inverse transform.
    pub fn inverse(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        check_vector(coefficients, "dct_inverse")?;
        let n = self.len();
        if coefficients.len() != n {
            return Err(Error::invalid(format!(
                "dct_inverse: expected {n} coefficients, got {}",
                coefficients.len()
            )));
        }
        let mut out = vec![0.0; n];
        for (k, &c) in coefficients.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis.row(k)) {
                *o += c * b;
            }
        }
        Ok(out)
    }
}

/// Shared basis per length, built on first use.
fn cached_basis(len: usize) -> Result<Arc<DctBasis>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DctBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(b) = cache.lock().expect("basis cache").get(&len) {
        return Ok(Arc::clone(b));
    }
    let basis = Arc::new(DctBasis::new(len)?);
    Ok(Arc::clone(cache.lock().expect("basis cache").entry(len).or_insert(basis)))
}

/// Orthonormal DCT-II of `z`, reported as a single group spanning all coefficients.
pub fn dct_forward(z: &[f64]) -> Result<FrequencySpectrum> {
    let basis = cached_basis(z.len())?;
    let coefficients = basis.forward(z)?;
    Ok(FrequencySpectrum {
        group_bounds: vec![(0, coefficients.len())],
        coefficients,
    })
}

/// Orthonormal DCT-II of `z` partitioned into `n_groups` frequency groups.
pub fn dct_forward_grouped(z: &[f64], n_groups: usize) -> Result<FrequencySpectrum> {
    let mut spectrum = dct_forward(z)?;
    spectrum.group_bounds = group_partition(z.len(), n_groups)?;
    Ok(spectrum)
}

pub fn dct_inverse(spectrum: &FrequencySpectrum) -> Result<Vec<f64>> {
    cached_basis(spectrum.len())?.inverse(&spectrum.coefficients)
}

/// Splits `[0, dim)` into `n_groups` contiguous ranges, low to high frequency.
/// Sizes differ by at most one; the earliest groups take the remainder.
pub fn group_partition(dim: usize, n_groups: usize) -> Result<Vec<(usize, usize)>> {
    if n_groups < 1 || n_groups > dim {
        return Err(Error::invalid(format!(
            "group count {n_groups} must be in 1..={dim}"
        )));
    }
    let base = dim / n_groups;
    let extra = dim % n_groups;
    let mut bounds = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        bounds.push((start, start + size));
        start += size;
    }
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight summation of the orthonormal DCT-II definition.
    fn dct_ii_by_definition(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI / n as f64 * (i as f64 + 0.5) * k as f64).cos())
                    .sum();
                let w = if k == 0 { 1.0 / n as f64 } else { 2.0 / n as f64 };
                w.sqrt() * s
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let s = dct_forward(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let want = [2.0, 0.0, 0.0, 0.0];
        for (c, w) in s.coefficients.iter().zip(want) {
            assert_abs_diff_eq!(*c, w, epsilon = 1e-12);
        }
        let back = dct_inverse(&s).unwrap();
        for v in back {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_four_five() {
        let s = dct_forward(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(norm(&s.coefficients), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_definition() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let s = dct_forward(&x).unwrap();
        for (c, w) in s.coefficients.iter().zip(dct_ii_by_definition(&x)) {
            assert_abs_diff_eq!(*c, w, epsilon = 1e-12);
        }
        // frozen from an independent reference DCT (scipy, norm="ortho")
        assert_abs_diff_eq!(s.coefficients[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.coefficients[1], -2.230_442_497_387_663_5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.coefficients[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.coefficients[3], -0.158_512_667_781_107_06, epsilon = 1e-12);
    }

    #[test]
    fn round_trips() {
        let x = [0.5, -1.25, 3.0];
        let back = dct_inverse(&dct_forward(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(x) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(512);
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = dct_inverse(&dct_forward(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(dct_forward(&[]), Err(Error::InvalidInput(_))));
        assert!(dct_forward(&[f64::NAN]).is_err());
    }

    #[test]
    fn partitions() {
        let g = group_partition(512, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|(s, e)| e - s == 64));
        assert_eq!(group_partition(4, 4).unwrap(), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(group_partition(10, 4).unwrap(), vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
        assert!(group_partition(4, 5).is_err());
        assert!(group_partition(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_covers_range(dim in 1usize..600, frac in 0.0f64..1.0) {
            let n = 1 + ((dim - 1) as f64 * frac) as usize;
            let g = group_partition(dim, n).unwrap();
            prop_assert_eq!(g.len(), n);
            prop_assert_eq!(g[0].0, 0);
            prop_assert_eq!(g[n - 1].1, dim);
            for w in g.windows(2) {
                prop_assert_eq!(w[0].1, w[1].0);
            }
            let sizes: Vec<usize> = g.iter().map(|(s, e)| e - s).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(sizes[0] - sizes[n - 1] <= 1);
        }

        #[test]
        fn parseval_and_linearity(
            x in prop::collection::vec(-10.0f64..10.0, 1..64),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let fx = dct_forward(&x).unwrap().coefficients;
            let fy = dct_forward(&y).unwrap().coefficients;
            prop_assert!((norm(&fx) - norm(&x)).abs() < 1e-9);
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let fc = dct_forward(&combo).unwrap().coefficients;
            for i in 0..x.len() {
                prop_assert!((fc[i] - (alpha * fx[i] + beta * fy[i])).abs() < 1e-9);
            }
        }
    }
}
