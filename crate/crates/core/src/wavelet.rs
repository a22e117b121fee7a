//! Heat-kernel graph wavelet bases.
//!
//! For a scale `s` the forward basis is `Ψ_s = U diag(e^{-sλ}) U^T` and the
//! inverse is `Ψ_s^{-1} = U diag(e^{+sλ}) U^T`. Scales are trainable and kept
//! positive through a softplus reparameterization.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::LaplacianSpectrum;

/// Largest admissible `s * λ_max`; beyond it the inverse filter is rejected.
pub const OVERFLOW_BOUND: f64 = 30.0;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `K` learnable scales stored as unconstrained raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    raw_params: Array1<f64>,
    trainable: bool,
}

impl ScaleSet {
    pub fn from_raw(raw_params: Array1<f64>, trainable: bool) -> Result<Self> {
        if raw_params.is_empty() {
            return Err(Error::Config("scale set needs at least one scale".into()));
        }
        if let Some(bad) = raw_params.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidScale(*bad));
        }
        Ok(Self {
            raw_params,
            trainable,
        })
    }

    pub fn from_scales(scales: &[f64], trainable: bool) -> Result<Self> {
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidScale(*bad));
        }
        Self::from_raw(scales.iter().map(|&s| softplus_inverse(s)).collect(), trainable)
    }

    /// `k` scales log-spaced over `[lo, hi]`; a single scale sits at the
    /// geometric midpoint.
    pub fn log_spaced(k: usize, lo: f64, hi: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("scale set needs at least one scale".into()));
        }
        let scales: Vec<f64> = if k == 1 {
            vec![(lo * hi).sqrt()]
        } else {
            (0..k)
                .map(|i| lo * (hi / lo).powf(i as f64 / (k - 1) as f64))
                .collect()
        };
        Self::from_scales(&scales, true)
    }

    pub fn len(&self) -> usize {
        self.raw_params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_params.is_empty()
    }

    pub fn raw_params(&self) -> &Array1<f64> {
        &self.raw_params
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn scales(&self) -> Array1<f64> {
        self.raw_params.mapv(softplus)
    }

    /// `d s_k / d raw_k`.
    pub fn scale_derivatives(&self) -> Array1<f64> {
        self.raw_params.mapv(sigmoid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatDirection {
    /// `e^{-sλ}`, the decaying (diffusing) direction.
    Forward,
    /// `e^{+sλ}`.
    Inverse,
}

fn check_scale(s: f64) -> Result<()> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScale(s))
    }
}

fn check_overflow(spec: &LaplacianSpectrum, s: f64) -> Result<()> {
    let lambda_max = spec.lambda_max().max(0.0);
    if s * lambda_max > OVERFLOW_BOUND {
        return Err(Error::ScaleOverflow {
            scale: s,
            lambda_max,
            bound: OVERFLOW_BOUND,
        });
    }
    Ok(())
}

/// Diagonal of the heat filter `G_s` for each eigenvalue.
pub fn heat_filter(eigenvalues: &Array1<f64>, s: f64, direction: HeatDirection) -> Result<Array1<f64>> {
    check_scale(s)?;
    let sign = match direction {
        HeatDirection::Forward => -1.0,
        HeatDirection::Inverse => 1.0,
    };
    let out = eigenvalues.mapv(|l| (sign * s * l).exp());
    if out.iter().any(|v| !v.is_finite()) {
        let lambda_max = eigenvalues.iter().cloned().fold(0.0, f64::max);
        return Err(Error::ScaleOverflow {
            scale: s,
            lambda_max,
            bound: OVERFLOW_BOUND,
        });
    }
    Ok(out)
}

/// A wavelet basis `Ψ_s` together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    pub forward: Array2<f64>,
    pub inverse: Array2<f64>,
    pub scale: f64,
    /// 0 for a dense basis.
    pub sparsity_threshold: f64,
}

impl WaveletBasis {
    /// `max |Ψ Ψ^{-1} - I|`.
    pub fn invertibility_error(&self) -> f64 {
        let prod = self.forward.dot(&self.inverse);
        crate::graph::max_abs_diff(&prod, &Array2::eye(prod.nrows()))
    }

    pub fn node_count(&self) -> usize {
        self.forward.nrows()
    }
}

pub fn build_basis(spec: &LaplacianSpectrum, s: f64) -> Result<WaveletBasis> {
    check_scale(s)?;
    check_overflow(spec, s)?;
    let fwd = heat_filter(spec.eigenvalues(), s, HeatDirection::Forward)?;
    let inv = heat_filter(spec.eigenvalues(), s, HeatDirection::Inverse)?;
    Ok(WaveletBasis {
        forward: spec.spectral_matrix(&fwd),
        inverse: spec.spectral_matrix(&inv),
        scale: s,
        sparsity_threshold: 0.0,
    })
}

/// Zero every entry with `|x| < threshold` in both matrices. Inference only:
/// the truncated pair is no longer an exact inverse.
pub fn sparsify(basis: &WaveletBasis, threshold: f64) -> WaveletBasis {
    let cut = |m: &Array2<f64>| m.mapv(|x| if x.abs() < threshold { 0.0 } else { x });
    WaveletBasis {
        forward: cut(&basis.forward),
        inverse: cut(&basis.inverse),
        scale: basis.scale,
        sparsity_threshold: threshold.max(0.0),
    }
}

/// `(∂Ψ_s/∂s, ∂Ψ_s^{-1}/∂s)`.
pub fn basis_scale_gradient(spec: &LaplacianSpectrum, s: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    check_scale(s)?;
    check_overflow(spec, s)?;
    let lam = spec.eigenvalues();
    let d_fwd = lam.mapv(|l| -l * (-s * l).exp());
    let d_inv = lam.mapv(|l| l * (s * l).exp());
    Ok((spec.spectral_matrix(&d_fwd), spec.spectral_matrix(&d_inv)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{eigendecompose, generators, max_abs_diff, normalized_laplacian, RoadGraph};
    use ndarray::array;

    fn p3() -> LaplacianSpectrum {
        eigendecompose(&normalized_laplacian(&generators::path(3))).unwrap()
    }

    #[test]
    fn softplus_roundtrip() {
        for s in [1e-3, 0.1, 0.5, 2.0, 40.0] {
            assert!((softplus(softplus_inverse(s)) - s).abs() < 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn log_spaced_bounds() {
        let set = ScaleSet::log_spaced(4, 0.1, 2.0).unwrap();
        let s = set.scales();
        assert!((s[0] - 0.1).abs() < 1e-12);
        assert!((s[3] - 2.0).abs() < 1e-12);
        assert!(s.iter().all(|&v| v > 0.0));
        assert!(ScaleSet::log_spaced(0, 0.1, 2.0).is_err());
    }

    #[test]
    fn heat_filter_examples() {
        let lam = array![0.0, 1.0, 2.0];
        assert_eq!(heat_filter(&lam, 0.0, HeatDirection::Forward).unwrap(), array![1.0, 1.0, 1.0]);
        let f = heat_filter(&array![2.0], 0.5, HeatDirection::Forward).unwrap();
        assert!((f[0] - 0.367879441171442).abs() < 1e-12);
        let fwd = heat_filter(&lam, 0.7, HeatDirection::Forward).unwrap();
        let inv = heat_filter(&lam, 0.7, HeatDirection::Inverse).unwrap();
        for v in (&fwd * &inv).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            heat_filter(&lam, f64::NAN, HeatDirection::Forward),
            Err(Error::InvalidScale(_))
        ));
    }

    #[test]
    fn zero_scale_is_identity() {
        let b = build_basis(&p3(), 0.0).unwrap();
        assert!(max_abs_diff(&b.forward, &Array2::eye(3)) < 1e-12);
        assert!(max_abs_diff(&b.inverse, &Array2::eye(3)) < 1e-12);
    }

    #[test]
    fn p3_invertible() {
        let spec = p3();
        for s in [0.1, 0.5, 1.0, 2.0, 5.0] {
            assert!(build_basis(&spec, s).unwrap().invertibility_error() < 1e-8);
        }
    }

    #[test]
    fn cycle_rows_sum_to_one() {
        // regular graph: the constant vector is the λ=0 eigenvector of L'
        let spec = eigendecompose(&normalized_laplacian(&generators::cycle(4))).unwrap();
        let b = build_basis(&spec, 0.8).unwrap();
        for row in b.forward.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_rejected() {
        let spec = p3();
        assert!(matches!(build_basis(&spec, 15.5), Err(Error::ScaleOverflow { .. })));
        assert!(build_basis(&spec, 14.9).is_ok());
        assert!(basis_scale_gradient(&spec, 16.0).is_err());
    }

    #[test]
    fn sparsify_edges() {
        let b = build_basis(&p3(), 0.3).unwrap();
        assert_eq!(sparsify(&b, 0.0).forward, b.forward);
        let max = b.inverse.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let zeroed = sparsify(&b, max * 1.01);
        assert!(zeroed.forward.iter().all(|&x| x == 0.0));
        assert!(zeroed.inverse.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sparsify_keeps_local_entries() {
        // on P3 the (0,2) entry is two hops away and decays like s^2
        let b = build_basis(&p3(), 0.01).unwrap();
        let sp = sparsify(&b, 1e-4);
        assert!(b.forward[[0, 2]].abs() < 1e-4);
        assert_eq!(sp.forward[[0, 2]], 0.0);
        assert_eq!(sp.forward[[0, 1]], b.forward[[0, 1]]);
        assert_eq!(sp.forward[[1, 1]], b.forward[[1, 1]]);
        assert_eq!(sp.sparsity_threshold, 1e-4);
    }

    #[test]
    fn edgeless_gradient_is_zero() {
        let g = RoadGraph::from_edges(&[], 3).unwrap();
        let spec = eigendecompose(&normalized_laplacian(&g)).unwrap();
        // all eigenvalues are 1 here, so build a spectrum with λ=0 from the zero matrix
        let zero = eigendecompose(&Array2::zeros((3, 3))).unwrap();
        let (gf, gi) = basis_scale_gradient(&zero, 0.7).unwrap();
        assert!(gf.iter().chain(gi.iter()).all(|&x| x == 0.0));
        assert!(basis_scale_gradient(&spec, 0.7).is_ok());
    }

    #[test]
    fn scale_gradient_matches_central_difference() {
        let spec = p3();
        let h = 1e-6;
        for s in [0.1, 0.5, 1.0, 2.0] {
            let (gf, gi) = basis_scale_gradient(&spec, s).unwrap();
            let hi = build_basis(&spec, s + h).unwrap();
            let lo = build_basis(&spec, s - h).unwrap();
            let fd_f = (&hi.forward - &lo.forward) / (2.0 * h);
            let fd_i = (&hi.inverse - &lo.inverse) / (2.0 * h);
            for (a, b) in gf.iter().zip(fd_f.iter()).chain(gi.iter().zip(fd_i.iter())) {
                let rel = (a - b).abs() / (a.abs() + b.abs()).max(1e-8);
                assert!(rel < 1e-5, "s={s} analytic {a} fd {b}");
            }
            assert!(crate::graph::max_asymmetry(&gf) < 1e-10);
            assert!(crate::graph::max_asymmetry(&gi) < 1e-10);
        }
    }

    #[test]
    fn locality_grows_with_scale() {
        let spec = eigendecompose(&normalized_laplacian(&generators::path(4))).unwrap();
        let small = build_basis(&spec, 0.1).unwrap();
        let large = build_basis(&spec, 1.0).unwrap();
        for (i, j) in [(0, 2), (0, 3), (1, 3)] {
            assert!(small.forward[[i, j]].abs() <= large.forward[[i, j]].abs());
        }
    }
}
