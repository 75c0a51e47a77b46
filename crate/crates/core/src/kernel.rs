//! Squared-exponential covariance over the target grid.
//!
//! Leaf curves have prior m ~ N(0, C) with
//! C(t,t') = s²/(n·Δ) · exp[-((t-t')/l)²/2] on the grid. An infinite
//! length-scale is the constant-leaf limit: the curve collapses to a single
//! scalar with variance s²/(n·Δ), which is handled exactly rather than
//! through a near-singular factorization.

use nalgebra::{DMatrix, DVector};

use crate::data::TargetGrid;
use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-8;

/// Covariance parameters for one forest's leaf curves.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub grid: TargetGrid,
    /// Marginal scale s² of the whole forest fit (latent units²).
    pub s2: f64,
    /// Ensemble size n; each leaf carries variance s²/(nΔ).
    pub n_trees: usize,
    /// Shrinkage Δ.
    pub delta: f64,
    /// Length-scale l in target-covariate units; `f64::INFINITY` selects the
    /// constant-leaf limit.
    pub lengthscale: f64,
    /// User smoothness setting the length-scale was derived from.
    pub kappa: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s2 > 0.0) || !(self.delta > 0.0) || self.n_trees == 0 {
            return Err(Error::InvalidArgument(
                "kernel spec requires positive scale, shrinkage, and tree count".into(),
            ));
        }
        if !(self.lengthscale > 0.0) {
            return Err(Error::InvalidArgument(
                "kernel length-scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-leaf marginal variance s²/(nΔ).
    pub fn leaf_variance(&self) -> f64 {
        self.s2 / (self.n_trees as f64 * self.delta)
    }

    /// Same spec with a different shrinkage.
    pub fn with_delta(&self, delta: f64) -> KernelSpec {
        KernelSpec {
            delta,
            ..self.clone()
        }
    }
}

/// Maps the user smoothness κ to a length-scale.
///
/// Normalized so κ = 1 gives the full grid range; κ ∈ {3, 1, 1/3} then
/// yields length-scales in ratio 1:3:9. κ → ∞ collapses the kernel to a
/// diagonal; a degenerate single-point grid always maps to the constant
/// limit.
pub fn kappa_to_lengthscale(kappa: f64, grid: &TargetGrid) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let range = grid.range();
    if range <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(range / kappa)
}

/// Cached factorizations of the leaf-curve covariance.
#[derive(Debug, Clone)]
pub enum FactoredKernel {
    Smooth {
        /// T×T covariance C (jitter included).
        c: DMatrix<f64>,
        /// Precision K = C⁻¹.
        k: DMatrix<f64>,
        /// Lower Cholesky factor of C.
        chol_c: DMatrix<f64>,
        /// log|K| = -log|C|.
        logdet_k: f64,
    },
    /// Constant-leaf limit: the curve is a single scalar with variance `v`
    /// repeated over `t_len` grid points.
    Constant { v: f64, t_len: usize },
}

impl FactoredKernel {
    /// Grid length the curves live on.
    pub fn t_len(&self) -> usize {
        match self {
            FactoredKernel::Smooth { c, .. } => c.nrows(),
            FactoredKernel::Constant { t_len, .. } => *t_len,
        }
    }

    /// Effective dimension of one leaf's free parameters.
    pub fn dim(&self) -> usize {
        match self {
            FactoredKernel::Smooth { c, .. } => c.nrows(),
            FactoredKernel::Constant { .. } => 1,
        }
    }

    pub fn logdet_k(&self) -> f64 {
        match self {
            FactoredKernel::Smooth { logdet_k, .. } => *logdet_k,
            FactoredKernel::Constant { v, .. } => -v.ln(),
        }
    }

    /// Quadratic form mᵀK m of a leaf curve in this kernel's precision.
    pub fn quad_form(&self, curve: &[f64]) -> f64 {
        match self {
            FactoredKernel::Smooth { k, .. } => {
                let m = DVector::from_column_slice(curve);
                (m.transpose() * k * &m)[(0, 0)]
            }
            FactoredKernel::Constant { v, .. } => {
                let c = curve[0];
                c * c / v
            }
        }
    }

    /// Draws a leaf curve from the prior N(0, C).
    pub fn prior_draw(&self, rng: &mut crate::rngs::RngStream) -> Vec<f64> {
        match self {
            FactoredKernel::Smooth { chol_c, .. } => {
                let t = chol_c.nrows();
                let mean = DVector::zeros(t);
                crate::rngs::sample_mvn_cholesky(&mean, chol_c, rng)
                    .expect("cached factor is valid")
                    .as_slice()
                    .to_vec()
            }
            FactoredKernel::Constant { v, t_len } => {
                let c = rng.standard_normal() * v.sqrt();
                vec![c; *t_len]
            }
        }
    }
}

/// Builds the covariance and its factorizations, escalating jitter up to
/// three times (×10 each) before reporting the kernel singular.
pub fn build_kernel(spec: &KernelSpec, jitter: f64) -> Result<FactoredKernel> {
    spec.validate()?;
    let t = spec.grid.len();
    let v = spec.leaf_variance();

    if spec.lengthscale.is_infinite() || t == 1 {
        return Ok(FactoredKernel::Constant { v, t_len: t });
    }

    let values = spec.grid.values();
    let mut c = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..t {
            let d = (values[i] - values[j]) / spec.lengthscale;
            c[(i, j)] = v * (-0.5 * d * d).exp();
        }
    }

    let mut eps = jitter;
    for _ in 0..4 {
        let mut cj = c.clone();
        for i in 0..t {
            cj[(i, i)] += eps * v;
        }
        if let Some(chol) = cj.clone().cholesky() {
            let logdet_c: f64 = 2.0 * (0..t).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            let k = chol.inverse();
            return Ok(FactoredKernel::Smooth {
                c: cj,
                k,
                chol_c: chol.l(),
                logdet_k: -logdet_c,
            });
        }
        eps *= 10.0;
    }
    Err(Error::SingularKernel)
}
