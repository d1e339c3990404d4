//! Group-sparse IRLS for the mixed l2,p problem
//!
//! ```text
//! min_X  sum_n (|x_n|^2 + eps^2)^(p/2) + p/(2 lambda) |Y - H X|_F^2
//! ```
//!
//! where `x_n` is row `n` of X (one direction across all frames). Each step
//! solves the weighted quadratic majorizer in closed form,
//! `X <- D H^H (H D H^H + lambda I)^-1 Y` with
//! `D = diag((|x_n|^2 + eps^2)^(1 - p/2))`, which never increases the
//! objective at fixed `(p, eps, lambda)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modal::{whiten, ModalBasis};
use crate::propagation::{ObservationBlock, TransferMatrix};
use crate::C64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlsParams {
    pub p_init: f64,
    pub p_final: f64,
    /// Iterations run at `p_init` before switching to `p_final`.
    pub iters_p1: usize,
    pub max_iters: usize,
    /// Initial smoothing, relative to the largest row norm of the
    /// least-squares start.
    pub eps_init: f64,
    /// Smoothing floor, on the same relative scale.
    pub eps_floor: f64,
    pub reg_scale: f64,
    pub tol_rel_change: f64,
}

impl Default for IrlsParams {
    fn default() -> Self {
        Self {
            p_init: 1.0,
            p_final: 0.7,
            iters_p1: 10,
            max_iters: 50,
            eps_init: 1e-1,
            eps_floor: 1e-8,
            reg_scale: 1e-2,
            tol_rel_change: 1e-6,
        }
    }
}

impl IrlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_final && self.p_final <= self.p_init && self.p_init <= 2.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < p_final <= p_init <= 2, got p_final = {}, p_init = {}",
                self.p_final, self.p_init
            )));
        }
        if self.iters_p1 == 0 || self.max_iters == 0 {
            return Err(Error::InvalidConfig("iteration counts must be at least 1".into()));
        }
        if !(0.0 < self.eps_floor && self.eps_floor < self.eps_init) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eps_floor < eps_init, got {} and {}",
                self.eps_floor, self.eps_init
            )));
        }
        if !(self.reg_scale >= 0.0) || !(self.tol_rel_change > 0.0) {
            return Err(Error::InvalidConfig("reg_scale must be >= 0 and tol_rel_change > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// `|Y - H X|_F / |Y|_F` (0 for empty data).
    pub residual: f64,
    pub diffuseness: f64,
    pub lambda: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    /// N x T
    pub coefficients: DMatrix<C64>,
    /// Per-direction power summed over frames.
    pub energy: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Diffuseness from the eigenvalue spread of the sample covariance:
/// `psi = 1 - delta / delta_0` with `delta = sum |l_i - <l>| / (K <l>)` and
/// `delta_0 = 2 (K - 1) / K`. Zero covariance (and a single channel, where
/// spread is undefined) count as fully diffuse.
pub fn estimate_diffuseness(obs: &DMatrix<C64>) -> f64 {
    let k = obs.nrows();
    let t = obs.ncols().max(1);
    if k < 2 {
        return 1.0;
    }
    let cov = obs * obs.adjoint() / C64::from(t as f64);
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let mean = eig.sum() / k as f64;
    if !(mean > 0.0) {
        return 1.0;
    }
    let delta = eig.iter().map(|l| (l - mean).abs()).sum::<f64>() / (mean * k as f64);
    let delta0 = 2.0 * (k as f64 - 1.0) / k as f64;
    (1.0 - delta / delta0).clamp(0.0, 1.0)
}

/// Dictionary with a real stacked copy `[Re H; Im H]` so that the weighted
/// Gram products run through real GEMM.
#[derive(Debug, Clone)]
pub struct Dictionary {
    h: DMatrix<C64>,
    /// N x 2K, `[Re H; Im H]^T`
    stacked_t: DMatrix<f64>,
}

impl Dictionary {
    pub fn new(h: &DMatrix<C64>) -> Self {
        let (k, n) = h.shape();
        let stacked_t = DMatrix::from_fn(n, 2 * k, |j, i| if i < k { h[(i, j)].re } else { h[(i - k, j)].im });
        Self { h: h.clone(), stacked_t }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn cols(&self) -> usize {
        self.h.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.h
    }

    /// `H diag(d) H^H`
    pub fn weighted_gram(&self, d: &[f64]) -> DMatrix<C64> {
        let k = self.rows();
        let mut scaled = self.stacked_t.clone();
        for (mut row, w) in scaled.row_iter_mut().zip(d) {
            row *= *w;
        }
        // (2K x N) (N x 2K)
        let p = scaled.tr_mul(&self.stacked_t);
        DMatrix::from_fn(k, k, |i, j| {
            C64::new(p[(i, j)] + p[(i + k, j + k)], p[(i + k, j)] - p[(i, j + k)])
        })
    }

    /// `diag(d) H^H Z`
    pub fn weighted_adjoint_mul(&self, d: &[f64], z: &DMatrix<C64>) -> DMatrix<C64> {
        let (k, t) = (self.rows(), z.ncols());
        // [[Zr, Zi], [Zi, -Zr]] so that G^T Zs = [Re(H^H Z), Im(H^H Z)]
        let zs = DMatrix::from_fn(2 * k, 2 * t, |i, j| {
            let (row, upper) = if i < k { (i, true) } else { (i - k, false) };
            let (col, left) = if j < t { (j, true) } else { (j - t, false) };
            let v = z[(row, col)];
            match (upper, left) {
                (true, true) => v.re,
                (true, false) => v.im,
                (false, true) => v.im,
                (false, false) => -v.re,
            }
        });
        let w = &self.stacked_t * zs;
        DMatrix::from_fn(self.cols(), t, |n, j| C64::new(w[(n, j)], w[(n, j + t)]) * d[n])
    }
}

/// Smallest admissible lambda, relative to `trace(H D H^H) / K`.
const LAMBDA_FLOOR: f64 = 1e-12;

fn lambda_for(gram: &DMatrix<C64>, reg_scale: f64, psi: f64) -> f64 {
    let k = gram.nrows() as f64;
    let scale = gram.trace().re / k;
    (reg_scale * psi).max(LAMBDA_FLOOR) * scale
}

fn solve_hermitian(mut a: DMatrix<C64>, lambda: f64, rhs: &DMatrix<C64>) -> Option<DMatrix<C64>> {
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(rhs));
    }
    a.lu().solve(rhs)
}

fn row_norms_sq(x: &DMatrix<C64>) -> Vec<f64> {
    x.row_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum()).collect()
}

fn weights(x: &DMatrix<C64>, p: f64, eps: f64) -> Vec<f64> {
    row_norms_sq(x).into_iter().map(|s| (s + eps * eps).powf(1.0 - p / 2.0)).collect()
}

fn fro_sq(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// One closed-form reweighting step at fixed `(p, eps, lambda)`.
pub fn irls_step(dict: &Dictionary, obs: &DMatrix<C64>, x: &DMatrix<C64>, p: f64, eps: f64, lambda: f64) -> Result<DMatrix<C64>> {
    let d = weights(x, p, eps);
    let gram = dict.weighted_gram(&d);
    let z = solve_hermitian(gram, lambda, obs)
        .ok_or_else(|| Error::Numerical { frequency: f64::NAN, message: "singular IRLS system".into() })?;
    Ok(dict.weighted_adjoint_mul(&d, &z))
}

/// Objective majorized by [`irls_step`] at fixed `(p, eps, lambda)`.
pub fn surrogate_objective(dict: &Dictionary, obs: &DMatrix<C64>, x: &DMatrix<C64>, p: f64, eps: f64, lambda: f64) -> f64 {
    let penalty: f64 = row_norms_sq(x).into_iter().map(|s| (s + eps * eps).powf(p / 2.0)).sum();
    let residual = fro_sq(&(obs - dict.matrix() * x));
    penalty + p / (2.0 * lambda) * residual
}

fn check_inputs(dictionary: &DMatrix<C64>, obs: &DMatrix<C64>) -> Result<()> {
    if dictionary.nrows() != obs.nrows() {
        return Err(Error::InvalidArgument(format!(
            "dictionary has {} rows, observations have {}",
            dictionary.nrows(),
            obs.nrows()
        )));
    }
    if dictionary.nrows() > dictionary.ncols() {
        return Err(Error::InvalidArgument(format!(
            "dictionary is {}x{}; need at most as many rows as columns",
            dictionary.nrows(),
            dictionary.ncols()
        )));
    }
    if obs.ncols() == 0 {
        return Err(Error::InvalidArgument("no observation frames".into()));
    }
    let finite = |m: &DMatrix<C64>| m.iter().all(|z| z.re.is_finite() && z.im.is_finite());
    if !finite(dictionary) || !finite(obs) {
        return Err(Error::InvalidArgument("non-finite input".into()));
    }
    Ok(())
}

pub fn irls_solve(dictionary: &DMatrix<C64>, obs: &DMatrix<C64>, params: &IrlsParams) -> Result<SparseSolution> {
    params.validate()?;
    check_inputs(dictionary, obs)?;
    let dict = Dictionary::new(dictionary);
    let psi = estimate_diffuseness(obs);
    let obs_norm = fro_sq(obs).sqrt();

    // minimum-norm (regularized) least squares start
    let ones = vec![1.0; dict.cols()];
    let gram = dict.weighted_gram(&ones);
    let mut lambda = lambda_for(&gram, params.reg_scale, psi);
    let z = solve_hermitian(gram, lambda, obs)
        .ok_or_else(|| Error::Numerical { frequency: f64::NAN, message: "singular least-squares start".into() })?;
    let mut x = dict.weighted_adjoint_mul(&ones, &z);

    let scale = row_norms_sq(&x).into_iter().fold(0.0, f64::max).sqrt();
    let mut iterations = 1;
    let mut converged = false;
    if scale > 0.0 {
        let sqrt_tol = params.tol_rel_change.sqrt();
        let eps_min = params.eps_floor * scale;
        let mut eps = params.eps_init * scale;
        for it in 1..=params.max_iters {
            let p = if it <= params.iters_p1 { params.p_init } else { params.p_final };
            let d = weights(&x, p, eps);
            let gram = dict.weighted_gram(&d);
            lambda = lambda_for(&gram, params.reg_scale, psi);
            let z = solve_hermitian(gram, lambda, obs)
                .ok_or_else(|| Error::Numerical { frequency: f64::NAN, message: format!("singular IRLS system at iteration {it}") })?;
            let next = dict.weighted_adjoint_mul(&d, &z);
            let change = fro_sq(&(&next - &x)).sqrt() / fro_sq(&x).sqrt().max(f64::MIN_POSITIVE);
            x = next;
            iterations = it + 1;
            if it > params.iters_p1 && change < params.tol_rel_change {
                converged = true;
                break;
            }
            if change < sqrt_tol {
                eps = (eps / 10.0).max(eps_min);
            }
        }
    } else {
        converged = true;
    }

    let residual = if obs_norm > 0.0 { fro_sq(&(obs - dictionary * &x)).sqrt() / obs_norm } else { 0.0 };
    let energy = row_norms_sq(&x);
    Ok(SparseSolution {
        coefficients: x,
        energy,
        diagnostics: Diagnostics { iterations, residual, diffuseness: psi, lambda, converged },
    })
}

fn check_frequency(block: f64, model: f64) -> Result<()> {
    if (block - model).abs() > 1e-9 * model.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "observation block at {block} Hz does not match model at {model} Hz"
        )));
    }
    Ok(())
}

/// Modal recovery: whiten with the (truncated) basis, then solve on `V_K^H`.
pub fn recover(block: &ObservationBlock, basis: &ModalBasis, params: &IrlsParams) -> Result<SparseSolution> {
    check_frequency(block.frequency, basis.frequency)?;
    let w = whiten(basis, &block.snapshots)?;
    irls_solve(&w.dictionary, &w.observations, params).map_err(|e| with_frequency(e, block.frequency))
}

/// Direct recovery on the raw transfer matrix (joint concatenation, or a
/// sub-array when given the matching rows).
pub fn recover_joint(block: &ObservationBlock, h: &TransferMatrix, params: &IrlsParams) -> Result<SparseSolution> {
    check_frequency(block.frequency, h.frequency)?;
    irls_solve(&h.entries, &block.snapshots, params).map_err(|e| with_frequency(e, block.frequency))
}

fn with_frequency(e: Error, frequency: f64) -> Error {
    match e {
        Error::Numerical { message, .. } => Error::Numerical { frequency, message },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_direction_grid, build_hybrid, HybridConfig};
    use crate::modal::{svd_decompose, truncate};
    use crate::propagation::plane_wave_matrix;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<C64> {
        let mut r = rng::stream(seed, &[]);
        DMatrix::from_fn(rows, cols, |_, _| C64::new(r.sample(StandardNormal), r.sample(StandardNormal)))
    }

    #[test]
    fn fast_products_match_complex_reference() {
        let h = random_matrix(7, 23, 1);
        let z = random_matrix(7, 3, 2);
        let d: Vec<f64> = (0..23).map(|i| 0.1 + i as f64 * 0.3).collect();
        let dict = Dictionary::new(&h);
        let dm = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(23, d.iter().map(|v| C64::from(*v))));
        let gram_ref = &h * &dm * h.adjoint();
        let prod_ref = &dm * h.adjoint() * &z;
        assert!((dict.weighted_gram(&d) - gram_ref).iter().all(|e| e.norm() < 1e-10));
        assert!((dict.weighted_adjoint_mul(&d, &z) - prod_ref).iter().all(|e| e.norm() < 1e-10));
    }

    fn with_eigenvalues(values: &[f64], seed: u64) -> DMatrix<C64> {
        // Y = Q diag(sqrt(l)) so that Y Y^H / T has the requested spectrum
        let k = values.len();
        let q = random_matrix(k, k, seed).qr().q();
        let t = k as f64;
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, values.iter().map(|l| C64::from((l * t).sqrt()))));
        q * s
    }

    #[test]
    fn diffuseness_cases() {
        assert_abs_diff_eq!(estimate_diffuseness(&with_eigenvalues(&[1.0; 6], 3)), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_diffuseness(&with_eigenvalues(&[5.0, 0.0, 0.0, 0.0], 4)), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_diffuseness(&with_eigenvalues(&[3.0, 1.0], 5)), 0.5, epsilon = 1e-12);
        assert_eq!(estimate_diffuseness(&DMatrix::zeros(4, 8)), 1.0);
        // single snapshot is rank one
        assert_abs_diff_eq!(estimate_diffuseness(&random_matrix(5, 1, 6)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diffuseness_invariances() {
        let y = random_matrix(6, 10, 7);
        let psi = estimate_diffuseness(&y);
        let q = random_matrix(6, 6, 8).qr().q();
        assert_abs_diff_eq!(estimate_diffuseness(&(&q * &y)), psi, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_diffuseness(&(&y * C64::from(17.0))), psi, epsilon = 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(IrlsParams::default().validate().is_ok());
        let bad = IrlsParams { p_final: 1.2, ..IrlsParams::default() };
        assert!(bad.validate().is_err());
        let bad = IrlsParams { eps_floor: 1.0, ..IrlsParams::default() };
        assert!(bad.validate().is_err());
        let bad = IrlsParams { max_iters: 0, ..IrlsParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let h = random_matrix(8, 30, 9);
        let sol = irls_solve(&h, &DMatrix::zeros(8, 4), &IrlsParams::default()).unwrap();
        assert!(sol.coefficients.iter().all(|z| *z == C64::new(0.0, 0.0)));
        assert_eq!(sol.diagnostics.iterations, 1);
        assert!(sol.energy.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let h = random_matrix(8, 30, 9);
        assert!(irls_solve(&h, &DMatrix::zeros(7, 4), &IrlsParams::default()).is_err());
        assert!(irls_solve(&h.transpose(), &DMatrix::zeros(30, 4), &IrlsParams::default()).is_err());
    }

    #[test]
    fn objective_is_monotone_at_fixed_parameters() {
        for seed in 0..5 {
            let h = random_matrix(6, 24, 100 + seed);
            let y = random_matrix(6, 3, 200 + seed);
            let dict = Dictionary::new(&h);
            let (p, eps, lambda) = (0.7, 0.05, 0.3);
            let mut x = irls_step(&dict, &y, &DMatrix::from_element(24, 3, C64::new(1.0, 0.0)), 1.0, 1.0, lambda).unwrap();
            let mut prev = surrogate_objective(&dict, &y, &x, p, eps, lambda);
            for _ in 0..30 {
                x = irls_step(&dict, &y, &x, p, eps, lambda).unwrap();
                let j = surrogate_objective(&dict, &y, &x, p, eps, lambda);
                assert!(j <= prev + 1e-10 * prev.abs().max(1.0), "{j} > {prev}");
                prev = j;
            }
        }
    }

    fn hybrid_setup(f: f64) -> (DMatrix<C64>, crate::geometry::DirectionGrid) {
        let array = build_hybrid(&HybridConfig::default()).unwrap();
        let grid = build_direction_grid(3).unwrap();
        (plane_wave_matrix(&array, &grid, f).unwrap().entries, grid)
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
    }

    #[test]
    fn single_on_grid_source_is_recovered() {
        let (h, _) = hybrid_setup(1700.0);
        let truth = 417;
        let y = h.columns(truth, 1).into_owned() * C64::new(0.8, -0.6);
        // oracle: exhaustive matched-filter scan over all columns
        let scores: Vec<f64> = (0..h.ncols()).map(|n| (h.column(n).adjoint() * &y)[(0, 0)].norm()).collect();
        assert_eq!(argmax(&scores), truth);
        let sol = irls_solve(&h, &y, &IrlsParams::default()).unwrap();
        assert_eq!(argmax(&sol.energy), truth);
        let total: f64 = sol.energy.iter().sum();
        assert!(sol.energy[truth] / total > 0.99);
        assert!(sol.diagnostics.diffuseness < 1e-12);
    }

    #[test]
    fn scaling_data_scales_solution() {
        let (h, _) = hybrid_setup(900.0);
        let y = h.columns(20, 1) * C64::new(1.0, 0.5) + h.columns(300, 1) * C64::new(-0.5, 0.2);
        let a = irls_solve(&h, &y, &IrlsParams::default()).unwrap();
        let b = irls_solve(&h, &(&y * C64::from(3.0)), &IrlsParams::default()).unwrap();
        assert_eq!(argmax(&a.energy), argmax(&b.energy));
        for (ea, eb) in a.energy.iter().zip(&b.energy) {
            assert!((eb - 9.0 * ea).abs() <= 1e-6 * (9.0 * ea).max(1e-12) + 1e-9);
        }
    }

    #[test]
    fn modal_pipeline_recovers_single_source() {
        let (h, _) = hybrid_setup(2100.0);
        let tm = TransferMatrix { entries: h.clone(), frequency: 2100.0, array_tag: "h".into(), grid_tag: "g".into() };
        let basis = truncate(&svd_decompose(&tm).unwrap(), 16).unwrap();
        let truth = 77;
        let block = ObservationBlock { frequency: 2100.0, snapshots: h.columns(truth, 1).into_owned(), truth: vec![], seed: 0 };
        let sol = recover(&block, &basis, &IrlsParams::default()).unwrap();
        assert_eq!(sol.energy.len(), 642);
        assert_eq!(argmax(&sol.energy), truth);

        let joint = recover_joint(&block, &tm, &IrlsParams::default()).unwrap();
        assert_eq!(argmax(&joint.energy), truth);

        let wrong = ObservationBlock { frequency: 2000.0, ..block };
        assert!(recover(&wrong, &basis, &IrlsParams::default()).is_err());
    }
}
