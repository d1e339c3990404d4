//! SVD modal decomposition of the transfer matrix, truncation and
//! whitening, real spherical-harmonic reference bases, principal angles
//! between subspaces, and a modal directivity index.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, DirectionGrid, MicArray, Vec3};
use crate::propagation::{plane_wave_matrix, TransferMatrix};
use crate::C64;

/// Modes whose singular value falls below this fraction of the largest
/// cannot be whitened.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Relative tolerance under which neighboring singular values are
/// considered one degenerate cluster.
pub const DEGENERACY_TOL: f64 = 1e-8;

const SVD_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalBasis {
    /// M x r microphone modes.
    pub u: DMatrix<C64>,
    /// r singular values, descending.
    pub sigma: DVector<f64>,
    /// N x r field modes.
    pub v: DMatrix<C64>,
    /// Number of modes in use.
    pub k: usize,
    pub frequency: f64,
    /// Index ranges of (near-)equal singular values, length >= 2.
    pub degenerate: Vec<Range<usize>>,
}

impl ModalBasis {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// The first `k` field modes as an N x k matrix.
    pub fn field_modes(&self) -> DMatrix<C64> {
        self.v.columns(0, self.k).into_owned()
    }

    pub fn mic_modes(&self) -> DMatrix<C64> {
        self.u.columns(0, self.k).into_owned()
    }

    /// `U_K diag(sigma_K) V_K^H`
    pub fn reconstruct(&self) -> DMatrix<C64> {
        let mut us = self.mic_modes();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= C64::from(self.sigma[j]);
        }
        us * self.field_modes().adjoint()
    }
}

fn degenerate_clusters(sigma: &DVector<f64>) -> Vec<Range<usize>> {
    let Some(&top) = sigma.iter().next() else {
        return Vec::new();
    };
    let tol = DEGENERACY_TOL * top.max(f64::MIN_POSITIVE);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=sigma.len() {
        if i == sigma.len() || (sigma[i - 1] - sigma[i]).abs() > tol {
            if i - start >= 2 {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// Thin SVD with singular values in descending order.
pub fn svd_decompose(h: &TransferMatrix) -> Result<ModalBasis> {
    let f = h.frequency;
    if h.entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical { frequency: f, message: "transfer matrix has non-finite entries".into() });
    }
    let svd = h
        .entries
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numerical { frequency: f, message: "SVD did not converge".into() })?;
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v requested").adjoint();
    let sigma = svd.singular_values;
    let degenerate = degenerate_clusters(&sigma);
    Ok(ModalBasis { k: sigma.len(), u, sigma, v, frequency: f, degenerate })
}

/// Keeps the `k` dominant modes.
pub fn truncate(basis: &ModalBasis, k: usize) -> Result<ModalBasis> {
    if k == 0 || k > basis.rank() {
        return Err(Error::InvalidArgument(format!("truncation rank {k} outside 1..={}", basis.rank())));
    }
    let degenerate = basis
        .degenerate
        .iter()
        .filter(|r| r.start < k)
        .map(|r| r.start..r.end.min(k))
        .filter(|r| r.len() >= 2)
        .collect();
    Ok(ModalBasis {
        u: basis.u.columns(0, k).into_owned(),
        sigma: basis.sigma.rows(0, k).into_owned(),
        v: basis.v.columns(0, k).into_owned(),
        k,
        frequency: basis.frequency,
        degenerate,
    })
}

/// Observations and dictionary in the whitened modal domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    /// K x T, `diag(sigma_K)^-1 U_K^H y`
    pub observations: DMatrix<C64>,
    /// K x N, `V_K^H`
    pub dictionary: DMatrix<C64>,
}

/// Projects `y` (M x T) onto the first `k` microphone modes and divides by
/// the singular values, so that `y = H x` maps to `y~ = V_K^H x`.
pub fn whiten(basis: &ModalBasis, y: &DMatrix<C64>) -> Result<Whitened> {
    if y.nrows() != basis.u.nrows() {
        return Err(Error::InvalidArgument(format!(
            "observations have {} rows, basis has {} microphones",
            y.nrows(),
            basis.u.nrows()
        )));
    }
    let floor = SIGMA_FLOOR * basis.sigma[0];
    if let Some(mode) = (0..basis.k).find(|&i| !(basis.sigma[i] > floor)) {
        return Err(Error::RankDeficient { mode, sigma: basis.sigma[mode], floor });
    }
    let mut observations = basis.mic_modes().adjoint() * y;
    for (i, mut row) in observations.row_iter_mut().enumerate() {
        row /= C64::from(basis.sigma[i]);
    }
    Ok(Whitened { observations, dictionary: basis.field_modes().adjoint() })
}

/// Real spherical harmonics of degree <= order evaluated on a grid, with
/// columns orthonormalized under the plain discrete inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct ShBasis {
    pub order: usize,
    /// N x (order + 1)^2
    pub matrix: DMatrix<f64>,
}

impl ShBasis {
    pub fn to_complex(&self) -> DMatrix<C64> {
        self.matrix.map(C64::from)
    }
}

pub const MAX_SH_ORDER: usize = 6;

/// Associated Legendre functions `P_l^m(x)` for `0 <= m <= l <= order`,
/// indexed `[l][m]`, with the Condon-Shortley phase.
fn legendre_table(order: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    let mut pmm = 1.0;
    for m in 0..=order {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        p[m][m] = pmm;
        if m < order {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..=order {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m]) / (l - m) as f64;
        }
    }
    p
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l - m)! / (l + m)!
    ((l - m + 1)..=(l + m)).fold(1.0, |acc, i| acc / i as f64)
}

/// Orthonormal real spherical harmonics at `dir`, ACN ordering
/// (`index = l^2 + l + m`).
pub fn real_sh(order: usize, dir: &Vec3) -> Vec<f64> {
    let d = dir.normalize();
    let phi = d.y.atan2(d.x);
    let p = legendre_table(order, d.z.clamp(-1.0, 1.0));
    let mut out = vec![0.0; (order + 1) * (order + 1)];
    for l in 0..=order {
        let base = l * l + l;
        let n0 = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
        out[base] = n0 * p[l][0];
        for m in 1..=l {
            let n = n0 * (2.0 * factorial_ratio(l, m)).sqrt() * p[l][m];
            out[base + m] = n * (m as f64 * phi).cos();
            out[base - m] = n * (m as f64 * phi).sin();
        }
    }
    out
}

/// Modified Gram-Schmidt, applied twice.
fn orthonormalize_columns(mut a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for j in 0..a.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = a.column(i).dot(&a.column(j));
                let qi = a.column(i).into_owned();
                a.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let n = a.column(j).norm();
        if !(n > 1e-12) {
            return Err(Error::InvalidArgument(format!("spherical harmonic column {j} is degenerate on this grid")));
        }
        a.column_mut(j).unscale_mut(n);
    }
    Ok(a)
}

pub fn sh_matrix(grid: &DirectionGrid, order: usize) -> Result<ShBasis> {
    if order > MAX_SH_ORDER {
        return Err(Error::InvalidArgument(format!("SH order {order} outside 0..={MAX_SH_ORDER}")));
    }
    let cols = (order + 1) * (order + 1);
    if grid.len() < cols {
        return Err(Error::InvalidArgument(format!(
            "grid of {} directions cannot hold {cols} harmonics",
            grid.len()
        )));
    }
    let mut m = DMatrix::zeros(grid.len(), cols);
    for (i, d) in grid.directions().iter().enumerate() {
        for (j, y) in real_sh(order, d).into_iter().enumerate() {
            m[(i, j)] = y;
        }
    }
    Ok(ShBasis { order, matrix: orthonormalize_columns(m)? })
}

fn check_orthonormal(a: &DMatrix<C64>, name: &str) -> Result<()> {
    let gram = a.adjoint() * a;
    let dev = (gram - DMatrix::<C64>::identity(a.ncols(), a.ncols()))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if dev > 1e-6 {
        return Err(Error::InvalidArgument(format!("{name} columns are not orthonormal (Gram deviation {dev:e})")));
    }
    Ok(())
}

/// Principal angles in radians, ascending.
pub fn principal_angles(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "subspace bases have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    check_orthonormal(a, "first basis")?;
    check_orthonormal(b, "second basis")?;
    let cross = a.adjoint() * b;
    let sv = cross
        .try_svd(false, false, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numerical { frequency: f64::NAN, message: "SVD of cross-Gram did not converge".into() })?
        .singular_values;
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(0.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Mean principal angle in degrees.
pub fn mean_principal_angle(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<f64> {
    let angles = principal_angles(a, b)?;
    if angles.is_empty() {
        return Ok(0.0);
    }
    Ok(angles.iter().sum::<f64>() / angles.len() as f64 * 180.0 / PI)
}

/// SH order whose harmonic count equals `k`, if `k` is a perfect square.
pub fn sh_order_for_modes(k: usize) -> Option<usize> {
    let r = (k as f64).sqrt().round() as usize;
    (r >= 1 && r * r == k).then(|| r - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleRow {
    pub array: String,
    pub frequency: f64,
    pub k: usize,
    pub mean_angle_deg: f64,
}

/// Mean principal angle between the first K field modes of each array and
/// the SH subspace of matching dimension, for every frequency and K.
pub fn angle_sweep(arrays: &[(String, MicArray)], grid: &DirectionGrid, freqs: &[f64], ks: &[usize]) -> Result<Vec<AngleRow>> {
    let mut sh = Vec::with_capacity(ks.len());
    for &k in ks {
        let order = sh_order_for_modes(k)
            .ok_or_else(|| Error::InvalidArgument(format!("K = {k} does not match a complete SH order")))?;
        sh.push(sh_matrix(grid, order)?.to_complex());
    }
    let mut rows = Vec::new();
    for (name, array) in arrays {
        for &f in freqs {
            let basis = svd_decompose(&plane_wave_matrix(array, grid, f)?)?;
            for (&k, reference) in ks.iter().zip(&sh) {
                let modes = truncate(&basis, k)?.field_modes();
                rows.push(AngleRow {
                    array: name.clone(),
                    frequency: f,
                    k,
                    mean_angle_deg: mean_principal_angle(&modes, reference)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Directivity index (dB) of the rank-K modal beamformer steered at
/// `steering`. The beamformer applies the row of the truncated
/// pseudoinverse for the nearest grid direction, so its response over the
/// grid is that row of the projector `V_K V_K^H`. Grid quadrature weights
/// are uniform.
pub fn directivity_index(basis: &ModalBasis, grid: &DirectionGrid, steering: &Vec3) -> Result<f64> {
    if basis.v.nrows() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "basis has {} field samples, grid has {}",
            basis.v.nrows(),
            grid.len()
        )));
    }
    let n0 = grid.nearest(steering);
    let off = angular_distance(&grid.direction(n0), steering);
    if off > grid.cell_radius(n0) {
        return Err(Error::InvalidArgument(format!(
            "steering direction is {:.2} deg from the nearest grid vertex",
            off.to_degrees()
        )));
    }
    let v = basis.field_modes();
    let row = v.row(n0).into_owned();
    let response: Vec<f64> = (0..grid.len())
        .map(|q| (0..basis.k).map(|j| row[j] * v[(q, j)].conj()).sum::<C64>().norm_sqr())
        .collect();
    let mean = response.iter().sum::<f64>() / response.len() as f64;
    Ok(10.0 * (response[n0] / mean).log10())
}

/// Convenience wrapper: decomposes the array's transfer matrix at `f`,
/// keeps `k` modes (capped at the rank) and evaluates the directivity index.
pub fn array_directivity_index(array: &MicArray, grid: &DirectionGrid, f: f64, k: usize, steering: &Vec3) -> Result<f64> {
    let basis = svd_decompose(&plane_wave_matrix(array, grid, f)?)?;
    let k = k.min(basis.rank());
    directivity_index(&truncate(&basis, k)?, grid, steering)
}
