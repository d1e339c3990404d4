//! Energy-map scoring: kernel mismatch between maps and peak-based angular
//! error against ground-truth directions.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, DirectionGrid, Vec3};

/// Kernel support radius (15 degrees).
pub const KERNEL_RADIUS: f64 = PI / 12.0;
/// Search window around a true direction (20 degrees).
pub const PEAK_WINDOW: f64 = 20.0 * PI / 180.0;
/// Peaks below this fraction of the global maximum are ignored (-20 dB).
pub const PEAK_FLOOR: f64 = 0.01;
/// A candidate must reach this fraction of the strongest peak in the window.
pub const LOCAL_MAX_FRACTION: f64 = 0.8;

/// Linear kernel: 1 at zero distance, 0 from 15 degrees on.
pub fn kernel(angle: f64) -> f64 {
    (1.0 - angle / KERNEL_RADIUS).max(0.0)
}

/// Non-negative power per grid direction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    power: Vec<f64>,
    pub label: String,
}

impl EnergyMap {
    pub fn new(power: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if let Some(i) = power.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("energy map entry {i} is {} (must be finite and >= 0)", power[i])));
        }
        Ok(Self { power, label: label.into() })
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.power.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> EnergyMap {
        EnergyMap { power: self.power.iter().map(|p| p * c).collect(), label: self.label.clone() }
    }

    /// Rescaled to the given total power.
    pub fn normalized_to(&self, total: f64) -> Result<EnergyMap> {
        let t = self.total();
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("map '{}' has no power", self.label)));
        }
        Ok(self.scaled(total / t))
    }
}

/// Unit deltas at the grid vertices nearest to each true direction.
pub fn truth_map(grid: &DirectionGrid, directions: &[Vec3]) -> EnergyMap {
    let mut power = vec![0.0; grid.len()];
    for d in directions {
        power[grid.nearest(d)] += 1.0;
    }
    EnergyMap { power, label: "truth".into() }
}

/// Sparse table of non-zero kernel values between grid vertices.
#[derive(Debug, Clone)]
pub struct MismatchKernel {
    entries: Vec<Vec<(usize, f64)>>,
}

impl MismatchKernel {
    pub fn new(grid: &DirectionGrid) -> Self {
        let dirs = grid.directions();
        let entries = dirs
            .iter()
            .map(|a| {
                dirs.iter()
                    .enumerate()
                    .filter_map(|(j, b)| {
                        let k = kernel(angular_distance(a, b));
                        (k > 0.0).then_some((j, k))
                    })
                    .collect()
            })
            .collect();
        Self { entries }
    }

    fn cross(&self, a: &[f64], b: &[f64]) -> f64 {
        let sa: Vec<f64> = a.iter().map(|p| p.sqrt()).collect();
        let sb: Vec<f64> = b.iter().map(|p| p.sqrt()).collect();
        self.entries
            .iter()
            .zip(&sa)
            .filter(|(_, s)| **s > 0.0)
            .map(|(row, s)| s * row.iter().map(|&(j, k)| sb[j] * k).sum::<f64>())
            .sum()
    }

    pub fn mismatch(&self, a: &EnergyMap, b: &EnergyMap) -> Result<f64> {
        if a.len() != self.entries.len() || b.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "maps of size {} and {} on a grid of {}",
                a.len(),
                b.len(),
                self.entries.len()
            )));
        }
        for m in [a, b] {
            if !(m.total() > 0.0) {
                return Err(Error::InvalidArgument(format!("map '{}' has zero power", m.label)));
            }
        }
        let k11 = self.cross(a.power(), a.power());
        let k22 = self.cross(b.power(), b.power());
        let k12 = self.cross(a.power(), b.power());
        Ok(((k11 + k22 - 2.0 * k12) / (k11 + k22)).clamp(0.0, 1.0))
    }
}

/// `E = (K11 + K22 - 2 K12) / (K11 + K22)` with the linear 15-degree kernel.
pub fn energy_map_mismatch(grid: &DirectionGrid, a: &EnergyMap, b: &EnergyMap) -> Result<f64> {
    MismatchKernel::new(grid).mismatch(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

/// Strict local maxima over the mesh adjacency that lie within 20 dB of the
/// global maximum.
pub fn find_peaks(grid: &DirectionGrid, map: &EnergyMap) -> PeakSet {
    let power = map.power();
    let floor = PEAK_FLOOR * map.max();
    let peaks = (0..grid.len().min(power.len()))
        .filter(|&i| {
            let p = power[i];
            p > 0.0 && p >= floor && grid.neighbors(i).iter().all(|&j| p > power[j])
        })
        .map(|index| Peak { index, power: power[index] })
        .collect();
    PeakSet { peaks }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngularError {
    Hit(f64),
    Miss,
}

impl AngularError {
    /// Degrees, with a miss counted as the window radius.
    pub fn degrees_or_window(&self) -> f64 {
        match self {
            AngularError::Hit(a) => a.to_degrees(),
            AngularError::Miss => PEAK_WINDOW.to_degrees(),
        }
    }

    pub fn is_miss(&self) -> bool {
        matches!(self, AngularError::Miss)
    }
}

/// Picks the estimate from `(angle to truth, power)` candidates: among
/// those inside the window and reaching 80% of the strongest in-window
/// peak, the nearest one.
pub fn select_estimate(candidates: &[(f64, f64)]) -> AngularError {
    let in_window: Vec<(f64, f64)> = candidates.iter().copied().filter(|(a, _)| *a <= PEAK_WINDOW).collect();
    let local_max = in_window.iter().map(|c| c.1).fold(0.0, f64::max);
    in_window
        .iter()
        .filter(|(_, p)| *p >= LOCAL_MAX_FRACTION * local_max)
        .map(|c| c.0)
        .min_by(f64::total_cmp)
        .map_or(AngularError::Miss, AngularError::Hit)
}

pub fn angular_error(grid: &DirectionGrid, map: &EnergyMap, truth: &Vec3) -> AngularError {
    let candidates: Vec<(f64, f64)> = find_peaks(grid, map)
        .peaks
        .iter()
        .map(|p| (angular_distance(&grid.direction(p.index), truth), p.power))
        .collect();
    select_estimate(&candidates)
}

/// Per-map scores against a set of true directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapScore {
    pub mismatch: f64,
    /// Degrees; misses count as 20.
    pub mean_angular_error_deg: f64,
    pub miss_rate: f64,
}

/// Scores a recovered map. The map is first rescaled to the total power of
/// the ground-truth delta map (one unit per source).
pub fn score_map(grid: &DirectionGrid, kernel: &MismatchKernel, map: &EnergyMap, truth: &[Vec3]) -> Result<MapScore> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth directions".into()));
    }
    let reference = truth_map(grid, truth);
    let map = map.normalized_to(reference.total())?;
    let mismatch = kernel.mismatch(&map, &reference)?;
    let errors: Vec<AngularError> = truth.iter().map(|t| angular_error(grid, &map, t)).collect();
    let n = errors.len() as f64;
    Ok(MapScore {
        mismatch,
        mean_angular_error_deg: errors.iter().map(AngularError::degrees_or_window).sum::<f64>() / n,
        miss_rate: errors.iter().filter(|e| e.is_miss()).count() as f64 / n,
    })
}
