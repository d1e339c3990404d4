//! Microphone array layouts, icosahedral direction grids and angular
//! helpers. Coordinates are right-handed, in meters, with the spherical
//! array centered at the origin.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Sub-array a microphone belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubArray {
    Sma,
    Lma(usize),
}

impl fmt::Display for SubArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubArray::Sma => write!(f, "SMA"),
            SubArray::Lma(i) => write!(f, "LMA{i}"),
        }
    }
}

/// Ordered microphone positions with sub-array labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArray {
    positions: Vec<Vec3>,
    labels: Vec<SubArray>,
}

impl MicArray {
    pub fn new(positions: Vec<Vec3>, labels: Vec<SubArray>) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} positions but {} labels",
                positions.len(),
                labels.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfig(format!("microphone {i} has a non-finite position")));
        }
        Ok(Self { positions, labels })
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn labels(&self) -> &[SubArray] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Indices of the microphones carrying `label`.
    pub fn indices_of(&self, label: SubArray) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// The spherical sub-array alone, in original order.
    pub fn sma_only(&self) -> MicArray {
        let idx = self.indices_of(SubArray::Sma);
        MicArray {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            labels: vec![SubArray::Sma; idx.len()],
        }
    }

    /// Smallest distance between any two microphones (brute force).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                best = best.min((a - b).norm());
            }
        }
        best
    }

    fn concat(mut self, other: MicArray) -> Self {
        self.positions.extend(other.positions);
        self.labels.extend(other.labels);
        self
    }
}

/// Open spherical array on a spherical Fibonacci lattice.
pub fn build_sma(n_mics: usize, radius: f64) -> Result<MicArray> {
    if n_mics < 4 {
        return Err(Error::InvalidConfig(format!("SMA needs at least 4 microphones, got {n_mics}")));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!("SMA radius must be positive, got {radius}")));
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let n = n_mics as f64;
    let positions = (0..n_mics)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            radius * Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect();
    MicArray::new(positions, vec![SubArray::Sma; n_mics])
}

/// Uniform linear array centered at `center` along `axis`. The axis is
/// normalized; `index` becomes the sub-array label.
pub fn build_lma(n_mics: usize, spacing: f64, center: Vec3, axis: Vec3, index: usize) -> Result<MicArray> {
    if n_mics < 2 {
        return Err(Error::InvalidConfig(format!("LMA needs at least 2 microphones, got {n_mics}")));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidConfig(format!("LMA spacing must be positive, got {spacing}")));
    }
    let norm = axis.norm();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::InvalidConfig("LMA axis must be non-zero".into()));
    }
    let axis = axis / norm;
    let half = (n_mics as f64 - 1.0) / 2.0;
    let positions = (0..n_mics)
        .map(|i| center + axis * ((i as f64 - half) * spacing))
        .collect();
    MicArray::new(positions, vec![SubArray::Lma(index); n_mics])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmaAxes {
    /// Horizontal, perpendicular to the offset from the SMA center.
    Tangential,
    /// Horizontal, along the offset from the SMA center.
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaConfig {
    pub count: usize,
    pub radius_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmaConfig {
    /// Number of linear arrays, spread evenly in azimuth starting at +x.
    #[serde(default = "default_lma_arrays")]
    pub arrays: usize,
    pub count_each: usize,
    pub spacing_m: f64,
    pub offset_m: f64,
    #[serde(default = "default_axes")]
    pub axes: LmaAxes,
}

fn default_lma_arrays() -> usize {
    4
}

fn default_axes() -> LmaAxes {
    LmaAxes::Tangential
}

/// Hybrid array description; the default is the 64 + 4x8 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub sma: SmaConfig,
    pub lma: LmaConfig,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            sma: SmaConfig { count: 64, radius_m: 0.10 },
            lma: LmaConfig {
                arrays: 4,
                count_each: 8,
                spacing_m: 0.04,
                offset_m: 0.5,
                axes: LmaAxes::Tangential,
            },
        }
    }
}

impl HybridConfig {
    pub fn sma_only(&self) -> Self {
        let mut cfg = self.clone();
        cfg.lma.arrays = 0;
        cfg
    }
}

/// SMA block followed by the LMAs in index order.
pub fn build_hybrid(config: &HybridConfig) -> Result<MicArray> {
    let mut array = build_sma(config.sma.count, config.sma.radius_m)?;
    let lma = &config.lma;
    for i in 0..lma.arrays {
        // Snap to exact axis-aligned values so the default layout is exact.
        let theta = 2.0 * PI * i as f64 / lma.arrays as f64;
        let (s, c) = (snap(theta.sin()), snap(theta.cos()));
        let radial = Vec3::new(c, s, 0.0);
        let axis = match lma.axes {
            LmaAxes::Tangential => Vec3::new(-s, c, 0.0),
            LmaAxes::Radial => radial,
        };
        let sub = build_lma(lma.count_each, lma.spacing_m, radial * lma.offset_m, axis, i)?;
        array = array.concat(sub);
    }
    let min = array.min_pairwise_distance();
    if array.len() > 1 && min < 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "overlapping microphones (min pairwise distance {min:e} m)"
        )));
    }
    Ok(array)
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-12 {
        r
    } else {
        x
    }
}

/// Unit-sphere directions from a subdivided icosahedron, with mesh
/// adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    level: usize,
    directions: Vec<Vec3>,
    adjacency: Vec<Vec<usize>>,
}

pub const MAX_GRID_LEVEL: usize = 6;

impl DirectionGrid {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn direction(&self, i: usize) -> Vec3 {
        self.directions[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Index of the vertex closest to `dir` (lowest index on ties).
    pub fn nearest(&self, dir: &Vec3) -> usize {
        let d = normalized(dir);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in self.directions.iter().enumerate() {
            let c = v.dot(&d);
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }

    /// Largest angular distance from vertex `i` to any of its neighbors.
    pub fn cell_radius(&self, i: usize) -> f64 {
        self.adjacency[i]
            .iter()
            .map(|&j| angular_distance(&self.directions[i], &self.directions[j]))
            .fold(0.0, f64::max)
    }
}

const ICOSAHEDRON_FACES: [[usize; 3]; 20] = [
    [0, 11, 5],
    [0, 5, 1],
    [0, 1, 7],
    [0, 7, 10],
    [0, 10, 11],
    [1, 5, 9],
    [5, 11, 4],
    [11, 10, 2],
    [10, 7, 6],
    [7, 1, 8],
    [3, 9, 4],
    [3, 4, 2],
    [3, 2, 6],
    [3, 6, 8],
    [3, 8, 9],
    [4, 9, 5],
    [2, 4, 11],
    [6, 2, 10],
    [8, 6, 7],
    [9, 8, 1],
];

pub fn build_direction_grid(level: usize) -> Result<DirectionGrid> {
    if level > MAX_GRID_LEVEL {
        return Err(Error::InvalidConfig(format!(
            "grid level {level} outside 0..={MAX_GRID_LEVEL}"
        )));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = ICOSAHEDRON_FACES.to_vec();

    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                vertices.push((vertices[a] + vertices[b]).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    let mut adjacency = vec![BTreeSet::new(); vertices.len()];
    for &[a, b, c] in &faces {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            adjacency[u].insert(v);
            adjacency[v].insert(u);
        }
    }
    Ok(DirectionGrid {
        level,
        directions: vertices,
        adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

fn normalized(v: &Vec3) -> Vec3 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        *v
    }
}

/// Angle between two directions in [0, pi]. Inputs are normalized first.
pub fn angular_distance(a: &Vec3, b: &Vec3) -> f64 {
    normalized(a).dot(&normalized(b)).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sma_on_sphere() {
        let a = build_sma(64, 0.10).unwrap();
        assert_eq!(a.len(), 64);
        for p in a.positions() {
            assert_abs_diff_eq!(p.norm(), 0.10, epsilon = 1e-9);
        }
        assert!(a.labels().iter().all(|l| *l == SubArray::Sma));
    }

    #[test]
    fn sma_minimal_and_spacing() {
        let a = build_sma(4, 1.0).unwrap();
        for p in a.positions() {
            assert_abs_diff_eq!(p.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(a.min_pairwise_distance() > 0.0);
        assert!(build_sma(64, 0.10).unwrap().min_pairwise_distance() > 0.03);
    }

    #[test]
    fn sma_rejects_bad_config() {
        assert!(matches!(build_sma(3, 0.1), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_sma(64, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_sma(64, -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lma_layout() {
        let a = build_lma(8, 0.04, Vec3::new(0.5, 0.0, 0.0), Vec3::y(), 0).unwrap();
        let p = a.positions();
        assert_abs_diff_eq!((p[7] - p[0]).norm(), 0.28, epsilon = 1e-12);
        let mean = p.iter().fold(Vec3::zeros(), |acc, q| acc + q) / 8.0;
        assert_abs_diff_eq!((mean - Vec3::new(0.5, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        for w in p.windows(2) {
            assert_abs_diff_eq!((w[1] - w[0]).norm(), 0.04, epsilon = 1e-12);
        }

        let b = build_lma(2, 1.0, Vec3::zeros(), Vec3::x(), 0).unwrap();
        assert_abs_diff_eq!((b.positions()[0] - Vec3::new(-0.5, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((b.positions()[1] - Vec3::new(0.5, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);

        assert!(build_lma(8, 0.04, Vec3::zeros(), Vec3::zeros(), 0).is_err());
        assert!(build_lma(1, 0.04, Vec3::zeros(), Vec3::x(), 0).is_err());
    }

    #[test]
    fn default_hybrid() {
        let a = build_hybrid(&HybridConfig::default()).unwrap();
        assert_eq!(a.len(), 96);
        assert!(a.labels()[..64].iter().all(|l| *l == SubArray::Sma));
        for i in 0..4 {
            let idx = a.indices_of(SubArray::Lma(i));
            assert_eq!(idx.len(), 8);
            // tangential: the axis is perpendicular to the center offset
            let p = a.positions();
            let axis = (p[idx[7]] - p[idx[0]]).normalize();
            let center = (p[idx[3]] + p[idx[4]]) / 2.0;
            assert_abs_diff_eq!(center.norm(), 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(axis.dot(&center), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(axis.z, 0.0, epsilon = 1e-15);
        }
        let centers: Vec<Vec3> = (0..4)
            .map(|i| {
                let idx = a.indices_of(SubArray::Lma(i));
                (a.positions()[idx[3]] + a.positions()[idx[4]]) / 2.0
            })
            .collect();
        for want in [(0.5, 0.0), (0.0, 0.5), (-0.5, 0.0), (0.0, -0.5)] {
            assert!(centers
                .iter()
                .any(|c| (c - Vec3::new(want.0, want.1, 0.0)).norm() < 1e-12));
        }
    }

    #[test]
    fn hybrid_without_lmas_is_sma() {
        let cfg = HybridConfig::default().sma_only();
        assert_eq!(build_hybrid(&cfg).unwrap(), build_sma(64, 0.10).unwrap());
    }

    #[test]
    fn hybrid_rejects_overlap() {
        let mut cfg = HybridConfig::default();
        // LMA centered at the origin through the SMA pole axis does not
        // overlap, but a 0-offset LMA pair does.
        cfg.lma.offset_m = 0.0;
        cfg.lma.arrays = 2;
        cfg.lma.axes = LmaAxes::Radial;
        assert!(matches!(build_hybrid(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn hybrid_config_json() {
        let json = r#"{"sma":{"count":64,"radius_m":0.1},
            "lma":{"count_each":8,"spacing_m":0.04,"offset_m":0.5,"axes":"tangential"}}"#;
        let cfg: HybridConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, HybridConfig::default());
    }

    #[test]
    fn grid_counts() {
        for level in 0..=4 {
            let g = build_direction_grid(level).unwrap();
            assert_eq!(g.len(), 10 * 4usize.pow(level as u32) + 2);
        }
        assert_eq!(build_direction_grid(3).unwrap().len(), 642);
        assert!(build_direction_grid(7).is_err());
    }

    #[test]
    fn grid_mesh_level1() {
        let g = build_direction_grid(1).unwrap();
        assert_eq!(g.len(), 42);
        // brute force: neighbors are exactly the vertices at the minimal
        // edge-length scale, and the relation is symmetric
        for i in 0..g.len() {
            let n = g.neighbors(i);
            assert!(n.len() == 5 || n.len() == 6, "vertex {i} has {} neighbors", n.len());
            for &j in n {
                assert!(g.neighbors(j).contains(&i));
            }
        }
        let fives = (0..g.len()).filter(|&i| g.neighbors(i).len() == 5).count();
        assert_eq!(fives, 12);
    }

    #[test]
    fn grid_unit_norm_and_symmetric() {
        let g = build_direction_grid(3).unwrap();
        for (i, d) in g.directions().iter().enumerate() {
            assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-12);
            let n = g.neighbors(i);
            assert!(n.len() == 5 || n.len() == 6);
            for &j in n {
                assert!(g.neighbors(j).contains(&i));
            }
        }
        assert_eq!(g, build_direction_grid(3).unwrap());
    }

    #[test]
    fn angular_distance_axes() {
        let x = Vec3::x();
        assert_eq!(angular_distance(&x, &x), 0.0);
        assert_abs_diff_eq!(angular_distance(&x, &-x), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(angular_distance(&x, &Vec3::y()), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(angular_distance(&(2.0 * x), &Vec3::y()), PI / 2.0, epsilon = 1e-15);
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, 0.0f64..2.0 * PI).prop_map(|(z, phi)| {
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
    }

    proptest! {
        #[test]
        fn angular_distance_metric(a in unit(), b in unit(), c in unit()) {
            let ab = angular_distance(&a, &b);
            prop_assert!((ab - angular_distance(&b, &a)).abs() < 1e-15);
            prop_assert!((0.0..=PI).contains(&ab));
            prop_assert!(ab <= angular_distance(&a, &c) + angular_distance(&c, &b) + 1e-12);
        }
    }
}
