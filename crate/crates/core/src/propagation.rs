//! Plane-wave transfer matrices and narrowband scene synthesis.
//!
//! Phase convention: a plane wave arriving from unit direction `Ω` (pointing
//! from the array toward the source) has propagation vector `û = -Ω` and
//! produces `exp(+j k û·r)` at position `r`. The point-source Green's
//! function uses the matching sign, `exp(+j k d) / (4π d)`, so a distant
//! point source in direction `Ω` reduces to the plane-wave column for `Ω`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, DirectionGrid, MicArray, Vec3};
use crate::rng::{self, tag, Rng};
use crate::{wavenumber, C64};

/// M x N free-field transfer matrix at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub entries: DMatrix<C64>,
    pub frequency: f64,
    pub array_tag: String,
    pub grid_tag: String,
}

impl TransferMatrix {
    pub fn mics(&self) -> usize {
        self.entries.nrows()
    }

    pub fn directions(&self) -> usize {
        self.entries.ncols()
    }

    /// Keeps only the given microphone rows.
    pub fn select_rows(&self, rows: &[usize]) -> TransferMatrix {
        TransferMatrix {
            entries: self.entries.select_rows(rows),
            frequency: self.frequency,
            array_tag: format!("{}[{}]", self.array_tag, rows.len()),
            grid_tag: self.grid_tag.clone(),
        }
    }
}

/// Response of every microphone to a unit plane wave arriving from `direction`.
pub fn steering_vector(array: &MicArray, direction: &Vec3, f: f64) -> Vec<C64> {
    let k = wavenumber(f);
    let u = -direction.normalize();
    array
        .positions()
        .iter()
        .map(|r| C64::from_polar(1.0, k * u.dot(r)))
        .collect()
}

pub fn plane_wave_matrix(array: &MicArray, grid: &DirectionGrid, f: f64) -> Result<TransferMatrix> {
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::InvalidArgument(format!("frequency must be positive, got {f}")));
    }
    let k = wavenumber(f);
    let pos = array.positions();
    let dirs = grid.directions();
    let entries = DMatrix::from_fn(pos.len(), dirs.len(), |m, n| {
        C64::from_polar(1.0, -k * dirs[n].dot(&pos[m]))
    });
    Ok(TransferMatrix {
        entries,
        frequency: f,
        array_tag: format!("array{}", pos.len()),
        grid_tag: format!("ico{}-{}", grid.level(), dirs.len()),
    })
}

/// Shoebox room with frequency-independent wall absorption calibrated from
/// RT60 via Sabine's formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub dims_m: [f64; 3],
    pub rt60_s: f64,
    #[serde(default = "default_max_order")]
    pub max_order: u32,
    #[serde(default = "default_array_center")]
    pub array_center_m: [f64; 3],
}

pub const MAX_REFLECTION_ORDER: u32 = 6;

fn default_max_order() -> u32 {
    3
}

fn default_array_center() -> [f64; 3] {
    [4.5, 3.5, 1.5]
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            dims_m: [10.0, 8.0, 3.0],
            rt60_s: 0.3,
            max_order: default_max_order(),
            array_center_m: default_array_center(),
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.dims_m.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidConfig(format!("room dimensions must be positive: {:?}", self.dims_m)));
        }
        if !(self.rt60_s > 0.0) {
            return Err(Error::InvalidConfig(format!("rt60 must be positive, got {}", self.rt60_s)));
        }
        if self.max_order > MAX_REFLECTION_ORDER {
            return Err(Error::InvalidConfig(format!(
                "max reflection order {} exceeds {MAX_REFLECTION_ORDER}",
                self.max_order
            )));
        }
        if !self.contains(&self.array_center()) {
            return Err(Error::InvalidConfig("array center lies outside the room".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec3 {
        Vec3::from(self.dims_m)
    }

    pub fn array_center(&self) -> Vec3 {
        Vec3::from(self.array_center_m)
    }

    pub fn volume(&self) -> f64 {
        self.dims_m.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims_m;
        2.0 * (x * y + x * z + y * z)
    }

    /// Strictly inside the box.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.dims_m[i])
    }

    fn contains_with_margin(&self, p: &Vec3, margin: f64) -> bool {
        (0..3).all(|i| p[i] > margin && p[i] < self.dims_m[i] - margin)
    }
}

/// Sabine absorption `0.161 V / (S T60)`, clamped to (0, 1].
pub fn sabine_absorption(room: &RoomSpec) -> f64 {
    let alpha = 0.161 * room.volume() / (room.surface() * room.rt60_s);
    if alpha > 1.0 {
        log::warn!(
            "room {:?} is too small for RT60 {} s (alpha = {alpha:.3}); clamping to 1",
            room.dims_m,
            room.rt60_s
        );
        1.0
    } else {
        alpha.max(f64::MIN_POSITIVE)
    }
}

/// Image source with its total number of wall reflections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Vec3,
    pub reflections: u32,
}

/// All images of `src` up to `room.max_order` reflections, via the
/// lattice parametrization `(1 - 2q) s + 2 n L` per axis.
pub fn image_sources(room: &RoomSpec, src: &Vec3) -> Vec<ImageSource> {
    let order = room.max_order as i64;
    let reach = order / 2 + 1;
    let dims = room.dims();
    let mut out = Vec::new();
    for nx in -reach..=reach {
        for ny in -reach..=reach {
            for nz in -reach..=reach {
                for q in 0..8u8 {
                    let qs = [(q & 1) as i64, ((q >> 1) & 1) as i64, ((q >> 2) & 1) as i64];
                    let ns = [nx, ny, nz];
                    let count: i64 = (0..3).map(|i| (2 * ns[i] - qs[i]).abs()).sum();
                    if count > order {
                        continue;
                    }
                    let position = Vec3::from_fn(|i, _| {
                        (1 - 2 * qs[i]) as f64 * src[i] + 2.0 * ns[i] as f64 * dims[i]
                    });
                    out.push(ImageSource { position, reflections: count as u32 });
                }
            }
        }
    }
    out
}

fn green_sum(images: &[ImageSource], beta: f64, mic: &Vec3, k: f64) -> Result<C64> {
    let mut acc = C64::new(0.0, 0.0);
    for img in images {
        let d = (img.position - mic).norm();
        if d < 1e-6 {
            return Err(Error::CoincidentPoints { distance: d });
        }
        let gain = beta.powi(img.reflections as i32) / (4.0 * PI * d);
        acc += C64::from_polar(gain, k * d);
    }
    Ok(acc)
}

fn check_inside(room: &RoomSpec, p: &Vec3, what: &str) -> Result<()> {
    if room.contains(p) {
        Ok(())
    } else {
        Err(Error::InvalidScene(format!("{what} at {:?} is outside the room", p.as_slice())))
    }
}

/// Room transfer function from `src` to `mic` (room coordinates) at `f`.
pub fn image_source_rtf(room: &RoomSpec, src: &Vec3, mic: &Vec3, f: f64) -> Result<C64> {
    room.validate()?;
    check_inside(room, src, "source")?;
    check_inside(room, mic, "microphone")?;
    let beta = (1.0 - sabine_absorption(room)).max(0.0).sqrt();
    green_sum(&image_sources(room, src), beta, mic, wavenumber(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesSpec {
    pub count: usize,
    pub distance_m: f64,
    /// Explicit arrival directions; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub sources: SourcesSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSpec>,
    #[serde(default)]
    pub free_field: bool,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// `null` means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_frames() -> usize {
    32
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.room, self.free_field) {
            (Some(_), true) => return Err(Error::InvalidConfig("scene has both a room and free_field".into())),
            (None, false) => return Err(Error::InvalidConfig("scene needs a room or free_field: true".into())),
            (Some(room), false) => room.validate()?,
            (None, true) => {}
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be at least 1".into()));
        }
        if !(self.sources.distance_m > 0.0) {
            return Err(Error::InvalidConfig("source distance must be positive".into()));
        }
        if let Some(dirs) = &self.sources.directions {
            if dirs.len() != self.sources.count {
                return Err(Error::InvalidConfig(format!(
                    "{} directions given for {} sources",
                    dirs.len(),
                    self.sources.count
                )));
            }
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return Err(Error::InvalidConfig("snr_db is NaN".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTruth {
    pub direction: [f64; 3],
    pub distance_m: f64,
}

impl SourceTruth {
    pub fn direction(&self) -> Vec3 {
        Vec3::from(self.direction)
    }
}

/// Narrowband snapshots for one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    pub frequency: f64,
    /// M x T
    pub snapshots: DMatrix<C64>,
    pub truth: Vec<SourceTruth>,
    pub seed: u64,
}

/// Minimum angular separation between randomly drawn sources.
pub const MIN_SOURCE_SEPARATION: f64 = 15.0 * PI / 180.0;
const ROOM_MARGIN_M: f64 = 0.1;
const MAX_DRAW_ATTEMPTS: usize = 100_000;

/// Uniform random directions on the sphere, at least 15 degrees apart, whose
/// source positions fall inside `room` (when given).
pub fn draw_source_directions(
    count: usize,
    distance: f64,
    room: Option<&RoomSpec>,
    rng: &mut Rng,
) -> Result<Vec<Vec3>> {
    let mut dirs: Vec<Vec3> = Vec::with_capacity(count);
    let mut attempts = 0;
    while dirs.len() < count {
        attempts += 1;
        if attempts > MAX_DRAW_ATTEMPTS {
            return Err(Error::InvalidScene(format!(
                "could not place {count} sources at {distance} m after {MAX_DRAW_ATTEMPTS} draws"
            )));
        }
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n < 1e-12 {
            continue;
        }
        let v = v / n;
        if let Some(room) = room {
            if !room.contains_with_margin(&(room.array_center() + distance * v), ROOM_MARGIN_M) {
                continue;
            }
        }
        if dirs.iter().any(|d| angular_distance(d, &v) < MIN_SOURCE_SEPARATION) {
            continue;
        }
        dirs.push(v);
    }
    Ok(dirs)
}

fn complex_gaussian(rng: &mut Rng, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

/// Source-to-microphone transfer vectors for one frequency. In a room each
/// source is scaled so its direct path has unit amplitude at the array
/// center.
struct Propagator {
    room: Option<(RoomSpec, f64, Vec<Vec<ImageSource>>)>,
}

impl Propagator {
    fn new(scene: &SceneSpec, array: &MicArray, dirs: &[Vec3]) -> Result<Self> {
        let Some(room) = &scene.room else {
            return Ok(Self { room: None });
        };
        let center = room.array_center();
        for p in array.positions() {
            check_inside(room, &(center + p), "microphone")?;
        }
        let mut images = Vec::with_capacity(dirs.len());
        for d in dirs {
            let src = center + scene.sources.distance_m * d;
            check_inside(room, &src, "source")?;
            images.push(image_sources(room, &src));
        }
        let beta = (1.0 - sabine_absorption(room)).max(0.0).sqrt();
        Ok(Self { room: Some((room.clone(), beta, images)) })
    }

    fn column(&self, array: &MicArray, source: usize, dir: &Vec3, distance: f64, f: f64) -> Result<Vec<C64>> {
        match &self.room {
            None => Ok(steering_vector(array, dir, f)),
            Some((room, beta, images)) => {
                let k = wavenumber(f);
                let center = room.array_center();
                let scale = 4.0 * PI * distance;
                array
                    .positions()
                    .iter()
                    .map(|p| green_sum(&images[source], *beta, &(center + p), k).map(|g| g * scale))
                    .collect()
            }
        }
    }
}

/// Synthesizes one observation block per frequency. Each source carries
/// i.i.d. unit-power complex Gaussian frame amplitudes.
pub fn synthesize_scene(scene: &SceneSpec, array: &MicArray, freqs: &[f64], seed: u64) -> Result<Vec<ObservationBlock>> {
    scene.validate()?;
    let dirs: Vec<Vec3> = match &scene.sources.directions {
        Some(given) => given
            .iter()
            .map(|d| {
                let v = Vec3::from(*d);
                let n = v.norm();
                if n > 0.0 {
                    Ok(v / n)
                } else {
                    Err(Error::InvalidConfig("zero source direction".into()))
                }
            })
            .collect::<Result<_>>()?,
        None => {
            let mut rng = rng::stream(seed, &[tag::DIRECTIONS]);
            draw_source_directions(scene.sources.count, scene.sources.distance_m, scene.room.as_ref(), &mut rng)?
        }
    };
    let truth: Vec<SourceTruth> = dirs
        .iter()
        .map(|d| SourceTruth { direction: [d.x, d.y, d.z], distance_m: scene.sources.distance_m })
        .collect();
    let propagator = Propagator::new(scene, array, &dirs)?;

    freqs
        .iter()
        .map(|&f| {
            if !(f > 0.0) {
                return Err(Error::InvalidArgument(format!("frequency must be positive, got {f}")));
            }
            let mut amp_rng = rng::stream(seed, &[tag::AMPLITUDES, f.to_bits()]);
            let frames = scene.frames;
            let amplitudes = DMatrix::from_fn(dirs.len(), frames, |_, _| complex_gaussian(&mut amp_rng, 1.0));
            let mut mixing = DMatrix::zeros(array.len(), dirs.len());
            for (s, d) in dirs.iter().enumerate() {
                let col = propagator.column(array, s, d, scene.sources.distance_m, f)?;
                mixing.set_column(s, &nalgebra::DVector::from_vec(col));
            }
            let block = ObservationBlock { frequency: f, snapshots: mixing * amplitudes, truth: truth.clone(), seed };
            Ok(add_noise(&block, scene.snr_db, rng::derive(seed, &[tag::NOISE, f.to_bits()])))
        })
        .collect()
}

/// Adds i.i.d. complex Gaussian noise at the requested SNR relative to the
/// mean signal power. `None` or `+inf` leaves the block unchanged.
pub fn add_noise(block: &ObservationBlock, snr_db: Option<f64>, seed: u64) -> ObservationBlock {
    let mut out = block.clone();
    let Some(snr) = snr_db.filter(|s| s.is_finite()) else {
        return out;
    };
    let n = block.snapshots.len().max(1) as f64;
    let power = block.snapshots.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let variance = power / 10f64.powf(snr / 10.0);
    let mut rng = rng::stream(seed, &[tag::NOISE]);
    for z in out.snapshots.iter_mut() {
        *z += complex_gaussian(&mut rng, variance);
    }
    out
}
