//! Seed keypoints, radius-ρ sampling masks and training-buffer construction.
//!
//! Seeds are the projections of the map points visible in a training image.
//! The allowed region is the union of the disks of radius ρ around the seeds,
//! evaluated on the descriptor grid; focus sampling draws uniformly from it.
//! Random sampling draws from the whole grid and is the ρ → ∞ limit.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pixel, Pose};
use crate::observation::{mix_keys, CellGrid, Descriptor, ObservationError, ObservationWorld, View};
use crate::scene_map::{MapError, SceneMap};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("image {0} has no valid seed keypoints")]
    NoSeeds(u32),
    #[error("sampling radius must be at least 1 pixel, got {0}")]
    InvalidRadius(f64),
    #[error("no image contributed to the buffer")]
    AllImagesSkipped,
    #[error("invalid buffer configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed buffer file: {0}")]
    Format(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ranges for the per-image training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRange {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationRange {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_min: 2.0 / 3.0,
            scale_max: 1.5,
        }
    }
}

/// In-plane rotation about the optical axis plus a resize of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub rotation_deg: f64,
    pub scale: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(range: &AugmentationRange, rng: &mut impl Rng) -> Self {
        let rotation_deg = if range.max_rotation_deg > 0.0 {
            rng.gen_range(-range.max_rotation_deg..=range.max_rotation_deg)
        } else {
            0.0
        };
        let scale = if range.scale_max > range.scale_min {
            rng.gen_range(range.scale_min..=range.scale_max)
        } else {
            range.scale_min
        };
        Self {
            rotation_deg,
            scale,
        }
    }

    /// Augmented camera: the rotation is composed into the pose, the scale
    /// multiplies `fx, fy, cx, cy` and the frame size.
    pub fn apply(&self, k: &CameraIntrinsics, h: &Pose) -> (CameraIntrinsics, Pose) {
        assert!(self.scale > 0.0, "augmentation scale must be positive");
        let s = self.scale;
        let k2 = CameraIntrinsics {
            fx: k.fx * s,
            fy: k.fy * s,
            cx: k.cx * s,
            cy: k.cy * s,
            width: ((k.width as f64 * s).round() as u32).max(8),
            height: ((k.height as f64 * s).round() as u32).max(8),
        };
        let roll = Pose::from_parts(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.rotation_deg.to_radians()),
            Vector3::zeros(),
        );
        (k2, h.compose(&roll))
    }
}

/// Valid seed keypoints of one (possibly augmented) training view.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedKeypointSet {
    pub image_id: u32,
    pub seeds: Vec<Pixel>,
    /// Camera of the view the seeds live in; its frame bounds every seed.
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl SeedKeypointSet {
    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Distance from `y` to the closest seed.
    pub fn min_distance(&self, y: &Pixel) -> f64 {
        self.seeds
            .iter()
            .map(|s| s.distance(y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Projects the points visible in `image_id` through the (augmented) camera,
/// dropping projections behind the camera or outside the frame.
pub fn seed_keypoints(
    map: &SceneMap,
    image_id: u32,
    aug: Option<&Augmentation>,
) -> Result<SeedKeypointSet, SamplerError> {
    let image = map.image(image_id)?;
    let (k, h) = match aug {
        Some(a) => a.apply(&image.intrinsics, &image.pose),
        None => (image.intrinsics, image.pose),
    };
    let seeds: Vec<Pixel> = map
        .visible_points(image_id)?
        .into_iter()
        .filter_map(|(p, _)| project(&p.position, &k, &h))
        .filter(|y| k.contains(y))
        .collect();
    if seeds.is_empty() {
        return Err(SamplerError::NoSeeds(image_id));
    }
    Ok(SeedKeypointSet {
        image_id,
        seeds,
        intrinsics: k,
        pose: h,
    })
}

/// Boolean grid of allowed sampling cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub grid: CellGrid,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn true_indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.then_some(i))
            .collect()
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.cells[self.grid.index(col, row)]
    }
}

fn check_rho(rho: f64) -> Result<(), SamplerError> {
    if rho >= 1.0 {
        Ok(())
    } else {
        Err(SamplerError::InvalidRadius(rho))
    }
}

/// Union of the radius-`rho` disks around the seeds, on the grid of the
/// given stride. A cell is allowed iff its centre is within `rho` of a seed.
pub fn allowed_mask(seeds: &SeedKeypointSet, rho: f64, stride: u32) -> Result<Mask, SamplerError> {
    check_rho(rho)?;
    let grid = CellGrid::for_intrinsics(&seeds.intrinsics, stride);
    let mut cells = vec![false; grid.len()];
    if seeds.seeds.is_empty() || grid.is_empty() {
        return Ok(Mask { grid, cells });
    }
    // every centre is within the diagonal of every in-frame seed
    if rho >= seeds.intrinsics.diagonal() {
        cells.fill(true);
        return Ok(Mask { grid, cells });
    }
    let s = stride as f64;
    let off = (s - 1.0) / 2.0;
    let (cols, rows) = (grid.cols() as i64, grid.rows() as i64);
    for y in &seeds.seeds {
        let c0 = (((y.u - rho - off) / s).ceil() as i64).max(0);
        let c1 = (((y.u + rho - off) / s).floor() as i64).min(cols - 1);
        let r0 = (((y.v - rho - off) / s).ceil() as i64).max(0);
        let r1 = (((y.v + rho - off) / s).floor() as i64).min(rows - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (col, row) = (col as usize, row as usize);
                if grid.center(col, row).distance(y) <= rho {
                    cells[grid.index(col, row)] = true;
                }
            }
        }
    }
    Ok(Mask { grid, cells })
}

/// Fraction of grid cells inside the allowed region.
pub fn coverage_fraction(seeds: &SeedKeypointSet, rho: f64, stride: u32) -> Result<f64, SamplerError> {
    let mask = allowed_mask(seeds, rho, stride)?;
    if mask.cells.is_empty() {
        return Ok(0.0);
    }
    Ok(mask.count() as f64 / mask.cells.len() as f64)
}

/// `count` cell centres drawn uniformly, with replacement, from the allowed
/// region.
pub fn sample_focus(
    seeds: &SeedKeypointSet,
    rho: f64,
    count: usize,
    stride: u32,
    rng: &mut impl Rng,
) -> Result<Vec<Pixel>, SamplerError> {
    let mask = allowed_mask(seeds, rho, stride)?;
    let allowed = mask.true_indices();
    if allowed.is_empty() {
        return Err(SamplerError::NoSeeds(seeds.image_id));
    }
    Ok((0..count)
        .map(|_| mask.grid.center_of_index(allowed[rng.gen_range(0..allowed.len())]))
        .collect())
}

/// `count` cell centres drawn uniformly from the whole grid.
pub fn sample_random(grid: &CellGrid, count: usize, rng: &mut impl Rng) -> Vec<Pixel> {
    if grid.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| grid.center_of_index(rng.gen_range(0..grid.len())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Focus { rho: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Focus { .. } => "focus",
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            Strategy::Random => None,
            Strategy::Focus { rho } => Some(*rho),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Strategy::Random => 0,
            Strategy::Focus { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub target_size: usize,
    /// Shuffled passes over the training images.
    pub passes: usize,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentationRange>,
    /// Points with shorter tracks do not produce seeds.
    pub min_track_length: usize,
    pub seed: u64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            target_size: 100_000,
            passes: 4,
            augmentation: Some(AugmentationRange::default()),
            min_track_length: 2,
            seed: 0,
        }
    }
}

/// Where a buffer came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub seed: u64,
}

/// One training instance: descriptor, pixel and the camera that saw it.
///
/// Values are held at `f32` precision so that a buffer survives a round
/// trip through its file unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferInstance {
    pub descriptor: Descriptor,
    pub pixel: Pixel,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub image_id: u32,
}

fn q32(x: f64) -> f64 {
    x as f32 as f64
}

impl BufferInstance {
    pub fn new(
        descriptor: Descriptor,
        pixel: Pixel,
        intrinsics: CameraIntrinsics,
        pose: Pose,
        image_id: u32,
    ) -> Self {
        let k = CameraIntrinsics {
            fx: q32(intrinsics.fx),
            fy: q32(intrinsics.fy),
            cx: q32(intrinsics.cx),
            cy: q32(intrinsics.cy),
            ..intrinsics
        };
        let q = pose.wxyz();
        let t = pose.translation;
        let pose = Pose {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(
                q32(q[0]),
                q32(q[1]),
                q32(q[2]),
                q32(q[3]),
            )),
            translation: Vector3::new(q32(t.x), q32(t.y), q32(t.z)),
        };
        Self {
            descriptor,
            pixel: Pixel::new(q32(pixel.u), q32(pixel.v)),
            intrinsics: k,
            pose,
            image_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBuffer {
    pub instances: Vec<BufferInstance>,
    pub descriptor_dim: usize,
    pub provenance: Provenance,
}

impl TrainingBuffer {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

struct Job {
    pass: usize,
    image_id: u32,
    view: View,
    seeds: Option<SeedKeypointSet>,
}

/// Fills a training buffer of exactly `cfg.target_size` instances.
///
/// Images are visited in `cfg.passes` shuffled passes; every visit draws a
/// fresh augmentation. Each contributing visit samples the same number of
/// pixels and the result is truncated to the target size. All randomness is
/// keyed by `(seed, pass, image_id)`, so the result does not depend on how
/// visits are scheduled.
pub fn build_buffer(
    map: &SceneMap,
    world: &ObservationWorld,
    strategy: Strategy,
    cfg: &BufferConfig,
) -> Result<TrainingBuffer, SamplerError> {
    if cfg.target_size == 0 {
        return Err(SamplerError::InvalidConfig("target_size must be positive".into()));
    }
    if cfg.passes == 0 {
        return Err(SamplerError::InvalidConfig("passes must be positive".into()));
    }
    if let Strategy::Focus { rho } = strategy {
        check_rho(rho)?;
    }
    if map.images.is_empty() {
        return Err(SamplerError::AllImagesSkipped);
    }
    let seeding_map = map.filter_short_tracks(cfg.min_track_length);

    let mut jobs = Vec::with_capacity(cfg.passes * map.images.len());
    for pass in 0..cfg.passes {
        let mut order: Vec<u32> = map.images.iter().map(|i| i.id).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_keys(&[cfg.seed, 0x5f, pass as u64]));
        order.shuffle(&mut shuffle_rng);
        for image_id in order {
            jobs.push((pass, image_id));
        }
    }

    let jobs: Vec<Job> = jobs
        .into_par_iter()
        .map(|(pass, image_id)| -> Result<Job, SamplerError> {
            let mut rng = job_rng(cfg.seed, pass, image_id, 0);
            let aug = cfg
                .augmentation
                .map(|r| Augmentation::sample(&r, &mut rng))
                .unwrap_or_else(Augmentation::identity);
            let mut view = View::from_map(map, image_id)?;
            let (k, h) = aug.apply(&view.intrinsics, &view.pose);
            view.intrinsics = k;
            view.pose = h;
            let seeds = match strategy {
                Strategy::Random => None,
                Strategy::Focus { rho } => {
                    match seed_keypoints(&seeding_map, image_id, Some(&aug)) {
                        Ok(s) if allowed_mask(&s, rho, world.stride)?.count() > 0 => Some(s),
                        Ok(_) | Err(SamplerError::NoSeeds(_)) => {
                            log::warn!("image {image_id} (pass {pass}) has no usable seeds; skipped");
                            return Ok(Job {
                                pass,
                                image_id,
                                view,
                                seeds: None,
                            });
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(Job {
                pass,
                image_id,
                view,
                seeds,
            })
        })
        .collect::<Result<_, _>>()?;

    let contributing = match strategy {
        Strategy::Random => jobs.len(),
        Strategy::Focus { .. } => jobs.iter().filter(|j| j.seeds.is_some()).count(),
    };
    if contributing == 0 {
        return Err(SamplerError::AllImagesSkipped);
    }
    let per_visit = cfg.target_size.div_ceil(contributing);

    let chunks: Vec<Vec<BufferInstance>> = jobs
        .par_iter()
        .map(|job| -> Result<Vec<BufferInstance>, SamplerError> {
            let mut rng = job_rng(cfg.seed, job.pass, job.image_id, 1);
            let pixels = match (strategy, &job.seeds) {
                (Strategy::Random, _) => {
                    sample_random(&world.grid(&job.view.intrinsics), per_visit, &mut rng)
                }
                (Strategy::Focus { rho }, Some(seeds)) => {
                    sample_focus(seeds, rho, per_visit, world.stride, &mut rng)?
                }
                (Strategy::Focus { .. }, None) => return Ok(Vec::new()),
            };
            let descriptors = world.observations_in_view(map, &job.view, &pixels)?;
            Ok(pixels
                .into_iter()
                .zip(descriptors)
                .map(|(y, d)| {
                    BufferInstance::new(d, y, job.view.intrinsics, job.view.pose, job.image_id)
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let mut instances: Vec<BufferInstance> = chunks.into_iter().flatten().collect();
    instances.truncate(cfg.target_size);
    Ok(TrainingBuffer {
        instances,
        descriptor_dim: world.dim(),
        provenance: Provenance {
            strategy,
            seed: cfg.seed,
        },
    })
}

fn job_rng(seed: u64, pass: usize, image_id: u32, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_keys(&[seed, pass as u64, image_id as u64, stream]))
}

const BUFFER_MAGIC: &[u8; 6] = b"FTBUF1";

/// Writes the little-endian buffer format.
pub fn write_buffer(buffer: &TrainingBuffer, mut w: impl Write) -> Result<(), SamplerError> {
    w.write_all(BUFFER_MAGIC)?;
    w.write_all(&(buffer.descriptor_dim as u32).to_le_bytes())?;
    w.write_all(&(buffer.instances.len() as u64).to_le_bytes())?;
    w.write_all(&[buffer.provenance.strategy.tag()])?;
    let rho = buffer.provenance.strategy.rho().unwrap_or(0.0) as f32;
    w.write_all(&rho.to_le_bytes())?;
    w.write_all(&buffer.provenance.seed.to_le_bytes())?;
    for inst in &buffer.instances {
        if inst.descriptor.dim() != buffer.descriptor_dim {
            return Err(SamplerError::Format(format!(
                "instance descriptor has dimension {} (buffer: {})",
                inst.descriptor.dim(),
                buffer.descriptor_dim
            )));
        }
        for x in inst.descriptor.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        let k = &inst.intrinsics;
        let q = inst.pose.wxyz();
        let t = inst.pose.translation;
        let floats = [
            inst.pixel.u,
            inst.pixel.v,
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            q[0],
            q[1],
            q[2],
            q[3],
            t.x,
            t.y,
            t.z,
        ];
        for x in floats {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.write_all(&inst.image_id.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], SamplerError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => SamplerError::Format("truncated buffer file".into()),
        _ => SamplerError::Io(e),
    })?;
    Ok(b)
}

fn read_f32(r: &mut impl Read) -> Result<f32, SamplerError> {
    Ok(f32::from_le_bytes(read_array(r)?))
}

/// Reads the buffer format. The frame size of each instance is not stored
/// and is reconstructed as twice the principal point.
pub fn read_buffer(mut r: impl Read) -> Result<TrainingBuffer, SamplerError> {
    let magic: [u8; 6] = read_array(&mut r)?;
    if &magic != BUFFER_MAGIC {
        return Err(SamplerError::Format("bad magic".into()));
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let tag = read_array::<1>(&mut r)?[0];
    let rho = read_f32(&mut r)? as f64;
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let strategy = match tag {
        0 => Strategy::Random,
        1 => Strategy::Focus { rho },
        t => return Err(SamplerError::Format(format!("unknown strategy tag {t}"))),
    };
    let mut instances = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let descriptor = Descriptor((0..dim).map(|_| read_f32(&mut r)).collect::<Result<_, _>>()?);
        let mut f = [0f64; 13];
        for x in f.iter_mut() {
            *x = read_f32(&mut r)? as f64;
        }
        let image_id = u32::from_le_bytes(read_array(&mut r)?);
        let intrinsics = CameraIntrinsics {
            fx: f[2],
            fy: f[3],
            cx: f[4],
            cy: f[5],
            width: ((2.0 * f[4]).round() as u32).max(8),
            height: ((2.0 * f[5]).round() as u32).max(8),
        };
        let quat = Quaternion::new(f[6], f[7], f[8], f[9]);
        if (quat.norm() - 1.0).abs() > 1e-3 {
            return Err(SamplerError::Format(format!(
                "instance pose quaternion has norm {}",
                quat.norm()
            )));
        }
        instances.push(BufferInstance {
            descriptor,
            pixel: Pixel::new(f[0], f[1]),
            intrinsics,
            pose: Pose {
                rotation: UnitQuaternion::new_unchecked(quat),
                translation: Vector3::new(f[10], f[11], f[12]),
            },
            image_id,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(SamplerError::Format("trailing bytes after last instance".into()));
    }
    Ok(TrainingBuffer {
        instances,
        descriptor_dim: dim,
        provenance: Provenance { strategy, seed },
    })
}

pub fn save_buffer(buffer: &TrainingBuffer, path: impl AsRef<Path>) -> Result<(), SamplerError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_buffer(buffer, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_buffer(path: impl AsRef<Path>) -> Result<TrainingBuffer, SamplerError> {
    read_buffer(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_map::{generate_synthetic, SynthConfig};

    fn seeds_at(points: &[(f64, f64)], w: u32, h: u32) -> SeedKeypointSet {
        SeedKeypointSet {
            image_id: 0,
            seeds: points.iter().map(|&(u, v)| Pixel::new(u, v)).collect(),
            intrinsics: CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h)
                .unwrap(),
            pose: Pose::identity(),
        }
    }

    /// Brute force: test every cell centre against every seed.
    fn disk_oracle(seeds: &SeedKeypointSet, rho: f64, stride: u32) -> Vec<bool> {
        let g = CellGrid::for_intrinsics(&seeds.intrinsics, stride);
        (0..g.len())
            .map(|i| {
                let c = g.center_of_index(i);
                seeds.seeds.iter().any(|s| s.distance(&c) <= rho)
            })
            .collect()
    }

    #[test]
    fn central_disk_count_matches_enumeration() {
        let s = seeds_at(&[(50.0, 50.0)], 100, 100);
        let m = allowed_mask(&s, 5.0, 1).unwrap();
        let oracle = disk_oracle(&s, 5.0, 1);
        assert_eq!(m.cells, oracle);
        assert_eq!(m.count(), 81);
        let frac = coverage_fraction(&s, 5.0, 1).unwrap();
        assert_eq!(frac, 81.0 / 10_000.0);
    }

    #[test]
    fn huge_radius_covers_everything() {
        let s = seeds_at(&[(3.0, 90.0)], 100, 100);
        let m = allowed_mask(&s, 1000.0, 1).unwrap();
        assert!(m.cells.iter().all(|c| *c));
        assert_eq!(coverage_fraction(&s, 1000.0, 4).unwrap(), 1.0);
        assert_eq!(m.cells, disk_oracle(&s, 1000.0, 1));
    }

    #[test]
    fn overlapping_disks_union() {
        let a = allowed_mask(&seeds_at(&[(40.0, 40.0)], 100, 100), 5.0, 1).unwrap().count();
        let b = allowed_mask(&seeds_at(&[(44.0, 41.0)], 100, 100), 5.0, 1).unwrap().count();
        let both = allowed_mask(&seeds_at(&[(40.0, 40.0), (44.0, 41.0)], 100, 100), 5.0, 1)
            .unwrap()
            .count();
        assert!(both < a + b);
        assert!(both > a.max(b));
    }

    #[test]
    fn no_seeds_zero_coverage_and_bad_radius() {
        let s = seeds_at(&[], 64, 48);
        assert_eq!(coverage_fraction(&s, 5.0, 1).unwrap(), 0.0);
        assert!(matches!(
            sample_focus(&s, 5.0, 3, 1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SamplerError::NoSeeds(0))
        ));
        assert!(matches!(
            allowed_mask(&seeds_at(&[(1.0, 1.0)], 64, 48), 0.5, 1),
            Err(SamplerError::InvalidRadius(_))
        ));
    }

    #[test]
    fn single_cell_mask_repeats_that_cell() {
        // stride 8 grid: the seed sits on one centre, rho 1 reaches no other
        let s = seeds_at(&[(11.5, 19.5)], 64, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px = sample_focus(&s, 1.0, 50, 8, &mut rng).unwrap();
        assert!(px.iter().all(|p| *p == Pixel::new(11.5, 19.5)));
    }

    #[test]
    fn random_sampling_basics() {
        let g = CellGrid::new(64, 48, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_random(&g, 0, &mut rng).is_empty());
        let a = sample_random(&g, 100, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_random(&g, 100, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.u >= 0.0 && p.u < 64.0 && p.v >= 0.0 && p.v < 48.0));
    }

    fn small_scene() -> crate::scene_map::SyntheticScene {
        generate_synthetic(&SynthConfig {
            n_images: 6,
            n_queries: 1,
            n_points: 100,
            rng_seed: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn seeds_match_tracks_without_augmentation() {
        let scene = small_scene();
        for image in &scene.map.images {
            let s = seed_keypoints(&scene.map, image.id, None).unwrap();
            let visible = scene.map.visible_points(image.id).unwrap();
            assert_eq!(s.seeds.len(), visible.len());
            for (seed, (_, obs)) in s.seeds.iter().zip(&visible) {
                assert!(seed.distance(obs) < 0.5);
            }
        }
    }

    #[test]
    fn invalid_projections_are_dropped() {
        // principal point far from the centre: a half-turn about the optical
        // axis throws points on one side out of the frame
        let text = "FTMAP 1\n\
            CAMERA 0 100 100 10 10 100 100\n\
            IMAGE 0 0 1 0 0 0 0 0 0 a\n\
            IMAGE 1 0 1 0 0 0 0 0 -1 b\n\
            POINT 0 0.5 0.5 2 0 35 35 1 26.7 26.7\n\
            POINT 1 0.2 0.2 1 0 30 30 1 20 20\n\
            POINT 2 0 0 -0.5 0 10 10 1 10 10\n";
        let map = SceneMap::from_text(text).unwrap();
        let plain = seed_keypoints(&map, 0, None).unwrap();
        // point 2 is behind camera 0
        assert_eq!(plain.seeds.len(), 2);
        let half_turn = Augmentation {
            rotation_deg: 180.0,
            scale: 1.0,
        };
        assert!(matches!(
            seed_keypoints(&map, 0, Some(&half_turn)),
            Err(SamplerError::NoSeeds(0))
        ));
    }

    #[test]
    fn buffer_has_exact_size_and_focus_membership() {
        let scene = small_scene();
        let cfg = BufferConfig {
            target_size: 1000,
            passes: 2,
            seed: 5,
            ..BufferConfig::default()
        };
        let rho = 5.0;
        let buf = build_buffer(&scene.map, &scene.world, Strategy::Focus { rho }, &cfg).unwrap();
        assert_eq!(buf.len(), 1000);
        let seeding = scene.map.filter_short_tracks(cfg.min_track_length);
        for inst in &buf.instances {
            // recover the augmented view from the instance camera
            let image = scene.map.image(inst.image_id).unwrap();
            let scale = inst.intrinsics.fx / image.intrinsics.fx;
            let rel = image.pose.inverse().compose(&inst.pose);
            let aug = Augmentation {
                rotation_deg: rel.rotation.angle().to_degrees()
                    * rel.rotation.axis().map_or(1.0, |a| a.z.signum()),
                scale,
            };
            let seeds = seed_keypoints(&seeding, inst.image_id, Some(&aug)).unwrap();
            assert!(seeds.min_distance(&inst.pixel) <= rho + 1e-3);
        }
    }

    #[test]
    fn buffer_round_trips_through_file() {
        let scene = small_scene();
        let cfg = BufferConfig {
            target_size: 300,
            passes: 1,
            seed: 1,
            ..BufferConfig::default()
        };
        let buf = build_buffer(&scene.map, &scene.world, Strategy::Random, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_buffer(&buf, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 6 + 4 + 8 + 1 + 4 + 8 + 300 * (32 * 4 + 13 * 4 + 4));
        let back = read_buffer(bytes.as_slice()).unwrap();
        assert_eq!(back.provenance, buf.provenance);
        assert_eq!(back.instances.len(), 300);
        for (a, b) in back.instances.iter().zip(&buf.instances) {
            assert_eq!(a.descriptor, b.descriptor);
            assert_eq!(a.pixel, b.pixel);
            assert_eq!(a.pose, b.pose);
            assert_eq!((a.intrinsics.fx, a.intrinsics.cx), (b.intrinsics.fx, b.intrinsics.cx));
        }
        let mut again = Vec::new();
        write_buffer(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(read_buffer(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_buffer(bad.as_slice()).is_err());
    }

    #[test]
    fn buffer_is_deterministic() {
        let scene = small_scene();
        let cfg = BufferConfig {
            target_size: 500,
            passes: 2,
            seed: 3,
            ..BufferConfig::default()
        };
        let strat = Strategy::Focus { rho: 3.0 };
        let a = build_buffer(&scene.map, &scene.world, strat, &cfg).unwrap();
        let b = build_buffer(&scene.map, &scene.world, strat, &cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_buffer(&a, &mut x).unwrap();
        write_buffer(&b, &mut y).unwrap();
        assert_eq!(x, y);
    }
}
