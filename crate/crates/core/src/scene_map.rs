//! Sparse SfM map: 3D points, visibility tracks and posed images.
//!
//! Maps are read from and written to a small line-oriented text format:
//!
//! ```text
//! FTMAP 1
//! CAMERA <id> <fx> <fy> <cx> <cy> <width> <height>
//! IMAGE <id> <camera_id> <qw> <qx> <qy> <qz> <tx> <ty> <tz> <name>
//! POINT <id> <X> <Y> <Z> [<image_id> <u> <v>]...
//! ```
//!
//! Image poses are camera-to-world. Lines starting with `#` are comments.
//! Floats are written with 17 significant digits so a save/load cycle is
//! lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pixel, Pose, ScenePoint};
use crate::observation::{mix_keys, ObservationWorld, View};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("point {point} references missing image {image}")]
    DanglingReference { point: u32, image: u32 },
    #[error("image {image}: quaternion norm {norm} deviates from 1")]
    InvalidPose { image: u32, norm: f64 },
    #[error("unknown image {0}")]
    UnknownImage(u32),
    #[error("unknown point {0}")]
    UnknownPoint(u32),
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One observation of a map point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub image_id: u32,
    pub pixel: Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: u32,
    pub position: ScenePoint,
    pub track: Vec<TrackEntry>,
}

impl MapPoint {
    pub fn observation_in(&self, image_id: u32) -> Option<Pixel> {
        self.track
            .iter()
            .find(|t| t.image_id == image_id)
            .map(|t| t.pixel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapImage {
    pub id: u32,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMap {
    pub points: Vec<MapPoint>,
    pub images: Vec<MapImage>,
    pub scene_center: ScenePoint,
}

fn mean_position(points: &[MapPoint]) -> ScenePoint {
    if points.is_empty() {
        return Point3::origin();
    }
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.position.coords);
    Point3::from(sum / points.len() as f64)
}

impl SceneMap {
    /// Validates references and computes the scene center. Points and images
    /// are sorted by id.
    pub fn new(mut points: Vec<MapPoint>, mut images: Vec<MapImage>) -> Result<Self, MapError> {
        images.sort_by_key(|i| i.id);
        points.sort_by_key(|p| p.id);
        for w in images.windows(2) {
            if w[0].id == w[1].id {
                return Err(MapError::Invalid(format!("duplicate image id {}", w[0].id)));
            }
        }
        for w in points.windows(2) {
            if w[0].id == w[1].id {
                return Err(MapError::Invalid(format!("duplicate point id {}", w[0].id)));
            }
        }
        for image in &images {
            image
                .intrinsics
                .validate()
                .map_err(|e| MapError::Invalid(format!("image {}: {e}", image.id)))?;
        }
        for p in &points {
            if p.track.is_empty() {
                return Err(MapError::Invalid(format!("point {} has an empty track", p.id)));
            }
            let mut seen: Vec<u32> = p.track.iter().map(|t| t.image_id).collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(MapError::Invalid(format!(
                    "point {} observes an image twice",
                    p.id
                )));
            }
            for t in &p.track {
                if images.binary_search_by_key(&t.image_id, |i| i.id).is_err() {
                    return Err(MapError::DanglingReference {
                        point: p.id,
                        image: t.image_id,
                    });
                }
            }
        }
        let scene_center = mean_position(&points);
        Ok(Self {
            points,
            images,
            scene_center,
        })
    }

    pub fn image(&self, id: u32) -> Result<&MapImage, MapError> {
        self.images
            .binary_search_by_key(&id, |i| i.id)
            .map(|i| &self.images[i])
            .map_err(|_| MapError::UnknownImage(id))
    }

    pub fn point(&self, id: u32) -> Result<&MapPoint, MapError> {
        self.points
            .binary_search_by_key(&id, |p| p.id)
            .map(|i| &self.points[i])
            .map_err(|_| MapError::UnknownPoint(id))
    }

    /// Points whose track contains `image_id`, in ascending point-id order,
    /// with the stored observation.
    pub fn visible_points(&self, image_id: u32) -> Result<Vec<(&MapPoint, Pixel)>, MapError> {
        self.image(image_id)?;
        Ok(self
            .points
            .iter()
            .filter_map(|p| p.observation_in(image_id).map(|y| (p, y)))
            .collect())
    }

    /// Copy without points observed in fewer than `min_len` images.
    pub fn filter_short_tracks(&self, min_len: usize) -> SceneMap {
        let points: Vec<MapPoint> = self
            .points
            .iter()
            .filter(|p| p.track.len() >= min_len)
            .cloned()
            .collect();
        SceneMap {
            scene_center: mean_position(&points),
            points,
            images: self.images.clone(),
        }
    }

    /// Median camera-frame depth over all track observations.
    pub fn median_observation_depth(&self) -> Option<f64> {
        let mut depths = Vec::new();
        for p in &self.points {
            for t in &p.track {
                if let Ok(image) = self.image(t.image_id) {
                    let z = image.pose.world_to_camera(&p.position).z;
                    if z > 0.0 {
                        depths.push(z);
                    }
                }
            }
        }
        if depths.is_empty() {
            return None;
        }
        depths.sort_by(f64::total_cmp);
        let n = depths.len();
        Some(if n % 2 == 1 {
            depths[n / 2]
        } else {
            0.5 * (depths[n / 2 - 1] + depths[n / 2])
        })
    }

    /// Serializes to the text format. Identical maps give identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::from("FTMAP 1\n");
        let mut cameras: Vec<CameraIntrinsics> = Vec::new();
        let mut camera_of = Vec::with_capacity(self.images.len());
        for image in &self.images {
            let idx = match cameras.iter().position(|c| *c == image.intrinsics) {
                Some(i) => i,
                None => {
                    cameras.push(image.intrinsics);
                    cameras.len() - 1
                }
            };
            camera_of.push(idx);
        }
        for (i, c) in cameras.iter().enumerate() {
            let _ = writeln!(
                out,
                "CAMERA {i} {:.16e} {:.16e} {:.16e} {:.16e} {} {}",
                c.fx, c.fy, c.cx, c.cy, c.width, c.height
            );
        }
        for (image, cam) in self.images.iter().zip(camera_of) {
            let q = image.pose.wxyz();
            let t = image.pose.translation;
            let _ = writeln!(
                out,
                "IMAGE {} {cam} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {}",
                image.id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, image.name
            );
        }
        for p in &self.points {
            let _ = write!(
                out,
                "POINT {} {:.16e} {:.16e} {:.16e}",
                p.id, p.position.x, p.position.y, p.position.z
            );
            for t in &p.track {
                let _ = write!(out, " {} {:.16e} {:.16e}", t.image_id, t.pixel.u, t.pixel.v);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MapError> {
        parse_map(text)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> MapError {
    MapError::Parse {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, MapError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{tok}'")))
}

fn parse_map(text: &str) -> Result<SceneMap, MapError> {
    let mut cameras: Vec<(u32, CameraIntrinsics)> = Vec::new();
    let mut images = Vec::new();
    let mut points = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.split_whitespace().collect::<Vec<_>>() != ["FTMAP", "1"] {
                return Err(parse_err(line_no, "expected header 'FTMAP 1'"));
            }
            saw_header = true;
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("CAMERA") => {
                let id: u32 = field(toks.next(), line_no, "camera id")?;
                let fx = field(toks.next(), line_no, "fx")?;
                let fy = field(toks.next(), line_no, "fy")?;
                let cx = field(toks.next(), line_no, "cx")?;
                let cy = field(toks.next(), line_no, "cy")?;
                let w = field(toks.next(), line_no, "width")?;
                let h = field(toks.next(), line_no, "height")?;
                if toks.next().is_some() {
                    return Err(parse_err(line_no, "trailing tokens after CAMERA"));
                }
                let k = CameraIntrinsics::new(fx, fy, cx, cy, w, h)
                    .map_err(|e| parse_err(line_no, e.to_string()))?;
                if cameras.iter().any(|(c, _)| *c == id) {
                    return Err(parse_err(line_no, format!("duplicate camera {id}")));
                }
                cameras.push((id, k));
            }
            Some("IMAGE") => {
                let id: u32 = field(toks.next(), line_no, "image id")?;
                let cam: u32 = field(toks.next(), line_no, "camera id")?;
                let mut q = [0.0f64; 4];
                for (i, name) in ["qw", "qx", "qy", "qz"].iter().enumerate() {
                    q[i] = field(toks.next(), line_no, name)?;
                }
                let mut t = [0.0f64; 3];
                for (i, name) in ["tx", "ty", "tz"].iter().enumerate() {
                    t[i] = field(toks.next(), line_no, name)?;
                }
                let name = toks.collect::<Vec<_>>().join(" ");
                let intrinsics = cameras
                    .iter()
                    .find(|(c, _)| *c == cam)
                    .map(|(_, k)| *k)
                    .ok_or_else(|| parse_err(line_no, format!("unknown camera {cam}")))?;
                let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
                    return Err(MapError::InvalidPose { image: id, norm });
                }
                let pose =
                    Pose::from_wxyz(q, t).map_err(|e| parse_err(line_no, e.to_string()))?;
                images.push(MapImage {
                    id,
                    intrinsics,
                    pose,
                    name,
                });
            }
            Some("POINT") => {
                let id: u32 = field(toks.next(), line_no, "point id")?;
                let x = field(toks.next(), line_no, "X")?;
                let y = field(toks.next(), line_no, "Y")?;
                let z = field(toks.next(), line_no, "Z")?;
                let rest: Vec<&str> = toks.collect();
                if rest.len() % 3 != 0 {
                    return Err(parse_err(line_no, "track entries must be <image_id> <u> <v>"));
                }
                let mut track = Vec::with_capacity(rest.len() / 3);
                for chunk in rest.chunks(3) {
                    track.push(TrackEntry {
                        image_id: field(Some(chunk[0]), line_no, "track image id")?,
                        pixel: Pixel::new(
                            field(Some(chunk[1]), line_no, "u")?,
                            field(Some(chunk[2]), line_no, "v")?,
                        ),
                    });
                }
                if track.is_empty() {
                    return Err(parse_err(line_no, format!("point {id} has an empty track")));
                }
                points.push(MapPoint {
                    id,
                    position: Point3::new(x, y, z),
                    track,
                });
            }
            Some(other) => return Err(parse_err(line_no, format!("unknown record '{other}'"))),
            None => unreachable!(),
        }
    }
    if !saw_header {
        return Err(parse_err(1, "missing header 'FTMAP 1'"));
    }
    SceneMap::new(points, images)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SceneMap, MapError> {
    let text = fs::read_to_string(path)?;
    parse_map(&text)
}

pub fn save_map(map: &SceneMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    fs::write(path, map.to_text())?;
    Ok(())
}

/// Camera path around the structure: an arc at fixed distance from `look_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub orbit_radius: f64,
    pub look_at: [f64; 3],
    /// Angular span of the arc, degrees.
    pub arc_deg: f64,
    /// Relative jitter of the orbit radius.
    pub radius_jitter: f64,
    /// Vertical camera offset range, scene units.
    pub height_jitter: f64,
    /// Look-at target jitter, scene units.
    pub target_jitter: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            orbit_radius: 3.0,
            look_at: [0.0, 0.0, 0.0],
            arc_deg: 60.0,
            radius_jitter: 0.1,
            height_jitter: 0.3,
            target_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_points: usize,
    pub n_images: usize,
    /// Held-out query frames (not part of the map).
    pub n_queries: usize,
    pub descriptor_dim: usize,
    pub noise_sigma: f64,
    pub ambiguous_pool: usize,
    /// Fraction of a frame covered by the structure carrying the map points.
    pub structured_fraction: f64,
    /// Depth relief of the structure, scene units.
    pub relief: f64,
    pub feature_radius: f64,
    pub stride: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub trajectory: Trajectory,
    pub min_points_per_image: usize,
    /// Std-dev of the reconstruction error of map points, scene units. Track
    /// observations and appearance follow the true positions.
    pub map_point_noise: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 300,
            n_images: 40,
            n_queries: 20,
            descriptor_dim: 32,
            noise_sigma: 0.05,
            ambiguous_pool: 16,
            structured_fraction: 0.4,
            relief: 0.3,
            feature_radius: 3.0,
            stride: 1,
            width: 160,
            height: 120,
            focal: 200.0,
            trajectory: Trajectory::default(),
            min_points_per_image: 8,
            map_point_noise: 0.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: &str| Err(MapError::Invalid(m.to_string()));
        if self.n_images < 2 {
            return bad("n_images must be at least 2");
        }
        if self.descriptor_dim < 8 {
            return bad("descriptor_dim must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.structured_fraction) {
            return bad("structured_fraction must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if self.ambiguous_pool == 0 {
            return bad("ambiguous_pool must be at least 1");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(self.feature_radius > 0.0) {
            return bad("feature_radius must be positive");
        }
        if !(self.map_point_noise >= 0.0) {
            return bad("map_point_noise must be non-negative");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, MapError> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .map_err(|e| MapError::Invalid(e.to_string()))
    }
}

/// A generated map, its descriptor model and held-out query frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub map: SceneMap,
    pub world: ObservationWorld,
    pub queries: Vec<MapImage>,
}

impl SyntheticScene {
    /// Query frame as a [`View`]: every map point projecting into the frame
    /// is visible.
    pub fn query_view(&self, index: usize) -> View {
        let frame = &self.queries[index];
        let visible = self
            .map
            .points
            .iter()
            .filter(|p| {
                let x = self.world.true_position(p.id).unwrap_or(&p.position);
                project(x, &frame.intrinsics, &frame.pose)
                    .is_some_and(|y| frame.intrinsics.contains(&y))
            })
            .map(|p| p.id)
            .collect();
        View {
            image_id: frame.id,
            intrinsics: frame.intrinsics,
            pose: frame.pose,
            visible,
        }
    }

    /// True positions of the map points, indexed by id.
    pub fn true_positions(&self) -> Vec<ScenePoint> {
        self.map
            .points
            .iter()
            .map(|p| *self.world.true_position(p.id).unwrap_or(&p.position))
            .collect()
    }
}

/// View of an arbitrary posed frame, with visibility decided by projection.
pub fn visibility_view(map: &SceneMap, frame: &MapImage) -> View {
    let visible = map
        .points
        .iter()
        .filter(|p| {
            project(&p.position, &frame.intrinsics, &frame.pose)
                .is_some_and(|y| frame.intrinsics.contains(&y))
        })
        .map(|p| p.id)
        .collect();
    View {
        image_id: frame.id,
        intrinsics: frame.intrinsics,
        pose: frame.pose,
        visible,
    }
}

fn orbit_pose(cfg: &SynthConfig, angle_deg: f64, rng: &mut impl Rng) -> Pose {
    let t = &cfg.trajectory;
    let center = Point3::new(t.look_at[0], t.look_at[1], t.look_at[2]);
    let phi = angle_deg.to_radians();
    let r = t.orbit_radius * (1.0 + t.radius_jitter * rng.gen_range(-1.0..=1.0));
    let h = t.height_jitter * rng.gen_range(-1.0..=1.0);
    let eye = center + Vector3::new(r * phi.sin(), h, -r * phi.cos());
    let target = center
        + Vector3::new(
            t.target_jitter * rng.gen_range(-1.0..=1.0),
            t.target_jitter * rng.gen_range(-1.0..=1.0),
            t.target_jitter * rng.gen_range(-1.0..=1.0),
        );
    Pose::look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0))
}

/// Builds a synthetic scene. A pure function of `cfg`, including its seed.
///
/// Map points are spread over a "building" patch sized so that it covers
/// roughly `structured_fraction` of a frame seen from the orbit. Training
/// cameras are spaced along the arc; query cameras are drawn at random
/// angles on the same arc.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticScene, MapError> {
    cfg.validate()?;
    if cfg.n_points < 4 {
        return Err(MapError::InfeasibleScene(format!(
            "{} points cannot give any image {} visible points",
            cfg.n_points, cfg.min_points_per_image.max(4)
        )));
    }
    let k = cfg.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[cfg.rng_seed, 0x5ce4e]));
    let traj = &cfg.trajectory;
    let center = Vector3::new(traj.look_at[0], traj.look_at[1], traj.look_at[2]);
    let side = cfg.structured_fraction.sqrt();
    let half_w = 0.5 * side * cfg.width as f64 * traj.orbit_radius / cfg.focal;
    let half_h = 0.5 * side * cfg.height as f64 * traj.orbit_radius / cfg.focal;

    let positions: Vec<ScenePoint> = (0..cfg.n_points)
        .map(|_| {
            Point3::from(
                center
                    + Vector3::new(
                        rng.gen_range(-half_w..=half_w),
                        rng.gen_range(-half_h..=half_h),
                        rng.gen_range(-cfg.relief..=cfg.relief),
                    ),
            )
        })
        .collect();

    let half_arc = cfg.trajectory.arc_deg / 2.0;
    let mut images = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let frac = i as f64 / (cfg.n_images - 1) as f64;
        let angle = -half_arc + frac * cfg.trajectory.arc_deg;
        images.push(MapImage {
            id: i as u32,
            intrinsics: k,
            pose: orbit_pose(cfg, angle, &mut rng),
            name: format!("train_{i:04}"),
        });
    }
    let mut queries = Vec::with_capacity(cfg.n_queries);
    for q in 0..cfg.n_queries {
        let angle = rng.gen_range(-half_arc..=half_arc);
        queries.push(MapImage {
            id: (cfg.n_images + q) as u32,
            intrinsics: k,
            pose: orbit_pose(cfg, angle, &mut rng),
            name: format!("query_{q:04}"),
        });
    }

    let noise = Normal::new(0.0, cfg.map_point_noise).map_err(|e| MapError::Invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(cfg.n_points);
    let mut kept = Vec::with_capacity(cfg.n_points);
    for (id, position) in positions.iter().enumerate() {
        let track: Vec<TrackEntry> = images
            .iter()
            .filter_map(|image| {
                project(position, &image.intrinsics, &image.pose)
                    .filter(|y| image.intrinsics.contains(y))
                    .map(|pixel| TrackEntry {
                        image_id: image.id,
                        pixel,
                    })
            })
            .collect();
        if !track.is_empty() {
            let error = Vector3::from_fn(|_, _| rng.sample(noise));
            points.push(MapPoint {
                id: id as u32,
                position: position + error,
                track,
            });
            kept.push(*position);
        }
    }
    // re-number densely so ids index the latent table
    for (i, p) in points.iter_mut().enumerate() {
        p.id = i as u32;
    }
    let map = SceneMap::new(points, images)?;
    let floor = cfg.min_points_per_image;
    for image in &map.images {
        let n = map.visible_points(image.id)?.len();
        if n < floor {
            return Err(MapError::InfeasibleScene(format!(
                "image {} sees {n} points (< {floor})",
                image.id
            )));
        }
    }
    let world = ObservationWorld::generate(
        cfg.descriptor_dim,
        map.points.len(),
        cfg.ambiguous_pool,
        cfg.noise_sigma,
        cfg.feature_radius,
        cfg.stride,
        cfg.rng_seed,
    );
    let world = if cfg.map_point_noise > 0.0 {
        world.with_positions(kept)
    } else {
        world
    };
    let scene = SyntheticScene {
        map,
        world,
        queries,
    };
    for q in 0..scene.queries.len() {
        let n = scene.query_view(q).visible.len();
        if n < floor {
            return Err(MapError::InfeasibleScene(format!(
                "query {} sees {n} points (< {floor})",
                scene.queries[q].id
            )));
        }
    }
    Ok(scene)
}
