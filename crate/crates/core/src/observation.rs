//! Synthetic dense descriptor fields.
//!
//! Stands in for a frozen feature backbone. Pixels close to the projection of
//! a visible map point carry that point's latent descriptor, so the same 3D
//! point looks the same from every view. Every other pixel draws from a small
//! pool of shared background descriptors, which repeat at geometrically
//! unrelated places and cannot be triangulated.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pixel, Pose, ScenePoint};
use crate::scene_map::{MapError, SceneMap};

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("pixel ({u}, {v}) is outside the {width}x{height} frame")]
    OutOfFrame { u: f64, v: f64, width: u32, height: u32 },
    #[error("descriptor dimension {got} does not match world dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f32>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn from_f64_normalized(v: &DVector<f64>) -> Self {
        let n = v.norm();
        Descriptor(v.iter().map(|x| (x / n) as f32).collect())
    }
}

/// Regular descriptor grid over a frame. Cell `(i, j)` is centred at
/// `(i·s + (s−1)/2, j·s + (s−1)/2)` for stride `s`; at stride 1 the centres
/// are the integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    pub width: u32,
    pub height: u32,
    pub stride: u32,
}

impl CellGrid {
    pub fn new(width: u32, height: u32, stride: u32) -> Self {
        assert!(stride >= 1, "stride must be at least 1");
        Self {
            width,
            height,
            stride,
        }
    }

    pub fn for_intrinsics(k: &CameraIntrinsics, stride: u32) -> Self {
        Self::new(k.width, k.height, stride)
    }

    pub fn cols(&self) -> usize {
        (self.width / self.stride) as usize
    }

    pub fn rows(&self) -> usize {
        (self.height / self.stride) as usize
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offset(&self) -> f64 {
        (self.stride as f64 - 1.0) / 2.0
    }

    pub fn center(&self, col: usize, row: usize) -> Pixel {
        let s = self.stride as f64;
        Pixel::new(col as f64 * s + self.offset(), row as f64 * s + self.offset())
    }

    pub fn center_of_index(&self, index: usize) -> Pixel {
        self.center(index % self.cols(), index / self.cols())
    }

    /// Nearest cell to `y`, if `y` is inside the frame and that cell exists.
    pub fn snap(&self, y: &Pixel) -> Option<(usize, usize)> {
        if !(y.u >= 0.0 && y.v >= 0.0 && y.u < self.width as f64 && y.v < self.height as f64) {
            return None;
        }
        let s = self.stride as f64;
        if self.is_empty() {
            return None;
        }
        // nearest existing centre; pixels in the uncovered margin clamp inwards
        let col = ((y.u - self.offset()) / s).round().max(0.0) as usize;
        let row = ((y.v - self.offset()) / s).round().max(0.0) as usize;
        Some((col.min(self.cols() - 1), row.min(self.rows() - 1)))
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.cols() + col
    }
}

/// A camera through which the world is observed: a map image, an augmented
/// copy of one, or a held-out query frame.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    /// Ids of the map points that can be seen from this view.
    pub visible: Vec<u32>,
}

impl View {
    pub fn from_map(map: &SceneMap, image_id: u32) -> Result<Self, MapError> {
        let image = map.image(image_id)?;
        let visible = map
            .visible_points(image_id)?
            .into_iter()
            .map(|(p, _)| p.id)
            .collect();
        Ok(Self {
            image_id,
            intrinsics: image.intrinsics,
            pose: image.pose,
            visible,
        })
    }
}

/// Descriptor-model parameters plus the latent appearance of every map point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWorld {
    dim: usize,
    latents: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub feature_radius: f64,
    pub stride: u32,
    seed: u64,
    /// Where the features really are. Empty means the map positions are exact.
    #[serde(default)]
    positions: Vec<ScenePoint>,
}

/// Maximum allowed cosine between two distinct latent descriptors.
pub const MAX_LATENT_COSINE: f64 = 0.9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_keys(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5851_f42d_4c95_7f2d, |acc, k| splitmix64(acc ^ splitmix64(*k)))
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ObservationWorld {
    /// Draws `n_points` latent and `pool_size` background descriptors, all
    /// unit-norm with pairwise cosine below [`MAX_LATENT_COSINE`].
    pub fn generate(
        dim: usize,
        n_points: usize,
        pool_size: usize,
        noise_sigma: f64,
        feature_radius: f64,
        stride: u32,
        seed: u64,
    ) -> Self {
        assert!(dim >= 2, "descriptor dimension must be at least 2");
        assert!(pool_size >= 1, "background pool must not be empty");
        let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[seed, 0xde5c]));
        let mut all: Vec<Vec<f64>> = Vec::with_capacity(n_points + pool_size);
        while all.len() < n_points + pool_size {
            let cand = random_unit(dim, &mut rng);
            if all.iter().all(|o| dot(o, &cand) < MAX_LATENT_COSINE) {
                all.push(cand);
            }
        }
        let pool = all.split_off(n_points);
        Self {
            dim,
            latents: all,
            pool,
            noise_sigma,
            feature_radius,
            stride,
            seed,
            positions: Vec::new(),
        }
    }

    /// Attaches true feature positions, indexed by point id, which the map
    /// positions only approximate.
    pub fn with_positions(mut self, positions: Vec<ScenePoint>) -> Self {
        assert_eq!(positions.len(), self.latents.len(), "one position per latent");
        self.positions = positions;
        self
    }

    /// True position of a feature, if it differs from the map.
    pub fn true_position(&self, point_id: u32) -> Option<&ScenePoint> {
        self.positions.get(point_id as usize)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// Noise-free descriptor of a map point.
    pub fn latent(&self, point_id: u32) -> Descriptor {
        Descriptor::from_f64_normalized(&DVector::from_column_slice(
            &self.latents[point_id as usize],
        ))
    }

    pub fn pool_descriptor(&self, index: usize) -> Descriptor {
        Descriptor::from_f64_normalized(&DVector::from_column_slice(&self.pool[index]))
    }

    pub fn grid(&self, k: &CameraIntrinsics) -> CellGrid {
        CellGrid::for_intrinsics(k, self.stride)
    }

    /// Background pool slot used by a cell of an image.
    pub fn pool_index(&self, image_id: u32, cell: usize) -> usize {
        (mix_keys(&[self.seed, 0xb9, image_id as u64, cell as u64]) % self.pool.len() as u64)
            as usize
    }

    fn noisy(&self, base: &[f64], image_id: u32, cell: usize) -> Descriptor {
        let mut v = DVector::from_column_slice(base);
        if self.noise_sigma > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_keys(&[self.seed, 0x4e, image_id as u64, cell as u64]));
            for x in v.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *x += self.noise_sigma * e;
            }
        }
        Descriptor::from_f64_normalized(&v)
    }

    /// Precomputes the feature projections of a view.
    pub fn field<'a>(&'a self, map: &SceneMap, view: &View) -> ViewField<'a> {
        let grid = self.grid(&view.intrinsics);
        let r = self.feature_radius;
        let mut features = Vec::with_capacity(view.visible.len());
        for &pid in &view.visible {
            let position = match self.true_position(pid) {
                Some(x) => *x,
                None => match map.point(pid) {
                    Ok(p) => p.position,
                    Err(_) => continue,
                },
            };
            if let Some(y) = project(&position, &view.intrinsics, &view.pose) {
                if y.u > -r && y.v > -r && y.u < view.intrinsics.width as f64 + r
                    && y.v < view.intrinsics.height as f64 + r
                {
                    features.push((y, pid));
                }
            }
        }
        ViewField::new(self, view.image_id, grid, features)
    }

    /// Descriptor of map image `image_id` at pixel `y` (snapped to the grid).
    pub fn descriptor_at(
        &self,
        map: &SceneMap,
        image_id: u32,
        y: &Pixel,
    ) -> Result<Descriptor, ObservationError> {
        let view = View::from_map(map, image_id)?;
        self.field(map, &view).descriptor(y)
    }

    /// Batched [`Self::descriptor_at`]; output order follows `pixels`.
    pub fn observations_for(
        &self,
        map: &SceneMap,
        image_id: u32,
        pixels: &[Pixel],
    ) -> Result<Vec<Descriptor>, ObservationError> {
        let view = View::from_map(map, image_id)?;
        self.observations_in_view(map, &view, pixels)
    }

    pub fn observations_in_view(
        &self,
        map: &SceneMap,
        view: &View,
        pixels: &[Pixel],
    ) -> Result<Vec<Descriptor>, ObservationError> {
        if pixels.is_empty() {
            return Ok(Vec::new());
        }
        let field = self.field(map, view);
        pixels.iter().map(|y| field.descriptor(y)).collect()
    }
}

/// What a pixel of a view shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellContent {
    Point(u32),
    Background(usize),
}

/// Projected features of one view, bucketed for nearest-feature lookup.
pub struct ViewField<'a> {
    world: &'a ObservationWorld,
    image_id: u32,
    grid: CellGrid,
    features: Vec<(Pixel, u32)>,
    bucket_size: f64,
    bucket_cols: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> ViewField<'a> {
    fn new(
        world: &'a ObservationWorld,
        image_id: u32,
        grid: CellGrid,
        features: Vec<(Pixel, u32)>,
    ) -> Self {
        let bucket_size = world.feature_radius.max(1.0);
        let bucket_cols = (grid.width as f64 / bucket_size).ceil() as usize + 1;
        let bucket_rows = (grid.height as f64 / bucket_size).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); bucket_cols * bucket_rows];
        for (i, (y, _)) in features.iter().enumerate() {
            let bc = (y.u.max(0.0) / bucket_size).floor() as usize;
            let br = (y.v.max(0.0) / bucket_size).floor() as usize;
            let bc = bc.min(bucket_cols - 1);
            let br = br.min(bucket_rows - 1);
            buckets[br * bucket_cols + bc].push(i);
        }
        Self {
            world,
            image_id,
            grid,
            features,
            bucket_size,
            bucket_cols,
            buckets,
        }
    }

    pub fn grid(&self) -> CellGrid {
        self.grid
    }

    /// Projected positions of the features of this view, with their point ids.
    pub fn features(&self) -> &[(Pixel, u32)] {
        &self.features
    }

    /// Nearest feature within the feature radius of `center`, ties broken by
    /// the lower point id.
    fn nearest_feature(&self, center: &Pixel) -> Option<u32> {
        let r = self.world.feature_radius;
        let bucket_rows = self.buckets.len() / self.bucket_cols;
        let lo_c = ((center.u - r) / self.bucket_size).floor().max(0.0) as usize;
        let hi_c = (((center.u + r) / self.bucket_size).floor().max(0.0) as usize)
            .min(self.bucket_cols - 1);
        let lo_r = ((center.v - r) / self.bucket_size).floor().max(0.0) as usize;
        let hi_r =
            (((center.v + r) / self.bucket_size).floor().max(0.0) as usize).min(bucket_rows - 1);
        let mut best: Option<(f64, u32)> = None;
        for br in lo_r..=hi_r {
            for bc in lo_c..=hi_c {
                for &i in &self.buckets[br * self.bucket_cols + bc] {
                    let (y, pid) = self.features[i];
                    let d = y.distance(center);
                    if d > r {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bp)) => d < bd || (d == bd && pid < bp),
                    };
                    if better {
                        best = Some((d, pid));
                    }
                }
            }
        }
        best.map(|(_, pid)| pid)
    }

    fn cell_of(&self, y: &Pixel) -> Result<(usize, Pixel), ObservationError> {
        let (col, row) = self.grid.snap(y).ok_or(ObservationError::OutOfFrame {
            u: y.u,
            v: y.v,
            width: self.grid.width,
            height: self.grid.height,
        })?;
        Ok((self.grid.index(col, row), self.grid.center(col, row)))
    }

    pub fn content(&self, y: &Pixel) -> Result<CellContent, ObservationError> {
        let (cell, center) = self.cell_of(y)?;
        Ok(match self.nearest_feature(&center) {
            Some(pid) => CellContent::Point(pid),
            None => CellContent::Background(self.world.pool_index(self.image_id, cell)),
        })
    }

    pub fn descriptor(&self, y: &Pixel) -> Result<Descriptor, ObservationError> {
        let (cell, center) = self.cell_of(y)?;
        let base = match self.nearest_feature(&center) {
            Some(pid) => &self.world.latents[pid as usize],
            None => &self.world.pool[self.world.pool_index(self.image_id, cell)],
        };
        Ok(self.world.noisy(base, self.image_id, cell))
    }
}
