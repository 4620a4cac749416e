//! Scene-specific regression head: an MLP from descriptor to scene coordinate,
//! trained on a buffer with the clamped reprojection objective.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject_ray, ScenePoint, Z_MIN};
use crate::observation::{mix_keys, Descriptor};
use crate::sampler::{BufferInstance, TrainingBuffer};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("descriptor has dimension {got}, head expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite loss at pass {pass}, step {step}: {detail}")]
    NonFiniteLoss {
        pass: usize,
        step: usize,
        detail: String,
    },
    #[error("invalid head: {0}")]
    Invalid(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed head file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One affine layer, `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Layer {
    fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Rectified-linear MLP; the last layer is linear and its output is shifted
/// by `output_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrHead {
    layers: Vec<Layer>,
    output_offset: Vector3<f64>,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

impl ScrHead {
    pub fn new(layers: Vec<Layer>, output_offset: Vector3<f64>) -> Result<Self, HeadError> {
        if layers.is_empty() {
            return Err(HeadError::Invalid("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.output_dim() {
                return Err(HeadError::Invalid(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(HeadError::Invalid(format!("layer {i}: input width mismatch")));
            }
            if !l.weights.iter().chain(l.biases.iter()).all(|x| x.is_finite()) {
                return Err(HeadError::Invalid(format!("layer {i}: non-finite parameter")));
            }
        }
        if layers.last().map(Layer::output_dim) != Some(3) {
            return Err(HeadError::Invalid("last layer must output 3 values".into()));
        }
        if !output_offset.iter().all(|x| x.is_finite()) {
            return Err(HeadError::Invalid("non-finite output offset".into()));
        }
        Ok(Self {
            layers,
            output_offset,
        })
    }

    /// All-zero parameters: predicts `output_offset` everywhere.
    pub fn zeros(input_dim: usize, hidden: &[usize], output_offset: Vector3<f64>) -> Self {
        let widths = layer_widths(input_dim, hidden);
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Self {
            layers,
            output_offset,
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_offset: Vector3<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut head = Self::zeros(input_dim, hidden, output_offset);
        let n = head.layers.len();
        for (i, l) in head.layers.iter_mut().enumerate() {
            let fan_in = l.input_dim() as f64;
            let gain = if i + 1 == n { 1.0 } else { 6.0 };
            let bound = (gain / fan_in).sqrt();
            l.weights.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_offset(&self) -> Vector3<f64> {
        self.output_offset
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Rounds every parameter to `f32`, the precision of the head file.
    pub fn quantize(&mut self) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|x| x as f32 as f64);
            l.biases.mapv_inplace(|x| x as f32 as f64);
        }
        self.output_offset = self.output_offset.map(|x| x as f32 as f64);
    }

    fn check_dim(&self, d: &Descriptor) -> Result<(), HeadError> {
        if d.dim() != self.input_dim() {
            return Err(HeadError::DimMismatch {
                expected: self.input_dim(),
                got: d.dim(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, d: &Descriptor) -> Result<ScenePoint, HeadError> {
        Ok(self.predict_batch(std::slice::from_ref(d))?[0])
    }

    pub fn predict_batch(&self, ds: &[Descriptor]) -> Result<Vec<ScenePoint>, HeadError> {
        let refs: Vec<&Descriptor> = ds.iter().collect();
        self.predict_refs(&refs)
    }

    fn predict_refs(&self, ds: &[&Descriptor]) -> Result<Vec<ScenePoint>, HeadError> {
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.chunks(4096) {
            let x = self.input_matrix(chunk)?;
            let acts = self.forward(x);
            out.extend(rows_to_points(acts.last().unwrap(), &self.output_offset));
        }
        Ok(out)
    }

    fn input_matrix(&self, ds: &[&Descriptor]) -> Result<Array2<f64>, HeadError> {
        let dim = self.input_dim();
        let mut x = Array2::zeros((ds.len(), dim));
        for (mut row, d) in x.rows_mut().into_iter().zip(ds) {
            self.check_dim(d)?;
            for (dst, src) in row.iter_mut().zip(d.as_slice()) {
                *dst = *src as f64;
            }
        }
        Ok(x)
    }

    /// Activations of every layer, input first; the last entry is the raw
    /// (un-offset) output.
    fn forward(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&l.weights.t());
            z += &l.biases;
            if i + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }
}

fn layer_widths(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
    std::iter::once(input_dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(3))
        .collect()
}

fn rows_to_points(out: &Array2<f64>, offset: &Vector3<f64>) -> Vec<ScenePoint> {
    out.rows()
        .into_iter()
        .map(|r| Point3::new(r[0] + offset.x, r[1] + offset.y, r[2] + offset.z))
        .collect()
}

/// Parameters of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Clamp τ, pixels.
    pub tau: f64,
    /// `τ·tanh(r/τ)` when set, `min(r, τ)` otherwise.
    pub soft_clamp: bool,
    /// Depth of the fallback target for predictions behind the camera.
    pub d_target: f64,
}

/// Loss of one instance for prediction `x`, with its gradient w.r.t. `x`.
pub fn instance_loss(x: &ScenePoint, inst: &BufferInstance, cfg: &LossConfig) -> (f64, Vector3<f64>) {
    let r_mat = inst.pose.rotation_matrix();
    let pc = r_mat.transpose() * (x.coords - inst.pose.translation);
    if pc.z > Z_MIN {
        let k = &inst.intrinsics;
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        let (du, dv) = (u - inst.pixel.u, v - inst.pixel.v);
        let r = du.abs() + dv.abs();
        let (value, dl_dr) = if cfg.soft_clamp {
            let t = (r / cfg.tau).tanh();
            (cfg.tau * t, 1.0 - t * t)
        } else if r < cfg.tau {
            (r, 1.0)
        } else {
            (cfg.tau, 0.0)
        };
        let (su, sv) = (sign(du), sign(dv));
        let iz = 1.0 / pc.z;
        let g_cam = Vector3::new(
            su * k.fx * iz,
            sv * k.fy * iz,
            -(su * k.fx * pc.x + sv * k.fy * pc.y) * iz * iz,
        ) * dl_dr;
        (value, r_mat * g_cam)
    } else {
        let target = backproject_ray(&inst.pixel, &inst.intrinsics, &inst.pose, cfg.d_target)
            .expect("d_target is validated positive");
        let diff = x - target;
        (diff.abs().sum(), diff.map(sign))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of a single buffer instance under the head.
pub fn loss(head: &ScrHead, inst: &BufferInstance, cfg: &LossConfig) -> Result<f64, HeadError> {
    let x = head.predict(&inst.descriptor)?;
    Ok(instance_loss(&x, inst, cfg).0)
}

/// Gradient with the same shapes as the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub layers: Vec<Layer>,
}

impl HeadGradient {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Mean loss and mean parameter gradient over a batch.
pub fn loss_gradient(
    head: &ScrHead,
    batch: &[&BufferInstance],
    cfg: &LossConfig,
) -> Result<(f64, HeadGradient), HeadError> {
    assert!(!batch.is_empty(), "empty batch");
    let ds: Vec<&Descriptor> = batch.iter().map(|i| &i.descriptor).collect();
    let x = head.input_matrix(&ds)?;
    let acts = head.forward(x);
    let out = acts.last().unwrap();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut delta = Array2::zeros((batch.len(), 3));
    for (i, inst) in batch.iter().enumerate() {
        let o = out.row(i);
        let p = Point3::new(
            o[0] + head.output_offset.x,
            o[1] + head.output_offset.y,
            o[2] + head.output_offset.z,
        );
        let (l, g) = instance_loss(&p, inst, cfg);
        total += l;
        for c in 0..3 {
            delta[[i, c]] = g[c] * scale;
        }
    }
    let mut grads: Vec<Layer> = Vec::with_capacity(head.layers.len());
    for li in (0..head.layers.len()).rev() {
        let a_in = &acts[li];
        let gw = delta.t().dot(a_in);
        let gb = delta.sum_axis(Axis(0));
        if li > 0 {
            let mut d = delta.dot(&head.layers[li].weights);
            d.zip_mut_with(a_in, |g, a| {
                if *a <= 0.0 {
                    *g = 0.0
                }
            });
            delta = d;
        }
        grads.push(Layer {
            weights: gw,
            biases: gb,
        });
    }
    grads.reverse();
    Ok((total * scale, HeadGradient { layers: grads }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub passes: usize,
    /// `None` uses `min(5120, buffer / 10)`.
    pub batch_size: Option<usize>,
    pub peak_lr: f64,
    pub tau: f64,
    pub soft_clamp: bool,
    /// `None` uses the median depth of the output offset over the buffer's cameras.
    pub d_target: Option<f64>,
    pub hidden: Vec<usize>,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            passes: 16,
            batch_size: None,
            peak_lr: 3e-3,
            tau: 50.0,
            soft_clamp: true,
            d_target: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: &str| Err(HeadError::InvalidConfig(m.into()));
        if self.passes == 0 {
            return bad("passes must be at least 1");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak learning rate must be positive");
        }
        if let Some(d) = self.d_target {
            if !(d > 0.0) {
                return bad("d_target must be positive");
            }
        }
        Ok(())
    }

    pub fn effective_batch(&self, buffer_len: usize) -> usize {
        self.batch_size
            .unwrap_or_else(|| (buffer_len / 10).min(5120))
            .clamp(1, buffer_len.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean training loss of every pass.
    pub pass_losses: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub d_target: f64,
    pub wall_time_s: f64,
}

/// One-cycle schedule: linear warm-up over the first quarter, cosine decay
/// after.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    let total = total.max(1) as f64;
    let t = step as f64 / total;
    let warm = 0.25;
    let start = peak / 25.0;
    let end = peak / 1e3;
    if t < warm {
        start + (peak - start) * t / warm
    } else {
        let p = ((t - warm) / (1.0 - warm)).min(1.0);
        end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(head: &ScrHead) -> Self {
        let zeros = |h: &ScrHead| {
            h.layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(head),
            v: zeros(head),
            t: 0,
        }
    }

    fn step(&mut self, head: &mut ScrHead, g: &HeadGradient, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let update = |p: f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            p - lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
        };
        for (((l, gl), ml), vl) in head
            .layers
            .iter_mut()
            .zip(&g.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut l.weights)
                .and(&gl.weights)
                .and(&mut ml.weights)
                .and(&mut vl.weights)
                .for_each(|p, &g, m, v| *p = update(*p, m, v, g));
            ndarray::Zip::from(&mut l.biases)
                .and(&gl.biases)
                .and(&mut ml.biases)
                .and(&mut vl.biases)
                .for_each(|p, &g, m, v| *p = update(*p, m, v, g));
        }
    }
}

fn default_d_target(buffer: &TrainingBuffer, center: &ScenePoint) -> f64 {
    let mut depths: Vec<f64> = buffer
        .instances
        .iter()
        .map(|i| i.pose.world_to_camera(center).z)
        .filter(|z| *z > Z_MIN)
        .collect();
    if depths.is_empty() {
        return 1.0;
    }
    depths.sort_by(f64::total_cmp);
    depths[depths.len() / 2]
}

/// Trains a head whose output is offset by `scene_center`.
///
/// Deterministic for a fixed `cfg.rng_seed`. The returned head is rounded to
/// `f32`, so it equals the head read back from its file.
pub fn train(
    buffer: &TrainingBuffer,
    scene_center: &ScenePoint,
    cfg: &TrainConfig,
) -> Result<(ScrHead, TrainingReport), HeadError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(HeadError::InvalidConfig("empty buffer".into()));
    }
    let started = Instant::now();
    let loss_cfg = LossConfig {
        tau: cfg.tau,
        soft_clamp: cfg.soft_clamp,
        d_target: cfg.d_target.unwrap_or_else(|| default_d_target(buffer, scene_center)),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_keys(&[cfg.rng_seed, 0x1417]));
    let mut head = ScrHead::init(
        buffer.descriptor_dim,
        &cfg.hidden,
        scene_center.coords.map(|x| x as f32 as f64),
        &mut init_rng,
    );
    let batch = cfg.effective_batch(buffer.len());
    let per_pass = buffer.len().div_ceil(batch);
    let total_steps = per_pass * cfg.passes;
    let mut adam = Adam::new(&head);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut pass_losses = Vec::with_capacity(cfg.passes);
    let mut step = 0;
    for pass in 0..cfg.passes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[cfg.rng_seed, 0x9a55, pass as u64]));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(batch) {
            let insts: Vec<&BufferInstance> = idx.iter().map(|&i| &buffer.instances[i]).collect();
            let (l, g) = loss_gradient(&head, &insts, &loss_cfg)?;
            if !l.is_finite() || !g.max_abs().is_finite() {
                return Err(HeadError::NonFiniteLoss {
                    pass,
                    step,
                    detail: format!("batch loss {l}, batch size {}", insts.len()),
                });
            }
            sum += l * insts.len() as f64;
            adam.step(&mut head, &g, one_cycle_lr(step, total_steps, cfg.peak_lr));
            step += 1;
        }
        let mean = sum / buffer.len() as f64;
        log::debug!("pass {pass}: mean loss {mean:.4}");
        pass_losses.push(mean);
    }
    head.quantize();
    let report = TrainingReport {
        pass_losses,
        steps: step,
        batch_size: batch,
        d_target: loss_cfg.d_target,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((head, report))
}

const HEAD_MAGIC: &[u8; 7] = b"FTHEAD1";

/// Writes the little-endian head format (parameters as `f32`).
pub fn write_head(head: &ScrHead, mut w: impl Write) -> Result<(), HeadError> {
    w.write_all(HEAD_MAGIC)?;
    w.write_all(&(head.layers.len() as u32).to_le_bytes())?;
    for l in &head.layers {
        w.write_all(&(l.output_dim() as u32).to_le_bytes())?;
        w.write_all(&(l.input_dim() as u32).to_le_bytes())?;
        for x in l.weights.iter().chain(l.biases.iter()) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    for x in head.output_offset.iter() {
        w.write_all(&(*x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], HeadError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => HeadError::Format("truncated head file".into()),
        _ => HeadError::Io(e),
    })?;
    Ok(b)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, HeadError> {
    (0..n)
        .map(|_| Ok(f32::from_le_bytes(read_bytes(r)?) as f64))
        .collect()
}

pub fn read_head(mut r: impl Read) -> Result<ScrHead, HeadError> {
    if &read_bytes::<7>(&mut r)? != HEAD_MAGIC {
        return Err(HeadError::Format("bad magic".into()));
    }
    let n = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
    if n == 0 || n > 64 {
        return Err(HeadError::Format(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        if rows == 0 || cols == 0 || rows * cols > 1 << 26 {
            return Err(HeadError::Format(format!("implausible layer shape {rows}x{cols}")));
        }
        let w = read_f32s(&mut r, rows * cols)?;
        let b = read_f32s(&mut r, rows)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((rows, cols), w).expect("shape checked"),
            biases: Array1::from(b),
        });
    }
    let o = read_f32s(&mut r, 3)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(HeadError::Format("trailing bytes".into()));
    }
    ScrHead::new(layers, Vector3::new(o[0], o[1], o[2]))
        .map_err(|e| HeadError::Format(e.to_string()))
}

pub fn save_head(head: &ScrHead, path: impl AsRef<Path>) -> Result<(), HeadError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_head(head, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_head(path: impl AsRef<Path>) -> Result<ScrHead, HeadError> {
    read_head(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, reprojection_residual, CameraIntrinsics, Pixel, Pose};
    use crate::sampler::{Provenance, Strategy};
    use approx::assert_relative_eq;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap()
    }

    fn desc(rng: &mut impl Rng, dim: usize) -> Descriptor {
        Descriptor((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    fn loss_cfg() -> LossConfig {
        LossConfig {
            tau: 50.0,
            soft_clamp: true,
            d_target: 3.0,
        }
    }

    /// Exact (unquantized) instances; with `mixed`, every third camera looks
    /// away from the origin.
    fn random_instances(n: usize, dim: usize, seed: u64, mixed: bool) -> Vec<BufferInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let eye = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), -3.0);
                let target = if mixed && i % 3 == 0 {
                    Point3::new(0.0, 0.0, -6.0)
                } else {
                    Point3::origin()
                };
                let pose = Pose::look_at(&eye, &target, &Vector3::y());
                BufferInstance {
                    descriptor: desc(&mut rng, dim),
                    pixel: Pixel::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..80.0)),
                    intrinsics: cam(),
                    pose,
                    image_id: i as u32,
                }
            })
            .collect()
    }

    #[test]
    fn zero_head_predicts_offset() {
        let head = ScrHead::zeros(8, &DEFAULT_HIDDEN, Vector3::new(1.0, -2.0, 3.0));
        let p = head.predict(&Descriptor(vec![0.3; 8])).unwrap();
        assert_eq!(p, Point3::new(1.0, -2.0, 3.0));
        assert!(matches!(
            head.predict(&Descriptor(vec![0.3; 9])),
            Err(HeadError::DimMismatch { expected: 8, got: 9 })
        ));
    }

    #[test]
    fn prediction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ScrHead::init(16, &[32, 32], Vector3::zeros(), &mut rng);
        let ds: Vec<Descriptor> = (0..20).map(|_| desc(&mut rng, 16)).collect();
        let a = head.predict_batch(&ds).unwrap();
        let b: Vec<_> = ds.iter().map(|d| head.predict(d).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_projection_has_zero_loss() {
        let pose = Pose::look_at(&Point3::new(0.0, 0.0, -3.0), &Point3::origin(), &Vector3::y());
        let x = Point3::new(0.2, -0.1, 0.3);
        let y = project(&x, &cam(), &pose).unwrap();
        let inst = BufferInstance {
            descriptor: Descriptor(vec![0.0; 4]),
            pixel: y,
            intrinsics: cam(),
            pose,
            image_id: 0,
        };
        let (l, g) = instance_loss(&x, &inst, &loss_cfg());
        assert!(l < 1e-9);
        assert_eq!(g, Vector3::zeros());
        let head = ScrHead::zeros(4, &[8], x.coords);
        let (l, g) = loss_gradient(&head, &[&inst], &loss_cfg()).unwrap();
        assert!(l < 1e-9);
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn soft_clamp_closed_form() {
        let pose = Pose::identity();
        let inst = BufferInstance {
            descriptor: Descriptor(vec![0.0; 4]),
            pixel: Pixel::new(50.0 + 30.0, 40.0 + 20.0),
            intrinsics: cam(),
            pose,
            image_id: 0,
        };
        // prediction on the optical axis: r = 30 + 20 = τ
        let (l, _) = instance_loss(&Point3::new(0.0, 0.0, 2.0), &inst, &loss_cfg());
        assert_relative_eq!(l, 50.0 * 1f64.tanh(), epsilon = 1e-12);
        let hard = LossConfig {
            soft_clamp: false,
            ..loss_cfg()
        };
        let (l, g) = instance_loss(&Point3::new(0.0, 0.0, 2.0), &inst, &hard);
        assert_eq!(l, 50.0);
        assert_eq!(g, Vector3::zeros());
    }

    /// Straight-line reimplementation of the objective.
    fn oracle_loss(x: &ScenePoint, inst: &BufferInstance, cfg: &LossConfig) -> f64 {
        let r = inst.pose.rotation_matrix();
        let t = inst.pose.translation;
        let rt = r.transpose();
        let pc = rt * x.coords - rt * t;
        let k = &inst.intrinsics;
        if pc[2] > 1e-6 {
            let u = k.fx * pc[0] / pc[2] + k.cx;
            let v = k.fy * pc[1] / pc[2] + k.cy;
            let res = (u - inst.pixel.u).abs() + (v - inst.pixel.v).abs();
            cfg.tau * (res / cfg.tau).tanh()
        } else {
            let ray = Vector3::new(
                (inst.pixel.u - k.cx) / k.fx,
                (inst.pixel.v - k.cy) / k.fy,
                1.0,
            ) * cfg.d_target;
            let target = r * ray + t;
            (x.coords - target).iter().map(|d| d.abs()).sum()
        }
    }

    #[test]
    fn loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let insts = random_instances(200, 4, 5, true);
        let mut behind = 0;
        for inst in &insts {
            let x = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-8.0..2.0),
            );
            if inst.pose.world_to_camera(&x).z <= Z_MIN {
                behind += 1;
            }
            let (l, _) = instance_loss(&x, inst, &loss_cfg());
            assert!((l - oracle_loss(&x, inst, &loss_cfg())).abs() <= 1e-9 * l.max(1.0));
        }
        assert!(behind > 10 && behind < 190);
    }

    fn perturbed(head: &ScrHead, layer: usize, is_bias: bool, idx: usize, h: f64) -> ScrHead {
        let mut out = head.clone();
        let l = &mut out.layers[layer];
        if is_bias {
            l.biases[idx] += h;
        } else {
            let cols = l.weights.ncols();
            l.weights[[idx / cols, idx % cols]] += h;
        }
        out
    }

    fn check_finite_differences(insts: &[BufferInstance], head: &ScrHead, cfg: &LossConfig) {
        let batch: Vec<&BufferInstance> = insts.iter().collect();
        let (_, g) = loss_gradient(head, &batch, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-4;
        for _ in 0..50 {
            let layer = rng.gen_range(0..head.layers.len());
            let is_bias = rng.gen_bool(0.2);
            let n = if is_bias {
                head.layers[layer].biases.len()
            } else {
                head.layers[layer].weights.len()
            };
            let idx = rng.gen_range(0..n);
            let lp = loss_gradient(&perturbed(head, layer, is_bias, idx, h), &batch, cfg).unwrap().0;
            let lm = loss_gradient(&perturbed(head, layer, is_bias, idx, -h), &batch, cfg).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let gl = &g.layers[layer];
            let analytic = if is_bias {
                gl.biases[idx]
            } else {
                let cols = gl.weights.ncols();
                gl.weights[[idx / cols, idx % cols]]
            };
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale < 1e-3,
                "layer {layer} bias {is_bias} idx {idx}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_in_front() {
        let insts = random_instances(64, 6, 21, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = ScrHead::init(6, &[16, 16], Vector3::new(0.0, 0.0, 0.5), &mut rng);
        let preds = head
            .predict_batch(&insts.iter().map(|i| i.descriptor.clone()).collect::<Vec<_>>())
            .unwrap();
        assert!(insts
            .iter()
            .zip(&preds)
            .all(|(i, x)| i.pose.world_to_camera(x).z > 0.5 || i.image_id % 3 == 0));
        check_finite_differences(&insts, &head, &loss_cfg());
    }

    #[test]
    fn gradient_matches_finite_differences_behind() {
        let insts = random_instances(64, 6, 22, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // offset far behind every camera
        let head = ScrHead::init(6, &[16, 16], Vector3::new(0.0, 0.0, -20.0), &mut rng);
        let preds = head
            .predict_batch(&insts.iter().map(|i| i.descriptor.clone()).collect::<Vec<_>>())
            .unwrap();
        assert!(insts
            .iter()
            .zip(&preds)
            .all(|(i, x)| i.pose.world_to_camera(x).z < 0.0));
        check_finite_differences(&insts, &head, &loss_cfg());
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let insts = random_instances(30, 6, 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ScrHead::init(6, &[16], Vector3::zeros(), &mut rng);
        let once: Vec<&BufferInstance> = insts.iter().collect();
        let twice: Vec<&BufferInstance> = insts.iter().chain(insts.iter()).collect();
        let (la, ga) = loss_gradient(&head, &once, &loss_cfg()).unwrap();
        let (lb, gb) = loss_gradient(&head, &twice, &loss_cfg()).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.layers.iter().zip(&gb.layers) {
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_loss_is_below_tau() {
        let insts = random_instances(100, 4, 30, true);
        let cfg = loss_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for inst in &insts {
            let x = Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0);
            if inst.pose.world_to_camera(&x).z <= Z_MIN {
                continue;
            }
            let (l, _) = instance_loss(&x, inst, &cfg);
            let r = reprojection_residual(&x, &inst.pixel, &inst.intrinsics, &inst.pose).unwrap();
            // tanh saturates to exactly 1.0 in f64 beyond r ≈ 19τ
            if r < 18.0 * cfg.tau {
                assert!(l < cfg.tau, "r {r} l {l}");
                checked += 1;
            } else {
                assert!(l <= cfg.tau);
            }
        }
        assert!(checked > 30);
    }

    /// Instances observing `points` (one unique descriptor each) exactly from
    /// two cameras.
    fn two_view_buffer(points: &[ScenePoint], dim: usize) -> TrainingBuffer {
        let k = CameraIntrinsics::new(200.0, 200.0, 80.0, 60.0, 160, 120).unwrap();
        let poses = [
            Pose::look_at(&Point3::new(-0.8, 0.0, -3.0), &Point3::origin(), &Vector3::y()),
            Pose::look_at(&Point3::new(0.8, 0.1, -3.0), &Point3::origin(), &Vector3::y()),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let descs: Vec<Descriptor> = points.iter().map(|_| desc(&mut rng, dim)).collect();
        let mut instances = Vec::new();
        for _ in 0..20 {
            for (pi, x) in points.iter().enumerate() {
                for (ci, pose) in poses.iter().enumerate() {
                    let y = project(x, &k, pose).unwrap();
                    instances.push(BufferInstance::new(descs[pi].clone(), y, k, *pose, ci as u32));
                }
            }
        }
        TrainingBuffer {
            instances,
            descriptor_dim: dim,
            provenance: Provenance {
                strategy: Strategy::Focus { rho: 1.0 },
                seed: 0,
            },
        }
    }

    #[test]
    fn two_views_triangulate_unique_descriptors() {
        let points = [
            Point3::new(0.1, 0.2, 0.0),
            Point3::new(-0.3, 0.1, 0.2),
            Point3::new(0.25, -0.2, -0.1),
            Point3::new(-0.1, -0.15, 0.15),
        ];
        let buffer = two_view_buffer(&points, 16);
        let center = Point3::origin();
        let cfg = TrainConfig {
            passes: 300,
            batch_size: Some(32),
            hidden: vec![64, 64],
            ..TrainConfig::default()
        };
        let (head, report) = train(&buffer, &center, &cfg).unwrap();
        assert!(report.pass_losses.last().unwrap() < &report.pass_losses[0]);
        for (i, x) in points.iter().enumerate() {
            let d = &buffer.instances[2 * i].descriptor;
            let err = (head.predict(d).unwrap() - x).norm();
            assert!(err < 0.05, "point {i}: error {err}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let buffer = two_view_buffer(&[Point3::new(0.1, 0.0, 0.0), Point3::new(0.0, 0.1, 0.1)], 8);
        let cfg = TrainConfig {
            passes: 3,
            batch_size: Some(7),
            hidden: vec![16],
            rng_seed: 9,
            ..TrainConfig::default()
        };
        let (a, _) = train(&buffer, &Point3::origin(), &cfg).unwrap();
        let (b, _) = train(&buffer, &Point3::origin(), &cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_head(&a, &mut x).unwrap();
        write_head(&b, &mut y).unwrap();
        assert_eq!(x, y);
        let back = read_head(x.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(read_head(&x[..x.len() - 2]).is_err());
    }

    #[test]
    fn config_validation_and_batch_default() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.effective_batch(100_000), 5120);
        assert_eq!(cfg.effective_batch(1000), 100);
        assert_eq!(cfg.effective_batch(5), 1);
        assert!(TrainConfig { passes: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: Some(0), ..cfg }.validate().is_err());
    }

    #[test]
    fn one_cycle_shape() {
        let peak = 3e-3;
        assert!(one_cycle_lr(0, 100, peak) < peak / 10.0);
        assert_relative_eq!(one_cycle_lr(25, 100, peak), peak, epsilon = 1e-12);
        assert!(one_cycle_lr(99, 100, peak) < peak / 100.0);
    }
}
