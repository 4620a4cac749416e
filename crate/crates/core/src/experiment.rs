//! End-to-end runs on synthetic sequences: buffer, training, localization
//! of held-out frames and reporting. Backs the `compare` and `ablate`
//! commands.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{
    buffer_reprojection_stats, median_errors, pose_error, rho_ablation_aggregate, AblationScore,
    EvalError, PoseError, ReportRow, SequenceResult, Spread,
};
use crate::localizer::{
    ensemble_localize, query_pixels, LocalizationResult, LocalizerError, RansacConfig, QUERY_CAP,
};
use crate::observation::{mix_keys, ObservationError};
use crate::sampler::{build_buffer, BufferConfig, SamplerError, Strategy};
use crate::scene_map::{generate_synthetic, MapError, SynthConfig, SyntheticScene, Trajectory};
use crate::scr_head::{train, HeadError, ScrHead, TrainConfig, TrainingReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("sequence {sequence} at rho {rho}: {message}")]
    Ablation {
        sequence: String,
        rho: f64,
        message: String,
    },
}

/// Everything that determines a suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub sequences: usize,
    /// Scene template; each sequence gets its own generator seed.
    pub scene: SynthConfig,
    pub buffer: BufferConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub query_cap: usize,
    pub spread: Spread,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sequences: 2,
            scene: SynthConfig {
                n_points: 300,
                n_images: 40,
                n_queries: 20,
                descriptor_dim: 32,
                map_point_noise: 0.03,
                trajectory: Trajectory::default(),
                ..SynthConfig::default()
            },
            buffer: BufferConfig {
                target_size: 100_000,
                ..BufferConfig::default()
            },
            train: TrainConfig {
                batch_size: Some(512),
                ..TrainConfig::default()
            },
            ransac: RansacConfig::default(),
            query_cap: QUERY_CAP,
            spread: Spread::Population,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Hex SHA-256 of the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn scene_config(&self, sequence: usize) -> SynthConfig {
        SynthConfig {
            rng_seed: mix_keys(&[self.seed, 0x5e9, sequence as u64]),
            ..self.scene.clone()
        }
    }

    pub fn scene(&self, sequence: usize) -> Result<SyntheticScene, ExperimentError> {
        Ok(generate_synthetic(&self.scene_config(sequence))?)
    }

    fn buffer_config(&self, sequence: usize) -> BufferConfig {
        BufferConfig {
            seed: mix_keys(&[self.seed, 0xb0f, sequence as u64]),
            ..self.buffer.clone()
        }
    }

    fn train_config(&self, sequence: usize) -> TrainConfig {
        TrainConfig {
            rng_seed: mix_keys(&[self.seed, 0x7a1, sequence as u64]),
            ..self.train.clone()
        }
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sequence_name(sequence: usize) -> String {
    format!("seq{sequence}")
}

/// Localization of one held-out frame. `estimate` is `None` when no head
/// produced an acceptable pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub query_id: u32,
    pub estimate: Option<LocalizationResult>,
    pub head_index: Option<usize>,
    pub error: Option<PoseError>,
}

/// Localizes every held-out frame of `scene` with the ensemble `heads`.
pub fn localize_frames(
    scene: &SyntheticScene,
    heads: &[ScrHead],
    ransac: &RansacConfig,
    query_cap: usize,
    seed: u64,
) -> Result<Vec<FrameOutcome>, ExperimentError> {
    let mut out = Vec::with_capacity(scene.queries.len());
    for (qi, query) in scene.queries.iter().enumerate() {
        let view = scene.query_view(qi);
        let key = mix_keys(&[seed, 0x0de, query.id as u64]);
        let pixels = query_pixels(&scene.world.grid(&view.intrinsics), query_cap, key);
        let descriptors = scene.world.observations_in_view(&scene.map, &view, &pixels)?;
        let cfg = RansacConfig {
            rng_seed: key,
            ..*ransac
        };
        let frame = match ensemble_localize(heads, &descriptors, &pixels, &view.intrinsics, &cfg) {
            Ok((loc, head)) => FrameOutcome {
                query_id: query.id,
                estimate: Some(loc),
                head_index: Some(head),
                error: Some(pose_error(&loc.pose, &query.pose)),
            },
            Err(LocalizerError::LocalizationFailed { .. })
            | Err(LocalizerError::NotEnoughCorrespondences(_)) => FrameOutcome {
                query_id: query.id,
                estimate: None,
                head_index: None,
                error: None,
            },
            Err(e) => return Err(e.into()),
        };
        out.push(frame);
    }
    Ok(out)
}

/// Pose errors of [`localize_frames`], failures counted separately.
pub fn localize_queries(
    scene: &SyntheticScene,
    heads: &[ScrHead],
    ransac: &RansacConfig,
    query_cap: usize,
    seed: u64,
) -> Result<SequenceResult, ExperimentError> {
    Ok(sequence_result(&localize_frames(scene, heads, ransac, query_cap, seed)?))
}

pub fn sequence_result(frames: &[FrameOutcome]) -> SequenceResult {
    let mut result = SequenceResult::default();
    for f in frames {
        match f.error {
            Some(e) => result.errors.push(e),
            None => result.failures += 1,
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub row: ReportRow,
    pub result: SequenceResult,
    pub training: TrainingReport,
}

/// Buffer, training and localization of one sequence with one strategy.
pub fn run_sequence(
    cfg: &SuiteConfig,
    sequence: usize,
    scene: &SyntheticScene,
    strategy: Strategy,
) -> Result<(RunOutcome, ScrHead), ExperimentError> {
    let buffer = build_buffer(&scene.map, &scene.world, strategy, &cfg.buffer_config(sequence))?;
    let (head, training) = train(&buffer, &scene.map.scene_center, &cfg.train_config(sequence))?;
    let reproj = buffer_reprojection_stats(&head, &buffer)?;
    let result = localize_queries(
        scene,
        std::slice::from_ref(&head),
        &cfg.ransac,
        cfg.query_cap,
        mix_keys(&[cfg.seed, sequence as u64]),
    )?;
    log::info!(
        "{} {} rho={:?}: reproj median {:.2}px, {} failures, train {:.1}s",
        sequence_name(sequence),
        strategy.name(),
        strategy.rho(),
        reproj.1,
        result.failures,
        training.wall_time_s
    );
    let row = ReportRow::new(sequence_name(sequence), strategy.rho(), strategy.name(), &result, reproj);
    Ok((
        RunOutcome {
            row,
            result,
            training,
        },
        head,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub config_hash: String,
    pub rho: f64,
    /// Per sequence: the focus row, then the random row.
    pub rows: Vec<ReportRow>,
}

/// Focus (radius `rho`) against random sampling on the same scenes, seeds
/// and training budget.
pub fn compare(cfg: &SuiteConfig, rho: f64) -> Result<CompareReport, ExperimentError> {
    let mut rows = Vec::new();
    for s in 0..cfg.sequences {
        let scene = cfg.scene(s)?;
        for strategy in [Strategy::Focus { rho }, Strategy::Random] {
            rows.push(run_sequence(cfg, s, &scene, strategy)?.0.row);
        }
    }
    Ok(CompareReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        rho,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub config_hash: String,
    pub radii: Vec<f64>,
    /// Per (sequence, radius) rows, sequence-major.
    pub rows: Vec<ReportRow>,
    /// Median translation error, sequences × radii.
    pub errors: Vec<Vec<f64>>,
    pub score: AblationScore,
}

/// Runs every radius on every sequence and aggregates the median
/// translation errors.
pub fn ablate(cfg: &SuiteConfig, radii: &[f64]) -> Result<AblationReport, ExperimentError> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for s in 0..cfg.sequences {
        let scene = cfg.scene(s)?;
        let mut row_errors = Vec::with_capacity(radii.len());
        for &rho in radii {
            let (out, _) = run_sequence(cfg, s, &scene, Strategy::Focus { rho })?;
            let (_, t) = median_errors(&out.result).map_err(|e| ExperimentError::Ablation {
                sequence: sequence_name(s),
                rho,
                message: e.to_string(),
            })?;
            row_errors.push(t);
            rows.push(out.row);
        }
        errors.push(row_errors);
    }
    let score = rho_ablation_aggregate(&errors, radii, cfg.spread)?;
    Ok(AblationReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        radii: radii.to_vec(),
        rows,
        errors,
        score,
    })
}
