//! Scene directories, metadata sidecars and cleanup of partial outputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use scrfocus::experiment::{config_hash, AblationReport, FrameOutcome};
use scrfocus::observation::ObservationWorld;
use scrfocus::scene_map::{load_map, save_map, MapImage, SyntheticScene};

const MAP_FILE: &str = "map.txt";
const WORLD_FILE: &str = "world.json";
const QUERIES_FILE: &str = "queries.json";

/// Everything a command wrote, so a failed run can take it back.
#[derive(Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    /// Registers `path` as an output and returns it.
    pub fn file(&mut self, path: &Path) -> PathBuf {
        self.files.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// Creates `dir` and any missing ancestors, remembering the new ones.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn parent_of(&mut self, path: &Path) -> Result<()> {
        match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => self.dir(p),
            _ => Ok(()),
        }
    }

    /// Removes registered files, then the directories this run created.
    pub fn discard(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Sidecar describing how an artifact was produced.
#[derive(Debug, Serialize)]
pub struct Meta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    /// SHA-256 of every input artifact.
    pub inputs: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<Value>,
    pub version: &'static str,
}

impl Meta {
    pub fn new(command: &str, seed: u64, config: Value, inputs: Value) -> Self {
        let config_hash = config_hash(&json!({ "seed": seed, "config": config, "inputs": inputs }));
        Self {
            command: command.into(),
            seed,
            config_hash,
            config,
            inputs,
            extra: None,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    /// `<artifact>.meta.json` next to the artifact.
    pub fn sidecar(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        artifact.with_file_name(name)
    }

    pub fn write(&self, path: &Path, out: &mut Outputs) -> Result<()> {
        write_json(&out.file(path), self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn scene_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MAP_FILE, WORLD_FILE, QUERIES_FILE] {
        let p = dir.join(name);
        h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(hex(&h.finalize()))
}

pub fn save_scene(scene: &SyntheticScene, dir: &Path, out: &mut Outputs) -> Result<()> {
    save_map(&scene.map, out.file(&dir.join(MAP_FILE))).context("writing map")?;
    write_json(&out.file(&dir.join(WORLD_FILE)), &scene.world)?;
    write_json(&out.file(&dir.join(QUERIES_FILE)), &scene.queries)
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let map = load_map(dir.join(MAP_FILE)).with_context(|| format!("reading map in {}", dir.display()))?;
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let world: ObservationWorld = serde_json::from_str(&read(WORLD_FILE)?).context("parsing world")?;
    let queries: Vec<MapImage> = serde_json::from_str(&read(QUERIES_FILE)?).context("parsing queries")?;
    Ok(SyntheticScene {
        map,
        world,
        queries,
    })
}

pub fn write_frames_csv(path: &Path, frames: &[FrameOutcome]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record([
        "query_id", "status", "head", "inliers", "mean_inlier_error", "qw", "qx", "qy", "qz", "tx",
        "ty", "tz", "rot_err_deg", "trans_err",
    ])?;
    for fr in frames {
        let mut rec = vec![fr.query_id.to_string()];
        match (&fr.estimate, fr.head_index, &fr.error) {
            (Some(est), Some(head), Some(err)) => {
                rec.push("ok".into());
                rec.push(head.to_string());
                rec.push(est.inlier_count.to_string());
                rec.push(est.mean_inlier_error.to_string());
                rec.extend(est.pose.wxyz().iter().map(|x| x.to_string()));
                rec.extend(est.pose.translation.iter().map(|x| x.to_string()));
                rec.push(err.rotation_deg.to_string());
                rec.push(err.translation.to_string());
            }
            _ => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), 12));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One `score` row per radius and a closing `argmin` row.
pub fn write_scores_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["kind", "radius", "score"])?;
    let s = &report.score;
    for (r, v) in s.radii.iter().zip(&s.scores) {
        w.write_record(["score".to_string(), r.to_string(), v.to_string()])?;
    }
    w.write_record([
        "argmin".to_string(),
        s.best_radius().to_string(),
        s.scores[s.argmin].to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
