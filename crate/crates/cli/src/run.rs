//! Run-directory layout, locking, JSON-lines logs, fingerprinted stamps
//! and checkpoints.
//!
//! ```text
//! <run>/config.json                 effective configuration
//! <run>/run.lock                    held while a stage runs
//! <run>/corpus/                     VGRD pairs, VFEA views, manifest.json, stamp.json
//! <run>/checkpoints/<stage>.ckpt    weights, optimizer moments, meta/*
//! <run>/logs/<stage>.jsonl          one record per step, append-only
//! <run>/summaries/<stage>.json      end-of-stage measurements
//! <run>/completions/                completed VGRD grids and stamp.json
//! <run>/eval/report.json            EvalReport
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bridgekit::state::StateDict;
use bridgekit_tensor::{load_checkpoint, save_checkpoint};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    Gen,
    VqStage1,
    VqStage2,
    Bridge,
    Complete,
    Eval,
    Mesh,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Gen => "gen",
            StageId::VqStage1 => "vqvae_stage1",
            StageId::VqStage2 => "vqvae_stage2",
            StageId::Bridge => "bridge",
            StageId::Complete => "complete",
            StageId::Eval => "eval",
            StageId::Mesh => "mesh",
        }
    }

    /// Stream tag mixed into per-step seeds.
    pub fn tag(self) -> u64 {
        match self {
            StageId::Gen => 1,
            StageId::VqStage1 => 2,
            StageId::VqStage2 => 3,
            StageId::Bridge => 4,
            StageId::Complete => 5,
            StageId::Eval => 6,
            StageId::Mesh => 7,
        }
    }
}

/// Seed for `(seed, stage, step)`; step 0 is model initialization.
pub fn step_seed(seed: u64, stage: StageId, step: u64) -> u64 {
    let mut z = seed ^ stage.tag().wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fingerprint stamp for directories of artifacts whose own format has no
/// room for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub fingerprint: String,
    pub stage: String,
    pub files: Vec<String>,
}

pub struct RunDir {
    root: PathBuf,
}

/// Exclusive hold on a run directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }

    pub fn checkpoint_path(&self, stage: StageId) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    pub fn log_path(&self, stage: StageId) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.name()))
    }

    pub fn summary_path(&self, stage: StageId) -> PathBuf {
        self.root.join("summaries").join(format!("{}.json", stage.name()))
    }

    pub fn completions_dir(&self) -> PathBuf {
        self.root.join("completions")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn meshes_dir(&self) -> PathBuf {
        self.root.join("meshes")
    }

    /// Takes the run lock, failing if another stage holds it.
    pub fn lock(&self) -> CliResult<RunLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another stage; remove the file if no stage is running",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    /// Records `cfg` as the run's configuration, or checks it against the
    /// one already recorded. `force` overwrites a mismatching record.
    pub fn bind_config(&self, cfg: &RunConfig, force: bool) -> CliResult<()> {
        let path = self.config_path();
        if path.exists() {
            let old = RunConfig::load(&path)?;
            if old.fingerprint() != cfg.fingerprint() && !force {
                return Err(CliError::Config(format!(
                    "configuration fingerprint {} differs from the run's {} (use --force to rebind)",
                    short(&cfg.fingerprint()),
                    short(&old.fingerprint())
                )));
            }
            if old == *cfg {
                return Ok(());
            }
        }
        fs::create_dir_all(&self.root)?;
        fs::write(&path, cfg.to_json())?;
        Ok(())
    }

    pub fn write_stamp(&self, dir: &Path, stamp: &Stamp) -> CliResult<()> {
        fs::write(dir.join("stamp.json"), serde_json::to_string_pretty(stamp)? + "\n")?;
        Ok(())
    }

    /// Reads a stamp; `None` when the directory was never produced.
    pub fn read_stamp(&self, dir: &Path) -> CliResult<Option<Stamp>> {
        let p = dir.join("stamp.json");
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }

    pub fn write_summary(&self, stage: StageId, v: &Value) -> CliResult<()> {
        let p = self.summary_path(stage);
        fs::create_dir_all(p.parent().unwrap())?;
        fs::write(p, serde_json::to_string_pretty(v)? + "\n")?;
        Ok(())
    }

    pub fn read_summary(&self, stage: StageId) -> CliResult<Value> {
        let p = self.summary_path(stage);
        let text = fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn open_log(&self, stage: StageId, seed: u64) -> CliResult<RunLog> {
        let path = self.log_path(stage);
        fs::create_dir_all(path.parent().unwrap())?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(RunLog {
            file,
            stage,
            seed,
            start: Instant::now(),
        })
    }
}

pub fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// Append-only JSON-lines log for one stage invocation.
pub struct RunLog {
    file: File,
    stage: StageId,
    seed: u64,
    start: Instant,
}

impl RunLog {
    /// Appends `fields` with stage, seed and wall-clock seconds added.
    pub fn record(&mut self, fields: Value) -> CliResult<()> {
        let mut line = json!({
            "stage": self.stage.name(),
            "seed": self.seed,
            "wall_s": self.start.elapsed().as_secs_f64(),
        });
        if let (Some(m), Value::Object(extra)) = (line.as_object_mut(), fields) {
            m.extend(extra);
        }
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

const FINGERPRINT_KEY: &str = "meta/fingerprint";
const STEP_KEY: &str = "meta/step";

fn fingerprint_words(fp: &str) -> Vec<u64> {
    (0..fp.len())
        .step_by(16)
        .map(|i| u64::from_str_radix(&fp[i..(i + 16).min(fp.len())], 16).unwrap_or(0))
        .collect()
}

fn words_to_fingerprint(w: &[u64]) -> String {
    w.iter().map(|v| format!("{v:016x}")).collect()
}

/// Saves `state` with the step counter and config fingerprint embedded.
pub fn save_stage_checkpoint(path: &Path, mut state: StateDict, step: u64, fingerprint: &str) -> CliResult<()> {
    state.put_u64s(STEP_KEY, &[step]);
    state.put_u64s(FINGERPRINT_KEY, &fingerprint_words(fingerprint));
    fs::create_dir_all(path.parent().unwrap())?;
    save_checkpoint(path, state.entries())?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub state: StateDict,
    pub step: u64,
    pub fingerprint: String,
}

/// Loads a stage checkpoint and checks its fingerprint unless `force`.
pub fn load_stage_checkpoint(path: &Path, fingerprint: &str, force: bool) -> CliResult<LoadedCheckpoint> {
    let state =
        StateDict::from_entries(load_checkpoint(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
    let step = *state.u64s(STEP_KEY)?.first().unwrap_or(&0);
    let fp = words_to_fingerprint(&state.u64s(FINGERPRINT_KEY)?);
    if fp != fingerprint && !force {
        return Err(CliError::Config(format!(
            "{} was written under config {} but the current config is {} (use --force)",
            path.display(),
            short(&fp),
            short(fingerprint)
        )));
    }
    Ok(LoadedCheckpoint {
        state,
        step,
        fingerprint: fp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_words_roundtrip() {
        let fp = RunConfig::default().fingerprint();
        assert_eq!(words_to_fingerprint(&fingerprint_words(&fp)), fp);
    }

    #[test]
    fn step_seeds_differ_by_stage_and_step() {
        let a = step_seed(1, StageId::VqStage1, 5);
        assert_ne!(a, step_seed(1, StageId::VqStage2, 5));
        assert_ne!(a, step_seed(1, StageId::VqStage1, 6));
        assert_ne!(a, step_seed(2, StageId::VqStage1, 5));
        assert_eq!(a, step_seed(1, StageId::VqStage1, 5));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let held = run.lock().unwrap();
        assert!(matches!(run.lock(), Err(CliError::Io(_))));
        drop(held);
        run.lock().unwrap();
    }
}
