//! Stage implementations behind the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use bridgekit::denoiser::{bridge_sample, eps_loss, train_bridge_step, BridgeBatch, Denoiser};
use bridgekit::geometry::{marching_cubes, TriMesh, MC_ISO};
use bridgekit::grid::{load_corpus, load_grid, make_corpus_with, save_grid, DistanceKind, ShapePair, VoxelGrid};
use bridgekit::metrics::{evaluate_corpus, EvalReport};
use bridgekit::model::{CompletionModel, InferenceConfig};
use bridgekit::state::StateDict;
use bridgekit::views::{load_features, save_features, view_features, PatchDescriptor, ViewFeatures};
use bridgekit::vqvae::{vq_training_step, Encoder, Stage, VqBatch, VqVae};
use bridgekit_tensor::{no_grad, Module, Optimizer, OptimizerConfig, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::{
    load_stage_checkpoint, save_stage_checkpoint, short, step_seed, LoadedCheckpoint, RunDir, RunLock, StageId, Stamp,
};

/// A validated configuration bound to a locked run directory.
pub struct Context {
    pub run: RunDir,
    pub cfg: RunConfig,
    pub force: bool,
    fingerprint: String,
    _lock: RunLock,
}

impl Context {
    pub fn open(root: impl Into<PathBuf>, cfg: RunConfig, force: bool) -> CliResult<Self> {
        cfg.validate()?;
        let run = RunDir::new(root);
        let lock = run.lock()?;
        run.bind_config(&cfg, force)?;
        Ok(Self {
            fingerprint: cfg.fingerprint(),
            run,
            cfg,
            force,
            _lock: lock,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check_stamp(&self, stamp: &Stamp, what: &str) -> CliResult<()> {
        if stamp.fingerprint != self.fingerprint && !self.force {
            return Err(CliError::Config(format!(
                "{what} was produced under config {} but the current config is {} (use --force)",
                short(&stamp.fingerprint),
                short(&self.fingerprint)
            )));
        }
        Ok(())
    }

    fn progress(&self, stage: StageId, step: u64, end: u64, msg: &str, elapsed: f64) {
        let every = self.cfg.run.print_every;
        if every > 0 && (step % every == 0 || step == end) {
            eprintln!("[{}] step {step}/{end} {msg} ({elapsed:.1}s)", stage.name());
        }
    }
}

/// Limits how far one invocation advances a training stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop after this many new steps, leaving the stage resumable.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub step: u64,
    pub end: u64,
    pub finished: bool,
}

/// Command-line replacements for inference settings; they do not alter
/// the recorded configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferenceOverrides {
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
}

fn features_file(id: &str) -> String {
    format!("{id}_views.vfea")
}

/// Writes the procedural corpus and its rendered view features.
pub fn gen(ctx: &Context) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let dir = ctx.run.corpus_dir();
    let mut log = ctx.run.open_log(StageId::Gen, cfg.seed)?;
    let manifest = make_corpus_with(cfg.seed, cfg.grid.pairs, &cfg.corpus_options(), &dir)?;
    let views = cfg.views()?;
    let extractor = PatchDescriptor { patch: cfg.views.patch };
    let mut files = vec!["manifest.json".to_string()];
    for pair in load_corpus(&manifest)? {
        let f = view_features(&pair.complete, &views, &extractor)?;
        let name = features_file(&pair.id);
        save_features(&f, &dir.join(&name))?;
        files.push(format!("{}_partial.vgrd", pair.id));
        files.push(format!("{}_complete.vgrd", pair.id));
        files.push(name);
    }
    ctx.run.write_stamp(
        &dir,
        &Stamp {
            fingerprint: ctx.fingerprint.clone(),
            stage: StageId::Gen.name().into(),
            files,
        },
    )?;
    log.record(json!({"event": "done", "pairs": cfg.grid.pairs}))?;
    Ok(manifest)
}

struct Corpus {
    pairs: Vec<ShapePair>,
    feats: Vec<ViewFeatures>,
}

impl Corpus {
    fn completes(&self, idx: &[usize]) -> Vec<&VoxelGrid> {
        idx.iter().map(|&i| &self.pairs[i].complete).collect()
    }

    fn partials(&self, idx: &[usize]) -> Vec<&VoxelGrid> {
        idx.iter().map(|&i| &self.pairs[i].partial).collect()
    }

    fn feats(&self, idx: &[usize]) -> Vec<&ViewFeatures> {
        idx.iter().map(|&i| &self.feats[i]).collect()
    }

    fn all(&self) -> Vec<usize> {
        (0..self.pairs.len()).collect()
    }
}

fn open_corpus(ctx: &Context) -> CliResult<Corpus> {
    let dir = ctx.run.corpus_dir();
    let stamp = ctx
        .run
        .read_stamp(&dir)?
        .ok_or_else(|| CliError::Ordering("no corpus in this run; run `gen` first".into()))?;
    ctx.check_stamp(&stamp, "the corpus")?;
    let pairs = load_corpus(&ctx.run.manifest_path())?;
    let feats = pairs
        .iter()
        .map(|p| load_features(&dir.join(features_file(&p.id))))
        .collect::<bridgekit::Result<Vec<_>>>()?;
    Ok(Corpus { pairs, feats })
}

fn rng_for(ctx: &Context, stage: StageId, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(step_seed(ctx.cfg.seed, stage, step))
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, bs: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, bs.min(n)).into_vec()
}

fn put_optimizer<T: Scalar>(opt: &Optimizer<T>, out: &mut StateDict) {
    for (name, dims, vals) in opt.state() {
        out.put(name, &dims, &vals);
    }
}

fn load_optimizer<T: Scalar>(opt: &mut Optimizer<T>, s: &StateDict) -> CliResult<()> {
    opt.load_state(|k| s.values::<T>(k).ok())?;
    Ok(())
}

/// Loads a stage checkpoint that must have reached `end`.
fn require_finished(ctx: &Context, stage: StageId, end: u64, next: &str) -> CliResult<LoadedCheckpoint> {
    let path = ctx.run.checkpoint_path(stage);
    if !path.exists() {
        return Err(CliError::Ordering(format!(
            "{next} needs a finished {} checkpoint, but none exists",
            stage.name()
        )));
    }
    let ck = load_stage_checkpoint(&path, &ctx.fingerprint, ctx.force)?;
    if ck.step < end {
        return Err(CliError::Ordering(format!(
            "{} stopped at step {} of {end}; resume it before {next}",
            stage.name(),
            ck.step
        )));
    }
    Ok(ck)
}

/// Stage bounds in global steps; stage two continues stage one's count.
fn vq_bounds(cfg: &RunConfig, stage: Stage) -> (u64, u64) {
    let s1 = cfg.vqvae.stage1_steps;
    match stage {
        Stage::One => (0, s1),
        Stage::Two => (s1, s1 + cfg.vqvae.stage2_steps),
    }
}

fn vq_stage_id(stage: Stage) -> StageId {
    match stage {
        Stage::One => StageId::VqStage1,
        Stage::Two => StageId::VqStage2,
    }
}

/// The VQ-VAE checkpoint the bridge builds on, with its final step.
fn final_vq_stage(cfg: &RunConfig) -> (StageId, u64) {
    if cfg.vqvae.fusion.enabled {
        (StageId::VqStage2, vq_bounds(cfg, Stage::Two).1)
    } else {
        (StageId::VqStage1, vq_bounds(cfg, Stage::One).1)
    }
}

fn vq_state(vq: &VqVae<f32>, opt: &Optimizer<f32>) -> StateDict {
    let mut s = StateDict::new();
    vq.save_state(&mut s);
    put_optimizer(opt, &mut s);
    s
}

/// Trains one VQ-VAE stage from scratch or from its latest checkpoint.
pub fn train_vqvae(ctx: &Context, stage: Stage, opts: TrainOptions) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    if stage == Stage::Two && !cfg.vqvae.fusion.enabled {
        return Err(CliError::Config(
            "stage 2 trains depth fusion, which vqvae.fusion.enabled turns off".into(),
        ));
    }
    let id = vq_stage_id(stage);
    let corpus = open_corpus(ctx)?;
    let (start, end) = vq_bounds(cfg, stage);
    let path = ctx.run.checkpoint_path(id);
    let mut vq = VqVae::<f32>::new(cfg.vq_config(), &mut rng_for(ctx, id, 0))?;
    let adam = OptimizerConfig::adam(cfg.vqvae.lr);
    let (mut opt, mut step) = if path.exists() {
        let ck = load_stage_checkpoint(&path, &ctx.fingerprint, ctx.force)?;
        vq.load_state(&ck.state)?;
        let mut opt = Optimizer::new(adam, vq.stage_params(stage));
        load_optimizer(&mut opt, &ck.state)?;
        (opt, ck.step)
    } else {
        if stage == Stage::Two {
            let prev = require_finished(ctx, StageId::VqStage1, start, "vqvae stage 2")?;
            vq.load_state(&prev.state)?;
            vq.activate_fusion()?;
        }
        (Optimizer::new(adam, vq.stage_params(stage)), start)
    };

    let mut log = ctx.run.open_log(id, cfg.seed)?;
    let limit = opts.max_steps.map_or(end, |m| (step + m).min(end));
    let n = corpus.pairs.len();
    while step < limit {
        step += 1;
        let mut rng = rng_for(ctx, id, step);
        let idx = batch_indices(&mut rng, n, cfg.vqvae.batch_size);
        let feats = corpus.feats(&idx);
        let batch = VqBatch::<f32>::new(
            &corpus.completes(&idx),
            (stage == Stage::Two).then_some(feats.as_slice()),
            cfg.vqvae.grid_dim,
        )?;
        let l = vq_training_step(&mut vq, &mut opt, &batch, stage, step, &mut rng)?;
        log.record(json!({
            "step": step,
            "reconstruction": l.reconstruction,
            "codebook": l.codebook,
            "commitment": l.commitment,
            "total": l.total,
        }))?;
        ctx.progress(id, step, end, &format!("loss {:.5}", l.total), log.elapsed());
        if step % cfg.run.checkpoint_every == 0 || step == limit {
            save_stage_checkpoint(&path, vq_state(&vq, &opt), step, &ctx.fingerprint)?;
        }
    }
    if !path.exists() {
        save_stage_checkpoint(&path, vq_state(&vq, &opt), step, &ctx.fingerprint)?;
    }

    let finished = step >= end;
    if finished {
        let all = corpus.all();
        let feats = corpus.feats(&all);
        let eval = VqBatch::<f32>::new(
            &corpus.completes(&all),
            vq.fusion_active().then_some(feats.as_slice()),
            cfg.vqvae.grid_dim,
        )?;
        let l1 = vq.reconstruction_l1(&eval)?;
        let used = vq.codebook.usage.iter().filter(|&&u| u > 0).count();
        ctx.run.write_summary(
            id,
            &json!({"step": step, "reconstruction_l1": l1, "codebook_entries_used": used}),
        )?;
        log.record(json!({"event": "done", "step": step, "reconstruction_l1": l1}))?;
    }
    Ok(StageOutcome { step, end, finished })
}

struct BridgeModels {
    vq: VqVae<f32>,
    e_p: Encoder<f32>,
    den: Denoiser<f32>,
}

fn bridge_params(m: &BridgeModels) -> Vec<(String, bridgekit_tensor::Tensor<f32>)> {
    let mut params = m.den.named_params("den/");
    params.extend(m.e_p.named_params("e_p/"));
    params
}

fn fresh_bridge_models(ctx: &Context) -> CliResult<BridgeModels> {
    let mut rng = rng_for(ctx, StageId::Bridge, 0);
    Ok(BridgeModels {
        vq: VqVae::new(ctx.cfg.vq_config(), &mut rng)?,
        e_p: Encoder::new(&ctx.cfg.vq_config(), &mut rng)?,
        den: Denoiser::new(ctx.cfg.denoiser_config(), &mut rng)?,
    })
}

fn bridge_state(m: &BridgeModels, opt: &Optimizer<f32>, initial_eps: f64) -> StateDict {
    let mut s = StateDict::new();
    m.vq.save_state(&mut s);
    s.put_params(&m.e_p.named_params("e_p/"));
    s.put_params(&m.den.named_params("den/"));
    put_optimizer(opt, &mut s);
    s.put_u64s("meta/initial_eps", &[initial_eps.to_bits()]);
    s
}

fn load_bridge_models(m: &BridgeModels, s: &StateDict) -> CliResult<()> {
    s.load_params(&m.e_p.named_params("e_p/"))?;
    s.load_params(&m.den.named_params("den/"))?;
    Ok(())
}

/// ε-loss on every pair with a fixed draw of timesteps and noise.
fn eval_eps(ctx: &Context, m: &BridgeModels, corpus: &Corpus) -> CliResult<f64> {
    let all = corpus.all();
    let feats = corpus.feats(&all);
    let batch = BridgeBatch::<f32>::new(
        &corpus.completes(&all),
        &corpus.partials(&all),
        m.vq.fusion_active().then_some(feats.as_slice()),
        ctx.cfg.vqvae.grid_dim,
    )?;
    let sched = ctx.cfg.schedule()?;
    let mut rng = rng_for(ctx, StageId::Bridge, u64::MAX);
    let loss = no_grad(|| -> bridgekit::Result<f64> {
        let s = bridge_sample(&m.vq, &m.e_p, &batch, &sched, ctx.cfg.bridge.noise_scale, &mut rng)?;
        Ok(eps_loss(&m.den, &s)?.item() as f64)
    })?;
    Ok(loss)
}

/// Trains the partial encoder and denoiser on the frozen VQ-VAE.
pub fn train_bridge(ctx: &Context, opts: TrainOptions) -> CliResult<StageOutcome> {
    let cfg = &ctx.cfg;
    let corpus = open_corpus(ctx)?;
    let sched = cfg.schedule()?;
    let path = ctx.run.checkpoint_path(StageId::Bridge);
    let end = cfg.bridge.steps;
    let mut m = fresh_bridge_models(ctx)?;
    let adamw = OptimizerConfig::adamw(cfg.bridge.lr, cfg.bridge.weight_decay);
    let (mut opt, mut step, initial_eps) = if path.exists() {
        let ck = load_stage_checkpoint(&path, &ctx.fingerprint, ctx.force)?;
        m.vq.load_state(&ck.state)?;
        load_bridge_models(&m, &ck.state)?;
        let mut opt = Optimizer::new(adamw, bridge_params(&m));
        load_optimizer(&mut opt, &ck.state)?;
        let initial = f64::from_bits(*ck.state.u64s("meta/initial_eps")?.first().unwrap_or(&0));
        (opt, ck.step, initial)
    } else {
        let (vq_id, vq_end) = final_vq_stage(cfg);
        let vq_ck = require_finished(ctx, vq_id, vq_end, "train-bridge")?;
        m.vq.load_state(&vq_ck.state)?;
        let initial = eval_eps(ctx, &m, &corpus)?;
        (Optimizer::new(adamw, bridge_params(&m)), 0, initial)
    };
    m.vq.set_trainable(false);

    let mut log = ctx.run.open_log(StageId::Bridge, cfg.seed)?;
    if step == 0 {
        log.record(json!({"event": "initial", "eval_eps": initial_eps}))?;
    }
    let limit = opts.max_steps.map_or(end, |k| (step + k).min(end));
    let n = corpus.pairs.len();
    let fused = m.vq.fusion_active();
    while step < limit {
        step += 1;
        let mut rng = rng_for(ctx, StageId::Bridge, step);
        let idx = batch_indices(&mut rng, n, cfg.bridge.batch_size);
        let feats = corpus.feats(&idx);
        let batch = BridgeBatch::<f32>::new(
            &corpus.completes(&idx),
            &corpus.partials(&idx),
            fused.then_some(feats.as_slice()),
            cfg.vqvae.grid_dim,
        )?;
        let l = train_bridge_step(
            &m.vq,
            &m.e_p,
            &m.den,
            &sched,
            &mut opt,
            &batch,
            cfg.bridge.noise_scale,
            &mut rng,
        )?;
        log.record(json!({"step": step, "eps": l.eps}))?;
        ctx.progress(StageId::Bridge, step, end, &format!("eps {:.5}", l.eps), log.elapsed());
        if step % cfg.run.checkpoint_every == 0 || step == limit {
            save_stage_checkpoint(&path, bridge_state(&m, &opt, initial_eps), step, &ctx.fingerprint)?;
        }
    }
    if !path.exists() {
        save_stage_checkpoint(&path, bridge_state(&m, &opt, initial_eps), step, &ctx.fingerprint)?;
    }

    let finished = step >= end;
    if finished {
        let final_eps = eval_eps(ctx, &m, &corpus)?;
        let ratio = final_eps / initial_eps;
        ctx.run.write_summary(
            StageId::Bridge,
            &json!({"step": step, "initial_eps": initial_eps, "final_eps": final_eps, "ratio": ratio}),
        )?;
        log.record(json!({"event": "done", "step": step, "eval_eps": final_eps, "ratio": ratio}))?;
    }
    Ok(StageOutcome { step, end, finished })
}

/// The trained completion model of a finished run.
pub fn load_model(ctx: &Context, ov: InferenceOverrides) -> CliResult<CompletionModel<f32>> {
    let ck = require_finished(ctx, StageId::Bridge, ctx.cfg.bridge.steps, "completion")?;
    let m = fresh_bridge_models(ctx)?;
    let mut vq = m.vq;
    vq.load_state(&ck.state)?;
    let parts = BridgeModels {
        vq,
        e_p: m.e_p,
        den: m.den,
    };
    load_bridge_models(&parts, &ck.state)?;
    let b = &ctx.cfg.bridge;
    Ok(CompletionModel {
        vq: parts.vq,
        e_p: parts.e_p,
        denoiser: parts.den,
        schedule: ctx.cfg.schedule()?,
        inference: InferenceConfig {
            steps: b.infer_steps,
            noise_scale: b.noise_scale,
            deterministic: ov.deterministic.unwrap_or(b.deterministic),
            seed: ov.seed.unwrap_or(ctx.cfg.seed),
        },
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stamp.json");
    PathBuf::from(s)
}

/// Completes one partial scan file, or every corpus partial into
/// `<run>/completions/` when `input` is `None`. Returns written grids.
pub fn complete(ctx: &Context, ov: InferenceOverrides, input: Option<(&Path, &Path)>) -> CliResult<Vec<PathBuf>> {
    let model = load_model(ctx, ov)?;
    let seed = model.inference.seed;
    let stamp = |files: Vec<String>| Stamp {
        fingerprint: ctx.fingerprint.clone(),
        stage: StageId::Complete.name().into(),
        files,
    };
    match input {
        Some((src, dst)) => {
            let partial = load_grid(src)?;
            if partial.kind() != DistanceKind::Sdf {
                return Err(CliError::Other(format!(
                    "{} is not a signed partial scan",
                    src.display()
                )));
            }
            let out = model.complete_grid(&partial, seed)?;
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            save_grid(&out, dst)?;
            let name = dst
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            fs::write(
                sidecar_path(dst),
                serde_json::to_string_pretty(&stamp(vec![name]))? + "\n",
            )?;
            Ok(vec![dst.to_path_buf()])
        }
        None => {
            let corpus = open_corpus(ctx)?;
            let dir = ctx.run.completions_dir();
            fs::create_dir_all(&dir)?;
            let mut written = Vec::new();
            let mut files = Vec::new();
            for (i, pair) in corpus.pairs.iter().enumerate() {
                let out = model.complete_grid(&pair.partial, seed.wrapping_add(i as u64))?;
                let name = format!("{}.vgrd", pair.id);
                save_grid(&out, &dir.join(&name))?;
                written.push(dir.join(&name));
                files.push(name);
            }
            ctx.run.write_stamp(&dir, &stamp(files))?;
            Ok(written)
        }
    }
}

/// Scores the model and the copy-partial baseline on the corpus.
pub fn eval(ctx: &Context, ov: InferenceOverrides, output: Option<&Path>) -> CliResult<EvalReport> {
    let model = load_model(ctx, ov)?;
    let corpus = open_corpus(ctx)?;
    let mut report = evaluate_corpus(&corpus.pairs, &model, &ctx.cfg.metrics_config(), true)?;
    report.config.fingerprint = Some(ctx.fingerprint.clone());
    let path = output.map_or_else(|| ctx.run.report_path(), Path::to_path_buf);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    report.write(&path)?;
    Ok(report)
}

/// Default iso level: the shell at `MC_ISO` for unsigned fields, the zero
/// crossing for signed ones.
pub fn default_iso(kind: DistanceKind) -> f32 {
    match kind {
        DistanceKind::Udf => MC_ISO,
        DistanceKind::Sdf => 0.0,
    }
}

/// Meshes a single grid file to OBJ.
pub fn mesh_file(input: &Path, output: &Path, iso: Option<f32>) -> CliResult<TriMesh> {
    let g = load_grid(input)?;
    let m = marching_cubes(&g, iso.unwrap_or_else(|| default_iso(g.kind())))?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    m.write_obj(output)?;
    Ok(m)
}

/// Meshes every completion of the run into `<run>/meshes/`.
pub fn mesh_run(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let src = ctx.run.completions_dir();
    let stamp = ctx
        .run
        .read_stamp(&src)?
        .ok_or_else(|| CliError::Ordering("no completions in this run; run `complete` first".into()))?;
    ctx.check_stamp(&stamp, "the completions")?;
    let dir = ctx.run.meshes_dir();
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    for f in &stamp.files {
        let g = load_grid(&src.join(f))?;
        let m = marching_cubes(&g, ctx.cfg.metrics.tau_mc)?;
        let path = dir.join(Path::new(f).with_extension("obj"));
        fs::write(&path, format!("# fingerprint {}\n{}", ctx.fingerprint, m.to_obj()))?;
        out.push(path);
    }
    Ok(out)
}
