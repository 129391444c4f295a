//! Command implementations behind the `sfwm` binary. Every command reads a
//! resolved [`RunConfig`], writes under `config.out`, echoes the config to
//! `config.toml` and appends one line to `manifest.jsonl`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autoencoder::{Autoencoder, TrainLog};
use crate::error::{Error, Result};
use crate::flow::WorldModel;
use crate::midi::{read_midi, to_piano_roll, PianoRoll};
use crate::numerics::gradcheck::{self, GradcheckReport};
use crate::numerics::checkpoint::hash_bytes;
use crate::numerics::{Checkpoint, LrSchedule, Primitive};
use crate::policy::ChunkPolicy;
use crate::signal::{
    fit_normalization, log_mel_spectrogram, normalize, read_wav, wav::encode_wav_pcm16, Grid, MelSpectrogram,
};
use crate::sims::{OracleEpisode, WaterAction, WaterSimState};

use super::piano::{benchmark, evaluate_piano, fit_piano_ae, fit_piano_wm, PianoConfig};
use super::stats::mean;
use super::water::{
    evaluate_water, fit_water_ae, fit_water_policy, fit_water_wm, synth_episodes,
    WaterConfig, CONTEXT_FRAMES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Water,
    Piano,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Water => "water",
            Task::Piano => "piano",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Ae,
    Wm,
    Policy,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::Wm => "wm",
            Stage::Policy => "policy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// CPU-sized defaults.
    Desk,
    /// Batch 256, AdamW at 1.5e-4 with weight decay 1e-6, 3000 steps.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Added to every model, batching and sampler seed. Data seeds are set
    /// per task.
    pub seed: u64,
    pub out: PathBuf,
    /// Task used by synth, preprocess, train and generate.
    pub task: Task,
    pub water: WaterConfig,
    pub piano: PianoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            task: Task::Water,
            water: WaterConfig::default(),
            piano: PianoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self::default();
        if profile == Profile::Paper {
            let sched = LrSchedule::default();
            for (opt, batch) in [
                (&mut cfg.water.ae.optimizer, &mut cfg.water.ae.batch_size),
                (&mut cfg.water.wm.optimizer, &mut cfg.water.wm.batch_size),
                (&mut cfg.water.policy.optimizer, &mut cfg.water.policy.batch_size),
                (&mut cfg.piano.ae.optimizer, &mut cfg.piano.ae.batch_size),
                (&mut cfg.piano.wm.optimizer, &mut cfg.piano.wm.batch_size),
            ] {
                opt.schedule = sched;
                opt.adamw.weight_decay = 1e-6;
                *batch = 256;
            }
            let steps = sched.total_steps as usize;
            cfg.water.ae.steps = steps;
            cfg.water.wm.steps = steps;
            cfg.water.policy.steps = steps;
            cfg.piano.ae.steps = steps;
            cfg.piano.wm.steps = steps;
        }
        cfg
    }

    pub fn from_toml(text: &str, profile: Profile) -> Result<Self> {
        // start from the profile, then let the file override it
        let base = toml::Value::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(base, user)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Task sections with the global seed folded into every stage seed.
    pub fn water(&self) -> WaterConfig {
        let mut w = self.water.clone();
        w.ae.seed = w.ae.seed.wrapping_add(self.seed);
        w.wm.seed = w.wm.seed.wrapping_add(self.seed);
        w.policy.seed = w.policy.seed.wrapping_add(self.seed);
        w.sampler.seed = w.sampler.seed.wrapping_add(self.seed);
        w
    }

    pub fn piano(&self) -> PianoConfig {
        let mut p = self.piano.clone();
        p.ae.seed = p.ae.seed.wrapping_add(self.seed);
        p.wm.seed = p.wm.seed.wrapping_add(self.seed);
        p.sampler.seed = p.sampler.seed.wrapping_add(self.seed);
        p
    }
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

/// Process exit code for an error: 2 config, 3 missing dependency,
/// 4 numeric failure, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency(_) => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub task: Option<Task>,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub duration_s: f64,
    pub metrics: Value,
}

pub fn read_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    let path = out.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Paths of everything a run reads or writes.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, task: Task) -> PathBuf {
        self.root.join("data").join(task.name())
    }

    pub fn ckpt(&self, task: Task, name: &str) -> PathBuf {
        self.root.join("ckpt").join(task.name()).join(format!("{name}.ckpt"))
    }

    pub fn episode(&self, seed: u64, ext: &str) -> PathBuf {
        self.data(Task::Water).join(format!("episode_{seed:05}.{ext}"))
    }

    pub fn etude(&self, seed: u64) -> PathBuf {
        self.data(Task::Piano).join(format!("etude_{seed:05}.csv"))
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn generate(&self) -> PathBuf {
        self.root.join("generate")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdirs(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("{} not found; {hint}", path.display())))
    }
}

/// One running command: tracks hashed inputs and outputs, then appends the
/// manifest line.
struct Run<'a> {
    cfg: &'a RunConfig,
    layout: Layout,
    stage: String,
    task: Option<Task>,
    start: Instant,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl<'a> Run<'a> {
    fn begin(cfg: &'a RunConfig, stage: &str, task: Option<Task>) -> Result<Self> {
        let layout = Layout { root: cfg.out.clone() };
        mkdirs(&layout.root)?;
        write_file(&layout.root.join("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(Self {
            cfg,
            layout,
            stage: stage.to_string(),
            task,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.layout.root).unwrap_or(path).display().to_string()
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.inputs.push(FileHash {
            path: self.rel(path),
            sha256: h,
        });
        Ok(())
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_file(path, bytes)?;
        self.outputs.push(FileHash {
            path: self.rel(path),
            sha256: hash_bytes(bytes),
        });
        Ok(())
    }

    fn finish(self, metrics: Value) -> Result<ManifestEntry> {
        let entry = ManifestEntry {
            stage: self.stage,
            task: self.task,
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_s: self.start.elapsed().as_secs_f64(),
            metrics,
        };
        let path = self.layout.root.join("manifest.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&entry)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        Ok(entry)
    }
}

/// Everything about an oracle episode except its audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub fill_rate: f64,
    pub press_step: usize,
    pub release_step: usize,
    pub actions: Vec<WaterAction>,
    pub states: Vec<WaterSimState>,
}

fn load_episode(layout: &Layout, seed: u64, run: &mut Run) -> Result<OracleEpisode> {
    let (wav, meta) = (layout.episode(seed, "wav"), layout.episode(seed, "json"));
    require(&wav, "run `sfwm synth` first")?;
    require(&meta, "run `sfwm synth` first")?;
    run.input(&wav)?;
    run.input(&meta)?;
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let m: EpisodeMeta = serde_json::from_str(&text)?;
    Ok(OracleEpisode {
        seed: m.seed,
        fill_rate: m.fill_rate,
        audio: read_wav(&wav)?,
        actions: m.actions,
        states: m.states,
        press_step: m.press_step,
        release_step: m.release_step,
    })
}

fn loss_csv(log: &TrainLog) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in log.step_losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

fn load_ckpt(run: &mut Run, path: &Path, hint: &str) -> Result<Checkpoint> {
    require(path, hint)?;
    run.input(path)?;
    Checkpoint::load(path)
}

fn load_ae(run: &mut Run, task: Task) -> Result<Autoencoder> {
    let p = run.layout.ckpt(task, "ae");
    Autoencoder::from_checkpoint(&load_ckpt(run, &p, "run `sfwm train ae` first")?)
}

fn load_wm(run: &mut Run, task: Task) -> Result<WorldModel> {
    let p = run.layout.ckpt(task, "wm");
    WorldModel::from_checkpoint(&load_ckpt(run, &p, "run `sfwm train wm` first")?)
}

fn policy_name(baseline: bool) -> &'static str {
    if baseline {
        "policy_baseline"
    } else {
        "policy"
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<ManifestEntry> {
    let mut run = Run::begin(cfg, "synth", Some(cfg.task))?;
    let layout = run.layout.clone();
    match cfg.task {
        Task::Water => {
            let w = cfg.water();
            let seeds: Vec<u64> = w.train_seeds().into_iter().chain(w.heldout_seeds()).collect();
            if seeds.is_empty() {
                return Err(Error::Config("empty dataset request".into()));
            }
            for ep in synth_episodes(&w.sim, &seeds)? {
                run.output(&layout.episode(ep.seed, "wav"), &encode_wav_pcm16(&ep.audio))?;
                let meta = EpisodeMeta {
                    seed: ep.seed,
                    fill_rate: ep.fill_rate,
                    press_step: ep.press_step,
                    release_step: ep.release_step,
                    actions: ep.actions,
                    states: ep.states,
                };
                run.output(&layout.episode(ep.seed, "json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
            }
            run.finish(json!({ "episodes": seeds.len() }))
        }
        Task::Piano => {
            let p = cfg.piano();
            if p.train_etudes == 0 {
                return Err(Error::Config("empty dataset request".into()));
            }
            for (i, roll) in p.train_rolls().iter().enumerate() {
                run.output(&layout.etude(p.train_seed0 + i as u64), roll.to_csv().as_bytes())?;
            }
            run.finish(json!({ "rolls": p.train_etudes }))
        }
    }
}

/// Water: log-mel spectrograms of every synthesized episode plus the
/// normalization fitted on the training split. Piano: converts a MIDI file
/// (`input`) into a roll CSV next to the études.
pub fn cmd_preprocess(cfg: &RunConfig, input: Option<&Path>) -> Result<ManifestEntry> {
    let mut run = Run::begin(cfg, "preprocess", Some(cfg.task))?;
    let layout = run.layout.clone();
    match cfg.task {
        Task::Water => {
            let w = cfg.water();
            let mut train_specs = Vec::new();
            let train: Vec<u64> = w.train_seeds();
            for seed in train.iter().copied().chain(w.heldout_seeds()) {
                let path = layout.episode(seed, "wav");
                require(&path, "run `sfwm synth` first")?;
                run.input(&path)?;
                let spec = log_mel_spectrogram(&read_wav(&path)?, &w.frontend)?;
                run.output(&layout.episode(seed, "spec"), &spec.frames.to_spec_bytes(spec.frame_shift_s))?;
                if train.contains(&seed) {
                    train_specs.push(spec);
                }
            }
            if train_specs.is_empty() {
                return Err(Error::Config("empty dataset request".into()));
            }
            let stats = fit_normalization(&train_specs)?;
            run.output(
                &layout.data(Task::Water).join("normalization.json"),
                serde_json::to_string_pretty(&stats)?.as_bytes(),
            )?;
            run.finish(json!({ "lo": stats.lo, "hi": stats.hi }))
        }
        Task::Piano => {
            let Some(midi) = input else {
                return Err(Error::Config("piano preprocess needs --input FILE.mid".into()));
            };
            run.input(midi)?;
            let events = read_midi(midi)?;
            let end = events.iter().map(|e| e.offset_s).fold(0.0, f64::max);
            let roll = to_piano_roll(&events, cfg.piano.env.step_s, end)?;
            let stem = midi.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
            run.output(&layout.data(Task::Piano).join(format!("midi_{stem}.csv")), roll.to_csv().as_bytes())?;
            run.finish(json!({ "notes": events.len(), "steps": roll.steps() }))
        }
    }
}

fn load_water_specs(run: &mut Run, w: &WaterConfig) -> Result<Vec<MelSpectrogram>> {
    let layout = run.layout.clone();
    w.train_seeds()
        .into_iter()
        .map(|seed| {
            let path = layout.episode(seed, "spec");
            require(&path, "run `sfwm preprocess` first")?;
            run.input(&path)?;
            let (frames, frame_shift_s) = Grid::load_spec(&path)?;
            Ok(MelSpectrogram { frames, frame_shift_s })
        })
        .collect()
}

fn load_rolls(run: &mut Run, p: &PianoConfig) -> Result<Vec<PianoRoll>> {
    let layout = run.layout.clone();
    (0..p.train_etudes as u64)
        .map(|i| {
            let path = layout.etude(p.train_seed0 + i);
            require(&path, "run `sfwm synth --task piano` first")?;
            run.input(&path)?;
            PianoRoll::load_csv(&path, p.env.step_s)
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, baseline: bool) -> Result<ManifestEntry> {
    let mut run = Run::begin(cfg, &format!("train-{}", stage.name()), Some(cfg.task))?;
    let layout = run.layout.clone();
    let task = cfg.task;
    let (ck, log, name) = match (task, stage) {
        (Task::Water, Stage::Ae) => {
            let w = cfg.water();
            let specs = load_water_specs(&mut run, &w)?;
            let (ae, log) = fit_water_ae(&specs, &w)?;
            (ae.to_checkpoint(), log, "ae")
        }
        (Task::Water, Stage::Wm) => {
            let w = cfg.water();
            let ae = load_ae(&mut run, task)?;
            let specs = load_water_specs(&mut run, &w)?;
            let (wm, log) = fit_water_wm(&ae, &specs, &w)?;
            (wm.to_checkpoint(Some(&w.wm)), log, "wm")
        }
        (Task::Water, Stage::Policy) => {
            let w = cfg.water();
            let ae = load_ae(&mut run, task)?;
            if !baseline {
                // the lookahead policy is only useful next to a world model
                require(&layout.ckpt(task, "wm"), "run `sfwm train wm` first or pass --baseline")?;
                run.input(&layout.ckpt(task, "wm"))?;
            }
            let episodes = w
                .train_seeds()
                .into_iter()
                .map(|s| load_episode(&layout, s, &mut run))
                .collect::<Result<Vec<_>>>()?;
            let (pol, log) = fit_water_policy(&ae, &episodes, &w, baseline)?;
            (pol.to_checkpoint(Some(&w.policy)), log, policy_name(baseline))
        }
        (Task::Piano, Stage::Ae) => {
            let p = cfg.piano();
            let rolls = load_rolls(&mut run, &p)?;
            let (ae, log) = fit_piano_ae(&rolls, &p)?;
            (ae.to_checkpoint(), log, "ae")
        }
        (Task::Piano, Stage::Wm) => {
            let p = cfg.piano();
            let ae = load_ae(&mut run, task)?;
            let rolls = load_rolls(&mut run, &p)?;
            let (wm, log) = fit_piano_wm(&ae, &rolls, &p)?;
            (wm.to_checkpoint(Some(&p.wm)), log, "wm")
        }
        (Task::Piano, Stage::Policy) => {
            return Err(Error::Config(
                "the piano controller is rule-based and has no training stage".into(),
            ))
        }
    };
    run.output(&layout.ckpt(task, name), &ck.to_bytes())?;
    run.output(
        &layout.logs().join(format!("{}_{}_loss.csv", task.name(), name)),
        loss_csv(&log).as_bytes(),
    )?;
    run.finish(json!({
        "final_loss": log.final_loss(),
        "tail_loss": log.tail_mean(100),
        "steps": log.step_losses.len(),
    }))
}

fn grid_csv(g: &Grid) -> String {
    let mut s = String::new();
    for r in 0..g.rows() {
        let row: Vec<String> = g.row(r).iter().map(|v| format!("{v:.5}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Predicts `n_windows` future windows from the last context window of
/// `input` (a WAV for water; a roll CSV or MIDI file for piano). Without an
/// input, the first held-out episode or evaluation étude is used.
pub fn cmd_generate(cfg: &RunConfig, input: Option<&Path>, n_windows: usize) -> Result<ManifestEntry> {
    let mut run = Run::begin(cfg, "generate", Some(cfg.task))?;
    let layout = run.layout.clone();
    let task = cfg.task;
    let ae = load_ae(&mut run, task)?;
    let wm = load_wm(&mut run, task)?;
    let dir = layout.generate();
    let (ctx, sampler, name) = match task {
        Task::Water => {
            let w = cfg.water();
            let audio = match input {
                Some(p) => {
                    run.input(p)?;
                    read_wav(p)?
                }
                None => {
                    // mid-fill prefix of the first held-out episode
                    let ep = synth_episodes(&w.sim, &[w.heldout_seed0])?.remove(0);
                    let steps = ep.press_step + (w.sim.handover_s / w.sim.dt).round() as usize;
                    let n = (steps * w.sim.samples_per_step()).min(ep.audio.samples.len());
                    crate::signal::PcmSignal::new(ep.audio.samples[..n].to_vec(), ep.audio.sample_rate)?
                }
            };
            let stats = ae
                .normalization
                .ok_or_else(|| Error::Dependency("water autoencoder carries no normalization stats".into()))?;
            let frames = normalize(&log_mel_spectrogram(&audio, &w.frontend)?, &stats).frames;
            if frames.rows() < CONTEXT_FRAMES {
                return Err(Error::invalid(format!(
                    "context has {} frames, need {CONTEXT_FRAMES}",
                    frames.rows()
                )));
            }
            (frames.sub_rows(frames.rows() - CONTEXT_FRAMES, CONTEXT_FRAMES), w.sampler, "water")
        }
        Task::Piano => {
            let p = cfg.piano();
            let roll = match input {
                Some(path) => {
                    run.input(path)?;
                    if path.extension().is_some_and(|e| e == "mid" || e == "midi") {
                        let events = read_midi(path)?;
                        let end = events.iter().map(|e| e.offset_s).fold(0.0, f64::max);
                        to_piano_roll(&events, p.env.step_s, end)?
                    } else {
                        PianoRoll::load_csv(path, p.env.step_s)?
                    }
                }
                None => benchmark(&p).swap_remove(1).2,
            };
            if roll.steps() < p.context_steps {
                return Err(Error::invalid(format!(
                    "context has {} steps, need {}",
                    roll.steps(),
                    p.context_steps
                )));
            }
            (roll.grid.sub_rows(roll.steps() - p.context_steps, p.context_steps), p.sampler, "piano")
        }
    };
    let lat = ae.encode(&ctx)?;
    let t0 = Instant::now();
    let rollout = wm.rollout(&ae, &lat.frames, n_windows, &sampler)?;
    let total_ms = t0.elapsed().as_secs_f64() * 1e3;
    let pred = rollout.decoded;
    run.output(&dir.join(format!("{name}_prediction.csv")), grid_csv(&pred).as_bytes())?;
    match task {
        Task::Water => {
            let shift = cfg.water.frontend.frame_shift_s;
            run.output(&dir.join("water_prediction.spec"), &pred.to_spec_bytes(shift))?;
            run.output(&dir.join("water_prediction.pgm"), &pred.to_pgm(-1.0, 1.0))?;
            run.output(&dir.join("water_context.pgm"), &ctx.to_pgm(-1.0, 1.0))?;
        }
        Task::Piano => {
            let roll = PianoRoll {
                grid: pred.clone(),
                step_s: cfg.piano.env.step_s,
            };
            run.output(&dir.join("piano_prediction_roll.csv"), roll.to_csv().as_bytes())?;
            run.output(&dir.join("piano_prediction.pgm"), &pred.to_pgm(0.0, 1.0))?;
            run.output(&dir.join("piano_context.pgm"), &ctx.to_pgm(0.0, 1.0))?;
        }
    }
    let timing = json!({ "total_ms": total_ms, "windows": rollout.windows });
    write_file(&dir.join(format!("{name}_timing.json")), serde_json::to_string_pretty(&timing)?.as_bytes())?;
    run.finish(json!({
        "rows": pred.rows(),
        "latent_frames": rollout.latents.rows(),
        "windows": n_windows,
        "total_ms": total_ms,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n: usize,
    pub successes: Option<usize>,
    pub mean: f64,
    pub sd: f64,
}

fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Runs both arms of a task. Reports (`<task>.csv`, `<task>_summary.json`)
/// hold only seed-determined values; wall-clock timings go to
/// `<task>_timing.csv`.
pub fn cmd_eval(cfg: &RunConfig, task: Task) -> Result<(ManifestEntry, Vec<ArmSummary>)> {
    let mut run = Run::begin(cfg, "eval", Some(task))?;
    let layout = run.layout.clone();
    let dir = layout.eval();
    let ae = load_ae(&mut run, task)?;
    let wm = load_wm(&mut run, task)?;
    let mut csv = String::new();
    let mut timing = String::new();
    let summaries = match task {
        Task::Water => {
            let w = cfg.water();
            let mut policies = Vec::new();
            for baseline in [false, true] {
                let p = layout.ckpt(task, policy_name(baseline));
                let hint = if baseline {
                    "run `sfwm train policy --baseline` first"
                } else {
                    "run `sfwm train policy` first"
                };
                policies.push(ChunkPolicy::from_checkpoint(&load_ckpt(&mut run, &p, hint)?)?);
            }
            csv.push_str("seed,arm,success,overflowed,released,fill_at_end,end_time_s,plans,predicted_release_step\n");
            timing.push_str("seed,arm,plans,plan_ms\n");
            let mut out = Vec::new();
            for (arm, pol, model) in [("lookahead", &policies[0], Some(&wm)), ("baseline", &policies[1], None)] {
                let report = evaluate_water(&ae, model, pol, &w, arm)?;
                for t in &report.trials {
                    let _ = writeln!(
                        csv,
                        "{},{arm},{},{},{},{:.6},{:.3},{},{}",
                        t.seed,
                        t.success as u8,
                        t.overflowed as u8,
                        t.released as u8,
                        t.fill_at_end,
                        t.end_time_s,
                        t.plans,
                        t.predicted_release_step.map_or(String::new(), |s| s.to_string())
                    );
                    let _ = writeln!(timing, "{},{arm},{},{:.3}", t.seed, t.plans, t.plan_ms);
                    if let Some(pred) = &t.first_prediction {
                        let p = dir.join("predictions").join(format!("{arm}_{:05}.pgm", t.seed));
                        run.output(&p, &pred.to_pgm(-1.0, 1.0))?;
                    }
                }
                let s: Vec<f64> = report.trials.iter().map(|t| t.success as u8 as f64).collect();
                out.push(ArmSummary {
                    arm: arm.into(),
                    n: s.len(),
                    successes: Some(report.successes()),
                    mean: mean(&s),
                    sd: sd(&s),
                });
            }
            out
        }
        Task::Piano => {
            let p = cfg.piano();
            let results = evaluate_piano(&ae, &wm, &benchmark(&p), &p)?;
            csv.push_str("song,seed,horizon,goals,f1\n");
            timing.push_str("song,seed,horizon,generate_ms\n");
            for r in &results {
                let _ = writeln!(csv, "{},{},{},{},{:.6}", r.song, r.seed, r.horizon, r.goals, r.f1);
                let _ = writeln!(timing, "{},{},{},{:.3}", r.song, r.seed, r.horizon, r.generate_ms);
            }
            [1, p.horizon]
                .iter()
                .map(|&h| {
                    let f: Vec<f64> = results.iter().filter(|r| r.horizon == h).map(|r| r.f1).collect();
                    ArmSummary {
                        arm: format!("H={h}"),
                        n: f.len(),
                        successes: None,
                        mean: mean(&f),
                        sd: sd(&f),
                    }
                })
                .collect()
        }
    };
    let name = task.name();
    run.output(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    run.output(
        &dir.join(format!("{name}_summary.json")),
        serde_json::to_string_pretty(&summaries)?.as_bytes(),
    )?;
    write_file(&dir.join(format!("{name}_timing.csv")), timing.as_bytes())?;
    let entry = run.finish(serde_json::to_value(&summaries)?)?;
    Ok((entry, summaries))
}

pub const GRADCHECK_SEEDS: u64 = 20;

pub fn parse_primitive(name: &str) -> Result<Primitive> {
    Primitive::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))
}

/// Finite-difference check of every primitive over 20 seeds. A failing
/// check is reported as a numeric error naming the primitives.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<Primitive>) -> Result<GradcheckReport> {
    let mut run = Run::begin(cfg, "gradcheck", None)?;
    let seeds: Vec<u64> = (0..GRADCHECK_SEEDS).map(|s| s + cfg.seed).collect();
    let report = gradcheck::run(&seeds, fault);
    let path = run.layout.root.join("gradcheck.json");
    run.output(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.finish(json!({ "passed": report.passed() }))?;
    if !report.passed() {
        let names: Vec<String> = report
            .failures()
            .map(|e| format!("{} (rel. error {:.3e})", e.name, e.max_rel_error))
            .collect();
        return Err(Error::Gradcheck(names.join(", ")));
    }
    Ok(report)
}

fn parse_grid_csv(text: &str) -> Result<Grid> {
    let mut data = Vec::new();
    let (mut rows, mut cols) = (0, None);
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("csv line {}: {e}", i + 1)))?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::invalid(format!("csv line {} has {} columns", i + 1, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::invalid("empty csv"))?;
    Ok(Grid::new(rows, cols, data))
}

/// Renders a `.spec` file or a numeric CSV grid (rolls, predictions) as a
/// PGM image, time left to right.
pub fn cmd_plot(input: &Path, output: &Path) -> Result<()> {
    let grid = if input.extension().is_some_and(|e| e == "spec") {
        Grid::load_spec(input)?.0
    } else {
        parse_grid_csv(&fs::read_to_string(input).map_err(|e| Error::io(input, e))?)?
    };
    let (lo, hi) = (grid.min(), grid.max());
    write_file(output, &grid.to_pgm(lo, hi))
}
