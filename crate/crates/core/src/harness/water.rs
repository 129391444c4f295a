//! End-to-end water pipeline: oracle episodes, frontend, autoencoder, world
//! model, chunk policies and closed-loop evaluation.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderConfig, TrainLog};
use crate::error::{Error, Result};
use crate::flow::world::train_world_model;
use crate::flow::{FlowNetConfig, FlowTrainConfig, SamplerConfig, WorldModel};
use crate::numerics::{LrSchedule, Optimizer};
use crate::policy::{
    train_chunk_policy, water_demos, ChunkPolicy, LookaheadController, ObservationConfig, PolicyConfig,
    DEFAULT_EXECUTE,
};
use crate::signal::{
    fit_normalization, grid_window_pairs, log_mel_spectrogram, normalize, FrontendConfig, Grid,
    MelSpectrogram, NormalizationStats,
};
use crate::sims::{water_episode_oracle, water_evaluate, OracleEpisode, WaterReport, WaterSimConfig};

use super::stats::spearman;

pub const CONTEXT_FRAMES: usize = 128;
pub const FUTURE_FRAMES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaterConfig {
    pub sim: WaterSimConfig,
    pub frontend: FrontendConfig,
    pub train_episodes: usize,
    pub train_seed0: u64,
    pub heldout_episodes: usize,
    pub heldout_seed0: u64,
    pub eval_trials: usize,
    pub eval_seed0: u64,
    /// Frame stride between training windows.
    pub window_stride: usize,
    pub ae_model: AutoencoderConfig,
    pub ae: AeTrainConfig,
    pub wm_net: NetShape,
    pub wm: FlowTrainConfig,
    pub policy_net: PolicyConfig,
    pub policy: FlowTrainConfig,
    pub sampler: SamplerConfig,
    /// World-model samples averaged per plan.
    pub wm_samples: usize,
    pub execute: usize,
    /// Fill range at the context end used for the pitch-trend check.
    pub trend_fill: [f64; 2],
}

pub(crate) fn optimizer(lr: f64, warmup: u64, total: usize) -> Optimizer {
    Optimizer::with_schedule(LrSchedule {
        base_lr: lr,
        warmup_steps: warmup,
        total_steps: total as u64,
    })
}

impl Default for WaterConfig {
    fn default() -> Self {
        Self {
            sim: WaterSimConfig::default(),
            frontend: FrontendConfig::default(),
            train_episodes: 64,
            train_seed0: 1000,
            heldout_episodes: 8,
            heldout_seed0: 5000,
            eval_trials: 30,
            eval_seed0: 0,
            window_stride: 16,
            ae_model: AutoencoderConfig::spectrogram(FrontendConfig::default().mel.n_mels),
            ae: AeTrainConfig {
                steps: 1500,
                batch_size: 16,
                seed: 1,
                optimizer: optimizer(1e-3, 100, 1500),
            },
            wm_net: NetShape {
                hidden: 128,
                heads: 4,
                blocks: 2,
            },
            wm: FlowTrainConfig {
                steps: 6000,
                batch_size: 8,
                seed: 2,
                optimizer: optimizer(1e-3, 200, 6000),
                loss: Default::default(),
            },
            policy_net: PolicyConfig::default(),
            policy: FlowTrainConfig {
                steps: 2000,
                batch_size: 16,
                seed: 3,
                optimizer: optimizer(1e-3, 100, 2000),
                loss: Default::default(),
            },
            sampler: SamplerConfig { n_steps: 10, seed: 0 },
            wm_samples: 4,
            execute: DEFAULT_EXECUTE,
            trend_fill: [0.25, 0.6],
        }
    }
}

impl WaterConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_episodes as u64).map(|i| self.train_seed0 + i).collect()
    }

    pub fn heldout_seeds(&self) -> Vec<u64> {
        (0..self.heldout_episodes as u64).map(|i| self.heldout_seed0 + i).collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_trials as u64).map(|i| self.eval_seed0 + i).collect()
    }
}

pub fn synth_episodes(sim: &WaterSimConfig, seeds: &[u64]) -> Result<Vec<OracleEpisode>> {
    seeds.iter().map(|&s| water_episode_oracle(sim, s)).collect()
}

pub fn episode_log_mels(episodes: &[OracleEpisode], fe: &FrontendConfig) -> Result<Vec<MelSpectrogram>> {
    episodes.iter().map(|e| log_mel_spectrogram(&e.audio, fe)).collect()
}

pub fn normalized_frames(specs: &[MelSpectrogram], stats: &NormalizationStats) -> Vec<Grid> {
    specs.iter().map(|s| normalize(s, stats).frames).collect()
}

/// Windows of `CONTEXT_FRAMES` rows at `stride` used to fit the autoencoder.
pub fn ae_corpus(frames: &[Grid], stride: usize) -> Vec<Grid> {
    let mut out = Vec::new();
    for f in frames {
        let mut s = 0;
        while s + CONTEXT_FRAMES <= f.rows() {
            out.push(f.sub_rows(s, CONTEXT_FRAMES));
            s += stride;
        }
    }
    out
}

pub fn fit_water_ae(specs: &[MelSpectrogram], cfg: &WaterConfig) -> Result<(Autoencoder, TrainLog)> {
    let stats = fit_normalization(specs)?;
    let frames = normalized_frames(specs, &stats);
    let corpus = ae_corpus(&frames, 4 * cfg.window_stride);
    let (mut ae, log) = train_autoencoder(&corpus, cfg.ae_model.clone(), &cfg.ae)?;
    ae.normalization = Some(stats);
    Ok((ae, log))
}

fn stats_of(ae: &Autoencoder) -> Result<NormalizationStats> {
    ae.normalization
        .ok_or_else(|| Error::invalid("autoencoder checkpoint carries no normalization stats"))
}

/// `(context, future)` latent pairs from every episode.
pub fn latent_pairs(ae: &Autoencoder, frames: &[Grid], stride: usize) -> Result<Vec<(Grid, Grid)>> {
    let mut pairs = Vec::new();
    for f in frames {
        for w in grid_window_pairs(f, CONTEXT_FRAMES, FUTURE_FRAMES, stride)? {
            let c = ae.encode(&w.context)?;
            let u = ae.encode(&w.future)?;
            pairs.push((c.frames, u.frames));
        }
    }
    Ok(pairs)
}

pub fn fit_water_wm(ae: &Autoencoder, specs: &[MelSpectrogram], cfg: &WaterConfig) -> Result<(WorldModel, TrainLog)> {
    let frames = normalized_frames(specs, &stats_of(ae)?);
    let pairs = latent_pairs(ae, &frames, cfg.window_stride)?;
    let lc = ae.latent_len(CONTEXT_FRAMES)?;
    let l = ae.latent_len(FUTURE_FRAMES)?;
    let net = FlowNetConfig {
        hidden: cfg.wm_net.hidden,
        heads: cfg.wm_net.heads,
        blocks: cfg.wm_net.blocks,
        ..FlowNetConfig::world_model(ae.config.d, lc, l)
    };
    train_world_model(&pairs, net, &cfg.wm)
}

pub fn fit_water_policy(
    ae: &Autoencoder,
    episodes: &[OracleEpisode],
    cfg: &WaterConfig,
    baseline_mode: bool,
) -> Result<(ChunkPolicy, TrainLog)> {
    let obs_cfg = ObservationConfig::default();
    let demos = water_demos(episodes, &cfg.sim, &cfg.frontend, &stats_of(ae)?, &obs_cfg)?;
    let pc = PolicyConfig {
        baseline_mode,
        ..cfg.policy_net
    };
    train_chunk_policy(&demos, obs_cfg, &pc, &cfg.policy)
}

pub fn evaluate_water(
    ae: &Autoencoder,
    wm: Option<&WorldModel>,
    policy: &ChunkPolicy,
    cfg: &WaterConfig,
    label: &str,
) -> Result<WaterReport> {
    let mut ctl = LookaheadController::new(
        ae.clone(),
        wm.cloned(),
        policy.clone(),
        cfg.frontend,
        cfg.sim,
        cfg.sampler,
    )?;
    ctl.wm_samples = cfg.wm_samples;
    water_evaluate(&cfg.sim, &mut ctl, &cfg.eval_seeds(), cfg.execute, label)
}

/// One held-out context and the Spearman correlation between time and the
/// dominant mel bin of the decoded prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSample {
    pub episode_seed: u64,
    pub context_end_frame: usize,
    pub fill_at_context_end: f64,
    pub spearman: f64,
}

/// Predicts from mid-fill contexts of held-out episodes.
pub fn pitch_trend(
    ae: &Autoencoder,
    wm: &WorldModel,
    episodes: &[OracleEpisode],
    cfg: &WaterConfig,
) -> Result<Vec<TrendSample>> {
    let fe = cfg.frontend;
    let stats = stats_of(ae)?;
    let specs = episode_log_mels(episodes, &fe)?;
    let hop = fe.frame_shift_s;
    let mut out = Vec::new();
    for (ep, spec) in episodes.iter().zip(&specs) {
        let frames = normalize(spec, &stats).frames;
        let press_t = ep.press_step as f64 * cfg.sim.dt;
        let mut k_max = CONTEXT_FRAMES - 1;
        while k_max + FUTURE_FRAMES < frames.rows() {
            let t_end = k_max as f64 * hop + fe.frame_len_s;
            let fill = (t_end - press_t) * ep.fill_rate;
            if fill >= cfg.trend_fill[0] && fill <= cfg.trend_fill[1] {
                let ctx = frames.sub_rows(k_max + 1 - CONTEXT_FRAMES, CONTEXT_FRAMES);
                let lat = ae.encode(&ctx)?;
                let seed = cfg.sampler.seed.wrapping_add(ep.seed * 10_007 + k_max as u64);
                let fut = wm.predict(
                    &lat.frames,
                    &SamplerConfig {
                        n_steps: cfg.sampler.n_steps,
                        seed,
                    },
                )?;
                let dec = ae.decode(&crate::autoencoder::LatentSequence { frames: fut })?;
                let bins: Vec<f64> = (0..dec.rows()).map(|r| dec.argmax_row(r) as f64).collect();
                let time: Vec<f64> = (0..dec.rows()).map(|r| r as f64).collect();
                out.push(TrendSample {
                    episode_seed: ep.seed,
                    context_end_frame: k_max,
                    fill_at_context_end: fill,
                    spearman: spearman(&time, &bins),
                });
            }
            k_max += cfg.window_stride;
        }
    }
    Ok(out)
}
