//! Piano pipeline: étude corpus, roll autoencoder, world model over roll
//! latents, and lookahead evaluation.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderConfig, TrainLog};
use crate::error::Result;
use crate::flow::world::train_world_model;
use crate::flow::{FlowNetConfig, FlowTrainConfig, SamplerConfig, WorldModel};
use crate::midi::PianoRoll;
use crate::policy::{run_piano, GoalSource};
use crate::signal::{grid_window_pairs, Grid};
use crate::sims::{make_benchmark_songs, make_etude, EtudeConfig, PianoEnvConfig};

use super::water::{optimizer, NetShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PianoConfig {
    pub env: PianoEnvConfig,
    pub etude: EtudeConfig,
    pub train_etudes: usize,
    pub train_seed0: u64,
    pub eval_etudes: usize,
    pub eval_seed0: u64,
    pub context_steps: usize,
    pub future_steps: usize,
    pub window_stride: usize,
    pub ae_model: AutoencoderConfig,
    pub ae: AeTrainConfig,
    pub wm_net: NetShape,
    pub wm: FlowTrainConfig,
    pub horizon: usize,
    pub regen_every: usize,
    pub sampler: SamplerConfig,
}

impl Default for PianoConfig {
    fn default() -> Self {
        Self {
            env: PianoEnvConfig::default(),
            etude: EtudeConfig::default(),
            train_etudes: 64,
            train_seed0: 1000,
            eval_etudes: 20,
            eval_seed0: 0,
            context_steps: 64,
            future_steps: 64,
            window_stride: 8,
            ae_model: AutoencoderConfig::piano_roll(),
            ae: AeTrainConfig {
                steps: 1500,
                batch_size: 16,
                seed: 11,
                optimizer: optimizer(1e-3, 100, 1500),
            },
            wm_net: NetShape {
                hidden: 128,
                heads: 4,
                blocks: 2,
            },
            wm: FlowTrainConfig {
                steps: 3000,
                batch_size: 8,
                seed: 12,
                optimizer: optimizer(1e-3, 200, 3000),
                loss: Default::default(),
            },
            horizon: 16,
            regen_every: 16,
            sampler: SamplerConfig { n_steps: 10, seed: 0 },
        }
    }
}

impl PianoConfig {
    fn etudes(&self, seed0: u64, n: usize) -> Vec<PianoRoll> {
        (0..n as u64)
            .map(|i| {
                make_etude(&EtudeConfig {
                    seed: seed0 + i,
                    ..self.etude
                })
            })
            .collect()
    }

    pub fn train_rolls(&self) -> Vec<PianoRoll> {
        self.etudes(self.train_seed0, self.train_etudes)
    }
}

pub fn fit_piano_ae(rolls: &[PianoRoll], cfg: &PianoConfig) -> Result<(Autoencoder, TrainLog)> {
    let mut corpus = Vec::new();
    for r in rolls {
        let mut s = 0;
        while s + cfg.context_steps <= r.steps() {
            corpus.push(r.grid.sub_rows(s, cfg.context_steps));
            s += cfg.window_stride;
        }
    }
    train_autoencoder(&corpus, cfg.ae_model.clone(), &cfg.ae)
}

pub fn piano_pairs(ae: &Autoencoder, rolls: &[PianoRoll], cfg: &PianoConfig) -> Result<Vec<(Grid, Grid)>> {
    let mut pairs = Vec::new();
    for r in rolls {
        for w in grid_window_pairs(&r.grid, cfg.context_steps, cfg.future_steps, cfg.window_stride)? {
            pairs.push((ae.encode(&w.context)?.frames, ae.encode(&w.future)?.frames));
        }
    }
    Ok(pairs)
}

pub fn fit_piano_wm(ae: &Autoencoder, rolls: &[PianoRoll], cfg: &PianoConfig) -> Result<(WorldModel, TrainLog)> {
    let pairs = piano_pairs(ae, rolls, cfg)?;
    let net = FlowNetConfig {
        hidden: cfg.wm_net.hidden,
        heads: cfg.wm_net.heads,
        blocks: cfg.wm_net.blocks,
        ..FlowNetConfig::world_model(
            ae.config.d,
            ae.latent_len(cfg.context_steps)?,
            ae.latent_len(cfg.future_steps)?,
        )
    };
    train_world_model(&pairs, net, &cfg.wm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PianoResult {
    pub song: String,
    pub seed: u64,
    pub horizon: usize,
    pub goals: String,
    pub f1: f64,
    pub generate_ms: f64,
}

/// Scores each song with the reactive controller (H=1) and with generated
/// lookahead (H=`cfg.horizon`). The song's seed also seeds the sampler.
pub fn evaluate_piano(
    ae: &Autoencoder,
    wm: &WorldModel,
    songs: &[(String, u64, PianoRoll)],
    cfg: &PianoConfig,
) -> Result<Vec<PianoResult>> {
    let mut out = Vec::new();
    for (name, seed, roll) in songs {
        let reactive = run_piano(roll, &cfg.env, GoalSource::Truth { horizon: 1 }, cfg.context_steps)?;
        out.push(PianoResult {
            song: name.clone(),
            seed: *seed,
            horizon: 1,
            goals: "real".into(),
            f1: reactive.f1,
            generate_ms: 0.0,
        });
        let src = GoalSource::Generated {
            ae,
            wm,
            horizon: cfg.horizon,
            regen_every: cfg.regen_every,
            sampler: SamplerConfig {
                n_steps: cfg.sampler.n_steps,
                seed: cfg.sampler.seed.wrapping_add(*seed),
            },
        };
        let ep = run_piano(roll, &cfg.env, src, cfg.context_steps)?;
        out.push(PianoResult {
            song: name.clone(),
            seed: *seed,
            horizon: cfg.horizon,
            goals: "generated".into(),
            f1: ep.f1,
            generate_ms: ep.generate_ms,
        });
    }
    Ok(out)
}

/// Evaluation set: Twinkle plus the held-out études.
pub fn benchmark(cfg: &PianoConfig) -> Vec<(String, u64, PianoRoll)> {
    let mut songs: Vec<(String, u64, PianoRoll)> = make_benchmark_songs(cfg.eval_seed0, 0)
        .into_iter()
        .map(|(n, r)| (n, 0, r))
        .collect();
    for (i, r) in cfg.etudes(cfg.eval_seed0, cfg.eval_etudes).into_iter().enumerate() {
        let seed = cfg.eval_seed0 + i as u64;
        songs.push((format!("etude-{seed}"), seed, r));
    }
    songs
}
