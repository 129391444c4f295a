//! Latent world model: a [`FlowNet`] over standardized autoencoder latents.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{fit_flow, sample_batch, FlowDataset, FlowNet, FlowNetConfig, FlowTrainConfig, SampleRequest, SamplerConfig};
use crate::autoencoder::{Autoencoder, LatentSequence, TrainLog};
use crate::error::{Error, Result};
use crate::numerics::Checkpoint;
use crate::signal::Grid;

pub type WmTrainConfig = FlowTrainConfig;

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub net: FlowNet,
    /// Per-dimension latent mean and standard deviation used to whiten
    /// latents before they reach the network.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Timing and seed of one generated window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLog {
    pub index: usize,
    pub seed: u64,
    pub n_steps: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// `n_windows * L` latent frames.
    pub latents: Grid,
    /// Decoded frames, `n_windows * L * block` rows.
    pub decoded: Grid,
    pub windows: Vec<WindowLog>,
}

fn map_rows(g: &Grid, f: impl Fn(usize, f32) -> f32) -> Grid {
    let cols = g.cols();
    let data = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| f(i % cols, *v))
        .collect();
    Grid::new(g.rows(), cols, data)
}

pub fn latent_moments(latents: &[&Grid]) -> Result<(Vec<f32>, Vec<f32>)> {
    let d = latents
        .first()
        .map(|g| g.cols())
        .ok_or_else(|| Error::invalid("no latents"))?;
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for g in latents {
        if g.cols() != d {
            return Err(Error::Shape("latent widths differ".into()));
        }
        for r in 0..g.rows() {
            for (j, v) in g.row(r).iter().enumerate() {
                sum[j] += *v as f64;
                sq[j] += (*v as f64).powi(2);
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt()).max(1e-6) as f32)
        .collect();
    Ok((mean.into_iter().map(|m| m as f32).collect(), std))
}

impl WorldModel {
    pub fn config(&self) -> &FlowNetConfig {
        &self.net.config
    }

    pub fn standardize(&self, g: &Grid) -> Grid {
        map_rows(g, |j, v| (v - self.mean[j]) / self.std[j])
    }

    pub fn destandardize(&self, g: &Grid) -> Grid {
        map_rows(g, |j, v| v * self.std[j] + self.mean[j])
    }

    /// Samples future latents for each `(context, seed)` pair.
    pub fn predict_batch(&self, contexts: &[&Grid], seeds: &[u64], n_steps: usize) -> Result<Vec<Grid>> {
        if contexts.len() != seeds.len() {
            return Err(Error::invalid("contexts and seeds differ in length"));
        }
        let std_ctx: Vec<Grid> = contexts.iter().map(|c| self.standardize(c)).collect();
        let reqs: Vec<SampleRequest> = std_ctx
            .iter()
            .zip(seeds)
            .map(|(c, s)| SampleRequest {
                context: Some(c),
                obs: None,
                seed: *s,
            })
            .collect();
        Ok(sample_batch(&self.net, &reqs, n_steps)?
            .iter()
            .map(|g| self.destandardize(g))
            .collect())
    }

    pub fn predict(&self, context: &Grid, cfg: &SamplerConfig) -> Result<Grid> {
        Ok(self.predict_batch(&[context], &[cfg.seed], cfg.n_steps)?.remove(0))
    }

    /// Generates `n_windows` consecutive windows; window `i` uses seed
    /// `cfg.seed + i` and is conditioned on the last `L′` latents produced so
    /// far.
    pub fn rollout(
        &self,
        ae: &Autoencoder,
        seed_context: &Grid,
        n_windows: usize,
        cfg: &SamplerConfig,
    ) -> Result<Rollout> {
        if n_windows == 0 {
            return Err(Error::invalid("n_windows must be at least 1"));
        }
        let lc = self.config().context_len;
        let mut history = seed_context.clone();
        let mut out: Option<Grid> = None;
        let mut windows = Vec::with_capacity(n_windows);
        for i in 0..n_windows {
            let ctx = history.sub_rows(history.rows() - lc, lc);
            let seed = cfg.seed.wrapping_add(i as u64);
            let start = Instant::now();
            let gen = self.predict(
                &ctx,
                &SamplerConfig {
                    n_steps: cfg.n_steps,
                    seed,
                },
            )?;
            windows.push(WindowLog {
                index: i,
                seed,
                n_steps: cfg.n_steps,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            history = history.vstack(&gen);
            out = Some(match out {
                Some(o) => o.vstack(&gen),
                None => gen,
            });
        }
        let latents = out.expect("at least one window");
        let decoded = ae.decode(&LatentSequence {
            frames: latents.clone(),
        })?;
        Ok(Rollout {
            latents,
            decoded,
            windows,
        })
    }

    pub fn to_checkpoint(&self, train: Option<&FlowTrainConfig>) -> Checkpoint {
        Checkpoint::from_store(
            json!({
                "kind": "world-model",
                "net": self.net.config,
                "latent_mean": self.mean,
                "latent_std": self.std,
                "train": train,
                "step": self.net.params.step(),
            }),
            &self.net.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("world-model") {
            return Err(Error::invalid("checkpoint is not a world model"));
        }
        let config: FlowNetConfig = serde_json::from_value(ck.metadata["net"].clone())?;
        let mean: Vec<f32> = serde_json::from_value(ck.metadata["latent_mean"].clone())?;
        let std: Vec<f32> = serde_json::from_value(ck.metadata["latent_std"].clone())?;
        if mean.len() != config.d || std.len() != config.d {
            return Err(Error::invalid("latent statistics do not match latent width"));
        }
        let mut net = net_from_store(config, ck)?;
        net.params.set_step(ck.metadata["step"].as_u64().unwrap_or(0));
        Ok(Self { net, mean, std })
    }
}

/// Rebuilds a [`FlowNet`] from checkpoint tensors, checking every expected
/// parameter is present with the right shape.
pub(crate) fn net_from_store(config: FlowNetConfig, ck: &Checkpoint) -> Result<FlowNet> {
    let reference = FlowNet::new(config.clone(), 0)?;
    let params = ck.to_store();
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::invalid(format!("checkpoint missing or misshapen tensor {name}"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::invalid("checkpoint has unexpected tensors"));
    }
    Ok(FlowNet { config, params })
}

/// Fits a world model on `(context, future)` latent pairs.
pub fn train_world_model(
    pairs: &[(Grid, Grid)],
    config: FlowNetConfig,
    train: &FlowTrainConfig,
) -> Result<(WorldModel, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    for (c, f) in pairs {
        if c.rows() != config.context_len || f.rows() != config.future_len || c.cols() != config.d || f.cols() != config.d {
            return Err(Error::Shape(format!(
                "pair {}x{} / {}x{} does not match net geometry {}+{} x {}",
                c.rows(),
                c.cols(),
                f.rows(),
                f.cols(),
                config.context_len,
                config.future_len,
                config.d
            )));
        }
    }
    let all: Vec<&Grid> = pairs.iter().flat_map(|(c, f)| [c, f]).collect();
    let (mean, std) = latent_moments(&all)?;
    let mut wm = WorldModel {
        net: FlowNet::new(config, train.seed)?,
        mean,
        std,
    };
    let data = FlowDataset {
        context: pairs.iter().map(|(c, _)| wm.standardize(c)).collect(),
        future: pairs.iter().map(|(_, f)| wm.standardize(f)).collect(),
        obs: Vec::new(),
    };
    let log = fit_flow(&mut wm.net, &data, train)?;
    Ok((wm, log))
}
