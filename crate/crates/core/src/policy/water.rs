use crate::autoencoder::{Autoencoder, LatentSequence};
use crate::error::{Error, Result};
use crate::flow::{SamplerConfig, WorldModel};
use crate::signal::{
    log_mel_spectrogram, spectrum::samples_for, FrontendConfig, Grid, NormalizationStats,
    PcmSignal,
};
use crate::sims::{OracleEpisode, WaterController, WaterSimConfig, WaterSimState};

use super::{build_observation, ChunkPolicy, DemoSet, ObservationConfig, CHUNK_LEN};

/// Index of the last complete frame in `n` samples, if any.
fn last_frame(n: usize, fe: &FrontendConfig, rate: u32) -> Option<usize> {
    let win = samples_for(fe.frame_len_s, rate);
    let hop = samples_for(fe.frame_shift_s, rate);
    (n >= win).then(|| (n - win) / hop)
}

fn normalized(spec: &Grid, stats: &NormalizationStats) -> Grid {
    let data = spec.data().iter().map(|&x| stats.apply(x as f64) as f32).collect();
    Grid::new(spec.rows(), spec.cols(), data)
}

/// The `frames` most recent complete frames of `audio`, normalized. Rows
/// before the start of the recording are filled with −1.
pub fn context_window(
    audio: &PcmSignal,
    fe: &FrontendConfig,
    stats: &NormalizationStats,
    frames: usize,
) -> Result<Grid> {
    let rate = audio.sample_rate;
    let hop = samples_for(fe.frame_shift_s, rate);
    let win = samples_for(fe.frame_len_s, rate);
    let n_mels = fe.mel.n_mels;
    let Some(k_max) = last_frame(audio.samples.len(), fe, rate) else {
        return Ok(Grid::filled(frames, n_mels, -1.0));
    };
    let first = (k_max + 1).saturating_sub(frames);
    let slice = PcmSignal {
        samples: audio.samples[first * hop..k_max * hop + win].to_vec(),
        sample_rate: rate,
    };
    let spec = normalized(&log_mel_spectrogram(&slice, fe)?.frames, stats);
    let pad = frames - spec.rows();
    if pad == 0 {
        return Ok(spec);
    }
    Ok(Grid::filled(pad, n_mels, -1.0).vstack(&spec))
}

/// Rows `k_max + 1 ..= k_max + horizon` of a full normalized spectrogram,
/// repeating the final row past its end.
pub fn future_window(spec: &Grid, k_max: usize, horizon: usize) -> Grid {
    let mut out = Grid::zeros(horizon, spec.cols());
    for r in 0..horizon {
        let src = (k_max + 1 + r).min(spec.rows() - 1);
        out.row_mut(r).copy_from_slice(spec.row(src));
    }
    out
}

/// Observation/chunk pairs from oracle episodes at every control step from
/// the handover to the release. The predicted block holds the true future.
pub fn water_demos(
    episodes: &[OracleEpisode],
    sim: &WaterSimConfig,
    fe: &FrontendConfig,
    stats: &NormalizationStats,
    obs_cfg: &ObservationConfig,
) -> Result<DemoSet> {
    let handover = (sim.handover_s / sim.dt).round() as usize;
    let step_samples = sim.samples_per_step();
    let ctx_frames = obs_cfg.current_shape[0];
    let horizon = obs_cfg.predicted_shape[0];
    let mut demos = DemoSet::new(obs_cfg.width(), 1, CHUNK_LEN);
    for ep in episodes {
        let full = normalized(&log_mel_spectrogram(&ep.audio, fe)?.frames, stats);
        for k in handover.max(ep.press_step + 1)..=ep.release_step {
            let k_max = last_frame(k * step_samples, fe, sim.sample_rate)
                .ok_or_else(|| Error::invalid("handover precedes the first frame"))?;
            let start = (k_max + 1).saturating_sub(ctx_frames);
            let mut current = full.sub_rows(start, k_max + 1 - start);
            if current.rows() < ctx_frames {
                current = Grid::filled(ctx_frames - current.rows(), full.cols(), -1.0).vstack(&current);
            }
            let future = future_window(&full, k_max, horizon);
            let pressed = if ep.states[k].pressed { 1.0 } else { 0.0 };
            let obs = build_observation(obs_cfg, &current, Some(&future), &[pressed], false)?;
            let chunk = (0..CHUNK_LEN)
                .map(|j| if k + j < ep.release_step { 1.0 } else { -1.0 })
                .collect();
            demos.push(obs, Grid::new(CHUNK_LEN, 1, chunk))?;
        }
    }
    Ok(demos)
}

/// First frame of `pred` without a tonal peak, i.e. where the prediction
/// shows the button released.
pub fn predicted_release_frame(pred: &Grid) -> Option<usize> {
    (0..pred.rows()).find(|&r| {
        let mut row = pred.row(r).to_vec();
        row.sort_by(|a, b| a.total_cmp(b));
        row[row.len() - 1] - row[row.len() / 2] < 0.25
    })
}

/// Closed-loop water controller: frontend, optional world-model lookahead,
/// chunk policy.
pub struct LookaheadController {
    pub ae: Autoencoder,
    pub wm: Option<WorldModel>,
    pub policy: ChunkPolicy,
    pub frontend: FrontendConfig,
    pub sim: WaterSimConfig,
    pub sampler: SamplerConfig,
    /// World-model samples averaged per plan.
    pub wm_samples: usize,
    seed: u64,
    plans: u64,
    last_prediction: Option<Grid>,
}

impl LookaheadController {
    pub fn new(
        ae: Autoencoder,
        wm: Option<WorldModel>,
        policy: ChunkPolicy,
        frontend: FrontendConfig,
        sim: WaterSimConfig,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        if ae.normalization.is_none() {
            return Err(Error::invalid("autoencoder checkpoint carries no normalization stats"));
        }
        Ok(Self {
            ae,
            wm,
            policy,
            frontend,
            sim,
            sampler,
            wm_samples: 1,
            seed: sampler.seed,
            plans: 0,
            last_prediction: None,
        })
    }

    /// `wm_samples` decoded futures; sample `i` uses `seed + i`.
    fn predict(&self, ctx: &Grid, seed: u64) -> Result<Vec<Grid>> {
        let Some(wm) = &self.wm else { return Ok(Vec::new()) };
        let lat = self.ae.encode(ctx)?;
        (0..self.wm_samples.max(1) as u64)
            .map(|i| {
                let fut = wm.predict(
                    &lat.frames,
                    &SamplerConfig {
                        n_steps: self.sampler.n_steps,
                        seed: seed.wrapping_add(i),
                    },
                )?;
                self.ae.decode(&LatentSequence { frames: fut })
            })
            .collect()
    }
}

fn mean_grid(grids: &[Grid]) -> Option<Grid> {
    let mut out = grids.first()?.clone();
    for g in &grids[1..] {
        out.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
    let n = grids.len() as f32;
    out.data_mut().iter_mut().for_each(|x| *x /= n);
    Some(out)
}

impl WaterController for LookaheadController {
    fn reset(&mut self, trial_seed: u64) {
        self.seed = self.sampler.seed.wrapping_add(trial_seed.wrapping_mul(1_000_003));
        self.plans = 0;
        self.last_prediction = None;
    }

    fn plan(&mut self, audio: &PcmSignal, state: &WaterSimState) -> Result<Vec<f32>> {
        let stats = self.ae.normalization.expect("checked in new");
        let cfg = self.policy.obs_config;
        let ctx = context_window(audio, &self.frontend, &stats, cfg.current_shape[0])?;
        let seed = self.seed.wrapping_add(self.plans * self.wm_samples.max(1) as u64);
        self.plans += 1;
        let preds = if self.policy.baseline_mode { Vec::new() } else { self.predict(&ctx, seed)? };
        let pressed = if state.pressed { 1.0 } else { 0.0 };
        let futures: Vec<Option<&Grid>> = if preds.is_empty() { vec![None] } else { preds.iter().map(Some).collect() };
        let mut chunks = Vec::with_capacity(futures.len());
        for (i, fut) in futures.into_iter().enumerate() {
            let obs = build_observation(&cfg, &ctx, fut, &[pressed], self.policy.baseline_mode)?;
            chunks.push(self.policy.act(
                &obs,
                &SamplerConfig {
                    n_steps: self.sampler.n_steps,
                    seed: seed.wrapping_add(i as u64),
                },
            )?);
        }
        self.last_prediction = mean_grid(&preds);
        Ok(mean_grid(&chunks).expect("one chunk per future").data().to_vec())
    }

    fn predicted_release_step(&self) -> Option<usize> {
        let frames_per_step = self.sim.dt / self.frontend.frame_shift_s;
        let f = predicted_release_frame(self.last_prediction.as_ref()?)?;
        Some((f as f64 / frames_per_step).floor() as usize)
    }

    fn last_prediction(&self) -> Option<&Grid> {
        self.last_prediction.as_ref()
    }
}
