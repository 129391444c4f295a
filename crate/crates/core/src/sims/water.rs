//! Water-dispenser simulator: pressing the button fills a bottle whose
//! resonance rises with the fill level; presses and releases click.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::signal::{Grid, PcmSignal};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterSimConfig {
    pub sample_rate: u32,
    /// Nominal fill fraction per second while pressed.
    pub fill_rate: f64,
    /// Episodes draw their rate uniformly within `fill_rate * (1 ± jitter)`.
    pub fill_rate_jitter: f64,
    pub f_empty: f64,
    pub f_full: f64,
    pub tone_amplitude: f64,
    pub click_ms: f64,
    pub click_amplitude: f64,
    pub noise_rms: f64,
    pub success_band: [f64; 2],
    /// Control period in seconds.
    pub dt: f64,
    /// Scripted press happens uniformly in this window (seconds).
    pub press_window: [f64; 2],
    /// The learned controller takes over at this time.
    pub handover_s: f64,
    /// Recording continues this long after the oracle's release.
    pub tail_s: f64,
    /// Trials without a release end here.
    pub timeout_s: f64,
}

impl Default for WaterSimConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fill_rate: 0.25,
            fill_rate_jitter: 0.2,
            f_empty: 300.0,
            f_full: 1200.0,
            tone_amplitude: 0.3,
            click_ms: 5.0,
            click_amplitude: 0.5,
            noise_rms: 0.01,
            success_band: [0.85, 0.98],
            dt: 0.1,
            press_window: [0.3, 0.8],
            handover_s: 1.5,
            tail_s: 3.0,
            timeout_s: 12.0,
        }
    }
}

impl WaterSimConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.success_band;
        if !(self.f_full > self.f_empty && self.f_empty > 0.0) {
            return Err(Error::Config("need f_full > f_empty > 0".into()));
        }
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config("need 0 < fill_lo < fill_hi <= 1".into()));
        }
        if !(self.dt > 0.0 && self.fill_rate > 0.0 && self.sample_rate > 0) {
            return Err(Error::Config("dt, fill_rate and sample_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fill_rate_jitter) {
            return Err(Error::Config("fill_rate_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Tone frequency at a fill level.
    pub fn pitch(&self, fill: f64) -> f64 {
        self.f_empty + (self.f_full - self.f_empty) * fill
    }

    pub fn samples_per_step(&self) -> usize {
        (self.dt * self.sample_rate as f64).round() as usize
    }

    pub fn in_band(&self, fill: f64) -> bool {
        fill >= self.success_band[0] && fill <= self.success_band[1]
    }

    /// Episode fill rate for a seed.
    pub fn episode_rate(&self, seed: u64) -> f64 {
        let mut rng = SeededRng::derive(seed, 0x7a7e);
        self.fill_rate * (1.0 + self.fill_rate_jitter * (2.0 * rng.uniform() - 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaterAction {
    Press,
    Release,
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterSimState {
    pub fill_level: f64,
    pub pressed: bool,
    pub time_s: f64,
    pub overflowed: bool,
}

/// One simulator instance: state plus its private noise stream.
pub struct WaterSim {
    pub config: WaterSimConfig,
    pub state: WaterSimState,
    pub fill_rate: f64,
    phase: f64,
    rng: SeededRng,
}

impl WaterSim {
    pub fn new(config: WaterSimConfig, fill_rate: f64, seed: u64) -> Self {
        Self {
            config,
            state: WaterSimState {
                fill_level: 0.0,
                pressed: false,
                time_s: 0.0,
                overflowed: false,
            },
            fill_rate,
            phase: 0.0,
            rng: SeededRng::derive(seed, 0xa0d10),
        }
    }

    /// Advances by `dt` seconds and returns the audio emitted meanwhile.
    pub fn step(&mut self, action: WaterAction, dt: f64) -> PcmSignal {
        let cfg = self.config;
        let sr = cfg.sample_rate as f64;
        let n = (dt * sr).round() as usize;
        let was = self.state.pressed;
        match action {
            WaterAction::Press => self.state.pressed = true,
            WaterAction::Release => self.state.pressed = false,
            WaterAction::Hold => {}
        }
        let clicked = was != self.state.pressed;
        let click_n = if clicked {
            ((cfg.click_ms * 1e-3 * sr).round() as usize).min(n)
        } else {
            0
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = cfg.noise_rms * self.rng.normal();
            if self.state.pressed {
                let fill = (self.state.fill_level + self.fill_rate / sr).min(1.0);
                if self.state.fill_level + self.fill_rate / sr > 1.0 {
                    self.state.overflowed = true;
                }
                self.state.fill_level = fill;
                self.phase += 2.0 * std::f64::consts::PI * cfg.pitch(fill) / sr;
                if self.phase > 2.0 * std::f64::consts::PI {
                    self.phase -= 2.0 * std::f64::consts::PI;
                }
                s += cfg.tone_amplitude * self.phase.sin();
            }
            if i < click_n {
                s += cfg.click_amplitude * (2.0 * self.rng.uniform() - 1.0);
            }
            out.push(s.clamp(-1.0, 1.0) as f32);
        }
        self.state.time_s += n as f64 / sr;
        PcmSignal {
            samples: out,
            sample_rate: cfg.sample_rate,
        }
    }
}

/// Scripted demonstration: press at a random time, release once the fill
/// level enters the success band, then keep recording.
#[derive(Clone, Debug)]
pub struct OracleEpisode {
    pub seed: u64,
    pub fill_rate: f64,
    pub audio: PcmSignal,
    pub actions: Vec<WaterAction>,
    /// State before each step.
    pub states: Vec<WaterSimState>,
    pub press_step: usize,
    pub release_step: usize,
}

impl OracleEpisode {
    /// Whether the button is held after step `k` (the binary action label).
    pub fn pressed_after(&self, k: usize) -> bool {
        k >= self.press_step && k < self.release_step
    }

    pub fn final_fill(&self) -> f64 {
        self.states[self.release_step].fill_level
    }
}

pub fn press_step_for(cfg: &WaterSimConfig, seed: u64) -> usize {
    let mut rng = SeededRng::derive(seed, 0x9e55);
    let t = cfg.press_window[0] + (cfg.press_window[1] - cfg.press_window[0]) * rng.uniform();
    (t / cfg.dt).round() as usize
}

pub fn water_episode_oracle(cfg: &WaterSimConfig, seed: u64) -> Result<OracleEpisode> {
    cfg.validate()?;
    let rate = cfg.episode_rate(seed);
    let mut sim = WaterSim::new(*cfg, rate, seed);
    let press_step = press_step_for(cfg, seed);
    let tail_steps = (cfg.tail_s / cfg.dt).round() as usize;
    let mut audio = Vec::new();
    let mut actions = Vec::new();
    let mut states = Vec::new();
    let mut release_step = None;
    let mut k = 0usize;
    loop {
        let action = if k == press_step {
            WaterAction::Press
        } else if sim.state.pressed && sim.state.fill_level >= cfg.success_band[0] {
            release_step = Some(k);
            WaterAction::Release
        } else {
            WaterAction::Hold
        };
        if let Some(r) = release_step {
            if k >= r + tail_steps {
                states.push(sim.state);
                break;
            }
        }
        states.push(sim.state);
        actions.push(action);
        audio.extend(sim.step(action, cfg.dt).samples);
        k += 1;
        if sim.state.time_s > 120.0 {
            return Err(Error::invalid("oracle episode did not terminate"));
        }
    }
    Ok(OracleEpisode {
        seed,
        fill_rate: rate,
        audio: PcmSignal {
            samples: audio,
            sample_rate: cfg.sample_rate,
        },
        actions,
        states,
        press_step,
        release_step: release_step.expect("loop exits after release"),
    })
}

/// Something that plans a chunk of binary press commands (`> 0` = keep the
/// button pressed) from the audio heard so far.
pub trait WaterController {
    /// Called before each trial.
    fn reset(&mut self, _trial_seed: u64) {}

    fn plan(&mut self, audio: &PcmSignal, state: &WaterSimState) -> Result<Vec<f32>>;

    /// Step (from trial start) at which the controller's latest prediction
    /// first showed a release, if it tracks one.
    fn predicted_release_step(&self) -> Option<usize> {
        None
    }

    /// Decoded future spectrogram behind the latest plan, if any.
    fn last_prediction(&self) -> Option<&Grid> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterTrial {
    pub seed: u64,
    pub success: bool,
    pub overflowed: bool,
    pub released: bool,
    pub fill_at_end: f64,
    pub end_time_s: f64,
    pub plans: usize,
    pub plan_ms: f64,
    pub predicted_release_step: Option<usize>,
    /// Decoded prediction from the first plan after the handover.
    #[serde(skip)]
    pub first_prediction: Option<Grid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterReport {
    pub label: String,
    pub trials: Vec<WaterTrial>,
}

impl WaterReport {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes() as f64 / self.trials.len().max(1) as f64
    }
}

/// Runs one closed-loop trial: the scripted pre-roll presses the button,
/// then from `handover_s` the controller plans chunks and the first
/// `execute` entries of each are applied. The trial ends at the first
/// release, on overflow, or at the timeout.
pub fn water_trial(
    cfg: &WaterSimConfig,
    controller: &mut dyn WaterController,
    seed: u64,
    execute: usize,
) -> Result<WaterTrial> {
    cfg.validate()?;
    let rate = cfg.episode_rate(seed);
    let mut sim = WaterSim::new(*cfg, rate, seed);
    let press_step = press_step_for(cfg, seed);
    let handover = (cfg.handover_s / cfg.dt).round() as usize;
    let timeout = (cfg.timeout_s / cfg.dt).round() as usize;
    let mut audio = PcmSignal {
        samples: Vec::new(),
        sample_rate: cfg.sample_rate,
    };
    let mut k = 0;
    while k < handover {
        let a = if k == press_step { WaterAction::Press } else { WaterAction::Hold };
        audio.samples.extend(sim.step(a, cfg.dt).samples);
        k += 1;
    }
    controller.reset(seed);
    let mut plans = 0;
    let mut plan_ms = 0.0;
    let mut predicted = None;
    let mut first_prediction = None;
    'outer: while k < timeout {
        let start = Instant::now();
        let chunk = controller.plan(&audio, &sim.state)?;
        plan_ms += start.elapsed().as_secs_f64() * 1e3;
        plans += 1;
        if plans == 1 {
            first_prediction = controller.last_prediction().cloned();
        }
        if predicted.is_none() {
            predicted = controller.predicted_release_step().map(|s| s + k);
        }
        if chunk.is_empty() {
            return Err(Error::invalid("controller returned an empty chunk"));
        }
        for &a in chunk.iter().take(execute.max(1)) {
            let want = a > 0.0;
            let action = match (sim.state.pressed, want) {
                (true, false) => WaterAction::Release,
                (false, true) => WaterAction::Press,
                _ => WaterAction::Hold,
            };
            audio.samples.extend(sim.step(action, cfg.dt).samples);
            k += 1;
            if action == WaterAction::Release || sim.state.overflowed || k >= timeout {
                break 'outer;
            }
        }
    }
    let s = sim.state;
    let released = !s.pressed && s.fill_level > 0.0;
    Ok(WaterTrial {
        seed,
        success: released && !s.overflowed && cfg.in_band(s.fill_level),
        overflowed: s.overflowed,
        released,
        fill_at_end: s.fill_level,
        end_time_s: s.time_s,
        plans,
        plan_ms,
        predicted_release_step: predicted,
        first_prediction,
    })
}

pub fn water_evaluate(
    cfg: &WaterSimConfig,
    controller: &mut dyn WaterController,
    seeds: &[u64],
    execute: usize,
    label: &str,
) -> Result<WaterReport> {
    let trials = seeds
        .iter()
        .map(|&s| water_trial(cfg, controller, s, execute))
        .collect::<Result<Vec<_>>>()?;
    Ok(WaterReport {
        label: label.to_string(),
        trials,
    })
}

/// Cheats by reading the true fill level; releases on band entry.
pub struct OracleController {
    pub config: WaterSimConfig,
    pub fill_rate_hint: Option<f64>,
}

impl WaterController for OracleController {
    fn plan(&mut self, _audio: &PcmSignal, state: &WaterSimState) -> Result<Vec<f32>> {
        // single-step plans so the release lands on the first in-band step
        let go = state.fill_level < self.config.success_band[0];
        Ok(vec![if go { 1.0 } else { -1.0 }])
    }
}

/// Never releases.
pub struct AlwaysHold;

impl WaterController for AlwaysHold {
    fn plan(&mut self, _audio: &PcmSignal, _state: &WaterSimState) -> Result<Vec<f32>> {
        Ok(vec![1.0; 16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{log_mel_spectrogram, FrontendConfig, MelFilterbank};

    #[test]
    fn pitch_endpoints_and_hold() {
        let cfg = WaterSimConfig::default();
        assert_eq!(cfg.pitch(0.0), 300.0);
        assert_eq!(cfg.pitch(1.0), 1200.0);
        let mut sim = WaterSim::new(cfg, 0.25, 1);
        sim.state.fill_level = 0.4;
        for dt in [0.01, 0.1, 1.3] {
            sim.step(WaterAction::Hold, dt);
            assert_eq!(sim.state.fill_level, 0.4);
        }
    }

    #[test]
    fn fill_is_linear_while_pressed() {
        let cfg = WaterSimConfig::default();
        let mut sim = WaterSim::new(cfg, 0.25, 2);
        sim.step(WaterAction::Press, 1.0);
        assert!((sim.state.fill_level - 0.25).abs() < 1e-9);
        sim.step(WaterAction::Hold, 0.5);
        assert!((sim.state.fill_level - 0.375).abs() < 1e-9);
        sim.step(WaterAction::Release, 0.5);
        assert!((sim.state.fill_level - 0.375).abs() < 1e-9);
        sim.step(WaterAction::Press, 3.0);
        assert!(sim.state.overflowed);
        assert_eq!(sim.state.fill_level, 1.0);
    }

    #[test]
    fn oracle_episodes() {
        let cfg = WaterSimConfig::default();
        for seed in 0..8 {
            let ep = water_episode_oracle(&cfg, seed).unwrap();
            let fill = ep.final_fill();
            assert!(cfg.in_band(fill), "seed {seed}: {fill}");
            let press_t = ep.press_step as f64 * cfg.dt;
            let release_t = ep.release_step as f64 * cfg.dt;
            let expected = press_t + cfg.success_band[0] / ep.fill_rate;
            assert!((release_t - expected).abs() <= cfg.dt + 1e-9, "seed {seed}");
            assert!(release_t < press_t + 1.0 / ep.fill_rate);
            assert!(!ep.states.iter().any(|s| s.overflowed));
        }
        let a = water_episode_oracle(&cfg, 3).unwrap();
        let b = water_episode_oracle(&cfg, 3).unwrap();
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn oracle_and_always_hold_bounds() {
        let cfg = WaterSimConfig::default();
        let seeds: Vec<u64> = (100..130).collect();
        let mut oracle = OracleController {
            config: cfg,
            fill_rate_hint: None,
        };
        let r = water_evaluate(&cfg, &mut oracle, &seeds, 8, "oracle").unwrap();
        assert_eq!(r.successes(), 30);
        let r = water_evaluate(&cfg, &mut AlwaysHold, &seeds, 8, "hold").unwrap();
        assert_eq!(r.successes(), 0);
        assert!(r.trials.iter().all(|t| t.overflowed));
    }

    #[test]
    fn dominant_mel_bin_tracks_pitch() {
        let cfg = WaterSimConfig::default();
        let fe = FrontendConfig::default();
        let bank = MelFilterbank::new(cfg.sample_rate, 512, 128, 20.0, 8000.0).unwrap();
        for fill in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut sim = WaterSim::new(cfg, 1e-9, 4);
            sim.state.fill_level = fill;
            sim.state.pressed = true;
            let audio = sim.step(WaterAction::Hold, 0.3);
            let spec = log_mel_spectrogram(&audio, &fe).unwrap();
            let expected = bank.nearest_bin(cfg.pitch(fill)) as i64;
            for t in 0..spec.n_frames() {
                let got = spec.frames.argmax_row(t) as i64;
                assert!((got - expected).abs() <= 1, "fill {fill} frame {t}: {got} vs {expected}");
            }
        }
    }
}
