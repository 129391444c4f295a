//! Kinematic one-hand piano: a hand slides along the keyboard at bounded
//! speed and can only press keys within its reach.

use serde::{Deserialize, Serialize};

use crate::midi::{PianoRoll, DEFAULT_STEP_S, KEYS};
use crate::numerics::SeededRng;
use crate::signal::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PianoEnvConfig {
    /// Keys within this many indices of the hand can be pressed.
    pub reach: f64,
    /// Keys per second.
    pub max_speed: f64,
    pub step_s: f64,
}

impl Default for PianoEnvConfig {
    fn default() -> Self {
        Self {
            reach: 12.0,
            max_speed: 16.0,
            step_s: DEFAULT_STEP_S,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyCommand {
    pub target_position: f64,
    pub press_mask: Vec<bool>,
}

impl KeyCommand {
    pub fn stay(position: f64) -> Self {
        Self {
            target_position: position,
            press_mask: vec![false; KEYS],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PianoEnvState {
    pub hand_position: f64,
    pub executed_roll: PianoRoll,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PianoEnv {
    pub config: PianoEnvConfig,
    pub state: PianoEnvState,
}

impl PianoEnv {
    pub fn new(config: PianoEnvConfig, hand_position: f64) -> Self {
        Self {
            config,
            state: PianoEnvState {
                hand_position: hand_position.clamp(0.0, (KEYS - 1) as f64),
                executed_roll: PianoRoll::zeros(0, config.step_s),
                step_index: 0,
            },
        }
    }

    pub fn in_reach(&self, key: usize) -> bool {
        (key as f64 - self.state.hand_position).abs() <= self.config.reach
    }
}

/// Moves the hand toward the target (at most `max_speed * dt`), then records
/// the commanded keys that are within reach as one new executed row.
pub fn piano_step(env: &mut PianoEnv, cmd: &KeyCommand, dt: f64) {
    let cap = env.config.max_speed * dt;
    let pos = env.state.hand_position;
    let delta = (cmd.target_position - pos).clamp(-cap, cap);
    env.state.hand_position = (pos + delta).clamp(0.0, (KEYS - 1) as f64);
    let mut row = vec![0.0f32; KEYS];
    for (k, &on) in cmd.press_mask.iter().enumerate().take(KEYS) {
        if on && env.in_reach(k) {
            row[k] = 1.0;
        }
    }
    let roll = &mut env.state.executed_roll;
    roll.grid = roll.grid.vstack(&Grid::new(1, KEYS, row));
    env.state.step_index += 1;
}

/// Procedural étude: a short stepwise motif followed by a rest, played
/// alternately at two registers `jump` keys apart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtudeConfig {
    pub steps: usize,
    /// Steps per motif note.
    pub note_steps: usize,
    pub rest_steps: usize,
    /// Key distance between neighbouring motif degrees.
    pub motif_interval: usize,
    pub min_jump: usize,
    pub max_jump: usize,
    pub seed: u64,
}

impl Default for EtudeConfig {
    fn default() -> Self {
        Self {
            steps: 192,
            note_steps: 1,
            rest_steps: 8,
            motif_interval: 2,
            min_jump: 24,
            max_jump: 40,
            seed: 0,
        }
    }
}

const MOTIF: [usize; 8] = [0, 1, 2, 3, 4, 3, 2, 1];

impl EtudeConfig {
    pub fn period(&self) -> usize {
        MOTIF.len() * self.note_steps + self.rest_steps
    }
}

pub fn make_etude(cfg: &EtudeConfig) -> PianoRoll {
    let mut rng = SeededRng::derive(cfg.seed, 0xe7de);
    let span = 4 * cfg.motif_interval;
    let lo_jump = cfg.min_jump.min(cfg.max_jump);
    let jump = lo_jump + rng.below(cfg.max_jump - lo_jump + 1);
    let free = KEYS - 1 - span - jump;
    let low = rng.below(free + 1);
    let start_high = rng.bernoulli(0.5);
    let mut roll = PianoRoll::zeros(cfg.steps, DEFAULT_STEP_S);
    let period = cfg.period();
    for t in 0..cfg.steps {
        let (rep, phase) = (t / period, t % period);
        if phase >= MOTIF.len() * cfg.note_steps {
            continue;
        }
        let high = (rep % 2 == 1) != start_high;
        let base = if high { low + jump } else { low };
        let degree = MOTIF[phase / cfg.note_steps];
        roll.grid.set(t, base + degree * cfg.motif_interval, 1.0);
    }
    roll
}

/// Key indices of the notes used by the Twinkle melody.
const C4: usize = 39;
const D4: usize = 41;
const E4: usize = 43;
const F4: usize = 44;
const G4: usize = 46;
const A4: usize = 48;

/// Twinkle Twinkle Little Star, one quarter note per step.
pub fn twinkle() -> PianoRoll {
    let a: &[(usize, usize)] = &[
        (C4, 1), (C4, 1), (G4, 1), (G4, 1), (A4, 1), (A4, 1), (G4, 2),
        (F4, 1), (F4, 1), (E4, 1), (E4, 1), (D4, 1), (D4, 1), (C4, 2),
    ];
    let b: &[(usize, usize)] = &[
        (G4, 1), (G4, 1), (F4, 1), (F4, 1), (E4, 1), (E4, 1), (D4, 2),
    ];
    let notes: Vec<(usize, usize)> = [a, b, b, a].concat();
    let steps = notes.iter().map(|n| n.1).sum();
    let mut roll = PianoRoll::zeros(steps, DEFAULT_STEP_S);
    let mut t = 0;
    for (key, len) in notes {
        for _ in 0..len {
            roll.grid.set(t, key, 1.0);
            t += 1;
        }
    }
    roll
}

/// Tiles a roll until it has at least `steps` rows, then truncates.
pub fn tile_roll(roll: &PianoRoll, steps: usize) -> PianoRoll {
    let mut out = PianoRoll::zeros(steps, roll.step_s);
    for t in 0..steps {
        out.grid.row_mut(t).copy_from_slice(roll.grid.row(t % roll.steps()));
    }
    out
}

/// Twinkle (tiled to 192 steps) plus `n_etudes` études with seeds
/// `seed0, seed0 + 1, ...`.
pub fn make_benchmark_songs(seed0: u64, n_etudes: usize) -> Vec<(String, PianoRoll)> {
    let mut songs = vec![("twinkle".to_string(), tile_roll(&twinkle(), 192))];
    for i in 0..n_etudes as u64 {
        let cfg = EtudeConfig {
            seed: seed0 + i,
            ..EtudeConfig::default()
        };
        songs.push((format!("etude-{}", seed0 + i), make_etude(&cfg)));
    }
    songs
}
