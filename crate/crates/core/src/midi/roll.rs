use std::path::Path;

use super::smf::{NoteEvent, LOWEST_KEY};
use crate::error::{Error, Result};
use crate::signal::Grid;

pub const KEYS: usize = 88;
pub const DEFAULT_STEP_S: f64 = 0.125;

// Guards `t * step` comparisons against representation error in event times.
const TIME_EPS: f64 = 1e-9;

/// Binary T×88 roll; row `t` covers time `t * step_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRoll {
    pub grid: Grid,
    pub step_s: f64,
}

/// Current goal row followed by `H - 1` lookahead rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalStack {
    pub rows: Grid,
}

impl GoalStack {
    pub fn horizon(&self) -> usize {
        self.rows.rows()
    }

    pub fn current(&self) -> &[f32] {
        self.rows.row(0)
    }
}

/// Number of rows needed to cover `duration_s`.
pub fn steps_for(duration_s: f64, step_s: f64) -> usize {
    ((duration_s / step_s) - TIME_EPS).ceil().max(0.0) as usize
}

pub fn to_piano_roll(events: &[NoteEvent], step_s: f64, duration_s: f64) -> Result<PianoRoll> {
    if !(step_s > 0.0 && step_s.is_finite()) {
        return Err(Error::invalid(format!("step_s must be positive, got {step_s}")));
    }
    let t_rows = steps_for(duration_s, step_s);
    let mut grid = Grid::zeros(t_rows, KEYS);
    for e in events {
        if !(LOWEST_KEY..LOWEST_KEY + KEYS as u8).contains(&e.pitch) {
            continue;
        }
        let first = ((e.onset_s / step_s) - TIME_EPS).ceil().max(0.0) as usize;
        let end = (((e.offset_s / step_s) - TIME_EPS).ceil().max(0.0) as usize).min(t_rows);
        for t in first..end {
            grid.set(t, e.key_index(), 1.0);
        }
    }
    Ok(PianoRoll { grid, step_s })
}

impl PianoRoll {
    pub fn zeros(steps: usize, step_s: f64) -> Self {
        Self {
            grid: Grid::zeros(steps, KEYS),
            step_s,
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.rows()
    }

    pub fn active_keys(&self, t: usize) -> Vec<usize> {
        self.grid
            .row(t)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.5)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.steps() * KEYS * 2);
        for t in 0..self.steps() {
            for (k, v) in self.grid.row(t).iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push(if *v > 0.5 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, step_s: f64) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != KEYS {
                return Err(Error::invalid(format!(
                    "csv line {}: expected {KEYS} columns, found {}",
                    i + 1,
                    cells.len()
                )));
            }
            for c in cells {
                data.push(match c.trim() {
                    "0" => 0.0,
                    "1" => 1.0,
                    other => {
                        return Err(Error::invalid(format!("csv line {}: bad cell {other:?}", i + 1)))
                    }
                });
            }
            rows += 1;
        }
        Ok(Self {
            grid: Grid::new(rows, KEYS, data),
            step_s,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, step_s: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, step_s)
    }

    pub fn save_grid(&self, path: &Path) -> Result<()> {
        self.grid.save_spec(path, self.step_s)
    }

    pub fn load_grid(path: &Path) -> Result<Self> {
        let (grid, step_s) = Grid::load_spec(path)?;
        if grid.cols() != KEYS {
            return Err(Error::invalid(format!("roll grid has {} columns, expected {KEYS}", grid.cols())));
        }
        Ok(Self { grid, step_s })
    }
}

/// Rows `t_index..t_index + h`, zero-padded past the end of the roll.
pub fn goal_stack(roll: &PianoRoll, t_index: usize, h: usize) -> GoalStack {
    let h = h.max(1);
    let mut rows = Grid::zeros(h, KEYS);
    for i in 0..h {
        let t = t_index + i;
        if t >= roll.steps() {
            break;
        }
        rows.row_mut(i).copy_from_slice(roll.grid.row(t));
    }
    GoalStack { rows }
}

/// Maximal runs of active cells per key, velocity fixed at 64.
pub fn roll_to_events(roll: &PianoRoll) -> Vec<NoteEvent> {
    let mut events = Vec::new();
    let t_rows = roll.steps();
    for k in 0..KEYS {
        let mut start: Option<usize> = None;
        for t in 0..=t_rows {
            let on = t < t_rows && roll.grid.get(t, k) > 0.5;
            match (on, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(NoteEvent {
                        onset_s: s as f64 * roll.step_s,
                        offset_s: t as f64 * roll.step_s,
                        pitch: LOWEST_KEY + k as u8,
                        velocity: 64,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.pitch.cmp(&b.pitch)));
    events
}
