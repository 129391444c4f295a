use std::time::Instant;

use crate::autoencoder::{Autoencoder, LatentSequence};
use crate::error::{Error, Result};
use crate::flow::{SamplerConfig, WorldModel};
use crate::midi::{goal_stack, GoalStack, PianoRoll, KEYS};
use crate::signal::Grid;
use crate::sims::{piano_step, KeyCommand, PianoEnv, PianoEnvConfig};

const ON: f32 = 0.5;

fn active(row: &[f32]) -> Vec<usize> {
    row.iter().enumerate().filter(|(_, v)| **v > ON).map(|(k, _)| k).collect()
}

fn centroid(keys: &[usize]) -> f64 {
    keys.iter().sum::<usize>() as f64 / keys.len() as f64
}

/// Receding-horizon key controller. Heads for the centroid of the earliest
/// upcoming non-empty goal row while keeping the current row within reach,
/// moves at most `max_step` keys, and presses the current row's keys that
/// are reachable after the move.
pub fn piano_controller(stack: &GoalStack, hand: f64, reach: f64, max_step: f64) -> KeyCommand {
    let now = active(stack.current());
    let upcoming = (1..stack.horizon())
        .map(|r| active(stack.rows.row(r)))
        .find(|keys| !keys.is_empty())
        .map(|keys| centroid(&keys));
    let mut target = match (now.is_empty(), upcoming) {
        (true, Some(u)) => u,
        (true, None) => hand,
        (false, u) => {
            let lo = *now.iter().max().unwrap() as f64 - reach;
            let hi = *now.iter().min().unwrap() as f64 + reach;
            if lo > hi {
                centroid(&now)
            } else {
                u.unwrap_or(hand).clamp(lo, hi)
            }
        }
    };
    target = hand + (target - hand).clamp(-max_step, max_step);
    let mut cmd = KeyCommand::stay(target);
    for k in now {
        if (k as f64 - target).abs() <= reach {
            cmd.press_mask[k] = true;
        }
    }
    cmd
}

/// F1 over all `(step, key)` cells. Two empty rolls score 1; exactly one
/// empty roll scores 0.
pub fn f1_score(executed: &PianoRoll, reference: &PianoRoll) -> Result<f64> {
    let (e, r) = (&executed.grid, &reference.grid);
    if e.rows() != r.rows() || e.cols() != r.cols() {
        return Err(Error::Shape(format!(
            "executed {}x{} vs reference {}x{}",
            e.rows(),
            e.cols(),
            r.rows(),
            r.cols()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (a, b) in e.data().iter().zip(r.data()) {
        match (*a > ON, *b > ON) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let (n_exec, n_ref) = (tp + fp, tp + fneg);
    if n_exec == 0 && n_ref == 0 {
        return Ok(1.0);
    }
    if n_exec == 0 || n_ref == 0 || tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / n_exec as f64;
    let rc = tp as f64 / n_ref as f64;
    Ok(2.0 * p * rc / (p + rc))
}

/// Where the controller's lookahead rows come from.
#[derive(Clone, Copy)]
pub enum GoalSource<'a> {
    /// The score itself.
    Truth { horizon: usize },
    /// Rows decoded from the world model, regenerated every `regen_every`
    /// steps from the last real context. Row 0 is always the real goal.
    Generated {
        ae: &'a Autoencoder,
        wm: &'a WorldModel,
        horizon: usize,
        regen_every: usize,
        sampler: SamplerConfig,
    },
}

impl GoalSource<'_> {
    pub fn horizon(&self) -> usize {
        match self {
            GoalSource::Truth { horizon } | GoalSource::Generated { horizon, .. } => *horizon,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PianoEpisode {
    pub executed: PianoRoll,
    pub reference: PianoRoll,
    pub f1: f64,
    pub generations: usize,
    pub generate_ms: f64,
}

/// Plays `roll` from step `start` to the end and scores the executed keys
/// against the reference over that span.
pub fn run_piano(roll: &PianoRoll, env_cfg: &PianoEnvConfig, source: GoalSource, start: usize) -> Result<PianoEpisode> {
    let h = source.horizon();
    if h == 0 {
        return Err(Error::invalid("lookahead horizon must be at least 1"));
    }
    if start >= roll.steps() {
        return Err(Error::invalid("start step beyond the end of the roll"));
    }
    let hand0 = (0..start)
        .rev()
        .map(|t| active(roll.grid.row(t)))
        .find(|k| !k.is_empty())
        .map(|k| centroid(&k))
        .unwrap_or((KEYS as f64 - 1.0) / 2.0);
    let mut env = PianoEnv::new(*env_cfg, hand0);
    let max_step = env_cfg.max_speed * env_cfg.step_s;
    let mut generated: Option<(usize, Grid)> = None;
    let mut generations = 0;
    let mut generate_ms = 0.0;
    for s in start..roll.steps() {
        let stack = match source {
            GoalSource::Truth { horizon } => goal_stack(roll, s, horizon),
            GoalSource::Generated {
                ae,
                wm,
                horizon,
                regen_every,
                sampler,
            } => {
                let stale = generated.as_ref().is_none_or(|(t0, _)| s - t0 >= regen_every.max(1));
                if stale {
                    let t0 = Instant::now();
                    let g = generate_goals(ae, wm, roll, s, &sampler, generations)?;
                    generate_ms += t0.elapsed().as_secs_f64() * 1e3;
                    generations += 1;
                    generated = Some((s, g));
                }
                let (t0, g) = generated.as_ref().expect("generated above");
                let mut rows = Grid::zeros(horizon, KEYS);
                rows.row_mut(0).copy_from_slice(roll.grid.row(s));
                for j in 1..horizon {
                    let idx = s - t0 + j;
                    if idx < g.rows() {
                        rows.row_mut(j).copy_from_slice(g.row(idx));
                    }
                }
                GoalStack { rows }
            }
        };
        let cmd = piano_controller(&stack, env.state.hand_position, env_cfg.reach, max_step);
        piano_step(&mut env, &cmd, env_cfg.step_s);
    }
    let reference = PianoRoll {
        grid: roll.grid.sub_rows(start, roll.steps() - start),
        step_s: roll.step_s,
    };
    let executed = env.state.executed_roll;
    let f1 = f1_score(&executed, &reference)?;
    Ok(PianoEpisode {
        executed,
        reference,
        f1,
        generations,
        generate_ms,
    })
}

/// Decodes one generated window starting at step `t` from the real rows
/// just before it; window `k` uses seed `sampler.seed + k`.
pub fn generate_goals(
    ae: &Autoencoder,
    wm: &WorldModel,
    roll: &PianoRoll,
    t: usize,
    sampler: &SamplerConfig,
    k: usize,
) -> Result<Grid> {
    let ctx_steps = wm.config().context_len * ae.config.block;
    if t < ctx_steps {
        return Err(Error::invalid(format!("need {ctx_steps} real steps before generating, have {t}")));
    }
    let ctx = ae.encode(&roll.grid.sub_rows(t - ctx_steps, ctx_steps))?;
    let fut = wm.predict(
        &ctx.frames,
        &SamplerConfig {
            n_steps: sampler.n_steps,
            seed: sampler.seed.wrapping_add(k as u64),
        },
    )?;
    ae.decode(&LatentSequence { frames: fut })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(rows: &[&[usize]]) -> GoalStack {
        let mut g = Grid::zeros(rows.len(), KEYS);
        for (r, keys) in rows.iter().enumerate() {
            for &k in *keys {
                g.set(r, k, 1.0);
            }
        }
        GoalStack { rows: g }
    }

    fn roll_of(rows: &[&[usize]]) -> PianoRoll {
        PianoRoll {
            grid: stack(rows).rows,
            step_s: 0.125,
        }
    }

    #[test]
    fn reactive_empty_row_stays() {
        let c = piano_controller(&stack(&[&[]]), 30.0, 12.0, 5.0);
        assert_eq!(c.target_position, 30.0);
        assert!(c.press_mask.iter().all(|p| !p));
    }

    #[test]
    fn pre_positions_toward_upcoming_goal() {
        let c = piano_controller(&stack(&[&[], &[], &[], &[80]]), 10.0, 12.0, 5.0);
        assert_eq!(c.target_position, 15.0);
        assert!(c.press_mask.iter().all(|p| !p));
    }

    #[test]
    fn presses_goal_in_reach() {
        let c = piano_controller(&stack(&[&[40, 45]]), 42.0, 12.0, 5.0);
        assert!(c.press_mask[40] && c.press_mask[45]);
        assert_eq!(c.press_mask.iter().filter(|p| **p).count(), 2);
        // keeps the current notes reachable while leaning toward the next ones
        let c = piano_controller(&stack(&[&[40], &[70]]), 40.0, 12.0, 100.0);
        assert_eq!(c.target_position, 52.0);
        assert!(c.press_mask[40]);
    }

    #[test]
    fn f1_examples() {
        let r = roll_of(&[&[1, 2], &[3, 4]]);
        assert_eq!(f1_score(&r, &r).unwrap(), 1.0);
        let d = roll_of(&[&[5], &[6]]);
        assert_eq!(f1_score(&d, &r).unwrap(), 0.0);
        let e = roll_of(&[&[1, 9], &[3, 10]]);
        assert!((f1_score(&e, &r).unwrap() - 0.5).abs() < 1e-12);
        let z = roll_of(&[&[], &[]]);
        assert_eq!(f1_score(&z, &z).unwrap(), 1.0);
        assert_eq!(f1_score(&z, &r).unwrap(), 0.0);
        assert_eq!(f1_score(&r, &z).unwrap(), 0.0);
        assert!(f1_score(&roll_of(&[&[]]), &r).is_err());
    }

    fn single_line() -> impl Strategy<Value = Vec<Option<usize>>> {
        prop::collection::vec(prop::option::of(0usize..KEYS), 1..40)
    }

    proptest! {
        #[test]
        fn full_lookahead_fast_hand_is_complete(line in single_line()) {
            let rows: Vec<Vec<usize>> = line.iter().map(|k| k.iter().copied().collect()).collect();
            let refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
            let roll = roll_of(&refs);
            let cfg = PianoEnvConfig { max_speed: 1e6, ..PianoEnvConfig::default() };
            let ep = run_piano(&roll, &cfg, GoalSource::Truth { horizon: roll.steps() }, 0).unwrap();
            prop_assert_eq!(ep.f1, 1.0);
        }

        #[test]
        fn f1_is_symmetric(a in single_line(), b in single_line()) {
            let n = a.len().min(b.len());
            let mk = |l: &[Option<usize>]| {
                let rows: Vec<Vec<usize>> = l[..n].iter().map(|k| k.iter().copied().collect()).collect();
                let refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
                roll_of(&refs)
            };
            let (x, y) = (mk(&a), mk(&b));
            prop_assert_eq!(f1_score(&x, &y).unwrap(), f1_score(&y, &x).unwrap());
        }
    }

    #[test]
    fn lookahead_beats_reactive_on_truth() {
        let cfg = PianoEnvConfig::default();
        let (mut h1, mut h16) = (0.0, 0.0);
        for seed in 0..20 {
            let roll = crate::sims::make_etude(&crate::sims::EtudeConfig {
                seed,
                ..Default::default()
            });
            h1 += run_piano(&roll, &cfg, GoalSource::Truth { horizon: 1 }, 64).unwrap().f1;
            h16 += run_piano(&roll, &cfg, GoalSource::Truth { horizon: 16 }, 64).unwrap().f1;
        }
        assert!(h16 / 20.0 > h1 / 20.0 + 0.1, "H=16 {} vs H=1 {}", h16 / 20.0, h1 / 20.0);
    }
}
