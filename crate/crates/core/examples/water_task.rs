//! Full water pipeline: oracle episodes, autoencoder, world model, pitch
//! trend check, then lookahead and baseline policies in closed loop.

use std::time::Instant;

use sfwm::harness::stats::mean;
use sfwm::harness::water::*;

fn main() -> sfwm::Result<()> {
    let cfg = WaterConfig::default();
    let t = Instant::now();
    let fe = cfg.frontend;
    let train = synth_episodes(&cfg.sim, &cfg.train_seeds())?;
    let specs = episode_log_mels(&train, &fe)?;
    println!("synth {:.1}s", t.elapsed().as_secs_f64());
    let (ae, log) = fit_water_ae(&specs, &cfg)?;
    println!("ae loss {:.5} at {:.1}s", log.tail_mean(50), t.elapsed().as_secs_f64());
    let (wm, log) = fit_water_wm(&ae, &specs, &cfg)?;
    println!("wm loss {:.4} at {:.1}s", log.tail_mean(100), t.elapsed().as_secs_f64());
    let held = synth_episodes(&cfg.sim, &cfg.heldout_seeds())?;
    let trend = pitch_trend(&ae, &wm, &held, &cfg)?;
    let good = trend.iter().filter(|s| s.spearman > 0.8).count();
    println!(
        "trend {good}/{} > 0.8, mean rho {:.3}",
        trend.len(),
        mean(&trend.iter().map(|s| s.spearman).collect::<Vec<_>>())
    );
    let (pol, log) = fit_water_policy(&ae, &train, &cfg, false)?;
    println!("policy loss {:.4} at {:.1}s", log.tail_mean(100), t.elapsed().as_secs_f64());
    let (base, log) = fit_water_policy(&ae, &train, &cfg, true)?;
    println!("baseline loss {:.4} at {:.1}s", log.tail_mean(100), t.elapsed().as_secs_f64());
    for (label, p, w) in [("lookahead", &pol, Some(&wm)), ("baseline", &base, None)] {
        let r = evaluate_water(&ae, w, p, &cfg, label)?;
        println!("{label}: {}/{} at {:.1}s", r.successes(), r.trials.len(), t.elapsed().as_secs_f64());
        for tr in r.trials.iter().filter(|t| !t.success) {
            println!("  seed {} failed: fill {:.3}, overflowed {}", tr.seed, tr.fill_at_end, tr.overflowed);
        }
    }
    Ok(())
}
