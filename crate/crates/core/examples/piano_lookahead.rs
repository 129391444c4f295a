//! Piano études: reactive (H=1) controller against generated lookahead goals.

use std::time::Instant;

use sfwm::harness::piano::*;
use sfwm::harness::stats::mean;

fn main() -> sfwm::Result<()> {
    let cfg = PianoConfig::default();
    let t = Instant::now();
    let rolls = cfg.train_rolls();
    let (ae, log) = fit_piano_ae(&rolls, &cfg)?;
    println!("ae loss {:.5} at {:.1}s", log.tail_mean(50), t.elapsed().as_secs_f64());
    let (wm, log) = fit_piano_wm(&ae, &rolls, &cfg)?;
    println!("wm loss {:.4} at {:.1}s", log.tail_mean(100), t.elapsed().as_secs_f64());
    let results = evaluate_piano(&ae, &wm, &benchmark(&cfg), &cfg)?;
    for r in &results {
        println!("{:>10} H={:<2} {:>9} F1 {:.3}", r.song, r.horizon, r.goals, r.f1);
    }
    let etude = |h: usize| -> Vec<f64> {
        results.iter().filter(|r| r.song != "twinkle" && r.horizon == h).map(|r| r.f1).collect()
    };
    println!(
        "mean F1 H=1 {:.3} H={} {:.3} at {:.1}s",
        mean(&etude(1)),
        cfg.horizon,
        mean(&etude(cfg.horizon)),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
