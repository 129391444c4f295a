//! Piano-roll autoencoder: train on a few études and report reconstruction.

use sfwm::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig};
use sfwm::numerics::{LrSchedule, Optimizer};
use sfwm::sims::{make_etude, EtudeConfig};

fn main() -> sfwm::Result<()> {
    let windows: Vec<_> = (0..8)
        .flat_map(|seed| {
            let roll = make_etude(&EtudeConfig { seed, ..Default::default() });
            (0..roll.steps() / 64).map(move |i| roll.grid.sub_rows(i * 64, 64)).collect::<Vec<_>>()
        })
        .collect();
    let steps = 800;
    let train = AeTrainConfig {
        steps,
        batch_size: 16,
        seed: 1,
        optimizer: Optimizer::with_schedule(LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 50,
            total_steps: steps as u64,
        }),
    };
    let (ae, log) = train_autoencoder(&windows, AutoencoderConfig::piano_roll(), &train)?;
    println!("{} windows, loss {:.5} -> {:.5}", windows.len(), log.step_losses[0], log.tail_mean(50));
    let (mut notes, mut hits, mut false_on) = (0, 0, 0);
    for w in &windows {
        let r = ae.reconstruct(w)?;
        for (a, b) in w.data().iter().zip(r.data()) {
            notes += (*a > 0.5) as usize;
            hits += (*a > 0.5 && *b > 0.5) as usize;
            false_on += (*a <= 0.5 && *b > 0.5) as usize;
        }
    }
    let lat = ae.encode(&windows[0])?;
    println!(
        "64 x 88 window -> {} x {} latents; recall {hits}/{notes}, spurious notes {false_on}",
        lat.frames.rows(),
        lat.frames.cols()
    );
    Ok(())
}
