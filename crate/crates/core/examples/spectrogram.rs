//! Log-mel spectrogram of one synthetic water-filling episode.
//!
//! `cargo run --release --example spectrogram [out.pgm]`

use sfwm::signal::{log_mel_spectrogram, FrontendConfig};
use sfwm::sims::{water_episode_oracle, WaterSimConfig};

fn main() -> sfwm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "water_episode.pgm".into());
    let sim = WaterSimConfig::default();
    let ep = water_episode_oracle(&sim, 7)?;
    let fe = FrontendConfig::default();
    let spec = log_mel_spectrogram(&ep.audio, &fe)?;
    println!(
        "{:.2}s of audio -> {} frames x {} mel bins",
        ep.audio.samples.len() as f64 / ep.audio.sample_rate as f64,
        spec.n_frames(),
        spec.n_mels()
    );
    // the dominant bin rises while the cup fills
    let press = (ep.press_step as f64 * sim.dt / fe.frame_shift_s) as usize;
    let release = (ep.release_step as f64 * sim.dt / fe.frame_shift_s) as usize;
    for k in (press..release.min(spec.n_frames())).step_by(50) {
        println!("frame {k:>4}  dominant bin {:>3}", spec.frames.argmax_row(k));
    }
    let (lo, hi) = (spec.frames.min(), spec.frames.max());
    spec.frames.save_pgm(std::path::Path::new(&out), lo, hi)?;
    println!("wrote {out}");
    Ok(())
}
