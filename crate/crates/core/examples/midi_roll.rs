//! MIDI to piano roll and back.
//!
//! `cargo run --release --example midi_roll [file.mid]`

use sfwm::midi::{encode_smf, parse_midi, read_midi, roll_to_events, to_piano_roll, DEFAULT_STEP_S};
use sfwm::sims::twinkle;

fn main() -> sfwm::Result<()> {
    let events = match std::env::args().nth(1) {
        Some(path) => read_midi(std::path::Path::new(&path))?,
        None => roll_to_events(&twinkle()),
    };
    let end = events.iter().map(|e| e.offset_s).fold(0.0, f64::max);
    let roll = to_piano_roll(&events, DEFAULT_STEP_S, end)?;
    println!("{} notes, {:.2}s -> roll of {} steps", events.len(), end, roll.steps());
    for t in 0..roll.steps().min(16) {
        let keys: String = (0..88).map(|k| if roll.grid.get(t, k) > 0.5 { '#' } else { '.' }).collect();
        println!("{t:>3} {}", &keys[30..70]);
    }
    let bytes = encode_smf(&roll_to_events(&roll), 480, 500_000);
    let back = to_piano_roll(&parse_midi(&bytes)?, DEFAULT_STEP_S, end)?;
    println!("SMF round trip ({} bytes) identical: {}", bytes.len(), back == roll);
    Ok(())
}
