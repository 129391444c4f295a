//! MIDI ingestion, piano rolls and lookahead goal stacks.

pub mod roll;
pub mod smf;

pub use roll::{goal_stack, roll_to_events, to_piano_roll, GoalStack, PianoRoll, DEFAULT_STEP_S, KEYS};
pub use smf::{encode_smf, parse_midi, read_midi, NoteEvent};
