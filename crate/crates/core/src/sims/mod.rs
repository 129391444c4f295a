//! Synthetic tasks: the water dispenser and the kinematic piano.

pub mod piano;
pub mod water;

pub use piano::{
    make_benchmark_songs, make_etude, piano_step, tile_roll, twinkle, EtudeConfig, KeyCommand,
    PianoEnv, PianoEnvConfig, PianoEnvState,
};
pub use water::{
    press_step_for, water_episode_oracle, water_evaluate, water_trial, AlwaysHold,
    OracleController, OracleEpisode, WaterAction, WaterController, WaterReport, WaterSim,
    WaterSimConfig, WaterSimState, WaterTrial,
};
