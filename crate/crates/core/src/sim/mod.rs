//! Hardware-free rig: a SCPI-speaking VNA over TCP plus scenario models
//! shared with the simulated peripherals.

pub mod models;
pub mod server;
pub mod target;
pub mod vna;

pub use models::{
    loop_s21_magnitude, sim_flux, tomography_s21, LoopScenario, MotionProfile, ScattererPosition,
    TomographyScenario,
};
pub use server::SimServer;
pub use target::{parse_sim_scenario, InstrumentTarget, OpenInstrument, TargetError};
pub use vna::{vna_sim_respond, Scenario, SimConfig, SimVnaState};
