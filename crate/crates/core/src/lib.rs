//! Multimodal RF acquisition: SCPI instrument control, RF-switch
//! sequencing, clock-synchronized acquisition, storage formats, analysis
//! and a hardware-free simulator.

pub mod acquisition;
pub mod analysis;
pub mod clock;
pub mod config;
pub mod datastore;
pub mod peripheral;
pub mod scpi;
pub mod sim;
pub mod switch;
pub mod vna;
