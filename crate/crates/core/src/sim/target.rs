//! Instrument targets: a SCPI resource address or an embedded simulator
//! described as `sim[:thru|:loop|:tomography[:<position>]]`.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::scpi::connection::ConnectionError;
use crate::scpi::{parse_resource, ResourceAddress};
use crate::sim::models::{LoopScenario, ScattererPosition, TomographyScenario};
use crate::sim::server::SimServer;
use crate::sim::vna::{Scenario, SimConfig};
use crate::vna::{connect_instrument, VnaClient, VnaError};

#[derive(Debug, Clone, PartialEq)]
pub enum InstrumentTarget {
    Scpi(ResourceAddress),
    Simulator(Scenario),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad instrument target {input:?}: {reason}")]
pub struct TargetError {
    pub input: String,
    pub reason: String,
}

pub fn parse_sim_scenario(spec: &str) -> Result<Scenario, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if !parts[0].eq_ignore_ascii_case("sim") {
        return Err("simulator targets start with \"sim\"".into());
    }
    let kind = parts.get(1).map(|s| s.to_ascii_lowercase());
    match (kind.as_deref(), parts.len()) {
        (None, 1) | (Some("thru"), 2) => Ok(Scenario::IdealThrough),
        (Some("loop"), 2) => Ok(Scenario::Loop(LoopScenario::default())),
        (Some("tomography" | "tomo"), n) if n <= 3 => {
            let position = match parts.get(2) {
                None => ScattererPosition::None,
                Some(p) => ScattererPosition::parse(p).ok_or_else(|| format!("unknown scatterer position {p:?}"))?,
            };
            Ok(Scenario::Tomography(TomographyScenario::default().with_position(position)))
        }
        _ => Err("expected sim, sim:thru, sim:loop or sim:tomography[:none|A|B|C]".into()),
    }
}

impl FromStr for InstrumentTarget {
    type Err = TargetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let err = |reason: String| TargetError {
            input: s.to_string(),
            reason,
        };
        if s.get(..3).is_some_and(|p| p.eq_ignore_ascii_case("sim")) {
            parse_sim_scenario(s).map(InstrumentTarget::Simulator).map_err(err)
        } else {
            parse_resource(s).map(InstrumentTarget::Scpi).map_err(|e| err(e.to_string()))
        }
    }
}

impl fmt::Display for InstrumentTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstrumentTarget::Scpi(a) => write!(f, "{a}"),
            InstrumentTarget::Simulator(Scenario::IdealThrough) => write!(f, "sim:thru"),
            InstrumentTarget::Simulator(Scenario::Loop(_)) => write!(f, "sim:loop"),
            InstrumentTarget::Simulator(Scenario::Tomography(t)) => write!(f, "sim:tomography:{}", t.position.as_str()),
        }
    }
}

/// A connected instrument plus the embedded simulator backing it, if any.
/// The simulator shuts down when this is dropped.
pub struct OpenInstrument {
    pub client: VnaClient,
    pub simulator: Option<SimServer>,
}

impl InstrumentTarget {
    /// Connect, spawning a loopback simulator first for `Simulator`
    /// targets. `base` supplies the simulator's timing and seed.
    pub fn open(&self, base: &SimConfig, timeout: Duration) -> Result<OpenInstrument, VnaError> {
        match self {
            InstrumentTarget::Scpi(addr) => Ok(OpenInstrument {
                client: connect_instrument(addr, timeout)?,
                simulator: None,
            }),
            InstrumentTarget::Simulator(scenario) => {
                let sim = SimServer::spawn("127.0.0.1:0", base.clone().with_scenario(scenario.clone()))
                    .map_err(|e| VnaError::Connection(ConnectionError::Io(e)))?;
                let client = connect_instrument(&sim.resource(), timeout)?;
                Ok(OpenInstrument {
                    client,
                    simulator: Some(sim),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_targets() {
        let t: InstrumentTarget = "sim:tomography:B".parse().unwrap();
        assert_eq!(t.to_string(), "sim:tomography:B");
        assert_eq!("SIM".parse::<InstrumentTarget>().unwrap().to_string(), "sim:thru");
        assert_eq!("sim:loop".parse::<InstrumentTarget>().unwrap().to_string(), "sim:loop");
        assert_eq!(
            "sim:tomo".parse::<InstrumentTarget>().unwrap().to_string(),
            "sim:tomography:NONE"
        );
        let a: InstrumentTarget = "TCPIP0::10.0.0.2::5025::SOCKET".parse().unwrap();
        assert_eq!(a, InstrumentTarget::Scpi(ResourceAddress::tcp("10.0.0.2", 5025)));
        for bad in ["sim:nope", "sim:loop:A", "sim:tomography:D", "10.0.0.2:5025", ""] {
            assert!(bad.parse::<InstrumentTarget>().is_err(), "{bad}");
        }
    }

    #[test]
    fn opens_embedded_simulator() {
        use crate::vna::RfInstrument;
        let t: InstrumentTarget = "sim:loop".parse().unwrap();
        let mut open = t.open(&SimConfig::default(), Duration::from_secs(2)).unwrap();
        assert_eq!(open.client.identify().unwrap(), "MPADA,SIMVNA,0,1.0");
        assert!(open.simulator.is_some());
    }
}
