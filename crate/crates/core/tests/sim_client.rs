use std::net::TcpListener;
use std::time::{Duration, Instant};

use mpada_core::scpi::connection::{Response, ScpiConnection};
use mpada_core::scpi::{InstrumentError, ResourceAddress};
use mpada_core::sim::models::{ScattererPosition, TomographyScenario};
use mpada_core::sim::{Scenario, SimConfig, SimServer};
use mpada_core::vna::{connect_instrument, FrequencyGrid, PortPath, RfInstrument, RigEvent, VnaClient, VnaError};
use num_complex::Complex64;

const TIMEOUT: Duration = Duration::from_secs(2);

fn server(config: SimConfig) -> SimServer {
    SimServer::spawn("127.0.0.1:0", config).unwrap()
}

fn ascii(conn: &mut ScpiConnection, q: &str) -> String {
    match conn.query(q).unwrap() {
        Response::Ascii(s) => s,
        other => panic!("{q}: {other:?}"),
    }
}

#[test]
fn configure_and_read_ideal_through() {
    let sim = server(SimConfig::default());
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    assert_eq!(vna.identify().unwrap(), "MPADA,SIMVNA,0,1.0");
    let grid = FrequencyGrid::new(20e6, 60e6, 101).unwrap();
    vna.configure_sweep(&grid).unwrap();
    assert_eq!(vna.query_grid().unwrap(), (20e6, 60e6, 101));
    let trace = vna.trigger_and_read(&PortPath::direct()).unwrap();
    assert_eq!(trace.grid(), &grid);
    assert!(trace.values().iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    assert_eq!(vna.min_sweep_time().unwrap(), Duration::from_millis(20));
    assert_eq!(vna.calibration_state().unwrap(), "0");
}

#[test]
fn single_point_grid() {
    let sim = server(SimConfig::default());
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    let grid = FrequencyGrid::single(34e6).unwrap();
    vna.configure_sweep(&grid).unwrap();
    assert_eq!(vna.trigger_and_read(&PortPath::direct()).unwrap().values().len(), 1);
}

#[test]
fn rejected_grid_reports_instrument_error() {
    let sim = server(SimConfig::default());
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    let grid = FrequencyGrid::new(20e6, 7e9, 11).unwrap();
    match vna.configure_sweep(&grid) {
        Err(VnaError::Rejected(e)) => assert_eq!(e.code, -222),
        other => panic!("{other:?}"),
    }
    // The connection survives the error.
    vna.configure_sweep(&FrequencyGrid::new(20e6, 60e6, 11).unwrap()).unwrap();
}

#[test]
fn trigger_before_configure() {
    let sim = server(SimConfig::default());
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    assert!(matches!(vna.trigger_and_read(&PortPath::direct()), Err(VnaError::NotConfigured)));
}

#[test]
fn unreachable_address_fails_fast() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let t = Instant::now();
    let r = VnaClient::connect(&ResourceAddress::tcp("127.0.0.1", port), Duration::from_millis(500));
    assert!(matches!(r, Err(VnaError::Connection(_))), "{r:?}");
    assert!(t.elapsed() < Duration::from_secs(2));
}

#[test]
fn every_dialect_setting_round_trips() {
    let sim = server(SimConfig::default());
    let mut conn = ScpiConnection::connect(&sim.resource(), TIMEOUT).unwrap();
    let cases: &[(&str, &str, &str)] = &[
        (":SENS:FREQ:STAR 25000000", ":SENS:FREQ:STAR?", "25000000"),
        (":sense:frequency:start 30 MHz", ":SENSe:FREQuency:STARt?", "30000000"),
        (":SENS:FREQ:STOP 5.5e7", ":SENS:FREQ:STOP?", "55000000"),
        (":SENSe:FREQuency:STOP 1GHZ", ":SENS:FREQ:STOP?", "1000000000"),
        (":SENS:SWE:POIN 201", ":SENS:SWE:POIN?", "201"),
        (":SENSe:SWEep:POINts 1", ":sens:swe:poin?", "1"),
        (":SENS:CORR:STAT ON", ":SENS:CORR:STAT?", "1"),
        (":SENS:CORR:STAT 0", ":SENS:CORR:STAT?", "0"),
        (":FORM:DATA ASCII", ":FORM:DATA?", "ASC"),
        (":FORMat:DATA REAL,64", ":FORM:DATA?", "REAL,64"),
        (":SIM:SCEN TOMO", ":SIM:SCEN?", "TOMO"),
        (":SIM:TOMO:POS B", ":SIM:TOMO:POS?", "B"),
        (":SIMulation:TOMOgraphy:POSition none", ":SIM:TOMO:POS?", "NONE"),
        (":SIM:RIG:PINS GP0,GP2", ":SIM:RIG:PINS?", "GP0,GP2"),
        (":SIM:RIG:PINS NONE", ":SIM:RIG:PINS?", "NONE"),
        (":SIM:RIG:STEP 355", ":SIM:RIG:STEP?", "355"),
        (":SIM:SCEN LOOP", ":SIM:SCEN?", "LOOP"),
        (":SIM:SCEN THRU", ":SIM:SCEN?", "THRU"),
    ];
    for (set, query, want) in cases {
        conn.write(set).unwrap();
        assert_eq!(ascii(&mut conn, query), *want, "{set}");
    }
    conn.write("*RST").unwrap();
    assert_eq!(ascii(&mut conn, ":SENS:SWE:POIN?"), "101");
    assert_eq!(ascii(&mut conn, ":SENS:SWE:TIME?"), "0.02");
    assert_eq!(ascii(&mut conn, "*OPC?"), "1");
}

#[test]
fn bad_input_yields_error_lines_and_keeps_session() {
    let sim = server(SimConfig::default());
    let mut conn = ScpiConnection::connect(&sim.resource(), TIMEOUT).unwrap();
    let expect = |conn: &mut ScpiConnection, cmd: &str, code: i32| {
        conn.write(cmd).unwrap();
        let line = match conn.read_response().unwrap() {
            Response::Ascii(s) => s,
            other => panic!("{other:?}"),
        };
        assert_eq!(InstrumentError::parse(&line).unwrap().code, code, "{cmd}: {line}");
    };
    expect(&mut conn, ":BOGUS:HEADER 1", -113);
    expect(&mut conn, ":SENS:FREQ:STAR", -109);
    expect(&mut conn, ":SENS:SWE:POIN many", -104);
    expect(&mut conn, ":SENS:SWE:POIN 20000", -222);
    expect(&mut conn, ":CALC:DATA? SDATA", -230);
    expect(&mut conn, ":CALC:DATA? FDATA", -224);
    expect(&mut conn, ":SIM:TOMO:POS A", -221);
    assert_eq!(ascii(&mut conn, "*IDN?"), "MPADA,SIMVNA,0,1.0");
}

#[test]
fn ascii_trace_format_decodes() {
    let sim = server(SimConfig::default());
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    let grid = FrequencyGrid::new(1e6, 2e6, 5).unwrap();
    vna.configure_sweep(&grid).unwrap();
    vna.send_command(":FORM:DATA ASCII").unwrap();
    let t = vna.trigger_and_read(&PortPath::direct()).unwrap();
    assert_eq!(t.values(), &[Complex64::new(1.0, 0.0); 5]);
}

#[test]
fn rig_events_reach_the_simulator() {
    let tomo = TomographyScenario::default().with_position(ScattererPosition::A);
    let sim = server(SimConfig::default().with_scenario(Scenario::Tomography(tomo)));
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    let pins = ["GP0", "GP2"].iter().map(|p| mpada_core::switch::Pin::new(p).unwrap()).collect();
    vna.rig_event(&RigEvent::Pins(pins)).unwrap();
    vna.rig_event(&RigEvent::StepperPosition(15)).unwrap();
    let state = sim.state();
    let st = state.lock().unwrap();
    assert_eq!(st.stepper_position(), 15);
    assert_eq!(st.pin_log().len(), 1);
}

#[test]
fn plain_client_does_not_forward_rig_events() {
    let sim = server(SimConfig::default());
    let mut vna = VnaClient::connect(&sim.resource(), TIMEOUT).unwrap();
    vna.rig_event(&RigEvent::StepperPosition(5)).unwrap();
    assert_eq!(sim.state().lock().unwrap().stepper_position(), 0);
}

#[test]
fn tomography_trace_depends_on_angle() {
    let tomo = TomographyScenario::default().with_position(ScattererPosition::B);
    let sim = server(SimConfig::default().with_scenario(Scenario::Tomography(tomo)));
    let mut vna = connect_instrument(&sim.resource(), TIMEOUT).unwrap();
    vna.configure_sweep(&FrequencyGrid::new(20e6, 60e6, 101).unwrap()).unwrap();
    let a = vna.trigger_and_read(&PortPath::direct()).unwrap();
    vna.rig_event(&RigEvent::StepperPosition(5)).unwrap();
    let b = vna.trigger_and_read(&PortPath::direct()).unwrap();
    assert_ne!(a.values(), b.values());
}
