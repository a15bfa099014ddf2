//! TCP front end for the simulated VNA. One client is served at a time;
//! further connections wait in the listen backlog.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

use crate::scpi::{InstrumentError, ResourceAddress, ScpiMessage};
use crate::sim::vna::{vna_sim_respond, SimConfig, SimVnaState};

pub const DEFAULT_PORT: u16 = 5025;
const MAX_LINE: usize = 1024 * 1024;
const POLL: Duration = Duration::from_millis(100);

pub struct SimServer {
    addr: SocketAddr,
    state: Arc<Mutex<SimVnaState>>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SimServer {
    /// Bind `bind` (use port 0 for an ephemeral port) and start serving.
    pub fn spawn(bind: &str, config: SimConfig) -> io::Result<SimServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(SimVnaState::new(config)));
        let shutdown = Arc::new(AtomicBool::new(false));
        let thread = {
            let state = state.clone();
            let shutdown = shutdown.clone();
            std::thread::Builder::new()
                .name("sim-vna".into())
                .spawn(move || serve(listener, state, shutdown))?
        };
        Ok(SimServer {
            addr,
            state,
            shutdown,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn resource(&self) -> ResourceAddress {
        ResourceAddress::tcp(self.addr.ip().to_string(), self.addr.port())
    }

    /// Shared view of the instrument state, for inspection in tests.
    pub fn state(&self) -> Arc<Mutex<SimVnaState>> {
        self.state.clone()
    }

    /// Block until the server stops (used by the `sim` subcommand).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(listener: TcpListener, state: Arc<Mutex<SimVnaState>>, shutdown: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                if let Err(e) = handle_client(stream, &state, &shutdown) {
                    debug!("sim client ended: {e}");
                }
            }
            Err(e) => warn!("sim accept failed: {e}"),
        }
    }
}

fn handle_client(stream: TcpStream, state: &Mutex<SimVnaState>, shutdown: &AtomicBool) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        match (&mut reader).take((MAX_LINE - line.len()) as u64 + 1).read_until(b'\n', &mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        }
        if line.last() != Some(&b'\n') {
            if line.len() > MAX_LINE {
                writer.write_all(InstrumentError::new(-223, "Too much data").to_line().as_bytes())?;
                // Discard the rest of the oversized line.
                discard_line(&mut reader)?;
                line.clear();
            }
            continue;
        }
        let reply = match ScpiMessage::parse_line(&line) {
            Ok(msg) => {
                let mut st = state.lock().unwrap_or_else(|p| p.into_inner());
                vna_sim_respond(&mut st, &msg)
            }
            Err(_) if line.iter().all(|b| b.is_ascii_whitespace()) => Vec::new(),
            Err(_) => InstrumentError::new(-102, "Syntax error").to_line().into_bytes(),
        };
        line.clear();
        if !reply.is_empty() {
            writer.write_all(&reply)?;
            writer.flush()?;
        }
    }
}

fn discard_line<R: BufRead>(reader: &mut R) -> io::Result<()> {
    loop {
        let buf = match reader.fill_buf() {
            Ok(b) => b,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        };
        if buf.is_empty() {
            return Ok(());
        }
        if let Some(i) = buf.iter().position(|&b| b == b'\n') {
            reader.consume(i + 1);
            return Ok(());
        }
        let n = buf.len();
        reader.consume(n);
    }
}
