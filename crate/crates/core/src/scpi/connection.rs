//! Blocking SCPI connection over a raw TCP socket.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::{parse_block_header, ResourceAddress, ScpiError, ScpiMessage, TERMINATOR};

/// Longest ASCII response line accepted before the peer is considered broken.
const MAX_LINE: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConnectionError {
    #[error("connect to {address}: {source}")]
    Connect {
        address: String,
        #[source]
        source: io::Error,
    },
    #[error("timeout waiting for instrument response")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ScpiError),
}

/// A decoded instrument response.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ascii(String),
    Block(Vec<u8>),
}

impl Response {
    pub fn as_ascii(&self) -> Option<&str> {
        match self {
            Response::Ascii(s) => Some(s),
            Response::Block(_) => None,
        }
    }
}

/// Single-owner connection; all reads honor the configured timeout.
#[derive(Debug)]
pub struct ScpiConnection {
    reader: BufReader<TcpStream>,
    timeout: Duration,
}

fn map_read_err(e: io::Error) -> ConnectionError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::UnexpectedEof => {
            ConnectionError::Timeout
        }
        _ => ConnectionError::Io(e),
    }
}

impl ScpiConnection {
    pub fn connect(address: &ResourceAddress, timeout: Duration) -> Result<Self, ConnectionError> {
        let target = address.socket_addr();
        let connect_err = |source| ConnectionError::Connect {
            address: address.to_string(),
            source,
        };
        let addrs: Vec<_> = target.to_socket_addrs().map_err(connect_err)?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no addresses resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => return Self::from_stream(stream, timeout),
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, ConnectionError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(ScpiConnection {
            reader: BufReader::new(stream),
            timeout,
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) -> Result<(), ConnectionError> {
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        self.reader.get_ref().set_write_timeout(Some(timeout))?;
        self.timeout = timeout;
        Ok(())
    }

    pub fn send(&mut self, message: &ScpiMessage) -> Result<(), ConnectionError> {
        let stream = self.reader.get_mut();
        stream.write_all(message.raw()).map_err(map_read_err)?;
        stream.flush()?;
        Ok(())
    }

    /// Frame and send a command body.
    pub fn write(&mut self, body: &str) -> Result<(), ConnectionError> {
        let msg = super::frame_command(body)?;
        self.send(&msg)
    }

    /// Send a query and read one response.
    pub fn query(&mut self, body: &str) -> Result<Response, ConnectionError> {
        self.write(body)?;
        self.read_response()
    }

    /// Read one response: either a definite-length block (with an optional
    /// trailing newline) or a newline-terminated ASCII line.
    pub fn read_response(&mut self) -> Result<Response, ConnectionError> {
        let first = {
            let buf = self.reader.fill_buf().map_err(map_read_err)?;
            if buf.is_empty() {
                return Err(ConnectionError::Timeout);
            }
            buf[0]
        };
        if first == b'#' {
            self.read_block().map(Response::Block)
        } else {
            self.read_line().map(Response::Ascii)
        }
    }

    fn read_block(&mut self) -> Result<Vec<u8>, ConnectionError> {
        let mut header = vec![0u8; 2];
        self.reader.read_exact(&mut header).map_err(map_read_err)?;
        let d = match header[1] {
            b'0' => return Err(ScpiError::BlockIndefinite.into()),
            c @ b'1'..=b'9' => (c - b'0') as usize,
            _ => return Err(ScpiError::BlockLengthDigits.into()),
        };
        let mut digits = vec![0u8; d];
        self.reader.read_exact(&mut digits).map_err(map_read_err)?;
        header.extend_from_slice(&digits);
        let (_, len) = parse_block_header(&header)?;
        let mut payload = vec![0u8; len];
        self.reader.read_exact(&mut payload).map_err(map_read_err)?;
        // Consume the optional terminator after the block.
        if let Ok(buf) = self.reader.fill_buf() {
            if buf.first() == Some(&TERMINATOR) {
                self.reader.consume(1);
            }
        }
        Ok(payload)
    }

    fn read_line(&mut self) -> Result<String, ConnectionError> {
        let mut line = Vec::new();
        let n = (&mut self.reader)
            .take(MAX_LINE as u64)
            .read_until(TERMINATOR, &mut line)
            .map_err(map_read_err)?;
        if n == 0 || line.last() != Some(&TERMINATOR) {
            return Err(ConnectionError::Timeout);
        }
        line.pop();
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        String::from_utf8(line).map_err(|_| ScpiError::NotUtf8.into())
    }
}
