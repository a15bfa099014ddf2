//! SCPI message framing, IEEE 488.2 definite-length blocks and VISA-style
//! resource addresses.
//!
//! Everything here is a pure function over bytes. Live connections are in
//! [`connection`].

use std::fmt;

use thiserror::Error;

pub mod connection;

pub use connection::{Response, ScpiConnection};

/// Line terminator used for commands, queries and ASCII responses.
pub const TERMINATOR: u8 = b'\n';

/// Largest payload a definite-length block can declare (nine length digits).
pub const MAX_BLOCK_LEN: usize = 999_999_999;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScpiError {
    #[error("malformed resource address: {segment}: {reason}")]
    Resource { segment: String, reason: String },
    #[error("empty message body")]
    EmptyBody,
    #[error("message body contains an embedded newline at byte {0}")]
    EmbeddedNewline(usize),
    #[error("malformed header {header:?}: {reason}")]
    Header { header: String, reason: &'static str },
    #[error("block: missing '#' prefix")]
    BlockMissingHash,
    #[error("block: indefinite-length blocks ('#0') are not supported")]
    BlockIndefinite,
    #[error("block: non-digit in length field")]
    BlockLengthDigits,
    #[error("block: truncated header")]
    BlockTruncatedHeader,
    #[error("block: truncated: expected {expected}, got {got}")]
    BlockTruncated { expected: usize, got: usize },
    #[error("block: payload of {0} bytes exceeds the definite-length limit")]
    BlockTooLarge(usize),
    #[error("message is not valid UTF-8")]
    NotUtf8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    TcpSocket,
}

/// Instrument address of the form `TCPIP<n>::<host>::<port>::SOCKET`.
///
/// Direct (P2P) and routed (LAN) links differ only in `host`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResourceAddress {
    pub transport: Transport,
    pub board: u32,
    pub host: String,
    pub port: u16,
}

impl ResourceAddress {
    pub fn tcp(host: impl Into<String>, port: u16) -> Self {
        ResourceAddress {
            transport: Transport::TcpSocket,
            board: 0,
            host: host.into(),
            port,
        }
    }

    /// `host:port` form suitable for socket APIs.
    pub fn socket_addr(&self) -> String {
        if self.host.contains(':') {
            format!("[{}]:{}", self.host, self.port)
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }
}

impl fmt::Display for ResourceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TCPIP{}::{}::{}::SOCKET", self.board, self.host, self.port)
    }
}

impl std::str::FromStr for ResourceAddress {
    type Err = ScpiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_resource(s)
    }
}

fn resource_err(segment: &str, reason: impl Into<String>) -> ScpiError {
    ScpiError::Resource {
        segment: segment.to_string(),
        reason: reason.into(),
    }
}

/// Parse `TCPIP<n>::<host>::<port>::SOCKET`. The interface token and the
/// trailing `SOCKET` are matched case-insensitively.
pub fn parse_resource(address: &str) -> Result<ResourceAddress, ScpiError> {
    let address = address.trim();
    if address.is_empty() {
        return Err(resource_err("", "empty address"));
    }
    let parts: Vec<&str> = address.split("::").collect();
    if parts.len() != 4 {
        return Err(resource_err(
            address,
            format!("expected 4 '::'-separated segments, found {}", parts.len()),
        ));
    }

    let iface = parts[0];
    let board = match iface.get(..5) {
        Some(prefix) if prefix.eq_ignore_ascii_case("TCPIP") => {
            let digits = &iface[5..];
            if digits.is_empty() {
                0
            } else if digits.bytes().all(|b| b.is_ascii_digit()) && digits.len() <= 4 {
                digits.parse().map_err(|_| resource_err(iface, "bad board index"))?
            } else {
                return Err(resource_err(iface, "bad board index"));
            }
        }
        _ => return Err(resource_err(iface, "only TCPIP socket resources are supported")),
    };

    let host = parts[1];
    if host.is_empty() {
        return Err(resource_err(host, "empty host"));
    }
    if host.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(resource_err(host, "host contains whitespace"));
    }

    let port_str = parts[2];
    if port_str.is_empty() || port_str.len() > 10 || !port_str.bytes().all(|b| b.is_ascii_digit()) {
        return Err(resource_err(port_str, "port is not a decimal integer"));
    }
    let port: u64 = port_str
        .parse()
        .map_err(|_| resource_err(port_str, "port is not a decimal integer"))?;
    if !(1..=65535).contains(&port) {
        return Err(resource_err(port_str, "port out of range (1-65535)"));
    }

    if !parts[3].eq_ignore_ascii_case("SOCKET") {
        return Err(resource_err(parts[3], "expected SOCKET"));
    }

    Ok(ResourceAddress {
        transport: Transport::TcpSocket,
        board,
        host: host.to_string(),
        port: port as u16,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Command,
    Query,
    Response,
}

/// One framed message. Commands and queries carry exactly one trailing
/// newline; `raw` never contains an interior newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScpiMessage {
    raw: Vec<u8>,
    kind: MessageKind,
}

impl ScpiMessage {
    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    /// The message text without its terminator.
    pub fn body(&self) -> &str {
        let end = self.raw.len() - usize::from(self.raw.last() == Some(&TERMINATOR));
        // Constructors only accept valid UTF-8 for commands/queries.
        std::str::from_utf8(&self.raw[..end]).unwrap_or("")
    }

    /// First whitespace-delimited token, e.g. `:SENS:SWE:POIN`.
    pub fn header(&self) -> &str {
        self.body().split_whitespace().next().unwrap_or("")
    }

    /// Everything after the header, trimmed.
    pub fn arguments(&self) -> &str {
        let body = self.body().trim_start();
        match body.find(char::is_whitespace) {
            Some(i) => body[i..].trim(),
            None => "",
        }
    }

    pub fn is_query(&self) -> bool {
        self.kind == MessageKind::Query
    }

    /// Wrap a response payload (ASCII line or block) as received.
    pub fn response(raw: Vec<u8>) -> Self {
        ScpiMessage {
            raw,
            kind: MessageKind::Response,
        }
    }

    /// Parse one received line (with or without its terminator) into a
    /// command or query. Used on the instrument side.
    pub fn parse_line(line: &[u8]) -> Result<Self, ScpiError> {
        let line = line.strip_suffix(&[TERMINATOR]).unwrap_or(line);
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let body = std::str::from_utf8(line).map_err(|_| ScpiError::NotUtf8)?;
        frame_command(body)
    }
}

/// Frame a command or query body with a single trailing newline.
/// The message is a query iff its header token ends in `?`.
pub fn frame_command(body: &str) -> Result<ScpiMessage, ScpiError> {
    if let Some(pos) = body.bytes().position(|b| b == TERMINATOR) {
        return Err(ScpiError::EmbeddedNewline(pos));
    }
    let header = body.split_whitespace().next().ok_or(ScpiError::EmptyBody)?;
    let marks = header.matches('?').count();
    let kind = match marks {
        0 => MessageKind::Command,
        1 if header.ends_with('?') => MessageKind::Query,
        _ => {
            return Err(ScpiError::Header {
                header: header.to_string(),
                reason: "'?' must appear once, at the end of the header",
            })
        }
    };
    let mut raw = Vec::with_capacity(body.len() + 1);
    raw.extend_from_slice(body.as_bytes());
    raw.push(TERMINATOR);
    Ok(ScpiMessage { raw, kind })
}

/// A definite-length arbitrary block payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPayload {
    bytes: Vec<u8>,
}

impl BlockPayload {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn declared_length(&self) -> usize {
        self.bytes.len()
    }
}

/// Result of [`parse_block`]: the payload plus any bytes that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBlock<'a> {
    pub payload: BlockPayload,
    pub remainder: &'a [u8],
}

/// Parsed `#<d><len>` prefix: (header length in bytes, declared payload length).
pub(crate) fn parse_block_header(input: &[u8]) -> Result<(usize, usize), ScpiError> {
    match input.first() {
        None => return Err(ScpiError::BlockTruncatedHeader),
        Some(b'#') => {}
        Some(_) => return Err(ScpiError::BlockMissingHash),
    }
    let d = match input.get(1) {
        None => return Err(ScpiError::BlockTruncatedHeader),
        Some(b'0') => return Err(ScpiError::BlockIndefinite),
        Some(c @ b'1'..=b'9') => (c - b'0') as usize,
        Some(_) => return Err(ScpiError::BlockLengthDigits),
    };
    let digits = input.get(2..2 + d).ok_or(ScpiError::BlockTruncatedHeader)?;
    let mut len = 0usize;
    for &c in digits {
        if !c.is_ascii_digit() {
            return Err(ScpiError::BlockLengthDigits);
        }
        len = len * 10 + (c - b'0') as usize;
    }
    Ok((2 + d, len))
}

/// Parse `#<d><d length digits><payload>`; bytes after the payload are
/// returned as the remainder.
pub fn parse_block(input: &[u8]) -> Result<ParsedBlock<'_>, ScpiError> {
    let (header_len, len) = parse_block_header(input)?;
    let body = &input[header_len..];
    if body.len() < len {
        return Err(ScpiError::BlockTruncated {
            expected: len,
            got: body.len(),
        });
    }
    Ok(ParsedBlock {
        payload: BlockPayload {
            bytes: body[..len].to_vec(),
        },
        remainder: &body[len..],
    })
}

/// Inverse of [`parse_block`].
pub fn encode_block(bytes: &[u8]) -> Result<Vec<u8>, ScpiError> {
    if bytes.len() > MAX_BLOCK_LEN {
        return Err(ScpiError::BlockTooLarge(bytes.len()));
    }
    let len = bytes.len().to_string();
    let mut out = Vec::with_capacity(2 + len.len() + bytes.len());
    out.push(b'#');
    out.push(b'0' + len.len() as u8);
    out.extend_from_slice(len.as_bytes());
    out.extend_from_slice(bytes);
    Ok(out)
}

/// SCPI error-queue style response, e.g. `-113,"Undefined header"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentError {
    pub code: i32,
    pub message: String,
}

impl InstrumentError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        InstrumentError {
            code,
            message: message.into(),
        }
    }

    /// Recognise `-NNN,"text"` lines.
    pub fn parse(line: &str) -> Option<Self> {
        let line = line.trim();
        let (code, rest) = line.split_once(',')?;
        if !code.starts_with('-') || code.len() < 2 || !code[1..].bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let message = rest.strip_prefix('"')?.strip_suffix('"')?;
        Some(InstrumentError {
            code: code.parse().ok()?,
            message: message.to_string(),
        })
    }

    pub fn to_line(&self) -> String {
        format!("{},\"{}\"\n", self.code, self.message)
    }
}

impl fmt::Display for InstrumentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},\"{}\"", self.code, self.message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resource_examples() {
        let a = parse_resource("TCPIP0::192.168.1.5::5025::SOCKET").unwrap();
        assert_eq!(a.host, "192.168.1.5");
        assert_eq!(a.port, 5025);
        let b = parse_resource("tcpip0::localhost::5025::socket").unwrap();
        assert_eq!(b.host, "localhost");
        assert_eq!(b.port, 5025);
        assert_eq!(b.to_string(), "TCPIP0::localhost::5025::SOCKET");
    }

    #[test]
    fn resource_errors_name_segment() {
        match parse_resource("TCPIP0::x::99999::SOCKET") {
            Err(ScpiError::Resource { segment, reason }) => {
                assert_eq!(segment, "99999");
                assert!(reason.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_resource("TCPIP0::x::0::SOCKET").is_err());
        assert!(parse_resource("GPIB0::12::INSTR").is_err());
        assert!(parse_resource("TCPIP0::::5025::SOCKET").is_err());
        assert!(parse_resource("TCPIP0::h::5025::INSTR").is_err());
        assert!(parse_resource("").is_err());
    }

    #[test]
    fn framing_examples() {
        let q = frame_command("*IDN?").unwrap();
        assert_eq!(q.raw(), b"*IDN?\n");
        assert_eq!(q.kind(), MessageKind::Query);
        let c = frame_command(":SENS:SWE:POIN 101").unwrap();
        assert_eq!(c.raw(), b":SENS:SWE:POIN 101\n");
        assert_eq!(c.kind(), MessageKind::Command);
        assert_eq!(c.header(), ":SENS:SWE:POIN");
        assert_eq!(c.arguments(), "101");
        assert!(matches!(frame_command("a\nb"), Err(ScpiError::EmbeddedNewline(1))));
        assert!(frame_command("").is_err());
        assert!(frame_command("A?B").is_err());
        assert!(frame_command("A??").is_err());
        // '?' in arguments does not make a command a query
        assert_eq!(frame_command(":X a?").unwrap().kind(), MessageKind::Command);
    }

    #[test]
    fn block_examples() {
        let p = parse_block(b"#3006ABCDEF").unwrap();
        assert_eq!(p.payload.bytes(), b"ABCDEF");
        assert_eq!(p.payload.declared_length(), 6);
        assert!(p.remainder.is_empty());

        let e = parse_block(b"#10").unwrap();
        assert!(e.payload.bytes().is_empty());

        assert_eq!(
            parse_block(b"#3006ABC"),
            Err(ScpiError::BlockTruncated { expected: 6, got: 3 })
        );
        assert_eq!(parse_block(b"3006ABC"), Err(ScpiError::BlockMissingHash));
        assert_eq!(parse_block(b"#0ABC\n"), Err(ScpiError::BlockIndefinite));
        assert_eq!(parse_block(b"#2x1"), Err(ScpiError::BlockLengthDigits));
        assert_eq!(parse_block(b"#9"), Err(ScpiError::BlockTruncatedHeader));

        let r = parse_block(b"#14abcd\nrest").unwrap();
        assert_eq!(r.remainder, b"\nrest");
    }

    #[test]
    fn instrument_error_lines() {
        let e = InstrumentError::parse("-113,\"Undefined header\"").unwrap();
        assert_eq!(e.code, -113);
        assert_eq!(e.message, "Undefined header");
        assert_eq!(e.to_line(), "-113,\"Undefined header\"\n");
        assert!(InstrumentError::parse("101").is_none());
        assert!(InstrumentError::parse("-1.5,2").is_none());
    }

    proptest! {
        #[test]
        fn block_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let enc = encode_block(&bytes).unwrap();
            let parsed = parse_block(&enc).unwrap();
            prop_assert_eq!(parsed.payload.bytes(), &bytes[..]);
            prop_assert!(parsed.remainder.is_empty());
        }

        #[test]
        fn frame_recovers_body(body in "[ -~]{1,64}") {
            prop_assume!(!body.trim().is_empty());
            if let Ok(m) = frame_command(&body) {
                prop_assert_eq!(m.body(), body.as_str());
                prop_assert_eq!(m.raw().iter().filter(|&&b| b == TERMINATOR).count(), 1);
                prop_assert_eq!(*m.raw().last().unwrap(), TERMINATOR);
            }
        }

        #[test]
        fn parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = parse_block(&bytes);
            let _ = ScpiMessage::parse_line(&bytes);
            let _ = parse_resource(&String::from_utf8_lossy(&bytes));
        }
    }
}
