//! Length-delimited publish frames.
//!
//! Every frame is a 4-byte big-endian body length followed by the body. The body
//! is a 2-byte big-endian topic length, the UTF-8 topic, then the raw payload:
//!
//! ```text
//! +-----------+-----------+-------------+-----------------+
//! | u32 len   | u16 tlen  | topic[tlen] | payload[len-2-tlen] |
//! +-----------+-----------+-------------+-----------------+
//! ```
//!
//! The same framing carries the service's replies.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

/// Upper bound on a frame body.
pub const MAX_FRAME_LEN: usize = 1 << 20;

/// A topic plus an opaque payload, as published by a device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            topic: topic.into(),
            payload: payload.into(),
        }
    }
}

pub fn encode_frame(msg: &WireMessage) -> io::Result<Vec<u8>> {
    let topic = msg.topic.as_bytes();
    if topic.len() > u16::MAX as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "topic too long"));
    }
    let body_len = 2 + topic.len() + msg.payload.len();
    if body_len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&(topic.len() as u16).to_be_bytes());
    out.extend_from_slice(topic);
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let body_len = u32::from_be_bytes(len) as usize;
    if !(2..=MAX_FRAME_LEN).contains(&body_len) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {body_len}"),
        ));
    }
    let mut body = vec![0u8; body_len];
    r.read_exact(&mut body)?;
    let topic_len = u16::from_be_bytes([body[0], body[1]]) as usize;
    if 2 + topic_len > body_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "topic length exceeds frame",
        ));
    }
    let topic = std::str::from_utf8(&body[2..2 + topic_len])
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "topic is not UTF-8"))?
        .to_string();
    let payload = body[2 + topic_len..].to_vec();
    Ok(Some(WireMessage { topic, payload }))
}
