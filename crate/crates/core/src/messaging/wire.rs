//! Socket framing: a 4-byte big-endian length prefix followed by a UTF-8 JSON
//! object `{"topic","msgType","msgId","sentAt","sender","payloadB64"}`.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::envelope::{Envelope, NodeId};
use crate::error::{Error, Result};

/// Frames larger than this are rejected as malformed.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct WireEnvelope {
    topic: String,
    msg_type: String,
    msg_id: u64,
    sent_at: u64,
    sender: String,
    #[serde(rename = "payloadB64")]
    payload_b64: String,
}

pub fn to_json(env: &Envelope) -> String {
    let w = WireEnvelope {
        topic: env.topic.clone(),
        msg_type: env.msg_type.clone(),
        msg_id: env.msg_id,
        sent_at: env.sent_at,
        sender: env.sender.fqn(),
        payload_b64: B64.encode(&env.payload),
    };
    serde_json::to_string(&w).expect("wire envelope serializes")
}

pub fn from_json(text: &str) -> Result<Envelope> {
    let w: WireEnvelope =
        serde_json::from_str(text).map_err(|e| Error::Frame(e.to_string()))?;
    let payload = B64
        .decode(w.payload_b64.as_bytes())
        .map_err(|e| Error::Frame(format!("payloadB64: {e}")))?;
    Ok(Envelope {
        topic: w.topic,
        msg_type: w.msg_type,
        payload: Bytes::from(payload),
        msg_id: w.msg_id,
        sent_at: w.sent_at,
        sender: NodeId::parse_fqn(&w.sender)?,
    })
}

pub fn encode_frame(env: &Envelope) -> Vec<u8> {
    let body = to_json(env).into_bytes();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame from the front of `buf`. Returns the envelope and the
/// number of bytes consumed, or `None` when `buf` holds an incomplete frame.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Envelope, usize)>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Frame(format!("frame length {len} exceeds limit")));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let text = std::str::from_utf8(&buf[4..4 + len])
        .map_err(|e| Error::Frame(format!("not UTF-8: {e}")))?;
    Ok(Some((from_json(text)?, 4 + len)))
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<()> {
    w.write_all(&encode_frame(env))?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one frame. `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Frame(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let text =
        std::str::from_utf8(&body).map_err(|e| Error::Frame(format!("not UTF-8: {e}")))?;
    from_json(text).map(Some)
}
