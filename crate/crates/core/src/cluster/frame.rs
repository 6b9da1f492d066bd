//! Length-prefixed frames: `u32 LE payload length`, `u8 opcode`, payload.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Largest accepted payload.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Register = 0x01,
    RegisterAck = 0x02,
    Task = 0x03,
    TaskResult = 0x04,
    BlockGet = 0x05,
    BlockData = 0x06,
    Broadcast = 0x07,
    Heartbeat = 0x08,
    Shutdown = 0x09,
    Error = 0x0A,
}

impl Opcode {
    pub const ALL: [Opcode; 10] = [
        Opcode::Register,
        Opcode::RegisterAck,
        Opcode::Task,
        Opcode::TaskResult,
        Opcode::BlockGet,
        Opcode::BlockData,
        Opcode::Broadcast,
        Opcode::Heartbeat,
        Opcode::Shutdown,
        Opcode::Error,
    ];
}

impl TryFrom<u8> for Opcode {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Opcode::ALL
            .into_iter()
            .find(|op| *op as u8 == b)
            .ok_or_else(|| Error::Protocol(format!("unknown opcode 0x{b:02x}")))
    }
}

/// A decoded frame. The opcode is kept raw so that callers can answer an
/// unknown opcode with an ERROR frame instead of dropping the connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: Opcode, payload: Vec<u8>) -> Self {
        Frame {
            opcode: op as u8,
            payload,
        }
    }

    pub fn op(&self) -> Result<Opcode> {
        Opcode::try_from(self.opcode)
    }
}

pub fn encode_frame(op: Opcode, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Framing(format!(
            "payload of {} bytes exceeds the frame cap",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(op as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decode one frame from the front of `bytes`; returns it and the bytes used.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    if bytes.len() < 5 {
        return Err(Error::Framing("frame header truncated".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Framing(format!("frame length {len} exceeds the cap")));
    }
    if bytes.len() < 5 + len {
        return Err(Error::Framing(format!(
            "frame needs {len} payload bytes, {} present",
            bytes.len() - 5
        )));
    }
    Ok((
        Frame {
            opcode: bytes[4],
            payload: bytes[5..5 + len].to_vec(),
        },
        5 + len,
    ))
}

pub fn write_frame(w: &mut impl Write, op: Opcode, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Framing(format!(
            "payload of {} bytes exceeds the frame cap",
            payload.len()
        )));
    }
    let mut header = [0u8; 5];
    header[..4].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    header[4] = op as u8;
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read one frame. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Framing("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Framing(format!("frame length {len} exceeds the cap")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Framing("stream ended inside a frame payload".into())
        } else {
            e.into()
        }
    })?;
    Ok(Some(Frame {
        opcode: header[4],
        payload,
    }))
}
