//! CRNE framed binary protocol between the master and the controller.
//!
//! ```text
//! "CRNE" | ver u8 | type u8 | flags u16 | seq u32 | t_ns u64 | len u16 | payload | crc32
//! ```
//! Little-endian throughout; the CRC (IEEE, reflected) covers every byte
//! before it.

use crate::kinematics::DOF;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CRNE";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
pub const CRC_LEN: usize = 4;
/// FEEDBACK header flag: malformed frames were dropped since the last feedback.
pub const FLAG_MALFORMED_SEEN: u16 = 1;

pub const FEEDBACK_LEN: usize = 8 * DOF * 2 + 16 + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Setpoint = 0x01,
    Feedback = 0x02,
    Heartbeat = 0x03,
    Enable = 0x04,
    Disable = 0x05,
    Estop = 0x06,
    Ack = 0x07,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => MsgType::Setpoint,
            0x02 => MsgType::Feedback,
            0x03 => MsgType::Heartbeat,
            0x04 => MsgType::Enable,
            0x05 => MsgType::Disable,
            0x06 => MsgType::Estop,
            0x07 => MsgType::Ack,
            _ => return None,
        })
    }

    pub fn payload_len(self) -> usize {
        match self {
            MsgType::Setpoint => 8 * DOF,
            MsgType::Feedback => FEEDBACK_LEN,
            MsgType::Heartbeat | MsgType::Enable | MsgType::Disable => 0,
            MsgType::Estop => 1,
            MsgType::Ack => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub position: [f64; DOF],
    pub velocity: [f64; DOF],
    /// HOLD then DRIVE clutch temperature (degC).
    pub clutch_temps: [f64; 2],
    pub safety: u8,
    pub clutch_bits: u8,
    pub fault: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Setpoint([f64; DOF]),
    Feedback(Feedback),
    Heartbeat,
    Enable,
    /// Also clears a latched fault.
    Disable,
    Estop { pressed: bool },
    Ack { status: u8, acked_seq: u32 },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Setpoint(_) => MsgType::Setpoint,
            Message::Feedback(_) => MsgType::Feedback,
            Message::Heartbeat => MsgType::Heartbeat,
            Message::Enable => MsgType::Enable,
            Message::Disable => MsgType::Disable,
            Message::Estop { .. } => MsgType::Estop,
            Message::Ack { .. } => MsgType::Ack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub flags: u16,
    pub seq: u32,
    pub t_ns: u64,
    pub msg: Message,
}

impl Frame {
    pub fn new(seq: u32, t_ns: u64, msg: Message) -> Self {
        Self { flags: 0, seq, t_ns, msg }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("crc mismatch")]
    BadCrc,
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload length {got} does not match {expected} for its type")]
    BadLength { expected: usize, got: usize },
    #[error("invalid payload value")]
    BadPayload,
}

impl DecodeError {
    /// Stable numeric class, one per variant.
    pub fn code(&self) -> u8 {
        match self {
            DecodeError::Truncated { .. } => 1,
            DecodeError::BadMagic => 2,
            DecodeError::BadVersion(_) => 3,
            DecodeError::BadCrc => 4,
            DecodeError::UnknownType(_) => 5,
            DecodeError::BadLength { .. } => 6,
            DecodeError::BadPayload => 7,
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_payload(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::Setpoint(q) => put_f64s(out, q),
        Message::Feedback(f) => {
            put_f64s(out, &f.position);
            put_f64s(out, &f.velocity);
            put_f64s(out, &f.clutch_temps);
            out.extend_from_slice(&[f.safety, f.clutch_bits, f.fault]);
        }
        Message::Heartbeat | Message::Enable | Message::Disable => {}
        Message::Estop { pressed } => out.push(*pressed as u8),
        Message::Ack { status, acked_seq } => {
            out.push(*status);
            out.extend_from_slice(&acked_seq.to_le_bytes());
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let ty = frame.msg.msg_type();
    let len = ty.payload_len();
    let mut out = Vec::with_capacity(HEADER_LEN + len + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(ty as u8);
    out.extend_from_slice(&frame.flags.to_le_bytes());
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.t_ns.to_le_bytes());
    out.extend_from_slice(&(len as u16).to_le_bytes());
    encode_payload(&frame.msg, &mut out);
    debug_assert_eq!(out.len(), HEADER_LEN + len);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn f64s<const N: usize>(b: &[u8]) -> [f64; N] {
    std::array::from_fn(|i| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().expect("8 bytes")))
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"))
}

/// Decodes the frame at the start of `buf`, returning it and the number of
/// bytes consumed. `Truncated` means more input may complete the frame.
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), DecodeError> {
    let have = buf.len();
    let magic_len = have.min(4);
    if buf[..magic_len] != MAGIC[..magic_len] {
        return Err(DecodeError::BadMagic);
    }
    if have < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: HEADER_LEN, have });
    }
    if buf[4] != VERSION {
        return Err(DecodeError::BadVersion(buf[4]));
    }
    let len = u16_at(buf, 20) as usize;
    let total = HEADER_LEN + len + CRC_LEN;
    if have < total {
        return Err(DecodeError::Truncated { needed: total, have });
    }
    let crc = u32_at(buf, HEADER_LEN + len);
    if crc32fast::hash(&buf[..HEADER_LEN + len]) != crc {
        return Err(DecodeError::BadCrc);
    }
    let ty = MsgType::from_u8(buf[5]).ok_or(DecodeError::UnknownType(buf[5]))?;
    if len != ty.payload_len() {
        return Err(DecodeError::BadLength {
            expected: ty.payload_len(),
            got: len,
        });
    }
    let p = &buf[HEADER_LEN..HEADER_LEN + len];
    let msg = match ty {
        MsgType::Setpoint => Message::Setpoint(f64s::<DOF>(p)),
        MsgType::Feedback => Message::Feedback(Feedback {
            position: f64s::<DOF>(p),
            velocity: f64s::<DOF>(&p[8 * DOF..]),
            clutch_temps: f64s::<2>(&p[16 * DOF..]),
            safety: p[16 * DOF + 16],
            clutch_bits: p[16 * DOF + 17],
            fault: p[16 * DOF + 18],
        }),
        MsgType::Heartbeat => Message::Heartbeat,
        MsgType::Enable => Message::Enable,
        MsgType::Disable => Message::Disable,
        MsgType::Estop => match p[0] {
            0 => Message::Estop { pressed: false },
            1 => Message::Estop { pressed: true },
            _ => return Err(DecodeError::BadPayload),
        },
        MsgType::Ack => Message::Ack {
            status: p[0],
            acked_seq: u32_at(p, 1),
        },
    };
    Ok((
        Frame {
            flags: u16_at(buf, 6),
            seq: u32_at(buf, 8),
            t_ns: u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")),
            msg,
        },
        total,
    ))
}

/// Incremental decoder for a byte stream. Corrupt input is reported once
/// and skipped up to the next magic.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame or error; `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<Frame, DecodeError>> {
        if self.buf.is_empty() {
            return None;
        }
        match decode_frame(&self.buf) {
            Ok((f, n)) => {
                self.buf.drain(..n);
                Some(Ok(f))
            }
            Err(DecodeError::Truncated { .. }) => None,
            Err(e) => {
                let n = self.buf.len();
                let skip = self.buf[1..].windows(4).position(|w| w == MAGIC).map_or_else(
                    || {
                        // keep a tail that could still begin a frame
                        let keep = (1..4.min(n)).rev().find(|&k| self.buf[n - k..] == MAGIC[..k]).unwrap_or(0);
                        n - keep
                    },
                    |p| p + 1,
                );
                self.buf.drain(..skip);
                Some(Err(e))
            }
        }
    }
}

/// Splits a buffer holding back-to-back frames.
pub fn decode_all(bytes: &[u8]) -> Vec<Result<Frame, DecodeError>> {
    let mut d = StreamDecoder::default();
    d.push(bytes);
    let mut out = vec![];
    while let Some(r) = d.next_frame() {
        out.push(r);
    }
    if d.buffered() > 0 {
        out.push(Err(DecodeError::Truncated {
            needed: HEADER_LEN + CRC_LEN,
            have: d.buffered(),
        }));
    }
    out
}
