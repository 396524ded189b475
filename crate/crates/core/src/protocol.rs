//! Messages exchanged between controller, workers and clients, and their
//! wire encoding.
//!
//! Every frame is `len: u32 LE | tag: u8 | payload[len]`, where `len` counts
//! payload bytes only. Payload fields are fixed-width little-endian integers
//! in the order listed below, with no padding. Timestamps and durations are
//! `i64` nanoseconds.
//!
//! | tag | message          | payload |
//! |-----|------------------|---------|
//! | 1   | Handshake        | worker_id u32, gpu_count u32, pages_total u32, n u32, model_id u32 × n |
//! | 2   | Action           | action_id u64, kind u8, gpu u32, model_id u32, earliest i64, latest i64, then by kind (below) |
//! | 3   | ActionResult     | action_id u64, status u8, start i64, end i64, device_duration i64 |
//! | 4   | InferenceRequest | request_id u64, model_id u32, slo i64, arrival i64, input_size u64, n u32, payload u8 × n |
//! | 5   | InferenceResponse| request_id u64, status u8, latency i64, cold_start u8 |
//!
//! Action kinds: 1 Load (+ expected_duration i64), 2 Unload (nothing more),
//! 3 Infer (+ expected_duration i64, batch_size u32, n u32, request_id u64 × n).
//!
//! Result status: 0 Success, 1 RejectedTooLate, 2 OutOfPages,
//! 3 ModelNotLoaded, 4 MalformedAction. Response status: 0 Ok, 1 Denied,
//! 2 Timeout.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::ModelId;
use crate::time::{Nanos, TimePoint};

pub type ActionId = u64;
pub type RequestId = u64;
pub type WorkerId = u32;
pub type GpuId = u32;

/// Upper bound on a single frame's payload; guards against garbage lengths.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

const TAG_HANDSHAKE: u8 = 1;
const TAG_ACTION: u8 = 2;
const TAG_RESULT: u8 = 3;
const TAG_REQUEST: u8 = 4;
const TAG_RESPONSE: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Load = 1,
    Unload = 2,
    Infer = 3,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Load => "load",
            ActionKind::Unload => "unload",
            ActionKind::Infer => "infer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub action_id: ActionId,
    pub kind: ActionKind,
    pub gpu: GpuId,
    pub model_id: ModelId,
    pub earliest: TimePoint,
    pub latest: TimePoint,
    /// The controller's prediction; telemetry only.
    pub expected_duration: Nanos,
    pub batch_size: u32,
    pub batch: Vec<RequestId>,
}

impl Action {
    pub fn load(id: ActionId, gpu: GpuId, model: ModelId, window: (TimePoint, TimePoint), expected: Nanos) -> Self {
        Action {
            action_id: id,
            kind: ActionKind::Load,
            gpu,
            model_id: model,
            earliest: window.0,
            latest: window.1,
            expected_duration: expected,
            batch_size: 0,
            batch: Vec::new(),
        }
    }

    pub fn unload(id: ActionId, gpu: GpuId, model: ModelId, window: (TimePoint, TimePoint)) -> Self {
        Action {
            action_id: id,
            kind: ActionKind::Unload,
            gpu,
            model_id: model,
            earliest: window.0,
            latest: window.1,
            expected_duration: Nanos::ZERO,
            batch_size: 0,
            batch: Vec::new(),
        }
    }

    pub fn infer(
        id: ActionId,
        gpu: GpuId,
        model: ModelId,
        window: (TimePoint, TimePoint),
        expected: Nanos,
        batch: Vec<RequestId>,
    ) -> Self {
        Action {
            action_id: id,
            kind: ActionKind::Infer,
            gpu,
            model_id: model,
            earliest: window.0,
            latest: window.1,
            expected_duration: expected,
            batch_size: batch.len() as u32,
            batch,
        }
    }

    pub fn check(&self) -> Result<(), DecodeError> {
        if self.earliest > self.latest {
            return Err(DecodeError::Invalid("action earliest after latest"));
        }
        match self.kind {
            ActionKind::Infer => {
                if self.batch_size == 0 || self.batch_size as usize != self.batch.len() {
                    return Err(DecodeError::Invalid("infer batch_size does not match batch"));
                }
            }
            ActionKind::Load | ActionKind::Unload => {
                if self.batch_size != 0 || !self.batch.is_empty() {
                    return Err(DecodeError::Invalid("load/unload carries a batch"));
                }
                if self.kind == ActionKind::Unload && self.expected_duration != Nanos::ZERO {
                    return Err(DecodeError::Invalid("unload carries an expected duration"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Success = 0,
    RejectedTooLate = 1,
    OutOfPages = 2,
    ModelNotLoaded = 3,
    MalformedAction = 4,
}

impl ActionStatus {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ActionStatus::Success,
            1 => ActionStatus::RejectedTooLate,
            2 => ActionStatus::OutOfPages,
            3 => ActionStatus::ModelNotLoaded,
            4 => ActionStatus::MalformedAction,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionStatus::Success => "success",
            ActionStatus::RejectedTooLate => "rejected_too_late",
            ActionStatus::OutOfPages => "out_of_pages",
            ActionStatus::ModelNotLoaded => "model_not_loaded",
            ActionStatus::MalformedAction => "malformed_action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionResult {
    pub action_id: ActionId,
    pub status: ActionStatus,
    pub start: TimePoint,
    pub end: TimePoint,
    pub device_duration: Nanos,
}

impl ActionResult {
    /// A failure decided at `at`.
    pub fn failed(action_id: ActionId, status: ActionStatus, at: TimePoint) -> Self {
        ActionResult {
            action_id,
            status,
            start: at,
            end: at,
            device_duration: Nanos::ZERO,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == ActionStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceRequest {
    pub request_id: RequestId,
    pub model_id: ModelId,
    pub slo: Nanos,
    pub arrival: TimePoint,
    pub input_size: u64,
    /// Opaque input bytes; empty unless a client opts in.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok = 0,
    Denied = 1,
    Timeout = 2,
}

impl ResponseStatus {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ResponseStatus::Ok,
            1 => ResponseStatus::Denied,
            2 => ResponseStatus::Timeout,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseStatus::Ok => "ok",
            ResponseStatus::Denied => "denied",
            ResponseStatus::Timeout => "timeout",
        }
    }
}

impl std::str::FromStr for ResponseStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ok" => Ok(ResponseStatus::Ok),
            "denied" => Ok(ResponseStatus::Denied),
            "timeout" => Ok(ResponseStatus::Timeout),
            other => Err(format!("unknown response status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceResponse {
    pub request_id: RequestId,
    pub status: ResponseStatus,
    pub latency: Nanos,
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerHandshake {
    pub worker_id: WorkerId,
    pub gpu_count: u32,
    pub pages_total: u32,
    pub models: Vec<ModelId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Handshake(WorkerHandshake),
    Action(Action),
    Result(ActionResult),
    Request(InferenceRequest),
    Response(InferenceResponse),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
    #[error("invalid message: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut e = Enc(Vec::with_capacity(64));
    e.0.extend_from_slice(&[0; 5]);
    let tag = match msg {
        Message::Handshake(h) => {
            e.u32(h.worker_id);
            e.u32(h.gpu_count);
            e.u32(h.pages_total);
            e.u32(h.models.len() as u32);
            for &m in &h.models {
                e.u32(m);
            }
            TAG_HANDSHAKE
        }
        Message::Action(a) => {
            e.u64(a.action_id);
            e.u8(a.kind as u8);
            e.u32(a.gpu);
            e.u32(a.model_id);
            e.i64(a.earliest.0);
            e.i64(a.latest.0);
            match a.kind {
                ActionKind::Unload => {}
                ActionKind::Load => e.i64(a.expected_duration.0),
                ActionKind::Infer => {
                    e.i64(a.expected_duration.0);
                    e.u32(a.batch_size);
                    e.u32(a.batch.len() as u32);
                    for &r in &a.batch {
                        e.u64(r);
                    }
                }
            }
            TAG_ACTION
        }
        Message::Result(r) => {
            e.u64(r.action_id);
            e.u8(r.status as u8);
            e.i64(r.start.0);
            e.i64(r.end.0);
            e.i64(r.device_duration.0);
            TAG_RESULT
        }
        Message::Request(r) => {
            e.u64(r.request_id);
            e.u32(r.model_id);
            e.i64(r.slo.0);
            e.i64(r.arrival.0);
            e.u64(r.input_size);
            e.u32(r.payload.len() as u32);
            e.0.extend_from_slice(&r.payload);
            TAG_REQUEST
        }
        Message::Response(r) => {
            e.u64(r.request_id);
            e.u8(r.status as u8);
            e.i64(r.latency.0);
            e.u8(r.cold_start as u8);
            TAG_RESPONSE
        }
    };
    let len = (e.0.len() - 5) as u32;
    e.0[..4].copy_from_slice(&len.to_le_bytes());
    e.0[4] = tag;
    e.0
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(DecodeError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Reads a count whose elements are `width` bytes each, refusing counts
    /// that could not fit in the remaining payload.
    fn count(&mut self, width: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        let available = self.buf.len() - self.pos;
        if n.saturating_mul(width) > available {
            return Err(DecodeError::Truncated {
                needed: n * width,
                available,
            });
        }
        Ok(n)
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < 5 {
        return Err(DecodeError::Truncated {
            needed: 5,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let tag = bytes[4];
    let body = &bytes[5..];
    if body.len() < len {
        return Err(DecodeError::Truncated {
            needed: len,
            available: body.len(),
        });
    }
    if body.len() > len {
        return Err(DecodeError::TrailingBytes(body.len() - len));
    }
    decode_payload(tag, body)
}

fn decode_payload(tag: u8, body: &[u8]) -> Result<Message, DecodeError> {
    let mut d = Dec { buf: body, pos: 0 };
    let msg = match tag {
        TAG_HANDSHAKE => {
            let worker_id = d.u32()?;
            let gpu_count = d.u32()?;
            let pages_total = d.u32()?;
            let n = d.count(4)?;
            let models = (0..n).map(|_| d.u32()).collect::<Result<_, _>>()?;
            if pages_total == 0 {
                return Err(DecodeError::Invalid("handshake with zero pages"));
            }
            Message::Handshake(WorkerHandshake {
                worker_id,
                gpu_count,
                pages_total,
                models,
            })
        }
        TAG_ACTION => {
            let action_id = d.u64()?;
            let kind = match d.u8()? {
                1 => ActionKind::Load,
                2 => ActionKind::Unload,
                3 => ActionKind::Infer,
                _ => return Err(DecodeError::Invalid("unknown action kind")),
            };
            let gpu = d.u32()?;
            let model_id = d.u32()?;
            let earliest = TimePoint(d.i64()?);
            let latest = TimePoint(d.i64()?);
            let mut a = Action {
                action_id,
                kind,
                gpu,
                model_id,
                earliest,
                latest,
                expected_duration: Nanos::ZERO,
                batch_size: 0,
                batch: Vec::new(),
            };
            match kind {
                ActionKind::Unload => {}
                ActionKind::Load => a.expected_duration = Nanos(d.i64()?),
                ActionKind::Infer => {
                    a.expected_duration = Nanos(d.i64()?);
                    a.batch_size = d.u32()?;
                    let n = d.count(8)?;
                    a.batch = (0..n).map(|_| d.u64()).collect::<Result<_, _>>()?;
                }
            }
            a.check()?;
            Message::Action(a)
        }
        TAG_RESULT => {
            let action_id = d.u64()?;
            let status =
                ActionStatus::from_u8(d.u8()?).ok_or(DecodeError::Invalid("unknown result status"))?;
            let r = ActionResult {
                action_id,
                status,
                start: TimePoint(d.i64()?),
                end: TimePoint(d.i64()?),
                device_duration: Nanos(d.i64()?),
            };
            if r.end < r.start {
                return Err(DecodeError::Invalid("result ends before it starts"));
            }
            if !r.is_success() && r.device_duration != Nanos::ZERO {
                return Err(DecodeError::Invalid("failed result with device time"));
            }
            Message::Result(r)
        }
        TAG_REQUEST => {
            let request_id = d.u64()?;
            let model_id = d.u32()?;
            let slo = Nanos(d.i64()?);
            let arrival = TimePoint(d.i64()?);
            let input_size = d.u64()?;
            let n = d.count(1)?;
            let payload = d.take(n)?.to_vec();
            Message::Request(InferenceRequest {
                request_id,
                model_id,
                slo,
                arrival,
                input_size,
                payload,
            })
        }
        TAG_RESPONSE => {
            let request_id = d.u64()?;
            let status = ResponseStatus::from_u8(d.u8()?)
                .ok_or(DecodeError::Invalid("unknown response status"))?;
            let latency = Nanos(d.i64()?);
            let cold_start = match d.u8()? {
                0 => false,
                1 => true,
                _ => return Err(DecodeError::Invalid("cold_start flag not 0 or 1")),
            };
            Message::Response(InferenceResponse {
                request_id,
                status,
                latency,
                cold_start,
            })
        }
        other => return Err(DecodeError::UnknownTag(other)),
    };
    if d.pos != body.len() {
        return Err(DecodeError::TrailingBytes(body.len() - d.pos));
    }
    Ok(msg)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode_message(msg))
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(DecodeError::TooLarge(len).into());
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(decode_payload(header[4], &body)?))
}
