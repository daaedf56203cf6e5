//! `texture-stream.v1`: live rendering over a WebSocket.
//!
//! Binary frames carry vibration: u32 LE sequence number, u16 LE sample
//! count, then f32 LE samples. Each binary frame is followed by a `forces`
//! text message with the per-tick force frames for the same ticks. All other
//! messages are JSON text with a `type` field.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::HeaderMap;
use axum::response::{IntoResponse, Response};
use futures::stream::{SplitSink, SplitStream};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::error::ServiceError;
use crate::server::{ApiError, AppState};
use crate::session::{DeviceState, Session};

pub const SUBPROTOCOL: &str = "texture-stream.v1";
pub const TICKS_PER_FRAME: usize = 10;
/// Queued samples beyond this are dropped oldest first (0.5 s at 10 kHz).
pub const MAX_QUEUED_SAMPLES: usize = 5000;
pub const HEADER_LEN: usize = 6;

/// Close codes for protocol violations.
pub mod close {
    /// not JSON, unknown message type, or binary from the client
    pub const BAD_MESSAGE: u16 = 4400;
    pub const NOT_FOUND: u16 = 4404;
    /// state or stop before start, or a second start
    pub const OUT_OF_ORDER: u16 = 4409;
    /// values out of range
    pub const INVALID: u16 = 4422;
    pub const INTERNAL: u16 = 1011;
}

pub fn encode_frame(seq: u32, samples: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * samples.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u16).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Option<(u32, Vec<f32>)> {
    let seq = u32::from_le_bytes(bytes.get(0..4)?.try_into().ok()?);
    let n = u16::from_le_bytes(bytes.get(4..6)?.try_into().ok()?) as usize;
    let body = bytes.get(HEADER_LEN..)?;
    if body.len() != 4 * n {
        return None;
    }
    Some((seq, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartMessage {
    #[serde(default)]
    pub z: Option<Vec<f64>>,
    #[serde(default)]
    pub material: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// end the session after this long; open-ended when absent
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub state: Option<DeviceState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    #[serde(flatten)]
    pub state: DeviceState,
    /// apply at this session tick instead of on arrival
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Start(StartMessage),
    State(StateMessage),
    Stop,
}

impl ClientMessage {
    /// A message without `type` is a state update.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let serde_json::Value::Object(o) = &mut v {
            o.entry("type").or_insert_with(|| "state".into());
        }
        serde_json::from_value(v).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Ready { servo_rate: u32, signal_rate: u32, ticks_per_frame: usize, mu: f64, duration_ticks: Option<u64> },
    /// rows are [F_n, F_t, F_vib, F_tap] per tick, starting at `tick`
    Forces { seq: u32, tick: u64, frames: Vec<[f32; 4]> },
    Gap { dropped_samples: usize },
    End { ticks: u64, samples: u64 },
    Error { code: u16, message: String },
}

impl ServerMessage {
    fn text(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

pub enum Out {
    Frame { bin: Vec<u8>, forces: String, samples: usize },
    Text(String),
    Close(u16, String),
}

#[derive(Default)]
struct Queue {
    items: VecDeque<Out>,
    samples: usize,
}

/// Messages waiting for the socket writer. Never blocks the producer: when
/// more than [`MAX_QUEUED_SAMPLES`] are waiting, the oldest frames go and a
/// gap marker takes their place.
#[derive(Default)]
pub struct Outbox {
    queue: Mutex<Queue>,
    notify: Notify,
}

impl Outbox {
    fn lock(&self) -> std::sync::MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, item: Out) {
        let mut q = self.lock();
        if let Out::Frame { samples, .. } = &item {
            q.samples += samples;
        }
        q.items.push_back(item);
        let mut dropped = 0;
        let mut at = None;
        while q.samples > MAX_QUEUED_SAMPLES {
            let Some(i) = q.items.iter().position(|x| matches!(x, Out::Frame { .. })) else { break };
            if let Some(Out::Frame { samples, .. }) = q.items.remove(i) {
                q.samples -= samples;
                dropped += samples;
                at.get_or_insert(i);
            }
        }
        if let Some(i) = at {
            q.items.insert(i, Out::Text(ServerMessage::Gap { dropped_samples: dropped }.text()));
        }
        drop(q);
        self.notify.notify_one();
    }

    pub fn text(&self, m: &ServerMessage) {
        self.push(Out::Text(m.text()));
    }

    pub fn queued_samples(&self) -> usize {
        self.lock().samples
    }

    pub fn pop(&self) -> Option<Out> {
        let mut q = self.lock();
        let item = q.items.pop_front()?;
        if let Out::Frame { samples, .. } = &item {
            q.samples -= samples;
        }
        Some(item)
    }
}

async fn write_loop(mut sink: SplitSink<WebSocket, Message>, outbox: Arc<Outbox>) {
    loop {
        let Some(item) = outbox.pop() else {
            outbox.notify.notified().await;
            continue;
        };
        let sent = match item {
            Out::Frame { bin, forces, .. } => match sink.send(Message::Binary(bin.into())).await {
                Ok(()) => sink.send(Message::Text(forces.into())).await,
                Err(e) => Err(e),
            },
            Out::Text(t) => sink.send(Message::Text(t.into())).await,
            Out::Close(code, reason) => {
                let _ = sink.send(Message::Close(Some(CloseFrame { code, reason: reason.into() }))).await;
                return;
            }
        };
        if sent.is_err() {
            return;
        }
    }
}

pub async fn handler(ws: WebSocketUpgrade, headers: HeaderMap, State(state): State<Arc<AppState>>) -> Response {
    let offered = headers
        .get_all("sec-websocket-protocol")
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|p| p.trim() == SUBPROTOCOL);
    if !offered {
        return ApiError(ServiceError::Usage(format!("subprotocol {SUBPROTOCOL} required"))).into_response();
    }
    ws.protocols([SUBPROTOCOL]).on_upgrade(move |socket| run(socket, state))
}

struct Violation(u16, String);

impl From<ServiceError> for Violation {
    fn from(e: ServiceError) -> Self {
        let code = match e {
            ServiceError::Usage(_) => close::INVALID,
            ServiceError::NotFound(_) | ServiceError::EmbeddingNotFound(_) => close::NOT_FOUND,
            _ => close::INTERNAL,
        };
        Violation(code, e.to_string())
    }
}

async fn run(socket: WebSocket, state: Arc<AppState>) {
    let (sink, mut incoming) = socket.split();
    let outbox = Arc::new(Outbox::default());
    let writer = tokio::spawn(write_loop(sink, outbox.clone()));
    match drive(&mut incoming, &outbox, &state).await {
        Ok(()) => outbox.push(Out::Close(1000, "end".into())),
        Err(Violation(code, message)) => {
            // close reasons are capped at 123 bytes
            let reason: String = message.chars().take(100).collect();
            outbox.text(&ServerMessage::Error { code, message });
            outbox.push(Out::Close(code, reason));
        }
    }
    let _ = writer.await;
}

enum Incoming {
    Message(ClientMessage),
    Closed,
    Ignore,
}

fn read(msg: Option<Result<Message, axum::Error>>) -> Result<Incoming, Violation> {
    match msg {
        None | Some(Err(_)) | Some(Ok(Message::Close(_))) => Ok(Incoming::Closed),
        Some(Ok(Message::Text(t))) => ClientMessage::parse(t.as_str()).map(Incoming::Message).map_err(|e| Violation(close::BAD_MESSAGE, e)),
        Some(Ok(Message::Binary(_))) => Err(Violation(close::BAD_MESSAGE, "binary messages are server to client only".into())),
        Some(Ok(_)) => Ok(Incoming::Ignore),
    }
}

async fn drive(incoming: &mut SplitStream<WebSocket>, outbox: &Outbox, app: &AppState) -> Result<(), Violation> {
    let start = loop {
        match read(incoming.next().await)? {
            Incoming::Closed => return Ok(()),
            Incoming::Ignore => {}
            Incoming::Message(ClientMessage::Start(s)) => break s,
            Incoming::Message(_) => return Err(Violation(close::OUT_OF_ORDER, "send start first".into())),
        }
    };
    let texture = app.texture(start.z.as_deref(), start.material.as_deref())?;
    let mut session = Session::new(texture.render_model()?, app.render, start.seed)?;
    if let Some(s) = &start.state {
        s.validate()?;
        session.apply(s);
    }
    let rate = session.config().servo_rate;
    let end = match start.duration_s {
        Some(d) if d.is_finite() && d >= 0.0 => Some((d * rate as f64).round() as u64),
        Some(d) => return Err(Violation(close::INVALID, format!("duration_s must be finite and >= 0, got {d}"))),
        None => None,
    };
    outbox.text(&ServerMessage::Ready {
        servo_rate: rate,
        signal_rate: session.config().signal_rate,
        ticks_per_frame: TICKS_PER_FRAME,
        mu: texture.mu,
        duration_ticks: end,
    });

    let mut pending: Vec<(u64, DeviceState)> = Vec::new();
    let mut seq = 0u32;
    let mut samples = Vec::with_capacity(TICKS_PER_FRAME * session.config().samples_per_tick());
    let mut forces = Vec::with_capacity(TICKS_PER_FRAME);
    let mut produced = 0u64;
    let clock = Instant::now();
    let mut pace = tokio::time::interval(Duration::from_millis(5));
    pace.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = pace.tick() => {
                let due = (clock.elapsed().as_secs_f64() * rate as f64) as u64;
                let due = end.map_or(due, |e| due.min(e));
                loop {
                    let t = session.tick();
                    let full = t + TICKS_PER_FRAME as u64 <= due;
                    let tail = end == Some(due) && t < due;
                    if !(full || tail) {
                        break;
                    }
                    let n = (due - t).min(TICKS_PER_FRAME as u64);
                    samples.clear();
                    forces.clear();
                    for _ in 0..n {
                        let now = session.tick();
                        // pending is sorted by tick and arrival
                        let ready = pending.iter().take_while(|p| p.0 <= now).count();
                        for (_, s) in pending.drain(..ready) {
                            session.apply(&s);
                        }
                        let f = session.step();
                        samples.extend(session.vibration().iter().map(|&v| v as f32));
                        forces.push([f.f_n, f.f_t, f.f_vib, f.f_tap].map(|x| x as f32));
                    }
                    produced += samples.len() as u64;
                    outbox.push(Out::Frame {
                        bin: encode_frame(seq, &samples),
                        forces: ServerMessage::Forces { seq, tick: t, frames: forces.clone() }.text(),
                        samples: samples.len(),
                    });
                    seq = seq.wrapping_add(1);
                }
                if end.is_some_and(|e| session.tick() >= e) {
                    outbox.text(&ServerMessage::End { ticks: session.tick(), samples: produced });
                    return Ok(());
                }
            }
            msg = incoming.next() => match read(msg)? {
                Incoming::Closed => return Ok(()),
                Incoming::Ignore => {}
                Incoming::Message(ClientMessage::State(m)) => {
                    m.state.validate()?;
                    let at = m.at_tick.unwrap_or(0).max(session.tick());
                    let i = pending.partition_point(|p| p.0 <= at);
                    pending.insert(i, (at, m.state));
                }
                Incoming::Message(ClientMessage::Stop) => {
                    outbox.text(&ServerMessage::End { ticks: session.tick(), samples: produced });
                    return Ok(());
                }
                Incoming::Message(ClientMessage::Start(_)) => {
                    return Err(Violation(close::OUT_OF_ORDER, "session already started".into()));
                }
            },
        }
    }
}
