//! Remote denoiser over newline-delimited JSON.
//!
//! The server speaks first with a handshake line. Each request is one line,
//! answered by one line carrying the same `id`. Numeric arrays travel as
//! base64 of little-endian `f32`; values are rounded to `f32` on the wire.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use prss_core::detection::Signal;
use prss_core::diffusion::{ConditionEmbedding, Denoiser, EmbeddingRole, LatentState};

pub const PROTO: &str = "prss-denoiser";
pub const PROTO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemoteError {
    #[error("connect to {addr}: {message}")]
    Connect { addr: String, message: String },
    #[error("timed out waiting for the denoiser server")]
    Timeout,
    #[error("protocol version mismatch: server speaks {proto} v{version}, client needs {PROTO} v{PROTO_VERSION}")]
    VersionMismatch { proto: String, version: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("connection closed by server")]
    Closed,
    #[error("io: {0}")]
    Io(String),
    #[error("connection unusable after an earlier failure")]
    Poisoned,
}

impl RemoteError {
    fn from_io(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => Self::Timeout,
            _ => Self::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub proto: String,
    pub version: u32,
    pub dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Eps {
        id: u64,
        t: usize,
        x: String,
        e: Option<String>,
    },
    Encode {
        id: u64,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, RemoteError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| RemoteError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(RemoteError::Protocol(format!(
            "array payload of {} bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_f64(values: &[f64]) -> String {
    let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
    encode_f32(&v)
}

fn decode_f64(text: &str, expected: usize) -> Result<Vec<f64>, RemoteError> {
    let v = decode_f32(text)?;
    if v.len() != expected {
        return Err(RemoteError::Protocol(format!(
            "expected {expected} values, got {}",
            v.len()
        )));
    }
    Ok(v.into_iter().map(f64::from).collect())
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    poisoned: bool,
}

impl Conn {
    fn read_line(&mut self) -> Result<String, RemoteError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(RemoteError::from_io)?;
        if n == 0 {
            return Err(RemoteError::Closed);
        }
        Ok(line)
    }

    /// Sends one request and reads its reply. Any failure poisons the
    /// connection, since a late reply would desynchronise the stream.
    fn call(&mut self, req: &Request, id: u64) -> Result<Response, RemoteError> {
        if self.poisoned {
            return Err(RemoteError::Poisoned);
        }
        let result = (|| {
            let mut line = serde_json::to_string(req).map_err(|e| RemoteError::Protocol(e.to_string()))?;
            line.push('\n');
            self.writer.write_all(line.as_bytes()).map_err(RemoteError::from_io)?;
            let reply = self.read_line()?;
            let resp: Response =
                serde_json::from_str(&reply).map_err(|e| RemoteError::Protocol(format!("bad response: {e}")))?;
            if resp.id != id {
                return Err(RemoteError::Protocol(format!("response id {} for request {id}", resp.id)));
            }
            Ok(resp)
        })();
        if result.is_err() {
            self.poisoned = true;
        }
        let resp = result?;
        match &resp.error {
            Some(msg) => Err(RemoteError::Server(msg.clone())),
            None => Ok(resp),
        }
    }
}

/// A [`Denoiser`] backed by a server. Compute requests are never retried.
pub struct RemoteDenoiser {
    conn: Mutex<Conn>,
    dim: usize,
    embed_dim: usize,
    next_id: AtomicU64,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser")
            .field("dim", &self.dim)
            .field("embed_dim", &self.embed_dim)
            .finish_non_exhaustive()
    }
}

impl RemoteDenoiser {
    /// Connects and validates the handshake; `timeout` bounds connect, reads and writes.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, RemoteError> {
        let connect_err = |message: String| RemoteError::Connect {
            addr: addr.to_string(),
            message,
        };
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .next()
            .ok_or_else(|| connect_err("no address resolved".into()))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| match RemoteError::from_io(e) {
            RemoteError::Timeout => RemoteError::Timeout,
            other => connect_err(other.to_string()),
        })?;
        Self::from_stream(stream, timeout)
    }

    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, RemoteError> {
        let io = |e: std::io::Error| RemoteError::Io(e.to_string());
        stream.set_read_timeout(Some(timeout)).map_err(io)?;
        stream.set_write_timeout(Some(timeout)).map_err(io)?;
        stream.set_nodelay(true).map_err(io)?;
        let writer = stream.try_clone().map_err(io)?;
        let mut conn = Conn {
            reader: BufReader::new(stream),
            writer,
            poisoned: false,
        };
        let line = conn.read_line()?;
        let hs: Handshake =
            serde_json::from_str(&line).map_err(|e| RemoteError::Protocol(format!("bad handshake: {e}")))?;
        if hs.proto != PROTO || hs.version != PROTO_VERSION {
            return Err(RemoteError::VersionMismatch {
                proto: hs.proto,
                version: hs.version,
            });
        }
        Ok(Self {
            conn: Mutex::new(conn),
            dim: hs.dim,
            embed_dim: hs.embed_dim,
            next_id: AtomicU64::new(0),
        })
    }

    fn call(&self, build: impl FnOnce(u64) -> Request) -> Result<Response, RemoteError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = build(id);
        let mut conn = self.conn.lock().map_err(|_| RemoteError::Poisoned)?;
        conn.call(&req, id)
    }

    /// Noise prediction at timestep `t`; `e = None` is the null condition.
    pub fn eps(&self, t: usize, x: &[f64], e: Option<&[f64]>) -> Result<Vec<f64>, RemoteError> {
        let resp = self.call(|id| Request::Eps {
            id,
            t,
            x: encode_f64(x),
            e: e.map(encode_f64),
        })?;
        let eps = resp
            .eps
            .ok_or_else(|| RemoteError::Protocol("response lacks `eps`".into()))?;
        decode_f64(&eps, self.dim)
    }

    /// Text to condition embedding, for paraphrase providers.
    pub fn encode(&self, text: &str) -> Result<Vec<f64>, RemoteError> {
        let resp = self.call(|id| Request::Encode {
            id,
            text: text.to_string(),
        })?;
        let e = resp
            .e
            .ok_or_else(|| RemoteError::Protocol("response lacks `e`".into()))?;
        decode_f64(&e, self.embed_dim)
    }
}

impl Denoiser for RemoteDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn predict_noise(&self, x: &LatentState, e: &ConditionEmbedding) -> prss_core::Result<Vec<f64>> {
        let cond = (e.role() != EmbeddingRole::Null).then(|| e.vector());
        self.eps(x.t, &x.x, cond)
            .map_err(|err| prss_core::Error::Backend(err.to_string()))
    }

    fn grad_magnitude_wrt_embedding(
        &self,
        _x: &LatentState,
        _e: &ConditionEmbedding,
        _e_null: &ConditionEmbedding,
        _signal: &Signal,
    ) -> prss_core::Result<Vec<f64>> {
        Err(prss_core::Error::Unsupported("embedding gradients over the wire protocol"))
    }
}

/// What a server exposes.
pub trait DenoiserService: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn eps(&self, t: usize, x: Vec<f64>, e: Option<Vec<f64>>) -> Result<Vec<f64>, String>;
    fn encode(&self, _text: &str) -> Result<Vec<f64>, String> {
        Err("encode is not supported by this server".into())
    }
}

/// Serves any local [`Denoiser`].
pub struct LocalService<D>(pub D);

impl<D: Denoiser> DenoiserService for LocalService<D> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    fn eps(&self, t: usize, x: Vec<f64>, e: Option<Vec<f64>>) -> Result<Vec<f64>, String> {
        let x = LatentState::new(x, t).map_err(|e| e.to_string())?;
        let e = match e {
            Some(v) => ConditionEmbedding::user(v).map_err(|e| e.to_string())?,
            None => ConditionEmbedding::null(self.0.embed_dim()),
        };
        self.0.predict_noise(&x, &e).map_err(|e| e.to_string())
    }
}

fn handle_request(service: &dyn DenoiserService, line: &str) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|x| x.as_u64()))
                .unwrap_or(0);
            return Response {
                id,
                error: Some(format!("bad request: {e}")),
                ..Response::default()
            };
        }
    };
    let fail = |id, error: String| Response {
        id,
        error: Some(error),
        ..Response::default()
    };
    match req {
        Request::Eps { id, t, x, e } => {
            let decoded = decode_f64(&x, service.dim()).and_then(|x| {
                let e = e.map(|e| decode_f64(&e, service.embed_dim())).transpose()?;
                Ok((x, e))
            });
            match decoded.map_err(|e| e.to_string()).and_then(|(x, e)| service.eps(t, x, e)) {
                Ok(v) => Response {
                    id,
                    eps: Some(encode_f64(&v)),
                    ..Response::default()
                },
                Err(msg) => fail(id, msg),
            }
        }
        Request::Encode { id, text } => match service.encode(&text) {
            Ok(v) => Response {
                id,
                e: Some(encode_f64(&v)),
                ..Response::default()
            },
            Err(msg) => fail(id, msg),
        },
    }
}

/// Serves one connection until the client hangs up.
pub fn handle_connection(stream: TcpStream, service: &dyn DenoiserService) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let send = |w: &mut TcpStream, v: String| w.write_all(format!("{v}\n").as_bytes());
    let hs = Handshake {
        proto: PROTO.to_string(),
        version: PROTO_VERSION,
        dim: service.dim(),
        embed_dim: service.embed_dim(),
    };
    send(&mut writer, serde_json::to_string(&hs)?)?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_request(service, &line);
        send(&mut writer, serde_json::to_string(&resp)?)?;
    }
    Ok(())
}

/// Accepts connections forever, one thread each.
pub fn serve(listener: TcpListener, service: Arc<dyn DenoiserService>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let service = Arc::clone(&service);
        std::thread::spawn(move || {
            let _ = handle_connection(stream, service.as_ref());
        });
    }
    Ok(())
}
