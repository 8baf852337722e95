//! Line-delimited JSON RPC over TCP.
//!
//! Every message is the canonical JSON encoding of a request or response
//! followed by a single LF. A connection carries one request at a time;
//! callers that want parallelism open more connections.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::domain::canonical_value_bytes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RpcErrorCode {
    Malformed = 1,
    UnknownMethod = 2,
    InvalidParams = 3,
    ApplicationError = 4,
    Timeout = 5,
}

impl RpcErrorCode {
    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            1 => RpcErrorCode::Malformed,
            2 => RpcErrorCode::UnknownMethod,
            3 => RpcErrorCode::InvalidParams,
            4 => RpcErrorCode::ApplicationError,
            5 => RpcErrorCode::Timeout,
            _ => return None,
        })
    }

    pub fn code(self) -> i64 {
        self as i64
    }
}

/// Error half of a response, and the error type of [`rpc_call`].
///
/// Application errors carry `"<kind>: <detail>"` messages; see
/// [`RpcError::app_kind`].
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("rpc error {}: {message}", code.code())]
pub struct RpcError {
    pub code: RpcErrorCode,
    pub message: String,
}

impl RpcError {
    pub fn new(code: RpcErrorCode, message: impl Into<String>) -> Self {
        RpcError {
            code,
            message: message.into(),
        }
    }

    pub fn timeout(message: impl Into<String>) -> Self {
        RpcError::new(RpcErrorCode::Timeout, message)
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        RpcError::new(RpcErrorCode::Malformed, message)
    }

    /// Machine-readable kind of an application error, if this is one.
    pub fn app_kind(&self) -> Option<&str> {
        if self.code != RpcErrorCode::ApplicationError {
            return None;
        }
        Some(self.message.split_once(':').map_or(&*self.message, |(k, _)| k))
    }

    fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("code".into(), Value::from(self.code.code()));
        obj.insert("message".into(), Value::from(self.message.clone()));
        Value::Object(obj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcRequest {
    pub id: String,
    pub method: String,
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcResponse {
    pub id: String,
    pub outcome: Result<Value, RpcError>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Request(RpcRequest),
    Response(RpcResponse),
}

impl From<RpcRequest> for Message {
    fn from(r: RpcRequest) -> Self {
        Message::Request(r)
    }
}

impl From<RpcResponse> for Message {
    fn from(r: RpcResponse) -> Self {
        Message::Response(r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("malformed message: {0}")]
pub struct FramingError(pub String);

impl FramingError {
    pub fn code(&self) -> RpcErrorCode {
        RpcErrorCode::Malformed
    }
}

impl From<FramingError> for RpcError {
    fn from(e: FramingError) -> Self {
        RpcError::malformed(e.0)
    }
}

pub fn is_method_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_' || b == b'.')
}

/// One LF-terminated line of canonical JSON. JSON string escaping
/// guarantees the payload itself never contains CR or LF.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut obj = Map::new();
    match msg {
        Message::Request(req) => {
            obj.insert("id".into(), Value::from(req.id.clone()));
            obj.insert("method".into(), Value::from(req.method.clone()));
            obj.insert("params".into(), Value::Object(req.params.clone()));
        }
        Message::Response(resp) => {
            obj.insert("id".into(), Value::from(resp.id.clone()));
            match &resp.outcome {
                Ok(v) => obj.insert("result".into(), v.clone()),
                Err(e) => obj.insert("error".into(), e.to_value()),
            };
        }
    }
    let mut bytes = canonical_value_bytes(&Value::Object(obj));
    bytes.push(b'\n');
    bytes
}

/// Decodes one line (without its LF). Total: never panics on any input.
pub fn decode_message(line: &[u8]) -> Result<Message, FramingError> {
    let value: Value =
        serde_json::from_slice(line).map_err(|e| FramingError(format!("not JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(FramingError("not a JSON object".into()));
    };
    let id = match obj.remove("id") {
        Some(Value::String(id)) => id,
        Some(_) => return Err(FramingError("id must be a string".into())),
        None => return Err(FramingError("missing id".into())),
    };
    if obj.contains_key("method") {
        let method = match obj.remove("method") {
            Some(Value::String(m)) if is_method_name(&m) => m,
            _ => return Err(FramingError("method must match [a-z_.]+".into())),
        };
        if id.is_empty() {
            return Err(FramingError("request id must not be empty".into()));
        }
        let params = match obj.remove("params") {
            Some(Value::Object(p)) => p,
            _ => return Err(FramingError("params must be an object".into())),
        };
        if !obj.is_empty() {
            return Err(FramingError("unexpected request fields".into()));
        }
        return Ok(Message::Request(RpcRequest { id, method, params }));
    }
    let result = obj.remove("result");
    let error = obj.remove("error");
    if !obj.is_empty() {
        return Err(FramingError("unexpected response fields".into()));
    }
    let outcome = match (result, error) {
        (Some(_), Some(_)) => return Err(FramingError("both result and error".into())),
        (None, None) => return Err(FramingError("neither request nor response".into())),
        (Some(v), None) => Ok(v),
        (None, Some(e)) => Err(decode_error_object(e)?),
    };
    Ok(Message::Response(RpcResponse { id, outcome }))
}

fn decode_error_object(v: Value) -> Result<RpcError, FramingError> {
    let Value::Object(mut e) = v else {
        return Err(FramingError("error must be an object".into()));
    };
    let code = e
        .remove("code")
        .and_then(|c| c.as_i64())
        .and_then(RpcErrorCode::from_code)
        .ok_or_else(|| FramingError("unknown error code".into()))?;
    let message = match e.remove("message") {
        Some(Value::String(m)) => m,
        _ => return Err(FramingError("error message must be a string".into())),
    };
    if !e.is_empty() {
        return Err(FramingError("unexpected error fields".into()));
    }
    Ok(RpcError { code, message })
}

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

/// Sends one request on a fresh connection and waits for its response.
///
/// Anything that prevents a response from arriving in time, including a
/// refused connection, is reported as `TIMEOUT`.
pub fn rpc_call(
    address: &str,
    method: &str,
    params: Value,
    timeout: Duration,
) -> Result<Value, RpcError> {
    let params = match params {
        Value::Object(p) => p,
        Value::Null => Map::new(),
        _ => return Err(RpcError::new(RpcErrorCode::InvalidParams, "params must be an object")),
    };
    let deadline = Instant::now() + timeout;
    let id = NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed).to_string();
    let request = Message::Request(RpcRequest {
        id: id.clone(),
        method: method.to_owned(),
        params,
    });

    let mut stream = connect(address, deadline)?;
    stream
        .set_write_timeout(Some(remaining(deadline)?))
        .map_err(io_timeout)?;
    stream.write_all(&encode_message(&request)).map_err(io_timeout)?;

    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        reader
            .get_ref()
            .set_read_timeout(Some(remaining(deadline)?))
            .map_err(io_timeout)?;
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => return Err(RpcError::timeout("connection closed before response")),
            Ok(_) if line.ends_with(b"\n") => break,
            Ok(_) => continue,
            Err(e) if retryable(&e) => continue,
            Err(e) => return Err(io_timeout(e)),
        }
    }
    line.pop();
    match decode_message(&line)? {
        Message::Response(resp) if resp.id == id => resp.outcome,
        Message::Response(resp) if resp.id.is_empty() => resp.outcome,
        Message::Response(_) => Err(RpcError::malformed("response id mismatch")),
        Message::Request(_) => Err(RpcError::malformed("expected a response")),
    }
}

/// Typed wrapper around [`rpc_call`].
pub fn call<P: Serialize, R: DeserializeOwned>(
    address: &str,
    method: &str,
    params: &P,
    timeout: Duration,
) -> Result<R, RpcError> {
    let params = serde_json::to_value(params)
        .map_err(|e| RpcError::new(RpcErrorCode::InvalidParams, e.to_string()))?;
    let result = rpc_call(address, method, params, timeout)?;
    serde_json::from_value(result).map_err(|e| RpcError::malformed(format!("bad result: {e}")))
}

fn connect(address: &str, deadline: Instant) -> Result<TcpStream, RpcError> {
    let addrs: Vec<SocketAddr> = address
        .to_socket_addrs()
        .map_err(|e| RpcError::timeout(format!("cannot resolve {address}: {e}")))?
        .collect();
    let mut last = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, remaining(deadline)?) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(RpcError::timeout(match last {
        Some(e) => format!("connect {address}: {e}"),
        None => format!("no addresses for {address}"),
    }))
}

fn remaining(deadline: Instant) -> Result<Duration, RpcError> {
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        Err(RpcError::timeout("deadline exceeded"))
    } else {
        Ok(left)
    }
}

fn retryable(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::Interrupted)
}

fn io_timeout(e: io::Error) -> RpcError {
    RpcError::timeout(e.to_string())
}

/// Error returned by a method handler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HandlerError {
    InvalidParams(String),
    Application(String),
}

/// Domain errors that cross the wire as `APPLICATION_ERROR`.
pub trait AppError: fmt::Display {
    /// Stable snake_case identifier; becomes the message prefix.
    fn kind(&self) -> &'static str;
}

impl<E: AppError> From<E> for HandlerError {
    fn from(e: E) -> Self {
        HandlerError::Application(format!("{}: {}", e.kind(), e))
    }
}

type Handler = dyn Fn(Map<String, Value>) -> Result<Value, HandlerError> + Send + Sync;

/// Method-name to handler table.
#[derive(Clone, Default)]
pub struct Router {
    handlers: HashMap<String, Arc<Handler>>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw<F>(mut self, method: &str, handler: F) -> Self
    where
        F: Fn(Map<String, Value>) -> Result<Value, HandlerError> + Send + Sync + 'static,
    {
        assert!(is_method_name(method), "bad method name {method:?}");
        self.handlers.insert(method.to_owned(), Arc::new(handler));
        self
    }

    /// Registers a handler whose params and result go through serde.
    pub fn route<P, R, E, F>(self, method: &str, handler: F) -> Self
    where
        P: DeserializeOwned,
        R: Serialize,
        E: Into<HandlerError>,
        F: Fn(P) -> Result<R, E> + Send + Sync + 'static,
    {
        self.raw(method, move |params| {
            let p: P = serde_json::from_value(Value::Object(params))
                .map_err(|e| HandlerError::InvalidParams(e.to_string()))?;
            let r = handler(p).map_err(Into::into)?;
            serde_json::to_value(r).map_err(|e| HandlerError::Application(format!("internal: {e}")))
        })
    }

    pub fn dispatch(&self, req: RpcRequest) -> RpcResponse {
        let outcome = match self.handlers.get(&req.method) {
            None => Err(RpcError::new(
                RpcErrorCode::UnknownMethod,
                format!("unknown method {}", req.method),
            )),
            Some(h) => match panic::catch_unwind(AssertUnwindSafe(|| h(req.params))) {
                Ok(Ok(v)) => Ok(v),
                Ok(Err(HandlerError::InvalidParams(m))) => {
                    Err(RpcError::new(RpcErrorCode::InvalidParams, m))
                }
                Ok(Err(HandlerError::Application(m))) => {
                    Err(RpcError::new(RpcErrorCode::ApplicationError, m))
                }
                Err(_) => Err(RpcError::new(
                    RpcErrorCode::ApplicationError,
                    "internal: handler panicked",
                )),
            },
        };
        RpcResponse {
            id: req.id,
            outcome,
        }
    }
}

const POLL: Duration = Duration::from_millis(25);

/// A running RPC service. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn address(&self) -> String {
        self.addr.to_string()
    }

    /// Stops accepting, lets in-flight requests finish, and joins every
    /// connection thread.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        let Some(acceptor) = self.acceptor.take() else {
            return;
        };
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        let _ = acceptor.join();
        let conns = std::mem::take(&mut *self.connections.lock().unwrap());
        for c in conns {
            let _ = c.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Binds `bind` and serves `router` on a thread per connection.
pub fn serve(bind: &str, router: Router) -> io::Result<ServerHandle> {
    serve_on(TcpListener::bind(bind)?, router)
}

/// Like [`serve`] on an already bound listener.
pub fn serve_on(listener: TcpListener, router: Router) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let router = Arc::new(router);

    let acceptor = {
        let stop = Arc::clone(&stop);
        let connections = Arc::clone(&connections);
        thread::Builder::new()
            .name(format!("rpc-accept-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("accept on {addr}: {e}");
                            continue;
                        }
                    };
                    let router = Arc::clone(&router);
                    let stop = Arc::clone(&stop);
                    let handle = thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &router, &stop) {
                            log::debug!("connection on {addr} ended: {e}");
                        }
                    });
                    let mut conns = connections.lock().unwrap();
                    conns.retain(|h| !h.is_finished());
                    conns.push(handle);
                }
            })?
    };

    Ok(ServerHandle {
        addr,
        stop,
        acceptor: Some(acceptor),
        connections,
    })
}

fn handle_connection(stream: TcpStream, router: &Router, stop: &AtomicBool) -> io::Result<()> {
    let _ = stream.set_nodelay(true);
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => return Ok(()),
            Ok(_) if line.ends_with(b"\n") => {
                line.pop();
                let response = respond(router, &line);
                line.clear();
                writer.write_all(&encode_message(&Message::Response(response)))?;
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) && line.is_empty() {
                    let _ = writer.shutdown(Shutdown::Both);
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

fn respond(router: &Router, line: &[u8]) -> RpcResponse {
    match decode_message(line) {
        Ok(Message::Request(req)) => router.dispatch(req),
        Ok(Message::Response(resp)) => RpcResponse {
            id: resp.id,
            outcome: Err(RpcError::malformed("expected a request")),
        },
        Err(e) => RpcResponse {
            id: salvage_id(line),
            outcome: Err(e.into()),
        },
    }
}

fn salvage_id(line: &[u8]) -> String {
    serde_json::from_slice::<Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_default()
}
