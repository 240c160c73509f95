//! Client, stub server and conformance checks for the external model service.
//!
//! Messages are UTF-8 JSON objects, each preceded by its byte length in
//! decimal and a newline:
//!
//! ```text
//! 49
//! {"id":1,"kind":"embed","payload":{"texts":["x"]}}
//! ```
//!
//! Requests are `{id, kind, payload}`. Responses echo `id` and `kind` and
//! carry either `payload` or `error: {code, message}`. The `hello` kind
//! returns the service capabilities.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::RhetoricalRole;
use crate::error::{Error, Result};
use crate::rerank::{JaccardScorer, PairScorer};
use crate::segmenter::{HeuristicAnnotator, RoleAnnotator};
use crate::vector::{Embedder, Embedding, HashingEmbedder, DEFAULT_DIMENSION};

/// Frames larger than this are rejected rather than allocated.
pub const MAX_FRAME_BYTES: usize = 256 * 1024 * 1024;

pub const KIND_HELLO: &str = "hello";
pub const KIND_EMBED: &str = "embed";
pub const KIND_SCORE_PAIRS: &str = "score_pairs";
pub const KIND_ANNOTATE: &str = "annotate";

/// Writes one length-prefixed frame and flushes.
pub fn write_frame<W: Write>(writer: &mut W, body: &[u8]) -> std::io::Result<()> {
    writeln!(writer, "{}", body.len())?;
    writer.write_all(body)?;
    writer.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed the connection cleanly
/// between frames.
pub fn read_frame<R: BufRead>(reader: &mut R) -> Result<Option<Vec<u8>>> {
    let mut header = String::new();
    let n = reader
        .read_line(&mut header)
        .map_err(|e| Error::Transport(format!("reading frame header: {e}")))?;
    if n == 0 {
        return Ok(None);
    }
    let digits = header.trim_end_matches(['\n', '\r']);
    let len: usize = digits
        .parse()
        .map_err(|_| Error::Protocol(format!("bad frame header {digits:?}")))?;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0; len];
    reader
        .read_exact(&mut body)
        .map_err(|e| Error::Transport(format!("reading frame body: {e}")))?;
    Ok(Some(body))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// A message as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Envelope {
    pub fn request(id: u64, kind: &str, payload: Value) -> Self {
        Self {
            id,
            kind: kind.to_owned(),
            payload: Some(payload),
            error: None,
        }
    }

    pub fn failure(id: u64, kind: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            id,
            kind: kind.to_owned(),
            payload: None,
            error: Some(ErrorBody {
                code: code.to_owned(),
                message: message.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub dimension: usize,
    #[serde(default)]
    pub max_pair_chars: Option<usize>,
    pub kinds: Vec<String>,
    #[serde(default)]
    pub name: String,
}

impl Capabilities {
    pub fn supports(&self, kind: &str) -> bool {
        self.kinds.iter().any(|k| k == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
    pub dimension: usize,
    #[serde(default)]
    pub truncated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePairsRequest {
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePairsResponse {
    pub scores: Vec<f64>,
    #[serde(default)]
    pub truncated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub roles: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub connect_timeout: Duration,
    /// Per-request read timeout; `None` waits indefinitely.
    pub read_timeout: Option<Duration>,
    /// Texts or pairs per request; larger inputs are split.
    pub batch_size: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(5),
            read_timeout: Some(Duration::from_secs(300)),
            batch_size: 64,
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Blocking client for the model service.
///
/// Requests on one client are serialized over a single connection. After a
/// transport failure the connection is dropped and re-established on the
/// next call, so callers can retry.
pub struct SidecarClient {
    endpoint: String,
    config: ClientConfig,
    conn: Mutex<Option<Connection>>,
    next_id: AtomicU64,
    capabilities: Capabilities,
}

impl std::fmt::Debug for SidecarClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SidecarClient")
            .field("endpoint", &self.endpoint)
            .field("capabilities", &self.capabilities)
            .finish()
    }
}

impl SidecarClient {
    /// Connects and performs the `hello` handshake.
    pub fn connect(endpoint: &str) -> Result<Self> {
        Self::connect_with(endpoint, ClientConfig::default())
    }

    pub fn connect_with(endpoint: &str, config: ClientConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("client batch_size must be positive".into()));
        }
        let mut client = Self {
            endpoint: endpoint.trim_start_matches("tcp://").to_owned(),
            config,
            conn: Mutex::new(None),
            next_id: AtomicU64::new(1),
            capabilities: Capabilities {
                dimension: 0,
                max_pair_chars: None,
                kinds: Vec::new(),
                name: String::new(),
            },
        };
        let hello = client.call(KIND_HELLO, Value::Object(Default::default()))?;
        client.capabilities = serde_json::from_value(hello)
            .map_err(|e| Error::Protocol(format!("bad hello payload: {e}")))?;
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    fn open(&self) -> Result<Connection> {
        let addrs: Vec<_> = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("resolving {}: {e}", self.endpoint)))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.config.connect_timeout) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    stream
                        .set_read_timeout(self.config.read_timeout)
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    let writer = stream
                        .try_clone()
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    return Ok(Connection {
                        reader: BufReader::new(stream),
                        writer: BufWriter::new(writer),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Transport(match last {
            Some(e) => format!("connecting to {}: {e}", self.endpoint),
            None => format!("{} resolved to no addresses", self.endpoint),
        }))
    }

    /// Sends one envelope as-is and returns the raw response envelope.
    pub fn exchange(&self, request: &Envelope) -> Result<Envelope> {
        let body = serde_json::to_vec(request)?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.open()?);
        }
        let conn = guard.as_mut().expect("connection just opened");
        let result = write_frame(&mut conn.writer, &body)
            .map_err(|e| Error::Transport(format!("sending to {}: {e}", self.endpoint)))
            .and_then(|()| read_frame(&mut conn.reader))
            .and_then(|frame| {
                frame.ok_or_else(|| Error::Transport(format!("{} closed the connection", self.endpoint)))
            });
        let frame = match result {
            Ok(frame) => frame,
            Err(e) => {
                *guard = None;
                return Err(e);
            }
        };
        serde_json::from_slice(&frame).map_err(|e| {
            *guard = None;
            Error::Protocol(format!("undecodable response: {e}"))
        })
    }

    /// Sends a request and returns its payload, checking id and kind echo.
    pub fn call(&self, kind: &str, payload: Value) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let response = self.exchange(&Envelope::request(id, kind, payload))?;
        if response.id != id {
            *self.conn.lock().unwrap_or_else(|p| p.into_inner()) = None;
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        if response.kind != kind {
            return Err(Error::Protocol(format!(
                "response kind {:?} does not match request kind {kind:?}",
                response.kind
            )));
        }
        if let Some(err) = response.error {
            return Err(Error::Remote {
                code: err.code,
                message: err.message,
            });
        }
        response
            .payload
            .ok_or_else(|| Error::Protocol(format!("{kind} response has neither payload nor error")))
    }

    fn typed<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, kind: &str, req: &Req) -> Result<Resp> {
        let payload = self.call(kind, serde_json::to_value(req)?)?;
        serde_json::from_value(payload).map_err(|e| Error::Protocol(format!("bad {kind} payload: {e}")))
    }

    pub fn embed(&self, texts: &[String]) -> Result<EmbedResponse> {
        let mut out = EmbedResponse {
            vectors: Vec::with_capacity(texts.len()),
            dimension: self.capabilities.dimension,
            truncated: Vec::with_capacity(texts.len()),
        };
        for batch in texts.chunks(self.config.batch_size) {
            let resp: EmbedResponse = self.typed(
                KIND_EMBED,
                &EmbedRequest {
                    texts: batch.to_vec(),
                },
            )?;
            if resp.vectors.len() != batch.len() {
                return Err(Error::Protocol(format!(
                    "embed returned {} vectors for {} texts",
                    resp.vectors.len(),
                    batch.len()
                )));
            }
            if let Some(v) = resp.vectors.iter().find(|v| v.len() != out.dimension) {
                return Err(Error::Protocol(format!(
                    "embed returned a {}-dimensional vector, advertised {}",
                    v.len(),
                    out.dimension
                )));
            }
            out.truncated.extend(pad_flags(resp.truncated, batch.len()));
            out.vectors.extend(resp.vectors);
        }
        Ok(out)
    }

    pub fn score(&self, pairs: &[(String, String)]) -> Result<ScorePairsResponse> {
        let mut out = ScorePairsResponse {
            scores: Vec::with_capacity(pairs.len()),
            truncated: Vec::with_capacity(pairs.len()),
        };
        for batch in pairs.chunks(self.config.batch_size) {
            let resp: ScorePairsResponse = self.typed(
                KIND_SCORE_PAIRS,
                &ScorePairsRequest {
                    pairs: batch.to_vec(),
                },
            )?;
            if resp.scores.len() != batch.len() {
                return Err(Error::Protocol(format!(
                    "score_pairs returned {} scores for {} pairs",
                    resp.scores.len(),
                    batch.len()
                )));
            }
            out.truncated.extend(pad_flags(resp.truncated, batch.len()));
            out.scores.extend(resp.scores);
        }
        Ok(out)
    }

    pub fn annotate_sentences(&self, sentences: &[String]) -> Result<Vec<RhetoricalRole>> {
        let resp: AnnotateResponse = self.typed(
            KIND_ANNOTATE,
            &AnnotateRequest {
                sentences: sentences.to_vec(),
            },
        )?;
        if resp.roles.len() != sentences.len() {
            return Err(Error::Protocol(format!(
                "annotate returned {} roles for {} sentences",
                resp.roles.len(),
                sentences.len()
            )));
        }
        resp.roles
            .iter()
            .map(|r| {
                r.parse()
                    .map_err(|_| Error::Protocol(format!("unknown role {r:?} from annotate")))
            })
            .collect()
    }
}

fn pad_flags(mut flags: Vec<bool>, n: usize) -> Vec<bool> {
    flags.resize(n, false);
    flags
}

impl Embedder for SidecarClient {
    fn dimension(&self) -> usize {
        self.capabilities.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(self.embed(texts)?.vectors.into_iter().map(Embedding).collect())
    }
}

impl PairScorer for SidecarClient {
    fn score_pairs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        Ok(self.score(pairs)?.scores)
    }

    fn max_pair_chars(&self) -> Option<usize> {
        self.capabilities.max_pair_chars
    }
}

impl RoleAnnotator for SidecarClient {
    fn annotate(&self, sentences: &[String]) -> Result<Vec<RhetoricalRole>> {
        self.annotate_sentences(sentences)
    }
}

/// Models behind the in-process stub service.
#[derive(Debug, Clone)]
pub struct StubModels {
    pub embedder: HashingEmbedder,
    pub scorer: JaccardScorer,
    pub annotator: HeuristicAnnotator,
    /// Pairs longer than this (query + document chars) are truncated.
    pub max_pair_chars: Option<usize>,
    pub annotate_enabled: bool,
}

impl Default for StubModels {
    fn default() -> Self {
        Self {
            embedder: HashingEmbedder::new(DEFAULT_DIMENSION),
            scorer: JaccardScorer::default(),
            annotator: HeuristicAnnotator::default(),
            max_pair_chars: None,
            annotate_enabled: true,
        }
    }
}

impl StubModels {
    pub fn capabilities(&self) -> Capabilities {
        let mut kinds = vec![KIND_HELLO.to_owned(), KIND_EMBED.to_owned(), KIND_SCORE_PAIRS.to_owned()];
        if self.annotate_enabled {
            kinds.push(KIND_ANNOTATE.to_owned());
        }
        Capabilities {
            dimension: self.embedder.dimension(),
            max_pair_chars: self.max_pair_chars,
            kinds,
            name: "precedent-stub".to_owned(),
        }
    }
}

fn truncate_pair(q: &str, d: &str, limit: Option<usize>) -> (String, String, bool) {
    let Some(limit) = limit else {
        return (q.to_owned(), d.to_owned(), false);
    };
    let (qn, dn) = (q.chars().count(), d.chars().count());
    if qn + dn <= limit {
        return (q.to_owned(), d.to_owned(), false);
    }
    let q_keep = qn.min(limit);
    let d_keep = limit - q_keep;
    (
        q.chars().take(q_keep).collect(),
        d.chars().take(d_keep).collect(),
        true,
    )
}

fn decode<T: for<'de> Deserialize<'de>>(request: &Envelope) -> std::result::Result<T, Envelope> {
    let payload = request.payload.clone().unwrap_or(Value::Null);
    serde_json::from_value(payload)
        .map_err(|e| Envelope::failure(request.id, &request.kind, "bad_request", e.to_string()))
}

/// Answers one request with the stub models. Never panics on bad input;
/// malformed or unsupported requests get an error envelope.
pub fn handle_request(models: &StubModels, request: &Envelope) -> Envelope {
    let ok = |payload: Result<Value>| match payload {
        Ok(p) => Envelope {
            id: request.id,
            kind: request.kind.clone(),
            payload: Some(p),
            error: None,
        },
        Err(e) => Envelope::failure(request.id, &request.kind, "model_error", e.to_string()),
    };
    match request.kind.as_str() {
        KIND_HELLO => ok(serde_json::to_value(models.capabilities()).map_err(Error::from)),
        KIND_EMBED => match decode::<EmbedRequest>(request) {
            Ok(req) => ok(models.embedder.embed_batch(&req.texts).and_then(|vs| {
                Ok(serde_json::to_value(EmbedResponse {
                    truncated: vec![false; vs.len()],
                    vectors: vs.into_iter().map(|v| v.0).collect(),
                    dimension: models.embedder.dimension(),
                })?)
            })),
            Err(e) => e,
        },
        KIND_SCORE_PAIRS => match decode::<ScorePairsRequest>(request) {
            Ok(req) => {
                let (pairs, truncated): (Vec<_>, Vec<_>) = req
                    .pairs
                    .iter()
                    .map(|(q, d)| {
                        let (q, d, t) = truncate_pair(q, d, models.max_pair_chars);
                        ((q, d), t)
                    })
                    .unzip();
                ok(models.scorer.score_pairs(&pairs).and_then(|scores| {
                    Ok(serde_json::to_value(ScorePairsResponse { scores, truncated })?)
                }))
            }
            Err(e) => e,
        },
        KIND_ANNOTATE if models.annotate_enabled => match decode::<AnnotateRequest>(request) {
            Ok(req) => ok(models.annotator.annotate(&req.sentences).and_then(|roles| {
                Ok(serde_json::to_value(AnnotateResponse {
                    roles: roles.iter().map(|r| r.as_str().to_owned()).collect(),
                })?)
            })),
            Err(e) => e,
        },
        other => Envelope::failure(
            request.id,
            other,
            "unsupported_kind",
            format!("kind {other:?} is not served"),
        ),
    }
}

fn serve_connection(models: &StubModels, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(frame)) => frame,
            Ok(None) | Err(_) => return,
        };
        let response = match serde_json::from_slice::<Envelope>(&frame) {
            Ok(request) => handle_request(models, &request),
            Err(e) => {
                // Salvage the id if the object parses at all.
                let id = serde_json::from_slice::<Value>(&frame)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                Envelope::failure(id, "", "bad_request", e.to_string())
            }
        };
        let body = serde_json::to_vec(&response).expect("envelopes always serialize");
        if write_frame(&mut writer, &body).is_err() {
            return;
        }
    }
}

/// A stub service running on background threads. Dropping the handle stops
/// accepting new connections.
#[derive(Debug)]
pub struct StubServer {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn spawn(addr: &str, models: StubModels) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
        let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let models = Arc::new(models);
        let flag = Arc::clone(&stop);
        let acceptor = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let models = Arc::clone(&models);
                thread::spawn(move || serve_connection(&models, stream));
            }
        });
        Ok(Self {
            addr: local,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Blocks until the acceptor thread exits.
    pub fn join(mut self) {
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        if let Ok(s) = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1)) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_accepting();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, outcome: Result<std::result::Result<(), String>>) -> Check {
    match outcome {
        Ok(Ok(())) => Check { name, passed: true, detail: String::new() },
        Ok(Err(detail)) => Check { name, passed: false, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

const PROBE_TEXTS: [&str; 4] = [
    "The appellant was convicted under section 302.",
    "",
    "Whether the notification was ultra vires the parent statute?",
    "The appeal is allowed and the order set aside.",
];

/// Runs the protocol conformance checks against a connected client.
pub fn run_conformance(client: &SidecarClient) -> ConformanceReport {
    let caps = client.capabilities().clone();
    let texts: Vec<String> = PROBE_TEXTS.iter().map(|s| s.to_string()).collect();
    let mut checks = Vec::new();

    checks.push(check("hello declares core kinds", Ok({
        let missing: Vec<&str> = [KIND_HELLO, KIND_EMBED, KIND_SCORE_PAIRS]
            .into_iter()
            .filter(|k| !caps.supports(k))
            .collect();
        if caps.dimension == 0 {
            Err("advertised dimension is 0".to_owned())
        } else if missing.is_empty() {
            Ok(())
        } else {
            Err(format!("missing kinds {missing:?}"))
        }
    })));

    checks.push(check("correlation id echo", (|| {
        for id in [0, 7, 1 << 40, u64::MAX] {
            let resp = client.exchange(&Envelope::request(id, KIND_HELLO, Value::Object(Default::default())))?;
            if resp.id != id {
                return Ok(Err(format!("sent id {id}, got {}", resp.id)));
            }
        }
        Ok(Ok(()))
    })()));

    checks.push(check("embed length and dimension", (|| {
        let resp: EmbedResponse = client.typed(KIND_EMBED, &EmbedRequest { texts: texts.clone() })?;
        if resp.vectors.len() != texts.len() {
            return Ok(Err(format!("{} vectors for {} texts", resp.vectors.len(), texts.len())));
        }
        if resp.dimension != caps.dimension {
            return Ok(Err(format!("declared {} vs advertised {}", resp.dimension, caps.dimension)));
        }
        if let Some(v) = resp.vectors.iter().find(|v| v.len() != caps.dimension) {
            return Ok(Err(format!("vector of length {}", v.len())));
        }
        if !resp.truncated.is_empty() && resp.truncated.len() != texts.len() {
            return Ok(Err("truncated flags do not match input length".to_owned()));
        }
        Ok(Ok(()))
    })()));

    checks.push(check("embed determinism", (|| {
        let a = client.embed(&texts)?;
        let b = client.embed(&texts)?;
        Ok(if a.vectors == b.vectors { Ok(()) } else { Err("repeated embed differs".to_owned()) })
    })()));

    checks.push(check("empty batches", (|| {
        let e: EmbedResponse = client.typed(KIND_EMBED, &EmbedRequest { texts: vec![] })?;
        let s: ScorePairsResponse = client.typed(KIND_SCORE_PAIRS, &ScorePairsRequest { pairs: vec![] })?;
        Ok(if e.vectors.is_empty() && s.scores.is_empty() {
            Ok(())
        } else {
            Err("non-empty response to empty batch".to_owned())
        })
    })()));

    checks.push(check("score_pairs length", (|| {
        let pairs: Vec<(String, String)> = texts
            .iter()
            .flat_map(|q| texts.iter().map(move |d| (q.clone(), d.clone())))
            .collect();
        let resp: ScorePairsResponse = client.typed(KIND_SCORE_PAIRS, &ScorePairsRequest { pairs: pairs.clone() })?;
        if resp.scores.len() != pairs.len() {
            return Ok(Err(format!("{} scores for {} pairs", resp.scores.len(), pairs.len())));
        }
        if resp.scores.iter().any(|s| !s.is_finite()) {
            return Ok(Err("non-finite score".to_owned()));
        }
        Ok(Ok(()))
    })()));

    checks.push(check("score_pairs determinism", (|| {
        let q = texts[0].clone();
        let pairs = vec![(q.clone(), q.clone()); 5];
        let first = client.score(&pairs)?.scores;
        let again = client.score(&pairs)?.scores;
        if first.windows(2).any(|w| w[0] != w[1]) {
            return Ok(Err(format!("identical pairs scored differently: {first:?}")));
        }
        Ok(if first == again { Ok(()) } else { Err("repeated score_pairs differs".to_owned()) })
    })()));

    checks.push(check("annotate length", (|| {
        if !caps.supports(KIND_ANNOTATE) {
            return Ok(Ok(()));
        }
        let roles = client.annotate_sentences(&texts)?;
        Ok(if roles.len() == texts.len() { Ok(()) } else { Err("length mismatch".to_owned()) })
    })()));

    checks.push(check("unknown kind yields structured error", (|| {
        let resp = client.exchange(&Envelope::request(99, "no_such_kind", Value::Null))?;
        Ok(match (resp.id, resp.error) {
            (99, Some(_)) => Ok(()),
            (id, err) => Err(format!("id {id}, error {err:?}")),
        })
    })()));

    ConformanceReport {
        endpoint: client.endpoint().to_owned(),
        checks,
    }
}
