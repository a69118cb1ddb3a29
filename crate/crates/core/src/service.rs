//! Long-lived rollout service: the model is loaded exactly once, generation
//! requests share it through an `Arc`, and weight updates swap the `Arc`
//! atomically without touching the filesystem. In-flight generations finish
//! on the weights they started with.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecodePolicy, Trajectory};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

/// Maximum GENERATE requests in flight before the service sheds load.
const MAX_INFLIGHT: usize = 64;

pub struct ServiceState {
    params: RwLock<Arc<ModelParams>>,
    loads: AtomicU64,
    inflight: AtomicUsize,
    /// Trajectories served per weight version.
    served: Mutex<BTreeMap<u64, u64>>,
}

impl ServiceState {
    /// Wraps already-loaded parameters; counts as the single load.
    pub fn from_params(mut params: ModelParams) -> Self {
        params.version = 1;
        ServiceState {
            params: RwLock::new(Arc::new(params)),
            loads: AtomicU64::new(1),
            inflight: AtomicUsize::new(0),
            served: Mutex::new(BTreeMap::new()),
        }
    }

    /// Loads a checkpoint from disk — the only load in the service lifetime.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::from_params(model::load_checkpoint(path)?))
    }

    pub fn version(&self) -> u64 {
        self.params.read().expect("lock poisoned").version
    }

    pub fn loads(&self) -> u64 {
        self.loads.load(Ordering::SeqCst)
    }

    pub fn served_by_version(&self) -> BTreeMap<u64, u64> {
        self.served.lock().expect("lock poisoned").clone()
    }

    /// Current parameters as a shared handle (a read lease: the caller keeps
    /// this version alive for as long as it holds the `Arc`).
    pub fn current(&self) -> Arc<ModelParams> {
        self.params.read().expect("lock poisoned").clone()
    }

    /// Generates one trajectory per prompt, all under a single weight
    /// version. Per-item failures (oversize prompt etc.) do not abort the
    /// batch. Item `i` is seeded with `policy.seed + i`.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<u32>],
        policy: &DecodePolicy,
    ) -> Result<(u64, Vec<std::result::Result<Trajectory, String>>)> {
        if self.inflight.fetch_add(1, Ordering::SeqCst) >= MAX_INFLIGHT {
            self.inflight.fetch_sub(1, Ordering::SeqCst);
            return Err(Error::Service("generation queue full, retry later".into()));
        }
        let params = self.current();
        let results: Vec<_> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let item = DecodePolicy { seed: policy.seed.wrapping_add(i as u64), ..policy.clone() };
                decoder::generate_seeded(&params, p, &item).map_err(|e| e.to_string())
            })
            .collect();
        let ok = results.iter().filter(|r| r.is_ok()).count() as u64;
        *self.served.lock().expect("lock poisoned").entry(params.version).or_insert(0) += ok;
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        Ok((params.version, results))
    }

    /// Atomically replaces the weights from a serialized blob (checkpoint
    /// bytes, no filesystem). The version strictly increases; a rejected
    /// blob leaves everything untouched.
    pub fn update_weights(&self, blob: &[u8]) -> Result<u64> {
        let mut incoming = model::params_from_bytes(blob)?;
        let mut slot = self.params.write().expect("lock poisoned");
        if incoming.config != slot.config {
            return Err(Error::Config("update config does not match serving config".into()));
        }
        incoming.version = slot.version + 1;
        let v = incoming.version;
        *slot = Arc::new(incoming);
        Ok(v)
    }
}

// ── wire protocol ────────────────────────────────────────────────────

/// `{"kind": ..., "body": ...}` framed as 4-byte big-endian length + JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireMessage {
    pub kind: String,
    #[serde(default)]
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateBody {
    pub prompts: Vec<Vec<u32>>,
    #[serde(default)]
    pub policy: Option<DecodePolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateItem {
    pub trajectory: Option<Trajectory>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReply {
    pub version: u64,
    pub results: Vec<GenerateItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionReply {
    pub version: u64,
    pub loads: u64,
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    let bytes = serde_json::to_vec(msg)?;
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a frame; `None` means a clean EOF at a message boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut buf = vec![0u8; u32::from_be_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(serde_json::from_slice(&buf)?))
}

fn error_reply(msg: impl Into<String>) -> WireMessage {
    WireMessage {
        kind: "ERROR".into(),
        body: serde_json::json!({ "message": msg.into() }),
    }
}

fn ok_reply<T: Serialize>(body: &T) -> WireMessage {
    WireMessage {
        kind: "OK".into(),
        body: serde_json::to_value(body).expect("serializable reply"),
    }
}

/// Handles one request; the bool says whether the service should shut down.
fn handle(state: &ServiceState, req: &WireMessage) -> (WireMessage, bool) {
    match req.kind.as_str() {
        "GENERATE" => {
            let body: GenerateBody = match serde_json::from_value(req.body.clone()) {
                Ok(b) => b,
                Err(e) => return (error_reply(format!("bad GENERATE body: {e}")), false),
            };
            let policy = body.policy.unwrap_or_default();
            match state.generate_batch(&body.prompts, &policy) {
                Ok((version, results)) => {
                    let results = results
                        .into_iter()
                        .map(|r| match r {
                            Ok(t) => GenerateItem { trajectory: Some(t), error: None },
                            Err(e) => GenerateItem { trajectory: None, error: Some(e) },
                        })
                        .collect();
                    (ok_reply(&GenerateReply { version, results }), false)
                }
                Err(e) => (error_reply(e.to_string()), false),
            }
        }
        "UPDATE_WEIGHTS" => {
            let blob = req.body.get("blob").and_then(|v| v.as_str());
            let Some(blob) = blob else {
                return (error_reply("UPDATE_WEIGHTS body needs a base64 `blob`"), false);
            };
            match base64::engine::general_purpose::STANDARD.decode(blob) {
                Ok(bytes) => match state.update_weights(&bytes) {
                    Ok(v) => (ok_reply(&serde_json::json!({ "version": v })), false),
                    Err(e) => (error_reply(e.to_string()), false),
                },
                Err(e) => (error_reply(format!("bad base64: {e}")), false),
            }
        }
        "VERSION" => (
            ok_reply(&VersionReply { version: state.version(), loads: state.loads() }),
            false,
        ),
        "SHUTDOWN" => (ok_reply(&serde_json::json!({})), true),
        other => (error_reply(format!("unknown kind {other:?}")), false),
    }
}

/// A running TCP service; dropping the handle does not stop it — send
/// SHUTDOWN or call [`Server::shutdown`].
pub struct Server {
    pub addr: std::net::SocketAddr,
    pub state: Arc<ServiceState>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    /// Binds the address and serves until SHUTDOWN. `addr` may use port 0
    /// for an ephemeral port.
    pub fn spawn(state: Arc<ServiceState>, addr: &str) -> Result<Server> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Service(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_state = state.clone();
        let accept_stop = stop.clone();
        let accept_thread = std::thread::spawn(move || {
            let mut conns = Vec::new();
            for stream in listener.incoming() {
                if accept_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let st = accept_state.clone();
                let sp = accept_stop.clone();
                conns.push(std::thread::spawn(move || connection_loop(st, sp, stream, local)));
            }
            for c in conns {
                let _ = c.join();
            }
        });
        Ok(Server { addr: local, state, stop, accept_thread: Some(accept_thread) })
    }

    /// Blocks until the accept loop exits, i.e. a SHUTDOWN request arrived.
    pub fn wait(&mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        request_stop(&self.stop, self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn request_stop(stop: &AtomicBool, addr: std::net::SocketAddr) {
    if !stop.swap(true, Ordering::SeqCst) {
        // wake the accept loop so it observes the flag
        let _ = TcpStream::connect(addr);
    }
}

fn connection_loop(
    state: Arc<ServiceState>,
    stop: Arc<AtomicBool>,
    mut stream: TcpStream,
    addr: std::net::SocketAddr,
) {
    // poll for the stop flag between frames so shutdown never waits on an
    // idle connection
    let poll = std::time::Duration::from_millis(100);
    let _ = stream.set_read_timeout(Some(poll));
    loop {
        let mut len = [0u8; 4];
        match stream.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                continue;
            }
            Err(_) => return,
        }
        // frame started: read it whole
        let _ = stream.set_read_timeout(None);
        let mut buf = vec![0u8; u32::from_be_bytes(len) as usize];
        let req = match stream.read_exact(&mut buf).map_err(Error::from).and_then(|()| {
            serde_json::from_slice::<WireMessage>(&buf).map_err(Error::from)
        }) {
            Ok(r) => r,
            Err(e) => {
                let _ = write_frame(&mut stream, &error_reply(format!("bad frame: {e}")));
                return;
            }
        };
        let _ = stream.set_read_timeout(Some(poll));
        let (reply, quit) = handle(&state, &req);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
        if quit {
            request_stop(&stop, addr);
            return;
        }
    }
}

/// Blocking client for the wire protocol.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Client> {
        Ok(Client {
            stream: TcpStream::connect(addr).map_err(|e| Error::Service(format!("connect {addr}: {e}")))?,
        })
    }

    fn request(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        write_frame(&mut self.stream, msg)?;
        let reply = read_frame(&mut self.stream)?
            .ok_or_else(|| Error::Service("connection closed mid-request".into()))?;
        if reply.kind == "ERROR" {
            let msg = reply.body.get("message").and_then(|m| m.as_str()).unwrap_or("unknown");
            return Err(Error::Service(msg.to_string()));
        }
        Ok(reply)
    }

    pub fn generate(
        &mut self,
        prompts: &[Vec<u32>],
        policy: &DecodePolicy,
    ) -> Result<GenerateReply> {
        let body = GenerateBody { prompts: prompts.to_vec(), policy: Some(policy.clone()) };
        let reply = self.request(&WireMessage {
            kind: "GENERATE".into(),
            body: serde_json::to_value(&body)?,
        })?;
        Ok(serde_json::from_value(reply.body)?)
    }

    pub fn update_weights(&mut self, blob: &[u8]) -> Result<u64> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(blob);
        let reply = self.request(&WireMessage {
            kind: "UPDATE_WEIGHTS".into(),
            body: serde_json::json!({ "blob": b64 }),
        })?;
        reply
            .body
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Protocol("update reply without version".into()))
    }

    pub fn version(&mut self) -> Result<VersionReply> {
        let reply = self.request(&WireMessage { kind: "VERSION".into(), body: serde_json::Value::Null })?;
        Ok(serde_json::from_value(reply.body)?)
    }

    pub fn shutdown(&mut self) -> Result<()> {
        self.request(&WireMessage { kind: "SHUTDOWN".into(), body: serde_json::Value::Null })?;
        Ok(())
    }

    pub fn raw(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        write_frame(&mut self.stream, msg)?;
        read_frame(&mut self.stream)?
            .ok_or_else(|| Error::Service("connection closed mid-request".into()))
    }
}

/// In-process or remote access behind one interface, so the trainer does
/// not care where rollouts come from.
pub enum ServiceHandle {
    InProcess(Arc<ServiceState>),
    Remote(Client),
}

impl ServiceHandle {
    pub fn generate(
        &mut self,
        prompts: &[Vec<u32>],
        policy: &DecodePolicy,
    ) -> Result<GenerateReply> {
        match self {
            ServiceHandle::InProcess(state) => {
                let (version, results) = state.generate_batch(prompts, policy)?;
                Ok(GenerateReply {
                    version,
                    results: results
                        .into_iter()
                        .map(|r| match r {
                            Ok(t) => GenerateItem { trajectory: Some(t), error: None },
                            Err(e) => GenerateItem { trajectory: None, error: Some(e) },
                        })
                        .collect(),
                })
            }
            ServiceHandle::Remote(client) => client.generate(prompts, policy),
        }
    }

    /// In-process mode hands the params over directly — the "shared-memory
    /// handle" variant of the update message.
    pub fn update_weights_params(&mut self, params: &ModelParams) -> Result<u64> {
        match self {
            ServiceHandle::InProcess(state) => {
                let mut slot = state.params.write().expect("lock poisoned");
                if params.config != slot.config {
                    return Err(Error::Config("update config does not match serving config".into()));
                }
                let mut incoming = params.clone();
                incoming.version = slot.version + 1;
                let v = incoming.version;
                *slot = Arc::new(incoming);
                Ok(v)
            }
            ServiceHandle::Remote(client) => client.update_weights(&model::params_to_bytes(params)?),
        }
    }

    pub fn version(&mut self) -> Result<VersionReply> {
        match self {
            ServiceHandle::InProcess(state) => {
                Ok(VersionReply { version: state.version(), loads: state.loads() })
            }
            ServiceHandle::Remote(client) => client.version(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, params_to_bytes, ModelConfig};
    use crate::tasks::Vocab;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            block_size: 4,
            ..ModelConfig::toy()
        };
        init_params(&cfg).unwrap()
    }

    fn prompt() -> Vec<u32> {
        let mut p = vec![Vocab::BOS];
        p.extend(Vocab::encode("1+2=").unwrap());
        p
    }

    #[test]
    fn version_starts_at_one_and_increments() {
        let params = tiny_params();
        let blob = params_to_bytes(&params).unwrap();
        let state = ServiceState::from_params(params);
        assert_eq!(state.version(), 1);
        assert_eq!(state.loads(), 1);
        assert_eq!(state.update_weights(&blob).unwrap(), 2);
        assert_eq!(state.update_weights(&blob).unwrap(), 3);
        assert_eq!(state.loads(), 1);
    }

    #[test]
    fn rejected_update_leaves_version_unchanged() {
        let state = ServiceState::from_params(tiny_params());
        assert!(state.update_weights(b"not a checkpoint").is_err());
        let other = init_params(&ModelConfig { d_model: 32, ..state.current().config.clone() }).unwrap();
        let blob = params_to_bytes(&other).unwrap();
        assert!(state.update_weights(&blob).is_err());
        assert_eq!(state.version(), 1);
    }

    #[test]
    fn identical_update_bumps_version_but_not_outputs() {
        let params = tiny_params();
        let blob = params_to_bytes(&params).unwrap();
        let state = ServiceState::from_params(params);
        let policy = DecodePolicy::default();
        let (v1, r1) = state.generate_batch(&[prompt()], &policy).unwrap();
        state.update_weights(&blob).unwrap();
        let (v2, r2) = state.generate_batch(&[prompt()], &policy).unwrap();
        assert_eq!((v1, v2), (1, 2));
        assert_eq!(
            r1[0].as_ref().unwrap().output,
            r2[0].as_ref().unwrap().output
        );
    }

    #[test]
    fn batch_is_order_preserving_with_per_item_errors() {
        let state = ServiceState::from_params(tiny_params());
        let long = vec![Vocab::BOS; 1000]; // exceeds max_seq_len
        let (_, results) = state
            .generate_batch(&[prompt(), long, prompt()], &DecodePolicy::default())
            .unwrap();
        assert_eq!(results.len(), 3);
        assert!(results[0].is_ok());
        assert!(results[1].is_err());
        assert!(results[2].is_ok());
    }

    #[test]
    fn empty_batch_gives_empty_reply() {
        let state = ServiceState::from_params(tiny_params());
        let (v, results) = state.generate_batch(&[], &DecodePolicy::default()).unwrap();
        assert_eq!(v, 1);
        assert!(results.is_empty());
    }

    #[test]
    fn tcp_round_trip_and_shutdown() {
        let params = tiny_params();
        let blob = params_to_bytes(&params).unwrap();
        let state = Arc::new(ServiceState::from_params(params));
        let mut server = Server::spawn(state, "127.0.0.1:0").unwrap();
        let addr = server.addr.to_string();

        let mut client = Client::connect(&addr).unwrap();
        let v = client.version().unwrap();
        assert_eq!((v.version, v.loads), (1, 1));

        let reply = client.generate(&[prompt()], &DecodePolicy::default()).unwrap();
        assert_eq!(reply.version, 1);
        assert!(reply.results[0].trajectory.is_some());

        assert_eq!(client.update_weights(&blob).unwrap(), 2);

        // unknown kind errors but keeps the connection usable
        let bad = client
            .raw(&WireMessage { kind: "NOPE".into(), body: serde_json::Value::Null })
            .unwrap();
        assert_eq!(bad.kind, "ERROR");
        assert_eq!(client.version().unwrap().version, 2);

        client.shutdown().unwrap();
        server.shutdown();
    }

    #[test]
    fn second_bind_on_same_port_fails() {
        let state = Arc::new(ServiceState::from_params(tiny_params()));
        let mut server = Server::spawn(state.clone(), "127.0.0.1:0").unwrap();
        let addr = server.addr.to_string();
        assert!(Server::spawn(state, &addr).is_err());
        server.shutdown();
    }

    #[test]
    fn concurrent_generate_and_update_stay_version_pure() {
        let params = tiny_params();
        let blob = params_to_bytes(&params).unwrap();
        let state = Arc::new(ServiceState::from_params(params));

        let gen_state = state.clone();
        let gen = std::thread::spawn(move || {
            let mut versions = Vec::new();
            for i in 0..40 {
                let policy = DecodePolicy { seed: i, ..Default::default() };
                let (v, results) = gen_state.generate_batch(&[prompt()], &policy).unwrap();
                assert!(results[0].is_ok());
                versions.push(v);
            }
            versions
        });
        let upd_state = state.clone();
        let upd = std::thread::spawn(move || {
            for _ in 0..20 {
                upd_state.update_weights(&blob).unwrap();
            }
        });
        let versions = gen.join().unwrap();
        upd.join().unwrap();

        // monotone version observations, single load, all served trajectories accounted for
        assert!(versions.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(state.loads(), 1);
        assert_eq!(state.version(), 21);
        let served: u64 = state.served_by_version().values().sum();
        assert_eq!(served, 40);
    }
}
