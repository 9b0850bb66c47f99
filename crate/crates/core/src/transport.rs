//! Database servers, the wire protocol and the two network backends.
//!
//! Every frame is `"PSI1" | version u8 | type u8 | length u32 LE | payload`.
//! A client talks to each database over its own connection; databases have
//! no channel to one another. Common randomness reaches a database only
//! through [`provision_cr`], the entity's dealer path, never over a client
//! connection.
//!
//! Payloads:
//!
//! - `SETUP` request: `u8 scheme | u32 K | u32 P | u32 L | u32 ν` (ν = 0 for
//!   the table scheme's balanced default, ignored by the block scheme);
//!   reply: `u32 K | u32 N | u32 own P | u32 required randomness`.
//! - `QUERY`: `u8 scheme | u32 query id | scheme-specific body`.
//! - `ANSWER`: `u32 query id | symbol vector`.
//! - `RESULT_FORWARD`: `u32 count | u32 elements`; acknowledged with an
//!   empty `RESULT_FORWARD`.
//! - `ERROR`: `u16 code | UTF-8 message`.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::block::{answer_block_query, block_count, BlockQuery};
use crate::field::{Field, SymbolVector};
use crate::params::TableParameters;
use crate::psi::EntityId;
use crate::rng::Seeds;
use crate::scheme::SchemeError;
use crate::store::{CommonRandomnessPool, MessageStore};
use crate::table::{answer_queries, TableQuery};

pub const MAGIC: [u8; 4] = *b"PSI1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 1 << 28;

pub const SCHEME_TABLE: u8 = 1;
pub const SCHEME_BLOCK: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Setup = 1,
    CrProvision = 2,
    Query = 3,
    Answer = 4,
    ResultForward = 5,
    Error = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::Setup,
            2 => MsgType::CrProvision,
            3 => MsgType::Query,
            4 => MsgType::Answer,
            5 => MsgType::ResultForward,
            6 => MsgType::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownType = 1,
    Malformed = 2,
    NotInitialized = 3,
    ProvisionAfterQuery = 4,
    InsufficientRandomness = 5,
    ChannelViolation = 6,
    SchemeFault = 7,
    SetupMismatch = 8,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::UnknownType,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::NotInitialized,
            4 => ErrorCode::ProvisionAfterQuery,
            5 => ErrorCode::InsufficientRandomness,
            6 => ErrorCode::ChannelViolation,
            7 => ErrorCode::SchemeFault,
            8 => ErrorCode::SetupMismatch,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::UnknownType => "UNKNOWN_TYPE",
            ErrorCode::Malformed => "MALFORMED",
            ErrorCode::NotInitialized => "NOT_INITIALIZED",
            ErrorCode::ProvisionAfterQuery => "PROVISION_AFTER_QUERY",
            ErrorCode::InsufficientRandomness => "INSUFFICIENT_RANDOMNESS",
            ErrorCode::ChannelViolation => "CHANNEL_VIOLATION",
            ErrorCode::SchemeFault => "SCHEME_FAULT",
            ErrorCode::SetupMismatch => "SETUP_MISMATCH",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("i/o: {0}")]
    Io(String),
    #[error("no reply from database {0}")]
    Timeout(usize),
    #[error("database replied {}: {message}", code_name(*.code))]
    Remote { code: u16, message: String },
    #[error("protocol fault: {0}")]
    Protocol(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

fn code_name(code: u16) -> &'static str {
    ErrorCode::from_u16(code).map_or("UNKNOWN", ErrorCode::name)
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// One wire message. `msg_type` is kept raw so unknown types survive
/// decoding and can be answered with an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame {
            msg_type: msg_type as u8,
            payload,
        }
    }

    pub fn error(code: ErrorCode, message: &str) -> Self {
        let mut payload = (code as u16).to_le_bytes().to_vec();
        payload.extend_from_slice(message.as_bytes());
        Frame::new(MsgType::Error, payload)
    }

    pub fn kind(&self) -> Option<MsgType> {
        MsgType::from_u8(self.msg_type)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    fn parse_header(header: &[u8]) -> Result<(u8, usize), TransportError> {
        if header[..4] != MAGIC {
            return Err(TransportError::BadMagic);
        }
        if header[4] != VERSION {
            return Err(TransportError::BadVersion(header[4]));
        }
        let len = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(len));
        }
        Ok((header[5], len))
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize), TransportError> {
        if bytes.len() < HEADER_LEN {
            return Err(TransportError::Truncated);
        }
        let (msg_type, len) = Frame::parse_header(&bytes[..HEADER_LEN])?;
        let payload = bytes
            .get(HEADER_LEN..HEADER_LEN + len)
            .ok_or(TransportError::Truncated)?
            .to_vec();
        Ok((Frame { msg_type, payload }, HEADER_LEN + len))
    }

    pub fn read_from<R: Read>(reader: &mut R) -> Result<Frame, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        reader.read_exact(&mut header)?;
        let (msg_type, len) = Frame::parse_header(&header)?;
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload)?;
        Ok(Frame { msg_type, payload })
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> Result<(), TransportError> {
        writer.write_all(&self.encode())?;
        writer.flush()?;
        Ok(())
    }

    /// Turns an `ERROR` frame into the corresponding error.
    pub fn into_result(self) -> Result<Frame, TransportError> {
        if self.kind() != Some(MsgType::Error) {
            return Ok(self);
        }
        if self.payload.len() < 2 {
            return Err(TransportError::Protocol("short error frame".into()));
        }
        let code = u16::from_le_bytes([self.payload[0], self.payload[1]]);
        let message = String::from_utf8_lossy(&self.payload[2..]).into_owned();
        Err(TransportError::Remote { code, message })
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetupRequest {
    pub scheme: u8,
    pub k: u32,
    pub p: u32,
    pub l: u32,
    pub nu: u32,
}

impl SetupRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.scheme];
        for v in [self.k, self.p, self.l, self.nu] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 17 {
            return None;
        }
        Some(SetupRequest {
            scheme: bytes[0],
            k: read_u32(bytes, 1)?,
            p: read_u32(bytes, 5)?,
            l: read_u32(bytes, 9)?,
            nu: read_u32(bytes, 13)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetupReply {
    pub k: u32,
    pub n: u32,
    pub own_p: u32,
    pub required_randomness: u32,
}

impl SetupReply {
    pub fn encode(&self) -> Vec<u8> {
        [self.k, self.n, self.own_p, self.required_randomness]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 16 {
            return None;
        }
        Some(SetupReply {
            k: read_u32(bytes, 0)?,
            n: read_u32(bytes, 4)?,
            own_p: read_u32(bytes, 8)?,
            required_randomness: read_u32(bytes, 12)?,
        })
    }
}

/// Common randomness a run needs from an entity with `n` databases.
pub fn required_randomness(setup: &SetupRequest, n: usize) -> Result<usize, SchemeError> {
    match setup.scheme {
        SCHEME_BLOCK => Ok(block_count(setup.p as usize, setup.l as usize, n)),
        SCHEME_TABLE => {
            let t = TableParameters::new(setup.k as usize, setup.p as usize, n)?;
            let nu = if setup.nu == 0 {
                t.nu.clone()
            } else {
                setup.nu.into()
            };
            let total = t.total_randomness(&nu);
            if !total.is_integer() {
                return Err(SchemeError::FractionalQuota {
                    nu: setup.nu as usize,
                });
            }
            total
                .to_integer()
                .to_usize()
                .ok_or_else(|| SchemeError::TooLarge("randomness requirement".into()))
        }
        _ => Err(SchemeError::Encoding("unknown scheme")),
    }
}

pub fn query_payload(scheme: u8, qid: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + body.len());
    out.push(scheme);
    out.extend_from_slice(&qid.to_le_bytes());
    out.extend_from_slice(body);
    out
}

pub fn answer_payload(qid: u32, answer: &SymbolVector) -> Vec<u8> {
    let mut out = qid.to_le_bytes().to_vec();
    answer.encode_into(&mut out);
    out
}

/// Splits an `ANSWER` payload into its query id and symbols.
pub fn parse_answer(field: &Field, payload: &[u8]) -> Result<(u32, SymbolVector), TransportError> {
    let qid = read_u32(payload, 0).ok_or(TransportError::Truncated)?;
    let (v, used) = SymbolVector::decode(field, &payload[4..])
        .map_err(|e| TransportError::Protocol(format!("answer: {e}")))?;
    if 4 + used != payload.len() {
        return Err(TransportError::Protocol(
            "trailing bytes after answer".into(),
        ));
    }
    Ok((qid, v))
}

#[derive(Debug)]
struct ServerState {
    store: MessageStore,
    pool: Option<CommonRandomnessPool>,
    required: Option<usize>,
    queried: bool,
    forwarded: Option<Vec<u32>>,
}

/// One replica of an entity's message library.
#[derive(Debug)]
pub struct DatabaseServer {
    entity: EntityId,
    index: usize,
    n: usize,
    own_p: usize,
    state: Mutex<ServerState>,
}

impl DatabaseServer {
    pub fn new(
        entity: EntityId,
        index: usize,
        n: usize,
        own_p: usize,
        store: MessageStore,
    ) -> Self {
        DatabaseServer {
            entity,
            index,
            n,
            own_p,
            state: Mutex::new(ServerState {
                store,
                pool: None,
                required: None,
                queried: false,
                forwarded: None,
            }),
        }
    }

    pub fn entity(&self) -> EntityId {
        self.entity
    }

    pub fn index(&self) -> usize {
        self.index
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Installs the common-randomness pool; returns its digest.
    pub fn provision(&self, pool: CommonRandomnessPool) -> Result<String, TransportError> {
        let mut st = self.lock();
        if st.queried {
            return Err(TransportError::Remote {
                code: ErrorCode::ProvisionAfterQuery as u16,
                message: format!("database {} already answered a query", self.index),
            });
        }
        if let Some(req) = st.required.filter(|&r| pool.len() < r) {
            return Err(TransportError::Remote {
                code: ErrorCode::InsufficientRandomness as u16,
                message: format!("pool of {} symbols, run needs {req}", pool.len()),
            });
        }
        let digest = pool.digest();
        st.pool = Some(pool);
        Ok(digest)
    }

    pub fn pool_digest(&self) -> Option<String> {
        self.lock().pool.as_ref().map(CommonRandomnessPool::digest)
    }

    /// The intersection the other entity forwarded, if any.
    pub fn forwarded_result(&self) -> Option<Vec<u32>> {
        self.lock().forwarded.clone()
    }

    /// Serves one frame from a client connection.
    pub fn handle(&self, frame: &Frame) -> Frame {
        match frame.kind() {
            None => Frame::error(
                ErrorCode::UnknownType,
                &format!("unknown message type {}", frame.msg_type),
            ),
            Some(MsgType::CrProvision) => Frame::error(
                ErrorCode::ChannelViolation,
                "common randomness is never accepted from a client connection",
            ),
            Some(MsgType::Setup) => self.setup(&frame.payload),
            Some(MsgType::Query) => self.query(&frame.payload),
            Some(MsgType::ResultForward) => {
                let count = read_u32(&frame.payload, 0).map(|c| c as usize);
                match count.filter(|&c| frame.payload.len() == 4 + 4 * c) {
                    Some(c) => {
                        let items = (0..c)
                            .map(|i| read_u32(&frame.payload, 4 + 4 * i).expect("length checked"))
                            .collect();
                        self.lock().forwarded = Some(items);
                        Frame::new(MsgType::ResultForward, Vec::new())
                    }
                    None => Frame::error(ErrorCode::Malformed, "bad result payload"),
                }
            }
            Some(MsgType::Answer | MsgType::Error) => Frame::error(
                ErrorCode::Malformed,
                "databases do not accept this frame type",
            ),
        }
    }

    fn setup(&self, payload: &[u8]) -> Frame {
        let Some(req) = SetupRequest::decode(payload) else {
            return Frame::error(ErrorCode::Malformed, "bad setup payload");
        };
        let mut st = self.lock();
        if req.k as usize != st.store.messages() {
            return Frame::error(
                ErrorCode::SetupMismatch,
                &format!("database holds K = {}, not {}", st.store.messages(), req.k),
            );
        }
        if req.scheme == SCHEME_BLOCK && req.l as usize != st.store.length() {
            return Frame::error(
                ErrorCode::SetupMismatch,
                &format!("database holds L = {}, not {}", st.store.length(), req.l),
            );
        }
        let required = match required_randomness(&req, self.n) {
            Ok(r) => r,
            Err(e) => return Frame::error(ErrorCode::SetupMismatch, &e.to_string()),
        };
        if let Some(pool) = st.pool.as_ref().filter(|p| p.len() < required) {
            return Frame::error(
                ErrorCode::InsufficientRandomness,
                &format!("pool of {} symbols, run needs {required}", pool.len()),
            );
        }
        st.required = Some(required);
        let reply = SetupReply {
            k: req.k,
            n: self.n as u32,
            own_p: self.own_p as u32,
            required_randomness: required as u32,
        };
        Frame::new(MsgType::Setup, reply.encode())
    }

    fn query(&self, payload: &[u8]) -> Frame {
        if payload.len() < 5 {
            return Frame::error(ErrorCode::Malformed, "short query");
        }
        let qid = read_u32(payload, 1).expect("length checked");
        let body = &payload[5..];
        let mut st = self.lock();
        let Some(pool) = st.pool.as_ref() else {
            return Frame::error(
                ErrorCode::NotInitialized,
                "no common randomness provisioned",
            );
        };
        let field = st.store.field();
        let answer = match payload[0] {
            SCHEME_TABLE => {
                TableQuery::decode(body).and_then(|q| answer_queries(&q, &st.store, pool))
            }
            SCHEME_BLOCK => BlockQuery::decode(&field, body)
                .and_then(|q| answer_block_query(&q, &st.store, pool)),
            s => return Frame::error(ErrorCode::Malformed, &format!("unknown scheme {s}")),
        };
        match answer {
            Ok(a) => {
                st.queried = true;
                Frame::new(MsgType::Answer, answer_payload(qid, &a))
            }
            Err(e) => Frame::error(ErrorCode::SchemeFault, &e.to_string()),
        }
    }
}

/// The dealer path: gives every database of one entity the same pool.
pub fn provision_cr(
    databases: &[Arc<DatabaseServer>],
    pool: &CommonRandomnessPool,
) -> Result<Vec<String>, TransportError> {
    databases
        .iter()
        .map(|db| db.provision(pool.clone()))
        .collect()
}

/// A client's link to one database.
pub trait Connection: Send {
    fn roundtrip(&mut self, frame: &Frame) -> Result<Frame, TransportError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Client,
    Database(EntityId, usize),
}

/// One frame observed on a simulated channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelRecord {
    pub from: Endpoint,
    pub to: Endpoint,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The reply to the `nth` frame sent to this database is lost.
    Drop {
        entity: EntityId,
        database: usize,
        nth: usize,
    },
    /// The `nth` frame sent to this database is delivered twice.
    Duplicate {
        entity: EntityId,
        database: usize,
        nth: usize,
    },
}

#[derive(Debug, Default)]
struct SimShared {
    log: Vec<ChannelRecord>,
    faults: Vec<Fault>,
    sent: std::collections::HashMap<(EntityId, usize), usize>,
}

/// In-process network: frames are encoded, logged and decoded exactly as on
/// a socket, delivered in program order.
#[derive(Clone, Debug)]
pub struct SimNetwork {
    databases: Vec<Arc<DatabaseServer>>,
    shared: Arc<Mutex<SimShared>>,
}

impl SimNetwork {
    pub fn new(databases: Vec<Arc<DatabaseServer>>) -> Self {
        SimNetwork {
            databases,
            shared: Arc::default(),
        }
    }

    pub fn inject(&self, fault: Fault) {
        self.shared
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .faults
            .push(fault);
    }

    pub fn log(&self) -> Vec<ChannelRecord> {
        self.shared
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .log
            .clone()
    }

    pub fn connect(
        &self,
        entity: EntityId,
        database: usize,
    ) -> Result<SimConnection, TransportError> {
        let server = self
            .databases
            .iter()
            .find(|d| d.entity == entity && d.index == database)
            .cloned()
            .ok_or_else(|| {
                TransportError::Protocol(format!("no database {database} of {entity:?}"))
            })?;
        Ok(SimConnection {
            server,
            shared: self.shared.clone(),
            inbox: VecDeque::new(),
        })
    }
}

pub struct SimConnection {
    server: Arc<DatabaseServer>,
    shared: Arc<Mutex<SimShared>>,
    inbox: VecDeque<Vec<u8>>,
}

impl Connection for SimConnection {
    fn roundtrip(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        let me = Endpoint::Database(self.server.entity, self.server.index);
        let bytes = frame.encode();
        let (nth, faults) = {
            let mut sh = self.shared.lock().unwrap_or_else(|e| e.into_inner());
            sh.log.push(ChannelRecord {
                from: Endpoint::Client,
                to: me,
                bytes: bytes.clone(),
            });
            let counter = sh
                .sent
                .entry((self.server.entity, self.server.index))
                .or_default();
            let nth = *counter;
            *counter += 1;
            (nth, sh.faults.clone())
        };
        let hit = |f: &Fault| match *f {
            Fault::Drop {
                entity,
                database,
                nth: n,
            }
            | Fault::Duplicate {
                entity,
                database,
                nth: n,
            } => entity == self.server.entity && database == self.server.index && n == nth,
        };
        let copies = if faults
            .iter()
            .any(|f| matches!(f, Fault::Duplicate { .. }) && hit(f))
        {
            2
        } else {
            1
        };
        for _ in 0..copies {
            let (request, _) = Frame::decode(&bytes)?;
            let reply = self.server.handle(&request).encode();
            self.shared
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .log
                .push(ChannelRecord {
                    from: me,
                    to: Endpoint::Client,
                    bytes: reply.clone(),
                });
            self.inbox.push_back(reply);
        }
        if faults
            .iter()
            .any(|f| matches!(f, Fault::Drop { .. }) && hit(f))
        {
            self.inbox.clear();
        }
        let Some(reply) = self.inbox.pop_front() else {
            return Err(TransportError::Timeout(self.server.index));
        };
        if !self.inbox.is_empty() {
            self.inbox.clear();
            return Err(TransportError::Protocol(format!(
                "database {} sent more than one reply",
                self.server.index
            )));
        }
        let (frame, used) = Frame::decode(&reply)?;
        if used != reply.len() {
            return Err(TransportError::Protocol("trailing bytes on channel".into()));
        }
        Ok(frame)
    }
}

/// A database served over TCP; each connection is handled sequentially on
/// its own thread.
pub struct TcpDatabase {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TcpDatabase {
    pub fn spawn<A: ToSocketAddrs>(
        server: Arc<DatabaseServer>,
        addr: A,
    ) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let server = server.clone();
                std::thread::spawn(move || serve_connection(&server, stream));
            }
        });
        Ok(TcpDatabase {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

fn serve_connection(server: &DatabaseServer, mut stream: TcpStream) {
    loop {
        let frame = match Frame::read_from(&mut stream) {
            Ok(f) => f,
            Err(TransportError::Io(_)) => return,
            Err(e) => {
                let _ = Frame::error(ErrorCode::Malformed, &e.to_string()).write_to(&mut stream);
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        };
        if server.handle(&frame).write_to(&mut stream).is_err() {
            return;
        }
    }
}

impl Drop for TcpDatabase {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub struct TcpConnection {
    stream: TcpStream,
}

impl TcpConnection {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpConnection { stream })
    }
}

impl Connection for TcpConnection {
    fn roundtrip(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        frame.write_to(&mut self.stream)?;
        Frame::read_from(&mut self.stream)
    }
}

/// Counts downloaded answer symbols, excluding framing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostMeter {
    pub symbols: u64,
}

fn now_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_micros() as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub database: u32,
    pub query: Vec<u8>,
    pub answer: Vec<u8>,
    pub sent_us: u64,
    pub received_us: u64,
}

/// What a client sent and received in one run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub seeds: Seeds,
    pub scheme: u8,
    pub k: u32,
    pub p: u32,
    pub n: u32,
    pub l: u32,
    pub q: u32,
    pub entries: Vec<TranscriptEntry>,
}

pub const TRANSCRIPT_MAGIC: [u8; 4] = *b"PSIT";

impl Transcript {
    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    /// Payloads per database, in the order sent.
    pub fn for_database(&self, db: u32) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(move |e| e.database == db)
    }

    /// Same payloads, ignoring timestamps.
    pub fn same_payloads(&self, other: &Transcript) -> bool {
        let strip = |t: &Transcript| {
            let mut v: Vec<(u32, Vec<u8>, Vec<u8>)> = t
                .entries
                .iter()
                .map(|e| (e.database, e.query.clone(), e.answer.clone()))
                .collect();
            v.sort();
            v
        };
        strip(self) == strip(other) && self.seeds == other.seeds
    }

    /// `"PSIT" | u8 version | seeds 3×u64 | u8 scheme | u32 K, P, N, L, q |
    /// u32 entries`, then per entry `u32 database | u64 sent µs | u64
    /// received µs | u32 len | query | u32 len | answer`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = TRANSCRIPT_MAGIC.to_vec();
        out.push(VERSION);
        for s in [self.seeds.client, self.seeds.cr, self.seeds.msg] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.scheme);
        for v in [
            self.k,
            self.p,
            self.n,
            self.l,
            self.q,
            self.entries.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&e.database.to_le_bytes());
            out.extend_from_slice(&e.sent_us.to_le_bytes());
            out.extend_from_slice(&e.received_us.to_le_bytes());
            out.extend_from_slice(&(e.query.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.query);
            out.extend_from_slice(&(e.answer.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.answer);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TransportError> {
            let s = bytes.get(at..at + n).ok_or(TransportError::Truncated)?;
            at += n;
            Ok(s)
        };
        if take(4)? != TRANSCRIPT_MAGIC {
            return Err(TransportError::BadMagic);
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(TransportError::BadVersion(version));
        }
        let mut u64s = [0u64; 3];
        for s in u64s.iter_mut() {
            *s = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let scheme = take(1)?[0];
        let mut u32s = [0u32; 6];
        for v in u32s.iter_mut() {
            *v = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        }
        let mut t = Transcript {
            seeds: Seeds::new(u64s[0], u64s[1], u64s[2]),
            scheme,
            k: u32s[0],
            p: u32s[1],
            n: u32s[2],
            l: u32s[3],
            q: u32s[4],
            entries: Vec::new(),
        };
        for _ in 0..u32s[5] {
            let database = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let sent_us = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let received_us = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let qlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let query = take(qlen)?.to_vec();
            let alen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let answer = take(alen)?.to_vec();
            t.entries.push(TranscriptEntry {
                database,
                query,
                answer,
                sent_us,
                received_us,
            });
        }
        if at != bytes.len() {
            return Err(TransportError::Protocol(
                "trailing bytes after transcript".into(),
            ));
        }
        Ok(t)
    }

    pub fn dump_text(&self) -> String {
        let mut out = format!(
            "# psi-spir transcript v{VERSION}\nseeds client={} cr={} msg={}\nscheme={} K={} P={} N={} L={} q={}\n",
            self.seeds.client, self.seeds.cr, self.seeds.msg, self.scheme, self.k, self.p, self.n, self.l, self.q
        );
        for e in &self.entries {
            out.push_str(&format!(
                "db={} sent_us={} received_us={}\n  query  {}\n  answer {}\n",
                e.database,
                e.sent_us,
                e.received_us,
                hex::encode(&e.query),
                hex::encode(&e.answer)
            ));
        }
        out
    }
}

/// Client side of one run against the `N` databases of one entity.
pub struct Client {
    field: Field,
    connections: Vec<Box<dyn Connection>>,
    meter: CostMeter,
    transcript: Transcript,
}

impl Client {
    pub fn new(
        field: Field,
        connections: Vec<Box<dyn Connection>>,
        transcript: Transcript,
    ) -> Self {
        Client {
            field,
            connections,
            meter: CostMeter::default(),
            transcript,
        }
    }

    pub fn databases(&self) -> usize {
        self.connections.len()
    }

    /// Sends `SETUP` to every database and checks the replies agree.
    pub fn setup(&mut self, request: &SetupRequest) -> Result<SetupReply, TransportError> {
        let frame = Frame::new(MsgType::Setup, request.encode());
        let mut first: Option<SetupReply> = None;
        for conn in self.connections.iter_mut() {
            let reply = conn.roundtrip(&frame)?.into_result()?;
            if reply.kind() != Some(MsgType::Setup) {
                return Err(TransportError::Protocol("expected a setup reply".into()));
            }
            let r = SetupReply::decode(&reply.payload)
                .ok_or_else(|| TransportError::Protocol("bad setup reply".into()))?;
            match first {
                None => first = Some(r),
                Some(f) if f != r => {
                    return Err(TransportError::Protocol(
                        "replicas disagree on setup".into(),
                    ))
                }
                _ => {}
            }
        }
        first.ok_or_else(|| TransportError::Protocol("no databases".into()))
    }

    /// Issues one query per database concurrently and collects the answers
    /// by query id.
    pub fn query_all(
        &mut self,
        scheme: u8,
        bodies: &[Vec<u8>],
    ) -> Result<Vec<SymbolVector>, TransportError> {
        if bodies.len() != self.connections.len() {
            return Err(TransportError::Protocol(
                "one query per database expected".into(),
            ));
        }
        let field = self.field;
        let results: Vec<Result<(SymbolVector, TranscriptEntry), TransportError>> =
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .connections
                    .iter_mut()
                    .zip(bodies)
                    .enumerate()
                    .map(|(db, (conn, body))| {
                        s.spawn(move || {
                            let qid = db as u32 + 1;
                            let query = query_payload(scheme, qid, body);
                            let sent_us = now_micros();
                            let reply = conn
                                .roundtrip(&Frame::new(MsgType::Query, query.clone()))?
                                .into_result()?;
                            let received_us = now_micros();
                            if reply.kind() != Some(MsgType::Answer) {
                                return Err(TransportError::Protocol("expected an answer".into()));
                            }
                            let (got, answer) = parse_answer(&field, &reply.payload)?;
                            if got != qid {
                                return Err(TransportError::Protocol(format!(
                                    "answer for query {got} arrived on the link of query {qid}"
                                )));
                            }
                            Ok((
                                answer,
                                TranscriptEntry {
                                    database: db as u32,
                                    query,
                                    answer: reply.payload,
                                    sent_us,
                                    received_us,
                                },
                            ))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(TransportError::Protocol("client thread panicked".into()))
                        })
                    })
                    .collect()
            });
        let mut answers = Vec::with_capacity(results.len());
        for r in results {
            let (a, entry) = r?;
            self.meter.symbols += a.len() as u64;
            self.transcript.push(entry);
            answers.push(a);
        }
        Ok(answers)
    }

    /// Sends the decoded result to one database of the other entity.
    pub fn forward_result(&mut self, db: usize, items: &[u32]) -> Result<(), TransportError> {
        let mut payload = (items.len() as u32).to_le_bytes().to_vec();
        for i in items {
            payload.extend_from_slice(&i.to_le_bytes());
        }
        let conn = self
            .connections
            .get_mut(db)
            .ok_or_else(|| TransportError::Protocol(format!("no database {db}")))?;
        conn.roundtrip(&Frame::new(MsgType::ResultForward, payload))?
            .into_result()?;
        Ok(())
    }

    pub fn meter(&self) -> CostMeter {
        self.meter
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn server(l: usize) -> Arc<DatabaseServer> {
        let store = MessageStore::random(Field::BINARY, 3, l, &mut stream(1, Domain::Messages));
        Arc::new(DatabaseServer::new(EntityId::E2, 0, 2, 2, store))
    }

    #[test]
    fn frame_layout_is_fixed() {
        let f = Frame::new(MsgType::Query, vec![9, 8]);
        assert_eq!(
            f.encode(),
            vec![b'P', b'S', b'I', b'1', 1, 3, 2, 0, 0, 0, 9, 8]
        );
        assert_eq!(Frame::decode(&f.encode()).unwrap(), (f.clone(), 12));
        let mut bad = f.encode();
        bad[0] = b'X';
        assert_eq!(Frame::decode(&bad), Err(TransportError::BadMagic));
        let mut bad = f.encode();
        bad[4] = 9;
        assert_eq!(Frame::decode(&bad), Err(TransportError::BadVersion(9)));
        assert_eq!(
            Frame::decode(&f.encode()[..11]),
            Err(TransportError::Truncated)
        );
    }

    #[test]
    fn unknown_type_gets_error_and_connection_survives() {
        let s = server(1);
        let net = SimNetwork::new(vec![s.clone()]);
        let mut c = net.connect(EntityId::E2, 0).unwrap();
        let reply = c
            .roundtrip(&Frame {
                msg_type: 42,
                payload: vec![],
            })
            .unwrap();
        assert!(matches!(
            reply.into_result(),
            Err(TransportError::Remote { code: 1, .. })
        ));
        let setup = SetupRequest {
            scheme: SCHEME_BLOCK,
            k: 3,
            p: 1,
            l: 1,
            nu: 0,
        };
        let reply = c
            .roundtrip(&Frame::new(MsgType::Setup, setup.encode()))
            .unwrap()
            .into_result()
            .unwrap();
        assert_eq!(
            SetupReply::decode(&reply.payload)
                .unwrap()
                .required_randomness,
            1
        );
    }

    #[test]
    fn provisioning_rules() {
        let s = server(1);
        let reply = s.handle(&Frame::new(MsgType::CrProvision, vec![0; 4]));
        assert!(matches!(
            reply.into_result(),
            Err(TransportError::Remote { code: 6, .. })
        ));
        let setup = SetupRequest {
            scheme: SCHEME_BLOCK,
            k: 3,
            p: 2,
            l: 1,
            nu: 0,
        };
        s.handle(&Frame::new(MsgType::Setup, setup.encode()))
            .into_result()
            .unwrap();
        let small = CommonRandomnessPool::new(SymbolVector::zeros(1));
        assert!(matches!(
            s.provision(small),
            Err(TransportError::Remote { code: 5, .. })
        ));
        let pool = CommonRandomnessPool::generate(
            &Field::BINARY,
            2,
            &mut stream(1, Domain::CommonRandomness),
        );
        s.provision(pool.clone()).unwrap();
        let body = BlockQuery::default().encode();
        let reply = s.handle(&Frame::new(
            MsgType::Query,
            query_payload(SCHEME_BLOCK, 1, &body),
        ));
        reply.into_result().unwrap();
        assert!(matches!(
            s.provision(pool),
            Err(TransportError::Remote { code: 4, .. })
        ));
    }

    #[test]
    fn dealer_gives_identical_pools() {
        let store = MessageStore::random(Field::BINARY, 3, 1, &mut stream(1, Domain::Messages));
        let dbs: Vec<_> = (0..2)
            .map(|i| Arc::new(DatabaseServer::new(EntityId::E1, i, 2, 1, store.clone())))
            .collect();
        let pool = CommonRandomnessPool::generate(
            &Field::BINARY,
            4,
            &mut stream(3, Domain::CommonRandomness),
        );
        let digests = provision_cr(&dbs, &pool).unwrap();
        assert_eq!(digests[0], digests[1]);
        assert_eq!(dbs[1].pool_digest(), Some(pool.digest()));
    }

    #[test]
    fn query_before_provisioning_is_refused() {
        let s = server(1);
        let reply = s.handle(&Frame::new(
            MsgType::Query,
            query_payload(SCHEME_BLOCK, 1, &[0, 0, 0, 0]),
        ));
        assert!(matches!(
            reply.into_result(),
            Err(TransportError::Remote { code: 3, .. })
        ));
        let reply = s.handle(&Frame::new(MsgType::Query, vec![1]));
        assert!(matches!(
            reply.into_result(),
            Err(TransportError::Remote { code: 2, .. })
        ));
    }

    #[test]
    fn transcript_roundtrips() {
        let mut t = Transcript {
            seeds: Seeds::new(1, 2, 3),
            scheme: SCHEME_BLOCK,
            k: 10,
            p: 4,
            n: 2,
            l: 1,
            q: 2,
            entries: vec![],
        };
        t.push(TranscriptEntry {
            database: 1,
            query: vec![1, 2, 3],
            answer: vec![4],
            sent_us: 5,
            received_us: 6,
        });
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"PSIT");
        assert_eq!(Transcript::decode(&bytes).unwrap(), t);
        assert!(Transcript::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(t.dump_text().contains("query  010203"));
    }

    #[test]
    fn faults_surface_as_errors() {
        let s = server(1);
        let pool = CommonRandomnessPool::new(SymbolVector::zeros(1));
        s.provision(pool).unwrap();
        let net = SimNetwork::new(vec![s]);
        net.inject(Fault::Drop {
            entity: EntityId::E2,
            database: 0,
            nth: 0,
        });
        net.inject(Fault::Duplicate {
            entity: EntityId::E2,
            database: 0,
            nth: 1,
        });
        let mut c = net.connect(EntityId::E2, 0).unwrap();
        let q = Frame::new(
            MsgType::Query,
            query_payload(SCHEME_BLOCK, 1, &BlockQuery::default().encode()),
        );
        assert_eq!(c.roundtrip(&q), Err(TransportError::Timeout(0)));
        assert!(matches!(c.roundtrip(&q), Err(TransportError::Protocol(_))));
        assert!(c.roundtrip(&q).is_ok());
    }

    #[test]
    fn tcp_roundtrip_matches_direct_handling() {
        let s = server(1);
        s.provision(CommonRandomnessPool::new(SymbolVector::zeros(1)))
            .unwrap();
        let tcp = TcpDatabase::spawn(s.clone(), "127.0.0.1:0").unwrap();
        let mut c = TcpConnection::connect(tcp.addr(), Duration::from_secs(5)).unwrap();
        let f = Frame {
            msg_type: 77,
            payload: vec![1],
        };
        assert_eq!(c.roundtrip(&f).unwrap(), s.handle(&f));
        let setup = Frame::new(
            MsgType::Setup,
            SetupRequest {
                scheme: SCHEME_BLOCK,
                k: 3,
                p: 1,
                l: 1,
                nu: 0,
            }
            .encode(),
        );
        assert_eq!(c.roundtrip(&setup).unwrap(), s.handle(&setup));
    }
}
