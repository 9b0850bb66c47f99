//! Private set intersection between two entities.
//!
//! Each entity stores the incidence vector of its set over a universe of
//! `K` elements, bit per message, on `N_i` replicated databases. The
//! initiating entity retrieves the bits at its own elements from the
//! responder with the block scheme, so it learns exactly which of its
//! elements the responder holds and nothing else.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::block::{decode_blocks, plan_blocks};
use crate::field::{Field, SymbolVector};
use crate::params::{psi_optimal_cost, ParamsError, SchemeParams};
use crate::rng::{stream, Domain, Seeds};
use crate::scheme::{IndexSet, SchemeError};
use crate::store::{CommonRandomnessPool, MessageStore};
use crate::transport::{
    provision_cr, Client, Connection, DatabaseServer, SetupRequest, SimNetwork, TcpConnection,
    TcpDatabase, Transcript, TransportError, SCHEME_BLOCK,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EntityId {
    E1,
    E2,
}

impl EntityId {
    pub fn other(self) -> EntityId {
        match self {
            EntityId::E1 => EntityId::E2,
            EntityId::E2 => EntityId::E1,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for EntityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntityId::E1 => "E1",
            EntityId::E2 => "E2",
        })
    }
}

#[derive(Debug, Error)]
pub enum PsiError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("element {element} outside the universe [0, {k})")]
    OutOfRange { element: usize, k: usize },
    #[error("entities disagree on the universe size: {0} vs {1}")]
    UniverseMismatch(usize, usize),
    #[error("{0}")]
    Format(String),
    #[error("handshake mismatch: {0}")]
    Handshake(String),
    #[error("transcript does not replay: {0}")]
    Replay(String),
}

/// One entity: a set over `[0, K)` stored on `n` databases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityConfig {
    pub id: EntityId,
    pub k: usize,
    pub n: usize,
    pub set: BTreeSet<usize>,
}

impl EntityConfig {
    pub fn new(id: EntityId, k: usize, n: usize, set: BTreeSet<usize>) -> Result<Self, PsiError> {
        if n == 0 {
            return Err(ParamsError::TooFewDatabases(0).into());
        }
        if let Some(&element) = set.iter().find(|&&e| e >= k) {
            return Err(PsiError::OutOfRange { element, k });
        }
        Ok(EntityConfig { id, k, n, set })
    }

    pub fn p(&self) -> usize {
        self.set.len()
    }

    pub fn incidence(&self) -> IncidenceVector {
        to_incidence(&self.set, self.k).expect("validated on construction")
    }
}

/// Includes each element of `[0, k)` independently with probability `q`.
pub fn generate_set<R: Rng + ?Sized>(k: usize, q: f64, rng: &mut R) -> BTreeSet<usize> {
    (0..k).filter(|_| rng.gen_bool(q)).collect()
}

/// Sets for both entities from one seed on the set-generation stream.
pub fn generate_sets(k: usize, q1: f64, q2: f64, seed: u64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut rng = stream(seed, Domain::SetGeneration);
    let a = generate_set(k, q1, &mut rng);
    let b = generate_set(k, q2, &mut rng);
    (a, b)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IncidenceVector {
    bits: Vec<bool>,
}

pub fn to_incidence(set: &BTreeSet<usize>, k: usize) -> Result<IncidenceVector, PsiError> {
    let mut bits = vec![false; k];
    for &e in set {
        *bits
            .get_mut(e)
            .ok_or(PsiError::OutOfRange { element: e, k })? = true;
    }
    Ok(IncidenceVector { bits })
}

impl IncidenceVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        IncidenceVector { bits }
    }

    pub fn universe(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn weight(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_set(&self) -> BTreeSet<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// `K` messages of length one over GF(2).
    pub fn to_store(&self) -> MessageStore {
        let field = Field::BINARY;
        let symbols = SymbolVector::new(
            self.bits
                .iter()
                .map(|&b| if b { field.one() } else { field.zero() })
                .collect(),
        );
        MessageStore::new(field, self.bits.len(), 1, symbols).expect("K·1 symbols")
    }

    pub fn bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bits(s: &str) -> Result<Self, PsiError> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(PsiError::Format(format!(
                    "unexpected character {other:?} in bit string"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(IncidenceVector::from_bits)
    }
}

pub const FORMAT_VERSION: u32 = 1;

fn parse_header(text: &str, kind: &str) -> Result<(usize, Vec<String>), PsiError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PsiError::Format(format!("empty {kind} file")))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    match fields.as_slice() {
        ["#", "psi-spir", k, v, universe] if *k == kind => {
            let version = v
                .strip_prefix('v')
                .and_then(|v| v.parse::<u32>().ok())
                .ok_or_else(|| PsiError::Format(format!("bad version {v:?}")))?;
            if version != FORMAT_VERSION {
                return Err(PsiError::Format(format!(
                    "unsupported {kind} file version {version}"
                )));
            }
            let k = universe
                .strip_prefix("K=")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| PsiError::Format(format!("bad universe field {universe:?}")))?;
            let body = lines
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect();
            Ok((k, body))
        }
        _ => Err(PsiError::Format(format!(
            "expected header `# psi-spir {kind} v{FORMAT_VERSION} K=<k>`"
        ))),
    }
}

/// Header line then one 0-based element per line.
pub fn write_set_file(set: &BTreeSet<usize>, k: usize) -> String {
    let mut out = format!("# psi-spir set v{FORMAT_VERSION} K={k}\n");
    for e in set {
        out.push_str(&format!("{e}\n"));
    }
    out
}

pub fn read_set_file(text: &str) -> Result<(usize, BTreeSet<usize>), PsiError> {
    let (k, lines) = parse_header(text, "set")?;
    let mut set = BTreeSet::new();
    for l in lines {
        let e: usize = l
            .parse()
            .map_err(|_| PsiError::Format(format!("bad element {l:?}")))?;
        if e >= k {
            return Err(PsiError::OutOfRange { element: e, k });
        }
        set.insert(e);
    }
    Ok((k, set))
}

pub fn write_incidence_file(v: &IncidenceVector) -> String {
    format!(
        "# psi-spir incidence v{FORMAT_VERSION} K={}\n{}\n",
        v.universe(),
        v.bit_string()
    )
}

pub fn read_incidence_file(text: &str) -> Result<IncidenceVector, PsiError> {
    let (k, lines) = parse_header(text, "incidence")?;
    let v = IncidenceVector::parse_bits(&lines.concat())?;
    if v.universe() != k {
        return Err(PsiError::Format(format!(
            "bit string has {} bits, header says K={k}",
            v.universe()
        )));
    }
    Ok(v)
}

/// The replicated databases of both entities.
#[derive(Clone, Debug)]
pub struct Deployment {
    databases: [Vec<Arc<DatabaseServer>>; 2],
}

impl Deployment {
    pub fn new(e1: &EntityConfig, e2: &EntityConfig) -> Result<Self, PsiError> {
        if e1.k != e2.k {
            return Err(PsiError::UniverseMismatch(e1.k, e2.k));
        }
        let make = |e: &EntityConfig| {
            let store = e.incidence().to_store();
            (0..e.n)
                .map(|i| Arc::new(DatabaseServer::new(e.id, i, e.n, e.p(), store.clone())))
                .collect::<Vec<_>>()
        };
        let mut databases = [Vec::new(), Vec::new()];
        databases[e1.id.slot()] = make(e1);
        databases[e2.id.slot()] = make(e2);
        Ok(Deployment { databases })
    }

    pub fn entity(&self, id: EntityId) -> &[Arc<DatabaseServer>] {
        &self.databases[id.slot()]
    }

    pub fn all(&self) -> Vec<Arc<DatabaseServer>> {
        self.databases.iter().flatten().cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Sim,
    /// Loopback TCP; port 0 picks ephemeral ports, otherwise databases
    /// listen on consecutive ports from the given one.
    Tcp(SocketAddr),
}

/// A running network over a deployment.
pub enum Network {
    Sim(SimNetwork),
    Tcp(Vec<(EntityId, usize, TcpDatabase)>),
}

pub const TCP_TIMEOUT: Duration = Duration::from_secs(10);

impl Network {
    pub fn start(deployment: &Deployment, backend: Backend) -> Result<Self, PsiError> {
        match backend {
            Backend::Sim => Ok(Network::Sim(SimNetwork::new(deployment.all()))),
            Backend::Tcp(base) => {
                let mut servers = Vec::new();
                for (i, db) in deployment.all().into_iter().enumerate() {
                    let mut addr = base;
                    if base.port() != 0 {
                        let port = u16::try_from(base.port() as usize + i)
                            .map_err(|_| PsiError::Format("listen port range overflows".into()))?;
                        addr.set_port(port);
                    }
                    let (entity, index) = (db.entity(), db.index());
                    servers.push((entity, index, TcpDatabase::spawn(db, addr)?));
                }
                Ok(Network::Tcp(servers))
            }
        }
    }

    pub fn connect(
        &self,
        entity: EntityId,
        db: usize,
    ) -> Result<Box<dyn Connection>, TransportError> {
        match self {
            Network::Sim(net) => Ok(Box::new(net.connect(entity, db)?)),
            Network::Tcp(servers) => {
                let (_, _, server) = servers
                    .iter()
                    .find(|(e, i, _)| *e == entity && *i == db)
                    .ok_or_else(|| {
                        TransportError::Protocol(format!("no database {db} of {entity}"))
                    })?;
                Ok(Box::new(TcpConnection::connect(
                    server.addr(),
                    TCP_TIMEOUT,
                )?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PsiResult {
    pub intersection: BTreeSet<usize>,
    pub initiator: EntityId,
    /// answer symbols actually downloaded, one bit each
    pub download_bits: u64,
    /// the optimal cost for the two entities' public sizes
    pub expected_cost: u64,
    pub randomness: usize,
    pub transcript: Transcript,
}

/// Runs the protocol on fresh databases over the chosen backend.
pub fn run_psi(
    e1: &EntityConfig,
    e2: &EntityConfig,
    seeds: Seeds,
    backend: Backend,
) -> Result<PsiResult, PsiError> {
    let deployment = Deployment::new(e1, e2)?;
    let network = Network::start(&deployment, backend)?;
    run_psi_over(&deployment, &network, e1, e2, seeds, false)
}

/// Runs the protocol on an existing deployment and network.
///
/// The entities agree on the direction from their public `(P_i, N_i)`; the
/// initiator's `SETUP` to each responder database must echo the responder's
/// announced size and replica count. The responder's dealer then provisions
/// the common randomness, and the initiator queries all databases at once.
pub fn run_psi_over(
    deployment: &Deployment,
    network: &Network,
    e1: &EntityConfig,
    e2: &EntityConfig,
    seeds: Seeds,
    forward_result: bool,
) -> Result<PsiResult, PsiError> {
    if e1.k != e2.k {
        return Err(PsiError::UniverseMismatch(e1.k, e2.k));
    }
    let (expected_cost, initiator) =
        psi_optimal_cost(e1.p() as u64, e1.n as u64, e2.p() as u64, e2.n as u64)?;
    let (init, resp) = if initiator == EntityId::E1 {
        (e1, e2)
    } else {
        (e2, e1)
    };
    let k = init.k;
    let mut transcript = Transcript {
        seeds,
        scheme: SCHEME_BLOCK,
        k: k as u32,
        p: init.p() as u32,
        n: resp.n as u32,
        l: 1,
        q: 2,
        entries: Vec::new(),
    };
    if init.p() == 0 {
        return Ok(PsiResult {
            intersection: BTreeSet::new(),
            initiator,
            download_bits: 0,
            expected_cost,
            randomness: 0,
            transcript,
        });
    }
    let connections = (0..resp.n)
        .map(|db| network.connect(resp.id, db))
        .collect::<Result<Vec<_>, _>>()?;
    transcript.entries.clear();
    let mut client = Client::new(Field::BINARY, connections, transcript);
    let setup = client.setup(&SetupRequest {
        scheme: SCHEME_BLOCK,
        k: k as u32,
        p: init.p() as u32,
        l: 1,
        nu: 0,
    })?;
    if setup.n as usize != resp.n || setup.own_p as usize != resp.p() {
        return Err(PsiError::Handshake(format!(
            "responder announced (P, N) = ({}, {}), databases report ({}, {})",
            resp.p(),
            resp.n,
            setup.own_p,
            setup.n
        )));
    }
    let params = SchemeParams::new(k, init.p(), resp.n, 1, 2)?;
    let pool = CommonRandomnessPool::generate(
        &params.field,
        setup.required_randomness as usize,
        &mut seeds.cr_rng(),
    );
    provision_cr(deployment.entity(resp.id), &pool)?;
    let desired = IndexSet::new(k, init.set.iter().copied())?;
    let (plan, queries) = plan_blocks(&params, &desired, &mut seeds.client_rng())?;
    let bodies: Vec<Vec<u8>> = queries.iter().map(|q| q.encode()).collect();
    let answers = client.query_all(SCHEME_BLOCK, &bodies)?;
    let retrieved = decode_blocks(&plan, &answers)?;
    let mut intersection = BTreeSet::new();
    for r in &retrieved {
        match r.symbols.first().copied().flatten() {
            Some(bit) if !bit.is_zero() => {
                intersection.insert(r.message);
            }
            Some(_) => {}
            None => {
                return Err(PsiError::Scheme(SchemeError::Decode(format!(
                    "bit of element {} not recovered",
                    r.message
                ))))
            }
        }
    }
    if forward_result {
        let items: Vec<u32> = intersection.iter().map(|&e| e as u32).collect();
        client.forward_result(0, &items)?;
    }
    let download_bits = client.meter().symbols;
    Ok(PsiResult {
        intersection,
        initiator,
        download_bits,
        expected_cost,
        randomness: pool.len(),
        transcript: client.into_transcript(),
    })
}

/// Replays a saved run on fresh simulated databases and checks every
/// query and answer byte matches. Returns the intersection.
pub fn verify_transcript(
    transcript: &Transcript,
    e1: &EntityConfig,
    e2: &EntityConfig,
) -> Result<BTreeSet<usize>, PsiError> {
    let replay = run_psi(e1, e2, transcript.seeds, Backend::Sim)?;
    let t = &replay.transcript;
    if (t.k, t.p, t.n, t.l, t.q, t.scheme)
        != (
            transcript.k,
            transcript.p,
            transcript.n,
            transcript.l,
            transcript.q,
            transcript.scheme,
        )
    {
        return Err(PsiError::Replay("run parameters differ".into()));
    }
    if !t.same_payloads(transcript) {
        return Err(PsiError::Replay("query or answer bytes differ".into()));
    }
    let truth: BTreeSet<usize> = e1.set.intersection(&e2.set).copied().collect();
    if replay.intersection != truth {
        return Err(PsiError::Replay("decoded intersection is wrong".into()));
    }
    Ok(replay.intersection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Endpoint, Fault, Frame, MsgType};

    fn small_pair() -> (EntityConfig, EntityConfig) {
        let e1 = EntityConfig::new(EntityId::E1, 10, 2, [0, 1, 2, 3].into()).unwrap();
        let e2 = EntityConfig::new(EntityId::E2, 10, 2, [0, 2, 4, 5, 6, 7].into()).unwrap();
        (e1, e2)
    }

    #[test]
    fn incidence_vectors() {
        let (e1, e2) = small_pair();
        assert_eq!(e1.incidence().bit_string(), "1111000000");
        assert_eq!(e2.incidence().bit_string(), "1010111100");
        assert_eq!(e2.incidence().weight(), 6);
        assert!(matches!(
            to_incidence(&[10].into(), 10),
            Err(PsiError::OutOfRange { element: 10, k: 10 })
        ));
    }

    #[test]
    fn small_pair_run() {
        let (e1, e2) = small_pair();
        let r = run_psi(&e1, &e2, Seeds::new(1, 2, 3), Backend::Sim).unwrap();
        assert_eq!(r.intersection, [0, 2].into());
        assert_eq!(r.initiator, EntityId::E1);
        assert_eq!((r.download_bits, r.expected_cost, r.randomness), (8, 8, 4));
    }

    #[test]
    fn edge_sets() {
        let empty = EntityConfig::new(EntityId::E1, 6, 2, BTreeSet::new()).unwrap();
        let full = EntityConfig::new(EntityId::E2, 6, 3, (0..6).collect()).unwrap();
        let r = run_psi(&empty, &full, Seeds::new(1, 1, 1), Backend::Sim).unwrap();
        assert!(r.intersection.is_empty());
        assert_eq!(r.download_bits, 0);
        let same = EntityConfig::new(EntityId::E1, 6, 2, (0..6).collect()).unwrap();
        let r = run_psi(&same, &full, Seeds::new(1, 1, 1), Backend::Sim).unwrap();
        assert_eq!(r.intersection, (0..6).collect());
        let disjoint = EntityConfig::new(EntityId::E1, 6, 2, [0, 1].into()).unwrap();
        let other = EntityConfig::new(EntityId::E2, 6, 2, [2, 3, 4].into()).unwrap();
        let r = run_psi(&disjoint, &other, Seeds::new(4, 5, 6), Backend::Sim).unwrap();
        assert!(r.intersection.is_empty());
    }

    #[test]
    fn file_formats_roundtrip() {
        let set: BTreeSet<usize> = [0, 3, 9].into();
        let text = write_set_file(&set, 10);
        assert!(text.starts_with("# psi-spir set v1 K=10\n"));
        assert_eq!(read_set_file(&text).unwrap(), (10, set.clone()));
        assert!(read_set_file("# psi-spir set v2 K=10\n1\n").is_err());
        assert!(read_set_file("# psi-spir set v1 K=3\n5\n").is_err());
        let inc = to_incidence(&set, 10).unwrap();
        assert_eq!(
            read_incidence_file(&write_incidence_file(&inc)).unwrap(),
            inc
        );
        assert!(read_incidence_file("# psi-spir incidence v1 K=4\n101\n").is_err());
    }

    #[test]
    fn queries_never_leave_their_channel_and_faults_surface() {
        let (e1, e2) = small_pair();
        let d = Deployment::new(&e1, &e2).unwrap();
        let net = Network::start(&d, Backend::Sim).unwrap();
        run_psi_over(&d, &net, &e1, &e2, Seeds::new(7, 8, 9), true).unwrap();
        let Network::Sim(sim) = &net else {
            unreachable!()
        };
        for rec in sim.log() {
            assert!(rec.from == Endpoint::Client || rec.to == Endpoint::Client);
        }
        let queries: Vec<_> = sim
            .log()
            .into_iter()
            .filter(|r| Frame::decode(&r.bytes).unwrap().0.kind() == Some(MsgType::Query))
            .collect();
        assert_eq!(queries.len(), 2);
        assert_ne!(queries[0].to, queries[1].to);
        assert_eq!(
            d.entity(EntityId::E2)[0].forwarded_result(),
            Some(vec![0, 2])
        );

        let d = Deployment::new(&e1, &e2).unwrap();
        let net = Network::start(&d, Backend::Sim).unwrap();
        let Network::Sim(sim) = &net else {
            unreachable!()
        };
        sim.inject(Fault::Drop {
            entity: EntityId::E2,
            database: 1,
            nth: 1,
        });
        assert!(matches!(
            run_psi_over(&d, &net, &e1, &e2, Seeds::new(7, 8, 9), false),
            Err(PsiError::Transport(TransportError::Timeout(1)))
        ));
    }

    #[test]
    fn replay_detects_tampering() {
        let (e1, e2) = small_pair();
        let r = run_psi(&e1, &e2, Seeds::new(3, 3, 3), Backend::Sim).unwrap();
        assert_eq!(
            verify_transcript(&r.transcript, &e1, &e2).unwrap(),
            [0, 2].into()
        );
        let mut bad = r.transcript.clone();
        let last = bad.entries[0].answer.len() - 1;
        bad.entries[0].answer[last] ^= 1;
        assert!(matches!(
            verify_transcript(&bad, &e1, &e2),
            Err(PsiError::Replay(_))
        ));
    }
}
