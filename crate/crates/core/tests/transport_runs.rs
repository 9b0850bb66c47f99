use std::sync::Arc;
use std::time::Duration;

use psi_spir::field::Field;
use psi_spir::psi::EntityId;
use psi_spir::rng::{stream, Domain, Seeds};
use psi_spir::scheme::IndexSet;
use psi_spir::store::{CommonRandomnessPool, MessageStore};
use psi_spir::table::{build_query_table, Repetition, TableStructure};
use psi_spir::transport::{
    provision_cr, Client, Connection, DatabaseServer, Endpoint, MsgType, SetupRequest, SimNetwork,
    TcpConnection, TcpDatabase, Transcript, TransportError, SCHEME_TABLE,
};

struct Run {
    transcript: Transcript,
    symbols: u64,
    decoded: Vec<Vec<u32>>,
    truth: Vec<u32>,
}

/// K=3, P=1, N=3 through the full wire protocol over the given connections.
fn k3_p1_n3(dbs: &[Arc<DatabaseServer>], conns: Vec<Box<dyn Connection>>, seeds: Seeds) -> Run {
    let field = Field::new(3).unwrap();
    let desired = IndexSet::new(3, [1]).unwrap();
    let structure = TableStructure::build(3, 1, 3, &desired, Repetition::Balanced).unwrap();
    let params = structure.scheme_params(3).unwrap();
    let mut client = Client::new(
        field,
        conns,
        Transcript {
            seeds,
            scheme: SCHEME_TABLE,
            k: 3,
            p: 1,
            n: 3,
            l: params.l as u32,
            q: 3,
            entries: vec![],
        },
    );
    let setup = client
        .setup(&SetupRequest {
            scheme: SCHEME_TABLE,
            k: 3,
            p: 1,
            l: params.l as u32,
            nu: 0,
        })
        .unwrap();
    assert_eq!(setup.required_randomness, 27);
    let pool = CommonRandomnessPool::generate(&field, 27, &mut seeds.cr_rng());
    let digests = provision_cr(dbs, &pool).unwrap();
    assert!(digests.iter().all(|d| d == &digests[0]));
    let table = build_query_table(
        &params,
        &desired,
        Repetition::Balanced,
        &mut seeds.client_rng(),
    )
    .unwrap();
    let bodies: Vec<Vec<u8>> = table.queries().iter().map(|q| q.encode()).collect();
    let answers = client.query_all(SCHEME_TABLE, &bodies).unwrap();
    let decoded = table
        .decode(&answers)
        .unwrap()
        .into_iter()
        .map(|r| r.symbols.into_iter().map(|s| s.unwrap().value()).collect())
        .collect();
    let store = MessageStore::random(field, 3, params.l, &mut seeds.msg_rng());
    Run {
        symbols: client.meter().symbols,
        transcript: client.into_transcript(),
        decoded,
        truth: store
            .message(1)
            .unwrap()
            .iter()
            .map(|s| s.value())
            .collect(),
    }
}

fn databases(seeds: Seeds) -> Vec<Arc<DatabaseServer>> {
    let store = MessageStore::random(Field::new(3).unwrap(), 3, 54, &mut seeds.msg_rng());
    (0..3)
        .map(|i| Arc::new(DatabaseServer::new(EntityId::E2, i, 3, 0, store.clone())))
        .collect()
}

#[test]
fn table_scheme_over_sim_and_tcp_gives_identical_transcripts() {
    let seeds = Seeds::new(11, 12, 13);
    let dbs = databases(seeds);
    let sim = SimNetwork::new(dbs.clone());
    let conns: Vec<Box<dyn Connection>> = (0..3)
        .map(|i| Box::new(sim.connect(EntityId::E2, i).unwrap()) as Box<dyn Connection>)
        .collect();
    let a = k3_p1_n3(&dbs, conns, seeds);
    assert_eq!(a.decoded, vec![a.truth.clone()]);
    assert_eq!(a.symbols, 81);

    for rec in sim.log() {
        assert!(rec.from == Endpoint::Client || rec.to == Endpoint::Client);
        let (frame, _) = psi_spir::transport::Frame::decode(&rec.bytes).unwrap();
        assert_ne!(frame.kind(), Some(MsgType::CrProvision));
    }

    let dbs = databases(seeds);
    let servers: Vec<TcpDatabase> = dbs
        .iter()
        .map(|d| TcpDatabase::spawn(d.clone(), "127.0.0.1:0").unwrap())
        .collect();
    let conns: Vec<Box<dyn Connection>> = servers
        .iter()
        .map(|s| {
            Box::new(TcpConnection::connect(s.addr(), Duration::from_secs(10)).unwrap())
                as Box<dyn Connection>
        })
        .collect();
    let b = k3_p1_n3(&dbs, conns, seeds);
    assert_eq!(b.decoded, a.decoded);
    assert!(a.transcript.same_payloads(&b.transcript));
}

#[test]
fn replaying_a_query_gives_identical_answer_bytes() {
    let seeds = Seeds::new(1, 2, 3);
    let dbs = databases(seeds);
    let sim = SimNetwork::new(dbs.clone());
    let conns: Vec<Box<dyn Connection>> = (0..3)
        .map(|i| Box::new(sim.connect(EntityId::E2, i).unwrap()) as Box<dyn Connection>)
        .collect();
    let run = k3_p1_n3(&dbs, conns, seeds);
    for e in &run.transcript.entries {
        let f = psi_spir::transport::Frame::new(MsgType::Query, e.query.clone());
        let again = dbs[e.database as usize].handle(&f);
        assert_eq!(again.payload, e.answer);
    }
}

#[test]
fn undersized_pool_is_refused_at_setup() {
    let seeds = Seeds::new(1, 2, 3);
    let dbs = databases(seeds);
    let small = CommonRandomnessPool::generate(
        &Field::new(3).unwrap(),
        26,
        &mut stream(1, Domain::CommonRandomness),
    );
    provision_cr(&dbs, &small).unwrap();
    let sim = SimNetwork::new(dbs.clone());
    let conns: Vec<Box<dyn Connection>> = (0..3)
        .map(|i| Box::new(sim.connect(EntityId::E2, i).unwrap()) as Box<dyn Connection>)
        .collect();
    let mut client = Client::new(Field::new(3).unwrap(), conns, Transcript::default());
    let err = client
        .setup(&SetupRequest {
            scheme: SCHEME_TABLE,
            k: 3,
            p: 1,
            l: 54,
            nu: 0,
        })
        .unwrap_err();
    assert!(
        matches!(err, TransportError::Remote { code: 5, .. }),
        "{err}"
    );
}
