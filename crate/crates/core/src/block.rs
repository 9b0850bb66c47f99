//! The one-round block-linear scheme for a fixed message length.
//!
//! The `P·L` desired coordinates are shuffled into blocks of width at most
//! `N−1`. Block `j` draws a uniform base vector `c_j`; its base database
//! returns `⟨c_j, W⟩ + s_j` and each remaining participant returns
//! `⟨c_j + e_t, W⟩ + s_j` for one desired coordinate `t`. Subtracting the base
//! answer leaves `W_t`. Base duty rotates over the databases.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::field::{Field, FieldElement, SymbolVector};
use crate::params::SchemeParams;
use crate::scheme::{IndexSet, RetrievedMessage, SchemeError};
use crate::store::{CommonRandomnessPool, MessageStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMutation {
    /// Probes are bare basis vectors and bases are zero.
    UnmaskedProbe,
    /// Answers carry no common randomness.
    NoCommonRandomness,
}

/// The client's private randomness: an ordering of the desired coordinates
/// and one base vector per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRandomness {
    pub order: Vec<usize>,
    pub bases: Vec<SymbolVector>,
}

/// Number of blocks for `p·l` desired symbols over `n` databases.
pub fn block_count(p: usize, l: usize, n: usize) -> usize {
    (p * l).div_ceil(n - 1)
}

impl BlockRandomness {
    pub fn sample<R: Rng + ?Sized>(params: &SchemeParams, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..params.p * params.l).collect();
        order.shuffle(rng);
        let bases = (0..block_count(params.p, params.l, params.n))
            .map(|_| params.field.sample_uniform(rng, params.k * params.l))
            .collect();
        BlockRandomness { order, bases }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub database: usize,
    pub entry: usize,
    /// global coordinate `message·L + index`
    pub coordinate: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub base_database: usize,
    pub base_entry: usize,
    pub probes: Vec<Probe>,
    pub cr: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    params: SchemeParams,
    desired: IndexSet,
    blocks: Vec<Block>,
    answer_lens: Vec<usize>,
}

impl BlockPlan {
    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn desired(&self) -> &IndexSet {
        &self.desired
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Answer symbols over all databases.
    pub fn downloads(&self) -> usize {
        self.answer_lens.iter().sum()
    }

    pub fn randomness(&self) -> usize {
        self.blocks.len()
    }

    pub fn answer_len(&self, db: usize) -> usize {
        self.answer_lens[db]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockEntry {
    pub block: u32,
    pub cr: Option<u32>,
    pub vector: SymbolVector,
}

/// The vectors one database must evaluate, in block order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockQuery {
    pub entries: Vec<BlockEntry>,
}

impl BlockQuery {
    /// `u32 count`, then per entry `u32 block`, `u8 masked`, `u32 id` and the
    /// vector's canonical encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.block.to_le_bytes());
            out.push(u8::from(e.cr.is_some()));
            out.extend_from_slice(&e.cr.unwrap_or(0).to_le_bytes());
            e.vector.encode_into(&mut out);
        }
        out
    }

    pub fn decode(field: &Field, bytes: &[u8]) -> Result<Self, SchemeError> {
        let word = |at: usize| -> Result<u32, SchemeError> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or(SchemeError::Encoding("truncated block query"))
        };
        let count = word(0)? as usize;
        if count > bytes.len() / 13 {
            return Err(SchemeError::Encoding("entry count exceeds payload"));
        }
        let mut at = 4;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let block = word(at)?;
            let masked = match bytes.get(at + 4) {
                Some(0) => false,
                Some(1) => true,
                Some(_) => return Err(SchemeError::Encoding("bad mask flag")),
                None => return Err(SchemeError::Encoding("truncated block query")),
            };
            let id = word(at + 5)?;
            at += 9;
            let (vector, used) = SymbolVector::decode(field, &bytes[at..])?;
            at += used;
            entries.push(BlockEntry {
                block,
                cr: masked.then_some(id),
                vector,
            });
        }
        if at != bytes.len() {
            return Err(SchemeError::Encoding("trailing bytes after block query"));
        }
        Ok(BlockQuery { entries })
    }
}

fn check_desired(params: &SchemeParams, desired: &IndexSet) -> Result<(), SchemeError> {
    if desired.universe() != params.k {
        return Err(SchemeError::IndexOutOfRange {
            index: desired.universe(),
            k: params.k,
        });
    }
    if desired.len() != params.p {
        return Err(SchemeError::WrongDesiredCount {
            expected: params.p,
            got: desired.len(),
        });
    }
    Ok(())
}

pub fn plan_blocks<R: Rng + ?Sized>(
    params: &SchemeParams,
    desired: &IndexSet,
    rng: &mut R,
) -> Result<(BlockPlan, Vec<BlockQuery>), SchemeError> {
    check_desired(params, desired)?;
    let randomness = BlockRandomness::sample(params, rng);
    plan_blocks_with(params, desired, &randomness, None)
}

/// Deterministic planning from explicit client randomness.
pub fn plan_blocks_with(
    params: &SchemeParams,
    desired: &IndexSet,
    randomness: &BlockRandomness,
    mutation: Option<BlockMutation>,
) -> Result<(BlockPlan, Vec<BlockQuery>), SchemeError> {
    check_desired(params, desired)?;
    let (k, l, n) = (params.k, params.l, params.n);
    let total = params.p * l;
    let blocks = block_count(params.p, l, n);
    let mut sorted = randomness.order.clone();
    sorted.sort_unstable();
    if sorted != (0..total).collect::<Vec<_>>()
        || randomness.bases.len() != blocks
        || randomness.bases.iter().any(|b| b.len() != k * l)
    {
        return Err(SchemeError::Construction(
            "block randomness does not match the parameters".into(),
        ));
    }
    let coordinates: Vec<usize> = desired
        .as_slice()
        .iter()
        .flat_map(|&m| (0..l).map(move |i| m * l + i))
        .collect();
    let field = params.field;
    let mut queries = vec![BlockQuery::default(); n];
    let mut plan = Vec::with_capacity(blocks);
    let mut slots = randomness.order.iter().map(|&o| coordinates[o]);
    for (j, c) in randomness.bases.iter().enumerate() {
        let width = (total - j * (n - 1)).min(n - 1);
        let base_database = j % n;
        let cr = match mutation {
            Some(BlockMutation::NoCommonRandomness) => None,
            _ => Some(j as u32),
        };
        let base_vector = match mutation {
            Some(BlockMutation::UnmaskedProbe) => SymbolVector::zeros(k * l),
            _ => c.clone(),
        };
        let base_entry = queries[base_database].entries.len();
        queries[base_database].entries.push(BlockEntry {
            block: j as u32,
            cr,
            vector: base_vector.clone(),
        });
        let mut probes = Vec::with_capacity(width);
        for t in 0..width {
            let database = (base_database + 1 + t) % n;
            let coordinate = slots.next().expect("widths sum to P·L");
            let vector = base_vector.add(&field, &SymbolVector::basis(k * l, coordinate))?;
            probes.push(Probe {
                database,
                entry: queries[database].entries.len(),
                coordinate,
            });
            queries[database].entries.push(BlockEntry {
                block: j as u32,
                cr,
                vector,
            });
        }
        plan.push(Block {
            base_database,
            base_entry,
            probes,
            cr: j,
        });
    }
    let answer_lens = queries.iter().map(|q| q.entries.len()).collect();
    Ok((
        BlockPlan {
            params: *params,
            desired: desired.clone(),
            blocks: plan,
            answer_lens,
        },
        queries,
    ))
}

/// `⟨vector, W⟩ + cr` over the flattened store.
pub fn answer_block(
    vector: &SymbolVector,
    store: &MessageStore,
    cr: FieldElement,
) -> Result<FieldElement, SchemeError> {
    let field = store.field();
    let ip = field.inner_product(vector, store.flattened())?;
    Ok(field.add(ip, cr)?)
}

pub fn answer_block_query(
    query: &BlockQuery,
    store: &MessageStore,
    pool: &CommonRandomnessPool,
) -> Result<SymbolVector, SchemeError> {
    query
        .entries
        .iter()
        .map(|e| {
            let cr = match e.cr {
                Some(id) => pool
                    .get(id as usize)
                    .ok_or(SchemeError::ReferenceOutOfRange {
                        what: "common-randomness id",
                        index: id as usize,
                        limit: pool.len(),
                    })?,
                None => store.field().zero(),
            };
            answer_block(&e.vector, store, cr)
        })
        .collect()
}

pub fn decode_blocks(
    plan: &BlockPlan,
    answers: &[SymbolVector],
) -> Result<Vec<RetrievedMessage>, SchemeError> {
    let params = &plan.params;
    if answers.len() != params.n {
        return Err(SchemeError::Decode(format!(
            "expected {} answers, got {}",
            params.n,
            answers.len()
        )));
    }
    for (db, a) in answers.iter().enumerate() {
        if a.len() != plan.answer_lens[db] {
            return Err(SchemeError::Decode(format!(
                "database {db} returned {} symbols, expected {}",
                a.len(),
                plan.answer_lens[db]
            )));
        }
    }
    let l = params.l;
    let mut out: Vec<RetrievedMessage> = plan
        .desired
        .as_slice()
        .iter()
        .map(|&m| RetrievedMessage {
            message: m,
            symbols: vec![None; l],
        })
        .collect();
    let position = |m: usize| plan.desired.as_slice().binary_search(&m).expect("desired");
    for b in &plan.blocks {
        let base = answers[b.base_database]
            .get(b.base_entry)
            .expect("length checked");
        for p in &b.probes {
            let probe = answers[p.database].get(p.entry).expect("length checked");
            let (m, i) = (p.coordinate / l, p.coordinate % l);
            out[position(m)].symbols[i] = Some(params.field.sub(probe, base)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::lspir_cost;
    use crate::rng::{stream, Domain};

    fn run(
        params: &SchemeParams,
        d: &IndexSet,
        seed: u64,
    ) -> (BlockPlan, Vec<RetrievedMessage>, MessageStore) {
        let (plan, queries) = plan_blocks(params, d, &mut stream(seed, Domain::Client)).unwrap();
        let store = MessageStore::random(
            params.field,
            params.k,
            params.l,
            &mut stream(seed, Domain::Messages),
        );
        let pool = CommonRandomnessPool::generate(
            &params.field,
            plan.randomness(),
            &mut stream(seed, Domain::CommonRandomness),
        );
        let answers: Vec<SymbolVector> = queries
            .iter()
            .map(|q| answer_block_query(q, &store, &pool).unwrap())
            .collect();
        let got = decode_blocks(&plan, &answers).unwrap();
        (plan, got, store)
    }

    fn assert_matches(got: &[RetrievedMessage], store: &MessageStore) {
        for r in got {
            let want: Vec<_> = store
                .message(r.message)
                .unwrap()
                .iter()
                .map(|&x| Some(x))
                .collect();
            assert_eq!(r.symbols, want);
        }
    }

    #[test]
    fn cost_examples() {
        for (k, p, n, l, blocks, d) in
            [(3, 1, 2, 1, 1, 2), (10, 4, 2, 1, 4, 8), (4, 3, 4, 5, 5, 20)]
        {
            let params = SchemeParams::new(k, p, n, l, 2).unwrap();
            let desired = IndexSet::new(k, 0..p).unwrap();
            let (plan, got, store) = run(&params, &desired, 11);
            assert_eq!(plan.blocks().len(), blocks);
            assert_eq!(plan.downloads(), d);
            assert_eq!(plan.randomness(), blocks);
            assert_matches(&got, &store);
        }
    }

    #[test]
    fn hand_evaluated_answer() {
        let f = Field::BINARY;
        let store =
            MessageStore::new(f, 3, 1, SymbolVector::from_values(&f, &[1, 0, 1]).unwrap()).unwrap();
        let c = SymbolVector::from_values(&f, &[1, 1, 0]).unwrap();
        assert_eq!(answer_block(&c, &store, f.one()).unwrap(), f.zero());
        assert_eq!(
            answer_block(&SymbolVector::zeros(3), &store, f.one()).unwrap(),
            f.one()
        );
        assert!(answer_block(&SymbolVector::zeros(2), &store, f.one()).is_err());
    }

    #[test]
    fn structure_of_queries() {
        let params = SchemeParams::new(5, 3, 3, 1, 3).unwrap();
        let d = IndexSet::new(5, [0, 2, 4]).unwrap();
        let (plan, queries) = plan_blocks(&params, &d, &mut stream(4, Domain::Client)).unwrap();
        assert_eq!(plan.blocks().len(), 2);
        assert_eq!(plan.blocks()[1].probes.len(), 1);
        let mut covered: Vec<usize> = plan
            .blocks()
            .iter()
            .flat_map(|b| b.probes.iter().map(|p| p.coordinate))
            .collect();
        covered.sort_unstable();
        assert_eq!(covered, vec![0, 2, 4]);
        for q in &queries {
            let mut blocks: Vec<u32> = q.entries.iter().map(|e| e.block).collect();
            let len = blocks.len();
            blocks.dedup();
            assert_eq!(blocks.len(), len, "one vector per block per database");
            assert_eq!(BlockQuery::decode(&params.field, &q.encode()).unwrap(), *q);
        }
    }

    #[test]
    fn cost_grid_matches_formula() {
        for p in 1..=6 {
            for l in 1..=6 {
                for n in 2..=5 {
                    let params = SchemeParams::new(p + 1, p, n, l, 2).unwrap();
                    let d = IndexSet::new(p + 1, 0..p).unwrap();
                    let (plan, _) =
                        plan_blocks(&params, &d, &mut stream(0, Domain::Client)).unwrap();
                    let want = lspir_cost(p as u64, n as u64, l as u64).unwrap();
                    assert_eq!(plan.downloads() as u64, want.download);
                    assert_eq!(plan.randomness() as u64, want.randomness);
                }
            }
        }
    }

    #[test]
    fn every_desired_set_decodes() {
        for trial in 0..1000u64 {
            let k = 2 + (trial % 3) as usize;
            let p = 1 + (trial / 3 % 2) as usize;
            let p = p.min(k - 1);
            let l = 1 + (trial / 6 % 2) as usize;
            let n = 2 + (trial / 12 % 2) as usize;
            let q = [2, 3, 5][(trial % 3) as usize];
            let params = SchemeParams::new(k, p, n, l, q).unwrap();
            let sets = IndexSet::all_of_size(k, p);
            let d = &sets[(trial as usize) % sets.len()];
            let (_, got, store) = run(&params, d, trial);
            assert_matches(&got, &store);
        }
    }

    #[test]
    fn full_desired_set_is_planned() {
        let params = SchemeParams::new(3, 3, 2, 1, 2).unwrap();
        let (plan, got, store) = run(&params, &IndexSet::new(3, 0..3).unwrap(), 2);
        assert_eq!(plan.downloads(), 6);
        assert_matches(&got, &store);
    }

    #[test]
    fn wrong_answer_counts_are_errors() {
        let params = SchemeParams::new(3, 1, 2, 1, 2).unwrap();
        let d = IndexSet::new(3, [1]).unwrap();
        let (plan, _) = plan_blocks(&params, &d, &mut stream(0, Domain::Client)).unwrap();
        assert!(decode_blocks(&plan, &[SymbolVector::zeros(1)]).is_err());
        assert!(decode_blocks(&plan, &[SymbolVector::zeros(1), SymbolVector::zeros(2)]).is_err());
        assert!(matches!(
            plan_blocks(
                &params,
                &IndexSet::new(3, [0, 1]).unwrap(),
                &mut stream(0, Domain::Client)
            ),
            Err(SchemeError::WrongDesiredCount { .. })
        ));
    }

    #[test]
    fn mutants_change_queries() {
        let params = SchemeParams::new(3, 1, 2, 1, 2).unwrap();
        let d = IndexSet::new(3, [1]).unwrap();
        let r = BlockRandomness::sample(&params, &mut stream(9, Domain::Client));
        let (_, q) = plan_blocks_with(&params, &d, &r, Some(BlockMutation::UnmaskedProbe)).unwrap();
        let probe = q
            .iter()
            .flat_map(|q| &q.entries)
            .find(|e| !e.vector.iter().all(|x| x.is_zero()))
            .unwrap();
        assert_eq!(probe.vector, SymbolVector::basis(3, 1));
        let (_, q) =
            plan_blocks_with(&params, &d, &r, Some(BlockMutation::NoCommonRandomness)).unwrap();
        assert!(q.iter().flat_map(|q| &q.entries).all(|e| e.cr.is_none()));
    }
}
