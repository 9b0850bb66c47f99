//! The table-based multi-message scheme.
//!
//! Round `k` asks every database for `ν·α_k` full sweeps of k-sums over all
//! `C(K,k)` message subsets. A sum made only of undesired symbols carries a
//! hidden common-randomness symbol and is later reused as side information at
//! every other database; a sum with desired and undesired terms carries the
//! same undesired terms and the same hidden symbol as one of those, and a sum
//! of desired terms only is masked by a symbol another database serves in the
//! clear. Every sum with a desired term yields exactly one new desired
//! symbol, the other desired terms being symbols already decoded from other
//! databases in earlier rounds.
//!
//! The structure is deterministic in `(K, P, N, desired, ν)`. The client hides
//! it behind one uniform permutation of symbol positions per message and one
//! uniform permutation of common-randomness ids.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::ops::Range;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::field::{Field, FieldElement, SymbolVector};
use crate::params::{binomial, SchemeParams, TableParameters};
use crate::scheme::{combinations, IndexSet, RetrievedMessage, SchemeError};
use crate::store::{CommonRandomnessPool, MessageStore};

/// Upper bound on the sums one table may hold across all databases.
pub const MAX_TABLE_SUMS: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Repetition {
    /// The smallest repetition count that makes every desired message the
    /// same length.
    Balanced,
    /// An explicit repetition count; desired messages may end up with
    /// different numbers of retrieved symbols.
    Fixed(usize),
}

/// Symbol `symbol` (structural, 0-based) of message `message`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub message: usize,
    pub symbol: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrTag {
    /// Served in the clear by database `server` at position `slot` of its
    /// plain list.
    Downloaded {
        id: usize,
        server: usize,
        slot: usize,
    },
    /// Shares terms and randomness with sum `sum` of database `database`.
    SideInfo {
        id: usize,
        database: usize,
        sum: usize,
    },
    Hidden {
        id: usize,
    },
}

impl CrTag {
    pub fn id(&self) -> usize {
        match *self {
            CrTag::Downloaded { id, .. } | CrTag::SideInfo { id, .. } | CrTag::Hidden { id } => id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SumSpec {
    pub round: usize,
    pub stage: usize,
    /// sorted by message
    pub terms: Vec<Term>,
    pub cr: CrTag,
    /// Position in `terms` of the desired symbol this sum retrieves.
    pub fresh: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlainCr {
    pub id: usize,
    pub round: usize,
}

/// What one database is asked for, in download order: plain randomness
/// first, then the sums round by round.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatabaseTable {
    pub plain: Vec<PlainCr>,
    pub sums: Vec<SumSpec>,
    rounds: Vec<Range<usize>>,
}

impl DatabaseTable {
    /// Sums of `round` (1-based).
    pub fn round(&self, round: usize) -> &[SumSpec] {
        &self.sums[self.rounds[round - 1].clone()]
    }

    pub fn downloads(&self) -> usize {
        self.plain.len() + self.sums.len()
    }
}

/// Cost figures of a built table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableSummary {
    pub nu: usize,
    pub message_length: usize,
    pub balanced: bool,
    pub desired_symbols: usize,
    pub downloads: usize,
    pub randomness: usize,
}

impl TableSummary {
    pub fn rate(&self) -> BigRational {
        BigRational::new(self.desired_symbols.into(), self.downloads.into())
    }

    pub fn line(&self) -> String {
        let length = if self.balanced {
            format!("L={}", self.message_length)
        } else {
            format!("L-total={}", self.desired_symbols)
        };
        format!(
            "{length}, D={}, H(S)={}, rate {}",
            self.downloads,
            self.randomness,
            self.rate()
        )
    }
}

/// The deterministic skeleton of a query table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableStructure {
    params: TableParameters,
    nu: usize,
    desired: IndexSet,
    message_length: usize,
    symbols_used: Vec<usize>,
    pool_size: usize,
    databases: Vec<DatabaseTable>,
}

struct Builder<'a> {
    k: usize,
    n: usize,
    is_desired: Vec<bool>,
    fresh: Vec<usize>,
    queues: Vec<Vec<VecDeque<usize>>>,
    pending: Vec<(usize, usize, usize)>,
    side: HashMap<(usize, u64), Vec<usize>>,
    side_taken: HashMap<(usize, usize, u64), usize>,
    rr_side: Vec<usize>,
    rr_plain: Vec<usize>,
    next_cr: usize,
    dbs: Vec<DatabaseTable>,
    params: &'a TableParameters,
    plan: HashMap<u64, Vec<(usize, usize)>>,
}

impl Builder<'_> {
    fn others(&self, db: usize, offset: usize) -> usize {
        let o = offset % (self.n - 1);
        if o >= db {
            o + 1
        } else {
            o
        }
    }

    fn round(&mut self, round: usize, alpha: usize, nu: usize) -> Result<(), SchemeError> {
        let n = self.n;
        let stages = nu * alpha;
        for (db, m, s) in self.pending.drain(..) {
            for (o, queue) in self.queues.iter_mut().enumerate() {
                if o != db {
                    queue[m].push_back(s);
                }
            }
        }
        let mut plain_round: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        if round <= self.params.p {
            let served = binomial(self.params.p, round)
                .to_usize()
                .and_then(|c| c.checked_mul(nu * alpha))
                .ok_or_else(|| SchemeError::TooLarge("plain randomness quota".into()))?;
            if served % (n - 1) != 0 {
                return Err(SchemeError::FractionalQuota { nu });
            }
            for (db, list) in plain_round.iter_mut().enumerate() {
                for _ in 0..served / (n - 1) {
                    let id = self.next_cr;
                    self.next_cr += 1;
                    list.push((id, self.dbs[db].plain.len()));
                    self.dbs[db].plain.push(PlainCr { id, round });
                }
            }
        }
        let mut plain_taken = vec![vec![0usize; n]; n];
        let subsets = combinations(self.k, round);
        for db in 0..n {
            self.plan = self.leader_plan(&subsets, stages);
            let start = self.dbs[db].sums.len();
            for stage in 0..stages {
                for subset in &subsets {
                    let sum = self.sum(db, round, stage, subset, &plain_round, &mut plain_taken)?;
                    self.dbs[db].sums.push(sum);
                }
            }
            let end = self.dbs[db].sums.len();
            self.dbs[db].rounds.push(start..end);
        }
        for (db, taken) in plain_taken.iter().enumerate() {
            for (o, list) in plain_round.iter().enumerate() {
                if o != db && taken[o] != list.len() {
                    return Err(SchemeError::Construction(format!(
                        "round {round}: database {db} used {} of {} plain symbols from database {o}",
                        taken[o],
                        list.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// How many sums of each desired-term pattern each message should lead
    /// at one database in one round: the assignment that keeps the largest
    /// running count of fresh symbols as small as possible.
    fn leader_plan(
        &self,
        subsets: &[Vec<usize>],
        stages: usize,
    ) -> HashMap<u64, Vec<(usize, usize)>> {
        let mut load = self.fresh.clone();
        let mut types: Vec<(u64, Vec<usize>, usize)> = Vec::new();
        let mut index: HashMap<u64, usize> = HashMap::new();
        for subset in subsets {
            let wanted: Vec<usize> = subset
                .iter()
                .copied()
                .filter(|&m| self.is_desired[m])
                .collect();
            match wanted.len() {
                0 => {}
                1 => load[wanted[0]] += stages,
                _ => {
                    let mask = wanted.iter().fold(0u64, |acc, &m| acc | 1 << m);
                    let i = *index.entry(mask).or_insert_with(|| {
                        types.push((mask, wanted.clone(), 0));
                        types.len() - 1
                    });
                    types[i].2 += stages;
                }
            }
        }
        let total: usize = types.iter().map(|t| t.2).sum();
        if total == 0 {
            return HashMap::new();
        }
        let desired: Vec<usize> = (0..self.k).filter(|&m| self.is_desired[m]).collect();
        let (t, p) = (types.len(), desired.len());
        let (source, sink) = (0, t + p + 1);
        let network = |bound: usize| {
            let mut cap = vec![vec![0usize; t + p + 2]; t + p + 2];
            for (i, (_, members, count)) in types.iter().enumerate() {
                cap[source][1 + i] = *count;
                for m in members {
                    let j = desired.iter().position(|d| d == m).expect("desired member");
                    cap[1 + i][1 + t + j] = *count;
                }
            }
            for (j, &m) in desired.iter().enumerate() {
                cap[1 + t + j][sink] = bound.saturating_sub(load[m]);
            }
            cap
        };
        let mut lo = desired.iter().map(|&m| load[m]).min().unwrap_or(0);
        let mut hi = desired.iter().map(|&m| load[m]).max().unwrap_or(0) + total;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if max_flow(&mut network(mid), source, sink) == total {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let mut cap = network(lo);
        max_flow(&mut cap, source, sink);
        types
            .iter()
            .enumerate()
            .map(|(i, (mask, members, count))| {
                let shares = members
                    .iter()
                    .map(|m| {
                        let j = desired.iter().position(|d| d == m).expect("desired member");
                        (*m, count - cap[1 + i][1 + t + j])
                    })
                    .collect();
                (*mask, shares)
            })
            .collect()
    }

    fn sum(
        &mut self,
        db: usize,
        round: usize,
        stage: usize,
        subset: &[usize],
        plain_round: &[Vec<(usize, usize)>],
        plain_taken: &mut [Vec<usize>],
    ) -> Result<SumSpec, SchemeError> {
        let wanted: Vec<usize> = subset
            .iter()
            .copied()
            .filter(|&m| self.is_desired[m])
            .collect();
        let mask = subset
            .iter()
            .filter(|&&m| !self.is_desired[m])
            .fold(0u64, |acc, &m| acc | 1 << m);
        if wanted.is_empty() {
            let terms = subset
                .iter()
                .map(|&m| {
                    let symbol = self.fresh[m];
                    self.fresh[m] += 1;
                    Term { message: m, symbol }
                })
                .collect();
            let id = self.next_cr;
            self.next_cr += 1;
            let index = self.dbs[db].sums.len();
            self.side.entry((db, mask)).or_default().push(index);
            return Ok(SumSpec {
                round,
                stage,
                terms,
                cr: CrTag::Hidden { id },
                fresh: None,
            });
        }
        let queues = &self.queues[db];
        let reusable = |m: usize| wanted.iter().all(|&o| o == m || !queues[o].is_empty());
        let dmask = wanted.iter().fold(0u64, |acc, &m| acc | 1 << m);
        let planned = self.plan.get_mut(&dmask).and_then(|list| {
            list.iter_mut()
                .filter(|(m, left)| *left > 0 && reusable(*m))
                .max_by_key(|(m, left)| (*left, std::cmp::Reverse(*m)))
                .map(|(m, left)| {
                    *left -= 1;
                    *m
                })
        });
        let leader = planned
            .or_else(|| {
                wanted
                    .iter()
                    .copied()
                    .filter(|&m| reusable(m))
                    .min_by_key(|&m| (self.fresh[m], m))
            })
            .ok_or_else(|| {
                SchemeError::Construction(format!(
                    "database {db}, round {round}: no reusable symbols for {subset:?}"
                ))
            })?;
        let mut terms = Vec::with_capacity(round);
        for &m in &wanted {
            if m != leader {
                let symbol = self.queues[db][m].pop_front().expect("checked non-empty");
                terms.push(Term { message: m, symbol });
            }
        }
        let symbol = self.fresh[leader];
        self.fresh[leader] += 1;
        terms.push(Term {
            message: leader,
            symbol,
        });
        self.pending.push((db, leader, symbol));

        let cr = if mask != 0 {
            let mut found = None;
            for t in 0..self.n - 1 {
                let o = self.others(db, self.rr_side[db] + t);
                let taken = self.side_taken.get(&(db, o, mask)).copied().unwrap_or(0);
                if let Some(&index) = self.side.get(&(o, mask)).and_then(|l| l.get(taken)) {
                    self.side_taken.insert((db, o, mask), taken + 1);
                    found = Some((o, index));
                    break;
                }
            }
            let (o, index) = found.ok_or_else(|| {
                SchemeError::Construction(format!(
                    "database {db}, round {round}: side information exhausted for {subset:?}"
                ))
            })?;
            self.rr_side[db] += 1;
            let side = &self.dbs[o].sums[index];
            terms.extend(side.terms.iter().copied());
            CrTag::SideInfo {
                id: side.cr.id(),
                database: o,
                sum: index,
            }
        } else {
            let mut found = None;
            for t in 0..self.n - 1 {
                let o = self.others(db, self.rr_plain[db] + t);
                if let Some(&(id, slot)) = plain_round[o].get(plain_taken[db][o]) {
                    plain_taken[db][o] += 1;
                    found = Some(CrTag::Downloaded {
                        id,
                        server: o,
                        slot,
                    });
                    break;
                }
            }
            self.rr_plain[db] += 1;
            found.ok_or_else(|| {
                SchemeError::Construction(format!(
                    "database {db}, round {round}: plain randomness exhausted"
                ))
            })?
        };
        terms.sort_unstable();
        let fresh = terms.iter().position(|t| t.message == leader);
        Ok(SumSpec {
            round,
            stage,
            terms,
            cr,
            fresh,
        })
    }
}

/// Edmonds–Karp on a dense residual matrix; returns the flow value.
fn max_flow(cap: &mut [Vec<usize>], source: usize, sink: usize) -> usize {
    let n = cap.len();
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[source] = source;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            return flow;
        }
        let mut bottleneck = usize::MAX;
        let mut v = sink;
        while v != source {
            bottleneck = bottleneck.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = sink;
        while v != source {
            let u = prev[v];
            cap[u][v] -= bottleneck;
            cap[v][u] += bottleneck;
            v = u;
        }
        flow += bottleneck;
    }
}

fn assemble(
    params: &TableParameters,
    desired: &IndexSet,
    repetition: Repetition,
    nu: usize,
    alpha: &[usize],
) -> Result<TableStructure, SchemeError> {
    let (k, n) = (params.k, params.n);
    let mut is_desired = vec![false; k];
    for &m in desired.as_slice() {
        is_desired[m] = true;
    }
    let mut b = Builder {
        k,
        n,
        is_desired,
        fresh: vec![0; k],
        queues: vec![vec![VecDeque::new(); k]; n],
        pending: Vec::new(),
        side: HashMap::new(),
        side_taken: HashMap::new(),
        rr_side: vec![0; n],
        rr_plain: vec![0; n],
        next_cr: 0,
        dbs: vec![DatabaseTable::default(); n],
        params,
        plan: HashMap::new(),
    };
    for round in 1..=k {
        if alpha[round - 1] == 0 {
            for db in b.dbs.iter_mut() {
                let end = db.sums.len();
                db.rounds.push(end..end);
            }
            continue;
        }
        b.round(round, alpha[round - 1], nu)?;
    }
    for (&(o, mask), list) in &b.side {
        for db in (0..n).filter(|&db| db != o) {
            let taken = b.side_taken.get(&(db, o, mask)).copied().unwrap_or(0);
            if taken != list.len() {
                return Err(SchemeError::Construction(format!(
                    "database {db} consumed {taken} of {} side sums of database {o}",
                    list.len()
                )));
            }
        }
    }
    let retrieved: Vec<usize> = desired.as_slice().iter().map(|&m| b.fresh[m]).collect();
    let message_length = retrieved.iter().copied().max().unwrap_or(0);
    if repetition == Repetition::Balanced && retrieved.iter().any(|&r| r != message_length) {
        return Err(SchemeError::Construction(format!(
            "unbalanced retrieval {retrieved:?}"
        )));
    }
    if let Some(m) = (0..k).find(|&m| b.fresh[m] > message_length) {
        return Err(SchemeError::Construction(format!(
            "message {m} needs {} symbols, more than L = {message_length}",
            b.fresh[m]
        )));
    }
    let symbols_used = b.fresh;
    let pool_size = b.next_cr;
    let databases = b.dbs;
    Ok(TableStructure {
        params: params.clone(),
        nu,
        desired: desired.clone(),
        message_length,
        symbols_used,
        pool_size,
        databases,
    })
}

impl TableStructure {
    pub fn build(
        k: usize,
        p: usize,
        n: usize,
        desired: &IndexSet,
        repetition: Repetition,
    ) -> Result<Self, SchemeError> {
        let params = TableParameters::new(k, p, n)?;
        if desired.universe() != k {
            return Err(SchemeError::IndexOutOfRange {
                index: desired.universe(),
                k,
            });
        }
        if desired.len() != p {
            return Err(SchemeError::WrongDesiredCount {
                expected: p,
                got: desired.len(),
            });
        }
        if k > 64 {
            return Err(SchemeError::TooLarge(format!("K = {k} messages")));
        }
        let nu = match repetition {
            Repetition::Balanced => params
                .nu
                .to_usize()
                .ok_or_else(|| SchemeError::TooLarge(format!("ν = {}", params.nu)))?,
            Repetition::Fixed(0) => {
                return Err(SchemeError::Construction(
                    "repetition count must be positive".into(),
                ))
            }
            Repetition::Fixed(v) => v,
        };
        let per_db: BigUint = (1..=k)
            .map(|r| binomial(k, r) * params.alpha.get(r))
            .sum::<BigUint>()
            * BigUint::from(nu);
        let total = per_db * BigUint::from(n);
        if total > BigUint::from(MAX_TABLE_SUMS) {
            return Err(SchemeError::TooLarge(format!("{total} sums")));
        }
        let alpha = params.alpha.to_usizes().expect("bounded by the sum count");

        assemble(&params, desired, repetition, nu, &alpha)
    }

    pub fn params(&self) -> &TableParameters {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn p(&self) -> usize {
        self.params.p
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn desired(&self) -> &IndexSet {
        &self.desired
    }

    pub fn message_length(&self) -> usize {
        self.message_length
    }

    /// Distinct structural symbols of `message` referenced anywhere.
    pub fn symbols_used(&self, message: usize) -> usize {
        self.symbols_used[message]
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn database(&self, db: usize) -> &DatabaseTable {
        &self.databases[db]
    }

    pub fn databases(&self) -> &[DatabaseTable] {
        &self.databases
    }

    /// Scheme parameters whose message length matches this table.
    pub fn scheme_params(&self, q: u32) -> Result<SchemeParams, SchemeError> {
        Ok(SchemeParams::new(
            self.k(),
            self.p(),
            self.n(),
            self.message_length,
            q,
        )?)
    }

    pub fn summary(&self) -> TableSummary {
        let desired_symbols = self
            .desired
            .as_slice()
            .iter()
            .map(|&m| self.symbols_used[m])
            .sum();
        TableSummary {
            nu: self.nu,
            message_length: self.message_length,
            balanced: self
                .desired
                .as_slice()
                .iter()
                .all(|&m| self.symbols_used[m] == self.message_length),
            desired_symbols,
            downloads: self.databases.iter().map(DatabaseTable::downloads).sum(),
            randomness: self.pool_size,
        }
    }

    /// Text layout with 1-based structural labels: one section per
    /// database, one row per download, a blank line between rounds.
    pub fn render(&self) -> String {
        let k = self.k();
        let mut out = String::new();
        let names: Vec<String> = self
            .desired
            .as_slice()
            .iter()
            .map(|&m| label(k, m))
            .collect();
        let _ = writeln!(out, "# psi-spir query-table v1");
        let _ = writeln!(
            out,
            "# K={} P={} N={} nu={} desired={}",
            k,
            self.p(),
            self.n(),
            self.nu,
            names.join(",")
        );
        for (db, table) in self.databases.iter().enumerate() {
            let _ = writeln!(out, "[database {}]", db + 1);
            let mut first = true;
            for round in 1..=k {
                let plain: Vec<&PlainCr> =
                    table.plain.iter().filter(|c| c.round == round).collect();
                let sums = table.round(round);
                if plain.is_empty() && sums.is_empty() {
                    continue;
                }
                if !first {
                    out.push('\n');
                }
                first = false;
                for c in plain {
                    let _ = writeln!(out, "s{}", c.id + 1);
                }
                for sum in sums {
                    for t in &sum.terms {
                        let _ = write!(out, "{}{}+", label(k, t.message), t.symbol + 1);
                    }
                    let _ = writeln!(out, "s{}", sum.cr.id() + 1);
                }
            }
        }
        out
    }
}

fn label(k: usize, m: usize) -> String {
    if k <= 26 {
        char::from(b'a' + m as u8).to_string()
    } else {
        format!("x{}_", m + 1)
    }
}

/// The client's private randomness for one table: a permutation of symbol
/// positions per message and a permutation of common-randomness ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRandomness {
    symbol_perms: Vec<Vec<u32>>,
    cr_perm: Vec<u32>,
}

fn is_permutation(p: &[u32]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&x| {
        let x = x as usize;
        x < seen.len() && !std::mem::replace(&mut seen[x], true)
    })
}

impl TableRandomness {
    pub fn sample<R: Rng + ?Sized>(structure: &TableStructure, rng: &mut R) -> Self {
        let mut perm = |len: usize| {
            let mut p: Vec<u32> = (0..len as u32).collect();
            p.shuffle(rng);
            p
        };
        let symbol_perms = (0..structure.k())
            .map(|_| perm(structure.message_length))
            .collect();
        let cr_perm = perm(structure.pool_size);
        TableRandomness {
            symbol_perms,
            cr_perm,
        }
    }

    pub fn identity(structure: &TableStructure) -> Self {
        TableRandomness {
            symbol_perms: vec![(0..structure.message_length as u32).collect(); structure.k()],
            cr_perm: (0..structure.pool_size as u32).collect(),
        }
    }

    pub fn from_parts(
        structure: &TableStructure,
        symbol_perms: Vec<Vec<u32>>,
        cr_perm: Vec<u32>,
    ) -> Result<Self, SchemeError> {
        let ok = symbol_perms.len() == structure.k()
            && symbol_perms
                .iter()
                .all(|p| p.len() == structure.message_length && is_permutation(p))
            && cr_perm.len() == structure.pool_size
            && is_permutation(&cr_perm);
        if !ok {
            return Err(SchemeError::Construction(
                "randomness does not match the table shape".into(),
            ));
        }
        Ok(TableRandomness {
            symbol_perms,
            cr_perm,
        })
    }

    pub fn symbol_position(&self, message: usize, symbol: usize) -> usize {
        self.symbol_perms[message][symbol] as usize
    }

    pub fn cr_position(&self, id: usize) -> usize {
        self.cr_perm[id] as usize
    }
}

/// Deliberately broken variants, used as negative controls by the audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMutation {
    /// Common-randomness ids are sent unpermuted.
    StructuralCrIds,
    /// Sums of undesired symbols, and the sums sharing them, go unmasked.
    NoHiddenCr,
}

/// One sum as seen on the wire: (message, position) terms and a pool id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireSum {
    pub terms: Vec<(u16, u32)>,
    pub cr: Option<u32>,
}

/// Everything one database receives: pool ids to return in the clear,
/// then sums to evaluate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TableQuery {
    pub plain: Vec<u32>,
    pub sums: Vec<WireSum>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], SchemeError> {
    if bytes.len() < n {
        return Err(SchemeError::Encoding("truncated table query"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32, SchemeError> {
    Ok(u32::from_le_bytes(
        take(bytes, 4)?.try_into().expect("4 bytes"),
    ))
}

impl TableQuery {
    /// Answer symbols this query produces.
    pub fn answer_len(&self) -> usize {
        self.plain.len() + self.sums.len()
    }

    /// `u32 plain count, u32 ids, u32 sum count`, then per sum `u8 terms`,
    /// `(u16 message, u32 position)` pairs, `u8 masked`, `u32 id`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.plain.len() + 16 * self.sums.len());
        out.extend_from_slice(&(self.plain.len() as u32).to_le_bytes());
        for id in &self.plain {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.sums.len() as u32).to_le_bytes());
        for sum in &self.sums {
            out.push(sum.terms.len() as u8);
            for &(m, i) in &sum.terms {
                out.extend_from_slice(&m.to_le_bytes());
                out.extend_from_slice(&i.to_le_bytes());
            }
            out.push(u8::from(sum.cr.is_some()));
            out.extend_from_slice(&sum.cr.unwrap_or(0).to_le_bytes());
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self, SchemeError> {
        let bytes = &mut bytes;
        let plain_count = take_u32(bytes)? as usize;
        if plain_count > bytes.len() / 4 {
            return Err(SchemeError::Encoding("plain count exceeds payload"));
        }
        let plain = (0..plain_count)
            .map(|_| take_u32(bytes))
            .collect::<Result<_, _>>()?;
        let sum_count = take_u32(bytes)? as usize;
        if sum_count > bytes.len() / 6 {
            return Err(SchemeError::Encoding("sum count exceeds payload"));
        }
        let mut sums = Vec::with_capacity(sum_count);
        for _ in 0..sum_count {
            let nterms = take(bytes, 1)?[0] as usize;
            let mut terms = Vec::with_capacity(nterms);
            for _ in 0..nterms {
                let m = u16::from_le_bytes(take(bytes, 2)?.try_into().expect("2 bytes"));
                terms.push((m, take_u32(bytes)?));
            }
            let masked = match take(bytes, 1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(SchemeError::Encoding("bad mask flag")),
            };
            let id = take_u32(bytes)?;
            sums.push(WireSum {
                terms,
                cr: masked.then_some(id),
            });
        }
        if !bytes.is_empty() {
            return Err(SchemeError::Encoding("trailing bytes after table query"));
        }
        Ok(TableQuery { plain, sums })
    }
}

/// A table together with the client randomness that disguises it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTable {
    field: Field,
    structure: TableStructure,
    randomness: TableRandomness,
    mutation: Option<TableMutation>,
}

pub fn build_query_table<R: Rng + ?Sized>(
    params: &SchemeParams,
    desired: &IndexSet,
    repetition: Repetition,
    rng: &mut R,
) -> Result<QueryTable, SchemeError> {
    let structure = TableStructure::build(params.k, params.p, params.n, desired, repetition)?;
    if structure.message_length != params.l {
        return Err(SchemeError::LengthMismatch {
            expected: structure.message_length,
            got: params.l,
        });
    }
    let randomness = TableRandomness::sample(&structure, rng);
    Ok(QueryTable::from_parts(params.field, structure, randomness))
}

impl QueryTable {
    pub fn from_parts(
        field: Field,
        structure: TableStructure,
        randomness: TableRandomness,
    ) -> Self {
        QueryTable {
            field,
            structure,
            randomness,
            mutation: None,
        }
    }

    /// Negative control only: the resulting queries violate a privacy
    /// constraint on purpose.
    pub fn with_mutation(mut self, mutation: TableMutation) -> Self {
        self.mutation = Some(mutation);
        self
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn structure(&self) -> &TableStructure {
        &self.structure
    }

    pub fn randomness(&self) -> &TableRandomness {
        &self.randomness
    }

    fn cr(&self, id: usize) -> u32 {
        match self.mutation {
            Some(TableMutation::StructuralCrIds) => id as u32,
            _ => self.randomness.cr_perm[id],
        }
    }

    pub fn query(&self, db: usize) -> TableQuery {
        let table = &self.structure.databases[db];
        let plain = table.plain.iter().map(|c| self.cr(c.id)).collect();
        let sums = table
            .sums
            .iter()
            .map(|sum| {
                let terms = sum
                    .terms
                    .iter()
                    .map(|t| {
                        (
                            t.message as u16,
                            self.randomness.symbol_perms[t.message][t.symbol],
                        )
                    })
                    .collect();
                let unmasked = self.mutation == Some(TableMutation::NoHiddenCr)
                    && !matches!(sum.cr, CrTag::Downloaded { .. });
                WireSum {
                    terms,
                    cr: (!unmasked).then(|| self.cr(sum.cr.id())),
                }
            })
            .collect();
        TableQuery { plain, sums }
    }

    pub fn queries(&self) -> Vec<TableQuery> {
        (0..self.structure.n()).map(|db| self.query(db)).collect()
    }

    /// Recovers the desired messages, walking rounds in order.
    pub fn decode(&self, answers: &[SymbolVector]) -> Result<Vec<RetrievedMessage>, SchemeError> {
        let s = &self.structure;
        let f = &self.field;
        if answers.len() != s.n() {
            return Err(SchemeError::Decode(format!(
                "expected {} answers, got {}",
                s.n(),
                answers.len()
            )));
        }
        for (db, (a, t)) in answers.iter().zip(&s.databases).enumerate() {
            if a.len() != t.downloads() {
                return Err(SchemeError::Decode(format!(
                    "database {db} returned {} symbols, expected {}",
                    a.len(),
                    t.downloads()
                )));
            }
        }
        let is_desired: Vec<bool> = (0..s.k()).map(|m| s.desired.contains(m)).collect();
        let mut known: Vec<Vec<Option<FieldElement>>> = vec![vec![None; s.message_length]; s.k()];
        let sum_answer = |db: usize, index: usize| {
            answers[db]
                .get(s.databases[db].plain.len() + index)
                .expect("length checked")
        };
        for round in 1..=s.k() {
            for (db, table) in s.databases.iter().enumerate() {
                let range = table.rounds[round - 1].clone();
                for index in range {
                    let sum = &table.sums[index];
                    let Some(pos) = sum.fresh else { continue };
                    let mut v = sum_answer(db, index);
                    for (i, t) in sum.terms.iter().enumerate() {
                        if i != pos && is_desired[t.message] {
                            let prior = known[t.message][t.symbol].ok_or_else(|| {
                                SchemeError::Decode(format!(
                                    "symbol {} of message {} needed before it was decoded",
                                    t.symbol, t.message
                                ))
                            })?;
                            v = f.sub(v, prior)?;
                        }
                    }
                    let mask = match sum.cr {
                        CrTag::Downloaded { server, slot, .. } => {
                            answers[server].get(slot).expect("length checked")
                        }
                        CrTag::SideInfo { database, sum, .. } => sum_answer(database, sum),
                        CrTag::Hidden { .. } => {
                            return Err(SchemeError::Decode(
                                "hidden sum marked as retrieving".into(),
                            ))
                        }
                    };
                    v = f.sub(v, mask)?;
                    let t = sum.terms[pos];
                    known[t.message][t.symbol] = Some(v);
                }
            }
        }
        Ok(s.desired
            .as_slice()
            .iter()
            .map(|&m| {
                let mut symbols = vec![None; s.message_length];
                for (x, v) in known[m].iter().enumerate() {
                    symbols[self.randomness.symbol_perms[m][x] as usize] = *v;
                }
                RetrievedMessage {
                    message: m,
                    symbols,
                }
            })
            .collect())
    }
}

/// Evaluates a table query against a database's replica.
pub fn answer_queries(
    query: &TableQuery,
    store: &MessageStore,
    pool: &CommonRandomnessPool,
) -> Result<SymbolVector, SchemeError> {
    let field = store.field();
    let cr = |id: u32| {
        pool.get(id as usize)
            .ok_or(SchemeError::ReferenceOutOfRange {
                what: "common-randomness id",
                index: id as usize,
                limit: pool.len(),
            })
    };
    let mut out = Vec::with_capacity(query.answer_len());
    for &id in &query.plain {
        out.push(cr(id)?);
    }
    for sum in &query.sums {
        let mut acc = match sum.cr {
            Some(id) => cr(id)?,
            None => field.zero(),
        };
        for &(m, i) in &sum.terms {
            let symbol =
                store
                    .get(m as usize, i as usize)
                    .ok_or(SchemeError::ReferenceOutOfRange {
                        what: "message symbol",
                        index: m as usize * store.length() + i as usize,
                        limit: store.messages() * store.length(),
                    })?;
            acc = field.add(acc, symbol)?;
        }
        out.push(acc);
    }
    Ok(SymbolVector::new(out))
}

/// The `P = K` path: every symbol of every message from a single database,
/// no common randomness.
pub fn download_all(store: &MessageStore) -> SymbolVector {
    store.flattened().clone()
}
