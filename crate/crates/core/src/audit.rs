//! Exact privacy and reliability audits.
//!
//! Distributions are tallied by exhaustive enumeration and compared with
//! exact rational total-variation distance, so a pass means equality.
//! Instances whose enumeration would exceed [`ATOM_BUDGET`] outcomes are
//! refused. Leakage at larger sizes is checked symbolically: both schemes
//! are linear, so a message coordinate is learnable from the client's view
//! exactly when its unit vector lies in the row space of the view's
//! coefficient matrix over the message and randomness unknowns.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::block::{
    answer_block_query, block_count, decode_blocks, plan_blocks, plan_blocks_with, BlockMutation,
    BlockQuery, BlockRandomness,
};
use crate::field::{Field, FieldElement, SymbolVector};
use crate::params::SchemeParams;
use crate::rng::{stream, Domain};
use crate::scheme::{IndexSet, SchemeError};
use crate::store::{CommonRandomnessPool, MessageStore};
use crate::table::{
    answer_queries, build_query_table, QueryTable, Repetition, TableMutation, TableQuery,
    TableRandomness, TableStructure,
};

/// Largest number of enumerated outcomes any single audit may visit.
pub const ATOM_BUDGET: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("enumeration needs {} outcomes, budget is {budget}", show_atoms(*.atoms))]
    BudgetExceeded { atoms: u128, budget: u64 },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

fn show_atoms(atoms: u128) -> String {
    if atoms == u128::MAX {
        "at least 2^128".into()
    } else {
        atoms.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    Table(Option<TableMutation>),
    Block(Option<BlockMutation>),
}

/// A scheme and the parameters it is audited at. For the table scheme the
/// message length follows from the structure and `l` is ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuditInstance {
    pub scheme: SchemeKind,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub l: usize,
    pub q: u32,
}

impl AuditInstance {
    pub fn table(k: usize, p: usize, n: usize, q: u32, mutation: Option<TableMutation>) -> Self {
        AuditInstance {
            scheme: SchemeKind::Table(mutation),
            k,
            p,
            n,
            l: 0,
            q,
        }
    }

    pub fn block(
        k: usize,
        p: usize,
        n: usize,
        l: usize,
        q: u32,
        mutation: Option<BlockMutation>,
    ) -> Self {
        AuditInstance {
            scheme: SchemeKind::Block(mutation),
            k,
            p,
            n,
            l,
            q,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Property {
    UserPrivacy,
    DatabasePrivacy,
    Reliability,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub property: Property,
    pub passed: bool,
    /// Largest exact total-variation distance found (zero on a pass).
    pub distance: BigRational,
    /// Outcomes enumerated (or trials run, for reliability).
    pub atoms: u64,
    pub detail: String,
}

impl Verdict {
    fn from_distance(
        property: Property,
        distance: BigRational,
        atoms: u64,
        detail: String,
    ) -> Self {
        Verdict {
            property,
            passed: distance.is_zero(),
            distance,
            atoms,
            detail,
        }
    }
}

fn check_budget(atoms: u128) -> Result<u64, AuditError> {
    if atoms > ATOM_BUDGET as u128 {
        Err(AuditError::BudgetExceeded {
            atoms,
            budget: ATOM_BUDGET,
        })
    } else {
        Ok(atoms as u64)
    }
}

fn pow(q: u32, e: usize) -> u128 {
    (0..e).fold(1u128, |acc, _| acc.saturating_mul(q as u128))
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).fold(1u128, |acc, x| acc.saturating_mul(x))
}

/// Advances a base-`q` counter; false once it wraps to all zeros.
fn odometer(digits: &mut [u8], q: u32) -> bool {
    for d in digits.iter_mut() {
        if (*d as u32) + 1 < q {
            *d += 1;
            return true;
        }
        *d = 0;
    }
    false
}

/// All permutations of `0..n` (Heap's algorithm).
fn permutations(n: usize) -> Vec<Vec<u32>> {
    let mut a: Vec<u32> = (0..n as u32).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Exact total-variation distance between two tallies of equal mass.
fn tv<K: Eq + Hash>(a: &HashMap<K, u64>, b: &HashMap<K, u64>) -> BigRational {
    let total: u64 = a.values().sum();
    debug_assert_eq!(total, b.values().sum::<u64>());
    let mut diff: u128 = 0;
    for (key, &x) in a {
        let y = b.get(key).copied().unwrap_or(0);
        diff += x.abs_diff(y) as u128;
    }
    for (key, &y) in b {
        if !a.contains_key(key) {
            diff += y as u128;
        }
    }
    BigRational::new(BigInt::from(diff), BigInt::from(2u128 * total as u128))
}

fn tally(keys: &[u128]) -> HashMap<u128, u64> {
    let mut out = HashMap::new();
    for &k in keys {
        *out.entry(k).or_default() += 1;
    }
    out
}

fn max_distance<K: Eq + Hash>(tallies: &[HashMap<K, u64>]) -> BigRational {
    tallies[1..]
        .iter()
        .map(|t| tv(&tallies[0], t))
        .max()
        .unwrap_or_else(BigRational::zero)
}

/// One download as a linear form over message symbols (`m·L + i`) and
/// common-randomness symbols (`K·L + id`).
pub type Row = Vec<(usize, FieldElement)>;

/// The client's view of a run as coefficient rows, grouped by database.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearView {
    pub field: Field,
    pub k: usize,
    pub l: usize,
    pub pool: usize,
    pub rows: Vec<Vec<Row>>,
}

impl LinearView {
    pub fn from_table_queries(
        field: Field,
        k: usize,
        l: usize,
        pool: usize,
        queries: &[TableQuery],
    ) -> Self {
        let one = field.one();
        let cr = |id: u32| (k * l + id as usize, one);
        let rows = queries
            .iter()
            .map(|q| {
                let mut rows: Vec<Row> = q.plain.iter().map(|&id| vec![cr(id)]).collect();
                for sum in &q.sums {
                    let mut row: Row = sum
                        .terms
                        .iter()
                        .map(|&(m, i)| (m as usize * l + i as usize, one))
                        .collect();
                    row.extend(sum.cr.map(cr));
                    rows.push(row);
                }
                rows
            })
            .collect();
        LinearView {
            field,
            k,
            l,
            pool,
            rows,
        }
    }

    pub fn from_block_queries(
        field: Field,
        k: usize,
        l: usize,
        pool: usize,
        queries: &[BlockQuery],
    ) -> Self {
        let rows = queries
            .iter()
            .map(|q| {
                q.entries
                    .iter()
                    .map(|e| {
                        let mut row: Row = e
                            .vector
                            .iter()
                            .enumerate()
                            .filter(|(_, x)| !x.is_zero())
                            .map(|(c, &x)| (c, x))
                            .collect();
                        row.extend(e.cr.map(|id| (k * l + id as usize, field.one())));
                        row
                    })
                    .collect()
            })
            .collect();
        LinearView {
            field,
            k,
            l,
            pool,
            rows,
        }
    }

    pub fn columns(&self) -> usize {
        self.k * self.l + self.pool
    }

    pub fn all_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().flatten()
    }
}

/// Message coordinates `(message, index)` that some linear combination of
/// the view's rows isolates exactly.
pub fn symbolic_leakage(view: &LinearView) -> BTreeSet<(usize, usize)> {
    let q = view.field.modulus();
    let cols = view.columns();
    let mut m: Vec<Vec<u32>> = view
        .all_rows()
        .map(|row| {
            let mut dense = vec![0u32; cols];
            for &(c, x) in row {
                dense[c] = (dense[c] + x.value()) % q;
            }
            dense
        })
        .collect();
    let inv = |x: u32| {
        let mut r = 1u32;
        for _ in 0..q - 2 {
            r = r * x % q;
        }
        r
    };
    let mut rank = 0;
    let mut pivots = Vec::new();
    for c in 0..cols {
        let Some(r) = (rank..m.len()).find(|&r| m[r][c] != 0) else {
            continue;
        };
        m.swap(rank, r);
        let s = inv(m[rank][c]);
        for x in m[rank].iter_mut() {
            *x = *x * s % q;
        }
        let pivot = m[rank].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != rank && row[c] != 0 {
                let f = row[c];
                for (x, &y) in row.iter_mut().zip(&pivot) {
                    *x = (*x + (q - f) * y) % q;
                }
            }
        }
        pivots.push(c);
        rank += 1;
    }
    let message_cols = view.k * view.l;
    pivots
        .iter()
        .enumerate()
        .filter(|&(r, &c)| {
            c < message_cols && m[r].iter().enumerate().all(|(j, &x)| (j == c) == (x != 0))
        })
        .map(|(_, &c)| (c / view.l, c % view.l))
        .collect()
}

fn eval(field: &Field, row: &Row, values: &[u32]) -> u32 {
    let q = field.modulus();
    row.iter()
        .fold(0, |acc, &(c, x)| (acc + x.value() * values[c]) % q)
}

/// Exact check that the answers' law given the undesired symbols does not
/// depend on them. Only referenced unknowns are enumerated.
fn db_privacy_of_view(
    view: &LinearView,
    desired: &IndexSet,
) -> Result<(BigRational, u64), AuditError> {
    let field = view.field;
    let q = field.modulus();
    let message_cols = view.k * view.l;
    let referenced: BTreeSet<usize> = view
        .all_rows()
        .flat_map(|r| r.iter().map(|&(c, _)| c))
        .collect();
    let (undesired, rest): (Vec<usize>, Vec<usize>) = referenced
        .iter()
        .partition(|&&c| c < message_cols && !desired.contains(c / view.l));
    let atoms = check_budget(pow(q, referenced.len()))?;
    let rows: Vec<&Row> = view.all_rows().collect();
    let bits = 32 - (q - 1).leading_zeros();
    if rows.len() as u32 * bits > 128 {
        return Err(AuditError::BudgetExceeded {
            atoms: atoms as u128,
            budget: ATOM_BUDGET,
        });
    }
    let touching: Vec<Vec<(usize, u32)>> = rest
        .iter()
        .map(|&c| {
            rows.iter()
                .enumerate()
                .flat_map(|(r, row)| {
                    row.iter()
                        .filter(|e| e.0 == c)
                        .map(move |e| (r, e.1.value()))
                })
                .collect()
        })
        .collect();
    let mut values = vec![0u32; view.columns()];
    let mut outer = vec![0u8; undesired.len()];
    let mut reference: Option<Vec<u128>> = None;
    let mut worst = BigRational::zero();
    loop {
        for (&c, &d) in undesired.iter().zip(&outer) {
            values[c] = d as u32;
        }
        let mut answers: Vec<u32> = rows.iter().map(|row| eval(&field, row, &values)).collect();
        let mut inner = vec![0u32; rest.len()];
        let mut keys =
            Vec::with_capacity((atoms >> (bits as usize * undesired.len()).min(63)) as usize);
        'inner: loop {
            keys.push(
                answers
                    .iter()
                    .fold(0u128, |acc, &a| acc << bits | a as u128),
            );
            // Each odometer step adds one to a digit mod q, carries included.
            for (digit, rows_hit) in inner.iter_mut().zip(&touching) {
                for &(r, coef) in rows_hit {
                    answers[r] = (answers[r] + coef) % q;
                }
                *digit += 1;
                if *digit < q {
                    continue 'inner;
                }
                *digit = 0;
            }
            break;
        }
        keys.sort_unstable();
        match &reference {
            None => reference = Some(keys),
            Some(r) if *r == keys => {}
            Some(r) => worst = worst.max(tv(&tally(r), &tally(&keys))),
        }
        if !odometer(&mut outer, q) {
            break;
        }
    }
    Ok((worst, atoms))
}

fn table_structure(inst: &AuditInstance, desired: &IndexSet) -> Result<TableStructure, AuditError> {
    Ok(TableStructure::build(
        inst.k,
        inst.p,
        inst.n,
        desired,
        Repetition::Balanced,
    )?)
}

fn mutate(table: QueryTable, mutation: Option<TableMutation>) -> QueryTable {
    match mutation {
        Some(m) => table.with_mutation(m),
        None => table,
    }
}

/// Per-database query law is identical for every desired set of size `P`.
///
/// Block scheme: the joint law of `(Q_n, A_n, W, S)` is tallied over all
/// client randomness, messages and common randomness. Table scheme: the
/// client randomness is a tuple of independent uniform permutations and
/// each permutation drives a separate part of the query, so the query law
/// is the product of the parts' laws; each part is enumerated over all of
/// its permutations and compared exactly. `A_n` is a function of
/// `(Q_n, W, S)` and `(W, S)` is independent of the query, so this settles
/// the joint statement.
pub fn audit_user_privacy(inst: &AuditInstance) -> Result<Verdict, AuditError> {
    let field = Field::new(inst.q).map_err(SchemeError::from)?;
    let sets = IndexSet::all_of_size(inst.k, inst.p);
    match inst.scheme {
        SchemeKind::Block(mutation) => {
            let params = SchemeParams::new(inst.k, inst.p, inst.n, inst.l, inst.q)
                .map_err(SchemeError::from)?;
            let kl = inst.k * inst.l;
            let blocks = block_count(inst.p, inst.l, inst.n);
            let randomness = factorial(inst.p * inst.l).saturating_mul(pow(inst.q, kl * blocks));
            let per_set = check_budget(randomness.saturating_mul(pow(inst.q, kl + blocks)))?;
            check_budget(per_set as u128 * sets.len() as u128 * inst.n as u128)?;
            let orders = permutations(inst.p * inst.l);
            let mut worst = BigRational::zero();
            for db in 0..inst.n {
                let mut tallies = Vec::new();
                for d in &sets {
                    let mut tally: HashMap<Vec<u8>, u64> = HashMap::new();
                    for order in &orders {
                        let mut base_digits = vec![0u8; kl * blocks];
                        loop {
                            let bases = base_digits
                                .chunks(kl.max(1))
                                .take(blocks)
                                .map(|c| {
                                    SymbolVector::new(
                                        c.iter().map(|&x| field.reduce(x as u64)).collect(),
                                    )
                                })
                                .collect();
                            let r = BlockRandomness {
                                order: order.iter().map(|&x| x as usize).collect(),
                                bases,
                            };
                            let (_, queries) = plan_blocks_with(&params, d, &r, mutation)?;
                            let qbytes = queries[db].encode();
                            let mut w = vec![0u8; kl];
                            loop {
                                let store = MessageStore::new(
                                    field,
                                    inst.k,
                                    inst.l,
                                    w.iter().map(|&x| field.reduce(x as u64)).collect(),
                                )
                                .expect("sized");
                                let mut s = vec![0u8; blocks];
                                loop {
                                    let pool = CommonRandomnessPool::new(
                                        s.iter().map(|&x| field.reduce(x as u64)).collect(),
                                    );
                                    let a = answer_block_query(&queries[db], &store, &pool)?;
                                    let mut key = qbytes.clone();
                                    key.extend(a.iter().map(|x| x.value() as u8));
                                    key.extend_from_slice(&w);
                                    key.extend_from_slice(&s);
                                    *tally.entry(key).or_default() += 1;
                                    if !odometer(&mut s, inst.q) {
                                        break;
                                    }
                                }
                                if !odometer(&mut w, inst.q) {
                                    break;
                                }
                            }
                            if !odometer(&mut base_digits, inst.q) {
                                break;
                            }
                        }
                    }
                    tallies.push(tally);
                }
                worst = worst.max(max_distance(&tallies));
            }
            let atoms = per_set * sets.len() as u64 * inst.n as u64;
            Ok(Verdict::from_distance(
                Property::UserPrivacy,
                worst,
                atoms,
                format!(
                    "joint law of (Q_n, A_n, W, S) over {} desired sets",
                    sets.len()
                ),
            ))
        }
        SchemeKind::Table(mutation) => {
            let structures: Vec<TableStructure> = sets
                .iter()
                .map(|d| table_structure(inst, d))
                .collect::<Result<_, _>>()?;
            let l = structures[0].message_length();
            let pool = structures[0].pool_size();
            let perms_l = factorial(l);
            let perms_s = factorial(pool);
            check_budget(perms_l.max(perms_s))?;
            let atoms = check_budget(
                (perms_l * inst.k as u128 + perms_s) * sets.len() as u128 * inst.n as u128,
            )?;
            let symbol_perms = permutations(l);
            let cr_perms = permutations(pool);
            let mut worst = BigRational::zero();
            for db in 0..inst.n {
                let layout = |s: &TableStructure| {
                    let mut q = mutate(
                        QueryTable::from_parts(field, s.clone(), TableRandomness::identity(s)),
                        mutation,
                    )
                    .query(db);
                    q.plain.iter_mut().for_each(|x| *x = 0);
                    for sum in q.sums.iter_mut() {
                        sum.terms.iter_mut().for_each(|t| t.1 = 0);
                        if let Some(c) = sum.cr.as_mut() {
                            *c = 0;
                        }
                    }
                    q
                };
                let reference = layout(&structures[0]);
                if structures[1..].iter().any(|s| layout(s) != reference) {
                    worst = worst.max(BigRational::from_integer(1.into()));
                }
                for part in 0..=inst.k {
                    let mut tallies = Vec::new();
                    for s in &structures {
                        let id_symbols: Vec<Vec<u32>> =
                            (0..inst.k).map(|_| (0..l as u32).collect()).collect();
                        let id_cr: Vec<u32> = (0..pool as u32).collect();
                        let mut tally: HashMap<Vec<u32>, u64> = HashMap::new();
                        let choices = if part < inst.k {
                            &symbol_perms
                        } else {
                            &cr_perms
                        };
                        for perm in choices {
                            let (sp, cp) = if part < inst.k {
                                let mut sp = id_symbols.clone();
                                sp[part] = perm.clone();
                                (sp, id_cr.clone())
                            } else {
                                (id_symbols.clone(), perm.clone())
                            };
                            let r = TableRandomness::from_parts(s, sp, cp)?;
                            let q = mutate(QueryTable::from_parts(field, s.clone(), r), mutation)
                                .query(db);
                            let key: Vec<u32> = if part < inst.k {
                                q.sums
                                    .iter()
                                    .flat_map(|sum| sum.terms.iter())
                                    .filter(|t| t.0 as usize == part)
                                    .map(|t| t.1)
                                    .collect()
                            } else {
                                q.plain
                                    .iter()
                                    .copied()
                                    .chain(q.sums.iter().map(|sum| sum.cr.unwrap_or(u32::MAX)))
                                    .collect()
                            };
                            *tally.entry(key).or_default() += 1;
                        }
                        tallies.push(tally);
                    }
                    worst = worst.max(max_distance(&tallies));
                }
            }
            Ok(Verdict::from_distance(
                Property::UserPrivacy,
                worst,
                atoms,
                format!(
                    "{} query parts per database over {} desired sets",
                    inst.k + 1,
                    sets.len()
                ),
            ))
        }
    }
}

/// The law of all answers given the client's queries and randomness does
/// not depend on the undesired messages.
///
/// Block scheme: every client randomness realization is enumerated. Table
/// scheme: a handful of seeded realizations, since the randomness only
/// relabels positions of an otherwise fixed linear structure.
pub fn audit_db_privacy(inst: &AuditInstance) -> Result<Verdict, AuditError> {
    let field = Field::new(inst.q).map_err(SchemeError::from)?;
    let sets = IndexSet::all_of_size(inst.k, inst.p);
    let mut worst = BigRational::zero();
    let mut atoms = 0u64;
    let mut views = 0usize;
    for d in &sets {
        match inst.scheme {
            SchemeKind::Block(mutation) => {
                let params = SchemeParams::new(inst.k, inst.p, inst.n, inst.l, inst.q)
                    .map_err(SchemeError::from)?;
                let kl = inst.k * inst.l;
                let blocks = block_count(inst.p, inst.l, inst.n);
                check_budget(
                    factorial(inst.p * inst.l)
                        .saturating_mul(pow(inst.q, kl * blocks + kl + blocks)),
                )?;
                for order in permutations(inst.p * inst.l) {
                    let mut base_digits = vec![0u8; kl * blocks];
                    loop {
                        let bases = base_digits
                            .chunks(kl.max(1))
                            .take(blocks)
                            .map(|c| {
                                SymbolVector::new(
                                    c.iter().map(|&x| field.reduce(x as u64)).collect(),
                                )
                            })
                            .collect();
                        let r = BlockRandomness {
                            order: order.iter().map(|&x| x as usize).collect(),
                            bases,
                        };
                        let (_, queries) = plan_blocks_with(&params, d, &r, mutation)?;
                        let view =
                            LinearView::from_block_queries(field, inst.k, inst.l, blocks, &queries);
                        let (dist, a) = db_privacy_of_view(&view, d)?;
                        worst = worst.max(dist);
                        atoms += a;
                        views += 1;
                        if !odometer(&mut base_digits, inst.q) {
                            break;
                        }
                    }
                }
            }
            SchemeKind::Table(mutation) => {
                let s = table_structure(inst, d)?;
                for seed in 0..3u64 {
                    let r = if seed == 0 {
                        TableRandomness::identity(&s)
                    } else {
                        TableRandomness::sample(&s, &mut stream(seed, Domain::Client))
                    };
                    let table = mutate(QueryTable::from_parts(field, s.clone(), r), mutation);
                    let view = LinearView::from_table_queries(
                        field,
                        inst.k,
                        s.message_length(),
                        s.pool_size(),
                        &table.queries(),
                    );
                    let (dist, a) = db_privacy_of_view(&view, d)?;
                    worst = worst.max(dist);
                    atoms += a;
                    views += 1;
                }
            }
        }
    }
    Ok(Verdict::from_distance(
        Property::DatabasePrivacy,
        worst,
        atoms,
        format!("{views} client views over {} desired sets", sets.len()),
    ))
}

/// Decodes against direct lookups over `trials` seeded runs.
pub fn audit_reliability(inst: &AuditInstance, trials: u64) -> Result<Verdict, AuditError> {
    let field = Field::new(inst.q).map_err(SchemeError::from)?;
    let sets = IndexSet::all_of_size(inst.k, inst.p);
    let mut failures = 0u64;
    for t in 0..trials {
        let d = &sets[t as usize % sets.len()];
        let mut client = stream(t, Domain::Client);
        let mut msg = stream(t, Domain::Messages);
        let mut cr = stream(t, Domain::CommonRandomness);
        let retrieved = match inst.scheme {
            SchemeKind::Block(mutation) => {
                let params = SchemeParams::new(inst.k, inst.p, inst.n, inst.l, inst.q)
                    .map_err(SchemeError::from)?;
                let (plan, queries) = match mutation {
                    None => plan_blocks(&params, d, &mut client)?,
                    Some(_) => {
                        let r = BlockRandomness::sample(&params, &mut client);
                        plan_blocks_with(&params, d, &r, mutation)?
                    }
                };
                let store = MessageStore::random(field, inst.k, inst.l, &mut msg);
                let pool = CommonRandomnessPool::generate(&field, plan.randomness(), &mut cr);
                let answers: Vec<SymbolVector> = queries
                    .iter()
                    .map(|q| answer_block_query(q, &store, &pool))
                    .collect::<Result<_, _>>()?;
                (decode_blocks(&plan, &answers)?, store)
            }
            SchemeKind::Table(mutation) => {
                let s = table_structure(inst, d)?;
                let params = s.scheme_params(inst.q)?;
                let table = mutate(
                    build_query_table(&params, d, Repetition::Balanced, &mut client)?,
                    mutation,
                );
                let store = MessageStore::random(field, inst.k, params.l, &mut msg);
                let pool = CommonRandomnessPool::generate(&field, s.pool_size(), &mut cr);
                let answers: Vec<SymbolVector> = table
                    .queries()
                    .iter()
                    .map(|q| answer_queries(q, &store, &pool))
                    .collect::<Result<_, _>>()?;
                (table.decode(&answers)?, store)
            }
        };
        let (got, store) = retrieved;
        let ok = got.iter().all(|r| {
            r.symbols
                .iter()
                .zip(store.message(r.message).expect("desired index"))
                .all(|(a, b)| *a == Some(*b))
        });
        failures += u64::from(!ok);
    }
    Ok(Verdict {
        property: Property::Reliability,
        passed: failures == 0,
        distance: BigRational::new(BigInt::from(failures), BigInt::from(trials.max(1))),
        atoms: trials,
        detail: format!("{failures} of {trials} trials decoded incorrectly"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        let distinct: BTreeSet<_> = p.iter().collect();
        assert_eq!(distinct.len(), 24);
        assert_eq!(permutations(0), vec![Vec::<u32>::new()]);
    }

    #[test]
    fn odometer_visits_every_word() {
        let mut d = vec![0u8; 3];
        let mut count = 1;
        while odometer(&mut d, 3) {
            count += 1;
        }
        assert_eq!(count, 27);
    }

    #[test]
    fn distance_is_exact() {
        let a: HashMap<u8, u64> = [(0, 2), (1, 2)].into();
        let b: HashMap<u8, u64> = [(0, 1), (1, 2), (2, 1)].into();
        assert_eq!(tv(&a, &b), BigRational::new(1.into(), 4.into()));
        assert!(tv(&a, &a).is_zero());
    }

    #[test]
    fn elimination_finds_isolated_coordinates() {
        let f = Field::new(3).unwrap();
        let e = |v| f.element(v).unwrap();
        let view = LinearView {
            field: f,
            k: 2,
            l: 1,
            pool: 1,
            rows: vec![vec![
                vec![(0, e(1)), (2, e(1))],
                vec![(2, e(2))],
                vec![(1, e(1)), (0, e(1))],
            ]],
        };
        let got = symbolic_leakage(&view);
        assert_eq!(got, [(0, 0), (1, 0)].into_iter().collect());
        let hidden = LinearView {
            rows: vec![vec![vec![(0, e(1)), (2, e(1))]]],
            ..view
        };
        assert!(symbolic_leakage(&hidden).is_empty());
    }

    #[test]
    fn budget_is_enforced() {
        let inst = AuditInstance::block(6, 2, 2, 2, 2, None);
        assert!(matches!(
            audit_user_privacy(&inst),
            Err(AuditError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn small_block_audits() {
        let inst = AuditInstance::block(2, 1, 2, 1, 2, None);
        assert!(audit_user_privacy(&inst).unwrap().passed);
        assert!(audit_db_privacy(&inst).unwrap().passed);
        assert!(audit_reliability(&inst, 20).unwrap().passed);
        let bad = AuditInstance::block(2, 1, 2, 1, 2, Some(BlockMutation::UnmaskedProbe));
        assert!(!audit_user_privacy(&bad).unwrap().passed);
        let bad = AuditInstance::block(2, 1, 2, 1, 2, Some(BlockMutation::NoCommonRandomness));
        assert!(!audit_db_privacy(&bad).unwrap().passed);
    }

    #[test]
    fn small_table_audits() {
        let inst = AuditInstance::table(2, 1, 2, 2, None);
        assert!(audit_user_privacy(&inst).unwrap().passed);
        assert!(audit_db_privacy(&inst).unwrap().passed);
        assert!(audit_reliability(&inst, 20).unwrap().passed);
        let bad = AuditInstance::table(2, 1, 2, 2, Some(TableMutation::StructuralCrIds));
        assert!(!audit_user_privacy(&bad).unwrap().passed);
        let bad = AuditInstance::table(2, 1, 2, 2, Some(TableMutation::NoHiddenCr));
        assert!(!audit_db_privacy(&bad).unwrap().passed);
    }

    #[test]
    fn block_leakage_is_exactly_desired() {
        let params = SchemeParams::new(4, 2, 3, 2, 3).unwrap();
        let d = IndexSet::new(4, [1, 3]).unwrap();
        let (plan, queries) = plan_blocks(&params, &d, &mut stream(3, Domain::Client)).unwrap();
        let view = LinearView::from_block_queries(params.field, 4, 2, plan.randomness(), &queries);
        let want: BTreeSet<_> = [(1, 0), (1, 1), (3, 0), (3, 1)].into_iter().collect();
        assert_eq!(symbolic_leakage(&view), want);
    }
}
