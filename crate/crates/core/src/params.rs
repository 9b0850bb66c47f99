//! Structural parameters and cost formulas, in exact arithmetic.
//!
//! Everything here is a pure function of `(K, P, N, L)`. Stage counts and
//! repetition factors use arbitrary-precision integers; rates, ledgers and
//! capacities are exact rationals so the capacity identities can be checked
//! with equality rather than tolerance.

use num_bigint::BigUint;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::field::{Field, FieldError};
use crate::psi::EntityId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamsError {
    #[error("need at least two non-colluding databases, got N = {0}")]
    TooFewDatabases(usize),
    #[error("desired-set size P = {p} must satisfy 1 <= P <= K = {k}")]
    InvalidDesiredCount { k: usize, p: usize },
    #[error("messages must have at least one symbol")]
    ZeroLength,
    #[error(
        "P = K = {0}: every message is desired, download everything from one database instead"
    )]
    DownloadAll(usize),
    #[error("both entities have a single database; no direction is feasible")]
    Infeasible,
    #[error("{0}")]
    Field(#[from] FieldError),
}

/// `(K, P, N, L, q)`: message count, desired-set size, database count,
/// symbols per message and field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchemeParams {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub l: usize,
    pub field: Field,
}

impl SchemeParams {
    pub fn new(k: usize, p: usize, n: usize, l: usize, q: u32) -> Result<Self, ParamsError> {
        let field = Field::new(q)?;
        if n < 2 {
            return Err(ParamsError::TooFewDatabases(n));
        }
        if p == 0 || p > k {
            return Err(ParamsError::InvalidDesiredCount { k, p });
        }
        if l == 0 {
            return Err(ParamsError::ZeroLength);
        }
        Ok(SchemeParams { k, p, n, l, field })
    }
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn ratio(num: BigUint, den: BigUint) -> BigRational {
    BigRational::new(num.into(), den.into())
}

fn int(v: impl Into<BigUint>) -> BigRational {
    BigRational::from_integer(v.into().into())
}

/// Number of stages per round, `α_1..α_K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlphaProfile {
    alpha: Vec<BigUint>,
    scale: BigUint,
}

impl AlphaProfile {
    /// `α_round` for `round` in `1..=K`.
    pub fn get(&self, round: usize) -> &BigUint {
        &self.alpha[round - 1]
    }

    pub fn rounds(&self) -> usize {
        self.alpha.len()
    }

    pub fn values(&self) -> &[BigUint] {
        &self.alpha
    }

    pub fn scale(&self) -> &BigUint {
        &self.scale
    }

    /// Stage counts as machine integers, if they fit.
    pub fn to_usizes(&self) -> Option<Vec<usize>> {
        self.alpha.iter().map(|a| a.to_usize()).collect()
    }
}

/// Backward recursion from `α_K = (N−1)^{K−P}`.
///
/// Rounds strictly between `K−P` and `K` are empty. For `j ≤ K−P` the
/// undesired-only sums of round `j` at one database are consumed exactly once
/// at each other database, which forces
/// `(N−1)·α_j = Σ_{p=1}^{min(P,K−j)} C(P,p)·α_{j+p}`.
pub fn alpha_profile(k: usize, p: usize, n: usize) -> Result<AlphaProfile, ParamsError> {
    if n < 2 {
        return Err(ParamsError::TooFewDatabases(n));
    }
    if p == 0 || p > k {
        return Err(ParamsError::InvalidDesiredCount { k, p });
    }
    if p == k {
        return Err(ParamsError::DownloadAll(k));
    }
    let nm1 = BigUint::from(n - 1);
    let mut alpha = vec![BigRational::zero(); k + 1];
    alpha[k] = int(nm1.pow((k - p) as u32));
    for j in (1..=k - p).rev() {
        let mut acc = BigRational::zero();
        for q in 1..=p.min(k - j) {
            acc += int(binomial(p, q)) * &alpha[j + q];
        }
        alpha[j] = acc / int(nm1.clone());
    }
    let scale = alpha[1..].iter().fold(BigUint::one(), |acc, a| {
        acc.lcm(&a.denom().to_biguint().expect("positive denominator"))
    });
    let scaled = alpha[1..]
        .iter()
        .map(|a| {
            (a * int(scale.clone()))
                .to_integer()
                .to_biguint()
                .expect("non-negative stage count")
        })
        .collect();
    Ok(AlphaProfile {
        alpha: scaled,
        scale,
    })
}

/// Smallest `v ≥ 1` with `num·v/den` integral.
fn smallest_multiplier(num: &BigUint, den: &BigUint) -> BigUint {
    den / num.gcd(den)
}

/// Repetition count `ν = lcm(ν_0, ν_1, …, ν_{min(P,K−P)})`.
pub fn repetition_factor(k: usize, p: usize, n: usize, alpha: &AlphaProfile) -> BigUint {
    let nm1 = BigUint::from(n - 1);
    let mut nu = smallest_multiplier(&(alpha.get(k) * BigUint::from(n)), &BigUint::from(p));
    for round in 1..=p.min(k - p) {
        let served = binomial(p, round) * alpha.get(round);
        if served.is_zero() {
            continue;
        }
        nu = nu.lcm(&smallest_multiplier(&served, &nm1));
    }
    nu
}

/// Per-database, per-repetition download accounting of the table scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostLedger {
    /// all k-sums
    pub d1: BigRational,
    /// sums with undesired symbols only
    pub u1: BigRational,
    /// sums with desired symbols only
    pub u2: BigRational,
    /// plainly downloaded common randomness
    pub d2: BigRational,
}

impl CostLedger {
    pub fn rate(&self) -> BigRational {
        (&self.d1 - &self.u1) / (&self.d1 + &self.d2)
    }

    /// Distinct common-randomness symbols per database and repetition.
    pub fn randomness(&self) -> BigRational {
        &self.u1 + &self.d2
    }

    pub fn desired(&self) -> BigRational {
        &self.d1 - &self.u1
    }

    pub fn downloads(&self) -> BigRational {
        &self.d1 + &self.d2
    }
}

pub fn cost_ledger(k: usize, p: usize, n: usize, alpha: &AlphaProfile) -> CostLedger {
    let d1 = (1..=k)
        .map(|r| binomial(k, r) * alpha.get(r))
        .sum::<BigUint>();
    let u1 = (1..=k - p)
        .map(|r| binomial(k - p, r) * alpha.get(r))
        .sum::<BigUint>();
    let u2 = (1..=p.min(k - p))
        .map(|r| binomial(p, r) * alpha.get(r))
        .sum::<BigUint>();
    CostLedger {
        d1: int(d1),
        u1: int(u1),
        u2: int(u2.clone()),
        d2: ratio(u2, BigUint::from(n - 1)),
    }
}

/// Everything the table scheme needs, computed once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableParameters {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub alpha: AlphaProfile,
    pub nu: BigUint,
    pub ledger: CostLedger,
}

impl TableParameters {
    pub fn new(k: usize, p: usize, n: usize) -> Result<Self, ParamsError> {
        let alpha = alpha_profile(k, p, n)?;
        let nu = repetition_factor(k, p, n, &alpha);
        let ledger = cost_ledger(k, p, n, &alpha);
        Ok(TableParameters {
            k,
            p,
            n,
            alpha,
            nu,
            ledger,
        })
    }

    /// Desired symbols per message over `nu` repetitions at all databases
    /// (`N·ν·(D1−U1)/P`); a rational unless the split is symmetric.
    pub fn message_length(&self, nu: &BigUint) -> BigRational {
        int(nu.clone()) * int(BigUint::from(self.n)) * self.ledger.desired()
            / int(BigUint::from(self.p))
    }

    /// Total downloads over all databases and repetitions.
    pub fn total_downloads(&self, nu: &BigUint) -> BigRational {
        int(nu.clone()) * int(BigUint::from(self.n)) * self.ledger.downloads()
    }

    /// Distinct common-randomness symbols over all databases and repetitions.
    pub fn total_randomness(&self, nu: &BigUint) -> BigRational {
        int(nu.clone()) * int(BigUint::from(self.n)) * self.ledger.randomness()
    }
}

/// Sum capacity of MM-SPIR given the available randomness per desired symbol.
pub fn mm_spir_capacity(k: usize, p: usize, n: usize, hs_per_symbol: &BigRational) -> BigRational {
    if p == k && k >= 1 {
        return BigRational::one();
    }
    if p >= 1 && p < k && n >= 2 {
        let threshold = ratio(BigUint::from(p), BigUint::from(n - 1));
        if *hs_per_symbol >= threshold {
            return BigRational::one() - ratio(BigUint::one(), BigUint::from(n));
        }
    }
    BigRational::zero()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LspirCost {
    /// downloaded symbols `⌈NPL/(N−1)⌉`
    pub download: u64,
    /// common randomness `⌈PL/(N−1)⌉`
    pub randomness: u64,
}

pub fn lspir_cost(p: u64, n: u64, l: u64) -> Result<LspirCost, ParamsError> {
    if n < 2 {
        return Err(ParamsError::TooFewDatabases(n as usize));
    }
    let pl = p as u128 * l as u128;
    let den = (n - 1) as u128;
    Ok(LspirCost {
        download: (n as u128 * pl).div_ceil(den) as u64,
        randomness: pl.div_ceil(den) as u64,
    })
}

/// Cost of one direction: the querying entity has `p` elements, the
/// responding entity `n` databases.
pub fn psi_direction_cost(p: u64, n: u64) -> Option<u64> {
    (n >= 2).then(|| (p as u128 * n as u128).div_ceil((n - 1) as u128) as u64)
}

/// Optimal PSI download cost and the entity that should initiate.
pub fn psi_optimal_cost(
    p1: u64,
    n1: u64,
    p2: u64,
    n2: u64,
) -> Result<(u64, EntityId), ParamsError> {
    let e1 = psi_direction_cost(p1, n2);
    let e2 = psi_direction_cost(p2, n1);
    match (e1, e2) {
        (Some(a), Some(b)) if b < a => Ok((b, EntityId::E2)),
        (Some(a), _) => Ok((a, EntityId::E1)),
        (None, Some(b)) => Ok((b, EntityId::E2)),
        (None, None) => Err(ParamsError::Infeasible),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(a: &AlphaProfile) -> Vec<u64> {
        a.values().iter().map(|x| x.to_u64().unwrap()).collect()
    }

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(ints(&alpha_profile(3, 1, 3).unwrap()), vec![1, 2, 4]);
        assert_eq!(ints(&alpha_profile(5, 3, 2).unwrap()), vec![3, 1, 0, 0, 1]);
        // hand evaluation: α4 = 1, α3 = 0, α2 = C(2,2)·α4 = 1, α1 = C(2,1)·α2 + C(2,2)·α3 = 2
        assert_eq!(ints(&alpha_profile(4, 2, 2).unwrap()), vec![2, 1, 0, 1]);
        assert_eq!(alpha_profile(3, 1, 3).unwrap().scale(), &BigUint::one());
    }

    #[test]
    fn alpha_errors() {
        assert_eq!(alpha_profile(3, 3, 2), Err(ParamsError::DownloadAll(3)));
        assert_eq!(alpha_profile(3, 1, 1), Err(ParamsError::TooFewDatabases(1)));
        assert!(alpha_profile(3, 0, 2).is_err());
    }

    #[test]
    fn repetition_examples() {
        let nu = |k, p, n| repetition_factor(k, p, n, &alpha_profile(k, p, n).unwrap());
        assert_eq!(nu(3, 1, 3), BigUint::from(2u32));
        assert_eq!(nu(3, 1, 2), BigUint::from(1u32));
        // ν0 = 3 from 2·ν0/3; ν1 = ν2 = 1
        assert_eq!(nu(5, 3, 2), BigUint::from(3u32));
    }

    #[test]
    fn ledger_examples() {
        let l = cost_ledger(3, 1, 3, &alpha_profile(3, 1, 3).unwrap());
        assert_eq!(
            (l.d1.clone(), l.u1.clone(), l.d2.clone()),
            (r(13, 1), r(4, 1), r(1, 2))
        );
        // 3 databases · ν = 2
        assert_eq!(r(6, 1) * l.downloads(), r(81, 1));
        assert_eq!(r(6, 1) * l.desired(), r(54, 1));
        assert_eq!(l.rate(), r(2, 3));

        let l = cost_ledger(5, 3, 2, &alpha_profile(5, 3, 2).unwrap());
        assert_eq!(
            (l.d1.clone(), l.u1.clone(), l.d2.clone()),
            (r(26, 1), r(7, 1), r(12, 1))
        );
        assert_eq!(r(2, 1) * l.downloads(), r(76, 1));
        assert_eq!(r(2, 1) * l.desired(), r(38, 1));
        assert_eq!(l.rate(), r(1, 2));
    }

    #[test]
    fn grid_identities() {
        for k in 2..=8 {
            for p in 1..k {
                for n in 2..=4 {
                    let a = alpha_profile(k, p, n).unwrap();
                    let nm1 = BigUint::from(n - 1);
                    assert_eq!(a.get(k), &nm1.pow((k - p) as u32));
                    for j in k - p + 1..k {
                        assert!(a.get(j).is_zero(), "α_{j} for ({k},{p},{n})");
                    }
                    for j in 1..=k - p {
                        let rhs: BigUint = (1..=p.min(k - j))
                            .map(|q| binomial(p, q) * a.get(j + q))
                            .sum();
                        assert_eq!(&nm1 * a.get(j), rhs, "balance j={j} ({k},{p},{n})");
                    }
                    let l = cost_ledger(k, p, n, &a);
                    let nn = r(n as i64, 1);
                    assert_eq!(l.d1, &nn * &l.u1 + (&nn - r(1, 1)) * &l.d2);
                    assert_eq!(l.rate(), r(1, 1) - r(1, n as i64));
                    // per-database form of the randomness identity
                    assert_eq!(l.randomness(), l.desired() / (nn.clone() - r(1, 1)));
                    let t = TableParameters::new(k, p, n).unwrap();
                    let len = t.message_length(&t.nu);
                    assert!(len.is_integer(), "asymmetric split at ({k},{p},{n})");
                    assert_eq!(
                        t.total_randomness(&t.nu),
                        r(p as i64, 1) * len / r(n as i64 - 1, 1)
                    );
                }
            }
        }
    }

    #[test]
    fn capacity_branches() {
        let zero = BigRational::zero();
        assert_eq!(mm_spir_capacity(4, 4, 1, &zero), r(1, 1));
        assert_eq!(mm_spir_capacity(4, 4, 3, &zero), r(1, 1));
        assert_eq!(mm_spir_capacity(3, 1, 1, &r(10, 1)), zero);
        assert_eq!(mm_spir_capacity(3, 1, 3, &r(1, 2)), r(2, 3));
        assert_eq!(mm_spir_capacity(3, 1, 3, &r(1, 3)), zero);
        assert_eq!(mm_spir_capacity(5, 3, 2, &r(3, 1)), r(1, 2));
    }

    #[test]
    fn lspir_examples() {
        let c = |p, n, l| lspir_cost(p, n, l).unwrap();
        assert_eq!(
            c(1, 2, 1),
            LspirCost {
                download: 2,
                randomness: 1
            }
        );
        assert_eq!(
            c(4, 2, 1),
            LspirCost {
                download: 8,
                randomness: 4
            }
        );
        assert_eq!(
            c(3, 4, 5),
            LspirCost {
                download: 20,
                randomness: 5
            }
        );
        assert!(lspir_cost(1, 1, 1).is_err());
        for pl in 1..40u64 {
            let mut prev = u64::MAX;
            for n in 2..10 {
                let cost = c(pl, n, 1);
                assert_eq!(cost.download, pl + cost.randomness);
                assert!(cost.download <= prev);
                prev = cost.download;
            }
        }
    }

    #[test]
    fn psi_cost_examples() {
        assert_eq!(psi_optimal_cost(4, 2, 6, 2).unwrap(), (8, EntityId::E1));
        assert_eq!(psi_optimal_cost(5, 3, 5, 3).unwrap(), (8, EntityId::E1));
        assert_eq!(psi_optimal_cost(1, 2, 1, 2).unwrap(), (2, EntityId::E1));
        assert_eq!(psi_optimal_cost(6, 2, 4, 2).unwrap(), (8, EntityId::E2));
        // only E2 has replicas, so only E1 can query
        assert_eq!(psi_optimal_cost(3, 1, 1, 3).unwrap(), (5, EntityId::E1));
        assert_eq!(psi_optimal_cost(3, 3, 1, 1).unwrap(), (2, EntityId::E2));
        assert_eq!(psi_optimal_cost(3, 1, 1, 1), Err(ParamsError::Infeasible));
    }
}
