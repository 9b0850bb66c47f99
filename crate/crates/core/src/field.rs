//! Prime-field arithmetic and fixed-length symbol vectors.
//!
//! The modulus lives in a [`Field`] context value rather than in every
//! element, so a [`FieldElement`] is a single byte. Operations validate that
//! their operands are reduced for the context they are applied in; an element
//! produced under a larger modulus is rejected instead of being silently
//! reduced.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("modulus {0} is not a prime")]
    NotPrime(u32),
    #[error("modulus {0} does not fit the one-byte symbol encoding (q must be < 256)")]
    ModulusTooLarge(u32),
    #[error("value {value} is not an element of F_{modulus}")]
    ModulusMismatch { value: u32, modulus: u32 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero has no multiplicative inverse")]
    DivisionByZero,
    #[error("malformed symbol vector encoding: {0}")]
    Encoding(&'static str),
}

/// An element of `F_q`, stored reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldElement(u8);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);

    pub fn value(self) -> u32 {
        self.0 as u32
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The prime field `F_q` for a prime `q < 256`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Field {
    q: u32,
}

fn is_prime(n: u32) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

impl Field {
    /// The binary field used for incidence bits.
    pub const BINARY: Field = Field { q: 2 };

    pub fn new(q: u32) -> Result<Self, FieldError> {
        if q >= 256 {
            return Err(FieldError::ModulusTooLarge(q));
        }
        if !is_prime(q) {
            return Err(FieldError::NotPrime(q));
        }
        Ok(Field { q })
    }

    pub fn modulus(&self) -> u32 {
        self.q
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement(0)
    }

    pub fn one(&self) -> FieldElement {
        FieldElement(1)
    }

    /// Checked construction: `v` must already lie in `[0, q)`.
    pub fn element(&self, v: u32) -> Result<FieldElement, FieldError> {
        if v < self.q {
            Ok(FieldElement(v as u8))
        } else {
            Err(FieldError::ModulusMismatch {
                value: v,
                modulus: self.q,
            })
        }
    }

    /// Reduces an arbitrary integer into the field.
    pub fn reduce(&self, v: u64) -> FieldElement {
        FieldElement((v % self.q as u64) as u8)
    }

    /// All elements `0..q` in increasing order.
    pub fn elements(&self) -> impl Iterator<Item = FieldElement> {
        (0..self.q).map(|v| FieldElement(v as u8))
    }

    fn check(&self, a: FieldElement) -> Result<u32, FieldError> {
        let v = a.value();
        if v < self.q {
            Ok(v)
        } else {
            Err(FieldError::ModulusMismatch {
                value: v,
                modulus: self.q,
            })
        }
    }

    pub fn add(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        Ok(FieldElement(((a + b) % self.q) as u8))
    }

    pub fn neg(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        let a = self.check(a)?;
        Ok(FieldElement(((self.q - a) % self.q) as u8))
    }

    pub fn sub(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn mul(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        Ok(FieldElement(((a * b) % self.q) as u8))
    }

    pub fn inv(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        let a = self.check(a)?;
        if a == 0 {
            return Err(FieldError::DivisionByZero);
        }
        // Fermat: a^(q-2)
        let mut result = 1u32;
        let mut base = a;
        let mut e = self.q - 2;
        while e > 0 {
            if e & 1 == 1 {
                result = result * base % self.q;
            }
            base = base * base % self.q;
            e >>= 1;
        }
        Ok(FieldElement(result as u8))
    }

    pub fn sum<I>(&self, items: I) -> Result<FieldElement, FieldError>
    where
        I: IntoIterator<Item = FieldElement>,
    {
        items
            .into_iter()
            .try_fold(self.zero(), |acc, x| self.add(acc, x))
    }

    pub fn inner_product(
        &self,
        a: &SymbolVector,
        b: &SymbolVector,
    ) -> Result<FieldElement, FieldError> {
        if a.len() != b.len() {
            return Err(FieldError::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        let mut acc = 0u32;
        for (&x, &y) in a.iter().zip(b.iter()) {
            acc = (acc + self.check(x)? * self.check(y)?) % self.q;
        }
        Ok(FieldElement(acc as u8))
    }

    /// `len` i.i.d. uniform symbols drawn from `rng`.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> SymbolVector {
        SymbolVector(
            (0..len)
                .map(|_| FieldElement(rng.gen_range(0..self.q) as u8))
                .collect(),
        )
    }
}

/// An immutable, fixed-length sequence of field elements.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolVector(Vec<FieldElement>);

impl SymbolVector {
    pub fn new(elems: Vec<FieldElement>) -> Self {
        SymbolVector(elems)
    }

    pub fn zeros(len: usize) -> Self {
        SymbolVector(vec![FieldElement::ZERO; len])
    }

    /// Builds a vector from raw values, checking each against `field`.
    pub fn from_values(field: &Field, values: &[u32]) -> Result<Self, FieldError> {
        values
            .iter()
            .map(|&v| field.element(v))
            .collect::<Result<Vec<_>, _>>()
            .map(SymbolVector)
    }

    /// Standard basis vector `e_index` of length `len`.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = vec![FieldElement::ZERO; len];
        v[index] = FieldElement(1);
        SymbolVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<FieldElement> {
        self.0.get(i).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FieldElement> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[FieldElement] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<FieldElement> {
        self.0
    }

    fn zip_with(
        &self,
        other: &SymbolVector,
        f: impl Fn(FieldElement, FieldElement) -> Result<FieldElement, FieldError>,
    ) -> Result<SymbolVector, FieldError> {
        if self.len() != other.len() {
            return Err(FieldError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        self.iter()
            .zip(other.iter())
            .map(|(&a, &b)| f(a, b))
            .collect::<Result<Vec<_>, _>>()
            .map(SymbolVector)
    }

    pub fn add(&self, field: &Field, other: &SymbolVector) -> Result<SymbolVector, FieldError> {
        self.zip_with(other, |a, b| field.add(a, b))
    }

    pub fn sub(&self, field: &Field, other: &SymbolVector) -> Result<SymbolVector, FieldError> {
        self.zip_with(other, |a, b| field.sub(a, b))
    }

    /// Canonical encoding: little-endian `u32` length, then one byte per element.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend(self.0.iter().map(|e| e.0));
    }

    /// Decodes one vector from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode(field: &Field, bytes: &[u8]) -> Result<(SymbolVector, usize), FieldError> {
        let header: [u8; 4] = bytes
            .get(..4)
            .ok_or(FieldError::Encoding("truncated length prefix"))?
            .try_into()
            .expect("slice of length 4");
        let len = u32::from_le_bytes(header) as usize;
        let body = bytes
            .get(4..4 + len)
            .ok_or(FieldError::Encoding("truncated body"))?;
        let elems = body
            .iter()
            .map(|&b| field.element(b as u32))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((SymbolVector(elems), 4 + len))
    }
}

impl FromIterator<FieldElement> for SymbolVector {
    fn from_iter<I: IntoIterator<Item = FieldElement>>(iter: I) -> Self {
        SymbolVector(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a SymbolVector {
    type Item = &'a FieldElement;
    type IntoIter = std::slice::Iter<'a, FieldElement>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    fn f(q: u32) -> Field {
        Field::new(q).unwrap()
    }

    fn el(field: &Field, v: u32) -> FieldElement {
        field.element(v).unwrap()
    }

    #[test]
    fn small_sums() {
        let f2 = f(2);
        assert_eq!(f2.add(el(&f2, 1), el(&f2, 1)).unwrap(), f2.zero());
        let f3 = f(3);
        assert_eq!(f3.add(el(&f3, 2), el(&f3, 2)).unwrap(), el(&f3, 1));
        for x in f2.elements() {
            assert_eq!(f2.add(x, f2.zero()).unwrap(), x);
        }
    }

    #[test]
    fn rejects_bad_moduli() {
        assert_eq!(Field::new(4), Err(FieldError::NotPrime(4)));
        assert_eq!(Field::new(1), Err(FieldError::NotPrime(1)));
        assert_eq!(Field::new(257), Err(FieldError::ModulusTooLarge(257)));
        assert!(Field::new(251).is_ok());
    }

    #[test]
    fn foreign_element_is_rejected() {
        let f5 = f(5);
        let f2 = f(2);
        let four = el(&f5, 4);
        assert!(matches!(
            f2.add(four, f2.one()),
            Err(FieldError::ModulusMismatch {
                value: 4,
                modulus: 2
            })
        ));
    }

    #[test]
    fn axioms_exhaustive() {
        for q in [2, 3, 5] {
            let fq = f(q);
            let all: Vec<_> = fq.elements().collect();
            for &a in &all {
                assert_eq!(fq.add(a, fq.neg(a).unwrap()).unwrap(), fq.zero());
                if !a.is_zero() {
                    assert_eq!(fq.mul(a, fq.inv(a).unwrap()).unwrap(), fq.one());
                }
                for &b in &all {
                    assert_eq!(fq.add(a, b), fq.add(b, a));
                    assert_eq!(fq.mul(a, b), fq.mul(b, a));
                    for &c in &all {
                        let l = fq.add(fq.add(a, b).unwrap(), c).unwrap();
                        let r = fq.add(a, fq.add(b, c).unwrap()).unwrap();
                        assert_eq!(l, r);
                        let l = fq.mul(a, fq.add(b, c).unwrap()).unwrap();
                        let r = fq
                            .add(fq.mul(a, b).unwrap(), fq.mul(a, c).unwrap())
                            .unwrap();
                        assert_eq!(l, r);
                    }
                }
            }
            assert_eq!(fq.inv(fq.zero()), Err(FieldError::DivisionByZero));
        }
    }

    #[test]
    fn inner_product_examples() {
        let f2 = f(2);
        let b = SymbolVector::from_values(&f2, &[1, 0, 1]).unwrap();
        assert_eq!(
            f2.inner_product(&SymbolVector::zeros(3), &b).unwrap(),
            f2.zero()
        );
        for j in 0..3 {
            assert_eq!(
                f2.inner_product(&SymbolVector::basis(3, j), &b).unwrap(),
                b.get(j).unwrap()
            );
        }
        let a = SymbolVector::from_values(&f2, &[1, 1, 0]).unwrap();
        // oracle: explicit loop over the integers, reduced at the end
        let oracle = [1u32, 1, 0]
            .iter()
            .zip([1u32, 0, 1].iter())
            .map(|(x, y)| x * y)
            .sum::<u32>()
            % 2;
        assert_eq!(oracle, 1);
        assert_eq!(f2.inner_product(&a, &b).unwrap().value(), oracle);
        assert!(matches!(
            f2.inner_product(&a, &SymbolVector::zeros(2)),
            Err(FieldError::LengthMismatch { left: 3, right: 2 })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_uniform() {
        let f2 = f(2);
        assert!(f2
            .sample_uniform(&mut stream(1, Domain::Messages), 0)
            .is_empty());
        let a = f2.sample_uniform(&mut stream(7, Domain::Messages), 64);
        let b = f2.sample_uniform(&mut stream(7, Domain::Messages), 64);
        assert_eq!(a, b);
        let c = f2.sample_uniform(&mut stream(7, Domain::CommonRandomness), 64);
        assert_ne!(a, c);

        // Binomial(10^4, 1/2): sigma = 50, accept within 3 sigma.
        let draws = f2.sample_uniform(&mut stream(2024, Domain::Messages), 10_000);
        let ones = draws.iter().filter(|e| e.value() == 1).count() as i64;
        assert!((ones - 5_000).abs() <= 150, "ones = {ones}");

        // chi-square with q - 1 = 4 degrees of freedom for q = 5
        let f5 = f(5);
        let draws = f5.sample_uniform(&mut stream(99, Domain::Messages), 10_000);
        let mut hist = [0f64; 5];
        for e in draws.iter() {
            hist[e.value() as usize] += 1.0;
        }
        let chi2: f64 = hist.iter().map(|&o| (o - 2000.0).powi(2) / 2000.0).sum();
        // mean 4, sd sqrt(8); 3 sigma bound
        assert!(chi2 < 4.0 + 3.0 * 8f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn encoding_layout_is_bit_exact() {
        let f3 = f(3);
        let v = SymbolVector::from_values(&f3, &[2, 0, 1]).unwrap();
        assert_eq!(v.encode(), vec![3, 0, 0, 0, 2, 0, 1]);
        let (back, used) = SymbolVector::decode(&f3, &v.encode()).unwrap();
        assert_eq!((back, used), (v, 7));
        assert!(SymbolVector::decode(&f3, &[3, 0, 0, 0, 2]).is_err());
        assert!(SymbolVector::decode(&f3, &[1, 0, 0, 0, 7]).is_err());
    }

    fn vec_strategy(q: u32, len: usize) -> impl Strategy<Value = SymbolVector> {
        proptest::collection::vec(0..q, len).prop_map(move |vals| {
            SymbolVector::from_values(&Field::new(q).unwrap(), &vals).unwrap()
        })
    }

    proptest! {
        #[test]
        fn inner_product_is_bilinear(
            (a, b, c) in (vec_strategy(7, 9), vec_strategy(7, 9), vec_strategy(7, 9))
        ) {
            let f7 = f(7);
            let lhs = f7.inner_product(&a.add(&f7, &b).unwrap(), &c).unwrap();
            let rhs = f7.add(
                f7.inner_product(&a, &c).unwrap(),
                f7.inner_product(&b, &c).unwrap(),
            ).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn encoding_roundtrips(v in (1usize..40).prop_flat_map(|n| vec_strategy(251, n))) {
            let f251 = f(251);
            let bytes = v.encode();
            let (back, used) = SymbolVector::decode(&f251, &bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, v);
        }
    }
}
