//! Exact rational scalars and sums of rational `r`-th roots.
//!
//! Averages of order `r` are kept in the power domain (their `r`-th power is
//! rational). Operators that add several averages produce sums of `r`-th
//! roots of rationals, represented by [`RootSum`]. Comparisons between root
//! sums are decided exactly: rational enclosures are tightened until they
//! separate, and equality is recognised through the canonical radical form
//! `sum c_t * t^(1/r)` with `t` free of `r`-th powers.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Rational = BigRational;

pub fn rat(numer: i64, denom: i64) -> Rational {
    Rational::new(BigInt::from(numer), BigInt::from(denom))
}

pub fn int(value: i64) -> Rational {
    Rational::from_integer(BigInt::from(value))
}

/// Formats a rational as `"p/q"` (or `"p"` for integers).
pub fn format_ratio(value: &Rational) -> String {
    if value.denom().is_one() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational literal {0:?}")]
pub struct ParseRatioError(pub String);

/// Parses `"p/q"` or `"p"`.
pub fn parse_ratio(text: &str) -> Result<Rational, ParseRatioError> {
    let err = || ParseRatioError(text.to_string());
    let text = text.trim();
    match text.split_once('/') {
        Some((p, q)) => {
            let p = BigInt::from_str(p.trim()).map_err(|_| err())?;
            let q = BigInt::from_str(q.trim()).map_err(|_| err())?;
            if q.is_zero() {
                return Err(err());
            }
            Ok(Rational::new(p, q))
        }
        None => BigInt::from_str(text)
            .map(Rational::from_integer)
            .map_err(|_| err()),
    }
}

/// Serde adapter encoding a rational as a `"p/q"` string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatioStr(pub Rational);

impl Serialize for RatioStr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_ratio(&self.0))
    }
}

impl<'de> Deserialize<'de> for RatioStr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(text) => parse_ratio(&text)
                .map(RatioStr)
                .map_err(serde::de::Error::custom),
            Raw::Int(value) => Ok(RatioStr(int(value))),
        }
    }
}

impl From<Rational> for RatioStr {
    fn from(value: Rational) -> Self {
        RatioStr(value)
    }
}

impl From<&Rational> for RatioStr {
    fn from(value: &Rational) -> Self {
        RatioStr(value.clone())
    }
}

impl fmt::Display for RatioStr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_ratio(&self.0))
    }
}

pub fn to_f64(value: &Rational) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

/// Sum over a common denominator, reducing once at the end.
pub fn sum_rationals<'a, I: IntoIterator<Item = &'a Rational>>(values: I) -> Rational {
    let values: Vec<&Rational> = values.into_iter().collect();
    let mut den = BigInt::one();
    for v in &values {
        lcm_into(&mut den, v.denom());
    }
    let mut num = BigInt::zero();
    for v in &values {
        if v.denom() == &den {
            num += v.numer();
        } else {
            num += v.numer() * (&den / v.denom());
        }
    }
    Rational::new(num, den)
}

/// `den = lcm(den, d)` for positive `den` and `d`, skipping the gcd when `d`
/// already divides `den`.
pub(crate) fn lcm_into(den: &mut BigInt, d: &BigInt) {
    if d.is_one() || d == den || (&*den % d).is_zero() {
        return;
    }
    *den = den.lcm(d);
}

/// Integer power of a rational.
pub fn pow(value: &Rational, exp: u32) -> Rational {
    Pow::pow(value, exp)
}

/// Rational bounds `lo <= value^(1/r) <= hi` with `hi - lo <= 2^-bits`.
/// Exact roots come back with `lo == hi`.
pub fn root_bounds(value: &Rational, r: u32, bits: u64) -> (Rational, Rational) {
    assert!(r >= 1, "root order must be positive");
    assert!(!value.is_negative(), "root of a negative rational");
    if r == 1 || value.is_zero() {
        return (value.clone(), value.clone());
    }
    if let Some(exact) = exact_root(value, r) {
        return (exact.clone(), exact);
    }
    let scale_exp = bits * u64::from(r);
    let scaled = (value.numer().to_biguint().unwrap() << scale_exp as usize)
        .div_floor(&value.denom().to_biguint().unwrap());
    let exact_scaled = {
        let shifted = value.numer().to_biguint().unwrap() << scale_exp as usize;
        shifted.is_multiple_of(&value.denom().to_biguint().unwrap())
    };
    let root = scaled.nth_root(r);
    let denom = BigInt::one() << bits as usize;
    let lo = Rational::new(BigInt::from(root.clone()), denom.clone());
    if exact_scaled && Pow::pow(&root, r) == scaled {
        return (lo.clone(), lo);
    }
    let hi = Rational::new(BigInt::from(root + 1u32), denom);
    (lo, hi)
}

fn exact_root(value: &Rational, r: u32) -> Option<Rational> {
    let p = value.numer().to_biguint()?;
    let q = value.denom().to_biguint()?;
    let rp = p.nth_root(r);
    let rq = q.nth_root(r);
    (Pow::pow(&rp, r) == p && Pow::pow(&rq, r) == q)
        .then(|| Rational::new(BigInt::from(rp), BigInt::from(rq)))
}

/// `value = coeff * radicand^(1/r)` with `radicand` free of `r`-th powers,
/// or `None` when the radicand could not be fully factored.
fn radical_form(value: &Rational, r: u32) -> Option<(Rational, BigUint)> {
    if value.is_zero() {
        return Some((Rational::zero(), BigUint::one()));
    }
    // value^(1/r) = (p * q^(r-1))^(1/r) / q
    let p = value.numer().to_biguint()?;
    let q = value.denom().to_biguint()?;
    let n = p * Pow::pow(&q, r - 1);
    let (outside, radicand) = extract_powers(n, r)?;
    Some((
        Rational::new(BigInt::from(outside), BigInt::from(q)),
        radicand,
    ))
}

const TRIAL_LIMIT: u64 = 1 << 16;

/// Splits `n = outside^r * radicand` with `radicand` free of `r`-th powers.
fn extract_powers(mut n: BigUint, r: u32) -> Option<(BigUint, BigUint)> {
    let mut outside = BigUint::one();
    let mut radicand = BigUint::one();
    let mut d = 2u64;
    while d < TRIAL_LIMIT {
        let dd = BigUint::from(d);
        if &dd * &dd > n {
            break;
        }
        let mut e = 0u32;
        while n.is_multiple_of(&dd) {
            n /= &dd;
            e += 1;
        }
        if e > 0 {
            outside *= Pow::pow(&dd, e / r);
            radicand *= Pow::pow(&dd, e % r);
        }
        d += if d == 2 { 1 } else { 2 };
    }
    if n.is_one() {
        return Some((outside, radicand));
    }
    // n has no prime factor below the trial limit
    let root = n.nth_root(r);
    if Pow::pow(&root, r) == n {
        // n = root^r, and root may itself be composite; its r-th power is all
        // that matters here
        outside *= root;
        return Some((outside, radicand));
    }
    let limit = BigUint::from(TRIAL_LIMIT);
    let prime_bound = &limit * &limit;
    if n < prime_bound {
        // n is prime
        return Some((outside, radicand * n));
    }
    if r == 2 && n < &prime_bound * &limit {
        // n = p1 * p2 with p1 != p2 (p^2 was caught above), square-free
        return Some((outside, radicand * n));
    }
    None
}

/// A nonnegative real of the form `sum_i terms_i^(1/r)`.
///
/// Terms are nonnegative rationals kept sorted, so two sums built from the
/// same multiset of averages are structurally equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RootSum {
    r: u32,
    terms: Vec<Rational>,
}

/// Bits of the first enclosure tried by comparisons.
const START_BITS: u64 = 64;
/// Past this precision, sums without a certified radical form are treated as equal.
const MAX_BITS: u64 = 4096;

impl RootSum {
    pub fn zero(r: u32) -> Self {
        assert!(r >= 1);
        RootSum { r, terms: Vec::new() }
    }

    pub fn from_terms(r: u32, mut terms: Vec<Rational>) -> Self {
        assert!(r >= 1);
        terms.retain(|t| !t.is_zero());
        assert!(terms.iter().all(|t| t.is_positive()), "negative root term");
        terms.sort();
        RootSum { r, terms }
    }

    /// The rational `value` written as a single root term `value^r`.
    pub fn from_rational(value: &Rational, r: u32) -> Self {
        RootSum::from_terms(r, vec![pow(value, r)])
    }

    pub fn order(&self) -> u32 {
        self.r
    }

    pub fn terms(&self) -> &[Rational] {
        &self.terms
    }

    pub fn push(&mut self, term: Rational) {
        if term.is_zero() {
            return;
        }
        assert!(term.is_positive(), "negative root term");
        let at = self.terms.partition_point(|t| t < &term);
        self.terms.insert(at, term);
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Exact value when every term has a rational root.
    pub fn exact(&self) -> Option<Rational> {
        let mut total = Rational::zero();
        for t in &self.terms {
            let (lo, hi) = root_bounds(t, self.r, START_BITS);
            if lo != hi {
                return None;
            }
            total += lo;
        }
        Some(total)
    }

    /// Rational enclosure of the sum with width at most `len * 2^-bits`.
    pub fn bounds(&self, bits: u64) -> (Rational, Rational) {
        let mut lo = Rational::zero();
        let mut hi = Rational::zero();
        for t in &self.terms {
            let (l, h) = root_bounds(t, self.r, bits);
            lo += l;
            hi += h;
        }
        (lo, hi)
    }

    /// Rational enclosure of `self^k`.
    pub fn pow_bounds(&self, k: u32, bits: u64) -> (Rational, Rational) {
        if k % self.r == 0 && self.terms.len() <= 1 {
            let v = self.terms.first().cloned().unwrap_or_else(Rational::zero);
            let p = pow(&v, k / self.r);
            return (p.clone(), p);
        }
        let (lo, hi) = self.bounds(bits);
        (pow(&lo, k), pow(&hi, k))
    }

    pub fn to_f64(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| to_f64(t).powf(1.0 / f64::from(self.r)))
            .sum()
    }

    /// Floating value with every term a normal double, so the result is
    /// within a few ulps per term of the true sum.
    fn checked_f64(&self) -> Option<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            let v = to_f64(t);
            if !v.is_normal() {
                return None;
            }
            total += v.powf(1.0 / f64::from(self.r));
        }
        total.is_finite().then_some(total)
    }

    fn radical_forms(&self) -> Option<BTreeMap<BigUint, Rational>> {
        let mut out: BTreeMap<BigUint, Rational> = BTreeMap::new();
        for t in &self.terms {
            let (c, rad) = radical_form(t, self.r)?;
            *out.entry(rad).or_insert_with(Rational::zero) += c;
        }
        out.retain(|_, c| !c.is_zero());
        Some(out)
    }

    /// Exact comparison of two sums of the same root order.
    pub fn cmp_exact(&self, other: &RootSum) -> Ordering {
        assert_eq!(self.r, other.r, "comparing root sums of different order");
        if self.terms == other.terms {
            return Ordering::Equal;
        }
        // a relative gap of 1e-9 dwarfs the rounding error of checked_f64
        if let (Some(a), Some(b)) = (self.checked_f64(), other.checked_f64()) {
            if (a - b).abs() > 1e-9 * a.max(b) {
                return a.partial_cmp(&b).expect("finite");
            }
        }
        if self.r == 1 {
            return sum_rationals(&self.terms).cmp(&sum_rationals(&other.terms));
        }
        // rational enclosures next; radical forms only once they overlap
        let mut certified_distinct: Option<bool> = None;
        let mut bits = START_BITS;
        loop {
            let (alo, ahi) = self.bounds(bits);
            let (blo, bhi) = other.bounds(bits);
            if ahi < blo {
                return Ordering::Less;
            }
            if bhi < alo {
                return Ordering::Greater;
            }
            if certified_distinct.is_none() {
                match (self.radical_forms(), other.radical_forms()) {
                    (Some(a), Some(b)) if a == b => return Ordering::Equal,
                    (Some(_), Some(_)) => certified_distinct = Some(true),
                    _ => certified_distinct = Some(false),
                }
            }
            if bits >= MAX_BITS && certified_distinct != Some(true) {
                return Ordering::Equal;
            }
            bits *= 2;
        }
    }

    /// Exact comparison against a rational.
    pub fn cmp_rational(&self, value: &Rational) -> Ordering {
        if value.is_negative() {
            return Ordering::Greater;
        }
        if self.r == 1 {
            if let Some(a) = self.checked_f64() {
                let b = to_f64(value);
                if b.is_normal() && (a - b).abs() > 1e-9 * a.max(b) {
                    return a.partial_cmp(&b).expect("finite");
                }
            }
            return sum_rationals(&self.terms).cmp(value);
        }
        self.cmp_exact(&RootSum::from_rational(value, self.r))
    }
}

impl fmt::Display for RootSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(v) = self.exact() {
            return f.write_str(&format_ratio(&v));
        }
        write!(f, "{:.12}", self.to_f64())
    }
}

/// An enclosure `[lo, hi]` of a real quantity, plus an exact value when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Certified {
    pub lo: Rational,
    pub hi: Rational,
}

impl Certified {
    pub fn exact(value: Rational) -> Self {
        Certified {
            lo: value.clone(),
            hi: value,
        }
    }

    pub fn value(&self) -> Option<&Rational> {
        (self.lo == self.hi).then_some(&self.lo)
    }

    pub fn midpoint_f64(&self) -> f64 {
        match self.value() {
            Some(v) => to_f64(v),
            None => to_f64(&((&self.lo + &self.hi) / int(2))),
        }
    }
}

/// Formats `value` with `digits` significant digits.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let exp = value.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{value:.decimals$}")
}
