//! Noncommutative words and polynomials in self-adjoint letters, their Cayley
//! unitaries and fixed external unitaries.
//!
//! Text syntax: letters separated by whitespace, `X3` for a self-adjoint
//! variable, `u2` / `u2^-1` for the Cayley unitary of `X2` and its inverse,
//! `v1` / `v1^-1` for an external unitary. The empty word is written `1`.
//! Indices are 1-based in text and 0-based in memory.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrix_core::{cayley, tau, CMat, HermitianTuple, UnitaryTuple};

/// Default bound on word length.
pub const DEFAULT_MAX_DEGREE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LetterKind {
    SelfAdjoint,
    Cayley,
    Extern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter {
    pub kind: LetterKind,
    pub index: usize,
    /// `+1` or `-1`; always `+1` for self-adjoint letters.
    pub exp: i8,
}

impl Letter {
    pub fn x(index: usize) -> Self {
        Self { kind: LetterKind::SelfAdjoint, index, exp: 1 }
    }

    pub fn u(index: usize, exp: i8) -> Self {
        Self { kind: LetterKind::Cayley, index, exp }
    }

    pub fn v(index: usize, exp: i8) -> Self {
        Self { kind: LetterKind::Extern, index, exp }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.kind {
            LetterKind::SelfAdjoint => 'X',
            LetterKind::Cayley => 'u',
            LetterKind::Extern => 'v',
        };
        write!(f, "{}{}", c, self.index + 1)?;
        if self.exp < 0 {
            write!(f, "^-1")?;
        }
        Ok(())
    }
}

pub type Word = Vec<Letter>;

/// Renders a word in the text syntax.
pub fn format_word(w: &[Letter]) -> String {
    if w.is_empty() {
        return "1".to_string();
    }
    w.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_letter(tok: &str) -> Result<Letter> {
    let err = || Error::Parse(format!("bad letter '{tok}'"));
    let mut chars = tok.chars();
    let kind = match chars.next() {
        Some('X') | Some('x') => LetterKind::SelfAdjoint,
        Some('u') | Some('U') => LetterKind::Cayley,
        Some('v') | Some('V') => LetterKind::Extern,
        _ => return Err(err()),
    };
    let rest: &str = chars.as_str();
    let (num, exp) = match rest.split_once('^') {
        Some((a, b)) => {
            let e: i8 = b.trim_start_matches('(').trim_end_matches(')').parse().map_err(|_| err())?;
            (a, e)
        }
        None => (rest, 1),
    };
    let index: usize = num.parse().map_err(|_| err())?;
    if index == 0 {
        return Err(Error::Parse(format!("letter indices start at 1 in '{tok}'")));
    }
    if exp != 1 && exp != -1 {
        return Err(Error::Parse(format!("exponent must be 1 or -1 in '{tok}'")));
    }
    if kind == LetterKind::SelfAdjoint && exp != 1 {
        return Err(Error::Parse(format!("self-adjoint letters take no inverse: '{tok}'")));
    }
    Ok(Letter { kind, index: index - 1, exp })
}

/// Parses a word with the default degree bound.
pub fn parse_word(s: &str) -> Result<Word> {
    parse_word_bounded(s, DEFAULT_MAX_DEGREE)
}

pub fn parse_word_bounded(s: &str, max_degree: usize) -> Result<Word> {
    let s = s.trim();
    if s.is_empty() || s == "1" {
        return Ok(Vec::new());
    }
    let w: Word = s.split_whitespace().map(parse_letter).collect::<Result<_>>()?;
    if w.len() > max_degree {
        return Err(Error::Parse(format!("word degree {} exceeds the bound {max_degree}", w.len())));
    }
    Ok(w)
}

/// A polynomial in canonical form: terms sorted by word, like words merged, zeros dropped.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NCPolynomial {
    terms: Vec<(Complex64, Word)>,
}

impl NCPolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn one() -> Self {
        Self::word(Vec::new())
    }

    pub fn word(w: Word) -> Self {
        Self::from_terms(vec![(Complex64::new(1.0, 0.0), w)])
    }

    pub fn x(index: usize) -> Self {
        Self::word(vec![Letter::x(index)])
    }

    pub fn from_terms(terms: Vec<(Complex64, Word)>) -> Self {
        let mut map: BTreeMap<Word, Complex64> = BTreeMap::new();
        for (c, w) in terms {
            *map.entry(w).or_insert(Complex64::new(0.0, 0.0)) += c;
        }
        Self { terms: map.into_iter().filter(|(_, c)| c.norm() != 0.0).map(|(w, c)| (c, w)).collect() }
    }

    pub fn terms(&self) -> &[(Complex64, Word)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(_, w)| w.len()).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(self.terms.iter().chain(&other.terms).cloned().collect())
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self::from_terms(self.terms.iter().map(|(a, w)| (a * c, w.clone())).collect())
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Vec::new();
        for (a, w) in &self.terms {
            for (b, v) in &other.terms {
                let mut u = w.clone();
                u.extend_from_slice(v);
                out.push((a * b, u));
            }
        }
        Self::from_terms(out)
    }

    /// Largest self-adjoint and external indices used, plus one.
    pub fn letter_bounds(&self) -> (usize, usize) {
        let mut sa = 0;
        let mut ex = 0;
        for (_, w) in &self.terms {
            for l in w {
                match l.kind {
                    LetterKind::Extern => ex = ex.max(l.index + 1),
                    _ => sa = sa.max(l.index + 1),
                }
            }
        }
        (sa, ex)
    }
}

impl fmt::Display for NCPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.terms.iter().map(|(c, w)| format!("({}{:+}i) {}", c.re, c.im, format_word(w))).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// Element of the algebraic tensor product, in canonical form.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorPolynomial {
    terms: Vec<(Complex64, Word, Word)>,
}

impl TensorPolynomial {
    pub fn from_terms(terms: Vec<(Complex64, Word, Word)>) -> Self {
        let mut map: BTreeMap<(Word, Word), Complex64> = BTreeMap::new();
        for (c, a, b) in terms {
            *map.entry((a, b)).or_insert(Complex64::new(0.0, 0.0)) += c;
        }
        Self { terms: map.into_iter().filter(|(_, c)| c.norm() != 0.0).map(|((a, b), c)| (c, a, b)).collect() }
    }

    pub fn terms(&self) -> &[(Complex64, Word, Word)] {
        &self.terms
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(self.terms.iter().chain(&other.terms).cloned().collect())
    }

    /// `(a ⊗ b) ↦ (a ⊗ b q)`.
    pub fn right_mul(&self, q: &NCPolynomial) -> Self {
        let mut out = Vec::new();
        for (c, a, b) in &self.terms {
            for (d, w) in q.terms() {
                let mut bw = b.clone();
                bw.extend_from_slice(w);
                out.push((c * d, a.clone(), bw));
            }
        }
        Self::from_terms(out)
    }

    /// `(a ⊗ b) ↦ (p a ⊗ b)`.
    pub fn left_mul(&self, p: &NCPolynomial) -> Self {
        let mut out = Vec::new();
        for (d, w) in p.terms() {
            for (c, a, b) in &self.terms {
                let mut wa = w.clone();
                wa.extend_from_slice(a);
                out.push((c * d, wa, b.clone()));
            }
        }
        Self::from_terms(out)
    }
}

/// Free difference quotient with respect to the self-adjoint letter `i`.
pub fn free_difference_quotient(p: &NCPolynomial, i: usize) -> TensorPolynomial {
    let mut out = Vec::new();
    for (c, w) in p.terms() {
        for (q, l) in w.iter().enumerate() {
            if l.kind == LetterKind::SelfAdjoint && l.index == i {
                out.push((*c, w[..q].to_vec(), w[q + 1..].to_vec()));
            }
        }
    }
    TensorPolynomial::from_terms(out)
}

/// Cyclic gradient: each occurrence `a X_i b` contributes the rotation `b a`.
pub fn cyclic_gradient(p: &NCPolynomial, i: usize) -> NCPolynomial {
    let mut out = Vec::new();
    for (c, w) in p.terms() {
        for (q, l) in w.iter().enumerate() {
            if l.kind == LetterKind::SelfAdjoint && l.index == i {
                let mut r = w[q + 1..].to_vec();
                r.extend_from_slice(&w[..q]);
                out.push((*c, r));
            }
        }
    }
    NCPolynomial::from_terms(out)
}

/// Evaluates words on a tuple, caching Cayley transforms.
pub struct Evaluator<'a> {
    x: Vec<&'a CMat>,
    u: &'a UnitaryTuple,
    cayley_cache: Vec<Option<CMat>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(x: &'a HermitianTuple, u: &'a UnitaryTuple) -> Self {
        Self::from_mats(x.mats(), u)
    }

    pub fn from_mats(x: &'a [CMat], u: &'a UnitaryTuple) -> Self {
        Self::from_refs(x.iter().collect(), u)
    }

    /// Letters indexed by position in `x`.
    pub fn from_refs(x: Vec<&'a CMat>, u: &'a UnitaryTuple) -> Self {
        let k = x.len();
        Self { x, u, cayley_cache: vec![None; k] }
    }

    pub fn dim(&self) -> usize {
        self.x[0].nrows()
    }

    /// Matrix substituted for a single letter.
    pub fn letter(&mut self, l: &Letter) -> Result<CMat> {
        match l.kind {
            LetterKind::SelfAdjoint => {
                self.x.get(l.index).map(|m| (*m).clone()).ok_or(Error::IndexOutOfRange { index: l.index, available: self.x.len() })
            }
            LetterKind::Cayley => {
                let u = self.cayley(l.index)?;
                Ok(if l.exp > 0 { u.clone() } else { u.adjoint() })
            }
            LetterKind::Extern => {
                let u = self.u.get(l.index).ok_or(Error::IndexOutOfRange { index: l.index, available: self.u.count() })?;
                Ok(if l.exp > 0 { u.clone() } else { u.adjoint() })
            }
        }
    }

    pub fn cayley(&mut self, index: usize) -> Result<&CMat> {
        if index >= self.x.len() {
            return Err(Error::IndexOutOfRange { index, available: self.x.len() });
        }
        if self.cayley_cache[index].is_none() {
            self.cayley_cache[index] = Some(cayley(self.x[index]));
        }
        Ok(self.cayley_cache[index].as_ref().unwrap())
    }

    pub fn word(&mut self, w: &[Letter]) -> Result<CMat> {
        let n = self.dim();
        let mut acc = CMat::identity(n, n);
        for l in w {
            let m = self.letter(l)?;
            acc = acc * m;
        }
        Ok(acc)
    }

    pub fn poly(&mut self, p: &NCPolynomial) -> Result<CMat> {
        let n = self.dim();
        let mut acc = CMat::zeros(n, n);
        for (c, w) in p.terms() {
            acc += self.word(w)? * *c;
        }
        Ok(acc)
    }
}

/// Substitutes matrices for letters.
pub fn eval(p: &NCPolynomial, x: &HermitianTuple, u: &UnitaryTuple) -> Result<CMat> {
    Evaluator::new(x, u).poly(p)
}

/// `sum c (1/N)Tr(left) (1/N)Tr(right)`.
pub fn bitrace(tp: &TensorPolynomial, x: &HermitianTuple, u: &UnitaryTuple) -> Result<Complex64> {
    let mut ev = Evaluator::new(x, u);
    let mut s = Complex64::new(0.0, 0.0);
    for (c, a, b) in tp.terms() {
        let ta = tau(&ev.word(a)?);
        let tb = tau(&ev.word(b)?);
        s += c * ta * tb;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::sample_normalized;
    use crate::rng::stream;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn parse_and_format_round_trip() {
        let w = parse_word("X1 u2 X1 u2^-1").unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[1], Letter::u(1, 1));
        assert_eq!(w[3], Letter::u(1, -1));
        assert_eq!(format_word(&w), "X1 u2 X1 u2^-1");
        assert_eq!(parse_word("v1").unwrap(), vec![Letter::v(0, 1)]);
        assert!(parse_word("1").unwrap().is_empty());
        assert!(parse_word("X0").is_err());
        assert!(parse_word("X1^-1").is_err());
        assert!(parse_word("q1").is_err());
        assert!(parse_word_bounded("X1 X1 X1", 2).is_err());
    }

    #[test]
    fn canonical_form_merges_and_drops() {
        let p = NCPolynomial::from_terms(vec![(c(1.0), vec![Letter::x(1)]), (c(2.0), vec![Letter::x(0)]), (c(-1.0), vec![Letter::x(1)])]);
        assert_eq!(p.terms().len(), 1);
        assert_eq!(p.terms()[0].0, c(2.0));
    }

    #[test]
    fn eval_examples() {
        let u = UnitaryTuple::empty(3);
        let id = HermitianTuple::identity(3, 1);
        let e = eval(&NCPolynomial::x(0), &id, &u).unwrap();
        assert_eq!(e, CMat::identity(3, 3));

        let mut d1 = CMat::zeros(3, 3);
        let mut d2 = CMat::zeros(3, 3);
        for i in 0..3 {
            d1[(i, i)] = c(i as f64);
            d2[(i, i)] = c(1.0 - i as f64);
        }
        let x = HermitianTuple::new(vec![d1, d2]).unwrap();
        let comm =
            NCPolynomial::word(vec![Letter::x(0), Letter::x(1)]).add(&NCPolynomial::word(vec![Letter::x(1), Letter::x(0)]).scale(c(-1.0)));
        assert!(eval(&comm, &x, &u).unwrap().iter().all(|z| z.norm() < 1e-15));

        let z = HermitianTuple::zeros(3, 1);
        let e = eval(&NCPolynomial::word(vec![Letter::u(0, 1)]), &z, &u).unwrap();
        assert!((e + CMat::identity(3, 3)).iter().all(|z| z.norm() < 1e-15));
        assert!(eval(&NCPolynomial::x(4), &z, &u).is_err());
    }

    #[test]
    fn difference_quotient_examples() {
        let d = free_difference_quotient(&NCPolynomial::x(0), 0);
        assert_eq!(d.terms(), &[(c(1.0), vec![], vec![])]);
        let sq = NCPolynomial::word(vec![Letter::x(0), Letter::x(0)]);
        let d = free_difference_quotient(&sq, 0);
        let expect = TensorPolynomial::from_terms(vec![(c(1.0), vec![], vec![Letter::x(0)]), (c(1.0), vec![Letter::x(0)], vec![])]);
        assert_eq!(d, expect);
        let w = NCPolynomial::word(vec![Letter::x(1), Letter::x(0), Letter::x(1)]);
        let d = free_difference_quotient(&w, 0);
        assert_eq!(d.terms(), &[(c(1.0), vec![Letter::x(1)], vec![Letter::x(1)])]);
        let wu = NCPolynomial::word(vec![Letter::u(0, 1), Letter::v(0, -1)]);
        assert!(free_difference_quotient(&wu, 0).terms().is_empty());
    }

    #[test]
    fn cyclic_gradient_examples() {
        let sq = NCPolynomial::word(vec![Letter::x(0), Letter::x(0)]);
        assert_eq!(cyclic_gradient(&sq, 0), NCPolynomial::x(0).scale(c(2.0)));
        let w = NCPolynomial::word(vec![Letter::x(0), Letter::x(1), Letter::x(0), Letter::x(1)]);
        let expect = NCPolynomial::word(vec![Letter::x(1), Letter::x(0), Letter::x(1)]).scale(c(2.0));
        assert_eq!(cyclic_gradient(&w, 0), expect);
    }

    #[test]
    fn bitrace_examples() {
        let u = UnitaryTuple::empty(4);
        let mut r = stream(2, &[]);
        let x = sample_normalized(4, 1, 1.0, &mut r).unwrap();
        let one = TensorPolynomial::from_terms(vec![(c(1.0), vec![], vec![])]);
        assert!((bitrace(&one, &x, &u).unwrap() - c(1.0)).norm() < 1e-15);

        let mut d = CMat::zeros(4, 4);
        d[(0, 0)] = c(1.0);
        d[(1, 1)] = c(-1.0);
        let traceless = HermitianTuple::single(d).unwrap();
        let t = TensorPolynomial::from_terms(vec![(c(1.0), vec![Letter::x(0)], vec![])]);
        assert!(bitrace(&t, &traceless, &u).unwrap().norm() < 1e-15);

        let cube = NCPolynomial::word(vec![Letter::x(0); 3]);
        let b = bitrace(&free_difference_quotient(&cube, 0), &x, &u).unwrap();
        let t1 = x.moment(0, 1);
        let t2 = x.moment(0, 2);
        assert!((b.re - (2.0 * t2 + t1 * t1)).abs() < 1e-12);
    }
}
