//! Convex trace potentials on time-indexed matrix tuples.
//!
//! A potential is `G = D + (sum_i g_i^p)^(1/p)` with components
//! `g_i = D_i + C_i sum_{slots, l} tau(x^2) + Re(lambda_i tau(word_i))`.
//! Word letters use a flat variable index `slot * m + l`, so with `m = 1`
//! the letter `X2` is the matrix at the second time slot.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix_core::{herm_part, tau, tau_re_product, CMat, HermitianTuple, UnitaryTuple};
use crate::nc_poly::{format_word, parse_word, Evaluator, LetterKind, Word};

/// Exponent of the component combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinite,
}

/// One component `D + C * quadratic + Re(lambda tau(word))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub d: f64,
    pub c: f64,
    pub lambda: Complex64,
    pub word: Word,
}

/// Declarative potential over time slots `t_1 < ... < t_k` in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSpec {
    pub times: Vec<f64>,
    /// Matrices per time slot.
    pub m: usize,
    pub p: Exponent,
    pub d: f64,
    pub components: Vec<Component>,
}

/// Gradient convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientScale {
    /// Gradient of `G` with respect to normalized tuples under `(1/N) Re Tr`.
    Scaled,
    /// Gradient of `N^2 G(y / sqrt(N))` in raw coordinates `y = sqrt(N) x` under `Re Tr`; equals `sqrt(N)` times the scaled gradient.
    PerCoordinate,
}

fn field<T>(field: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Field { field: field.to_string(), msg: msg.into() })
}

impl PotentialSpec {
    /// `G = 0` over the given slots.
    pub fn zero(times: Vec<f64>, m: usize) -> Self {
        Self { times, m, p: Exponent::Finite(2.0), d: 0.0, components: Vec::new() }
    }

    /// `G = c sum_l tau(X_l(1)^2)`.
    pub fn quadratic(c: f64, m: usize) -> Self {
        Self::quadratic_at(c, m, vec![1.0])
    }

    /// `G = c sum_{slots, l} tau(x^2)` over the given slots.
    pub fn quadratic_at(c: f64, m: usize, times: Vec<f64>) -> Self {
        Self {
            times,
            m,
            p: Exponent::Finite(2.0),
            d: 0.0,
            components: vec![Component { d: 0.0, c, lambda: Complex64::new(0.0, 0.0), word: Vec::new() }],
        }
    }

    pub fn slots(&self) -> usize {
        self.times.len()
    }

    /// Number of self-adjoint variables `k * m`.
    pub fn variables(&self) -> usize {
        self.times.len() * self.m
    }

    /// Convex mode: every quadratic coefficient strictly positive.
    pub fn is_convex_mode(&self) -> bool {
        self.components.iter().all(|c| c.c > 0.0)
    }

    pub fn is_word_free(&self) -> bool {
        self.components.iter().all(|c| c.word.is_empty() || c.lambda == Complex64::new(0.0, 0.0))
    }

    pub fn uses_unitary_words_only(&self) -> bool {
        self.components.iter().all(|c| c.word.iter().all(|l| l.kind != LetterKind::SelfAdjoint))
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return field("times", "at least one time slot is required");
        }
        let mut prev = 0.0;
        for (i, &t) in self.times.iter().enumerate() {
            if !(t > prev) || t > 1.0 || !t.is_finite() {
                return field(&format!("times[{i}]"), "times must be strictly increasing in (0, 1]");
            }
            prev = t;
        }
        if self.m == 0 {
            return field("m", "must be at least 1");
        }
        match self.p {
            Exponent::Finite(p) if !(p >= 2.0) || !p.is_finite() => {
                return field("p", format!("exponent must lie in [2, inf], got {p}"));
            }
            _ => {}
        }
        if !self.d.is_finite() {
            return field("D", "must be finite");
        }
        let vars = self.variables();
        for (i, c) in self.components.iter().enumerate() {
            if !c.d.is_finite() || !c.c.is_finite() || !c.lambda.re.is_finite() || !c.lambda.im.is_finite() {
                return field(&format!("components[{i}]"), "coefficients must be finite");
            }
            if c.c < 0.0 {
                return field(&format!("components[{i}].C"), "quadratic coefficient must be nonnegative");
            }
            for l in &c.word {
                if l.kind != LetterKind::Extern && l.index >= vars {
                    return field(&format!("components[{i}].word"), format!("letter index {} exceeds the {} variables", l.index + 1, vars));
                }
            }
        }
        Ok(())
    }

    /// Largest external unitary index used, plus one.
    pub fn extern_count(&self) -> usize {
        self.components.iter().flat_map(|c| c.word.iter()).filter(|l| l.kind == LetterKind::Extern).map(|l| l.index + 1).max().unwrap_or(0)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = SpecDoc::from(self);
        serde_json::to_value(doc).expect("spec documents always serialize")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SpecDoc::from(self)).expect("spec documents always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_json_value(&v)
    }

    /// Parses and validates a spec document, reporting the offending field.
    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let obj = match v.as_object() {
            Some(o) => o,
            None => return field("", "potential spec must be a JSON object"),
        };
        let times: Vec<f64> = match obj.get("times") {
            Some(serde_json::Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(i, x)| x.as_f64().ok_or(()).or_else(|_| field(&format!("times[{i}]"), "must be a number")))
                .collect::<Result<_>>()?,
            _ => return field("times", "required array of numbers"),
        };
        let m = match obj.get("m") {
            None => 1,
            Some(x) => match x.as_u64() {
                Some(k) if k >= 1 => k as usize,
                _ => return field("m", "must be a positive integer"),
            },
        };
        let p = match obj.get("p") {
            None => Exponent::Finite(2.0),
            Some(serde_json::Value::String(s)) if s == "inf" || s == "infinity" => Exponent::Infinite,
            Some(x) => match x.as_f64() {
                Some(p) => Exponent::Finite(p),
                None => return field("p", "must be a number or \"inf\""),
            },
        };
        let d = match obj.get("D") {
            None => 0.0,
            Some(x) => x.as_f64().ok_or(()).or_else(|_| field("D", "must be a number"))?,
        };
        let mut components = Vec::new();
        if let Some(cs) = obj.get("components") {
            let arr = match cs.as_array() {
                Some(a) => a,
                None => return field("components", "must be an array"),
            };
            for (i, c) in arr.iter().enumerate() {
                let num = |key: &str, default: Option<f64>| -> Result<f64> {
                    match c.get(key) {
                        Some(x) => x.as_f64().ok_or(()).or_else(|_| field(&format!("components[{i}].{key}"), "must be a number")),
                        None => default.ok_or(()).or_else(|_| field(&format!("components[{i}].{key}"), "is required")),
                    }
                };
                let word_s = match c.get("word") {
                    None => "1".to_string(),
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(_) => return field(&format!("components[{i}].word"), "must be a string"),
                };
                let word = parse_word(&word_s).or_else(|e| field(&format!("components[{i}].word"), e.to_string()))?;
                components.push(Component {
                    d: num("D", Some(0.0))?,
                    c: num("C", None)?,
                    lambda: Complex64::new(num("lambda_re", Some(0.0))?, num("lambda_im", Some(0.0))?),
                    word,
                });
            }
        }
        let spec = Self { times, m, p, d, components };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentDoc {
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "C")]
    c: f64,
    lambda_re: f64,
    lambda_im: f64,
    word: String,
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    times: Vec<f64>,
    m: usize,
    p: serde_json::Value,
    #[serde(rename = "D")]
    d: f64,
    components: Vec<ComponentDoc>,
}

impl From<&PotentialSpec> for SpecDoc {
    fn from(s: &PotentialSpec) -> Self {
        let p = match s.p {
            Exponent::Finite(p) => serde_json::json!(p),
            Exponent::Infinite => serde_json::json!("inf"),
        };
        SpecDoc {
            times: s.times.clone(),
            m: s.m,
            p,
            d: s.d,
            components: s
                .components
                .iter()
                .map(|c| ComponentDoc { d: c.d, c: c.c, lambda_re: c.lambda.re, lambda_im: c.lambda.im, word: format_word(&c.word) })
                .collect(),
        }
    }
}

fn check_slots(spec: &PotentialSpec, x: &[HermitianTuple]) -> Result<()> {
    if x.len() != spec.slots() {
        return Err(Error::DimensionMismatch { expected: spec.slots(), found: x.len() });
    }
    for t in x {
        if t.m() != spec.m {
            return Err(Error::DimensionMismatch { expected: spec.m, found: t.m() });
        }
    }
    Ok(())
}

fn flat_refs(x: &[HermitianTuple]) -> Vec<&CMat> {
    x.iter().flat_map(|t| t.mats().iter()).collect()
}

/// Component values `g_i` at `x`.
pub fn component_values(spec: &PotentialSpec, x: &[HermitianTuple], u: &UnitaryTuple) -> Result<Vec<f64>> {
    check_slots(spec, x)?;
    let refs = flat_refs(x);
    let quad: f64 = refs.iter().map(|a| tau_re_product(a, a)).sum();
    let mut ev = Evaluator::from_refs(refs, u);
    spec.components
        .iter()
        .map(|c| {
            let w = if c.lambda == Complex64::new(0.0, 0.0) {
                0.0
            } else if c.word.is_empty() {
                c.lambda.re
            } else {
                (c.lambda * tau(&ev.word(&c.word)?)).re
            };
            Ok(c.d + c.c * quad + w)
        })
        .collect()
}

/// Combination `(sum g^p)^(1/p)` and its partial derivatives.
///
/// A single component enters linearly, which agrees with the p-norm whenever
/// the component is nonnegative.
fn combine(p: Exponent, g: &[f64]) -> (f64, Vec<f64>) {
    match g.len() {
        0 => (0.0, Vec::new()),
        1 => (g[0], vec![1.0]),
        _ => match p {
            Exponent::Infinite => {
                let (arg, val) =
                    g.iter().enumerate().fold((0, f64::NEG_INFINITY), |(ai, av), (i, &v)| if v > av { (i, v) } else { (ai, av) });
                let mut w = vec![0.0; g.len()];
                w[arg] = 1.0;
                (val, w)
            }
            Exponent::Finite(p) => {
                let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if scale == 0.0 {
                    return (0.0, vec![0.0; g.len()]);
                }
                let s = g.iter().map(|v| (v.abs() / scale).powf(p)).sum::<f64>().powf(1.0 / p) * scale;
                let w = g.iter().map(|v| v.signum() * (v.abs() / s).powf(p - 1.0)).collect();
                (s, w)
            }
        },
    }
}

/// `G(x)` for one tuple per time slot.
pub fn eval_potential(spec: &PotentialSpec, x: &[HermitianTuple], u: &UnitaryTuple) -> Result<f64> {
    let g = component_values(spec, x, u)?;
    Ok(spec.d + combine(spec.p, &g).0)
}

/// Gradient of a word trace `Re(lambda tau(w))` with respect to each flat variable.
fn word_gradient(lambda: Complex64, w: &Word, ev: &mut Evaluator, out: &mut [CMat]) -> Result<()> {
    let len = w.len();
    if len == 0 {
        return Ok(());
    }
    let n = ev.dim();
    let letters: Vec<CMat> = w.iter().map(|l| ev.letter(l)).collect::<Result<_>>()?;
    let mut prefix = Vec::with_capacity(len + 1);
    prefix.push(CMat::identity(n, n));
    for q in 0..len {
        let next = &prefix[q] * &letters[q];
        prefix.push(next);
    }
    let mut suffix = vec![CMat::identity(n, n); len + 1];
    for q in (0..len).rev() {
        suffix[q] = &letters[q] * &suffix[q + 1];
    }
    let id = CMat::identity(n, n);
    for (q, l) in w.iter().enumerate() {
        let rotated = || &suffix[q + 1] * &prefix[q];
        let m = match l.kind {
            LetterKind::SelfAdjoint => rotated(),
            LetterKind::Cayley => {
                let um1 = &letters[q] - &id;
                let f = Complex64::new(0.0, l.exp as f64 / 8.0);
                &um1 * rotated() * &um1 * f
            }
            LetterKind::Extern => continue,
        };
        out[l.index] += herm_part(&(m * lambda));
    }
    Ok(())
}

/// Exact gradient of [`eval_potential`], one tuple per slot.
pub fn gradient_potential(
    spec: &PotentialSpec,
    x: &[HermitianTuple],
    u: &UnitaryTuple,
    scale: GradientScale,
) -> Result<Vec<HermitianTuple>> {
    let g = component_values(spec, x, u)?;
    let (_, weights) = combine(spec.p, &g);
    let refs = flat_refs(x);
    let n = refs[0].nrows();
    let mut out: Vec<CMat> = vec![CMat::zeros(n, n); refs.len()];
    let quad_coef: f64 = spec.components.iter().zip(&weights).map(|(c, w)| 2.0 * c.c * w).sum();
    if quad_coef != 0.0 {
        for (o, a) in out.iter_mut().zip(&refs) {
            *o += *a * Complex64::new(quad_coef, 0.0);
        }
    }
    let mut ev = Evaluator::from_refs(refs, u);
    for (c, &w) in spec.components.iter().zip(&weights) {
        if w == 0.0 || c.word.is_empty() || c.lambda == Complex64::new(0.0, 0.0) {
            continue;
        }
        word_gradient(c.lambda * w, &c.word, &mut ev, &mut out)?;
    }
    let factor = match scale {
        GradientScale::Scaled => 1.0,
        GradientScale::PerCoordinate => (n as f64).sqrt(),
    };
    let m = spec.m;
    let mut slots = Vec::with_capacity(spec.slots());
    let mut it = out.into_iter();
    for _ in 0..spec.slots() {
        let mats: Vec<CMat> = (0..m).map(|_| it.next().unwrap() * Complex64::new(factor, 0.0)).collect();
        slots.push(HermitianTuple::from_hermitian_part(mats));
    }
    Ok(slots)
}

fn check_times(times: &[f64]) -> Result<()> {
    let mut prev = 0.0;
    for &t in times {
        if !(t > prev) {
            return invalid("bridge times must be strictly increasing with t_1 > 0");
        }
        prev = t;
    }
    Ok(())
}

/// Gaussian increment form `1/2 sum_L tau((x_L - x_{L-1})^2) / (t_L - t_{L-1})` with `x_0 = 0`.
pub fn eval_bridge_potential(times: &[f64], x: &[HermitianTuple]) -> Result<f64> {
    check_times(times)?;
    if x.len() != times.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), found: x.len() });
    }
    let mut s = 0.0;
    let mut prev_t = 0.0;
    for (j, t) in times.iter().enumerate() {
        let inc = if j == 0 { x[0].norm2() } else { x[j].sub(&x[j - 1]).norm2() };
        s += inc / (t - prev_t);
        prev_t = *t;
    }
    Ok(0.5 * s)
}

/// Scaled gradient of [`eval_bridge_potential`] (discrete Laplacian form).
pub fn gradient_bridge_potential(times: &[f64], x: &[HermitianTuple]) -> Result<Vec<HermitianTuple>> {
    check_times(times)?;
    let k = times.len();
    if x.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: x.len() });
    }
    let zero = HermitianTuple::zeros(x[0].n(), x[0].m());
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let prev = if j == 0 { &zero } else { &x[j - 1] };
        let dt = times[j] - if j == 0 { 0.0 } else { times[j - 1] };
        let mut g = x[j].sub(prev).scale(1.0 / dt);
        if j + 1 < k {
            g.axpy(-1.0 / (times[j + 1] - times[j]), &x[j + 1].sub(&x[j]));
        }
        out.push(g);
    }
    Ok(out)
}

/// Shifts component offsets so every component is at least 1 on the pilot points.
///
/// Returns the applied shift per component. Only multi-component specs are
/// shifted; a single component enters linearly and needs no floor.
pub fn ensure_component_floor(spec: &mut PotentialSpec, pilot: &[Vec<HermitianTuple>], u: &UnitaryTuple) -> Result<Vec<f64>> {
    let mut shifts = vec![0.0; spec.components.len()];
    if spec.components.len() < 2 {
        return Ok(shifts);
    }
    let mut mins = vec![f64::INFINITY; spec.components.len()];
    for x in pilot {
        for (m, g) in mins.iter_mut().zip(component_values(spec, x, u)?) {
            *m = m.min(g);
        }
    }
    for (i, (c, m)) in spec.components.iter_mut().zip(&mins).enumerate() {
        if *m < 1.0 {
            let s = 1.0 - m;
            log::warn!("component {i} dips to {m:.4} on the pilot sample; shifting its offset by {s:.4}");
            c.d += s;
            shifts[i] = s;
        }
    }
    Ok(shifts)
}

/// Growth constant `K` with `G(x) <= K (1 + sum tau(x^2))`, when the words are unitary.
pub fn subquadratic_constant(spec: &PotentialSpec) -> Option<f64> {
    if !spec.uses_unitary_words_only() {
        return None;
    }
    let mut offset = spec.d.abs();
    let mut quad = 0.0;
    for c in &spec.components {
        offset += c.d.abs() + c.lambda.norm();
        quad += c.c;
    }
    Some(offset.max(quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::sample_normalized;
    use crate::nc_poly::parse_word;
    use crate::rng::stream;

    fn rand_slots(n: usize, m: usize, k: usize, seed: u64) -> Vec<HermitianTuple> {
        let mut r = stream(seed, &[]);
        (0..k).map(|_| sample_normalized(n, m, 1.0, &mut r).unwrap()).collect()
    }

    fn word_spec() -> PotentialSpec {
        PotentialSpec {
            times: vec![0.5, 1.0],
            m: 1,
            p: Exponent::Finite(3.0),
            d: 0.2,
            components: vec![
                Component { d: 2.0, c: 0.7, lambda: Complex64::new(0.3, -0.2), word: parse_word("X1 u2 X1 u2^-1").unwrap() },
                Component { d: 3.0, c: 0.4, lambda: Complex64::new(-0.1, 0.25), word: parse_word("u1 X2 u2^-1 v1").unwrap() },
                Component { d: 2.5, c: 0.5, lambda: Complex64::new(0.2, 0.0), word: parse_word("X2 X2 X1").unwrap() },
            ],
        }
    }

    fn one_unitary(n: usize) -> UnitaryTuple {
        let h = sample_normalized(n, 1, 1.0, &mut stream(77, &[])).unwrap();
        UnitaryTuple::new(n, vec![crate::matrix_core::cayley(h.mat(0))]).unwrap()
    }

    #[test]
    fn quadratic_examples() {
        let u = UnitaryTuple::empty(4);
        let spec = PotentialSpec::quadratic(1.0, 1);
        assert_eq!(eval_potential(&spec, &[HermitianTuple::zeros(4, 1)], &u).unwrap(), 0.0);
        let x = HermitianTuple::identity(4, 1).scale(0.5f64.sqrt());
        assert!((eval_potential(&spec, &[x.clone()], &u).unwrap() - 0.5).abs() < 1e-15);
        let g = gradient_potential(&spec, &[x.clone()], &u, GradientScale::Scaled).unwrap();
        assert!(g[0].sub(&x.scale(2.0)).norm2() < 1e-28);
        let gp = gradient_potential(&spec, &[x.clone()], &u, GradientScale::PerCoordinate).unwrap();
        assert!(gp[0].sub(&x.scale(4.0)).norm2() < 1e-28);
    }

    #[test]
    fn p_norm_of_equal_components() {
        let mut spec = PotentialSpec::quadratic(1.0, 1);
        spec.components.push(spec.components[0].clone());
        let x = HermitianTuple::identity(3, 1).scale(0.5f64.sqrt());
        let v = eval_potential(&spec, &[x], &UnitaryTuple::empty(3)).unwrap();
        assert!((v - 2f64.sqrt() * 0.5).abs() < 1e-14);
    }

    #[test]
    fn word_free_gradient_ignores_unitaries() {
        let spec = PotentialSpec::quadratic(0.3, 2);
        let x = rand_slots(4, 2, 1, 3);
        let a = gradient_potential(&spec, &x, &UnitaryTuple::empty(4), GradientScale::Scaled).unwrap();
        let b = gradient_potential(&spec, &x, &one_unitary(4), GradientScale::Scaled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 4;
        let u = one_unitary(n);
        for p in [Exponent::Finite(2.0), Exponent::Finite(3.0), Exponent::Infinite] {
            let mut spec = word_spec();
            spec.p = p;
            for seed in 0..5 {
                let x = rand_slots(n, 1, 2, seed);
                let h = rand_slots(n, 1, 2, 100 + seed);
                let g = gradient_potential(&spec, &x, &u, GradientScale::Scaled).unwrap();
                let pair: f64 = g.iter().zip(&h).map(|(a, b)| a.inner(b)).sum();
                let eps = 1e-5;
                let shift = |s: f64| -> Vec<HermitianTuple> { x.iter().zip(&h).map(|(a, b)| a.add(&b.scale(s))).collect() };
                let fd = (eval_potential(&spec, &shift(eps), &u).unwrap() - eval_potential(&spec, &shift(-eps), &u).unwrap()) / (2.0 * eps);
                assert!((pair - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{p:?} {pair} {fd}");
            }
        }
    }

    #[test]
    fn bridge_examples() {
        let z = vec![HermitianTuple::zeros(3, 1); 2];
        assert_eq!(eval_bridge_potential(&[0.5, 1.0], &z).unwrap(), 0.0);
        let x = HermitianTuple::identity(3, 1);
        assert!((eval_bridge_potential(&[1.0], &[x.clone()]).unwrap() - 0.5).abs() < 1e-15);
        let v = eval_bridge_potential(&[0.5, 1.0], &[x.clone(), x.clone()]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(eval_bridge_potential(&[1.0, 0.5], &[x.clone(), x]).is_err());
    }

    #[test]
    fn bridge_gradient_matches_finite_differences() {
        let times = [0.2, 0.5, 1.0];
        let x = rand_slots(3, 2, 3, 8);
        let h = rand_slots(3, 2, 3, 9);
        let g = gradient_bridge_potential(&times, &x).unwrap();
        let pair: f64 = g.iter().zip(&h).map(|(a, b)| a.inner(b)).sum();
        let eps = 1e-5;
        let shift = |s: f64| -> Vec<HermitianTuple> { x.iter().zip(&h).map(|(a, b)| a.add(&b.scale(s))).collect() };
        let fd = (eval_bridge_potential(&times, &shift(eps)).unwrap() - eval_bridge_potential(&times, &shift(-eps)).unwrap()) / (2.0 * eps);
        assert!((pair - fd).abs() < 1e-7 * (1.0 + fd.abs()));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut spec = word_spec();
        spec.components[0].d = 0.1 + 0.2;
        spec.components[1].lambda = Complex64::new(1.0 / 3.0, -std::f64::consts::PI);
        let s = spec.to_json();
        let back = PotentialSpec::from_json(&s).unwrap();
        assert_eq!(back, spec);
        spec.p = Exponent::Infinite;
        assert_eq!(PotentialSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn json_validation_names_fields() {
        let bad = r#"{"times":[1.0],"p":1.5,"D":0,"components":[]}"#;
        match PotentialSpec::from_json(bad) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "p"),
            other => panic!("{other:?}"),
        }
        let bad = r#"{"times":[0.5,0.4],"p":2,"D":0,"components":[]}"#;
        assert!(matches!(PotentialSpec::from_json(bad), Err(Error::Field { .. })));
        let bad = r#"{"times":[1.0],"p":2,"D":0,"components":[{"C":1,"word":"X3"}]}"#;
        match PotentialSpec::from_json(bad) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "components[0].word"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn floor_shift_lifts_components() {
        let mut spec = word_spec();
        spec.components[0].d = -5.0;
        let pilot: Vec<Vec<HermitianTuple>> = (0..4).map(|s| rand_slots(3, 1, 2, s)).collect();
        let u = one_unitary(3);
        let shifts = ensure_component_floor(&mut spec, &pilot, &u).unwrap();
        assert!(shifts[0] > 0.0);
        for x in &pilot {
            assert!(component_values(&spec, x, &u).unwrap().iter().all(|g| *g >= 1.0 - 1e-12));
        }
    }
}
