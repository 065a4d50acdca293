//! Linear-in-parameter blip models and blipped-down outcomes.
//!
//! A blip `gamma_{m,k}(history; psi)` is the effect on the outcome at time
//! `k` of one last exposure at time `m`. Models here are always
//! `psi' f_{m,k}(history)`, where each feature is a sum of products of
//! history atoms. Every term carries an exposure factor from time `m`, so
//! the blip vanishes when the time-`m` mapped exposure is zero.

mod dsl;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::MappedPanel;

/// Time index of an atom relative to the blip time `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeRef {
    Current,
    /// `m - d`, `d >= 1`. Times before 0 evaluate the atom as 0.
    Lag(usize),
    Abs(usize),
}

impl TimeRef {
    fn resolve(self, m: usize) -> Option<usize> {
        match self {
            TimeRef::Current => Some(m),
            TimeRef::Lag(d) => m.checked_sub(d),
            TimeRef::Abs(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Atom {
    /// Own (direct) exposure.
    A(TimeRef),
    /// Component `r` of the spillover summary.
    H(TimeRef, usize),
    /// Covariate `c`.
    L(TimeRef, usize),
    /// Sum of own exposure strictly before `m`.
    LagsumA,
    /// `k - m - 1`.
    Timegap,
}

impl Atom {
    fn time(&self) -> Option<TimeRef> {
        match *self {
            Atom::A(t) | Atom::H(t, _) | Atom::L(t, _) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub label: usize,
    pub factors: Vec<Atom>,
}

/// Which `(m, k, member)` a block of terms applies to; `None` matches all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub j: Option<usize>,
}

impl Scope {
    fn matches(&self, m: usize, k: usize, j: usize) -> bool {
        self.m.is_none_or(|x| x == m) && self.k.is_none_or(|x| x == k) && self.j.is_none_or(|x| x == j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub scope: Scope,
    pub terms: Vec<Term>,
}

/// Read access to one unit's (or one cluster member's) history.
pub trait History {
    fn a(&self, t: usize) -> f64;
    fn h(&self, t: usize, r: usize) -> f64;
    fn l(&self, t: usize, c: usize) -> f64;
}

/// Explicit history; unspecified entries are 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedHistory {
    pub a: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
}

impl FixedHistory {
    /// Scalar-`h` history, e.g. `(a_0, a_1)` and `(h_0, h_1)`.
    pub fn network(a: &[f64], h: &[f64]) -> Self {
        FixedHistory {
            a: a.to_vec(),
            h: h.iter().map(|&x| vec![x]).collect(),
            l: Vec::new(),
        }
    }
}

impl History for FixedHistory {
    fn a(&self, t: usize) -> f64 {
        self.a.get(t).copied().unwrap_or(0.0)
    }
    fn h(&self, t: usize, r: usize) -> f64 {
        self.h.get(t).and_then(|v| v.get(r)).copied().unwrap_or(0.0)
    }
    fn l(&self, t: usize, c: usize) -> f64 {
        self.l.get(t).and_then(|v| v.get(c)).copied().unwrap_or(0.0)
    }
}

/// History of panel unit `unit` under a mapped panel.
#[derive(Clone, Copy)]
pub struct MappedHistory<'a> {
    pub mapped: &'a MappedPanel,
    pub unit: usize,
}

impl History for MappedHistory<'_> {
    fn a(&self, t: usize) -> f64 {
        self.mapped.a(self.unit, t)
    }
    fn h(&self, t: usize, r: usize) -> f64 {
        self.mapped.h(self.unit, t)[r]
    }
    fn l(&self, t: usize, c: usize) -> f64 {
        self.mapped.panel().covariates(self.unit, t)[c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlipModel {
    labels: Vec<String>,
    blocks: Vec<Block>,
}

impl BlipModel {
    /// Parses the term language, enforcing the zero-exposure constraint.
    pub fn parse(text: &str) -> Result<Self> {
        dsl::parse(text, true)
    }

    /// Parses additional estimating functions. These are free functions of
    /// the history, so the zero-exposure constraint does not apply.
    pub fn parse_instruments(text: &str) -> Result<Self> {
        dsl::parse(text, false)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_params(&self) -> usize {
        self.labels.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// True when some block is scoped to a particular cluster member.
    pub fn is_member_specific(&self) -> bool {
        self.blocks.iter().any(|b| b.scope.j.is_some())
    }

    /// True when no term uses spillover atoms.
    pub fn uses_direct_only(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| &b.terms)
            .flat_map(|t| &t.factors)
            .all(|f| !matches!(f, Atom::H(..)))
    }

    /// Checks atoms against the data dimensions.
    pub fn check_dims(&self, h_dim: usize, n_cov: usize, members: usize, tau: usize) -> Result<()> {
        for block in &self.blocks {
            if let Some(j) = block.scope.j {
                if j >= members {
                    return Err(Error::DimensionMismatch(format!(
                        "block scoped to member {j}, sampling units have {members}"
                    )));
                }
            }
            if block.scope.m.is_some_and(|m| m >= tau) || block.scope.k.is_some_and(|k| k > tau) {
                return Err(Error::DimensionMismatch(format!(
                    "block {} lies outside times 0..={tau}",
                    block.scope
                )));
            }
            for term in &block.terms {
                for f in &term.factors {
                    match *f {
                        Atom::H(_, r) if r >= h_dim => {
                            return Err(Error::DimensionMismatch(format!(
                                "h component {r} but mapping has dimension {h_dim}"
                            )))
                        }
                        Atom::L(_, c) if c >= n_cov => {
                            return Err(Error::DimensionMismatch(format!(
                                "covariate {c} but panel has {n_cov}"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Terms active for blip time `m`, outcome time `k` and member `j`.
    pub fn active_terms(&self, m: usize, k: usize, j: usize) -> impl Iterator<Item = &Term> {
        self.blocks
            .iter()
            .filter(move |b| b.scope.matches(m, k, j))
            .flat_map(|b| &b.terms)
    }

    /// Adds `f_{m,k}` for member `j` into `out` (length `n_params`).
    pub fn accumulate_features(&self, m: usize, k: usize, j: usize, hist: &dyn History, out: &mut [f64]) {
        for term in self.active_terms(m, k, j) {
            out[term.label] += eval_term(term, m, k, hist);
        }
    }

    /// Feature vector `f_{m,k}` such that the blip equals `psi' f`.
    pub fn blip_features(&self, m: usize, k: usize, j: usize, hist: &dyn History) -> Result<Vec<f64>> {
        if k <= m {
            return Err(Error::Index(format!("blip needs k > m, got m={m}, k={k}")));
        }
        let mut out = vec![0.0; self.n_params()];
        self.accumulate_features(m, k, j, hist, &mut out);
        Ok(out)
    }

    /// Blip value for member `j`.
    pub fn blip_value(&self, psi: &[f64], m: usize, k: usize, j: usize, hist: &dyn History) -> Result<f64> {
        if psi.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "psi has {} entries, model has {} parameters",
                psi.len(),
                self.n_params()
            )));
        }
        let f = self.blip_features(m, k, j, hist)?;
        Ok(dot(&f, psi))
    }

    /// Vector blip over cluster members, one history per member.
    pub fn blip_vector(&self, psi: &[f64], m: usize, k: usize, members: &[&dyn History]) -> Result<Vec<f64>> {
        members
            .iter()
            .enumerate()
            .map(|(j, h)| self.blip_value(psi, m, k, j, *h))
            .collect()
    }
}

fn eval_term(term: &Term, m: usize, k: usize, hist: &dyn History) -> f64 {
    let mut v = 1.0;
    for f in &term.factors {
        let x = match *f {
            Atom::A(t) => t.resolve(m).map_or(0.0, |t| hist.a(t)),
            Atom::H(t, r) => t.resolve(m).map_or(0.0, |t| hist.h(t, r)),
            Atom::L(t, c) => t.resolve(m).map_or(0.0, |t| hist.l(t, c)),
            Atom::LagsumA => (0..m).map(|t| hist.a(t)).sum(),
            Atom::Timegap => (k - m - 1) as f64,
        };
        if x == 0.0 {
            return 0.0;
        }
        v *= x;
    }
    v
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Blipped-down outcomes `H[m][k]` for every sampling unit and member,
/// `0 <= m <= k <= tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlippedOutcome {
    n_times: usize,
    members: usize,
    values: Vec<f64>,
}

impl BlippedOutcome {
    pub fn n_units(&self) -> usize {
        self.values.len() / (self.members * self.n_times * self.n_times)
    }

    pub fn members(&self) -> usize {
        self.members
    }

    /// `H[m][k]` for sampling unit `i`, member `j`; requires `m <= k`.
    pub fn get(&self, i: usize, j: usize, m: usize, k: usize) -> f64 {
        debug_assert!(m <= k);
        self.values[((i * self.members + j) * self.n_times + m) * self.n_times + k]
    }
}

/// `H[m][k] = Y_k - sum_{j=m}^{k-1} gamma_{j,k}` and `H[t][t] = Y_t`.
pub fn blip_down(model: &BlipModel, psi: &[f64], mapped: &MappedPanel) -> Result<BlippedOutcome> {
    let panel = mapped.panel();
    let tau = mapped.tau();
    let members = mapped.members_per_unit();
    model.check_dims(mapped.h_dim(), panel.n_covariates(), members, tau)?;
    if psi.len() != model.n_params() {
        return Err(Error::DimensionMismatch(format!(
            "psi has {} entries, model has {} parameters",
            psi.len(),
            model.n_params()
        )));
    }
    let nt = tau + 1;
    let mut values = vec![0.0; mapped.n() * members * nt * nt];
    let mut f = vec![0.0; model.n_params()];
    for i in 0..mapped.n() {
        for (j, &u) in mapped.members(i).iter().enumerate() {
            let hist = MappedHistory { mapped, unit: u };
            let base = (i * members + j) * nt * nt;
            for k in 0..nt {
                // gamma_{s,k} for s < k, accumulated from s = k-1 down to m
                let mut acc = 0.0;
                values[base + k * nt + k] = panel.outcome(u, k);
                for m in (0..k).rev() {
                    f.iter_mut().for_each(|x| *x = 0.0);
                    model.accumulate_features(m, k, j, &hist, &mut f);
                    acc += dot(&f, psi);
                    values[base + m * nt + k] = panel.outcome(u, k) - acc;
                }
            }
        }
    }
    Ok(BlippedOutcome {
        n_times: nt,
        members,
        values,
    })
}
