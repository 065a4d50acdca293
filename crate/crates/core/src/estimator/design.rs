//! Per-unit quantities entering the estimating equations, computed once per
//! fit and shared by the nuisance models and the score.

use std::collections::HashMap;

use crate::blip::{BlipModel, MappedHistory};
use crate::error::{Error, Result};
use crate::exposure::MappedPanel;

use super::SFunctionSet;

/// Discrete strata of the conditioning history `(D_0..D_{m-1}, L_0..L_m)`.
#[derive(Debug, Clone)]
pub struct Strata {
    /// Stratum of each sampling unit, numbered by first appearance.
    pub ids: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Sampling units with zero mapped exposure at `m`, per stratum.
    pub zero_exposed: Vec<usize>,
    /// History values defining each stratum.
    pub keys: Vec<Vec<f64>>,
}

impl Strata {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn describe(&self, s: usize) -> String {
        let vals: Vec<String> = self.keys[s].iter().map(|v| format!("{v}")).collect();
        format!("({})", vals.join(","))
    }
}

/// Everything the nuisance fits and the score need, laid out as
/// `[pair][unit][member]` with `pair` enumerating `(m, k)`, `m < k <= tau`.
pub struct Design {
    pub(crate) n: usize,
    pub(crate) members: usize,
    pub(crate) tau: usize,
    pub(crate) p: usize,
    pub(crate) q: usize,
    pub(crate) pairs: Vec<(usize, usize)>,
    /// Estimating-function values `s_m(k, ...)`, `q` per entry.
    pub(crate) s: Vec<f64>,
    /// `Y_k - Y_{k-1}`.
    pub(crate) c: Vec<f64>,
    /// Coefficient of psi in `H_{m,k} - H_{m,k-1}` (negated), `p` per entry.
    pub(crate) g: Vec<f64>,
    /// Conditioning history per blip time, `n` rows of equal length.
    pub(crate) history: Vec<Vec<Vec<f64>>>,
    pub(crate) discrete: Vec<bool>,
    pub(crate) strata: Vec<Strata>,
}

fn pair_index(m: usize, k: usize) -> usize {
    k * (k - 1) / 2 + m
}

impl Design {
    pub fn new(mapped: &MappedPanel, model: &BlipModel, sset: &SFunctionSet) -> Result<Self> {
        let panel = mapped.panel();
        let tau = mapped.tau();
        let members = mapped.members_per_unit();
        let n = mapped.n();
        let p = model.n_params();
        model.check_dims(mapped.h_dim(), panel.n_covariates(), members, tau)?;
        if let Some(extra) = sset.extra() {
            extra.check_dims(mapped.h_dim(), panel.n_covariates(), members, tau)?;
        }
        if n < 2 {
            return Err(Error::InvalidSize(format!("need at least 2 sampling units, got {n}")));
        }
        let q = sset.dim(model);
        let pairs: Vec<(usize, usize)> = (1..=tau).flat_map(|k| (0..k).map(move |m| (m, k))).collect();
        debug_assert!(pairs.iter().enumerate().all(|(i, &(m, k))| pair_index(m, k) == i));
        let np = pairs.len();

        let mut s = vec![0.0; np * n * members * q];
        let mut c = vec![0.0; np * n * members];
        let mut g = vec![0.0; np * n * members * p];
        let mut f = vec![0.0; np * p];
        for i in 0..n {
            for (j, &u) in mapped.members(i).iter().enumerate() {
                let hist = MappedHistory { mapped, unit: u };
                f.iter_mut().for_each(|x| *x = 0.0);
                for (pi, &(m, k)) in pairs.iter().enumerate() {
                    model.accumulate_features(m, k, j, &hist, &mut f[pi * p..(pi + 1) * p]);
                }
                for (pi, &(m, k)) in pairs.iter().enumerate() {
                    let e = (pi * n + i) * members + j;
                    c[e] = panel.outcome(u, k) - panel.outcome(u, k - 1);
                    let gs = &mut g[e * p..(e + 1) * p];
                    for t in m..k {
                        let ft = &f[pair_index(t, k) * p..][..p];
                        gs.iter_mut().zip(ft).for_each(|(x, y)| *x += y);
                    }
                    for t in m..k.saturating_sub(1) {
                        let ft = &f[pair_index(t, k - 1) * p..][..p];
                        gs.iter_mut().zip(ft).for_each(|(x, y)| *x -= y);
                    }
                    let ss = &mut s[e * q..(e + 1) * q];
                    ss[..p].copy_from_slice(&f[pi * p..(pi + 1) * p]);
                    if let Some(extra) = sset.extra() {
                        extra.accumulate_features(m, k, j, &hist, &mut ss[p..]);
                    }
                }
            }
        }

        let mut history = Vec::with_capacity(tau);
        let mut discrete = Vec::with_capacity(tau);
        let mut strata = Vec::with_capacity(tau);
        for m in 0..tau {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut row = Vec::new();
                    for &u in mapped.members(i) {
                        for t in 0..m {
                            row.push(mapped.a(u, t));
                            row.extend_from_slice(mapped.h(u, t));
                        }
                        for t in 0..=m {
                            row.extend_from_slice(panel.covariates(u, t));
                        }
                    }
                    row
                })
                .collect();
            discrete.push(rows.iter().flatten().all(|v| v.fract() == 0.0));
            strata.push(stratify(&rows, |i| mapped.is_zero_exposure(i, m)));
            history.push(rows);
        }
        Ok(Design {
            n,
            members,
            tau,
            p,
            q,
            pairs,
            s,
            c,
            g,
            history,
            discrete,
            strata,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn strata(&self, m: usize) -> &Strata {
        &self.strata[m]
    }

    pub(crate) fn entry(&self, pair: usize, i: usize, j: usize) -> usize {
        (pair * self.n + i) * self.members + j
    }

    pub fn s_value(&self, pair: usize, i: usize, j: usize) -> &[f64] {
        let e = self.entry(pair, i, j);
        &self.s[e * self.q..(e + 1) * self.q]
    }

    pub fn trend_constant(&self, pair: usize, i: usize, j: usize) -> f64 {
        self.c[self.entry(pair, i, j)]
    }

    pub fn trend_coefficients(&self, pair: usize, i: usize, j: usize) -> &[f64] {
        let e = self.entry(pair, i, j);
        &self.g[e * self.p..(e + 1) * self.p]
    }
}

fn key_bits(row: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 belong to the same stratum
    row.iter().map(|&v| (v + 0.0).to_bits()).collect()
}

fn stratify(rows: &[Vec<f64>], zero: impl Fn(usize) -> bool) -> Strata {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut ids = Vec::with_capacity(rows.len());
    let mut sizes = Vec::new();
    let mut zero_exposed = Vec::new();
    let mut keys = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let next = sizes.len();
        let s = *index.entry(key_bits(row)).or_insert(next);
        if s == next {
            sizes.push(0);
            zero_exposed.push(0);
            keys.push(row.clone());
        }
        sizes[s] += 1;
        if zero(i) {
            zero_exposed[s] += 1;
        }
        ids.push(s);
    }
    Strata {
        ids,
        sizes,
        zero_exposed,
        keys,
    }
}
