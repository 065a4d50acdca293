//! Causal quantities derived from a fitted blip model: mean untreated
//! trajectories, blips at fixed histories, and subgroup-averaged blips.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blip::{blip_down, BlipModel, FixedHistory, MappedHistory};
use crate::error::{Error, Result};
use crate::estimator::EstimationResult;
use crate::exposure::MappedPanel;
use crate::variance::{percentile_interval, sample_covariance, wald_intervals, EstimandFn, VarianceEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimandSpec {
    /// One blip coefficient, by label.
    Parameter {
        name: String,
        #[serde(default)]
        label: Option<String>,
    },
    /// Mean outcome at `k` had nobody ever been exposed.
    UntreatedTrajectory { k: usize },
    /// Blip at one fixed history of own exposures `a[0..=m]` and spillover
    /// summaries `h[0..=m]` (each a vector of length `h_dim`).
    BlipAt {
        m: usize,
        k: usize,
        #[serde(default)]
        member: usize,
        a: Vec<f64>,
        h: Vec<Vec<f64>>,
        #[serde(default)]
        label: Option<String>,
    },
    /// Mean blip over sampled (unit, member) pairs whose history matches
    /// `selector`, e.g. `a[m] = 1 & h[m][0] = 0`.
    SubgroupBlipMean {
        m: usize,
        k: usize,
        selector: String,
        #[serde(default)]
        label: Option<String>,
    },
    /// Mean blip among members exposed at `m` while none of their partners
    /// (or, on a network, none of their spillover sources) are.
    DirectOnly { m: usize, k: usize },
    /// Mean blip among members unexposed at `m` with some exposed partner
    /// (or nonzero spillover).
    IndirectOnly { m: usize, k: usize },
}

impl EstimandSpec {
    pub fn label(&self) -> String {
        match self {
            EstimandSpec::Parameter { label: Some(l), .. }
            | EstimandSpec::BlipAt { label: Some(l), .. }
            | EstimandSpec::SubgroupBlipMean { label: Some(l), .. } => l.clone(),
            EstimandSpec::Parameter { name, .. } => name.clone(),
            EstimandSpec::UntreatedTrajectory { k } => format!("E[Y_{k}(0)]"),
            EstimandSpec::BlipAt { m, k, a, h, .. } => {
                let hs: Vec<String> = h.iter().map(|v| fmt_values(v)).collect();
                format!("γ_{{{m},{k}}}(a={}, h=({}))", fmt_values(a), hs.join(","))
            }
            EstimandSpec::SubgroupBlipMean { m, k, selector, .. } => format!("mean γ_{{{m},{k}}} | {selector}"),
            EstimandSpec::DirectOnly { m, k } => format!("direct-only γ_{{{m},{k}}}"),
            EstimandSpec::IndirectOnly { m, k } => format!("indirect-only γ_{{{m},{k}}}"),
        }
    }
}

fn fmt_values(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("({})", parts.join(","))
}

/// `P_n H_{0,k}(psi_hat)`, averaged over all sampled members.
pub fn untreated_trajectory(result: &EstimationResult, mapped: &MappedPanel, model: &BlipModel, k: usize) -> Result<f64> {
    if k > mapped.tau() {
        return Err(Error::Index(format!("time {k} is past the last outcome {}", mapped.tau())));
    }
    let h = blip_down(model, result.psi_slice(), mapped)?;
    let mut sum = 0.0;
    for i in 0..h.n_units() {
        for j in 0..h.members() {
            sum += h.get(i, j, 0, k);
        }
    }
    Ok(sum / (h.n_units() * h.members()) as f64)
}

pub fn blip_at(
    result: &EstimationResult,
    model: &BlipModel,
    (m, k, member): (usize, usize, usize),
    a: &[f64],
    h: &[Vec<f64>],
) -> Result<f64> {
    if a.len() != m + 1 || h.len() != m + 1 {
        return Err(Error::DimensionMismatch(format!(
            "a blip at time {m} needs {} exposure values, got a: {}, h: {}",
            m + 1,
            a.len(),
            h.len()
        )));
    }
    let hist = FixedHistory {
        a: a.to_vec(),
        h: h.to_vec(),
        l: vec![],
    };
    model.blip_value(result.psi_slice(), m, k, member, &hist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Field {
    A,
    H(usize),
    L(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
struct Comparison {
    field: Field,
    /// Periods before `m`.
    lag: usize,
    op: Op,
    value: f64,
}

/// A conjunction of comparisons on one member's history up to `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    atoms: Vec<Comparison>,
    text: String,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn selector_error(text: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("bad selector `{text}`: {msg}"))
}

/// Parses `x[t] op v` atoms joined by `&`, `&&`, `and` or `∧`, where `x` is
/// `a`, `h[t][r]` or `l[t][c]` and `t` is `m` or `m-d`. `true` selects all.
pub fn parse_selector(text: &str) -> Result<Selector> {
    let normalized = text.replace("&&", "&").replace('∧', "&").replace(" and ", "&");
    let mut atoms = vec![];
    for part in normalized.split('&').map(str::trim) {
        if part.is_empty() {
            return Err(selector_error(text, "empty condition"));
        }
        if part == "true" {
            continue;
        }
        atoms.push(parse_comparison(part).map_err(|m| selector_error(text, m))?);
    }
    Ok(Selector {
        atoms,
        text: text.trim().to_string(),
    })
}

fn parse_comparison(part: &str) -> std::result::Result<Comparison, String> {
    let ops = [("==", Op::Eq), ("!=", Op::Ne), ("<=", Op::Le), (">=", Op::Ge), ("=", Op::Eq), ("<", Op::Lt), (">", Op::Gt)];
    let (pos, len, op) = ops
        .iter()
        .filter_map(|&(sym, op)| part.find(sym).map(|p| (p, sym.len(), op)))
        .min_by_key(|&(p, len, _)| (p, std::cmp::Reverse(len)))
        .ok_or_else(|| format!("no comparison in `{part}`"))?;
    let lhs: String = part[..pos].chars().filter(|c| !c.is_whitespace()).collect();
    let rhs = part[pos + len..].trim();
    let value: f64 = rhs.parse().map_err(|_| format!("`{rhs}` is not a number"))?;
    let name_len = lhs.chars().next().map_or(0, char::len_utf8);
    if name_len == 0 {
        return Err(format!("missing variable in `{part}`"));
    }
    let (name, rest) = lhs.split_at(name_len);
    let idx: Vec<&str> = rest
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .map(|r| r.split("][").collect())
        .ok_or_else(|| format!("expected `{name}[t]...` in `{part}`"))?;
    let lag = match idx[0] {
        "m" => 0,
        t => t
            .strip_prefix("m-")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| format!("time `{t}` must be `m` or `m-d`"))?,
    };
    let component = |want: usize| -> std::result::Result<usize, String> {
        if idx.len() != want {
            return Err(format!("`{lhs}` has the wrong number of indices"));
        }
        idx.get(1).map_or(Ok(0), |c| c.parse().map_err(|_| format!("bad index `{c}`")))
    };
    let field = match name {
        "a" => {
            component(1)?;
            Field::A
        }
        "h" => Field::H(component(2)?),
        "l" => Field::L(component(2)?),
        other => return Err(format!("unknown variable `{other}`")),
    };
    Ok(Comparison { field, lag, op, value })
}

impl Selector {
    fn matches(&self, mapped: &MappedPanel, unit: usize, m: usize) -> Result<bool> {
        for c in &self.atoms {
            let Some(t) = m.checked_sub(c.lag) else {
                return Err(selector_error(&self.text, format!("time m-{} is before the panel starts", c.lag)));
            };
            let x = match c.field {
                Field::A => mapped.a(unit, t),
                Field::H(r) => *mapped
                    .h(unit, t)
                    .get(r)
                    .ok_or_else(|| selector_error(&self.text, format!("h has {} components", mapped.h_dim())))?,
                Field::L(col) => *mapped
                    .panel()
                    .covariates(unit, t)
                    .get(col)
                    .ok_or_else(|| selector_error(&self.text, format!("no covariate {col}")))?,
            };
            let ok = match c.op {
                Op::Eq => x == c.value,
                Op::Ne => x != c.value,
                Op::Lt => x < c.value,
                Op::Le => x <= c.value,
                Op::Gt => x > c.value,
                Op::Ge => x >= c.value,
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Mean of `gamma_{m,k}` over sampled (unit, member) pairs accepted by
/// `keep`. Every pair counts once, so clusters weigh by size.
fn blip_mean(
    result: &EstimationResult,
    mapped: &MappedPanel,
    model: &BlipModel,
    (m, k): (usize, usize),
    what: &str,
    mut keep: impl FnMut(usize, usize, usize) -> Result<bool>,
) -> Result<f64> {
    if m >= k || k > mapped.tau() {
        return Err(Error::Index(format!("need m < k <= {}, got m={m}, k={k}", mapped.tau())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..mapped.n() {
        let members = mapped.members(i);
        for (j, &u) in members.iter().enumerate() {
            if keep(i, j, u)? {
                let hist = MappedHistory { mapped, unit: u };
                sum += model.blip_value(result.psi_slice(), m, k, j, &hist)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySubgroup(format!("no unit matches {what} at m={m}")));
    }
    Ok(sum / count as f64)
}

pub fn subgroup_blip_mean(
    result: &EstimationResult,
    mapped: &MappedPanel,
    model: &BlipModel,
    (m, k): (usize, usize),
    selector: &Selector,
) -> Result<f64> {
    blip_mean(result, mapped, model, (m, k), &selector.text, |_, _, u| selector.matches(mapped, u, m))
}

/// True when `u` is the only exposure source reaching itself at `m`:
/// exposed, with every partner unexposed (clusters) or zero spillover.
fn direct_only(mapped: &MappedPanel, i: usize, u: usize, m: usize) -> bool {
    mapped.a(u, m) != 0.0 && no_other_exposure(mapped, i, u, m)
}

fn no_other_exposure(mapped: &MappedPanel, i: usize, u: usize, m: usize) -> bool {
    if mapped.is_cluster_mode() {
        mapped.members(i).iter().all(|&v| v == u || mapped.a(v, m) == 0.0)
    } else {
        mapped.h(u, m).iter().all(|&x| x == 0.0)
    }
}

fn parameter_index(model: &BlipModel, name: &str) -> Result<usize> {
    model
        .label_index(name)
        .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
}

/// Weights `c` with estimand `= c' psi` for estimands linear in psi, which
/// then take their uncertainty directly from the covariance of psi-hat.
pub fn linear_contrast(spec: &EstimandSpec, model: &BlipModel) -> Result<Option<Vec<f64>>> {
    match spec {
        EstimandSpec::Parameter { name, .. } => {
            let mut c = vec![0.0; model.n_params()];
            c[parameter_index(model, name)?] = 1.0;
            Ok(Some(c))
        }
        EstimandSpec::BlipAt { m, k, member, a, h, .. } => {
            let hist = FixedHistory {
                a: a.clone(),
                h: h.clone(),
                l: vec![],
            };
            Ok(Some(model.blip_features(*m, *k, *member, &hist)?))
        }
        _ => Ok(None),
    }
}

pub fn evaluate(spec: &EstimandSpec, result: &EstimationResult, mapped: &MappedPanel, model: &BlipModel) -> Result<f64> {
    match spec {
        EstimandSpec::Parameter { name, .. } => Ok(result.psi[parameter_index(model, name)?]),
        EstimandSpec::UntreatedTrajectory { k } => untreated_trajectory(result, mapped, model, *k),
        EstimandSpec::BlipAt { m, k, member, a, h, .. } => blip_at(result, model, (*m, *k, *member), a, h),
        EstimandSpec::SubgroupBlipMean { m, k, selector, .. } => {
            subgroup_blip_mean(result, mapped, model, (*m, *k), &parse_selector(selector)?)
        }
        EstimandSpec::DirectOnly { m, k } => blip_mean(result, mapped, model, (*m, *k), "direct-only exposure", |i, _, u| {
            Ok(direct_only(mapped, i, u, *m))
        }),
        EstimandSpec::IndirectOnly { m, k } => {
            blip_mean(result, mapped, model, (*m, *k), "indirect-only exposure", |i, _, u| {
                Ok(mapped.a(u, *m) == 0.0 && !no_other_exposure(mapped, i, u, *m))
            })
        }
    }
}

/// Checks selectors up front so configuration errors surface before fitting.
pub fn validate_specs(specs: &[EstimandSpec]) -> Result<()> {
    for s in specs {
        if let EstimandSpec::SubgroupBlipMean { selector, .. } = s {
            parse_selector(selector)?;
        }
    }
    Ok(())
}

pub fn evaluate_all(
    specs: &[EstimandSpec],
    result: &EstimationResult,
    mapped: &MappedPanel,
    model: &BlipModel,
) -> Result<Vec<f64>> {
    specs.iter().map(|s| evaluate(s, result, mapped, model)).collect()
}

/// A closure evaluating `specs` inside each bootstrap replicate.
pub fn replicate_fn(specs: &[EstimandSpec]) -> Box<EstimandFn> {
    let specs = specs.to_vec();
    Box::new(move |fit, mapped, model| evaluate_all(&specs, fit, mapped, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandValue {
    pub label: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

/// Standard errors and intervals for `specs` at `estimates`.
///
/// Under a bootstrap these come from the replicate values: the columns of
/// the replicate estimands when they were evaluated (see [`replicate_fn`]),
/// or `c' psi*` for estimands linear in psi. Otherwise linear estimands get
/// `sqrt(c' V c)` with Wald intervals and nonlinear ones get none.
pub fn estimand_se(
    specs: &[EstimandSpec],
    estimates: &[f64],
    model: &BlipModel,
    variance: &VarianceEstimate,
    level: f64,
) -> Result<Vec<EstimandValue>> {
    let mut out = Vec::with_capacity(specs.len());
    for (c, (spec, &estimate)) in specs.iter().zip(estimates).enumerate() {
        let contrast = linear_contrast(spec, model)?;
        let (se, ci) = match (&variance.draws, contrast) {
            (Some(draws), contrast) => {
                let values: Vec<f64> = if draws.estimands.first().is_some_and(|r| r.len() == specs.len()) {
                    draws.estimands.iter().map(|r| r[c]).collect()
                } else if let Some(w) = contrast {
                    draws.psi.iter().map(|p| w.iter().zip(p).map(|(a, b)| a * b).sum()).collect()
                } else {
                    return Err(Error::Config(format!(
                        "`{}` was not evaluated in the bootstrap replicates",
                        spec.label()
                    )));
                };
                let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
                let sd = sample_covariance(&rows, 1)[(0, 0)].max(0.0).sqrt();
                (Some(sd), Some(percentile_interval(values.into_iter(), level)))
            }
            (None, Some(w)) => {
                let w = nalgebra::DVector::from_vec(w);
                let se = (w.transpose() * &variance.covariance * &w)[(0, 0)].max(0.0).sqrt();
                (Some(se), Some(wald_intervals(&[estimate], &[se], level)[0]))
            }
            (None, None) => (None, None),
        };
        out.push(EstimandValue {
            label: spec.label(),
            estimate,
            se,
            ci,
        });
    }
    Ok(out)
}
