//! Doubly robust g-estimation of linear blip models.
//!
//! For each sampling unit the estimating function is
//! `g_i(psi) = sum_{m<k} sum_j {dH_{m,k,j}(psi) - v_{m,k,j}(psi)} {s_{m,k,j} - E[s_{m,k,j} | history]}`
//! where `dH = H_{m,k} - H_{m,k-1}`. With a linear blip both factors are
//! affine in psi, so `g_i(psi) = b_i - M_i psi` exactly and the estimate is a
//! single linear solve.

mod design;
mod nuisance;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blip::BlipModel;
use crate::error::{Error, Result};
use crate::exposure::{apply_mapping, MappedPanel, MappingSpec};
use crate::panel::PanelDataset;

pub use design::{Design, Strata};
pub use nuisance::{
    check_positivity, fit_treatment_model, fit_trend_model, NuisanceStrategy, TreatmentModel, TrendModel,
};

/// Estimating functions `s_m`: the blip features, optionally followed by
/// extra user-supplied functions of the history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SFunctionSet {
    extra: Option<BlipModel>,
}

impl SFunctionSet {
    pub fn with_extra(extra: BlipModel) -> Self {
        SFunctionSet { extra: Some(extra) }
    }

    pub fn extra(&self) -> Option<&BlipModel> {
        self.extra.as_ref()
    }

    pub fn dim(&self, model: &BlipModel) -> usize {
        model.n_params() + self.extra.as_ref().map_or(0, BlipModel::n_params)
    }
}

/// The default estimating functions: one per blip parameter.
pub fn default_s_functions(_model: &BlipModel) -> SFunctionSet {
    SFunctionSet::default()
}

/// Deliberate shifts of the fitted nuisances, for robustness checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisancePerturbation {
    pub treatment_shift: f64,
    pub trend_shift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub treatment: NuisanceStrategy,
    pub trend: NuisanceStrategy,
    /// Extra estimating functions in the blip term language.
    pub instruments: Option<String>,
    pub perturbation: NuisancePerturbation,
}

impl EstimatorConfig {
    pub fn s_functions(&self, model: &BlipModel) -> Result<SFunctionSet> {
        match &self.instruments {
            Some(text) => Ok(SFunctionSet::with_extra(BlipModel::parse_instruments(text)?)),
            None => Ok(default_s_functions(model)),
        }
    }
}

/// Per-unit affine scores `g_i(psi) = b_i - M_i psi` and their means.
#[derive(Debug, Clone)]
pub struct AffineScore {
    n: usize,
    q: usize,
    p: usize,
    /// `b_i` for each unit, `q` values per unit.
    b: Vec<f64>,
    /// `M_i` row-major (`q x p`) for each unit.
    m: Vec<f64>,
    pub b_mean: DVector<f64>,
    pub m_mean: DMatrix<f64>,
}

impl AffineScore {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn unit_offset(&self, i: usize) -> &[f64] {
        &self.b[i * self.q..(i + 1) * self.q]
    }

    pub fn unit_slope(&self, i: usize) -> &[f64] {
        let w = self.q * self.p;
        &self.m[i * w..(i + 1) * w]
    }

    /// `g_i(psi)` for every unit as rows of an `n x q` matrix.
    pub fn scores(&self, psi: &DVector<f64>) -> DMatrix<f64> {
        let (q, p) = (self.q, self.p);
        let mut out = vec![0.0; self.n * q];
        for (i, row) in out.chunks_mut(q).enumerate() {
            let b = self.unit_offset(i);
            let m = self.unit_slope(i);
            for (r, x) in row.iter_mut().enumerate() {
                *x = b[r] - m[r * p..(r + 1) * p].iter().zip(psi.iter()).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        DMatrix::from_row_slice(self.n, q, &out)
    }
}

const CHUNK: usize = 256;

/// Builds the affine score from fitted nuisances. Units are reduced in fixed
/// chunks in index order, so the result does not depend on the thread count.
pub fn assemble_score(design: &Design, treatment: &TreatmentModel, trend: &TrendModel) -> AffineScore {
    let (n, q, p) = (design.n, design.q, design.p);
    let mut b = vec![0.0; n * q];
    let mut m = vec![0.0; n * q * p];
    let fill = |i0: usize, b: &mut [f64], m: &mut [f64]| {
        let mut r = vec![0.0; q];
        let mut qv = vec![0.0; p];
        for (k, (bi, mi)) in b.chunks_mut(q).zip(m.chunks_mut(q * p)).enumerate() {
            let i = i0 + k;
            for pi in 0..design.pairs.len() {
                for j in 0..design.members {
                    let e = design.entry(pi, i, j);
                    let pred = treatment.prediction(design, pi, i, j);
                    for (x, (s, t)) in r.iter_mut().zip(design.s_value(pi, i, j).iter().zip(pred)) {
                        *x = s - t;
                    }
                    let e0 = design.c[e] - trend.constant(e);
                    for (x, (g, t)) in qv
                        .iter_mut()
                        .zip(design.trend_coefficients(pi, i, j).iter().zip(trend.coefficients(e)))
                    {
                        *x = g - t;
                    }
                    for (a, &ra) in r.iter().enumerate() {
                        if ra == 0.0 {
                            continue;
                        }
                        bi[a] += ra * e0;
                        for (x, y) in mi[a * p..(a + 1) * p].iter_mut().zip(&qv) {
                            *x += ra * y;
                        }
                    }
                }
            }
        }
    };
    b.par_chunks_mut(CHUNK * q)
        .zip(m.par_chunks_mut(CHUNK * q * p))
        .enumerate()
        .for_each(|(c, (bc, mc))| fill(c * CHUNK, bc, mc));

    let chunk_sum = |data: &[f64], width: usize| -> Vec<Vec<f64>> {
        data.par_chunks(CHUNK * width)
            .map(|chunk| {
                let mut acc = vec![0.0; width];
                for row in chunk.chunks(width) {
                    acc.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                acc
            })
            .collect()
    };
    let total = |parts: Vec<Vec<f64>>, width: usize| {
        parts.iter().fold(vec![0.0; width], |mut acc, part| {
            acc.iter_mut().zip(part).for_each(|(x, y)| *x += y);
            acc
        })
    };
    let b_sum = total(chunk_sum(&b, q), q);
    let m_sum = total(chunk_sum(&m, q * p), q * p);
    let nf = n as f64;
    AffineScore {
        n,
        q,
        p,
        b,
        m,
        b_mean: DVector::from_iterator(q, b_sum.iter().map(|x| x / nf)),
        m_mean: DMatrix::from_row_slice(q, p, &m_sum).map(|x| x / nf),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub time: usize,
    pub history: String,
    pub units: usize,
    pub zero_exposed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sampling_units: usize,
    pub members: usize,
    pub strata: Vec<StratumSummary>,
    pub warnings: Vec<String>,
    /// Singular values of the mean score Jacobian, descending.
    pub singular_values: Vec<f64>,
    /// `max |mean g(psi_hat)|`, or the least-squares residual norm when
    /// over-identified.
    pub score_residual: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub labels: Vec<String>,
    pub psi: DVector<f64>,
    /// Rows are `g_i(psi_hat)`, one per sampling unit.
    pub scores: DMatrix<f64>,
    /// `A = d mean g / d psi'`, `q x p`; the mean score is `A psi - rhs`.
    pub jacobian: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn psi_slice(&self) -> &[f64] {
        self.psi.as_slice()
    }
}

fn format_direction(v: &[f64], labels: &[String]) -> String {
    let terms: Vec<String> = v
        .iter()
        .zip(labels)
        .filter(|(x, _)| x.abs() > 1e-6)
        .map(|(x, l)| format!("{x:+.3}*{l}"))
        .collect();
    terms.join(" ")
}

/// Fits nuisances, assembles the score and solves for psi.
pub fn solve_psi(mapped: &MappedPanel, model: &BlipModel, config: &EstimatorConfig) -> Result<EstimationResult> {
    let sset = config.s_functions(model)?;
    let design = Design::new(mapped, model, &sset)?;
    let mut treatment = fit_treatment_model(&design, config.treatment)?;
    let mut trend = fit_trend_model(&design, config.trend)?;
    if config.perturbation.treatment_shift != 0.0 {
        treatment.perturb(config.perturbation.treatment_shift);
    }
    if config.perturbation.trend_shift != 0.0 {
        trend.perturb(config.perturbation.trend_shift);
    }
    let score = assemble_score(&design, &treatment, &trend);
    let (psi, singular_values, residual) = solve_affine(&score, model.labels())?;

    let mut diagnostics = Diagnostics {
        sampling_units: design.n,
        members: design.members,
        singular_values,
        score_residual: residual,
        ..Diagnostics::default()
    };
    for m in 0..design.tau {
        let strata = design.strata(m);
        for s in 0..strata.len() {
            diagnostics.strata.push(StratumSummary {
                time: m,
                history: strata.describe(s),
                units: strata.sizes[s],
                zero_exposed: strata.zero_exposed[s],
            });
            if strata.sizes[s] == 1 && config.treatment == NuisanceStrategy::Saturated {
                let msg = format!("singleton stratum {} at time {m}; its residuals are zero", strata.describe(s));
                log::warn!("{msg}");
                diagnostics.warnings.push(msg);
            }
        }
    }
    Ok(EstimationResult {
        labels: model.labels().to_vec(),
        scores: score.scores(&psi),
        jacobian: -score.m_mean.clone(),
        rhs: -score.b_mean.clone(),
        psi,
        diagnostics,
    })
}

/// Solves `M psi = b` (least squares when over-identified) after checking
/// that `M` has full column rank.
pub fn solve_affine(score: &AffineScore, labels: &[String]) -> Result<(DVector<f64>, Vec<f64>, f64)> {
    let p = score.p();
    if p == 0 {
        return Err(Error::Identification {
            message: "model has no parameters".into(),
            directions: vec![],
        });
    }
    let svd = score.m_mean.clone().svd(true, true);
    let sv = svd.singular_values.as_slice().to_vec();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = 1e-10 * smax;
    let weak: Vec<usize> = (0..sv.len()).filter(|&r| sv[r] <= tol || smax == 0.0).collect();
    if !weak.is_empty() {
        let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
        let directions = weak
            .iter()
            .map(|&r| format_direction(v_t.row(r).transpose().as_slice(), labels))
            .collect::<Vec<_>>();
        return Err(Error::Identification {
            message: format!(
                "estimating equations have rank {} < {p} parameters",
                sv.len() - weak.len()
            ),
            directions,
        });
    }
    let psi = svd.solve(&score.b_mean, tol).map_err(|e| Error::Identification {
        message: e.to_string(),
        directions: vec![],
    })?;
    let resid = &score.b_mean - &score.m_mean * &psi;
    let residual = if score.q() == p {
        let bound = 1e-10 * (1.0 + score.b_mean.amax());
        if resid.amax() > bound * 1e3 {
            return Err(Error::Identification {
                message: format!("linear solve residual {} too large", resid.amax()),
                directions: vec![],
            });
        }
        resid.amax()
    } else {
        resid.norm()
    };
    let mut sorted = sv;
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((psi, sorted, residual))
}

/// Fits `model` with own exposure only, ignoring interference.
pub fn naive_no_interference_fit(
    panel: &PanelDataset,
    model: &BlipModel,
    config: &EstimatorConfig,
) -> Result<EstimationResult> {
    if !model.uses_direct_only() {
        return Err(Error::Config("a no-interference model may not use spillover atoms".into()));
    }
    let mapped = apply_mapping(panel, &MappingSpec::Direct)?;
    solve_psi(&mapped, model, config)
}
