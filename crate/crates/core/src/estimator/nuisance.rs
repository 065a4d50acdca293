//! Plug-in nuisance models: the conditional mean of the estimating function
//! given history (treatment model) and the conditional mean trend of the
//! blipped-down outcome (trend model, affine in psi).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::design::Design;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceStrategy {
    /// Stratum sample means over the discrete history.
    #[default]
    Saturated,
    /// Least squares on an intercept plus the flattened history.
    Regression,
    /// Overall mean, ignoring history. Deliberately misspecified unless the
    /// nuisance does not depend on history; useful for robustness checks.
    Pooled,
}

/// Fitted `E[s_m | history]` for every unit, pair and member.
#[derive(Debug, Clone)]
pub struct TreatmentModel {
    pub strategy: NuisanceStrategy,
    q: usize,
    pred: Vec<f64>,
}

impl TreatmentModel {
    /// Prediction for entry `(pair, unit, member)` as laid out by the design.
    pub fn prediction(&self, design: &Design, pair: usize, i: usize, j: usize) -> &[f64] {
        let e = design.entry(pair, i, j);
        &self.pred[e * self.q..(e + 1) * self.q]
    }

    /// Adds `shift` to every prediction; used to check robustness to a wrong
    /// treatment model.
    pub fn perturb(&mut self, shift: f64) {
        self.pred.iter_mut().for_each(|x| *x += shift);
    }
}

/// Fitted trend `v = constant - coefficients' psi` for every entry.
#[derive(Debug, Clone)]
pub struct TrendModel {
    pub strategy: NuisanceStrategy,
    p: usize,
    constant: Vec<f64>,
    coefficients: Vec<f64>,
}

impl TrendModel {
    pub fn value(&self, design: &Design, pair: usize, i: usize, j: usize, psi: &[f64]) -> f64 {
        let e = design.entry(pair, i, j);
        let coef = &self.coefficients[e * self.p..(e + 1) * self.p];
        self.constant[e] - coef.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>()
    }

    pub(crate) fn constant(&self, e: usize) -> f64 {
        self.constant[e]
    }

    pub(crate) fn coefficients(&self, e: usize) -> &[f64] {
        &self.coefficients[e * self.p..(e + 1) * self.p]
    }

    /// Adds `shift` to every fitted trend.
    pub fn perturb(&mut self, shift: f64) {
        self.constant.iter_mut().for_each(|x| *x += shift);
    }
}

/// Checks that every stratum used at each blip time contains a sampling unit
/// with zero mapped exposure.
pub fn check_positivity(design: &Design, strategy: NuisanceStrategy) -> Result<()> {
    for m in 0..design.tau {
        let strata = design.strata(m);
        match strategy {
            NuisanceStrategy::Saturated => {
                if !design.discrete[m] {
                    return Err(continuous(m));
                }
                if let Some(s) = (0..strata.len()).find(|&s| strata.zero_exposed[s] == 0) {
                    return Err(Error::Positivity {
                        time: m,
                        stratum: strata.describe(s),
                    });
                }
            }
            NuisanceStrategy::Regression | NuisanceStrategy::Pooled => {
                if strata.zero_exposed.iter().all(|&z| z == 0) {
                    return Err(Error::Positivity {
                        time: m,
                        stratum: "(all units)".into(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn continuous(m: usize) -> Error {
    Error::ContinuousHistory(format!("history at time {m} has non-integer values; use the regression strategy"))
}

/// Per blip time, either stratum ids or a regression projector.
enum Smoother {
    Means { ids: Vec<usize>, sizes: Vec<usize> },
    Projection(DMatrix<f64>),
}

impl Smoother {
    fn new(design: &Design, m: usize, strategy: NuisanceStrategy) -> Result<Self> {
        match strategy {
            NuisanceStrategy::Saturated => {
                if !design.discrete[m] {
                    return Err(continuous(m));
                }
                let strata = design.strata(m);
                Ok(Smoother::Means {
                    ids: strata.ids.clone(),
                    sizes: strata.sizes.clone(),
                })
            }
            NuisanceStrategy::Regression => {
                let rows = &design.history[m];
                let d = 1 + rows[0].len();
                let x = DMatrix::from_fn(design.n, d, |i, c| if c == 0 { 1.0 } else { rows[i][c - 1] });
                let svd = x.svd(true, false);
                let u = svd.u.expect("left singular vectors requested");
                let smax = svd.singular_values.max();
                let keep: Vec<usize> = (0..svd.singular_values.len())
                    .filter(|&r| svd.singular_values[r] > 1e-10 * smax.max(1.0))
                    .collect();
                Ok(Smoother::Projection(u.select_columns(&keep)))
            }
            NuisanceStrategy::Pooled => Ok(Smoother::Means {
                ids: vec![0; design.n],
                sizes: vec![design.n],
            }),
        }
    }

    /// Replaces each unit's `width` values, read from `values` at
    /// `offset(i)`, by their fitted values.
    fn fit(&self, values: &[f64], width: usize, offset: impl Fn(usize) -> usize, out: &mut [f64]) {
        match self {
            Smoother::Means { ids, sizes } => {
                let mut sums = vec![0.0; sizes.len() * width];
                for (i, &s) in ids.iter().enumerate() {
                    let o = offset(i);
                    for (x, y) in sums[s * width..(s + 1) * width].iter_mut().zip(&values[o..o + width]) {
                        *x += y;
                    }
                }
                for (s, &size) in sizes.iter().enumerate() {
                    sums[s * width..(s + 1) * width].iter_mut().for_each(|x| *x /= size as f64);
                }
                for (i, &s) in ids.iter().enumerate() {
                    let o = offset(i);
                    out[o..o + width].copy_from_slice(&sums[s * width..(s + 1) * width]);
                }
            }
            Smoother::Projection(u) => {
                let y = DMatrix::from_fn(u.nrows(), width, |i, c| values[offset(i) + c]);
                let fitted = u * (u.transpose() * y);
                for i in 0..u.nrows() {
                    let o = offset(i);
                    for c in 0..width {
                        out[o + c] = fitted[(i, c)];
                    }
                }
            }
        }
    }
}

/// Smooths `width` values per entry over units, separately for each pair and
/// member, writing fitted values into `out` with the same layout as `values`.
fn smooth_entries(
    design: &Design,
    strategy: NuisanceStrategy,
    values: &[f64],
    width: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    let mut smoothers: Vec<Option<Smoother>> = (0..design.tau).map(|_| None).collect();
    for (pi, &(m, _)) in design.pairs.iter().enumerate() {
        if smoothers[m].is_none() {
            smoothers[m] = Some(Smoother::new(design, m, strategy)?);
        }
        let smoother = smoothers[m].as_ref().expect("just built");
        for j in 0..design.members {
            smoother.fit(values, width, |i| design.entry(pi, i, j) * width, &mut out);
        }
    }
    Ok(out)
}

pub fn fit_treatment_model(design: &Design, strategy: NuisanceStrategy) -> Result<TreatmentModel> {
    check_positivity(design, strategy)?;
    Ok(TreatmentModel {
        strategy,
        q: design.q,
        pred: smooth_entries(design, strategy, &design.s, design.q)?,
    })
}

pub fn fit_trend_model(design: &Design, strategy: NuisanceStrategy) -> Result<TrendModel> {
    check_positivity(design, strategy)?;
    Ok(TrendModel {
        strategy,
        p: design.p,
        constant: smooth_entries(design, strategy, &design.c, 1)?,
        coefficients: smooth_entries(design, strategy, &design.g, design.p)?,
    })
}
