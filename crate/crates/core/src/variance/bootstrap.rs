//! Block bootstraps that refit the nuisances and re-solve psi on every
//! resample.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blip::BlipModel;
use crate::error::{Error, Result};
use crate::estimator::{solve_psi, EstimationResult, EstimatorConfig};
use crate::exposure::MappedPanel;
use crate::rng::{stream_rng, Rng};

use super::{hex_blocks, sample_covariance, Tuning, VarianceEstimate, VarianceMethod};

/// Derived quantities evaluated on each replicate fit.
pub type EstimandFn = dyn Fn(&EstimationResult, &MappedPanel, &BlipModel) -> Result<Vec<f64>> + Sync;

/// Redraws allowed per replicate when a resample cannot be fit.
const MAX_REDRAWS: usize = 10;

/// Blocks of sampling-unit indices and how a replicate is drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub blocks: Vec<Vec<usize>>,
    /// Blocks drawn (with replacement) per replicate.
    pub draws: usize,
    /// Keep only the first `truncate` indices of the concatenation.
    pub truncate: Option<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl BlockPlan {
    /// All `n` circular blocks of `len` consecutive indices; each replicate
    /// concatenates `ceil(n / len)` of them and truncates to `n`.
    pub fn moving(n: usize, len: usize, replicates: usize, seed: u64) -> Result<Self> {
        if len == 0 || len > n {
            return Err(Error::Config(format!("block length must be in 1..={n}, got {len}")));
        }
        check_replicates(replicates)?;
        Ok(BlockPlan {
            blocks: (0..n).map(|s| (s..s + len).map(|i| i % n).collect()).collect(),
            draws: n.div_ceil(len),
            truncate: Some(n),
            replicates,
            seed,
        })
    }

    /// Draws as many blocks as there are, pooling their members.
    pub fn pooled(blocks: Vec<Vec<usize>>, replicates: usize, seed: u64) -> Result<Self> {
        check_replicates(replicates)?;
        if blocks.is_empty() {
            return Err(Error::InvalidSize("no blocks to resample".into()));
        }
        Ok(BlockPlan {
            draws: blocks.len(),
            blocks,
            truncate: None,
            replicates,
            seed,
        })
    }

    /// One resample, sorted. The estimator does not depend on unit order,
    /// and sorting makes identical multisets give bit-identical fits.
    pub fn resample(&self, rng: &mut Rng) -> Vec<usize> {
        let mut rows = Vec::new();
        for _ in 0..self.draws {
            let b = rng.random_range(0..self.blocks.len());
            rows.extend_from_slice(&self.blocks[b]);
        }
        if let Some(n) = self.truncate {
            rows.truncate(n);
        }
        rows.sort_unstable();
        rows
    }
}

fn check_replicates(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::Config(format!("need at least 2 bootstrap replicates, got {b}")));
    }
    Ok(())
}

/// Replicate estimates of psi and of any derived estimands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub psi: Vec<Vec<f64>>,
    pub estimands: Vec<Vec<f64>>,
}

fn redrawable(e: &Error) -> bool {
    matches!(
        e,
        Error::Positivity { .. } | Error::Identification { .. } | Error::EmptySubgroup(_) | Error::JacobianSingular
    )
}

/// Runs every replicate of `plan` in parallel. Replicate `r` reads RNG
/// stream `r` of the plan's seed, so the draws do not depend on scheduling.
/// Returns the draws and the number of redrawn resamples.
pub fn run_bootstrap(
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    plan: &BlockPlan,
    estimands: Option<&EstimandFn>,
) -> Result<(BootstrapDraws, usize)> {
    let replicate = |r: usize| -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut rng = stream_rng(plan.seed, r as u64);
        let mut last = None;
        for attempt in 0..=MAX_REDRAWS {
            let sample = mapped.select(&plan.resample(&mut rng));
            let fit = solve_psi(&sample, model, config).and_then(|fit| {
                let extra = match estimands {
                    Some(f) => f(&fit, &sample, model)?,
                    None => vec![],
                };
                Ok((fit.psi.as_slice().to_vec(), extra))
            });
            match fit {
                Ok((psi, extra)) => return Ok((psi, extra, attempt)),
                Err(e) if redrawable(&e) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::Bootstrap(format!(
            "replicate {r} could not be fit after {MAX_REDRAWS} redraws: {}",
            last.expect("at least one failure")
        )))
    };
    let results: Vec<_> = (0..plan.replicates).into_par_iter().map(replicate).collect::<Result<_>>()?;
    let mut draws = BootstrapDraws::default();
    let mut redrawn = 0;
    for (psi, extra, attempts) in results {
        draws.psi.push(psi);
        draws.estimands.push(extra);
        redrawn += attempts;
    }
    Ok((draws, redrawn))
}

pub fn moving_block_bootstrap(
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    block_length: usize,
    replicates: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    moving_block_bootstrap_with(mapped, model, config, block_length, replicates, seed, None)
}

/// Circular moving block bootstrap over the sampling-unit order.
pub fn moving_block_bootstrap_with(
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    block_length: usize,
    replicates: usize,
    seed: u64,
    estimands: Option<&EstimandFn>,
) -> Result<VarianceEstimate> {
    let plan = BlockPlan::moving(mapped.n(), block_length, replicates, seed)?;
    let (draws, redrawn) = run_bootstrap(mapped, model, config, &plan, estimands)?;
    Ok(VarianceEstimate {
        covariance: sample_covariance(&draws.psi, model.n_params()),
        method: VarianceMethod::MovingBlock,
        tuning: Tuning {
            block_length: Some(block_length),
            replicates: Some(replicates),
            seed: Some(seed),
            redrawn: Some(redrawn),
            ..Tuning::default()
        },
        warnings: vec![],
        draws: Some(draws),
    })
}

pub fn spatial_block_bootstrap(
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    hex_width_km: f64,
    replicates: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    spatial_block_bootstrap_with(mapped, model, config, hex_width_km, replicates, seed, None)
}

/// Resamples hexagons of the given width with replacement. A clustered
/// sampling unit sits at the centroid of its members.
pub fn spatial_block_bootstrap_with(
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    hex_width_km: f64,
    replicates: usize,
    seed: u64,
    estimands: Option<&EstimandFn>,
) -> Result<VarianceEstimate> {
    let coords = mapped
        .panel()
        .coordinates()
        .ok_or_else(|| Error::StructureMissing("spatial bootstrap needs unit coordinates".into()))?;
    let points: Vec<[f64; 2]> = (0..mapped.n())
        .map(|i| {
            let members = mapped.members(i);
            let sum = members
                .iter()
                .fold([0.0, 0.0], |acc, &u| [acc[0] + coords[u][0], acc[1] + coords[u][1]]);
            let k = members.len() as f64;
            [sum[0] / k, sum[1] / k]
        })
        .collect();
    let (tiling, blocks) = hex_blocks(&points, hex_width_km)?;
    let mut warnings = vec![];
    if blocks.len() == 1 {
        let msg = "all sampling units fall in one hexagon; every replicate equals the data and the variance is zero"
            .to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let n_blocks = blocks.len();
    let plan = BlockPlan::pooled(blocks, replicates, seed)?;
    let (draws, redrawn) = run_bootstrap(mapped, model, config, &plan, estimands)?;
    Ok(VarianceEstimate {
        covariance: sample_covariance(&draws.psi, model.n_params()),
        method: VarianceMethod::SpatialBlock,
        tuning: Tuning {
            replicates: Some(replicates),
            seed: Some(seed),
            hex_width_km: Some(hex_width_km),
            hex_anchor: Some(tiling.anchor),
            blocks: Some(n_blocks),
            redrawn: Some(redrawn),
            ..Tuning::default()
        },
        warnings,
        draws: Some(draws),
    })
}
