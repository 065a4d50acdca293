//! Monte Carlo harness: repeated generate-fit-infer loops summarised as
//! bias, spread and coverage tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blip::{BlipModel, FixedHistory};
use crate::error::{Error, Result};
use crate::estimands::{estimand_se, evaluate_all, replicate_fn, EstimandSpec};
use crate::estimator::{solve_psi, EstimatorConfig};
use crate::exposure::{apply_mapping, MappedPanel, MappingSpec};
use crate::rng::stream_rng;
use crate::variance::{estimate_variance, VarianceConfig};

use super::dgp::{
    gen_cluster_dgp, gen_lattice_dgp, gen_network_dgp, ClusterDgpConfig, LatticeDgpConfig, NetworkDgpConfig,
    SD_SD_READING, SD_VARIANCE_READING,
};
use super::models::{self, BlipRow};

/// A simulation design. The design's own `seed` is ignored by the harness,
/// which derives one per replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum DgpConfig {
    LineNetwork(NetworkDgpConfig),
    ClusterPairs(ClusterDgpConfig),
    Lattice(LatticeDgpConfig),
}

impl DgpConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DgpConfig::LineNetwork(_) => "line_network",
            DgpConfig::ClusterPairs(_) => "cluster_pairs",
            DgpConfig::Lattice(_) => "lattice",
        }
    }

    pub fn generate(&self, seed: u64) -> Result<MappedPanel> {
        match self {
            DgpConfig::LineNetwork(c) => gen_network_dgp(&NetworkDgpConfig { seed, ..c.clone() }),
            DgpConfig::ClusterPairs(c) => gen_cluster_dgp(&ClusterDgpConfig { seed, ..c.clone() }),
            DgpConfig::Lattice(c) => gen_lattice_dgp(&LatticeDgpConfig { seed, ..c.clone() }),
        }
    }

    /// Blip model fitted to this design.
    pub fn model_text(&self) -> &'static str {
        match self {
            DgpConfig::LineNetwork(_) => models::NETWORK_MODEL,
            DgpConfig::ClusterPairs(_) => models::CLUSTER_MODEL,
            DgpConfig::Lattice(_) => models::COUNTY_MODEL,
        }
    }

    fn noise(&self) -> (f64, Option<f64>) {
        match self {
            DgpConfig::LineNetwork(c) => (c.noise_sd, c.outcome_noise_sd),
            DgpConfig::ClusterPairs(c) => (c.noise_sd, c.outcome_noise_sd),
            DgpConfig::Lattice(c) => (c.noise_sd, c.outcome_noise_sd),
        }
    }

    /// Reported estimands with their true values.
    pub fn estimands(&self, model: &BlipModel) -> Result<Vec<(EstimandSpec, f64)>> {
        match self {
            DgpConfig::LineNetwork(c) => {
                let mut rows = blip_rows(&models::network_rows(), model, &c.psi)?;
                rows.push((EstimandSpec::UntreatedTrajectory { k: 2 }, 0.5));
                Ok(rows)
            }
            DgpConfig::ClusterPairs(c) => Ok(model
                .labels()
                .iter()
                .zip(models::CLUSTER_ROWS)
                .zip(&c.psi)
                .map(|((name, label), &truth)| {
                    let spec = EstimandSpec::Parameter {
                        name: name.clone(),
                        label: Some(label.to_string()),
                    };
                    (spec, truth)
                })
                .collect()),
            DgpConfig::Lattice(c) => blip_rows(&models::time0_rows(), model, &c.psi),
        }
    }
}

fn blip_rows(rows: &[BlipRow], model: &BlipModel, psi: &[f64]) -> Result<Vec<(EstimandSpec, f64)>> {
    rows.iter()
        .map(|row| {
            let truth = model.blip_value(psi, row.m, row.k, 0, &FixedHistory::network(&row.a, &row.h))?;
            Ok((row_spec(row), truth))
        })
        .collect()
}

pub fn row_spec(row: &BlipRow) -> EstimandSpec {
    EstimandSpec::BlipAt {
        m: row.m,
        k: row.k,
        member: 0,
        a: row.a.clone(),
        h: row.h.iter().map(|&x| vec![x]).collect(),
        label: Some(row.label.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub replicates: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub variance: VarianceConfig,
    pub level: f64,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            replicates: 100,
            seed: 1,
            estimator: EstimatorConfig::default(),
            variance: VarianceConfig::Sandwich,
            level: 0.95,
            max_failure_rate: 0.05,
        }
    }
}

impl MonteCarloConfig {
    fn check(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("need at least 2 replicates, got {}", self.replicates)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Data and bootstrap seeds of replicate `r`: the first two words of
/// stream `r` of `seed`.
pub fn derive_seeds(seed: u64, r: usize) -> (u64, u64) {
    let mut rng = stream_rng(seed, r as u64);
    (rng.next_u64(), rng.next_u64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub label: String,
    pub estimator: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo standard error of `mean`.
    pub mcse: f64,
    pub mean_se: Option<f64>,
    pub coverage: Option<f64>,
    pub replicates: usize,
}

impl McRow {
    pub fn bias(&self) -> f64 {
        self.mean - self.truth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub design: String,
    pub replicates: usize,
    pub failures: usize,
    /// Failed replicate count by error code.
    pub failure_codes: BTreeMap<String, usize>,
    pub noise_sd: f64,
    pub outcome_noise_sd: f64,
    /// Which reading of the noise parameter was simulated.
    pub noise_reading: String,
    pub level: f64,
    pub rows: Vec<McRow>,
}

impl MonteCarloReport {
    pub fn row(&self, label: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Tab-separated table, one line per row, with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("estimand\testimator\ttruth\tmean\tsd\tmcse\tmean_se\tcoverage\treplicates\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                r.label,
                r.estimator,
                r.truth,
                r.mean,
                r.sd,
                r.mcse,
                opt(r.mean_se),
                opt(r.coverage),
                r.replicates
            );
        }
        out
    }
}

fn noise_reading(sd: f64, outcome: Option<f64>) -> String {
    let base = if sd == SD_VARIANCE_READING {
        "variance 0.1"
    } else if sd == SD_SD_READING {
        "sd 0.1"
    } else {
        "custom"
    };
    match outcome {
        Some(0.0) => format!("{base}, no extra outcome noise"),
        Some(x) if x != sd => format!("{base}, outcome noise sd {x}"),
        _ => base.to_string(),
    }
}

/// One replicate's estimate, standard error and interval for each row.
type Cell = (f64, Option<f64>, Option<(f64, f64)>);
type Draw = Vec<Cell>;

struct Arm<'a> {
    name: &'a str,
    model: &'a BlipModel,
    mapping: Option<MappingSpec>,
    specs: Vec<EstimandSpec>,
    truths: Vec<f64>,
    labels: Vec<String>,
}

fn fit_arm(arm: &Arm<'_>, data: &MappedPanel, config: &MonteCarloConfig, boot_seed: u64) -> Result<Draw> {
    let remapped;
    let mapped = match &arm.mapping {
        Some(spec) => {
            remapped = apply_mapping(data.panel(), spec)?;
            &remapped
        }
        None => data,
    };
    let fit = solve_psi(mapped, arm.model, &config.estimator)?;
    let estimates = evaluate_all(&arm.specs, &fit, mapped, arm.model)?;
    let extra = config.variance.is_bootstrap().then(|| replicate_fn(&arm.specs));
    let variance = estimate_variance(
        &config.variance,
        &fit,
        mapped,
        arm.model,
        &config.estimator,
        boot_seed,
        extra.as_deref(),
    )?;
    let values = estimand_se(&arm.specs, &estimates, arm.model, &variance, config.level)?;
    Ok(values.into_iter().map(|v| (v.estimate, v.se, v.ci)).collect())
}

fn fatal(e: &Error) -> bool {
    e.is_input_error() || matches!(e, Error::Config(_) | Error::SpecParse { .. } | Error::DimensionMismatch(_))
}

fn run_arms(dgp: &DgpConfig, config: &MonteCarloConfig, arms: &[Arm<'_>]) -> Result<MonteCarloReport> {
    config.check()?;
    let replicate = |r: usize| -> Result<std::result::Result<Vec<Draw>, String>> {
        let (data_seed, boot_seed) = derive_seeds(config.seed, r);
        let data = dgp.generate(data_seed)?;
        let draws: Result<Vec<Draw>> = arms.iter().map(|arm| fit_arm(arm, &data, config, boot_seed)).collect();
        match draws {
            Ok(d) => Ok(Ok(d)),
            Err(e) if fatal(&e) => Err(e),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                Ok(Err(e.code().to_string()))
            }
        }
    };
    let outcomes: Vec<_> = (0..config.replicates).into_par_iter().map(replicate).collect::<Result<_>>()?;
    let mut failure_codes = BTreeMap::new();
    let mut ok = Vec::new();
    for o in outcomes {
        match o {
            Ok(d) => ok.push(d),
            Err(code) => *failure_codes.entry(code).or_insert(0) += 1,
        }
    }
    let failures = config.replicates - ok.len();
    if failures as f64 > config.max_failure_rate * config.replicates as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: config.replicates,
        });
    }
    let mut rows = Vec::new();
    for (a, arm) in arms.iter().enumerate() {
        for (c, (label, &truth)) in arm.labels.iter().zip(&arm.truths).enumerate() {
            let cells: Vec<_> = ok.iter().map(|d| d[a][c]).collect();
            rows.push(summarize(label, arm.name, truth, &cells));
        }
    }
    let (noise_sd, outcome) = dgp.noise();
    Ok(MonteCarloReport {
        design: dgp.name().to_string(),
        replicates: config.replicates,
        failures,
        failure_codes,
        noise_sd,
        outcome_noise_sd: outcome.unwrap_or(noise_sd),
        noise_reading: noise_reading(noise_sd, outcome),
        level: config.level,
        rows,
    })
}

fn summarize(label: &str, estimator: &str, truth: f64, cells: &[Cell]) -> McRow {
    let n = cells.len() as f64;
    let mean = cells.iter().map(|c| c.0).sum::<f64>() / n;
    let sd = (cells.iter().map(|c| (c.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ses: Vec<f64> = cells.iter().filter_map(|c| c.1).collect();
    let cis: Vec<(f64, f64)> = cells.iter().filter_map(|c| c.2).collect();
    McRow {
        label: label.to_string(),
        estimator: estimator.to_string(),
        truth,
        mean,
        sd,
        mcse: sd / n.sqrt(),
        mean_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
        coverage: (!cis.is_empty())
            .then(|| cis.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / cis.len() as f64),
        replicates: cells.len(),
    }
}

fn aware_arm<'a>(dgp: &DgpConfig, model: &'a BlipModel) -> Result<Arm<'a>> {
    let (specs, truths): (Vec<_>, Vec<_>) = dgp.estimands(model)?.into_iter().unzip();
    Ok(Arm {
        name: "interference-aware",
        model,
        mapping: None,
        labels: specs.iter().map(EstimandSpec::label).collect(),
        specs,
        truths,
    })
}

/// Generates, fits and infers `config.replicates` times in parallel.
/// Replicate `r` draws its data and bootstrap seeds from [`derive_seeds`],
/// so the report is identical for any thread count.
pub fn run_monte_carlo(dgp: &DgpConfig, config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    let model = BlipModel::parse(dgp.model_text())?;
    run_arms(dgp, config, &[aware_arm(dgp, &model)?])
}

/// Label of the interference-blind untreated trajectory row.
pub const NAIVE_ROW: &str = "naive E[Y_2(0)]";

/// Fits the interference-aware model and an own-exposure-only model to
/// each network replicate. The naive rows are its direct blips and its
/// estimate of the untreated mean at time 2.
pub fn naive_comparison(dgp: &DgpConfig, config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    if !matches!(dgp, DgpConfig::LineNetwork(_)) {
        return Err(Error::Config("the naive comparison needs the line network design".into()));
    }
    let model = BlipModel::parse(dgp.model_text())?;
    let naive = BlipModel::parse(models::NAIVE_MODEL)?;
    let naive_arm = Arm {
        name: "naive",
        model: &naive,
        mapping: Some(MappingSpec::Direct),
        specs: vec![EstimandSpec::UntreatedTrajectory { k: 2 }],
        truths: vec![0.5],
        labels: vec![NAIVE_ROW.to_string()],
    };
    run_arms(dgp, config, &[aware_arm(dgp, &model)?, naive_arm])
}

/// Monte Carlo SDs of the thirteen line-network rows reported at N = 5000.
pub const REFERENCE_SDS: [f64; 13] = [
    0.006, 0.005, 0.005, 0.009, 0.009, 0.008, 0.014, 0.008, 0.012, 0.011, 0.008, 0.009, 0.008,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCandidate {
    pub reading: String,
    pub noise_sd: f64,
    pub outcome_noise_sd: f64,
    /// SD of each row's estimate over the replicates.
    pub sds: Vec<f64>,
    /// Mean absolute log ratio of `sds` to the rescaled reference.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub n: usize,
    pub replicates: usize,
    /// Reference SDs rescaled to `n` units.
    pub reference: Vec<f64>,
    pub candidates: Vec<NoiseCandidate>,
    pub best: String,
}

/// Compares the spread of the line-network estimates under each reading of
/// the noise parameter with the reference SDs, scaled by `sqrt(5000 / n)`.
pub fn noise_convention_check(n: usize, replicates: usize, seed: u64) -> Result<NoiseCheck> {
    let scale = (5000.0 / n as f64).sqrt();
    let reference: Vec<f64> = REFERENCE_SDS.iter().map(|s| s * scale).collect();
    let settings = [
        (SD_VARIANCE_READING, None),
        (SD_SD_READING, None),
        (SD_SD_READING, Some(0.0)),
    ];
    let config = MonteCarloConfig {
        replicates,
        seed,
        ..MonteCarloConfig::default()
    };
    let mut candidates = Vec::new();
    for (noise_sd, outcome_noise_sd) in settings {
        let dgp = DgpConfig::LineNetwork(NetworkDgpConfig {
            n,
            noise_sd,
            outcome_noise_sd,
            ..NetworkDgpConfig::default()
        });
        let report = run_monte_carlo(&dgp, &config)?;
        let sds: Vec<f64> = report.rows.iter().take(REFERENCE_SDS.len()).map(|r| r.sd).collect();
        let distance = sds.iter().zip(&reference).map(|(s, r)| (s / r).ln().abs()).sum::<f64>() / sds.len() as f64;
        candidates.push(NoiseCandidate {
            reading: report.noise_reading,
            noise_sd,
            outcome_noise_sd: report.outcome_noise_sd,
            sds,
            distance,
        });
    }
    let best = candidates
        .iter()
        .min_by(|a, b| a.distance.total_cmp(&b.distance))
        .map(|c| c.reading.clone())
        .expect("candidates are nonempty");
    Ok(NoiseCheck {
        n,
        replicates,
        reference,
        candidates,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_network(n: usize) -> DgpConfig {
        DgpConfig::LineNetwork(NetworkDgpConfig {
            n,
            ..NetworkDgpConfig::default()
        })
    }

    #[test]
    fn network_truths_follow_the_blip_formula() {
        let dgp = small_network(10);
        let model = BlipModel::parse(dgp.model_text()).unwrap();
        let truths: Vec<f64> = dgp.estimands(&model).unwrap().into_iter().map(|(_, t)| t).collect();
        let want = [1.0, 1.3, 0.5, 0.9, 1.05, 0.4, 1.0, 0.9, 1.4, 1.2, 0.5, 0.45, 0.4, 0.5];
        for (t, w) in truths.iter().zip(want) {
            assert!((t - w).abs() < 1e-12, "{truths:?}");
        }
    }

    #[test]
    fn smoke_run_is_well_formed_and_reproducible() {
        let config = MonteCarloConfig {
            replicates: 2,
            seed: 9,
            ..MonteCarloConfig::default()
        };
        let dgp = small_network(300);
        let a = run_monte_carlo(&dgp, &config).unwrap();
        assert_eq!(a.rows.len(), 14);
        assert_eq!(a.failures, 0);
        assert_eq!(a.noise_reading, "variance 0.1");
        assert!(a.rows[..13].iter().all(|r| r.coverage.is_some_and(|c| (0.0..=1.0).contains(&c))));
        assert_eq!(a.rows[13].coverage, None);
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&dgp, &config).unwrap());
        assert_eq!(a, b);
        let tsv = a.to_tsv();
        assert_eq!(tsv.lines().count(), 15);
        assert!(tsv.contains("γ_{0,1}(a_0=1,h_0=1)\tinterference-aware\t1.300000"));
    }

    #[test]
    fn too_few_replicates_rejected() {
        let config = MonteCarloConfig {
            replicates: 1,
            ..MonteCarloConfig::default()
        };
        assert_eq!(run_monte_carlo(&small_network(50), &config).unwrap_err().code(), "ConfigError");
    }

    #[test]
    fn failing_replicates_are_counted() {
        // a five-unit line rarely has an untreated unit in every stratum
        let config = MonteCarloConfig {
            replicates: 20,
            max_failure_rate: 1.0,
            ..MonteCarloConfig::default()
        };
        let report = run_monte_carlo(&small_network(5), &config);
        match report {
            Ok(r) => assert!(r.failures > 0 && r.failure_codes.values().sum::<usize>() == r.failures),
            Err(e) => assert_eq!(e.code(), "TooManyFailures"),
        }
        let strict = MonteCarloConfig {
            max_failure_rate: 0.0,
            ..config
        };
        assert_eq!(run_monte_carlo(&small_network(5), &strict).unwrap_err().code(), "TooManyFailures");
    }

    #[test]
    fn cluster_rows_use_parameter_labels() {
        let dgp = DgpConfig::ClusterPairs(ClusterDgpConfig {
            n_clusters: 400,
            ..ClusterDgpConfig::default()
        });
        let config = MonteCarloConfig {
            replicates: 3,
            ..MonteCarloConfig::default()
        };
        let report = run_monte_carlo(&dgp, &config).unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, models::CLUSTER_ROWS);
        assert_eq!(report.row("ψ^3_{1,2}").unwrap().truth, 0.1);
    }

    #[test]
    fn naive_comparison_adds_a_biased_row() {
        let config = MonteCarloConfig {
            replicates: 4,
            variance: VarianceConfig::MovingBlock {
                block_length: 5,
                replicates: 10,
                seed: None,
            },
            ..MonteCarloConfig::default()
        };
        let report = naive_comparison(&small_network(1500), &config).unwrap();
        assert_eq!(report.rows.len(), 15);
        let naive = report.row(NAIVE_ROW).unwrap();
        assert!(naive.mean > 0.8, "{}", naive.mean);
        assert!(naive.coverage.is_some());
        let aware = report.row("E[Y_2(0)]").unwrap();
        assert!((aware.mean - 0.5).abs() < 0.1);
        let cluster = DgpConfig::ClusterPairs(ClusterDgpConfig::default());
        assert!(naive_comparison(&cluster, &config).is_err());
    }

    #[test]
    fn zero_spillover_makes_naive_agree() {
        let mut psi = models::NETWORK_PSI.to_vec();
        // keep only the own-exposure terms
        for (i, p) in psi.iter_mut().enumerate() {
            if ![0, 2, 6].contains(&i) {
                *p = 0.0;
            }
        }
        let dgp = DgpConfig::LineNetwork(NetworkDgpConfig {
            n: 3000,
            psi,
            noise_sd: SD_SD_READING,
            ..NetworkDgpConfig::default()
        });
        let config = MonteCarloConfig {
            replicates: 3,
            variance: VarianceConfig::MovingBlock {
                block_length: 5,
                replicates: 5,
                seed: None,
            },
            ..MonteCarloConfig::default()
        };
        let report = naive_comparison(&dgp, &config).unwrap();
        let naive = report.row(NAIVE_ROW).unwrap().mean;
        let aware = report.row("E[Y_2(0)]").unwrap().mean;
        assert!((naive - aware).abs() < 0.03, "{naive} vs {aware}");
    }

    #[test]
    fn noise_check_ranks_candidates() {
        let check = noise_convention_check(500, 3, 2).unwrap();
        assert_eq!(check.candidates.len(), 3);
        assert!((check.reference[0] - 0.006 * 10f64.sqrt()).abs() < 1e-12);
        let variance = &check.candidates[0];
        let sd = &check.candidates[1];
        // a tenfold variance roughly triples every SD
        assert!(variance.sds.iter().zip(&sd.sds).all(|(v, s)| v > s));
        assert!(check.candidates.iter().any(|c| c.reading == check.best));
    }
}
