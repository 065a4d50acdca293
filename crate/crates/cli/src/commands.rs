use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;
use snmm::blip::BlipModel;
use snmm::estimands::{estimand_se, evaluate_all, replicate_fn, validate_specs, EstimandValue};
use snmm::estimator::{solve_psi, Diagnostics};
use snmm::exposure::{apply_mapping, recode_absorbing, MappedPanel, MappingSpec};
use snmm::graph::load_graph;
use snmm::panel::{load_panel, validate_panel, write_panel, PanelDataset, PanelSchema, Structure, ValidationReport};
use snmm::simlab::montecarlo::NoiseCheck;
use snmm::simlab::{naive_comparison, noise_convention_check, run_monte_carlo, MonteCarloConfig, MonteCarloReport};
use snmm::variance::{estimate_variance, Tuning, VarianceMethod};
use snmm::{Error, Result};

use crate::config::{LoadedConfig, Mode, RunConfig};

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn apply(loaded: &mut LoadedConfig, overrides: &Overrides) {
    if let Some(seed) = overrides.seed {
        loaded.config.seed = seed;
    }
}

fn out_dir(loaded: &LoadedConfig, overrides: &Overrides) -> Result<PathBuf> {
    let dir = match (&overrides.out, &loaded.config.output.dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => loaded.resolve(d),
        (None, None) => loaded.base.join("out"),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn expect_mode(config: &RunConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(Error::Config(format!("config has mode {:?}, expected {mode:?}", config.mode)));
    }
    Ok(())
}

fn open(loaded: &LoadedConfig, p: &Path) -> Result<File> {
    let path = loaded.resolve(p);
    File::open(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Loads the panel and its interference structure. A panel declares at most
/// one: a graph file or a cluster column.
pub fn load_data(loaded: &LoadedConfig) -> Result<PanelDataset> {
    let data = loaded
        .config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("missing [data]".into()))?;
    let mut panel = load_panel(open(loaded, &data.panel)?, &data.schema)?;
    if let Some(g) = &data.graph {
        if panel.clusters().is_some() {
            return Err(Error::Config("declare either a graph or a cluster column, not both".into()));
        }
        let graph = load_graph(BufReader::new(open(loaded, g)?), panel.units())?;
        panel = panel.with_structure(Structure::Network(graph))?;
    }
    if data.recode_absorbing {
        panel = recode_absorbing(&panel)?;
    }
    Ok(panel)
}

fn mapping(config: &RunConfig) -> Result<MappingSpec> {
    MappingSpec::from_name(
        config
            .mapping
            .as_deref()
            .ok_or_else(|| Error::Config("missing `mapping`".into()))?,
    )
}

fn structure_name(panel: &PanelDataset) -> &'static str {
    match panel.structure() {
        Structure::Network(_) => "network",
        Structure::Cluster(_) => "cluster",
        Structure::None => "none",
    }
}

#[derive(Debug, Serialize)]
struct DataSummary {
    units: usize,
    times: usize,
    sampling_units: usize,
    structure: &'static str,
    mapping: String,
    coordinates: bool,
}

#[derive(Debug, Serialize)]
struct VarianceSummary {
    method: VarianceMethod,
    tuning: Tuning,
    warnings: Vec<String>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct EstimateReport<'a> {
    seed: u64,
    config: &'a RunConfig,
    config_text: &'a str,
    data: DataSummary,
    level: f64,
    parameters: Vec<EstimandValue>,
    estimands: Vec<EstimandValue>,
    variance: VarianceSummary,
    diagnostics: &'a Diagnostics,
}

fn value_tsv(rows: &[EstimandValue]) -> String {
    let mut out = String::from("label\testimate\tse\tci_low\tci_high\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}",
            r.label,
            r.estimate,
            opt(r.se),
            opt(r.ci.map(|c| c.0)),
            opt(r.ci.map(|c| c.1))
        );
    }
    out
}

/// Fits the configured model and writes `report.json`, `parameters.tsv` and
/// `estimands.tsv`. Returns the human-readable tables.
pub fn cmd_estimate(path: &Path, overrides: &Overrides) -> Result<String> {
    let mut loaded = LoadedConfig::load(path)?;
    apply(&mut loaded, overrides);
    let config = &loaded.config;
    expect_mode(config, Mode::Estimate)?;
    let panel = load_data(&loaded)?;
    let validation = validate_panel(&panel);
    reject(&validation)?;
    let spec = mapping(config)?;
    let model = BlipModel::parse(&loaded.model_text()?)?;
    validate_specs(&config.estimands)?;
    let dir = out_dir(&loaded, overrides)?;

    let mapped = apply_mapping(&panel, &spec)?;
    let fit = solve_psi(&mapped, &model, &config.estimator)?;
    let estimates = evaluate_all(&config.estimands, &fit, &mapped, &model)?;
    let extra = config.variance.is_bootstrap().then(|| replicate_fn(&config.estimands));
    let variance = estimate_variance(
        &config.variance,
        &fit,
        &mapped,
        &model,
        &config.estimator,
        config.seed,
        extra.as_deref(),
    )?;
    let ses = variance.standard_errors();
    let cis = variance.confidence_intervals(fit.psi_slice(), config.level);
    let parameters: Vec<EstimandValue> = fit
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| EstimandValue {
            label: label.clone(),
            estimate: fit.psi[i],
            se: Some(ses[i]),
            ci: Some(cis[i]),
        })
        .collect();
    let estimands = estimand_se(&config.estimands, &estimates, &model, &variance, config.level)?;
    let cov = &variance.covariance;
    let report = EstimateReport {
        seed: config.seed,
        config,
        config_text: &loaded.text,
        data: summary(&panel, &mapped, &spec),
        level: config.level,
        variance: VarianceSummary {
            method: variance.method,
            tuning: variance.tuning.clone(),
            warnings: variance.warnings.clone(),
            covariance: (0..cov.nrows()).map(|r| cov.row(r).iter().copied().collect()).collect(),
        },
        diagnostics: &fit.diagnostics,
        parameters,
        estimands,
    };
    let params = value_tsv(&report.parameters);
    let est = value_tsv(&report.estimands);
    write(&dir, "report.json", &to_json(&report)?)?;
    write(&dir, "parameters.tsv", &params)?;
    write(&dir, "estimands.tsv", &est)?;
    let mut human = format!("parameters\n{params}");
    if !report.estimands.is_empty() {
        let _ = write!(human, "\nestimands\n{est}");
    }
    for w in report.diagnostics.warnings.iter().chain(&report.variance.warnings) {
        let _ = writeln!(human, "warning: {w}");
    }
    Ok(human)
}

fn summary(panel: &PanelDataset, mapped: &MappedPanel, spec: &MappingSpec) -> DataSummary {
    DataSummary {
        units: panel.n_units(),
        times: panel.n_times(),
        sampling_units: mapped.n(),
        structure: structure_name(panel),
        mapping: spec.name().to_string(),
        coordinates: panel.coordinates().is_some(),
    }
}

fn reject(validation: &ValidationReport) -> Result<()> {
    if validation.is_accepted() {
        return Ok(());
    }
    let msgs: Vec<String> = validation
        .errors
        .iter()
        .map(|i| format!("{} ({}): {}", i.code, i.location, i.message))
        .collect();
    Err(Error::Schema(msgs.join("; ")))
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    seed: u64,
    config: &'a RunConfig,
    config_text: &'a str,
    monte_carlo: MonteCarloReport,
    noise_check: Option<NoiseCheck>,
}

/// Runs the configured Monte Carlo study and writes `report.json` and
/// `table.tsv`.
pub fn cmd_simulate(path: &Path, overrides: &Overrides) -> Result<String> {
    let mut loaded = LoadedConfig::load(path)?;
    apply(&mut loaded, overrides);
    let config = &loaded.config;
    expect_mode(config, Mode::Simulate)?;
    let dgp = config.dgp.as_ref().ok_or_else(|| Error::Config("missing [dgp]".into()))?;
    let sim = config
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Config("missing [simulation]".into()))?;
    let mc = MonteCarloConfig {
        replicates: sim.replicates,
        seed: config.seed,
        estimator: config.estimator.clone(),
        variance: config.variance.clone(),
        level: config.level,
        max_failure_rate: sim.max_failure_rate,
    };
    let dir = out_dir(&loaded, overrides)?;
    let report = if sim.naive_comparison {
        naive_comparison(dgp, &mc)?
    } else {
        run_monte_carlo(dgp, &mc)?
    };
    let noise_check = match &sim.noise_check {
        Some(nc) => Some(noise_convention_check(nc.n, nc.replicates, config.seed)?),
        None => None,
    };
    let table = report.to_tsv();
    let mut human = format!(
        "{} design, {} replicates ({} failed), noise: {}\n{table}",
        report.design, report.replicates, report.failures, report.noise_reading
    );
    if let Some(nc) = &noise_check {
        let _ = writeln!(human, "noise reading closest to the reference spread: {}", nc.best);
    }
    let out = SimulateReport {
        seed: config.seed,
        config,
        config_text: &loaded.text,
        monte_carlo: report,
        noise_check,
    };
    write(&dir, "report.json", &to_json(&out)?)?;
    write(&dir, "table.tsv", &table)?;
    Ok(human)
}

#[derive(Debug, Serialize)]
struct ValidateReport {
    mode: Mode,
    panel: Option<ValidationReport>,
    units: Option<usize>,
    times: Option<usize>,
    structure: Option<&'static str>,
    parameters: Option<Vec<String>>,
}

/// Checks the config and, for estimation, the data and model, without
/// fitting. Returns a JSON summary.
pub fn cmd_validate(path: &Path) -> Result<String> {
    let loaded = LoadedConfig::load(path)?;
    let config = &loaded.config;
    let mut out = ValidateReport {
        mode: config.mode,
        panel: None,
        units: None,
        times: None,
        structure: None,
        parameters: None,
    };
    match config.mode {
        Mode::Estimate => {
            let panel = load_data(&loaded)?;
            let validation = validate_panel(&panel);
            let spec = mapping(config)?;
            let model = BlipModel::parse(&loaded.model_text()?)?;
            validate_specs(&config.estimands)?;
            reject(&validation)?;
            apply_mapping(&panel, &spec)?;
            out.units = Some(panel.n_units());
            out.times = Some(panel.n_times());
            out.structure = Some(structure_name(&panel));
            out.parameters = Some(model.labels().to_vec());
            out.panel = Some(validation);
        }
        Mode::Simulate => {
            config.dgp.as_ref().ok_or_else(|| Error::Config("missing [dgp]".into()))?;
            let sim = config
                .simulation
                .as_ref()
                .ok_or_else(|| Error::Config("missing [simulation]".into()))?;
            if sim.replicates < 2 {
                return Err(Error::Config(format!("need at least 2 replicates, got {}", sim.replicates)));
            }
        }
        Mode::Generate => {
            config.dgp.as_ref().ok_or_else(|| Error::Config("missing [dgp]".into()))?;
        }
    }
    to_json(&out)
}

/// Draws one data set from the configured design and writes `panel.csv`
/// (columns `unit,time,a,y` plus `cluster` or `x_km,y_km` when present) and,
/// for network designs, `graph.txt`.
pub fn cmd_generate(path: &Path, overrides: &Overrides) -> Result<String> {
    let mut loaded = LoadedConfig::load(path)?;
    apply(&mut loaded, overrides);
    let config = &loaded.config;
    expect_mode(config, Mode::Generate)?;
    let dgp = config.dgp.as_ref().ok_or_else(|| Error::Config("missing [dgp]".into()))?;
    let dir = out_dir(&loaded, overrides)?;
    let mapped = dgp.generate(config.seed)?;
    let panel = mapped.panel();
    let mut schema = PanelSchema::new("unit", "time", "a", "y");
    if panel.clusters().is_some() {
        schema.cluster = Some("cluster".into());
    }
    if panel.coordinates().is_some() {
        schema.x = Some("x_km".into());
        schema.y = Some("y_km".into());
    }
    write(&dir, "panel.csv", &write_panel(panel, &schema)?)?;
    let mut files = vec!["panel.csv"];
    if let Some(g) = panel.graph() {
        let mut text = String::new();
        for i in 0..g.len() {
            for &j in g.neighbors(i) {
                if i < j {
                    let _ = writeln!(text, "{} {}", panel.units()[i], panel.units()[j]);
                }
            }
        }
        write(&dir, "graph.txt", &text)?;
        files.push("graph.txt");
    }
    Ok(format!(
        "{} design: {} units, {} times; wrote {} to {}\n",
        dgp.name(),
        panel.n_units(),
        panel.n_times(),
        files.join(", "),
        dir.display()
    ))
}
