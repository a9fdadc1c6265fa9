use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use predprop::data::{normalize, Dataset, NormalizationMode, NormalizationParams};
use predprop::oracle::{
    compare_with_backprop, gradient_suite, random_equivalence_case, Fault, GradCheckReport,
};
use predprop::train::{evaluate, infer, write_metrics_csv, Metrics};
use predprop::{build_network, load_checkpoint, save_checkpoint, train, Activation, Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{GeneratorSpec, RunConfig};

pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const CHECK_REPORT_FILE: &str = "check_report.json";

/// 3 for numerical aborts, 2 for everything else that is an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::NotSpd(_) | Error::StaleErrors => 3,
        _ => 2,
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_normalization(path: &Path) -> Result<NormalizationParams> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Summary {
    epochs: usize,
    steps: usize,
    final_energy: Option<f64>,
    train: Metrics,
    test: Option<Metrics>,
}

/// One training run; writes checkpoint, metrics CSV, report JSON and, when
/// normalising, the normalisation parameters.
pub fn train_run(config: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let out = &config.output;
    fs::create_dir_all(&out.dir)?;
    let data = config.data.load(config.seed)?;
    let (train_set, test_set) = if config.data.test_fraction > 0.0 {
        let (a, b) = data.split(config.data.test_fraction, config.seed)?;
        (a, Some(b))
    } else {
        (data, None)
    };
    let (train_set, params) = normalize(&train_set, config.data.normalize)?;
    for w in &params.warnings {
        eprintln!("warning: {w}");
    }
    let test_set = test_set.map(|mut t| {
        t.features = params.apply(&t.features);
        t
    });
    if config.data.normalize != NormalizationMode::None {
        write_json(&out.path(NORMALIZATION_FILE), &params)?;
    }
    let label_dim = train_set.labels.as_ref().map_or(0, |l| l.ncols());
    let mut net = match &config.network.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => build_network(config.network_spec(train_set.features.ncols(), label_dim)?)?,
    };
    let training = &config.training;
    let train_start = Instant::now();
    let report = train(&mut net, &train_set, training)?;
    let train_secs = train_start.elapsed().as_secs_f64();

    save_checkpoint(&net, out.path(&out.checkpoint))?;
    let mut csv = Vec::new();
    write_metrics_csv(&report, net.depth(), &mut csv)?;
    fs::write(out.path(&out.metrics), csv)?;

    let train_metrics = evaluate(&net, &train_set, training)?;
    let test_metrics = test_set.as_ref().map(|t| evaluate(&net, t, training)).transpose()?;
    let summary = Summary {
        epochs: report.epochs.len(),
        steps: report.steps.len(),
        final_energy: report.epochs.last().map(|e| e.mean_energy),
        train: train_metrics,
        test: test_metrics,
    };
    let doc = json!({
        "resolved_config": config,
        "git_describe": git_describe(),
        "seed": config.seed,
        "summary_metrics": summary,
        "timings": {"train_secs": train_secs, "total_secs": start.elapsed().as_secs_f64()},
    });
    write_json(&out.path(&out.report), &doc)?;
    eprintln!(
        "trained {} epochs ({} steps) in {train_secs:.2}s; outputs in {}",
        summary.epochs,
        summary.steps,
        out.dir.display()
    );
    Ok(())
}

/// Runs each seed into `<out>/seed-<s>` on a pool of `jobs` threads.
/// Returns the worst exit code.
pub fn train_seeds(base: &RunConfig, seeds: &[u64], jobs: usize) -> i32 {
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            c.training.seed = s;
            c.output.dir = base.output.dir.join(format!("seed-{s}"));
            c
        })
        .collect();
    let run = |c: &RunConfig| match train_run(c) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error (seed {}): {e}", c.seed);
            exit_code(&e)
        }
    };
    #[cfg(feature = "parallel")]
    let codes: Vec<i32> = {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
            Ok(pool) => pool.install(|| configs.par_iter().map(run).collect()),
            Err(e) => {
                eprintln!("error: cannot start {jobs} workers: {e}");
                return 2;
            }
        }
    };
    #[cfg(not(feature = "parallel"))]
    let codes: Vec<i32> = {
        let _ = jobs;
        configs.iter().map(run).collect()
    };
    codes.into_iter().max().unwrap_or(0)
}

fn load_features(path: &Path, normalization: Option<&Path>) -> Result<Dataset> {
    let mut data = predprop::data::load_csv(path)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} has no rows", path.display())));
    }
    if let Some(p) = normalization {
        data.features = read_normalization(p)?.apply(&data.features);
    }
    Ok(data)
}

/// Writes the inferred readout-layer activities and per-datum energies.
pub fn infer_cmd(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    normalization: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let data = load_features(data, normalization)?;
    let result = infer(&net, &data.features, &config.training)?;
    let readout = result.readout(net.spec().orientation);
    let mut text = String::new();
    let header: Vec<String> = (0..readout.ncols())
        .map(|i| format!("cause_{i}"))
        .chain(std::iter::once("energy".into()))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for (row, energy) in readout.rows().into_iter().zip(result.per_datum_energy.iter()) {
        let cells: Vec<String> = row.iter().chain(std::iter::once(energy)).map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn eval_cmd(
    config: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    normalization: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let dataset = match data {
        Some(p) => load_features(p, normalization)?,
        None => {
            let mut d = config.data.load(config.seed)?;
            if let Some(p) = normalization {
                d.features = read_normalization(p)?.apply(&d.features);
            }
            d
        }
    };
    let metrics = evaluate(&net, &dataset, &config.training)?;
    let doc = json!({"checkpoint": checkpoint, "metrics": metrics});
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))?;
    println!("{text}");
    if let Some(p) = out {
        write_json(p, &doc)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FamilyResult {
    family: String,
    nets: usize,
    threshold: f64,
    below_threshold: usize,
    undefined: usize,
    unconverged: usize,
    min_cosine: f64,
    pass: bool,
}

fn equivalence_family(config: &RunConfig, family: &str, depth: fn(u64) -> usize, hidden: Activation, threshold: f64) -> Result<FamilyResult> {
    let c = &config.check;
    let eq = c.equivalence_config();
    let seeds: Vec<u64> = (0..c.equivalence_nets as u64).map(|s| config.seed + s).collect();
    let reports = predprop::par::map_collect(&seeds, |&s| {
        let (net, x, t) = random_equivalence_case(s, depth(s), hidden, c.output_error)?;
        compare_with_backprop(&net, &x, &t, &eq)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut r = FamilyResult {
        family: family.into(),
        nets: reports.len(),
        threshold,
        below_threshold: 0,
        undefined: 0,
        unconverged: 0,
        min_cosine: 1.0,
        pass: true,
    };
    for rep in &reports {
        if rep.gaps.iter().any(|g| g.cosine.is_none() && !g.exact_match) {
            r.undefined += 1;
        }
        if !rep.converged {
            r.unconverged += 1;
        }
        let m = rep.min_cosine();
        r.min_cosine = r.min_cosine.min(m);
        if m < threshold {
            r.below_threshold += 1;
        }
    }
    r.pass = r.below_threshold == 0 && r.unconverged == 0;
    Ok(r)
}

/// Gradient oracle and backprop comparison on seeded random networks.
/// Returns 0 when everything passes, 1 otherwise.
pub fn check_cmd(config: &RunConfig, fault: bool) -> Result<i32> {
    let c = &config.check;
    fs::create_dir_all(&config.output.dir)?;
    let seeds: Vec<u64> = (0..c.gradient_nets as u64).map(|s| config.seed + s).collect();
    let mut grad = c.grad_config();
    if fault {
        grad.fault = Some(Fault::ScaleWeightGradient {
            gap: 0,
            sublayer: 0,
            factor: 1.1,
        });
    }
    let reports: Vec<GradCheckReport> = gradient_suite(&seeds, &c.net_config(), &grad)?;
    let failing: Vec<u64> = seeds.iter().zip(&reports).filter(|(_, r)| !r.pass).map(|(s, _)| *s).collect();
    let excluded: usize = reports.iter().map(|r| r.excluded).sum();
    let worst = reports
        .iter()
        .flat_map(|r| r.variables.iter().map(|v| v.max_rel_error))
        .fold(0.0, f64::max);
    let mut pass = failing.is_empty();
    eprintln!(
        "gradient oracle: {}/{} nets pass (tolerance {:e}), worst relative error {worst:.3e}; {excluded} coordinates within {} of a relu kink excluded",
        reports.len() - failing.len(),
        reports.len(),
        c.tolerance,
        c.kink_radius
    );
    for (s, r) in seeds.iter().zip(&reports).filter(|(_, r)| !r.pass).take(5) {
        eprintln!("  seed {s}: culprit {}", r.culprit.as_deref().unwrap_or("?"));
    }

    let mut families = Vec::new();
    if c.equivalence {
        families.push(equivalence_family(config, "linear", |s| 2 + (s % 2) as usize, Activation::Linear, c.linear_threshold)?);
        families.push(equivalence_family(config, "relu", |s| 2 + (s % 2) as usize, Activation::Relu, c.relu_threshold)?);
        families.push(equivalence_family(config, "single_gap", |_| 1, Activation::Linear, 1.0 - 1e-12)?);
        for f in &families {
            eprintln!(
                "backprop comparison ({}): {}/{} below cosine {}, {} undefined, {} unconverged, min cosine {:.4}",
                f.family, f.below_threshold, f.nets, f.threshold, f.undefined, f.unconverged, f.min_cosine
            );
            pass &= f.pass;
        }
    }
    let doc = json!({
        "resolved_config": config,
        "git_describe": git_describe(),
        "seed": config.seed,
        "fault_injected": fault,
        "gradient": {
            "nets": reports.len(),
            "failing_seeds": failing,
            "excluded_coordinates": excluded,
            "worst_relative_error": worst,
            "reports": reports,
        },
        "equivalence": families,
        "pass": pass,
    });
    write_json(&config.output.path(CHECK_REPORT_FILE), &doc)?;
    eprintln!("check {}", if pass { "passed" } else { "FAILED" });
    Ok(if pass { 0 } else { 1 })
}

/// Parameters for `gen-data`; unset fields take per-generator defaults.
#[derive(Clone, Debug, Default)]
pub struct GenParams {
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub n_per_cluster: Option<usize>,
    pub separation: Option<f64>,
    pub sigma: Option<f64>,
}

pub fn generator_from_name(name: &str, p: &GenParams) -> Result<GeneratorSpec> {
    Ok(match name {
        "xor" => GeneratorSpec::Xor {
            n: p.n.unwrap_or(100),
            noise: p.noise.unwrap_or(0.0),
        },
        "gaussian_clusters" | "clusters" => GeneratorSpec::GaussianClusters {
            k: p.k.unwrap_or(2),
            d: p.d.unwrap_or(2),
            n_per_cluster: p.n_per_cluster.unwrap_or(100),
            separation: p.separation.unwrap_or(10.0),
            sigma: p.sigma.unwrap_or(1.0),
        },
        "two_factor" => GeneratorSpec::TwoFactor { n: p.n.unwrap_or(200) },
        other => {
            return Err(Error::Config(format!(
                "unknown generator {other:?} (expected xor, gaussian_clusters or two_factor)"
            )))
        }
    })
}

pub fn gen_data_cmd(name: &str, params: &GenParams, seed: u64, out: &PathBuf) -> Result<()> {
    let dataset = generator_from_name(name, params)?.generate(seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    predprop::data::save_csv(&dataset, out)
}
