use std::path::PathBuf;
use std::time::Instant;

use echo_imager::experiments::{
    analytic_separation_fi, echo_verify, fitted_exponent, rayleigh_sweep, replicate, separation_model, MleOptions,
    ReplicationPlan, RNG_ALGORITHM,
};
use echo_imager::fisher::{classical_fi, fisher_matrix, table1_grid, FiOptions, ProbeClass, Table1Row};
use echo_imager::modes::MutualCoherenceMatrix;
use echo_imager::protocols::{noise_derivative_matrix, probe_distribution};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Experiment, ScenarioConfig};
use crate::error::CliError;
use crate::output::{atomic_write, write_tables, Format, Summary, Table};

/// Where and how results are written.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub format: Format,
}

/// Tables plus a JSON digest of the headline numbers.
pub struct Outcome {
    pub tables: Vec<Table>,
    pub results: Value,
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn table1(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let t = &cfg.table1;
    let rows = table1_grid(&t.n_s, &t.rates, t.separation, t.oracle)?;
    let unit = "1/(param^2 trial)";
    let mut table = Table::new(
        "table1",
        &[
            ("task", "text"),
            ("probe", "text"),
            ("n_s", "photons"),
            ("rate", "1/trial"),
            ("separation", "sigma"),
            ("reference", unit),
            ("achieved", unit),
            ("ratio", "1"),
            ("achieved_fock", unit),
            ("fock_ratio", "1"),
            ("oracle_qfi", unit),
            ("oracle_error", unit),
            ("oracle_ratio", "1"),
        ],
    );
    for r in &rows {
        table.push(vec![
            r.task.label().into(),
            r.probe.label().into(),
            r.n_s.into(),
            r.rate.into(),
            r.separation.into(),
            r.reference.into(),
            r.achieved.into(),
            r.ratio().into(),
            r.achieved_fock.into(),
            r.fock_ratio().into(),
            r.oracle_qfi.into(),
            r.oracle_error.into(),
            r.oracle_qfi.map(|q| q / r.reference).into(),
        ]);
    }
    let worst = rows
        .iter()
        .map(|r| {
            let f = r.fock_ratio().map_or(0.0, |f| (f - 1.0).abs());
            (r.ratio() - 1.0).abs().max(f)
        })
        .fold(0.0, f64::max);
    let ordered = rows.iter().filter(|r| r.probe == ProbeClass::Coherent).all(|c| {
        let opt: Vec<&Table1Row> = rows
            .iter()
            .filter(|o| o.task == c.task && o.probe == ProbeClass::Optimal && o.n_s == c.n_s && o.rate == c.rate)
            .collect();
        opt.iter().all(|o| c.reference < o.reference)
    });
    Ok(Outcome {
        tables: vec![table],
        results: json!({ "rows": rows.len(), "max_ratio_deviation": worst, "coherent_below_optimal": ordered }),
    })
}

pub fn echo_verify_cmd(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let opts = echo_imager::experiments::EchoVerifyOptions { seed: cfg.run.seed, ..cfg.echo_verify };
    let rep = echo_verify(opts)?;
    let mut table = Table::new(
        "echo_verify",
        &[
            ("sample", "index"),
            ("r", "1"),
            ("norm_up", "1"),
            ("norm_down", "1"),
            ("first_order_discrepancy", "1"),
            ("residual", "1"),
            ("residual_half", "1"),
            ("ratio", "1"),
            ("oracle_gamma_up", "1/trial"),
            ("oracle_gamma_down", "1/trial"),
            ("oracle_cutoff", "photons"),
            ("oracle_residual", "probability"),
            ("oracle_residual_half", "probability"),
            ("oracle_ratio", "1"),
        ],
    );
    for (i, s) in rep.samples.iter().enumerate() {
        let r: Vec<String> = s.r.iter().map(|v| crate::output::format_number(*v)).collect();
        table.push(vec![
            i.into(),
            r.join(";").into(),
            s.norm_up.into(),
            s.norm_down.into(),
            s.first_order_discrepancy.into(),
            s.residual.into(),
            s.residual_half.into(),
            s.ratio().into(),
            s.oracle_rates.0.into(),
            s.oracle_rates.1.into(),
            s.oracle_cutoff.into(),
            s.oracle_residual.into(),
            s.oracle_residual_half.into(),
            s.oracle_ratio().into(),
        ]);
    }
    let exponent = |ratios: Vec<f64>| ratios.iter().map(|r| r.log2()).sum::<f64>() / ratios.len() as f64;
    let (lo, hi) = rep.ratio_range();
    let (olo, ohi) = rep.oracle_ratio_range();
    Ok(Outcome {
        results: json!({
            "samples": rep.samples.len(),
            "max_first_order_discrepancy": rep.max_first_order_discrepancy(),
            "zero_squeezing_residual": rep.zero_squeezing_residual,
            "block_leakage": rep.block_leakage,
            "halving_ratio_range": [lo, hi],
            "oracle_halving_ratio_range": [olo, ohi],
            "scaling_exponent": exponent(rep.samples.iter().map(|s| s.ratio()).collect()),
            "oracle_scaling_exponent": exponent(rep.samples.iter().map(|s| s.oracle_ratio()).collect()),
        }),
        tables: vec![table],
    })
}

pub fn sweep(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let settings = cfg.sweep_settings();
    let mut table = Table::new(
        "sweep",
        &[
            ("d_over_sigma", "1"),
            ("strategy", "text"),
            ("fi_analytic", "1/trial"),
            ("fi_numeric", "1/trial"),
            ("mle_variance", "sigma^2"),
            ("crb", "sigma^2"),
        ],
    );
    let mut exponents = serde_json::Map::new();
    for strategy in &cfg.sweep.strategies {
        info!("sweeping {}", strategy.label());
        let rows = rayleigh_sweep(*strategy, &cfg.sweep.d_over_sigma, &settings)?;
        if rows.len() >= 2 {
            exponents.insert(strategy.label().to_string(), json!(fitted_exponent(&rows)));
        }
        for r in rows {
            table.push(vec![
                r.d_over_sigma.into(),
                r.strategy.label().into(),
                r.fi_analytic.into(),
                r.fi_numeric.into(),
                r.mle_variance.into(),
                r.crb.into(),
            ]);
        }
    }
    Ok(Outcome {
        tables: vec![table],
        results: json!({ "fitted_exponents": exponents, "trials": settings.plan.trials, "replications": settings.plan.replications }),
    })
}

pub fn mle(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let settings = cfg.sweep_settings();
    let strategy = cfg.measurement.strategy;
    let model = separation_model(strategy, &settings)?;
    let d = cfg.scene.d_over_sigma;
    if d.is_nan() || d <= 0.0 {
        return Err(CliError::Config { path: "scene.d_over_sigma".into(), message: "must be positive for estimation".into() });
    }
    let plan = ReplicationPlan { trials: cfg.run.trials, replications: cfg.run.replications, seed: cfg.run.seed };
    let rep = replicate(model.as_ref(), &[d], &[(0.0, 4.0 * d + 1.0)], plan, MleOptions::default())?;
    let mut table = Table::new("mle", &[("replication", "index"), ("estimate", "sigma")]);
    for (i, s) in rep.samples.iter().enumerate() {
        table.push(vec![i.into(), s[0].into()]);
    }
    let leading = analytic_separation_fi(strategy, d, &settings)?;
    Ok(Outcome {
        tables: vec![table],
        results: json!({
            "strategy": strategy.label(),
            "truth": rep.truth,
            "mean_estimate": rep.estimates,
            "sample_variance": rep.sample_variance,
            "crb": rep.crb,
            "crb_leading_order": 1.0 / (plan.trials as f64 * leading),
            "efficiency": rep.efficiency(),
            "bias": rep.bias,
            "bias_consistent": rep.bias_consistent(),
            "non_converged": rep.non_converged,
            "runtime_s": rep.runtime_s,
        }),
    })
}

pub fn fisher(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let settings = cfg.sweep_settings();
    let strategy = cfg.measurement.strategy;
    let d = cfg.scene.d_over_sigma;
    let mut table = Table::new(
        "fisher",
        &[("quantity", "text"), ("value", "1/(param^2 trial)"), ("error_estimate", "1/(param^2 trial)"), ("method", "text")],
    );
    let model = separation_model(strategy, &settings)?;
    for (name, opts) in [("separation_leading_order", FiOptions::default()), ("separation_full", FiOptions::full())] {
        let fi = classical_fi(|t| model(&[t]), d, opts)?;
        table.push(vec![name.into(), fi.value.into(), fi.error_estimate.into(), label(&fi.method).into()]);
    }
    let analytic = analytic_separation_fi(strategy, d, &settings)?;
    table.push(vec!["separation_analytic".into(), analytic.into(), 0.0.into(), "analytic".into()]);
    let (up, down) = (cfg.scene.absorption, cfg.scene.emission);
    let mut results = json!({ "strategy": strategy.label(), "d_over_sigma": d, "separation_analytic": analytic });
    if up > 0.0 && down > 0.0 && !matches!(cfg.probe, echo_imager::ProbeConfig::Coherent { .. }) {
        let rates = |t: &[f64]| {
            probe_distribution(
                &MutualCoherenceMatrix::diagonal(&[t[0]]),
                &MutualCoherenceMatrix::diagonal(&[t[1]]),
                &cfg.probe,
                &cfg.noise,
            )
        };
        let fm = fisher_matrix(rates, &[up, down], FiOptions::default())?;
        for (name, (i, j)) in [("rates_up_up", (0, 0)), ("rates_up_down", (0, 1)), ("rates_down_down", (1, 1))] {
            table.push(vec![name.into(), fm.matrix[(i, j)].into(), 0.0.into(), "finite_difference".into()]);
        }
        results["rate_condition_number"] = json!(fm.condition_number());
        results["rate_rank"] = json!(fm.rank(1e-10));
    }
    Ok(Outcome { tables: vec![table], results })
}

pub fn noise_matrix(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let cells = noise_derivative_matrix(&cfg.noise_study)?;
    let mut table = Table::new(
        "noise_matrix",
        &[
            ("probe", "text"),
            ("source", "text"),
            ("d_absorption", "1/kappa"),
            ("d_fluorescence", "1/kappa"),
            ("absorption_robust", "bool"),
            ("fluorescence_robust", "bool"),
        ],
    );
    let mut pattern = Vec::new();
    for c in &cells {
        table.push(vec![
            label(&c.probe).into(),
            label(&c.source).into(),
            c.d_absorption.into(),
            c.d_fluorescence.into(),
            c.absorption_robust().into(),
            c.fluorescence_robust().into(),
        ]);
        pattern.push(json!({
            "probe": label(&c.probe),
            "source": label(&c.source),
            "absorption": if c.absorption_robust() { "robust" } else { "sensitive" },
            "fluorescence": if c.fluorescence_robust() { "robust" } else { "sensitive" },
        }));
    }
    Ok(Outcome { tables: vec![table], results: json!({ "pattern": pattern }) })
}

pub fn execute(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    match cfg.experiment {
        Experiment::RayleighSweep => sweep(cfg),
        Experiment::Mle => mle(cfg),
        Experiment::NoiseStudy => noise_matrix(cfg),
        Experiment::Table1 => table1(cfg),
        Experiment::EchoVerify => echo_verify_cmd(cfg),
        Experiment::Fisher => fisher(cfg),
    }
}

/// Runs `cfg`, writes its tables and `summary.json`, and returns the summary.
pub fn run_and_write(command: &str, cfg: &ScenarioConfig, ctx: &Context) -> Result<Summary, CliError> {
    let start = Instant::now();
    let outcome = execute(cfg)?;
    let mut outputs: Vec<String> =
        write_tables(&ctx.out, ctx.format, &outcome.tables)?.iter().map(|p| p.display().to_string()).collect();
    let summary_path = ctx.out.join("summary.json");
    outputs.push(summary_path.display().to_string());
    let summary = Summary {
        command: command.to_string(),
        version: crate::output::version(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        rng: RNG_ALGORITHM.to_string(),
        threads: rayon::current_num_threads(),
        runtime_s: start.elapsed().as_secs_f64(),
        outputs,
        results: outcome.results,
        config: serde_json::to_value(cfg).map_err(|e| CliError::Io(e.to_string()))?,
    };
    let bytes = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    atomic_write(&summary_path, &bytes)?;
    Ok(summary)
}
