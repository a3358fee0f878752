//! The four subcommand bodies.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ecoate::estimators::{
    aipw_with_options, fused_estimate, meta_ivw_sites, naive_fusion, oracle_pooled,
    EstimateReport,
};
use ecoate::expr::BasisVector;
use ecoate::federation::{
    run_source_node, run_target_node, FailurePolicy, FuseWeighting, ProtocolConfig,
    SourceInput,
};
use ecoate::simlab::{
    metrics_by_epsilon, read_rows, render_svg, render_table, run_monte_carlo, write_rows,
    EstimatorKind, SimScenario, DEFAULT_EPSILON_GRID,
};

use crate::config::{resolve, resolve_opt, FileConfig};
use crate::data::read_site_csv;
use crate::{CliError, EstimateArgs, FedArgs, FedRole, ReportArgs, SimulateArgs};

fn parse_weighting(s: &str) -> Result<FuseWeighting, CliError> {
    match s {
        "uniform" => Ok(FuseWeighting::Uniform),
        "size" => Ok(FuseWeighting::Size),
        other => Err(CliError::Usage(format!(
            "unknown weighting `{other}` (want uniform or size)"
        ))),
    }
}

fn parse_failure(s: &str) -> Result<FailurePolicy, CliError> {
    match s {
        "exclude" => Ok(FailurePolicy::Exclude),
        "abort" => Ok(FailurePolicy::Abort),
        other => Err(CliError::Usage(format!(
            "unknown failure policy `{other}` (want exclude or abort)"
        ))),
    }
}

fn protocol_config(
    weighting: Option<String>,
    on_failure: Option<String>,
    sieve_degree: Option<usize>,
    bandwidth: Option<f64>,
) -> Result<ProtocolConfig, CliError> {
    let mut cfg = ProtocolConfig {
        sieve_degree,
        bandwidth,
        ..ProtocolConfig::default()
    };
    if let Some(w) = weighting {
        cfg.weighting = parse_weighting(&w)?;
    }
    if let Some(p) = on_failure {
        cfg.on_source_failure = parse_failure(&p)?;
    }
    Ok(cfg)
}

fn log_config(value: serde_json::Value) {
    eprintln!("[ecoate] config {value}");
}

fn emit_report(report: &EstimateReport, out: Option<&PathBuf>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Run(format!("serializing report: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n"))
            .map_err(|e| CliError::Run(format!("writing {}: {e}", path.display())))?;
        eprintln!("[ecoate] report written to {}", path.display());
    }
    Ok(())
}

pub fn run_simulate(
    args: SimulateArgs,
    file: &FileConfig,
    verbose: u8,
) -> Result<(), CliError> {
    let flag_eps = (!args.epsilon.is_empty()).then_some(args.epsilon.clone());
    let mut epsilons = resolve(
        flag_eps,
        file.epsilons.clone(),
        DEFAULT_EPSILON_GRID.to_vec(),
    );
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();

    let (n_default, reps_default) = if args.full { (2000, 1000) } else { (500, 200) };
    let n = resolve(args.n, file.n, n_default);
    let reps = resolve(args.reps, file.reps, reps_default);
    let seed = resolve(args.seed, file.seed, 7);
    let workers = resolve(args.workers, file.workers, 1);
    let overparam = args.overparam || file.overparam.unwrap_or(false);
    let weighting = match resolve_opt(args.weighting.clone(), file.weighting.clone()) {
        Some(w) => parse_weighting(&w)?,
        None => FuseWeighting::Uniform,
    };
    let estimator_names =
        resolve_opt(args.estimators.clone(), file.estimators.clone());
    let estimators: Vec<EstimatorKind> = match &estimator_names {
        Some(names) => names
            .iter()
            .map(|s| EstimatorKind::parse(s).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?,
        None => EstimatorKind::all(),
    };
    let out = resolve(args.out, file.out.clone(), PathBuf::from("results.csv"));

    log_config(serde_json::json!({
        "command": "simulate",
        "epsilons": epsilons,
        "n_per_site": n,
        "replications": reps,
        "seed": seed,
        "workers": workers,
        "estimators": estimators.iter().map(|k| k.label()).collect::<Vec<_>>(),
        "overparam": overparam,
        "weighting": weighting.label(),
        "out": out.display().to_string(),
    }));

    let mut rows = Vec::new();
    for &epsilon in &epsilons {
        let scn = SimScenario {
            epsilon,
            n_per_site: n,
            base_seed: seed,
            estimators: estimators.clone(),
            overparam,
            weighting,
        };
        let t0 = Instant::now();
        let batch = run_monte_carlo(&scn, reps, workers)?;
        if verbose > 0 {
            eprintln!(
                "[ecoate] epsilon {epsilon}: {} rows in {:.1?}",
                batch.len(),
                t0.elapsed()
            );
        }
        rows.extend(batch);
    }
    write_rows(&out, &rows)?;
    println!(
        "wrote {} rows ({} scenarios x {} replications) to {}",
        rows.len(),
        epsilons.len(),
        reps,
        out.display()
    );
    Ok(())
}

pub fn run_fed(args: FedArgs, file: &FileConfig) -> Result<(), CliError> {
    let timeout = Duration::from_secs(resolve(args.timeout_secs, file.timeout_secs, 60));
    match args.role {
        FedRole::Target => {
            let site = args.site_id.unwrap_or(0);
            let data = read_site_csv(&args.data, site)?;
            let expect = args.expect_sources.clone().ok_or_else(|| {
                CliError::Usage("target role needs --expect-sources".into())
            })?;
            if expect.is_empty() || expect.contains(&site) {
                return Err(CliError::Usage(
                    "--expect-sources must list distinct non-target site ids".into(),
                ));
            }
            let cfg = protocol_config(
                resolve_opt(args.weighting.clone(), file.weighting.clone()),
                resolve_opt(args.on_failure.clone(), file.on_failure.clone()),
                resolve_opt(args.sieve_degree, file.sieve_degree),
                resolve_opt(args.bandwidth, file.bandwidth),
            )?;
            log_config(serde_json::json!({
                "command": "fed-run",
                "role": "target",
                "dir": args.dir.display().to_string(),
                "data": args.data.display().to_string(),
                "site_id": site,
                "expect_sources": expect,
                "timeout_secs": timeout.as_secs(),
                "weighting": cfg.weighting.label(),
                "sieve_degree": cfg.sieve_degree,
                "bandwidth": cfg.bandwidth,
            }));
            let report = run_target_node(&args.dir, &data, &expect, &cfg, timeout)?;
            emit_report(&report, args.out.as_ref())
        }
        FedRole::Source => {
            let site = args.site_id.ok_or_else(|| {
                CliError::Usage("source role needs --site-id".into())
            })?;
            let data = read_site_csv(&args.data, site)?;
            let xi = match args.xi.as_deref() {
                None | Some("") | Some("none") => None,
                Some(expr) => Some(
                    BasisVector::parse_list(expr, data.dim())
                        .map_err(|e| CliError::Usage(e.to_string()))?,
                ),
            };
            log_config(serde_json::json!({
                "command": "fed-run",
                "role": "source",
                "dir": args.dir.display().to_string(),
                "data": args.data.display().to_string(),
                "site_id": site,
                "xi": args.xi,
                "timeout_secs": timeout.as_secs(),
            }));
            run_source_node(&args.dir, &data, xi.as_ref(), timeout)?;
            println!("source {site} done");
            Ok(())
        }
    }
}

pub fn run_estimate(args: EstimateArgs, file: &FileConfig) -> Result<(), CliError> {
    if args.xi.len() > args.source.len() {
        return Err(CliError::Usage(format!(
            "{} tilt bases given for {} sources",
            args.xi.len(),
            args.source.len()
        )));
    }
    let target = read_site_csv(&args.target, 0)?;
    let mut sources = Vec::new();
    let mut bases = Vec::new();
    for (i, path) in args.source.iter().enumerate() {
        let data = read_site_csv(path, (i + 1) as u32)?;
        if data.dim() != target.dim() {
            return Err(CliError::Run(format!(
                "{} has {} covariates but the target has {}",
                path.display(),
                data.dim(),
                target.dim()
            )));
        }
        let xi = match args.xi.get(i).map(String::as_str) {
            None | Some("") | Some("none") => None,
            Some(expr) => Some(
                BasisVector::parse_list(expr, target.dim())
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            ),
        };
        sources.push(data);
        bases.push(xi);
    }
    let inputs: Vec<SourceInput<'_>> = sources
        .iter()
        .zip(&bases)
        .map(|(data, xi)| SourceInput {
            data,
            xi: xi.as_ref(),
        })
        .collect();

    let cfg = protocol_config(
        resolve_opt(args.weighting.clone(), file.weighting.clone()),
        resolve_opt(args.on_failure.clone(), file.on_failure.clone()),
        resolve_opt(args.sieve_degree, file.sieve_degree),
        resolve_opt(args.bandwidth, file.bandwidth),
    )?;
    let kind = args
        .estimator
        .as_deref()
        .map(|s| EstimatorKind::parse(s).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;

    log_config(serde_json::json!({
        "command": "estimate",
        "target": args.target.display().to_string(),
        "sources": args.source.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "xi": args.xi,
        "estimator": kind.map_or("eco-ate", |k| k.label()),
        "weighting": cfg.weighting.label(),
        "sieve_degree": cfg.sieve_degree,
        "bandwidth": cfg.bandwidth,
    }));

    let subset = |k: usize| -> Result<Vec<SourceInput<'_>>, CliError> {
        if k > inputs.len() {
            return Err(CliError::Usage(format!(
                "estimator eco-ate-{k} needs at least {k} sources, got {}",
                inputs.len()
            )));
        }
        Ok(vec![inputs[k - 1]])
    };
    let report = match kind {
        None => fused_estimate("eco-ate", &target, &inputs, &cfg)?,
        Some(EstimatorKind::EcoAteAll) => {
            fused_estimate("eco-ate-all", &target, &inputs, &cfg)?
        }
        Some(EstimatorKind::EcoAte1) => {
            fused_estimate("eco-ate-1", &target, &subset(1)?, &cfg)?
        }
        Some(EstimatorKind::EcoAte2) => {
            fused_estimate("eco-ate-2", &target, &subset(2)?, &cfg)?
        }
        Some(EstimatorKind::EcoAte3) => {
            fused_estimate("eco-ate-3", &target, &subset(3)?, &cfg)?
        }
        Some(EstimatorKind::Aipw) => {
            aipw_with_options(&target, cfg.sieve_degree, cfg.bandwidth)?
        }
        Some(EstimatorKind::NaiveFusion) => naive_fusion(&target, &inputs, &cfg)?,
        Some(EstimatorKind::Oracle) => oracle_pooled(&target, &inputs, &cfg)?,
        Some(EstimatorKind::MetaIvw) => meta_ivw_sites(&target, &inputs)?,
    };
    emit_report(&report, args.out.as_ref())
}

pub fn run_report(args: ReportArgs, file: &FileConfig) -> Result<(), CliError> {
    let truth = resolve(args.truth, file.truth, 1.0);
    let svg_path = resolve(
        args.svg,
        file.svg.clone(),
        args.rows.with_extension("svg"),
    );
    log_config(serde_json::json!({
        "command": "report",
        "rows": args.rows.display().to_string(),
        "truth": truth,
        "svg": svg_path.display().to_string(),
    }));
    let rows = read_rows(&args.rows)?;
    if rows.is_empty() {
        return Err(CliError::Run(format!(
            "{} holds no result rows",
            args.rows.display()
        )));
    }
    let groups = metrics_by_epsilon(&rows, truth)?;
    print!("{}", render_table(&groups));
    std::fs::write(&svg_path, render_svg(&groups))
        .map_err(|e| CliError::Run(format!("writing {}: {e}", svg_path.display())))?;
    eprintln!("[ecoate] figure written to {}", svg_path.display());
    Ok(())
}
