use std::path::Path;
use std::time::Instant;

use tsbcf::calibration::{
    s_mu_from_elicitation, s_tau_calibrate, structural_heterogeneity_grid,
    structural_heterogeneity_ratio,
};
use tsbcf::data::{load_dataset, split_holdout, write_dataset, Column};
use tsbcf::estimands::{
    fit_the_fit, grouped_rr_projection, nnt_by_target, nnt_difference_distribution, rr_by_target,
    rr_draws, subgroup_posterior, summarize_with_sentinels, targeted_selection_pseudo_r2,
    treated_failure_excess, CartTree, RRDraws,
};
use tsbcf::persist::{
    load_draws, metrics_to_csv, read_manifest, save_draws, write_manifest, Manifest,
};
use tsbcf::propensity::{fit_propensity, with_propensity};
use tsbcf::sampler::{run_chains, FitProblem};
use tsbcf::simbench::{run_benchmark, BenchConfig};
use tsbcf::{Dataset, Error, ModelConfig, Result, RngStream, Schema};

use crate::config_file::FileConfig;
use crate::output::{fmt_row, write_rows};
use crate::{
    CalibrateArgs, FitArgs, PropensityArgs, SimulateArgs, SummarizeArgs,
};

/// Stream reserved for the propensity fit; chains use streams 0..k.
pub const PROPENSITY_STREAM: u64 = 1_000_000;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn require_schema(cfg: &FileConfig) -> Result<Schema> {
    cfg.schema
        .clone()
        .ok_or_else(|| Error::InvalidConfig("configuration is missing a [schema] table".into()))
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn config_echo(model: &ModelConfig, extra: &[(&str, String)]) -> String {
    let mut echo = toml::to_string(model).unwrap_or_default();
    for (k, v) in extra {
        echo.push_str(&format!("{k} = {v}\n"));
    }
    echo
}

/// Attaches propensity scores, fitting them when the data carries none.
fn propensity_step(
    d: Dataset,
    cfg: &FileConfig,
    seed: u64,
) -> Result<(Dataset, bool)> {
    if d.pi_hat.is_some() {
        return Ok((d, false));
    }
    let prop_cfg = cfg.propensity_config()?;
    eprintln!(
        "fitting propensity scores ({} trees, {}+{} iterations)",
        prop_cfg.n_mu, prop_cfg.n_burn, prop_cfg.n_draws
    );
    let fit = fit_propensity(&d, &prop_cfg, RngStream::new(seed, PROPENSITY_STREAM))?;
    Ok((with_propensity(&d, fit.pi_hat)?, true))
}

pub fn run_fit(args: &FitArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = FileConfig::load_layered(&args.config)?;
    let schema = require_schema(&cfg)?;
    let mut model = cfg.model_config()?;
    if let Some(seed) = args.seed.or(cfg.run.seed) {
        model.seed = seed;
    }
    if let Some(b) = args.burn {
        model.n_burn = b;
    }
    if let Some(d) = args.draws {
        model.n_draws = d;
    }
    model.validate()?;
    let chains = args.chains.or(cfg.run.chains).unwrap_or(1);
    let seed = model.seed;

    if !args.data.exists() {
        return Err(Error::InvalidArgument(format!(
            "dataset not found: {}",
            args.data.display()
        )));
    }
    let d = load_dataset(&args.data, &schema)?;
    let (d, fitted_propensity) = propensity_step(d, &cfg, seed)?;

    // Treatment-scale calibration on a holdout unless the config pins s_tau.
    let mut calibrated = false;
    let fit_data = if cfg.fixes_s_tau() {
        d
    } else {
        let m = cfg.run.holdout.unwrap_or(500).min(d.n() / 2);
        if m == 0 {
            eprintln!("dataset too small for calibration; keeping default s_tau");
            d
        } else {
            let (train, holdout) = split_holdout(&d, m, seed)?;
            let cal = s_tau_calibrate(&holdout, model.s_mu);
            if cal.fallback {
                eprintln!("warning: degenerate holdout, falling back to s_tau = s_mu/2");
            }
            eprintln!("calibrated s_tau = {} (holdout size {m})", cal.s_tau);
            model.s_tau = cal.s_tau;
            calibrated = true;
            train
        }
    };

    let problem = FitProblem::causal(&fit_data)?;
    eprintln!(
        "running {chains} chain(s): {} + {}x{} iterations, n = {}",
        model.n_burn,
        model.n_draws,
        model.thin,
        fit_data.n()
    );
    let draws = run_chains(&problem, &model, seed, 0, chains)?;

    ensure_out_dir(&args.out)?;
    let mut outputs = save_draws(&args.out, &draws)?;

    // The fitted dataset (post-propensity, post-holdout) for summarize.
    let mut out_schema = schema.clone();
    if out_schema.propensity.is_none() {
        out_schema.propensity = Some("__propensity".into());
    }
    write_dataset(&args.out.join("fit_data.csv"), &fit_data, &out_schema)?;
    outputs.push("fit_data.csv".into());
    std::fs::write(
        args.out.join("fit_schema.toml"),
        toml::to_string(&out_schema).unwrap_or_default(),
    )?;
    outputs.push("fit_schema.toml".into());

    write_manifest(
        &args.out,
        &Manifest {
            command: "fit".into(),
            version: VERSION.into(),
            seed,
            config_echo: config_echo(
                &model,
                &[
                    ("chains", chains.to_string()),
                    ("calibrated_s_tau", calibrated.to_string()),
                    ("fitted_propensity", fitted_propensity.to_string()),
                ],
            ),
            inputs: vec![args.data.display().to_string()],
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
            accept_rate_mu: draws.accept_rate_mu,
            accept_rate_tau: draws.accept_rate_tau,
        },
    )?;
    Ok(())
}

fn load_fit_dataset(args: &SummarizeArgs) -> Result<Dataset> {
    match (&args.data, &args.config.is_empty()) {
        (Some(data), _) if !args.config.is_empty() => {
            let cfg = FileConfig::load_layered(&args.config)?;
            load_dataset(data, &require_schema(&cfg)?)
        }
        (Some(_), _) => Err(Error::InvalidConfig(
            "--data requires --config with a [schema] table".into(),
        )),
        (None, _) => {
            let schema_text = std::fs::read_to_string(args.fit.join("fit_schema.toml"))?;
            let schema: Schema = toml::from_str(&schema_text).map_err(|e| Error::Parse {
                path: "fit_schema.toml".into(),
                message: e.to_string(),
            })?;
            load_dataset(&args.fit.join("fit_data.csv"), &schema)
        }
    }
}

/// Units whose target value lies in the requested window.
fn select_window(d: &Dataset, t_min: Option<f64>, t_max: Option<f64>) -> Vec<usize> {
    (0..d.n())
        .filter(|&i| {
            let t = d.t_value(i);
            t_min.is_none_or(|lo| t >= lo) && t_max.is_none_or(|hi| t <= hi)
        })
        .collect()
}

fn parse_projection(spec: &str) -> Result<(String, Option<Vec<f64>>)> {
    match spec.split_once(':') {
        None => Ok((spec.to_string(), None)),
        Some((col, cuts)) => {
            let cuts: Vec<f64> = cuts
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad cut `{c}` in projection")))
                })
                .collect::<Result<_>>()?;
            Ok((col.to_string(), Some(cuts)))
        }
    }
}

fn projection_groups(
    d: &Dataset,
    col_name: &str,
    cuts: Option<Vec<f64>>,
) -> Result<Vec<(String, Vec<usize>)>> {
    let col = d
        .x
        .cols
        .iter()
        .find(|c| c.name() == col_name)
        .ok_or_else(|| Error::MissingColumn(col_name.to_string()))?;
    match col.as_ref() {
        Column::Categorical { codes, levels, .. } => Ok(levels
            .iter()
            .enumerate()
            .map(|(c, level)| {
                let members: Vec<usize> =
                    (0..d.n()).filter(|&i| codes[i] == c as u32).collect();
                (format!("{col_name}={level}"), members)
            })
            .filter(|(_, m)| !m.is_empty())
            .collect()),
        Column::Continuous { values, .. } => {
            let mut cuts = cuts.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "continuous projection column `{col_name}` needs cut points (col:c1,c2,...)"
                ))
            })?;
            cuts.sort_by(|a, b| a.total_cmp(b));
            let mut groups = Vec::new();
            for band in 0..=cuts.len() {
                let lo = if band == 0 { f64::NEG_INFINITY } else { cuts[band - 1] };
                let hi = if band == cuts.len() { f64::INFINITY } else { cuts[band] };
                let members: Vec<usize> = (0..d.n())
                    .filter(|&i| values[i] >= lo && values[i] < hi)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let label = if band == 0 {
                    format!("{col_name}<{}", cuts[0])
                } else if band == cuts.len() {
                    format!("{col_name}>={}", cuts[band - 1])
                } else {
                    format!("{col_name}[{},{})", cuts[band - 1], cuts[band])
                };
                groups.push((label, members));
            }
            Ok(groups)
        }
    }
}

fn cart_subgroup_files(
    out: &Path,
    tree: &CartTree,
    selection: &[usize],
    rr: &RRDraws,
    outputs: &mut Vec<String>,
) -> Result<()> {
    // Posterior densities for every CART node.
    let mut rows = Vec::new();
    for node_id in 0..tree.nodes.len() {
        let members: Vec<usize> = tree.nodes[node_id]
            .members
            .iter()
            .map(|&local| selection[local])
            .collect();
        let density = subgroup_posterior(rr, &members)?;
        for (b, v) in density.iter().enumerate() {
            rows.push(fmt_row(&[&node_id, &b, v]));
        }
    }
    write_rows(&out.join("subgroup_densities.csv"), "node,draw,rr", rows)?;
    outputs.push("subgroup_densities.csv".into());

    // NNT differences between the leftmost and rightmost leaves.
    let l = tree.leftmost_leaf();
    let r = tree.rightmost_leaf();
    let mut rows = Vec::new();
    if l != r {
        let to_global = |ids: &Vec<usize>| -> Vec<usize> {
            ids.iter().map(|&local| selection[local]).collect()
        };
        let diffs = nnt_difference_distribution(
            rr,
            &to_global(&tree.nodes[l].members),
            &to_global(&tree.nodes[r].members),
        )?;
        let (_, _, _, n_excluded) = summarize_with_sentinels(&diffs);
        if n_excluded > 0 {
            eprintln!("note: {n_excluded} NNT-difference draws were infinite and excluded");
        }
        for (b, v) in diffs.iter().enumerate() {
            if v.is_finite() {
                rows.push(fmt_row(&[&b, v]));
            }
        }
    }
    write_rows(&out.join("nnt_differences.csv"), "draw,nnt_diff", rows)?;
    outputs.push("nnt_differences.csv".into());
    Ok(())
}

pub fn run_summarize(args: &SummarizeArgs) -> Result<()> {
    let start = Instant::now();
    if read_manifest(&args.fit).is_err() {
        return Err(Error::InvalidArgument(format!(
            "fit directory {} has no manifest (incomplete run?)",
            args.fit.display()
        )));
    }
    let draws = load_draws(&args.fit)?;
    let d = load_fit_dataset(args)?;
    if d.n() != draws.n_units() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} rows but draws cover {} units",
            d.n(),
            draws.n_units()
        )));
    }
    ensure_out_dir(&args.out)?;
    let mut outputs: Vec<String> = Vec::new();

    let rr = rr_draws(&draws);
    let grid = draws.grid_values.clone();

    let (target_rows, dropped) = rr_by_target(&rr, &d.t_idx, &grid);
    if !dropped.is_empty() {
        eprintln!("note: {} grid points had no units and were dropped", dropped.len());
    }
    write_rows(
        &args.out.join("rr_by_target.csv"),
        "t,mean,lo,hi",
        target_rows
            .iter()
            .map(|s| fmt_row(&[&s.t, &s.mean, &s.lo, &s.hi])),
    )?;
    outputs.push("rr_by_target.csv".into());

    write_rows(
        &args.out.join("nnt_by_target.csv"),
        "t,mean,lo,hi,n_excluded",
        nnt_by_target(&rr, &d.t_idx, &grid)
            .iter()
            .map(|s| fmt_row(&[&s.t, &s.mean, &s.lo, &s.hi, &s.n_excluded])),
    )?;
    outputs.push("nnt_by_target.csv".into());

    // Per-unit scatter data with covariates.
    let unit_means = rr.unit_means();
    let unit_intervals = rr.unit_intervals(0.95);
    {
        let mut header = String::from("unit,t,z,y,rr_mean,rr_lo,rr_hi");
        for col in &d.x.cols {
            header.push(',');
            header.push_str(col.name());
        }
        let rows = (0..d.n()).map(|i| {
            let (lo, hi) = unit_intervals[i];
            let mut row = fmt_row(&[
                &i,
                &d.t_value(i),
                &d.z[i],
                &d.y[i],
                &unit_means[i],
                &lo,
                &hi,
            ]);
            for col in &d.x.cols {
                row.push(',');
                match col.as_ref() {
                    Column::Continuous { values, .. } => row.push_str(&format!("{}", values[i])),
                    Column::Categorical { codes, levels, .. } => {
                        row.push_str(&levels[codes[i] as usize])
                    }
                }
            }
            row
        });
        write_rows(&args.out.join("rr_per_unit.csv"), &header, rows)?;
        outputs.push("rr_per_unit.csv".into());
    }

    // Fit-the-fit subgroup analysis inside the target window.
    let selection = select_window(&d, args.t_min, args.t_max);
    if selection.is_empty() {
        return Err(Error::EmptySelection(
            "target window excludes every unit".into(),
        ));
    }
    let p0_means = rr.unit_mean_p0();
    let p1_means = rr.unit_mean_p1();
    let sel_resp: Vec<f64> = selection.iter().map(|&i| unit_means[i]).collect();
    let sel_p0: Vec<f64> = selection.iter().map(|&i| p0_means[i]).collect();
    let sel_p1: Vec<f64> = selection.iter().map(|&i| p1_means[i]).collect();
    let sel_x = d.x.clone().subset_rows(&selection);
    let tree = fit_the_fit(
        &sel_resp,
        &sel_x,
        &sel_p0,
        &sel_p1,
        args.max_depth,
        args.min_leaf,
    )?;
    std::fs::write(args.out.join("cart_tree.txt"), tree.render(&sel_x))?;
    outputs.push("cart_tree.txt".into());
    cart_subgroup_files(&args.out, &tree, &selection, &rr, &mut outputs)?;

    // Treated-failure excess (skipped when the data has no treated units).
    match treated_failure_excess(&draws, &d) {
        Ok(excess) => {
            write_rows(
                &args.out.join("treated_failure_excess.csv"),
                "draw,excess_per_1000",
                excess.iter().enumerate().map(|(b, v)| fmt_row(&[&b, v])),
            )?;
            outputs.push("treated_failure_excess.csv".into());
        }
        Err(e) => eprintln!("skipping treated-failure excess: {e}"),
    }

    // Diagnostics.
    {
        let mut rows = Vec::new();
        if let Some(pi) = &d.pi_hat {
            match targeted_selection_pseudo_r2(&d.y, pi) {
                Ok(r2) => rows.push(fmt_row(&[&"pseudo_r2", &r2])),
                Err(e) => eprintln!("skipping pseudo-R²: {e}"),
            }
        }
        match structural_heterogeneity_ratio(&draws, &d.t_idx) {
            Ok((ratio, excluded)) => {
                rows.push(fmt_row(&[&"structural_heterogeneity_ratio", &ratio]));
                rows.push(fmt_row(&[&"variance_ratio_excluded_draws", &excluded]));
            }
            Err(e) => eprintln!("skipping heterogeneity ratio: {e}"),
        }
        rows.push(fmt_row(&[&"accept_rate_mu", &draws.accept_rate_mu]));
        rows.push(fmt_row(&[&"accept_rate_tau", &draws.accept_rate_tau]));
        write_rows(&args.out.join("diagnostics.csv"), "metric,value", rows)?;
        outputs.push("diagnostics.csv".into());
    }

    // Grouped projections over the target covariate.
    for spec in &args.project {
        let (col, cuts) = parse_projection(spec)?;
        let groups = projection_groups(&d, &col, cuts)?;
        let rows = grouped_rr_projection(&rr, &d.t_idx, &grid, &groups);
        let fname = format!("projection_{col}.csv");
        write_rows(
            &args.out.join(&fname),
            "group,t,mean,lo,hi",
            rows.iter()
                .map(|(g, s)| fmt_row(&[g, &s.t, &s.mean, &s.lo, &s.hi])),
        )?;
        outputs.push(fname);
    }

    // Smoothness-sensitivity overlay across fit directories.
    if !args.overlay.is_empty() {
        let mut rows: Vec<String> = target_rows
            .iter()
            .map(|s| fmt_row(&[&"default", &s.t, &s.mean, &s.lo, &s.hi]))
            .collect();
        for spec in &args.overlay {
            let (name, dir) = spec.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("overlay `{spec}` is not NAME=DIR"))
            })?;
            let other = load_draws(Path::new(dir))?;
            let other_rr = rr_draws(&other);
            // Overlay fits share the dataset; reuse its routing.
            if other.n_units() != d.n() {
                return Err(Error::DimensionMismatch(format!(
                    "overlay `{name}` covers {} units, expected {}",
                    other.n_units(),
                    d.n()
                )));
            }
            let (other_rows, _) = rr_by_target(&other_rr, &d.t_idx, &other.grid_values);
            rows.extend(
                other_rows
                    .iter()
                    .map(|s| fmt_row(&[&name, &s.t, &s.mean, &s.lo, &s.hi])),
            );
        }
        write_rows(
            &args.out.join("kappa_sensitivity.csv"),
            "mode,t,mean,lo,hi",
            rows,
        )?;
        outputs.push("kappa_sensitivity.csv".into());
    }

    write_manifest(
        &args.out,
        &Manifest {
            command: "summarize".into(),
            version: VERSION.into(),
            seed: draws.seed,
            config_echo: format!(
                "t_min = {:?}\nt_max = {:?}\nmax_depth = {}\nmin_leaf = {}\n",
                args.t_min, args.t_max, args.max_depth, args.min_leaf
            ),
            inputs: vec![args.fit.display().to_string()],
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
            accept_rate_mu: draws.accept_rate_mu,
            accept_rate_tau: draws.accept_rate_tau,
        },
    )?;
    Ok(())
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Parse {
        path: args.config.display().to_string(),
        message: e.to_string(),
    })?;
    let mut cfg: BenchConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        path: args.config.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    cfg.validate()?;
    eprintln!(
        "benchmark: {} scenario(s) x {} model(s) x {} replicate(s), n = {}",
        cfg.scenarios.len(),
        cfg.models.len(),
        cfg.replicates,
        cfg.n
    );
    let rows = run_benchmark(&cfg)?;
    ensure_out_dir(&args.out)?;
    std::fs::write(args.out.join("metrics.csv"), metrics_to_csv(&rows))?;
    write_manifest(
        &args.out,
        &Manifest {
            command: "simulate".into(),
            version: VERSION.into(),
            seed: cfg.base_seed,
            config_echo: toml::to_string(&cfg).unwrap_or_default(),
            inputs: vec![args.config.display().to_string()],
            outputs: vec!["metrics.csv".into()],
            wall_time_s: start.elapsed().as_secs_f64(),
            accept_rate_mu: 0.0,
            accept_rate_tau: 0.0,
        },
    )?;
    Ok(())
}

pub fn run_calibrate(args: &CalibrateArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = FileConfig::load_layered(&args.config)?;
    let schema = require_schema(&cfg)?;
    let d = load_dataset(&args.data, &schema)?;
    let seed = args.seed.or(cfg.run.seed).unwrap_or(0);

    let s_mu = s_mu_from_elicitation(args.lo, args.hi)?;
    let m = args
        .holdout
        .or(cfg.run.holdout)
        .unwrap_or(500)
        .min(d.n() / 2);
    let cal = if m == 0 {
        eprintln!("warning: dataset too small to hold out; calibrating on all rows");
        s_tau_calibrate(&d, s_mu)
    } else {
        let (_, holdout) = split_holdout(&d, m, seed)?;
        s_tau_calibrate(&holdout, s_mu)
    };
    if cal.fallback {
        eprintln!("warning: degenerate holdout (single arm or single grid point); s_tau = s_mu/2");
    }
    println!("s_mu = {}", s_mu);
    println!("s_tau = {}", cal.s_tau);

    ensure_out_dir(&args.out)?;
    let mut outputs = vec!["calibration.toml".to_string()];
    std::fs::write(
        args.out.join("calibration.toml"),
        format!("[model]\ns_mu = {}\ns_tau = {}\n", s_mu, cal.s_tau),
    )?;

    if args.het_grid {
        let mut rng = RngStream::new(seed, 0);
        let alphas: Vec<f64> = [0.80f64, 0.90, 0.93, 0.95]
            .iter()
            .map(|&p| tsbcf::mathutil::phi_inv(p))
            .collect();
        let taus = [-0.5, -0.313, -0.1];
        let sds = [0.15, 0.3, 0.6, 1.2];
        let rows = structural_heterogeneity_grid(&alphas, &taus, &sds, 1000, &mut rng)?;
        write_rows(
            &args.out.join("het_grid.csv"),
            "alpha,tau,mu_sd,rr",
            rows.iter()
                .map(|r| fmt_row(&[&r.alpha, &r.tau, &r.mu_sd, &r.rr])),
        )?;
        outputs.push("het_grid.csv".into());
    }

    write_manifest(
        &args.out,
        &Manifest {
            command: "calibrate".into(),
            version: VERSION.into(),
            seed,
            config_echo: format!(
                "lo = {}\nhi = {}\nholdout = {m}\nempirical_sd = {}\nfallback = {}\n",
                args.lo, args.hi, cal.empirical_sd, cal.fallback
            ),
            inputs: vec![args.data.display().to_string()],
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
            accept_rate_mu: 0.0,
            accept_rate_tau: 0.0,
        },
    )?;
    Ok(())
}

pub fn run_propensity(args: &PropensityArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = FileConfig::load_layered(&args.config)?;
    let schema = require_schema(&cfg)?;
    let d = load_dataset(&args.data, &schema)?;
    let mut prop_cfg = cfg.propensity_config()?;
    if let Some(seed) = args.seed.or(cfg.run.seed) {
        prop_cfg.seed = seed;
    }
    if let Some(t) = args.trees {
        prop_cfg.n_mu = t;
    }
    if let Some(b) = args.burn {
        prop_cfg.n_burn = b;
    }
    if let Some(n) = args.draws {
        prop_cfg.n_draws = n;
    }
    prop_cfg.validate()?;
    let fit = fit_propensity(&d, &prop_cfg, RngStream::new(prop_cfg.seed, PROPENSITY_STREAM))?;

    ensure_out_dir(&args.out)?;
    write_rows(
        &args.out.join("propensity.csv"),
        "unit,pi_hat",
        fit.pi_hat
            .iter()
            .enumerate()
            .map(|(i, p)| fmt_row(&[&i, p])),
    )?;
    write_manifest(
        &args.out,
        &Manifest {
            command: "propensity".into(),
            version: VERSION.into(),
            seed: prop_cfg.seed,
            config_echo: config_echo(&prop_cfg, &[]),
            inputs: vec![args.data.display().to_string()],
            outputs: vec!["propensity.csv".into()],
            wall_time_s: start.elapsed().as_secs_f64(),
            accept_rate_mu: 0.0,
            accept_rate_tau: 0.0,
        },
    )?;
    Ok(())
}
