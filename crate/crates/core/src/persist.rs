//! On-disk formats: columnar delimited draw files, run manifests, and the
//! benchmark metrics table.
//!
//! Floats are written with Rust's shortest-roundtrip formatting, so a fixed
//! seed reproduces every output byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ResponseMode;
use crate::error::{Error, Result};
use crate::sampler::{DrawMatrix, PosteriorDraws, ScalarTraces};
use crate::simbench::MetricsRow;

fn write_matrix_csv(path: &Path, m: &DrawMatrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.n_units {
        if i > 0 {
            out.push(',');
        }
        write!(out, "u{i}").unwrap();
    }
    out.push('\n');
    for b in 0..m.n_draws {
        let row = m.row(b);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DrawMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        message: "empty file".into(),
    })?;
    let n_units = header.split(',').count();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("bad float `{v}` at line {}", ln + 2),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != n_units {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("ragged row at line {}", ln + 2),
            });
        }
        rows.push(row);
    }
    Ok(DrawMatrix::from_rows(rows))
}

/// Sidecar metadata for a set of posterior draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrawsMeta {
    response_mode: String,
    seed: u64,
    stream_ids: Vec<u64>,
    accept_rate_mu: f64,
    accept_rate_tau: f64,
    grid_values: Vec<f64>,
    alpha: Vec<f64>,
}

/// Persists posterior draws as one delimited file per quantity plus a
/// metadata sidecar. Returns the file names written.
pub fn save_draws(dir: &Path, draws: &PosteriorDraws) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, m) in [
        ("mu.csv", &draws.mu),
        ("tau.csv", &draws.tau),
        ("f0.csv", &draws.f0),
        ("f1.csv", &draws.f1),
    ] {
        write_matrix_csv(&dir.join(name), m)?;
        files.push(name.to_string());
    }

    let t = &draws.traces;
    let mut out = String::from("xi,b0,b1,delta_mu,delta_tau,sigma2\n");
    for b in 0..draws.n_draws() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t.xi[b], t.b0[b], t.b1[b], t.delta_mu[b], t.delta_tau[b], t.sigma2[b]
        )
        .unwrap();
    }
    std::fs::write(dir.join("scalars.csv"), out)?;
    files.push("scalars.csv".into());

    let meta = DrawsMeta {
        response_mode: match draws.response_mode {
            ResponseMode::Probit => "probit".into(),
            ResponseMode::Continuous => "continuous".into(),
        },
        seed: draws.seed,
        stream_ids: draws.stream_ids.clone(),
        accept_rate_mu: draws.accept_rate_mu,
        accept_rate_tau: draws.accept_rate_tau,
        grid_values: draws.grid_values.clone(),
        alpha: draws.alpha.clone(),
    };
    let meta_text = toml::to_string(&meta).map_err(|e| Error::Parse {
        path: "draws meta".into(),
        message: e.to_string(),
    })?;
    std::fs::write(dir.join("draws_meta.toml"), meta_text)?;
    files.push("draws_meta.toml".into());

    if let Some(text) = &draws.final_mu_forest {
        std::fs::write(dir.join("mu_forest.txt"), text)?;
        files.push("mu_forest.txt".into());
    }
    if let Some(text) = &draws.final_tau_forest {
        std::fs::write(dir.join("tau_forest.txt"), text)?;
        files.push("tau_forest.txt".into());
    }
    Ok(files)
}

/// Loads draws written by [`save_draws`].
pub fn load_draws(dir: &Path) -> Result<PosteriorDraws> {
    let mu = read_matrix_csv(&dir.join("mu.csv"))?;
    let tau = read_matrix_csv(&dir.join("tau.csv"))?;
    let f0 = read_matrix_csv(&dir.join("f0.csv"))?;
    let f1 = read_matrix_csv(&dir.join("f1.csv"))?;

    let scalars_path = dir.join("scalars.csv");
    let text = std::fs::read_to_string(&scalars_path)?;
    let mut traces = ScalarTraces::default();
    for (ln, line) in text.lines().skip(1).enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: scalars_path.display().to_string(),
                    message: format!("bad float at line {}", ln + 2),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(Error::Parse {
                path: scalars_path.display().to_string(),
                message: "expected 6 scalar columns".into(),
            });
        }
        traces.xi.push(vals[0]);
        traces.b0.push(vals[1]);
        traces.b1.push(vals[2]);
        traces.delta_mu.push(vals[3]);
        traces.delta_tau.push(vals[4]);
        traces.sigma2.push(vals[5]);
    }

    let meta_text = std::fs::read_to_string(dir.join("draws_meta.toml"))?;
    let meta: DrawsMeta = toml::from_str(&meta_text).map_err(|e| Error::Parse {
        path: "draws_meta.toml".into(),
        message: e.to_string(),
    })?;

    let final_mu_forest = std::fs::read_to_string(dir.join("mu_forest.txt")).ok();
    let final_tau_forest = std::fs::read_to_string(dir.join("tau_forest.txt")).ok();

    Ok(PosteriorDraws {
        mu,
        tau,
        f0,
        f1,
        traces,
        alpha: meta.alpha,
        grid_values: meta.grid_values,
        response_mode: match meta.response_mode.as_str() {
            "continuous" => ResponseMode::Continuous,
            _ => ResponseMode::Probit,
        },
        seed: meta.seed,
        stream_ids: meta.stream_ids,
        accept_rate_mu: meta.accept_rate_mu,
        accept_rate_tau: meta.accept_rate_tau,
        final_mu_forest,
        final_tau_forest,
    })
}

/// Run manifest; written last, so its presence marks a completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_echo: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub accept_rate_mu: f64,
    #[serde(default)]
    pub accept_rate_tau: f64,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Parse {
        path: MANIFEST_NAME.into(),
        message: e.to_string(),
    })?;
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Benchmark metrics as a delimited table.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "scenario,model,rmse_mean,rmse_sd,coverage,interval_length,n_replicates,n_failed\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scenario,
            r.model,
            r.rmse_mean,
            r.rmse_sd,
            r.coverage,
            r.interval_length,
            r.n_replicates,
            r.n_failed
        )
        .unwrap();
    }
    out
}
