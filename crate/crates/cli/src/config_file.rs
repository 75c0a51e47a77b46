//! Layered TOML configuration: `[schema]`, `[model]`, `[propensity]`, and
//! `[run]` tables. Later files override earlier ones key by key; CLI flags
//! override files.

use std::path::Path;

use serde::Deserialize;
use tsbcf::{Error, ModelConfig, Result, Schema};

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    /// Holdout size for treatment-scale calibration.
    pub holdout: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub schema: Option<Schema>,
    /// Raw `[model]` overrides, merged onto defaults.
    pub model: toml::Table,
    /// Raw `[propensity]` overrides for the propensity forest.
    pub propensity: toml::Table,
    pub run: RunSection,
}

#[derive(Debug, Deserialize)]
struct RawFile {
    schema: Option<Schema>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    propensity: toml::Table,
    #[serde(default)]
    run: Option<RunSection>,
}

impl FileConfig {
    pub fn load_layered(paths: &[impl AsRef<Path>]) -> Result<FileConfig> {
        let mut merged = FileConfig::default();
        for p in paths {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            let raw: RawFile = toml::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            if raw.schema.is_some() {
                merged.schema = raw.schema;
            }
            for (k, v) in raw.model {
                merged.model.insert(k, v);
            }
            for (k, v) in raw.propensity {
                merged.propensity.insert(k, v);
            }
            if let Some(run) = raw.run {
                if run.seed.is_some() {
                    merged.run.seed = run.seed;
                }
                if run.chains.is_some() {
                    merged.run.chains = run.chains;
                }
                if run.holdout.is_some() {
                    merged.run.holdout = run.holdout;
                }
            }
        }
        Ok(merged)
    }

    /// Whether the file layer pins the treatment scale (which skips
    /// data-driven calibration).
    pub fn fixes_s_tau(&self) -> bool {
        self.model.contains_key("s_tau")
    }

    /// Model settings: defaults overlaid with the `[model]` table.
    pub fn model_config(&self) -> Result<ModelConfig> {
        merge_onto_default(&self.model)
    }

    /// Propensity-forest settings: the resolved model config overlaid with
    /// the `[propensity]` table.
    pub fn propensity_config(&self) -> Result<ModelConfig> {
        let base = self.model_config()?;
        merge_tables(&base, &self.propensity)
    }
}

fn merge_onto_default(overlay: &toml::Table) -> Result<ModelConfig> {
    merge_tables(&ModelConfig::default(), overlay)
}

fn merge_tables(base: &ModelConfig, overlay: &toml::Table) -> Result<ModelConfig> {
    let mut table = toml::Table::try_from(base.clone()).map_err(|e| Error::Parse {
        path: "<model defaults>".into(),
        message: e.to_string(),
    })?;
    for (k, v) in overlay {
        if !table.contains_key(k) {
            return Err(Error::InvalidConfig(format!(
                "unknown model setting `{k}`"
            )));
        }
        table.insert(k.clone(), v.clone());
    }
    let cfg: ModelConfig = table.try_into().map_err(|e| Error::Parse {
        path: "<model config>".into(),
        message: format!("{e}"),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
