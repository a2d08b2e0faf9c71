//! Pipeline configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crashsev_core::ingest::{ColumnMapping, ParseMode};
use crashsev_core::probit::ModelSpec;
use crashsev_core::raster::{GridSpec, DEFAULT_CELL_SIZE_KM};
use crashsev_core::spatial::DistrictOptions;
use crashsev_core::stability::DEFAULT_LEVEL;
use crashsev_core::synth::CrashSynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub crashes: Option<PathBuf>,
    pub mapping: ColumnMapping,
    pub parse_mode: ParseMode,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            crashes: None,
            mapping: ColumnMapping::default(),
            parse_mode: ParseMode::SkipAndReport,
        }
    }
}

/// Grid settings. Without a full extent the grid is fitted to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cell_size_km: f64,
    pub origin_lat: Option<f64>,
    pub origin_lon: Option<f64>,
    pub n_rows: Option<usize>,
    pub n_cols: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cell_size_km: DEFAULT_CELL_SIZE_KM,
            origin_lat: None,
            origin_lon: None,
            n_rows: None,
            n_cols: None,
        }
    }
}

impl GridConfig {
    pub fn fixed_extent(&self) -> Option<GridSpec> {
        Some(GridSpec {
            origin_lat: self.origin_lat?,
            origin_lon: self.origin_lon?,
            cell_size_km: self.cell_size_km,
            n_rows: self.n_rows?,
            n_cols: self.n_cols?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub level: f64,
    /// Overrides the pooled-test degrees of freedom.
    pub pooled_df: Option<u32>,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            level: DEFAULT_LEVEL,
            pooled_df: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub grid: GridConfig,
    pub hotspots: DistrictOptions,
    /// Model used for every district without its own entry.
    pub model: ModelSpec,
    /// Per-district models keyed by district id.
    pub districts: BTreeMap<String, ModelSpec>,
    /// Model for the pooled fit; defaults to `model`.
    pub pooled: Option<ModelSpec>,
    pub lrtests: LrConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub synth: Option<CrashSynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputConfig::default(),
            grid: GridConfig::default(),
            hotspots: DistrictOptions::default(),
            model: ModelSpec::default(),
            districts: BTreeMap::new(),
            pooled: None,
            lrtests: LrConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 42,
            synth: None,
        }
    }
}

impl PipelineConfig {
    /// Load a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.input.crashes {
            if p.is_relative() {
                cfg.input.crashes = Some(base.join(p));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_for(&self, district: &str) -> &ModelSpec {
        self.districts.get(district).unwrap_or(&self.model)
    }

    pub fn pooled_model(&self) -> &ModelSpec {
        self.pooled.as_ref().unwrap_or(&self.model)
    }

    /// Apply a draw-count override to every model.
    pub fn set_draws(&mut self, draws: usize) {
        self.model.n_draws = draws;
        for spec in self.districts.values_mut() {
            spec.n_draws = draws;
        }
        if let Some(p) = &mut self.pooled {
            p.n_draws = draws;
        }
    }

    pub fn synth_config(&self) -> CrashSynthConfig {
        self.synth.clone().unwrap_or_else(|| CrashSynthConfig::example(5000))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.districts.insert("2".into(), ModelSpec {
            fixed_vars: vec!["snow".into()],
            ..Default::default()
        });
        cfg.synth = Some(CrashSynthConfig::example(100));
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: PipelineConfig = toml::from_str(
            r#"
            seed = 7
            [hotspots]
            level = "hot95"
            k = 2
            [model]
            fixed_vars = ["snow", "dark"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hotspots.k, 2);
        assert_eq!(cfg.hotspots.min_cells, 3);
        assert_eq!(cfg.model.n_draws, 1000);
        assert_eq!(cfg.grid.cell_size_km, DEFAULT_CELL_SIZE_KM);
        assert!(cfg.grid.fixed_extent().is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("colour = 1").is_err());
    }
}
