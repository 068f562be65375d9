//! Run configuration: one sectioned TOML file covering every stage of the
//! pipeline. Every field has a default, so an empty file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ColumnMapping, QualityCriteria};
use crate::dataset::fit_grid;
use crate::features::FeatureConfig;
use crate::gridenc::GridSpec;
use crate::labeling::LabelConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synthgen::SynthConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Context-grid placement. Without explicit bounds the grid is fitted to
/// the catalog's bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cell_size: f64,
    pub lat_min: Option<f64>,
    pub lat_max: Option<f64>,
    pub lon_min: Option<f64>,
    pub lon_max: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cell_size: 2.0,
            lat_min: None,
            lat_max: None,
            lon_min: None,
            lon_max: None,
        }
    }
}

impl GridConfig {
    pub fn resolve(&self, catalog: &Catalog) -> Result<GridSpec> {
        match (self.lat_min, self.lat_max, self.lon_min, self.lon_max) {
            (None, None, None, None) => fit_grid(catalog, self.cell_size),
            (Some(lat_min), Some(lat_max), Some(lon_min), Some(lon_max)) => {
                let spec = GridSpec {
                    cell_size: self.cell_size,
                    lat_min,
                    lat_max,
                    lon_min,
                    lon_max,
                };
                spec.validate().map_err(|e| Error::Config(e.to_string()))?;
                Ok(spec)
            }
            _ => Err(Error::Config(
                "grid: give all four of lat_min, lat_max, lon_min, lon_max or none".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Magnitude of completeness for parsed catalogs; the smallest magnitude
    /// present when unset.
    pub completeness: Option<f64>,
    pub columns: ColumnMapping,
    pub quality: QualityCriteria,
    pub synth: SynthConfig,
    pub labels: LabelConfig,
    pub features: FeatureConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the single seed every random stream derives from.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// `catalog` with its completeness magnitude resolved.
    pub fn resolve_completeness(&self, catalog: Catalog) -> Catalog {
        let m_c = self.completeness.unwrap_or_else(|| {
            catalog
                .events()
                .iter()
                .map(|e| e.magnitude)
                .reduce(f64::min)
                .unwrap_or(0.0)
        });
        catalog.with_completeness(m_c)
    }

    /// Section validators, with their errors reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |r: Result<()>, section: &str| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(m),
                other => Error::Config(format!("[{section}] {other}")),
            })
        };
        as_config(self.synth.validate(), "synth")?;
        as_config(self.labels.validate(), "labels")?;
        as_config(self.features.validate(), "features")?;
        as_config(self.model.validate(), "model")?;
        as_config(self.losses.validate(), "losses")?;
        as_config(self.train.validate(), "train")?;
        if let Some(m_c) = self.completeness {
            if !(0.0..=crate::catalog::MAX_MAGNITUDE).contains(&m_c) {
                return Err(Error::Config(format!(
                    "completeness {m_c} is not a magnitude"
                )));
            }
        }
        if !(self.grid.cell_size > 0.0) {
            return Err(Error::Config("grid.cell_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_overrides() {
        let text =
            "seed = 4\n[train]\nbatch_size = 16\n[synth]\nb_true = 0.9\n[grid]\ncell_size = 1.0\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(
            (cfg.seed, cfg.train.batch_size, cfg.synth.b_true),
            (4, 16, 0.9)
        );
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        let seeded = cfg.with_seed(9);
        assert_eq!((seeded.synth.seed, seeded.train.seed), (9, 9));
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "[train]\nbatch_sise = 3\n",
            "[train]\nbatch_size = 0\n",
            "[losses]\nlabel_smoothing = 0.7\n",
            "[synth]\nm_min = 9.0\n",
            "seed = \"x\"",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn partial_grid_bounds_are_rejected() {
        let cat = Catalog::new(vec![crate::catalog::Event::new(
            "a", 0.0, 1.0, 1.0, 10.0, 5.0,
        )
        .unwrap()]);
        let g = GridConfig {
            lat_min: Some(0.0),
            ..GridConfig::default()
        };
        assert!(matches!(g.resolve(&cat), Err(Error::Config(_))));
        let fitted = GridConfig::default().resolve(&cat).unwrap();
        assert_eq!((fitted.height(), fitted.width()), (1, 1));
    }

    #[test]
    fn completeness_defaults_to_smallest_magnitude() {
        let ev = |id: &str, m: f64| crate::catalog::Event::new(id, 0.0, 1.0, 1.0, 10.0, m).unwrap();
        let cat = Catalog::new(vec![ev("a", 3.2), ev("b", 2.7)]);
        let cfg = RunConfig::default();
        assert_eq!(
            cfg.resolve_completeness(cat.clone())
                .magnitude_completeness(),
            2.7
        );
        let fixed = RunConfig {
            completeness: Some(3.0),
            ..cfg
        };
        assert_eq!(
            fixed.resolve_completeness(cat).magnitude_completeness(),
            3.0
        );
        assert!(RunConfig::from_toml("completeness = -1.0").is_err());
    }
}
