//! Labelled triggers joined with their context grids and feature vectors,
//! plus the chronological train/validation split.

use rayon::prelude::*;

use crate::catalog::Catalog;
use crate::diff::Tensor;
use crate::features::{event_features, FeatureConfig, FeatureVector};
use crate::gridenc::{build_multiscale, GridSpec};
use crate::labeling::{label_catalog, LabelConfig, Sample};
use crate::losses::{PhysicsBatch, TaskLabels};
use crate::{Error, Result};

/// One model input with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample: Sample,
    /// `(18, H, W)`.
    pub grid: Tensor,
    pub features: FeatureVector,
}

impl PreparedSample {
    pub fn labels(&self) -> TaskLabels {
        TaskLabels {
            aftershock: self.sample.label_aftershock,
            tsunami: self.sample.label_tsunami,
            foreshock: self.sample.label_foreshock,
        }
    }

    pub fn weight(&self) -> f64 {
        self.sample.sample_weight
    }

    pub fn time(&self) -> f64 {
        self.sample.trigger.time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// In trigger-time order.
    pub samples: Vec<PreparedSample>,
    pub grid: GridSpec,
    /// Completeness magnitude of the source catalog.
    pub m_c: f64,
}

/// Smallest cell-aligned box holding every event; a degenerate extent gets
/// one cell.
pub fn fit_grid(catalog: &Catalog, cell_size: f64) -> Result<GridSpec> {
    if catalog.is_empty() {
        return Err(Error::InvalidInput(
            "cannot fit a grid to an empty catalog".into(),
        ));
    }
    let (mut lat_lo, mut lat_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_lo, mut lon_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in catalog.events() {
        lat_lo = lat_lo.min(e.latitude);
        lat_hi = lat_hi.max(e.latitude);
        lon_lo = lon_lo.min(e.longitude);
        lon_hi = lon_hi.max(e.longitude);
    }
    let snap = |lo: f64, hi: f64, min: f64, max: f64| {
        let a = ((lo / cell_size).floor() * cell_size).max(min);
        let mut b = ((hi / cell_size).ceil() * cell_size).min(max);
        if b <= a {
            b = (a + cell_size).min(max);
        }
        (a, b)
    };
    let (lat_min, lat_max) = snap(lat_lo, lat_hi, -90.0, 90.0);
    let (lon_min, lon_max) = snap(lon_lo, lon_hi, -180.0, 180.0);
    let spec = GridSpec {
        cell_size,
        lat_min,
        lat_max,
        lon_min,
        lon_max,
    };
    spec.validate()?;
    Ok(spec)
}

/// Labels the catalog, then builds grids and features for every trigger in
/// parallel; output order is trigger-time order.
pub fn prepare(
    catalog: &Catalog,
    labels: &LabelConfig,
    features: &FeatureConfig,
    grid: &GridSpec,
) -> Result<Dataset> {
    grid.validate()?;
    features.validate()?;
    let samples = label_catalog(catalog, labels)?;
    let prepared = samples
        .into_par_iter()
        .map(|s| {
            let g = build_multiscale(catalog, s.trigger.time, grid)?;
            let f = event_features(catalog, &s.trigger, features);
            Ok(PreparedSample {
                sample: s,
                grid: g.data,
                features: f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples: prepared,
        grid: *grid,
        m_c: catalog.magnitude_completeness(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(train, validation)` indices; validation is the latest
    /// `validation_fraction` of triggers by time.
    pub fn time_split(&self, validation_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {validation_fraction} must lie in [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.samples[a].time().total_cmp(&self.samples[b].time()));
        let n_val = (self.len() as f64 * validation_fraction).round() as usize;
        let val = order.split_off(self.len() - n_val);
        Ok((order, val))
    }

    /// Physics aggregates over the sequences of the selected samples.
    pub fn physics_batch(&self, indices: &[usize]) -> PhysicsBatch {
        physics_batch(indices.iter().map(|&i| &self.samples[i].sample), self.m_c)
    }
}

/// Aftershock magnitudes (at or above `m_c`), delays and Bath pairs of every
/// sample carrying a sequence.
pub fn physics_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>, m_c: f64) -> PhysicsBatch {
    let mut batch = PhysicsBatch {
        m_c,
        ..PhysicsBatch::default()
    };
    for s in samples {
        let Some(seq) = &s.sequence else { continue };
        batch
            .magnitudes
            .extend(seq.magnitudes.iter().filter(|m| **m >= m_c - 1e-9));
        batch.delays.extend(&seq.delays);
        if let Some(largest) = seq.largest_aftershock() {
            batch.bath_pairs.push((seq.mainshock_magnitude, largest));
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_catalog, SynthConfig};

    fn small() -> (Catalog, Dataset) {
        let cfg = SynthConfig {
            n_mainshocks: 60,
            seed: 5,
            ..SynthConfig::default()
        };
        let (cat, _) = generate_catalog(&cfg).unwrap();
        let grid = fit_grid(&cat, 2.0).unwrap();
        let ds = prepare(
            &cat,
            &LabelConfig::default(),
            &FeatureConfig::default(),
            &grid,
        )
        .unwrap();
        (cat, ds)
    }

    #[test]
    fn fitted_grid_covers_every_event() {
        let (cat, ds) = small();
        assert_eq!(ds.grid.lat_min % 2.0, 0.0);
        assert!(cat
            .events()
            .iter()
            .all(|e| ds.grid.cell(e.latitude, e.longitude).is_some()));
        assert!(
            ds.grid.height() <= 6 && ds.grid.width() <= 6,
            "{:?}",
            ds.grid
        );
    }

    #[test]
    fn prepared_samples_are_consistent() {
        let (cat, ds) = small();
        assert!(!ds.is_empty());
        assert_eq!(ds.m_c, cat.magnitude_completeness());
        for s in &ds.samples {
            assert_eq!(s.grid.shape(), [18, ds.grid.height(), ds.grid.width()]);
            assert!(s.features.iter().all(|v| v.is_finite()));
            assert!(s.weight() >= 1.0);
        }
        assert!(ds.samples.windows(2).all(|w| w[0].time() <= w[1].time()));
    }

    #[test]
    fn time_split_holds_out_latest() {
        let (_, ds) = small();
        let (train, val) = ds.time_split(0.2).unwrap();
        assert_eq!(train.len() + val.len(), ds.len());
        assert_eq!(val.len(), (ds.len() as f64 * 0.2).round() as usize);
        let last_train = train
            .iter()
            .map(|&i| ds.samples[i].time())
            .fold(f64::MIN, f64::max);
        assert!(val.iter().all(|&i| ds.samples[i].time() >= last_train));
        assert!(ds.time_split(1.0).is_err());
    }

    #[test]
    fn physics_batch_collects_sequences() {
        let (_, ds) = small();
        let all: Vec<usize> = (0..ds.len()).collect();
        let b = ds.physics_batch(&all);
        let with_seq = ds
            .samples
            .iter()
            .filter(|s| s.sample.sequence.is_some())
            .count();
        assert!(with_seq > 0);
        assert!(b.bath_pairs.len() <= with_seq);
        assert!(!b.delays.is_empty() && !b.magnitudes.is_empty());
        assert!(b.magnitudes.iter().all(|m| *m >= ds.m_c - 1e-9));
    }
}
