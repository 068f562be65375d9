//! Trigger selection and the three binary task labels.
//!
//! A trigger is any event at or above `min_trigger_magnitude`. For each
//! trigger:
//!
//! - aftershock: at least `aftershock_min_count` events of magnitude
//!   `>= aftershock_min_magnitude` within `aftershock_radius` km in
//!   `(t, t + aftershock_window]`;
//! - foreshock: any strictly larger event within `foreshock_radius` km in
//!   `(t, t + foreshock_window]`;
//! - tsunami: the catalog flag.
//!
//! Triggers that are isolated mainshocks (no larger event nearby within the
//! sequence window on either side) also carry [`SequenceStats`], the
//! aftershock delays and magnitudes that feed the physics losses.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Event};
use crate::{Error, Result, SECONDS_PER_DAY};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Haversine distance between `(lat, lon)` points in degrees.
pub fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = p2 - p1;
    let dlam = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub min_trigger_magnitude: f64,
    /// Days.
    pub aftershock_window: f64,
    /// Km.
    pub aftershock_radius: f64,
    pub aftershock_min_count: usize,
    pub aftershock_min_magnitude: f64,
    /// Days.
    pub foreshock_window: f64,
    /// Km.
    pub foreshock_radius: f64,
    /// Drop triggers with less than `lookback_days` of catalog history.
    pub require_lookback: bool,
    pub lookback_days: f64,
    /// Span of the aftershock sequence kept for physics losses, days.
    pub sequence_window: f64,
    /// Km.
    pub sequence_radius: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            min_trigger_magnitude: 5.0,
            aftershock_window: 30.0,
            aftershock_radius: 100.0,
            aftershock_min_count: 5,
            aftershock_min_magnitude: 3.0,
            foreshock_window: 30.0,
            foreshock_radius: 100.0,
            require_lookback: false,
            lookback_days: 90.0,
            sequence_window: 90.0,
            sequence_radius: 100.0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("aftershock_window", self.aftershock_window),
            ("aftershock_radius", self.aftershock_radius),
            ("foreshock_window", self.foreshock_window),
            ("foreshock_radius", self.foreshock_radius),
            ("lookback_days", self.lookback_days),
            ("sequence_window", self.sequence_window),
            ("sequence_radius", self.sequence_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Aftershock sequence of an isolated mainshock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceStats {
    pub mainshock_magnitude: f64,
    /// Days after the mainshock, in time order.
    pub delays: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

impl SequenceStats {
    pub fn largest_aftershock(&self) -> Option<f64> {
        self.magnitudes.iter().copied().reduce(f64::max)
    }
}

/// One labelled trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index of the trigger in its catalog.
    pub index: usize,
    pub trigger: Event,
    pub label_aftershock: bool,
    pub label_tsunami: bool,
    pub label_foreshock: bool,
    pub sample_weight: f64,
    pub sequence: Option<SequenceStats>,
}

/// `1 + 10 [tsunami] + 3 [foreshock]`.
pub fn sample_weight(tsunami: bool, foreshock: bool) -> f64 {
    1.0 + 10.0 * f64::from(u8::from(tsunami)) + 3.0 * f64::from(u8::from(foreshock))
}

/// Events with magnitude `>= min_magnitude`, in time order.
pub fn select_triggers(catalog: &Catalog, min_magnitude: f64) -> Vec<&Event> {
    catalog
        .events()
        .iter()
        .filter(|e| e.magnitude >= min_magnitude)
        .collect()
}

fn near<'a>(
    events: &'a [Event],
    at: &'a Event,
    radius_km: f64,
) -> impl Iterator<Item = &'a Event> + 'a {
    events.iter().filter(move |e| {
        !std::ptr::eq(*e, at)
            && great_circle_km((at.latitude, at.longitude), (e.latitude, e.longitude)) <= radius_km
    })
}

/// Labels `trigger`, which must be an event of `catalog`.
pub fn label_sample(catalog: &Catalog, trigger: &Event, cfg: &LabelConfig) -> Result<Sample> {
    let index = catalog.position(trigger).ok_or_else(|| {
        Error::InvalidInput(format!("trigger `{}` is not in the catalog", trigger.id))
    })?;
    Ok(label_at(catalog, index, cfg))
}

fn label_at(catalog: &Catalog, index: usize, cfg: &LabelConfig) -> Sample {
    let trig = &catalog.events()[index];
    let t = trig.time;
    let day = SECONDS_PER_DAY;

    let after = catalog.window_after(t, t + cfg.aftershock_window * day);
    let count = near(after, trig, cfg.aftershock_radius)
        .filter(|e| e.magnitude >= cfg.aftershock_min_magnitude)
        .count();
    let fore = catalog.window_after(t, t + cfg.foreshock_window * day);
    let foreshock = near(fore, trig, cfg.foreshock_radius).any(|e| e.magnitude > trig.magnitude);

    Sample {
        index,
        trigger: trig.clone(),
        label_aftershock: count >= cfg.aftershock_min_count,
        label_tsunami: trig.tsunami,
        label_foreshock: foreshock,
        sample_weight: sample_weight(trig.tsunami, foreshock),
        sequence: sequence_at(catalog, index, cfg),
    }
}

fn sequence_at(catalog: &Catalog, index: usize, cfg: &LabelConfig) -> Option<SequenceStats> {
    let trig = &catalog.events()[index];
    let (t, span) = (trig.time, cfg.sequence_window * SECONDS_PER_DAY);
    let larger = |e: &Event| e.magnitude > trig.magnitude;
    if near(catalog.window(t - span, t), trig, cfg.sequence_radius).any(larger) {
        return None;
    }
    let after: Vec<&Event> =
        near(catalog.window_after(t, t + span), trig, cfg.sequence_radius).collect();
    if after.iter().any(|e| larger(e)) {
        return None;
    }
    Some(SequenceStats {
        mainshock_magnitude: trig.magnitude,
        delays: after
            .iter()
            .map(|e| (e.time - t) / SECONDS_PER_DAY)
            .collect(),
        magnitudes: after.iter().map(|e| e.magnitude).collect(),
    })
}

/// Labels every trigger of `catalog`, honouring the look-back rule.
pub fn label_catalog(catalog: &Catalog, cfg: &LabelConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let Some((start, _)) = catalog.time_span() else {
        return Ok(Vec::new());
    };
    let earliest = start + cfg.lookback_days * SECONDS_PER_DAY;
    Ok(catalog
        .events()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.magnitude >= cfg.min_trigger_magnitude)
        .filter(|(_, e)| !cfg.require_lookback || e.time >= earliest)
        .map(|(i, _)| label_at(catalog, i, cfg))
        .collect())
}

/// Label prevalences over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prevalence {
    pub n: usize,
    pub aftershock: f64,
    pub foreshock: f64,
    pub tsunami: f64,
}

pub fn prevalence(samples: &[Sample]) -> Prevalence {
    let n = samples.len();
    if n == 0 {
        return Prevalence::default();
    }
    let frac = |f: fn(&Sample) -> bool| samples.iter().filter(|s| f(s)).count() as f64 / n as f64;
    Prevalence {
        n,
        aftershock: frac(|s| s.label_aftershock),
        foreshock: frac(|s| s.label_foreshock),
        tsunami: frac(|s| s.label_tsunami),
    }
}

/// `id,aftershock,tsunami,foreshock,weight`, one row per sample.
pub fn write_samples<W: Write>(samples: &[Sample], writer: W) -> Result<()> {
    let err = |e: csv::Error| Error::Parse(format!("writing sample table: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "aftershock", "tsunami", "foreshock", "weight"])
        .map_err(err)?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for s in samples {
        w.write_record([
            s.trigger.id.as_str(),
            bit(s.label_aftershock),
            bit(s.label_tsunami),
            bit(s.label_foreshock),
            &format!("{}", s.sample_weight),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("writing sample table: {e}")))
}

pub fn write_samples_file(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(samples, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T0: f64 = 1_000_000_000.0;
    const DAY: f64 = SECONDS_PER_DAY;

    fn ev(id: &str, days: f64, lat: f64, lon: f64, m: f64) -> Event {
        Event::new(id, T0 + days * DAY, lat, lon, 10.0, m).unwrap()
    }

    /// ~km north of the origin.
    fn north(km: f64) -> f64 {
        (km / EARTH_RADIUS_KM).to_degrees()
    }

    #[test]
    fn distances() {
        assert_eq!(great_circle_km((12.0, 34.0), (12.0, 34.0)), 0.0);
        let anti = great_circle_km((0.0, 0.0), (0.0, 180.0));
        assert!((anti - std::f64::consts::PI * 6371.0).abs() < 1e-6);
        assert!((anti - 20015.1).abs() < 0.1);
        let one = great_circle_km((0.0, 0.0), (0.0, 1.0));
        // 6371 * pi / 180
        assert!((one - 111.194_926_644_558_7).abs() < 1e-9, "{one}");
    }

    #[test]
    fn trigger_threshold_is_inclusive() {
        let cat = Catalog::new(vec![
            ev("a", 0.0, 0.0, 0.0, 4.9),
            ev("b", 1.0, 0.0, 0.0, 5.0),
            ev("c", 2.0, 0.0, 0.0, 6.1),
        ]);
        assert_eq!(select_triggers(&cat, 5.0).len(), 2);
        assert!(select_triggers(&Catalog::default(), 5.0).is_empty());
    }

    #[test]
    fn aftershock_rule() {
        let mut evs = vec![ev("main", 0.0, 0.0, 0.0, 6.0)];
        for i in 0..6 {
            evs.push(ev(
                &format!("a{i}"),
                0.5 + i as f64 * 0.8,
                north(10.0),
                0.0,
                3.0,
            ));
        }
        let cat = Catalog::new(evs);
        let cfg = LabelConfig::default();
        let s = label_sample(&cat, &cat.events()[0], &cfg).unwrap();
        assert!(s.label_aftershock);
        assert!(!s.label_foreshock);
        assert_eq!(s.sample_weight, 1.0);
        let seq = s.sequence.unwrap();
        assert_eq!(seq.delays.len(), 6);
        assert_eq!(seq.largest_aftershock(), Some(3.0));

        // four events are not enough; too-small and too-distant events do not count
        let mut evs = vec![ev("main", 0.0, 0.0, 0.0, 6.0)];
        for i in 0..4 {
            evs.push(ev(&format!("a{i}"), 1.0 + i as f64, north(10.0), 0.0, 3.5));
        }
        evs.push(ev("small", 1.5, 0.0, 0.0, 2.9));
        evs.push(ev("far", 1.5, north(150.0), 0.0, 4.0));
        evs.push(ev("late", 31.0, 0.0, 0.0, 4.0));
        let cat = Catalog::new(evs);
        assert!(
            !label_sample(&cat, &cat.events()[0], &cfg)
                .unwrap()
                .label_aftershock
        );
    }

    #[test]
    fn foreshock_rule() {
        let cat = Catalog::new(vec![
            ev("fore", 0.0, 0.0, 0.0, 5.5),
            ev("main", 2.0, north(50.0), 0.0, 6.0),
        ]);
        let s = label_sample(&cat, &cat.events()[0], &LabelConfig::default()).unwrap();
        assert!(s.label_foreshock);
        assert_eq!(s.sample_weight, 4.0);
        assert!(s.sequence.is_none());
        // the later mainshock was preceded by a smaller event only
        let m = label_sample(&cat, &cat.events()[1], &LabelConfig::default()).unwrap();
        assert!(!m.label_foreshock);
        assert!(m.sequence.is_some());

        // an equal-magnitude doublet is not a foreshock
        let cat = Catalog::new(vec![
            ev("a", 0.0, 0.0, 0.0, 5.5),
            ev("b", 1.0, 0.0, 0.0, 5.5),
        ]);
        assert!(
            !label_sample(&cat, &cat.events()[0], &LabelConfig::default())
                .unwrap()
                .label_foreshock
        );
    }

    #[test]
    fn weights_and_tsunami() {
        assert_eq!(sample_weight(false, false), 1.0);
        assert_eq!(sample_weight(false, true), 4.0);
        assert_eq!(sample_weight(true, false), 11.0);
        assert_eq!(sample_weight(true, true), 14.0);
        let cat = Catalog::new(vec![ev("t", 0.0, 0.0, 0.0, 7.5).with_tsunami(true)]);
        let s = label_sample(&cat, &cat.events()[0], &LabelConfig::default()).unwrap();
        assert!(s.label_tsunami);
        assert_eq!(s.sample_weight, 11.0);
    }

    #[test]
    fn foreign_trigger_is_rejected() {
        let cat = Catalog::new(vec![ev("a", 0.0, 0.0, 0.0, 5.5)]);
        let other = ev("x", 3.0, 1.0, 1.0, 6.0);
        assert!(matches!(
            label_sample(&cat, &other, &LabelConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn lookback_drops_early_triggers() {
        let cat = Catalog::new(vec![
            ev("early", 10.0, 0.0, 0.0, 5.5),
            ev("start", 0.0, 5.0, 5.0, 2.0),
            ev("late", 100.0, 0.0, 0.0, 5.5),
        ]);
        let mut cfg = LabelConfig::default();
        assert_eq!(label_catalog(&cat, &cfg).unwrap().len(), 2);
        cfg.require_lookback = true;
        let kept = label_catalog(&cat, &cfg).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].trigger.id, "late");
    }

    #[test]
    fn sample_table_format() {
        let cat = Catalog::new(vec![ev("q1", 0.0, 0.0, 0.0, 5.5).with_tsunami(true)]);
        let samples = label_catalog(&cat, &LabelConfig::default()).unwrap();
        let mut out = Vec::new();
        write_samples(&samples, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "id,aftershock,tsunami,foreshock,weight\nq1,0,1,0,11\n"
        );
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        proptest::collection::vec(
            (0.0..60.0f64, -1.0..1.0f64, -1.0..1.0f64, 2.5..7.0f64),
            1..40,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (d, la, lo, m))| ev(&format!("e{i}"), d, la, lo, m))
                .collect()
        })
    }

    fn labels(samples: &[Sample]) -> Vec<(String, bool, bool, bool)> {
        let mut v: Vec<_> = samples
            .iter()
            .map(|s| {
                (
                    s.trigger.id.clone(),
                    s.label_aftershock,
                    s.label_foreshock,
                    s.label_tsunami,
                )
            })
            .collect();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn labels_ignore_storage_order(events in arb_events()) {
            let cfg = LabelConfig::default();
            let a = label_catalog(&Catalog::new(events.clone()), &cfg).unwrap();
            let mut rev = events;
            rev.reverse();
            let b = label_catalog(&Catalog::new(rev), &cfg).unwrap();
            prop_assert_eq!(labels(&a), labels(&b));
        }

        #[test]
        fn weights_take_four_values(events in arb_events()) {
            for s in label_catalog(&Catalog::new(events), &LabelConfig::default()).unwrap() {
                prop_assert!([1.0, 4.0, 11.0, 14.0].contains(&s.sample_weight));
            }
        }

        #[test]
        fn raising_trigger_above_everything_clears_foreshock(events in arb_events(), pick in 0usize..40) {
            let mut events = events;
            let k = pick % events.len();
            let e = &events[k];
            events[k] = Event::new(e.id.clone(), e.time, e.latitude, e.longitude, e.depth, 9.0).unwrap();
            let cat = Catalog::new(events.clone());
            let trig = cat.events().iter().find(|x| x.id == events[k].id).unwrap();
            prop_assert!(!label_sample(&cat, trig, &LabelConfig::default()).unwrap().label_foreshock);
        }
    }
}
