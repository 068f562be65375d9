//! Sixteen-component event feature vectors.
//!
//! | index | value |
//! |---|---|
//! | 0 | M / 10 |
//! | 1 | (φ + 90) / 180 |
//! | 2 | (λ + 180) / 360 |
//! | 3 | depth / 700 km |
//! | 4, 5 | sin ω, cos ω with ω = 2π · day-of-year / 365 (day 0 = Jan 1) |
//! | 6..9 | depth class one-hot: < 70 km, 70-300 km, > 300 km |
//! | 9 | log10(1 + n) / 4, n = neighbourhood count |
//! | 10 | neighbourhood max magnitude / 10 |
//! | 11 | log10(1 + Σ E) / 20 over the neighbourhood |
//! | 12 | clamp((local max - M) / 10, -1, 1) |
//! | 13 | n(7 d) / max(n(30 d), 1) |
//! | 14 | n(30 d) / max(n(90 d), 1) |
//! | 15 | days since the latest neighbourhood event / window, 1 if none |
//!
//! Every component is clamped into `[-1, 1]`. Only events strictly before
//! the target time are read.

use std::io::Write;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

use crate::catalog::{format_sig6, Catalog, Event};
use crate::{Error, Result, SECONDS_PER_DAY};

pub const FEATURE_DIM: usize = 16;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "magnitude",
    "latitude",
    "longitude",
    "depth",
    "sin_doy",
    "cos_doy",
    "shallow",
    "intermediate",
    "deep",
    "local_count",
    "local_max_magnitude",
    "local_energy",
    "magnitude_deficit",
    "trend_short",
    "trend_long",
    "recency",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Latitude half-width Δφ, degrees.
    pub lat_half_width: f64,
    /// Longitude half-width Δλ at the equator, degrees; widened by
    /// `1 / max(cos φ, 0.1)`.
    pub lon_half_width: f64,
    /// Look-back, days.
    pub window_days: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            lat_half_width: 1.0,
            lon_half_width: 1.0,
            window_days: 90.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lat_half_width", self.lat_half_width),
            ("lon_half_width", self.lon_half_width),
            ("window_days", self.window_days),
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

pub type FeatureVector = [f64; FEATURE_DIM];

/// Longitude difference wrapped into `[-180, 180]`.
pub fn wrap_lon_diff(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}

fn in_box(center: &Event, e: &Event, cfg: &FeatureConfig) -> bool {
    let lon_half = cfg.lon_half_width / center.latitude.to_radians().cos().max(0.1);
    (e.latitude - center.latitude).abs() <= cfg.lat_half_width
        && wrap_lon_diff(e.longitude, center.longitude).abs() <= lon_half
}

/// Events in `[t - window, t)` inside the latitude/longitude box around
/// `event`.
pub fn local_neighborhood<'a>(
    catalog: &'a Catalog,
    event: &Event,
    cfg: &FeatureConfig,
) -> Vec<&'a Event> {
    catalog
        .window(event.time - cfg.window_days * SECONDS_PER_DAY, event.time)
        .iter()
        .filter(|e| in_box(event, e, cfg))
        .collect()
}

/// Zero-based day of year of an epoch time (UTC).
pub fn day_of_year(time: f64) -> u32 {
    DateTime::from_timestamp(time.floor() as i64, 0)
        .map(|d| d.ordinal0())
        .unwrap_or(0)
}

/// Components 0..9, which depend only on the event itself (unclamped).
pub fn intrinsic_features(
    magnitude: f64,
    latitude: f64,
    longitude: f64,
    depth: f64,
    time: f64,
) -> [f64; 9] {
    let mut x = [0.0; 9];
    x[0] = magnitude / 10.0;
    x[1] = (latitude + 90.0) / 180.0;
    x[2] = (longitude + 180.0) / 360.0;
    x[3] = depth / 700.0;
    let omega = std::f64::consts::TAU * f64::from(day_of_year(time)) / 365.0;
    x[4] = omega.sin();
    x[5] = omega.cos();
    let class = if depth < 70.0 {
        0
    } else if depth <= 300.0 {
        1
    } else {
        2
    };
    x[6 + class] = 1.0;
    x
}

pub fn event_features(catalog: &Catalog, event: &Event, cfg: &FeatureConfig) -> FeatureVector {
    let mut x = [0.0; FEATURE_DIM];
    x[..9].copy_from_slice(&intrinsic_features(
        event.magnitude,
        event.latitude,
        event.longitude,
        event.depth,
        event.time,
    ));

    let t = event.time;
    let day = SECONDS_PER_DAY;
    let near = local_neighborhood(catalog, event, cfg);
    let local_max = near.iter().map(|e| e.magnitude).fold(0.0, f64::max);
    let energy: f64 = near.iter().map(|e| e.energy).sum();
    // trend windows are fixed at 7/30/90 days regardless of the neighbourhood window
    let count_since = |days: f64| {
        catalog
            .window(t - days * day, t)
            .iter()
            .filter(|e| in_box(event, e, cfg))
            .count() as f64
    };
    let (n7, n30, n90) = (count_since(7.0), count_since(30.0), count_since(90.0));
    x[9] = (near.len() as f64).ln_1p() / std::f64::consts::LN_10 / 4.0;
    x[10] = local_max / 10.0;
    x[11] = energy.ln_1p() / std::f64::consts::LN_10 / 20.0;
    x[12] = (local_max - event.magnitude) / 10.0;
    x[13] = n7 / n30.max(1.0);
    x[14] = n30 / n90.max(1.0);
    x[15] = near
        .last()
        .map(|e| (t - e.time) / (cfg.window_days * day))
        .unwrap_or(1.0);
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    x
}

/// Comma-separated matrix with a header of [`FEATURE_NAMES`], one row per
/// vector, 6 significant digits.
pub fn write_features<W: Write>(rows: &[FeatureVector], writer: W) -> Result<()> {
    let err = |e: csv::Error| Error::Parse(format!("writing features: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FEATURE_NAMES).map_err(err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format_sig6(*v)))
            .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("writing features: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 2021-01-01T00:00:00Z, a non-leap year
    const JAN1: f64 = 1_609_459_200.0;
    const DAY: f64 = SECONDS_PER_DAY;

    fn ev(t: f64, lat: f64, lon: f64, depth: f64, m: f64) -> Event {
        Event::new("e", t, lat, lon, depth, m).unwrap()
    }

    #[test]
    fn intrinsic_endpoints() {
        let x = intrinsic_features(10.0, -90.0, -180.0, 0.0, JAN1);
        assert_eq!(&x[..6], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let e = ev(JAN1, -90.0, -180.0, 0.0, 9.1);
        let full = event_features(&Catalog::default(), &e, &FeatureConfig::default());
        assert!((full[0] - 0.91).abs() < 1e-15);
        assert_eq!(&full[1..6], &x[1..6]);
    }

    #[test]
    fn depth_classes() {
        let cat = Catalog::default();
        let cfg = FeatureConfig::default();
        for (d, hot) in [(50.0, 6), (100.0, 7), (400.0, 8), (70.0, 7), (300.0, 7)] {
            let x = event_features(&cat, &ev(JAN1, 0.0, 0.0, d, 5.0), &cfg);
            let onehot = &x[6..9];
            assert_eq!(onehot.iter().sum::<f64>(), 1.0);
            assert_eq!(x[hot], 1.0, "depth {d}");
        }
    }

    #[test]
    fn empty_neighbourhood() {
        let x = event_features(
            &Catalog::default(),
            &ev(JAN1, 0.0, 0.0, 10.0, 5.0),
            &FeatureConfig::default(),
        );
        assert_eq!(&x[9..15], &[0.0, 0.0, 0.0, -0.5, 0.0, 0.0]);
        assert_eq!(x[15], 1.0);
    }

    #[test]
    fn neighbourhood_geometry() {
        let cfg = FeatureConfig {
            lat_half_width: 1.0,
            lon_half_width: 2.0,
            window_days: 30.0,
        };
        let t = JAN1 + 100.0 * DAY;
        let wrap = ev(t - DAY, 0.0, 179.5, 10.0, 4.0);
        let target = ev(t, 0.0, -179.5, 10.0, 5.0);
        let cat = Catalog::new(vec![wrap.clone(), target.clone()]);
        assert_eq!(local_neighborhood(&cat, &target, &cfg).len(), 1);

        // at the equator the longitude half-width is exactly Δλ
        let edge = Catalog::new(vec![
            ev(t - DAY, 0.0, 2.0, 10.0, 4.0),
            ev(t - DAY, 0.0, 2.01, 10.0, 4.0),
        ]);
        assert_eq!(
            local_neighborhood(&edge, &ev(t, 0.0, 0.0, 10.0, 5.0), &cfg).len(),
            1
        );

        // at 89° the clamp makes the half-width 10 Δλ
        let polar = Catalog::new(vec![
            ev(t - DAY, 89.0, 19.9, 10.0, 4.0),
            ev(t - DAY, 89.0, 20.1, 10.0, 4.0),
        ]);
        assert_eq!(
            local_neighborhood(&polar, &ev(t, 89.0, 0.0, 10.0, 5.0), &cfg).len(),
            1
        );
    }

    #[test]
    fn local_block_values() {
        let t = JAN1 + 200.0 * DAY;
        let cat = Catalog::new(vec![
            ev(t - 60.0 * DAY, 0.1, 0.1, 10.0, 6.0),
            ev(t - 20.0 * DAY, 0.1, 0.1, 10.0, 4.0),
            ev(t - 2.0 * DAY, 0.1, 0.1, 10.0, 4.0),
            ev(t, 0.1, 0.1, 10.0, 7.0),
        ]);
        let x = event_features(&cat, &ev(t, 0.0, 0.0, 10.0, 5.0), &FeatureConfig::default());
        assert!((x[9] - 4f64.log10() / 4.0).abs() < 1e-15);
        assert_eq!(x[10], 0.6);
        assert!((x[12] - 0.1).abs() < 1e-15);
        assert_eq!(x[13], 0.5);
        assert!((x[14] - 2.0 / 3.0).abs() < 1e-15);
        assert!((x[15] - 2.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn day_of_year_is_zero_based() {
        assert_eq!(day_of_year(JAN1), 0);
        assert_eq!(day_of_year(JAN1 + 364.0 * DAY + 5.0), 364);
    }

    #[test]
    fn csv_export() {
        let mut out = Vec::new();
        write_features(&[[0.5; FEATURE_DIM]], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 16);
        assert_eq!(lines.next().unwrap(), vec!["0.5"; 16].join(","));
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (
            0.0..4.0e9f64,
            -90.0..=90.0f64,
            -180.0..=180.0f64,
            0.0..=800.0f64,
            0.0..=9.1f64,
        )
            .prop_map(|(t, la, lo, d, m)| ev(t, la, lo, d, m))
    }

    proptest! {
        #[test]
        fn components_bounded(target in arb_event(), others in proptest::collection::vec(arb_event(), 0..30)) {
            let x = event_features(&Catalog::new(others), &target, &FeatureConfig::default());
            for v in x {
                prop_assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
            }
            prop_assert!((0.0..=1.0).contains(&x[3]));
            prop_assert_eq!(x[6] + x[7] + x[8], 1.0);
        }

        #[test]
        fn seasonal_terms_repeat_yearly(day in 0u32..365, secs in 0.0..86_000.0f64) {
            let a = ev(JAN1 + f64::from(day) * DAY + secs, 0.0, 0.0, 10.0, 5.0);
            let b = ev(JAN1 + 365.0 * DAY + f64::from(day) * DAY + secs, 0.0, 0.0, 10.0, 5.0);
            let cat = Catalog::default();
            let (xa, xb) = (event_features(&cat, &a, &FeatureConfig::default()), event_features(&cat, &b, &FeatureConfig::default()));
            prop_assert_eq!(&xa[4..6], &xb[4..6]);
        }

        #[test]
        fn future_events_do_not_leak(target in arb_event(), past in proptest::collection::vec(arb_event(), 0..20), future in proptest::collection::vec(arb_event(), 0..20)) {
            let cfg = FeatureConfig::default();
            let past: Vec<Event> = past.into_iter().filter(|e| e.time < target.time).collect();
            let future: Vec<Event> = future.into_iter().filter(|e| e.time >= target.time).collect();
            let a = event_features(&Catalog::new(past.clone()), &target, &cfg);
            let mut all = past;
            all.extend(future);
            let b = event_features(&Catalog::new(all), &target, &cfg);
            prop_assert_eq!(a, b);
        }
    }
}
