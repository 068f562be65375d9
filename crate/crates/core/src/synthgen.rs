//! Synthetic catalogs with known Gutenberg-Richter, Omori-Utsu and Bath
//! parameters.
//!
//! Mainshocks are placed uniformly in a square region and time span. Each
//! spawns a single generation of aftershocks (no cascades) whose delays
//! follow the truncated Omori-Utsu density and whose magnitudes follow
//! Gutenberg-Richter below `M_main - bath_dm`. The largest aftershock is
//! forced to exactly `M_main - bath_dm`, so the Bath relation holds with no
//! sampling noise.
//!
//! All randomness comes from one ChaCha8 stream seeded by
//! [`SynthConfig::seed`] and consumed in a fixed order.

use std::f64::consts::LN_10;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Event, MAX_DEPTH_KM, MAX_MAGNITUDE};
use crate::{Error, Result, SECONDS_PER_DAY};

/// Tsunami flag assignment: events of at least `magnitude` no deeper than
/// `max_depth` km are flagged with probability `probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsunamiRule {
    pub magnitude: f64,
    pub max_depth: f64,
    pub probability: f64,
}

impl Default for TsunamiRule {
    fn default() -> Self {
        TsunamiRule {
            magnitude: 7.0,
            max_depth: 70.0,
            probability: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Gutenberg-Richter slope for aftershock magnitudes.
    pub b_true: f64,
    /// Slope for mainshock magnitudes; `b_true` when unset.
    pub mainshock_b: Option<f64>,
    pub p_true: f64,
    /// Days.
    pub c_true: f64,
    pub bath_dm: f64,
    pub m_min: f64,
    pub m_max: f64,
    /// Lower magnitude bound for mainshocks.
    pub mainshock_min: f64,
    pub n_mainshocks: usize,
    /// Expected aftershocks of a magnitude-5 mainshock.
    pub aftershock_productivity: f64,
    /// Productivity scales as `10^(alpha (M - 5))`; 0 makes it
    /// magnitude-independent.
    pub productivity_alpha: f64,
    /// Omori truncation, days.
    pub horizon: f64,
    /// Span of mainshock origin times, days.
    pub duration_days: f64,
    /// Side of the square source region, degrees.
    pub spatial_extent: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Share of mainshocks in 0-70 km; the rest fall in 70-700 km.
    pub shallow_fraction: f64,
    pub tsunami_rule: TsunamiRule,
    /// Epoch seconds of the first possible mainshock.
    pub start_time: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            b_true: 1.0,
            mainshock_b: None,
            p_true: 1.1,
            c_true: 0.1,
            bath_dm: 1.2,
            m_min: 2.5,
            m_max: 8.5,
            mainshock_min: 5.0,
            n_mainshocks: 500,
            aftershock_productivity: 12.5,
            productivity_alpha: 0.0,
            horizon: 90.0,
            duration_days: 730.0,
            spatial_extent: 10.0,
            center_lat: 0.0,
            center_lon: 0.0,
            shallow_fraction: 0.75,
            tsunami_rule: TsunamiRule::default(),
            // 2000-01-01T00:00:00Z
            start_time: 946_684_800.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.m_min < self.m_max) {
            return bad(format!(
                "m_min {} must be below m_max {}",
                self.m_min, self.m_max
            ));
        }
        if self.m_min < 0.0 || self.m_max > MAX_MAGNITUDE {
            return bad(format!("magnitudes must lie in [0, {MAX_MAGNITUDE}]"));
        }
        if !(self.mainshock_min >= self.m_min && self.mainshock_min < self.m_max) {
            return bad(format!(
                "mainshock_min {} must lie in [m_min, m_max)",
                self.mainshock_min
            ));
        }
        for (name, v) in [
            ("b_true", self.b_true),
            ("mainshock_b", self.mainshock_b.unwrap_or(self.b_true)),
            ("c_true", self.c_true),
            ("horizon", self.horizon),
            ("duration_days", self.duration_days),
            ("spatial_extent", self.spatial_extent),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.p_true >= 0.0) || !self.p_true.is_finite() {
            return bad(format!("p_true = {} must be non-negative", self.p_true));
        }
        if !(self.aftershock_productivity >= 0.0) || !self.productivity_alpha.is_finite() {
            return bad("aftershock productivity must be non-negative".into());
        }
        if !(self.bath_dm >= 0.0) {
            return bad(format!("bath_dm = {} must be non-negative", self.bath_dm));
        }
        if !(0.0..=1.0).contains(&self.shallow_fraction)
            || !(0.0..=1.0).contains(&self.tsunami_rule.probability)
        {
            return bad("fractions and probabilities must lie in [0, 1]".into());
        }
        if self.center_lat.abs() + self.spatial_extent / 2.0 > 90.0 {
            return bad("source region crosses a pole".into());
        }
        if self.n_mainshocks == 0 {
            return bad("n_mainshocks must be positive".into());
        }
        Ok(())
    }
}

/// Inverse-CDF draws from `∝ 10^(-b M)` on `[m_min, m_max]`.
pub fn sample_gr_magnitudes<R: Rng>(
    b: f64,
    m_min: f64,
    m_max: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    if !(m_min < m_max) || !m_min.is_finite() || !m_max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "degenerate magnitude bounds [{m_min}, {m_max}]"
        )));
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidInput(format!("b = {b} must be positive")));
    }
    let beta = b * LN_10;
    // mass of the truncated exponential
    let mass = -(-beta * (m_max - m_min)).exp_m1();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (m_min - (-u * mass).ln_1p() / beta).min(m_max)
        })
        .collect())
}

/// Inverse-CDF draws from `∝ (t + c)^(-p)` truncated to `(0, horizon]`.
pub fn sample_omori_times<R: Rng>(
    p: f64,
    c: f64,
    n: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} must be positive"
        )));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidInput(format!("c = {c} must be positive")));
    }
    if !p.is_finite() {
        return Err(Error::InvalidInput(format!("p = {p} must be finite")));
    }
    let q = 1.0 - p;
    let span = ((horizon + c) / c).ln();
    let growth = (q * span).exp_m1();
    let draw = |u: f64| {
        // ln((t + c) / c) = ln(1 + u((1 + H/c)^q - 1)) / q
        let log_tc = if q.abs() < 1e-12 {
            u * span
        } else {
            (u * growth).ln_1p() / q
        };
        if q == 1.0 {
            u * horizon
        } else {
            c * log_tc.exp_m1()
        }
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = 1.0 - rng.random::<f64>();
        let t = draw(u).min(horizon);
        if t > 0.0 {
            out.push(t);
        }
    }
    Ok(out)
}

/// True parentage of one aftershock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parentage {
    pub child_id: String,
    pub parent_id: String,
    pub delay_days: f64,
    pub child_magnitude: f64,
    pub parent_magnitude: f64,
    /// Great-circle offset from the parent, degrees.
    pub offset_deg: f64,
}

/// Bookkeeping produced alongside a synthetic catalog.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationLog {
    pub mainshock_ids: Vec<String>,
    pub aftershocks: Vec<Parentage>,
}

impl GenerationLog {
    /// `(M_main, M_max_after)` for every mainshock with at least one
    /// aftershock.
    pub fn bath_pairs(&self) -> Vec<(f64, f64)> {
        let mut pairs: Vec<(String, f64, f64)> = Vec::new();
        for a in &self.aftershocks {
            match pairs.iter_mut().find(|(id, _, _)| *id == a.parent_id) {
                Some(entry) => entry.2 = entry.2.max(a.child_magnitude),
                None => pairs.push((a.parent_id.clone(), a.parent_magnitude, a.child_magnitude)),
            }
        }
        pairs.into_iter().map(|(_, m, a)| (m, a)).collect()
    }

    /// All true aftershock delays, days.
    pub fn delays(&self) -> Vec<f64> {
        self.aftershocks.iter().map(|a| a.delay_days).collect()
    }

    /// Comma-separated `child_id,parent_id,delay_days` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Parse(format!("writing generation log: {e}"));
        w.write_record(["child_id", "parent_id", "delay_days"])
            .map_err(io)?;
        for a in &self.aftershocks {
            w.write_record([
                a.child_id.as_str(),
                a.parent_id.as_str(),
                &crate::catalog::format_sig6(a.delay_days),
            ])
            .map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Parse(format!("writing generation log: {e}")))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Point at angular distance `dist_deg` along `bearing` (radians from north)
/// on the unit sphere.
fn destination(lat: f64, lon: f64, bearing: f64, dist_deg: f64) -> (f64, f64) {
    let (phi1, lam1, delta) = (lat.to_radians(), lon.to_radians(), dist_deg.to_radians());
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lam2 = lam1
        + (bearing.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    let lon2 = (lam2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    (phi2.to_degrees().clamp(-90.0, 90.0), lon2)
}

fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 540.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 && lon > 0.0 {
        180.0
    } else {
        w
    }
}

/// Largest angular offset of an aftershock from its mainshock, degrees.
pub const AFTERSHOCK_SPREAD_DEG: f64 = 0.5;
/// Aftershock depth jitter around the mainshock, km.
pub const AFTERSHOCK_DEPTH_JITTER_KM: f64 = 5.0;

/// Builds the catalog described by `cfg`; magnitude completeness is set to
/// `m_min`.
pub fn generate_catalog(cfg: &SynthConfig) -> Result<(Catalog, GenerationLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let main_b = cfg.mainshock_b.unwrap_or(cfg.b_true);
    let main_mags = sample_gr_magnitudes(
        main_b,
        cfg.mainshock_min,
        cfg.m_max,
        cfg.n_mainshocks,
        &mut rng,
    )?;
    let half = cfg.spatial_extent / 2.0;
    let rule = cfg.tsunami_rule;
    let flag = |rng: &mut ChaCha8Rng, m: f64, depth: f64| {
        m >= rule.magnitude && depth <= rule.max_depth && rng.random::<f64>() < rule.probability
    };

    let mut events = Vec::new();
    let mut log = GenerationLog::default();
    for (i, &m_main) in main_mags.iter().enumerate() {
        let t_main = cfg.start_time + rng.random::<f64>() * cfg.duration_days * SECONDS_PER_DAY;
        let lat = cfg.center_lat + rng.random_range(-half..=half);
        let lon = wrap_lon(cfg.center_lon + rng.random_range(-half..=half));
        let depth = if rng.random::<f64>() < cfg.shallow_fraction {
            rng.random_range(0.0..70.0)
        } else {
            rng.random_range(70.0..700.0)
        };
        let id = format!("m{i:05}");
        let tsunami = flag(&mut rng, m_main, depth);
        events.push(Event::new(&id, t_main, lat, lon, depth, m_main)?.with_tsunami(tsunami));
        log.mainshock_ids.push(id.clone());

        let rate =
            cfg.aftershock_productivity * 10f64.powf(cfg.productivity_alpha * (m_main - 5.0));
        let count = if rate > 0.0 {
            let poisson = Poisson::new(rate)
                .map_err(|e| Error::InvalidInput(format!("aftershock rate {rate}: {e}")))?;
            poisson.sample(&mut rng) as usize
        } else {
            0
        };
        if count == 0 {
            continue;
        }
        let cap = (m_main - cfg.bath_dm).max(cfg.m_min);
        let mut mags = if cap > cfg.m_min {
            sample_gr_magnitudes(cfg.b_true, cfg.m_min, cap, count, &mut rng)?
        } else {
            vec![cfg.m_min; count]
        };
        mags[0] = cap;
        let delays = sample_omori_times(cfg.p_true, cfg.c_true, count, cfg.horizon, &mut rng)?;
        for (j, (&m, &dt)) in mags.iter().zip(&delays).enumerate() {
            let bearing = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = AFTERSHOCK_SPREAD_DEG * rng.random::<f64>().sqrt();
            let (alat, alon) = destination(lat, lon, bearing, offset);
            let adepth = (depth
                + rng.random_range(-AFTERSHOCK_DEPTH_JITTER_KM..=AFTERSHOCK_DEPTH_JITTER_KM))
            .clamp(0.0, MAX_DEPTH_KM);
            let child = format!("{id}a{j:04}");
            let tsunami = flag(&mut rng, m, adepth);
            events.push(
                Event::new(&child, t_main + dt * SECONDS_PER_DAY, alat, alon, adepth, m)?
                    .with_tsunami(tsunami),
            );
            log.aftershocks.push(Parentage {
                child_id: child,
                parent_id: id.clone(),
                delay_days: dt,
                child_magnitude: m,
                parent_magnitude: m_main,
                offset_deg: offset,
            });
        }
    }
    Ok((Catalog::new(events).with_completeness(cfg.m_min), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{fit_omori, mle_b};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gr_sampler_recovers_b() {
        let mags = sample_gr_magnitudes(1.0, 2.0, 9.0, 50_000, &mut rng(1)).unwrap();
        let est = mle_b(&mags, 2.0, 0.0).unwrap();
        assert!((est.b - 1.0).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn gr_sampler_bounds_and_limits() {
        let one = sample_gr_magnitudes(1.0, 2.0, 3.0, 1, &mut rng(2)).unwrap();
        assert!((2.0..=3.0).contains(&one[0]));
        let steep = sample_gr_magnitudes(5.0, 2.0, 8.0, 10_000, &mut rng(3)).unwrap();
        let mean = steep.iter().sum::<f64>() / steep.len() as f64;
        assert!(mean - 2.0 < 0.1, "{mean}");
        assert!(sample_gr_magnitudes(1.0, 3.0, 3.0, 5, &mut rng(4)).is_err());
        assert!(sample_gr_magnitudes(1.0, 2.0, 3.0, 0, &mut rng(4)).is_err());
    }

    #[test]
    fn omori_sampler_recovers_parameters() {
        let d = sample_omori_times(1.1, 0.1, 50_000, 90.0, &mut rng(5)).unwrap();
        assert!(d.iter().all(|t| *t > 0.0 && *t <= 90.0));
        let fit = fit_omori(&d, 90.0).unwrap();
        assert!((fit.p - 1.1).abs() < 0.05, "{fit:?}");
        assert!((fit.c - 0.1).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn omori_p_zero_is_uniform() {
        let mut d = sample_omori_times(0.0, 0.1, 50_000, 90.0, &mut rng(6)).unwrap();
        d.sort_by(f64::total_cmp);
        let n = d.len() as f64;
        let ks = d
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let f = t / 90.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "{ks}");
    }

    #[test]
    fn omori_p_one_uses_log_branch() {
        let d = sample_omori_times(1.0, 0.05, 20_000, 30.0, &mut rng(7)).unwrap();
        assert!(d.iter().all(|t| *t > 0.0 && *t <= 30.0));
        // median of the p = 1 law: (t + c) = c sqrt((H + c) / c)
        let mut s = d.clone();
        s.sort_by(f64::total_cmp);
        let median = s[s.len() / 2];
        let want = 0.05 * (30.05f64 / 0.05).sqrt() - 0.05;
        assert!((median - want).abs() / want < 0.05, "{median} vs {want}");
        assert!(sample_omori_times(1.0, 0.05, 5, 0.0, &mut rng(7)).is_err());
    }

    #[test]
    fn small_catalog_counts_and_parentage() {
        let cfg = SynthConfig {
            n_mainshocks: 100,
            aftershock_productivity: 20.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let (cat, log) = generate_catalog(&cfg).unwrap();
        assert_eq!(cat.len(), 100 + log.aftershocks.len());
        let expected = 2000.0;
        assert!((log.aftershocks.len() as f64 - expected).abs() < 4.0 * expected.sqrt());
        for a in &log.aftershocks {
            assert!(a.delay_days > 0.0 && a.delay_days <= cfg.horizon);
            assert!(a.offset_deg <= AFTERSHOCK_SPREAD_DEG);
        }
        let pairs = log.bath_pairs();
        let mean = pairs.iter().map(|(m, a)| m - a).sum::<f64>() / pairs.len() as f64;
        assert!((mean - 1.2).abs() < 0.01, "{mean}");
        assert_eq!(cat.magnitude_completeness(), cfg.m_min);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_mainshocks: 30,
            seed: 3,
            ..SynthConfig::default()
        };
        let write = || {
            let (cat, log) = generate_catalog(&cfg).unwrap();
            let mut a = Vec::new();
            crate::catalog::write_catalog(&cat, &mut a).unwrap();
            log.write_csv(&mut a).unwrap();
            a
        };
        assert_eq!(write(), write());
    }

    #[test]
    fn destination_stays_within_spread() {
        for (lat, lon) in [(0.0, 0.0), (60.0, 179.9), (-89.7, -10.0)] {
            for k in 0..16 {
                let bearing = k as f64 * 0.4;
                let (la, lo) = destination(lat, lon, bearing, 0.5);
                assert!((-90.0..=90.0).contains(&la) && (-180.0..=180.0).contains(&lo));
                let d = crate::labeling::great_circle_km((lat, lon), (la, lo));
                assert!((d - 0.5f64.to_radians() * 6371.0).abs() < 1e-6, "{d}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig {
                m_min: 9.0,
                ..base.clone()
            },
            SynthConfig {
                c_true: 0.0,
                ..base.clone()
            },
            SynthConfig {
                n_mainshocks: 0,
                ..base.clone()
            },
            SynthConfig {
                center_lat: 88.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(
                generate_catalog(&cfg),
                Err(Error::InvalidInput(_))
            ));
        }
    }
}
