//! Structured reports for `fit-physics` and `eval`, serialized as TOML.

use std::collections::HashMap;

use poseidon::catalog::{Catalog, Event};
use poseidon::eval::{EnergyReport, TaskMetrics};
use poseidon::labeling::{great_circle_km, LabelConfig};
use poseidon::physics::{fit_omori, mle_b, mle_b_truncated, omori_integral, Derived};
use poseidon::{Error, Result, SECONDS_PER_DAY};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GrReport {
    /// Conditional MLE over attributed aftershocks.
    pub b: Option<f64>,
    pub std_err: Option<f64>,
    pub n: usize,
    /// Aki-Utsu over every event at or above completeness.
    pub b_catalog: f64,
    pub std_err_catalog: f64,
    pub n_catalog: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OmoriReport {
    pub p: f64,
    pub c: f64,
    /// From the observed information; NaN when the likelihood is not
    /// locally concave.
    pub p_std_err: f64,
    pub c_std_err: f64,
    pub n: usize,
    /// Days.
    pub horizon: f64,
    pub log_likelihood: f64,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BathReport {
    /// Mean of `M_main - M_max_after`.
    pub delta_m: f64,
    pub std_err: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhysicsReport {
    pub attribution: Attribution,
    pub completeness: f64,
    pub events: usize,
    /// Mainshocks with at least one attributed aftershock.
    pub sequences: usize,
    pub gutenberg_richter: GrReport,
    pub omori: Option<OmoriReport>,
    pub bath: Option<BathReport>,
}

fn omori_log_likelihood(delays: &[f64], horizon: f64, p: f64, c: f64) -> f64 {
    let norm = omori_integral(0.0, horizon, p, c).ln();
    -p * delays.iter().map(|t| (t + c).ln()).sum::<f64>() - delays.len() as f64 * norm
}

/// Standard errors of `(p, c)` from a central-difference Hessian of the
/// log-likelihood.
pub fn omori_std_errors(delays: &[f64], horizon: f64, p: f64, c: f64) -> (f64, f64) {
    let (hp, hc) = (1e-4, 1e-4 * c);
    let f = |dp: f64, dc: f64| omori_log_likelihood(delays, horizon, p + dp, c + dc);
    let f0 = f(0.0, 0.0);
    let d_pp = (f(hp, 0.0) - 2.0 * f0 + f(-hp, 0.0)) / (hp * hp);
    let d_cc = (f(0.0, hc) - 2.0 * f0 + f(0.0, -hc)) / (hc * hc);
    let d_pc = (f(hp, hc) - f(hp, -hc) - f(-hp, hc) + f(-hp, -hc)) / (4.0 * hp * hc);
    // Covariance is the inverse of the negated Hessian.
    let (a, b, d) = (-d_pp, -d_pc, -d_cc);
    let det = a * d - b * b;
    if !(a > 0.0 && det > 0.0) {
        return (f64::NAN, f64::NAN);
    }
    ((d / det).sqrt(), (a / det).sqrt())
}

/// One mainshock with the events attributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub mainshock_magnitude: f64,
    /// `(delay_days, magnitude)` of each aftershock.
    pub members: Vec<(f64, f64)>,
}

impl Cluster {
    fn largest(&self) -> Option<f64> {
        self.members.iter().map(|m| m.1).reduce(f64::max)
    }
}

/// How aftershocks were assigned to mainshocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribution {
    /// A generator parentage log.
    Parentage,
    /// Each event joins the earlier, larger trigger-sized event that
    /// minimises `dt * r^1.6 * 10^(-M)` within the sequence window and
    /// radius.
    NearestNeighbour,
}

const FRACTAL_DIM: f64 = 1.6;
/// Distance floor, km, so that co-located events stay comparable.
const MIN_DIST_KM: f64 = 1.0;

/// Clusters from space-time-magnitude proximity. Candidate parents are
/// events of at least `min_trigger_magnitude`; clusters keep their direct
/// children only.
pub fn nearest_neighbour_clusters(catalog: &Catalog, labels: &LabelConfig) -> Vec<Cluster> {
    let events = catalog.events();
    let span = labels.sequence_window * SECONDS_PER_DAY;
    let mut children: Vec<Vec<(f64, f64)>> = vec![Vec::new(); events.len()];
    let mut is_child = vec![false; events.len()];
    for (j, e) in events.iter().enumerate() {
        let lo = events.partition_point(|x| x.time < e.time - span);
        let mut best: Option<(f64, usize)> = None;
        for (i, cand) in events[lo..j].iter().enumerate().map(|(k, c)| (lo + k, c)) {
            if cand.magnitude < labels.min_trigger_magnitude
                || cand.magnitude <= e.magnitude
                || cand.time >= e.time
            {
                continue;
            }
            let r = great_circle_km((cand.latitude, cand.longitude), (e.latitude, e.longitude));
            if r > labels.sequence_radius {
                continue;
            }
            let dt = (e.time - cand.time) / SECONDS_PER_DAY;
            let eta = dt * r.max(MIN_DIST_KM).powf(FRACTAL_DIM) * 10f64.powf(-cand.magnitude);
            if best.is_none_or(|(b, _)| eta < b) {
                best = Some((eta, i));
            }
        }
        if let Some((_, i)) = best {
            children[i].push(((e.time - events[i].time) / SECONDS_PER_DAY, e.magnitude));
            is_child[j] = true;
        }
    }
    events
        .iter()
        .zip(children)
        .zip(is_child)
        .filter(|((e, _), child)| !child && e.magnitude >= labels.min_trigger_magnitude)
        .map(|((e, members), _)| Cluster {
            mainshock_magnitude: e.magnitude,
            members,
        })
        .collect()
}

/// Clusters from a `child_id,parent_id,delay_days` parentage table.
pub fn parentage_clusters(catalog: &Catalog, table: impl std::io::Read) -> Result<Vec<Cluster>> {
    let by_id: HashMap<&str, &Event> = catalog
        .events()
        .iter()
        .map(|e| (e.id.as_str(), e))
        .collect();
    let mut rdr = csv::Reader::from_reader(table);
    let bad = |m: String| Error::Parse(format!("parentage table: {m}"));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
            })
    };
    let (child_col, parent_col) = (col("child_id")?, col("parent_id")?);
    let mut order: Vec<&str> = Vec::new();
    let mut clusters: HashMap<&str, Cluster> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let lookup = |c: usize| {
            let id = row.get(c).unwrap_or("");
            by_id
                .get_key_value(id)
                .map(|(k, e)| (*k, *e))
                .ok_or_else(|| bad(format!("event `{id}` is not in the catalog")))
        };
        let (_, child) = lookup(child_col)?;
        let (pid, parent) = lookup(parent_col)?;
        let cluster = clusters.entry(pid).or_insert_with(|| {
            order.push(pid);
            Cluster {
                mainshock_magnitude: parent.magnitude,
                members: Vec::new(),
            }
        });
        cluster.members.push((
            (child.time - parent.time) / SECONDS_PER_DAY,
            child.magnitude,
        ));
    }
    Ok(order.iter().filter_map(|id| clusters.remove(id)).collect())
}

fn cluster_gr(clusters: &[Cluster], m_c: f64) -> Option<(f64, f64, usize)> {
    let mut pairs = Vec::new();
    for c in clusters {
        let mut mags: Vec<f64> = c
            .members
            .iter()
            .map(|m| m.1)
            .filter(|m| *m >= m_c)
            .collect();
        if mags.len() < 2 {
            continue;
        }
        let top = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let at = mags.iter().position(|m| *m == top)?;
        mags.swap_remove(at);
        pairs.extend(mags.into_iter().map(|m| (m, top)));
    }
    mle_b_truncated(&pairs, m_c)
        .ok()
        .map(|e| (e.b, e.std_err, e.n))
}

/// Reference estimates of b, `(p, c)` and the Bath gap. Aftershock
/// magnitudes within a cluster are treated as Gutenberg-Richter truncated
/// at the cluster's largest aftershock, which is itself left out.
pub fn physics_report(
    catalog: &Catalog,
    clusters: &[Cluster],
    attribution: Attribution,
    horizon: f64,
) -> Result<PhysicsReport> {
    let m_c = catalog.magnitude_completeness();
    let complete: Vec<f64> = catalog
        .events()
        .iter()
        .map(|e| e.magnitude)
        .filter(|m| *m >= m_c)
        .collect();
    let catalog_b = mle_b(&complete, m_c, 0.0)?;
    let seq_b = cluster_gr(clusters, m_c);

    let delays: Vec<f64> = clusters
        .iter()
        .flat_map(|c| c.members.iter().map(|m| m.0))
        .filter(|t| *t > 0.0 && *t <= horizon)
        .collect();
    let omori = match fit_omori(&delays, horizon) {
        Ok(fit) => {
            let (p_se, c_se) = omori_std_errors(&delays, horizon, fit.p, fit.c);
            Some(OmoriReport {
                p: fit.p,
                c: fit.c,
                p_std_err: p_se,
                c_std_err: c_se,
                n: fit.n,
                horizon,
                log_likelihood: fit.log_likelihood,
                at_boundary: fit.at_boundary,
            })
        }
        Err(Error::Estimation(msg)) => {
            log::warn!("Omori fit skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };

    let gaps: Vec<f64> = clusters
        .iter()
        .filter_map(|c| Some(c.mainshock_magnitude - c.largest()?))
        .collect();
    let bath = (gaps.len() >= 2).then(|| {
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        BathReport {
            delta_m: mean,
            std_err: (var / n).sqrt(),
            n: gaps.len(),
        }
    });

    Ok(PhysicsReport {
        attribution,
        completeness: m_c,
        events: catalog.len(),
        sequences: clusters.iter().filter(|c| !c.members.is_empty()).count(),
        gutenberg_richter: GrReport {
            b: seq_b.map(|s| s.0),
            std_err: seq_b.map(|s| s.1),
            n: seq_b.map_or(0, |s| s.2),
            b_catalog: catalog_b.b,
            std_err_catalog: catalog_b.std_err,
            n_catalog: catalog_b.n,
        },
        omori,
        bath,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub aftershock: TaskMetrics,
    pub tsunami: TaskMetrics,
    pub foreshock: TaskMetrics,
    /// Tsunami-flagged samples are the anomalous class.
    pub energy: EnergyReport,
    pub physics: Derived,
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse(format!("serialising report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use poseidon::synthgen::{generate_catalog, sample_omori_times, SynthConfig};
    use rand::SeedableRng;

    #[test]
    fn omori_std_errors_shrink_with_sample_size() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let small = sample_omori_times(1.1, 0.1, 2_000, 90.0, &mut rng).unwrap();
        let large = sample_omori_times(1.1, 0.1, 32_000, 90.0, &mut rng).unwrap();
        let (ps, cs) = omori_std_errors(&small, 90.0, 1.1, 0.1);
        let (pl, cl) = omori_std_errors(&large, 90.0, 1.1, 0.1);
        assert!(ps.is_finite() && cs.is_finite());
        // Standard errors scale as n^-1/2, so 16x the data gives about 1/4.
        assert!((pl / ps - 0.25).abs() < 0.08, "{pl} {ps}");
        assert!((cl / cs - 0.25).abs() < 0.08, "{cl} {cs}");
    }

    fn synthetic(
        n: usize,
        extent: f64,
    ) -> (SynthConfig, Catalog, poseidon::synthgen::GenerationLog) {
        let cfg = SynthConfig {
            n_mainshocks: n,
            spatial_extent: extent,
            seed: 11,
            ..SynthConfig::default()
        };
        let (cat, log) = generate_catalog(&cfg).unwrap();
        (cfg, cat, log)
    }

    fn assert_recovers(cfg: &SynthConfig, r: &PhysicsReport, bath_tol: f64) {
        let gr = &r.gutenberg_richter;
        assert!(
            (gr.b.unwrap() - cfg.b_true).abs() < 4.0 * gr.std_err.unwrap(),
            "{gr:?}"
        );
        let om = r.omori.as_ref().unwrap();
        assert!((om.p - cfg.p_true).abs() < 4.0 * om.p_std_err, "{om:?}");
        assert!((om.c - cfg.c_true).abs() < 4.0 * om.c_std_err, "{om:?}");
        let bath = r.bath.as_ref().unwrap();
        assert!((bath.delta_m - cfg.bath_dm).abs() < bath_tol, "{bath:?}");
    }

    #[test]
    fn parentage_log_recovers_generator_physics() {
        let (cfg, cat, log) = synthetic(300, 10.0);
        let mut table = Vec::new();
        log.write_csv(&mut table).unwrap();
        let clusters = parentage_clusters(&cat, table.as_slice()).unwrap();
        assert_eq!(
            clusters.iter().map(|c| c.members.len()).sum::<usize>(),
            log.aftershocks.len()
        );
        let r = physics_report(&cat, &clusters, Attribution::Parentage, cfg.horizon).unwrap();
        assert_recovers(&cfg, &r, 1e-9);
        assert!(to_toml(&r).unwrap().contains("attribution = \"parentage\""));
    }

    #[test]
    fn nearest_neighbour_recovers_sparse_sequences() {
        let (cfg, cat, _) = synthetic(300, 60.0);
        let clusters = nearest_neighbour_clusters(&cat, &LabelConfig::default());
        let r =
            physics_report(&cat, &clusters, Attribution::NearestNeighbour, cfg.horizon).unwrap();
        assert_recovers(&cfg, &r, 0.05);
    }

    #[test]
    fn parentage_table_must_match_the_catalog() {
        let (_, cat, _) = synthetic(5, 10.0);
        let table = "child_id,parent_id,delay_days\nnope,m00000,1.0\n";
        assert!(matches!(
            parentage_clusters(&cat, table.as_bytes()),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parentage_clusters(&cat, "a,b\n".as_bytes()),
            Err(Error::Schema { .. })
        ));
    }
}
