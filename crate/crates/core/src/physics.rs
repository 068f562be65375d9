//! Bounded parameterisation of the seismological-law parameters and the
//! closed-form / grid-search estimators used as reference oracles.
//!
//! Raw learnable scalars map to physical values by
//!
//! ```text
//! b  = 0.7 + 0.6 * sigmoid(theta_b)        in (0.7, 1.3)
//! p  = 0.8 + 0.4 * sigmoid(theta_p)        in (0.8, 1.2)
//! c  = softplus(theta_c) + 0.001           > 0.001 days
//! dM = delta_m                             unbounded
//! ```

use std::f64::consts::LOG10_E;

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::{Error, Result};

pub const B_LOW: f64 = 0.7;
pub const B_SPAN: f64 = 0.6;
pub const P_LOW: f64 = 0.8;
pub const P_SPAN: f64 = 0.4;
pub const C_FLOOR: f64 = 0.001;

/// Saturated sigmoid/softplus outputs are kept this far from their limits so
/// the open bounds on b, p and c survive f64 rounding at extreme raws.
const SATURATION: f64 = 1e-15;

/// Raw learnable physics scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub theta_b: f64,
    pub theta_p: f64,
    pub theta_c: f64,
    pub delta_m: f64,
}

impl Default for PhysicsParams {
    /// b = p = 1, c near zero, dM at the empirical Bath value.
    fn default() -> Self {
        PhysicsParams {
            theta_b: 0.0,
            theta_p: 0.0,
            theta_c: -5.0,
            delta_m: 1.2,
        }
    }
}

/// Physical values derived from [`PhysicsParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub b: f64,
    pub p: f64,
    pub c: f64,
    pub delta_m: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unit_sigmoid(x: f64) -> f64 {
    sigmoid(x).clamp(SATURATION, 1.0 - SATURATION)
}

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Inverse of softplus for `y > 0`: `ln(e^y - 1)`.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// `(e^x - 1) / x`, continuous through `x = 0`.
pub fn exprel(x: f64) -> f64 {
    crate::diff::exprel(x)
}

impl PhysicsParams {
    pub fn derive(&self) -> Derived {
        Derived {
            b: B_LOW + B_SPAN * unit_sigmoid(self.theta_b),
            p: P_LOW + P_SPAN * unit_sigmoid(self.theta_p),
            c: softplus(self.theta_c).max(SATURATION) + C_FLOOR,
            delta_m: self.delta_m,
        }
    }

    /// Raw values producing the given physical values; each must lie
    /// strictly inside its bounded range.
    pub fn from_derived(d: &Derived) -> Result<Self> {
        let unit = |v: f64, lo: f64, span: f64, name: &str| {
            let u = (v - lo) / span;
            if u > 0.0 && u < 1.0 {
                Ok(logit(u))
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} = {v} is outside ({lo}, {})",
                    lo + span
                )))
            }
        };
        if !(d.c > C_FLOOR) || !d.c.is_finite() {
            return Err(Error::InvalidInput(format!(
                "c = {} must exceed {C_FLOOR}",
                d.c
            )));
        }
        if !d.delta_m.is_finite() {
            return Err(Error::InvalidInput("delta_m must be finite".into()));
        }
        Ok(PhysicsParams {
            theta_b: unit(d.b, B_LOW, B_SPAN, "b")?,
            theta_p: unit(d.p, P_LOW, P_SPAN, "p")?,
            theta_c: softplus_inv(d.c - C_FLOOR),
            delta_m: d.delta_m,
        })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.theta_b, self.theta_p, self.theta_c, self.delta_m]
    }

    pub fn from_slice(raw: &[f64]) -> Result<Self> {
        match raw {
            [b, p, c, m] => Ok(PhysicsParams {
                theta_b: *b,
                theta_p: *p,
                theta_c: *c,
                delta_m: *m,
            }),
            _ => Err(Error::shape(
                "physics",
                format!("expected 4 raw scalars, got {}", raw.len()),
            )),
        }
    }
}

/// Derived physics values as scalar tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct DerivedVars {
    pub b: Var,
    pub p: Var,
    pub c: Var,
    pub delta_m: Var,
}

/// Applies the bounded maps to a length-4 raw vector `[θ_b, θ_p, θ_c, ΔM]`.
pub fn derive_on_tape(tape: &Tape, raw: Var) -> Result<DerivedVars> {
    let part = |i| -> Result<Var> {
        let s = tape.slice(raw, 0, i, 1)?;
        tape.reshape(s, &[])
    };
    let (tb, tp, tc, dm) = (part(0)?, part(1)?, part(2)?, part(3)?);
    let unit = tape.clamp(tape.sigmoid(tb), SATURATION, 1.0 - SATURATION);
    Ok(DerivedVars {
        b: tape.affine(unit, B_SPAN, B_LOW),
        p: tape.affine(
            tape.clamp(tape.sigmoid(tp), SATURATION, 1.0 - SATURATION),
            P_SPAN,
            P_LOW,
        ),
        c: tape.add_scalar(
            tape.clamp(tape.softplus(tc), SATURATION, f64::INFINITY),
            C_FLOOR,
        ),
        delta_m: dm,
    })
}

/// Aki-Utsu b-value estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BEstimate {
    pub b: f64,
    /// `b / sqrt(n)`.
    pub std_err: f64,
    pub n: usize,
}

/// `b = log10(e) / (mean(M) - (m_c - bin_width/2))`. Use `bin_width = 0`
/// for continuous magnitudes.
pub fn mle_b(magnitudes: &[f64], m_c: f64, bin_width: f64) -> Result<BEstimate> {
    let n = magnitudes.len();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "b-value needs at least 2 magnitudes, got {n}"
        )));
    }
    if let Some(m) = magnitudes.iter().find(|m| **m < m_c) {
        return Err(Error::InvalidInput(format!(
            "magnitude {m} is below completeness {m_c}"
        )));
    }
    let first = magnitudes[0];
    if magnitudes.iter().all(|m| *m == first) {
        return Err(Error::Estimation("all magnitudes are equal".into()));
    }
    let mean = magnitudes.iter().sum::<f64>() / n as f64;
    let excess = mean - (m_c - bin_width / 2.0);
    if excess <= 0.0 {
        return Err(Error::Estimation(format!(
            "mean magnitude excess {excess} is not positive"
        )));
    }
    let b = LOG10_E / excess;
    Ok(BEstimate {
        b,
        std_err: b / (n as f64).sqrt(),
        n,
    })
}

/// b-value for magnitudes each drawn from Gutenberg-Richter truncated to
/// `[m_c, upper_i]`, by solving the conditional likelihood score. Reduces
/// to Aki-Utsu when every upper bound is infinite.
pub fn mle_b_truncated(samples: &[(f64, f64)], m_c: f64) -> Result<BEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "b-value needs at least 2 magnitudes, got {n}"
        )));
    }
    if samples.iter().any(|(m, u)| *m < m_c || *m > *u) {
        return Err(Error::InvalidInput(
            "magnitudes must lie within [m_c, upper]".into(),
        ));
    }
    let mean_excess = samples.iter().map(|(m, _)| m - m_c).sum::<f64>() / n as f64;
    if mean_excess <= 0.0 {
        return Err(Error::Estimation(
            "all magnitudes are at completeness".into(),
        ));
    }
    // Score in beta = b ln 10: 1/beta - mean(x) - mean(r e^{-beta r}/(1-e^{-beta r})),
    // x = m - m_c, r = upper - m_c. Strictly decreasing in beta.
    let score = |beta: f64| {
        let trunc: f64 = samples
            .iter()
            .map(|(_, u)| {
                let r = u - m_c;
                if !r.is_finite() || beta * r > 700.0 {
                    0.0
                } else {
                    r / (beta * r).exp_m1()
                }
            })
            .sum::<f64>()
            / n as f64;
        1.0 / beta - mean_excess - trunc
    };
    let (mut lo, mut hi) = (1e-3, 1.0 / mean_excess);
    while score(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Estimation(
                "truncated b-value diverges; magnitudes crowd their upper bounds".into(),
            ));
        }
    }
    if score(lo) < 0.0 {
        return Err(Error::Estimation(
            "truncated b-value score has no root".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi) * LOG10_E;
    Ok(BEstimate {
        b,
        std_err: b / (n as f64).sqrt(),
        n,
    })
}

/// `∫_{t0}^{t1} (t + c)^(-p) dt` for `0 <= t0 < t1`.
pub fn omori_integral(t0: f64, t1: f64, p: f64, c: f64) -> f64 {
    let a = (t0 + c).ln();
    let l = (t1 + c).ln() - a;
    let q = 1.0 - p;
    (q * a).exp() * l * exprel(q * l)
}

/// Result of [`fit_omori`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmoriFit {
    pub p: f64,
    pub c: f64,
    pub log_likelihood: f64,
    pub n: usize,
    /// The best grid point lay on the edge of the search grid.
    pub at_boundary: bool,
}

pub const OMORI_P_GRID: (f64, f64, f64) = (0.5, 2.0, 0.005);
pub const OMORI_C_GRID: (f64, f64, usize) = (0.001, 1.0, 400);

/// Maximum-likelihood `(p, c)` for delays from the density
/// `∝ (t + c)^(-p)` truncated to `(0, horizon]`.
///
/// Exhaustive search over `p ∈ [0.5, 2.0]` (step 0.005) and 400 log-spaced
/// `c ∈ [0.001, 1]`, then a deterministic pattern-search refinement.
pub fn fit_omori(delays: &[f64], horizon: f64) -> Result<OmoriFit> {
    let n = delays.len();
    if n < 50 {
        return Err(Error::Estimation(format!(
            "Omori fit needs at least 50 delays, got {n}"
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} must be positive"
        )));
    }
    if let Some(t) = delays.iter().find(|t| !(**t > 0.0 && **t <= horizon)) {
        return Err(Error::InvalidInput(format!(
            "delay {t} is outside (0, {horizon}]"
        )));
    }
    let nf = n as f64;
    let log_sum = |c: f64| delays.iter().map(|t| (t + c).ln()).sum::<f64>();
    let ll = |p: f64, c: f64, s: f64| -p * s - nf * omori_integral(0.0, horizon, p, c).ln();

    let (p0, p1, dp) = OMORI_P_GRID;
    let np = ((p1 - p0) / dp).round() as usize + 1;
    let (c0, c1, nc) = OMORI_C_GRID;
    let c_at = |j: usize| (c0.ln() + (c1.ln() - c0.ln()) * j as f64 / (nc - 1) as f64).exp();

    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for j in 0..nc {
        let c = c_at(j);
        let s = log_sum(c);
        for i in 0..np {
            let v = ll(p0 + dp * i as f64, c, s);
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    let at_boundary = best.1 == 0 || best.1 == np - 1 || best.2 == 0 || best.2 == nc - 1;

    // pattern search in (p, ln c), clamped to the grid box
    let mut p = p0 + dp * best.1 as f64;
    let mut lc = c_at(best.2).ln();
    let mut cur = best.0;
    let (mut sp, mut sl) = (dp, (c1.ln() - c0.ln()) / (nc - 1) as f64);
    for _ in 0..40 {
        let mut moved = false;
        for (dpp, dl) in [(sp, 0.0), (-sp, 0.0), (0.0, sl), (0.0, -sl)] {
            let cp = (p + dpp).clamp(p0, p1);
            let cl = (lc + dl).clamp(c0.ln(), c1.ln());
            let v = ll(cp, cl.exp(), log_sum(cl.exp()));
            if v > cur {
                (p, lc, cur, moved) = (cp, cl, v, true);
            }
        }
        if !moved {
            sp /= 2.0;
            sl /= 2.0;
        }
    }
    Ok(OmoriFit {
        p,
        c: lc.exp(),
        log_likelihood: cur,
        n,
        at_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use proptest::prelude::*;

    #[test]
    fn init_values() {
        let d = PhysicsParams::default().derive();
        assert_eq!(d.b, 1.0);
        assert_eq!(d.p, 1.0);
        assert!((d.c - (softplus(-5.0) + 0.001)).abs() < 1e-15);
        assert!(d.c < 0.01);
        assert_eq!(d.delta_m, 1.2);
    }

    #[test]
    fn c_floor_limit() {
        let raw = PhysicsParams {
            theta_c: -800.0,
            ..Default::default()
        };
        let c = raw.derive().c;
        assert!(c > C_FLOOR && c - C_FLOOR < 1e-14);
    }

    #[test]
    fn inverse_round_trip_of_reference_values() {
        let want = Derived {
            b: 0.752,
            p: 0.835,
            c: 0.1948,
            delta_m: 1.2,
        };
        let raw = PhysicsParams::from_derived(&want).unwrap();
        assert!((raw.theta_p - (-2.345)).abs() < 1e-3, "{}", raw.theta_p);
        let got = raw.derive();
        assert!((got.b - want.b).abs() < 1e-12);
        assert!((got.p - want.p).abs() < 1e-12);
        assert!((got.c - want.c).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_values_have_no_raw_preimage() {
        let d = Derived {
            b: 1.3,
            p: 1.0,
            c: 0.1,
            delta_m: 1.2,
        };
        assert!(PhysicsParams::from_derived(&d).is_err());
        let d = Derived {
            b: 1.0,
            c: 0.001,
            ..d
        };
        assert!(PhysicsParams::from_derived(&d).is_err());
    }

    #[test]
    fn tape_derivation_matches_values() {
        let raw = PhysicsParams {
            theta_b: 0.3,
            theta_p: -1.2,
            theta_c: 0.4,
            delta_m: 1.1,
        };
        let tape = Tape::new();
        let v = tape.param(Tensor::vector(raw.to_array().to_vec()));
        let d = derive_on_tape(&tape, v).unwrap();
        let want = raw.derive();
        assert_eq!(tape.item(d.b), want.b);
        assert_eq!(tape.item(d.p), want.p);
        assert_eq!(tape.item(d.c), want.c);
        assert_eq!(tape.item(d.delta_m), want.delta_m);
    }

    #[test]
    fn mle_b_formula_inversion() {
        let m_c = 2.0;
        let mags = [m_c, m_c + 2.0 * LOG10_E];
        let est = mle_b(&mags, m_c, 0.0).unwrap();
        assert!((est.b - 1.0).abs() < 1e-12);
        assert!((est.std_err - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mle_b_degenerate_inputs() {
        assert!(matches!(
            mle_b(&[3.0, 3.0, 3.0], 2.0, 0.0),
            Err(Error::Estimation(_))
        ));
        assert!(matches!(mle_b(&[3.0], 2.0, 0.0), Err(Error::Estimation(_))));
        assert!(matches!(
            mle_b(&[1.0, 3.0], 2.0, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn truncated_mle_reduces_to_aki_utsu_without_bound() {
        let mags = [2.1, 2.5, 3.3, 2.2, 4.0, 2.05];
        let plain = mle_b(&mags, 2.0, 0.0).unwrap();
        let pairs: Vec<_> = mags.iter().map(|m| (*m, f64::INFINITY)).collect();
        let trunc = mle_b_truncated(&pairs, 2.0).unwrap();
        assert!((plain.b - trunc.b).abs() < 1e-9);
    }

    #[test]
    fn omori_integral_is_continuous_through_p_one() {
        let at = omori_integral(0.5, 3.0, 1.0, 0.1);
        let exact = (3.1f64 / 0.6).ln();
        assert!((at - exact).abs() < 1e-14);
        let near = omori_integral(0.5, 3.0, 1.0 + 1e-9, 0.1);
        assert!((near - at).abs() < 1e-8);
        let far = omori_integral(0.0, 2.0, 2.0, 1.0);
        assert!((far - (1.0 - 1.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn fit_omori_rejects_short_or_out_of_range_input() {
        assert!(matches!(
            fit_omori(&[1.0; 10], 90.0),
            Err(Error::Estimation(_))
        ));
        let mut d = vec![1.0; 60];
        d[3] = 100.0;
        assert!(matches!(fit_omori(&d, 90.0), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn bounds_hold_for_any_raw(tb in -1e6..1e6f64, tp in -1e6..1e6f64, tc in -1e6..1e6f64) {
            let d = PhysicsParams { theta_b: tb, theta_p: tp, theta_c: tc, delta_m: 0.0 }.derive();
            prop_assert!(d.b > 0.7 && d.b < 1.3);
            prop_assert!(d.p > 0.8 && d.p < 1.2);
            prop_assert!(d.c > 0.001);
        }

        #[test]
        fn derive_is_monotone(x in -30.0..30.0f64, dx in 1e-3..5.0f64) {
            let lo = PhysicsParams { theta_b: x, theta_p: x, theta_c: x, delta_m: 0.0 }.derive();
            let hi = PhysicsParams { theta_b: x + dx, theta_p: x + dx, theta_c: x + dx, delta_m: 0.0 }.derive();
            prop_assert!(hi.b > lo.b && hi.p > lo.p && hi.c > lo.c);
        }

        #[test]
        fn mle_b_is_permutation_invariant(mut mags in proptest::collection::vec(2.0..6.0f64, 2..50)) {
            mags.push(2.5);
            let a = mle_b(&mags, 2.0, 0.0).unwrap();
            mags.reverse();
            let b = mle_b(&mags, 2.0, 0.0).unwrap();
            prop_assert!((a.b - b.b).abs() <= 1e-12 * a.b);
        }
    }
}
