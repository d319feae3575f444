//! Distribution-free bounds on curve movement, endpoint bridges, the
//! worst-case rate probe, shape classification and the oscillation check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::kernel::{majority_accuracy, odd_binomial_scaled};
pub use crate::latent_law::MarginCondition;
use crate::latent_law::{make_named, Law, NamedLaw};
use crate::quadrature::{GaussLegendre, QuadratureConfig};
use crate::signature::{log_sum_exp, SignedSignature};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationBound {
    /// `min{1, tv * sum_{k=n}^{m-1} C(2k+1,k+1) 4^{-(k+1)}}`.
    pub sum_form: f64,
    /// `min{1, tv * (sqrt m - sqrt n) / sqrt pi}`.
    pub closed_form: f64,
}

/// Bound on `|V_m - V_n|` from the total variation of the signature.
pub fn variation_bound(sig_tv: f64, n: u64, m: u64) -> Result<VariationBound> {
    if m <= n {
        return Err(Error::InvalidInput(format!("need m > n (got n={n}, m={m})")));
    }
    if !(0.0..=1.0 + 1e-10).contains(&sig_tv) {
        return Err(Error::InvalidInput(format!("signature total variation {sig_tv} outside [0, 1]")));
    }
    let mut sum = 0.0;
    for k in n..m {
        sum += odd_binomial_scaled(k);
        if sig_tv * sum >= 1.0 {
            break;
        }
    }
    let closed = sig_tv * ((m as f64).sqrt() - (n as f64).sqrt()) / std::f64::consts::PI.sqrt();
    Ok(VariationBound {
        sum_form: (sig_tv * sum).min(1.0),
        closed_form: closed.min(1.0),
    })
}

/// `(2a / (1-4a)) * tv * (4a)^n`, valid when the signature lives on `[0, a]`.
pub fn near_zero_bound(sig_tv: f64, a: f64, n: u64) -> Result<f64> {
    if !(a > 0.0 && a < 0.25) {
        return Err(Error::InvalidInput(format!("near-zero bound needs 0 < a < 1/4 (got {a})")));
    }
    Ok(2.0 * a / (1.0 - 4.0 * a) * sig_tv * (4.0 * a).powf(n as f64))
}

fn votes(n: u64) -> f64 {
    (2 * n + 1) as f64
}

/// `e^{-2 M t0^2} + C Gamma(1 + kappa/2) (2M)^{-kappa/2}` with `M = 2n + 1`.
pub fn bridge_bound(cond: &MarginCondition, n: u64) -> f64 {
    let m = votes(n);
    (-2.0 * m * cond.t0 * cond.t0).exp() + cond.c * gamma(1.0 + cond.kappa / 2.0) * (2.0 * m).powf(-cond.kappa / 2.0)
}

/// `e^{-2 M delta^2}` for laws with no mass within `delta` of 1/2.
pub fn gap_bridge_bound(delta: f64, n: u64) -> f64 {
    (-2.0 * votes(n) * delta * delta).exp()
}

/// `e^{-M/2} + B sqrt(pi / (2M))` for densities bounded by `B`.
pub fn density_bridge_bound(b: f64, n: u64) -> f64 {
    let m = votes(n);
    (-m / 2.0).exp() + b * (std::f64::consts::PI / (2.0 * m)).sqrt()
}

/// `V_inf - V_n`, summed pointwise without cancellation:
/// `P_n(1-q)` above 1/2, `-P_n(q)` below, 0 at 1/2.
pub fn endpoint_gap(law: &Law, n: u64, gl: &GaussLegendre) -> f64 {
    let h = |q: f64| {
        if q > 0.5 {
            majority_accuracy(1.0 - q, n)
        } else if q < 0.5 {
            -majority_accuracy(q, n)
        } else {
            0.0
        }
    };
    let (disc, dens) = law.parts();
    let mut total = 0.0;
    if let Some((w, d)) = disc {
        total += w * d.atoms.iter().map(|a| a.weight * h(a.q)).sum::<f64>();
    }
    if let Some((w, f)) = dens {
        let mut part = 0.0;
        for (x0, x1, f0, f1) in f.segments() {
            if f0 == 0.0 && f1 == 0.0 {
                continue;
            }
            let fx = |x: f64| f0 + (f1 - f0) * (x - x0) / (x1 - x0);
            let breaks: &[f64] = if x0 < 0.5 && 0.5 < x1 { &[x0, 0.5, x1] } else { &[x0, x1] };
            part += gl.integrate_pieces(breaks, |x| fx(x) * h(x));
        }
        total += w * part;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Polynomial,
    /// Local log-log slopes keep steepening: faster than any power.
    Superpolynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbe {
    pub fitted_exponent: f64,
    /// `-kappa/2` when probing a margin class.
    pub expected_exponent: Option<f64>,
    pub votes: Vec<u64>,
    pub gaps: Vec<f64>,
    /// Half-open index range of `votes` used in the fit.
    pub fit_range: (usize, usize),
    pub smallest_votes_used: u64,
    pub local_slopes: Vec<f64>,
    pub decay: DecayKind,
}

/// Gaps below this are treated as quadrature noise.
pub const GAP_FLOOR: f64 = 1e-12;

/// `n` with `M = 2^k + 1` for `k = 3..=12`.
pub fn default_probe_budgets() -> Vec<u64> {
    (3..=12).map(|k| 1u64 << (k - 1)).collect()
}

/// Builds the worst-case law of the margin class and fits `log gap` against `log M`.
pub fn rate_sharpness_probe(cond: &MarginCondition, n_list: &[u64], cfg: &QuadratureConfig) -> Result<RateProbe> {
    let law = make_named(&NamedLaw::MarginWorstCase(*cond))?;
    let mut probe = decay_probe(&law, n_list, cfg)?;
    probe.expected_exponent = Some(-cond.kappa / 2.0);
    Ok(probe)
}

/// Fits the decay of `|V_n - V_inf|` for any law.
pub fn decay_probe(law: &Law, n_list: &[u64], cfg: &QuadratureConfig) -> Result<RateProbe> {
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let (lo, hi) = match (ns.first(), ns.last()) {
        (Some(&lo), Some(&hi)) => (votes(lo), votes(hi)),
        _ => return Err(Error::DegenerateFit { usable: 0 }),
    };
    if hi / lo < 100.0 {
        return Err(Error::InvalidInput(format!(
            "budgets must span at least two decades of M (got {lo}..{hi})"
        )));
    }
    let gl = GaussLegendre::new(cfg.gl_points);
    let gaps: Vec<f64> = ns.par_iter().map(|&n| endpoint_gap(law, n, &gl).abs()).collect();
    let (start, end) = longest_block(&gaps, |g| g > GAP_FLOOR);
    let usable = end - start;
    if usable < 3 {
        return Err(Error::DegenerateFit { usable });
    }
    let xs: Vec<f64> = ns[start..end].iter().map(|&n| votes(n).ln()).collect();
    let ys: Vec<f64> = gaps[start..end].iter().map(|g| g.ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    let local: Vec<f64> = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    let steepening = local.windows(2).all(|w| w[1] <= w[0] + 0.05);
    let decay = if steepening && local.last().unwrap() < &(local[0] - 1.0) {
        DecayKind::Superpolynomial
    } else {
        DecayKind::Polynomial
    };
    Ok(RateProbe {
        fitted_exponent: slope,
        expected_exponent: None,
        votes: ns.iter().map(|&n| 2 * n + 1).collect(),
        gaps,
        fit_range: (start, end),
        smallest_votes_used: 2 * ns[start] + 1,
        local_slopes: local,
        decay,
    })
}

/// Largest contiguous run where `keep` holds; ties go to the earliest.
fn longest_block<F: Fn(f64) -> bool>(xs: &[f64], keep: F) -> (usize, usize) {
    let mut best = (0, 0);
    let mut i = 0;
    while i < xs.len() {
        if !keep(xs[i]) {
            i += 1;
            continue;
        }
        let s = i;
        while i < xs.len() && keep(xs[i]) {
            i += 1;
        }
        if i - s > best.1 - best.0 {
            best = (s, i);
        }
    }
    best
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    MonotoneUp,
    MonotoneDown,
    Mixed,
}

/// Sign class of the signature. The zero signature counts as monotone up.
pub fn classify_shape(sig: &SignedSignature) -> Shape {
    const TOL: f64 = 1e-12;
    let weights = sig.atoms.iter().map(|a| a.weight).chain(sig.g_values.iter().copied());
    let (mut any_pos, mut any_neg) = (false, false);
    for w in weights {
        any_pos |= w > TOL;
        any_neg |= w < -TOL;
    }
    match (any_pos, any_neg) {
        (_, false) => Shape::MonotoneUp,
        (false, true) => Shape::MonotoneDown,
        (true, true) => Shape::Mixed,
    }
}

/// Sign of `V_{n+1} - V_n`, read off `int r^{n+1} d omega` in log space.
pub fn increment_sign(sig: &SignedSignature, n: u64, gl: &GaussLegendre) -> i8 {
    sig.log_moment(n + 1, gl).0 as i8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationSign {
    pub j: u32,
    pub k: u64,
    /// Sign of `sum_l (-1)^l exp(-l^2 - k 2^{-l})`.
    pub sign: i8,
    /// `1 - sum_{l != j} |term_l| / |term_j|`.
    pub dominance_margin: f64,
    /// Sign of `V_k - V_{k-1}` for the oscillation law truncated at `j_max`.
    pub increment_sign: i8,
}

/// Log-space truncation depth of the oscillation series.
pub const SERIES_CUTOFF_NATS: f64 = 80.0;

/// Largest `j` handled in double precision.
pub const OSCILLATION_J_CAP: u32 = 14;

pub fn oscillation_k(j: u32) -> u64 {
    3 * j as u64 * (1u64 << j)
}

/// Signs of the signed moments of the oscillation law at `k_j = 3 j 2^j`.
pub fn oscillation_signs(j_max: u32, cfg: &QuadratureConfig) -> Result<Vec<OscillationSign>> {
    if !(2..=OSCILLATION_J_CAP).contains(&j_max) {
        return Err(Error::InvalidInput(format!(
            "oscillation_signs needs 2 <= j_max <= {OSCILLATION_J_CAP} (got {j_max})"
        )));
    }
    let law = make_named(&NamedLaw::Oscillation { j_max })?;
    let sig = crate::signature::pushforward(&law, cfg);
    let gl = GaussLegendre::new(cfg.gl_points);
    (2..=j_max)
        .map(|j| {
            let k = oscillation_k(j);
            let (sign, margin) = dominant_series_sign(j, k)?;
            let inc = increment_sign(&sig, k - 1, &gl);
            Ok(OscillationSign {
                j,
                k,
                sign,
                dominance_margin: margin,
                increment_sign: inc,
            })
        })
        .collect()
}

/// Pairs the `l = j` term against all others.
fn dominant_series_sign(j: u32, k: u64) -> Result<(i8, f64)> {
    let log_term = |l: u32| -((l as f64).powi(2) + k as f64 * (2f64).powi(-(l as i32)));
    let dom = log_term(j);
    let mut rest = Vec::new();
    let mut running_max = f64::NEG_INFINITY;
    let mut l = 1u32;
    loop {
        let t = log_term(l);
        running_max = running_max.max(t);
        if l > j && t < running_max - SERIES_CUTOFF_NATS {
            break;
        }
        if l != j {
            rest.push(t);
        }
        l += 1;
    }
    let ratio = (log_sum_exp(&rest) - dom).exp();
    let margin = 1.0 - ratio;
    if margin < 1e3 * f64::EPSILON {
        return Err(Error::PrecisionExhausted(format!(
            "dominance margin {margin:.3e} at j={j} is within round-off"
        )));
    }
    let sign = if j % 2 == 0 { 1 } else { -1 };
    Ok((sign, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_law::{DiscreteLaw, Figure1Curve, GridDensity};
    use crate::quadrature::DEFAULT_GL_POINTS;
    use crate::signature::{curve, pushforward};

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn variation_examples() {
        let b = variation_bound(1.0, 0, 1).unwrap();
        assert_eq!(b.sum_form, 0.25);
        let b = variation_bound(0.0, 3, 9).unwrap();
        assert_eq!((b.sum_form, b.closed_form), (0.0, 0.0));
        let b = variation_bound(1.0, 0, 4).unwrap();
        assert_eq!(b.closed_form, 1.0);
        assert!(variation_bound(1.0, 4, 4).is_err());
        for n in 0..50 {
            for m in n + 1..60 {
                let b = variation_bound(0.7, n, m).unwrap();
                assert!(b.sum_form <= b.closed_form + 1e-12, "n={n} m={m}");
            }
        }
    }

    #[test]
    fn near_zero_examples() {
        assert!((near_zero_bound(0.5, 3.0 / 16.0, 0).unwrap() - 0.75).abs() < 1e-15);
        assert!(near_zero_bound(0.9, 1e-12, 3).unwrap() < 1e-30);
        let law = Law::point(0.75);
        let c = curve(&law, 5, &cfg()).unwrap();
        let gap = (1.0 - c.values[5]).abs();
        assert!(near_zero_bound(0.5, 3.0 / 16.0, 5).unwrap() >= gap);
        assert!(near_zero_bound(0.5, 0.3, 1).is_err());
    }

    #[test]
    fn bridge_examples() {
        let g = gap_bridge_bound(0.25, 0);
        assert!((g - (-0.125f64).exp()).abs() < 1e-15);
        assert!(g >= 0.25);
        let d = density_bridge_bound(1.0, 12);
        assert!((d - ((-12.5f64).exp() + (std::f64::consts::PI / 50.0).sqrt())).abs() < 1e-15);
        let uniform = Law::Density(GridDensity::uniform());
        let c = curve(&uniform, 12, &cfg()).unwrap();
        assert!((c.values[12] - 0.5).abs() <= d);
        let cond = MarginCondition::new(3.0, 1.5, 0.3).unwrap();
        assert!(bridge_bound(&cond, 10_000_000) < 1e-5);
        assert!(bridge_bound(&cond, 10) > bridge_bound(&cond, 100));
    }

    #[test]
    fn endpoint_gap_matches_curve() {
        let gl = GaussLegendre::new(DEFAULT_GL_POINTS);
        for curve_kind in Figure1Curve::ALL {
            let law = Law::Discrete(curve_kind.law());
            let c = curve(&law, 40, &cfg()).unwrap();
            for n in [0u64, 5, 40] {
                let want = law.endpoint() - c.values[n as usize];
                assert!((endpoint_gap(&law, n, &gl) - want).abs() < 1e-14);
            }
        }
        let nodes = GridDensity::uniform_nodes(11);
        let f = GridDensity::from_fn_normalized(nodes, |q| 1.0 + q).unwrap();
        let law = Law::Density(f);
        let c = crate::signature::curve_direct(&law, 10, &cfg()).unwrap();
        assert!((endpoint_gap(&law, 10, &gl) - (law.endpoint() - c.values[10])).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_short_span_and_detects_gap_law() {
        assert!(decay_probe(&Law::point(0.75), &[1, 2, 3], &cfg()).is_err());
        let p = decay_probe(&Law::point(0.75), &default_probe_budgets(), &cfg()).unwrap();
        assert_eq!(p.decay, DecayKind::Superpolynomial);
        assert!(p.fitted_exponent < -3.0);
        // no gap at all
        let e = decay_probe(&Law::point(1.0), &default_probe_budgets(), &cfg()).unwrap_err();
        assert!(matches!(e, Error::DegenerateFit { usable: 0 }));
    }

    #[test]
    fn shape_examples() {
        let sig = |law: Law| pushforward(&law, &cfg());
        assert_eq!(classify_shape(&sig(Law::point(0.75))), Shape::MonotoneUp);
        assert_eq!(classify_shape(&sig(Law::point(0.25))), Shape::MonotoneDown);
        assert_eq!(
            classify_shape(&sig(Law::Discrete(Figure1Curve::DipThenSurpass.law()))),
            Shape::Mixed
        );
    }

    #[test]
    fn oscillation_examples() {
        let signs = oscillation_signs(10, &cfg()).unwrap();
        assert_eq!(signs[0].k, 24);
        assert_eq!(signs[0].sign, 1);
        assert_eq!(signs[1].k, 72);
        assert_eq!(signs[1].sign, -1);
        for s in &signs {
            let want = if s.j % 2 == 0 { 1 } else { -1 };
            assert_eq!(s.sign, want, "j={}", s.j);
            assert_eq!(s.increment_sign, want, "j={}", s.j);
            assert!(s.dominance_margin > 0.0);
        }
        assert!(oscillation_signs(1, &cfg()).is_err());
        assert!(oscillation_signs(15, &cfg()).is_err());
        assert_eq!(oscillation_signs(14, &cfg()).unwrap().len(), 13);
    }

    #[test]
    fn oscillation_brute_force_series() {
        // plain summation is fine for small j, where nothing underflows
        for j in 2..=5u32 {
            let k = oscillation_k(j) as f64;
            let s: f64 = (1..60)
                .map(|l: i32| {
                    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                    sign * (-(l * l) as f64 - k * (2f64).powi(-l)).exp()
                })
                .sum();
            let want = if j % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(s.signum(), want, "j={j}");
        }
    }

    #[test]
    fn increments_change_sign_between_checkpoints() {
        let law = make_named(&NamedLaw::Oscillation { j_max: 10 }).unwrap();
        let sig = pushforward(&law, &cfg());
        let gl = GaussLegendre::new(DEFAULT_GL_POINTS);
        for j in 2..8 {
            let (a, b) = (oscillation_k(j), oscillation_k(j + 1));
            let first = increment_sign(&sig, a - 1, &gl);
            let changes = (a..b).any(|n| increment_sign(&sig, n, &gl) != first);
            assert!(changes, "j={j}");
        }
    }

    #[test]
    fn monotone_up_curves_are_concave() {
        let law = Law::Discrete(DiscreteLaw::from_pairs(&[(0.2, 0.1), (0.8, 0.2), (0.55, 0.3), (0.9, 0.4)]).unwrap());
        let sig = pushforward(&law, &cfg());
        assert_eq!(classify_shape(&sig), Shape::MonotoneUp);
        let c = curve(&law, 200, &cfg()).unwrap();
        let inc = c.increments();
        assert!(inc.iter().all(|&d| d >= -1e-12));
        assert!(inc.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
