//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any criterion fails or overruns its time limit.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use votecurve::error::Error;
use votecurve::estimation::{count_pmf, nonident_pair, plugin_bound, plugin_signature, prefix_from_pmf, signed_prefix};
use votecurve::kernel::{even_majority_accuracy, majority_accuracy, majority_increment};
use votecurve::latent_law::{
    make_named, DiscreteLaw, Figure1Curve, GridDensity, HybridLaw, Law, MarginCondition, NamedLaw,
};
use votecurve::plurality::{plurality_accuracy, q_not_enough_witness, CategoricalVector, PluralityMode};
use votecurve::quadrature::{GaussLegendre, QuadratureConfig};
use votecurve::shape_rates::{
    bridge_bound, density_bridge_bound, endpoint_gap, gap_bridge_bound, near_zero_bound, oscillation_signs,
    rate_sharpness_probe, variation_bound,
};
use votecurve::signature::{curve, curve_direct, pushforward, realize, recover_moments, SigAtom, SignedSignature};
use votecurve::simulate::{mc_curve, simulate_counts, SimConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cfg() -> QuadratureConfig {
    QuadratureConfig::default()
}

fn gl() -> GaussLegendre {
    GaussLegendre::new(cfg().gl_points)
}

fn q_grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}

fn random_discrete(rng: &mut ChaCha8Rng, max_atoms: usize) -> DiscreteLaw {
    let k = rng.random_range(1..=max_atoms);
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
    let s: f64 = w.iter().sum();
    let pairs: Vec<(f64, f64)> = w.iter().map(|x| (rng.random::<f64>(), x / s)).collect();
    DiscreteLaw::from_pairs(&pairs).unwrap()
}

fn random_density(rng: &mut ChaCha8Rng) -> GridDensity {
    let nodes = GridDensity::uniform_nodes(rng.random_range(17..=129));
    let values = nodes.iter().map(|_| rng.random_range(0.05..2.0)).collect();
    GridDensity::normalized(nodes, values).unwrap()
}

// ---- criteria ----

fn c1_kernel_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for n in 0..=6u32 {
        let m = 2 * n + 1;
        for &q in &q_grid(21) {
            let mut p = 0.0;
            for bits in 0u32..(1 << m) {
                let ones = bits.count_ones();
                if ones > n {
                    p += q.powi(ones as i32) * (1.0 - q).powi((m - ones) as i32);
                }
            }
            worst = worst.max((p - majority_accuracy(q, n as u64)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:.3e}"))?;
    Ok(format!("max abs error {worst:.2e}"))
}

fn c2_increment_identity() -> Outcome {
    let mut worst = 0.0f64;
    for n in 0..=64u64 {
        for &q in &q_grid(21) {
            let d = majority_accuracy(q, n + 1) - majority_accuracy(q, n);
            worst = worst.max((majority_increment(q, n) - d).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:.3e}"))?;
    Ok(format!("max abs error {worst:.2e}"))
}

fn c3_even_collapse() -> Outcome {
    let mut worst = 0.0f64;
    for n in 1..=32u64 {
        for &q in &q_grid(21) {
            worst = worst.max((even_majority_accuracy(q, n) - majority_accuracy(q, n - 1)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:.3e}"))?;
    Ok(format!("max abs error {worst:.2e}"))
}

fn c4_figure1_gallery() -> Outcome {
    let c = cfg();
    let get = |f: Figure1Curve| curve(&Law::Discrete(f.law()), 200, &c).unwrap().values;
    let constant = get(Figure1Curve::Constant);
    ensure(constant.iter().all(|&v| v == 0.75), || "constant curve is not exactly 0.75".into())?;

    let dip = get(Figure1Curve::DipThenSurpass);
    let first_dip = (1..dip.len()).find(|&n| dip[n] < dip[0]);
    let surpass = first_dip.and_then(|d| (d + 1..dip.len()).find(|&m| dip[m] > dip[0]));
    ensure(surpass.is_some(), || format!("dip then surpass: dip at {first_dip:?}, no later surpass"))?;

    let rise = get(Figure1Curve::RiseThenFall);
    let inc: Vec<f64> = rise.windows(2).map(|w| w[1] - w[0]).collect();
    let up = inc.iter().position(|&d| d > 0.0);
    let down = up.and_then(|u| inc[u + 1..].iter().position(|&d| d < 0.0).map(|p| p + u + 1));
    ensure(down.is_some(), || "rise then fall: no positive increment followed by a negative one".into())?;

    let fast = get(Figure1Curve::FastDrop);
    ensure(fast[1] < fast[0] - 0.01, || format!("fast drop: V1 - V0 = {}", fast[1] - fast[0]))?;

    let slow = get(Figure1Curve::SlowRise);
    let d = slow[1] - slow[0];
    ensure(d > 0.0 && d < 0.01, || format!("slow rise: V1 - V0 = {d}"))?;
    Ok(format!(
        "dip at n={}, surpass at n={}, rise/fall increments at {}/{}",
        first_dip.unwrap(),
        surpass.unwrap(),
        up.unwrap(),
        down.unwrap()
    ))
}

fn c5_moment_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, g) = (cfg(), gl());
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let law = Law::Discrete(random_discrete(&mut rng, 8));
        let rec = recover_moments(&curve(&law, 40, &c).unwrap());
        let sig = pushforward(&law, &c);
        ensure(rec.s.len() == 41, || format!("recovered {} moments", rec.s.len()))?;
        for (k, s) in rec.s.iter().enumerate() {
            worst = worst.max((s - sig.moment(k as u32, &g)).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("max error {worst:.3e}"))?;
    Ok(format!("100 laws, k <= 40, max abs error {worst:.2e}"))
}

fn c6_branch_symmetric_invisibility() -> Outcome {
    let nodes = GridDensity::uniform_nodes(1025);
    let f1: Vec<f64> = nodes.iter().map(|q| 1.0 + 0.25 * (2.0 * q - 1.0)).collect();
    // the symmetric bump, centred so its trapezoid mass is exactly zero
    let bump: Vec<f64> = nodes.iter().map(|q| q * (1.0 - q)).collect();
    let h = nodes[1] - nodes[0];
    let bump_mass: f64 = bump.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    let f2: Vec<f64> = f1.iter().zip(&bump).map(|(a, b)| a + 4.0 * (b - bump_mass)).collect();
    let l1 = Law::Density(GridDensity::new(nodes.clone(), f1).unwrap());
    let l2 = Law::Density(GridDensity::new(nodes, f2).unwrap());
    let c = cfg();
    let v1 = curve(&l1, 30, &c).unwrap().values;
    let v2 = curve(&l2, 30, &c).unwrap().values;
    let worst = v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-8, || format!("max curve difference {worst:.3e}"))?;
    // latent-side quadrature never looks at the signature
    let d1 = curve_direct(&l1, 30, &c).unwrap().values;
    let d2 = curve_direct(&l2, 30, &c).unwrap().values;
    let direct = d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(direct <= 1e-8, || format!("direct quadrature curves differ by {direct:.3e}"))?;
    Ok(format!("signature path {worst:.2e}, direct quadrature {direct:.2e}"))
}

fn c7_endpoint_consistency() -> Outcome {
    let c = cfg();
    let mut laws: Vec<Law> = Figure1Curve::ALL.iter().map(|f| Law::Discrete(f.law())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        laws.push(match i % 3 {
            0 => Law::Discrete(random_discrete(&mut rng, 8)),
            1 => Law::Density(random_density(&mut rng)),
            _ => Law::Hybrid(HybridLaw {
                discrete: random_discrete(&mut rng, 4),
                density: random_density(&mut rng),
                discrete_weight: rng.random_range(0.1..0.9),
            }),
        });
    }
    let mut worst = 0.0f64;
    for law in &laws {
        let e = pushforward(law, &c).endpoint().map_err(|e| e.to_string())?;
        worst = worst.max((e - law.endpoint()).abs());
    }
    ensure(worst <= 1e-8, || format!("max endpoint difference {worst:.3e}"))?;
    Ok(format!("{} laws, max difference {worst:.2e}", laws.len()))
}

fn same_atoms(a: &SignedSignature, b: &SignedSignature, tol: f64) -> bool {
    a.atoms.len() == b.atoms.len()
        && a.atoms
            .iter()
            .zip(&b.atoms)
            .all(|(x, y)| (x.r - y.r).abs() <= tol && (x.weight - y.weight).abs() <= tol)
}

fn c8_realizability_roundtrip() -> Outcome {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..50 {
        let sig = pushforward(&Law::Discrete(random_discrete(&mut rng, 8)), &c);
        let again = pushforward(&realize(&sig).map_err(|e| e.to_string())?, &c);
        ensure(same_atoms(&sig, &again, 1e-10), || format!("law {i}: realize then pushforward moved atoms"))?;
        let third = pushforward(&realize(&again).map_err(|e| e.to_string())?, &c);
        ensure(same_atoms(&again, &third, 1e-10), || format!("law {i}: not idempotent"))?;
    }
    let too_big = SignedSignature::from_atoms(vec![SigAtom { r: 0.2, weight: 0.5 }]);
    ensure(matches!(realize(&too_big), Err(Error::Infeasible(_))), || "over-budget signature accepted".into())?;
    let quarter = SignedSignature::from_atoms(vec![SigAtom { r: 0.25, weight: 0.1 }]);
    ensure(realize(&quarter).is_err(), || "atom at r = 1/4 accepted".into())?;
    Ok("50 signatures fixed atomwise; infeasible inputs rejected".into())
}

fn c9_bounds_dominance() -> Outcome {
    let (c, g) = (cfg(), gl());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checks = 0u64;

    // variation bound
    for i in 0..50 {
        let law = Law::Discrete(random_discrete(&mut rng, 8));
        let tv = pushforward(&law, &c).total_variation();
        let v = curve(&law, 100, &c).unwrap().values;
        for n in 0..100usize {
            for m in n + 1..=100 {
                let b = variation_bound(tv, n as u64, m as u64).unwrap();
                ensure(b.sum_form <= b.closed_form + 1e-15, || format!("sum form above closed form at ({n},{m})"))?;
                ensure((v[m] - v[n]).abs() <= b.sum_form + 1e-12, || format!("law {i}: variation violated at ({n},{m})"))?;
                checks += 1;
            }
        }
    }

    // near-zero bound, signature supported on [0, a]
    let a: f64 = 0.16;
    let lo = 0.5 * (1.0 - (1.0 - 4.0 * a).sqrt());
    for i in 0..20 {
        let k = rng.random_range(1..=6);
        let pairs: Vec<(f64, f64)> = (0..k)
            .map(|_| {
                let q = rng.random_range(0.0..lo);
                (if rng.random::<bool>() { q } else { 1.0 - q }, 1.0 / k as f64)
            })
            .collect();
        let law = Law::Discrete(DiscreteLaw::from_pairs(&pairs).unwrap());
        let tv = pushforward(&law, &c).total_variation();
        let v = curve(&law, 60, &c).unwrap().values;
        for n in 0..60usize {
            let b = near_zero_bound(tv, a, n as u64).unwrap();
            for m in n + 1..=60 {
                ensure((v[m] - v[n]).abs() <= b + 1e-14, || format!("law {i}: near-zero violated at ({n},{m})"))?;
                checks += 1;
            }
            ensure(endpoint_gap(&law, n as u64, &g).abs() <= b + 1e-14, || format!("law {i}: near-zero endpoint at {n}"))?;
        }
    }

    // gap bridge on discrete laws bounded away from 1/2
    let budgets: Vec<u64> = (0..=10_000).collect();
    for i in 0..10 {
        let delta = rng.random_range(0.02..0.3);
        let k = rng.random_range(1..=5);
        let pairs: Vec<(f64, f64)> = (0..k)
            .map(|_| {
                let t = rng.random_range(delta..0.5);
                (if rng.random::<bool>() { 0.5 + t } else { 0.5 - t }, 1.0 / k as f64)
            })
            .collect();
        let law = Law::Discrete(DiscreteLaw::from_pairs(&pairs).unwrap());
        for &n in &budgets {
            ensure(endpoint_gap(&law, n, &g).abs() <= gap_bridge_bound(delta, n) + 1e-15, || {
                format!("law {i}: gap bridge violated at n={n}")
            })?;
            checks += 1;
        }
    }

    // threshold bridge on laws meeting a declared margin condition
    let sparse: Vec<u64> = (0..=200).chain((250..=10_000).step_by(250)).collect();
    let conds = [
        MarginCondition::new(1.0, 1.0, 0.5).unwrap(),
        MarginCondition::new(2.0, 2.0, 0.5).unwrap(),
        MarginCondition::new(0.8, 0.5, 0.3).unwrap(),
    ];
    let mut margin_laws: Vec<(MarginCondition, Law)> = conds
        .iter()
        .map(|cond| (*cond, make_named(&NamedLaw::MarginWorstCase(*cond)).unwrap()))
        .collect();
    margin_laws.push((MarginCondition::new(2.0, 1.0, 0.5).unwrap(), Law::Density(GridDensity::uniform())));
    for (cond, law) in &margin_laws {
        // the condition is required for 0 < t < t0
        for j in 1..200 {
            let t = cond.t0 * j as f64 / 200.0;
            let mass = law.margin_mass(t);
            ensure(mass <= cond.c * t.powf(cond.kappa) + 1e-9, || format!("margin condition fails at t={t}"))?;
        }
        for &n in &sparse {
            let gap = endpoint_gap(law, n, &g).abs();
            ensure(gap <= bridge_bound(cond, n), || format!("bridge violated at n={n} for {cond:?}"))?;
            checks += 1;
        }
    }
    let uniform = Law::Density(GridDensity::uniform());
    for &n in &sparse {
        ensure(endpoint_gap(&uniform, n, &g).abs() <= density_bridge_bound(1.0, n), || {
            format!("density bridge violated at n={n}")
        })?;
    }
    Ok(format!("{checks} bound checks, no violation"))
}

fn c10_rate_sharpness() -> Outcome {
    let mut report = Vec::new();
    let budgets: Vec<u64> = (3..=12).map(|k| 1u64 << (k - 1)).collect();
    for kappa in [1.0, 2.0] {
        let cond = MarginCondition::new(1.0, kappa, 0.5).unwrap();
        let probe = rate_sharpness_probe(&cond, &budgets, &cfg()).map_err(|e| e.to_string())?;
        let target = -kappa / 2.0;
        report.push(format!("kappa={kappa}: slope {:.4}", probe.fitted_exponent));
        ensure((probe.fitted_exponent - target).abs() <= 0.1, || {
            format!("kappa={kappa}: slope {} vs {target}", probe.fitted_exponent)
        })?;
    }
    Ok(report.join(", "))
}

fn c11_oscillation() -> Outcome {
    let signs = oscillation_signs(10, &cfg()).map_err(|e| e.to_string())?;
    for s in signs.iter().filter(|s| s.j >= 2) {
        let want = if s.j % 2 == 0 { 1 } else { -1 };
        ensure(s.sign == want, || format!("j={}: sign {} at k={}", s.j, s.sign, s.k))?;
        ensure(s.increment_sign == want, || format!("j={}: increment sign {}", s.j, s.increment_sign))?;
    }
    ensure(signs.iter().any(|s| s.j == 10), || "j=10 missing".into())?;
    Ok("signs alternate as (-1)^j for j = 2..10".into())
}

fn c12_grouped_estimation() -> Outcome {
    let (c, g) = (cfg(), gl());
    let law = Law::Discrete(Figure1Curve::DipThenSurpass.law());
    let sig = pushforward(&law, &c);
    let reps = 200;
    let est: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            let sim = SimConfig::new(10_000 + r, 10_000, 5).unwrap();
            signed_prefix(&simulate_counts(&law, &sim).unwrap()).s
        })
        .collect();
    let mut worst = 0.0f64;
    for k in 0..=2usize {
        let xs: Vec<f64> = est.iter().map(|s| s[k]).collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let z = (mean - sig.moment(k as u32, &g)) / se;
        worst = worst.max(z.abs());
        ensure(z.abs() < 4.0, || format!("s_{k}: z = {z:.2}"))?;
    }

    let pair = nonident_pair(3).map_err(|e| e.to_string())?;
    let (l1, l2) = (Law::Discrete(pair.law1.clone()), Law::Discrete(pair.law2.clone()));
    let (p1, p2) = (count_pmf(&l1, 3, &g), count_pmf(&l2, 3, &g));
    let dp = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(dp <= 1e-12, || format!("count pmfs differ by {dp:.3e}"))?;
    let (e1, e2) = (prefix_from_pmf(&p1, 3), prefix_from_pmf(&p2, 3));
    ensure(e1.len() == 2, || format!("J=3 identifies {} moments", e1.len()))?;
    ensure(e1.iter().zip(&e2).all(|(a, b)| (a - b).abs() <= 1e-12), || "identified prefix differs".into())?;
    let (s1, s2) = (pushforward(&l1, &c), pushforward(&l2, &c));
    let d2 = (s1.moment(2, &g) - s2.moment(2, &g)).abs();
    ensure(d2 >= 1e-6, || format!("s_2 differs by only {d2:.3e}"))?;
    Ok(format!("max |z| = {worst:.2}; pmf gap {dp:.1e}, s_2 gap {d2:.2e}"))
}

fn c13_plugin_bound() -> Outcome {
    let (c, g) = (cfg(), gl());
    let law = Law::Discrete(Figure1Curve::DipThenSurpass.law());
    let truth = pushforward(&law, &c).moment(1, &g);
    let mut report = Vec::new();
    for (n, j) in [(1_000u64, 100u32), (10_000, 1_000)] {
        let sample = simulate_counts(&law, &SimConfig::new(13, n, j).unwrap()).unwrap();
        let err = (plugin_signature(&sample).moment(1, &g) - truth).abs();
        let bound = plugin_bound(0.25, 1.0, n, j);
        ensure(err < bound, || format!("(N={n}, J={j}): error {err} >= bound {bound}"))?;
        report.push(format!("(N={n}, J={j}) error {err:.2e} < {bound:.2e}"));
    }
    Ok(report.join("; "))
}

fn c14_plurality() -> Outcome {
    let mut worst = 0.0f64;
    for i in 1..20 {
        let q = i as f64 / 20.0;
        let w = q_not_enough_witness(q, 3).map_err(|e| e.to_string())?;
        let conc = q.powi(3) + 3.0 * q * q * (1.0 - q);
        let diff = conc + q * (1.0 - q).powi(2) / 2.0;
        worst = worst.max((w.a_conc - conc).abs()).max((w.a_diff - diff).abs());
    }
    ensure(worst <= 1e-12, || format!("three-vote forms off by {worst:.3e}"))?;
    let mut bin = 0.0f64;
    for n in 0..=5u64 {
        for &q in &q_grid(21) {
            let p = CategoricalVector::new(vec![q, 1.0 - q]).unwrap();
            let a = plurality_accuracy(&p, 2 * n + 1, PluralityMode::Exact).unwrap().value;
            bin = bin.max((a - majority_accuracy(q, n)).abs());
        }
    }
    ensure(bin <= 1e-12, || format!("K=2 reduction off by {bin:.3e}"))?;
    Ok(format!("closed forms {worst:.1e}, K=2 reduction {bin:.1e}"))
}

fn c15_monte_carlo() -> Outcome {
    let c = cfg();
    let sim = SimConfig::new(2026, 1_000_000, 1).unwrap();
    let mut worst = 0.0f64;
    for f in Figure1Curve::ALL {
        let law = Law::Discrete(f.law());
        let exact = curve(&law, 30, &c).unwrap().values;
        let mc = mc_curve(&law, 30, &sim).map_err(|e| e.to_string())?;
        for n in 0..=30 {
            let z = (mc.values[n] - exact[n]) / mc.std_errors[n];
            worst = worst.max(z.abs());
            ensure(z.abs() <= 4.0, || format!("{}: n={n}, z = {z:.2}", f.name()))?;
        }
    }
    let law = Law::Discrete(Figure1Curve::Constant.law());
    let a = mc_curve(&law, 30, &sim).unwrap();
    let b = mc_curve(&law, 30, &sim).unwrap();
    ensure(a == b, || "repeat run differs".into())?;
    Ok(format!("max |z| = {worst:.2}; repeat run bitwise identical"))
}

fn main() {
    let criteria: Vec<(u32, &str, u64, fn() -> Outcome)> = vec![
        (1, "kernel oracle", 10, c1_kernel_oracle),
        (2, "increment identity", 1, c2_increment_identity),
        (3, "even collapse", 1, c3_even_collapse),
        (4, "figure-1 gallery", 5, c4_figure1_gallery),
        (5, "curve-signature equivalence", 10, c5_moment_roundtrip),
        (6, "branch-symmetric invisibility", 30, c6_branch_symmetric_invisibility),
        (7, "endpoint", 5, c7_endpoint_consistency),
        (8, "realizability round trip", 1, c8_realizability_roundtrip),
        (9, "bounds dominance", 60, c9_bounds_dominance),
        (10, "rate sharpness", 120, c10_rate_sharpness),
        (11, "oscillation", 10, c11_oscillation),
        (12, "grouped estimation", 120, c12_grouped_estimation),
        (13, "plug-in bound", 60, c13_plugin_bound),
        (14, "plurality closed forms", 10, c14_plurality),
        (15, "monte carlo end-to-end", 300, c15_monte_carlo),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let late = took > Duration::from_secs(limit);
        let (status, detail) = match (&outcome, late) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over time limit")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {status} {name} [{:.2}s / {limit}s]: {detail}",
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
