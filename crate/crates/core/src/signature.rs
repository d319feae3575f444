//! The signed voting signature `omega`, the pushforward of `(2q-1) Pi` under
//! `q -> q(1-q)`, and everything the odd-budget curve can see through it.
//!
//! A signature is a list of atoms in `r` plus an optional density `g(r) dr`.
//! The density is stored on an `r` grid but interpolated linearly in
//! `u = sqrt(1-4r)`, which is exact for signatures of piecewise-linear laws.

use std::fmt::Write as _;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{branch_gap, ln_odd_binomial, majority_accuracy, odd_binomial_scaled, psi_kernel};
use crate::latent_law::{
    branch_decompose, density_from_branches, kernel_weighted_integral, Atom, DiscreteLaw, GridDensity, HybridLaw,
    Law,
};
use crate::quadrature::{GaussLegendre, QuadratureConfig};

/// Radii closer than this are one atom.
pub const R_MERGE_TOL: f64 = 1e-14;
/// Merged atoms lighter than this, relative to the merged magnitude, are dropped.
pub const WEIGHT_DROP_TOL: f64 = 1e-15;

const TV_TOL: f64 = 1e-10;
const REALIZE_TOL: f64 = 1e-10;
const SLACK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigAtom {
    pub r: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignedSignature {
    pub atoms: Vec<SigAtom>,
    #[serde(default)]
    pub g_nodes: Vec<f64>,
    #[serde(default)]
    pub g_values: Vec<f64>,
}

impl SignedSignature {
    /// Sorts and merges atoms, and checks the shape of the density part.
    pub fn new(atoms: Vec<SigAtom>, g_nodes: Vec<f64>, g_values: Vec<f64>) -> Result<Self> {
        let sig = Self {
            atoms: merge_atoms(atoms),
            g_nodes,
            g_values,
        };
        sig.check_shape()?;
        Ok(sig)
    }

    pub fn from_atoms(atoms: Vec<SigAtom>) -> Self {
        Self {
            atoms: merge_atoms(atoms),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SignedSignature = serde_json::from_str(text)?;
        Self::new(raw.atoms, raw.g_nodes, raw.g_values)
    }

    fn check_shape(&self) -> Result<()> {
        for a in &self.atoms {
            if !(0.0..=0.25).contains(&a.r) || !a.weight.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "signature atom (r={}, weight={}) outside r in [0, 1/4]",
                    a.r, a.weight
                )));
            }
        }
        if self.g_nodes.len() != self.g_values.len() {
            return Err(Error::InvalidInput(format!(
                "g_nodes has {} entries but g_values has {}",
                self.g_nodes.len(),
                self.g_values.len()
            )));
        }
        if self.g_nodes.len() == 1 {
            return Err(Error::InvalidInput("density part needs at least two nodes".into()));
        }
        if self.g_nodes.iter().any(|r| !(0.0..=0.25).contains(r))
            || self.g_nodes.windows(2).any(|w| !(w[0] < w[1]))
            || self.g_values.iter().any(|g| !g.is_finite())
        {
            return Err(Error::InvalidInput(
                "g_nodes must be strictly increasing in [0, 1/4] with finite g_values".into(),
            ));
        }
        Ok(())
    }

    /// Checks `||omega||_TV <= 1` and that nothing sits at `r = 1/4`.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let tv = self.total_variation();
        if tv > 1.0 + TV_TOL {
            return Err(Error::InvalidInput(format!("total variation {tv} exceeds 1")));
        }
        if let Some(a) = self.atoms.iter().find(|a| a.r == 0.25) {
            return Err(Error::InvalidInput(format!(
                "nonzero atom {} at r = 1/4",
                a.weight
            )));
        }
        Ok(())
    }

    pub fn has_density(&self) -> bool {
        self.g_nodes.len() >= 2
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty() && self.g_values.iter().all(|&g| g == 0.0)
    }

    /// Quadrature points `(r, c)` with `int F(r) g(r) dr ~ sum c F(r)`.
    ///
    /// Uses `dr = (u/2) du` on each `u` segment; the integrand in `u` is then
    /// smooth even at `r = 1/4`.
    pub fn density_points(&self, gl: &GaussLegendre) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        if !self.has_density() {
            return pts;
        }
        let us: Vec<f64> = self.g_nodes.iter().map(|&r| branch_gap(r)).collect();
        for i in 1..us.len() {
            let (u_hi, u_lo) = (us[i - 1], us[i]);
            let (g_hi, g_lo) = (self.g_values[i - 1], self.g_values[i]);
            if u_hi <= u_lo || (g_hi == 0.0 && g_lo == 0.0) {
                continue;
            }
            for (u, w) in gl.panel(u_lo, u_hi) {
                let g = g_lo + (g_hi - g_lo) * (u - u_lo) / (u_hi - u_lo);
                pts.push((0.25 * (1.0 - u * u), w * g * 0.5 * u));
            }
        }
        pts
    }

    /// Integral of `|g(r)| F(u) (du)` over the density part, exact for `F = 1`.
    fn density_abs_u_integral(&self) -> f64 {
        let us: Vec<f64> = self.g_nodes.iter().map(|&r| branch_gap(r)).collect();
        let mut total = 0.0;
        for i in 1..us.len() {
            total += abs_linear_integral(us[i - 1] - us[i], self.g_values[i - 1], self.g_values[i]);
        }
        total
    }

    /// `||omega||_TV`.
    pub fn total_variation(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight.abs()).sum();
        if !self.has_density() {
            return atoms;
        }
        let gl = GaussLegendre::new(crate::quadrature::DEFAULT_GL_POINTS);
        // |g| is linear in u except at sign changes; split those panels.
        let us: Vec<f64> = self.g_nodes.iter().map(|&r| branch_gap(r)).collect();
        let mut dens = 0.0;
        for i in 1..us.len() {
            let (u_hi, u_lo) = (us[i - 1], us[i]);
            let (g_hi, g_lo) = (self.g_values[i - 1], self.g_values[i]);
            let mut breaks = vec![u_lo, u_hi];
            if g_hi * g_lo < 0.0 {
                breaks.insert(1, u_lo + (u_hi - u_lo) * g_lo / (g_lo - g_hi));
            }
            dens += gl.integrate_pieces(&breaks, |u| {
                (g_lo + (g_hi - g_lo) * (u - u_lo) / (u_hi - u_lo)).abs() * 0.5 * u
            });
        }
        atoms + dens
    }

    /// `int r^k omega(dr)`.
    pub fn moment(&self, k: u32, gl: &GaussLegendre) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * a.r.powi(k as i32)).sum();
        let dens: f64 = self
            .density_points(gl)
            .iter()
            .map(|&(r, c)| c * r.powi(k as i32))
            .sum();
        atoms + dens
    }

    /// `int (4r)^k omega(dr)`, which stays representable for large `k`.
    pub fn scaled_moment(&self, k: u64, gl: &GaussLegendre) -> f64 {
        let pw = |r: f64| if k <= i32::MAX as u64 { (4.0 * r).powi(k as i32) } else { (4.0 * r).powf(k as f64) };
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * pw(a.r)).sum();
        let dens: f64 = self.density_points(gl).iter().map(|&(r, c)| c * pw(r)).sum();
        atoms + dens
    }

    /// `(sign, ln |int r^k omega(dr)|)`, for moments that underflow in
    /// linear scale. Positive and negative parts are summed separately in
    /// log space before cancelling.
    pub fn log_moment(&self, k: u64, gl: &GaussLegendre) -> (f64, f64) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let dens = self.density_points(gl);
        let terms = self
            .atoms
            .iter()
            .map(|a| (a.r, a.weight))
            .chain(dens.iter().copied());
        for (r, w) in terms {
            if w == 0.0 || (r == 0.0 && k > 0) {
                continue;
            }
            let l = w.abs().ln() + k as f64 * r.ln();
            if w > 0.0 {
                pos.push(l);
            } else {
                neg.push(l);
            }
        }
        signed_log_difference(log_sum_exp(&pos), log_sum_exp(&neg))
    }

    /// `1/2 + 1/2 int (1-4r)^{-1/2} omega(dr)`.
    pub fn endpoint(&self) -> Result<f64> {
        let mut total = 0.0;
        for a in &self.atoms {
            let u = branch_gap(a.r);
            if u == 0.0 {
                return Err(Error::Infeasible(format!(
                    "endpoint integral diverges: atom {} at r = 1/4",
                    a.weight
                )));
            }
            total += a.weight / u;
        }
        if self.has_density() {
            // with dr = (u/2) du the 1/u kernel cancels: a trapezoid in u
            total += kernel_weighted_integral(&self.g_nodes, &self.g_values);
        }
        Ok(0.5 + 0.5 * total)
    }

    /// `int (1-4r)^{-1/2} |omega|(dr)`, infinite if an atom sits at `r = 1/4`.
    pub fn kernel_abs_integral(&self) -> f64 {
        let mut total = 0.0;
        for a in &self.atoms {
            let u = branch_gap(a.r);
            if u == 0.0 {
                if a.weight != 0.0 {
                    return f64::INFINITY;
                }
                continue;
            }
            total += a.weight.abs() / u;
        }
        if self.has_density() {
            total += 0.5 * self.density_abs_u_integral();
        }
        total
    }
}

/// `int_0^h |a + (b - a) x/h| dx`.
fn abs_linear_integral(h: f64, a: f64, b: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * h * (a.abs() + b.abs())
    } else {
        0.5 * h * (a * a + b * b) / (a.abs() + b.abs())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `(sign, ln |e^a - e^b|)`.
pub(crate) fn signed_log_difference(a: f64, b: f64) -> (f64, f64) {
    if a == b {
        return (0.0, f64::NEG_INFINITY);
    }
    if a > b {
        (1.0, a + (-(b - a).exp()).ln_1p())
    } else {
        (-1.0, b + (-(a - b).exp()).ln_1p())
    }
}

fn merge_atoms(mut atoms: Vec<SigAtom>) -> Vec<SigAtom> {
    atoms.sort_by(|a, b| a.r.total_cmp(&b.r));
    // (atom, sum of |weights| merged into it)
    let mut out: Vec<(SigAtom, f64)> = Vec::with_capacity(atoms.len());
    for a in atoms {
        match out.last_mut() {
            Some((last, mag)) if (a.r - last.r).abs() <= R_MERGE_TOL => {
                last.weight += a.weight;
                *mag += a.weight.abs();
            }
            _ => out.push((a, a.weight.abs())),
        }
    }
    // Only cancellation residue is dropped; genuinely tiny atoms stay.
    out.retain(|(a, mag)| a.weight != 0.0 && a.weight.abs() >= WEIGHT_DROP_TOL * mag);
    out.into_iter().map(|(a, _)| a).collect()
}

/// `omega` of a law. Densities go through [`branch_decompose`] on `cfg.r_grid` nodes.
pub fn pushforward(law: &Law, cfg: &QuadratureConfig) -> SignedSignature {
    let (disc, dens) = law.parts();
    let mut atoms = Vec::new();
    if let Some((w, d)) = disc {
        atoms.extend(d.atoms.iter().map(|a| SigAtom {
            r: a.q * (1.0 - a.q),
            weight: w * a.weight * (2.0 * a.q - 1.0),
        }));
    }
    let (g_nodes, g_values) = match dens {
        Some((w, f)) if w > 0.0 => {
            let b = branch_decompose(f, cfg.r_grid);
            (b.r_nodes, b.g_values.iter().map(|g| w * g).collect())
        }
        _ => (Vec::new(), Vec::new()),
    };
    SignedSignature {
        atoms: merge_atoms(atoms),
        g_nodes,
        g_values,
    }
}

/// `V_0, ..., V_{n_max}` plus `V_inf` when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingCurve {
    pub values: Vec<f64>,
    pub endpoint: Option<f64>,
}

impl VotingCurve {
    pub fn new(values: Vec<f64>, endpoint: Option<f64>) -> Result<Self> {
        for (n, v) in values.iter().enumerate() {
            if !(-1e-12..=1.0 + 1e-12).contains(v) {
                return Err(Error::InvalidInput(format!("V_{n} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { values, endpoint })
    }

    pub fn n_max(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    /// `V_{n+1} - V_n` for `n = 0..n_max`.
    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `n,votes,V` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,votes,V\n");
        for (n, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{n},{},{v:.16e}", 2 * n + 1);
        }
        out
    }

    /// Reads a curve CSV. The `n,votes,V` header is required; extra trailing
    /// columns (as written by the simulator) are ignored. Rows must list
    /// `n = 0, 1, 2, ...` with `votes = 2n + 1`.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(Error::Parse { line: 1, msg: "empty curve file".into() }),
            }
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[..3] != ["n", "votes", "V"] {
            return Err(Error::Parse { line: 1, msg: format!("expected header `n,votes,V`, got `{header}`") });
        }
        let mut values = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() < 3 {
                return Err(Error::Parse { line: lineno, msg: "expected at least 3 columns".into() });
            }
            let bad = |what: &str| Error::Parse { line: lineno, msg: format!("cannot parse {what}") };
            let n: usize = f[0].parse().map_err(|_| bad("n"))?;
            let votes: usize = f[1].parse().map_err(|_| bad("votes"))?;
            let v: f64 = f[2].parse().map_err(|_| bad("V"))?;
            if n != values.len() || votes != 2 * n + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected n={} and votes={}, got n={n}, votes={votes}", values.len(), 2 * values.len() + 1),
                });
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(Error::Parse { line: 1, msg: "curve file has no rows".into() });
        }
        Self::new(values, None)
    }
}

/// Upper bound on `n_max` accepted by the curve routines.
pub const MAX_BUDGET_INDEX: u64 = 1_000_000;

fn check_n_max(n_max: u64) -> Result<()> {
    if n_max > MAX_BUDGET_INDEX {
        return Err(Error::InvalidInput(format!(
            "n_max = {n_max} exceeds the supported maximum {MAX_BUDGET_INDEX}"
        )));
    }
    Ok(())
}

/// The odd-budget curve. Atoms use direct `P_n` sums; density parts use
/// the signature increments `C(2n+1,n+1) int r^{n+1} dg`.
pub fn curve(law: &Law, n_max: u64, cfg: &QuadratureConfig) -> Result<VotingCurve> {
    check_n_max(n_max)?;
    let (disc, dens) = law.parts();
    let mut values = vec![0.0; n_max as usize + 1];
    if let Some((w, d)) = disc {
        let part = discrete_curve(d, n_max);
        for (v, p) in values.iter_mut().zip(part) {
            *v += w * p;
        }
    }
    if let Some((w, f)) = dens {
        if w > 0.0 {
            let sig = pushforward(&Law::Density(f.clone()), cfg);
            let gl = GaussLegendre::new(cfg.gl_points);
            let part = increment_curve(&sig, n_max, &gl);
            for (v, p) in values.iter_mut().zip(part) {
                *v += w * p;
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    VotingCurve::new(values, Some(law.endpoint()))
}

fn discrete_curve(d: &DiscreteLaw, n_max: u64) -> Vec<f64> {
    (0..=n_max)
        .into_par_iter()
        .map(|n| d.atoms.iter().map(|a| a.weight * majority_accuracy(a.q, n)).sum())
        .collect()
}

/// Curve of a unit-mass law from its signature alone:
/// `V_0 = (1 + omega total)/2` and the moment increments.
pub fn increment_curve(sig: &SignedSignature, n_max: u64, gl: &GaussLegendre) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = sig.atoms.iter().map(|a| (a.r, a.weight)).collect();
    pts.extend(sig.density_points(gl));
    let total: f64 = pts.iter().map(|p| p.1).sum();
    pts.retain(|&(r, c)| c != 0.0 && r > 0.0);
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let x: Vec<f64> = pts.iter().map(|p| 4.0 * p.0).collect();
    let mut pow: Vec<f64> = x.clone();
    let mut active = pts.len();
    let mut values = Vec::with_capacity(n_max as usize + 1);
    let mut v = 0.5 * (1.0 + total);
    values.push(v);
    for n in 0..n_max {
        let mut s = 0.0;
        for p in 0..active {
            s += pts[p].1 * pow[p];
            pow[p] *= x[p];
        }
        // powers decrease along the r-sorted list; drop the underflowed tail
        while active > 0 && pow[active - 1] < 1e-300 {
            active -= 1;
        }
        v += odd_binomial_scaled(n) * s;
        values.push(v);
    }
    values
}

/// `V_n = int P_n dPi` by quadrature on the law itself.
pub fn curve_direct(law: &Law, n_max: u64, cfg: &QuadratureConfig) -> Result<VotingCurve> {
    check_n_max(n_max)?;
    let gl = GaussLegendre::new(cfg.gl_points);
    let values = (0..=n_max)
        .into_par_iter()
        .map(|n| law.expect(&gl, |q| majority_accuracy(q, n)))
        .collect();
    VotingCurve::new(values, Some(law.endpoint()))
}

/// `V_n = 1/2 + 1/2 int psi_n(r) omega(dr)` for a unit-mass law.
pub fn curve_level(sig: &SignedSignature, n_max: u64, gl: &GaussLegendre) -> Result<VotingCurve> {
    check_n_max(n_max)?;
    let mut pts: Vec<(f64, f64)> = sig.atoms.iter().map(|a| (a.r, a.weight)).collect();
    pts.extend(sig.density_points(gl));
    let values = (0..=n_max)
        .into_par_iter()
        .map(|n| 0.5 + 0.5 * pts.iter().map(|&(r, c)| c * psi_kernel(r, n)).sum::<f64>())
        .collect();
    VotingCurve::new(values, sig.endpoint().ok())
}

/// `s_0, ..., s_L` with `s_k = int r^k omega(dr)`, plus sampling
/// information when the prefix was estimated from grouped counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPrefix {
    pub s: Vec<f64>,
    /// Covariance of the estimate (already divided by `N`).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_examples: Option<u64>,
}

impl MomentPrefix {
    pub fn exact(s: Vec<f64>) -> Self {
        Self {
            s,
            covariance: None,
            depth: None,
            n_examples: None,
        }
    }

    /// Standard errors from the diagonal of the covariance.
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }
}

/// `V_k - V_{k-1} = C(2k-1, k) s_k` for `1 <= k <= L`.
pub fn prefix_to_increments(prefix: &MomentPrefix) -> Vec<(usize, f64)> {
    (1..prefix.s.len())
        .map(|k| (k, ln_odd_binomial(k as u64 - 1).exp() * prefix.s[k]))
        .collect()
}

/// `s_0 = 2 V_0 - 1`, `s_k = (V_k - V_{k-1}) / C(2k-1, k)`.
pub fn recover_moments(curve: &VotingCurve) -> MomentPrefix {
    let v = &curve.values;
    let mut s = Vec::with_capacity(v.len());
    if let Some(&v0) = v.first() {
        s.push(2.0 * v0 - 1.0);
    }
    for k in 1..v.len() {
        let inc = v[k] - v[k - 1];
        let ln_c = ln_odd_binomial(k as u64 - 1);
        let sk = if ln_c < 600.0 {
            inc / ln_c.exp()
        } else if inc == 0.0 {
            0.0
        } else {
            inc.signum() * (inc.abs().ln() - ln_c).exp()
        };
        s.push(sk);
    }
    MomentPrefix::exact(s)
}

/// Outcome of the realizability test for a signed measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Realizability {
    pub feasible: bool,
    /// `1 - int (1-4r)^{-1/2} |mu|(dr)`; `-inf` for an atom at `r = 1/4`.
    pub slack: f64,
}

pub fn check_realizable(mu: &SignedSignature) -> Realizability {
    let i = mu.kernel_abs_integral();
    Realizability {
        feasible: i.is_finite() && i <= 1.0 + REALIZE_TOL,
        slack: 1.0 - i,
    }
}

/// A law whose signature is `mu`: positive mass on the upper branch,
/// negative mass on the lower branch, each with weight `|mu| / sqrt(1-4r)`,
/// and the remaining slack at `q = 1/2`. A density part is realized with
/// zero slack on its own support and becomes the density of a hybrid law.
pub fn realize(mu: &SignedSignature) -> Result<Law> {
    let chk = check_realizable(mu);
    if !chk.feasible {
        return Err(Error::Infeasible(format!(
            "signature violates realizability: int |mu| / sqrt(1-4r) = {} > 1",
            1.0 - chk.slack
        )));
    }
    let mut atoms = Vec::with_capacity(mu.atoms.len() + 1);
    let mut used = 0.0;
    for a in &mu.atoms {
        let u = branch_gap(a.r);
        let w = a.weight.abs() / u;
        let q = if a.weight > 0.0 { 0.5 * (1.0 + u) } else { 0.5 * (1.0 - u) };
        atoms.push(Atom::new(q, w));
        used += w;
    }
    let dens_mass = if mu.has_density() { 0.5 * mu.density_abs_u_integral() } else { 0.0 };
    let slack = (1.0 - used - dens_mass).max(0.0);
    if slack > 0.0 {
        atoms.push(Atom::new(0.5, slack));
    }
    if dens_mass == 0.0 {
        let law = normalize_atoms(atoms)?;
        return Ok(Law::Discrete(law));
    }
    let zero = vec![0.0; mu.g_nodes.len()];
    let density = saturated_density(&mu.g_nodes, &mu.g_values, &zero, dens_mass)?;
    let disc_weight = 1.0 - dens_mass;
    if atoms.is_empty() || disc_weight <= 0.0 {
        return Ok(Law::Density(density));
    }
    let disc = normalize_atoms(atoms.into_iter().map(|a| Atom::new(a.q, a.weight / disc_weight)).collect())?;
    Ok(Law::Hybrid(HybridLaw {
        discrete: disc,
        density,
        discrete_weight: disc_weight,
    }))
}

/// Absorbs round-off so that weights sum to one exactly.
fn normalize_atoms(atoms: Vec<Atom>) -> Result<DiscreteLaw> {
    let total: f64 = atoms.iter().map(|a| a.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Infeasible(format!("realized atoms carry mass {total}")));
    }
    DiscreteLaw::new(atoms.into_iter().map(|a| Atom::new(a.q, a.weight / total)).collect())
}

/// Density with `f(q_+/-) = (|g| + h +/- g)/2`, rescaled by `1/mass`.
fn saturated_density(r: &[f64], g: &[f64], h: &[f64], mass: f64) -> Result<GridDensity> {
    let (r, g, h) = pad_radius_grid(r, g, h);
    let s: Vec<f64> = g.iter().zip(&h).map(|(g, h)| (g.abs() + h) / mass).collect();
    let g: Vec<f64> = g.iter().map(|g| g / mass).collect();
    let f = density_from_branches(&r, &g, &s);
    match f {
        Ok(f) => GridDensity::normalized(f.nodes, f.values),
        Err(e) => Err(e),
    }
}

/// Extends a radius grid to span `[0, 1/4]` with zeros outside its support.
fn pad_radius_grid(r: &[f64], g: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut r, mut g, mut h) = (r.to_vec(), g.to_vec(), h.to_vec());
    if r.first() != Some(&0.0) {
        let r0 = r[0];
        r.splice(0..0, [0.0, r0 * (1.0 - 1e-12)]);
        g.splice(0..0, [0.0, 0.0]);
        h.splice(0..0, [0.0, 0.0]);
    }
    if r.last() != Some(&0.25) {
        let rl = *r.last().unwrap();
        r.extend([rl + (0.25 - rl) * 1e-12, 0.25]);
        g.extend([0.0, 0.0]);
        h.extend([0.0, 0.0]);
    }
    (r, g, h)
}

/// A density with branch asymmetry `g` and branch-symmetric slack `h`:
/// `f(q_+/-(r)) = (|g| + h +/- g) / 2`.
///
/// `g` and `h` are sampled on `r_nodes` spanning `[0, 1/4]` and
/// interpolated linearly in `u`; `int (|g| + h) / sqrt(1-4r) dr` must be 1.
pub fn realize_density(r_nodes: &[f64], g: &[f64], h: &[f64]) -> Result<GridDensity> {
    if r_nodes.len() < 2 || g.len() != r_nodes.len() || h.len() != r_nodes.len() {
        return Err(Error::InvalidInput(
            "g and h must be sampled on the same radius grid of >= 2 nodes".into(),
        ));
    }
    if r_nodes[0] != 0.0 || *r_nodes.last().unwrap() != 0.25 || r_nodes.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "radius grid must be strictly increasing from 0 to 1/4".into(),
        ));
    }
    if let Some(v) = h.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("slack h has negative value {v}")));
    }
    let abs_g: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    let ig = kernel_weighted_integral(r_nodes, &abs_g);
    if ig > 1.0 + SLACK_TOL {
        return Err(Error::Infeasible(format!(
            "int |g| / sqrt(1-4r) dr = {ig} exceeds 1"
        )));
    }
    let ih = kernel_weighted_integral(r_nodes, h);
    if (ig + ih - 1.0).abs() > SLACK_TOL {
        return Err(Error::InvalidInput(format!(
            "slack integral {ih} does not match 1 - int |g| / sqrt(1-4r) dr = {}",
            1.0 - ig
        )));
    }
    saturated_density(r_nodes, g, h, ig + ih)
}
