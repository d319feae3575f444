//! Latent laws of the per-example correctness probability `Q`.
//!
//! A [`Law`] is discrete, a piecewise-linear [`GridDensity`], or a hybrid
//! mixture of the two. Named constructions (the oscillating law, the
//! margin worst case and the five gallery laws) resolve to one of these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::branch_gap;
use crate::quadrature::GaussLegendre;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const DENSITY_MASS_TOL: f64 = 1e-10;
const BRANCH_MASS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub q: f64,
    pub weight: f64,
}

impl Atom {
    pub fn new(q: f64, weight: f64) -> Self {
        Self { q, weight }
    }
}

/// A finitely supported law. Atoms are kept sorted by `q` with duplicates merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    pub atoms: Vec<Atom>,
}

impl DiscreteLaw {
    /// Merges atoms at identical `q`, then validates.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let law = Self::merged(atoms);
        law.validate()?;
        Ok(law)
    }

    pub fn point(q: f64) -> Self {
        Self {
            atoms: vec![Atom::new(q, 1.0)],
        }
    }

    /// Builds a law from `(q, weight)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(q, w)| Atom::new(q, w)).collect())
    }

    fn merged(mut atoms: Vec<Atom>) -> Self {
        atoms.sort_by(|a, b| a.q.total_cmp(&b.q));
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match out.last_mut() {
                Some(last) if last.q == a.q => last.weight += a.weight,
                _ => out.push(a),
            }
        }
        Self { atoms: out }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::InvalidLaw("discrete law has no atoms".into()));
        }
        for a in &self.atoms {
            if !(0.0..=1.0).contains(&a.q) {
                return Err(Error::InvalidLaw(format!("atom location {} outside [0, 1]", a.q)));
            }
            if !(a.weight > 0.0) || !a.weight.is_finite() {
                return Err(Error::InvalidLaw(format!(
                    "atom at q={} has non-positive weight {}",
                    a.q, a.weight
                )));
            }
        }
        if self.atoms.windows(2).any(|w| w[0].q >= w[1].q) {
            return Err(Error::InvalidLaw("atom locations are not distinct".into()));
        }
        let total: f64 = self.atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidLaw(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight * a.q).sum()
    }

    fn quantile(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for a in &self.atoms {
            acc += a.weight;
            if u < acc {
                return a.q;
            }
        }
        self.atoms.last().map(|a| a.q).unwrap_or(0.5)
    }
}

/// A piecewise-linear density on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let d = Self { nodes, values };
        d.validate()?;
        Ok(d)
    }

    /// Samples `f` at the nodes and rescales to unit mass.
    pub fn from_fn_normalized<F: Fn(f64) -> f64>(nodes: Vec<f64>, f: F) -> Result<Self> {
        let values = nodes.iter().map(|&x| f(x)).collect();
        Self::normalized(nodes, values)
    }

    /// Rescales `values` so that the interpolant has unit mass.
    pub fn normalized(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let raw = Self { nodes, values };
        raw.validate_shape()?;
        let m = raw.mass();
        if !(m > 0.0) {
            return Err(Error::InvalidLaw("density has zero mass".into()));
        }
        let values = raw.values.iter().map(|v| v / m).collect();
        Self::new(raw.nodes, values)
    }

    /// `n` equally spaced nodes on `[0, 1]`.
    pub fn uniform_nodes(n: usize) -> Vec<f64> {
        assert!(n >= 2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn uniform() -> Self {
        Self {
            nodes: vec![0.0, 1.0],
            values: vec![1.0, 1.0],
        }
    }

    fn validate_shape(&self) -> Result<()> {
        if self.nodes.len() < 2 || self.nodes.len() != self.values.len() {
            return Err(Error::InvalidLaw(format!(
                "density needs >= 2 nodes and one value per node (got {} nodes, {} values)",
                self.nodes.len(),
                self.values.len()
            )));
        }
        if self.nodes[0] != 0.0 || *self.nodes.last().unwrap() != 1.0 {
            return Err(Error::InvalidLaw("density nodes must start at 0 and end at 1".into()));
        }
        if let Some(w) = self.nodes.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidLaw(format!(
                "density nodes not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some((x, v)) = self
            .nodes
            .iter()
            .zip(&self.values)
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidLaw(format!("negative density {v} at q={x}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        let m = self.mass();
        if (m - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::InvalidLaw(format!("density integrates to {m}, expected 1")));
        }
        Ok(())
    }

    /// Linear interpolant at `x` (zero outside `[0, 1]`).
    pub fn value(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let i = self.nodes.partition_point(|&t| t <= x);
        if i == 0 {
            return self.values[0];
        }
        if i >= self.nodes.len() {
            return *self.values.last().unwrap();
        }
        let (x0, x1) = (self.nodes[i - 1], self.nodes[i]);
        let (f0, f1) = (self.values[i - 1], self.values[i]);
        f0 + (f1 - f0) * (x - x0) / (x1 - x0)
    }

    /// Trapezoid integral, exact for the interpolant.
    pub fn mass(&self) -> f64 {
        self.segments().map(|(x0, x1, f0, f1)| 0.5 * (x1 - x0) * (f0 + f1)).sum()
    }

    /// Exact mass of the interpolant on `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for (x0, x1, f0, f1) in self.segments() {
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let at = |x: f64| f0 + (f1 - f0) * (x - x0) / (x1 - x0);
            total += 0.5 * (hi - lo) * (at(lo) + at(hi));
        }
        total
    }

    pub fn mean(&self) -> f64 {
        // Simpson is exact for x * (linear).
        self.segments()
            .map(|(x0, x1, f0, f1)| {
                let xm = 0.5 * (x0 + x1);
                (x1 - x0) / 6.0 * (x0 * f0 + 4.0 * xm * 0.5 * (f0 + f1) + x1 * f1)
            })
            .sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.nodes
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, f)| (x[0], x[1], f[0], f[1]))
    }

    /// `E phi(Q)` under the density, with a Gauss-Legendre rule per segment.
    pub fn expect<F: FnMut(f64) -> f64>(&self, gl: &GaussLegendre, mut phi: F) -> f64 {
        let mut total = 0.0;
        for (x0, x1, f0, f1) in self.segments() {
            if f0 == 0.0 && f1 == 0.0 {
                continue;
            }
            total += gl.integrate(x0, x1, |x| {
                let fx = f0 + (f1 - f0) * (x - x0) / (x1 - x0);
                fx * phi(x)
            });
        }
        total
    }

    /// Inverse of the piecewise-quadratic CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let target = u.clamp(0.0, 1.0) * self.mass();
        let mut acc = 0.0;
        for (x0, x1, f0, f1) in self.segments() {
            let h = x1 - x0;
            let seg = 0.5 * h * (f0 + f1);
            if acc + seg >= target && seg > 0.0 {
                let rem = target - acc;
                let slope = (f1 - f0) / h;
                let disc = (f0 * f0 + 2.0 * slope * rem).max(0.0);
                let denom = f0 + disc.sqrt();
                let t = if denom > 0.0 { 2.0 * rem / denom } else { 0.0 };
                return (x0 + t.clamp(0.0, h)).min(x1);
            }
            acc += seg;
        }
        1.0
    }
}

/// Atoms plus a density: `discrete_weight * discrete + (1 - discrete_weight) * density`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridLaw {
    pub discrete: DiscreteLaw,
    pub density: GridDensity,
    pub discrete_weight: f64,
}

/// A probability law for `Q` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Law {
    Discrete(DiscreteLaw),
    Density(GridDensity),
    Hybrid(HybridLaw),
}

impl From<DiscreteLaw> for Law {
    fn from(d: DiscreteLaw) -> Self {
        Law::Discrete(d)
    }
}

impl From<GridDensity> for Law {
    fn from(d: GridDensity) -> Self {
        Law::Density(d)
    }
}

impl Law {
    pub fn point(q: f64) -> Self {
        Law::Discrete(DiscreteLaw::point(q))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Law::Discrete(d) => d.validate(),
            Law::Density(f) => f.validate(),
            Law::Hybrid(h) => {
                if !(0.0..=1.0).contains(&h.discrete_weight) {
                    return Err(Error::InvalidLaw(format!(
                        "discrete_weight {} outside [0, 1]",
                        h.discrete_weight
                    )));
                }
                h.discrete.validate()?;
                h.density.validate()
            }
        }
    }

    /// `(weight, part)` pairs of the discrete and density components.
    pub fn parts(&self) -> (Option<(f64, &DiscreteLaw)>, Option<(f64, &GridDensity)>) {
        match self {
            Law::Discrete(d) => (Some((1.0, d)), None),
            Law::Density(f) => (None, Some((1.0, f))),
            Law::Hybrid(h) => (
                Some((h.discrete_weight, &h.discrete)),
                Some((1.0 - h.discrete_weight, &h.density)),
            ),
        }
    }

    /// `E phi(Q)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, gl: &GaussLegendre, mut phi: F) -> f64 {
        let (disc, dens) = self.parts();
        let mut total = 0.0;
        if let Some((w, d)) = disc {
            total += w * d.atoms.iter().map(|a| a.weight * phi(a.q)).sum::<f64>();
        }
        if let Some((w, f)) = dens {
            if w > 0.0 {
                total += w * f.expect(gl, &mut phi);
            }
        }
        total
    }

    /// `E Q`, which is also `V_0`.
    pub fn mean(&self) -> f64 {
        let (disc, dens) = self.parts();
        disc.map_or(0.0, |(w, d)| w * d.mean()) + dens.map_or(0.0, |(w, f)| w * f.mean())
    }

    /// `Pi(|Q - 1/2| <= t)`.
    pub fn margin_mass(&self, t: f64) -> f64 {
        let (disc, dens) = self.parts();
        let atoms = disc.map_or(0.0, |(w, d)| {
            w * d
                .atoms
                .iter()
                .filter(|a| (a.q - 0.5).abs() <= t)
                .map(|a| a.weight)
                .sum::<f64>()
        });
        atoms + dens.map_or(0.0, |(w, f)| w * f.mass_between(0.5 - t, 0.5 + t))
    }

    /// `V_inf = Pi((1/2, 1]) + Pi({1/2}) / 2`.
    pub fn endpoint(&self) -> f64 {
        let (disc, dens) = self.parts();
        let atoms = disc.map_or(0.0, |(w, d)| {
            w * d
                .atoms
                .iter()
                .map(|a| {
                    if a.q > 0.5 {
                        a.weight
                    } else if a.q == 0.5 {
                        0.5 * a.weight
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        });
        atoms + dens.map_or(0.0, |(w, f)| w * f.mass_between(0.5, 1.0))
    }

    /// Inverse CDF of the mixture.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            Law::Discrete(d) => d.quantile(u),
            Law::Density(f) => f.quantile(u),
            Law::Hybrid(h) => {
                if u < h.discrete_weight {
                    h.discrete.quantile(u / h.discrete_weight)
                } else {
                    let w = 1.0 - h.discrete_weight;
                    h.density.quantile((u - h.discrete_weight) / w)
                }
            }
        }
    }

    pub fn to_spec(&self) -> LawSpec {
        match self.clone() {
            Law::Discrete(d) => LawSpec::Discrete { atoms: d.atoms },
            Law::Density(f) => LawSpec::GridDensity {
                nodes: f.nodes,
                values: f.values,
            },
            Law::Hybrid(h) => LawSpec::Hybrid {
                discrete: h.discrete,
                density: h.density,
                discrete_weight: h.discrete_weight,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: LawSpec = serde_json::from_str(text)?;
        spec.resolve()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.to_spec()).expect("law specs always serialize")
    }
}

/// On-disk law description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSpec {
    Discrete {
        atoms: Vec<Atom>,
    },
    GridDensity {
        nodes: Vec<f64>,
        values: Vec<f64>,
    },
    Hybrid {
        discrete: DiscreteLaw,
        density: GridDensity,
        discrete_weight: f64,
    },
    Oscillation {
        j_max: u32,
    },
    MarginWorstCase {
        #[serde(rename = "C")]
        c: f64,
        kappa: f64,
        t0: f64,
    },
    Figure1 {
        name: String,
    },
}

impl LawSpec {
    pub fn resolve(self) -> Result<Law> {
        match self {
            LawSpec::Discrete { atoms } => Ok(Law::Discrete(DiscreteLaw::new(atoms)?)),
            LawSpec::GridDensity { nodes, values } => Ok(Law::Density(GridDensity::new(nodes, values)?)),
            LawSpec::Hybrid {
                discrete,
                density,
                discrete_weight,
            } => {
                let law = Law::Hybrid(HybridLaw {
                    discrete: DiscreteLaw::merged(discrete.atoms),
                    density,
                    discrete_weight,
                });
                law.validate()?;
                Ok(law)
            }
            LawSpec::Oscillation { j_max } => make_named(&NamedLaw::Oscillation { j_max }),
            LawSpec::MarginWorstCase { c, kappa, t0 } => {
                make_named(&NamedLaw::MarginWorstCase(MarginCondition::new(c, kappa, t0)?))
            }
            LawSpec::Figure1 { name } => make_named(&NamedLaw::Figure1(name.parse()?)),
        }
    }
}

/// Local margin condition `Pi(|Q - 1/2| <= t) <= C t^kappa` for `0 < t < t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginCondition {
    #[serde(rename = "C")]
    pub c: f64,
    pub kappa: f64,
    pub t0: f64,
}

impl MarginCondition {
    pub fn new(c: f64, kappa: f64, t0: f64) -> Result<Self> {
        if !(c > 0.0) || !(kappa > 0.0) || !(t0 > 0.0 && t0 <= 0.5) {
            return Err(Error::InvalidInput(format!(
                "margin condition needs C > 0, kappa > 0, 0 < t0 <= 1/2 (got C={c}, kappa={kappa}, t0={t0})"
            )));
        }
        Ok(Self { c, kappa, t0 })
    }
}

/// The five laws of the one-call-accuracy-3/4 gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Figure1Curve {
    Constant,
    FastDrop,
    DipThenSurpass,
    RiseThenFall,
    SlowRise,
}

impl Figure1Curve {
    pub const ALL: [Figure1Curve; 5] = [
        Figure1Curve::Constant,
        Figure1Curve::FastDrop,
        Figure1Curve::DipThenSurpass,
        Figure1Curve::RiseThenFall,
        Figure1Curve::SlowRise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure1Curve::Constant => "constant",
            Figure1Curve::FastDrop => "fast drop",
            Figure1Curve::DipThenSurpass => "dip then surpass",
            Figure1Curve::RiseThenFall => "rise then fall",
            Figure1Curve::SlowRise => "slow rise",
        }
    }

    /// File-name friendly form of [`Figure1Curve::name`].
    pub fn slug(self) -> String {
        self.name().replace(' ', "_")
    }

    pub fn atoms(self) -> &'static [(f64, f64)] {
        match self {
            Figure1Curve::Constant => &[(0.0, 0.25), (1.0, 0.75)],
            Figure1Curve::FastDrop => &[(0.3488, 0.3839066), (1.0, 0.6160934)],
            Figure1Curve::DipThenSurpass => {
                &[(0.1690, 0.2072827), (0.6043333, 0.1964989), (1.0, 0.5962184)]
            }
            Figure1Curve::RiseThenFall => &[(0.38, 0.315067), (0.92, 0.683229), (1.0, 0.001704)],
            Figure1Curve::SlowRise => &[(0.5095, 0.509684), (1.0, 0.490316)],
        }
    }

    pub fn law(self) -> DiscreteLaw {
        DiscreteLaw::from_pairs(self.atoms()).expect("gallery laws are valid")
    }
}

impl std::str::FromStr for Figure1Curve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        Figure1Curve::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown figure1 curve {s:?}; expected one of: constant, fast drop, dip then surpass, rise then fall, slow rise"
                ))
            })
    }
}

/// Parametric constructions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NamedLaw {
    /// Alternating-branch atoms approaching `q = 1/2`, truncated at `j_max`.
    Oscillation { j_max: u32 },
    /// Atom at 1 mixed with `1/2 + X`, `P(X <= t) = (t/t0)^kappa`.
    MarginWorstCase(MarginCondition),
    Figure1(Figure1Curve),
}

/// Default truncation of the oscillating law.
pub const DEFAULT_OSCILLATION_J_MAX: u32 = 10;

/// Number of density panels on `(1/2, 1/2 + t0]` in the margin worst case.
pub const WORST_CASE_PANELS: usize = 2048;

pub fn make_named(kind: &NamedLaw) -> Result<Law> {
    match *kind {
        NamedLaw::Figure1(c) => Ok(Law::Discrete(c.law())),
        NamedLaw::Oscillation { j_max } => {
            if j_max < 1 {
                return Err(Error::InvalidInput("oscillation needs j_max >= 1".into()));
            }
            let mut atoms = Vec::with_capacity(j_max as usize);
            for j in 1..=j_max {
                let (q, w) = oscillation_atom(j);
                atoms.push(Atom::new(q, w));
            }
            let total: f64 = atoms.iter().map(|a| a.weight).sum();
            for a in &mut atoms {
                a.weight /= total;
            }
            Ok(Law::Discrete(DiscreteLaw::new(atoms)?))
        }
        NamedLaw::MarginWorstCase(cond) => worst_case_law(cond),
    }
}

/// Unnormalized `(b_j, e^{-j^2} / sqrt(1 - 4 r_j))` with `r_j = e^{-2^{-j}} / 4`.
fn oscillation_atom(j: u32) -> (f64, f64) {
    let gap = (-(-(2f64).powi(-(j as i32))).exp_m1()).sqrt();
    let q = if j % 2 == 0 {
        0.5 * (1.0 + gap)
    } else {
        0.5 * (1.0 - gap)
    };
    let w = (-((j * j) as f64)).exp() / gap;
    (q, w)
}

/// Radius `r_j = e^{-2^{-j}} / 4` of the `j`-th oscillation atom.
pub fn oscillation_radius(j: u32) -> f64 {
    0.25 * (-(2f64).powi(-(j as i32))).exp()
}

fn worst_case_law(cond: MarginCondition) -> Result<Law> {
    let MarginCondition { c, kappa, t0 } = cond;
    let a = (0.5f64).min(c * t0.powf(kappa) / 2.0);
    // Density of 1/2 + X; quadratic spacing refines the panels next to 1/2,
    // and a near-vertical first panel stands in for the jump when kappa <= 1.
    let n = WORST_CASE_PANELS;
    let mut ts = vec![0.0, t0 * 1e-12];
    ts.extend((1..=n).map(|i| t0 * (i as f64 / n as f64).powi(2)));
    let cdf = |t: f64| (t / t0).powf(kappa);
    let mut nodes = vec![0.0, 0.5];
    let mut values = vec![0.0, 0.0];
    for i in 1..ts.len() {
        let v = if kappa >= 1.0 {
            kappa * ts[i].powf(kappa - 1.0) / t0.powf(kappa)
        } else {
            // singular at 1/2: use the mean density over the neighbouring cells
            let hi = ts.get(i + 1).copied().unwrap_or(ts[i]);
            (cdf(hi) - cdf(ts[i - 1])) / (hi - ts[i - 1])
        };
        nodes.push(0.5 + ts[i]);
        values.push(v);
    }
    if *nodes.last().unwrap() < 1.0 {
        let edge = 0.5 + t0;
        let after = edge + (1.0 - edge) * 1e-9;
        nodes.push(after);
        values.push(0.0);
        nodes.push(1.0);
        values.push(0.0);
    }
    *nodes.last_mut().unwrap() = 1.0;
    let density = GridDensity::normalized(nodes, values)?;
    Ok(Law::Hybrid(HybridLaw {
        discrete: DiscreteLaw::point(1.0),
        density,
        discrete_weight: 1.0 - a,
    }))
}

/// Branch view of a density over radii `r = q(1-q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDecomposition {
    /// Increasing radii in `[0, 1/4]`.
    pub r_nodes: Vec<f64>,
    /// `g(r) = f(q_+(r)) - f(q_-(r))`.
    pub g_values: Vec<f64>,
    /// `s(r) = f(q_+(r)) + f(q_-(r))`.
    pub s_values: Vec<f64>,
}

impl BranchDecomposition {
    /// Checks `|g| <= s` and `int s / sqrt(1-4r) dr = 1`.
    pub fn validate(&self) -> Result<()> {
        for (i, (g, s)) in self.g_values.iter().zip(&self.s_values).enumerate() {
            if g.abs() > s + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "|g| = {} exceeds s = {} at r = {}",
                    g.abs(),
                    s,
                    self.r_nodes[i]
                )));
            }
        }
        let mass = kernel_weighted_integral(&self.r_nodes, &self.s_values);
        if (mass - 1.0).abs() > BRANCH_MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "branch-symmetric mass {mass} differs from 1"
            )));
        }
        Ok(())
    }

    /// Rebuilds the density from `f(q_+/-) = (s +/- g) / 2`, i.e. slack `h = s - |g|`.
    pub fn reconstruct(&self) -> Result<GridDensity> {
        density_from_branches(&self.r_nodes, &self.g_values, &self.s_values)
    }
}

/// `int_0^{1/4} F(r) / sqrt(1-4r) dr` for `F` linear in `u = sqrt(1-4r)` between
/// nodes. With `dr = -(u/2) du` this is `(1/2) int_0^1 F du`: a trapezoid in `u`.
pub fn kernel_weighted_integral(r_nodes: &[f64], values: &[f64]) -> f64 {
    let us: Vec<f64> = r_nodes.iter().map(|&r| branch_gap(r)).collect();
    let mut total = 0.0;
    for i in 1..us.len() {
        total += 0.5 * (us[i - 1] - us[i]) * (values[i - 1] + values[i]);
    }
    0.5 * total
}

/// Density with branch values `f(q_+) = (s + g)/2`, `f(q_-) = (s - g)/2`, on
/// the symmetric node set `q = (1 +/- u)/2`.
pub(crate) fn density_from_branches(r_nodes: &[f64], g: &[f64], s: &[f64]) -> Result<GridDensity> {
    if r_nodes.first() != Some(&0.0) || r_nodes.last() != Some(&0.25) {
        return Err(Error::InvalidInput("radius grid must span [0, 1/4]".into()));
    }
    let n = r_nodes.len();
    let mut nodes = Vec::with_capacity(2 * n - 1);
    let mut values = Vec::with_capacity(2 * n - 1);
    // lower branch: r increasing => q_- increasing from 0 to 1/2
    for i in 0..n {
        let u = branch_gap(r_nodes[i]);
        nodes.push(0.5 * (1.0 - u));
        values.push((0.5 * (s[i] - g[i])).max(0.0));
    }
    // upper branch, skipping r = 1/4 (already at q = 1/2)
    for i in (0..n - 1).rev() {
        let u = branch_gap(r_nodes[i]);
        nodes.push(0.5 * (1.0 + u));
        values.push((0.5 * (s[i] + g[i])).max(0.0));
    }
    let mid = n - 1;
    // f is single-valued at q = 1/2 where g must vanish
    values[mid] = 0.5 * s[mid];
    GridDensity::new(nodes, values)
}

/// Radius grid uniform in `u = sqrt(1-4r)` with `size` nodes, merged with
/// the images `|2x - 1|` of the density's own nodes so that `g` and `s`
/// are exactly piecewise linear in `u` between consecutive nodes.
pub fn branch_grid(f: &GridDensity, size: usize) -> Vec<f64> {
    let size = size.max(2);
    let mut us: Vec<f64> = (0..size).map(|i| i as f64 / (size - 1) as f64).collect();
    us.extend(f.nodes.iter().map(|&x| (2.0 * x - 1.0).abs()));
    us.sort_by(|a, b| b.total_cmp(a));
    us.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    *us.first_mut().unwrap() = 1.0;
    *us.last_mut().unwrap() = 0.0;
    let mut rs: Vec<f64> = us.into_iter().map(|u| 0.25 * (1.0 - u * u)).collect();
    // u below ~1e-8 is not resolvable in r
    rs.dedup();
    rs
}

pub fn branch_decompose(f: &GridDensity, r_grid_size: usize) -> BranchDecomposition {
    let r_nodes = branch_grid(f, r_grid_size);
    let mut g_values = Vec::with_capacity(r_nodes.len());
    let mut s_values = Vec::with_capacity(r_nodes.len());
    // Density nodes within ~1e-8 of 1/2 collapse onto r = 1/4. Sample that
    // node at the outermost of them so a steep ramp at 1/2 keeps its mass.
    let collapsed = f
        .nodes
        .iter()
        .map(|&x| (2.0 * x - 1.0).abs())
        .filter(|&u| 0.25 * (1.0 - u * u) == 0.25)
        .fold(0.0, f64::max);
    for &r in &r_nodes {
        let u = if r == 0.25 { collapsed } else { branch_gap(r) };
        let up = f.value(0.5 * (1.0 + u));
        let lo = f.value(0.5 * (1.0 - u));
        g_values.push(up - lo);
        s_values.push(up + lo);
    }
    BranchDecomposition {
        r_nodes,
        g_values,
        s_values,
    }
}
