//! The signature prefix from fixed-depth grouped counts `C_i ~ Bin(J, Q_i)`.
//!
//! Depth `J` identifies `s_0, ..., s_L` with `L = floor((J-1)/2)` and nothing
//! more: [`nonident_pair`] builds two laws with the same count distribution
//! and different `s_{L+1}`.

use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::binomial_pmf;
use crate::latent_law::{Atom, DiscreteLaw, Law};
use crate::quadrature::GaussLegendre;
use crate::signature::{MomentPrefix, SigAtom, SignedSignature};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedSample {
    pub depth: u32,
    pub counts: Vec<u32>,
}

impl GroupedSample {
    pub fn new(depth: u32, counts: Vec<u32>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidInput("repeat depth J must be >= 1".into()));
        }
        if counts.is_empty() {
            return Err(Error::InvalidInput("grouped sample has no examples".into()));
        }
        if let Some(c) = counts.iter().find(|&&c| c > depth) {
            return Err(Error::InvalidInput(format!("count {c} exceeds depth J = {depth}")));
        }
        Ok(Self { depth, counts })
    }

    pub fn n_examples(&self) -> usize {
        self.counts.len()
    }

    /// Empirical count distribution on `0..=J`.
    pub fn pmf(&self) -> Vec<f64> {
        let mut h = vec![0u64; self.depth as usize + 1];
        for &c in &self.counts {
            h[c as usize] += 1;
        }
        let n = self.counts.len() as f64;
        h.into_iter().map(|x| x as f64 / n).collect()
    }

    /// Reads `example_id,count` rows. A header row is optional, blank lines
    /// are skipped and any other malformed row is an error.
    pub fn read_csv<R: BufRead>(reader: R, depth: u32) -> Result<Self> {
        let mut counts = Vec::new();
        let mut seen_data = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let fields: Vec<&str> = t.split(',').map(str::trim).collect();
            if !seen_data && fields.len() == 2 && fields[0].eq_ignore_ascii_case("example_id") && fields[1].eq_ignore_ascii_case("count") {
                seen_data = true;
                continue;
            }
            seen_data = true;
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 2 columns example_id,count, found {}", fields.len()),
                });
            }
            let c: u32 = fields[1].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("count {:?} is not a nonnegative integer", fields[1]),
            })?;
            if c > depth {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("count {c} exceeds --depth {depth}"),
                });
            }
            counts.push(c);
        }
        Self::new(depth, counts)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(12 * self.counts.len() + 20);
        out.push_str("example_id,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{i},{c}");
        }
        out
    }
}

/// `(c)_l / (J)_l`, as a product of ratios so it never overflows.
pub fn falling_ratio(c: u32, depth: u32, l: u32) -> f64 {
    if l > c {
        return 0.0;
    }
    let mut t = 1.0;
    for m in 0..l {
        t *= (c - m) as f64 / (depth - m) as f64;
    }
    t
}

/// `a_l = N^{-1} sum_i (C_i)_l / (J)_l`.
pub fn factorial_moment(sample: &GroupedSample, l: u32) -> Result<f64> {
    if l > sample.depth {
        return Err(Error::InvalidInput(format!(
            "factorial moment order {l} exceeds depth J = {}",
            sample.depth
        )));
    }
    if l == 0 {
        return Ok(1.0);
    }
    Ok(sample
        .pmf()
        .iter()
        .enumerate()
        .map(|(c, p)| p * falling_ratio(c as u32, sample.depth, l))
        .sum())
}

/// Largest identified index `floor((J-1)/2)`.
pub fn identified_len(depth: u32) -> usize {
    (depth as usize - 1) / 2
}

/// Per-count transformed vectors `y_k(c) = sum_l (-1)^l C(k,l) {2 t_{k+l+1}(c) - t_{k+l}(c)}`.
fn transform_table(depth: u32) -> Vec<Vec<f64>> {
    let l_max = identified_len(depth);
    (0..=depth)
        .map(|c| {
            let t: Vec<f64> = (0..=depth).map(|l| falling_ratio(c, depth, l)).collect();
            (0..=l_max)
                .map(|k| {
                    let mut binom = 1.0;
                    let mut acc = 0.0;
                    for l in 0..=k {
                        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                        acc += sign * binom * (2.0 * t[k + l + 1] - t[k + l]);
                        binom = binom * (k - l) as f64 / (l + 1) as f64;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Unbiased `s_0..s_L` with the sample covariance of the per-example
/// transformed vector divided by `N`.
pub fn signed_prefix(sample: &GroupedSample) -> MomentPrefix {
    let table = transform_table(sample.depth);
    let pmf = sample.pmf();
    let n = sample.n_examples() as f64;
    let dim = table[0].len();
    let mut mean = vec![0.0; dim];
    for (y, p) in table.iter().zip(&pmf) {
        for k in 0..dim {
            mean[k] += p * y[k];
        }
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    if n > 1.0 {
        let scale = n / (n - 1.0) / n;
        for (y, p) in table.iter().zip(&pmf) {
            if *p == 0.0 {
                continue;
            }
            for a in 0..dim {
                for b in 0..=a {
                    cov[a][b] += p * (y[a] - mean[a]) * (y[b] - mean[b]) * scale;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[b][a] = cov[a][b];
            }
        }
    }
    MomentPrefix {
        s: mean,
        covariance: Some(cov),
        depth: Some(sample.depth),
        n_examples: Some(sample.n_examples() as u64),
    }
}

/// The estimator evaluated on an exact count distribution, i.e. its expectation.
pub fn prefix_from_pmf(pmf: &[f64], depth: u32) -> Vec<f64> {
    let table = transform_table(depth);
    let dim = table[0].len();
    (0..dim)
        .map(|k| table.iter().zip(pmf).map(|(y, p)| p * y[k]).sum())
        .collect()
}

/// Count distribution of `Bin(J, Q)` mixed over the law.
pub fn count_pmf(law: &Law, depth: u32, gl: &GaussLegendre) -> Vec<f64> {
    (0..=depth)
        .map(|c| law.expect(gl, |q| binomial_pmf(depth as u64, c as u64, q)))
        .collect()
}

/// `N^{-1} sum_i (2 q_i - 1) delta_{q_i (1 - q_i)}` with `q_i = C_i / J`.
pub fn plugin_signature(sample: &GroupedSample) -> SignedSignature {
    let j = sample.depth as f64;
    let atoms = sample
        .pmf()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(c, p)| {
            let q = c as f64 / j;
            SigAtom {
                r: q * (1.0 - q),
                weight: p * (2.0 * q - 1.0),
            }
        })
        .collect();
    SignedSignature::from_atoms(atoms)
}

/// `||phi||_inf / sqrt(N) + (2 ||phi||_inf + Lip(phi)) / (2 sqrt(J))`.
pub fn plugin_bound(sup_phi: f64, lip_phi: f64, n_examples: u64, depth: u32) -> f64 {
    sup_phi / (n_examples as f64).sqrt() + (2.0 * sup_phi + lip_phi) / (2.0 * (depth as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonidentPair {
    pub law1: DiscreteLaw,
    pub law2: DiscreteLaw,
    pub k_witness: usize,
    pub support: Vec<f64>,
    /// Nullspace direction, normalized to unit Euclidean length.
    pub direction: Vec<f64>,
    pub epsilon: f64,
    /// `|s_k(law1) - s_k(law2)|` at `k_witness`.
    pub witness_gap: f64,
}

/// Witness gaps below this are not trusted to be more than SVD round-off.
pub const WITNESS_FLOOR: f64 = 1e-10;

/// Smallest weight kept on every support point.
pub const NONIDENT_MIN_WEIGHT: f64 = 0.01;

/// Two laws on `J + 2` points with equal raw moments up to degree `J`
/// (hence equal `Bin(J, .)` count laws) but different `s_k` at
/// `k = floor(J/2) + 1`.
///
/// Points are equally spaced on `[0.1, 0.9]`. That set is symmetric about
/// 1/2, and for odd `J` the kernel vector is then symmetric too and
/// annihilates every odd function of `2q - 1`, the signed moments included.
/// In that case the points are respaced on `[0.1, 0.8]`.
pub fn nonident_pair(depth: u32) -> Result<NonidentPair> {
    if depth == 0 {
        return Err(Error::InvalidInput("repeat depth J must be >= 1".into()));
    }
    let pts = depth as usize + 2;
    let base = 1.0 / pts as f64;
    if base <= NONIDENT_MIN_WEIGHT {
        return Err(Error::InvalidInput(format!(
            "depth {depth} leaves uniform weight {base:.4} below the floor {NONIDENT_MIN_WEIGHT}"
        )));
    }
    let mut last_support = Vec::new();
    for hi in [0.9, 0.8] {
        let support: Vec<f64> = (0..pts).map(|i| 0.1 + (hi - 0.1) * i as f64 / (pts - 1) as f64).collect();
        let pair = pair_on_support(depth, support.clone())?;
        if let Some(pair) = pair {
            return Ok(pair);
        }
        last_support = support;
    }
    Err(Error::DegenerateNullspace { points: last_support })
}

/// `None` when the witness gap is below [`WITNESS_FLOOR`].
fn pair_on_support(depth: u32, support: Vec<f64>) -> Result<Option<NonidentPair>> {
    let pts = support.len();
    let base = 1.0 / pts as f64;
    // Square matrix: J+1 Vandermonde rows plus a zero row, so the SVD exposes the kernel.
    let vander = DMatrix::from_fn(pts, pts, |d, i| if d <= depth as usize { support[i].powi(d as i32) } else { 0.0 });
    let svd = vander.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..pts).collect();
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let (smallest, next) = (sv[order[0]], sv[order[1]]);
    let largest = sv[order[pts - 1]];
    if smallest > 1e-10 * largest || next < 1e-13 * largest {
        return Err(Error::DegenerateNullspace { points: support });
    }
    let mut direction: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
    // fix the sign so the output is deterministic
    if direction[0] < 0.0 {
        direction.iter_mut().for_each(|v| *v = -*v);
    }
    let vmax = direction.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let epsilon = 0.5 * (base - NONIDENT_MIN_WEIGHT) / vmax;
    let build = |sign: f64| {
        let atoms = support
            .iter()
            .zip(&direction)
            .map(|(&q, &v)| Atom::new(q, base + sign * epsilon * v))
            .collect::<Vec<_>>();
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        DiscreteLaw::new(atoms.into_iter().map(|a| Atom::new(a.q, a.weight / total)).collect())
    };
    let law1 = build(1.0)?;
    let law2 = build(-1.0)?;
    let k_witness = depth as usize / 2 + 1;
    let diff = (discrete_signed_moment(&law1, k_witness) - discrete_signed_moment(&law2, k_witness)).abs();
    if diff < WITNESS_FLOOR {
        return Ok(None);
    }
    Ok(Some(NonidentPair {
        law1,
        law2,
        k_witness,
        support,
        direction,
        epsilon,
        witness_gap: diff,
    }))
}

/// `E[(2Q - 1)(Q(1-Q))^k]` for a discrete law.
pub fn discrete_signed_moment(law: &DiscreteLaw, k: usize) -> f64 {
    law.atoms
        .iter()
        .map(|a| a.weight * (2.0 * a.q - 1.0) * (a.q * (1.0 - a.q)).powi(k as i32))
        .sum()
}
