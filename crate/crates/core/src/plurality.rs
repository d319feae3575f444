//! Plurality voting over `K` classes with class 0 correct.
//!
//! Exact mode enumerates multinomial compositions; Monte Carlo mode splits
//! replicates into fixed blocks, each on its own ChaCha stream, so results do
//! not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_law::Law;
use crate::quadrature::GaussLegendre;

/// Exact enumeration refuses more states than this.
pub const MAX_EXACT_STATES: f64 = 1e7;

/// Replicates per Monte Carlo block (one RNG stream per block).
pub const MC_BLOCK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVector {
    p: Vec<f64>,
}

impl CategoricalVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidInput(format!("need K >= 2 classes, got {}", p.len())));
        }
        if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidInput(format!("class probability {x} is not a finite non-negative number")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("class probabilities sum to {s}, not 1")));
        }
        Ok(Self { p })
    }

    /// `(q, (1-q)/(K-1), ..., (1-q)/(K-1))`.
    pub fn symmetric_wrong(q: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) || k < 2 {
            return Err(Error::InvalidInput(format!("need q in [0,1] and K >= 2, got q={q}, K={k}")));
        }
        let w = (1.0 - q) / (k - 1) as f64;
        let mut p = vec![w; k];
        p[0] = q;
        Ok(Self { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    /// Appends `extra` zero-probability classes.
    pub fn padded(&self, extra: usize) -> Self {
        let mut p = self.p.clone();
        p.extend(std::iter::repeat_n(0.0, extra));
        Self { p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PluralityMode {
    Exact,
    MonteCarlo { seed: u64, reps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluralityEstimate {
    pub value: f64,
    /// `None` in exact mode.
    pub std_error: Option<f64>,
}

/// Score of one outcome: `1{n_0 maximal} / |argmax|`.
fn score(counts: &[u64]) -> f64 {
    let max = *counts.iter().max().unwrap();
    if counts[0] < max {
        return 0.0;
    }
    1.0 / counts.iter().filter(|&&c| c == max).count() as f64
}

/// `C(m + K - 1, K - 1)` in floating point.
pub fn composition_count(m: u64, k: usize) -> f64 {
    (1..k).fold(1.0, |c, i| c * (m + i as u64) as f64 / i as f64)
}

pub fn plurality_accuracy(p: &CategoricalVector, m: u64, mode: PluralityMode) -> Result<PluralityEstimate> {
    if m == 0 {
        return Err(Error::InvalidInput("vote budget m must be >= 1".into()));
    }
    match mode {
        PluralityMode::Exact => Ok(PluralityEstimate { value: exact_accuracy(p.probs(), m)?, std_error: None }),
        PluralityMode::MonteCarlo { seed, reps } => {
            let cum = cumulative(p.probs());
            let (mean, se) = mc_mean(seed, reps, |rng, counts| {
                draw_counts(rng, &cum, m, counts);
                score(counts)
            }, p.k())?;
            Ok(PluralityEstimate { value: mean, std_error: Some(se) })
        }
    }
}

// Zero-probability classes never reach the maximum (m >= 1), so only the
// support is enumerated and the state count is taken over it.
fn exact_accuracy(p: &[f64], m: u64) -> Result<f64> {
    if p[0] == 0.0 {
        return Ok(0.0);
    }
    let wrong: Vec<f64> = p[1..].iter().copied().filter(|&x| x > 0.0).collect();
    let states = composition_count(m, wrong.len() + 1);
    if states > MAX_EXACT_STATES {
        return Err(Error::StateSpaceTooLarge { states });
    }
    let mut ln_fact = vec![0.0; m as usize + 1];
    for i in 1..=m as usize {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let walk = Walk {
        ln_p: wrong.iter().map(|x| x.ln()).collect(),
        ln_p0: p[0].ln(),
        ln_fact,
    };
    let mut acc = 0.0;
    walk.descend(0, m as usize, walk.ln_fact[m as usize], 0, 0, &mut acc);
    Ok(acc)
}

struct Walk {
    ln_p: Vec<f64>,
    ln_p0: f64,
    ln_fact: Vec<f64>,
}

impl Walk {
    // Assigns counts to wrong classes one at a time; class 0 takes the rest.
    // `ln_w` carries ln m! + sum (n_j ln p_j - ln n_j!) for assigned classes.
    fn descend(&self, j: usize, rest: usize, ln_w: f64, top: usize, ties: usize, acc: &mut f64) {
        if top > rest {
            return;
        }
        if j == self.ln_p.len() {
            let ln_w = ln_w + rest as f64 * self.ln_p0 - self.ln_fact[rest];
            let s = if rest > top { 1.0 } else { 1.0 / (ties + 1) as f64 };
            *acc += s * ln_w.exp();
            return;
        }
        for c in 0..=rest {
            let lw = ln_w + c as f64 * self.ln_p[j] - self.ln_fact[c];
            let (t, k) = match c.cmp(&top) {
                std::cmp::Ordering::Greater => (c, 1),
                std::cmp::Ordering::Equal => (top, ties + 1),
                std::cmp::Ordering::Less => (top, ties),
            };
            self.descend(j + 1, rest - c, lw, t, k, acc);
        }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut s = 0.0;
    let mut c: Vec<f64> = p.iter().map(|x| {
        s += x;
        s
    }).collect();
    // guard against the last partial sum landing just under 1
    let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(0);
    for v in &mut c[last..] {
        *v = f64::INFINITY;
    }
    c
}

fn draw_counts(rng: &mut ChaCha8Rng, cum: &[f64], m: u64, counts: &mut [u64]) {
    counts.iter_mut().for_each(|c| *c = 0);
    for _ in 0..m {
        let u: f64 = rng.random();
        let j = cum.partition_point(|&c| c <= u);
        counts[j] += 1;
    }
}

/// Block-parallel mean and standard error of `f` over `reps` replicates.
fn mc_mean<F>(seed: u64, reps: u64, f: F, k: usize) -> Result<(f64, f64)>
where
    F: Fn(&mut ChaCha8Rng, &mut [u64]) -> f64 + Sync,
{
    if reps < 2 {
        return Err(Error::InvalidInput("Monte Carlo needs at least 2 replicates".into()));
    }
    let base = ChaCha8Rng::seed_from_u64(seed);
    let blocks = reps.div_ceil(MC_BLOCK);
    let parts: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = base.clone();
            rng.set_stream(b);
            let mut counts = vec![0u64; k];
            let n = MC_BLOCK.min(reps - b * MC_BLOCK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..n {
                let x = f(&mut rng, &mut counts);
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = reps as f64;
    let mean = s / n;
    let var = ((s2 - s * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Limit of the plurality accuracy: `1{p_0 maximal} / |argmax|`.
pub fn plurality_endpoint(p: &CategoricalVector) -> f64 {
    let p = p.probs();
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if p[0] < max {
        return 0.0;
    }
    1.0 / p.iter().filter(|&&x| x == max).count() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QNotEnough {
    pub q: f64,
    pub k: usize,
    /// Wrong mass on a single class.
    pub a_conc: f64,
    /// Wrong mass split over two classes.
    pub a_diff: f64,
    /// `(endpoint of the concentrated vector, endpoint of the split vector)`.
    pub endpoints: (f64, f64),
}

/// Two categorical vectors with the same correct-class probability `q` but
/// different three-vote plurality accuracies.
pub fn q_not_enough_witness(q: f64, k: usize) -> Result<QNotEnough> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!("q must lie in (0, 1), got {q}")));
    }
    if k < 3 {
        return Err(Error::InvalidInput(format!("need K >= 3, got {k}")));
    }
    let conc = CategoricalVector { p: vec![q, 1.0 - q, 0.0] }.padded(k - 3);
    let h = 0.5 * (1.0 - q);
    let diff = CategoricalVector { p: vec![q, h, h] }.padded(k - 3);
    Ok(QNotEnough {
        q,
        k,
        a_conc: exact_accuracy(conc.probs(), 3)?,
        a_diff: exact_accuracy(diff.probs(), 3)?,
        endpoints: (plurality_endpoint(&conc), plurality_endpoint(&diff)),
    })
}

/// `E A_m(Q)` for the symmetric-wrong vector at each `m` in `m_list`.
pub fn symmetric_wrong_curve(
    law: &Law,
    k: usize,
    m_list: &[u64],
    mode: PluralityMode,
    gl: &GaussLegendre,
) -> Result<Vec<PluralityEstimate>> {
    law.validate()?;
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2, got {k}")));
    }
    m_list
        .iter()
        .map(|&m| {
            if m == 0 {
                return Err(Error::InvalidInput("vote budget m must be >= 1".into()));
            }
            match mode {
                PluralityMode::Exact => {
                    let states = composition_count(m, k);
                    if states > MAX_EXACT_STATES {
                        return Err(Error::StateSpaceTooLarge { states });
                    }
                    let v = law.expect(gl, |q| {
                        let p = CategoricalVector::symmetric_wrong(q.clamp(0.0, 1.0), k).unwrap();
                        exact_accuracy(p.probs(), m).unwrap()
                    });
                    Ok(PluralityEstimate { value: v, std_error: None })
                }
                PluralityMode::MonteCarlo { seed, reps } => {
                    let (mean, se) = mc_mean(seed, reps, |rng, counts| {
                        let q = law.quantile(rng.random());
                        let p = CategoricalVector::symmetric_wrong(q, k).unwrap();
                        draw_counts(rng, &cumulative(p.probs()), m, counts);
                        score(counts)
                    }, k)?;
                    Ok(PluralityEstimate { value: mean, std_error: Some(se) })
                }
            }
        })
        .collect()
}
