//! Exchangeable sampling oracle: draw `Q_i` from the latent law, then iid
//! Bernoulli(`Q_i`) votes.
//!
//! Example `i` always uses ChaCha8 seeded from `seed` on stream `i`, and its
//! first draw is the latent `Q_i`. Results are therefore identical for any
//! number of worker threads, and the latents seen by [`sample_latents`],
//! [`simulate_counts`] and [`mc_curve`] coincide for the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::GroupedSample;
use crate::kernel::odd_binomial_scaled;
use crate::latent_law::Law;
use crate::signature::VotingCurve;

/// Identifier persisted in output metadata.
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64(seed)/stream=example_id";

const BLOCK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_examples: u64,
    pub repeat_depth: u32,
}

impl SimConfig {
    pub fn new(seed: u64, n_examples: u64, repeat_depth: u32) -> Result<Self> {
        let cfg = Self { seed, n_examples, repeat_depth };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::InvalidInput("n_examples must be >= 1".into()));
        }
        if self.repeat_depth == 0 {
            return Err(Error::InvalidInput("repeat_depth must be >= 1".into()));
        }
        Ok(())
    }
}

struct Streams(ChaCha8Rng);

impl Streams {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn example(&self, id: u64) -> ChaCha8Rng {
        let mut rng = self.0.clone();
        rng.set_stream(id);
        rng
    }
}

fn draw_latent(law: &Law, rng: &mut ChaCha8Rng) -> f64 {
    law.quantile(rng.random())
}

pub fn sample_latents(law: &Law, cfg: &SimConfig) -> Result<Vec<f64>> {
    law.validate()?;
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    Ok((0..cfg.n_examples)
        .into_par_iter()
        .map(|i| draw_latent(law, &mut streams.example(i)))
        .collect())
}

/// One count `C_i ~ Bin(J, Q_i)` per example.
pub fn simulate_counts(law: &Law, cfg: &SimConfig) -> Result<GroupedSample> {
    law.validate()?;
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let depth = cfg.repeat_depth;
    let counts: Vec<u32> = (0..cfg.n_examples)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.example(i);
            let q = draw_latent(law, &mut rng).clamp(0.0, 1.0);
            Binomial::new(depth as u64, q).expect("q in [0,1]").sample(&mut rng) as u32
        })
        .collect();
    GroupedSample::new(depth, counts)
}

/// Monte Carlo curve with per-budget standard errors.
///
/// `values` average the majority indicator of the simulated votes.
/// `rb_values` average `P(Q_i)` analytically (Rao-Blackwellized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCurve {
    /// Vote budget of each entry.
    pub votes: Vec<u64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub rb_values: Vec<f64>,
    pub rb_std_errors: Vec<f64>,
    pub n_examples: u64,
    pub seed: u64,
    pub rng: String,
}

impl McCurve {
    pub fn to_voting_curve(&self) -> Result<VotingCurve> {
        VotingCurve::new(self.values.clone(), None)
    }
}

#[derive(Clone)]
struct Acc {
    hits: Vec<u64>,
    rb: Vec<f64>,
    rb2: Vec<f64>,
}

impl Acc {
    fn new(len: usize) -> Self {
        Self { hits: vec![0; len], rb: vec![0.0; len], rb2: vec![0.0; len] }
    }

    fn add(&mut self, o: &Acc) {
        for i in 0..self.hits.len() {
            self.hits[i] += o.hits[i];
            self.rb[i] += o.rb[i];
            self.rb2[i] += o.rb2[i];
        }
    }
}

// P_0(q), ..., P_{len-1}(q) by the increment recursion.
fn kernel_row(q: f64, table: &[f64], out: &mut [f64]) {
    let d = 2.0 * q - 1.0;
    let four_r = (1.0 - d) * (1.0 + d);
    let mut p = q;
    let mut pow = four_r;
    for (n, o) in out.iter_mut().enumerate() {
        *o = p;
        if n < table.len() {
            p += table[n] * pow * d;
            pow *= four_r;
        }
    }
}

// Entry `n` of the Rao-Blackwell columns is `P_n(Q_i)`.
fn run<F>(law: &Law, cfg: &SimConfig, len: usize, body: F) -> Result<Acc>
where
    F: Fn(&mut ChaCha8Rng, f64, &mut [u64]) + Sync,
{
    law.validate()?;
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let table: Vec<f64> = (0..len as u64).map(odd_binomial_scaled).collect();
    let blocks = cfg.n_examples.div_ceil(BLOCK);
    let parts: Vec<Acc> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = Acc::new(len);
            let mut row = vec![0.0; len];
            let end = ((b + 1) * BLOCK).min(cfg.n_examples);
            for i in b * BLOCK..end {
                let mut rng = streams.example(i);
                let q = draw_latent(law, &mut rng).clamp(0.0, 1.0);
                body(&mut rng, q, &mut acc.hits);
                kernel_row(q, &table, &mut row);
                for (n, &v) in row.iter().enumerate() {
                    acc.rb[n] += v;
                    acc.rb2[n] += v * v;
                }
            }
            acc
        })
        .collect();
    let mut total = Acc::new(len);
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

fn finish(acc: Acc, votes: Vec<u64>, cfg: &SimConfig) -> McCurve {
    let n = cfg.n_examples as f64;
    let se = |s: f64, s2: f64| {
        if cfg.n_examples < 2 {
            return f64::NAN;
        }
        (((s2 - s * s / n) / (n - 1.0)).max(0.0) / n).sqrt()
    };
    let values = acc.hits.iter().map(|&h| h as f64 / n).collect();
    let std_errors = acc.hits.iter().map(|&h| se(h as f64, h as f64)).collect();
    let rb_values = acc.rb.iter().map(|s| s / n).collect();
    let rb_std_errors = acc.rb.iter().zip(&acc.rb2).map(|(&s, &s2)| se(s, s2)).collect();
    McCurve {
        votes,
        values,
        std_errors,
        rb_values,
        rb_std_errors,
        n_examples: cfg.n_examples,
        seed: cfg.seed,
        rng: RNG_ALGORITHM.to_string(),
    }
}

/// Odd budgets `2n+1`, `n = 0..=n_max`, from a single running vote sum per example.
pub fn mc_curve(law: &Law, n_max: u64, cfg: &SimConfig) -> Result<McCurve> {
    let len = n_max as usize + 1;
    let acc = run(law, cfg, len, |rng, q, hits| {
        let mut correct = 0u64;
        for n in 0..len {
            let first = if n == 0 { 1 } else { 2 };
            for _ in 0..first {
                correct += u64::from(rng.random::<f64>() < q);
            }
            if correct > n as u64 {
                hits[n] += 1;
            }
        }
    })?;
    Ok(finish(acc, (0..=n_max).map(|n| 2 * n + 1).collect(), cfg))
}

/// Even budgets `2n`, `n = 1..=n_max`, with ties broken by a fair coin.
/// The Rao-Blackwellized column averages `P_{n-1}(Q_i)`.
pub fn mc_even_curve(law: &Law, n_max: u64, cfg: &SimConfig) -> Result<McCurve> {
    if n_max == 0 {
        return Err(Error::InvalidInput("even-budget curve needs n_max >= 1".into()));
    }
    let len = n_max as usize;
    let acc = run(law, cfg, len, |rng, q, hits| {
        let mut correct = 0u64;
        for n in 1..=len as u64 {
            correct += u64::from(rng.random::<f64>() < q);
            correct += u64::from(rng.random::<f64>() < q);
            let win = match correct.cmp(&n) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Equal => rng.random::<bool>(),
                std::cmp::Ordering::Less => false,
            };
            if win {
                hits[n as usize - 1] += 1;
            }
        }
    })?;
    Ok(finish(acc, (1..=n_max).map(|n| 2 * n).collect(), cfg))
}
