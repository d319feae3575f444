//! The fixed-`q` binomial majority kernel.
//!
//! `P_n(q) = P{Bin(2n+1, q) >= n+1}` is evaluated on the lower branch
//! `q <= 1/2` only, where the tail is small and both evaluation paths keep
//! full relative accuracy; the upper branch follows from `P_n(1-q) = 1 - P_n(q)`.
//!
//! For `n <= DIRECT_SUM_MAX_N` the tail is summed term by term in the log
//! domain. Beyond that it is the regularized incomplete beta `I_q(n+1, n+1)`
//! by continued fraction, with the prefactor written in terms of
//! `ln(4q(1-q)) = ln_1p(-(2q-1)^2)` and the scaled central binomial
//! `C(2n, n) / 4^n` so nothing overflows for `n` up to `10^6`.

use statrs::function::factorial::ln_binomial;

/// Largest `n` evaluated by direct tail summation.
pub const DIRECT_SUM_MAX_N: u64 = 64;

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// An odd vote budget `M = 2n + 1`, indexed by `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BudgetIndex(pub u64);

impl BudgetIndex {
    pub fn votes(self) -> u64 {
        2 * self.0 + 1
    }
}

/// `ln(C(2n, n) / 4^n)`.
pub fn ln_central_binomial_scaled(n: u64) -> f64 {
    if n < 32 {
        let mut prod = 1.0;
        for k in 1..=n {
            prod *= (2 * k - 1) as f64 / (2 * k) as f64;
        }
        prod.ln()
    } else {
        let nf = n as f64;
        -0.5 * (std::f64::consts::PI * nf).ln() + stirling_tail(2.0 * nf) - 2.0 * stirling_tail(nf)
    }
}

/// `C(2n, n) / 4^n`.
pub fn central_binomial_scaled(n: u64) -> f64 {
    ln_central_binomial_scaled(n).exp()
}

/// `ln C(2n+1, n+1)`.
pub fn ln_odd_binomial(n: u64) -> f64 {
    ln_central_binomial_scaled(n) + (2 * n) as f64 * std::f64::consts::LN_2 + ratio_odd(n).ln()
}

/// `C(2n+1, n+1) / 4^(n+1)`, the worst-case weight of the `n`-th increment.
pub fn odd_binomial_scaled(n: u64) -> f64 {
    0.25 * ratio_odd(n) * central_binomial_scaled(n)
}

fn ratio_odd(n: u64) -> f64 {
    (2 * n + 1) as f64 / (n + 1) as f64
}

// ln Γ(z) - [(z - 1/2) ln z - z + ln(2π)/2], accurate to ~1e-17 for z >= 32.
fn stirling_tail(z: f64) -> f64 {
    let z2 = z * z;
    let z3 = z2 * z;
    let z5 = z3 * z2;
    let z7 = z5 * z2;
    let z9 = z7 * z2;
    1.0 / (12.0 * z) - 1.0 / (360.0 * z3) + 1.0 / (1260.0 * z5) - 1.0 / (1680.0 * z7)
        + 1.0 / (1188.0 * z9)
}

/// `ln(4 q (1 - q))` without cancellation near `q = 1/2`.
fn ln_four_r(q: f64) -> f64 {
    let d = 2.0 * q - 1.0;
    (-d * d).ln_1p()
}

/// Majority accuracy `P_n(q)` of `2n+1` iid Bernoulli(`q`) votes.
pub fn majority_accuracy(q: f64, n: u64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    if q == 0.5 {
        return 0.5;
    }
    if q < 0.5 {
        lower_tail(q, n)
    } else {
        1.0 - lower_tail(1.0 - q, n)
    }
}

/// Direct log-domain summation, valid for any `q` (used for `n <= 64`).
pub fn majority_accuracy_direct(q: f64, n: u64) -> f64 {
    let m = 2 * n + 1;
    binomial_upper_tail_direct(m, n + 1, q)
}

/// Continued-fraction evaluation of `I_q(n+1, n+1)` for `q <= 1/2`.
pub fn majority_accuracy_beta(q: f64, n: u64) -> f64 {
    debug_assert!(q <= 0.5);
    if q <= 0.0 {
        return 0.0;
    }
    if q == 0.5 {
        return 0.5;
    }
    let a = (n + 1) as f64;
    // x^a (1-x)^a / B(a, a) = (4r)^(n+1) / 4 * (2n+1) * C(2n,n)/4^n
    let ln_front = a * ln_four_r(q) - 4f64.ln()
        + ((2 * n + 1) as f64).ln()
        + ln_central_binomial_scaled(n);
    ln_front.exp() * beta_continued_fraction(a, a, q) / a
}

fn lower_tail(q: f64, n: u64) -> f64 {
    if n <= DIRECT_SUM_MAX_N {
        majority_accuracy_direct(q, n)
    } else {
        majority_accuracy_beta(q, n)
    }
}

/// `P{Bin(m, q) >= k}` by log-domain summation of the pmf.
pub fn binomial_upper_tail_direct(m: u64, k: u64, q: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > m {
        return 0.0;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let (lq, lp) = (q.ln(), (-q).ln_1p());
    // Smallest terms first for q <= 1/2 (the tail decreases in j there).
    let mut terms: Vec<f64> = (k..=m)
        .map(|j| (ln_binomial(m, j) + j as f64 * lq + (m - j) as f64 * lp).exp())
        .collect();
    if q <= 0.5 {
        terms.reverse();
    }
    terms.iter().sum()
}

/// `P{Bin(m, q) = k}`.
pub fn binomial_pmf(m: u64, k: u64, q: f64) -> f64 {
    if k > m {
        return 0.0;
    }
    if q <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if q >= 1.0 {
        return if k == m { 1.0 } else { 0.0 };
    }
    (ln_binomial(m, k) + k as f64 * q.ln() + (m - k) as f64 * (-q).ln_1p()).exp()
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
///
/// Returns the factor `cf` with `I_x(a,b) = x^a (1-x)^b / (a B(a,b)) * cf`;
/// converges quickly for `x < (a+1)/(a+b+2)`.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let max_iter = 1000 + 20 * (a.max(b).sqrt() as usize);
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=max_iter {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            return h;
        }
    }
    h
}

/// `P_{n+1}(q) - P_n(q) = C(2n+1, n+1) q^(n+1) (1-q)^(n+1) (2q - 1)`.
pub fn majority_increment(q: f64, n: u64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let a = (n + 1) as f64;
    odd_binomial_scaled(n) * (a * ln_four_r(q)).exp() * (2.0 * q - 1.0)
}

/// Even budget `2n` with a fair coin on ties: `P{Bin(2n,q) > n} + P{Bin(2n,q) = n}/2`.
pub fn even_majority_accuracy(q: f64, n: u64) -> f64 {
    assert!(n >= 1, "even budget needs n >= 1");
    let q = q.clamp(0.0, 1.0);
    if q == 0.0 || q == 1.0 {
        return q;
    }
    let m = 2 * n;
    let tie = central_binomial_scaled(n) * (n as f64 * ln_four_r(q)).exp();
    let strict = if n <= DIRECT_SUM_MAX_N {
        binomial_upper_tail_direct(m, n + 1, q)
    } else {
        // P{Bin(2n, q) >= n+1} = I_q(n+1, n); front = q^(n+1)(1-q)^n / B(n+1, n).
        let (a, b) = ((n + 1) as f64, n as f64);
        let ln_front = q.ln()
            + n as f64 * ln_four_r(q)
            + ln_central_binomial_scaled(n)
            + (n as f64).ln();
        if q < (a + 1.0) / (a + b + 2.0) {
            ln_front.exp() * beta_continued_fraction(a, b, q) / a
        } else {
            1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - q) / b
        }
    };
    strict + 0.5 * tie
}

/// `P_n'(q) = (2n+1) C(2n, n) q^n (1-q)^n`.
pub fn kernel_derivative(q: f64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let q = q.clamp(0.0, 1.0);
    (2 * n + 1) as f64 * central_binomial_scaled(n) * (n as f64 * ln_four_r(q)).exp()
}

/// Branch points `(q_+(r), q_-(r))` with `q(1-q) = r`.
pub fn branch_points(r: f64) -> (f64, f64) {
    let u = branch_gap(r);
    (0.5 * (1.0 + u), 0.5 * (1.0 - u))
}

/// `u = sqrt(1 - 4r)`, with round-off below zero clamped.
pub fn branch_gap(r: f64) -> f64 {
    (1.0 - 4.0 * r).max(0.0).sqrt()
}

/// Radius `r = q(1 - q)`.
pub fn radius(q: f64) -> f64 {
    q * (1.0 - q)
}

/// `psi_n(r) = (2 P_n(q_+(r)) - 1) / sqrt(1 - 4r)`, continuous on `[0, 1/4]`.
///
/// Near `r = 1/4` the quotient is replaced by the series
/// `(2n+1) C(2n,n)/4^n * sum_k C(n,k) (-u^2)^k / (2k+1)` in `u = sqrt(1-4r)`.
pub fn psi_kernel(r: f64, n: u64) -> f64 {
    let u2 = (1.0 - 4.0 * r).max(0.0);
    if u2 < 1e-8 || (n as f64) * u2 < 0.25 {
        return psi_series(u2, n);
    }
    let u = u2.sqrt();
    let lower = 0.5 * (1.0 - u);
    (1.0 - 2.0 * majority_accuracy(lower, n)) / u
}

fn psi_series(u2: f64, n: u64) -> f64 {
    let lead = (2 * n + 1) as f64 * central_binomial_scaled(n);
    let mut sum = 1.0;
    let mut coef = 1.0; // C(n, k) (-u2)^k
    for k in 1..=n {
        coef *= -((n - k + 1) as f64) / k as f64 * u2;
        let term = coef / (2 * k + 1) as f64;
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    lead * sum
}
