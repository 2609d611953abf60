//! Rényi-DP accountant for the subsampled Gaussian mechanism over an
//! integer order grid, with sigma calibration against a target epsilon.

use crate::error::{Error, Result};

/// Integer Rényi orders tracked by the accountant.
pub const ORDER_MIN: u32 = 2;
pub const ORDER_MAX: u32 = 256;

/// RDP of one subsampled-Gaussian step at integer order `alpha`:
///
/// `rho = log( sum_{j=0}^{alpha} C(alpha,j) (1-q)^(alpha-j) q^j
///             exp(j(j-1)/(2 sigma^2)) ) / (alpha - 1)`
///
/// computed in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Accountant(format!("order must be >= 2, got {alpha}")));
    }
    if !(0.0 < q && q <= 1.0) {
        return Err(Error::Accountant(format!("sampling rate {q} outside (0,1]")));
    }
    if sigma <= 0.0 {
        return Err(Error::Accountant(format!("sigma {sigma} must be positive")));
    }
    let a = alpha as f64;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let ln_q = q.ln();
    let ln_1q = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };

    // log-terms, tracking the running max for a final log-sum-exp
    let mut ln_terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_binom = 0.0f64; // log C(alpha, 0)
    let mut max_term = f64::NEG_INFINITY;
    for j in 0..=alpha {
        let jf = j as f64;
        // (1-q)^(alpha-j): an exponent of zero contributes nothing even at q=1
        let ln_pow_1q = if j == alpha { 0.0 } else { (a - jf) * ln_1q };
        let coeff = ln_binom + ln_pow_1q + jf * ln_q;
        if coeff != f64::NEG_INFINITY {
            let t = coeff + jf * (jf - 1.0) * inv2s2;
            max_term = max_term.max(t);
            ln_terms.push(t);
        }
        if j < alpha {
            ln_binom += (a - jf).ln() - (jf + 1.0).ln();
        }
    }
    let sum: f64 = ln_terms.iter().map(|&t| (t - max_term).exp()).sum();
    let rho = (max_term + sum.ln()) / (a - 1.0);
    if !rho.is_finite() {
        return Err(Error::Accountant(format!(
            "rdp overflow at alpha={alpha}, q={q}, sigma={sigma}: sigma too small for this order"
        )));
    }
    // tiny negative values can appear from rounding at q ~ 0
    Ok(rho.max(0.0))
}

/// Accumulated RDP per order over all noisy steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantState {
    pub steps: u64,
    orders: Vec<u32>,
    rdp: Vec<f64>,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new()
    }
}

impl AccountantState {
    pub fn new() -> Self {
        let orders: Vec<u32> = (ORDER_MIN..=ORDER_MAX).collect();
        let rdp = vec![0.0; orders.len()];
        Self { steps: 0, orders, rdp }
    }

    pub fn record_step(&mut self, q: f64, sigma: f64) -> Result<()> {
        self.record_steps(1, q, sigma)
    }

    /// Composes `t` steps of the subsampled Gaussian with parameters (q, sigma).
    pub fn record_steps(&mut self, t: u64, q: f64, sigma: f64) -> Result<()> {
        if t == 0 {
            return Ok(());
        }
        for (i, &alpha) in self.orders.iter().enumerate() {
            self.rdp[i] += t as f64 * rdp_subsampled_gaussian(q, sigma, alpha)?;
        }
        self.steps += t;
        Ok(())
    }

    /// `(epsilon, best order)` via the classic conversion
    /// `eps = min_alpha [ rdp(alpha) + log(1/delta)/(alpha-1) ]`.
    /// Zero steps report `epsilon = 0` with a warning.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, u32)> {
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::Accountant(format!("delta {delta} outside (0,1)")));
        }
        if self.steps == 0 {
            log::warn!("accountant queried before any noisy step; reporting epsilon = 0");
            return Ok((0.0, ORDER_MAX));
        }
        let ln_inv_delta = (1.0 / delta).ln();
        let mut best: Option<(f64, u32)> = None;
        for (&alpha, &rho) in self.orders.iter().zip(&self.rdp) {
            let eps = rho + ln_inv_delta / (alpha as f64 - 1.0);
            if eps.is_finite() && best.map_or(true, |(b, _)| eps < b) {
                best = Some((eps, alpha));
            }
        }
        best.ok_or_else(|| Error::Accountant("no finite epsilon on the order grid".into()))
    }
}

/// Epsilon after `t` homogeneous steps at (q, sigma); convenience used by
/// calibration and the CLI.
pub fn epsilon_for(q: f64, sigma: f64, t: u64, delta: f64) -> Result<(f64, u32)> {
    let mut st = AccountantState::new();
    st.record_steps(t, q, sigma)?;
    st.epsilon(delta)
}

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 64.0);

/// Bisects sigma in [0.3, 64] until the accounted epsilon is within 1% of
/// the target. Epsilon decreases in sigma over the bracket.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, t: u64) -> Result<f64> {
    if target_eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("target epsilon {target_eps} must be positive")));
    }
    if t == 0 {
        return Err(Error::InvalidConfig("cannot calibrate sigma for zero steps".into()));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_lo = epsilon_for(q, lo, t, delta)?.0;
    let eps_hi = epsilon_for(q, hi, t, delta)?.0;
    if eps_lo < eps_hi {
        return Err(Error::Accountant("epsilon is not decreasing over the sigma bracket".into()));
    }
    if target_eps > eps_lo || target_eps < eps_hi {
        return Err(Error::Unreachable(format!(
            "target epsilon {target_eps} outside [{eps_hi:.4}, {eps_lo:.4}] reachable for sigma in [0.3, 64]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps = epsilon_for(q, mid, t, delta)?.0;
        if ((eps - target_eps) / target_eps).abs() <= 0.01 {
            return Ok(mid);
        }
        if eps > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Unreachable(format!(
        "bisection did not reach within 1% of epsilon {target_eps}"
    )))
}
