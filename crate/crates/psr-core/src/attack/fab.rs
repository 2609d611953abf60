//! Fast adaptive boundary attack: repeatedly linearize the decision
//! boundary, project onto the closest linearized boundary inside the pixel
//! box (minimal L-infinity), and track the smallest successful perturbation.

use rand::Rng;

use crate::attack::{clamp01, AttackConfig};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::tensor::linf_distance;

const ALPHA_MAX: f64 = 0.1;
const OVERSHOOT: f64 = 1.05;
const BACKWARD_STEP: f64 = 0.9;
const MAX_CLASSES: usize = 16;

/// Minimal-L-infinity projection of `x` onto `{z : w.z + b = 0}` within the
/// box `[lo, hi]^d`. Returns `(z, t*)` where `t* = ||z - x||_inf`.
///
/// The reach `phi(t) = min/max of w.z + b over the box-clipped t-ball` is
/// piecewise linear in `t`; walking its breakpoints (sorted per-coordinate
/// travel limits) finds the smallest `t` whose reach interval contains 0.
pub fn project_box_hyperplane(
    x: &[f32],
    w: &[f32],
    b: f32,
    lo: f32,
    hi: f32,
) -> Result<(Vec<f32>, f32)> {
    if x.len() != w.len() {
        return Err(Error::ShapeMismatch("normal and point dimensions differ".into()));
    }
    if w.iter().all(|&wi| wi == 0.0) {
        return Err(Error::Infeasible("zero normal vector".into()));
    }
    let v0: f64 = x.iter().zip(w).map(|(&xi, &wi)| xi as f64 * wi as f64).sum::<f64>() + b as f64;
    if v0 == 0.0 {
        return Ok((x.to_vec(), 0.0));
    }
    // flip so the residual is positive and we always decrease toward zero
    let flip = if v0 > 0.0 { 1.0f64 } else { -1.0 };
    let v0 = v0 * flip;

    // per-coordinate travel limit before the box saturates, and |w| slope
    let mut breaks: Vec<(f64, f64)> = Vec::with_capacity(x.len());
    let mut active_slope = 0.0f64;
    for (&xi, &wi) in x.iter().zip(w) {
        let wi = wi as f64 * flip;
        if wi == 0.0 {
            continue;
        }
        let limit = if wi > 0.0 { xi as f64 - lo as f64 } else { hi as f64 - xi as f64 };
        let limit = limit.max(0.0);
        breaks.push((limit, wi.abs()));
        active_slope += wi.abs();
    }
    breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite breakpoints"));

    let mut cur_t = 0.0f64;
    let mut cur_v = v0;
    let mut t_star = None;
    for &(limit, slope) in &breaks {
        if active_slope > 0.0 && cur_v - active_slope * (limit - cur_t) <= 0.0 {
            t_star = Some(cur_t + cur_v / active_slope);
            break;
        }
        cur_v -= active_slope * (limit - cur_t);
        cur_t = limit;
        active_slope -= slope;
    }
    let t_star = match t_star {
        Some(t) => t,
        None if cur_v <= 1e-9 * (1.0 + v0.abs()) => cur_t,
        None => {
            return Err(Error::Infeasible(format!(
                "hyperplane misses the box (residual {cur_v:.3e} at full reach)"
            )))
        }
    };

    let z: Vec<f32> = x
        .iter()
        .zip(w)
        .map(|(&xi, &wi)| {
            let wi = wi as f64 * flip;
            if wi == 0.0 {
                xi
            } else {
                let moved = xi as f64 - wi.signum() * t_star;
                moved.clamp(lo as f64, hi as f64) as f32
            }
        })
        .collect();
    Ok((z, t_star as f32))
}

pub(crate) fn fab_sample(
    model: &dyn Classifier,
    x: &[f32],
    y: usize,
    cfg: &AttackConfig,
    stream_labels: &[u64],
) -> Result<Vec<f32>> {
    let k = model.n_classes();
    if k > MAX_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "fab scans all classes; {k} exceeds the supported {MAX_CLASSES}"
        )));
    }
    if model.predict(x)? != y {
        return Ok(x.to_vec()); // already adversarial at norm 0
    }
    let mut best: Option<(Vec<f32>, f32)> = None;
    let mut any_feasible = false;
    for restart in 0..cfg.n_restarts.max(1) {
        let mut labels = stream_labels.to_vec();
        labels.push(restart as u64);
        let mut rng = rng::stream(cfg.seed, &labels);
        let mut xt: Vec<f32> = if restart == 0 {
            x.to_vec()
        } else {
            let radius =
                best.as_ref().map(|(_, n)| 0.5 * n).unwrap_or_else(|| cfg.eps.max(0.05));
            x.iter().map(|&v| clamp01(v + rng.random_range(-radius..=radius))).collect()
        };
        for _ in 0..cfg.n_steps {
            // closest linearized boundary over all other classes
            let mut cand: Option<(f64, Vec<f32>, Vec<f32>, f64)> = None;
            for s in (0..k).filter(|&s| s != y) {
                let (margin, grad) = model.margin_input_grad(&xt, y, s)?;
                if !margin.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite("fab linearization".into()));
                }
                let dot: f64 =
                    grad.iter().zip(&xt).map(|(&g, &v)| g as f64 * v as f64).sum();
                let b = margin as f64 - dot;
                let Ok((zt, dt)) = project_box_hyperplane(&xt, &grad, b as f32, 0.0, 1.0) else {
                    continue;
                };
                let (z0, d0) = match project_box_hyperplane(x, &grad, b as f32, 0.0, 1.0) {
                    Ok(p) => (p.0, p.1 as f64),
                    Err(_) => (zt.clone(), dt as f64),
                };
                if cand.as_ref().map_or(true, |(d, ..)| (dt as f64) < *d) {
                    cand = Some((dt as f64, zt, z0, d0));
                }
            }
            let Some((dt, zt, z0, d0)) = cand else {
                break; // no boundary reachable from this iterate
            };
            any_feasible = true;
            let alpha = if dt + d0 > 0.0 { (dt / (dt + d0)).min(ALPHA_MAX) } else { 0.0 };
            let mut x_next: Vec<f32> = (0..xt.len())
                .map(|i| {
                    let stepped =
                        xt[i] as f64 + OVERSHOOT * (zt[i] as f64 - xt[i] as f64);
                    let biased = x[i] as f64 + OVERSHOOT * (z0[i] as f64 - x[i] as f64);
                    clamp01(((1.0 - alpha) * stepped + alpha * biased) as f32)
                })
                .collect();
            if model.predict(&x_next)? != y {
                let norm = linf_distance(&x_next, x);
                if best.as_ref().map_or(true, |(_, n)| norm < *n) {
                    best = Some((x_next.clone(), norm));
                }
                for (v, &oi) in x_next.iter_mut().zip(x) {
                    *v = ((1.0 - BACKWARD_STEP) * oi as f64 + BACKWARD_STEP * *v as f64) as f32;
                }
            }
            xt = x_next;
        }
    }
    if !any_feasible && cfg.n_steps > 0 {
        return Err(Error::Infeasible("every restart failed to reach a boundary".into()));
    }
    Ok(best.map(|(z, _)| z).unwrap_or_else(|| x.to_vec()))
}
