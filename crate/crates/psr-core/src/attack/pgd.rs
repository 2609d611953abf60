//! Projected gradient descent: iterated signed-gradient ascent with
//! projection onto the eps ball intersected with the pixel box, random
//! start, and best-loss iterate selection.

use rand::Rng;

use crate::attack::{clamp01, sign, AttackConfig};
use crate::error::{Error, Result};
use crate::nn::{loss, Classifier};
use crate::rng;

fn project(x0: &[f32], x: &mut [f32], eps: f32) {
    for (xi, &oi) in x.iter_mut().zip(x0) {
        *xi = xi.clamp(oi - eps, oi + eps).clamp(0.0, 1.0);
    }
}

pub(crate) fn pgd_sample(
    model: &dyn Classifier,
    x: &[f32],
    y: usize,
    cfg: &AttackConfig,
    stream_labels: &[u64],
) -> Result<Vec<f32>> {
    let k = model.n_classes();
    let mut best: Option<(Vec<f32>, f32)> = None;
    let consider = |cand: &[f32], loss_val: f32, best: &mut Option<(Vec<f32>, f32)>| {
        if best.as_ref().map_or(true, |(_, l)| loss_val > *l) {
            *best = Some((cand.to_vec(), loss_val));
        }
    };
    for restart in 0..cfg.n_restarts.max(1) {
        let mut labels = stream_labels.to_vec();
        labels.push(restart as u64);
        let mut rng = rng::stream(cfg.seed, &labels);
        let mut xt: Vec<f32> = if cfg.random_start && cfg.eps > 0.0 {
            x.iter().map(|&v| clamp01(v + rng.random_range(-cfg.eps..=cfg.eps))).collect()
        } else {
            x.to_vec()
        };
        project(x, &mut xt, cfg.eps);
        for _ in 0..cfg.n_steps {
            let (l, grad) = model.loss_input_grad(&xt, y)?;
            if !l.is_finite() {
                return Err(Error::NonFinite("pgd loss".into()));
            }
            consider(&xt, l, &mut best);
            for (xi, &g) in xt.iter_mut().zip(&grad) {
                *xi += cfg.step_size * sign(g);
            }
            project(x, &mut xt, cfg.eps);
        }
        let final_loss = loss::ce_loss_sample(&model.logits(&xt)?, y, k)?;
        consider(&xt, final_loss, &mut best);
    }
    Ok(best.expect("at least one iterate considered").0)
}
