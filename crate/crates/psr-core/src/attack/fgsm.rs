//! Single signed-gradient step: `x_adv = clamp01(x + eps * sign(dL/dx))`
//! with `sign(0) = 0`.

use crate::attack::{clamp01, sign};
use crate::error::{Error, Result};
use crate::nn::Classifier;

pub(crate) fn fgsm_sample(
    model: &dyn Classifier,
    x: &[f32],
    y: usize,
    eps: f32,
) -> Result<Vec<f32>> {
    let (_, grad) = model.loss_input_grad(x, y)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("fgsm input gradient".into()));
    }
    Ok(x.iter().zip(&grad).map(|(&xi, &g)| clamp01(xi + eps * sign(g))).collect())
}
