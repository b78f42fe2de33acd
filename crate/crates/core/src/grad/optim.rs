use super::{GradError, Real, Tensor};

/// Classical (non-Nesterov) momentum SGD with L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// `v ← m·v + (g + wd·p)`, then `p ← p − lr·v`.
pub fn sgd_momentum_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    velocity: &mut Tensor<F>,
    lr: F,
    cfg: SgdConfig,
) -> Result<(), GradError> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(GradError::Shape {
            op: "sgd_momentum_step",
            detail: format!("param {:?}, grad {:?}, velocity {:?}", param.shape(), grad.shape(), velocity.shape()),
        });
    }
    if !grad.all_finite() {
        return Err(GradError::NonFinite { op: "sgd_momentum_step" });
    }
    let m = F::lit(cfg.momentum);
    let wd = F::lit(cfg.weight_decay);
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = m * *v + (g + wd * *p);
        let delta = lr * *v;
        // subtracting a zero step must leave the bits alone (-0.0 - -0.0 = +0.0)
        if delta != F::zero() {
            *p = *p - delta;
        }
    }
    Ok(())
}
