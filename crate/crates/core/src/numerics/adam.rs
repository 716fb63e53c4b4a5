use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(shape: &[usize], lr: f64) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.first_moment.shape()
        || param.shape() != state.second_moment.shape()
    {
        return Err(Error::dim(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, moments {:?}/{:?}",
                param.shape(),
                grad.shape(),
                state.first_moment.shape(),
                state.second_moment.shape()
            ),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        let g = g.wide();
        let mi = b1 * m.wide() + (1.0 - b1) * g;
        let vi = b2 * v.wide() + (1.0 - b2) * g * g;
        *m = T::of(mi);
        *v = T::of(vi);
        let update = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
        if update != 0.0 {
            *p = T::of(p.wide() - update);
        }
    }
    if !param.is_finite() {
        return Err(Error::NonFinite("adam_step"));
    }
    Ok(())
}
