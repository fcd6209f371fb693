use super::{Gradients, NetworkParams};
use crate::error::{FlareError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: NetworkParams,
    pub second: NetworkParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. Layers whose canonical index is marked in
/// `frozen` are left untouched, moments included.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    frozen: &[bool],
) -> Result<()> {
    if grads.spec != params.spec || state.first.spec != params.spec {
        return Err(FlareError::ShapeMismatch(
            "gradient or optimizer state does not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    let layers = params
        .layers_mut()
        .zip(grads.layers())
        .zip(state.first.layers_mut().zip(state.second.layers_mut()));
    for (i, ((p, g), (m, v))) in layers.enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        let pv = p.values_mut();
        let gv = g.values();
        let mv = m.values_mut();
        let vv = v.values_mut();
        for (((w, &gw), mw), vw) in pv.zip(gv).zip(mv).zip(vv) {
            *mw = b1 * *mw + (1.0 - b1) * gw;
            *vw = b2 * *vw + (1.0 - b2) * gw * gw;
            let m_hat = *mw / bc1;
            let v_hat = *vw / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
