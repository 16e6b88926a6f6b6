use crate::autodiff::{GradientMap, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter, created lazily on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update in place. Parameters without a gradient
/// are treated as having a zero gradient.
pub fn adam_step(params: &mut ParamSet, grads: &GradientMap, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let Some(p) = params.get(name) else {
            return Err(Error::invalid(
                "adam",
                format!("gradient for unknown parameter `{name}`"),
            ));
        };
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let p = params.get_mut(&name).expect("listed");
        if !state.m.contains(&name) {
            state.m.insert(name.clone(), Tensor::zeros(p.shape()));
            state.v.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        let m = state.m.get_mut(&name).expect("inserted").data_mut();
        let v = state.v.get_mut(&name).expect("inserted").data_mut();
        let g = grads.get(&name).map(Tensor::data);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
