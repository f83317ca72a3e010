use ndarray::{ArrayD, Axis};

use crate::autograd::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::nfcore::{Param, ParamKind, ParamStore};

/// `lr0 (1 + cos(pi step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(arg_err(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// Adaptive gradient clipping per unit (row along axis 0):
/// `g <- g min(1, lambda max(|w|, eps) / |g|)`.
pub fn agc_clip(grad: &Tensor, weight: &Tensor, agc_lambda: f64, agc_eps: f64) -> Result<Tensor> {
    if grad.shape() != weight.shape() {
        return Err(shape_err(format!(
            "agc: gradient {:?} vs weight {:?}",
            grad.shape(),
            weight.shape()
        )));
    }
    let mut out = grad.clone();
    if grad.ndim() == 0 {
        return Ok(out);
    }
    for (mut gr, wr) in out.axis_iter_mut(Axis(0)).zip(weight.axis_iter(Axis(0))) {
        let gn = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            continue;
        }
        let wn = wr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_norm = agc_lambda * wn.max(agc_eps);
        if gn > max_norm {
            let s = max_norm / gn;
            gr.mapv_inplace(|v| v * s);
        }
    }
    Ok(out)
}

/// Weight decay applies to weights only; biases, gains and normalization
/// affine parameters are exempt.
pub fn decays(p: &Param) -> bool {
    p.kind == ParamKind::Weight
}

fn clipped(p: &Param) -> bool {
    p.kind == ParamKind::Weight && !p.name.starts_with("head.")
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `d = g + wd w; v = mu v + d; w -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub agc: Option<(f64, f64)>,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64, agc: Option<(f64, f64)>) -> Self {
        Self {
            momentum,
            weight_decay,
            agc,
            velocity: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// Applies one update; `grads[i]` belongs to parameter `i`. Clipping (when
    /// enabled) acts on the raw loss gradient before weight decay is added.
    pub fn step(&mut self, params: &mut ParamStore, grads: Vec<Tensor>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(arg_err("gradient count does not match the parameter count"));
        }
        for (i, g) in grads.into_iter().enumerate() {
            let p = params.get(i);
            let mut d = match self.agc {
                Some((l, e)) if clipped(p) => agc_clip(&g, &p.value, l, e)?,
                _ => g,
            };
            if self.weight_decay > 0.0 && decays(p) {
                d.zip_mut_with(&p.value, |a, w| *a += self.weight_decay * w);
            }
            let v = &mut self.velocity[i];
            v.zip_mut_with(&d, |a, b| *a = self.momentum * *a + b);
            let mut w = (*p.value).clone();
            w.zip_mut_with(v, |a, b| *a -= lr * b);
            params.set(i, w);
        }
        Ok(())
    }
}
