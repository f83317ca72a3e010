//! Running statistics, mixture-BN banks and branch interpolation.

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchMoments, Graph, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Clean,
    Adv,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Clean => "clean",
            Branch::Adv => "adv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing updated.
    Eval,
}

/// Per-channel running mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running <- (1 - m) * running + m * batch`; the variance uses the
    /// unbiased batch estimate.
    pub fn ema(&mut self, batch: &BatchMoments, momentum: f64) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Two independent statistic banks of one mixture-BN site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbnState {
    pub clean: RunningStats,
    pub adv: RunningStats,
    pub momentum: f64,
    /// Default inference interpolation weight (0 = clean path, 1 = adversarial path).
    pub mbn_gamma: f64,
}

impl MbnState {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            clean: RunningStats::new(channels),
            adv: RunningStats::new(channels),
            momentum,
            mbn_gamma: 0.0,
        }
    }

    pub fn bank(&self, b: Branch) -> &RunningStats {
        match b {
            Branch::Clean => &self.clean,
            Branch::Adv => &self.adv,
        }
    }

    pub fn bank_mut(&mut self, b: Branch) -> &mut RunningStats {
        match b {
            Branch::Clean => &mut self.clean,
            Branch::Adv => &mut self.adv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(arg_err(format!("momentum must be in (0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.mbn_gamma) {
            return Err(arg_err(format!("mbn_gamma must be in [0, 1], got {}", self.mbn_gamma)));
        }
        if self.clean.channels() != self.adv.channels() {
            return Err(shape_err("mixture-BN banks differ in channel count"));
        }
        Ok(())
    }
}

/// Normalizes `x` through one branch of a mixture-BN site (without the affine
/// part, which the network applies per branch).
///
/// In train mode the batch statistics are used and only `branch`'s bank is
/// updated; in eval mode `branch`'s running statistics are used.
pub fn mbn_forward<'g>(
    g: &'g Graph,
    x: Var<'g>,
    state: &mut MbnState,
    branch: Branch,
    mode: Mode,
    eps: f64,
) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != state.clean.channels() {
        return Err(shape_err(format!(
            "mixture-BN with {} channels applied to features {:?}",
            state.clean.channels(),
            shape
        )));
    }
    match mode {
        Mode::Train => {
            let (out, moments) = g.batch_norm(x, eps)?;
            let m = state.momentum;
            state.bank_mut(branch).ema(&moments, m);
            Ok(out)
        }
        Mode::Eval => {
            let bank = state.bank(branch);
            g.fixed_norm(x, &bank.mean, &bank.var, eps)
        }
    }
}

/// `(1 - gamma) * z_c + gamma * z_a`.
pub fn mbn_interpolate_logits(z_c: &Tensor, z_a: &Tensor, gamma: f64) -> Result<Tensor> {
    if z_c.shape() != z_a.shape() {
        return Err(shape_err(format!(
            "logit shapes {:?} and {:?} differ",
            z_c.shape(),
            z_a.shape()
        )));
    }
    check_gamma(gamma)?;
    Ok(z_c.mapv(|v| (1.0 - gamma) * v) + z_a.mapv(|v| gamma * v))
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(arg_err(format!("interpolation weight must be in [0, 1], got {gamma}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let zc = t(&[2.0, 0.0], &[1, 2]);
        let za = t(&[0.0, 2.0], &[1, 2]);
        assert_eq!(mbn_interpolate_logits(&zc, &za, 0.0).unwrap(), zc);
        assert_eq!(mbn_interpolate_logits(&zc, &za, 1.0).unwrap(), za);
        assert_eq!(mbn_interpolate_logits(&zc, &za, 0.5).unwrap(), t(&[1.0, 1.0], &[1, 2]));
        assert!(mbn_interpolate_logits(&zc, &t(&[1.0], &[1, 1]), 0.5).is_err());
        assert!(mbn_interpolate_logits(&zc, &za, 1.5).is_err());
    }

    #[test]
    fn standardized_batch_is_fixed_point() {
        let g = Graph::new();
        // Two channels, four samples each with mean 0 and biased variance 1.
        let x = t(&[1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0], &[4, 2]);
        let mut st = MbnState::new(2, 0.1);
        let xv = g.constant(x.clone());
        let out = mbn_forward(&g, xv, &mut st, Branch::Clean, Mode::Train, 1e-5).unwrap();
        for (a, b) in out.value().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ema_by_hand() {
        let g = Graph::new();
        let x = t(&[1.0, 3.0, 5.0, 7.0], &[4, 1]);
        let mut st = MbnState::new(1, 0.1);
        let xv = g.constant(x);
        mbn_forward(&g, xv, &mut st, Branch::Adv, Mode::Train, 1e-5).unwrap();
        // batch mean 4, unbiased variance 20/3
        assert!((st.adv.mean[0] - 0.4).abs() < 1e-15);
        assert!((st.adv.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-15);
        assert_eq!(st.clean, RunningStats::new(1));
    }

    #[test]
    fn channel_mismatch() {
        let g = Graph::new();
        let mut st = MbnState::new(3, 0.1);
        let xv = g.constant(ArrayD::zeros(IxDyn(&[2, 2, 2, 2])));
        assert!(mbn_forward(&g, xv, &mut st, Branch::Clean, Mode::Eval, 1e-5).is_err());
    }
}
