use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Hyper-parameters of decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0f32; s.iter().product()];
        Self {
            config,
            step: 0,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn for_params(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }
}

/// One AdamW update of every parameter in place. `lrs[i]` is the learning
/// rate of parameter `i`, so groups with different rates share one state.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamWState,
    lrs: &[f32],
) -> Result<(), TensorError> {
    if params.len() != state.first.len() || grads.len() != params.len() || lrs.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "adamw_step: {} params, {} grads, {} lrs for a state of {}",
            params.len(),
            grads.len(),
            lrs.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.numel() != state.first[i].len() {
            return Err(TensorError::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if lrs[i] < 0.0 || !lrs[i].is_finite() {
            return Err(TensorError::Contract(format!("learning rate {} must be >= 0", lrs[i])));
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "adamw_step gradient",
                index,
            });
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= lr * (weight_decay * *w + m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}

/// Linear decay from `base` to zero over `total` steps: step `t` (0-based)
/// uses `base * (total - t) / total`, so the last step runs at `base / total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub base: f32,
    pub total: u64,
}

impl LinearDecay {
    pub fn new(base: f32, total: u64) -> Self {
        Self { base, total }
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        if self.total == 0 || step >= self.total {
            return 0.0;
        }
        (self.base as f64 * (self.total - step) as f64 / self.total as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]).unwrap();
        let g = Tensor::from_vec(vec![0.5, 0.5, -1.0]).unwrap();
        let before = p.clone();
        let mut st = AdamWState::for_params(AdamWConfig::default(), &[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, &[0.0]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn one_step_matches_hand_unrolled_recurrence() {
        // Hand-unrolled first step with b1=0.9, b2=0.999, wd=0.01:
        // m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
        // w1 = w0 - lr (wd w0 + g / (|g| + eps))
        let (w0, g0, lr, wd, eps) = (0.75f64, -0.3f64, 0.01f64, 0.01f64, 1e-8f64);
        let m = 0.1 * g0;
        let v = 0.001 * g0 * g0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = w0 - lr * (wd * w0 + m_hat / (v_hat.sqrt() + eps));

        let cfg = AdamWConfig {
            weight_decay: wd as f32,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::from_vec(vec![w0 as f32]).unwrap();
        let g = Tensor::from_vec(vec![g0 as f32]).unwrap();
        let mut st = AdamWState::for_params(cfg, &[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, &[lr as f32]).unwrap();
        assert!((p.data()[0] as f64 - expected).abs() < 1e-7, "{} vs {expected}", p.data()[0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = Tensor::from_vec(vec![1.0]).unwrap();
        let g = Tensor::from_parts(vec![1], vec![f32::NAN]);
        let mut st = AdamWState::for_params(AdamWConfig::default(), &[&p]);
        let err = adamw_step(&mut [&mut p], &[&g], &mut st, &[0.1]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn linear_decay_ends_at_base_over_total() {
        let sched = LinearDecay::new(0.001, 40);
        assert_eq!(sched.lr_at(0), 0.001);
        assert!((sched.lr_at(39) - 0.001 / 40.0).abs() < 1e-12);
        assert_eq!(sched.lr_at(40), 0.0);
    }
}
