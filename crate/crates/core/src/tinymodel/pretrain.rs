use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{block_forward, Model, ModelConfig, VarBlock};
use crate::numkit::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor};
use crate::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub warmup: u64,
    pub weight_decay: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 128,
            lr: 2e-3,
            warmup: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            log_every: 50,
        }
    }
}

impl PretrainConfig {
    /// Warmup then linear decay to zero.
    pub fn lr_at(&self, step: u64) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let rest = self.steps.saturating_sub(self.warmup).max(1);
        self.lr * (self.steps - step) as f32 / rest as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    /// `(step, mean training loss since the previous entry)`.
    pub losses: Vec<(u64, f32)>,
    pub final_loss: Option<f32>,
}

/// Next-token training from a fresh initialization of `config` on random
/// windows of `train`. `on_log` sees every logged `(step, loss)`.
pub fn pretrain(
    config: ModelConfig,
    train: &[usize],
    cfg: &PretrainConfig,
    mut on_log: impl FnMut(u64, f32),
) -> Result<(Model, PretrainReport)> {
    let mut model = Model::init(config)?;
    let (b, t) = (cfg.batch_size, cfg.seq_len);
    if b == 0 || t == 0 || train.len() < b * (t + 1) {
        return Err(contract(format!(
            "corpus of {} tokens too short for batch {b} x context {t}",
            train.len()
        )));
    }
    if t > model.config.max_seq_len {
        return Err(contract(format!("context {t} exceeds max_seq_len {}", model.config.max_seq_len)));
    }
    let ctx = model.ctx(b, t)?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = {
        let refs: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamWState::for_params(adam, &refs)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = PretrainReport {
        steps: cfg.steps,
        losses: Vec::new(),
        final_loss: None,
    };
    let (mut acc, mut acc_n) = (0.0f64, 0u64);
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for _ in 0..b {
            let o = rng.gen_range(0..=train.len() - t - 1);
            inputs.extend_from_slice(&train[o..o + t]);
            targets.extend_from_slice(&train[o + 1..o + t + 1]);
        }

        tape.reset();
        let vars: Vec<_> = model.named_tensors().into_iter().map(|(_, w)| tape.param(w.clone())).collect();
        let mut x = tape.embedding(vars[0], &inputs)?;
        for l in 0..model.config.n_layers {
            let base = 1 + l * 9;
            let mut blk = VarBlock {
                attn_norm: vars[base],
                mlp_norm: vars[base + 1],
                linears: std::array::from_fn(|i| vars[base + 2 + i]),
            };
            x = block_forward(&mut tape, &mut blk, x, &ctx)?;
        }
        let n = vars.len();
        let h = tape.rmsnorm(x, vars[n - 2], model.config.norm_eps)?;
        let logits = tape.matmul(h, vars[n - 1])?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_v = tape.value(loss).item();
        if !loss_v.is_finite() {
            return Err(Error::Diverged(format!("loss {loss_v} at step {step}")));
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| tape.take_grad(v).ok_or_else(|| contract("missing parameter gradient")))
            .collect::<Result<_>>()?;
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32;
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = cfg.lr_at(step);
        let lrs = vec![lr; grads.len()];
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adamw_step(&mut model.tensors_mut(), &grad_refs, &mut state, &lrs)?;

        acc += loss_v as f64;
        acc_n += 1;
        report.final_loss = Some(loss_v);
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || step + 1 == cfg.steps {
            let mean = (acc / acc_n as f64) as f32;
            report.losses.push((step + 1, mean));
            on_log(step + 1, mean);
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq_len: 8,
            seed: 1,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn zero_steps_is_initialization() {
        let train: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let pc = PretrainConfig {
            steps: 0,
            batch_size: 2,
            seq_len: 8,
            ..Default::default()
        };
        let (m, r) = pretrain(cfg(), &train, &pc, |_, _| {}).unwrap();
        assert_eq!(m, Model::init(cfg()).unwrap());
        assert_eq!(r.final_loss, None);
    }

    #[test]
    fn learns_periodic_sequence_deterministically() {
        let train: Vec<usize> = (0..400).map(|i| i % 5).collect();
        let pc = PretrainConfig {
            steps: 60,
            batch_size: 4,
            seq_len: 8,
            lr: 1e-2,
            warmup: 5,
            log_every: 10,
            ..Default::default()
        };
        let (a, ra) = pretrain(cfg(), &train, &pc, |_, _| {}).unwrap();
        let (b, _) = pretrain(cfg(), &train, &pc, |_, _| {}).unwrap();
        assert_eq!(a, b);
        let first = ra.losses.first().unwrap().1;
        let last = ra.losses.last().unwrap().1;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn short_corpus_rejected() {
        let pc = PretrainConfig {
            batch_size: 4,
            seq_len: 8,
            ..Default::default()
        };
        assert!(pretrain(cfg(), &[0; 20], &pc, |_, _| {}).is_err());
    }
}
