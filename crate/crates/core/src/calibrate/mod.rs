//! Window-by-window calibration.
//!
//! Windows are processed in schedule order. Inside a window the transform
//! parameters of its blocks are trained with AdamW to make the
//! fake-quantized window reproduce the full-precision window on the same
//! input, stage by stage over a growing fraction of output channels. A block
//! is committed (absorbed and quantized with frozen weight params) after the
//! last window that contains it, and the quantized activation stream is
//! advanced past it.

mod baseline;
mod qmodel;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{adamw_step, TensorError, AdamWConfig, AdamWState, LinearDecay, Tape, Tensor, Var};
use crate::quantizer::{Granularity, QuantSpec};
use crate::schedule::{variant_schedule, Region, ScheduleConfig, ScheduleVariant, StagePlan, Window, WindowSchedule};
use crate::tinymodel::{block_forward, run_block, CalibSet, ForwardCtx, Model, PlainBlock};
use crate::transforms::{absorb, BlockParams, CalibBlock, ParamVars, QuantPair};
use crate::{contract, Error, Result};

pub use baseline::{run_baseline, BaselineKind, LayerwiseBlock};
pub use qmodel::{act_spec, Layer, QuantBlockOps, QuantizedBlock, QuantizedModel};

/// Which stream feeds the full-precision target branch of the window loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStream {
    /// Target and prediction both start from the quantized-pipeline input.
    Quant,
    /// Target starts from the full-precision model's own activations.
    Fp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub wbits: u8,
    /// 16 means weight-only quantization.
    pub abits: u8,
    /// Input rows per weight group; `None` is one group per output channel.
    pub group_size: Option<usize>,
    /// Epochs per stage; `None` picks 60 at 2-bit weights and 20 otherwise.
    pub epochs: Option<usize>,
    /// Calibration sequences per optimizer step.
    pub batch_size: usize,
    pub lr_scale: f32,
    pub lr_lora: f32,
    pub lora_rank: usize,
    pub seed: u64,
    pub target_stream: TargetStream,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            wbits: 4,
            abits: 4,
            group_size: None,
            epochs: None,
            batch_size: 4,
            lr_scale: 1e-3,
            lr_lora: 1e-4,
            lora_rank: 4,
            seed: 0,
            target_stream: TargetStream::Quant,
        }
    }
}

impl CalibConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.wbits <= 2 { 60 } else { 20 })
    }

    pub fn weight_spec(&self) -> Result<QuantSpec> {
        let granularity = match self.group_size {
            None => Granularity::PerChannel { axis: 1 },
            Some(g) => Granularity::GroupWise { axis: 1, group_size: g },
        };
        Ok(QuantSpec::new(self.wbits, granularity)?)
    }

    pub fn quant_pair(&self) -> Result<QuantPair> {
        Ok(QuantPair {
            weight: Some(self.weight_spec()?),
            act: act_spec(self.abits)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_spec()?;
        act_spec(self.abits)?;
        if self.epochs() < 1 {
            return Err(contract("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(contract("batch_size must be >= 1"));
        }
        if !(self.lr_scale > 0.0 && self.lr_lora > 0.0) {
            return Err(contract("learning rates must be > 0"));
        }
        if self.lora_rank < 1 {
            return Err(contract("lora_rank must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub window_id: usize,
    pub region: Region,
    pub stage: usize,
    /// 0 is the loss before the stage's first update; `e >= 1` is the mean
    /// batch loss during epoch `e`.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub const CSV_HEADER: &'static str = "window_id,region,stage,epoch,loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{:e}", r.window_id, r.region, r.stage, r.epoch, r.loss);
        }
        out
    }

    /// Per window: `(window_id, loss before optimization of the final stage,
    /// last logged loss)`.
    pub fn window_summary(&self) -> Vec<(usize, f64, f64)> {
        let mut out: Vec<(usize, f64, f64)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(last) if last.0 == r.window_id => {
                    if r.epoch == 0 {
                        last.1 = r.loss;
                    }
                    last.2 = r.loss;
                }
                _ => out.push((r.window_id, r.loss, r.loss)),
            }
        }
        out
    }
}

/// What is minimized inside a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Output error of the whole window.
    Window,
    /// Sum of each linear's own output error (single-block windows).
    PerLinear,
}

/// Mutable calibration state: learnable parameters of every block, the
/// committed prefix, and the activation streams at the prefix boundary.
pub struct PipelineState<'a> {
    model: &'a Model,
    calib: &'a CalibSet,
    cfg: CalibConfig,
    quant: QuantPair,
    objective: Objective,
    params: Vec<BlockParams>,
    committed: Vec<Option<QuantizedBlock>>,
    prefix: usize,
    last_window: Vec<Option<usize>>,
    quant_stream: Tensor,
    fp_stream: Tensor,
}

impl<'a> PipelineState<'a> {
    pub fn new(
        model: &'a Model,
        schedule: &WindowSchedule,
        calib: &'a CalibSet,
        cfg: &CalibConfig,
        objective: Objective,
    ) -> Result<Self> {
        cfg.validate()?;
        model.check()?;
        if schedule.num_layers != model.config.n_layers {
            return Err(contract(format!(
                "schedule covers {} layers, model has {}",
                schedule.num_layers, model.config.n_layers
            )));
        }
        if calib.is_empty() {
            return Err(contract("empty calibration set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = (0..model.config.n_layers)
            .map(|_| BlockParams::new(&model.config, cfg.lora_rank, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let x0 = model.embed_tokens(&calib.batch(0..calib.len()))?;
        Ok(Self {
            model,
            calib,
            quant: cfg.quant_pair()?,
            cfg: cfg.clone(),
            objective,
            params,
            committed: vec![None; model.config.n_layers],
            prefix: 0,
            last_window: schedule.last_window_of(),
            fp_stream: x0.clone(),
            quant_stream: x0,
        })
    }

    pub fn params(&self, layer: usize) -> &BlockParams {
        &self.params[layer]
    }

    pub fn committed_prefix(&self) -> usize {
        self.prefix
    }

    pub fn is_committed(&self, layer: usize) -> bool {
        self.committed[layer].is_some()
    }

    fn rows_of(&self, seqs: std::ops::Range<usize>, stream: &Tensor) -> Result<Tensor> {
        let k = self.calib.seq_len;
        let d = self.model.config.d_model;
        let data = stream.data()[seqs.start * k * d..seqs.end * k * d].to_vec();
        Ok(Tensor::new(&[seqs.len() * k, d], data)?)
    }

    fn batches(&self) -> Vec<std::ops::Range<usize>> {
        let (c, b) = (self.calib.len(), self.cfg.batch_size);
        (0..c.div_ceil(b)).map(|i| i * b..((i + 1) * b).min(c)).collect()
    }

    fn ctx(&self, n_seqs: usize) -> Result<ForwardCtx> {
        ForwardCtx::new(&self.model.config, n_seqs, self.calib.seq_len)
    }

    fn check_window(&self, window: &Window) -> Result<()> {
        if window.end >= self.model.config.n_layers {
            return Err(contract(format!("window {} exceeds the model depth", window.position)));
        }
        if window.start != self.prefix {
            return Err(contract(format!(
                "window {} starts at layer {} but the committed prefix ends at {}",
                window.position, window.start, self.prefix
            )));
        }
        if window.layers().any(|l| self.committed[l].is_some()) {
            return Err(contract(format!("window {} contains a committed block", window.position)));
        }
        if self.objective == Objective::PerLinear && window.len() != 1 {
            return Err(contract("per-linear objective needs single-block windows"));
        }
        Ok(())
    }

    /// Full-precision outputs of the window's blocks on the chosen stream.
    fn targets(&self, window: &Window) -> Result<Tensor> {
        let mut x = match self.cfg.target_stream {
            TargetStream::Quant => self.quant_stream.clone(),
            TargetStream::Fp => self.fp_stream.clone(),
        };
        let ctx = self.ctx(self.calib.len())?;
        for l in window.layers() {
            x = run_block(&mut PlainBlock::new(&self.model.blocks[l]), x, &ctx)?;
        }
        Ok(x)
    }

    /// Records the loss of `window` at `fraction` on sequence range `seqs`.
    /// `vars[i]` are the parameters of block `window.start + i`.
    fn record_loss(
        &self,
        tape: &mut Tape,
        window: &Window,
        fraction: f64,
        seqs: std::ops::Range<usize>,
        targets: &Tensor,
        vars: &[ParamVars],
    ) -> Result<Var> {
        let ctx = self.ctx(seqs.len())?;
        let x = tape.constant(self.rows_of(seqs.clone(), &self.quant_stream)?);
        let target = tape.constant(self.rows_of(seqs, targets)?);
        match self.objective {
            Objective::Window => {
                let mut h = x;
                for (i, l) in window.layers().enumerate() {
                    let mut ops = CalibBlock::new(&self.model.blocks[l], vars[i], self.quant, fraction);
                    h = block_forward(tape, &mut ops, h, &ctx)?;
                }
                let diff = tape.sub(h, target)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.sum(sq)?)
            }
            Objective::PerLinear => {
                let l = window.start;
                let mut ops = LayerwiseBlock::new(&self.model.blocks[l], vars[0], self.quant);
                block_forward(tape, &mut ops, x, &ctx)?;
                ops.total_loss(tape)
            }
        }
    }

    /// Loss of `window` at `fraction` over the whole calibration set with the
    /// current parameters.
    pub fn window_loss(&self, window: &Window, fraction: f64) -> Result<f64> {
        self.check_window(window)?;
        let targets = self.targets(window)?;
        self.eval_loss(window, fraction, &targets)
    }

    fn eval_loss(&self, window: &Window, fraction: f64, targets: &Tensor) -> Result<f64> {
        let mut total = 0.0f64;
        let batches = self.batches();
        for seqs in &batches {
            let mut tape = Tape::new();
            let vars: Vec<ParamVars> = window
                .layers()
                .map(|l| ParamVars::register(&mut tape, &self.params[l], false))
                .collect();
            let loss = self.record_loss(&mut tape, window, fraction, seqs.clone(), targets, &vars)?;
            total += tape.value(loss).item() as f64;
        }
        Ok(total / batches.len() as f64)
    }

    /// Optimizes the window through every stage of `plan`, then commits
    /// blocks whose last window this is.
    pub fn quantize_window(&mut self, window: &Window, plan: &StagePlan, log: &mut LossLog) -> Result<()> {
        self.check_window(window)?;
        let targets = self.targets(window)?;
        let layers: Vec<usize> = window.layers().collect();
        let shapes: Vec<Vec<usize>> = layers
            .iter()
            .flat_map(|&l| self.params[l].tensors().into_iter().map(|t| t.shape().to_vec()))
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let adam = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(adam, &shape_refs);
        let batches = self.batches();
        let epochs = self.cfg.epochs();
        let per_block_lr: Vec<bool> = (0..18).map(|i| i < 4).collect();
        for (stage, &fraction) in plan.fractions.iter().enumerate() {
            let before = nonfinite_as_divergence(self.eval_loss(window, fraction, &targets), window, stage)?;
            self.check_finite(before, window, stage)?;
            log.records.push(LossRecord {
                window_id: window.position,
                region: window.region,
                stage: stage + 1,
                epoch: 0,
                loss: before,
            });
            let decay = LinearDecay::new(1.0, (epochs * batches.len()) as u64);
            let mut step = 0u64;
            for epoch in 1..=epochs {
                let mut sum = 0.0f64;
                for seqs in &batches {
                    let mut tape = Tape::new();
                    let vars: Vec<ParamVars> = layers
                        .iter()
                        .map(|&l| ParamVars::register(&mut tape, &self.params[l], true))
                        .collect();
                    let loss = self.record_loss(&mut tape, window, fraction, seqs.clone(), &targets, &vars);
                    let loss = nonfinite_as_divergence(loss, window, stage)?;
                    let value = tape.value(loss).item() as f64;
                    self.check_finite(value, window, stage)?;
                    sum += value;
                    nonfinite_as_divergence(tape.backward(loss).map_err(Error::from), window, stage)?;
                    let grads: Vec<Tensor> = vars
                        .iter()
                        .flat_map(|v| v.all())
                        .map(|v| {
                            let shape = tape.value(v).shape().to_vec();
                            tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(&shape))
                        })
                        .collect();
                    let scale = decay.lr_at(step);
                    step += 1;
                    let lrs: Vec<f32> = (0..grads.len())
                        .map(|i| {
                            if per_block_lr[i % 18] {
                                self.cfg.lr_scale * scale
                            } else {
                                self.cfg.lr_lora * scale
                            }
                        })
                        .collect();
                    let grad_refs: Vec<&Tensor> = grads.iter().collect();
                    let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
                    for (l, p) in self.params.iter_mut().enumerate() {
                        if window.contains(l) {
                            params.extend(p.tensors_mut()?);
                        }
                    }
                    nonfinite_as_divergence(
                        adamw_step(&mut params, &grad_refs, &mut state, &lrs).map_err(Error::from),
                        window,
                        stage,
                    )?;
                }
                log.records.push(LossRecord {
                    window_id: window.position,
                    region: window.region,
                    stage: stage + 1,
                    epoch,
                    loss: sum / batches.len() as f64,
                });
            }
        }
        for &l in &layers {
            if self.last_window[l] == Some(window.position) {
                self.commit(l)?;
            }
        }
        Ok(())
    }

    fn check_finite(&self, loss: f64, window: &Window, stage: usize) -> Result<()> {
        if !loss.is_finite() {
            return Err(divergence(&format!("loss {loss}"), window, stage));
        }
        Ok(())
    }

    fn commit(&mut self, layer: usize) -> Result<()> {
        self.params[layer].commit();
        let folded = absorb(&self.model.blocks[layer], &self.params[layer])?;
        let spec = self.quant.weight.ok_or_else(|| contract("weight quantizer required"))?;
        self.committed[layer] = Some(QuantizedBlock::from_block(&folded, &spec)?);
        self.advance()
    }

    /// Moves both streams past every newly committed block of the prefix.
    fn advance(&mut self) -> Result<()> {
        let ctx = self.ctx(self.calib.len())?;
        while self.prefix < self.committed.len() {
            let Some(q) = &self.committed[self.prefix] else { break };
            let xq = std::mem::replace(&mut self.quant_stream, Tensor::zeros(&[0]));
            self.quant_stream = run_block(&mut QuantBlockOps::new(q, self.quant.act), xq, &ctx)?;
            let xf = std::mem::replace(&mut self.fp_stream, Tensor::zeros(&[0]));
            self.fp_stream = run_block(&mut PlainBlock::new(&self.model.blocks[self.prefix]), xf, &ctx)?;
            self.prefix += 1;
        }
        Ok(())
    }

    /// The quantized model once every block is committed.
    pub fn finish(self) -> Result<(QuantizedModel, Vec<BlockParams>)> {
        if let Some(l) = self.committed.iter().position(Option::is_none) {
            return Err(contract(format!("block {l} was never committed")));
        }
        let mut q = QuantizedModel::from_fp(
            self.model,
            self.quant.weight.expect("validated"),
            self.cfg.abits,
        );
        q.layers = self.committed.into_iter().map(|b| Layer::Quant(b.expect("checked"))).collect();
        Ok((q, self.params))
    }
}

fn divergence(what: &str, window: &Window, stage: usize) -> Error {
    Error::Diverged(format!(
        "{what} in window {} ({} {}..{}), stage {}",
        window.position,
        window.region,
        window.start,
        window.end,
        stage + 1
    ))
}

/// Debug builds reject non-finite values inside tape ops; report those the
/// same way as a non-finite loss.
fn nonfinite_as_divergence<T>(r: Result<T>, window: &Window, stage: usize) -> Result<T> {
    match r {
        Err(Error::Tensor(e @ TensorError::NonFinite { .. })) => Err(divergence(&e.to_string(), window, stage)),
        other => other,
    }
}

/// Result of a calibration run.
#[derive(Debug)]
pub struct PipelineOutput {
    pub model: QuantizedModel,
    pub params: Vec<BlockParams>,
    pub log: LossLog,
}

/// Runs every window of `schedule` in order. `on_window` is called after
/// each window with its position.
pub fn run_pipeline(
    model: &Model,
    schedule: &WindowSchedule,
    plan: &StagePlan,
    calib: &CalibSet,
    cfg: &CalibConfig,
    on_window: impl FnMut(&Window),
) -> Result<PipelineOutput> {
    run_with_objective(model, schedule, plan, calib, cfg, Objective::Window, on_window)
}

/// Generates the `variant` schedule from `schedule` and runs it with
/// `gamma` controlling the intra-layer stages.
pub fn run_variant(
    model: &Model,
    schedule: &ScheduleConfig,
    variant: ScheduleVariant,
    gamma: f64,
    calib: &CalibSet,
    cfg: &CalibConfig,
    on_window: impl FnMut(&Window),
) -> Result<PipelineOutput> {
    let windows = variant_schedule(variant, schedule)?;
    let plan = StagePlan::new(gamma)?;
    run_pipeline(model, &windows, &plan, calib, cfg, on_window)
}

pub(crate) fn run_with_objective(
    model: &Model,
    schedule: &WindowSchedule,
    plan: &StagePlan,
    calib: &CalibSet,
    cfg: &CalibConfig,
    objective: Objective,
    mut on_window: impl FnMut(&Window),
) -> Result<PipelineOutput> {
    let mut state = PipelineState::new(model, schedule, calib, cfg, objective)?;
    let mut log = LossLog::default();
    for w in &schedule.windows {
        state.quantize_window(w, plan, &mut log)?;
        on_window(w);
    }
    let (model, params) = state.finish()?;
    Ok(PipelineOutput { model, params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::generate_schedule;
    use crate::tinymodel::{make_calibset, ModelConfig};
    use rand::Rng;

    fn setup(layers: usize) -> (Model, CalibSet) {
        let model = Model::init(ModelConfig {
            vocab_size: 13,
            d_model: 16,
            n_heads: 2,
            n_layers: layers,
            d_ff: 32,
            max_seq_len: 8,
            seed: 5,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens: Vec<usize> = (0..200).map(|_| rng.gen_range(0..13)).collect();
        (model, make_calibset(&tokens, 6, 8, 1).unwrap())
    }

    fn cfg() -> CalibConfig {
        CalibConfig {
            epochs: Some(2),
            batch_size: 4,
            lr_scale: 1e-2,
            lr_lora: 1e-3,
            ..CalibConfig::default()
        }
    }

    fn sched(layers: usize) -> WindowSchedule {
        generate_schedule(&ScheduleConfig {
            num_layers: layers,
            shallow: (layers / 2).min(2),
            deep: (layers / 2).min(2),
            window: 2,
            stride: 1,
            gamma: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn initial_window_loss_matches_rtn_block() {
        let (model, calib) = setup(2);
        let s = sched(2);
        let state = PipelineState::new(&model, &s, &calib, &cfg(), Objective::Window).unwrap();
        let got = state.window_loss(&s.windows[0], 1.0).unwrap();

        let spec = cfg().weight_spec().unwrap();
        let q = QuantizedBlock::from_block(&model.blocks[0], &spec).unwrap();
        let mut want = 0.0;
        let batches = [0..4, 4..6];
        for b in &batches {
            let x = model.embed_tokens(&calib.batch(b.clone())).unwrap();
            let ctx = ForwardCtx::new(&model.config, b.len(), 8).unwrap();
            let yq = run_block(&mut QuantBlockOps::new(&q, act_spec(4).unwrap()), x.clone(), &ctx).unwrap();
            let yf = run_block(&mut PlainBlock::new(&model.blocks[0]), x, &ctx).unwrap();
            want += yq.data().iter().zip(yf.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        want /= batches.len() as f64;
        assert!((got - want).abs() <= 1e-4 * want, "{got} vs {want}");
    }

    #[test]
    fn commits_follow_last_window() {
        let (model, calib) = setup(4);
        let s = sched(4);
        let last = s.last_window_of();
        let plan = StagePlan::new(0.5).unwrap();
        let mut state = PipelineState::new(&model, &s, &calib, &cfg(), Objective::Window).unwrap();
        let mut log = LossLog::default();
        for w in &s.windows {
            state.quantize_window(w, &plan, &mut log).unwrap();
            for l in 0..4 {
                assert_eq!(state.is_committed(l), last[l].unwrap() <= w.position, "layer {l} after {w:?}");
            }
        }
        assert_eq!(state.committed_prefix(), 4);
        let (q, _) = state.finish().unwrap();
        assert!(q.is_fully_quantized());
        // two stages per window, epoch 0 plus two epochs each
        assert_eq!(log.records.len(), s.windows.len() * 2 * 3);
    }

    #[test]
    fn window_must_start_at_committed_prefix() {
        let (model, calib) = setup(4);
        let s = sched(4);
        let mut state = PipelineState::new(&model, &s, &calib, &cfg(), Objective::Window).unwrap();
        let plan = StagePlan::new(1.0).unwrap();
        let err = state.quantize_window(&s.windows[3], &plan, &mut LossLog::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn training_lowers_window_loss() {
        let (model, calib) = setup(2);
        let s = sched(2);
        let plan = StagePlan::new(1.0).unwrap();
        let c = CalibConfig {
            epochs: Some(8),
            ..cfg()
        };
        let mut state = PipelineState::new(&model, &s, &calib, &c, Objective::Window).unwrap();
        let w = &s.windows[1];
        let mut log = LossLog::default();
        state.quantize_window(&s.windows[0], &plan, &mut log).unwrap();
        let before = state.window_loss(w, 1.0).unwrap();
        state.quantize_window(w, &plan, &mut log).unwrap();
        let after = log.records.last().unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn runs_are_deterministic() {
        let (model, calib) = setup(3);
        let s = sched(3);
        let plan = StagePlan::new(0.5).unwrap();
        let a = run_pipeline(&model, &s, &plan, &calib, &cfg(), |_| {}).unwrap();
        let b = run_pipeline(&model, &s, &plan, &calib, &cfg(), |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn divergence_is_reported() {
        let (model, calib) = setup(2);
        let s = sched(2);
        let c = CalibConfig {
            lr_scale: 1e4,
            epochs: Some(3),
            ..cfg()
        };
        let err = run_pipeline(&model, &s, &StagePlan::new(1.0).unwrap(), &calib, &c, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }

    #[test]
    fn baselines_produce_full_models() {
        let (model, calib) = setup(3);
        let sc = ScheduleConfig::for_layers(3);
        for kind in BaselineKind::ALL {
            let out = run_baseline(kind, &model, &sc, &calib, &cfg()).unwrap();
            assert!(out.model.is_fully_quantized(), "{}", kind.name());
            assert_eq!(out.log.records.is_empty(), kind == BaselineKind::Rtn);
        }
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let log = LossLog {
            records: vec![LossRecord {
                window_id: 3,
                region: Region::Fssw,
                stage: 1,
                epoch: 0,
                loss: 0.25,
            }],
        };
        assert_eq!(log.to_csv(), "window_id,region,stage,epoch,loss\n3,FSSW,1,0,2.5e-1\n");
    }
}
