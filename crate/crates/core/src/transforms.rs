//! Learnable per-channel scales and low-rank weight deltas, the fake-quant
//! block used while calibrating, and absorption of both into plain weights.
//!
//! A scale `alpha` on the input of a linear divides the activation and
//! multiplies the matching weight rows: `(X / alpha) · (W * alpha + A·B)`.
//! Four scales are used per block, each shared by every linear reading the
//! same activation:
//!
//! | site       | linears      | activation divided by folding into |
//! |------------|--------------|------------------------------------|
//! | `AttnIn`   | Q, K, V      | attention RMSNorm gain             |
//! | `AttnOut`  | O            | V output columns                   |
//! | `MlpIn`    | Gate, Up     | MLP RMSNorm gain                   |
//! | `MlpOut`   | Down         | Up output columns                  |
//!
//! `AttnOut` works because the attention context is, per head, a convex
//! mix of V rows, so scaling V's columns scales the context's columns.
//! `MlpOut` is folded into Up only: `silu(g) * (u / a) = (silu(g) * u) / a`,
//! whereas dividing the gate pre-activation would change the nonlinearity.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{BinOp, Tape, Tensor, Var};
use crate::quantizer::{fake_quant_var, QuantSpec};
use crate::tinymodel::{Block, BlockOps, Linear, ModelConfig, NormSite};
use crate::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSite {
    AttnIn,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl ScaleSite {
    pub const ALL: [ScaleSite; 4] = [ScaleSite::AttnIn, ScaleSite::AttnOut, ScaleSite::MlpIn, ScaleSite::MlpOut];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The scale applied to the input of `lin`.
    pub fn of_input(lin: Linear) -> Self {
        match lin {
            Linear::Q | Linear::K | Linear::V => Self::AttnIn,
            Linear::O => Self::AttnOut,
            Linear::Gate | Linear::Up => Self::MlpIn,
            Linear::Down => Self::MlpOut,
        }
    }

    /// The scale folded into the output columns of `lin`, if any.
    pub fn folded_into_output(lin: Linear) -> Option<Self> {
        match lin {
            Linear::V => Some(Self::AttnOut),
            Linear::Up => Some(Self::MlpOut),
            _ => None,
        }
    }

    pub fn len(self, cfg: &ModelConfig) -> usize {
        match self {
            Self::MlpOut => cfg.d_ff,
            _ => cfg.d_model,
        }
    }
}

/// Per-channel scale stored as `log(alpha)`, so `alpha` stays positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScale {
    pub log_alpha: Tensor,
}

impl ChannelScale {
    pub fn ones(n: usize) -> Self {
        Self {
            log_alpha: Tensor::zeros(&[n]),
        }
    }

    /// Rejects zero, negative and non-finite entries.
    pub fn from_alpha(alpha: &[f32]) -> Result<Self> {
        if let Some(bad) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(contract(format!("channel scale entries must be finite and positive, got {bad}")));
        }
        Ok(Self {
            log_alpha: Tensor::from_vec(alpha.iter().map(|a| a.ln()).collect())?,
        })
    }

    pub fn alpha(&self) -> Tensor {
        self.log_alpha.map(f32::exp)
    }

    pub fn len(&self) -> usize {
        self.log_alpha.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rank-`r` weight delta `A · B` with `A: n x r`, `B: r x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraDelta {
    pub const INIT_STD: f32 = 0.01;

    /// `A ~ N(0, 0.01^2)`, `B = 0`, so the delta starts at zero.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(contract("LoRA rank must be >= 1"));
        }
        Ok(Self {
            a: Tensor::randn(rng, &[n, rank], Self::INIT_STD),
            b: Tensor::zeros(&[rank, m]),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn product(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(self.a.clone()), tape.constant(self.b.clone()));
        let p = tape.matmul(a, b)?;
        Ok(tape.value(p).clone())
    }
}

/// All learnable transform parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// Indexed by [`ScaleSite::index`].
    pub scales: [ChannelScale; 4],
    /// Indexed by [`Linear::index`].
    pub loras: [LoraDelta; 7],
    pub committed: bool,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rank: usize, rng: &mut R) -> Result<Self> {
        let scales = ScaleSite::ALL.map(|s| ChannelScale::ones(s.len(cfg)));
        let mut loras = Vec::with_capacity(7);
        for lin in Linear::ALL {
            let (n, m) = cfg.linear_shape(lin);
            loras.push(LoraDelta::new(rng, n, m, rank)?);
        }
        Ok(Self {
            scales,
            loras: loras.try_into().expect("seven linears"),
            committed: false,
        })
    }

    pub fn scale(&self, site: ScaleSite) -> &ChannelScale {
        &self.scales[site.index()]
    }

    pub fn lora(&self, lin: Linear) -> &LoraDelta {
        &self.loras[lin.index()]
    }

    /// Mutable access to every tensor, in [`ParamVars`] order: four
    /// log-scales then `(A, B)` per linear. Fails once committed.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.committed {
            return Err(contract("block parameters are committed and frozen"));
        }
        let mut out: Vec<&mut Tensor> = self.scales.iter_mut().map(|s| &mut s.log_alpha).collect();
        for l in &mut self.loras {
            out.push(&mut l.a);
            out.push(&mut l.b);
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.scales.iter().map(|s| &s.log_alpha).collect();
        for l in &self.loras {
            out.push(&l.a);
            out.push(&l.b);
        }
        out
    }

    pub fn commit(&mut self) {
        self.committed = true;
    }
}

/// [`BlockParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub log_alpha: [Var; 4],
    pub a: [Var; 7],
    pub b: [Var; 7],
}

impl ParamVars {
    pub fn register(tape: &mut Tape, p: &BlockParams, trainable: bool) -> Self {
        let log_alpha = std::array::from_fn(|i| tape.leaf(p.scales[i].log_alpha.clone(), trainable));
        let a = std::array::from_fn(|i| tape.leaf(p.loras[i].a.clone(), trainable));
        let b = std::array::from_fn(|i| tape.leaf(p.loras[i].b.clone(), trainable));
        Self { log_alpha, a, b }
    }

    /// Same order as [`BlockParams::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.log_alpha.to_vec();
        for i in 0..7 {
            out.push(self.a[i]);
            out.push(self.b[i]);
        }
        out
    }

    /// Rebuilds from [`ParamVars::all`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 18, "expected 4 scales and 7 (A, B) pairs");
        Self {
            log_alpha: std::array::from_fn(|i| v[i]),
            a: std::array::from_fn(|i| v[4 + 2 * i]),
            b: std::array::from_fn(|i| v[5 + 2 * i]),
        }
    }
}

/// `X~ = X / alpha` (per column) and `W~ = W * alpha (per row) + A·B`.
pub fn apply_transform(w: &Tensor, x: &Tensor, scale: &ChannelScale, lora: &LoraDelta) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (wv, xv) = (tape.constant(w.clone()), tape.constant(x.clone()));
    let alpha = tape.constant(scale.alpha());
    let (a, b) = (tape.constant(lora.a.clone()), tape.constant(lora.b.clone()));
    let wt = transformed_weight(&mut tape, wv, alpha, a, b, None)?;
    let xt = tape.along(BinOp::Div, xv, alpha, 1)?;
    Ok((tape.value(wt).clone(), tape.value(xt).clone()))
}

/// `W * alpha_in (rows) + A·B`, optionally divided column-wise by
/// `alpha_out`.
pub fn transformed_weight(
    tape: &mut Tape,
    w: Var,
    alpha_in: Var,
    a: Var,
    b: Var,
    alpha_out: Option<Var>,
) -> Result<Var> {
    let scaled = tape.along(BinOp::Mul, w, alpha_in, 0)?;
    let delta = tape.matmul(a, b)?;
    let wt = tape.add(scaled, delta)?;
    Ok(match alpha_out {
        Some(ao) => tape.along(BinOp::Div, wt, ao, 1)?,
        None => wt,
    })
}

/// `fake_quant(X~) · fake_quant(W~)`; a `None` spec leaves that side in
/// full precision.
pub fn quantized_layer_forward(
    w: &Tensor,
    x: &Tensor,
    scale: &ChannelScale,
    lora: &LoraDelta,
    w_spec: Option<&QuantSpec>,
    a_spec: Option<&QuantSpec>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (wv, xv) = (tape.constant(w.clone()), tape.constant(x.clone()));
    let la = tape.constant(scale.log_alpha.clone());
    let (a, b) = (tape.constant(lora.a.clone()), tape.constant(lora.b.clone()));
    let y = quantized_layer_on_tape(&mut tape, wv, xv, la, a, b, w_spec, a_spec)?;
    Ok(tape.value(y).clone())
}

/// Tape version of [`quantized_layer_forward`] taking `log(alpha)`.
#[allow(clippy::too_many_arguments)]
pub fn quantized_layer_on_tape(
    tape: &mut Tape,
    w: Var,
    x: Var,
    log_alpha: Var,
    a: Var,
    b: Var,
    w_spec: Option<&QuantSpec>,
    a_spec: Option<&QuantSpec>,
) -> Result<Var> {
    let alpha = tape.exp(log_alpha)?;
    let wt = transformed_weight(tape, w, alpha, a, b, None)?;
    let xt = tape.along(BinOp::Div, x, alpha, 1)?;
    let wq = match w_spec {
        Some(s) => fake_quant_var(tape, wt, s)?,
        None => wt,
    };
    let xq = match a_spec {
        Some(s) => fake_quant_var(tape, xt, s)?,
        None => xt,
    };
    Ok(tape.matmul(xq, wq)?)
}

/// Weight and activation quantizers of a fake-quant forward. `None`
/// disables that quantizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantPair {
    pub weight: Option<QuantSpec>,
    pub act: Option<QuantSpec>,
}

impl QuantPair {
    pub const NONE: QuantPair = QuantPair { weight: None, act: None };
}

/// Calibration-time block: weights and gains are frozen constants, the
/// transform parameters come from [`ParamVars`], and every linear runs in
/// its absorbed (folded) form so the weight being fake-quantized is bit
/// for bit the weight that gets exported.
///
/// With `fraction < 1`, only the first `ceil(fraction * m)` output columns
/// of each linear are quantized; the rest stay in full precision.
pub struct CalibBlock<'a> {
    block: &'a Block,
    vars: ParamVars,
    quant: QuantPair,
    fraction: f64,
    alpha: [Option<Var>; 4],
    gains: [Option<Var>; 2],
    act_cache: HashMap<Var, Var>,
}

impl<'a> CalibBlock<'a> {
    pub fn new(block: &'a Block, vars: ParamVars, quant: QuantPair, fraction: f64) -> Self {
        Self {
            block,
            vars,
            quant,
            fraction,
            alpha: [None; 4],
            gains: [None; 2],
            act_cache: HashMap::new(),
        }
    }

    fn alpha(&mut self, tape: &mut Tape, site: ScaleSite) -> Result<Var> {
        if let Some(v) = self.alpha[site.index()] {
            return Ok(v);
        }
        let v = tape.exp(self.vars.log_alpha[site.index()])?;
        self.alpha[site.index()] = Some(v);
        Ok(v)
    }

    /// The absorbed weight of `lin` as a function of the parameters.
    pub fn folded_weight(&mut self, tape: &mut Tape, lin: Linear) -> Result<Var> {
        let w = tape.constant(self.block.weight(lin).clone());
        let ai = self.alpha(tape, ScaleSite::of_input(lin))?;
        let ao = match ScaleSite::folded_into_output(lin) {
            Some(s) => Some(self.alpha(tape, s)?),
            None => None,
        };
        transformed_weight(tape, w, ai, self.vars.a[lin.index()], self.vars.b[lin.index()], ao)
    }

    fn quant_act(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(spec) = self.quant.act else { return Ok(x) };
        if let Some(&q) = self.act_cache.get(&x) {
            return Ok(q);
        }
        let q = fake_quant_var(tape, x, &spec)?;
        self.act_cache.insert(x, q);
        Ok(q)
    }
}

fn gain_site_scale(site: NormSite) -> ScaleSite {
    match site {
        NormSite::Attn => ScaleSite::AttnIn,
        NormSite::Mlp => ScaleSite::MlpIn,
    }
}

/// Absorbed norm gain `g / alpha`.
fn folded_gain(tape: &mut Tape, gain: Var, alpha: Var) -> Result<Var> {
    Ok(tape.div(gain, alpha)?)
}

impl BlockOps for CalibBlock<'_> {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var> {
        if let Some(v) = self.gains[site as usize] {
            return Ok(v);
        }
        let g = tape.constant(self.block.gain(site).clone());
        let alpha = self.alpha(tape, gain_site_scale(site))?;
        let v = folded_gain(tape, g, alpha)?;
        self.gains[site as usize] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let w = self.folded_weight(tape, lin)?;
        let m = self.block.weight(lin).shape()[1];
        let c = quantized_columns(m, self.fraction);
        if c == 0 {
            return Ok(tape.matmul(x, w)?);
        }
        let xq = self.quant_act(tape, x)?;
        let wpart = if c == m { w } else { tape.slice_cols(w, 0, c)? };
        let wq = match &self.quant.weight {
            Some(spec) => fake_quant_var(tape, wpart, spec)?,
            None => wpart,
        };
        let yq = tape.matmul(xq, wq)?;
        if c == m {
            return Ok(yq);
        }
        let rest = tape.slice_cols(w, c, m)?;
        let yf = tape.matmul(x, rest)?;
        Ok(tape.concat_cols(yq, yf)?)
    }
}

/// Number of leading output columns quantized at `fraction`.
pub fn quantized_columns(m: usize, fraction: f64) -> usize {
    if fraction >= 1.0 {
        m
    } else if fraction <= 0.0 {
        0
    } else {
        ((fraction * m as f64).ceil() as usize).min(m)
    }
}

/// Literal per-linear transform `(X / alpha) · (W * alpha + A·B)` with the
/// original norm gains, in full precision. Used as the reference that the
/// absorbed block must reproduce.
pub struct TransformedBlock<'a> {
    block: &'a Block,
    vars: ParamVars,
}

impl<'a> TransformedBlock<'a> {
    pub fn new(block: &'a Block, vars: ParamVars) -> Self {
        Self { block, vars }
    }
}

impl BlockOps for TransformedBlock<'_> {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var> {
        Ok(tape.constant(self.block.gain(site).clone()))
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let w = tape.constant(self.block.weight(lin).clone());
        let i = lin.index();
        let la = self.vars.log_alpha[ScaleSite::of_input(lin).index()];
        quantized_layer_on_tape(tape, w, x, la, self.vars.a[i], self.vars.b[i], None, None)
    }
}

/// Where the `1 / alpha` of an input scale goes when absorbing.
pub enum Upstream<'a> {
    /// A normalization gain vector: `g / alpha`.
    NormGain(&'a mut Tensor),
    /// The output columns of the producing linear.
    OutputColumns(&'a mut Tensor),
    /// An operator without parameters that could carry the scale.
    Opaque(&'static str),
}

/// Folds `1 / alpha` into `upstream`.
pub fn fold_upstream(upstream: Upstream<'_>, alpha: &Tensor) -> Result<()> {
    let mut tape = Tape::new();
    let a = tape.constant(alpha.clone());
    match upstream {
        Upstream::NormGain(g) => {
            let gv = tape.constant(g.clone());
            let out = folded_gain(&mut tape, gv, a)?;
            *g = tape.value(out).clone();
        }
        Upstream::OutputColumns(w) => {
            let wv = tape.constant(w.clone());
            let out = tape.along(BinOp::Div, wv, a, 1)?;
            *w = tape.value(out).clone();
        }
        Upstream::Opaque(name) => {
            return Err(contract(format!("cannot fold a channel scale into {name}: it has no parameters")));
        }
    }
    Ok(())
}

/// Absorbs committed parameters into a plain block: every weight becomes
/// its folded form and the norm gains carry `g / alpha`. Produces exactly
/// the tensors [`CalibBlock`] quantizes.
pub fn absorb(block: &Block, params: &BlockParams) -> Result<Block> {
    if !params.committed {
        return Err(contract("absorb requires a committed block"));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let mut calib = CalibBlock::new(block, vars, QuantPair::NONE, 1.0);
    let mut out = block.clone();
    for lin in Linear::ALL {
        let w = calib.folded_weight(&mut tape, lin)?;
        *out.weight_mut(lin) = tape.value(w).clone();
    }
    for site in [NormSite::Attn, NormSite::Mlp] {
        let g = calib.gain(&mut tape, site)?;
        *out.gain_mut(site) = tape.value(g).clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_transform() {
        let w = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let x = Tensor::new(&[1, 2], vec![4.0, 1.0]).unwrap();
        let scale = ChannelScale::from_alpha(&[2.0, 0.5]).unwrap();
        let lora = LoraDelta {
            a: Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            b: Tensor::new(&[1, 1], vec![3.0]).unwrap(),
        };
        let (wt, xt) = apply_transform(&w, &x, &scale, &lora).unwrap();
        assert_eq!(wt.data(), &[5.0, 1.0]);
        assert_eq!(xt.data(), &[2.0, 2.0]);
    }

    #[test]
    fn identity_at_init_and_fp_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&mut rng, &[6, 5], 1.0);
        let x = Tensor::randn(&mut rng, &[3, 6], 1.0);
        let mut lora = LoraDelta::new(&mut rng, 6, 5, 2).unwrap();
        let (wt, xt) = apply_transform(&w, &x, &ChannelScale::ones(6), &lora).unwrap();
        assert_eq!((wt, xt), (w.clone(), x.clone()));

        lora.b = Tensor::zeros(&[2, 5]);
        let alpha: Vec<f32> = (0..6).map(|i| 0.3 + 0.4 * i as f32).collect();
        let scale = ChannelScale::from_alpha(&alpha).unwrap();
        let y = quantized_layer_forward(&w, &x, &scale, &lora, None, None).unwrap();
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let r = tape.matmul(xv, wv).unwrap();
        assert!(y.rel_err(tape.value(r)) < 1e-5);
    }

    #[test]
    fn zero_or_negative_scale_rejected() {
        assert!(ChannelScale::from_alpha(&[1.0, 0.0]).is_err());
        assert!(ChannelScale::from_alpha(&[-1.0]).is_err());
    }

    #[test]
    fn sixteen_bit_layer_matches_fp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&mut rng, &[8, 8], 0.5);
        let x = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let lora = LoraDelta::new(&mut rng, 8, 8, 4).unwrap();
        let scale = ChannelScale::ones(8);
        let fp = quantized_layer_forward(&w, &x, &scale, &lora, None, None).unwrap();
        let q = quantized_layer_forward(
            &w,
            &x,
            &scale,
            &lora,
            Some(&QuantSpec::weight(16).unwrap()),
            Some(&QuantSpec::activation(16).unwrap()),
        )
        .unwrap();
        assert!(q.rel_err(&fp) < 1e-3);
    }

    #[test]
    fn opaque_upstream_is_contract_error() {
        let err = fold_upstream(Upstream::Opaque("softmax"), &Tensor::full(&[2], 2.0)).unwrap_err();
        assert!(err.to_string().contains("softmax"));
        let mut g = Tensor::full(&[2], 1.0);
        fold_upstream(Upstream::NormGain(&mut g), &Tensor::from_vec(vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.5, 0.25]);
    }

    #[test]
    fn quantized_column_counts() {
        assert_eq!(quantized_columns(7, 0.5), 4);
        assert_eq!(quantized_columns(8, 0.5), 4);
        assert_eq!(quantized_columns(8, 1.0), 8);
        assert_eq!(quantized_columns(8, 0.0), 0);
    }

    #[test]
    fn committed_params_reject_updates() {
        let cfg = ModelConfig::tiny12(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = BlockParams::new(&cfg, 4, &mut rng).unwrap();
        assert_eq!(p.tensors_mut().unwrap().len(), 18);
        p.commit();
        assert!(p.tensors_mut().is_err());
    }
}
