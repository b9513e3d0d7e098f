//! The quantized model: frozen integer weights with per-slice params,
//! full-precision norms, embedding and head, and dynamic per-token
//! activation quantization at run time.

use std::collections::HashMap;

use crate::numkit::{Tape, Tensor, Var};
use crate::quantizer::{calc_params, dequantize, fake_quant_var, quantize, QuantSpec, QuantizedTensor};
use crate::tinymodel::{
    embed_rows, lm_head, run_block, seq_len_of, Block, BlockOps, LanguageModel, Linear, Model, ModelConfig, NormSite,
    PlainBlock,
};
use crate::{contract, Result};

/// A block whose seven linears are stored as integer codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    pub weights: [QuantizedTensor; 7],
    dequant: [Tensor; 7],
}

impl QuantizedBlock {
    /// Freezes min-max params from each (already transformed) weight.
    pub fn from_block(block: &Block, spec: &QuantSpec) -> Result<Self> {
        let mut weights = Vec::with_capacity(7);
        for lin in Linear::ALL {
            let w = block.weight(lin);
            let params = calc_params(w, spec)?;
            weights.push(quantize(w, &params, spec)?);
        }
        Self::from_parts(block.attn_norm.clone(), block.mlp_norm.clone(), weights)
    }

    pub fn from_parts(attn_norm: Tensor, mlp_norm: Tensor, weights: Vec<QuantizedTensor>) -> Result<Self> {
        let weights: [QuantizedTensor; 7] = weights
            .try_into()
            .map_err(|v: Vec<_>| contract(format!("{} quantized weights, expected 7", v.len())))?;
        let mut dequant = Vec::with_capacity(7);
        for q in &weights {
            dequant.push(dequantize(q)?);
        }
        Ok(Self {
            attn_norm,
            mlp_norm,
            weights,
            dequant: dequant.try_into().expect("seven weights"),
        })
    }

    pub fn dequantized(&self, lin: Linear) -> &Tensor {
        &self.dequant[lin.index()]
    }

    /// The block with dequantized weights, as a plain full-precision block.
    pub fn to_block(&self) -> Block {
        Block {
            attn_norm: self.attn_norm.clone(),
            mlp_norm: self.mlp_norm.clone(),
            linears: self.dequant.clone(),
        }
    }
}

/// Runs a [`QuantizedBlock`]: dequantized weights, activations fake-quantized
/// per token from their own range on every call.
pub struct QuantBlockOps<'a> {
    block: &'a QuantizedBlock,
    act: Option<QuantSpec>,
    act_cache: HashMap<Var, Var>,
}

impl<'a> QuantBlockOps<'a> {
    pub fn new(block: &'a QuantizedBlock, act: Option<QuantSpec>) -> Self {
        Self {
            block,
            act,
            act_cache: HashMap::new(),
        }
    }
}

impl BlockOps for QuantBlockOps<'_> {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var> {
        Ok(tape.constant(match site {
            NormSite::Attn => self.block.attn_norm.clone(),
            NormSite::Mlp => self.block.mlp_norm.clone(),
        }))
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let xq = match &self.act {
            Some(spec) => match self.act_cache.get(&x) {
                Some(&q) => q,
                None => {
                    let q = fake_quant_var(tape, x, spec)?;
                    self.act_cache.insert(x, q);
                    q
                }
            },
            None => x,
        };
        let w = tape.constant(self.block.dequantized(lin).clone());
        Ok(tape.matmul(xq, w)?)
    }
}

/// One layer of a [`QuantizedModel`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Fp(Block),
    Quant(QuantizedBlock),
}

impl Layer {
    pub fn run(&self, x: Tensor, ctx: &crate::tinymodel::ForwardCtx, act: Option<QuantSpec>) -> Result<Tensor> {
        match self {
            Layer::Fp(b) => run_block(&mut PlainBlock::new(b), x, ctx),
            Layer::Quant(q) => run_block(&mut QuantBlockOps::new(q, act), x, ctx),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub weight_spec: QuantSpec,
    /// Activation bit width; 16 means activations stay in full precision.
    pub abits: u8,
    pub embed: Tensor,
    pub final_norm: Tensor,
    pub head: Tensor,
    pub layers: Vec<Layer>,
}

impl QuantizedModel {
    /// Starts from an all-full-precision copy of `model`.
    pub fn from_fp(model: &Model, weight_spec: QuantSpec, abits: u8) -> Self {
        Self {
            config: model.config.clone(),
            weight_spec,
            abits,
            embed: model.embed.clone(),
            final_norm: model.final_norm.clone(),
            head: model.head.clone(),
            layers: model.blocks.iter().cloned().map(Layer::Fp).collect(),
        }
    }

    pub fn act_spec(&self) -> Result<Option<QuantSpec>> {
        act_spec(self.abits)
    }

    pub fn is_fully_quantized(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, Layer::Quant(_)))
    }

    /// Next-token logits with quantized layers run through [`QuantBlockOps`].
    pub fn forward(&self, ids: &[usize], n_seqs: usize) -> Result<Tensor> {
        let seq_len = seq_len_of(ids, n_seqs)?;
        let ctx = crate::tinymodel::ForwardCtx::new(&self.config, n_seqs, seq_len)?;
        let act = self.act_spec()?;
        let mut x = embed_rows(&self.embed, ids)?;
        for layer in &self.layers {
            x = layer.run(x, &ctx, act)?;
        }
        lm_head(x, &self.final_norm, &self.head, self.config.norm_eps)
    }
}

impl LanguageModel for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, ids: &[usize], n_seqs: usize) -> Result<Tensor> {
        self.forward(ids, n_seqs)
    }
}

/// Per-token activation quantizer for `abits`, or `None` at 16 bits
/// (weight-only quantization).
pub fn act_spec(abits: u8) -> Result<Option<QuantSpec>> {
    if abits >= 16 {
        return Ok(None);
    }
    Ok(Some(QuantSpec::activation(abits)?))
}
