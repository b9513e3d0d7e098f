//! A small Llama-style decoder: RMSNorm, rotary attention without biases
//! and a SiLU-gated MLP, with untied embedding and output head.
//!
//! Weights are stored `in x out` so a linear layer is `y = x · W`.

mod data;
mod pretrain;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{AttnLayout, RopeTable, Tape, Tensor, Var};
use crate::{contract, Result};

pub use data::{make_calibset, unigram_perplexity, CalibSet, TokenStream, Vocab};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_rope_base() -> f32 {
    10000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    /// The 12-layer desk-scale default.
    pub fn tiny12(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 12,
            d_ff: 384,
            max_seq_len: 128,
            seed: 0,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size > 0
            && self.d_model > 0
            && self.n_heads > 0
            && self.n_layers > 0
            && self.d_ff > 0
            && self.max_seq_len > 0;
        if !ok {
            return Err(contract("model config dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(contract(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.rope_base > 0.0) {
            return Err(contract("norm_eps and rope_base must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(in, out)` shape of a block linear.
    pub fn linear_shape(&self, lin: Linear) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match lin {
            Linear::Q | Linear::K | Linear::V | Linear::O => (d, d),
            Linear::Gate | Linear::Up => (d, f),
            Linear::Down => (f, d),
        }
    }
}

/// The seven quantized linears of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 7] = [
        Linear::Q,
        Linear::K,
        Linear::V,
        Linear::O,
        Linear::Gate,
        Linear::Up,
        Linear::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "q_proj",
            Linear::K => "k_proj",
            Linear::V => "v_proj",
            Linear::O => "o_proj",
            Linear::Gate => "gate_proj",
            Linear::Up => "up_proj",
            Linear::Down => "down_proj",
        }
    }
}

/// The two RMSNorm gains of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSite {
    Attn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by [`Linear::index`].
    pub linears: [Tensor; 7],
}

impl Block {
    pub fn weight(&self, lin: Linear) -> &Tensor {
        &self.linears[lin.index()]
    }

    pub fn weight_mut(&mut self, lin: Linear) -> &mut Tensor {
        &mut self.linears[lin.index()]
    }

    pub fn gain(&self, site: NormSite) -> &Tensor {
        match site {
            NormSite::Attn => &self.attn_norm,
            NormSite::Mlp => &self.mlp_norm,
        }
    }

    pub fn gain_mut(&mut self, site: NormSite) -> &mut Tensor {
        match site {
            NormSite::Attn => &mut self.attn_norm,
            NormSite::Mlp => &mut self.mlp_norm,
        }
    }

    fn check(&self, cfg: &ModelConfig, layer: usize) -> Result<()> {
        for site in [NormSite::Attn, NormSite::Mlp] {
            if self.gain(site).shape() != [cfg.d_model] {
                return Err(contract(format!("layer {layer}: norm gain shape {:?}", self.gain(site).shape())));
            }
        }
        for lin in Linear::ALL {
            let (i, o) = cfg.linear_shape(lin);
            if self.weight(lin).shape() != [i, o] {
                return Err(contract(format!(
                    "layer {layer}: {} has shape {:?}, expected [{i}, {o}]",
                    lin.name(),
                    self.weight(lin).shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let embed = Tensor::randn(&mut rng, &[config.vocab_size, d], std);
        let blocks = (0..config.n_layers)
            .map(|_| {
                let linears = Linear::ALL.map(|lin| {
                    let (i, o) = config.linear_shape(lin);
                    let s = if matches!(lin, Linear::O | Linear::Down) { resid_std } else { std };
                    Tensor::randn(&mut rng, &[i, o], s)
                });
                Block {
                    attn_norm: Tensor::full(&[d], 1.0),
                    mlp_norm: Tensor::full(&[d], 1.0),
                    linears,
                }
            })
            .collect();
        let head = Tensor::randn(&mut rng, &[d, config.vocab_size], std);
        Ok(Self {
            embed,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            head,
            config,
        })
    }

    /// Shape consistency with the config.
    pub fn check(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.n_layers {
            return Err(contract(format!("{} blocks for {} layers", self.blocks.len(), c.n_layers)));
        }
        if self.embed.shape() != [c.vocab_size, c.d_model]
            || self.head.shape() != [c.d_model, c.vocab_size]
            || self.final_norm.shape() != [c.d_model]
        {
            return Err(contract("embedding, head or final norm shape mismatch"));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.check(c, l)?;
        }
        Ok(())
    }

    /// Every tensor with its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{l}.mlp_norm"), &b.mlp_norm));
            for lin in Linear::ALL {
                out.push((format!("blocks.{l}.{}", lin.name()), b.weight(lin)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable tensors in the same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.mlp_norm);
            out.extend(b.linears.iter_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.embed.numel()
            + self.head.numel()
            + self.final_norm.numel()
            + self
                .blocks
                .iter()
                .map(|b| b.attn_norm.numel() + b.mlp_norm.numel() + b.linears.iter().map(Tensor::numel).sum::<usize>())
                .sum::<usize>()
    }

    pub fn ctx(&self, n_seqs: usize, seq_len: usize) -> Result<ForwardCtx> {
        ForwardCtx::new(&self.config, n_seqs, seq_len)
    }

    /// Block input activations (`n_seqs * seq_len` rows) for layer 0.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        embed_rows(&self.embed, ids)
    }

    /// Full-precision logits without recording gradients. A fresh tape is
    /// used per block so memory stays proportional to one block.
    pub fn logits(&self, ids: &[usize], n_seqs: usize) -> Result<Tensor> {
        Ok(self.forward_capture(ids, n_seqs, &[])?.0)
    }

    /// Logits plus the block inputs of the requested layers (layer 0's input
    /// is the token embedding).
    pub fn forward_capture(&self, ids: &[usize], n_seqs: usize, capture: &[usize]) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        let seq_len = seq_len_of(ids, n_seqs)?;
        let ctx = self.ctx(n_seqs, seq_len)?;
        let mut x = self.embed_tokens(ids)?;
        let mut captured = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            if capture.contains(&l) {
                captured.push((l, x.clone()));
            }
            x = run_block(&mut PlainBlock::new(block), x, &ctx)?;
        }
        Ok((self.head_logits(x)?, captured))
    }

    /// Final norm and LM head applied to the last block's output.
    pub fn head_logits(&self, x: Tensor) -> Result<Tensor> {
        lm_head(x, &self.final_norm, &self.head, self.config.norm_eps)
    }
}

impl LanguageModel for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, ids: &[usize], n_seqs: usize) -> Result<Tensor> {
        Model::logits(self, ids, n_seqs)
    }
}

/// Anything that maps packed token sequences to next-token logits.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    /// `ids` holds `n_seqs` equal-length sequences back to back; the result
    /// has one row of logits per token.
    fn logits(&self, ids: &[usize], n_seqs: usize) -> Result<Tensor>;
}

/// Embedding lookup.
pub fn embed_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let x = tape.embedding(t, ids)?;
    Ok(tape.value(x).clone())
}

/// Final RMSNorm followed by the output projection.
pub fn lm_head(x: Tensor, final_norm: &Tensor, head: &Tensor, eps: f32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(final_norm.clone());
    let h = tape.constant(head.clone());
    let n = tape.rmsnorm(xv, g, eps)?;
    let y = tape.matmul(n, h)?;
    Ok(tape.value(y).clone())
}

pub(crate) fn seq_len_of(ids: &[usize], n_seqs: usize) -> Result<usize> {
    if n_seqs == 0 || ids.is_empty() || ids.len() % n_seqs != 0 {
        return Err(contract(format!("{} tokens do not split into {n_seqs} sequences", ids.len())));
    }
    Ok(ids.len() / n_seqs)
}

/// Per-batch constants shared by every block: the rotary table and the
/// packed attention layout.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub rope: Rc<RopeTable>,
    pub layout: AttnLayout,
    pub eps: f32,
}

impl ForwardCtx {
    pub fn new(cfg: &ModelConfig, n_seqs: usize, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || seq_len > cfg.max_seq_len {
            return Err(contract(format!(
                "sequence length {seq_len} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        Ok(Self {
            rope: Rc::new(RopeTable::new(seq_len, cfg.head_dim(), cfg.rope_base)),
            layout: AttnLayout {
                n_seqs,
                seq_len,
                n_heads: cfg.n_heads,
            },
            eps: cfg.norm_eps,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.n_seqs * self.layout.seq_len
    }
}

/// How a block obtains its norm gains and evaluates its linears. The block
/// dataflow lives in [`block_forward`]; implementations decide whether a
/// linear is full precision, fake-quantized, transformed or dequantized.
pub trait BlockOps {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var>;
    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var>;
}

/// One decoder block: pre-norm attention and pre-norm gated MLP, both with
/// residual connections.
pub fn block_forward(tape: &mut Tape, ops: &mut dyn BlockOps, x: Var, ctx: &ForwardCtx) -> Result<Var> {
    let n_heads = ctx.layout.n_heads;
    let g1 = ops.gain(tape, NormSite::Attn)?;
    let h = tape.rmsnorm(x, g1, ctx.eps)?;
    let q = ops.linear(tape, Linear::Q, h)?;
    let k = ops.linear(tape, Linear::K, h)?;
    let v = ops.linear(tape, Linear::V, h)?;
    let q = tape.rope(q, &ctx.rope, n_heads)?;
    let k = tape.rope(k, &ctx.rope, n_heads)?;
    let attn = tape.causal_attention(q, k, v, ctx.layout)?;
    let o = ops.linear(tape, Linear::O, attn)?;
    let x = tape.add(x, o)?;

    let g2 = ops.gain(tape, NormSite::Mlp)?;
    let h = tape.rmsnorm(x, g2, ctx.eps)?;
    let gate = ops.linear(tape, Linear::Gate, h)?;
    let up = ops.linear(tape, Linear::Up, h)?;
    let gate = tape.silu(gate)?;
    let hidden = tape.mul(gate, up)?;
    let down = ops.linear(tape, Linear::Down, hidden)?;
    Ok(tape.add(x, down)?)
}

/// Evaluates one block on a value without keeping the graph.
pub fn run_block(ops: &mut dyn BlockOps, x: Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = block_forward(&mut tape, ops, xv, ctx)?;
    Ok(tape.value(y).clone())
}

/// Full-precision block with its weights recorded as constants.
pub struct PlainBlock<'a> {
    block: &'a Block,
    cache: [Option<Var>; 9],
}

impl<'a> PlainBlock<'a> {
    pub fn new(block: &'a Block) -> Self {
        Self { block, cache: [None; 9] }
    }
}

impl BlockOps for PlainBlock<'_> {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var> {
        let slot = 7 + site as usize;
        let block = self.block;
        Ok(*self.cache[slot].get_or_insert_with(|| tape.constant(block.gain(site).clone())))
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let block = self.block;
        let w = *self.cache[lin.index()].get_or_insert_with(|| tape.constant(block.weight(lin).clone()));
        Ok(tape.matmul(x, w)?)
    }
}

/// A block whose gains and weights are already on the tape (e.g. as
/// trainable parameters).
pub struct VarBlock {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub linears: [Var; 7],
}

impl BlockOps for VarBlock {
    fn gain(&mut self, _tape: &mut Tape, site: NormSite) -> Result<Var> {
        Ok(match site {
            NormSite::Attn => self.attn_norm,
            NormSite::Mlp => self.mlp_norm,
        })
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        Ok(tape.matmul(x, self.linears[lin.index()])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Model {
        Model::init(ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_seq_len: 8,
            seed: 3,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        })
        .unwrap()
    }

    #[test]
    fn single_token_logits_shape() {
        let m = small();
        assert_eq!(m.logits(&[4], 1).unwrap().shape(), &[1, 11]);
    }

    #[test]
    fn capture_layer0_is_embedding() {
        let m = small();
        let ids = [1, 2, 3, 4];
        let (_, cap) = m.forward_capture(&ids, 1, &[0, 1]).unwrap();
        assert_eq!(cap[0].1, m.embed_tokens(&ids).unwrap());
        assert_eq!(cap.len(), 2);
    }

    #[test]
    fn context_overflow_rejected() {
        let m = small();
        assert!(m.logits(&[0; 9], 1).is_err());
        assert!(m.logits(&[0; 7], 2).is_err());
    }

    #[test]
    fn causal_and_deterministic() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<usize> = (0..8).map(|_| rng.gen_range(0..11)).collect();
        let a = m.logits(&ids, 1).unwrap();
        assert_eq!(a, m.logits(&ids, 1).unwrap());
        let mut changed = ids.clone();
        changed[5] = (changed[5] + 1) % 11;
        let b = m.logits(&changed, 1).unwrap();
        assert_eq!(a.data()[..5 * 11], b.data()[..5 * 11]);
        assert_ne!(a.data()[5 * 11..], b.data()[5 * 11..]);
    }

    #[test]
    fn batched_equals_separate() {
        let m = small();
        let ids: Vec<usize> = (0..16).map(|i| (i * 7) % 11).collect();
        let both = m.logits(&ids, 2).unwrap();
        let first = m.logits(&ids[..8], 1).unwrap();
        let second = m.logits(&ids[8..], 1).unwrap();
        assert!(both.data()[..88].iter().zip(first.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(both.data()[88..].iter().zip(second.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn shape_check_catches_bad_block() {
        let mut m = small();
        assert!(m.check().is_ok());
        m.blocks[1].linears[Linear::Down.index()] = Tensor::zeros(&[16, 24]);
        assert!(m.check().is_err());
    }
}
