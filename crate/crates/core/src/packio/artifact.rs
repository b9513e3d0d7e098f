//! "SLQ1" quantized artifacts.
//!
//! Layout after the common header:
//!
//! ```text
//! wbits u8 | abits u8 | granularity code u8 | axis u8 | group size u32 | epsilon_step f32
//! meta: length-prefixed JSON (model config, vocabulary, run config echo)
//! quantized record count u32
//!   name | shape | slice count u32 | steps f32[] | betas i32[] | packed codes
//! raw record count u32
//!   name | shape | f32 data
//! ```
//!
//! Quantized records are the seven linears of each block in
//! [`Model::named_tensors`](crate::tinymodel::Model::named_tensors) order;
//! raw records hold the embedding, norm gains and head.

use serde::{Deserialize, Serialize};

use super::{checked_numel, pack_codes, packed_len, unpack_codes, FormatError, Reader, Writer};
use crate::calibrate::{Layer, QuantizedBlock, QuantizedModel};
use crate::numkit::Tensor;
use crate::quantizer::{Granularity, QuantParams, QuantSpec, QuantizedTensor, SliceLayout};
use crate::tinymodel::{Linear, ModelConfig, Vocab};
use crate::{contract, Result};

const MAGIC: &[u8; 4] = b"SLQ1";
pub const ARTIFACT_VERSION: u32 = 1;

/// A quantized model plus what is needed to evaluate and reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedArtifact {
    pub model: QuantizedModel,
    pub vocab: Vocab,
    /// Free-form run configuration echo; stored as canonical JSON.
    pub run_config: serde_json::Value,
}

/// A full-precision tensor stored alongside the quantized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    vocab: String,
    run: serde_json::Value,
}

fn encode_granularity(g: Granularity) -> (u8, u8, u32) {
    match g {
        Granularity::PerTensor => (g.code(), 0, 0),
        Granularity::PerChannel { axis } | Granularity::PerToken { axis } => (g.code(), axis as u8, 0),
        Granularity::GroupWise { axis, group_size } => (g.code(), axis as u8, group_size as u32),
    }
}

fn decode_granularity(code: u8, axis: u8, group: u32) -> Result<Granularity, FormatError> {
    let axis = axis as usize;
    Ok(match code {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel { axis },
        2 => Granularity::PerToken { axis },
        3 => Granularity::GroupWise {
            axis,
            group_size: group as usize,
        },
        c => return Err(FormatError::Malformed(format!("granularity code {c}"))),
    })
}

fn block_names(l: usize) -> [String; 7] {
    Linear::ALL.map(|lin| format!("blocks.{l}.{}", lin.name()))
}

fn raw_tensors(m: &QuantizedModel) -> Result<Vec<RawTensor>> {
    let mut out = vec![RawTensor {
        name: "embed".into(),
        tensor: m.embed.clone(),
    }];
    for (l, layer) in m.layers.iter().enumerate() {
        let Layer::Quant(b) = layer else {
            return Err(contract(format!("block {l} is not quantized")));
        };
        out.push(RawTensor {
            name: format!("blocks.{l}.attn_norm"),
            tensor: b.attn_norm.clone(),
        });
        out.push(RawTensor {
            name: format!("blocks.{l}.mlp_norm"),
            tensor: b.mlp_norm.clone(),
        });
    }
    out.push(RawTensor {
        name: "final_norm".into(),
        tensor: m.final_norm.clone(),
    });
    out.push(RawTensor {
        name: "head".into(),
        tensor: m.head.clone(),
    });
    Ok(out)
}

/// Serializes a fully quantized model. The output is a pure function of the
/// content.
pub fn pack(artifact: &PackedArtifact) -> Result<Vec<u8>> {
    let m = &artifact.model;
    if !m.is_fully_quantized() || m.layers.len() != m.config.n_layers {
        return Err(contract("every block must be committed before packing"));
    }
    if artifact.vocab.len() != m.config.vocab_size {
        return Err(contract("vocabulary size disagrees with the model config"));
    }
    let raw = raw_tensors(m)?;
    let spec = m.weight_spec;
    let mut w = Writer::new(MAGIC, ARTIFACT_VERSION);
    w.u8(spec.bits);
    w.u8(m.abits);
    let (code, axis, group) = encode_granularity(spec.granularity);
    w.u8(code);
    w.u8(axis);
    w.u32(group);
    w.f32s(&[spec.epsilon_step]);
    let meta = Meta {
        config: m.config.clone(),
        vocab: artifact.vocab.chars().iter().collect(),
        run: artifact.run_config.clone(),
    };
    w.str(&serde_json::to_string(&meta).expect("meta serializes"));

    w.u32((m.layers.len() * 7) as u32);
    for (l, layer) in m.layers.iter().enumerate() {
        let Layer::Quant(b) = layer else { unreachable!("checked above") };
        for (name, q) in block_names(l).iter().zip(&b.weights) {
            if q.bits != spec.bits {
                return Err(contract(format!("{name} has {} bits, artifact has {}", q.bits, spec.bits)));
            }
            w.str(name);
            w.shape(&q.shape);
            w.u32(q.params.steps.len() as u32);
            w.f32s(&q.params.steps);
            for &beta in &q.params.offsets {
                let beta = i32::try_from(beta).map_err(|_| contract(format!("{name}: offset {beta} exceeds i32")))?;
                w.i32(beta);
            }
            w.bytes(&pack_codes(&q.codes, q.bits));
        }
    }
    w.u32(raw.len() as u32);
    for r in &raw {
        w.str(&r.name);
        w.shape(r.tensor.shape());
        w.f32s(r.tensor.data());
    }
    Ok(w.finish())
}

fn expect_name(r: &mut Reader<'_>, want: &str) -> Result<(), FormatError> {
    let got = r.str("record name")?;
    if got != want {
        return Err(FormatError::Malformed(format!("record {got}, expected {want}")));
    }
    Ok(())
}

fn read_raw(r: &mut Reader<'_>, name: &str, shape: &[usize]) -> Result<Tensor> {
    expect_name(r, name)?;
    let got = r.shape("raw shape")?;
    if got != shape {
        return Err(FormatError::Malformed(format!("{name} shape {got:?}, expected {shape:?}")).into());
    }
    let n = checked_numel(&got, r.remaining(), 32)?;
    Ok(Tensor::new(&got, r.f32s(n, "raw data")?)?)
}

pub fn unpack(bytes: &[u8]) -> Result<PackedArtifact> {
    let (mut r, _) = Reader::open(bytes, MAGIC, ARTIFACT_VERSION)?;
    let wbits = r.u8("wbits")?;
    let abits = r.u8("abits")?;
    let code = r.u8("granularity")?;
    let axis = r.u8("granularity")?;
    let group = r.u32("granularity")?;
    let eps = r.f32s(1, "epsilon")?[0];
    let granularity = decode_granularity(code, axis, group)?;
    let spec = QuantSpec {
        bits: wbits,
        granularity,
        epsilon_step: eps,
    };
    spec.validate().map_err(|e| FormatError::Malformed(format!("weight spec: {e}")))?;
    if !(2..=16).contains(&abits) {
        return Err(FormatError::Malformed(format!("activation bits {abits}")).into());
    }
    let meta: Meta =
        serde_json::from_str(&r.str("meta")?).map_err(|e| FormatError::Malformed(format!("artifact meta: {e}")))?;
    let cfg = meta.config;
    cfg.validate().map_err(|e| FormatError::Malformed(format!("model config: {e}")))?;
    let vocab = Vocab::from_chars(meta.vocab.chars().collect())?;
    if vocab.len() != cfg.vocab_size {
        return Err(FormatError::Malformed("vocabulary size disagrees with config".into()).into());
    }

    let count = r.u32("record count")? as usize;
    if count != cfg.n_layers * 7 {
        return Err(FormatError::Malformed(format!("{count} quantized records, expected {}", cfg.n_layers * 7)).into());
    }
    let mut weights: Vec<Vec<QuantizedTensor>> = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut ws = Vec::with_capacity(7);
        for (lin, name) in Linear::ALL.into_iter().zip(block_names(l)) {
            expect_name(&mut r, &name)?;
            let shape = r.shape("record shape")?;
            let (i, o) = cfg.linear_shape(lin);
            if shape != [i, o] {
                return Err(FormatError::Malformed(format!("{name} shape {shape:?}, expected [{i}, {o}]")).into());
            }
            let layout =
                SliceLayout::new(&shape, granularity).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
            let slices = r.u32("slice count")? as usize;
            if slices != layout.num_slices() {
                return Err(FormatError::Malformed(format!(
                    "{name}: {slices} slices, layout has {}",
                    layout.num_slices()
                ))
                .into());
            }
            let steps = r.f32s(slices, "steps")?;
            if steps.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(FormatError::Malformed(format!("{name}: non-positive step")).into());
            }
            let offsets = (0..slices).map(|_| r.i32("betas").map(i64::from)).collect::<Result<Vec<_>, _>>()?;
            let n = i * o;
            let raw = r.take(packed_len(n, wbits), "codes")?;
            let codes = unpack_codes(raw, n, wbits)?;
            ws.push(QuantizedTensor {
                bits: wbits,
                codes,
                params: QuantParams { steps, offsets, layout },
                shape,
            });
        }
        weights.push(ws);
    }

    let raw_count = r.u32("raw record count")? as usize;
    if raw_count != 2 * cfg.n_layers + 3 {
        return Err(FormatError::Malformed(format!("{raw_count} raw records")).into());
    }
    let d = cfg.d_model;
    let embed = read_raw(&mut r, "embed", &[cfg.vocab_size, d])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, ws) in weights.into_iter().enumerate() {
        let attn = read_raw(&mut r, &format!("blocks.{l}.attn_norm"), &[d])?;
        let mlp = read_raw(&mut r, &format!("blocks.{l}.mlp_norm"), &[d])?;
        layers.push(Layer::Quant(QuantizedBlock::from_parts(attn, mlp, ws)?));
    }
    let final_norm = read_raw(&mut r, "final_norm", &[d])?;
    let head = read_raw(&mut r, "head", &[d, cfg.vocab_size])?;
    r.finish()?;
    Ok(PackedArtifact {
        model: QuantizedModel {
            config: cfg,
            weight_spec: spec,
            abits,
            embed,
            final_norm,
            head,
            layers,
        },
        vocab,
        run_config: meta.run,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StorageRow {
    pub name: String,
    pub numel: usize,
    pub fp32_bytes: usize,
    /// Packed codes plus per-slice step and offset.
    pub packed_bytes: usize,
}

impl StorageRow {
    pub fn ratio(&self) -> f64 {
        self.fp32_bytes as f64 / self.packed_bytes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StorageReport {
    pub rows: Vec<StorageRow>,
    pub fp32_bytes: usize,
    pub packed_bytes: usize,
}

impl StorageReport {
    pub fn ratio(&self) -> f64 {
        self.fp32_bytes as f64 / self.packed_bytes as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor,numel,fp32_bytes,packed_bytes,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4}\n",
                r.name,
                r.numel,
                r.fp32_bytes,
                r.packed_bytes,
                r.ratio()
            ));
        }
        out.push_str(&format!(
            "total,{},{},{},{:.4}\n",
            self.rows.iter().map(|r| r.numel).sum::<usize>(),
            self.fp32_bytes,
            self.packed_bytes,
            self.ratio()
        ));
        out
    }
}

/// Storage of the quantized linear weights against their FP32 size.
/// Embedding, norms and head are stored in FP32 either way and are left out.
pub fn storage_report(model: &QuantizedModel) -> Result<StorageReport> {
    let mut rows = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Layer::Quant(b) = layer else { continue };
        for (name, q) in block_names(l).into_iter().zip(&b.weights) {
            let numel = q.codes.len();
            rows.push(StorageRow {
                name,
                numel,
                fp32_bytes: 4 * numel,
                packed_bytes: packed_len(numel, q.bits) + 8 * q.params.steps.len(),
            });
        }
    }
    if rows.is_empty() {
        return Err(contract("model has no quantized tensors"));
    }
    Ok(StorageReport {
        fp32_bytes: rows.iter().map(|r| r.fp32_bytes).sum(),
        packed_bytes: rows.iter().map(|r| r.packed_bytes).sum(),
        rows,
    })
}
