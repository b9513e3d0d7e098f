//! "SLQM" checkpoints: fixed header, a JSON config/vocabulary echo, then
//! named little-endian f32 tensors in [`Model::named_tensors`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{checked_numel, FormatError, Reader, Writer};
use crate::numkit::Tensor;
use crate::tinymodel::{Model, ModelConfig, Vocab};
use crate::Result;

const MAGIC: &[u8; 4] = b"SLQM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: String,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.model.check()?;
    let mut w = Writer::new(MAGIC, CHECKPOINT_VERSION);
    let header = Header {
        config: ckpt.model.config.clone(),
        vocab: ckpt.vocab.chars().iter().collect(),
    };
    w.str(&serde_json::to_string(&header).expect("header serializes"));
    let tensors = ckpt.model.named_tensors();
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.str(&name);
        w.shape(t.shape());
        w.f32s(t.data());
    }
    Ok(w.finish())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut r, _) = Reader::open(bytes, MAGIC, CHECKPOINT_VERSION)?;
    let header: Header = serde_json::from_str(&r.str("header")?)
        .map_err(|e| FormatError::Malformed(format!("checkpoint header: {e}")))?;
    let vocab = Vocab::from_chars(header.vocab.chars().collect())?;
    if vocab.len() != header.config.vocab_size {
        return Err(FormatError::Malformed("vocabulary size disagrees with config".into()).into());
    }
    let mut model = Model::init(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(FormatError::Malformed(format!("{count} tensors, expected {}", expected.len())).into());
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let got_name = r.str("tensor name")?;
        let got_shape = r.shape("tensor shape")?;
        if &got_name != name || &got_shape != shape {
            return Err(FormatError::Malformed(format!(
                "tensor {got_name} {got_shape:?}, expected {name} {shape:?}"
            ))
            .into());
        }
        let n = checked_numel(&got_shape, r.remaining(), 32)?;
        let data = r.f32s(n, "tensor data")?;
        loaded.push(Tensor::new(&got_shape, data)?);
    }
    r.finish()?;
    for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    model.check()?;
    Ok(Checkpoint { model, vocab })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn ckpt() -> Checkpoint {
        let vocab = Vocab::from_text("abcde");
        let model = Model::init(ModelConfig {
            vocab_size: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 16,
            seed: 9,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        })
        .unwrap();
        Checkpoint { model, vocab }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let bytes = write_checkpoint(&c).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = write_checkpoint(&ckpt()).unwrap();
        let code = |b: &[u8]| match read_checkpoint(b) {
            Err(Error::Format(e)) => e.code(),
            other => panic!("unexpected {other:?}"),
        };
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert_eq!(code(&flipped), 3);
        assert_eq!(code(&bytes[..bytes.len() - 10]), 4);
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(code(&magic), 1);
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert_eq!(code(&ver), 2);
    }
}
