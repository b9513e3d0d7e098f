//! Uniform affine (min-max) quantizer.
//!
//! For a slice `Z` with `b` bits:
//!
//! ```text
//! step = max((Z_max - Z_min) / (2^b - 1), epsilon_step)
//! beta = round(Z_min / step)
//! code = clamp(round(Z / step) - beta, 0, 2^b - 1)
//! Z'   = (code + beta) * step
//! ```
//!
//! Rounding is half away from zero. All per-element arithmetic runs in
//! `f64` from the `f32` inputs and `f32` step, so quantize/dequantize are
//! bit-reproducible between calibration-time fake quantization and export.

use serde::{Deserialize, Serialize};

use crate::numkit::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("empty quantization slice for shape {0:?}")]
    EmptySlice(Vec<usize>),
    #[error("quantization params do not fit tensor: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How elements are grouped into slices that share one `(step, beta)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    PerTensor,
    /// One pair per index along `axis` (weights: `axis = 1`, output channels).
    PerChannel { axis: usize },
    /// Same slicing as `PerChannel`; named for activations (`axis = 0`, rows).
    PerToken { axis: usize },
    /// Each per-`axis` slice is cut into contiguous groups of `group_size`
    /// elements (in row-major order of the remaining axes).
    GroupWise { axis: usize, group_size: usize },
}

impl Granularity {
    /// Stable numeric code used by the packed artifact header.
    pub fn code(&self) -> u8 {
        match self {
            Self::PerTensor => 0,
            Self::PerChannel { .. } => 1,
            Self::PerToken { .. } => 2,
            Self::GroupWise { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub epsilon_step: f32,
}

impl QuantSpec {
    pub const DEFAULT_EPSILON: f32 = 1e-8;

    pub fn new(bits: u8, granularity: Granularity) -> Result<Self, QuantError> {
        let spec = Self {
            bits,
            granularity,
            epsilon_step: Self::DEFAULT_EPSILON,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-output-channel weights of an `in x out` matrix.
    pub fn weight(bits: u8) -> Result<Self, QuantError> {
        Self::new(bits, Granularity::PerChannel { axis: 1 })
    }

    /// Per-token activations of a `tokens x features` matrix.
    pub fn activation(bits: u8) -> Result<Self, QuantError> {
        Self::new(bits, Granularity::PerToken { axis: 0 })
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=16).contains(&self.bits) {
            return Err(QuantError::InvalidSpec(format!("bits {} outside 2..=16", self.bits)));
        }
        if !(self.epsilon_step > 0.0 && self.epsilon_step.is_finite()) {
            return Err(QuantError::InvalidSpec("epsilon_step must be positive".into()));
        }
        if let Granularity::GroupWise { group_size, .. } = self.granularity {
            if group_size == 0 {
                return Err(QuantError::InvalidSpec("group_size must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Maps flat element indices of a tensor to quantization slices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLayout {
    pub shape: Vec<usize>,
    pub granularity: Granularity,
    outer: usize,
    extent: usize,
    inner: usize,
    groups: usize,
}

impl SliceLayout {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self, QuantError> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(QuantError::EmptySlice(shape.to_vec()));
        }
        let split = |axis: usize| -> Result<(usize, usize, usize), QuantError> {
            if axis >= shape.len() {
                return Err(QuantError::InvalidSpec(format!(
                    "axis {axis} out of range for shape {shape:?}"
                )));
            }
            let outer = shape[..axis].iter().product();
            let inner = shape[axis + 1..].iter().product();
            Ok((outer, shape[axis], inner))
        };
        let (outer, extent, inner, groups) = match granularity {
            Granularity::PerTensor => (1, 1, numel, 1),
            Granularity::PerChannel { axis } | Granularity::PerToken { axis } => {
                let (o, e, i) = split(axis)?;
                (o, e, i, 1)
            }
            Granularity::GroupWise { axis, group_size } => {
                let (o, e, i) = split(axis)?;
                let slice_len = o * i;
                if group_size == 0 || slice_len % group_size != 0 {
                    return Err(QuantError::InvalidSpec(format!(
                        "group size {group_size} does not divide slice length {slice_len} of shape {shape:?}"
                    )));
                }
                (o, e, i, slice_len / group_size)
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            granularity,
            outer,
            extent,
            inner,
            groups,
        })
    }

    pub fn num_slices(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            _ => self.extent * self.groups,
        }
    }

    #[inline]
    pub fn slice_of(&self, flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { .. } | Granularity::PerToken { .. } => (flat / self.inner) % self.extent,
            Granularity::GroupWise { group_size, .. } => {
                let i = flat % self.inner;
                let rest = flat / self.inner;
                let a = rest % self.extent;
                let o = rest / self.extent;
                let pos = o * self.inner + i;
                a * self.groups + pos / group_size
            }
        }
    }
}

/// Per-slice `(step, beta)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub steps: Vec<f32>,
    pub offsets: Vec<i64>,
    pub layout: SliceLayout,
}

impl QuantParams {
    pub fn num_slices(&self) -> usize {
        self.steps.len()
    }

    fn check(&self, shape: &[usize]) -> Result<(), QuantError> {
        if self.layout.shape != shape {
            return Err(QuantError::Mismatch(format!(
                "params for shape {:?} applied to {shape:?}",
                self.layout.shape
            )));
        }
        if self.steps.len() != self.layout.num_slices() || self.offsets.len() != self.steps.len() {
            return Err(QuantError::Mismatch("slice count".into()));
        }
        if self.steps.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(QuantError::Mismatch("non-positive step".into()));
        }
        Ok(())
    }
}

/// Integer codes plus the params that decode them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub bits: u8,
    pub codes: Vec<u16>,
    pub params: QuantParams,
    pub shape: Vec<usize>,
}

/// `round(x)` with ties away from zero.
#[inline]
fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[inline]
fn raw_code(z: f32, step: f32, beta: i64) -> i64 {
    round_half_away(z as f64 / step as f64) as i64 - beta
}

#[inline]
fn decode(code: i64, step: f32, beta: i64) -> f32 {
    ((code + beta) as f64 * step as f64) as f32
}

/// Min-max params for every slice of `z`.
pub fn calc_params(z: &Tensor, spec: &QuantSpec) -> Result<QuantParams, QuantError> {
    spec.validate()?;
    let layout = SliceLayout::new(z.shape(), spec.granularity)?;
    let n = layout.num_slices();
    let mut lo = vec![f32::INFINITY; n];
    let mut hi = vec![f32::NEG_INFINITY; n];
    for (flat, &v) in z.data().iter().enumerate() {
        let s = layout.slice_of(flat);
        lo[s] = lo[s].min(v);
        hi[s] = hi[s].max(v);
    }
    let levels = spec.levels() as f64;
    let mut steps = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for (l, h) in lo.into_iter().zip(hi) {
        if !l.is_finite() || !h.is_finite() {
            return Err(QuantError::EmptySlice(z.shape().to_vec()));
        }
        let step = (((h as f64 - l as f64) / levels) as f32).max(spec.epsilon_step);
        steps.push(step);
        offsets.push(round_half_away(l as f64 / step as f64) as i64);
    }
    Ok(QuantParams { steps, offsets, layout })
}

pub fn quantize(z: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<QuantizedTensor, QuantError> {
    params.check(z.shape())?;
    let max = spec.levels() as i64;
    let codes = z
        .data()
        .iter()
        .enumerate()
        .map(|(flat, &v)| {
            let s = params.layout.slice_of(flat);
            raw_code(v, params.steps[s], params.offsets[s]).clamp(0, max) as u16
        })
        .collect();
    Ok(QuantizedTensor {
        bits: spec.bits,
        codes,
        params: params.clone(),
        shape: z.shape().to_vec(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor, QuantError> {
    q.params.check(&q.shape)?;
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(flat, &c)| {
            let s = q.params.layout.slice_of(flat);
            decode(c as i64, q.params.steps[s], q.params.offsets[s])
        })
        .collect();
    Ok(Tensor::new(&q.shape, data)?)
}

/// Quantize-dequantize with the given params, plus the straight-through
/// mask (true where the pre-clamp code was inside `[0, 2^b - 1]`).
pub fn fake_quant_with(z: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<(Tensor, Vec<bool>), QuantError> {
    params.check(z.shape())?;
    let max = spec.levels() as i64;
    let mut out = Vec::with_capacity(z.numel());
    let mut pass = Vec::with_capacity(z.numel());
    for (flat, &v) in z.data().iter().enumerate() {
        let s = params.layout.slice_of(flat);
        let (step, beta) = (params.steps[s], params.offsets[s]);
        let raw = raw_code(v, step, beta);
        pass.push((0..=max).contains(&raw));
        out.push(decode(raw.clamp(0, max), step, beta));
    }
    Ok((Tensor::new(z.shape(), out)?, pass))
}

/// Quantize-dequantize with params computed from `z` itself.
pub fn fake_quant(z: &Tensor, spec: &QuantSpec) -> Result<(Tensor, Vec<bool>), QuantError> {
    let params = calc_params(z, spec)?;
    fake_quant_with(z, &params, spec)
}

/// Records dynamic fake quantization of `x` on the tape with a clipped
/// straight-through gradient.
pub fn fake_quant_var(tape: &mut Tape, x: Var, spec: &QuantSpec) -> Result<Var, QuantError> {
    let (value, pass) = fake_quant(tape.value(x), spec)?;
    Ok(tape.straight_through(x, value, pass)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec1(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn hand_vector_two_bits() {
        let z = vec1(&[-1.0, 0.0, 2.0]);
        let spec = QuantSpec::new(2, Granularity::PerTensor).unwrap();
        let p = calc_params(&z, &spec).unwrap();
        assert_eq!(p.steps, vec![1.0]);
        assert_eq!(p.offsets, vec![-1]);
        let q = quantize(&z, &p, &spec).unwrap();
        assert_eq!(q.codes, vec![0, 1, 3]);
        assert_eq!(dequantize(&q).unwrap(), z);
    }

    #[test]
    fn degenerate_range_uses_epsilon_step() {
        for bits in [2u8, 4, 8, 16] {
            let z = vec1(&[0.0; 4]);
            let spec = QuantSpec::new(bits, Granularity::PerTensor).unwrap();
            let p = calc_params(&z, &spec).unwrap();
            assert_eq!(p.steps, vec![1e-8]);
            assert_eq!(p.offsets, vec![0]);
            let (fq, _) = fake_quant(&z, &spec).unwrap();
            assert_eq!(fq, z);
        }
    }

    #[test]
    fn sixteen_levels_unit_step() {
        let z = vec1(&(0..16).map(|v| v as f32).collect::<Vec<_>>());
        let spec = QuantSpec::new(4, Granularity::PerTensor).unwrap();
        let p = calc_params(&z, &spec).unwrap();
        assert_eq!((p.steps[0], p.offsets[0]), (1.0, 0));
    }

    #[test]
    fn extremes_map_to_end_codes() {
        let spec = QuantSpec::new(3, Granularity::PerTensor).unwrap();
        let z = vec1(&[-2.0, 5.0, 0.0]);
        let p = calc_params(&z, &spec).unwrap();
        let q = quantize(&vec1(&[-2.0; 3]), &p, &spec).unwrap();
        assert_eq!(q.codes, vec![0; 3]);
        let q = quantize(&vec1(&[5.0; 3]), &p, &spec).unwrap();
        assert_eq!(q.codes, vec![7; 3]);
        // codes [0, 1, 3] with step 1, beta -1
        let params = QuantParams {
            steps: vec![1.0],
            offsets: vec![-1],
            layout: SliceLayout::new(&[3], Granularity::PerTensor).unwrap(),
        };
        let q = QuantizedTensor {
            bits: 2,
            codes: vec![0, 1, 3],
            params,
            shape: vec![3],
        };
        assert_eq!(dequantize(&q).unwrap().data(), &[-1.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_codes_zero_offset_dequantize_to_zero() {
        let params = QuantParams {
            steps: vec![0.25, 0.5],
            offsets: vec![0, 0],
            layout: SliceLayout::new(&[2, 2], Granularity::PerToken { axis: 0 }).unwrap(),
        };
        let q = QuantizedTensor {
            bits: 4,
            codes: vec![0; 4],
            params,
            shape: vec![2, 2],
        };
        assert_eq!(dequantize(&q).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn sixteen_bits_is_near_identity() {
        let z = Tensor::new(&[2, 3], vec![0.01, -0.02, 0.003, 0.5, -0.25, 0.125]).unwrap();
        let spec = QuantSpec::activation(16).unwrap();
        let (fq, _) = fake_quant(&z, &spec).unwrap();
        for (a, b) in fq.data().iter().zip(z.data()) {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn ste_gradient_is_mask() {
        // 2-bit grid fitted to [-1, 2]: 3 and -3 fall outside the code range.
        let z = vec1(&[-1.0, 0.4, 2.0]);
        let spec = QuantSpec::new(2, Granularity::PerTensor).unwrap();
        let p = calc_params(&z, &spec).unwrap();
        let wide = vec1(&[-1.0, 3.0, -3.0]);
        let (_, pass) = fake_quant_with(&wide, &p, &spec).unwrap();
        assert_eq!(pass, vec![true, false, false]);

        let mut tape = Tape::new();
        let x = tape.param(z);
        let y = fake_quant_var(&mut tape, x, &spec).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn per_token_matches_per_row_oracle() {
        let z = Tensor::new(&[3, 4], vec![0.1, 0.7, -0.3, 0.2, 5.0, -4.0, 1.0, 0.0, 9.0, 9.5, 8.5, 9.75]).unwrap();
        let spec = QuantSpec::activation(4).unwrap();
        let (fq, _) = fake_quant(&z, &spec).unwrap();
        let row_spec = QuantSpec::new(4, Granularity::PerTensor).unwrap();
        for r in 0..3 {
            let row = vec1(z.row(r));
            let (expect, _) = fake_quant(&row, &row_spec).unwrap();
            assert_eq!(fq.row(r), expect.data(), "row {r}");
        }
    }

    #[test]
    fn ragged_group_rejected() {
        let z = Tensor::zeros(&[6, 2]);
        let spec = QuantSpec::new(4, Granularity::GroupWise { axis: 1, group_size: 4 }).unwrap();
        assert!(matches!(calc_params(&z, &spec), Err(QuantError::InvalidSpec(_))));
        assert!(QuantSpec::new(4, Granularity::GroupWise { axis: 1, group_size: 0 }).is_err());
        assert!(QuantSpec::new(1, Granularity::PerTensor).is_err());
        assert!(QuantSpec::new(17, Granularity::PerTensor).is_err());
    }

    #[test]
    fn empty_tensor_is_contract_error() {
        let z = Tensor::new(&[0, 4], vec![]).unwrap();
        let spec = QuantSpec::weight(4).unwrap();
        assert!(matches!(calc_params(&z, &spec), Err(QuantError::EmptySlice(_))));
    }

    #[test]
    fn group_layout_indices() {
        // 4x2 weight, per output column, groups of 2 rows
        let l = SliceLayout::new(&[4, 2], Granularity::GroupWise { axis: 1, group_size: 2 }).unwrap();
        assert_eq!(l.num_slices(), 4);
        let ids: Vec<usize> = (0..8).map(|f| l.slice_of(f)).collect();
        assert_eq!(ids, vec![0, 2, 0, 2, 1, 3, 1, 3]);
    }

    fn tensor2() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f32..50.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn quantize_is_monotone_within_slice(z in tensor2(), bits in prop::sample::select(vec![2u8, 3, 4, 8])) {
            let spec = QuantSpec::new(bits, Granularity::PerTensor).unwrap();
            let p = calc_params(&z, &spec).unwrap();
            let q = quantize(&z, &p, &spec).unwrap();
            for i in 0..z.numel() {
                for j in 0..z.numel() {
                    if z.data()[i] <= z.data()[j] {
                        prop_assert!(q.codes[i] <= q.codes[j]);
                    }
                }
            }
        }
    }
}
