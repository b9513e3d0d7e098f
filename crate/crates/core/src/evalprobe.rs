//! Perplexity evaluation and the per-layer sensitivity probe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{Layer, QuantizedBlock, QuantizedModel};
use crate::numkit::Tensor;
use crate::quantizer::QuantSpec;
use crate::tinymodel::{LanguageModel, Model};
use crate::{contract, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Tokens per evaluation window; windows do not overlap.
    pub context: usize,
    /// Windows per forward pass. Does not change the result.
    pub batch_windows: usize,
    /// Evaluate only the first `max_tokens` tokens of the stream.
    pub max_tokens: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context: 128,
            batch_windows: 8,
            max_tokens: None,
        }
    }
}

/// Splits `n` tokens into windows `[start, end)` with `end - start <= context
/// + 1`; consecutive windows share one token so every token after the first
/// is predicted exactly once from at most `context` tokens of history.
fn windows(n: usize, context: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + context + 1).min(n);
        out.push((start, end));
        start += context;
    }
    out
}

fn nll_of_row(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target] as f64
}

/// Sum of next-token negative log-likelihoods of each window, in window order.
fn window_nlls(model: &dyn LanguageModel, tokens: &[usize], cfg: &EvalConfig) -> Result<Vec<f64>> {
    let tokens = &tokens[..cfg.max_tokens.unwrap_or(tokens.len()).min(tokens.len())];
    if tokens.len() < 2 {
        return Err(contract("perplexity needs at least two tokens"));
    }
    if cfg.context < 1 || cfg.batch_windows < 1 {
        return Err(contract("context and batch_windows must be >= 1"));
    }
    let vocab = model.config().vocab_size;
    let all = windows(tokens.len(), cfg.context);
    let mut out = Vec::with_capacity(all.len());
    let mut i = 0;
    while i < all.len() {
        // batch windows of equal length only
        let len = all[i].1 - all[i].0;
        let mut j = i;
        while j < all.len() && j - i < cfg.batch_windows && all[j].1 - all[j].0 == len {
            j += 1;
        }
        let ids: Vec<usize> = all[i..j].iter().flat_map(|&(s, e)| tokens[s..e - 1].iter().copied()).collect();
        let logits: Tensor = model.logits(&ids, j - i)?;
        let rows = len - 1;
        for (w, &(s, _)) in all[i..j].iter().enumerate() {
            let mut sum = 0.0;
            for t in 0..rows {
                let r = w * rows + t;
                sum += nll_of_row(&logits.data()[r * vocab..(r + 1) * vocab], tokens[s + t + 1]);
            }
            out.push(sum);
        }
        i = j;
    }
    Ok(out)
}

/// `exp` of the mean next-token negative log-likelihood over `tokens`.
pub fn perplexity(model: &dyn LanguageModel, tokens: &[usize], cfg: &EvalConfig) -> Result<f64> {
    let nlls = window_nlls(model, tokens, cfg)?;
    let n = tokens.len().min(cfg.max_tokens.unwrap_or(usize::MAX)) - 1;
    Ok((nlls.iter().sum::<f64>() / n as f64).exp())
}

/// How the quantized blocks used by the probe are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    Rtn,
    Calibrated,
}

impl ProbeMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rtn => "rtn",
            Self::Calibrated => "calibrated",
        }
    }
}

/// Fully quantized blocks to draw from, plus the model they replace.
pub struct ProbeSource<'a> {
    pub model: &'a Model,
    pub quantized: QuantizedModel,
    pub method: ProbeMethod,
}

impl<'a> ProbeSource<'a> {
    /// Round-to-nearest blocks from the original weights.
    pub fn rtn(model: &'a Model, weight_spec: QuantSpec, abits: u8) -> Result<Self> {
        let mut q = QuantizedModel::from_fp(model, weight_spec, abits);
        for (layer, block) in q.layers.iter_mut().zip(&model.blocks) {
            *layer = Layer::Quant(QuantizedBlock::from_block(block, &weight_spec)?);
        }
        Ok(Self {
            model,
            quantized: q,
            method: ProbeMethod::Rtn,
        })
    }

    /// Blocks taken from a calibrated artifact.
    pub fn calibrated(model: &'a Model, quantized: QuantizedModel) -> Result<Self> {
        if !quantized.is_fully_quantized() || quantized.layers.len() != model.blocks.len() {
            return Err(contract("calibrated probe source must quantize every block of the model"));
        }
        Ok(Self {
            model,
            quantized,
            method: ProbeMethod::Calibrated,
        })
    }

    fn num_layers(&self) -> usize {
        self.model.blocks.len()
    }

    /// The model with blocks where `quantize(l)` holds replaced by their
    /// quantized versions.
    pub fn mixed(&self, quantize: impl Fn(usize) -> bool) -> QuantizedModel {
        let mut q = QuantizedModel::from_fp(self.model, self.quantized.weight_spec, self.quantized.abits);
        for (l, layer) in q.layers.iter_mut().enumerate() {
            if quantize(l) {
                *layer = self.quantized.layers[l].clone();
            }
        }
        q
    }
}

/// Perplexity with only block `l` quantized.
pub fn probe_single_layer(src: &ProbeSource, l: usize, tokens: &[usize], cfg: &EvalConfig) -> Result<f64> {
    if l >= src.num_layers() {
        return Err(contract(format!("layer {l} out of range 0..{}", src.num_layers())));
    }
    perplexity(&src.mixed(|i| i == l), tokens, cfg)
}

/// Perplexity with blocks `0..l` quantized.
pub fn probe_prefix(src: &ProbeSource, l: usize, tokens: &[usize], cfg: &EvalConfig) -> Result<f64> {
    if l < 1 || l > src.num_layers() {
        return Err(contract(format!("prefix length {l} out of range 1..={}", src.num_layers())));
    }
    perplexity(&src.mixed(|i| i < l), tokens, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub method: ProbeMethod,
    pub wbits: u8,
    pub abits: u8,
    pub seed: u64,
    pub fp_ppl: f64,
    /// Indexed by layer.
    pub single: Vec<f64>,
    /// `prefix[i]` has blocks `0..=i` quantized.
    pub prefix: Vec<f64>,
}

pub const SINGLE_CSV_HEADER: &str = "method,wbits,abits,seed,layer,ppl,fp_ppl";
pub const PREFIX_CSV_HEADER: &str = "method,wbits,abits,seed,prefix_len,ppl,fp_ppl";

impl SensitivityReport {
    fn csv(&self, header: &str, values: &[f64], index_offset: usize) -> String {
        let mut out = String::from(header);
        out.push('\n');
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.method.name(),
                self.wbits,
                self.abits,
                self.seed,
                i + index_offset,
                v,
                self.fp_ppl
            );
        }
        out
    }

    pub fn single_csv(&self) -> String {
        self.csv(SINGLE_CSV_HEADER, &self.single, 0)
    }

    pub fn prefix_csv(&self) -> String {
        self.csv(PREFIX_CSV_HEADER, &self.prefix, 1)
    }

    /// A gnuplot script plotting both curves from the two CSV files.
    pub fn gnuplot(&self, single_csv: &str, prefix_csv: &str) -> String {
        format!(
            "set datafile separator ','\n\
             set key autotitle columnhead\n\
             set terminal pngcairo size 1000,400\n\
             set output 'sensitivity.png'\n\
             set multiplot layout 1,2 title '{m} W{w}A{a} seed {s}'\n\
             set xlabel 'layer'\nset ylabel 'perplexity'\n\
             plot '{single}' using 5:6 with linespoints title 'single layer', \
             '' using 5:7 with lines dashtype 2 title 'FP'\n\
             set xlabel 'quantized prefix length'\n\
             plot '{prefix}' using 5:6 with linespoints title 'first l layers', \
             '' using 5:7 with lines dashtype 2 title 'FP'\n\
             unset multiplot\n",
            m = self.method.name(),
            w = self.wbits,
            a = self.abits,
            s = self.seed,
            single = single_csv,
            prefix = prefix_csv,
        )
    }
}

/// Runs the single-layer and prefix sweeps. Probes are split over `jobs`
/// threads; results do not depend on `jobs`.
pub fn sensitivity(
    src: &ProbeSource,
    tokens: &[usize],
    cfg: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<SensitivityReport> {
    let n = src.num_layers();
    let fp_ppl = perplexity(src.model, tokens, cfg)?;
    // task t < n is single layer t, t >= n is prefix t - n + 1
    let run = |t: usize| {
        if t < n {
            probe_single_layer(src, t, tokens, cfg)
        } else {
            probe_prefix(src, t - n + 1, tokens, cfg)
        }
    };
    let tasks: Vec<usize> = (0..2 * n).collect();
    let jobs = jobs.clamp(1, tasks.len());
    let mut results: Vec<Option<Result<f64>>> = (0..tasks.len()).map(|_| None).collect();
    if jobs == 1 {
        for &t in &tasks {
            results[t] = Some(run(t));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let run = &run;
                    scope.spawn(move || (j..2 * n).step_by(jobs).map(|t| (t, run(t))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (t, r) in h.join().expect("probe worker panicked") {
                    results[t] = Some(r);
                }
            }
        });
    }
    let values = results
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SensitivityReport {
        method: src.method,
        wbits: src.quantized.weight_spec.bits,
        abits: src.quantized.abits,
        seed,
        fp_ppl,
        single: values[..n].to_vec(),
        prefix: values[n..].to_vec(),
    })
}

/// Checks a sensitivity CSV: exact header, seven fields per row, integer
/// bits/seed/index, perplexities finite and >= 1, and `rows` data rows.
pub fn validate_sensitivity_csv(text: &str, header: &str, rows: usize) -> Result<()> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(contract(format!("expected header {header:?}")));
    }
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| contract(format!("row {}: {what}: {line:?}", i + 1));
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        if !matches!(f[0], "rtn" | "calibrated") {
            return Err(bad("unknown method"));
        }
        for field in &f[1..5] {
            field.parse::<u64>().map_err(|_| bad("non-integer field"))?;
        }
        for field in &f[5..7] {
            let v: f64 = field.parse().map_err(|_| bad("non-numeric perplexity"))?;
            if !(v.is_finite() && v >= 1.0) {
                return Err(bad("perplexity must be finite and >= 1"));
            }
        }
        count += 1;
    }
    if count != rows {
        return Err(contract(format!("expected {rows} rows, found {count}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinymodel::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn model() -> Model {
        Model::init(ModelConfig {
            vocab_size: 17,
            d_model: 16,
            n_heads: 2,
            n_layers: 3,
            d_ff: 32,
            max_seq_len: 16,
            seed: 2,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        })
        .unwrap()
    }

    fn tokens(n: usize) -> Vec<usize> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        (0..n).map(|_| rng.gen_range(0..17)).collect()
    }

    fn cfg(batch: usize) -> EvalConfig {
        EvalConfig {
            context: 16,
            batch_windows: batch,
            max_tokens: None,
        }
    }

    #[test]
    fn windows_predict_each_token_once() {
        let w = windows(40, 16);
        assert_eq!(w, vec![(0, 17), (16, 33), (32, 40)]);
        let predicted: usize = w.iter().map(|(s, e)| e - s - 1).sum();
        assert_eq!(predicted, 39);
        assert!(windows(1, 16).is_empty());
    }

    #[test]
    fn zero_head_gives_vocab_size() {
        let mut m = model();
        m.head = Tensor::zeros(m.head.shape());
        let ppl = perplexity(&m, &tokens(100), &cfg(4)).unwrap();
        assert!((ppl - 17.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn batching_does_not_change_perplexity() {
        let m = model();
        let t = tokens(300);
        let a = perplexity(&m, &t, &cfg(1)).unwrap();
        let b = perplexity(&m, &t, &cfg(7)).unwrap();
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    }

    #[test]
    fn nll_matches_direct_softmax() {
        let logits = [0.5f32, -1.0, 2.0];
        let z: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
        let want = -((2.0f64).exp() / z).ln();
        assert!((nll_of_row(&logits, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn probe_bounds_checked() {
        let m = model();
        let src = ProbeSource::rtn(&m, QuantSpec::weight(4).unwrap(), 4).unwrap();
        let t = tokens(50);
        assert!(probe_prefix(&src, 0, &t, &cfg(4)).is_err());
        assert!(probe_prefix(&src, 4, &t, &cfg(4)).is_err());
        assert!(probe_single_layer(&src, 3, &t, &cfg(4)).is_err());
        assert!(probe_prefix(&src, 3, &t, &cfg(4)).is_ok());
    }

    #[test]
    fn full_prefix_equals_source_model() {
        let m = model();
        let src = ProbeSource::rtn(&m, QuantSpec::weight(4).unwrap(), 4).unwrap();
        let t = tokens(80);
        let full = perplexity(&src.quantized, &t, &cfg(4)).unwrap();
        assert_eq!(probe_prefix(&src, 3, &t, &cfg(4)).unwrap(), full);
    }

    #[test]
    fn report_is_independent_of_jobs_and_schema_valid() {
        let m = model();
        let src = ProbeSource::rtn(&m, QuantSpec::weight(4).unwrap(), 4).unwrap();
        let t = tokens(60);
        let a = sensitivity(&src, &t, &cfg(4), 0, 1).unwrap();
        let b = sensitivity(&src, &t, &cfg(4), 0, 3).unwrap();
        assert_eq!(a, b);
        validate_sensitivity_csv(&a.single_csv(), SINGLE_CSV_HEADER, 3).unwrap();
        validate_sensitivity_csv(&a.prefix_csv(), PREFIX_CSV_HEADER, 3).unwrap();
        assert!(validate_sensitivity_csv(&a.prefix_csv(), PREFIX_CSV_HEADER, 2).is_err());
        assert!(validate_sensitivity_csv("method\n", SINGLE_CSV_HEADER, 0).is_err());
    }
}
