//! Comparison methods sharing the calibration machinery.

use serde::{Deserialize, Serialize};

use super::{run_with_objective, CalibConfig, LossLog, Objective, PipelineOutput, QuantizedBlock, QuantizedModel};
use crate::numkit::{Tape, Var};
use crate::schedule::{variant_schedule, Region, ScheduleConfig, ScheduleVariant, StagePlan, WindowSchedule};
use crate::tinymodel::{Block, BlockOps, CalibSet, Linear, Model, NormSite, PlainBlock};
use crate::transforms::{quantized_layer_on_tape, BlockParams, ParamVars, QuantPair, ScaleSite};
use crate::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Round-to-nearest on the original weights, no calibration.
    Rtn,
    /// One block at a time, each linear fitted to its own output.
    Layerwise,
    /// One block at a time, fitted to the block output.
    Blockwise,
    /// Fixed-size sliding windows without the shallow/deep regions.
    Fixed,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Rtn, Self::Layerwise, Self::Blockwise, Self::Fixed];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rtn => "rtn",
            Self::Layerwise => "layerwise",
            Self::Blockwise => "blockwise",
            Self::Fixed => "fixed",
        }
    }
}

fn single_block_schedule(num_layers: usize) -> WindowSchedule {
    let spans: Vec<(Region, usize, usize)> = (0..num_layers).map(|l| (Region::Fssw, l, l)).collect();
    WindowSchedule::from_windows(num_layers, &spans)
}

/// Runs one comparison method. `schedule` supplies the window size and
/// stride for [`BaselineKind::Fixed`]; the shallow/deep settings are ignored.
/// Every method except RTN calibrates with a single full-fraction stage.
pub fn run_baseline(
    kind: BaselineKind,
    model: &Model,
    schedule: &ScheduleConfig,
    calib: &CalibSet,
    cfg: &CalibConfig,
) -> Result<PipelineOutput> {
    let plan = StagePlan::new(1.0)?;
    let layers = model.config.n_layers;
    match kind {
        BaselineKind::Rtn => {
            cfg.validate()?;
            let spec = cfg.weight_spec()?;
            let mut q = QuantizedModel::from_fp(model, spec, cfg.abits);
            q.layers = model
                .blocks
                .iter()
                .map(|b| QuantizedBlock::from_block(b, &spec).map(super::Layer::Quant))
                .collect::<Result<_>>()?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            let params = (0..layers)
                .map(|_| BlockParams::new(&model.config, cfg.lora_rank, &mut rng))
                .collect::<Result<_>>()?;
            Ok(PipelineOutput {
                model: q,
                params,
                log: LossLog::default(),
            })
        }
        BaselineKind::Layerwise => {
            let s = single_block_schedule(layers);
            run_with_objective(model, &s, &plan, calib, cfg, Objective::PerLinear, |_| {})
        }
        BaselineKind::Blockwise => {
            let s = single_block_schedule(layers);
            run_with_objective(model, &s, &plan, calib, cfg, Objective::Window, |_| {})
        }
        BaselineKind::Fixed => {
            let s = variant_schedule(ScheduleVariant::Fixed, schedule)?;
            run_with_objective(model, &s, &plan, calib, cfg, Objective::Window, |_| {})
        }
    }
}

/// Full-precision block forward that, at every linear, also evaluates the
/// transformed quantized branch on the same input and accumulates its squared
/// error against the full-precision output.
pub struct LayerwiseBlock<'a> {
    fp: PlainBlock<'a>,
    block: &'a Block,
    vars: ParamVars,
    quant: QuantPair,
    losses: Vec<Var>,
}

impl<'a> LayerwiseBlock<'a> {
    pub fn new(block: &'a Block, vars: ParamVars, quant: QuantPair) -> Self {
        Self {
            fp: PlainBlock::new(block),
            block,
            vars,
            quant,
            losses: Vec::new(),
        }
    }

    /// Sum of the per-linear errors recorded so far.
    pub fn total_loss(&self, tape: &mut Tape) -> Result<Var> {
        let mut it = self.losses.iter().copied();
        let mut acc = it.next().ok_or_else(|| contract("no linear was evaluated"))?;
        for l in it {
            acc = tape.add(acc, l)?;
        }
        Ok(acc)
    }
}

impl BlockOps for LayerwiseBlock<'_> {
    fn gain(&mut self, tape: &mut Tape, site: NormSite) -> Result<Var> {
        self.fp.gain(tape, site)
    }

    fn linear(&mut self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let w = tape.constant(self.block.weight(lin).clone());
        let y = tape.matmul(x, w)?;
        let site = ScaleSite::of_input(lin);
        let yq = quantized_layer_on_tape(
            tape,
            w,
            x,
            self.vars.log_alpha[site.index()],
            self.vars.a[lin.index()],
            self.vars.b[lin.index()],
            self.quant.weight.as_ref(),
            self.quant.act.as_ref(),
        )?;
        let diff = tape.sub(yq, y)?;
        let sq = tape.mul(diff, diff)?;
        let l = tape.sum(sq)?;
        self.losses.push(l);
        Ok(y)
    }
}
