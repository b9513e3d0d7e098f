//! The schedule ablation grid: fixed windows, each region added on its own,
//! both, and both with intra-layer stages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{run_variant, CalibConfig, LossLog};
use crate::evalprobe::{perplexity, EvalConfig};
use crate::schedule::{ScheduleConfig, ScheduleVariant};
use crate::tinymodel::{CalibSet, Model};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCell {
    Baseline,
    Pesw,
    Pcsw,
    Both,
    BothIntra,
}

impl AblationCell {
    pub const ALL: [AblationCell; 5] = [Self::Baseline, Self::Pesw, Self::Pcsw, Self::Both, Self::BothIntra];

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Pesw => "+PESW",
            Self::Pcsw => "+PCSW",
            Self::Both => "+both",
            Self::BothIntra => "+both+Intra",
        }
    }

    /// File-name friendly label.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Pesw => "pesw",
            Self::Pcsw => "pcsw",
            Self::Both => "both",
            Self::BothIntra => "both_intra",
        }
    }

    pub fn variant(self) -> ScheduleVariant {
        match self {
            Self::Baseline => ScheduleVariant::Fixed,
            Self::Pesw => ScheduleVariant::Expanding,
            Self::Pcsw => ScheduleVariant::Contracting,
            Self::Both | Self::BothIntra => ScheduleVariant::Full,
        }
    }

    /// Cells without intra-layer sliding run a single full stage.
    pub fn gamma(self, schedule: &ScheduleConfig) -> f64 {
        if self == Self::BothIntra {
            schedule.gamma
        } else {
            1.0
        }
    }

    pub fn uses_pesw(self) -> bool {
        matches!(self, Self::Pesw | Self::Both | Self::BothIntra)
    }

    pub fn uses_pcsw(self) -> bool {
        matches!(self, Self::Pcsw | Self::Both | Self::BothIntra)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub ppl: f64,
    pub windows: usize,
    pub log: LossLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub wbits: u8,
    pub abits: u8,
    pub seed: u64,
    pub cells: Vec<CellResult>,
}

pub const ABLATION_CSV_HEADER: &str = "cell,pesw,pcsw,intra,windows,wbits,abits,seed,ppl";

impl AblationReport {
    pub fn cell(&self, cell: AblationCell) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == cell)
    }

    /// Whether the full method has the lowest perplexity of the grid. `None`
    /// if that cell was not run.
    pub fn intra_is_minimum(&self) -> Option<bool> {
        let best = self.cell(AblationCell::BothIntra)?.ppl;
        Some(self.cells.iter().all(|c| c.ppl >= best))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.cell.label(),
                c.cell.uses_pesw() as u8,
                c.cell.uses_pcsw() as u8,
                (c.cell == AblationCell::BothIntra) as u8,
                c.windows,
                self.wbits,
                self.abits,
                self.seed,
                c.ppl
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("W{}A{}, seed {}\n\n", self.wbits, self.abits, self.seed);
        out.push_str("| cell | PESW | PCSW | Intra | windows | PPL |\n|---|:-:|:-:|:-:|--:|--:|\n");
        let mark = |b: bool| if b { "x" } else { "" };
        for c in &self.cells {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {:.3} |",
                c.cell.label(),
                mark(c.cell.uses_pesw()),
                mark(c.cell.uses_pcsw()),
                mark(c.cell == AblationCell::BothIntra),
                c.windows,
                c.ppl
            );
        }
        if self.intra_is_minimum() == Some(false) {
            out.push_str("\nFLAG: +both+Intra is not the minimum of the grid; see the per-window loss logs.\n");
        }
        out
    }
}

pub fn run_cell(
    cell: AblationCell,
    model: &Model,
    schedule: &ScheduleConfig,
    calib: &CalibSet,
    cfg: &CalibConfig,
    eval_tokens: &[usize],
    eval: &EvalConfig,
) -> Result<CellResult> {
    let mut windows = 0;
    let out = run_variant(model, schedule, cell.variant(), cell.gamma(schedule), calib, cfg, |_| windows += 1)?;
    Ok(CellResult {
        cell,
        ppl: perplexity(&out.model, eval_tokens, eval)?,
        windows,
        log: out.log,
    })
}

/// Runs `cells` over `jobs` threads. The report lists cells in the order
/// given, independent of `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    cells: &[AblationCell],
    model: &Model,
    schedule: &ScheduleConfig,
    calib: &CalibSet,
    cfg: &CalibConfig,
    eval_tokens: &[usize],
    eval: &EvalConfig,
    jobs: usize,
) -> Result<AblationReport> {
    let run = |c: AblationCell| run_cell(c, model, schedule, calib, cfg, eval_tokens, eval);
    let jobs = jobs.clamp(1, cells.len().max(1));
    let results: Vec<Result<CellResult>> = if jobs == 1 {
        cells.iter().map(|&c| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<CellResult>>> = (0..cells.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let run = &run;
                    scope.spawn(move || {
                        (j..cells.len())
                            .step_by(jobs)
                            .map(|i| (i, run(cells[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("ablation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every cell ran")).collect()
    };
    Ok(AblationReport {
        wbits: cfg.wbits,
        abits: cfg.abits,
        seed: cfg.seed,
        cells: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::variant_schedule;

    #[test]
    fn cells_map_to_variants() {
        let s = ScheduleConfig::default();
        let lens: Vec<usize> = AblationCell::ALL
            .iter()
            .map(|c| variant_schedule(c.variant(), &s).unwrap().windows.len())
            .collect();
        assert_eq!(lens[3], 13);
        assert_eq!(lens[3], lens[4]);
        assert_eq!(AblationCell::BothIntra.gamma(&s), 0.5);
        assert_eq!(AblationCell::Both.gamma(&s), 1.0);
    }

    #[test]
    fn report_tables() {
        let r = AblationReport {
            wbits: 4,
            abits: 4,
            seed: 0,
            cells: vec![
                CellResult {
                    cell: AblationCell::Baseline,
                    ppl: 5.0,
                    windows: 11,
                    log: LossLog::default(),
                },
                CellResult {
                    cell: AblationCell::BothIntra,
                    ppl: 5.5,
                    windows: 13,
                    log: LossLog::default(),
                },
            ],
        };
        assert_eq!(r.intra_is_minimum(), Some(false));
        assert!(r.to_markdown().contains("FLAG"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "+both+Intra,1,1,1,13,4,4,0,5.5");
    }
}
