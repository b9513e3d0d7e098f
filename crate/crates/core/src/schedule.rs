//! Inter-layer window schedule (expanding, fixed-size and contracting
//! regions) and the intra-layer stage plan run inside each window.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule config: {constraint} (got {detail})")]
    Config { constraint: &'static str, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Total number of decoder blocks.
    pub num_layers: usize,
    /// Size of the shallow (progressively expanded) region.
    pub shallow: usize,
    /// Size of the deep (progressively contracted) region.
    pub deep: usize,
    /// Fixed-size window length in the intermediate region.
    pub window: usize,
    /// Fixed-size window stride.
    pub stride: usize,
    /// Intra-layer ratio; the window is optimized in `1 / gamma` stages.
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            shallow: 4,
            deep: 4,
            window: 2,
            stride: 1,
            gamma: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn for_layers(num_layers: usize) -> Self {
        Self {
            num_layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let fail = |constraint, detail: String| Err(ScheduleError::Config { constraint, detail });
        if self.shallow < 1 {
            return fail("shallow >= 1", self.shallow.to_string());
        }
        if self.deep < 1 {
            return fail("deep >= 1", self.deep.to_string());
        }
        if self.num_layers < self.shallow + self.deep {
            return fail(
                "num_layers >= shallow + deep",
                format!("{} < {} + {}", self.num_layers, self.shallow, self.deep),
            );
        }
        if self.window < 1 || self.window > self.num_layers {
            return fail("1 <= window <= num_layers", self.window.to_string());
        }
        if self.stride < 1 || self.stride > self.window {
            return fail("1 <= stride <= window", format!("stride {} window {}", self.stride, self.window));
        }
        stage_count(self.gamma).map(|_| ())
    }

    fn middle(&self) -> usize {
        self.num_layers - self.shallow - self.deep
    }
}

fn stage_count(gamma: f64) -> Result<usize, ScheduleError> {
    let bad = || ScheduleError::Config {
        constraint: "0 < gamma <= 1 and 1/gamma integral",
        detail: gamma.to_string(),
    };
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(bad());
    }
    let n = (1.0 / gamma).round();
    if (n * gamma - 1.0).abs() > 1e-9 {
        return Err(bad());
    }
    Ok(n as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Pesw,
    Fssw,
    Pcsw,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pesw => "PESW",
            Self::Fssw => "FSSW",
            Self::Pcsw => "PCSW",
        })
    }
}

/// A contiguous run of layers `start..=end` optimized jointly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub region: Region,
    pub position: usize,
}

impl Window {
    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers().contains(&layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub num_layers: usize,
    pub windows: Vec<Window>,
}

impl WindowSchedule {
    /// Builds a schedule from explicit `(region, start, end)` triples.
    pub fn from_windows(num_layers: usize, spans: &[(Region, usize, usize)]) -> Self {
        let windows = spans
            .iter()
            .enumerate()
            .map(|(position, &(region, start, end))| Window {
                start,
                end,
                region,
                position,
            })
            .collect();
        Self { num_layers, windows }
    }

    /// Number of windows containing each layer.
    pub fn membership_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_layers];
        for w in &self.windows {
            for l in w.layers() {
                if l < self.num_layers {
                    counts[l] += 1;
                }
            }
        }
        counts
    }

    /// For each layer, the position of the last window containing it.
    pub fn last_window_of(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.num_layers];
        for w in &self.windows {
            for l in w.layers() {
                if l < self.num_layers {
                    last[l] = Some(w.position);
                }
            }
        }
        last
    }

    fn renumber(mut self) -> Self {
        for (i, w) in self.windows.iter_mut().enumerate() {
            w.position = i;
        }
        self
    }

    /// Drops single-layer windows whose layer is also covered by another
    /// window.
    fn drop_redundant_singletons(self, which: impl Fn(&Window) -> bool) -> Self {
        let counts = self.membership_counts();
        let windows = self
            .windows
            .into_iter()
            .filter(|w| !(w.len() == 1 && which(w) && counts[w.start] > 1))
            .collect();
        Self {
            num_layers: self.num_layers,
            windows,
        }
        .renumber()
    }

    /// Text dump, one window per line: `region start..end fractions`.
    pub fn to_text(&self, plan: &StagePlan) -> String {
        let fracs = plan
            .fractions
            .iter()
            .map(|f| format!("{f}"))
            .collect::<Vec<_>>()
            .join(",");
        self.windows
            .iter()
            .map(|w| format!("{} {}..{} {}\n", w.region, w.start, w.end, fracs))
            .collect()
    }
}

/// Expanding windows `{0}, {0,1}, ..`, fixed-size windows across the
/// intermediate layers, then contracting windows ending at `{L-1}`.
pub fn generate_schedule(cfg: &ScheduleConfig) -> Result<WindowSchedule, ScheduleError> {
    cfg.validate()?;
    let l = cfg.num_layers;
    let mut spans = Vec::new();
    for end in 0..cfg.shallow {
        spans.push((Region::Pesw, 0, end));
    }
    if cfg.middle() > 0 {
        let s = cfg.window;
        let lo = (cfg.shallow + 1).saturating_sub(s);
        let hi = (l - cfg.deep + s - 2).min(l - 1);
        let mut start = lo;
        let mut last_end = None;
        while start + s - 1 <= hi {
            spans.push((Region::Fssw, start, start + s - 1));
            last_end = Some(start + s - 1);
            start += cfg.stride;
        }
        if last_end != Some(hi) {
            spans.push((Region::Fssw, hi + 1 - s, hi));
        }
    }
    for start in l - cfg.deep..l {
        spans.push((Region::Pcsw, start, l - 1));
    }
    Ok(WindowSchedule::from_windows(l, &spans))
}

/// Schedule families compared by the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    /// Fixed-size windows over every layer.
    Fixed,
    /// Expanding shallow region, then fixed-size windows to the end.
    Expanding,
    /// Fixed-size windows from layer 0, then the contracting deep region.
    Contracting,
    /// Expanding, fixed-size and contracting regions.
    Full,
}

impl ScheduleVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Expanding => "expanding",
            Self::Contracting => "contracting",
            Self::Full => "full",
        }
    }
}

pub fn variant_schedule(variant: ScheduleVariant, cfg: &ScheduleConfig) -> Result<WindowSchedule, ScheduleError> {
    let (shallow, deep) = match variant {
        ScheduleVariant::Fixed => (1, 1),
        ScheduleVariant::Expanding => (cfg.shallow, 1),
        ScheduleVariant::Contracting => (1, cfg.deep),
        ScheduleVariant::Full => (cfg.shallow, cfg.deep),
    };
    let sched = generate_schedule(&ScheduleConfig {
        shallow,
        deep,
        ..cfg.clone()
    })?;
    if variant == ScheduleVariant::Full {
        return Ok(sched);
    }
    let n = cfg.num_layers;
    Ok(sched.drop_redundant_singletons(|w| {
        (shallow == 1 && w.region == Region::Pesw && w.start == 0)
            || (deep == 1 && w.region == Region::Pcsw && w.start == n - 1)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Fraction of output channels quantized in each stage.
    pub fractions: Vec<f64>,
}

impl StagePlan {
    pub fn new(gamma: f64) -> Result<Self, ScheduleError> {
        let n = stage_count(gamma)?;
        let fractions = (1..=n).map(|k| if k == n { 1.0 } else { k as f64 / n as f64 }).collect();
        Ok(Self { fractions })
    }

    pub fn num_stages(&self) -> usize {
        self.fractions.len()
    }
}

/// Stage plan for a window. Every layer of the window follows the same plan.
pub fn stage_plan(_window: &Window, gamma: f64) -> Result<StagePlan, ScheduleError> {
    StagePlan::new(gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn status(&self, name: &str) -> Option<CheckStatus> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.status)
    }
}

/// Checks coverage, contiguity/ordering, anchors, even frequency and the
/// prefix-commit property of `schedule` against `cfg`.
pub fn validate(schedule: &WindowSchedule, cfg: &ScheduleConfig) -> ValidationReport {
    let l = schedule.num_layers;
    let ws = &schedule.windows;
    let mut checks = Vec::new();
    let mut push = |name: &str, status: CheckStatus, detail: String| {
        checks.push(CheckResult {
            name: name.to_string(),
            status,
            detail,
        })
    };
    let pf = |ok: bool| if ok { CheckStatus::Pass } else { CheckStatus::Fail };

    let counts = schedule.membership_counts();
    let missing: Vec<usize> = (0..l).filter(|&i| counts[i] == 0).collect();
    push("coverage", pf(missing.is_empty()), format!("uncovered layers {missing:?}"));

    let bad_range: Vec<usize> = ws
        .iter()
        .filter(|w| w.start > w.end || w.end >= l)
        .map(|w| w.position)
        .collect();
    push("contiguity", pf(bad_range.is_empty()), format!("malformed windows {bad_range:?}"));

    let region_rank = |r: Region| match r {
        Region::Pesw => 0,
        Region::Fssw => 1,
        Region::Pcsw => 2,
    };
    let ordered = ws.windows(2).all(|p| {
        region_rank(p[0].region) <= region_rank(p[1].region) && p[0].start <= p[1].start
    }) && ws.iter().enumerate().all(|(i, w)| w.position == i);
    push("ordering", pf(ordered), "regions PESW, FSSW, PCSW with non-decreasing starts".into());

    let pesw: Vec<&Window> = ws.iter().filter(|w| w.region == Region::Pesw).collect();
    let pcsw: Vec<&Window> = ws.iter().filter(|w| w.region == Region::Pcsw).collect();
    let shallow_ok = pesw.len() == cfg.shallow && pesw.iter().all(|w| w.contains(0));
    push(
        "anchor_first",
        pf(shallow_ok),
        format!("{} expanding windows, expected {} all containing layer 0", pesw.len(), cfg.shallow),
    );
    let deep_ok = l > 0 && pcsw.len() == cfg.deep && pcsw.iter().all(|w| w.contains(l - 1));
    push(
        "anchor_last",
        pf(deep_ok),
        format!("{} contracting windows, expected {} all containing layer L-1", pcsw.len(), cfg.deep),
    );

    let has_middle = ws.iter().any(|w| w.region == Region::Fssw);
    if cfg.window == 2 && cfg.stride == 1 && has_middle && cfg.shallow <= l - cfg.deep + 1 {
        let odd: Vec<usize> = (cfg.shallow - 1..=l - cfg.deep).filter(|&i| counts[i] != cfg.window).collect();
        push("even_frequency", pf(odd.is_empty()), format!("layers off frequency {odd:?}"));
    } else {
        push(
            "even_frequency",
            CheckStatus::NotApplicable,
            "requires window 2, stride 1 and a non-empty fixed-size region".into(),
        );
    }

    let mut violations = Vec::new();
    for (p, w) in ws.iter().enumerate() {
        if let Some(later) = ws[p..].iter().find(|v| v.start < w.start) {
            violations.push((w.position, later.position));
        }
    }
    push(
        "prefix_commit",
        pf(violations.is_empty()),
        format!("(window, later window revisiting earlier layers) {violations:?}"),
    );

    ValidationReport { checks }
}
