//! Executors that run a staged model over a frame sequence under one
//! schedule, with analytic cost and latency accounting.
//!
//! All executors are clock FCN configurations driven through
//! [`clockwork_step`]; frame 0 always computes every covered stage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::clockwork::{
    clockwork_step, make_clockfcn_grouped, Clock, ClockworkConfig, ClockworkState, DiffReference,
    Routing, StageGroups, StepInput, StepValue,
};
use crate::error::{invalid, Result};
use crate::metrics::{score_map_distance, ConfusionMatrix};
use crate::stagenet::StageModel;
use crate::tensor::{argmax_channels, Label, LabelMap, Tensor};

/// Tolerance on the cost model's total.
pub const COST_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Oracle,
    /// The first `k` stages on every frame.
    Truncated(usize),
    /// `k` pipelined stage groups, each on a different frame.
    Pipeline(usize),
    /// Stage `k` executes when `t mod rates[k] == 0`.
    FixedRate(Vec<usize>),
    /// Stages deeper than `source_stage` execute when the source stage's
    /// label change strictly exceeds `theta`.
    Adaptive {
        theta: f64,
        source_stage: usize,
    },
}

impl Schedule {
    pub fn exponential() -> Self {
        Schedule::FixedRate(vec![1, 2, 4])
    }

    pub fn alternating() -> Self {
        Schedule::FixedRate(vec![1, 1, 2])
    }

    /// The whole network on even frames, the previous output on odd ones.
    pub fn skip_frame() -> Self {
        Schedule::FixedRate(vec![2, 2, 2])
    }

    /// Short name used in reports: `oracle`, `truncated1`, `pipeline3`,
    /// `fixed_rate[1,2,4]`, `adaptive0.25@0`.
    pub fn name(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = match self {
            Schedule::Oracle => write!(s, "oracle"),
            Schedule::Truncated(k) => write!(s, "truncated{k}"),
            Schedule::Pipeline(k) => write!(s, "pipeline{k}"),
            Schedule::FixedRate(r) => {
                let parts: Vec<String> = r.iter().map(|v| alloc::format!("{v}")).collect();
                write!(s, "fixed_rate[{}]", parts.join(","))
            }
            Schedule::Adaptive {
                theta,
                source_stage,
            } => write!(s, "adaptive{theta}@{source_stage}"),
        };
        s
    }

    pub fn validate(&self, stage_count: usize) -> Result<()> {
        match self {
            Schedule::Oracle => Ok(()),
            Schedule::Truncated(k) if *k >= 1 && *k < stage_count => Ok(()),
            Schedule::Truncated(k) => Err(invalid!("truncation depth {k} must be in 1..{stage_count}")),
            Schedule::Pipeline(k) => self.groups(stage_count).map(|_| ()).map_err(|_| {
                invalid!("a {k}-stage pipeline needs k in {{2, 3}} and a net it can be grouped from, got {stage_count} stages")
            }),
            Schedule::FixedRate(rates) => {
                if rates.len() != stage_count {
                    return Err(invalid!("{} rates for {stage_count} stages", rates.len()));
                }
                if rates.contains(&0) {
                    return Err(invalid!("rates must be >= 1, got {rates:?}"));
                }
                let skip_frame = rates.iter().all(|&r| r == rates[0]);
                if rates[0] != 1 && !skip_frame {
                    return Err(invalid!("the first stage must run every frame, got rates {rates:?}"));
                }
                Ok(())
            }
            Schedule::Adaptive { theta, source_stage } => {
                if !(0.0..=1.0).contains(theta) {
                    return Err(invalid!("theta {theta} outside [0, 1]"));
                }
                if *source_stage + 1 >= stage_count {
                    return Err(invalid!("source stage {source_stage} must precede the deepest stage"));
                }
                Ok(())
            }
        }
    }

    /// Stage groups the schedule runs as modules.
    pub fn groups(&self, stage_count: usize) -> Result<StageGroups> {
        match self {
            Schedule::Truncated(k) => {
                StageGroups::new((0..*k).map(|s| s..s + 1).collect(), stage_count)
            }
            Schedule::Pipeline(k) if !(2..=3).contains(k) => {
                Err(invalid!("pipelines have 2 or 3 stages, got {k}"))
            }
            Schedule::Pipeline(k) if *k == stage_count => Ok(StageGroups::singletons(stage_count)),
            Schedule::Pipeline(2) if stage_count == 3 => Ok(StageGroups::merged_two_stage()),
            Schedule::Pipeline(k) => Err(invalid!(
                "no {k}-stage pipeline for a {stage_count}-stage net"
            )),
            _ => Ok(StageGroups::singletons(stage_count)),
        }
    }
}

/// Per-stage fractions of one full-network evaluation plus the cost of
/// upsampling and fusing; the total is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    stage_cost: Vec<f64>,
    fusion_cost: f64,
}

impl CostModel {
    pub fn new(stage_cost: Vec<f64>, fusion_cost: f64) -> Result<Self> {
        if stage_cost.is_empty() {
            return Err(invalid!("cost model needs at least one stage"));
        }
        if stage_cost
            .iter()
            .chain([&fusion_cost])
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(invalid!("costs must be finite and nonnegative"));
        }
        let total: f64 = stage_cost.iter().sum::<f64>() + fusion_cost;
        if (total - 1.0).abs() > COST_SUM_TOLERANCE {
            return Err(invalid!(
                "stage and fusion costs sum to {total}, expected 1"
            ));
        }
        Ok(Self {
            stage_cost,
            fusion_cost,
        })
    }

    /// Cumulative 0.59 / 0.77 / 1.00 after each stage, with 0.02 of the last
    /// step attributed to fusion.
    pub fn reference() -> Self {
        Self {
            stage_cost: vec![0.59, 0.18, 0.21],
            fusion_cost: 0.02,
        }
    }

    /// Equal stage shares of `1 - fusion_cost`.
    pub fn uniform(stages: usize, fusion_cost: f64) -> Result<Self> {
        if stages == 0 {
            return Err(invalid!("cost model needs at least one stage"));
        }
        Self::new(
            vec![(1.0 - fusion_cost) / stages as f64; stages],
            fusion_cost,
        )
    }

    pub fn stage_cost(&self) -> &[f64] {
        &self.stage_cost
    }

    pub fn fusion_cost(&self) -> f64 {
        self.fusion_cost
    }

    pub fn stage_count(&self) -> usize {
        self.stage_cost.len()
    }

    /// Cost of stages `0..k`.
    pub fn cumulative(&self, k: usize) -> f64 {
        self.stage_cost[..k.min(self.stage_cost.len())].iter().sum()
    }

    /// Summed stage cost of each group.
    pub fn group_costs(&self, groups: &StageGroups) -> Vec<f64> {
        groups
            .ranges()
            .iter()
            .map(|r| self.stage_cost[r.clone()].iter().sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub diff_reference: DiffReference,
    /// Keep every frame's fusion inputs in the report.
    pub keep_fusion_inputs: bool,
}

/// One stage score as it entered fusion, with the frame it reflects.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub stage: usize,
    pub source_frame: usize,
    pub score: Tensor,
}

/// Outcome of one schedule over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub schedule: Schedule,
    pub groups: StageGroups,
    pub stage_count: usize,
    /// Argmax of the fused scores per frame.
    pub labels: Vec<LabelMap>,
    /// `executed[t][k]`: stage `k` computed from new input at frame `t`.
    pub executed: Vec<Vec<bool>>,
    /// Frame each stage's fused score reflects, per frame.
    pub source_frames: Vec<Vec<Option<usize>>>,
    /// Adaptive gating signal per frame (absent on frame 0 and for fixed
    /// schedules).
    pub signals: Vec<Option<f64>>,
    /// Label change of the output against the previous frame.
    pub output_change: Vec<Option<f64>>,
    pub fusion_inputs: Option<Vec<Vec<FusionInput>>>,
    pub accounting: Accounting,
}

impl RunReport {
    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }

    /// Fraction of frames on which the deepest stage executed.
    pub fn full_frame_fraction(&self) -> f64 {
        let deepest = self.stage_count - 1;
        let full = self.executed.iter().filter(|e| e[deepest]).count();
        full as f64 / self.executed.len().max(1) as f64
    }

    /// Executions per stage over the run.
    pub fn execution_counts(&self) -> Vec<usize> {
        (0..self.stage_count)
            .map(|k| self.executed.iter().filter(|e| e[k]).count())
            .collect()
    }

    /// Confusion of the outputs against ground truth.
    pub fn confusion(
        &self,
        gt: &[LabelMap],
        n_classes: usize,
        ignore: Label,
    ) -> Result<ConfusionMatrix> {
        if gt.len() != self.labels.len() {
            return Err(invalid!(
                "{} ground-truth maps for {} frames",
                gt.len(),
                self.labels.len()
            ));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (pred, truth) in self.labels.iter().zip(gt) {
            cm.accumulate(pred, truth, ignore)?;
        }
        Ok(cm)
    }
}

/// Analytic time accounting of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Accounting {
    /// Mean of `per_frame`.
    pub compute_fraction: f64,
    /// Steady-state output latency including fusion.
    pub latency: f64,
    /// Steady-state latency without fusion.
    pub latency_raw: f64,
    /// Figure comparable to a "% of full" time column: the longest group for
    /// pipelines, the kept stages for truncation, 1 for the oracle, and the
    /// mean compute fraction for clocked schedules.
    pub comparable_time: f64,
    /// Executed stage costs plus fusion, per frame.
    pub per_frame: Vec<f64>,
}

/// Recomputes the time accounting of `report` under `cost`.
///
/// Frame cost is the sum of executed stage costs plus the fusion cost;
/// emitting a cached output costs nothing beyond fusion. Sequential
/// schedules report the largest frame cost after the frame-0 warm-up as
/// latency; pipelines report the longest group plus fusion.
pub fn account(report: &RunReport, cost: &CostModel) -> Result<Accounting> {
    if cost.stage_count() != report.stage_count {
        return Err(invalid!(
            "cost model has {} stages, report has {}",
            cost.stage_count(),
            report.stage_count
        ));
    }
    if report.executed.is_empty() {
        return Err(invalid!("report has no frames"));
    }
    let per_frame: Vec<f64> = report
        .executed
        .iter()
        .map(|mask| {
            let stages: f64 = mask
                .iter()
                .zip(cost.stage_cost())
                .filter(|(e, _)| **e)
                .map(|(_, c)| c)
                .sum();
            stages + cost.fusion_cost()
        })
        .collect();
    let compute_fraction = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let fusion = cost.fusion_cost();
    let (latency_raw, comparable_time) = match &report.schedule {
        Schedule::Oracle => (cost.cumulative(report.stage_count), 1.0),
        Schedule::Truncated(k) => (cost.cumulative(*k), cost.cumulative(*k)),
        Schedule::Pipeline(_) => {
            let longest = cost
                .group_costs(&report.groups)
                .into_iter()
                .fold(0.0, f64::max);
            (longest, longest)
        }
        Schedule::FixedRate(_) | Schedule::Adaptive { .. } => {
            let steady = if per_frame.len() > 1 {
                &per_frame[1..]
            } else {
                &per_frame[..]
            };
            (
                steady.iter().copied().fold(0.0, f64::max) - fusion,
                compute_fraction,
            )
        }
    };
    Ok(Accounting {
        compute_fraction,
        latency: latency_raw + fusion,
        latency_raw,
        comparable_time,
        per_frame,
    })
}

fn clocks_for(schedule: &Schedule, stage_count: usize) -> Vec<Clock> {
    match schedule {
        Schedule::Oracle => vec![Clock::Always; stage_count],
        Schedule::Truncated(k) => vec![Clock::Always; *k],
        Schedule::Pipeline(k) => vec![Clock::Always; *k],
        Schedule::FixedRate(rates) => rates.iter().map(|&r| Clock::every(r)).collect(),
        Schedule::Adaptive {
            theta,
            source_stage,
        } => (0..stage_count)
            .map(|k| {
                if k <= *source_stage {
                    Clock::Always
                } else {
                    Clock::Threshold {
                        theta: *theta,
                        source_stage: *source_stage,
                    }
                }
            })
            .collect(),
    }
}

/// Runs `schedule` over `frames`.
pub fn run_schedule<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    schedule: &Schedule,
    cost: &CostModel,
    options: &RunOptions,
) -> Result<RunReport> {
    if frames.is_empty() {
        return Err(invalid!("empty frame sequence"));
    }
    let n_stages = model.stage_count();
    schedule.validate(n_stages)?;
    if cost.stage_count() != n_stages {
        return Err(invalid!(
            "cost model has {} stages, network has {n_stages}",
            cost.stage_count()
        ));
    }
    let groups = schedule.groups(n_stages)?;
    let routing = if matches!(schedule, Schedule::Pipeline(_)) {
        Routing::Pipelined
    } else {
        Routing::Sequential
    };
    let config: ClockworkConfig<'_> = make_clockfcn_grouped(
        model,
        groups.clone(),
        clocks_for(schedule, n_stages),
        routing,
    )?
    .with_diff_reference(options.diff_reference);

    let n = frames.len();
    let mut state = ClockworkState::new(&config);
    let mut labels: Vec<LabelMap> = Vec::with_capacity(n);
    let mut executed = Vec::with_capacity(n);
    let mut source_frames = Vec::with_capacity(n);
    let mut signals = Vec::with_capacity(n);
    let mut output_change = Vec::with_capacity(n);
    let mut fusion_inputs = options.keep_fusion_inputs.then(|| Vec::with_capacity(n));
    for frame in frames {
        let (next, out) = clockwork_step(&config, state, StepInput::Frame(frame))?;
        state = next;
        let StepValue::Fused(Some(fused)) = out.value else {
            return Err(invalid!("frame {} produced no output", out.t));
        };
        let mut mask = vec![false; n_stages];
        let mut sources = vec![None; n_stages];
        for (m, range) in groups.ranges().iter().enumerate() {
            for k in range.clone() {
                mask[k] = out.executed[m];
                sources[k] = state.stage_cache(k).map(|c| match routing {
                    Routing::Pipelined => c.last_update.saturating_sub(m),
                    Routing::Sequential => c.last_update,
                });
            }
        }
        if let Some(keep) = fusion_inputs.as_mut() {
            let inputs: Vec<FusionInput> = (0..groups.covered())
                .filter_map(|k| {
                    state.stage_cache(k).map(|c| FusionInput {
                        stage: k,
                        source_frame: sources[k].unwrap_or(c.last_update),
                        score: c.score.clone(),
                    })
                })
                .collect();
            keep.push(inputs);
        }
        let out_labels = argmax_channels(&fused)?;
        output_change.push(match labels.last() {
            Some(prev) => Some(score_map_distance(&out_labels, prev)?),
            None => None,
        });
        labels.push(out_labels);
        executed.push(mask);
        source_frames.push(sources);
        signals.push(out.signals.iter().flatten().next().copied());
    }
    let mut report = RunReport {
        schedule: schedule.clone(),
        groups,
        stage_count: n_stages,
        labels,
        executed,
        source_frames,
        signals,
        output_change,
        fusion_inputs,
        accounting: Accounting {
            compute_fraction: 0.0,
            latency: 0.0,
            latency_raw: 0.0,
            comparable_time: 0.0,
            per_frame: Vec::new(),
        },
    };
    report.accounting = account(&report, cost)?;
    Ok(report)
}

pub fn run_oracle<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    cost: &CostModel,
) -> Result<RunReport> {
    run_schedule(
        model,
        frames,
        &Schedule::Oracle,
        cost,
        &RunOptions::default(),
    )
}

pub fn run_truncated<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    k: usize,
    cost: &CostModel,
) -> Result<RunReport> {
    run_schedule(
        model,
        frames,
        &Schedule::Truncated(k),
        cost,
        &RunOptions::default(),
    )
}

pub fn run_pipeline<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    k_stages: usize,
    cost: &CostModel,
) -> Result<RunReport> {
    run_schedule(
        model,
        frames,
        &Schedule::Pipeline(k_stages),
        cost,
        &RunOptions::default(),
    )
}

pub fn run_fixed_rate<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    rates: &[usize],
    cost: &CostModel,
) -> Result<RunReport> {
    run_schedule(
        model,
        frames,
        &Schedule::FixedRate(rates.to_vec()),
        cost,
        &RunOptions::default(),
    )
}

pub fn run_adaptive<M: StageModel>(
    model: &M,
    frames: &[Tensor],
    theta: f64,
    source_stage: usize,
    cost: &CostModel,
) -> Result<RunReport> {
    run_schedule(
        model,
        frames,
        &Schedule::Adaptive {
            theta,
            source_stage,
        },
        cost,
        &RunOptions::default(),
    )
}
