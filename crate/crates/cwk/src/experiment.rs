//! Experiment execution: model and data preparation, schedule runs,
//! threshold sweeps and temporal profiles.

use std::ops::Range;

use clockwork_core::data::{
    generate_procedural_scene, generate_translated_sequence, procedural_source, toy_source_params,
    LabeledSequence, Orientation, SceneParams, SequenceSpec,
};
use clockwork_core::metrics::{
    boundary_band_mask, fw_iu, mean_iu, restrict_to_mask, temporal_difference_profile,
    ConfusionMatrix, TemporalProfile,
};
use clockwork_core::schedules::{run_schedule, CostModel, RunOptions, RunReport, Schedule};
use clockwork_core::stagenet::{
    center_score_heads, init_weights, make_procedural_segmenter, ArchSpec, ProceduralSegmenter,
    StageModel, StagedNetwork,
};
use clockwork_core::{LabelMap, Tensor, IGNORE_LABEL};
use rayon::prelude::*;

use crate::bundle::load_weights;
use crate::config::{DataSpec, ExperimentConfig, NetworkSpec, ScheduleSpec};
use crate::container::read_sequence;
use crate::error::{CwkError, Result};

/// Seeds of the procedural sources used to centre random score heads.
pub const CALIBRATION_SEEDS: Range<u64> = 100..108;

/// Environment variable capping worker threads (0 or unset = automatic).
pub const THREADS_ENV: &str = "CWK_THREADS";

/// A model the runner can execute.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(StagedNetwork),
    Procedural(ProceduralSegmenter),
}

impl Model {
    fn inner(&self) -> &dyn StageModel {
        match self {
            Model::Network(n) => n,
            Model::Procedural(p) => p,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Model::Network(n) => match n.seed() {
                Some(s) => format!("fcn(seed {s})"),
                None => "fcn".into(),
            },
            Model::Procedural(_) => "procedural".into(),
        }
    }
}

impl StageModel for Model {
    fn stage_count(&self) -> usize {
        self.inner().stage_count()
    }
    fn n_classes(&self) -> usize {
        self.inner().n_classes()
    }
    fn input_channels(&self) -> usize {
        self.inner().input_channels()
    }
    fn downsample_factor(&self, k: usize) -> usize {
        self.inner().downsample_factor(k)
    }
    fn stage_features(&self, k: usize, input: &Tensor) -> clockwork_core::Result<Tensor> {
        self.inner().stage_features(k, input)
    }
    fn stage_score(&self, k: usize, features: &Tensor) -> clockwork_core::Result<Tensor> {
        self.inner().stage_score(k, features)
    }
}

/// Top-left `height x width` crops of the calibration sources.
pub fn calibration_frames(n_classes: usize, height: usize, width: usize) -> Result<Vec<Tensor>> {
    CALIBRATION_SEEDS
        .map(|s| {
            let (frame, _) = procedural_source(s, &toy_source_params(n_classes))?;
            Ok(frame.crop(0, 0, height, width)?)
        })
        .collect()
}

/// Toy FCN from `seed`, optionally with score heads centred on the
/// calibration frames.
pub fn toy_network(seed: u64, n_classes: usize, center: bool) -> Result<StagedNetwork> {
    let net = init_weights(&ArchSpec::toy(n_classes), seed)?;
    if center {
        Ok(center_score_heads(
            &net,
            &calibration_frames(n_classes, 32, 32)?,
        )?)
    } else {
        Ok(net)
    }
}

pub fn build_model(spec: &NetworkSpec) -> Result<Model> {
    let usage = |e: clockwork_core::Error| CwkError::usage(e.to_string());
    Ok(match spec {
        NetworkSpec::Procedural { n_classes, factors } => {
            Model::Procedural(make_procedural_segmenter(*n_classes, factors).map_err(usage)?)
        }
        NetworkSpec::Random {
            seed,
            n_classes,
            center_heads,
        } => Model::Network(toy_network(*seed, *n_classes, *center_heads)?),
        NetworkSpec::Bundle { path } => Model::Network(load_weights(path)?),
    })
}

/// Named sequences of the data source, sorted by name.
pub fn build_sequences(
    spec: &DataSpec,
    n_classes: usize,
) -> Result<Vec<(String, LabeledSequence)>> {
    let usage = |e: clockwork_core::Error| CwkError::usage(e.to_string());
    let mut out = match spec {
        DataSpec::Procedural {
            seeds,
            frames,
            scene,
        } => {
            let d = SceneParams::toy(*frames);
            let params = SceneParams {
                n_classes,
                height: scene.height.unwrap_or(d.height),
                width: scene.width.unwrap_or(d.width),
                n_shapes: scene.n_shapes.unwrap_or(d.n_shapes),
                min_size: scene.min_size.unwrap_or(d.min_size),
                max_size: scene.max_size.unwrap_or(d.max_size),
                min_speed: scene.min_speed.unwrap_or(d.min_speed),
                max_speed: scene.max_speed.unwrap_or(d.max_speed),
                n_frames: *frames,
                noise: scene.noise.unwrap_or(d.noise),
            };
            seeds
                .iter()
                .map(|&s| {
                    Ok((
                        format!("procedural_s{s:04}"),
                        generate_procedural_scene(s, &params).map_err(usage)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataSpec::Translated {
            seeds,
            displacement,
            frames,
            crop,
        } => {
            let spec = SequenceSpec {
                crop_height: crop[0],
                crop_width: crop[1],
                displacement: *displacement,
                n_frames: *frames,
                orientation: Orientation::Auto,
            };
            seeds
                .iter()
                .map(|&s| {
                    let (image, labels) =
                        procedural_source(s, &toy_source_params(n_classes)).map_err(usage)?;
                    let seq = generate_translated_sequence(&image, &labels, n_classes, &spec)
                        .map_err(usage)?;
                    Ok((format!("translated_s{s:04}_d{displacement}"), seq))
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataSpec::Directory { paths } => paths
            .iter()
            .map(|p| {
                let name = p.file_name().map_or_else(
                    || p.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                );
                let seq = read_sequence(p).map_err(|e| CwkError::Sequence {
                    sequence: name.clone(),
                    source: Box::new(e),
                })?;
                if seq.n_classes != n_classes {
                    return Err(CwkError::usage(format!(
                        "sequence {name} has {} classes, network has {n_classes}",
                        seq.n_classes
                    )));
                }
                Ok((name, seq))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    out.sort_by(|a, b| a.0.cmp(&b.0));
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CwkError::usage("sequence names must be unique"));
    }
    Ok(out)
}

/// Model, costs and data, ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub cost: CostModel,
    pub sequences: Vec<(String, LabeledSequence)>,
}

impl Experiment {
    /// `paper_costs` forces the default 0.59/0.18/0.21/0.02 model.
    pub fn prepare(config: ExperimentConfig, paper_costs: bool) -> Result<Self> {
        let model = build_model(&config.network)?;
        let n = model.stage_count();
        let cost = if paper_costs {
            if n != 3 {
                return Err(CwkError::usage(format!(
                    "the default cost model describes 3 stages, network has {n}"
                )));
            }
            CostModel::reference()
        } else {
            match &config.cost_model {
                Some(c) => c.build()?,
                None if n == 3 => CostModel::reference(),
                None => CostModel::uniform(n, 0.02).map_err(|e| CwkError::usage(e.to_string()))?,
            }
        };
        if cost.stage_count() != n {
            return Err(CwkError::usage(format!(
                "cost model has {} stages, network has {n}",
                cost.stage_count()
            )));
        }
        for s in &config.schedules {
            s.to_schedule()
                .validate(n)
                .map_err(|e| CwkError::usage(format!("schedule {s}: {e}")))?;
        }
        let sequences = build_sequences(&config.data, model.n_classes())?;
        Ok(Self {
            config,
            model,
            cost,
            sequences,
        })
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            diff_reference: self.config.adaptive.diff_reference.into(),
            keep_fusion_inputs: false,
        }
    }

    /// Runs one schedule on every sequence, in sequence-name order.
    pub fn run_schedule(&self, schedule: &Schedule) -> Result<Vec<SequenceRun>> {
        let options = self.options();
        let radius = self.config.metrics.band_radius;
        let n_classes = self.model.n_classes();
        self.sequences
            .par_iter()
            .map(|(name, seq)| {
                evaluate(
                    &self.model,
                    seq,
                    schedule,
                    &self.cost,
                    &options,
                    radius,
                    n_classes,
                )
                .map(|r| SequenceRun {
                    sequence: name.clone(),
                    ..r
                })
                .map_err(|e| CwkError::Sequence {
                    sequence: name.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Runs every configured schedule.
    pub fn run_all(&self) -> Result<Vec<ScheduleResult>> {
        self.config
            .schedules
            .iter()
            .map(|s| {
                let runs = self.run_schedule(&s.to_schedule())?;
                Ok(ScheduleResult {
                    schedule: s.clone(),
                    summary: Summary::pool(&runs)?,
                    runs,
                })
            })
            .collect()
    }

    pub fn sweep(&self, thetas: &[f64], source_stage: usize) -> Result<Vec<SweepRow>> {
        thetas
            .iter()
            .map(|&theta| self.sweep_point(theta, source_stage))
            .collect()
    }

    fn sweep_point(&self, theta: f64, source_stage: usize) -> Result<SweepRow> {
        let schedule = Schedule::Adaptive {
            theta,
            source_stage,
        };
        schedule
            .validate(self.model.stage_count())
            .map_err(|e| CwkError::usage(format!("sweep: {e}")))?;
        let runs = self.run_schedule(&schedule)?;
        let s = Summary::pool(&runs)?;
        Ok(SweepRow {
            theta,
            full_frame_fraction: s.full_frame_fraction,
            mean_iu: s.mean_iu,
            fw_iu: s.fw_iu,
            compute_fraction: s.compute_fraction,
        })
    }

    /// Bisects theta so the pooled full-frame fraction lands within
    /// `tolerance` of `target`.
    pub fn bisect(
        &self,
        target: f64,
        tolerance: f64,
        max_iterations: usize,
        source_stage: usize,
    ) -> Result<Bisection> {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut trace = Vec::new();
        for _ in 0..max_iterations {
            let mid = 0.5 * (lo + hi);
            let row = self.sweep_point(mid, source_stage)?;
            let fraction = row.full_frame_fraction;
            trace.push(row);
            if (fraction - target).abs() <= tolerance {
                return Ok(Bisection {
                    target,
                    tolerance,
                    feasible: true,
                    trace,
                });
            }
            // The fraction is nonincreasing in theta.
            if fraction > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Bisection {
            target,
            tolerance,
            feasible: false,
            trace,
        })
    }

    pub fn profile(&self) -> Result<ProfileResult> {
        let per_sequence = self
            .sequences
            .par_iter()
            .map(|(name, seq)| {
                temporal_difference_profile(&self.model, &seq.frames)
                    .map(|p| (name.clone(), p))
                    .map_err(|e| CwkError::Sequence {
                        sequence: name.clone(),
                        source: Box::new(e.into()),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProfileResult {
            stage_count: self.model.stage_count(),
            per_sequence,
        })
    }
}

/// One schedule on one sequence, with accuracy against ground truth.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub sequence: String,
    pub report: RunReport,
    pub confusion: ConfusionMatrix,
    pub band_confusion: ConfusionMatrix,
    /// Mean IU of each frame alone, when defined.
    pub frame_mean_iu: Vec<Option<f64>>,
}

pub fn evaluate<M: StageModel>(
    model: &M,
    seq: &LabeledSequence,
    schedule: &Schedule,
    cost: &CostModel,
    options: &RunOptions,
    band_radius: usize,
    n_classes: usize,
) -> Result<SequenceRun> {
    let report = run_schedule(model, &seq.frames, schedule, cost, options)?;
    let confusion = report.confusion(&seq.labels, n_classes, IGNORE_LABEL)?;
    let banded: Vec<LabelMap> = seq
        .labels
        .iter()
        .map(|gt| restrict_to_mask(gt, &boundary_band_mask(gt, band_radius)?))
        .collect::<clockwork_core::Result<_>>()?;
    let band_confusion = report.confusion(&banded, n_classes, IGNORE_LABEL)?;
    let frame_mean_iu = report
        .labels
        .iter()
        .zip(&seq.labels)
        .map(|(pred, gt)| {
            let mut cm = ConfusionMatrix::new(n_classes);
            cm.accumulate(pred, gt, IGNORE_LABEL)?;
            Ok(mean_iu(&cm).ok())
        })
        .collect::<clockwork_core::Result<_>>()?;
    Ok(SequenceRun {
        sequence: String::new(),
        report,
        confusion,
        band_confusion,
        frame_mean_iu,
    })
}

/// Pooled figures over the sequences of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub frames: usize,
    pub mean_iu: Option<f64>,
    pub fw_iu: Option<f64>,
    pub band_mean_iu: Option<f64>,
    pub band_fw_iu: Option<f64>,
    /// Mean frame cost over all frames.
    pub compute_fraction: f64,
    pub latency: f64,
    pub latency_raw: f64,
    pub comparable_time: f64,
    pub full_frame_fraction: f64,
}

impl Summary {
    pub fn pool(runs: &[SequenceRun]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| CwkError::usage("no sequences"))?;
        let mut cm = ConfusionMatrix::new(first.confusion.n_classes());
        let mut band = ConfusionMatrix::new(first.confusion.n_classes());
        let (mut frames, mut cost, mut full) = (0usize, 0.0f64, 0usize);
        let (mut latency, mut latency_raw, mut comparable_time) = (0.0f64, 0.0f64, 0.0f64);
        for r in runs {
            cm.merge(&r.confusion)?;
            band.merge(&r.band_confusion)?;
            frames += r.report.n_frames();
            cost += r.report.accounting.per_frame.iter().sum::<f64>();
            full += r
                .report
                .executed
                .iter()
                .filter(|e| e[r.report.stage_count - 1])
                .count();
            latency = latency.max(r.report.accounting.latency);
            latency_raw = latency_raw.max(r.report.accounting.latency_raw);
            comparable_time += r.report.accounting.comparable_time / runs.len() as f64;
        }
        Ok(Self {
            frames,
            mean_iu: mean_iu(&cm).ok(),
            fw_iu: fw_iu(&cm).ok(),
            band_mean_iu: mean_iu(&band).ok(),
            band_fw_iu: fw_iu(&band).ok(),
            compute_fraction: cost / frames as f64,
            latency,
            latency_raw,
            comparable_time,
            full_frame_fraction: full as f64 / frames as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleResult {
    pub schedule: ScheduleSpec,
    pub summary: Summary,
    pub runs: Vec<SequenceRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub full_frame_fraction: f64,
    pub mean_iu: Option<f64>,
    pub fw_iu: Option<f64>,
    pub compute_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    pub target: f64,
    pub tolerance: f64,
    pub feasible: bool,
    /// One row per probed theta, in probing order.
    pub trace: Vec<SweepRow>,
}

impl Bisection {
    pub fn result(&self) -> Option<&SweepRow> {
        if self.feasible {
            self.trace.last()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub stage_count: usize,
    pub per_sequence: Vec<(String, TemporalProfile)>,
}

/// Mean and population deviation of every frame pair across sequences:
/// row 0 is the pixel baseline, row `k + 1` is stage `k`.
pub fn profile_table(profile: &ProfileResult) -> Vec<(String, f64, f64, usize)> {
    let mut levels: Vec<(String, Vec<f64>)> = vec![("pixels".into(), Vec::new())];
    levels.extend((0..profile.stage_count).map(|k| (format!("stage{k}"), Vec::new())));
    for (_, p) in &profile.per_sequence {
        levels[0].1.extend(&p.pixels.series);
        for (k, s) in p.stages.iter().enumerate() {
            levels[k + 1].1.extend(&s.series);
        }
    }
    levels
        .into_iter()
        .map(|(name, series)| {
            let n = series.len();
            let stats = clockwork_core::metrics::DifferenceStats::from_series(series);
            (name, stats.mean, stats.stdev, n)
        })
        .collect()
}

/// Runs `f` on a pool sized by `CWK_THREADS`.
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CwkError::usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CwkError::usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn config(schedules: &str, data: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"{{"name": "t", "schedules": {schedules}, "network": {{"kind": "procedural"}}, "data": {data}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn oracle_and_all_ones_agree() {
        let c = config(
            r#"[{"name": "oracle"}, {"name": "fixed_rate", "rates": [1, 1, 1]}]"#,
            r#"{"kind": "procedural", "seeds": [1, 0], "frames": 6}"#,
        );
        let e = Experiment::prepare(c, false).unwrap();
        assert_eq!(e.sequences[0].0, "procedural_s0000");
        let results = e.run_all().unwrap();
        assert_eq!(results[0].summary.mean_iu, results[1].summary.mean_iu);
        assert_eq!(results[0].summary.band_fw_iu, results[1].summary.band_fw_iu);
    }

    #[test]
    fn static_adaptive_runs_one_full_frame() {
        let c = config(
            r#"[{"name": "adaptive", "theta": 0.25}]"#,
            r#"{"kind": "procedural", "seeds": [3], "frames": 8, "scene": {"min_speed": 0, "max_speed": 0, "noise": 0.0}}"#,
        );
        let e = Experiment::prepare(c, false).unwrap();
        let r = e.run_all().unwrap();
        assert_eq!(r[0].summary.full_frame_fraction, 1.0 / 8.0);
    }

    #[test]
    fn bisection_reports_trace() {
        let c = config(
            r#"[{"name": "oracle"}]"#,
            r#"{"kind": "procedural", "seeds": [0, 1], "frames": 12}"#,
        );
        let e = Experiment::prepare(c, false).unwrap();
        let b = e.bisect(0.5, 0.05, 20, 0).unwrap();
        assert!(b.trace.len() <= 20);
        if let Some(r) = b.result() {
            assert!((r.full_frame_fraction - 0.5).abs() <= 0.05);
        }
    }

    #[test]
    fn bad_schedules_are_usage_errors() {
        let c = config(
            r#"[{"name": "pipeline", "k": 4}]"#,
            r#"{"kind": "procedural", "seeds": [0], "frames": 3}"#,
        );
        assert!(matches!(
            Experiment::prepare(c, false),
            Err(CwkError::Usage(_))
        ));
        let t = config(
            r#"[{"name": "oracle"}]"#,
            r#"{"kind": "translated", "seeds": [0], "displacement": 40}"#,
        );
        let err = Experiment::prepare(t, false).err().unwrap();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("at most"), "{err}");
    }

    #[test]
    fn profile_has_pixel_row_plus_stages() {
        let c = config(
            r#"[{"name": "oracle"}]"#,
            r#"{"kind": "translated", "seeds": [0, 1], "displacement": 2}"#,
        );
        let e = Experiment::prepare(c, false).unwrap();
        let table = profile_table(&e.profile().unwrap());
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].3, 10);
    }
}
