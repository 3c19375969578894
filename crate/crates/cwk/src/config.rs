//! Experiment configuration files (JSON).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clockwork_core::clockwork::DiffReference;
use clockwork_core::schedules::{CostModel, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::{CwkError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub schedules: Vec<ScheduleSpec>,
    #[serde(default)]
    pub cost_model: Option<CostSpec>,
    pub network: NetworkSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub adaptive: AdaptiveSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Oracle,
    Truncated {
        k: usize,
    },
    Pipeline {
        k: usize,
    },
    FixedRate {
        rates: Vec<usize>,
    },
    Exponential,
    Alternating,
    SkipFrame,
    Adaptive {
        theta: f64,
        #[serde(default)]
        source_stage: usize,
    },
}

impl ScheduleSpec {
    pub fn to_schedule(&self) -> Schedule {
        match self {
            ScheduleSpec::Oracle => Schedule::Oracle,
            ScheduleSpec::Truncated { k } => Schedule::Truncated(*k),
            ScheduleSpec::Pipeline { k } => Schedule::Pipeline(*k),
            ScheduleSpec::FixedRate { rates } => Schedule::FixedRate(rates.clone()),
            ScheduleSpec::Exponential => Schedule::exponential(),
            ScheduleSpec::Alternating => Schedule::alternating(),
            ScheduleSpec::SkipFrame => Schedule::skip_frame(),
            ScheduleSpec::Adaptive {
                theta,
                source_stage,
            } => Schedule::Adaptive {
                theta: *theta,
                source_stage: *source_stage,
            },
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_schedule().name())
    }
}

/// Accepts `oracle`, `truncatedK`, `pipelineK`, `exponential`,
/// `alternating`, `skip_frame`, `fixed_rate:1,2,4`, `adaptive:THETA` and
/// `adaptive:THETA@STAGE`.
impl FromStr for ScheduleSpec {
    type Err = CwkError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CwkError::usage(format!("unknown schedule {s:?}"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(match s {
            "oracle" => ScheduleSpec::Oracle,
            "exponential" => ScheduleSpec::Exponential,
            "alternating" => ScheduleSpec::Alternating,
            "skip_frame" => ScheduleSpec::SkipFrame,
            _ if s.starts_with("truncated") => ScheduleSpec::Truncated {
                k: num(&s["truncated".len()..])?,
            },
            _ if s.starts_with("pipeline") => ScheduleSpec::Pipeline {
                k: num(&s["pipeline".len()..])?,
            },
            _ if s.starts_with("fixed_rate:") => ScheduleSpec::FixedRate {
                rates: s["fixed_rate:".len()..]
                    .split(',')
                    .map(num)
                    .collect::<Result<_>>()?,
            },
            _ if s.starts_with("adaptive:") => {
                let rest = &s["adaptive:".len()..];
                let (theta, stage) = rest.split_once('@').unwrap_or((rest, "0"));
                ScheduleSpec::Adaptive {
                    theta: theta.parse().map_err(|_| bad())?,
                    source_stage: num(stage)?,
                }
            }
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub stage_cost: Vec<f64>,
    pub fusion_cost: f64,
}

impl CostSpec {
    pub fn build(&self) -> Result<CostModel> {
        CostModel::new(self.stage_cost.clone(), self.fusion_cost)
            .map_err(|e| CwkError::usage(e.to_string()))
    }
}

fn default_classes() -> usize {
    5
}

fn default_factors() -> Vec<usize> {
    vec![2, 4, 8]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Procedural {
        #[serde(default = "default_classes")]
        n_classes: usize,
        #[serde(default = "default_factors")]
        factors: Vec<usize>,
    },
    /// Toy FCN with seeded random weights.
    Random {
        seed: u64,
        #[serde(default = "default_classes")]
        n_classes: usize,
        #[serde(default = "yes")]
        center_heads: bool,
    },
    Bundle {
        path: PathBuf,
    },
}

fn default_frames() -> usize {
    6
}

fn default_crop() -> [usize; 2] {
    [32, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Procedural {
        seeds: Vec<u64>,
        frames: usize,
        #[serde(default)]
        scene: SceneOverrides,
    },
    /// Crops slid across static procedural sources.
    Translated {
        seeds: Vec<u64>,
        displacement: usize,
        #[serde(default = "default_frames")]
        frames: usize,
        #[serde(default = "default_crop")]
        crop: [usize; 2],
    },
    Directory {
        paths: Vec<PathBuf>,
    },
}

/// Optional replacements for the toy scene defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneOverrides {
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub n_shapes: Option<usize>,
    pub min_size: Option<usize>,
    pub max_size: Option<usize>,
    pub min_speed: Option<usize>,
    pub max_speed: Option<usize>,
    pub noise: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffReferenceSpec {
    #[default]
    PreviousFrame,
    LastUpdate,
}

impl From<DiffReferenceSpec> for DiffReference {
    fn from(s: DiffReferenceSpec) -> Self {
        match s {
            DiffReferenceSpec::PreviousFrame => DiffReference::PreviousFrame,
            DiffReferenceSpec::LastUpdate => DiffReference::LastUpdate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    #[serde(default)]
    pub diff_reference: DiffReferenceSpec,
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_iterations() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub thetas: Option<Vec<f64>>,
    #[serde(default)]
    pub source_stage: usize,
    #[serde(default)]
    pub target_fraction: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            thetas: None,
            source_stage: 0,
            target_fraction: None,
            tolerance: default_tolerance(),
            max_iterations: default_iterations(),
        }
    }
}

/// `0, 0.05, ..., 0.5`.
pub fn default_thetas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 20.0).collect()
}

impl SweepSpec {
    pub fn thetas(&self) -> Vec<f64> {
        self.thetas.clone().unwrap_or_else(default_thetas)
    }
}

fn default_radius() -> usize {
    clockwork_core::metrics::DEFAULT_BAND_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_radius")]
    pub band_radius: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            band_radius: default_radius(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CwkError::usage(format!("{}: {e}", path.display())))?;
        let mut config =
            Self::parse(&text).map_err(|e| CwkError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| CwkError::usage(format!("invalid experiment config: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let NetworkSpec::Bundle { path } = &mut self.network {
            fix(path);
        }
        if let DataSpec::Directory { paths } = &mut self.data {
            paths.iter_mut().for_each(fix);
        }
        if let Some(dir) = &mut self.output.dir {
            fix(dir);
        }
    }

    /// Checks what can be checked without loading the network: paths exist,
    /// ranges hold, lists are non-empty.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CwkError::usage(m));
        if self.schedules.is_empty() {
            return fail("at least one schedule is required".into());
        }
        for s in &self.schedules {
            if let ScheduleSpec::Adaptive { theta, .. } = s {
                if !(0.0..=1.0).contains(theta) {
                    return fail(format!("adaptive theta {theta} outside [0, 1]"));
                }
            }
        }
        if let NetworkSpec::Bundle { path } = &self.network {
            if !path.join(crate::bundle::MANIFEST).is_file() {
                return fail(format!("weight bundle {} has no manifest", path.display()));
            }
        }
        match &self.data {
            DataSpec::Procedural { seeds, frames, .. }
            | DataSpec::Translated { seeds, frames, .. } => {
                if seeds.is_empty() {
                    return fail("data needs at least one seed".into());
                }
                if *frames == 0 {
                    return fail("data needs at least one frame".into());
                }
            }
            DataSpec::Directory { paths } => {
                if paths.is_empty() {
                    return fail("data needs at least one directory".into());
                }
                if let Some(p) = paths
                    .iter()
                    .find(|p| !p.join(crate::container::MANIFEST).is_file())
                {
                    return fail(format!(
                        "sequence directory {} has no manifest",
                        p.display()
                    ));
                }
            }
        }
        if let Some(thetas) = &self.sweep.thetas {
            if thetas.is_empty() || thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return fail(format!(
                    "sweep thetas {thetas:?} must be a non-empty list in [0, 1]"
                ));
            }
        }
        if let Some(f) = self.sweep.target_fraction {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("target fraction {f} outside [0, 1]"));
            }
        }
        if !(self.sweep.tolerance >= 0.0) || self.sweep.max_iterations == 0 {
            return fail(
                "bisection needs a nonnegative tolerance and at least one iteration".into(),
            );
        }
        if let Some(c) = &self.cost_model {
            c.build()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "schedules": [{"name": "oracle"}, {"name": "fixed_rate", "rates": [1, 2, 4]}, {"name": "adaptive", "theta": 0.25}],
        "network": {"kind": "procedural"},
        "data": {"kind": "procedural", "seeds": [0, 1], "frames": 10}
    }"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(
            c.schedules[2],
            ScheduleSpec::Adaptive {
                theta: 0.25,
                source_stage: 0
            }
        );
        assert_eq!(
            c.network,
            NetworkSpec::Procedural {
                n_classes: 5,
                factors: vec![2, 4, 8]
            }
        );
        assert_eq!(c.metrics.band_radius, 10);
        assert_eq!(c.sweep.thetas().len(), 11);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_ranges() {
        assert!(
            ExperimentConfig::parse(&MINIMAL.replace("\"name\": \"t\"", "\"nam\": \"t\"")).is_err()
        );
        let bad = ExperimentConfig::parse(&MINIMAL.replace("0.25", "1.5")).unwrap();
        assert!(matches!(bad.validate(), Err(CwkError::Usage(_))));
        let missing = ExperimentConfig::parse(&MINIMAL.replace(
            r#"{"kind": "procedural"}"#,
            r#"{"kind": "bundle", "path": "/nonexistent"}"#,
        ))
        .unwrap();
        assert!(missing.validate().is_err());
    }

    #[test]
    fn schedule_strings() {
        assert_eq!(
            "pipeline3".parse::<ScheduleSpec>().unwrap(),
            ScheduleSpec::Pipeline { k: 3 }
        );
        assert_eq!(
            "fixed_rate:1,1,2".parse::<ScheduleSpec>().unwrap(),
            ScheduleSpec::FixedRate {
                rates: vec![1, 1, 2]
            }
        );
        assert_eq!(
            "adaptive:0.1@1".parse::<ScheduleSpec>().unwrap(),
            ScheduleSpec::Adaptive {
                theta: 0.1,
                source_stage: 1
            }
        );
        assert!("warp9".parse::<ScheduleSpec>().is_err());
        assert_eq!(ScheduleSpec::Exponential.to_string(), "fixed_rate[1,2,4]");
    }
}
