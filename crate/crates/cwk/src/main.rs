use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clockwork_core::data::{
    generate_procedural_scene, generate_translated_sequence, procedural_source, toy_source_params,
    Orientation, SceneParams, SequenceSpec,
};
use clockwork_core::stagenet::{init_weights, ArchSpec, StageModel};

use cwk::bundle::{read_weight_manifest, save_weights, OpManifest};
use cwk::config::{ExperimentConfig, ScheduleSpec};
use cwk::container::write_sequence;
use cwk::experiment::{build_model, with_thread_pool, Experiment, Model};
use cwk::report;
use cwk::{CwkError, Result};

#[derive(Parser)]
#[command(
    name = "cwk",
    version,
    about = "Clockwork execution of staged segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled sequence directory.
    Generate(GenerateArgs),
    /// Run the configured schedules and write summary, per-frame and JSON reports.
    Run(RunArgs),
    /// Sweep the adaptive threshold, optionally bisecting to a full-frame fraction.
    Sweep(SweepArgs),
    /// Per-stage temporal difference over the configured data.
    Profile(CommonArgs),
    /// Create, export or inspect weight bundles.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Translated,
    Procedural,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Pixels per frame (translated).
    #[arg(long, default_value_t = 4)]
    displacement: usize,
    /// Crop size as HEIGHTxWIDTH (translated) or scene size (procedural).
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Number of moving shapes (procedural).
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    min_speed: Option<usize>,
    #[arg(long)]
    max_speed: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Install the default 0.59/0.18/0.21/0.02 cost model.
    #[arg(long)]
    paper_costs: bool,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Replace the configured schedules, e.g. `pipeline3` or `adaptive:0.25@0`.
    #[arg(long = "schedule")]
    schedules: Vec<ScheduleSpec>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated thresholds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    thetas: Option<Vec<f64>>,
    /// Bisect theta to this full-frame fraction.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Seeded toy weights, without head centring.
    Init {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Save the network an experiment config describes.
    Save {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a bundle's structure.
    Inspect { dir: PathBuf },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Invalid generator parameters are usage errors.
fn invalid(e: clockwork_core::Error) -> CwkError {
    CwkError::usage(e.to_string())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let seq = match a.kind {
        Kind::Translated => {
            let (image, labels) =
                procedural_source(a.seed, &toy_source_params(a.classes)).map_err(invalid)?;
            let (h, w) = a.size.unwrap_or((32, 32));
            let spec = SequenceSpec {
                crop_height: h,
                crop_width: w,
                displacement: a.displacement,
                n_frames: a.frames,
                orientation: Orientation::Auto,
            };
            generate_translated_sequence(&image, &labels, a.classes, &spec).map_err(invalid)?
        }
        Kind::Procedural => {
            let d = SceneParams::toy(a.frames);
            let (height, width) = a.size.unwrap_or((d.height, d.width));
            let params = SceneParams {
                n_classes: a.classes,
                height,
                width,
                n_shapes: a.shapes.unwrap_or(d.n_shapes),
                min_speed: a.min_speed.unwrap_or(d.min_speed),
                max_speed: a.max_speed.unwrap_or(d.max_speed),
                noise: a.noise.unwrap_or(d.noise),
                ..d
            };
            generate_procedural_scene(a.seed, &params).map_err(invalid)?
        }
    };
    let m = write_sequence(&seq, &a.out)?;
    println!(
        "{}: {} frames, {}x{}x{}, {} classes ({})",
        a.out.display(),
        m.n_frames,
        m.channels,
        m.height,
        m.width,
        m.n_classes,
        m.provenance.generator
    );
    Ok(())
}

fn load(common: &CommonArgs) -> Result<(Experiment, PathBuf)> {
    let config = ExperimentConfig::load(&common.config)?;
    let out = common
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("cwk-out").join(&config.name));
    Ok((Experiment::prepare(config, common.paper_costs)?, out))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(a: &RunArgs) -> Result<()> {
    let (mut exp, out) = load(&a.common)?;
    if !a.schedules.is_empty() {
        let n = exp.model.stage_count();
        for s in &a.schedules {
            s.to_schedule()
                .validate(n)
                .map_err(|e| CwkError::usage(format!("schedule {s}: {e}")))?;
        }
        exp.config.schedules = a.schedules.clone();
    }
    let results = exp.run_all()?;
    print!("{}", report::summary_csv(&results));
    print_written(&report::write_run(&out, &exp, &results)?);
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (exp, out) = load(&a.common)?;
    let sweep = &exp.config.sweep;
    let thetas = a.thetas.clone().unwrap_or_else(|| sweep.thetas());
    if thetas.is_empty() || thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CwkError::usage(format!(
            "thetas {thetas:?} must lie in [0, 1]"
        )));
    }
    let target = a.target.or(sweep.target_fraction);
    if let Some(t) = target {
        if !(0.0..=1.0).contains(&t) {
            return Err(CwkError::usage(format!(
                "target fraction {t} outside [0, 1]"
            )));
        }
    }
    let rows = exp.sweep(&thetas, sweep.source_stage)?;
    print!("{}", report::sweep_csv(&rows));
    let bisection = target
        .map(|t| exp.bisect(t, sweep.tolerance, sweep.max_iterations, sweep.source_stage))
        .transpose()?;
    if let Some(b) = &bisection {
        match b.result() {
            Some(r) => println!(
                "bisection: theta {} gives full-frame fraction {} after {} probes",
                r.theta,
                r.full_frame_fraction,
                b.trace.len()
            ),
            None => println!(
                "bisection: infeasible, no theta within {} of {} after {} probes",
                b.tolerance,
                b.target,
                b.trace.len()
            ),
        }
    }
    print_written(&report::write_sweep(&out, &rows, bisection.as_ref())?);
    Ok(())
}

fn profile(a: &CommonArgs) -> Result<()> {
    let (exp, out) = load(a)?;
    let profile = exp.profile()?;
    print!("{}", report::profile_csv(&profile));
    print_written(&report::write_profile(&out, &profile)?);
    Ok(())
}

fn inspect(dir: &Path) -> Result<()> {
    let m = read_weight_manifest(dir)?;
    let seed = m.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    println!(
        "{}: {} stages, {} input channels, {} classes, seed {seed}",
        dir.display(),
        m.stage_count,
        m.input_channels,
        m.n_classes
    );
    for (k, s) in m.stages.iter().enumerate() {
        let ops: Vec<String> = s
            .ops
            .iter()
            .map(|op| match op {
                OpManifest::Conv(c) => format!("conv{:?}/s{}p{}", c.dims, c.stride, c.pad),
                OpManifest::Relu => "relu".into(),
                OpManifest::Maxpool { window, stride } => format!("maxpool{window}/s{stride}"),
            })
            .collect();
        println!(
            "  stage {k} (1/{}): {} -> head {:?}",
            s.downsample_factor,
            ops.join(" "),
            s.score_head.dims
        );
    }
    Ok(())
}

fn weights(cmd: &WeightsCommand) -> Result<()> {
    let (net, out) = match cmd {
        WeightsCommand::Init { seed, classes, out } => (
            init_weights(&ArchSpec::toy(*classes), *seed).map_err(invalid)?,
            out,
        ),
        WeightsCommand::Save { config, out } => {
            let config = ExperimentConfig::load(config)?;
            let Model::Network(net) = build_model(&config.network)? else {
                return Err(CwkError::usage(
                    "the procedural segmenter has no weights to save",
                ));
            };
            (net, out)
        }
        WeightsCommand::Inspect { dir } => return inspect(dir),
    };
    save_weights(&net, out)?;
    inspect(out)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Run(a) => with_thread_pool(|| run(&a))?,
        Command::Sweep(a) => with_thread_pool(|| sweep(&a))?,
        Command::Profile(a) => with_thread_pool(|| profile(&a))?,
        Command::Weights(c) => weights(&c),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
