//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails. Tolerances are pinned in the constants below.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use clockwork_core::data::{
    generate_procedural_scene, generate_translated_sequence, procedural_source, toy_source_params,
    LabeledSequence, SceneParams, SequenceSpec,
};
use clockwork_core::metrics::{
    accumulate_confusion, fw_iu, mean_iu, temporal_difference_profile, ConfusionMatrix,
};
use clockwork_core::schedules::{run_schedule, CostModel, RunOptions, RunReport, Schedule};
use clockwork_core::stagenet::{
    full_forward, make_procedural_segmenter, ProceduralSegmenter, StageModel,
};
use clockwork_core::tensor::argmax_channels;
use clockwork_core::{LabelMap, IGNORE_LABEL};
use cwk::experiment::toy_network;
use proptest::test_runner::{Config, TestRunner};

const N_CLASSES: usize = 5;
/// Float equality for accounting identities built from exact decimal costs.
const ACCOUNTING_TOL: f64 = 1e-12;
/// The quoted ratio has three decimals.
const RATIO_QUOTED: f64 = 1.475;
const RATIO_TOL: f64 = 5e-4;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_BUDGET: Duration = Duration::from_secs(30);
const C6_BUDGET: Duration = Duration::from_secs(60);
const C8_BUDGET: Duration = Duration::from_secs(60);
const C6_FCN_MIN: usize = 18;
const C8_MIN: usize = 9;
const PROPTEST_CASES: u32 = 100;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seg() -> ProceduralSegmenter {
    make_procedural_segmenter(N_CLASSES, &[2, 4, 8]).unwrap()
}

fn scene(seed: u64, frames: usize) -> LabeledSequence {
    generate_procedural_scene(seed, &SceneParams::toy(frames)).unwrap()
}

fn run<M: StageModel>(
    model: &M,
    seq: &LabeledSequence,
    schedule: Schedule,
    options: &RunOptions,
) -> RunReport {
    run_schedule(
        model,
        &seq.frames,
        &schedule,
        &CostModel::reference(),
        options,
    )
    .unwrap()
}

fn miou<M: StageModel>(model: &M, seq: &LabeledSequence, schedule: Schedule) -> f64 {
    let r = run(model, seq, schedule, &RunOptions::default());
    mean_iu(&r.confusion(&seq.labels, N_CLASSES, IGNORE_LABEL).unwrap()).unwrap()
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn timed(budget: Duration, start: Instant) -> Result<String, String> {
    let elapsed = start.elapsed();
    ensure(elapsed < budget, || {
        format!("took {elapsed:.2?}, budget {budget:?}")
    })?;
    Ok(format!("{elapsed:.2?}"))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let model = seg();
    let mut nonzero = 0;
    for seed in 0..5 {
        let seq = scene(seed, 40);
        let truth: Vec<LabelMap> = seq
            .frames
            .iter()
            .map(|f| argmax_channels(&full_forward(&model, f).unwrap().fused).unwrap())
            .collect();
        let fixed = run(
            &model,
            &seq,
            Schedule::FixedRate(vec![1, 1, 1]),
            &RunOptions::default(),
        );
        ensure(fixed.labels == truth, || {
            format!("fixed_rate[1,1,1] differs on seed {seed}")
        })?;
        for source_stage in 0..2 {
            let adaptive = run(
                &model,
                &seq,
                Schedule::Adaptive {
                    theta: 0.0,
                    source_stage,
                },
                &RunOptions::default(),
            );
            ensure(adaptive.labels == truth, || {
                format!("adaptive theta 0 differs on seed {seed}")
            })?;
            nonzero += adaptive
                .signals
                .iter()
                .flatten()
                .filter(|&&s| s > 0.0)
                .count();
        }
    }
    ensure(nonzero > 0, || "adaptive signals were all zero".into())?;
    Ok(format!(
        "5 sequences x 40 frames bit-exact, {nonzero} nonzero signals, {}",
        timed(C1_BUDGET, start)?
    ))
}

fn pipeline_semantics() -> Outcome {
    let start = Instant::now();
    let model = seg();
    let seq = scene(11, 30);
    let options = RunOptions {
        keep_fusion_inputs: true,
        ..RunOptions::default()
    };
    let report = run(&model, &seq, Schedule::Pipeline(3), &options);
    let inputs = report
        .fusion_inputs
        .as_ref()
        .ok_or("fusion inputs missing")?;
    let brute: Vec<_> = seq
        .frames
        .iter()
        .map(|f| full_forward(&model, f).unwrap())
        .collect();
    let mut checked = 0;
    for (i, frame_inputs) in inputs.iter().enumerate().skip(2) {
        ensure(frame_inputs.len() == 3, || {
            format!("frame {i} fused {} inputs", frame_inputs.len())
        })?;
        for input in frame_inputs {
            let source = i - input.stage;
            ensure(input.source_frame == source, || {
                format!(
                    "frame {i} stage {} reflects frame {}",
                    input.stage, input.source_frame
                )
            })?;
            let expected = &brute[source].stages[input.stage].score;
            let bit_exact = expected.data().iter().map(|v| v.to_bits()).eq(input
                .score
                .data()
                .iter()
                .map(|v| v.to_bits()));
            ensure(expected.dims() == input.score.dims() && bit_exact, || {
                format!(
                    "frame {i} stage {} differs from stage on frame {source}",
                    input.stage
                )
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} steady-state fusion inputs bit-exact, {}",
        timed(C2_BUDGET, start)?
    ))
}

fn cost_accounting() -> Outcome {
    let model = seg();
    let seq = scene(2, 64);
    let p3 = run(&model, &seq, Schedule::Pipeline(3), &RunOptions::default()).accounting;
    let p2 = run(&model, &seq, Schedule::Pipeline(2), &RunOptions::default()).accounting;
    let exp = run(
        &model,
        &seq,
        Schedule::exponential(),
        &RunOptions::default(),
    )
    .accounting;
    let skip = run(&model, &seq, Schedule::skip_frame(), &RunOptions::default()).accounting;
    ensure((p3.comparable_time - 0.59).abs() < ACCOUNTING_TOL, || {
        format!("pipeline3 time {}", p3.comparable_time)
    })?;
    ensure((p2.comparable_time - 0.77).abs() < ACCOUNTING_TOL, || {
        format!("pipeline2 time {}", p2.comparable_time)
    })?;
    let ratio = exp.compute_fraction / skip.compute_fraction;
    ensure(
        (exp.compute_fraction - 0.7525).abs() < ACCOUNTING_TOL,
        || format!("exponential {}", exp.compute_fraction),
    )?;
    ensure(
        (skip.compute_fraction - 0.51).abs() < ACCOUNTING_TOL,
        || format!("skip-frame {}", skip.compute_fraction),
    )?;
    ensure((ratio - 0.7525 / 0.51).abs() < ACCOUNTING_TOL, || {
        format!("ratio {ratio}")
    })?;
    ensure((ratio - RATIO_QUOTED).abs() < RATIO_TOL, || {
        format!("ratio {ratio} vs {RATIO_QUOTED}")
    })?;
    ensure(format!("{ratio:.1}") == "1.5", || {
        format!("ratio {ratio} does not round to 1.5")
    })?;
    Ok(format!(
        "pipeline3 {} pipeline2 {} exponential/skip {ratio:.4}",
        p3.comparable_time, p2.comparable_time
    ))
}

fn execution_counts() -> Outcome {
    let model = seg();
    let seq = scene(3, 64);
    let counts = |s: Schedule| run(&model, &seq, s, &RunOptions::default()).execution_counts();
    let a = counts(Schedule::FixedRate(vec![1, 2, 4]));
    let b = counts(Schedule::FixedRate(vec![1, 1, 2]));
    let skip = run(&model, &seq, Schedule::skip_frame(), &RunOptions::default());
    let full = skip
        .executed
        .iter()
        .filter(|e| e.iter().all(|&x| x))
        .count();
    let idle = skip
        .executed
        .iter()
        .filter(|e| e.iter().all(|&x| !x))
        .count();
    ensure(a == [64, 32, 16], || format!("(1,2,4) gave {a:?}"))?;
    ensure(b == [64, 64, 32], || format!("(1,1,2) gave {b:?}"))?;
    ensure(full == 32 && idle == 32, || {
        format!("skip-frame ran {full} full, {idle} idle")
    })?;
    Ok(format!("{a:?} {b:?} skip-frame {full} full"))
}

fn adaptive_sweep() -> Outcome {
    let model = seg();
    let seqs: Vec<_> = (0..5).map(|s| scene(20 + s, 40)).collect();
    let thetas: Vec<f64> = (0..=10).map(|i| i as f64 * 0.05).collect();
    let mut detail = Vec::new();
    for source_stage in 0..2 {
        let fraction = |theta: f64| {
            let full: f64 = seqs
                .iter()
                .map(|q| {
                    run(
                        &model,
                        q,
                        Schedule::Adaptive {
                            theta,
                            source_stage,
                        },
                        &RunOptions::default(),
                    )
                    .full_frame_fraction()
                })
                .sum();
            full / seqs.len() as f64
        };
        let curve: Vec<f64> = thetas.iter().map(|&t| fraction(t)).collect();
        ensure(nonincreasing(&curve), || {
            format!("source {source_stage}: fraction not monotone {curve:?}")
        })?;
        ensure(curve[0] == 1.0, || {
            format!("source {source_stage}: theta 0 gave {}", curve[0])
        })?;
        for q in &seqs {
            let r = run(
                &model,
                q,
                Schedule::Adaptive {
                    theta: 1.0,
                    source_stage,
                },
                &RunOptions::default(),
            );
            let f = r.full_frame_fraction();
            ensure(f == 1.0 / q.len() as f64, || {
                format!("source {source_stage}: theta 1 gave {f}")
            })?;
            let zero = miou(
                &model,
                q,
                Schedule::Adaptive {
                    theta: 0.0,
                    source_stage,
                },
            );
            let oracle = miou(&model, q, Schedule::Oracle);
            ensure(zero == oracle, || {
                format!("theta 0 mean IU {zero} vs oracle {oracle}")
            })?;
        }
        detail.push(format!(
            "source {source_stage}: {:.3}..{:.3}",
            curve[0],
            curve[curve.len() - 1]
        ));
    }
    Ok(detail.join(", "))
}

fn table1_trend() -> Outcome {
    let start = Instant::now();
    let seqs: Vec<LabeledSequence> = (0..20u64)
        .map(|s| {
            let (image, labels) = procedural_source(s, &toy_source_params(N_CLASSES)).unwrap();
            let d = if s % 2 == 0 { 2 } else { 4 };
            generate_translated_sequence(&image, &labels, N_CLASSES, &SequenceSpec::toy(d)).unwrap()
        })
        .collect();
    let model = seg();
    let procedural = seqs
        .iter()
        .filter(|q| {
            let p = temporal_difference_profile(&model, &q.frames).unwrap();
            nonincreasing(&p.stages.iter().map(|s| s.mean).collect::<Vec<_>>())
        })
        .count();
    let mut fcn = 0;
    for net_seed in 0..20 {
        let net = toy_network(net_seed, N_CLASSES, true).unwrap();
        let mut means = vec![0.0; net.stage_count()];
        for q in &seqs {
            let p = temporal_difference_profile(&net, &q.frames).unwrap();
            for (m, s) in means.iter_mut().zip(&p.stages) {
                *m += s.mean / seqs.len() as f64;
            }
        }
        fcn += nonincreasing(&means) as usize;
    }
    ensure(procedural == 20, || {
        format!("procedural monotone on {procedural}/20")
    })?;
    ensure(fcn >= C6_FCN_MIN, || {
        format!("toy FCN monotone on {fcn}/20 seeds, need {C6_FCN_MIN}")
    })?;
    Ok(format!(
        "procedural {procedural}/20, toy FCN {fcn}/20, {}",
        timed(C6_BUDGET, start)?
    ))
}

fn metric_correctness() -> Outcome {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).map_err(|e| e.to_string())?;
    let (m, f) = (mean_iu(&cm).unwrap(), fw_iu(&cm).unwrap());
    ensure(m == 0.6 && f == 0.6, || format!("mean {m} fw {f}"))?;
    let gt = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let perfect = accumulate_confusion(&gt, &gt, 3, IGNORE_LABEL).unwrap();
    ensure(
        mean_iu(&perfect).unwrap() == 1.0 && fw_iu(&perfect).unwrap() == 1.0,
        || "perfect prediction below 1".into(),
    )?;

    let maps = || {
        use proptest::prelude::*;
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            let v = proptest::collection::vec(0u8..4, h * w);
            (v.clone(), v).prop_map(move |(a, b)| {
                (
                    LabelMap::new(h, w, a).unwrap(),
                    LabelMap::new(h, w, b).unwrap(),
                )
            })
        })
    };
    let config = Config {
        cases: PROPTEST_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(config)
        .run(&(maps(), maps()), |((p1, g1), (p2, g2))| {
            let mut merged = accumulate_confusion(&p1, &g1, 4, IGNORE_LABEL).unwrap();
            merged
                .merge(&accumulate_confusion(&p2, &g2, 4, IGNORE_LABEL).unwrap())
                .unwrap();
            let cat = |a: &LabelMap, b: &LabelMap| {
                let v: Vec<u8> = a.labels().iter().chain(b.labels()).copied().collect();
                LabelMap::new(1, v.len(), v).unwrap()
            };
            let whole =
                accumulate_confusion(&cat(&p1, &p2), &cat(&g1, &g2), 4, IGNORE_LABEL).unwrap();
            proptest::prop_assert_eq!(merged, whole);
            Ok(())
        })
        .map_err(|e| format!("additivity: {e}"))?;
    Ok(format!(
        "0.6/0.6, perfect 1.0, additivity over {PROPTEST_CASES} cases"
    ))
}

fn schedule_ordering() -> Outcome {
    let start = Instant::now();
    let model = seg();
    let (mut three, mut two, mut rates) = (0, 0, 0);
    for seed in 0..10 {
        let seq = scene(seed, 20);
        let m = |s: Schedule| miou(&model, &seq, s);
        let oracle = m(Schedule::Oracle);
        let (p3, t1) = (m(Schedule::Pipeline(3)), m(Schedule::Truncated(1)));
        let (p2, t2) = (m(Schedule::Pipeline(2)), m(Schedule::Truncated(2)));
        three += (oracle >= p3 && p3 >= t1) as usize;
        two += (oracle >= p2 && p2 >= t2) as usize;
        rates += (m(Schedule::alternating()) >= m(Schedule::exponential())) as usize;
    }
    ensure(three >= C8_MIN, || {
        format!("3-stage ordering on {three}/10")
    })?;
    ensure(two >= C8_MIN, || format!("2-stage ordering on {two}/10"))?;
    ensure(rates >= C8_MIN, || {
        format!("alternating >= exponential on {rates}/10")
    })?;
    Ok(format!(
        "3-stage {three}/10, 2-stage {two}/10, alternating>=exponential {rates}/10, {}",
        timed(C8_BUDGET, start)?
    ))
}

fn strip_timestamp(json: &str) -> String {
    json.lines()
        .filter(|l| !l.trim_start().starts_with("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (i, threads) in ["0", "1"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        for cmd in ["run", "sweep", "profile"] {
            let status = Command::new(env!("CARGO_BIN_EXE_cwk"))
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .env("CWK_THREADS", threads)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || {
                format!("cwk {cmd}: {}", String::from_utf8_lossy(&status.stderr))
            })?;
        }
        outputs.push(out);
    }
    let mut compared = 0;
    for name in [
        "summary.csv",
        "frames.csv",
        "sweep.csv",
        "bisection.csv",
        "profile.csv",
        "profile_series.csv",
    ] {
        let a = std::fs::read(outputs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(outputs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(!a.is_empty() && a == b, || {
            format!("{name} differs between runs")
        })?;
        compared += a.len();
    }
    let json =
        |d: &Path| std::fs::read_to_string(d.join("report.json")).map(|s| strip_timestamp(&s));
    ensure(json(&outputs[0]).ok() == json(&outputs[1]).ok(), || {
        "report.json differs beyond its timestamp".into()
    })?;
    Ok(format!(
        "6 CSVs ({compared} bytes) identical, JSON identical up to timestamp"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("pipeline semantics", pipeline_semantics),
        ("cost accounting", cost_accounting),
        ("execution counts", execution_counts),
        ("adaptive monotonicity and endpoints", adaptive_sweep),
        ("per-stage temporal difference trend", table1_trend),
        ("metric correctness", metric_correctness),
        ("schedule accuracy ordering", schedule_ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
