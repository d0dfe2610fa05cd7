use crate::error::CliError;
use crate::manifest::{Inputs, Output};
use crate::store::{calibration_file, mounts_of, read_frames, write_frames, Frame, SCENE_PREFIX, SWEEP_PREFIX};
use orpercept_core::calibration::{IcpConfig, TreReport};
use orpercept_core::dataio::{
    decode_checkpoint, encode_checkpoint, encode_pgm, CalibrationFile, RunConfig, TensorData, TensorFile, ValidityFile,
};
use orpercept_core::metrics::{
    compute_metrics, make_kfold_plan, paired_significance, ConfusionMatrix, Experiment, KFoldPlan, MetricsReport,
    SignificanceResult,
};
use orpercept_core::mvpm::{augment, build_stack, FixedMerge, LabelMap, Merger, ProjectedStack, TrainReport};
use orpercept_core::pipeline::{
    crf_labels, detect_sequence, evaluate, run_experiment, run_kfold, sequence_tre, summarize, train_experiment,
    CalibrationJob, CalibrationRun, ExperimentReport, PreparedBenchmark,
};
use orpercept_core::rig::CameraId;
use orpercept_core::simulator::{
    generate_calibration_sequence, make_benchmark, Benchmark, CalibrationFrame, CalibrationSequence, CalibrationSetup,
    JointState, RobotModel, NUM_CLASSES, REFERENCE_SPACING,
};
use orpercept_core::CameraIntrinsics;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FuseMode {
    Max,
    Mean,
    Hourglass,
    Crf,
}

/// Everything a command needs besides its own flags.
pub struct Context {
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub inputs: Inputs,
    pub out: Output,
}

impl Context {
    fn seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("{command} needs --seed")))
    }
}

fn setup(config: &RunConfig) -> CalibrationSetup {
    CalibrationSetup {
        pattern: config.calibration.pattern.clone(),
        clutter: config.scene.clone().unwrap_or_default(),
        ..CalibrationSetup::default()
    }
}

fn states(config: &RunConfig) -> Vec<JointState> {
    config
        .calibration
        .poses
        .iter()
        .map(|p| JointState::new(p[0], p[1], p[2]))
        .collect()
}

fn sweep_intrinsics(config: &RunConfig) -> CameraIntrinsics {
    CameraIntrinsics::tof_default().resized(config.calibration.width, config.calibration.height)
}

fn no_residuals() -> [BTreeMap<String, f64>; 4] {
    Default::default()
}

pub fn simulate(ctx: &mut Context) -> Result<(), CliError> {
    ctx.seed("simulate")?;
    let c = &ctx.config;
    let robot = RobotModel::default();
    let k = sweep_intrinsics(c);
    let seq = generate_calibration_sequence(&setup(c), &robot, &states(c), &k, &c.calibration.noise)?;
    let frames: Vec<Frame> = seq
        .frames
        .into_iter()
        .map(|f| Frame {
            theta: f.state.theta,
            joint_to_base: f.joint_to_base,
            views: f.views,
            confidences: None,
        })
        .collect();
    write_frames(
        &mut ctx.out,
        "calibration",
        SWEEP_PREFIX,
        &frames,
        &calibration_file(&seq.truth, &k, &no_residuals()),
    )?;

    let bench = make_benchmark(&c.benchmark)?;
    let truth = calibration_file(&robot.mounts, &c.benchmark.intrinsics(), &no_residuals());
    let frames: Vec<Frame> = bench
        .scenes
        .into_iter()
        .map(|s| Frame {
            theta: s.state.theta,
            joint_to_base: robot.joint_to_base(&s.state),
            views: s.views,
            confidences: Some(s.confidences),
        })
        .collect();
    write_frames(&mut ctx.out, "benchmark", SCENE_PREFIX, &frames, &truth)
}

/// The sweep under `dir`, with the reference slab model the config
/// describes.
fn load_sweep(ctx: &mut Context, dir: &Path) -> Result<CalibrationSequence, CliError> {
    let (frames, truth) = read_frames(&mut ctx.inputs, dir, SWEEP_PREFIX, None, false)?;
    let (truth, _) = mounts_of(&truth)?;
    Ok(CalibrationSequence {
        frames: frames
            .into_iter()
            .map(|f| {
                let t = f.joint_to_base.translation();
                CalibrationFrame {
                    state: JointState::new(f.theta, t.x, t.y),
                    joint_to_base: f.joint_to_base,
                    views: f.views,
                }
            })
            .collect(),
        truth,
        reference: setup(&ctx.config).reference_cloud(REFERENCE_SPACING),
    })
}

fn residuals(run: &CalibrationRun) -> [BTreeMap<String, f64>; 4] {
    let cal = &run.calibration;
    let mut out = no_residuals();
    for c in CameraId::ALL.into_iter().filter(|c| c.on_joint()) {
        let i = c.index();
        out[i].insert("motion_residual".into(), cal.motion_residual[i]);
        out[i].insert("icp_rms".into(), cal.icp[i].rms);
        out[i].insert("icp_alpha".into(), cal.icp[i].alpha);
    }
    let b = &mut out[CameraId::Base.index()];
    b.insert("chain_rms_translation".into(), cal.base.rms_translation);
    b.insert("chain_rms_rotation".into(), cal.base.rms_rotation);
    out
}

pub fn calibrate(ctx: &mut Context, input: Option<&Path>) -> Result<(), CliError> {
    let seq = match input {
        Some(dir) => load_sweep(ctx, dir)?,
        None => {
            ctx.seed("calibrate without --input")?;
            let c = &ctx.config;
            generate_calibration_sequence(
                &setup(c),
                &RobotModel::default(),
                &states(c),
                &sweep_intrinsics(c),
                &c.calibration.noise,
            )?
        }
    };
    let (setup, robot, states) = (setup(&ctx.config), RobotModel::default(), states(&ctx.config));
    let k = seq
        .frames
        .first()
        .map(|f| f.views[0].intrinsics)
        .unwrap_or_else(|| sweep_intrinsics(&ctx.config));
    let icp = IcpConfig::default();
    let job = CalibrationJob {
        setup: &setup,
        robot: &robot,
        states: &states,
        intrinsics: &k,
        detection: &ctx.config.calibration.detection,
        icp: &icp,
    };
    let run = job.run_on(&seq)?;
    let file = calibration_file(&run.calibration.mounts, &k, &residuals(&run));
    ctx.out.write("calibration.json", file.encode()?.as_bytes())?;
    ctx.out.write_json("report.json", &run)
}

#[derive(Serialize)]
struct TreOutput<'a> {
    calibration: String,
    tre: &'a TreReport,
}

pub fn tre(ctx: &mut Context, input: Option<&Path>, calibration: Option<&Path>) -> Result<(), CliError> {
    match (input, calibration) {
        (Some(dir), Some(cal)) => {
            let file = CalibrationFile::decode(&ctx.inputs.read_string(cal)?)?;
            let (mounts, _) = mounts_of(&file)?;
            let seq = load_sweep(ctx, dir)?;
            let det = detect_sequence(&seq, &ctx.config.calibration.pattern, &ctx.config.calibration.detection);
            let tre = sequence_tre(&seq, &det.observations, &mounts)?;
            ctx.out.write_json(
                "tre.json",
                &TreOutput {
                    calibration: cal.display().to_string(),
                    tre: &tre,
                },
            )
        }
        (None, None) => {
            let seed = ctx.seed("tre (Monte-Carlo)")?;
            let c = &ctx.config;
            let (setup, robot, states, k) = (setup(c), RobotModel::default(), states(c), sweep_intrinsics(c));
            let icp = IcpConfig::default();
            let job = CalibrationJob {
                setup: &setup,
                robot: &robot,
                states: &states,
                intrinsics: &k,
                detection: &c.calibration.detection,
                icp: &icp,
            };
            let summary = job.monte_carlo(&c.calibration.noise, c.calibration.trials, seed)?;
            ctx.out.write_json("tre.json", &summary)
        }
        _ => Err(CliError::Usage(
            "tre takes --input and --calibration together, or neither".into(),
        )),
    }
}

struct LoadedScene {
    index: usize,
    frame: Frame,
}

fn load_scenes(
    ctx: &mut Context,
    dir: &Path,
    scene: Option<usize>,
    calibration: Option<&Path>,
) -> Result<Vec<LoadedScene>, CliError> {
    let file = match calibration {
        Some(p) => Some(CalibrationFile::decode(&ctx.inputs.read_string(p)?)?),
        None => None,
    };
    let (frames, _) = read_frames(&mut ctx.inputs, dir, SCENE_PREFIX, file.as_ref(), true)?;
    if let Some(s) = scene.filter(|&s| s >= frames.len()) {
        return Err(CliError::Usage(format!("--scene {s}: only {} scenes", frames.len())));
    }
    Ok(frames
        .into_iter()
        .enumerate()
        .filter(|(i, _)| scene.is_none_or(|s| s == *i))
        .map(|(index, frame)| LoadedScene { index, frame })
        .collect())
}

fn stack_for(scene: &LoadedScene, target: CameraId) -> Result<ProjectedStack, CliError> {
    let confidences = scene.frame.confidences.as_ref().expect("loaded with confidences");
    let views = scene
        .frame
        .views
        .iter()
        .zip(confidences)
        .map(|(v, c)| Ok((v.camera, augment(c, &v.depth)?, v.view())))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(build_stack(target, &views)?)
}

pub fn project(
    ctx: &mut Context,
    input: &Path,
    scene: Option<usize>,
    calibration: Option<&Path>,
) -> Result<(), CliError> {
    for s in load_scenes(ctx, input, scene, calibration)? {
        for target in CameraId::ALL {
            let stack = stack_for(&s, target)?;
            for (slot, (cam, map)) in stack.order.iter().zip(&stack.slots).enumerate() {
                let stem = format!("scene{:03}_{target}/slot{slot}_{cam}", s.index);
                let t = TensorFile::new(
                    map.width(),
                    map.height(),
                    map.channels(),
                    TensorData::F32(map.data().to_vec()),
                )?;
                let v = ValidityFile {
                    width: map.width(),
                    height: map.height(),
                    valid: map.validity().to_vec(),
                };
                ctx.out.write(&format!("{stem}.orct"), &t.encode()?)?;
                ctx.out.write(&format!("{stem}.valid"), &v.encode()?)?;
            }
        }
    }
    Ok(())
}

pub fn fuse(
    ctx: &mut Context,
    input: &Path,
    mode: FuseMode,
    checkpoint: Option<&Path>,
    scene: Option<usize>,
    calibration: Option<&Path>,
) -> Result<(), CliError> {
    let net = match (mode, checkpoint) {
        (FuseMode::Hourglass, Some(p)) => Some(decode_checkpoint(&ctx.inputs.read(p)?)?),
        (FuseMode::Hourglass, None) => return Err(CliError::Usage("--mode hourglass needs --checkpoint".into())),
        (_, Some(_)) => return Err(CliError::Usage("--checkpoint only applies to --mode hourglass".into())),
        _ => None,
    };
    let scenes = load_scenes(ctx, input, scene, calibration)?;
    let mut conf = ConfusionMatrix::new(NUM_CLASSES);
    for s in &scenes {
        let crf = match mode {
            FuseMode::Crf => Some(crf_labels(
                &s.frame.views,
                s.frame.confidences.as_deref().unwrap_or_default(),
                &ctx.config.crf,
            )?),
            _ => None,
        };
        for target in CameraId::ALL {
            let stack = stack_for(s, target)?;
            let labels: LabelMap = match (mode, &net, &crf) {
                (FuseMode::Max, _, _) => Merger::Fixed(FixedMerge::Max).predict(&stack)?,
                (FuseMode::Mean, _, _) => Merger::Fixed(FixedMerge::Mean).predict(&stack)?,
                (FuseMode::Hourglass, Some(net), _) => Merger::Network(net).predict(&stack)?,
                (FuseMode::Crf, _, Some(crf)) => crf[target.index()].clone(),
                _ => unreachable!("mode inputs checked above"),
            };
            conf.accumulate(
                &s.frame.views[target.index()].labels,
                &labels,
                Some(stack.slots[0].validity()),
            )?;
            ctx.out
                .write(&format!("scene{:03}_{target}_fused.pgm", s.index), &encode_pgm(&labels))?;
        }
    }
    ctx.out.write_json("metrics.json", &compute_metrics(&conf)?)
}

fn plan(ctx: &Context, n: usize, repetitions: usize, seed: u64) -> Result<KFoldPlan, CliError> {
    let e = &ctx.config.experiment;
    Ok(make_kfold_plan(n, e.k, repetitions, e.test_fraction, seed)?)
}

fn prepare(
    bench: &Benchmark,
    config: &RunConfig,
    crf_scenes: Option<Vec<usize>>,
) -> Result<PreparedBenchmark, CliError> {
    let crf = crf_scenes.filter(|_| config.experiment.crf);
    Ok(PreparedBenchmark::new(bench, crf.as_deref().map(|s| (&config.crf, s)))?)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    split: &'a Experiment,
    training: &'a TrainReport,
    test: &'a MetricsReport,
}

pub fn train(ctx: &mut Context) -> Result<(), CliError> {
    let seed = ctx.seed("train")?;
    let bench = make_benchmark(&ctx.config.benchmark)?;
    let data = prepare(&bench, &ctx.config, None)?;
    let plan = plan(ctx, bench.scenes.len(), 1, seed)?;
    let exp = &plan.experiments[0];
    let (net, training) = train_experiment(&data, 0, exp, &ctx.config.train)?;
    let test = evaluate(&data, exp, &Merger::Network(&net))?;
    ctx.out.write("model.orcw", &encode_checkpoint(&net)?)?;
    ctx.out.write_json(
        "training.json",
        &TrainOutput {
            split: exp,
            training: &training,
            test: &test,
        },
    )
}

pub fn benchmark(ctx: &mut Context) -> Result<(), CliError> {
    let seed = ctx.seed("benchmark")?;
    let bench = make_benchmark(&ctx.config.benchmark)?;
    let plan = plan(ctx, bench.scenes.len(), 1, seed)?;
    let exp = &plan.experiments[0];
    let data = prepare(&bench, &ctx.config, Some(exp.test.clone()))?;
    let report = run_experiment(&data, 0, exp, &ctx.config.train, &ctx.config.experiment.ablation_order)?;
    ctx.out.write_json("report.json", &report)
}

fn all_experiments(ctx: &Context, seed: u64, with_crf: bool) -> Result<Vec<ExperimentReport>, CliError> {
    let bench = make_benchmark(&ctx.config.benchmark)?;
    let plan = plan(ctx, bench.scenes.len(), ctx.config.experiment.repetitions, seed)?;
    let tests: Vec<usize> = plan.experiments.iter().flat_map(|e| e.test.iter().copied()).collect();
    let data = prepare(&bench, &ctx.config, with_crf.then_some(tests))?;
    Ok(run_kfold(
        &data,
        &plan,
        &ctx.config.train,
        &ctx.config.experiment.ablation_order,
    )?)
}

pub fn kfold(ctx: &mut Context) -> Result<(), CliError> {
    let seed = ctx.seed("kfold")?;
    let reports = all_experiments(ctx, seed, true)?;
    ctx.out.write_json("experiments.json", &reports)?;
    ctx.out.write_json("summary.json", &summarize(&reports)?)
}

#[derive(Serialize)]
struct AblationOutput {
    removal_order: Vec<CameraId>,
    /// Mean hourglass mIOU with 1..=cameras cameras.
    mean_miou: Vec<f64>,
    /// Per experiment, mIOU with 1..=cameras cameras.
    per_experiment: Vec<Vec<f64>>,
    /// Paired tests of the largest camera count against each smaller one.
    largest_vs: Vec<SignificanceResult>,
}

pub fn ablate(ctx: &mut Context, cameras: usize) -> Result<(), CliError> {
    let seed = ctx.seed("ablate")?;
    let reports = all_experiments(ctx, seed, false)?;
    let per_experiment: Vec<Vec<f64>> = reports.iter().map(|r| r.ablation[..cameras].to_vec()).collect();
    let column = |n: usize| -> Vec<f64> { per_experiment.iter().map(|r| r[n]).collect() };
    let mean_miou = (0..cameras)
        .map(|n| column(n).iter().sum::<f64>() / reports.len() as f64)
        .collect();
    let largest_vs = (0..cameras - 1)
        .map(|n| paired_significance(&column(n), &column(cameras - 1)))
        .collect::<Result<_, _>>()?;
    ctx.out.write_json(
        "ablation.json",
        &AblationOutput {
            removal_order: ctx.config.experiment.ablation_order.clone(),
            mean_miou,
            per_experiment,
            largest_vs,
        },
    )
}

pub fn load_config(inputs: &mut Inputs, path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::from_toml(&inputs.read_string(p)?)?),
        None => Ok(RunConfig::default()),
    }
}
