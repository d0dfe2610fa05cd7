//! End-to-end runs on simulator data: rig calibration, Monte-Carlo TRE,
//! and the k-fold benchmark comparison with its camera-count ablation.

use crate::calibration::{
    compute_tre, icp_refine, make_motion_pairs, solve_base_camera, solve_hand_eye, BaseCameraSolution,
    CalibrationError, IcpConfig, IcpResult, PairingMode, PoseObservation, TreReport, TreView,
};
use crate::crf::{fuse_views, CrfError, CrfParams, FilterBackend, FusionInput};
use crate::fiducials::{detect_fixture, DetectionConfig, FiducialError, FiducialPattern, FixtureObservation};
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform, Vec3};
use crate::metrics::{
    compute_metrics, paired_significance, ConfusionMatrix, Experiment, KFoldPlan, MetricsError, MetricsReport,
    SignificanceResult,
};
use crate::mvpm::{
    predict, train_merge, ConfidenceMap, FixedMerge, LabelMap, MergeNetwork, Merger, MvpmError, ProjectedStack, Sample,
    TrainConfig, TrainReport,
};
use crate::rig::CameraId;
use crate::rng::mix;
use crate::simulator::{
    generate_calibration_sequence, Benchmark, CalibrationSequence, CalibrationSetup, JointState, NoiseModel,
    RenderedView, RobotModel, SimError, CLASS_VSC, NUM_CLASSES,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("camera {camera}: {source}")]
    Calibration { camera: CameraId, source: CalibrationError },
    #[error("camera {0} sees no reference points")]
    NoReference(CameraId),
    #[error(transparent)]
    Tre(#[from] CalibrationError),
    #[error(transparent)]
    Mvpm(#[from] MvpmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Crf(#[from] CrfError),
}

/// Joint cameras map into the joint frame, BASE into the robot base frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigCalibration {
    pub mounts: [RigidTransform; 4],
    /// Mean AX=XB residual per joint camera.
    pub motion_residual: [f64; 3],
    pub icp: [IcpResult; 3],
    pub base: BaseCameraSolution,
    pub rejected_pairs: usize,
}

impl RigCalibration {
    pub fn camera_to_base(&self, camera: CameraId, joint_to_base: &RigidTransform) -> RigidTransform {
        camera_to_base(&self.mounts, camera, joint_to_base)
    }
}

/// Camera pose in the base frame from mounts in canonical order.
pub fn camera_to_base(
    mounts: &[RigidTransform; 4],
    camera: CameraId,
    joint_to_base: &RigidTransform,
) -> RigidTransform {
    let m = mounts[camera.index()];
    if camera.on_joint() {
        *joint_to_base * m
    } else {
        m
    }
}

/// Fixture detections indexed `[frame][camera]`; a view where detection
/// fails is `None` and its error is kept in `failures`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDetections {
    pub observations: Vec<[Option<FixtureObservation>; 4]>,
    pub failures: Vec<(usize, CameraId, FiducialError)>,
}

pub fn detect_sequence(
    seq: &CalibrationSequence,
    pattern: &FiducialPattern,
    config: &DetectionConfig,
) -> SequenceDetections {
    let per_frame: Vec<Vec<Result<FixtureObservation, FiducialError>>> = seq
        .frames
        .par_iter()
        .map(|frame| {
            frame
                .views
                .iter()
                .map(|v| detect_fixture(&v.cloud().0, pattern, config))
                .collect()
        })
        .collect();
    let mut failures = Vec::new();
    let observations = per_frame
        .into_iter()
        .enumerate()
        .map(|(pose, views)| {
            let mut out: [Option<FixtureObservation>; 4] = Default::default();
            for (c, r) in views.into_iter().enumerate() {
                match r {
                    Ok(o) => out[c] = Some(o),
                    Err(e) => failures.push((pose, CameraId::ALL[c], e)),
                }
            }
            out
        })
        .collect();
    SequenceDetections { observations, failures }
}

/// Hand-eye solve with the axial offset resolved by ICP against the
/// reference slab, per joint camera; then the BASE camera through OP.
pub fn calibrate_rig(
    seq: &CalibrationSequence,
    observations: &[[Option<FixtureObservation>; 4]],
    icp: &IcpConfig,
) -> Result<RigCalibration, PipelineError> {
    let n_z = Vec3::z();
    let first = seq
        .frames
        .first()
        .ok_or(SimError::Config("empty calibration sequence".into()))?;
    let reference_joint = transform_cloud(&seq.reference, &first.joint_to_base.inverse());
    let mut mounts = seq.truth.map(|_| RigidTransform::identity());
    let mut motion_residual = [0.0; 3];
    let mut icp_results = Vec::with_capacity(3);
    let mut rejected_pairs = 0;
    let mut op_obs = Vec::new();
    for camera in CameraId::ALL.into_iter().filter(|c| c.on_joint()) {
        let c = camera.index();
        let fail = |source| PipelineError::Calibration { camera, source };
        let obs: Vec<PoseObservation> = seq
            .frames
            .iter()
            .zip(observations)
            .filter_map(|(f, o)| {
                o[c].as_ref().map(|o| PoseObservation {
                    joint_to_base: f.joint_to_base,
                    fixture_to_camera: o.fixture_to_camera,
                })
            })
            .collect();
        let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).map_err(fail)?;
        rejected_pairs += pairs.rejected.len();
        let he = solve_hand_eye(&pairs.pairs, &n_z).map_err(fail)?;
        let slab = first.views[c].cloud().0.with_label(u16::from(CLASS_VSC));
        if slab.is_empty() {
            return Err(PipelineError::NoReference(camera));
        }
        let refined = icp_refine(&slab, &reference_joint, &he.transform_with(0.0), &n_z, icp).map_err(fail)?;
        mounts[c] = he.transform_with(refined.alpha);
        motion_residual[c] = he.residual;
        icp_results.push(refined);
    }
    let (op, base_cam) = (CameraId::Op.index(), CameraId::Base.index());
    let mut base_obs = Vec::new();
    for (f, o) in seq.frames.iter().zip(observations) {
        if let (Some(a), Some(b)) = (&o[op], &o[base_cam]) {
            op_obs.push(PoseObservation {
                joint_to_base: f.joint_to_base,
                fixture_to_camera: a.fixture_to_camera,
            });
            base_obs.push(b.fixture_to_camera);
        }
    }
    let base = solve_base_camera(&op_obs, &base_obs, &mounts[CameraId::Op.index()]).map_err(|source| {
        PipelineError::Calibration {
            camera: CameraId::Base,
            source,
        }
    })?;
    mounts[CameraId::Base.index()] = base.camera_to_base;
    Ok(RigCalibration {
        mounts,
        motion_residual,
        icp: icp_results.try_into().expect("three joint cameras"),
        base,
        rejected_pairs,
    })
}

fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.transform_point(p)).collect(),
        labels: cloud.labels.clone(),
        intensity: cloud.intensity.clone(),
    }
}

/// Rotation (rad) and translation (m) error of each mount against truth.
pub fn mount_errors(calib: &RigCalibration, truth: &[RigidTransform; 4]) -> [(f64, f64); 4] {
    std::array::from_fn(|i| calib.mounts[i].distance_to(&truth[i]))
}

/// TRE of `mounts` over the sequence's own fixture observations.
pub fn sequence_tre(
    seq: &CalibrationSequence,
    observations: &[[Option<FixtureObservation>; 4]],
    mounts: &[RigidTransform; 4],
) -> Result<TreReport, PipelineError> {
    let frames: Vec<Vec<TreView>> = seq
        .frames
        .iter()
        .zip(observations)
        .map(|(f, obs)| {
            CameraId::ALL
                .iter()
                .map(|&cam| TreView {
                    camera: cam.index(),
                    camera_to_base: camera_to_base(mounts, cam, &f.joint_to_base),
                    observation: obs[cam.index()].clone(),
                })
                .collect()
        })
        .collect();
    Ok(compute_tre(&frames)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRun {
    pub calibration: RigCalibration,
    pub tre: TreReport,
    /// `(rotation rad, translation m)` per camera against the simulator truth.
    pub errors: [(f64, f64); 4],
    /// `(pose, camera, reason)` of every view without a usable detection.
    pub missed: Vec<(usize, CameraId, String)>,
}

pub struct CalibrationJob<'a> {
    pub setup: &'a CalibrationSetup,
    pub robot: &'a RobotModel,
    pub states: &'a [JointState],
    pub intrinsics: &'a CameraIntrinsics,
    pub detection: &'a DetectionConfig,
    pub icp: &'a IcpConfig,
}

impl CalibrationJob<'_> {
    /// Simulates a sweep with `noise`, then calibrates and scores it.
    pub fn run(&self, noise: &NoiseModel) -> Result<CalibrationRun, PipelineError> {
        let seq = generate_calibration_sequence(self.setup, self.robot, self.states, self.intrinsics, noise)?;
        self.run_on(&seq)
    }

    pub fn run_on(&self, seq: &CalibrationSequence) -> Result<CalibrationRun, PipelineError> {
        let det = detect_sequence(seq, &self.setup.pattern, self.detection);
        let calibration = calibrate_rig(seq, &det.observations, self.icp)?;
        let tre = sequence_tre(seq, &det.observations, &calibration.mounts)?;
        let errors = mount_errors(&calibration, &seq.truth);
        Ok(CalibrationRun {
            calibration,
            tre,
            errors,
            missed: det
                .failures
                .into_iter()
                .map(|(p, c, e)| (p, c, e.to_string()))
                .collect(),
        })
    }

    /// Independent noisy sweeps; trial `i` uses noise seed `mix(seed, i)`.
    pub fn monte_carlo(&self, noise: &NoiseModel, trials: usize, seed: u64) -> Result<TreSummary, PipelineError> {
        let runs: Vec<CalibrationRun> = (0..trials)
            .into_par_iter()
            .map(|i| {
                self.run(&NoiseModel {
                    seed: mix(seed, 0x5452_4531, i as u64),
                    ..*noise
                })
            })
            .collect::<Result<_, _>>()?;
        let per_trial: Vec<f64> = runs.iter().map(|r| r.tre.overall.mean).collect();
        let n = per_trial.len() as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let std = if per_trial.len() > 1 {
            (per_trial.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(TreSummary {
            per_trial,
            mean,
            std,
            worst_translation: runs
                .iter()
                .flat_map(|r| r.errors.iter().map(|e| e.1))
                .fold(0.0, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreSummary {
    /// Mean TRE (fraction of object-camera distance) of each trial.
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Largest mount translation error over all trials and cameras (m).
    pub worst_translation: f64,
}

/// Merge methods compared on the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Single,
    Max,
    Mean,
    Hourglass,
    Crf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Single,
        Method::Max,
        Method::Mean,
        Method::Hourglass,
        Method::Crf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Max => "max",
            Method::Mean => "mean",
            Method::Hourglass => "hourglass",
            Method::Crf => "crf",
        }
    }
}

/// Stacks and ground truth for every (scene, target), plus CRF labels per
/// view for the scenes they were requested for.
pub struct PreparedBenchmark {
    pub views: Vec<[(ProjectedStack, LabelMap); 4]>,
    pub crf: BTreeMap<usize, Vec<LabelMap>>,
}

impl PreparedBenchmark {
    /// `crf` names the parameters and the scenes to run the CRF on.
    pub fn new(bench: &Benchmark, crf: Option<(&CrfParams, &[usize])>) -> Result<Self, PipelineError> {
        let views = bench
            .scenes
            .par_iter()
            .map(|s| {
                let v: Vec<_> = CameraId::ALL.iter().map(|&c| s.stack(c)).collect::<Result<_, _>>()?;
                Ok(v.try_into().expect("four targets"))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let crf = match crf {
            Some((params, scenes)) => {
                let mut wanted = scenes.to_vec();
                wanted.sort_unstable();
                wanted.dedup();
                if let Some(&bad) = wanted.iter().find(|&&i| i >= bench.scenes.len()) {
                    return Err(SimError::Config(format!("scene {bad} out of range")).into());
                }
                wanted
                    .par_iter()
                    .map(|&i| {
                        let s = &bench.scenes[i];
                        Ok((i, crf_labels(&s.views, &s.confidences, params)?))
                    })
                    .collect::<Result<BTreeMap<_, _>, CrfError>>()?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { views, crf })
    }

    fn samples(&self, scenes: &[usize]) -> Result<Vec<Sample>, MvpmError> {
        scenes
            .iter()
            .flat_map(|&s| self.views[s].iter())
            .map(|(stack, labels)| Sample::new(stack.clone(), labels))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub index: usize,
    pub repetition: usize,
    pub fold: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub training: TrainReport,
    pub metrics: BTreeMap<Method, MetricsReport>,
    /// Hourglass mIOU with 1..=4 cameras, removing cameras in
    /// `ablation_order`.
    pub ablation: Vec<f64>,
}

fn score(
    tests: &[&(ProjectedStack, LabelMap)],
    mut predict_one: impl FnMut(usize, &ProjectedStack) -> Result<LabelMap, PipelineError>,
) -> Result<MetricsReport, PipelineError> {
    let mut conf = ConfusionMatrix::new(NUM_CLASSES);
    for (i, (stack, gt)) in tests.iter().enumerate() {
        let pred = predict_one(i, stack)?;
        conf.accumulate(gt, &pred, Some(stack.slots[0].validity()))?;
    }
    Ok(compute_metrics(&conf)?)
}

/// Multi-view CRF labels for one rendered scene, per view.
pub fn crf_labels(
    views: &[RenderedView],
    confidences: &[ConfidenceMap],
    params: &CrfParams,
) -> Result<Vec<LabelMap>, CrfError> {
    let inputs: Vec<FusionInput> = views
        .iter()
        .zip(confidences)
        .map(|(v, c)| FusionInput {
            view: v.view(),
            depth: &v.depth,
            intensity: &v.intensity,
            confidence: c,
        })
        .collect();
    fuse_views(&inputs, params, FilterBackend::Lattice)
}

/// Slots removed to keep `cameras` cameras, in `order`, never the target.
pub fn ablation_drop(stack: &ProjectedStack, cameras: usize, order: &[CameraId]) -> ProjectedStack {
    let removable: Vec<CameraId> = order.iter().copied().filter(|&c| c != stack.target).collect();
    let n = 4usize.saturating_sub(cameras.clamp(1, 4)).min(removable.len());
    stack.without(&removable[..n])
}

/// Hourglass trained on the experiment's training scenes, validated on its
/// validation fold; experiment `index` gets its own training seed.
pub fn train_experiment(
    data: &PreparedBenchmark,
    index: usize,
    exp: &Experiment,
    train: &TrainConfig,
) -> Result<(MergeNetwork, TrainReport), PipelineError> {
    let config = TrainConfig {
        seed: mix(train.seed, 0x4b46_4f4c, index as u64),
        ..train.clone()
    };
    Ok(train_merge(
        &data.samples(&exp.train)?,
        &data.samples(&exp.val)?,
        &config,
    )?)
}

/// Scores `merger` on the test scenes of `exp`, masked like
/// [`run_experiment`].
pub fn evaluate(data: &PreparedBenchmark, exp: &Experiment, merger: &Merger) -> Result<MetricsReport, PipelineError> {
    let tests: Vec<&(ProjectedStack, LabelMap)> = exp.test.iter().flat_map(|&s| data.views[s].iter()).collect();
    score(&tests, |_, s| Ok(merger.predict(s)?))
}

/// Trains on the experiment's training scenes and scores every method on
/// its test scenes; metrics are restricted to pixels with target depth.
pub fn run_experiment(
    data: &PreparedBenchmark,
    index: usize,
    exp: &Experiment,
    train: &TrainConfig,
    ablation_order: &[CameraId],
) -> Result<ExperimentReport, PipelineError> {
    let (net, training) = train_experiment(data, index, exp, train)?;
    let tests: Vec<&(ProjectedStack, LabelMap)> = exp.test.iter().flat_map(|&s| data.views[s].iter()).collect();
    let targets: Vec<(usize, usize)> = exp.test.iter().flat_map(|&s| (0..4).map(move |c| (s, c))).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert(
        Method::Single,
        score(&tests, |_, s| Ok(predict(&s.target_confidence())))?,
    );
    for (method, mode) in [(Method::Max, FixedMerge::Max), (Method::Mean, FixedMerge::Mean)] {
        metrics.insert(method, score(&tests, |_, s| Ok(Merger::Fixed(mode).predict(s)?))?);
    }
    let hourglass = Merger::Network(&net);
    metrics.insert(Method::Hourglass, score(&tests, |_, s| Ok(hourglass.predict(s)?))?);
    if exp.test.iter().all(|s| data.crf.contains_key(s)) {
        metrics.insert(
            Method::Crf,
            score(&tests, |i, _| Ok(data.crf[&targets[i].0][targets[i].1].clone()))?,
        );
    }
    let ablation = (1..=4)
        .map(|n| {
            score(&tests, |_, s| {
                Ok(hourglass.predict(&ablation_drop(s, n, ablation_order))?)
            })
            .map(|m| m.miou)
        })
        .collect::<Result<_, _>>()?;
    Ok(ExperimentReport {
        index,
        repetition: exp.repetition,
        fold: exp.fold,
        train_scenes: exp.train.len(),
        val_scenes: exp.val.len(),
        test_scenes: exp.test.len(),
        training,
        metrics,
        ablation,
    })
}

/// Runs every experiment of `plan` in parallel; reports come back in plan
/// order.
pub fn run_kfold(
    data: &PreparedBenchmark,
    plan: &KFoldPlan,
    train: &TrainConfig,
    ablation_order: &[CameraId],
) -> Result<Vec<ExperimentReport>, PipelineError> {
    plan.experiments
        .par_iter()
        .enumerate()
        .map(|(i, e)| run_experiment(data, i, e, train, ablation_order))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_acc: f64,
    pub mean_acc_class: f64,
    pub mean_fwiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldSummary {
    pub experiments: usize,
    pub methods: BTreeMap<Method, MethodSummary>,
    /// Paired tests of the hourglass against each other method (`b` is the
    /// hourglass).
    pub hourglass_vs: BTreeMap<Method, SignificanceResult>,
    /// Mean hourglass mIOU with 1..=4 cameras.
    pub ablation_mean: Vec<f64>,
    /// Paired tests of four cameras against each smaller count.
    pub ablation_four_vs: Vec<SignificanceResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

pub fn summarize(reports: &[ExperimentReport]) -> Result<KFoldSummary, PipelineError> {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| reports.iter().all(|r| r.metrics.contains_key(m)))
        .collect();
    let column =
        |m: Method, f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(&r.metrics[&m])).collect() };
    let mut summary = BTreeMap::new();
    let mut tests = BTreeMap::new();
    for &m in &methods {
        let (mean_miou, std_miou) = mean_std(&column(m, |r| r.miou));
        summary.insert(
            m,
            MethodSummary {
                mean_miou,
                std_miou,
                mean_acc: mean_std(&column(m, |r| r.acc)).0,
                mean_acc_class: mean_std(&column(m, |r| r.acc_class)).0,
                mean_fwiou: mean_std(&column(m, |r| r.fwiou)).0,
            },
        );
        if m != Method::Hourglass && methods.contains(&Method::Hourglass) {
            tests.insert(
                m,
                paired_significance(&column(m, |r| r.miou), &column(Method::Hourglass, |r| r.miou))?,
            );
        }
    }
    let ablation: Vec<Vec<f64>> = (0..4)
        .map(|n| reports.iter().map(|r| r.ablation[n]).collect())
        .collect();
    Ok(KFoldSummary {
        experiments: reports.len(),
        methods: summary,
        hourglass_vs: tests,
        ablation_mean: ablation.iter().map(|a| mean_std(a).0).collect(),
        ablation_four_vs: (0..3)
            .map(|n| paired_significance(&ablation[n], &ablation[3]))
            .collect::<Result<_, _>>()?,
    })
}
