//! Segmentation metrics, repeated k-fold experiment plans and paired
//! significance testing.

use crate::mvpm::LabelMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("{n} scenes cannot fill {k} folds plus a test split")]
    TooFewScenes { n: usize, k: usize },
    #[error("invalid plan parameter: {0}")]
    InvalidPlan(String),
    #[error("sample lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two paired samples, got {0}")]
    TooFewSamples(usize),
}

/// Rows are ground truth, columns are prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel where `validity` is set (all pixels if `None`).
    pub fn accumulate(
        &mut self,
        gt: &LabelMap,
        pred: &LabelMap,
        validity: Option<&[bool]>,
    ) -> Result<(), MetricsError> {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(MetricsError::ShapeMismatch(format!(
                "gt {}x{} vs prediction {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            )));
        }
        if gt.classes() > self.classes || pred.classes() > self.classes {
            return Err(MetricsError::ShapeMismatch("class count".into()));
        }
        if let Some(v) = validity {
            if v.len() != gt.len() {
                return Err(MetricsError::ShapeMismatch("validity mask".into()));
            }
        }
        for (i, (&g, &p)) in gt.labels().iter().zip(pred.labels()).enumerate() {
            if validity.is_none_or(|v| v[i]) {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::ShapeMismatch("class count".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// When false, class 0 and every pixel whose ground truth is class 0 are
    /// left out.
    pub include_background: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            include_background: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub acc_class: f64,
    pub miou: f64,
    pub fwiou: f64,
    /// IOU per class; zero for classes that are not present.
    pub iou: Vec<f64>,
    /// Present means the class occurs in the ground truth or the prediction.
    pub present: Vec<bool>,
    pub include_background: bool,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Sum of count ratios, kept as an exact fraction while it fits so that
/// means of small confusion matrices round correctly.
#[derive(Clone, Copy, Debug)]
struct RatioSum {
    exact: Option<(u128, u128)>,
    approx: f64,
}

impl Default for RatioSum {
    fn default() -> Self {
        Self {
            exact: Some((0, 1)),
            approx: 0.0,
        }
    }
}

impl RatioSum {
    fn add(&mut self, num: u128, den: u128) {
        self.approx += num as f64 / den as f64;
        self.exact = self.exact.and_then(|(n, d)| {
            let g = gcd(d, den);
            let n = n.checked_mul(den / g)?.checked_add(num.checked_mul(d / g)?)?;
            let d = d.checked_mul(den / g)?;
            let g = gcd(n, d);
            Some((n / g, d / g))
        });
    }

    fn mean(&self, count: u128) -> f64 {
        const EXACT: u128 = 1 << 53;
        let exact = self.exact.and_then(|(n, d)| {
            let d = d.checked_mul(count)?;
            let g = gcd(n, d);
            Some((n / g, d / g))
        });
        match exact {
            Some((n, d)) if n <= EXACT && d <= EXACT => n as f64 / d as f64,
            _ => self.approx / count as f64,
        }
    }
}

pub fn compute_metrics(conf: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    compute_metrics_with(conf, MetricsOptions::default())
}

pub fn compute_metrics_with(conf: &ConfusionMatrix, opts: MetricsOptions) -> Result<MetricsReport, MetricsError> {
    let c = conf.classes;
    let first = usize::from(!opts.include_background);
    let rows = first..c;
    let gt_count: Vec<u64> = (0..c).map(|g| (0..c).map(|p| conf.get(g, p)).sum()).collect();
    let pred_count: Vec<u64> = (0..c).map(|p| rows.clone().map(|g| conf.get(g, p)).sum()).collect();
    let total: u64 = rows.clone().map(|g| gt_count[g]).sum();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut iou = vec![0.0; c];
    let mut present = vec![false; c];
    let (mut tp_sum, mut n_present) = (0u64, 0u128);
    let (mut recall_sum, mut iou_sum, mut fwiou) = (RatioSum::default(), RatioSum::default(), RatioSum::default());
    for k in rows {
        let tp = conf.get(k, k);
        tp_sum += tp;
        if gt_count[k] == 0 && pred_count[k] == 0 {
            continue;
        }
        present[k] = true;
        n_present += 1;
        let union = gt_count[k] + pred_count[k] - tp;
        iou[k] = tp as f64 / union as f64;
        if gt_count[k] > 0 {
            recall_sum.add(tp.into(), gt_count[k].into());
        }
        iou_sum.add(tp.into(), union.into());
        fwiou.add(
            u128::from(gt_count[k]) * u128::from(tp),
            u128::from(total) * u128::from(union),
        );
    }
    Ok(MetricsReport {
        acc: tp_sum as f64 / total as f64,
        acc_class: recall_sum.mean(n_present),
        miou: iou_sum.mean(n_present),
        fwiou: fwiou.mean(1),
        iou,
        present,
        include_background: opts.include_background,
    })
}

/// One train/validation/test triple, as scene indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experiment {
    pub repetition: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldPlan {
    pub n_scenes: usize,
    pub k: usize,
    pub repetitions: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub experiments: Vec<Experiment>,
}

/// Per repetition: shuffle the scenes, hold out the test split, partition
/// the rest into `k` folds and rotate the validation fold.
pub fn make_kfold_plan(
    n_scenes: usize,
    k: usize,
    repetitions: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<KFoldPlan, MetricsError> {
    if k < 2 {
        return Err(MetricsError::InvalidPlan(format!("k = {k}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(MetricsError::InvalidPlan(format!("test fraction {test_fraction}")));
    }
    let n_test = (n_scenes as f64 * test_fraction).round() as usize;
    if n_scenes < k + 1 || n_scenes - n_test < k {
        return Err(MetricsError::TooFewScenes { n: n_scenes, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen_tests: Vec<Vec<usize>> = Vec::new();
    let mut experiments = Vec::with_capacity(k * repetitions);
    for repetition in 0..repetitions {
        let mut perm: Vec<usize> = (0..n_scenes).collect();
        // A repeated test split would duplicate a repetition; reshuffle.
        let mut test;
        let mut attempts = 0;
        loop {
            perm.shuffle(&mut rng);
            test = perm[..n_test].to_vec();
            test.sort_unstable();
            attempts += 1;
            if n_test == 0 || !seen_tests.contains(&test) || attempts > 100 {
                break;
            }
        }
        seen_tests.push(test.clone());
        let rest = &perm[n_test..];
        let folds: Vec<&[usize]> = fold_bounds(rest.len(), k)
            .into_iter()
            .map(|(a, b)| &rest[a..b])
            .collect();
        for (fold, val) in folds.iter().enumerate() {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != fold)
                .flat_map(|(_, s)| s.iter().copied())
                .collect();
            train.sort_unstable();
            let mut val = val.to_vec();
            val.sort_unstable();
            experiments.push(Experiment {
                repetition,
                fold,
                train,
                val,
                test: test.clone(),
            });
        }
    }
    Ok(KFoldPlan {
        n_scenes,
        k,
        repetitions,
        test_fraction,
        seed,
        experiments,
    })
}

fn fold_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|f| (f * n / k, (f + 1) * n / k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Mean of `b − a`.
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub test: String,
    pub samples: usize,
}

/// Two-sided paired t-test on `b − a`.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<SignificanceResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (t, p) = if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        (
            if mean == 0.0 {
                0.0
            } else {
                mean.signum() * f64::INFINITY
            },
            p,
        )
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
        (t, (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
    };
    Ok(SignificanceResult {
        mean_difference: mean,
        t_statistic: t,
        p_value: p,
        test: "paired two-sided t".into(),
        samples: n,
    })
}
