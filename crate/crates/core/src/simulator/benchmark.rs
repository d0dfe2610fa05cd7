use super::confidence::{generate_confidence, ConfidenceCorruption};
use super::render::{render, NoiseModel, RenderedView};
use super::robot::{JointState, RobotModel};
use super::scene::{SceneSpec, Shape};
use super::*;
use crate::geometry::{project_point, CameraIntrinsics, Vec3};
use crate::mvpm::{augment, build_stack, ConfidenceMap, LabelMap, ProjectedStack};
use crate::rig::CameraId;
use crate::rng::{mix, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    pub boundary_flip: f64,
    pub band: usize,
    pub blur_radius: usize,
    /// Per-view reliability is drawn uniformly from this range.
    pub reliability: [f64; 2],
    /// Per-view missed-region count is drawn from `0..=max_misses`.
    pub max_misses: usize,
    pub miss_radius: [f64; 2],
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            width: 40,
            height: 32,
            seed: 0,
            noise: NoiseModel {
                depth_sigma: 0.01,
                dropout: 0.01,
                seed: 0,
            },
            boundary_flip: 0.3,
            band: 1,
            blur_radius: 1,
            reliability: [0.4, 1.0],
            max_misses: 2,
            miss_radius: [0.1, 0.2],
        }
    }
}

impl BenchmarkConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::tof_default().resized(self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkScene {
    pub index: usize,
    pub seed: u64,
    pub state: JointState,
    pub scene: SceneSpec,
    /// Canonical camera order.
    pub views: Vec<RenderedView>,
    pub corruption: Vec<ConfidenceCorruption>,
    pub confidences: Vec<ConfidenceMap>,
}

impl BenchmarkScene {
    /// The projected stack for `target` and its ground-truth labels.
    pub fn stack(&self, target: CameraId) -> Result<(ProjectedStack, LabelMap), SimError> {
        let views: Vec<_> = self
            .views
            .iter()
            .zip(&self.confidences)
            .map(|(v, c)| Ok((v.camera, augment(c, &v.depth)?, v.view())))
            .collect::<Result<_, crate::mvpm::MvpmError>>()?;
        let stack = build_stack(target, &views)?;
        Ok((stack, self.views[target.index()].labels.clone()))
    }

    /// Fraction of non-background pixels, over all views, whose surface
    /// point is seen by at least two but not all four cameras.
    pub fn partial_visibility(&self) -> f64 {
        let (mut partial, mut total) = (0usize, 0usize);
        for v in &self.views {
            let k = &v.intrinsics;
            let origin = *v.camera_to_base.translation();
            for i in 0..k.pixel_count() {
                if v.labels.get(i) == CLASS_BG {
                    continue;
                }
                let dir = v
                    .camera_to_base
                    .transform_vector(&k.ray((i % k.width) as f64, (i / k.width) as f64));
                let Some(hit) = self.scene.intersect(&origin, &dir) else {
                    continue;
                };
                let p = origin + dir * hit.t;
                let seen = self.views.iter().filter(|u| sees(&self.scene, u, &p)).count();
                total += 1;
                partial += (2..4).contains(&seen) as usize;
            }
        }
        partial as f64 / total.max(1) as f64
    }
}

fn sees(scene: &SceneSpec, view: &RenderedView, p: &Vec3) -> bool {
    let local = view.camera_to_base.inverse().transform_point(p);
    let Some(proj) = project_point(&local, &view.intrinsics) else {
        return false;
    };
    if !view.intrinsics.contains(proj.u, proj.v) {
        return false;
    }
    let origin = *view.camera_to_base.translation();
    let dir = p - origin;
    scene
        .intersect(&origin, &dir)
        .is_none_or(|h| h.t > 1.0 - 1e-3 / dir.norm())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub scenes: Vec<BenchmarkScene>,
}

impl Benchmark {
    /// Share of each class among non-background pixels of all views.
    pub fn class_frequencies(&self) -> [f64; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for v in self.scenes.iter().flat_map(|s| &s.views) {
            for &l in v.labels.labels() {
                counts[l as usize] += 1;
            }
        }
        counts[0] = 0;
        let total = counts.iter().sum::<usize>().max(1) as f64;
        counts.map(|c| c as f64 / total)
    }
}

fn uniform(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    rng.random_range(a..b)
}

/// A randomized operating room around the patient-side cart.
pub fn or_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let mut s = SceneSpec::default();
    let v = Vec3::new;
    s.push(
        Shape::Box {
            center: v(3.0, 0.0, -0.05),
            size: v(14.0, 14.0, 0.1),
        },
        CLASS_BG,
        0.3,
    );
    s.push(
        Shape::Box {
            center: v(7.0, 0.0, 1.5),
            size: v(0.2, 14.0, 3.0),
        },
        CLASS_BG,
        0.4,
    );

    let tx = uniform(rng, 2.2, 2.6);
    let ty = uniform(rng, -0.15, 0.15);
    let top = uniform(rng, 0.85, 0.95);
    s.push(
        Shape::Box {
            center: v(tx, ty, top - 0.08),
            size: v(2.4, 1.0, 0.16),
        },
        CLASS_TABLE,
        0.8,
    );
    s.push(
        Shape::Box {
            center: v(tx, ty, (top - 0.16) / 2.0),
            size: v(0.5, 0.4, top - 0.16),
        },
        CLASS_TABLE,
        0.6,
    );
    s.push(
        Shape::Box {
            center: v(tx - 0.1, ty, top + 0.12),
            size: v(1.8, 0.7, 0.24),
        },
        CLASS_TABLE,
        0.7,
    );

    let arms = rng.random_range(3..=4);
    for a in 0..arms {
        let y = ty + (a as f64 - (arms as f64 - 1.0) / 2.0) * uniform(rng, 0.32, 0.4);
        let x = tx - uniform(rng, 0.3, 0.7);
        let low = top + uniform(rng, 0.3, 0.5);
        s.push(
            Shape::Box {
                center: v(x, y, (low + 2.1) / 2.0),
                size: v(0.22, 0.18, 2.1 - low),
            },
            CLASS_PSC,
            0.9,
        );
        s.push(
            Shape::Box {
                center: v((x + 0.9) / 2.0, y, 2.0),
                size: v(x - 0.9, 0.2, 0.2),
            },
            CLASS_PSC,
            0.9,
        );
        s.push(
            Shape::Cylinder {
                base: v(x + 0.15, y, top + 0.15),
                radius: 0.05,
                height: low - top - 0.15,
            },
            CLASS_PSC,
            0.9,
        );
    }

    for side in [-1.0, 1.0] {
        if rng.random::<f64>() < 0.5 {
            let hx = tx + uniform(rng, -0.8, 0.8);
            let hy = ty + side * uniform(rng, 0.9, 1.2);
            let height = uniform(rng, 1.55, 1.8);
            s.push(
                Shape::Cylinder {
                    base: v(hx, hy, 0.0),
                    radius: 0.17,
                    height: height - 0.25,
                },
                CLASS_HUMAN,
                0.6,
            );
            s.push(
                Shape::Sphere {
                    center: v(hx, hy, height - 0.12),
                    radius: 0.12,
                },
                CLASS_HUMAN,
                0.6,
            );
        }
    }

    let my = ty + if rng.random::<bool>() { 0.75 } else { -0.75 };
    let mx = uniform(rng, 1.3, 1.7);
    s.push(
        Shape::Box {
            center: v(mx, my, 1.1),
            size: v(0.35, 0.28, 0.03),
        },
        CLASS_MAYO,
        0.9,
    );
    s.push(
        Shape::Cylinder {
            base: v(mx, my, 0.0),
            radius: 0.03,
            height: 1.085,
        },
        CLASS_MAYO,
        0.9,
    );

    s.push(
        Shape::Box {
            center: v(uniform(rng, 4.0, 4.6), uniform(rng, 1.3, 1.9), 0.45),
            size: v(1.0, 0.6, 0.9),
        },
        CLASS_STERILE,
        0.8,
    );
    s.push(
        Shape::Box {
            center: v(uniform(rng, 4.0, 4.6), uniform(rng, -1.8, -1.2), 0.65),
            size: v(0.9, 0.7, 1.3),
        },
        CLASS_CART,
        0.5,
    );
    s.push(
        Shape::Box {
            center: v(uniform(rng, 5.5, 6.2), uniform(rng, -2.8, -2.2), 0.8),
            size: v(0.6, 0.6, 1.6),
        },
        CLASS_VSC,
        0.7,
    );
    s.push(
        Shape::Cylinder {
            base: v(tx + uniform(rng, 0.6, 1.2), ty + uniform(rng, -0.4, 0.4), 2.3),
            radius: 0.3,
            height: 0.08,
        },
        CLASS_LIGHT,
        1.0,
    );
    s
}

fn scene_state(rng: &mut ChaCha8Rng) -> JointState {
    JointState::new(
        uniform(rng, -0.25, 0.25),
        uniform(rng, -0.1, 0.1),
        uniform(rng, -0.1, 0.1),
    )
}

pub fn make_scene(config: &BenchmarkConfig, robot: &RobotModel, index: usize) -> Result<BenchmarkScene, SimError> {
    let seed = mix(config.seed, 0x5343_454e, index as u64);
    let mut rng = stream(seed, 0, 0);
    let scene = or_scene(&mut rng);
    let state = scene_state(&mut rng);
    let noise = NoiseModel {
        seed: mix(config.noise.seed, seed, 1),
        ..config.noise
    };
    let views = render(&scene, robot, &state, &config.intrinsics(), &noise, index as u64)?;
    let mut corruption = Vec::with_capacity(4);
    let mut confidences = Vec::with_capacity(4);
    for v in &views {
        let c = ConfidenceCorruption {
            boundary_flip: config.boundary_flip,
            band: config.band,
            blur_radius: config.blur_radius,
            reliability: uniform(&mut rng, config.reliability[0], config.reliability[1]),
            misses: rng.random_range(0..=config.max_misses),
            miss_radius: uniform(&mut rng, config.miss_radius[0], config.miss_radius[1]),
            seed: mix(seed, 2, v.camera.index() as u64),
        };
        confidences.push(generate_confidence(&v.labels, &c)?);
        corruption.push(c);
    }
    Ok(BenchmarkScene {
        index,
        seed,
        state,
        scene,
        views,
        corruption,
        confidences,
    })
}

pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Benchmark, SimError> {
    let robot = RobotModel::default();
    let scenes = (0..config.scenes)
        .into_par_iter()
        .map(|i| make_scene(config, &robot, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Benchmark {
        config: config.clone(),
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Benchmark {
        make_benchmark(&BenchmarkConfig {
            scenes: 6,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn benchmark_is_deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn class_frequencies_track_targets() {
        let f = small().class_frequencies();
        for c in 1..NUM_CLASSES {
            assert!(
                (f[c] - TARGET_FREQUENCIES[c]).abs() <= 0.10,
                "{} {:?}",
                CLASS_NAMES[c],
                f
            );
        }
    }

    #[test]
    fn occluders_leave_partially_visible_regions() {
        for s in &small().scenes {
            let f = s.partial_visibility();
            assert!(f >= 0.10, "scene {} {f}", s.index);
        }
    }

    #[test]
    fn stacks_put_the_target_first() {
        let b = small();
        let (stack, labels) = b.scenes[0].stack(CameraId::Usm4).unwrap();
        assert_eq!(stack.target, CameraId::Usm4);
        assert_eq!(labels, b.scenes[0].views[2].labels);
        assert_eq!(stack.slots[0].width(), 40);
    }
}
