use super::{SimError, NUM_CLASSES};
use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};

/// Hits closer than this along the ray are ignored.
const MIN_HIT: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        center: Vec3,
        size: Vec3,
    },
    /// Vertical cylinder standing on `base`.
    Cylinder {
        base: Vec3,
        radius: f64,
        height: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub class: u8,
    pub reflectivity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter: for a camera ray with unit z this is the depth.
    pub t: f64,
    pub normal: Vec3,
    pub primitive: usize,
}

impl Shape {
    fn validate(&self) -> Result<(), String> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let ok = match self {
            Shape::Sphere { center, radius } => pos(*radius) && finite(center),
            Shape::Box { center, size } => size.iter().all(|s| pos(*s)) && finite(center),
            Shape::Cylinder { base, radius, height } => pos(*radius) && pos(*height) && finite(base),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid {self:?}"))
        }
    }

    /// Nearest intersection with `t > 0` of the ray `o + t d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let tc = -oc.dot(d) / a;
                let closest = oc + d * tc;
                let h2 = radius * radius - closest.norm_squared();
                if h2 < 0.0 {
                    return None;
                }
                let dt = (h2 / a).sqrt();
                let t = [tc - dt, tc + dt].into_iter().find(|t| *t > MIN_HIT)?;
                Some((t, (o + d * t - center) / radius))
            }
            Shape::Box { center, size } => {
                let lo = center - size / 2.0;
                let hi = center + size / 2.0;
                let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis_in, mut axis_out) = (0, 0);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t_in {
                        t_in = a;
                        axis_in = k;
                    }
                    if b < t_out {
                        t_out = b;
                        axis_out = k;
                    }
                }
                if t_out < t_in || t_out <= MIN_HIT {
                    return None;
                }
                let (t, axis, sign) = if t_in > MIN_HIT {
                    (t_in, axis_in, -d[axis_in].signum())
                } else {
                    (t_out, axis_out, d[axis_out].signum())
                };
                let mut n = Vec3::zeros();
                n[axis] = sign;
                Some((t, n))
            }
            Shape::Cylinder { base, radius, height } => {
                let top = base.z + height;
                let mut best: Option<(f64, Vec3)> = None;
                let mut consider = |t: f64, n: Vec3| {
                    if t > MIN_HIT && best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, n));
                    }
                };
                let (ox, oy) = (o.x - base.x, o.y - base.y);
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let tc = -(ox * d.x + oy * d.y) / a;
                    let (cx, cy) = (ox + tc * d.x, oy + tc * d.y);
                    let h2 = radius * radius - cx * cx - cy * cy;
                    if h2 >= 0.0 {
                        let dt = (h2 / a).sqrt();
                        for t in [tc - dt, tc + dt] {
                            let z = o.z + t * d.z;
                            if (base.z..=top).contains(&z) {
                                let n = Vec3::new(ox + t * d.x, oy + t * d.y, 0.0) / radius;
                                consider(t, n);
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for (z, nz) in [(base.z, -1.0), (top, 1.0)] {
                        let t = (z - o.z) / d.z;
                        let (px, py) = (ox + t * d.x, oy + t * d.y);
                        if px * px + py * py <= radius * radius {
                            consider(t, Vec3::new(0.0, 0.0, nz));
                        }
                    }
                }
                best
            }
        }
    }

    /// Whether `p` lies inside or on the surface (with tolerance `eps`).
    pub fn contains(&self, p: &Vec3, eps: f64) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() <= radius + eps,
            Shape::Box { center, size } => (0..3).all(|k| (p[k] - center[k]).abs() <= size[k] / 2.0 + eps),
            Shape::Cylinder { base, radius, height } => {
                let r = ((p.x - base.x).powi(2) + (p.y - base.y).powi(2)).sqrt();
                r <= radius + eps && p.z >= base.z - eps && p.z <= base.z + height + eps
            }
        }
    }
}

fn finite(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// A list of labeled primitives; background (class 0) is wherever no
/// primitive is hit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SimError> {
        let s = Self { primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (i, p) in self.primitives.iter().enumerate() {
            p.shape
                .validate()
                .map_err(|m| SimError::InvalidScene(format!("primitive {i}: {m}")))?;
            if p.class as usize >= NUM_CLASSES {
                return Err(SimError::InvalidScene(format!("primitive {i}: class {}", p.class)));
            }
            if !(p.reflectivity > 0.0 && p.reflectivity <= 1.0) {
                return Err(SimError::InvalidScene(format!(
                    "primitive {i}: reflectivity {}",
                    p.reflectivity
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, shape: Shape, class: u8, reflectivity: f64) {
        self.primitives.push(Primitive {
            shape,
            class,
            reflectivity,
        });
    }

    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: SceneSpec = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}
