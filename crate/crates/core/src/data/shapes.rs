use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Box,
    Cylinder,
    SphereUnion,
    Chair,
    Lamp,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Box,
        Family::Cylinder,
        Family::SphereUnion,
        Family::Chair,
        Family::Lamp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::SphereUnion => "sphere_union",
            Family::Chair => "chair",
            Family::Lamp => "lamp",
        }
    }

    fn param_ranges(self) -> &'static [(f64, f64)] {
        match self {
            // half extents x, y, z
            Family::Box => &[(0.2, 1.0), (0.2, 1.0), (0.2, 1.0)],
            // radius, half height
            Family::Cylinder => &[(0.2, 0.8), (0.2, 1.0)],
            // second and third sphere offsets / radii
            Family::SphereUnion => &[
                (0.3, 0.7),
                (0.2, 0.6),
                (-1.0, 1.0),
                (0.2, 0.5),
                (-1.0, 1.0),
                (0.15, 0.45),
            ],
            // seat half width, seat half depth, back height, leg height
            Family::Chair => &[(0.35, 0.6), (0.3, 0.55), (0.3, 0.8), (0.3, 0.6)],
            // base radius, pole height, shade bottom radius, shade top radius, shade height
            Family::Lamp => &[(0.2, 0.45), (0.5, 1.2), (0.25, 0.55), (0.08, 0.25), (0.2, 0.45)],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown shape family {s:?}")))
    }
}

/// A procedural shape: family, dimensionless parameters, sampling seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub family: Family,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeSpec {
    /// Draws parameters uniformly from the family's ranges.
    pub fn random(family: Family, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a4e);
        let params = family
            .param_ranges()
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        ShapeSpec {
            family,
            params,
            seed,
        }
    }

    fn param(&self, i: usize) -> Result<f64> {
        self.params.get(i).copied().ok_or_else(|| {
            Error::contract(format!(
                "{} needs {} parameters, got {}",
                self.family,
                self.family.param_ranges().len(),
                self.params.len()
            ))
        })
    }

    fn primitives(&self) -> Result<Vec<Primitive>> {
        let p = |i| self.param(i);
        Ok(match self.family {
            Family::Box => vec![Primitive::Box {
                center: [0.0; 3],
                half: [p(0)?, p(1)?, p(2)?],
            }],
            Family::Cylinder => vec![Primitive::Frustum {
                base: [0.0, -p(1)?, 0.0],
                height: 2.0 * p(1)?,
                r0: p(0)?,
                r1: p(0)?,
                caps: true,
            }],
            Family::SphereUnion => vec![
                Primitive::Sphere {
                    center: [0.0; 3],
                    radius: p(0)?,
                },
                Primitive::Sphere {
                    center: [p(0)? + 0.5 * p(1)?, 0.3 * p(2)?, 0.0],
                    radius: p(1)?,
                },
                Primitive::Sphere {
                    center: [0.2 * p(4)?, -(p(0)? + 0.5 * p(3)?), 0.4 * p(4)?],
                    radius: p(3)?,
                },
            ],
            Family::Chair => {
                let (w, d, back, leg) = (p(0)?, p(1)?, p(2)?, p(3)?);
                let t = 0.04;
                let l = 0.035;
                let mut v = vec![
                    Primitive::Box {
                        center: [0.0, 0.0, 0.0],
                        half: [w, t, d],
                    },
                    Primitive::Box {
                        center: [0.0, t + back / 2.0, -d + t],
                        half: [w, back / 2.0, t],
                    },
                ];
                for sx in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        v.push(Primitive::Box {
                            center: [sx * (w - l), -t - leg / 2.0, sz * (d - l)],
                            half: [l, leg / 2.0, l],
                        });
                    }
                }
                v
            }
            Family::Lamp => {
                let (rb, pole, s0, s1, sh) = (p(0)?, p(1)?, p(2)?, p(3)?, p(4)?);
                vec![
                    Primitive::Frustum {
                        base: [0.0, 0.0, 0.0],
                        height: 0.06,
                        r0: rb,
                        r1: rb,
                        caps: true,
                    },
                    Primitive::Frustum {
                        base: [0.0, 0.06, 0.0],
                        height: pole,
                        r0: 0.03,
                        r1: 0.03,
                        caps: false,
                    },
                    Primitive::Frustum {
                        base: [0.0, 0.06 + pole - 0.3 * sh, 0.0],
                        height: sh,
                        r0: s0,
                        r1: s1,
                        caps: false,
                    },
                ]
            }
        })
    }
}

#[derive(Clone, Debug)]
enum Primitive {
    Box {
        center: Point3,
        half: Point3,
    },
    Sphere {
        center: Point3,
        radius: f64,
    },
    /// Truncated cone along +y from `base`; radii `r0` at the bottom and
    /// `r1` at the top.
    Frustum {
        base: Point3,
        height: f64,
        r0: f64,
        r1: f64,
        caps: bool,
    },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Frustum {
                height,
                r0,
                r1,
                caps,
                ..
            } => {
                let slant = (height * height + (r1 - r0) * (r1 - r0)).sqrt();
                let side = PI * (r0 + r1) * slant;
                if caps {
                    side + PI * (r0 * r0 + r1 * r1)
                } else {
                    side
                }
            }
        }
    }

    fn bounds(&self) -> (Point3, Point3) {
        match *self {
            Primitive::Box { center: c, half: h } => (
                [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
                [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
            ),
            Primitive::Sphere { center: c, radius: r } => {
                ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
            }
            Primitive::Frustum {
                base: b,
                height,
                r0,
                r1,
                ..
            } => {
                let r = r0.max(r1);
                ([b[0] - r, b[1], b[2] - r], [b[0] + r, b[1] + height, b[2] + r])
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match *self {
            Primitive::Box { center: c, half: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = areas.iter().sum::<f64>();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = a;
                        break;
                    }
                    pick -= ar;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        c[a] + sign * h[a]
                    } else {
                        c[a] + rng.random_range(-h[a]..h[a])
                    };
                }
                p
            }
            Primitive::Sphere { center: c, radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi = rng.random_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                [
                    c[0] + radius * s * phi.cos(),
                    c[1] + radius * s * phi.sin(),
                    c[2] + radius * z,
                ]
            }
            Primitive::Frustum {
                base: b,
                height,
                r0,
                r1,
                caps,
            } => {
                let slant = (height * height + (r1 - r0) * (r1 - r0)).sqrt();
                let side = PI * (r0 + r1) * slant;
                let cap0 = if caps { PI * r0 * r0 } else { 0.0 };
                let cap1 = if caps { PI * r1 * r1 } else { 0.0 };
                let pick = rng.random_range(0.0..side + cap0 + cap1);
                let phi = rng.random_range(0.0..2.0 * PI);
                if pick < side {
                    // radius-weighted height: inverse CDF of r(t) = r0 + (r1 - r0) t
                    let u: f64 = rng.random_range(0.0..1.0);
                    let t = if (r1 - r0).abs() < 1e-12 {
                        u
                    } else {
                        let a = r1 - r0;
                        (-r0 + (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt()) / a
                    };
                    let r = r0 + (r1 - r0) * t;
                    [b[0] + r * phi.cos(), b[1] + t * height, b[2] + r * phi.sin()]
                } else {
                    let top = pick >= side + cap0;
                    let rad = if top { r1 } else { r0 };
                    let r = rad * rng.random_range(0.0f64..1.0).sqrt();
                    let y = if top { b[1] + height } else { b[1] };
                    [b[0] + r * phi.cos(), y, b[2] + r * phi.sin()]
                }
            }
        }
    }

    fn strictly_inside(&self, p: &Point3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                crate::geometry::dist2(p, &center) < radius * radius * (1.0 - 1e-9)
            }
            _ => false,
        }
    }
}

/// Uniform surface sample of `spec`, mapped into the unit ball.
///
/// The normalization is computed from the analytic bounding box (center at
/// the box center, scale by the half diagonal), so clouds of different sizes
/// drawn from the same spec share one frame.
pub fn sample_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud> {
    sample_shape_stream(spec, n, 0)
}

/// Like [`sample_shape`] but draws from an independent random stream.
pub fn sample_shape_stream(spec: &ShapeSpec, n: usize, stream: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::contract("sample_shape: n must be >= 1"));
    }
    let prims = spec.primitives()?;
    let areas: Vec<f64> = prims.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &prims {
        let (a, b) = p.bounds();
        for k in 0..3 {
            lo[k] = lo[k].min(a[k]);
            hi[k] = hi[k].max(b[k]);
        }
    }
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let half_diag = (0..3).map(|k| (0.5 * (hi[k] - lo[k])).powi(2)).sum::<f64>().sqrt();
    let scale = 1.0 / half_diag;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let mut pick = rng.random_range(0.0..total);
        let mut which = prims.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                which = i;
                break;
            }
            pick -= a;
        }
        let p = prims[which].sample(&mut rng);
        let hidden = prims
            .iter()
            .enumerate()
            .any(|(j, q)| j != which && q.strictly_inside(&p));
        if hidden {
            continue;
        }
        points.push([0, 1, 2].map(|k| (p[k] - center[k]) * scale));
    }
    Ok(PointCloud::new(points))
}
