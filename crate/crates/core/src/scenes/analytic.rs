use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_ray, Provenance, Ray, SamplePositions};

/// Smallest quadrature size accepted by [`AnalyticScene::oracle_render`].
pub const MIN_QUADRATURE: usize = 1024;
/// Largest quadrature size tried before giving up.
pub const MAX_QUADRATURE: usize = 1 << 16;
/// Self-convergence tolerance between successive quadrature doublings.
pub const QUADRATURE_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Region between two concentric spheres.
    Shell { center: [f64; 3], inner: f64, outer: f64 },
}

/// A shape filled with constant density (per world unit) and albedo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.shape {
            Shape::Sphere { center, radius } => dist2(p, center) <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|k| min[k] <= p[k] && p[k] <= max[k]),
            Shape::Shell { center, inner, outer } => {
                let d = dist2(p, center);
                inner * inner < d && d <= outer * outer
            }
        }
    }

    /// Depth intervals along `origin + s * direction` inside the primitive.
    pub fn intervals(&self, origin: [f64; 3], direction: [f64; 3]) -> Vec<(f64, f64)> {
        match self.shape {
            Shape::Sphere { center, radius } => sphere_hit(origin, direction, center, radius).into_iter().collect(),
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if direction[k] == 0.0 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return Vec::new();
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) / direction[k];
                    let b = (max[k] - origin[k]) / direction[k];
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                if lo < hi {
                    vec![(lo, hi)]
                } else {
                    Vec::new()
                }
            }
            Shape::Shell { center, inner, outer } => {
                let Some((a, b)) = sphere_hit(origin, direction, center, outer) else {
                    return Vec::new();
                };
                match sphere_hit(origin, direction, center, inner) {
                    Some((c, d)) => vec![(a, c), (d, b)],
                    None => vec![(a, b)],
                }
            }
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn sphere_hit(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<(f64, f64)> {
    let oc: [f64; 3] = std::array::from_fn(|k| o[k] - c[k]);
    let b: f64 = (0..3).map(|k| oc[k] * d[k]).sum();
    let q = dist2(o, c) - r * r;
    let disc = b * b - q;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

/// Procedural scene made of constant-density primitives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if let Some(p) = primitives.iter().find(|p| !(p.density >= 0.0)) {
            return Err(Error::Invalid(format!("negative density {}", p.density)));
        }
        Ok(Self { primitives })
    }

    /// Four overlapping spheres of different densities plus a thin shell.
    pub fn desk_spheres() -> Self {
        let prim = |shape, density, albedo| Primitive { shape, density, albedo };
        Self {
            primitives: vec![
                prim(Shape::Sphere { center: [0.0, 0.0, 0.0], radius: 0.55 }, 6.0, [0.85, 0.35, 0.2]),
                prim(Shape::Sphere { center: [0.65, 0.35, -0.25], radius: 0.35 }, 25.0, [0.15, 0.45, 0.85]),
                prim(Shape::Sphere { center: [0.15, -0.7, 0.45], radius: 0.22 }, 50.0, [0.95, 0.85, 0.15]),
                prim(Shape::Sphere { center: [-0.35, 0.55, 0.5], radius: 0.3 }, 2.5, [0.3, 0.8, 0.35]),
                prim(
                    Shape::Shell { center: [-0.6, -0.3, -0.35], inner: 0.28, outer: 0.4 },
                    30.0,
                    [0.7, 0.25, 0.75],
                ),
            ],
        }
    }

    /// Three boxes and a shell.
    pub fn desk_boxes() -> Self {
        let prim = |shape, density, albedo| Primitive { shape, density, albedo };
        Self {
            primitives: vec![
                prim(Shape::Box { min: [-0.5, -0.5, -0.5], max: [0.2, 0.2, 0.1] }, 8.0, [0.8, 0.3, 0.25]),
                prim(Shape::Box { min: [0.1, 0.0, -0.2], max: [0.7, 0.6, 0.5] }, 20.0, [0.2, 0.5, 0.85]),
                prim(Shape::Box { min: [-0.7, 0.3, 0.2], max: [-0.2, 0.8, 0.6] }, 3.0, [0.35, 0.8, 0.3]),
                prim(
                    Shape::Shell { center: [0.3, -0.5, 0.4], inner: 0.2, outer: 0.3 },
                    30.0,
                    [0.9, 0.8, 0.2],
                ),
            ],
        }
    }

    /// World-space density and color at `point`; color is the density-weighted
    /// albedo, or `background` in empty space.
    pub fn oracle_field(&self, point: [f64; 3], background: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in self.primitives.iter().filter(|p| p.contains(point)) {
            sigma += p.density;
            for k in 0..3 {
                acc[k] += p.density * p.albedo[k];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|a| a / sigma))
        } else {
            (0.0, background)
        }
    }

    /// Primitive intervals clipped to the ray's `[0, 1]` normalized depth range.
    fn normalized_intervals(&self, ray: &Ray) -> Vec<(f64, f64, &Primitive)> {
        let span = ray.span();
        self.primitives
            .iter()
            .flat_map(|p| {
                p.intervals(ray.origin, ray.direction)
                    .into_iter()
                    .map(move |(a, b)| ((a - ray.t_near) / span, (b - ray.t_near) / span, p))
            })
            .filter_map(|(a, b, p)| {
                let (a, b) = (a.max(0.0), b.min(1.0));
                (a < b).then_some((a, b, p))
            })
            .collect()
    }

    /// Renders `ray` on `n` equal cells, each carrying its exact mean density
    /// and density-weighted albedo.
    pub fn quadrature(&self, ray: &Ray, n: usize, background: [f64; 3]) -> Result<[f64; 3]> {
        let span = ray.span();
        let h = 1.0 / n as f64;
        let mut optical = vec![0.0; n];
        let mut colored = vec![[0.0; 3]; n];
        for (a, b, p) in self.normalized_intervals(ray) {
            let first = ((a * n as f64).floor() as usize).min(n - 1);
            let last = ((b * n as f64).ceil() as usize).clamp(first + 1, n);
            for k in first..last {
                let lo = a.max(k as f64 * h);
                let hi = b.min((k + 1) as f64 * h);
                if hi > lo {
                    let od = p.density * span * (hi - lo);
                    optical[k] += od;
                    for c in 0..3 {
                        colored[k][c] += od * p.albedo[c];
                    }
                }
            }
        }
        let t = SamplePositions::new((0..n).map(|k| k as f64 * h).collect(), Provenance::Stratified)?;
        let sigmas: Vec<f64> = optical.iter().map(|od| od / h).collect();
        let colors: Vec<[f64; 3]> = optical
            .iter()
            .zip(&colored)
            .map(|(&od, c)| if od > 0.0 { c.map(|v| v / od) } else { background })
            .collect();
        Ok(render_ray(&t, &sigmas, &colors, background)?.color)
    }

    /// Converged rendering of `ray`: doubles the quadrature from `n_quad`
    /// until successive results agree to [`QUADRATURE_TOL`].
    pub fn oracle_render(&self, ray: &Ray, n_quad: usize, background: [f64; 3]) -> Result<[f64; 3]> {
        if n_quad < MIN_QUADRATURE {
            return Err(Error::Invalid(format!("n_quad must be >= {MIN_QUADRATURE}, got {n_quad}")));
        }
        let mut n = n_quad;
        let mut prev = self.quadrature(ray, n, background)?;
        while 2 * n <= MAX_QUADRATURE {
            n *= 2;
            let next = self.quadrature(ray, n, background)?;
            if (0..3).all(|k| (next[k] - prev[k]).abs() < QUADRATURE_TOL) {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::NoConvergence(MAX_QUADRATURE))
    }

    /// Closed-form compositing over the piecewise-constant segments of `ray`.
    pub fn exact_render(&self, ray: &Ray, background: [f64; 3]) -> [f64; 3] {
        let mut cuts = vec![0.0, 1.0];
        for (a, b, _) in self.normalized_intervals(ray) {
            cuts.push(a);
            cuts.push(b);
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        for w in cuts.windows(2) {
            let (sigma, c) = self.oracle_field(ray.at(0.5 * (w[0] + w[1])), background);
            let alpha = -(-sigma * ray.span() * (w[1] - w[0])).exp_m1();
            for k in 0..3 {
                color[k] += trans * alpha * c[k];
            }
            trans *= 1.0 - alpha;
        }
        std::array::from_fn(|k| color[k] + trans * background[k])
    }
}
