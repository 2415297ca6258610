//! Alpha compositing along rays and the non-learned samplers.
//!
//! Depths are normalized: `t = 0` is the near plane and `t = 1` the far
//! plane. Densities are therefore per unit of normalized depth, and the last
//! sample's interval runs to the far plane.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Real, Tape, Tensor, Var};

/// Added to every coarse weight before normalizing the heuristic pdf.
pub const PDF_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], t_near: f64, t_far: f64) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::Invalid(format!("ray direction has norm {norm}")));
        }
        if !(t_near < t_far) {
            return Err(Error::Invalid(format!("t_near {t_near} must be below t_far {t_far}")));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    /// World-space distance covered by one unit of normalized depth.
    pub fn span(&self) -> f64 {
        self.t_far - self.t_near
    }

    /// World point at normalized depth `t`.
    pub fn at(&self, t: f64) -> [f64; 3] {
        let s = self.t_near + t * self.span();
        std::array::from_fn(|k| self.origin[k] + s * self.direction[k])
    }
}

/// Where a set of sample depths came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Stratified,
    Heuristic,
    Proposed,
    Merged,
    Filtered,
}

/// Sorted normalized depths in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePositions {
    t: Vec<f64>,
    provenance: Provenance,
}

impl SamplePositions {
    pub fn new(t: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("sample depth {bad} outside [0, 1]")));
        }
        if let Some(i) = (1..t.len()).find(|&i| t[i] < t[i - 1]) {
            return Err(Error::Invalid(format!(
                "sample depths not sorted at index {i}: {} > {}",
                t[i - 1],
                t[i]
            )));
        }
        Ok(Self { t, provenance })
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.t
    }
}

/// One sample per equal-width bin: the bin center, or a uniform draw inside
/// the bin when `jitter` is set.
pub fn stratified_sample(n: usize, rng: &mut impl Rng, jitter: bool) -> Result<SamplePositions> {
    if n < 2 {
        return Err(Error::Invalid(format!("stratified_sample needs n >= 2, got {n}")));
    }
    let inv = 1.0 / n as f64;
    let t = (0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            ((i as f64 + u) * inv).min(1.0)
        })
        .collect();
    SamplePositions::new(t, Provenance::Stratified)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub accumulated_alpha: f64,
}

/// Interval lengths: gaps to the next sample, and `1 - t_N` for the last.
pub fn deltas(t: &[f64]) -> Vec<f64> {
    (0..t.len())
        .map(|i| t.get(i + 1).copied().unwrap_or(1.0) - t[i])
        .collect()
}

/// Front-to-back compositing of one contiguous segment.
///
/// Returns the premultiplied color and the transmittance left behind the
/// segment, so segments can be chained as `c_a + T_a * c_b`.
pub fn composite_segment(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    for (a, c) in alphas.iter().zip(colors) {
        let w = trans * a;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        trans *= 1.0 - a;
    }
    (rgb, trans)
}

/// Composites per-sample `sigmas` and `colors` at depths `t` over `background`.
pub fn render_ray(
    t: &SamplePositions,
    sigmas: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
) -> Result<RenderResult> {
    let n = t.len();
    if sigmas.len() != n || colors.len() != n {
        return Err(Error::shape(
            "render_ray",
            format!("{n} depths, {} densities, {} colors", sigmas.len(), colors.len()),
        ));
    }
    let delta = deltas(t.t());
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut optical_depth = 0.0f64;
    let mut color = [0.0; 3];
    for i in 0..n {
        if sigmas[i] < 0.0 || !sigmas[i].is_finite() {
            return Err(Error::Invalid(format!("density {} at sample {i}", sigmas[i])));
        }
        let trans = (-optical_depth).exp();
        let sd = sigmas[i] * delta[i];
        let w = trans * -(-sd).exp_m1();
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        transmittance.push(trans);
        weights.push(w);
        optical_depth += sd;
    }
    let acc: f64 = weights.iter().sum();
    for k in 0..3 {
        color[k] += (1.0 - acc) * background[k];
    }
    Ok(RenderResult {
        color,
        weights,
        transmittance,
        accumulated_alpha: acc,
    })
}

/// Tape nodes produced by [`render_batch`].
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[B, 3]`
    pub color: Var,
    /// `[B, N]`
    pub weights: Var,
    /// `[B]`
    pub accumulated: Var,
}

/// Differentiable compositing of `B` rays with `N` samples each.
///
/// `t` and `sigma` are `[B, N]`, `color` is `[B, N, 3]`. Gradients flow into
/// all three, including the sample depths.
pub fn render_batch<T: Real>(
    tape: &mut Tape<T>,
    t: Var,
    sigma: Var,
    color: Var,
    background: [f64; 3],
) -> Result<RenderVars> {
    let shape = tape.shape(t).to_vec();
    if shape.len() != 2
        || tape.shape(sigma) != shape.as_slice()
        || tape.shape(color) != [shape[0], shape[1], 3]
    {
        return Err(Error::shape(
            "render",
            format!(
                "t {:?}, sigma {:?}, color {:?}",
                shape,
                tape.shape(sigma),
                tape.shape(color)
            ),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut diff = vec![T::zero(); n * n];
    let mut strict = vec![T::zero(); n * n];
    for i in 0..n {
        diff[i * n + i] = -T::one();
        if i + 1 < n {
            diff[(i + 1) * n + i] = T::one();
        }
        for j in 0..i {
            strict[j * n + i] = T::one();
        }
    }
    let mut last = vec![T::zero(); n];
    last[n - 1] = T::one();
    let diff = tape.constant(Tensor::new(vec![n, n], diff)?)?;
    let strict = tape.constant(Tensor::new(vec![n, n], strict)?)?;
    let last = tape.constant(Tensor::new(vec![n], last)?)?;

    let delta = tape.matmul(t, diff)?;
    let delta = tape.add(delta, last)?;
    let sd = tape.mul(sigma, delta)?;
    let before = tape.matmul(sd, strict)?;
    let before = tape.scale(before, -1.0)?;
    let trans = tape.exp(before)?;
    let keep = tape.scale(sd, -1.0)?;
    let keep = tape.exp(keep)?;
    let alpha = tape.scale(keep, -1.0)?;
    let alpha = tape.add_scalar(alpha, 1.0)?;
    let weights = tape.mul(trans, alpha)?;

    let w3 = tape.reshape(weights, &[b, 1, n])?;
    let rgb = tape.matmul(w3, color)?;
    let rgb = tape.reshape(rgb, &[b, 3])?;
    let acc = tape.sum(weights, Some(1))?;
    let rest = tape.scale(acc, -1.0)?;
    let rest = tape.add_scalar(rest, 1.0)?;
    let rest = tape.reshape(rest, &[b, 1])?;
    let bg = tape.constant(Tensor::from_f64(vec![1, 3], &background)?)?;
    let bg = tape.matmul(rest, bg)?;
    let color = tape.add(rgb, bg)?;
    Ok(RenderVars {
        color,
        weights,
        accumulated: acc,
    })
}

/// Piecewise-constant density over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewisePdf {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl PiecewisePdf {
    /// Builds a pdf from bin `edges` (ascending, spanning `[0, 1]`) and
    /// non-negative bin masses, which are normalized to sum to one.
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() != masses.len() + 1 || masses.is_empty() {
            return Err(Error::shape(
                "pdf",
                format!("{} edges for {} bins", edges.len(), masses.len()),
            ));
        }
        if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 || edges.windows(2).any(|e| e[1] < e[0]) {
            return Err(Error::Invalid("pdf edges must ascend from 0 to 1".into()));
        }
        let total: f64 = masses.iter().sum();
        if masses.iter().any(|m| !(*m >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Invalid("pdf masses must be non-negative with positive sum".into()));
        }
        let masses = masses.into_iter().map(|m| m / total).collect();
        Ok(Self { edges, masses })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Index of the bin containing `t`.
    pub fn bin_of(&self, t: f64) -> usize {
        let k = self.edges.partition_point(|&e| e <= t);
        k.clamp(1, self.masses.len()) - 1
    }

    fn cdf(&self) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.edges.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for m in &self.masses {
            acc += m;
            cdf.push(acc);
        }
        *cdf.last_mut().expect("non-empty") = 1.0;
        cdf
    }
}

/// Normalized coarse weights as a pdf with bin edges halfway between samples.
pub fn heuristic_pdf(weights: &[f64], t_coarse: &SamplePositions) -> Result<PiecewisePdf> {
    let t = t_coarse.t();
    if weights.len() != t.len() || t.is_empty() {
        return Err(Error::shape(
            "heuristic_pdf",
            format!("{} weights for {} samples", weights.len(), t.len()),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Invalid(format!("negative coarse weight {w}")));
    }
    let mut edges = Vec::with_capacity(t.len() + 1);
    edges.push(0.0);
    edges.extend(t.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    edges.push(1.0);
    PiecewisePdf::new(edges, weights.iter().map(|w| w + PDF_EPSILON).collect())
}

/// Maps `u` values in `[0, 1)` through the inverse CDF, interpolating
/// linearly inside bins.
fn invert(pdf: &PiecewisePdf, cdf: &[f64], u: f64) -> f64 {
    let n = pdf.masses.len();
    let k = (cdf.partition_point(|&c| c <= u).clamp(1, n + 1) - 1).min(n - 1);
    let (lo, hi) = (pdf.edges[k], pdf.edges[k + 1]);
    let m = pdf.masses[k];
    if m <= 0.0 {
        return lo;
    }
    (lo + (u - cdf[k]) / m * (hi - lo)).clamp(lo, hi)
}

/// Draws `n` sorted depths from `pdf`.
///
/// Deterministic mode uses `u = (i + 0.5) / n`; otherwise one uniform draw
/// per stratum `[i / n, (i + 1) / n)`.
pub fn inverse_cdf_sample(
    pdf: &PiecewisePdf,
    n: usize,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<SamplePositions> {
    let cdf = pdf.cdf();
    let inv = 1.0 / n as f64;
    let t = (0..n)
        .map(|i| {
            let j = if deterministic { 0.5 } else { rng.gen::<f64>() };
            invert(pdf, &cdf, ((i as f64 + j) * inv).min(1.0))
        })
        .collect();
    SamplePositions::new(t, Provenance::Heuristic)
}

/// Which input list a merged sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Coarse(usize),
    Fine(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Merged {
    pub samples: SamplePositions,
    pub sources: Vec<Source>,
}

impl Merged {
    /// Positions in `coarse ++ fine` for each merged sample, suitable as a
    /// gather index.
    pub fn concat_index(&self, n_coarse: usize) -> Vec<usize> {
        self.sources
            .iter()
            .map(|s| match *s {
                Source::Coarse(i) => i,
                Source::Fine(j) => n_coarse + j,
            })
            .collect()
    }
}

/// Sorted union keeping duplicates; coarse samples precede equal fine ones.
pub fn merge_and_sort(coarse: &SamplePositions, fine: &SamplePositions) -> Merged {
    let (a, b) = (coarse.t(), fine.t());
    let mut t = Vec::with_capacity(a.len() + b.len());
    let mut sources = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] <= b[j]) {
            t.push(a[i]);
            sources.push(Source::Coarse(i));
            i += 1;
        } else {
            t.push(b[j]);
            sources.push(Source::Fine(j));
            j += 1;
        }
    }
    Merged {
        samples: SamplePositions {
            t,
            provenance: Provenance::Merged,
        },
        sources,
    }
}

/// Stable argsort of `values`.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Deterministic coarse-to-fine render of a field given as a function of
/// normalized depth returning `(sigma, rgb)`: `n_coarse` bin centers, then
/// `n_fine` heuristic samples, composited together.
pub fn two_pass_render(
    n_coarse: usize,
    n_fine: usize,
    background: [f64; 3],
    mut field: impl FnMut(f64) -> (f64, [f64; 3]),
) -> Result<RenderResult> {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let coarse = stratified_sample(n_coarse, &mut unused, false)?;
    let (s, c): (Vec<f64>, Vec<[f64; 3]>) = coarse.t().iter().map(|&t| field(t)).unzip();
    let first = render_ray(&coarse, &s, &c, background)?;
    let pdf = heuristic_pdf(&first.weights, &coarse)?;
    let fine = inverse_cdf_sample(&pdf, n_fine, &mut unused, true)?;
    let merged = merge_and_sort(&coarse, &fine).samples;
    let (s, c): (Vec<f64>, Vec<[f64; 3]>) = merged.t().iter().map(|&t| field(t)).unzip();
    render_ray(&merged, &s, &c, background)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcore::check::check_flat;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn positions(t: &[f64]) -> SamplePositions {
        SamplePositions::new(t.to_vec(), Provenance::Stratified).unwrap()
    }

    #[test]
    fn stratified_examples() {
        let s = stratified_sample(4, &mut rng(0), false).unwrap();
        assert_eq!(s.t(), &[0.125, 0.375, 0.625, 0.875]);
        for seed in 0..100 {
            let s = stratified_sample(2, &mut rng(seed), true).unwrap();
            assert!((0.0..0.5).contains(&s.t()[0]) && (0.5..1.0).contains(&s.t()[1]));
        }
        assert!(stratified_sample(1, &mut rng(0), false).is_err());
    }

    #[test]
    fn render_examples() {
        let t = positions(&[0.2, 0.6]);
        let r = render_ray(&t, &[0.0, 0.0], &[[0.3; 3]; 2], [1.0, 0.5, 0.0]).unwrap();
        assert_eq!(r.weights, vec![0.0, 0.0]);
        assert_eq!(r.color, [1.0, 0.5, 0.0]);

        let t = positions(&[0.5]);
        let r = render_ray(&t, &[2.0 * std::f64::consts::LN_2], &[[1.0, 0.0, 0.2]], [0.0, 1.0, 0.4]).unwrap();
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.color[0] - 0.5).abs() < 1e-15 && (r.color[1] - 0.5).abs() < 1e-15);
        assert!((r.color[2] - 0.3).abs() < 1e-15);

        let t = positions(&[0.25, 0.75]);
        let r = render_ray(&t, &[1.0, 1.0], &[[0.1, 0.2, 0.3]; 2], [0.0; 3]).unwrap();
        assert!((r.weights[0] - 0.393_469_340_287_366_6).abs() < 1e-15);
        assert!((r.weights[1] - 0.134_164_106_971_618_7).abs() < 1e-15);
        assert_eq!(r.transmittance[0], 1.0);
    }

    #[test]
    fn render_rejects_unsorted_depths() {
        assert!(SamplePositions::new(vec![0.5, 0.2], Provenance::Merged).is_err());
        assert!(SamplePositions::new(vec![1.5], Provenance::Merged).is_err());
    }

    #[test]
    fn pdf_examples() {
        let t = positions(&[0.125, 0.375, 0.625, 0.875]);
        let pdf = heuristic_pdf(&[0.3; 4], &t).unwrap();
        assert!(pdf.masses().iter().all(|m| (m - 0.25).abs() < 1e-15));
        assert_eq!(pdf.edges(), &[0.0, 0.25, 0.5, 0.75, 1.0]);

        let pdf = heuristic_pdf(&[0.0, 1.0, 0.0, 0.0], &t).unwrap();
        assert!(pdf.masses()[1] >= 0.9999);

        let pdf = heuristic_pdf(&[1.0, 3.0], &positions(&[0.25, 0.75])).unwrap();
        assert_eq!(pdf.edges(), &[0.0, 0.5, 1.0]);
        let want = [(1.0 + 1e-5) / (4.0 + 2e-5), (3.0 + 1e-5) / (4.0 + 2e-5)];
        assert!((pdf.masses()[0] - want[0]).abs() < 1e-15 && (pdf.masses()[1] - want[1]).abs() < 1e-15);

        let pdf = heuristic_pdf(&[0.0; 3], &positions(&[0.1, 0.5, 0.9])).unwrap();
        assert!(pdf.masses().iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn inverse_cdf_examples() {
        let uniform = PiecewisePdf::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        let s = inverse_cdf_sample(&uniform, 4, &mut rng(0), true).unwrap();
        assert_eq!(s.t(), &[0.125, 0.375, 0.625, 0.875]);

        let narrow = PiecewisePdf::new(vec![0.0, 0.5, 0.6, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        for det in [true, false] {
            let s = inverse_cdf_sample(&narrow, 64, &mut rng(1), det).unwrap();
            assert!(s.t().iter().all(|t| (0.5..=0.6).contains(t)), "{:?}", s.t());
        }
    }

    #[test]
    fn uniform_weights_reproduce_stratified_exactly() {
        for (n_c, n_f) in [(4, 8), (32, 64), (64, 128), (3, 7), (10, 30)] {
            let coarse = stratified_sample(n_c, &mut rng(0), false).unwrap();
            let pdf = heuristic_pdf(&vec![0.7; n_c], &coarse).unwrap();
            let fine = inverse_cdf_sample(&pdf, n_f, &mut rng(0), true).unwrap();
            let strat = stratified_sample(n_f, &mut rng(0), false).unwrap();
            for (a, b) in fine.t().iter().zip(strat.t()) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn merge_examples() {
        let m = merge_and_sort(&positions(&[0.2, 0.8]), &positions(&[0.5]));
        assert_eq!(m.samples.t(), &[0.2, 0.5, 0.8]);
        assert_eq!(m.sources, vec![Source::Coarse(0), Source::Fine(0), Source::Coarse(1)]);
        assert_eq!(m.concat_index(2), vec![0, 2, 1]);
        let m = merge_and_sort(&positions(&[0.5]), &positions(&[0.5]));
        assert_eq!(m.samples.t(), &[0.5, 0.5]);
        assert_eq!(m.sources, vec![Source::Coarse(0), Source::Fine(0)]);
    }

    #[test]
    fn merge_matches_independent_sort() {
        let mut r = rng(5);
        for _ in 0..50 {
            let mut a: Vec<f64> = (0..64).map(|_| r.gen()).collect();
            let mut b: Vec<f64> = (0..128).map(|_| r.gen()).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let m = merge_and_sort(&positions(&a), &positions(&b));
            let mut all = [a.clone(), b.clone()].concat();
            all.sort_by(f64::total_cmp);
            assert_eq!(m.samples.t(), all.as_slice());
            let cat = [a, b].concat();
            for (k, idx) in m.concat_index(64).into_iter().enumerate() {
                assert_eq!(cat[idx], m.samples.t()[k]);
            }
        }
    }

    fn render_loss(t: &[f64], sigma: &[f64], color: &[f64], bg: [f64; 3]) -> Result<(f64, Vec<f64>)> {
        let n = t.len();
        let mut tape = Tape::<f64>::new();
        let tv = tape.param(Tensor::from_f64(vec![1, n], t)?)?;
        let sv = tape.param(Tensor::from_f64(vec![1, n], sigma)?)?;
        let cv = tape.param(Tensor::from_f64(vec![1, n, 3], color)?)?;
        let out = render_batch(&mut tape, tv, sv, cv, bg)?;
        let probe = tape.constant(Tensor::from_f64(vec![1, 3], &[0.7, -1.3, 0.4])?)?;
        let l = tape.mul(out.color, probe)?;
        let l = tape.sum(l, None)?;
        let v = tape.value(l).item().unwrap();
        let g = tape.backward(l)?;
        let grad = [g.wrt(&tape, tv).to_f64(), g.wrt(&tape, sv).to_f64(), g.wrt(&tape, cv).to_f64()].concat();
        Ok((v, grad))
    }

    #[test]
    fn tape_render_matches_scalar_render_and_finite_differences() {
        let mut r = rng(9);
        for _ in 0..20 {
            let n = 5;
            let mut t: Vec<f64> = (0..n).map(|_| r.gen_range(0.02..0.98)).collect();
            t.sort_by(f64::total_cmp);
            let sigma: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..8.0)).collect();
            let color: Vec<f64> = (0..3 * n).map(|_| r.gen()).collect();
            let bg = [1.0, 0.0, 0.5];
            let cols: Vec<[f64; 3]> = color.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let want = render_ray(&positions(&t), &sigma, &cols, bg).unwrap();
            let mut tape = Tape::<f64>::new();
            let tv = tape.constant(Tensor::from_f64(vec![1, n], &t).unwrap()).unwrap();
            let sv = tape.constant(Tensor::from_f64(vec![1, n], &sigma).unwrap()).unwrap();
            let cv = tape.constant(Tensor::from_f64(vec![1, n, 3], &color).unwrap()).unwrap();
            let out = render_batch(&mut tape, tv, sv, cv, bg).unwrap();
            for k in 0..3 {
                assert!((tape.value(out.color).data()[k] - want.color[k]).abs() < 1e-12);
            }
            for i in 0..n {
                assert!((tape.value(out.weights).data()[i] - want.weights[i]).abs() < 1e-12);
            }

            let x = [t.clone(), sigma.clone(), color.clone()].concat();
            let (_, analytic) = render_loss(&t, &sigma, &color, bg).unwrap();
            let report = check_flat("render", &x, &analytic, |x| {
                Ok(render_loss(&x[..n], &x[n..2 * n], &x[2 * n..], bg)?.0)
            })
            .unwrap();
            assert!(report.passed(), "{:?}", report.mismatches);
        }
    }

    #[test]
    fn saturation_limits() {
        let t = positions(&[0.1, 0.4, 0.7]);
        let r = render_ray(&t, &[1e4, 0.0, 0.0], &[[0.2; 3]; 3], [1.0; 3]).unwrap();
        assert!((r.accumulated_alpha - 1.0).abs() < 1e-12);
        let r = render_ray(&t, &[1e-12; 3], &[[0.2; 3]; 3], [1.0; 3]).unwrap();
        assert!(r.accumulated_alpha < 1e-11);
    }

    proptest! {
        #[test]
        fn weights_are_valid_and_compositing_is_associative(
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..20.0, 0.0f64..1.0), 1..40),
            split in 0usize..40,
        ) {
            let mut t: Vec<f64> = raw.iter().map(|r| r.0).collect();
            t.sort_by(f64::total_cmp);
            let sigma: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let colors: Vec<[f64; 3]> = raw.iter().map(|r| [r.2, 1.0 - r.2, 0.5]).collect();
            let bg = [0.3, 0.6, 0.9];
            let r = render_ray(&positions(&t), &sigma, &colors, bg).unwrap();
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            prop_assert!(r.accumulated_alpha <= 1.0 + 1e-5);
            prop_assert_eq!(r.transmittance[0], 1.0);
            prop_assert!(r.transmittance.windows(2).all(|p| p[1] <= p[0]));

            let alphas: Vec<f64> = deltas(&t).iter().zip(&sigma).map(|(d, s)| 1.0 - (-s * d).exp()).collect();
            let k = split.min(t.len());
            let (ca, ta) = composite_segment(&alphas[..k], &colors[..k]);
            let (cb, tb) = composite_segment(&alphas[k..], &colors[k..]);
            for c in 0..3 {
                let chained = ca[c] + ta * cb[c] + ta * tb * bg[c];
                prop_assert!((chained - r.color[c]).abs() < 1e-6);
            }
        }

        #[test]
        fn inverse_cdf_output_is_sorted_and_in_support(
            w in prop::collection::vec(0.0f64..5.0, 2..20),
            n in 1usize..50,
            seed in 0u64..1000,
        ) {
            let coarse = stratified_sample(w.len(), &mut rng(seed), true).unwrap();
            let pdf = heuristic_pdf(&w, &coarse).unwrap();
            let s = inverse_cdf_sample(&pdf, n, &mut rng(seed), false).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert!(s.t().windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
