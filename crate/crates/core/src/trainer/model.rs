use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::losses::{greedy_match_loss_var, importance_loss_var, mse_var, MatchDistance};
use crate::error::{Error, Result};
use crate::field::{density_noise, FieldNetwork};
use crate::gradcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::proposer::{importance_filter, merged_importance, Proposer};
use crate::render::{
    argsort, heuristic_pdf, inverse_cdf_sample, merge_and_sort, render_batch, render_ray, stratified_sample, Merged,
    Provenance, Ray, SamplePositions,
};

pub(crate) const COARSE_INIT_STREAM: u64 = 1;
pub(crate) const FINE_INIT_STREAM: u64 = 2;
pub(crate) const PROPOSER_INIT_STREAM: u64 = 3;
pub(crate) const DATA_STREAM: u64 = 4;
pub(crate) const VALIDATION_STREAM: u64 = 5;

/// Independent ChaCha8 stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Vanilla coarse/fine training; the proposer imitates the heuristic.
    One,
    /// Fine samples come from the learnt proposer.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Coarse field, fine field and optional proposer over one parameter store.
///
/// Parameters are registered coarse first, then fine, then proposer, each
/// initialised from its own random stream, so the fields are identical with
/// or without a proposer.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub coarse: FieldNetwork,
    pub fine: FieldNetwork,
    pub proposer: Option<Proposer>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let coarse = FieldNetwork::new(config.field, "coarse", &mut store, &mut rng_stream(seed, COARSE_INIT_STREAM))?;
        let fine = FieldNetwork::new(config.field, "fine", &mut store, &mut rng_stream(seed, FINE_INIT_STREAM))?;
        let proposer = match config.proposer_config() {
            Some(p) => Some(Proposer::new(p, "proposer", &mut store, &mut rng_stream(seed, PROPOSER_INIT_STREAM))?),
            None => None,
        };
        Ok(Self { config, store, coarse, fine, proposer })
    }

    pub fn has_importance(&self) -> bool {
        self.proposer.as_ref().is_some_and(|p| p.config().with_importance)
    }

    pub fn n_total(&self) -> usize {
        self.config.n_coarse + self.config.n_fine
    }
}

/// Training rays with their ground-truth colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub target: Vec<[f64; 3]>,
}

/// Which loss terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub coarse: bool,
    pub fine: bool,
    pub matching: bool,
    pub importance: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { coarse: true, fine: true, matching: true, importance: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub stage: Stage,
    pub background: [f64; 3],
    pub density_noise_std: f64,
    pub importance_threshold: f64,
    pub match_distance: MatchDistance,
    pub stage1_isolation: bool,
    pub terms: LossTerms,
}

/// Loss values of one step; proposer terms are absent without a proposer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub coarse: f64,
    pub fine: f64,
    pub matching: Option<f64>,
    pub importance: Option<f64>,
    pub total: f64,
}

fn flatten_points(rays: &[Ray], t: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::with_capacity(t.len() * 3);
    let mut dir = Vec::with_capacity(t.len() * 3);
    for (r, ray) in rays.iter().enumerate() {
        for &ti in &t[r * n..(r + 1) * n] {
            pos.extend(ray.at(ti));
            dir.extend(ray.direction);
        }
    }
    (pos, dir)
}

/// World positions `o + (near + t * span) d` as a differentiable function of `t` `[B, n]`.
fn positions_var<T: Real>(g: &mut Graph<'_, T>, rays: &[Ray], t: Var, n: usize) -> Result<Var> {
    let b = rays.len();
    let span: Vec<f64> = rays.iter().flat_map(|r| std::iter::repeat(r.span()).take(n)).collect();
    let near: Vec<f64> = rays.iter().flat_map(|r| std::iter::repeat(r.t_near).take(n)).collect();
    let origins: Vec<f64> = rays.iter().flat_map(|r| (0..n).flat_map(move |_| r.origin)).collect();
    let dirs: Vec<f64> = rays.iter().flat_map(|r| (0..n).flat_map(move |_| r.direction)).collect();
    let span = g.constant(Tensor::from_f64(vec![b, n], &span)?)?;
    let near = g.constant(Tensor::from_f64(vec![b, n], &near)?)?;
    let depth = g.mul(t, span)?;
    let depth = g.add(depth, near)?;
    let depth = g.reshape(depth, &[b * n, 1])?;
    let depth = g.broadcast_cols(depth, 3)?;
    let dirs = g.constant(Tensor::from_f64(vec![b * n, 3], &dirs)?)?;
    let offset = g.mul(depth, dirs)?;
    let origins = g.constant(Tensor::from_f64(vec![b * n, 3], &origins)?)?;
    g.add(offset, origins)
}

/// Sorts each row of `[B, n_fine]` proposals on the tape and merges them with
/// the constant coarse depths, returning merged depths `[B, n]` and the maps.
fn merge_proposals<T: Real>(
    g: &mut Graph<'_, T>,
    coarse: &[SamplePositions],
    t_coarse: Var,
    proposals: Var,
) -> Result<(Var, Vec<Merged>)> {
    let b = coarse.len();
    let nc = coarse[0].len();
    let nf = g.shape(proposals)[1];
    let n = nc + nf;
    let raw = g.value(proposals).to_f64();
    let mut order_index = Vec::with_capacity(b * nf);
    let mut merges = Vec::with_capacity(b);
    for (r, c) in coarse.iter().enumerate() {
        let row = &raw[r * nf..(r + 1) * nf];
        let order = argsort(row);
        let sorted: Vec<f64> = order.iter().map(|&j| row[j]).collect();
        order_index.extend(order.iter().map(|&j| r * nf + j));
        merges.push(merge_and_sort(c, &SamplePositions::new(sorted, Provenance::Proposed)?));
    }
    let sorted = g.gather(proposals, order_index, &[b, nf])?;
    let both = g.concat(&[t_coarse, sorted], 1)?;
    let index = merges
        .iter()
        .enumerate()
        .flat_map(|(r, m)| m.concat_index(nc).into_iter().map(move |i| r * n + i))
        .collect();
    Ok((g.gather(both, index, &[b, n])?, merges))
}

fn repeat_dirs(rays: &[Ray], n: usize) -> Vec<f64> {
    rays.iter().flat_map(|r| (0..n).flat_map(move |_| r.direction)).collect()
}

/// Builds the training loss of one batch on `g`.
///
/// Random draws are taken from `rng` in a fixed order: coarse jitter, coarse
/// density noise, fine density noise, then (stage 1) heuristic fine samples.
pub fn step_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    batch: &RayBatch,
    s: &StepSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossValues)> {
    let b = batch.rays.len();
    if b == 0 || batch.target.len() != b {
        return Err(Error::shape("train_step", format!("{b} rays, {} targets", batch.target.len())));
    }
    let (nc, nf) = (model.config.n_coarse, model.config.n_fine);
    let n = nc + nf;
    let proposer = model.proposer.as_ref();
    if s.stage == Stage::Two && proposer.is_none() {
        return Err(Error::Invalid("stage 2 needs a learnt proposer".into()));
    }

    let coarse = (0..b).map(|_| stratified_sample(nc, rng, true)).collect::<Result<Vec<_>>>()?;
    let noise_c = density_noise::<T>(b * nc, s.density_noise_std, rng)?;
    let noise_f = density_noise::<T>(b * n, s.density_noise_std, rng)?;
    let tc_flat: Vec<f64> = coarse.iter().flat_map(|c| c.t().iter().copied()).collect();
    let tc = Tensor::<T>::from_f64(vec![b, nc], &tc_flat)?;
    let target = Tensor::<T>::from_f64(vec![b, 3], &batch.target.concat())?;

    let (pos, dir) = flatten_points(&batch.rays, &tc_flat, nc);
    let cpos = g.constant(Tensor::from_f64(vec![b * nc, 3], &pos)?)?;
    let cdir = Tensor::from_f64(vec![b * nc, 3], &dir)?;
    let cf = model.coarse.forward(g, cpos, &cdir, noise_c.as_ref())?;
    let tcv = g.constant(tc.clone())?;
    let cs = g.reshape(cf.sigma, &[b, nc])?;
    let cc = g.reshape(cf.color, &[b, nc, 3])?;
    let cr = render_batch(g, tcv, cs, cc, s.background)?;
    let loss_c = mse_var(g, cr.color, &target)?;
    let coarse_w = g.value(cr.weights).to_f64();

    let proposal = match proposer {
        Some(p) => {
            let w = model.config.field.width;
            let feat = g.reshape(cf.feature, &[b, nc, w])?;
            let feat = if s.stage == Stage::One && s.stage1_isolation { g.stop_gradient(feat)? } else { feat };
            Some(p.forward(g, feat, &tc)?)
        }
        None => None,
    };

    let (t_merged, merges, heuristic) = match (s.stage, proposal) {
        (Stage::Two, Some(p)) => {
            let (t, m) = merge_proposals(g, &coarse, tcv, p.t_fine)?;
            (t, m, None)
        }
        _ => {
            let mut merges = Vec::with_capacity(b);
            let mut fine_flat = Vec::with_capacity(b * nf);
            for (r, c) in coarse.iter().enumerate() {
                let pdf = heuristic_pdf(&coarse_w[r * nc..(r + 1) * nc], c)?;
                let fine = inverse_cdf_sample(&pdf, nf, rng, false)?;
                fine_flat.extend_from_slice(fine.t());
                merges.push(merge_and_sort(c, &fine));
            }
            let t: Vec<f64> = merges.iter().flat_map(|m| m.samples.t().iter().copied()).collect();
            let t = g.constant(Tensor::from_f64(vec![b, n], &t)?)?;
            (t, merges, Some(Tensor::<T>::from_f64(vec![b, nf], &fine_flat)?))
        }
    };

    let fpos = match s.stage {
        Stage::Two => positions_var(g, &batch.rays, t_merged, n)?,
        Stage::One => {
            let t = g.value(t_merged).to_f64();
            let (pos, _) = flatten_points(&batch.rays, &t, n);
            g.constant(Tensor::from_f64(vec![b * n, 3], &pos)?)?
        }
    };
    let fdir = Tensor::from_f64(vec![b * n, 3], &repeat_dirs(&batch.rays, n))?;
    let ff = model.fine.forward(g, fpos, &fdir, noise_f.as_ref())?;
    let fs = g.reshape(ff.sigma, &[b, n])?;
    let fc = g.reshape(ff.color, &[b, n, 3])?;
    let fr = render_batch(g, t_merged, fs, fc, s.background)?;
    let loss_f = mse_var(g, fr.color, &target)?;
    let fine_w = g.value(fr.weights).to_f64();

    let mut values = LossValues {
        coarse: g.value(loss_c).to_f64()[0],
        fine: g.value(loss_f).to_f64()[0],
        ..LossValues::default()
    };
    let mut terms = Vec::new();
    if s.terms.coarse {
        terms.push(loss_c);
    }
    if s.terms.fine {
        terms.push(loss_f);
    }
    if let (Some(p), Some(h)) = (proposal, heuristic.as_ref()) {
        if proposer.is_some() {
            let m = greedy_match_loss_var(g, h, p.t_fine, s.match_distance)?;
            values.matching = Some(g.value(m).to_f64()[0]);
            if s.terms.matching {
                terms.push(m);
            }
        }
    }
    if let Some(logits) = proposal.and_then(|p| p.importance) {
        let merged = merged_importance(g, logits, &merges)?;
        let l = importance_loss_var(g, merged, &fine_w, s.importance_threshold)?;
        values.importance = Some(g.value(l).to_f64()[0]);
        if s.terms.importance {
            terms.push(l);
        }
    }
    let mut total = *terms.first().ok_or_else(|| Error::Invalid("no loss terms selected".into()))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    values.total = g.value(total).to_f64()[0];
    Ok((total, values))
}

/// Result of rendering rays at inference time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayRenders {
    pub colors: Vec<[f64; 3]>,
    /// Fine-network evaluations performed.
    pub fine_evaluations: usize,
    /// Evaluations an unpruned render would perform.
    pub candidates: usize,
}

impl RayRenders {
    pub fn kept_fraction(&self) -> f64 {
        if self.candidates == 0 {
            1.0
        } else {
            self.fine_evaluations as f64 / self.candidates as f64
        }
    }
}

/// Rays per inference graph.
pub const RENDER_CHUNK: usize = 256;

/// Deterministic coarse-to-fine rendering: bin-center coarse samples, then
/// heuristic (deterministic inverse CDF) or learnt fine samples. With a
/// threshold, only samples kept by the importance filter reach the fine network.
pub fn render_rays<T: Real>(
    model: &Model<T>,
    rays: &[Ray],
    background: [f64; 3],
    threshold: Option<f64>,
) -> Result<RayRenders> {
    if threshold.is_some() && !model.has_importance() {
        return Err(Error::Invalid("model has no importance head; pruning needs one".into()));
    }
    let mut out = RayRenders::default();
    for chunk in rays.chunks(RENDER_CHUNK) {
        render_chunk(model, chunk, background, threshold, &mut out)?;
    }
    Ok(out)
}

fn render_chunk<T: Real>(
    model: &Model<T>,
    rays: &[Ray],
    background: [f64; 3],
    threshold: Option<f64>,
    out: &mut RayRenders,
) -> Result<()> {
    let b = rays.len();
    let (nc, nf) = (model.config.n_coarse, model.config.n_fine);
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let coarse = stratified_sample(nc, &mut unused, false)?;
    let tc_flat: Vec<f64> = (0..b).flat_map(|_| coarse.t().iter().copied()).collect();

    let mut g = Graph::new(&model.store);
    let (pos, dir) = flatten_points(rays, &tc_flat, nc);
    let cpos = g.constant(Tensor::from_f64(vec![b * nc, 3], &pos)?)?;
    let cf = model.coarse.forward(&mut g, cpos, &Tensor::from_f64(vec![b * nc, 3], &dir)?, None)?;
    let sigma = g.value(cf.sigma).to_f64();
    let color = g.value(cf.color).to_f64();

    let (fine_rows, logits) = match &model.proposer {
        Some(p) => {
            let feat = g.reshape(cf.feature, &[b, nc, model.config.field.width])?;
            let pv = p.forward(&mut g, feat, &Tensor::from_f64(vec![b, nc], &tc_flat)?)?;
            let raw = g.value(pv.t_fine).to_f64();
            let rows = raw
                .chunks(nf)
                .map(|row| {
                    let mut r = row.to_vec();
                    r.sort_by(f64::total_cmp);
                    r
                })
                .collect::<Vec<_>>();
            (rows, pv.importance.map(|v| g.value(v).to_f64()))
        }
        None => {
            let mut rows = Vec::with_capacity(b);
            for r in 0..b {
                let cols: Vec<[f64; 3]> = (0..nc).map(|i| {
                    let k = r * nc + i;
                    [color[3 * k], color[3 * k + 1], color[3 * k + 2]]
                }).collect();
                let res = render_ray(&coarse, &sigma[r * nc..(r + 1) * nc], &cols, background)?;
                let pdf = heuristic_pdf(&res.weights, &coarse)?;
                rows.push(inverse_cdf_sample(&pdf, nf, &mut unused, true)?.into_vec());
            }
            (rows, None)
        }
    };
    drop(g);

    let n = nc + nf;
    let mut samples = Vec::with_capacity(b);
    for (r, row) in fine_rows.into_iter().enumerate() {
        let merged = merge_and_sort(&coarse, &SamplePositions::new(row, Provenance::Proposed)?);
        let t = match threshold {
            Some(th) => {
                let z = logits.as_ref().expect("importance head checked");
                let ordered: Vec<f64> = merged.concat_index(nc).iter().map(|&i| z[r * n + i]).collect();
                importance_filter(&merged.samples, &ordered, th)?.samples
            }
            None => merged.samples,
        };
        samples.push(t);
    }

    let m: usize = samples.iter().map(SamplePositions::len).sum();
    let mut pos = Vec::with_capacity(3 * m);
    let mut dir = Vec::with_capacity(3 * m);
    for (ray, t) in rays.iter().zip(&samples) {
        for &ti in t.t() {
            pos.extend(ray.at(ti));
            dir.extend(ray.direction);
        }
    }
    let mut g = Graph::new(&model.store);
    let fpos = g.constant(Tensor::from_f64(vec![m, 3], &pos)?)?;
    let ff = model.fine.forward(&mut g, fpos, &Tensor::from_f64(vec![m, 3], &dir)?, None)?;
    let sigma = g.value(ff.sigma).to_f64();
    let color = g.value(ff.color).to_f64();
    let mut at = 0;
    for t in &samples {
        let k = t.len();
        let cols: Vec<[f64; 3]> = (at..at + k).map(|i| [color[3 * i], color[3 * i + 1], color[3 * i + 2]]).collect();
        out.colors.push(render_ray(t, &sigma[at..at + k], &cols, background)?.color);
        at += k;
    }
    out.fine_evaluations += m;
    out.candidates += b * n;
    Ok(())
}
