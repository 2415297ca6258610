//! Two-stage optimisation of the coarse field, fine field and proposer.

mod config;
mod losses;
mod model;
mod optim;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, ProposerDims, RunConfig, Sampler, TrainConfig, TrainingMode, PRESETS};
pub use losses::{
    balanced_labels, greedy_assignment, greedy_match_loss, greedy_match_loss_var, importance_loss, importance_loss_var,
    mse_var, MatchDistance,
};
pub use model::{
    render_rays, rng_stream, step_loss, LossTerms, LossValues, Model, RayBatch, RayRenders, Stage, StepSettings,
    RENDER_CHUNK,
};
pub use optim::{learning_rate, Adam, BETA1, BETA2, EPSILON};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, ParamStore, Real};
use crate::metrics::{psnr, psnr_from_mse, ssim};
use crate::render::Ray;
use crate::scenes::{Dataset, Image, View};

/// Step counters and early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Steps completed.
    pub step: usize,
    pub stage: Stage,
    /// Step at which the current stage (and its warmup) began.
    pub stage_start: usize,
    pub rays_consumed: u64,
    pub best_val_psnr: Option<f64>,
    pub best_step: Option<usize>,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Steps completed after this one.
    pub step: usize,
    pub stage: Stage,
    pub losses: LossValues,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,stage,loss_coarse,loss_fine,loss_match,loss_importance,lr,val_psnr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.number(),
            self.losses.coarse,
            self.losses.fine,
            opt(self.losses.matching),
            opt(self.losses.importance),
            self.lr,
            opt(self.val_psnr)
        )
    }
}

/// Pixels of one validation image at the configured stride.
#[derive(Clone, Debug)]
struct ValidationSet {
    rays: Vec<Ray>,
    target: Vec<[f64; 3]>,
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub progress: Progress,
    /// Parameters at the best validation PSNR so far.
    pub best: Option<ParamStore<T>>,
    rng: ChaCha8Rng,
    rays: Vec<Ray>,
    colors: Vec<[f64; 3]>,
    validation: ValidationSet,
}

fn pixel(img: &Image, x: usize, y: usize) -> [f64; 3] {
    img.pixel(x, y).map(|v| v as f64)
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        Self::with_model(config, model, dataset)
    }

    /// Starts training from an existing model (its parameters are kept).
    pub fn with_model(config: RunConfig, model: Model<T>, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() || dataset.val.is_empty() {
            return Err(Error::Config("training needs non-empty train and val splits".into()));
        }
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for v in &dataset.train {
            for y in 0..v.image.height() {
                for x in 0..v.image.width() {
                    rays.push(v.ray(x, y)?);
                    colors.push(pixel(&v.image, x, y));
                }
            }
        }
        let t = &config.train;
        let mut pick = rng_stream(t.seed, model::VALIDATION_STREAM);
        let k = t.val_images.min(dataset.val.len());
        let mut chosen = sample(&mut pick, dataset.val.len(), k).into_vec();
        chosen.sort_unstable();
        let mut validation = ValidationSet { rays: Vec::new(), target: Vec::new() };
        for i in chosen {
            let v: &View = &dataset.val[i];
            for y in (0..v.image.height()).step_by(t.val_stride) {
                for x in (0..v.image.width()).step_by(t.val_stride) {
                    validation.rays.push(v.ray(x, y)?);
                    validation.target.push(pixel(&v.image, x, y));
                }
            }
        }
        let stage = match (t.mode, model.proposer.is_some()) {
            (TrainingMode::Scratch, true) => Stage::Two,
            _ => Stage::One,
        };
        Ok(Self {
            adam: Adam::new(&model.store),
            progress: Progress {
                step: 0,
                stage,
                stage_start: 0,
                rays_consumed: 0,
                best_val_psnr: None,
                best_step: None,
            },
            best: None,
            rng: rng_stream(t.seed, model::DATA_STREAM),
            rays,
            colors,
            validation,
            model,
            config,
        })
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings {
            stage: self.progress.stage,
            background: self.config.scene.background.rgb(),
            density_noise_std: self.config.scene.density_noise_std,
            importance_threshold: self.config.train.importance_threshold,
            match_distance: self.config.train.match_distance,
            stage1_isolation: self.config.train.stage1_isolation,
            terms: LossTerms::default(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.progress.step >= self.config.train.total_steps
    }

    /// True when the next step starts stage 2.
    fn switch_due(&self) -> bool {
        let t = &self.config.train;
        self.progress.stage == Stage::One
            && t.mode == TrainingMode::TwoStage
            && self.model.proposer.is_some()
            && self.progress.step == t.stage1_steps()
    }

    /// Enters stage 2: zeroes the optimizer moments and restarts the warmup.
    pub fn switch_stage(&mut self) -> Result<()> {
        if self.progress.stage != Stage::One || self.model.proposer.is_none() {
            return Err(Error::Invalid("stage switch needs stage 1 and a learnt proposer".into()));
        }
        self.adam.reset();
        self.progress.stage = Stage::Two;
        self.progress.stage_start = self.progress.step;
        Ok(())
    }

    pub fn current_lr(&self) -> f64 {
        let t = &self.config.train;
        learning_rate(t.lr_peak, t.warmup_steps, t.total_steps, self.progress.step, self.progress.stage_start)
    }

    fn next_batch(&mut self) -> RayBatch {
        let n = self.config.train.batch_rays;
        let mut batch = RayBatch { rays: Vec::with_capacity(n), target: Vec::with_capacity(n) };
        for _ in 0..n {
            let i = self.rng.gen_range(0..self.rays.len());
            batch.rays.push(self.rays[i]);
            batch.target.push(self.colors[i]);
        }
        batch
    }

    /// One optimisation step, switching stage and validating when due.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::Invalid("training already finished".into()));
        }
        if self.switch_due() {
            self.switch_stage()?;
        }
        let lr = self.current_lr();
        let batch = self.next_batch();
        let settings = self.settings();
        let (losses, grads) = {
            let mut g = Graph::new(&self.model.store);
            let (loss, values) = step_loss(&self.model, &mut g, &batch, &settings, &mut self.rng)?;
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.progress.step });
            }
            let grads = g.backward(loss)?;
            (values, g.param_grads(&grads))
        };
        self.adam.update(&mut self.model.store, &grads, lr)?;
        self.progress.step += 1;
        self.progress.rays_consumed += batch.rays.len() as u64;

        let t = &self.config.train;
        let val_psnr = if self.progress.step % t.val_every == 0 || self.is_finished() {
            Some(self.validate()?)
        } else {
            None
        };
        Ok(StepRecord { step: self.progress.step, stage: self.progress.stage, losses, lr, val_psnr })
    }

    /// PSNR on the validation pixels; keeps the parameters if it is the best so far.
    pub fn validate(&mut self) -> Result<f64> {
        let out = render_rays(&self.model, &self.validation.rays, self.config.scene.background.rgb(), None)?;
        let mse = out
            .colors
            .iter()
            .zip(&self.validation.target)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (3 * out.colors.len()) as f64;
        let p = psnr_from_mse(mse);
        if self.progress.best_val_psnr.map_or(true, |best| p > best) {
            self.progress.best_val_psnr = Some(p);
            self.progress.best_step = Some(self.progress.step);
            self.best = Some(self.model.store.clone());
        }
        Ok(p)
    }

    /// Trains to the end, reporting every logged or validated step.
    pub fn run(&mut self, mut on_record: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let rec = self.step()?;
            if rec.step % self.config.train.log_every == 0 || rec.val_psnr.is_some() {
                on_record(self, &rec)?;
            }
        }
        Ok(())
    }

    /// The trained model: best-validation parameters under early stopping.
    pub fn final_model(&self) -> Model<T> {
        let mut model = self.model.clone();
        if self.config.train.early_stopping {
            if let Some(best) = &self.best {
                model.store = best.clone();
            }
        }
        model
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub(crate) fn restore(&mut self, adam: Adam<T>, progress: Progress, word_pos: u128, best: Option<ParamStore<T>>) {
        self.adam = adam;
        self.progress = progress;
        self.rng.set_word_pos(word_pos);
        self.best = best;
    }
}

/// Renders a full view.
pub fn render_view<T: Real>(
    model: &Model<T>,
    view: &View,
    background: [f64; 3],
    threshold: Option<f64>,
) -> Result<(Image, RayRenders)> {
    let cam = &view.camera;
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            rays.push(view.ray(x, y)?);
        }
    }
    let out = render_rays(model, &rays, background, threshold)?;
    let data = out.colors.iter().flat_map(|c| c.map(|v| v as f32)).collect();
    Ok((Image::new(cam.width, cam.height, data)?, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub kept_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fine_evaluations: usize,
    pub candidates: usize,
}

impl EvalReport {
    pub fn kept_fraction(&self) -> f64 {
        self.fine_evaluations as f64 / self.candidates.max(1) as f64
    }

    /// `image,psnr,ssim` rows plus a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.images {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.name, r.psnr, r.ssim));
        }
        s.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

/// PSNR and SSIM of every view against its ground truth.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    views: &[View],
    background: [f64; 3],
    threshold: Option<f64>,
) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::Invalid("nothing to evaluate: empty split".into()));
    }
    let mut images = Vec::with_capacity(views.len());
    let (mut evals, mut cands) = (0, 0);
    for v in views {
        let (img, out) = render_view(model, v, background, threshold)?;
        if (img.width(), img.height()) != (v.image.width(), v.image.height()) {
            return Err(Error::Invalid(format!("resolution mismatch for {}", v.name)));
        }
        evals += out.fine_evaluations;
        cands += out.candidates;
        images.push(ImageScore {
            name: v.name.clone(),
            psnr: psnr(&img, &v.image)?,
            ssim: ssim(&img, &v.image)?,
            kept_fraction: out.kept_fraction(),
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_psnr: images.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
        images,
        fine_evaluations: evals,
        candidates: cands,
    })
}
