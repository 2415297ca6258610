//! Toy scenes with exact oracles, cameras, and posed-image datasets.

mod analytic;
mod camera;
mod image;
mod io;

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use analytic::{AnalyticScene, Primitive, Shape, MAX_QUADRATURE, MIN_QUADRATURE, QUADRATURE_TOL};
pub use camera::Camera;
pub use image::Image;
pub use io::{load_posed_images, save_dataset, MANIFEST_HEADER, MANIFEST_NAME};

use crate::error::{Error, Result};
use crate::render::Ray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    AnalyticSpheres,
    AnalyticBoxes,
    PosedImages,
}

/// Color returned by rays that escape the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    White,
    Black,
}

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::White => [1.0; 3],
            Background::Black => [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    /// Seed of the camera draws for analytic scenes.
    pub seed: u64,
    pub background: Background,
    /// Std of Gaussian noise added to raw density during training only.
    pub density_noise_std: f64,
    pub near: f64,
    pub far: f64,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub focal: f64,
    pub camera_radius: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub n_quad: usize,
    /// Dataset directory for `posed_images`.
    pub data_dir: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::AnalyticSpheres,
            seed: 0,
            background: Background::White,
            density_noise_std: 0.0,
            near: 2.0,
            far: 6.0,
            height: 64,
            width: 64,
            n_train: 20,
            n_val: 4,
            n_test: 8,
            focal: 90.0,
            camera_radius: 4.0,
            min_elevation_deg: -10.0,
            max_elevation_deg: 60.0,
            n_quad: MIN_QUADRATURE,
            data_dir: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.near < self.far) || !(self.near >= 0.0) {
            return bad(format!("need 0 <= near < far, got near {} far {}", self.near, self.far));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("resolution must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if !(self.density_noise_std >= 0.0) {
            return bad("density_noise_std must be >= 0".into());
        }
        if self.kind != SceneKind::PosedImages {
            if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
                return bad("split counts must be >= 1".into());
            }
            if !(self.focal > 0.0) || !(self.camera_radius > 0.0) {
                return bad("focal and camera_radius must be positive".into());
            }
            if !(self.min_elevation_deg <= self.max_elevation_deg) || self.max_elevation_deg.abs() >= 90.0 {
                return bad("elevation range must be ordered and inside (-90, 90)".into());
            }
            if self.n_quad < MIN_QUADRATURE {
                return bad(format!("n_quad must be >= {MIN_QUADRATURE}"));
            }
        } else if self.data_dir.is_none() {
            return bad("posed_images requires data_dir".into());
        }
        Ok(())
    }

    pub fn analytic_scene(&self) -> Option<AnalyticScene> {
        match self.kind {
            SceneKind::AnalyticSpheres => Some(AnalyticScene::desk_spheres()),
            SceneKind::AnalyticBoxes => Some(AnalyticScene::desk_boxes()),
            SceneKind::PosedImages => None,
        }
    }

    /// Generates the analytic dataset from `seed` or loads `data_dir`.
    pub fn dataset(&self) -> Result<Dataset> {
        self.validate()?;
        match self.analytic_scene() {
            Some(scene) => generate_dataset(&scene, self, &mut ChaCha8Rng::seed_from_u64(self.seed)),
            None => load_posed_images(self.data_dir.as_ref().expect("validated")),
        }
    }
}

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    pub image: Image,
}

impl View {
    pub fn ray(&self, px: usize, py: usize) -> Result<Ray> {
        self.camera.pixel_ray(px, py, self.near, self.far)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train|val|test)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub val: Vec<View>,
    pub test: Vec<View>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[View] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<View> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Renders every pixel of a camera with `shade`.
pub fn render_image(
    camera: &Camera,
    near: f64,
    far: f64,
    mut shade: impl FnMut(&Ray) -> Result<[f64; 3]>,
) -> Result<Image> {
    let mut img = Image::filled(camera.width, camera.height, [0.0; 3]);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let c = shade(&camera.pixel_ray(x, y, near, far)?)?;
            img.set_pixel(x, y, c.map(|v| v as f32));
        }
    }
    Ok(img)
}

/// Minimum share of pixels that must differ from the background.
pub const MIN_FOREGROUND: f64 = 0.01;
const MAX_ATTEMPTS: usize = 1000;

/// Fraction of pixels differing from `background` by more than one 8-bit level.
pub fn foreground_fraction(img: &Image, background: [f64; 3]) -> f64 {
    let n = img.width() * img.height();
    let hits = img
        .data()
        .chunks(3)
        .filter(|p| (0..3).any(|k| (p[k] as f64 - background[k]).abs() > 1.0 / 255.0))
        .count();
    hits as f64 / n as f64
}

/// Inward-facing camera at a random azimuth and elevation on a sphere.
pub fn random_camera(config: &SceneConfig, rng: &mut impl Rng) -> Result<Camera> {
    let azimuth = rng.gen_range(0.0..2.0 * PI);
    let (lo, hi) = (config.min_elevation_deg.to_radians(), config.max_elevation_deg.to_radians());
    let elevation = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let r = config.camera_radius;
    let eye = [
        r * elevation.cos() * azimuth.cos(),
        r * elevation.cos() * azimuth.sin(),
        r * elevation.sin(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], config.focal, config.width, config.height)
}

/// Posed train/val/test images of `scene` rendered by the converged oracle.
pub fn generate_dataset(scene: &AnalyticScene, config: &SceneConfig, rng: &mut impl Rng) -> Result<Dataset> {
    config.validate()?;
    let bg = config.background.rgb();
    let mut dataset = Dataset::default();
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.n_train,
            Split::Val => config.n_val,
            Split::Test => config.n_test,
        };
        for i in 0..count {
            let mut attempts = 0;
            let (camera, image) = loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::Invalid(format!(
                        "no camera out of {MAX_ATTEMPTS} sees {MIN_FOREGROUND} foreground"
                    )));
                }
                let camera = random_camera(config, rng)?;
                let image = render_image(&camera, config.near, config.far, |ray| {
                    scene.oracle_render(ray, config.n_quad, bg)
                })?;
                if foreground_fraction(&image, bg) >= MIN_FOREGROUND {
                    break (camera, image);
                }
            };
            dataset.split_mut(split).push(View {
                name: format!("{}/r_{i:03}.ppm", split.as_str()),
                camera,
                near: config.near,
                far: config.far,
                image,
            });
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests;
