//! Positional encoding and the coarse/fine radiance-field MLPs.
//!
//! A [`FieldNetwork`] maps an encoded world position through a ReLU trunk
//! (with the encoded position re-injected at the skip layer) to a feature
//! vector. Density is a ReLU projection of that feature; color additionally
//! sees the encoded view direction, so density and feature are independent
//! of the direction by construction.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Linear, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub num_frequencies_position: usize,
    pub num_frequencies_direction: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies_position: 10,
            num_frequencies_direction: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies_position == 0 || self.num_frequencies_direction == 0 {
            return Err(Error::Config("encoding frequencies must be >= 1".into()));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_dim(3, self.num_frequencies_position, self.include_input)
    }

    pub fn direction_dim(&self) -> usize {
        encoded_dim(3, self.num_frequencies_direction, self.include_input)
    }
}

pub fn encoded_dim(d: usize, num_frequencies: usize, include_input: bool) -> usize {
    d * (2 * num_frequencies + usize::from(include_input))
}

/// `[x] ++ [sin(2^k πx), cos(2^k πx)]` for `k = 0..L`, each block elementwise over `x`.
pub fn positional_encode(x: &[f64], num_frequencies: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(x.len(), num_frequencies, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for k in 0..num_frequencies {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

/// Tape version of [`positional_encode`] applied row-wise to `x: [m, d]`.
pub fn encode_rows<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    num_frequencies: usize,
    include_input: bool,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * num_frequencies + 1);
    if include_input {
        parts.push(x);
    }
    for k in 0..num_frequencies {
        let scaled = tape.scale(x, (1u64 << k) as f64 * std::f64::consts::PI)?;
        parts.push(tape.sin(scaled)?);
        parts.push(tape.cos(scaled)?);
    }
    tape.concat(&parts, 1)
}

/// Architecture of one radiance-field network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Number of trunk layers.
    pub depth: usize,
    pub width: usize,
    /// Zero-based trunk layer whose input is `[h, encoded position]`.
    pub skip_layer: usize,
    pub color_width: usize,
    pub encoding: EncodingConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip_layer: 4,
            color_width: 128,
            encoding: EncodingConfig::default(),
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config("field dimensions must be >= 1".into()));
        }
        if self.skip_layer == 0 || self.skip_layer >= self.depth {
            return Err(Error::Config(format!(
                "skip_layer must be in 1..{}, got {}",
                self.depth, self.skip_layer
            )));
        }
        Ok(())
    }

    /// Scalar parameter count of one network.
    pub fn parameter_count(&self) -> usize {
        let p = self.encoding.position_dim();
        let d = self.encoding.direction_dim();
        let w = self.width;
        let mut n = 0;
        for i in 0..self.depth {
            let fan_in = match i {
                0 => p,
                i if i == self.skip_layer => w + p,
                _ => w,
            };
            n += fan_in * w + w;
        }
        n + (w + 1) + (w + d) * self.color_width + self.color_width + self.color_width * 3 + 3
    }
}

/// Per-point output of a field query, materialised as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// Tape nodes produced by [`FieldNetwork::forward`] for `m` points.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `[m, 1]`, non-negative.
    pub sigma: Var,
    /// `[m, 3]` in `[0, 1]`.
    pub color: Var,
    /// `[m, width]` activations feeding the density projection.
    pub feature: Var,
}

/// Handles to one field's parameters inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FieldNetwork {
    config: FieldConfig,
    trunk: Vec<Linear>,
    density: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

impl FieldNetwork {
    /// Registers a freshly initialised network under `prefix`.
    ///
    /// Trunk layers use He-style uniform bounds `sqrt(6 / fan_in)`; heads use
    /// `sqrt(1 / fan_in)`. Biases start at zero.
    pub fn new<T: Real>(
        config: FieldConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.encoding.position_dim();
        let d = config.encoding.direction_dim();
        let w = config.width;
        let trunk = (0..config.depth)
            .map(|i| {
                let fan_in = match i {
                    0 => p,
                    i if i == config.skip_layer => w + p,
                    _ => w,
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                Linear::new(store, &format!("{prefix}.trunk{i}"), fan_in, w, bound, rng)
            })
            .collect();
        let head = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let density = Linear::new(store, &format!("{prefix}.density"), w, 1, head(w), rng);
        let color_hidden = Linear::new(
            store,
            &format!("{prefix}.color0"),
            w + d,
            config.color_width,
            (6.0 / (w + d) as f64).sqrt(),
            rng,
        );
        let color_out = Linear::new(
            store,
            &format!("{prefix}.color1"),
            config.color_width,
            3,
            head(config.color_width),
            rng,
        );
        Ok(Self {
            config,
            trunk,
            density,
            color_hidden,
            color_out,
        })
    }

    /// Re-binds handles to an existing store laid out by [`FieldNetwork::new`].
    pub fn bind<T: Real>(config: FieldConfig, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let dense = |name: String| Linear::bind(store, &name);
        Ok(Self {
            config,
            trunk: (0..config.depth)
                .map(|i| dense(format!("{prefix}.trunk{i}")))
                .collect::<Result<_>>()?,
            density: dense(format!("{prefix}.density"))?,
            color_hidden: dense(format!("{prefix}.color0"))?,
            color_out: dense(format!("{prefix}.color1"))?,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn density_weight(&self) -> ParamId {
        self.density.w
    }

    pub fn density_bias(&self) -> ParamId {
        self.density.b
    }

    /// Parameter ids of trunk layer `i` as `(weight, bias)`.
    pub fn trunk_layer(&self, i: usize) -> (ParamId, ParamId) {
        (self.trunk[i].w, self.trunk[i].b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.trunk
            .iter()
            .chain([&self.density, &self.color_hidden, &self.color_out])
            .flat_map(Linear::ids)
            .collect()
    }

    /// Evaluates the field at `positions: [m, 3]` with unit `directions`.
    ///
    /// `noise`, when given, is added to the pre-ReLU density activations.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        positions: Var,
        directions: &Tensor<T>,
        noise: Option<&Tensor<T>>,
    ) -> Result<FieldVars> {
        let m = g.shape(positions)[0];
        if g.shape(positions) != [m, 3] || directions.shape() != [m, 3] {
            return Err(Error::shape(
                "query_field",
                format!(
                    "positions {:?}, directions {:?}",
                    g.shape(positions),
                    directions.shape()
                ),
            ));
        }
        check_unit_directions(directions)?;
        let enc = &self.config.encoding;
        let pos = encode_rows(g, positions, enc.num_frequencies_position, enc.include_input)?;
        let mut h = pos;
        for (i, layer) in self.trunk.iter().enumerate() {
            if i == self.config.skip_layer {
                h = g.concat(&[h, pos], 1)?;
            }
            h = layer.apply(g, h)?;
            h = g.relu(h)?;
        }
        let feature = h;
        let mut pre = self.density.apply(g, feature)?;
        if let Some(noise) = noise {
            let n = g.constant(noise.clone())?;
            pre = g.add(pre, n)?;
        }
        let sigma = g.relu(pre)?;
        let dirs = g.constant(directions.clone())?;
        let dir_enc = encode_rows(g, dirs, enc.num_frequencies_direction, enc.include_input)?;
        let c = g.concat(&[feature, dir_enc], 1)?;
        let c = self.color_hidden.apply(g, c)?;
        let c = g.relu(c)?;
        let c = self.color_out.apply(g, c)?;
        let color = g.sigmoid(c)?;
        Ok(FieldVars {
            sigma,
            color,
            feature,
        })
    }

    /// Non-differentiable convenience query returning per-point values.
    pub fn query<T: Real>(
        &self,
        store: &ParamStore<T>,
        positions: &[[f64; 3]],
        directions: &[[f64; 3]],
        density_noise_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<FieldOutput>> {
        let m = positions.len();
        if directions.len() != m {
            return Err(Error::shape(
                "query_field",
                format!("{m} positions, {} directions", directions.len()),
            ));
        }
        let flat = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
        let dirs = Tensor::from_f64(vec![m, 3], &flat(directions))?;
        let noise = density_noise(m, density_noise_std, rng)?;
        let mut g = Graph::new(store);
        let pos = g.constant(Tensor::from_f64(vec![m, 3], &flat(positions))?)?;
        let out = self.forward(&mut g, pos, &dirs, noise.as_ref())?;
        let sigma = g.value(out.sigma).to_f64();
        let color = g.value(out.color).to_f64();
        let feature = g.value(out.feature).to_f64();
        let w = self.config.width;
        Ok((0..m)
            .map(|i| FieldOutput {
                sigma: sigma[i],
                color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
                feature: feature[i * w..(i + 1) * w].to_vec(),
            })
            .collect())
    }
}

/// Gaussian pre-activation noise for `m` points, or `None` when `std == 0`.
pub fn density_noise<T: Real>(m: usize, std: f64, rng: &mut impl Rng) -> Result<Option<Tensor<T>>> {
    if std <= 0.0 {
        return Ok(None);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let data = (0..m).map(|_| T::of(normal.sample(rng))).collect();
    Ok(Some(Tensor::new(vec![m, 1], data)?))
}

fn check_unit_directions<T: Real>(directions: &Tensor<T>) -> Result<()> {
    for (i, d) in directions.data().chunks(3).enumerate() {
        let norm = d
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt();
        // 32-bit storage cannot represent the 1e-6 bound exactly.
        let tol = if T::NAME == "f32" { 1e-5 } else { 1e-6 };
        if !((norm - 1.0).abs() <= tol) {
            return Err(Error::Invalid(format!(
                "direction {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}
