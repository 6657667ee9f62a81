//! Radiance MLP: a ReLU trunk over the encoded position, a view-independent
//! density head, a linear feature layer, and a direction-conditioned color
//! branch. The same structure covers the tiny per-cell networks and the large
//! teacher; only widths, depth and the optional skip connection differ.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{affine, affine_grad_input, affine_grad_params};
use crate::real::Real;

pub const COLOR_DIM: usize = 3;
pub const DENSITY_DIM: usize = 1;

/// Shape of one radiance MLP.
///
/// With `hidden_layers = n >= 2` the network is `n - 2` ReLU trunk layers, a
/// linear feature layer and one ReLU layer that also receives the encoded
/// view direction. Density branches off the trunk output, so it never sees
/// the direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub direction_width: usize,
    /// Trunk layer whose input is `[h, x_enc]` instead of `h`.
    pub skip_layer: Option<usize>,
    pub position_input_dim: usize,
    pub direction_input_dim: usize,
}

impl MlpArchitecture {
    /// 4 hidden layers of 32 units, no skip connection.
    pub fn tiny(position_input_dim: usize, direction_input_dim: usize) -> Self {
        Self {
            hidden_layers: 4,
            hidden_width: 32,
            direction_width: 32,
            skip_layer: None,
            position_input_dim,
            direction_input_dim,
        }
    }

    /// The full-size reference network: nine 256-wide hidden layers (the
    /// ninth being the linear feature layer), a 128-wide direction layer, and
    /// the position re-injected into the sixth layer.
    pub fn full(position_input_dim: usize, direction_input_dim: usize) -> Self {
        Self::scaled_full(256, position_input_dim, direction_input_dim)
    }

    /// Full layout with every width scaled to `width` (direction layer gets
    /// half of it).
    pub fn scaled_full(width: usize, position_input_dim: usize, direction_input_dim: usize) -> Self {
        Self {
            hidden_layers: 10,
            hidden_width: width,
            direction_width: (width / 2).max(1),
            skip_layer: Some(5),
            position_input_dim,
            direction_input_dim,
        }
    }

    pub fn trunk_layers(&self) -> usize {
        self.hidden_layers.saturating_sub(2)
    }

    pub fn has_feature_layer(&self) -> bool {
        self.hidden_layers >= 2
    }

    pub fn has_direction_layer(&self) -> bool {
        self.hidden_layers >= 1
    }

    /// Index of the hidden layer that receives the view direction.
    pub fn direction_injection_layer(&self) -> Option<usize> {
        self.has_direction_layer().then(|| self.hidden_layers - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.position_input_dim == 0 || self.direction_input_dim == 0 {
            return Err(Error::InvalidConfig("network input dims must be positive".into()));
        }
        if self.hidden_layers > 0 && (self.hidden_width == 0 || self.direction_width == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.trunk_layers() {
                return Err(Error::InvalidConfig(format!(
                    "skip layer {s} outside trunk 1..{}",
                    self.trunk_layers()
                )));
            }
        }
        Ok(())
    }

    fn trunk_out_dim(&self) -> usize {
        if self.trunk_layers() > 0 {
            self.hidden_width
        } else {
            self.position_input_dim
        }
    }

    fn feature_dim(&self) -> usize {
        if self.has_feature_layer() {
            self.hidden_width
        } else {
            self.trunk_out_dim()
        }
    }

    fn head_in_dim(&self) -> usize {
        self.feature_dim() + self.direction_input_dim
    }

    fn color_in_dim(&self) -> usize {
        if self.has_direction_layer() {
            self.direction_width
        } else {
            self.head_in_dim()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Trunk(usize),
    Density,
    Feature,
    Direction,
    Color,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub role: LayerRole,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Offset of the `in_dim x out_dim` weight block in the flat parameters;
    /// the bias follows immediately.
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.weight_len()..self.offset + self.len()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn activation_elems(&self) -> usize {
        match self.role {
            LayerRole::Feature => 0,
            _ => self.out_dim,
        }
    }
}

/// Layer order and shapes of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub arch: MlpArchitecture,
    pub layers: Vec<LayerSpec>,
    pub param_count: usize,
    trunk: Vec<usize>,
    density: usize,
    feature: Option<usize>,
    direction: Option<usize>,
    color: usize,
}

impl Layout {
    pub fn new(arch: &MlpArchitecture) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |role, in_dim, out_dim| {
            layers.push(LayerSpec {
                role,
                in_dim,
                out_dim,
                offset,
            });
            offset += in_dim * out_dim + out_dim;
            layers.len() - 1
        };
        let mut trunk = Vec::new();
        let mut h = arch.position_input_dim;
        for t in 0..arch.trunk_layers() {
            let in_dim = if arch.skip_layer == Some(t) {
                h + arch.position_input_dim
            } else {
                h
            };
            trunk.push(push(LayerRole::Trunk(t), in_dim, arch.hidden_width));
            h = arch.hidden_width;
        }
        let density = push(LayerRole::Density, arch.trunk_out_dim(), DENSITY_DIM);
        let feature = arch
            .has_feature_layer()
            .then(|| push(LayerRole::Feature, arch.trunk_out_dim(), arch.hidden_width));
        let direction = arch
            .has_direction_layer()
            .then(|| push(LayerRole::Direction, arch.head_in_dim(), arch.direction_width));
        let color = push(LayerRole::Color, arch.color_in_dim(), COLOR_DIM);
        Ok(Self {
            arch: arch.clone(),
            layers,
            param_count: offset,
            trunk,
            density,
            feature,
            direction,
            color,
        })
    }

    /// The view-dependent branch: the direction layer and the color head.
    pub fn view_dependent_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.direction
            .into_iter()
            .chain(std::iter::once(self.color))
            .map(|i| &self.layers[i])
    }
}

/// Flat parameters of one network plus a shared handle to their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.param_count];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.param_count {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: layout.param_count,
                got: data.len(),
            });
        }
        Ok(Self { layout, data })
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        MlpParams {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    fn weights(&self, l: &LayerSpec) -> &[T] {
        &self.data[l.weight_range()]
    }

    fn bias(&self, l: &LayerSpec) -> &[T] {
        &self.data[l.bias_range()]
    }
}

/// Deterministic initialization: weights uniform in `+-sqrt(6 / fan_in)`,
/// biases zero. The density head draws from `[0, bound)` instead: its input
/// is a non-negative ReLU output, so a zero-mean draw leaves about half of
/// all networks with a density that is clamped to zero (and receives no
/// gradient) over their whole cell.
pub fn init_params<T: Real>(layout: Arc<Layout>, seed: u64) -> MlpParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(layout.clone());
    for l in &layout.layers {
        let bound = (6.0 / l.in_dim as f64).sqrt();
        let low = if l.role == LayerRole::Density { 0.0 } else { -bound };
        for w in &mut params.data[l.weight_range()] {
            *w = T::lit(rng.gen_range(low..bound));
        }
    }
    params
}

/// Activations of one batched forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub rows: usize,
    x_enc: Vec<T>,
    trunk: Vec<Vec<T>>,
    head_in: Vec<T>,
    direction: Vec<T>,
    pub color: Vec<T>,
    pub sigma: Vec<T>,
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn concat_rows<T: Real>(a: &[T], a_dim: usize, b: &[T], b_dim: usize, rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (a_dim + b_dim));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_dim..(r + 1) * a_dim]);
        out.extend_from_slice(&b[r * b_dim..(r + 1) * b_dim]);
    }
    out
}

fn check_inputs<T: Real>(layout: &Layout, x_enc: &[T], d_enc: &[T], rows: usize) -> Result<()> {
    let a = &layout.arch;
    if x_enc.len() != rows * a.position_input_dim {
        return Err(Error::DimensionMismatch {
            what: "encoded positions",
            expected: rows * a.position_input_dim,
            got: x_enc.len(),
        });
    }
    if d_enc.len() != rows * a.direction_input_dim {
        return Err(Error::DimensionMismatch {
            what: "encoded directions",
            expected: rows * a.direction_input_dim,
            got: d_enc.len(),
        });
    }
    Ok(())
}

/// Batched forward pass keeping every activation. Inputs are row-major
/// `rows x position_input_dim` and `rows x direction_input_dim`.
pub fn forward_train<T: Real>(
    params: &MlpParams<T>,
    x_enc: &[T],
    d_enc: &[T],
    rows: usize,
) -> Result<ForwardCache<T>> {
    let layout = &*params.layout;
    check_inputs(layout, x_enc, d_enc, rows)?;
    let arch = &layout.arch;
    let pos_dim = arch.position_input_dim;

    let mut trunk: Vec<Vec<T>> = Vec::with_capacity(layout.trunk.len());
    for (t, &li) in layout.trunk.iter().enumerate() {
        let l = &layout.layers[li];
        let skip_input;
        let input: &[T] = match (t, trunk.last()) {
            (0, _) => x_enc,
            (_, Some(h)) if arch.skip_layer == Some(t) => {
                skip_input = concat_rows(h, arch.hidden_width, x_enc, pos_dim, rows);
                &skip_input
            }
            (_, Some(h)) => h,
            (_, None) => unreachable!(),
        };
        let mut out = vec![T::zero(); rows * l.out_dim];
        affine(input, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
        relu_inplace(&mut out);
        trunk.push(out);
    }
    let trunk_out: &[T] = trunk.last().map(|v| v.as_slice()).unwrap_or(x_enc);
    let trunk_dim = arch.trunk_out_dim();

    let l = &layout.layers[layout.density];
    let mut sigma = vec![T::zero(); rows];
    affine(trunk_out, rows, trunk_dim, params.weights(l), params.bias(l), 1, &mut sigma);
    relu_inplace(&mut sigma);

    let feature = match layout.feature {
        Some(fi) => {
            let l = &layout.layers[fi];
            let mut out = vec![T::zero(); rows * l.out_dim];
            affine(trunk_out, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
            out
        }
        None => Vec::new(),
    };
    let feature_ref: &[T] = if layout.feature.is_some() { &feature } else { trunk_out };
    let head_in = concat_rows(feature_ref, arch.feature_dim(), d_enc, arch.direction_input_dim, rows);

    let direction = match layout.direction {
        Some(di) => {
            let l = &layout.layers[di];
            let mut out = vec![T::zero(); rows * l.out_dim];
            affine(&head_in, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
            relu_inplace(&mut out);
            out
        }
        None => Vec::new(),
    };
    let color_in: &[T] = if layout.direction.is_some() { &direction } else { &head_in };
    let l = &layout.layers[layout.color];
    let mut color = vec![T::zero(); rows * COLOR_DIM];
    affine(color_in, rows, l.in_dim, params.weights(l), params.bias(l), COLOR_DIM, &mut color);
    for c in &mut color {
        *c = sigmoid(*c);
    }

    Ok(ForwardCache {
        rows,
        x_enc: x_enc.to_vec(),
        trunk,
        head_in,
        direction,
        color,
        sigma,
    })
}

/// Batched inference; writes `rows x 3` colors and `rows` densities.
/// Performs the same arithmetic as [`forward_train`] without keeping
/// activations, so both agree bit for bit.
pub fn forward_batch<T: Real>(
    params: &MlpParams<T>,
    x_enc: &[T],
    d_enc: &[T],
    rows: usize,
    color_out: &mut [T],
    sigma_out: &mut [T],
) -> Result<()> {
    if color_out.len() != rows * COLOR_DIM || sigma_out.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "output buffers",
            expected: rows * (COLOR_DIM + DENSITY_DIM),
            got: color_out.len() + sigma_out.len(),
        });
    }
    let layout = &*params.layout;
    check_inputs(layout, x_enc, d_enc, rows)?;
    let arch = &layout.arch;
    let trunk_out = trunk_forward(params, x_enc, rows);
    let trunk_out: &[T] = trunk_out.as_deref().unwrap_or(x_enc);
    density_head(params, trunk_out, rows, sigma_out);

    let feature;
    let feature_ref: &[T] = match layout.feature {
        Some(fi) => {
            let l = &layout.layers[fi];
            let mut out = vec![T::zero(); rows * l.out_dim];
            affine(trunk_out, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
            feature = out;
            &feature
        }
        None => trunk_out,
    };
    let head_in = concat_rows(feature_ref, arch.feature_dim(), d_enc, arch.direction_input_dim, rows);
    let direction;
    let color_in: &[T] = match layout.direction {
        Some(di) => {
            let l = &layout.layers[di];
            let mut out = vec![T::zero(); rows * l.out_dim];
            affine(&head_in, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
            relu_inplace(&mut out);
            direction = out;
            &direction
        }
        None => &head_in,
    };
    let l = &layout.layers[layout.color];
    affine(color_in, rows, l.in_dim, params.weights(l), params.bias(l), COLOR_DIM, color_out);
    for c in color_out.iter_mut() {
        *c = sigmoid(*c);
    }
    Ok(())
}

/// Densities only; skips the view-dependent branch entirely.
pub fn forward_density<T: Real>(params: &MlpParams<T>, x_enc: &[T], rows: usize, sigma_out: &mut [T]) -> Result<()> {
    let layout = &*params.layout;
    let dim = layout.arch.position_input_dim;
    if x_enc.len() != rows * dim {
        return Err(Error::DimensionMismatch {
            what: "encoded positions",
            expected: rows * dim,
            got: x_enc.len(),
        });
    }
    if sigma_out.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "output buffers",
            expected: rows,
            got: sigma_out.len(),
        });
    }
    let trunk_out = trunk_forward(params, x_enc, rows);
    density_head(params, trunk_out.as_deref().unwrap_or(x_enc), rows, sigma_out);
    Ok(())
}

/// Trunk activations of the last trunk layer, or `None` without a trunk.
fn trunk_forward<T: Real>(params: &MlpParams<T>, x_enc: &[T], rows: usize) -> Option<Vec<T>> {
    let layout = &*params.layout;
    let arch = &layout.arch;
    let mut h: Option<Vec<T>> = None;
    for (t, &li) in layout.trunk.iter().enumerate() {
        let l = &layout.layers[li];
        let skip_input;
        let input: &[T] = match &h {
            None => x_enc,
            Some(h) if arch.skip_layer == Some(t) => {
                skip_input = concat_rows(h, arch.hidden_width, x_enc, arch.position_input_dim, rows);
                &skip_input
            }
            Some(h) => h,
        };
        let mut out = vec![T::zero(); rows * l.out_dim];
        affine(input, rows, l.in_dim, params.weights(l), params.bias(l), l.out_dim, &mut out);
        relu_inplace(&mut out);
        h = Some(out);
    }
    h
}

fn density_head<T: Real>(params: &MlpParams<T>, trunk_out: &[T], rows: usize, sigma_out: &mut [T]) {
    let layout = &*params.layout;
    let l = &layout.layers[layout.density];
    affine(trunk_out, rows, l.in_dim, params.weights(l), params.bias(l), 1, sigma_out);
    relu_inplace(sigma_out);
}

/// Single-query forward pass.
pub fn forward<T: Real>(params: &MlpParams<T>, x_enc: &[T], d_enc: &[T]) -> Result<([T; 3], T)> {
    let mut color = [T::zero(); 3];
    let mut sigma = [T::zero()];
    forward_batch(params, x_enc, d_enc, 1, &mut color, &mut sigma)?;
    Ok((color, sigma[0]))
}

/// Accumulates into `grads` the gradient of `sum(d_color * color + d_sigma * sigma)`
/// with respect to the parameters.
pub fn backward<T: Real>(
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    d_color: &[T],
    d_sigma: &[T],
    grads: &mut [T],
) -> Result<()> {
    let layout = &*params.layout;
    let arch = &layout.arch;
    let rows = cache.rows;
    if d_color.len() != rows * COLOR_DIM || d_sigma.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "upstream gradients",
            expected: rows * (COLOR_DIM + DENSITY_DIM),
            got: d_color.len() + d_sigma.len(),
        });
    }
    if grads.len() != layout.param_count {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: layout.param_count,
            got: grads.len(),
        });
    }
    let layer_grad = |grads: &mut [T], l: &LayerSpec, input: &[T], g: &[T]| {
        let (w, b) = grads[l.range()].split_at_mut(l.weight_len());
        affine_grad_params(input, g, rows, l.in_dim, l.out_dim, w, b);
    };

    // color head
    let l = &layout.layers[layout.color];
    let g_color: Vec<T> = d_color
        .iter()
        .zip(&cache.color)
        .map(|(&g, &c)| g * c * (T::one() - c))
        .collect();
    let color_in: &[T] = if layout.direction.is_some() {
        &cache.direction
    } else {
        &cache.head_in
    };
    layer_grad(grads, l, color_in, &g_color);
    let mut d_color_in = vec![T::zero(); rows * l.in_dim];
    affine_grad_input(&g_color, rows, COLOR_DIM, params.weights(l), l.in_dim, &mut d_color_in);

    // direction layer
    let d_head_in = match layout.direction {
        Some(di) => {
            let l = &layout.layers[di];
            let mut g = d_color_in;
            for (gv, &a) in g.iter_mut().zip(&cache.direction) {
                if !(a > T::zero()) {
                    *gv = T::zero();
                }
            }
            layer_grad(grads, l, &cache.head_in, &g);
            let mut d = vec![T::zero(); rows * l.in_dim];
            affine_grad_input(&g, rows, l.out_dim, params.weights(l), l.in_dim, &mut d);
            d
        }
        None => d_color_in,
    };
    let feature_dim = arch.feature_dim();
    let head_dim = arch.head_in_dim();
    let mut d_feature = vec![T::zero(); rows * feature_dim];
    for r in 0..rows {
        d_feature[r * feature_dim..(r + 1) * feature_dim]
            .copy_from_slice(&d_head_in[r * head_dim..r * head_dim + feature_dim]);
    }

    let trunk_dim = arch.trunk_out_dim();
    let trunk_out: &[T] = cache.trunk.last().map(|v| v.as_slice()).unwrap_or(&cache.x_enc);
    let mut d_trunk = match layout.feature {
        Some(fi) => {
            let l = &layout.layers[fi];
            layer_grad(grads, l, trunk_out, &d_feature);
            let mut d = vec![T::zero(); rows * trunk_dim];
            affine_grad_input(&d_feature, rows, l.out_dim, params.weights(l), trunk_dim, &mut d);
            d
        }
        None => d_feature,
    };

    // density head
    let l = &layout.layers[layout.density];
    let g_sigma: Vec<T> = d_sigma
        .iter()
        .zip(&cache.sigma)
        .map(|(&g, &s)| if s > T::zero() { g } else { T::zero() })
        .collect();
    layer_grad(grads, l, trunk_out, &g_sigma);
    let w_sigma = params.weights(l);
    for r in 0..rows {
        let g = g_sigma[r];
        if g != T::zero() {
            for k in 0..trunk_dim {
                d_trunk[r * trunk_dim + k] += g * w_sigma[k];
            }
        }
    }

    // trunk, last to first
    let pos_dim = arch.position_input_dim;
    for t in (0..layout.trunk.len()).rev() {
        let l = &layout.layers[layout.trunk[t]];
        let mut g = d_trunk;
        for (gv, &a) in g.iter_mut().zip(&cache.trunk[t]) {
            if !(a > T::zero()) {
                *gv = T::zero();
            }
        }
        let skip_input;
        let input: &[T] = if t == 0 {
            &cache.x_enc
        } else if arch.skip_layer == Some(t) {
            skip_input = concat_rows(&cache.trunk[t - 1], arch.hidden_width, &cache.x_enc, pos_dim, rows);
            &skip_input
        } else {
            &cache.trunk[t - 1]
        };
        layer_grad(grads, l, input, &g);
        if t == 0 {
            break;
        }
        let mut d_in = vec![T::zero(); rows * l.in_dim];
        affine_grad_input(&g, rows, l.out_dim, params.weights(l), l.in_dim, &mut d_in);
        d_trunk = if l.in_dim == arch.hidden_width {
            d_in
        } else {
            let w = arch.hidden_width;
            let mut d = vec![T::zero(); rows * w];
            for r in 0..rows {
                d[r * w..(r + 1) * w].copy_from_slice(&d_in[r * l.in_dim..r * l.in_dim + w]);
            }
            d
        };
    }
    Ok(())
}

/// Forward-pass FLOPs: every multiply-accumulate counts 2, every activated
/// output element (ReLU or sigmoid) counts 1. Bias additions are folded into
/// the accumulation and not counted separately.
pub fn count_flops(arch: &MlpArchitecture) -> Result<u64> {
    let layout = Layout::new(arch)?;
    Ok(layout
        .layers
        .iter()
        .map(|l| (2 * l.in_dim * l.out_dim + l.activation_elems()) as u64)
        .sum())
}
