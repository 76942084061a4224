//! Two-view correspondence network.
//!
//! A shared convolutional encoder maps each image to features `H^v`; a
//! decoder mixes each view with pooled context from the other view for a
//! few rounds to produce `H'^v`; per-pixel heads read `[H^v, H'^v]` and emit a
//! pointmap in the first view's frame with a confidence map, unit matching
//! descriptors, and a visibility logit. Gradients are propagated by hand
//! through every layer (see [`Model::backward`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, ConvShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub enc_channels: usize,
    pub enc_dilations: Vec<usize>,
    pub dec_rounds: usize,
    pub head_hidden: usize,
    pub desc_dim: usize,
    /// Append normalized pixel coordinates to the RGB input.
    pub coord_channels: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            enc_channels: 12,
            enc_dilations: vec![1, 2, 4],
            dec_rounds: 2,
            head_hidden: 24,
            desc_dim: 16,
            coord_channels: true,
        }
    }
}

impl ArchConfig {
    /// Smallest useful configuration, used for gradient checks.
    pub fn tiny() -> Self {
        ArchConfig {
            enc_channels: 4,
            enc_dilations: vec![1, 2, 1],
            dec_rounds: 2,
            head_hidden: 5,
            desc_dim: 4,
            coord_channels: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.desc_dim < 2 {
            return Err(ModelError::InvalidArch("descriptor dimension must be at least 2".into()));
        }
        if self.enc_channels == 0 || self.head_hidden == 0 || self.enc_dilations.is_empty() {
            return Err(ModelError::InvalidArch("empty layer".into()));
        }
        if self.enc_dilations.contains(&0) {
            return Err(ModelError::InvalidArch("dilation must be positive".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Weight stored `in×out` with an `out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        // uniform with variance gain^2 / fan_in
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[fan_in, out], bound, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = nn::matmul_new(rows, self.in_dim(), self.out_dim(), x, false, &self.weight.data, false);
        nn::add_bias(&mut y, &self.bias.data);
        y
    }

    /// Accumulate parameter gradients into `grad`, returning the input gradient
    /// when requested.
    fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear, want_input: bool) -> Option<Vec<f64>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        nn::matmul(i, rows, o, x, true, dy, false, 1.0, &mut grad.weight.data);
        nn::accumulate_column_sums(dy, &mut grad.bias.data);
        want_input.then(|| nn::matmul_new(rows, o, i, dy, false, &self.weight.data, true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

/// One decoder round: `g' = g + silu(g·W_self + ctx·W_ctx + b)` with `ctx`
/// the mean feature of the other view.
#[derive(Debug, Clone, PartialEq)]
pub struct MixLayer {
    pub own: Linear,
    pub context: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// When set, encoder tensors receive zero gradient and are never updated.
    pub frozen_encoder: bool,
    /// Convolution weights stored `(9·in)×out`.
    pub encoder: Vec<Linear>,
    pub decoder: Vec<MixLayer>,
    pub head_point: Mlp,
    pub head_desc: Mlp,
    pub head_vis: Mlp,
}

/// Deterministic fan-in scaled initialization.
pub fn init_params(seed: u64, arch: &ArchConfig) -> Result<ModelParams, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = arch.enc_channels;
    // SiLU halves small inputs, so a gain of 2 keeps activations near unit scale
    let act_gain = 2.0;
    let mut encoder = Vec::new();
    let mut cin = arch.input_channels();
    for _ in &arch.enc_dilations {
        encoder.push(Linear::init(9 * cin, c, act_gain, &mut rng));
        cin = c;
    }
    let decoder = (0..arch.dec_rounds)
        .map(|_| MixLayer {
            own: Linear::init(c, c, 0.5, &mut rng),
            context: Tensor::uniform(&[c, c], 0.5 * (3.0 / c as f64).sqrt(), &mut rng),
        })
        .collect();
    let z = 2 * c;
    let h = arch.head_hidden;
    let mut head_point = Mlp {
        hidden: Linear::init(z + 1, h, act_gain, &mut rng),
        out: Linear::init(h, 4, 0.5, &mut rng),
    };
    // start the pointmap in front of the camera
    head_point.out.bias.data[2] = 1.0;
    let head_desc = Mlp {
        hidden: Linear::init(z, h, act_gain, &mut rng),
        out: Linear::init(h, arch.desc_dim, 1.0, &mut rng),
    };
    let head_vis = Mlp {
        hidden: Linear::init(z, h, act_gain, &mut rng),
        out: Linear::init(h, 1, 0.5, &mut rng),
    };
    Ok(ModelParams {
        arch: arch.clone(),
        frozen_encoder: false,
        encoder,
        decoder,
        head_point,
        head_desc,
        head_vis,
    })
}

impl ModelParams {
    /// Every tensor with its stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.own.weight"), &l.own.weight));
            out.push((format!("decoder.{i}.own.bias"), &l.own.bias));
            out.push((format!("decoder.{i}.context"), &l.context));
        }
        for (name, m) in [("head_point", &self.head_point), ("head_desc", &self.head_desc), ("head_vis", &self.head_vis)] {
            out.push((format!("{name}.hidden.weight"), &m.hidden.weight));
            out.push((format!("{name}.hidden.bias"), &m.hidden.bias));
            out.push((format!("{name}.out.weight"), &m.out.weight));
            out.push((format!("{name}.out.bias"), &m.out.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{i}.own.weight"), &mut l.own.weight));
            out.push((format!("decoder.{i}.own.bias"), &mut l.own.bias));
            out.push((format!("decoder.{i}.context"), &mut l.context));
        }
        for (name, m) in [
            ("head_point", &mut self.head_point),
            ("head_desc", &mut self.head_desc),
            ("head_vis", &mut self.head_vis),
        ] {
            out.push((format!("{name}.hidden.weight"), &mut m.hidden.weight));
            out.push((format!("{name}.hidden.bias"), &mut m.hidden.bias));
            out.push((format!("{name}.out.weight"), &mut m.out.weight));
            out.push((format!("{name}.out.bias"), &mut m.out.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn is_encoder_tensor(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// `H×W×d` matching features, row-major with `d` contiguous values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != width * height * dim {
            return Err(ModelError::ShapeMismatch(format!(
                "descriptor data has {} values, expected {}",
                data.len(),
                width * height * dim
            )));
        }
        Ok(DescriptorMap { width, height, dim, data })
    }

    pub fn at(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Head outputs for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutputs {
    /// `H×W×3` pointmap in the first view's camera frame.
    pub points: Vec<f64>,
    /// Raw confidence logits; `confidence = 1 + exp(raw)`.
    pub conf_raw: Vec<f64>,
    pub confidence: Vec<f64>,
    pub descriptors: DescriptorMap,
    pub vis_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub width: usize,
    pub height: usize,
    pub views: [ViewOutputs; 2],
}

/// Loss gradients with respect to one view's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub points: Vec<f64>,
    pub confidence: Vec<f64>,
    pub descriptors: Vec<f64>,
    pub vis_logits: Vec<f64>,
}

impl ViewGrads {
    pub fn zeros(pixels: usize, desc_dim: usize) -> Self {
        ViewGrads {
            points: vec![0.0; 3 * pixels],
            confidence: vec![0.0; pixels],
            descriptors: vec![0.0; desc_dim * pixels],
            vis_logits: vec![0.0; pixels],
        }
    }
}

struct ConvCache {
    cols: Vec<f64>,
    slope: Vec<f64>,
}

struct MlpCache {
    slope: Vec<f64>,
    hidden: Vec<f64>,
}

struct ViewCache {
    enc: Vec<ConvCache>,
    /// Decoder state entering each round, then the final state.
    dec_states: Vec<Vec<f64>>,
    dec_slope: Vec<Vec<f64>>,
    dec_ctx: Vec<Vec<f64>>,
    /// `[H, H']` per pixel, plus the role flag for the point head.
    z: Vec<f64>,
    z_role: Vec<f64>,
    point: MlpCache,
    desc: MlpCache,
    desc_norm: Vec<f64>,
    vis: MlpCache,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    width: usize,
    height: usize,
    views: [ViewCache; 2],
}

/// Thin handle bundling parameters with the forward/backward passes.
pub struct Model<'a> {
    pub params: &'a ModelParams,
}

fn input_map(image: &[f64], width: usize, height: usize, coords: bool) -> Vec<f64> {
    if !coords {
        return image.to_vec();
    }
    let mut out = Vec::with_capacity(width * height * 5);
    let sx = 2.0 / (width.max(2) - 1) as f64;
    let sy = 2.0 / (height.max(2) - 1) as f64;
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            out.extend_from_slice(&image[3 * idx..3 * idx + 3]);
            out.push(x as f64 * sx - 1.0);
            out.push(y as f64 * sy - 1.0);
        }
    }
    out
}

fn mlp_forward(m: &Mlp, x: &[f64], rows: usize) -> (MlpCache, Vec<f64>) {
    let (hidden, slope) = nn::silu_with_slope(&m.hidden.forward(x, rows));
    let out = m.out.forward(&hidden, rows);
    (MlpCache { slope, hidden }, out)
}

fn mlp_backward(m: &Mlp, cache: &MlpCache, x: &[f64], dout: &[f64], rows: usize, grad: &mut Mlp) -> Vec<f64> {
    let mut dh = m.out.backward(&cache.hidden, dout, rows, &mut grad.out, true).unwrap();
    nn::silu_backward(&cache.slope, &mut dh);
    m.hidden.backward(x, &dh, rows, &mut grad.hidden, true).unwrap()
}

fn mean_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    nn::accumulate_column_sums(x, &mut out);
    let rows = (x.len() / cols) as f64;
    out.iter_mut().for_each(|v| *v /= rows);
    out
}

impl<'a> Model<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Model { params }
    }

    fn encode(&self, image: &[f64], width: usize, height: usize) -> (Vec<ConvCache>, Vec<f64>) {
        let arch = &self.params.arch;
        let mut x = input_map(image, width, height, arch.coord_channels);
        let mut cin = arch.input_channels();
        let mut caches = Vec::new();
        for (layer, &dil) in self.params.encoder.iter().zip(&arch.enc_dilations) {
            let shape = ConvShape {
                height,
                width,
                in_channels: cin,
                dilation: dil,
            };
            let cols = nn::im2col(&x, shape);
            let (act, slope) = nn::silu_with_slope(&layer.forward(&cols, width * height));
            x = act;
            caches.push(ConvCache { cols, slope });
            cin = layer.out_dim();
        }
        (caches, x)
    }

    /// Run both branches and return outputs with the cache needed by
    /// [`Model::backward`].
    pub fn forward_with_cache(
        &self,
        image1: &[f64],
        image2: &[f64],
        width: usize,
        height: usize,
    ) -> Result<(ForwardOutputs, ForwardCache), ModelError> {
        let n = width * height;
        if image1.len() != 3 * n || image2.len() != 3 * n {
            return Err(ModelError::ShapeMismatch(format!(
                "images must both be {width}x{height}x3 ({} values), got {} and {}",
                3 * n,
                image1.len(),
                image2.len()
            )));
        }
        let p = self.params;
        let c = p.arch.enc_channels;
        let (enc1, h1) = self.encode(image1, width, height);
        let (enc2, h2) = self.encode(image2, width, height);

        let mut states = [vec![h1.clone()], vec![h2.clone()]];
        let mut slopes: [Vec<Vec<f64>>; 2] = [vec![], vec![]];
        let mut ctxs: [Vec<Vec<f64>>; 2] = [vec![], vec![]];
        for layer in &p.decoder {
            let means = [mean_rows(states[0].last().unwrap(), c), mean_rows(states[1].last().unwrap(), c)];
            for v in 0..2 {
                let g = states[v].last().unwrap();
                let ctx = &means[1 - v];
                let mut ctx_proj = vec![0.0; c];
                nn::matmul(1, c, c, ctx, false, &layer.context.data, false, 0.0, &mut ctx_proj);
                let mut pre = layer.own.forward(g, n);
                nn::add_bias(&mut pre, &ctx_proj);
                let (act, slope) = nn::silu_with_slope(&pre);
                let next: Vec<f64> = g.iter().zip(&act).map(|(a, b)| a + b).collect();
                slopes[v].push(slope);
                ctxs[v].push(ctx.clone());
                states[v].push(next);
            }
        }

        let mut caches = Vec::with_capacity(2);
        let mut outputs = Vec::with_capacity(2);
        let [states1, states2] = states;
        let [slope1, slope2] = slopes;
        let [ctx1, ctx2] = ctxs;
        for (role, (enc, h, dec_states, dec_slope, dec_ctx)) in [
            (enc1, h1, states1, slope1, ctx1),
            (enc2, h2, states2, slope2, ctx2),
        ]
        .into_iter()
        .enumerate()
        {
            let dec = dec_states.last().unwrap();
            let mut z = Vec::with_capacity(n * 2 * c);
            let mut z_role = Vec::with_capacity(n * (2 * c + 1));
            for i in 0..n {
                z.extend_from_slice(&h[i * c..(i + 1) * c]);
                z.extend_from_slice(&dec[i * c..(i + 1) * c]);
                z_role.extend_from_slice(&h[i * c..(i + 1) * c]);
                z_role.extend_from_slice(&dec[i * c..(i + 1) * c]);
                z_role.push(role as f64);
            }
            let (point_cache, point_out) = mlp_forward(&p.head_point, &z_role, n);
            let (desc_cache, desc_raw) = mlp_forward(&p.head_desc, &z, n);
            let (vis_cache, vis_logits) = mlp_forward(&p.head_vis, &z, n);

            let mut points = Vec::with_capacity(3 * n);
            let mut conf_raw = Vec::with_capacity(n);
            for row in point_out.chunks_exact(4) {
                points.extend_from_slice(&row[..3]);
                conf_raw.push(row[3]);
            }
            let confidence = conf_raw.iter().map(|r| 1.0 + r.exp()).collect();
            let d = p.arch.desc_dim;
            let mut desc = desc_raw;
            let mut desc_norm = Vec::with_capacity(n);
            for row in desc.chunks_exact_mut(d) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= norm);
                desc_norm.push(norm);
            }
            outputs.push(ViewOutputs {
                points,
                conf_raw,
                confidence,
                descriptors: DescriptorMap {
                    width,
                    height,
                    dim: d,
                    data: desc,
                },
                vis_logits,
            });
            caches.push(ViewCache {
                enc,
                dec_states,
                dec_slope,
                dec_ctx,
                z,
                z_role,
                point: point_cache,
                desc: desc_cache,
                desc_norm,
                vis: vis_cache,
            });
        }
        let v2 = outputs.pop().unwrap();
        let v1 = outputs.pop().unwrap();
        let c2 = caches.pop().unwrap();
        let c1 = caches.pop().unwrap();
        Ok((
            ForwardOutputs {
                width,
                height,
                views: [v1, v2],
            },
            ForwardCache {
                width,
                height,
                views: [c1, c2],
            },
        ))
    }

    pub fn forward(&self, image1: &[f64], image2: &[f64], width: usize, height: usize) -> Result<ForwardOutputs, ModelError> {
        self.forward_with_cache(image1, image2, width, height).map(|(o, _)| o)
    }

    /// Propagate output gradients to every parameter. Encoder gradients are
    /// left at zero when the encoder is frozen.
    pub fn backward(&self, outputs: &ForwardOutputs, cache: &ForwardCache, grads: &[ViewGrads; 2]) -> ModelParams {
        let p = self.params;
        let c = p.arch.enc_channels;
        let d = p.arch.desc_dim;
        let (w, h) = (cache.width, cache.height);
        let n = w * h;
        let mut g = p.zeros_like();

        // heads: gradients w.r.t. [H, H'] for each view
        let mut d_enc_out: Vec<Vec<f64>> = Vec::with_capacity(2);
        let mut d_dec_out: Vec<Vec<f64>> = Vec::with_capacity(2);
        for v in 0..2 {
            let vc = &cache.views[v];
            let out = &outputs.views[v];
            let gr = &grads[v];

            let mut d_point = vec![0.0; 4 * n];
            for i in 0..n {
                d_point[4 * i..4 * i + 3].copy_from_slice(&gr.points[3 * i..3 * i + 3]);
                // d(1 + e^r)/dr = e^r = C - 1
                d_point[4 * i + 3] = gr.confidence[i] * (out.confidence[i] - 1.0);
            }
            let dz_role = mlp_backward(&p.head_point, &vc.point, &vc.z_role, &d_point, n, &mut g.head_point);

            let mut d_raw = vec![0.0; d * n];
            for i in 0..n {
                let y = out.descriptors.at(i);
                let dy = &gr.descriptors[d * i..d * (i + 1)];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                let inv = 1.0 / vc.desc_norm[i];
                for k in 0..d {
                    d_raw[d * i + k] = (dy[k] - y[k] * dot) * inv;
                }
            }
            let dz_desc = mlp_backward(&p.head_desc, &vc.desc, &vc.z, &d_raw, n, &mut g.head_desc);
            let dz_vis = mlp_backward(&p.head_vis, &vc.vis, &vc.z, &gr.vis_logits, n, &mut g.head_vis);

            let mut de = vec![0.0; n * c];
            let mut dd = vec![0.0; n * c];
            for i in 0..n {
                for k in 0..c {
                    de[i * c + k] = dz_role[i * (2 * c + 1) + k] + dz_desc[i * 2 * c + k] + dz_vis[i * 2 * c + k];
                    dd[i * c + k] =
                        dz_role[i * (2 * c + 1) + c + k] + dz_desc[i * 2 * c + c + k] + dz_vis[i * 2 * c + c + k];
                }
            }
            d_enc_out.push(de);
            d_dec_out.push(dd);
        }

        // decoder rounds in reverse; both views are coupled through context
        let mut d_state = [d_dec_out[0].clone(), d_dec_out[1].clone()];
        for (r, layer) in p.decoder.iter().enumerate().rev() {
            let mut next = [d_state[0].clone(), d_state[1].clone()];
            let mut d_ctx = [vec![0.0; c], vec![0.0; c]];
            for v in 0..2 {
                let vc = &cache.views[v];
                let mut dpre = d_state[v].clone();
                nn::silu_backward(&vc.dec_slope[r], &mut dpre);
                let gl = &mut g.decoder[r];
                let dg = layer.own.backward(&vc.dec_states[r], &dpre, n, &mut gl.own, true).unwrap();
                for (a, b) in next[v].iter_mut().zip(&dg) {
                    *a += b;
                }
                let mut dsum = vec![0.0; c];
                nn::accumulate_column_sums(&dpre, &mut dsum);
                nn::matmul(c, 1, c, &vc.dec_ctx[r], true, &dsum, false, 1.0, &mut gl.context.data);
                // context of view v is the mean of the other view's state
                nn::matmul(1, c, c, &dsum, false, &layer.context.data, true, 1.0, &mut d_ctx[1 - v]);
            }
            for u in 0..2 {
                let scale = 1.0 / n as f64;
                for row in next[u].chunks_exact_mut(c) {
                    for (a, b) in row.iter_mut().zip(&d_ctx[u]) {
                        *a += b * scale;
                    }
                }
            }
            d_state = next;
        }

        if !p.frozen_encoder {
            for v in 0..2 {
                let vc = &cache.views[v];
                let mut dx: Vec<f64> = d_enc_out[v].iter().zip(&d_state[v]).map(|(a, b)| a + b).collect();
                let mut cin_list = vec![p.arch.input_channels()];
                cin_list.extend(std::iter::repeat_n(c, p.encoder.len() - 1));
                for l in (0..p.encoder.len()).rev() {
                    let cc = &vc.enc[l];
                    nn::silu_backward(&cc.slope, &mut dx);
                    let want = l > 0;
                    let dcols = p.encoder[l].backward(&cc.cols, &dx, n, &mut g.encoder[l], want);
                    if let Some(dcols) = dcols {
                        let shape = ConvShape {
                            height: h,
                            width: w,
                            in_channels: cin_list[l],
                            dilation: p.arch.enc_dilations[l],
                        };
                        dx = nn::col2im(&dcols, shape);
                    }
                }
            }
        }
        g
    }
}

/// Convenience wrapper for [`Model::forward`].
pub fn forward(params: &ModelParams, image1: &[f64], image2: &[f64], width: usize, height: usize) -> Result<ForwardOutputs, ModelError> {
    Model::new(params).forward(image1, image2, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn output_shapes() {
        let arch = ArchConfig::default();
        let p = init_params(1, &arch).unwrap();
        let (w, h) = (12, 9);
        let out = forward(&p, &image(1, w * h), &image(2, w * h), w, h).unwrap();
        for v in &out.views {
            assert_eq!(v.points.len(), w * h * 3);
            assert_eq!(v.descriptors.data.len(), w * h * arch.desc_dim);
            assert_eq!(v.confidence.len(), w * h);
            assert_eq!(v.vis_logits.len(), w * h);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = init_params(1, &ArchConfig::tiny()).unwrap();
        assert!(matches!(
            forward(&p, &image(1, 64), &image(2, 63), 8, 8),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn descriptors_unit_and_confidence_at_least_one() {
        for seed in 0..3 {
            let mut p = init_params(seed, &ArchConfig::tiny()).unwrap();
            // arbitrary, not just initial, parameters
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for (_, t) in p.named_tensors_mut() {
                t.data.iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
            }
            let out = forward(&p, &image(seed, 64), &image(seed + 1, 64), 8, 8).unwrap();
            for v in &out.views {
                for i in 0..64 {
                    let norm: f64 = v.descriptors.at(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-6);
                    assert!(v.confidence[i] >= 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_conf_logits_give_two() {
        let mut p = init_params(3, &ArchConfig::tiny()).unwrap();
        let h = p.arch.head_hidden;
        for r in 0..h {
            p.head_point.out.weight.data[r * 4 + 3] = 0.0;
        }
        p.head_point.out.bias.data[3] = 0.0;
        let out = forward(&p, &image(1, 64), &image(2, 64), 8, 8).unwrap();
        assert!(out.views.iter().all(|v| v.confidence.iter().all(|c| *c == 2.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ArchConfig::default();
        assert_eq!(init_params(7, &arch).unwrap(), init_params(7, &arch).unwrap());
        assert_ne!(init_params(7, &arch).unwrap(), init_params(8, &arch).unwrap());
        let mut bad = arch.clone();
        bad.desc_dim = 1;
        assert!(init_params(0, &bad).is_err());
    }

    #[test]
    fn swapping_views_swaps_descriptor_and_visibility_heads() {
        let p = init_params(4, &ArchConfig::default()).unwrap();
        let (a, b) = (image(10, 80), image(11, 80));
        let fwd = forward(&p, &a, &b, 10, 8).unwrap();
        let rev = forward(&p, &b, &a, 10, 8).unwrap();
        assert_eq!(fwd.views[0].descriptors, rev.views[1].descriptors);
        assert_eq!(fwd.views[1].descriptors, rev.views[0].descriptors);
        assert_eq!(fwd.views[0].vis_logits, rev.views[1].vis_logits);
        assert_eq!(fwd.views[1].vis_logits, rev.views[0].vis_logits);
    }
}
