//! The audio-visual fusion network.
//!
//! Image and audio inputs are patch-embedded and encoded separately into
//! token sequences `f_i` and `f_a`. The modal fusion module cross-attends in
//! both directions (audio queries image giving `y_ia`, image queries audio
//! giving `y_ai`), stacks the two results along the token axis and runs them
//! through a stack of encoder layers to produce the fusion logits `y_t`.
//! Linear heads over the pooled `f_i` and `f_a` give `y_i` and `y_a`, and
//! the prediction is a convex combination of the three logit vectors.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionConfig, EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::sampling::N_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_encoder_layers: usize,
    pub n_fusion_layers: usize,
    pub n_classes: usize,
    pub image_patch: usize,
    pub image_channels: usize,
    pub max_image_tokens: usize,
    pub audio_patch: usize,
    pub n_mels: usize,
    pub max_audio_tokens: usize,
    pub w_image: f64,
    pub w_fusion: f64,
    pub w_audio: f64,
    pub init_std: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            mlp_ratio: 4,
            n_encoder_layers: 2,
            n_fusion_layers: 2,
            n_classes: N_CLASSES,
            image_patch: 4,
            image_channels: 1,
            max_image_tokens: 16,
            audio_patch: 16,
            n_mels: 128,
            max_audio_tokens: 16,
            w_image: 1.0 / 3.0,
            w_fusion: 1.0 / 3.0,
            w_audio: 1.0 / 3.0,
            init_std: 0.02,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 0.0,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $ty:ty),* $(,)?) => {
        impl ModelConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    })*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// Flat `key = value` text, one line per field.
            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)*
                out
            }
        }
    };
}

config_keys! {
    d_model: usize,
    n_heads: usize,
    mlp_ratio: usize,
    n_encoder_layers: usize,
    n_fusion_layers: usize,
    n_classes: usize,
    image_patch: usize,
    image_channels: usize,
    max_image_tokens: usize,
    audio_patch: usize,
    n_mels: usize,
    max_audio_tokens: usize,
    w_image: f64,
    w_fusion: f64,
    w_audio: f64,
    init_std: f64,
    lr: f64,
    momentum: f64,
    grad_clip: f64,
}

impl ModelConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set_key(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        AttentionConfig::new(self.d_model, self.n_heads).map_err(|e| Error::Config(e.to_string()))?;
        if self.n_classes != N_CLASSES {
            return fail(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.mlp_ratio == 0 || self.image_patch == 0 || self.audio_patch == 0 || self.image_channels == 0 {
            return fail("mlp_ratio, patch sizes and image_channels must be positive".into());
        }
        if self.max_image_tokens == 0 || self.max_audio_tokens == 0 {
            return fail("token limits must be positive".into());
        }
        if self.n_mels % self.audio_patch != 0 {
            return fail(format!(
                "n_mels {} is not divisible by audio_patch {}",
                self.n_mels, self.audio_patch
            ));
        }
        let w = [self.w_image, self.w_fusion, self.w_audio];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return fail(format!("ensemble weights {w:?} must be nonnegative and sum to 1"));
        }
        if !(self.init_std >= 0.0) || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) {
            return fail("init_std, lr, grad_clip must be >= 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }
}

/// Grayscale or colour pixels in `[0, 1]`, height × width × channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Non-overlapping `patch × patch` tiles in raster order, each flattened as
/// (row, column, channel) and mapped from `[0, 1]` to `[-1, 1]`.
pub fn patchify_image<S: Scalar>(image: &Image, patch: usize) -> Result<Tensor<S>> {
    if image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let dim = patch * patch * image.channels;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..image.channels {
                        let v = image.at(py * patch + y, px * patch + x, c);
                        data.push(S::lit((v as f64 - 0.5) / 0.5));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Tiles the spectrogram time-major (all frequency tiles of the first time
/// step, then the next), after standardizing the whole grid.
pub fn patchify_mel<S: Scalar>(mel: &MelSpectrogram, patch: usize) -> Result<Tensor<S>> {
    if mel.n_mels % patch != 0 || mel.n_frames % patch != 0 {
        return Err(Error::shape(format!(
            "{}x{} spectrogram is not divisible into {patch}x{patch} patches",
            mel.n_mels, mel.n_frames
        )));
    }
    let n = mel.data.len() as f64;
    let mean = mel.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = mel.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();

    let (gf, gt) = (mel.n_mels / patch, mel.n_frames / patch);
    let mut data = Vec::with_capacity(mel.data.len());
    for tp in 0..gt {
        for fp in 0..gf {
            for i in 0..patch {
                for j in 0..patch {
                    let v = mel.at(fp * patch + i, tp * patch + j) as f64;
                    data.push(S::lit((v - mean) * inv));
                }
            }
        }
    }
    Tensor::new(vec![gf * gt, patch * patch], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Audio,
}

/// Patch embedding, learned positions, encoder stack and final norm.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub max_tokens: usize,
}

impl ModalityEncoder {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init<'_>,
        name: &str,
        modality: Modality,
        patch_dim: usize,
        max_tokens: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let patch_embed = Linear::new(store, init, &format!("{name}.patch_embed"), patch_dim, d)?;
        let pos_embed = store.insert(format!("{name}.pos_embed"), init.trunc_normal(vec![max_tokens, d])?)?;
        let blocks = (0..cfg.n_encoder_layers)
            .map(|i| EncoderLayer::new(store, init, &format!("{name}.blocks.{i}"), cfg.attention(), cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(Self {
            modality,
            patch_embed,
            pos_embed,
            blocks,
            norm,
            max_tokens,
        })
    }

    /// Encodes a `[n_tokens × patch_dim]` matrix into `[n_tokens × d_model]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Binding, patches: Var) -> Result<Var> {
        let shape = g.value(patches).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.patch_embed.d_in {
            return Err(Error::shape(format!(
                "{:?} patches {shape:?} do not have width {}",
                self.modality, self.patch_embed.d_in
            )));
        }
        let n = shape[0];
        if n > self.max_tokens {
            return Err(Error::shape(format!(
                "{n} {:?} tokens exceed the {} learned positions",
                self.modality, self.max_tokens
            )));
        }
        let x = self.patch_embed.forward(g, b, patches)?;
        let pos = g.narrow(b.var(self.pos_embed), 0, 0, n)?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, b, x)?;
        }
        self.norm.forward(g, b, x)
    }
}

#[derive(Clone, Debug)]
pub struct ModalFusion {
    /// Audio queries, image keys and values.
    pub cross_ia: MultiHeadAttention,
    /// Image queries, audio keys and values.
    pub cross_ai: MultiHeadAttention,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub f_i: Var,
    pub f_a: Var,
    pub y_ia: Var,
    pub y_ai: Var,
    pub y_concat: Var,
    pub y_t: Var,
    pub y_i: Var,
    pub y_a: Var,
    pub ensemble: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutputs<S = f32> {
    pub y_ia: Tensor<S>,
    pub y_ai: Tensor<S>,
    pub y_concat: Tensor<S>,
    pub y_t_logits: Tensor<S>,
    pub y_i_logits: Tensor<S>,
    pub y_a_logits: Tensor<S>,
    pub ensemble_logits: Tensor<S>,
}

impl<S: Scalar> FusionOutputs<S> {
    pub fn logits(&self, head: Head) -> &Tensor<S> {
        match head {
            Head::Image => &self.y_i_logits,
            Head::Audio => &self.y_a_logits,
            Head::Fusion => &self.y_t_logits,
            Head::Ensemble => &self.ensemble_logits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Image,
    Audio,
    Fusion,
    Ensemble,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Image, Head::Audio, Head::Fusion, Head::Ensemble];

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Image => "image",
            Head::Audio => "audio",
            Head::Fusion => "fusion",
            Head::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown head {s:?}; choose one of image, audio, fusion, ensemble")))
    }
}

/// Argmax of the chosen head's logits; ties go to the lowest class.
pub fn predict<S: Scalar>(outputs: &FusionOutputs<S>, head: Head) -> usize {
    outputs.logits(head).argmax()
}

/// One supervised sample.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a Image,
    pub mel: &'a MelSpectrogram,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Model<S = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub image_encoder: ModalityEncoder,
    pub audio_encoder: ModalityEncoder,
    pub fusion: ModalFusion,
    pub fusion_blocks: Vec<EncoderLayer>,
    pub fusion_norm: LayerNorm,
    pub head_t: Linear,
    pub head_i: Linear,
    pub head_a: Linear,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            std: config.init_std,
        };
        let mut store = ParamStore::new();
        let cfg = &config;
        let image_dim = cfg.image_patch * cfg.image_patch * cfg.image_channels;
        let audio_dim = cfg.audio_patch * cfg.audio_patch;
        let image_encoder = ModalityEncoder::new(&mut store, &mut init, "image", Modality::Image, image_dim, cfg.max_image_tokens, cfg)?;
        let audio_encoder = ModalityEncoder::new(&mut store, &mut init, "audio", Modality::Audio, audio_dim, cfg.max_audio_tokens, cfg)?;
        let fusion = ModalFusion {
            cross_ia: MultiHeadAttention::new(&mut store, &mut init, "mfm.cross_ia", cfg.attention())?,
            cross_ai: MultiHeadAttention::new(&mut store, &mut init, "mfm.cross_ai", cfg.attention())?,
        };
        let fusion_blocks = (0..cfg.n_fusion_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("mfm.blocks.{i}"), cfg.attention(), cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let fusion_norm = LayerNorm::new(&mut store, "mfm.norm", cfg.d_model)?;
        let head_t = Linear::new(&mut store, &mut init, "head_t", cfg.d_model, cfg.n_classes)?;
        let head_i = Linear::new(&mut store, &mut init, "head_i", cfg.d_model, cfg.n_classes)?;
        let head_a = Linear::new(&mut store, &mut init, "head_a", cfg.d_model, cfg.n_classes)?;
        Ok(Self {
            config,
            params: store,
            image_encoder,
            audio_encoder,
            fusion,
            fusion_blocks,
            fusion_norm,
            head_t,
            head_i,
            head_a,
        })
    }

    pub fn image_tokens(&self, g: &mut Graph<S>, image: &Image) -> Result<Var> {
        if image.channels != self.config.image_channels {
            return Err(Error::shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.config.image_channels
            )));
        }
        Ok(g.constant(patchify_image(image, self.config.image_patch)?))
    }

    pub fn audio_tokens(&self, g: &mut Graph<S>, mel: &MelSpectrogram) -> Result<Var> {
        if mel.n_mels != self.config.n_mels {
            return Err(Error::shape(format!(
                "spectrogram has {} mel bands, model expects {}",
                mel.n_mels, self.config.n_mels
            )));
        }
        Ok(g.constant(patchify_mel(mel, self.config.audio_patch)?))
    }

    pub fn encode_image(&self, g: &mut Graph<S>, b: &Binding, image: &Image) -> Result<Var> {
        let x = self.image_tokens(g, image)?;
        self.image_encoder.forward(g, b, x)
    }

    pub fn encode_audio(&self, g: &mut Graph<S>, b: &Binding, mel: &MelSpectrogram) -> Result<Var> {
        let x = self.audio_tokens(g, mel)?;
        self.audio_encoder.forward(g, b, x)
    }

    /// Returns `(y_ia, y_ai, y_concat)`; `y_concat` stacks `y_ia` above `y_ai`.
    pub fn modal_fusion(&self, g: &mut Graph<S>, b: &Binding, f_i: Var, f_a: Var) -> Result<(Var, Var, Var)> {
        let y_ia = self.fusion.cross_ia.forward(g, b, f_a, f_i)?;
        let y_ai = self.fusion.cross_ai.forward(g, b, f_i, f_a)?;
        let y = g.concat(y_ia, y_ai, 0)?;
        Ok((y_ia, y_ai, y))
    }

    fn pooled_head(&self, g: &mut Graph<S>, b: &Binding, x: Var, head: &Linear) -> Result<Var> {
        let pooled = g.mean_axis(x, 0)?;
        let logits = head.forward(g, b, pooled)?;
        g.reshape(logits, vec![self.config.n_classes])
    }

    /// Everything after the modality encoders.
    pub fn forward_features(&self, g: &mut Graph<S>, b: &Binding, f_i: Var, f_a: Var) -> Result<FusionVars> {
        let (y_ia, y_ai, y_concat) = self.modal_fusion(g, b, f_i, f_a)?;
        let mut h = y_concat;
        for block in &self.fusion_blocks {
            h = block.forward(g, b, h)?;
        }
        let h = self.fusion_norm.forward(g, b, h)?;
        let y_t = self.pooled_head(g, b, h, &self.head_t)?;
        let y_i = self.pooled_head(g, b, f_i, &self.head_i)?;
        let y_a = self.pooled_head(g, b, f_a, &self.head_a)?;

        let c = &self.config;
        let wi = g.scale(y_i, S::lit(c.w_image));
        let wt = g.scale(y_t, S::lit(c.w_fusion));
        let wa = g.scale(y_a, S::lit(c.w_audio));
        let ens = g.add(wi, wt)?;
        let ensemble = g.add(ens, wa)?;
        Ok(FusionVars {
            f_i,
            f_a,
            y_ia,
            y_ai,
            y_concat,
            y_t,
            y_i,
            y_a,
            ensemble,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph<S>, b: &Binding, image: &Image, mel: &MelSpectrogram) -> Result<FusionVars> {
        let f_i = self.encode_image(g, b, image)?;
        let f_a = self.encode_audio(g, b, mel)?;
        self.forward_features(g, b, f_i, f_a)
    }

    /// Sum of the image, audio and fusion heads' cross-entropies.
    pub fn loss_graph(&self, g: &mut Graph<S>, vars: &FusionVars, label: usize) -> Result<Var> {
        if label >= self.config.n_classes {
            return Err(Error::invalid(format!("label {label} outside 0..{}", self.config.n_classes)));
        }
        let li = g.cross_entropy(vars.y_i, label)?;
        let la = g.cross_entropy(vars.y_a, label)?;
        let lt = g.cross_entropy(vars.y_t, label)?;
        let l = g.add(li, la)?;
        g.add(l, lt)
    }

    pub fn forward(&self, image: &Image, mel: &MelSpectrogram) -> Result<FusionOutputs<S>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let v = self.forward_graph(&mut g, &b, image, mel)?;
        Ok(outputs_of(&g, &v))
    }

    /// Loss and per-parameter gradients for one sample.
    pub fn example_gradients(&self, ex: &Example<'_>) -> Result<(S, Vec<Vec<S>>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, true);
        let v = self.forward_graph(&mut g, &b, ex.image, ex.mel)?;
        let loss = self.loss_graph(&mut g, &v, ex.label)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        Ok((value, self.params.gradients(&g, &b)))
    }

    /// One optimizer update on the mean loss of `batch`; returns that mean.
    ///
    /// Per-sample gradients are computed in parallel and reduced in batch
    /// order, so the result does not depend on thread scheduling.
    pub fn train_step(&mut self, opt: &mut Sgd<S>, batch: &[Example<'_>], lr: f64) -> Result<S> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step needs a nonempty batch"));
        }
        let results: Vec<(S, Vec<Vec<S>>)> = batch
            .par_iter()
            .map(|ex| self.example_gradients(ex))
            .collect::<Result<_>>()?;
        let scale = S::lit(1.0 / batch.len() as f64);
        let mut total = S::zero();
        let mut grads: Vec<Vec<S>> = self.params.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect();
        for (loss, g) in &results {
            total = total + *loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, &x)| *a = *a + x);
            }
        }
        grads.iter_mut().flatten().for_each(|x| *x = *x * scale);
        let mean = total * scale;
        if !mean.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        if self.config.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|&x| x * x).sum::<S>().sqrt();
            let clip = S::lit(self.config.grad_clip);
            if norm > clip {
                let k = clip / norm;
                grads.iter_mut().flatten().for_each(|x| *x = *x * k);
            }
        }
        opt.step(&mut self.params, &grads, lr)?;
        Ok(mean)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load(path)?;
        Ok(m)
    }
}

pub fn outputs_of<S: Scalar>(g: &Graph<S>, v: &FusionVars) -> FusionOutputs<S> {
    FusionOutputs {
        y_ia: g.value(v.y_ia).clone(),
        y_ai: g.value(v.y_ai).clone(),
        y_concat: g.value(v.y_concat).clone(),
        y_t_logits: g.value(v.y_t).clone(),
        y_i_logits: g.value(v.y_i).clone(),
        y_a_logits: g.value(v.y_a).clone(),
        ensemble_logits: g.value(v.ensemble).clone(),
    }
}

/// Three-head loss recomputed from finished outputs.
pub fn loss<S: Scalar>(outputs: &FusionOutputs<S>, label: usize) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for logits in [&outputs.y_i_logits, &outputs.y_a_logits, &outputs.y_t_logits] {
        let z = g.constant(logits.clone());
        let l = g.cross_entropy(z, label)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(g.value(total.expect("three heads")).clone())
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S = f32> {
    pub momentum: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
        }
        let (mu, lr) = (S::lit(self.momentum), S::lit(lr));
        let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = params.tensor_mut(id).data_mut();
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi = *pi - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::RngExt;

    fn micro() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 1,
            mlp_ratio: 2,
            n_encoder_layers: 1,
            n_fusion_layers: 2,
            image_patch: 2,
            max_image_tokens: 2,
            audio_patch: 2,
            n_mels: 4,
            max_audio_tokens: 2,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn inputs(seed: u64) -> (Image, MelSpectrogram) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Image::new(2, 4, 1, (0..8).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mel = MelSpectrogram {
            n_mels: 4,
            n_frames: 2,
            data: (0..8).map(|_| rng.random_range(-5.0f32..1.0)).collect(),
            hop: 1024,
            n_fft: 2048,
            sample_rate: 16_000,
        };
        (image, mel)
    }

    #[test]
    fn output_shapes() {
        let m: Model<f32> = Model::new(micro(), 1).unwrap();
        let (img, mel) = inputs(2);
        let out = m.forward(&img, &mel).unwrap();
        assert_eq!(out.y_ia.shape(), &[2, 8]);
        assert_eq!(out.y_ai.shape(), &[2, 8]);
        assert_eq!(out.y_concat.shape(), &[4, 8]);
        for h in Head::ALL {
            assert_eq!(out.logits(h).shape(), &[8]);
        }
        assert_eq!(out.y_concat.narrow(0, 0, 2).unwrap(), out.y_ia);
        assert_eq!(out.y_concat.narrow(0, 2, 2).unwrap(), out.y_ai);
    }

    #[test]
    fn uniform_logits_loss_is_three_log_eight() {
        let z = Tensor::<f64>::zeros(vec![8]).unwrap();
        let d = Tensor::<f64>::zeros(vec![1, 1]).unwrap();
        let out = FusionOutputs {
            y_ia: d.clone(),
            y_ai: d.clone(),
            y_concat: d,
            y_t_logits: z.clone(),
            y_i_logits: z.clone(),
            y_a_logits: z.clone(),
            ensemble_logits: z,
        };
        for label in 0..8 {
            let l = loss(&out, label).unwrap().item().unwrap();
            assert!((l - 3.0 * 8f64.ln()).abs() < 1e-12);
            assert!((l - 6.2383).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_ensemble_weights_select_one_head() {
        let (img, mel) = inputs(3);
        for (w, head) in [((1.0, 0.0, 0.0), Head::Image), ((0.0, 1.0, 0.0), Head::Fusion), ((0.0, 0.0, 1.0), Head::Audio)] {
            let cfg = ModelConfig {
                w_image: w.0,
                w_fusion: w.1,
                w_audio: w.2,
                ..micro()
            };
            let m: Model<f32> = Model::new(cfg, 4).unwrap();
            let out = m.forward(&img, &mel).unwrap();
            assert_eq!(out.ensemble_logits, *out.logits(head));
        }
    }

    #[test]
    fn symmetric_fusion_with_shared_input() {
        let mut m: Model<f64> = Model::new(micro(), 5).unwrap();
        {
            let pairs: Vec<(String, String)> = m
                .params
                .iter()
                .filter(|(_, n, _)| n.starts_with("mfm.cross_ia"))
                .map(|(_, n, _)| (n.to_string(), n.replace("cross_ia", "cross_ai")))
                .collect();
            for (src, dst) in pairs {
                let t = m.params.get(&src).unwrap().clone();
                m.params.set(&dst, t).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let f_i = g.constant(Tensor::from_f64(vec![2, 8], &f).unwrap());
        let f_a = g.constant(Tensor::from_f64(vec![2, 8], &f).unwrap());
        let (y_ia, y_ai, _) = m.modal_fusion(&mut g, &b, f_i, f_a).unwrap();
        assert_eq!(g.value(y_ia), g.value(y_ai));
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let m: Model<f64> = Model::new(micro(), 7).unwrap();
        let (img, mel) = inputs(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Move norm gains and biases off their 1/0 starting point.
        let params: Vec<Tensor<f64>> = m
            .params
            .iter()
            .map(|(_, name, t)| {
                if name.contains("norm") {
                    let d: Vec<f64> = t.data().iter().map(|&v| v + rng.random_range(-0.3..0.3)).collect();
                    Tensor::from_f64(t.shape().to_vec(), &d).unwrap()
                } else {
                    t.clone()
                }
            })
            .collect();
        let report = check_gradients(&params, 1e-4, |g, vars| {
            let b = Binding::from_vars(vars.to_vec());
            let v = m.forward_graph(g, &b, &img, &mel)?;
            m.loss_graph(g, &v, 3)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m: Model<f32> = Model::new(micro(), 10).unwrap();
        let before = m.params.clone();
        let data: Vec<_> = (0..4).map(|s| inputs(20 + s)).collect();
        let batch: Vec<Example> = data
            .iter()
            .enumerate()
            .map(|(i, (image, mel))| Example { image, mel, label: i })
            .collect();
        let mut opt = Sgd::new(0.9);
        for _ in 0..3 {
            m.train_step(&mut opt, &batch, 0.0).unwrap();
        }
        for ((_, _, a), (_, _, b)) in m.params.iter().zip(before.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let mut m: Model<f32> = Model::new(ModelConfig { init_std: 0.1, ..micro() }, 11).unwrap();
        let data: Vec<_> = (0..8).map(|s| inputs(40 + s)).collect();
        let batch: Vec<Example> = data
            .iter()
            .enumerate()
            .map(|(i, (image, mel))| Example { image, mel, label: i })
            .collect();
        let mut opt = Sgd::new(0.9);
        let first = m.train_step(&mut opt, &batch, 0.05).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = m.train_step(&mut opt, &batch, 0.05).unwrap();
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = micro();
        assert_eq!(ModelConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
        let parsed = ModelConfig::from_kv_str("# toy\nd_model = 16\n\nn_heads=2\n").unwrap();
        assert_eq!((parsed.d_model, parsed.n_heads), (16, 2));
        assert!(ModelConfig::from_kv_str("dmodel = 16").is_err());
        assert!(ModelConfig::from_kv_str("n_classes = 7").is_err());
        assert!(ModelConfig::from_kv_str("w_image = 0.5").is_err());
        assert!(ModelConfig::from_kv_str("d_model = 10\nn_heads = 4").is_err());
    }

    #[test]
    fn too_many_tokens_is_a_shape_error() {
        let m: Model<f32> = Model::new(micro(), 12).unwrap();
        let (_, mel) = inputs(13);
        let big = Image::new(4, 4, 1, vec![0.5; 16]).unwrap();
        assert!(matches!(m.forward(&big, &mel), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m: Model<f32> = Model::new(micro(), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::<f32>::load(micro(), &p).unwrap();
        let (img, mel) = inputs(15);
        assert_eq!(m.forward(&img, &mel).unwrap(), back.forward(&img, &mel).unwrap());
    }
}
