//! Desk-scale pre-LN Vision Transformer with prompt-aware token assembly.
//!
//! Layer 1 sees `[CLS, TVP^0, TTP, IVP, PATCH]`. Every later layer sees
//! `[CLS, TVP^(l-1), PATCH]`: the prompt rows emitted by the previous layer are
//! dropped and a fresh TVP block is inserted. Positional embeddings are added to
//! CLS and PATCH rows only, once, before layer 1.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_uniform, ParamGroup, ParamId, ParamStore};

/// An RGB image as `height x width x 3`, values in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            layers: 2,
            dim: 32,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    /// ViT-S/16 dimensions at 224 pixels.
    pub fn vit_small(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            layers: 12,
            dim: 384,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size not divisible by patch_size: {} % {} = {}",
                self.image_size,
                self.patch_size,
                self.image_size % self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio gives an empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens K.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Parameter count of the backbone, computed from dimensions alone.
    pub fn backbone_param_count(&self) -> usize {
        let c = self.dim;
        let h = self.mlp_hidden();
        let embed = self.patch_len() * c + c;
        let pos = (1 + self.num_patches()) * c;
        let layer = 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + 2 * c + (c * h + h) + (h * c + c);
        embed + pos + c + self.layers * layer + 2 * c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Cls,
    Tvp,
    Ttp,
    Ivp,
    Patch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// A token sequence recorded on a tape.
#[derive(Debug, Clone)]
pub struct TracedSequence {
    pub var: Var,
    pub roles: Vec<Role>,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub cls: ParamId,
    /// `(1 + K) x C`; row 0 belongs to CLS.
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

impl BackboneParams {
    /// Randomly initialized stand-in for a pretrained foundation model.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let h = cfg.mlp_hidden();
        let g = ParamGroup::Backbone;
        let pl = cfg.patch_len();
        let patch_weight = store.add("backbone.patch.weight", g, xavier_uniform(rng, pl, c, pl, c));
        let patch_bias = store.add("backbone.patch.bias", g, Array2::zeros((1, c)));
        let cls = store.add("backbone.cls", g, normal(rng, 1, c, 0.02));
        let pos = store.add("backbone.pos", g, normal(rng, 1 + cfg.num_patches(), c, 0.02));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |part: &str| format!("backbone.layer{l}.{part}");
            layers.push(LayerParams {
                ln1_gamma: store.add(name("ln1.gamma"), g, Array2::ones((1, c))),
                ln1_beta: store.add(name("ln1.beta"), g, Array2::zeros((1, c))),
                qkv_weight: store.add(name("qkv.weight"), g, xavier_uniform(rng, c, 3 * c, c, c)),
                qkv_bias: store.add(name("qkv.bias"), g, Array2::zeros((1, 3 * c))),
                proj_weight: store.add(name("proj.weight"), g, xavier_uniform(rng, c, c, c, c)),
                proj_bias: store.add(name("proj.bias"), g, Array2::zeros((1, c))),
                ln2_gamma: store.add(name("ln2.gamma"), g, Array2::ones((1, c))),
                ln2_beta: store.add(name("ln2.beta"), g, Array2::zeros((1, c))),
                fc1_weight: store.add(name("fc1.weight"), g, xavier_uniform(rng, c, h, c, h)),
                fc1_bias: store.add(name("fc1.bias"), g, Array2::zeros((1, h))),
                fc2_weight: store.add(name("fc2.weight"), g, xavier_uniform(rng, h, c, h, c)),
                fc2_bias: store.add(name("fc2.bias"), g, Array2::zeros((1, c))),
            });
        }
        let norm_gamma = store.add("backbone.norm.gamma", g, Array2::ones((1, c)));
        let norm_beta = store.add("backbone.norm.beta", g, Array2::zeros((1, c)));
        Ok(Self {
            patch_weight,
            patch_bias,
            cls,
            pos,
            layers,
            norm_gamma,
            norm_beta,
        })
    }
}

pub(crate) fn check_image(image: &Image, size: usize, block: &str) -> Result<()> {
    let (h, w, ch) = image.dim();
    if h != size || w != size || ch != 3 {
        return Err(Error::Config(format!(
            "{block}: expected image {size}x{size}x3, got {h}x{w}x{ch}"
        )));
    }
    Ok(())
}

/// Flattens the image into `K x (p*p*3)` patch vectors, row-major over the patch
/// grid; each vector is row-major over (y, x, channel) inside the patch.
pub fn patch_matrix(image: &Image, cfg: &ModelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_image(image, cfg.image_size, "patchify")?;
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_len()));
    for gy in 0..grid {
        for gx in 0..grid {
            let block = image.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
            let mut row = out.row_mut(gy * grid + gx);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

pub fn trace_patchify(tape: &mut Tape<'_>, image: &Image, cfg: &ModelConfig, params: &BackboneParams) -> Result<Var> {
    let patches = tape.input(patch_matrix(image, cfg)?);
    let w = tape.param(params.patch_weight);
    let b = tape.param(params.patch_bias);
    let emb = tape.matmul(patches, w);
    let emb = tape.add_row(emb, b);
    let pos = tape.param(params.pos);
    let pos_patch = tape.slice_rows(pos, 1, cfg.num_patches());
    Ok(tape.add(emb, pos_patch))
}

/// PATCH rows (`K x C`) with positional embeddings added.
pub fn patchify(image: &Image, cfg: &ModelConfig, params: &BackboneParams, store: &ParamStore) -> Result<Array2<f64>> {
    let mut tape = Tape::inference(store);
    let v = trace_patchify(&mut tape, image, cfg, params)?;
    Ok(tape.value(v).clone())
}

/// CLS token with its positional embedding, `1 x C`.
pub fn trace_cls(tape: &mut Tape<'_>, params: &BackboneParams) -> Var {
    let cls = tape.param(params.cls);
    let pos = tape.param(params.pos);
    let pos0 = tape.slice_rows(pos, 0, 1);
    tape.add(cls, pos0)
}

fn check_width(block: &str, rows_cols: (usize, usize), width: usize) -> Result<()> {
    if rows_cols.1 != width {
        return Err(Error::shape(block, format!("width {width}"), format!("width {}", rows_cols.1)));
    }
    Ok(())
}

pub fn trace_assemble_first_input(
    tape: &mut Tape<'_>,
    cls: Var,
    tvp0: Var,
    ttp: Var,
    ivp: Var,
    patches: Var,
) -> Result<TracedSequence> {
    let width = tape.shape(cls).1;
    if tape.shape(cls).0 != 1 {
        return Err(Error::shape("cls", "1 row", format!("{} rows", tape.shape(cls).0)));
    }
    let blocks = [
        ("tvp", tvp0, Role::Tvp),
        ("ttp", ttp, Role::Ttp),
        ("ivp", ivp, Role::Ivp),
        ("patches", patches, Role::Patch),
    ];
    let mut roles = vec![Role::Cls];
    for (name, var, role) in blocks {
        let shape = tape.shape(var);
        check_width(name, shape, width)?;
        roles.extend(std::iter::repeat_n(role, shape.0));
    }
    let var = tape.concat_rows(&[cls, tvp0, ttp, ivp, patches]);
    Ok(TracedSequence { var, roles })
}

/// Builds the layer-1 input `[CLS, TVP, TTP, IVP, PATCH]`.
pub fn assemble_first_input(
    cls: &Array1<f64>,
    tvp0: &Array2<f64>,
    ttp: &Array2<f64>,
    ivp: &Array2<f64>,
    patches: &Array2<f64>,
) -> Result<TokenSequence> {
    let store = ParamStore::new();
    let mut tape = Tape::inference(&store);
    let c = tape.input(cls.clone().insert_axis(ndarray::Axis(0)));
    let t = tape.input(tvp0.clone());
    let x = tape.input(ttp.clone());
    let i = tape.input(ivp.clone());
    let p = tape.input(patches.clone());
    let seq = trace_assemble_first_input(&mut tape, c, t, x, i, p)?;
    Ok(TokenSequence {
        tokens: tape.value(seq.var).clone(),
        roles: seq.roles,
    })
}

/// One pre-LN block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
pub fn trace_layer(tape: &mut Tape<'_>, x: Var, layer: &LayerParams, cfg: &ModelConfig) -> Result<Var> {
    let x1 = trace_attention_sublayer(tape, x, layer, cfg)?;
    Ok(trace_mlp_sublayer(tape, x1, layer))
}

/// `x + Attn(LN1(x))` with full multi-head self-attention over all rows.
pub fn trace_attention_sublayer(tape: &mut Tape<'_>, x: Var, layer: &LayerParams, cfg: &ModelConfig) -> Result<Var> {
    let c = cfg.dim;
    check_width("transformer layer input", tape.shape(x), c)?;
    let d = cfg.head_dim();

    let g1 = tape.param(layer.ln1_gamma);
    let b1 = tape.param(layer.ln1_beta);
    let h = tape.layer_norm(x, g1, b1);
    let wqkv = tape.param(layer.qkv_weight);
    let bqkv = tape.param(layer.qkv_bias);
    let qkv = tape.matmul(h, wqkv);
    let qkv = tape.add_row(qkv, bqkv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let q = tape.slice_cols(qkv, head * d, d);
        let k = tape.slice_cols(qkv, c + head * d, d);
        let v = tape.slice_cols(qkv, 2 * c + head * d, d);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores);
        heads.push(tape.matmul(att, v));
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let wo = tape.param(layer.proj_weight);
    let bo = tape.param(layer.proj_bias);
    let attn = tape.matmul(merged, wo);
    let attn = tape.add_row(attn, bo);
    Ok(tape.add(x, attn))
}

/// `x + MLP(LN2(x))`.
pub fn trace_mlp_sublayer(tape: &mut Tape<'_>, x: Var, layer: &LayerParams) -> Var {
    let g2 = tape.param(layer.ln2_gamma);
    let b2 = tape.param(layer.ln2_beta);
    let h = tape.layer_norm(x, g2, b2);
    let w1 = tape.param(layer.fc1_weight);
    let b1 = tape.param(layer.fc1_bias);
    let m = tape.matmul(h, w1);
    let m = tape.add_row(m, b1);
    let m = tape.gelu(m);
    let w2 = tape.param(layer.fc2_weight);
    let b2 = tape.param(layer.fc2_bias);
    let m = tape.matmul(m, w2);
    let m = tape.add_row(m, b2);
    tape.add(x, m)
}

pub fn transformer_layer(
    seq: &TokenSequence,
    layer: &LayerParams,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<TokenSequence> {
    let mut tape = Tape::inference(store);
    let x = tape.input(seq.tokens.clone());
    let y = trace_layer(&mut tape, x, layer, cfg)?;
    Ok(TokenSequence {
        tokens: tape.value(y).clone(),
        roles: seq.roles.clone(),
    })
}

fn patch_block(roles: &[Role]) -> Result<(usize, usize)> {
    if roles.first() != Some(&Role::Cls) {
        return Err(Error::Input("token sequence must start with its CLS row".into()));
    }
    let start = roles
        .iter()
        .position(|r| *r == Role::Patch)
        .ok_or_else(|| Error::Input("token sequence has no PATCH rows".into()))?;
    if roles[start..].iter().any(|r| *r != Role::Patch) {
        return Err(Error::Input("PATCH rows must form the trailing block".into()));
    }
    Ok((start, roles.len() - start))
}

pub fn trace_reprompt(tape: &mut Tape<'_>, seq: &TracedSequence, tvp: Var) -> Result<TracedSequence> {
    let width = tape.shape(seq.var).1;
    check_width("tvp", tape.shape(tvp), width)?;
    let (start, k) = patch_block(&seq.roles)?;
    let cls = tape.slice_rows(seq.var, 0, 1);
    let patches = tape.slice_rows(seq.var, start, k);
    let n = tape.shape(tvp).0;
    let var = tape.concat_rows(&[cls, tvp, patches]);
    let mut roles = Vec::with_capacity(1 + n + k);
    roles.push(Role::Cls);
    roles.extend(std::iter::repeat_n(Role::Tvp, n));
    roles.extend(std::iter::repeat_n(Role::Patch, k));
    Ok(TracedSequence { var, roles })
}

/// Keeps CLS and PATCH rows of a layer output and inserts a fresh TVP block.
pub fn reprompt(layer_output: &TokenSequence, tvp: &Array2<f64>) -> Result<TokenSequence> {
    let store = ParamStore::new();
    let mut tape = Tape::inference(&store);
    let x = tape.input(layer_output.tokens.clone());
    let t = tape.input(tvp.clone());
    let traced = TracedSequence {
        var: x,
        roles: layer_output.roles.clone(),
    };
    let out = trace_reprompt(&mut tape, &traced, t)?;
    Ok(TokenSequence {
        tokens: tape.value(out.var).clone(),
        roles: out.roles,
    })
}

/// Prompt blocks fed to one forward pass, each `rows x C` (rows may be 0).
#[derive(Debug, Clone)]
pub struct TracedPrompts {
    /// One block per layer.
    pub tvp: Vec<Var>,
    pub ttp: Var,
    pub ivp: Var,
}

/// Full prompted forward pass; returns the normalized final CLS row, `1 x C`.
pub fn trace_forward(
    tape: &mut Tape<'_>,
    image: &Image,
    cfg: &ModelConfig,
    backbone: &BackboneParams,
    prompts: &TracedPrompts,
) -> Result<Var> {
    trace_forward_observed(tape, image, cfg, backbone, prompts, &mut |_, _| {})
}

/// [`trace_forward`] that hands each layer's input sequence to `observe`
/// before the layer runs.
pub fn trace_forward_observed(
    tape: &mut Tape<'_>,
    image: &Image,
    cfg: &ModelConfig,
    backbone: &BackboneParams,
    prompts: &TracedPrompts,
    observe: &mut dyn FnMut(usize, &TracedSequence),
) -> Result<Var> {
    if prompts.tvp.len() != cfg.layers {
        return Err(Error::shape("tvp", format!("{} layers", cfg.layers), format!("{} layers", prompts.tvp.len())));
    }
    let patches = trace_patchify(tape, image, cfg, backbone)?;
    let cls = trace_cls(tape, backbone);
    let mut seq = trace_assemble_first_input(tape, cls, prompts.tvp[0], prompts.ttp, prompts.ivp, patches)?;
    for (l, layer) in backbone.layers.iter().enumerate() {
        if l > 0 {
            seq = trace_reprompt(tape, &seq, prompts.tvp[l])?;
        }
        observe(l, &seq);
        seq.var = trace_layer(tape, seq.var, layer, cfg)?;
    }
    Ok(trace_head_norm(tape, seq.var, backbone))
}

fn trace_head_norm(tape: &mut Tape<'_>, x: Var, backbone: &BackboneParams) -> Var {
    let cls = tape.slice_rows(x, 0, 1);
    let g = tape.param(backbone.norm_gamma);
    let b = tape.param(backbone.norm_beta);
    tape.layer_norm(cls, g, b)
}

/// Promptless ViT forward on the same weights: `[CLS, PATCH]` through every layer.
pub fn trace_plain_forward(tape: &mut Tape<'_>, image: &Image, cfg: &ModelConfig, backbone: &BackboneParams) -> Result<Var> {
    let patches = trace_patchify(tape, image, cfg, backbone)?;
    let cls = trace_cls(tape, backbone);
    let mut x = tape.concat_rows(&[cls, patches]);
    for layer in &backbone.layers {
        x = trace_layer(tape, x, layer, cfg)?;
    }
    Ok(trace_head_norm(tape, x, backbone))
}

pub fn plain_forward(image: &Image, cfg: &ModelConfig, backbone: &BackboneParams, store: &ParamStore) -> Result<Array1<f64>> {
    let mut tape = Tape::inference(store);
    let v = trace_plain_forward(&mut tape, image, cfg, backbone)?;
    Ok(tape.value(v).row(0).to_owned())
}

/// Per-layer input lengths implied by the token layout.
pub fn layer_input_lengths(
    cfg: &ModelConfig,
    n_tvp: usize,
    n_ttp: usize,
    n_ivp: usize,
) -> Vec<usize> {
    let k = cfg.num_patches();
    (0..cfg.layers)
        .map(|l| if l == 0 { 1 + n_tvp + n_ttp + n_ivp + k } else { 1 + n_tvp + k })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn toy() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 2,
        }
    }

    #[test]
    fn patch_counts() {
        let mut cfg = ModelConfig::vit_small(4);
        assert_eq!(cfg.num_patches(), 196);
        cfg.image_size = 32;
        cfg.patch_size = 8;
        assert_eq!(cfg.num_patches(), 16);
        cfg.image_size = 30;
        cfg.patch_size = 16;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("image_size not divisible"), "{err}");
    }

    #[test]
    fn patchify_rejects_wrong_image_size() {
        let cfg = toy();
        let mut store = ParamStore::new();
        let params = BackboneParams::init(&cfg, &mut store, &mut rng_for(1, "b", 0)).unwrap();
        let img = Image::zeros((6, 6, 3));
        let err = patchify(&img, &cfg, &params, &store).unwrap_err().to_string();
        assert!(err.contains("expected image 8x8x3, got 6x6x3"), "{err}");
    }

    #[test]
    fn patch_matrix_layout() {
        let cfg = toy();
        let img = Image::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let m = patch_matrix(&img, &cfg).unwrap();
        assert_eq!(m.dim(), (4, 48));
        // second patch in the first grid row starts at pixel (0, 4)
        assert_eq!(m[[1, 0]], 40.0);
        assert_eq!(m[[1, 2]], 42.0);
        // patch (1,0): start at (4,0); element for pixel (5,1), channel 2
        assert_eq!(m[[2, (4 + 1) * 3 + 2]], 512.0);
    }

    #[test]
    fn assemble_orders_roles() {
        let c = 4;
        let seq = assemble_first_input(
            &Array1::zeros(c),
            &Array2::zeros((10, c)),
            &Array2::zeros((2, c)),
            &Array2::zeros((2, c)),
            &Array2::zeros((196, c)),
        )
        .unwrap();
        assert_eq!(seq.len(), 211);
        assert_eq!(seq.roles[0], Role::Cls);
        assert_eq!(seq.roles[1], Role::Tvp);
        assert_eq!(seq.roles[11], Role::Ttp);
        assert_eq!(seq.roles[13], Role::Ivp);
        assert_eq!(seq.roles[15], Role::Patch);

        let plain = assemble_first_input(
            &Array1::zeros(c),
            &Array2::zeros((0, c)),
            &Array2::zeros((0, c)),
            &Array2::zeros((0, c)),
            &Array2::zeros((196, c)),
        )
        .unwrap();
        assert_eq!(plain.len(), 197);
    }

    #[test]
    fn assemble_names_the_offending_block() {
        let err = assemble_first_input(
            &Array1::zeros(4),
            &Array2::zeros((1, 4)),
            &Array2::zeros((2, 5)),
            &Array2::zeros((1, 4)),
            &Array2::zeros((3, 4)),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("ttp"), "{err}");
    }

    #[test]
    fn reprompt_replaces_prompt_rows() {
        let c = 3;
        let mut roles = vec![Role::Cls];
        roles.extend(std::iter::repeat_n(Role::Tvp, 10));
        roles.extend([Role::Ttp, Role::Ttp, Role::Ivp, Role::Ivp]);
        roles.extend(std::iter::repeat_n(Role::Patch, 196));
        let tokens = Array2::from_shape_fn((211, c), |(i, j)| (i * 7 + j) as f64 * 0.1);
        let seq = TokenSequence { tokens: tokens.clone(), roles };
        let fresh = Array2::from_elem((10, c), -1.0);
        let out = reprompt(&seq, &fresh).unwrap();
        assert_eq!(out.len(), 207);
        assert_eq!(out.tokens.row(0), tokens.row(0));
        assert_eq!(out.tokens.slice(s![1..11, ..]), fresh);
        assert_eq!(out.tokens.slice(s![11.., ..]), tokens.slice(s![15.., ..]));

        let none = reprompt(&seq, &Array2::zeros((0, c))).unwrap();
        assert_eq!(none.len(), 197);
        assert_eq!(none.count(Role::Tvp), 0);

        let err = reprompt(&seq, &Array2::zeros((10, c + 1))).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_mlp_leaves_attention_output() {
        let cfg = toy();
        let mut store = ParamStore::new();
        let params = BackboneParams::init(&cfg, &mut store, &mut rng_for(3, "b", 0)).unwrap();
        let layer = params.layers[0].clone();
        let x = normal(&mut rng_for(3, "x", 0), 5, cfg.dim, 1.0);
        let seq = TokenSequence {
            tokens: x.clone(),
            roles: std::iter::once(Role::Cls).chain(std::iter::repeat_n(Role::Patch, 4)).collect(),
        };
        let full = transformer_layer(&seq, &layer, &cfg, &store).unwrap();
        assert_eq!(full.len(), 5);
        assert_eq!(full.roles, seq.roles);

        for id in [layer.fc1_weight, layer.fc1_bias, layer.fc2_weight, layer.fc2_bias] {
            store.value_mut(id).fill(0.0);
        }
        let zeroed = transformer_layer(&seq, &layer, &cfg, &store).unwrap();
        let mut tape = Tape::inference(&store);
        let xv = tape.input(x);
        let attn_only = trace_attention_sublayer(&mut tape, xv, &layer, &cfg).unwrap();
        assert_eq!(tape.value(attn_only), &zeroed.tokens);
        assert_ne!(zeroed.tokens, full.tokens);
    }

    #[test]
    fn lengths_follow_layout() {
        let cfg = ModelConfig::vit_small(4);
        let lens = layer_input_lengths(&cfg, 10, 2, 2);
        assert_eq!(lens[0], 211);
        assert!(lens[1..].iter().all(|&l| l == 207));
    }

    #[test]
    fn analytic_backbone_count_matches_allocation() {
        let cfg = toy();
        let mut store = ParamStore::new();
        BackboneParams::init(&cfg, &mut store, &mut rng_for(0, "b", 0)).unwrap();
        assert_eq!(store.count(ParamGroup::Backbone), cfg.backbone_param_count());
    }
}
