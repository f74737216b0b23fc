//! The three prompt families.
//!
//! * TVP: one learnable `N x C` matrix per transformer layer.
//! * TTP: a rendered task sentence, encoded by a frozen text encoder, then
//!   mapped by a trainable affine projection to `T x C`.
//! * IVP: a per-image embedding from a small convolutional stack, replicated
//!   into `M` identical rows.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::backbone::{check_image, Image};
use crate::error::{Error, Result};
use crate::params::{hash_array, hex, normal, uniform, xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::seed::rng_for;

pub const DEFAULT_TEMPLATE: &str = "A patch image showing {stain} pathology tissues for {task}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// TVP tokens per layer (N).
    pub tvp_tokens: usize,
    /// TTP tokens (T).
    pub ttp_tokens: usize,
    /// IVP tokens (M).
    pub ivp_tokens: usize,
    pub stain: String,
    pub task: String,
    pub template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            tvp_tokens: 10,
            ttp_tokens: 2,
            ivp_tokens: 2,
            stain: "HE".into(),
            task: "tumor grading".into(),
            template: DEFAULT_TEMPLATE.into(),
        }
    }
}

/// Substitutes `{stain}` and `{task}`; each must appear exactly once.
pub fn render_template(cfg: &PromptConfig) -> Result<String> {
    for placeholder in ["{stain}", "{task}"] {
        let n = cfg.template.matches(placeholder).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "template must contain {placeholder} exactly once, found {n}"
            )));
        }
    }
    Ok(cfg
        .template
        .replace("{stain}", &cfg.stain)
        .replace("{task}", &cfg.task))
}

/// A frozen sentence encoder producing one pooled feature vector.
pub trait TextEncoder: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Array1<f64>>;

    /// Number of encoder parameters, excluded from trainable-fraction totals.
    fn param_count(&self) -> usize;

    /// Digest of the encoder parameters.
    fn checksum(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            buckets: 2048,
            seed: 0x7e47,
        }
    }
}

/// Character-trigram counts hashed into buckets, L2-normalized, then mapped
/// through a fixed Gaussian matrix.
#[derive(Debug, Clone)]
pub struct HashedTrigramEncoder {
    config: TextEncoderConfig,
    table: Array2<f64>,
}

impl HashedTrigramEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        if config.dim == 0 || config.buckets == 0 {
            return Err(Error::Config("text encoder dim and buckets must be positive".into()));
        }
        let mut rng = rng_for(config.seed, "text_encoder", 0);
        let table = normal(&mut rng, config.buckets, config.dim, 1.0);
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    fn bucket(&self, gram: &[char]) -> usize {
        // FNV-1a over the UTF-8 bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = [0u8; 4];
        for ch in gram {
            for b in ch.encode_utf8(&mut buf).bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        (h % self.config.buckets as u64) as usize
    }
}

impl TextEncoder for HashedTrigramEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Input("cannot encode empty text".into()));
        }
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut counts = Array1::<f64>::zeros(self.config.buckets);
        for gram in chars.windows(3) {
            counts[self.bucket(gram)] += 1.0;
        }
        let norm = counts.dot(&counts).sqrt();
        counts /= norm;
        Ok(counts.dot(&self.table))
    }

    fn param_count(&self) -> usize {
        self.table.len()
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hash_array(&mut hasher, &self.table);
        hex(&hasher.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct TvpParams {
    /// One `N x C` matrix per layer.
    pub layers: Vec<ParamId>,
    pub tokens: usize,
}

/// `L` matrices of `N x C`, uniform on `[-r, r]` with `r = sqrt(6 / (C + N))`.
pub fn init_tvp<R: Rng + ?Sized>(layers: usize, tokens: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> TvpParams {
    let r = if dim + tokens == 0 { 0.0 } else { (6.0 / (dim + tokens) as f64).sqrt() };
    let ids = (0..layers)
        .map(|l| store.add(format!("tvp.layer{l}"), ParamGroup::Tvp, uniform(rng, tokens, dim, r)))
        .collect();
    TvpParams { layers: ids, tokens }
}

#[derive(Debug, Clone)]
pub struct TtpParams {
    pub encoder: Arc<dyn TextEncoder>,
    /// Pooled encoder output for the rendered template, `1 x D`. Constant per
    /// (stain, task), so it is computed once.
    pub feature: Array2<f64>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub tokens: usize,
}

impl TtpParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &PromptConfig,
        encoder: Arc<dyn TextEncoder>,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let text = render_template(cfg)?;
        let feature = encode_text(&text, encoder.as_ref())?.insert_axis(ndarray::Axis(0));
        let d = encoder.dim();
        let out = cfg.ttp_tokens * dim;
        let weight = store.add("ttp.proj.weight", ParamGroup::TextProjection, xavier_uniform(rng, d, out, d, out));
        let bias = store.add("ttp.proj.bias", ParamGroup::TextProjection, Array2::zeros((1, out)));
        Ok(Self {
            encoder,
            feature,
            weight,
            bias,
            tokens: cfg.ttp_tokens,
        })
    }
}

pub fn encode_text(text: &str, encoder: &dyn TextEncoder) -> Result<Array1<f64>> {
    let f = encoder.encode(text)?;
    if f.len() != encoder.dim() {
        return Err(Error::shape("text encoder output", encoder.dim(), f.len()));
    }
    Ok(f)
}

pub fn trace_project_text(tape: &mut Tape<'_>, feature: Var, weight: ParamId, bias: ParamId, tokens: usize, dim: usize) -> Result<Var> {
    let w = tape.param(weight);
    let (in_dim, out_dim) = tape.shape(w);
    if tape.shape(feature) != (1, in_dim) {
        return Err(Error::shape(
            "text projection input",
            format!("1x{in_dim}"),
            format!("{}x{}", tape.shape(feature).0, tape.shape(feature).1),
        ));
    }
    if out_dim != tokens * dim {
        return Err(Error::shape("text projection output", tokens * dim, out_dim));
    }
    let b = tape.param(bias);
    let flat = tape.matmul(feature, w);
    let flat = tape.add_row(flat, b);
    Ok(tape.reshape(flat, tokens, dim))
}

/// Affine map of the pooled feature to `T x C`.
pub fn project_text(feature: &Array1<f64>, ttp: &TtpParams, dim: usize, store: &ParamStore) -> Result<Array2<f64>> {
    let mut tape = Tape::inference(store);
    let f = tape.input(feature.clone().insert_axis(ndarray::Axis(0)));
    let out = trace_project_text(&mut tape, f, ttp.weight, ttp.bias, ttp.tokens, dim)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VrmConfig {
    /// Output channels of each stride-2 3x3 convolution.
    pub channels: Vec<usize>,
}

impl Default for VrmConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
        }
    }
}

impl VrmConfig {
    pub fn param_count(&self, dim: usize) -> usize {
        let mut in_ch = 3;
        let mut total = 0;
        for &out in &self.channels {
            total += 9 * in_ch * out + out;
            in_ch = out;
        }
        total + in_ch * dim + dim
    }
}

#[derive(Debug, Clone)]
pub struct VrmParams {
    pub convs: Vec<(ParamId, ParamId)>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub image_size: usize,
}

impl VrmParams {
    pub fn init<R: Rng + ?Sized>(cfg: &VrmConfig, image_size: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::Config("vrm needs at least one convolution".into()));
        }
        let g = ParamGroup::Vrm;
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(cfg.channels.len());
        for (i, &out) in cfg.channels.iter().enumerate() {
            let fan_in = 9 * in_ch;
            // He-style range for the stacked convolutions
            let r = (6.0 / fan_in as f64).sqrt();
            let w = store.add(format!("vrm.conv{i}.weight"), g, uniform(rng, fan_in, out, r));
            let b = store.add(format!("vrm.conv{i}.bias"), g, Array2::zeros((1, out)));
            convs.push((w, b));
            in_ch = out;
        }
        let out_weight = store.add("vrm.out.weight", g, xavier_uniform(rng, in_ch, dim, in_ch, dim));
        let out_bias = store.add("vrm.out.bias", g, Array2::zeros((1, dim)));
        Ok(Self {
            convs,
            out_weight,
            out_bias,
            image_size,
        })
    }
}

/// Conv stack, global average pool and linear map to one `1 x C` embedding.
pub fn trace_vrm(tape: &mut Tape<'_>, image: &Image, vrm: &VrmParams) -> Result<Var> {
    check_image(image, vrm.image_size, "vrm")?;
    let (h, w, _) = image.dim();
    let flat: Vec<f64> = image.iter().copied().collect();
    let mut x = tape.input(Array2::from_shape_vec((h * w, 3), flat).expect("h*w*3 elements"));
    let (mut height, mut width, mut channels) = (h, w, 3);
    for &(wid, bid) in &vrm.convs {
        let geom = ConvGeometry {
            height,
            width,
            channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let cols = tape.im2col(x, geom);
        let kw = tape.param(wid);
        let kb = tape.param(bid);
        let y = tape.matmul(cols, kw);
        let y = tape.add_row(y, kb);
        x = tape.gelu(y);
        height = geom.out_height();
        width = geom.out_width();
        channels = tape.shape(kw).1;
    }
    let pooled = tape.mean_rows(x);
    let w = tape.param(vrm.out_weight);
    let b = tape.param(vrm.out_bias);
    let e = tape.matmul(pooled, w);
    Ok(tape.add_row(e, b))
}

pub fn vrm_forward(image: &Image, vrm: &VrmParams, store: &ParamStore) -> Result<Array1<f64>> {
    let mut tape = Tape::inference(store);
    let v = trace_vrm(&mut tape, image, vrm)?;
    Ok(tape.value(v).row(0).to_owned())
}

pub fn trace_replicate(tape: &mut Tape<'_>, embedding: Var, tokens: usize) -> Var {
    tape.gather_rows(embedding, vec![0; tokens])
}

/// `M` identical copies of the embedding.
pub fn replicate_ivp(embedding: &Array1<f64>, tokens: usize) -> Array2<f64> {
    let mut out = Array2::zeros((tokens, embedding.len()));
    for mut row in out.rows_mut() {
        row.assign(embedding);
    }
    out
}

/// All tunable prompt parameters. Families disabled by the tuning mode are
/// absent and contribute zero tokens.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub config: PromptConfig,
    pub tvp: Option<TvpParams>,
    pub ttp: Option<TtpParams>,
    pub vrm: Option<VrmParams>,
}

impl PromptBundle {
    pub fn empty(config: PromptConfig) -> Self {
        Self {
            config,
            tvp: None,
            ttp: None,
            vrm: None,
        }
    }

    pub fn tvp_tokens(&self) -> usize {
        self.tvp.as_ref().map_or(0, |t| t.tokens)
    }

    pub fn ttp_tokens(&self) -> usize {
        self.ttp.as_ref().map_or(0, |t| t.tokens)
    }

    pub fn ivp_tokens(&self) -> usize {
        if self.vrm.is_some() {
            self.config.ivp_tokens
        } else {
            0
        }
    }

    /// Records every prompt block for one image on the tape.
    pub fn trace(&self, tape: &mut Tape<'_>, image: &Image, layers: usize, dim: usize) -> Result<crate::backbone::TracedPrompts> {
        let tvp = match &self.tvp {
            Some(t) => {
                if t.layers.len() != layers {
                    return Err(Error::shape("tvp", format!("{layers} layers"), format!("{} layers", t.layers.len())));
                }
                t.layers.iter().map(|id| tape.param(*id)).collect()
            }
            None => (0..layers).map(|_| tape.input(Array2::zeros((0, dim)))).collect(),
        };
        let ttp = match &self.ttp {
            Some(t) => {
                let f = tape.input(t.feature.clone());
                trace_project_text(tape, f, t.weight, t.bias, t.tokens, dim)?
            }
            None => tape.input(Array2::zeros((0, dim))),
        };
        let ivp = match &self.vrm {
            Some(v) => {
                let e = trace_vrm(tape, image, v)?;
                trace_replicate(tape, e, self.config.ivp_tokens)
            }
            None => tape.input(Array2::zeros((0, dim))),
        };
        Ok(crate::backbone::TracedPrompts { tvp, ttp, ivp })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> HashedTrigramEncoder {
        HashedTrigramEncoder::new(TextEncoderConfig::default()).unwrap()
    }

    #[test]
    fn renders_templates() {
        let cfg = PromptConfig::default();
        assert_eq!(
            render_template(&cfg).unwrap(),
            "A patch image showing HE pathology tissues for tumor grading"
        );
        let ihc = PromptConfig {
            stain: "IHC".into(),
            task: "HER2 scoring".into(),
            ..PromptConfig::default()
        };
        assert_eq!(
            render_template(&ihc).unwrap(),
            "A patch image showing IHC pathology tissues for HER2 scoring"
        );
        let broken = PromptConfig {
            template: "tissue stained with {stain}".into(),
            ..PromptConfig::default()
        };
        assert!(matches!(render_template(&broken), Err(Error::Template(_))));
        let twice = PromptConfig {
            template: "{stain} {stain} {task}".into(),
            ..PromptConfig::default()
        };
        assert!(render_template(&twice).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_discriminative() {
        let enc = encoder();
        let a = enc.encode("A patch image showing HE pathology tissues for tumor grading").unwrap();
        let b = enc.encode("A patch image showing HE pathology tissues for tumor grading").unwrap();
        let c = enc.encode("A patch image showing HE pathology tissues for HER2 scoring").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 768);
        assert!(matches!(enc.encode("  "), Err(Error::Input(_))));
        // independent construction from the same seed yields the same table
        assert_eq!(enc.checksum(), encoder().checksum());
    }

    #[test]
    fn tvp_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let tvp = init_tvp(12, 10, 384, &mut store, &mut rng_for(5, "tvp", 0));
        assert_eq!(tvp.layers.len(), 12);
        for id in &tvp.layers {
            assert_eq!(store.value(*id).dim(), (10, 384));
            let r = (6.0f64 / 394.0).sqrt();
            assert!(store.value(*id).iter().all(|v| v.abs() <= r));
        }
        let mut again = ParamStore::new();
        init_tvp(12, 10, 384, &mut again, &mut rng_for(5, "tvp", 0));
        assert_eq!(store.checksum(ParamGroup::Tvp), again.checksum(ParamGroup::Tvp));

        let mut empty = ParamStore::new();
        let tvp0 = init_tvp(12, 0, 384, &mut empty, &mut rng_for(5, "tvp", 0));
        assert_eq!(tvp0.layers.len(), 12);
        assert!(tvp0.layers.iter().all(|id| empty.value(*id).dim() == (0, 384)));
    }

    #[test]
    fn projection_shape_and_linearity() {
        let mut store = ParamStore::new();
        let cfg = PromptConfig::default();
        let ttp = TtpParams::init(&cfg, Arc::new(encoder()), 384, &mut store, &mut rng_for(1, "ttp", 0)).unwrap();
        let out = project_text(&ttp.feature.row(0).to_owned(), &ttp, 384, &store).unwrap();
        assert_eq!(out.dim(), (2, 384));
        let zero = project_text(&Array1::zeros(768), &ttp, 384, &store).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let err = project_text(&Array1::zeros(10), &ttp, 384, &store).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn replication() {
        let e = Array1::from_vec(vec![0.5, -1.0, 2.0]);
        let two = replicate_ivp(&e, 2);
        assert_eq!(two.row(0), two.row(1));
        assert_eq!(two.row(0), e);
        assert_eq!(replicate_ivp(&e, 0).dim(), (0, 3));
        let five = replicate_ivp(&e, 5);
        assert_eq!(five.row(0), five.row(4));
    }

    #[test]
    fn vrm_param_count() {
        let cfg = VrmConfig::default();
        let mut store = ParamStore::new();
        VrmParams::init(&cfg, 16, 32, &mut store, &mut rng_for(0, "vrm", 0)).unwrap();
        assert_eq!(store.count(ParamGroup::Vrm), cfg.param_count(32));
    }

    #[test]
    fn vrm_embeds_and_checks_size() {
        let cfg = VrmConfig::default();
        let mut store = ParamStore::new();
        let vrm = VrmParams::init(&cfg, 16, 32, &mut store, &mut rng_for(0, "vrm", 0)).unwrap();
        let img = Image::from_shape_fn((16, 16, 3), |(y, x, c)| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
        let a = vrm_forward(&img, &vrm, &store).unwrap();
        let b = vrm_forward(&img, &vrm, &store).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert!(matches!(
            vrm_forward(&Image::zeros((8, 8, 3)), &vrm, &store),
            Err(Error::Config(_))
        ));
    }
}
