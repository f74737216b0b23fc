//! A frozen backbone plus prompt bundle plus task head.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{trace_forward, trace_forward_observed, BackboneParams, Image, ModelConfig, TokenSequence};
use crate::data::{Item, LabeledBag};
use crate::error::{Error, Result};
use crate::heads::{trace_patch_logits, trace_wsi_aggregate, PatchHead, WsiHead};
use crate::params::{GroupSet, ParamGroup, ParamStore};
use crate::prompts::{
    init_tvp, HashedTrigramEncoder, PromptBundle, PromptConfig, TextEncoder, TextEncoderConfig, TtpParams, VrmConfig,
    VrmParams,
};
use crate::seed::{derive_seed, rng_for};

/// Which parameter groups exist and are tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuningMode {
    /// Every parameter except the text encoder; no prompts.
    FullFinetune,
    /// Head only; no prompts.
    LinearProbe,
    PathoTune { tvp: bool, ttp: bool, ivp: bool },
}

impl TuningMode {
    pub const ALL_PROMPTS: TuningMode = TuningMode::PathoTune {
        tvp: true,
        ttp: true,
        ivp: true,
    };

    pub fn label(&self) -> &'static str {
        match self {
            TuningMode::FullFinetune => "FT",
            TuningMode::LinearProbe => "LP",
            TuningMode::PathoTune { .. } => "PathoTune",
        }
    }

    /// `(ttp, tvp, ivp)` prompt families in use.
    pub fn prompt_flags(&self) -> (bool, bool, bool) {
        match *self {
            TuningMode::PathoTune { tvp, ttp, ivp } => (ttp, tvp, ivp),
            _ => (false, false, false),
        }
    }

    /// Parameter groups this mode tunes.
    pub fn trainable_groups(&self) -> GroupSet {
        match *self {
            TuningMode::FullFinetune => GroupSet::all(),
            TuningMode::LinearProbe => [ParamGroup::Head].into_iter().collect(),
            TuningMode::PathoTune { tvp, ttp, ivp } => {
                let mut set: GroupSet = [ParamGroup::Head].into_iter().collect();
                if tvp {
                    set.insert(ParamGroup::Tvp);
                }
                if ttp {
                    set.insert(ParamGroup::TextProjection);
                }
                if ivp {
                    set.insert(ParamGroup::Vrm);
                }
                set
            }
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TuningMode::PathoTune { tvp, ttp, ivp } => {
                let on = |b: &bool| if *b { "on" } else { "off" };
                write!(f, "PathoTune(ttp={}, tvp={}, ivp={})", on(ttp), on(tvp), on(ivp))
            }
            other => f.write_str(other.label()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    #[default]
    Patch,
    Wsi,
}

/// Everything needed to construct a model, apart from the seed and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub prompts: PromptConfig,
    pub text: TextEncoderConfig,
    pub vrm: VrmConfig,
    pub level: TaskLevel,
    pub wsi_attention_dim: usize,
    pub max_patches_per_bag: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prompts: PromptConfig::default(),
            text: TextEncoderConfig::default(),
            vrm: VrmConfig::default(),
            level: TaskLevel::Patch,
            wsi_attention_dim: 32,
            max_patches_per_bag: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Patch(PatchHead),
    Wsi(WsiHead),
}

#[derive(Debug, Clone)]
pub struct PathoTuneModel {
    pub spec: ModelSpec,
    pub mode: TuningMode,
    pub seed: u64,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub prompts: PromptBundle,
    pub head: Head,
}

impl PathoTuneModel {
    pub fn new(spec: &ModelSpec, mode: TuningMode, seed: u64) -> Result<Self> {
        let (ttp_on, _, _) = mode.prompt_flags();
        let encoder: Option<Arc<dyn TextEncoder>> = if ttp_on {
            Some(Arc::new(HashedTrigramEncoder::new(spec.text.clone())?))
        } else {
            None
        };
        Self::with_text_encoder(spec, mode, seed, encoder)
    }

    /// Like [`PathoTuneModel::new`] with a caller-supplied frozen text encoder.
    pub fn with_text_encoder(
        spec: &ModelSpec,
        mode: TuningMode,
        seed: u64,
        encoder: Option<Arc<dyn TextEncoder>>,
    ) -> Result<Self> {
        let cfg = &spec.model;
        cfg.validate()?;
        let mut store = ParamStore::new();
        // Each component draws from its own stream so that the backbone is the
        // same across tuning modes for one seed.
        let backbone = BackboneParams::init(cfg, &mut store, &mut rng_for(seed, "backbone", 0))?;

        let (ttp_on, tvp_on, ivp_on) = mode.prompt_flags();
        let mut prompts = PromptBundle::empty(spec.prompts.clone());
        if tvp_on {
            let mut rng = rng_for(seed, "tvp", 0);
            prompts.tvp = Some(init_tvp(cfg.layers, spec.prompts.tvp_tokens, cfg.dim, &mut store, &mut rng));
        }
        if ttp_on {
            let encoder = encoder.ok_or_else(|| Error::Config("TTP enabled but no text encoder supplied".into()))?;
            let mut rng = rng_for(seed, "ttp", 0);
            prompts.ttp = Some(TtpParams::init(&spec.prompts, encoder, cfg.dim, &mut store, &mut rng)?);
        }
        if ivp_on {
            let mut rng = rng_for(seed, "vrm", 0);
            prompts.vrm = Some(VrmParams::init(&spec.vrm, cfg.image_size, cfg.dim, &mut store, &mut rng)?);
        }

        let mut rng = rng_for(seed, "head", 0);
        let head = match spec.level {
            TaskLevel::Patch => Head::Patch(PatchHead::init(cfg.dim, cfg.num_classes, &mut store, &mut rng)),
            TaskLevel::Wsi => Head::Wsi(WsiHead::init(
                cfg.dim,
                spec.wsi_attention_dim,
                cfg.num_classes,
                &mut store,
                &mut rng,
            )),
        };
        Ok(Self {
            spec: spec.clone(),
            mode,
            seed,
            store,
            backbone,
            prompts,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.model
    }

    pub fn text_encoder(&self) -> Option<&Arc<dyn TextEncoder>> {
        self.prompts.ttp.as_ref().map(|t| &t.encoder)
    }

    /// Final CLS embedding `V^L` of one image, `1 x C`.
    pub fn trace_embedding(&self, tape: &mut Tape<'_>, image: &Image) -> Result<Var> {
        let cfg = self.config();
        let prompts = self.prompts.trace(tape, image, cfg.layers, cfg.dim)?;
        trace_forward(tape, image, cfg, &self.backbone, &prompts)
    }

    /// Patches of a bag fed to the WSI head, capped at `max_patches_per_bag`
    /// by a subset that depends only on the slide id.
    pub fn bag_patches<'b>(&self, bag: &'b LabeledBag) -> Vec<&'b Image> {
        let max = self.spec.max_patches_per_bag.max(1);
        if bag.patches.len() <= max {
            return bag.patches.iter().map(|p| &p.image).collect();
        }
        let key = derive_seed(0, &bag.slide_id, bag.patches.len() as u64);
        let mut idx: Vec<usize> = (0..bag.patches.len()).collect();
        idx.shuffle(&mut rng_for(key, "bag_subset", 0));
        idx.truncate(max);
        idx.sort_unstable();
        idx.into_iter().map(|i| &bag.patches[i].image).collect()
    }

    pub fn trace_logits(&self, tape: &mut Tape<'_>, item: Item<'_>) -> Result<Var> {
        match (&self.head, item) {
            (Head::Patch(head), Item::Patch(p)) => {
                let v = self.trace_embedding(tape, &p.image)?;
                trace_patch_logits(tape, v, head)
            }
            (Head::Wsi(head), Item::Bag(bag)) => {
                let embeddings = self
                    .bag_patches(bag)
                    .into_iter()
                    .map(|img| self.trace_embedding(tape, img))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = tape.concat_rows(&embeddings);
                Ok(trace_wsi_aggregate(tape, stacked, head)?.logits)
            }
            (Head::Patch(_), Item::Bag(_)) => Err(Error::Input("patch-level model given a slide bag".into())),
            (Head::Wsi(_), Item::Patch(_)) => Err(Error::Input("WSI-level model given a single patch".into())),
        }
    }

    pub fn embedding(&self, image: &Image) -> Result<Array1<f64>> {
        let mut tape = Tape::inference(&self.store);
        let v = self.trace_embedding(&mut tape, image)?;
        Ok(tape.value(v).row(0).to_owned())
    }

    /// The sequence entering each transformer layer for `image`.
    pub fn layer_inputs(&self, image: &Image) -> Result<Vec<TokenSequence>> {
        let cfg = self.config();
        let mut tape = Tape::inference(&self.store);
        let prompts = self.prompts.trace(&mut tape, image, cfg.layers, cfg.dim)?;
        let mut seen = Vec::with_capacity(cfg.layers);
        trace_forward_observed(&mut tape, image, cfg, &self.backbone, &prompts, &mut |_, seq| {
            seen.push((seq.var, seq.roles.clone()));
        })?;
        Ok(seen
            .into_iter()
            .map(|(var, roles)| TokenSequence {
                tokens: tape.value(var).clone(),
                roles,
            })
            .collect())
    }

    pub fn logits(&self, item: Item<'_>) -> Result<Array1<f64>> {
        let mut tape = Tape::inference(&self.store);
        let z = self.trace_logits(&mut tape, item)?;
        Ok(tape.value(z).row(0).to_owned())
    }

    pub fn probabilities(&self, item: Item<'_>) -> Result<Array1<f64>> {
        let mut tape = Tape::inference(&self.store);
        let z = self.trace_logits(&mut tape, item)?;
        let p = tape.softmax_rows(z);
        Ok(tape.value(p).index_axis(Axis(0), 0).to_owned())
    }
}

/// Prompted forward pass returning `V^L` as a C-vector.
pub fn forward(
    image: &Image,
    bundle: &PromptBundle,
    backbone: &BackboneParams,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<Array1<f64>> {
    let mut tape = Tape::inference(store);
    let prompts = bundle.trace(&mut tape, image, cfg.layers, cfg.dim)?;
    let v = trace_forward(&mut tape, image, cfg, backbone, &prompts)?;
    Ok(tape.value(v).row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::plain_forward;
    use crate::data::LabeledPatch;
    use crate::params::normal;

    fn image(seed: u64, size: usize) -> Image {
        let flat = normal(&mut rng_for(seed, "img", 0), size * size, 3, 0.3).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
        flat.into_shape_with_order((size, size, 3)).unwrap()
    }

    #[test]
    fn modes_share_the_backbone() {
        let spec = ModelSpec::default();
        let a = PathoTuneModel::new(&spec, TuningMode::LinearProbe, 11).unwrap();
        let b = PathoTuneModel::new(&spec, TuningMode::ALL_PROMPTS, 11).unwrap();
        assert_eq!(a.store.checksum(ParamGroup::Backbone), b.store.checksum(ParamGroup::Backbone));
        assert_eq!(a.store.count(ParamGroup::Tvp), 0);
        assert!(b.store.count(ParamGroup::Tvp) > 0);
    }

    #[test]
    fn promptless_forward_equals_plain_vit() {
        let spec = ModelSpec {
            prompts: PromptConfig {
                tvp_tokens: 0,
                ttp_tokens: 0,
                ivp_tokens: 0,
                ..PromptConfig::default()
            },
            ..ModelSpec::default()
        };
        let m = PathoTuneModel::new(&spec, TuningMode::ALL_PROMPTS, 3).unwrap();
        let img = image(1, 16);
        let prompted = forward(&img, &m.prompts, &m.backbone, m.config(), &m.store).unwrap();
        let plain = plain_forward(&img, m.config(), &m.backbone, &m.store).unwrap();
        assert_eq!(prompted, plain);
        assert_eq!(prompted.len(), 32);
    }

    #[test]
    fn ivp_makes_embedding_instance_specific() {
        let m = PathoTuneModel::new(&ModelSpec::default(), TuningMode::ALL_PROMPTS, 3).unwrap();
        let img = image(2, 16);
        let mut shifted = img.clone();
        // rotate channels as a crude hue shift
        for y in 0..16 {
            for x in 0..16 {
                let (r, g, b) = (img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
                shifted[[y, x, 0]] = g;
                shifted[[y, x, 1]] = b;
                shifted[[y, x, 2]] = r;
            }
        }
        assert_ne!(m.embedding(&img).unwrap(), m.embedding(&shifted).unwrap());
        assert_eq!(m.embedding(&img).unwrap(), m.embedding(&img).unwrap());
        let vrm = m.prompts.vrm.as_ref().unwrap();
        let e1 = crate::prompts::vrm_forward(&img, vrm, &m.store).unwrap();
        let e2 = crate::prompts::vrm_forward(&shifted, vrm, &m.store).unwrap();
        assert!((&e1 - &e2).mapv(|v| v * v).sum().sqrt() > 0.0);
    }

    #[test]
    fn level_mismatch_is_an_input_error() {
        let m = PathoTuneModel::new(&ModelSpec::default(), TuningMode::LinearProbe, 0).unwrap();
        let p = LabeledPatch {
            image: image(0, 16),
            label: 0,
            instance_id: "x".into(),
        };
        let bag = LabeledBag::from_patches("s", vec![p.clone()]).unwrap();
        assert!(m.logits(Item::Patch(&p)).is_ok());
        assert!(matches!(m.logits(Item::Bag(&bag)), Err(Error::Input(_))));
    }

    #[test]
    fn bag_subset_is_capped_and_stable() {
        let spec = ModelSpec {
            level: TaskLevel::Wsi,
            max_patches_per_bag: 3,
            ..ModelSpec::default()
        };
        let m = PathoTuneModel::new(&spec, TuningMode::LinearProbe, 0).unwrap();
        let patches = (0..7)
            .map(|i| LabeledPatch {
                image: image(i, 16),
                label: 0,
                instance_id: format!("p{i}"),
            })
            .collect();
        let bag = LabeledBag::from_patches("slide7", patches).unwrap();
        let a = m.bag_patches(&bag);
        assert_eq!(a.len(), 3);
        assert_eq!(a, m.bag_patches(&bag));
        assert_eq!(m.probabilities(Item::Bag(&bag)).unwrap().len(), 4);
    }
}
