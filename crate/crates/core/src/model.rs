//! The assembled network: embedder, backbone, shapelet layer and output head.
//!
//! `z = z_g ⊕ z_l`, `logits = z·W_out + b_out`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FreezePolicy, BACKBONE_GROUPS, MODEL_GROUPS, OUTPUT_HEAD_GROUP};
use crate::diffnum::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::embedder::{lookup, Embedder, EmbedderConfig, EMBEDDER_GROUP};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::shapelet::{ShapeletBank, ShapeletConfig, ShapeletLayer, LOCAL_PROJECTION_GROUP, SHAPELET_GROUP};
use crate::signal::IqFrame;

/// Frames per internal forward chunk in the no-gradient helpers.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_length: usize,
    pub classes: usize,
    /// Width of the projected shapelet feature.
    pub d_l: usize,
    /// Seed for embedder, shapelet, projection and head initialization.
    pub seed: u64,
    pub embedder: EmbedderConfig,
    pub backbone: BackboneConfig,
    pub shapelets: ShapeletConfig,
    pub freeze: FreezePolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_length: 256,
            classes: 8,
            d_l: 64,
            seed: 0,
            embedder: EmbedderConfig::default(),
            backbone: BackboneConfig::default(),
            shapelets: ShapeletConfig::default(),
            freeze: FreezePolicy::default(),
        }
    }
}

/// Element count and freeze flag of one parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupCensus {
    pub name: String,
    pub trainable: bool,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Census {
    pub groups: Vec<GroupCensus>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.elements).sum()
    }

    pub fn trainable(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.elements).sum()
    }

    /// Trainable over total elements; 0 for an empty model.
    pub fn ratio(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trainable() as f64 / n as f64,
        }
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Census {
            groups: store
                .groups()
                .iter()
                .map(|g| GroupCensus {
                    name: g.name.clone(),
                    trainable: g.trainable,
                    elements: g.members.iter().map(|&id| store.value(id).numel()).sum(),
                })
                .collect(),
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.embedder.seq_len(self.frame_length)
    }

    pub fn joint_dim(&self) -> usize {
        self.backbone.d_h + self.d_l
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.d_l == 0 {
            return Err(Error::Config("d_l must be positive".into()));
        }
        self.embedder.validate(self.frame_length, self.backbone.d_h)?;
        self.backbone.validate()?;
        self.shapelets.validate(self.frame_length)?;
        self.freeze.validate()?;
        if self.seq_len() > self.backbone.max_seq {
            return Err(Error::Config(format!(
                "embedder emits {} tokens but backbone max_seq is {}",
                self.seq_len(),
                self.backbone.max_seq
            )));
        }
        Ok(())
    }

    /// Parameter census computed from dimensions alone.
    pub fn census(&self) -> Result<Census> {
        self.validate()?;
        let bb = self.backbone.group_sizes();
        let k = self.shapelets.total();
        let sizes = [
            (EMBEDDER_GROUP, self.embedder.parameter_count(self.backbone.d_h)),
            (BACKBONE_GROUPS[0], bb[0]),
            (BACKBONE_GROUPS[1], bb[1]),
            (BACKBONE_GROUPS[2], bb[2]),
            (BACKBONE_GROUPS[3], bb[3]),
            (SHAPELET_GROUP, self.shapelets.parameter_count()),
            (LOCAL_PROJECTION_GROUP, k * self.d_l + self.d_l),
            (OUTPUT_HEAD_GROUP, self.joint_dim() * self.classes + self.classes),
        ];
        Ok(Census {
            groups: sizes
                .iter()
                .map(|&(name, elements)| GroupCensus {
                    name: name.to_string(),
                    trainable: self.freeze.is_trainable(name),
                    elements,
                })
                .collect(),
        })
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub z_g: Var,
    pub activations: Var,
    pub z_l: Var,
    pub z: Var,
    pub logits: Var,
}

/// Detached outputs for a set of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput<T> {
    /// `[B, d_h + d_l]`
    pub z: Tensor<T>,
    /// `[B, C]`
    pub logits: Tensor<T>,
    /// `[B, K]`
    pub activations: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    embedder: Embedder,
    backbone: Backbone,
    shapelets: ShapeletLayer,
    head: (ParamId, ParamId),
}

/// Stacks frames into a `[B, 2, T]` tensor.
pub fn batch_tensor<T: Scalar>(frames: &[&IqFrame]) -> Result<Tensor<T>> {
    let t = frames.first().map_or(0, |f| f.len());
    if frames.iter().any(|f| f.len() != t) {
        return Err(Error::Shape("frames in a batch differ in length".into()));
    }
    let mut data = Vec::with_capacity(frames.len() * 2 * t);
    for f in frames {
        data.extend(f.as_rows().iter().map(|&v| T::from_sample(v)));
    }
    Tensor::new(&[frames.len(), 2, t], data)
}

impl<T: Scalar> Model<T> {
    /// Fresh model; the shapelet bank is sampled from `init_frames`.
    pub fn init(config: &ModelConfig, init_frames: &[IqFrame]) -> Result<Self> {
        config.validate()?;
        if let Some(f) = init_frames.iter().find(|f| f.len() != config.frame_length) {
            return Err(Error::Shape(format!(
                "initialization frame has length {}, model expects {}",
                f.len(),
                config.frame_length
            )));
        }
        let mut store = ParamStore::new();
        for g in MODEL_GROUPS {
            store.add_group(g, config.freeze.is_trainable(g));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[0]));
        let d_h = config.backbone.d_h;
        let embedder = Embedder::init(&config.embedder, d_h, &mut store, &mut rng)?;
        let backbone = Backbone::init(&config.backbone, &config.freeze, &mut store)?;
        let bank = ShapeletBank::<T>::init(&config.shapelets, init_frames, mix_seed(config.seed, &[1]))?;
        let shapelets = ShapeletLayer::init(&bank, config.d_l, &mut store, &mut rng)?;
        let d = config.joint_dim();
        store.add(
            "output_head.weight",
            OUTPUT_HEAD_GROUP,
            Tensor::randn(&[d, config.classes], 1.0 / (d as f64).sqrt(), &mut rng),
        )?;
        store.add("output_head.bias", OUTPUT_HEAD_GROUP, Tensor::zeros(&[config.classes]))?;
        let head = (lookup(&store, "output_head.weight")?, lookup(&store, "output_head.bias")?);
        Ok(Model {
            config: config.clone(),
            store,
            embedder,
            backbone,
            shapelets,
            head,
        })
    }

    /// Rebinds a populated store (e.g. from a checkpoint) to `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let embedder = Embedder::bind(&config.embedder, &store)?;
        let backbone = Backbone::bind(&config.backbone, &store)?;
        let shapelets = ShapeletLayer::bind(&config.shapelets, &store)?;
        let head = (lookup(&store, "output_head.weight")?, lookup(&store, "output_head.bias")?);
        let model = Model {
            config: config.clone(),
            store,
            embedder,
            backbone,
            shapelets,
            head,
        };
        let want = config.census()?;
        let have = model.census();
        for (w, h) in want.groups.iter().zip(&have.groups) {
            if w.name != h.name || w.elements != h.elements {
                return Err(Error::Mismatch(format!(
                    "group `{}` holds {} elements, config implies {}",
                    h.name, h.elements, w.elements
                )));
            }
        }
        if want.groups.len() != have.groups.len() {
            return Err(Error::Mismatch("parameter groups differ from the model layout".into()));
        }
        Ok(model)
    }

    pub fn census(&self) -> Census {
        Census::from_store(&self.store)
    }

    pub fn trainable_ratio(&self) -> f64 {
        self.census().ratio()
    }

    /// Re-applies a freeze policy to the stored groups.
    pub fn set_freeze(&mut self, policy: &FreezePolicy) -> Result<()> {
        policy.apply(&mut self.store)?;
        self.config.freeze = policy.clone();
        Ok(())
    }

    pub fn bank(&self) -> ShapeletBank<T> {
        self.shapelets.bank(&self.store)
    }

    pub fn shapelet_layer(&self) -> &ShapeletLayer {
        &self.shapelets
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    /// Records the full forward graph for `x: [B, 2, T]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardVars> {
        self.forward_with(tape, &self.store, x)
    }

    /// [`Model::forward`] reading parameters from `store`, which must share
    /// this model's layout.
    pub fn forward_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<ForwardVars> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != 2 || s[2] != self.config.frame_length {
            return Err(Error::Shape(format!(
                "model expects [B, 2, {}] input, got {s:?}",
                self.config.frame_length
            )));
        }
        let tokens = self.embedder.forward(tape, store, x)?;
        let z_g = self.backbone.encode(tape, store, tokens)?;
        let activations = self.shapelets.activations(tape, store, x)?;
        let z_l = self.shapelets.project(tape, store, activations)?;
        let z = tape.concat(&[z_g, z_l], 1)?;
        let w = tape.param(store, self.head.0);
        let b = tape.param(store, self.head.1);
        let logits = tape.linear(z, w, Some(b))?;
        Ok(ForwardVars {
            z_g,
            activations,
            z_l,
            z,
            logits,
        })
    }

    /// Joint representation, logits and activations without gradients.
    pub fn forward_joint(&self, frames: &[&IqFrame]) -> Result<JointOutput<T>> {
        let (d, c, k) = (self.config.joint_dim(), self.config.classes, self.config.shapelets.total());
        let mut z = Vec::with_capacity(frames.len() * d);
        let mut logits = Vec::with_capacity(frames.len() * c);
        let mut acts = Vec::with_capacity(frames.len() * k);
        for chunk in frames.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(chunk)?);
            let out = self.forward(&mut tape, x)?;
            z.extend_from_slice(tape.value(out.z).data());
            logits.extend_from_slice(tape.value(out.logits).data());
            acts.extend_from_slice(tape.value(out.activations).data());
        }
        Ok(JointOutput {
            z: Tensor::new(&[frames.len(), d], z)?,
            logits: Tensor::new(&[frames.len(), c], logits)?,
            activations: Tensor::new(&[frames.len(), k], acts)?,
        })
    }

    /// `encode(embed(frame))` alone: `[B, d_h]`.
    pub fn global_features(&self, frames: &[&IqFrame]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(frames)?);
        let tokens = self.embedder.forward(&mut tape, &self.store, x)?;
        let z = self.backbone.encode(&mut tape, &self.store, tokens)?;
        Ok(tape.value(z).clone())
    }

    /// A copy with every parameter cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut store = ParamStore::<U>::new();
        for g in self.store.groups() {
            store.add_group(&g.name, g.trainable);
        }
        for (_, p) in self.store.iter() {
            store.add(&p.name, &p.group, p.value.cast())?;
        }
        Model::from_store(&self.config, store)
    }
}
