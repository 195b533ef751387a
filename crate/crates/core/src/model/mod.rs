//! The stacked classifier.
//!
//! ```text
//! z0 = stem(x)                                  1x1 map, C_in -> C
//! for each layer:
//!     z' = HyperSA(LN(z)) + z
//!     z'' = Temporal(LN(z')) + residual(z)      residual is strided at downsampling layers
//!     z = ReLU(z'')
//! logits = head(mean over frames and joints of z)
//! ```
//!
//! The temporal residual reads the layer input `z`, not `z'`.

mod checkpoint;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, FORMAT_VERSION};

use crate::hypergraph::{empirical_partition, IncidenceMatrix, RelaxedPartition, DEFAULT_LEARNED_EDGES};
use crate::hypersa::{self, HyperSaConfig, HyperSaParams, HyperSaTrace, TermFlags};
use crate::numerics::{glorot_bound, uniform, ConvGeometry, NdArray, ParamId, ParamStore, Parameter, Tape, Var};
use crate::skeleton::{shortest_path_hops, HopMatrix, SkeletonGraph};
use crate::temporal::{default_branches, Branch, MsTc, PlainTc, TemporalBlock, PLAIN_KERNEL};
use crate::{Error, Result};

/// Where the layers' incidence matrix comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    /// A named strategy from the skeleton config.
    Empirical { strategy: String },
    /// Relaxed logits trained with the model.
    Learned { num_edges: usize },
    /// An explicit assignment vector, e.g. a previously learned partition.
    Fixed { assignment: Vec<usize> },
}

impl Default for PartitionMode {
    fn default() -> Self {
        Self::Empirical {
            strategy: "body_parts".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperformerConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub input_channels: usize,
    pub num_joints: usize,
    pub num_classes: usize,
    pub window: usize,
    pub partition: PartitionMode,
    pub enable_b: bool,
    pub enable_c: bool,
    pub enable_d: bool,
    #[serde(rename = "enable_B")]
    pub enable_relational_bias: bool,
    pub use_ms_tc: bool,
    pub use_mlp: bool,
    /// Zero-based indices of the layers whose temporal module downsamples.
    pub stride_layers: Vec<usize>,
    pub stride: usize,
    pub branches: Vec<Branch>,
    pub tc_kernel: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for HyperformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 10,
            channels: 216,
            heads: 9,
            input_channels: 3,
            num_joints: 25,
            num_classes: 60,
            window: 64,
            partition: PartitionMode::default(),
            enable_b: true,
            enable_c: true,
            enable_d: true,
            enable_relational_bias: true,
            use_ms_tc: true,
            use_mlp: false,
            stride_layers: vec![4, 7],
            stride: 2,
            branches: default_branches(),
            tc_kernel: PLAIN_KERNEL,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

/// Rows of the ablation tables, by name.
pub const VARIANTS: &[&str] = &[
    "sa_tc",
    "sa_mlp_tc",
    "sa_tc_joint_to_hyperedge",
    "sa_tc_khop_rpe",
    "sa_tc_hyperedge_bias",
    "full_hypersa_tc",
    "hypersa_tc",
    "hypersa_mstc",
];

impl HyperformerConfig {
    /// Small model for synthetic-data runs on one core.
    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            channels: 48,
            heads: 3,
            num_classes: 4,
            window: 12,
            stride_layers: vec![],
            ..Self::default()
        }
    }

    pub fn terms(&self) -> TermFlags {
        TermFlags {
            joint_to_hyperedge: self.enable_b,
            khop_rpe: self.enable_c,
            hyperedge_bias: self.enable_d,
            relational_bias: self.enable_relational_bias,
        }
    }

    pub fn set_terms(&mut self, t: TermFlags) {
        self.enable_b = t.joint_to_hyperedge;
        self.enable_c = t.khop_rpe;
        self.enable_d = t.hyperedge_bias;
        self.enable_relational_bias = t.relational_bias;
    }

    /// Sets the flags of one ablation row, keeping everything else.
    pub fn with_variant(mut self, variant: &str) -> Result<Self> {
        let only = |f: fn(&mut TermFlags)| {
            let mut t = TermFlags::NONE;
            f(&mut t);
            t
        };
        let (terms, ms_tc, mlp) = match variant {
            "sa_tc" => (TermFlags::NONE, false, false),
            "sa_mlp_tc" => (TermFlags::NONE, false, true),
            "sa_tc_joint_to_hyperedge" => (only(|t| t.joint_to_hyperedge = true), false, false),
            "sa_tc_khop_rpe" => (only(|t| t.khop_rpe = true), false, false),
            "sa_tc_hyperedge_bias" => (only(|t| t.hyperedge_bias = true), false, false),
            "full_hypersa_tc" | "hypersa_tc" => (TermFlags::ALL, false, false),
            "hypersa_mstc" => (TermFlags::ALL, true, false),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (known: {})",
                    VARIANTS.join(", ")
                )))
            }
        };
        self.set_terms(terms);
        self.use_ms_tc = ms_tc;
        self.use_mlp = mlp;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return fail("input_channels and num_classes must be positive".into());
        }
        if let Some(&l) = self.stride_layers.iter().find(|&&l| l >= self.num_layers) {
            return fail(format!("stride layer {l} beyond {} layers", self.num_layers));
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        if self.use_ms_tc && (self.branches.is_empty() || self.channels % self.branches.len() != 0) {
            return fail(format!(
                "channels {} not divisible by {} temporal branches",
                self.channels,
                self.branches.len()
            ));
        }
        if let PartitionMode::Learned { num_edges } = self.partition {
            if num_edges < 2 {
                return fail("a learned partition needs at least two hyperedges".into());
            }
        }
        Ok(())
    }

    /// Frames left after all downsampling layers.
    pub fn output_frames(&self) -> usize {
        let s = self.stride;
        self.stride_layers.iter().fold(self.window, |t, _| t.div_ceil(s))
    }
}

impl PartitionMode {
    pub fn learned() -> Self {
        Self::Learned {
            num_edges: DEFAULT_LEARNED_EDGES,
        }
    }
}

#[derive(Clone, Debug)]
pub enum PartitionState {
    Fixed(IncidenceMatrix),
    /// Logits of a relaxed partition, held in the model's store.
    Relaxed { logits: ParamId },
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Parameter::new(NdArray::ones(&[c]))),
            beta: store.add(format!("{prefix}.beta"), Parameter::new(NdArray::zeros(&[c]))),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b)
    }
}

/// Linear map on the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                Parameter::new(uniform(&[fan_in, fan_out], glorot_bound(fan_in, fan_out), rng)),
            ),
            bias: store.add(format!("{prefix}.bias"), Parameter::new(NdArray::zeros(&[fan_out]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        let b = tape.param(self.bias);
        tape.add_suffix(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: LayerNormParams,
    pub expand: Linear,
    pub contract: Linear,
}

/// Strided 1x1 map on the residual path of a downsampling layer.
#[derive(Clone, Debug)]
pub struct StridedResidual {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub norm_attn: LayerNormParams,
    pub attn: HyperSaParams,
    pub mlp: Option<Mlp>,
    pub norm_temporal: LayerNormParams,
    pub temporal: TemporalBlock,
    pub residual: Option<StridedResidual>,
}

/// Evaluated model graph: logits plus each layer's attention trace.
pub struct ForwardTrace {
    pub logits: Var,
    pub layers: Vec<HyperSaTrace>,
    /// Row-softmaxed partition when it is being learned.
    pub relaxed: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct HyperformerModel {
    pub config: HyperformerConfig,
    pub skeleton: SkeletonGraph,
    pub hops: HopMatrix,
    pub store: ParamStore,
    pub partition: PartitionState,
    pub stem: Linear,
    pub layers: Vec<Layer>,
    pub head: Linear,
}

impl HyperformerModel {
    /// Builds and initializes a model; all randomness comes from
    /// `config.seed`.
    pub fn new(config: HyperformerConfig, skeleton: &SkeletonGraph) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != config.num_joints {
            return Err(Error::Config(format!(
                "config expects {} joints, skeleton has {}",
                config.num_joints,
                skeleton.num_joints()
            )));
        }
        let hops = shortest_path_hops(skeleton)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, v) = (config.channels, config.num_joints);

        let partition = match &config.partition {
            PartitionMode::Empirical { strategy } => PartitionState::Fixed(empirical_partition(strategy, skeleton)?),
            PartitionMode::Fixed { assignment } => {
                if assignment.len() != v {
                    return Err(Error::Config(format!(
                        "assignment has {} entries for {v} joints",
                        assignment.len()
                    )));
                }
                let e = assignment.iter().max().map_or(0, |m| m + 1);
                PartitionState::Fixed(IncidenceMatrix::from_assignment(assignment.clone(), e)?)
            }
            PartitionMode::Learned { num_edges } => {
                let init = RelaxedPartition::random(v, *num_edges, &mut rng)?;
                let logits = store.add("partition.logits", Parameter::new(init.logits().clone()));
                PartitionState::Relaxed { logits }
            }
        };

        let stem = Linear::init(&mut store, "stem", config.input_channels, c, &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let stride = if config.stride_layers.contains(&l) { config.stride } else { 1 };
            let norm_attn = LayerNormParams::init(&mut store, &format!("{p}.norm_attn"), c);
            let attn_cfg = HyperSaConfig::new(c, c, config.heads, &hops, config.terms());
            let attn = HyperSaParams::init(&mut store, &format!("{p}.attn"), attn_cfg, &mut rng)?;
            let mlp = config.use_mlp.then(|| Mlp {
                norm: LayerNormParams::init(&mut store, &format!("{p}.mlp.norm"), c),
                expand: Linear::init(&mut store, &format!("{p}.mlp.expand"), c, c * config.mlp_ratio, &mut rng),
                contract: Linear::init(&mut store, &format!("{p}.mlp.contract"), c * config.mlp_ratio, c, &mut rng),
            });
            let norm_temporal = LayerNormParams::init(&mut store, &format!("{p}.norm_temporal"), c);
            let temporal = if config.use_ms_tc {
                TemporalBlock::MultiScale(MsTc::init(
                    &mut store,
                    &format!("{p}.mstc"),
                    c,
                    &config.branches,
                    stride,
                    &mut rng,
                )?)
            } else {
                TemporalBlock::Plain(PlainTc::init(&mut store, &format!("{p}.tc"), c, config.tc_kernel, stride, &mut rng)?)
            };
            let residual = (stride > 1).then(|| StridedResidual {
                weight: store.add(
                    format!("{p}.residual.weight"),
                    Parameter::new(uniform(&[1, c, c], glorot_bound(c, c), &mut rng)),
                ),
                bias: store.add(format!("{p}.residual.bias"), Parameter::new(NdArray::zeros(&[c]))),
                geometry: ConvGeometry::new(1, 1, stride).expect("odd kernel"),
            });
            layers.push(Layer {
                norm_attn,
                attn,
                mlp,
                norm_temporal,
                temporal,
                residual,
            });
        }
        let head = Linear::init(&mut store, "head", c, config.num_classes, &mut rng);
        Ok(Self {
            config,
            skeleton: skeleton.clone(),
            hops,
            store,
            partition,
            stem,
            layers,
            head,
        })
    }

    /// Applies an ablation row to `config` and builds the model.
    pub fn build_ablation(config: HyperformerConfig, variant: &str, skeleton: &SkeletonGraph) -> Result<Self> {
        Self::new(config.with_variant(variant)?, skeleton)
    }

    /// Sum of trainable element counts.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    /// The current `[V, |E|]` incidence matrix, relaxed or binary.
    pub fn partition_matrix(&self) -> NdArray {
        match &self.partition {
            PartitionState::Fixed(h) => h.to_array(),
            PartitionState::Relaxed { logits } => {
                RelaxedPartition::from_logits(self.store.value(*logits).clone())
                    .expect("logits validated at construction")
                    .probabilities()
            }
        }
    }

    /// The binary partition in use, or the row-argmax of the relaxed one.
    pub fn assignment(&self) -> Result<IncidenceMatrix> {
        match &self.partition {
            PartitionState::Fixed(h) => Ok(h.clone()),
            PartitionState::Relaxed { .. } => crate::hypergraph::discretize(&self.partition_matrix()),
        }
    }

    /// Replaces a relaxed partition by its discretization and freezes the
    /// logits.
    pub fn freeze_partition(&mut self) -> Result<IncidenceMatrix> {
        let h = self.assignment()?;
        if let PartitionState::Relaxed { logits } = self.partition {
            self.store.get_mut(logits).trainable = false;
        }
        self.partition = PartitionState::Fixed(h.clone());
        Ok(h)
    }

    /// Records the forward pass of a channels-last `[N, T, V, C_in]` batch.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<ForwardTrace> {
        let s = tape.shape(x).to_vec();
        let cfg = &self.config;
        if s.len() != 4 || s[2] != cfg.num_joints || s[3] != cfg.input_channels {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: s,
                rhs: vec![0, cfg.window, cfg.num_joints, cfg.input_channels],
            });
        }
        let needs_partition = cfg.terms().uses_hyperedges();
        let (aug, relaxed) = match (&self.partition, needs_partition) {
            (_, false) => (None, None),
            (PartitionState::Fixed(h), true) => {
                let hv = tape.constant(h.to_array());
                (Some(hypersa::augment_operator(tape, hv)?), None)
            }
            (PartitionState::Relaxed { logits }, true) => {
                let l = tape.param(*logits);
                let ht = tape.softmax(l)?;
                (Some(hypersa::augment_operator(tape, ht)?), Some(ht))
            }
        };
        let hops: Rc<[usize]> = self.hops.as_slice().into();

        let mut z = self.stem.forward(tape, x)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let normed = layer.norm_attn.forward(tape, z)?;
            let tr = hypersa::forward(tape, &layer.attn, normed, aug, &hops)?;
            let mut spatial = tape.add(tr.output, z)?;
            if let Some(mlp) = &layer.mlp {
                let n = mlp.norm.forward(tape, spatial)?;
                let h = mlp.expand.forward(tape, n)?;
                let h = tape.relu(h);
                let m = mlp.contract.forward(tape, h)?;
                spatial = tape.add(spatial, m)?;
            }
            let normed = layer.norm_temporal.forward(tape, spatial)?;
            let temporal = layer.temporal.forward(tape, normed)?;
            let skip = match &layer.residual {
                Some(r) => {
                    let w = tape.param(r.weight);
                    let y = tape.temporal_conv(z, w, r.geometry)?;
                    let b = tape.param(r.bias);
                    tape.add_suffix(y, b)?
                }
                None => z,
            };
            let sum = tape.add(temporal, skip)?;
            z = tape.relu(sum);
            traces.push(tr);
        }
        let zs = tape.shape(z).to_vec();
        let flat = tape.reshape(z, &[zs[0], zs[1] * zs[2], zs[3]])?;
        let pooled = tape.mean_axis1(flat)?;
        let logits = self.head.forward(tape, pooled)?;
        Ok(ForwardTrace {
            logits,
            layers: traces,
            relaxed,
        })
    }

    /// Logits `[N, num_classes]` for an `[N, C_in, T, V]` batch.
    pub fn logits(&self, batch: &NdArray) -> Result<NdArray> {
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(to_channels_last(batch)?);
        let tr = self.forward(&mut tape, x)?;
        Ok(tape.value(tr.logits).clone())
    }

    /// Per-term attention of one layer for sample `sample` of an
    /// `[N, C_in, T, V]` batch. `frame` indexes the frames seen by that
    /// layer, which shrink after downsampling layers.
    pub fn attention_breakdown(
        &self,
        batch: &NdArray,
        layer: usize,
        sample: usize,
        frame: usize,
    ) -> Result<hypersa::AttentionBreakdown> {
        if layer >= self.layers.len() {
            return Err(Error::Index(format!("layer {layer} out of range for {} layers", self.layers.len())));
        }
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(to_channels_last(batch)?);
        let tr = self.forward(&mut tape, x)?;
        hypersa::AttentionBreakdown::from_trace(&tape, &self.store, &self.layers[layer].attn, &tr.layers[layer], sample, frame)
    }

    /// Rounds every parameter to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in self.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }
}

/// `[N, C, T, V]` to `[N, T, V, C]`.
pub fn to_channels_last(batch: &NdArray) -> Result<NdArray> {
    if batch.ndim() != 4 {
        return Err(Error::Shape {
            op: "to_channels_last",
            lhs: batch.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    batch.permute(&[0, 2, 3, 1])
}

#[cfg(test)]
mod tests;
