//! Hypergraph self-attention over the joints of each frame.
//!
//! Per head and frame, the score between query joint `i` and key joint `j`
//! is the sum of four terms:
//!
//! - (a) `q_i . k_j`, plain content attention
//! - (b) `q_i . e_j`, attention from a joint to the key joint's hyperedge
//! - (c) `q_i . R[hop(i, j)]`, k-hop relative position
//! - (d) `u . e_j`, a query-independent hyperedge bias
//!
//! where `e_j` is row `j` of the augmented hyperedge features. The sum is
//! scaled by `head_dim^-1/2`, row-softmaxed, and the relational bias `B` is
//! added to the normalized attention before it weights the values.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{glorot_bound, uniform, NdArray, ParamId, ParamStore, Parameter, Tape, Var};
use crate::skeleton::HopMatrix;
use crate::{Error, Result};

/// Which optional attention terms a layer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    /// Term (b): joint-to-hyperedge attention.
    pub joint_to_hyperedge: bool,
    /// Term (c): k-hop relative positional embedding.
    pub khop_rpe: bool,
    /// Term (d): static hyperedge key.
    pub hyperedge_bias: bool,
    /// Relational bias `B`, added after the softmax.
    pub relational_bias: bool,
}

impl TermFlags {
    pub const ALL: Self = Self {
        joint_to_hyperedge: true,
        khop_rpe: true,
        hyperedge_bias: true,
        relational_bias: true,
    };

    pub const NONE: Self = Self {
        joint_to_hyperedge: false,
        khop_rpe: false,
        hyperedge_bias: false,
        relational_bias: false,
    };

    pub fn uses_hyperedges(&self) -> bool {
        self.joint_to_hyperedge || self.hyperedge_bias
    }
}

impl Default for TermFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperSaConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub heads: usize,
    pub num_joints: usize,
    /// Rows of the positional table; at least `max_hop + 1`.
    pub rpe_rows: usize,
    pub flags: TermFlags,
}

impl HyperSaConfig {
    pub fn new(in_channels: usize, channels: usize, heads: usize, hops: &HopMatrix, flags: TermFlags) -> Self {
        Self {
            in_channels,
            channels,
            heads,
            num_joints: hops.num_joints(),
            rpe_rows: hops.max_hop() + 1,
            flags,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).powf(-0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if self.in_channels == 0 || self.num_joints == 0 || self.rpe_rows == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Handles to one layer's parameters inside a [`ParamStore`]. Disabled
/// terms own no parameters.
#[derive(Clone, Debug)]
pub struct HyperSaParams {
    pub config: HyperSaConfig,
    pub w_qkv: ParamId,
    pub w_e: Option<ParamId>,
    pub rpe_table: Option<ParamId>,
    pub static_key: Option<ParamId>,
    pub relational_bias: Option<ParamId>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl HyperSaParams {
    /// Registers fresh parameters under `prefix`: Glorot-uniform projections,
    /// zero positional table and static key, identity relational bias.
    pub fn init(store: &mut ParamStore, prefix: &str, config: HyperSaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (ci, c, h, v) = (config.in_channels, config.channels, config.heads, config.num_joints);
        let flags = config.flags;
        let mut add = |name: &str, value: NdArray| store.add(format!("{prefix}.{name}"), Parameter::new(value));
        let w_qkv = add("w_qkv", uniform(&[ci, 3 * c], glorot_bound(ci, c), rng));
        let w_e = flags
            .uses_hyperedges()
            .then(|| add("w_e", uniform(&[ci, c], glorot_bound(ci, c), rng)));
        let rpe_table = flags
            .khop_rpe
            .then(|| add("rpe_table", NdArray::zeros(&[config.rpe_rows, c])));
        let static_key = flags
            .hyperedge_bias
            .then(|| add("static_key", NdArray::zeros(&[h, c / h])));
        let relational_bias = flags.relational_bias.then(|| {
            let eye = NdArray::eye(v);
            add("relational_bias", NdArray::stack(&vec![eye; h]).expect("equal shapes"))
        });
        let w_out = add("w_out", uniform(&[c, c], glorot_bound(c, c), rng));
        let b_out = add("b_out", NdArray::zeros(&[c]));
        Ok(Self {
            config,
            w_qkv,
            w_e,
            rpe_table,
            static_key,
            relational_bias,
            w_out,
            b_out,
        })
    }

    /// The same weights with some terms switched off. Terms cannot be
    /// switched on, since their parameters were never allocated.
    pub fn restricted(&self, flags: TermFlags) -> Result<Self> {
        let have = self.config.flags;
        let wanted = [
            (flags.joint_to_hyperedge, have.joint_to_hyperedge),
            (flags.khop_rpe, have.khop_rpe),
            (flags.hyperedge_bias, have.hyperedge_bias),
            (flags.relational_bias, have.relational_bias),
        ];
        if wanted.iter().any(|&(want, has)| want && !has) {
            return Err(Error::Config("cannot enable a term the layer was built without".into()));
        }
        let mut p = self.clone();
        p.config.flags = flags;
        p.w_e = self.w_e.filter(|_| flags.uses_hyperedges());
        p.rpe_table = self.rpe_table.filter(|_| flags.khop_rpe);
        p.static_key = self.static_key.filter(|_| flags.hyperedge_bias);
        p.relational_bias = self.relational_bias.filter(|_| flags.relational_bias);
        Ok(p)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_qkv];
        ids.extend(self.w_e);
        ids.extend(self.rpe_table);
        ids.extend(self.static_key);
        ids.extend(self.relational_bias);
        ids.extend([self.w_out, self.b_out]);
        ids
    }
}

/// Intermediate nodes of one layer evaluation, all `[N, T, H, V, *]`.
#[derive(Clone, Copy, Debug)]
pub struct HyperSaTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub e_aug: Option<Var>,
    pub term_a: Var,
    pub term_b: Option<Var>,
    pub term_c: Option<Var>,
    pub term_d: Option<Var>,
    /// Softmax output, before the relational bias.
    pub attention: Var,
    /// `[N, T, V, C]` layer output.
    pub output: Var,
}

/// `H D_e^-1 H^T`: maps joint features to their augmented hyperedge
/// features (member mean of each joint's hyperedge). `h` is `[V, |E|]`.
pub fn augment_operator(tape: &mut Tape, h: Var) -> Result<Var> {
    let mean = tape.edge_mean_operator(h)?;
    tape.matmul(h, mean)
}

/// `[N, T, V, C]` to per-head `[N, T, H, V, C / H]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(x, &[n, t, v, heads, c / heads])?;
    tape.permute(r, &[0, 1, 3, 2, 4])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 1, 3, 2, 4])?;
    tape.reshape(p, &[s[0], s[1], s[3], s[2] * s[4]])
}

/// Evaluates the layer on a channels-last `[N, T, V, C_in]` input.
///
/// `aug_op` is the `[V, V]` result of [`augment_operator`]; it is only
/// read when term (b) or (d) is on. `hops` is row-major `V x V`.
pub fn forward(
    tape: &mut Tape,
    p: &HyperSaParams,
    x: Var,
    aug_op: Option<Var>,
    hops: &Rc<[usize]>,
) -> Result<HyperSaTrace> {
    let cfg = &p.config;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[2] != cfg.num_joints || xs[3] != cfg.in_channels {
        return Err(Error::Shape {
            op: "hypersa",
            lhs: xs,
            rhs: vec![0, 0, cfg.num_joints, cfg.in_channels],
        });
    }
    let (c, heads) = (cfg.channels, cfg.heads);
    let w_qkv = tape.param(p.w_qkv);
    let qkv = tape.matmul(x, w_qkv)?;
    let mut qkv_split = [x; 3];
    for (s, slot) in qkv_split.iter_mut().enumerate() {
        let part = tape.narrow_last(qkv, s * c, c)?;
        *slot = split_heads(tape, part, heads)?;
    }
    let [q, k, v] = qkv_split;

    let term_a = tape.matmul_t(q, k)?;
    let mut scores = term_a;

    let e_aug = match p.w_e {
        Some(w_e) => {
            let op = aug_op.ok_or_else(|| Error::Config("hyperedge terms need a partition".into()))?;
            let pooled = tape.matmul(op, x)?;
            let w = tape.param(w_e);
            let e = tape.matmul(pooled, w)?;
            Some(split_heads(tape, e, heads)?)
        }
        None => None,
    };
    let term_b = match (cfg.flags.joint_to_hyperedge, e_aug) {
        (true, Some(e)) => Some(tape.matmul_t(q, e)?),
        _ => None,
    };
    let term_c = match p.rpe_table {
        Some(r) => {
            let r = tape.param(r);
            Some(tape.rpe_scores(q, r, hops.clone())?)
        }
        None => None,
    };
    let term_d = match (p.static_key, e_aug) {
        (Some(u), Some(e)) => {
            let u = tape.param(u);
            Some(tape.static_key_scores(u, e)?)
        }
        _ => None,
    };
    for t in [term_b, term_c, term_d].into_iter().flatten() {
        scores = tape.add(scores, t)?;
    }
    let scaled = tape.scale(scores, cfg.scale());
    let attention = tape.softmax(scaled)?;
    let weights = match p.relational_bias {
        Some(b) => {
            let b = tape.param(b);
            tape.add_suffix(attention, b)?
        }
        None => attention,
    };
    let y = tape.matmul(weights, v)?;
    let y = merge_heads(tape, y)?;
    let w_out = tape.param(p.w_out);
    let b_out = tape.param(p.b_out);
    let proj = tape.matmul(y, w_out)?;
    let output = tape.add_suffix(proj, b_out)?;
    Ok(HyperSaTrace {
        q,
        k,
        v,
        e_aug,
        term_a,
        term_b,
        term_c,
        term_d,
        attention,
        output,
    })
}

/// Convenience wrapper over [`forward`] for `[N, C_in, T, V]` arrays and a
/// `[V, |E|]` (binary or relaxed) partition; returns `[N, C, T, V]`.
pub fn hypersa_forward(
    store: &ParamStore,
    p: &HyperSaParams,
    x: &NdArray,
    h: &NdArray,
    hops: &HopMatrix,
) -> Result<NdArray> {
    if x.ndim() != 4 {
        return Err(Error::Shape {
            op: "hypersa_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![0, p.config.in_channels, 0, p.config.num_joints],
        });
    }
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.permute(&[0, 2, 3, 1])?);
    let aug = if p.config.flags.uses_hyperedges() {
        let hv = tape.constant(h.clone());
        Some(augment_operator(&mut tape, hv)?)
    } else {
        None
    };
    let hops: Rc<[usize]> = hops.as_slice().into();
    let trace = forward(&mut tape, p, xv, aug, &hops)?;
    tape.value(trace.output).permute(&[0, 3, 1, 2])
}

/// Largest elementwise gap between `q (k + e)^T` and `q k^T + q e^T`.
/// Zero when the layer has no hyperedge features.
pub fn fused_key_deviation(tape: &mut Tape, trace: &HyperSaTrace) -> Result<f64> {
    let Some(e) = trace.e_aug else { return Ok(0.0) };
    let fused_key = tape.add(trace.k, e)?;
    let fused = tape.matmul_t(trace.q, fused_key)?;
    let separate_b = tape.matmul_t(trace.q, e)?;
    let split = tape.add(trace.term_a, separate_b)?;
    Ok(tape.value(fused).max_abs_diff(tape.value(split)))
}

/// Runs one layer on `[N, C_in, T, V]` input and returns the fused-key
/// deviation.
pub fn fused_key_equivalence_check(
    store: &ParamStore,
    p: &HyperSaParams,
    x: &NdArray,
    h: &NdArray,
    hops: &HopMatrix,
) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.permute(&[0, 2, 3, 1])?);
    let hv = tape.constant(h.clone());
    let aug = augment_operator(&mut tape, hv)?;
    let hops: Rc<[usize]> = hops.as_slice().into();
    let trace = forward(&mut tape, p, xv, Some(aug), &hops)?;
    fused_key_deviation(&mut tape, &trace)
}

/// The five `V x V` maps of one head in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBreakdown {
    pub head: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    /// Post-softmax attention, before the relational bias.
    #[serde(rename = "final")]
    pub attention: Vec<Vec<f64>>,
    pub relational_bias: Vec<Vec<f64>>,
}

/// Per-term scores of one layer for one sample and frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBreakdown {
    pub frame: usize,
    pub scale: f64,
    pub heads: Vec<HeadBreakdown>,
}

/// One exported file: a head's breakdown plus where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRecord {
    pub layer: usize,
    pub sample: usize,
    pub frame: usize,
    pub head: usize,
    pub scale: f64,
    pub partition: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "final")]
    pub attention: Vec<Vec<f64>>,
    pub relational_bias: Vec<Vec<f64>>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl AttentionBreakdown {
    /// Reads `sample`/`frame` out of an evaluated trace. Disabled terms come
    /// out as zero matrices.
    pub fn from_trace(
        tape: &Tape,
        store: &ParamStore,
        p: &HyperSaParams,
        trace: &HyperSaTrace,
        sample: usize,
        frame: usize,
    ) -> Result<Self> {
        let s = tape.shape(trace.term_a).to_vec();
        let (n, t, heads, v) = (s[0], s[1], s[2], s[3]);
        if sample >= n {
            return Err(Error::Index(format!("sample {sample} out of range for batch of {n}")));
        }
        if frame >= t {
            return Err(Error::Index(format!("frame {frame} out of range for {t} frames")));
        }
        let slab = |var: Option<Var>, h: usize| -> Vec<Vec<f64>> {
            match var {
                Some(var) => {
                    let base = (((sample * t) + frame) * heads + h) * v * v;
                    tape.value(var).data()[base..base + v * v]
                        .chunks(v)
                        .map(<[f64]>::to_vec)
                        .collect()
                }
                None => vec![vec![0.0; v]; v],
            }
        };
        let heads = (0..heads)
            .map(|h| HeadBreakdown {
                head: h,
                a: slab(Some(trace.term_a), h),
                b: slab(trace.term_b, h),
                c: slab(trace.term_c, h),
                d: slab(trace.term_d, h),
                attention: slab(Some(trace.attention), h),
                relational_bias: match p.relational_bias {
                    Some(id) => store.value(id).data()[h * v * v..(h + 1) * v * v]
                        .chunks(v)
                        .map(<[f64]>::to_vec)
                        .collect(),
                    None => vec![vec![0.0; v]; v],
                },
            })
            .collect();
        Ok(Self {
            frame,
            scale: p.config.scale(),
            heads,
        })
    }

    /// Largest gap between the stored attention and
    /// `softmax(scale * (a + b + c + d))` recomputed from the stored terms.
    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for hb in &self.heads {
            for i in 0..hb.a.len() {
                let summed: Vec<f64> = (0..hb.a.len())
                    .map(|j| self.scale * (hb.a[i][j] + hb.b[i][j] + hb.c[i][j] + hb.d[i][j]))
                    .collect();
                for (x, y) in softmax_row(&summed).iter().zip(&hb.attention[i]) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    pub fn records(&self, layer: usize, sample: usize, partition: &[usize]) -> Vec<BreakdownRecord> {
        self.heads
            .iter()
            .map(|hb| BreakdownRecord {
                layer,
                sample,
                frame: self.frame,
                head: hb.head,
                scale: self.scale,
                partition: partition.to_vec(),
                a: hb.a.clone(),
                b: hb.b.clone(),
                c: hb.c.clone(),
                d: hb.d.clone(),
                attention: hb.attention.clone(),
                relational_bias: hb.relational_bias.clone(),
            })
            .collect()
    }
}

/// Breakdown of a standalone layer for one `[C_in, T, V]` sample.
pub fn attention_breakdown(
    store: &ParamStore,
    p: &HyperSaParams,
    x: &NdArray,
    h: &NdArray,
    hops: &HopMatrix,
    frame: usize,
) -> Result<AttentionBreakdown> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "attention_breakdown",
            lhs: s.to_vec(),
            rhs: vec![p.config.in_channels, 0, p.config.num_joints],
        });
    }
    if frame >= s[1] {
        return Err(Error::Index(format!("frame {frame} out of range for {} frames", s[1])));
    }
    let batch = x.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(batch.permute(&[0, 2, 3, 1])?);
    let aug = if p.config.flags.uses_hyperedges() {
        let hv = tape.constant(h.clone());
        Some(augment_operator(&mut tape, hv)?)
    } else {
        None
    };
    let hops: Rc<[usize]> = hops.as_slice().into();
    let trace = forward(&mut tape, p, xv, aug, &hops)?;
    AttentionBreakdown::from_trace(&tape, store, p, &trace, 0, frame)
}

#[cfg(test)]
mod tests;
