//! Self-check suites behind `hyperformer check`.
//!
//! Every check reports one measured number next to the limit it must stay
//! under, so a failing run says by how much it failed.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hypergraph::{aggregate_hyperedges, augment, empirical_partition, IncidenceMatrix, RelaxedPartition};
use crate::hypersa::{
    attention_breakdown, augment_operator, forward as hypersa_layer, fused_key_equivalence_check, hypersa_forward,
    HyperSaConfig, HyperSaParams, TermFlags,
};
use crate::model::{HyperformerConfig, HyperformerModel, Linear, PartitionMode};
use crate::numerics::{finite_diff_check, uniform, GradCheckReport, NdArray, ParamId, ParamStore, Parameter, Tape, Var};
use crate::oracle;
use crate::skeleton::{mini16, ntu25, shortest_path_hops, HopMatrix, SkeletonGraph};
use crate::temporal::{default_branches, MsTc, PlainTc};
use crate::{Error, Result};

pub const SUITES: &[&str] = &["gradients", "oracles", "invariants"];

/// Left and right limbs of the bundled 16-joint skeleton swapped.
pub const MINI16_MIRROR: [usize; 16] = [0, 1, 2, 3, 7, 8, 9, 4, 5, 6, 13, 14, 15, 10, 11, 12];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
        }
    }

    /// NaN never passes.
    pub fn passed(&self) -> bool {
        self.value < self.limit
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<34} {:.3e} (limit {:.0e})", self.name, self.value, self.limit)
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    match name {
        "gradients" => Ok(gradient_reports(seed)?
            .into_iter()
            .map(|(block, r)| CheckOutcome::new(format!("grad {block}"), r.max_rel_error(), 1e-4))
            .collect()),
        "oracles" => Ok(vec![
            CheckOutcome::new("vanilla attention reduction", sa_reduction_deviation(20, seed)?, 1e-10),
            CheckOutcome::new("hop matrices off floyd-warshall", spd_mismatches(100, seed)? as f64, 1.0),
            CheckOutcome::new("hyperedge aggregation", aggregation_deviation(50, seed)?, 1e-12),
            CheckOutcome::new("fused key", fused_key_deviation(10, seed)?, 1e-12),
        ]),
        "invariants" => Ok(vec![
            CheckOutcome::new("attention row sums", softmax_row_deviation(seed)?, 1e-9),
            CheckOutcome::new("mirror equivariance, layer", mirror_layer_deviation(seed)?, 1e-6),
            CheckOutcome::new("mirror invariance, model", mirror_model_deviation(seed)?, 1e-6),
            CheckOutcome::new("breakdown reconstruction", breakdown_reconstruction(seed)?, 1e-9),
        ]),
        other => Err(Error::Config(format!(
            "unknown check suite {other:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

fn scramble(store: &mut ParamStore, ids: &[ParamId], bound: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = uniform(&shape, bound, rng);
    }
}

fn rows(a: &NdArray) -> Vec<Vec<f64>> {
    let w = *a.shape().last().unwrap();
    a.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn path(v: usize) -> SkeletonGraph {
    SkeletonGraph::new(v, (1..v).map(|j| (j - 1, j)).collect()).expect("path graphs are valid")
}

/// A partition of `v` joints into 1 to 4 non-empty groups.
fn random_partition(v: usize, rng: &mut ChaCha8Rng) -> IncidenceMatrix {
    let e = rng.random_range(1..=v.min(4));
    let mut assignment: Vec<usize> = (0..v).map(|j| if j < e { j } else { rng.random_range(0..e) }).collect();
    assignment.shuffle(rng);
    IncidenceMatrix::from_assignment(assignment, e).expect("every group has a member")
}

/// A random tree over `v` shuffled labels, plus a few chords.
pub fn random_connected_graph(v: usize, rng: &mut ChaCha8Rng) -> SkeletonGraph {
    let mut labels: Vec<usize> = (0..v).collect();
    labels.shuffle(rng);
    let mut edges = BTreeSet::new();
    for j in 1..v {
        let p = rng.random_range(0..j);
        let (a, b) = (labels[p], labels[j]);
        edges.insert((a.min(b), a.max(b)));
    }
    for _ in 0..rng.random_range(0..=v / 2) {
        let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    SkeletonGraph::new(v, edges.into_iter().collect()).expect("edges are in range")
}

/// Finite-difference reports for every parameter of each building block.
pub fn gradient_reports(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // one HyperSA layer with every term, through a pooled readout
    let hops = shortest_path_hops(&path(5))?;
    let hops_rc: Rc<[usize]> = hops.as_slice().into();
    let mut store = ParamStore::new();
    let p = HyperSaParams::init(&mut store, "attn", HyperSaConfig::new(3, 6, 2, &hops, TermFlags::ALL), &mut rng)?;
    scramble(&mut store, &p.ids(), 0.5, &mut rng);
    let x = uniform(&[2, 3, 5, 3], 1.0, &mut rng);
    let h = IncidenceMatrix::from_assignment(vec![0, 1, 1, 0, 2], 3)?.to_array();
    let readout = uniform(&[6, 3], 1.0, &mut rng);
    let report = finite_diff_check(&mut store, &p.ids(), 1e-5, |t| {
        let hv = t.constant(h.clone());
        attention_loss(t, &p, &x, hv, &hops_rc, &readout, &[0, 2])
    })?;
    out.push(("hypersa layer", report));

    // the same layer driven by a relaxed partition
    let relaxed = RelaxedPartition::from_logits(uniform(&[5, 3], 1.0, &mut rng))?;
    let lid = store.add("partition", Parameter::new(relaxed.logits().clone()));
    let report = finite_diff_check(&mut store, &[lid], 1e-5, |t| {
        let l = t.param(lid);
        let hv = t.softmax(l)?;
        attention_loss(t, &p, &x, hv, &hops_rc, &readout, &[1, 0])
    })?;
    out.push(("relaxed partition", report));

    for (name, stride) in [("ms-tc block", 1), ("ms-tc block, stride 2", 2)] {
        let mut store = ParamStore::new();
        let ms = MsTc::init(&mut store, "tc", 6, &default_branches(), stride, &mut rng)?;
        scramble(&mut store, &ms.ids(), 0.5, &mut rng);
        let x = uniform(&[2, 7, 3, 6], 1.0, &mut rng);
        let r = uniform(&[2, (7 + stride - 1) / stride, 3, 6], 1.0, &mut rng);
        let report = finite_diff_check(&mut store, &ms.ids(), 1e-5, |t| {
            let xv = t.constant(x.clone());
            let y = ms.forward(t, xv)?;
            weighted_sum(t, y, &r)
        })?;
        out.push((name, report));
    }

    let mut store = ParamStore::new();
    let tc = PlainTc::init(&mut store, "tc", 4, 5, 1, &mut rng)?;
    scramble(&mut store, &tc.ids(), 0.5, &mut rng);
    let x = uniform(&[1, 6, 2, 4], 1.0, &mut rng);
    let r = uniform(&[1, 6, 2, 4], 1.0, &mut rng);
    let report = finite_diff_check(&mut store, &tc.ids(), 1e-5, |t| {
        let xv = t.constant(x.clone());
        let y = tc.forward(t, xv)?;
        weighted_sum(t, y, &r)
    })?;
    out.push(("plain tc block", report));

    // layer norm, including the gradient reaching its input
    let mut store = ParamStore::new();
    let xid = store.add("x", Parameter::new(uniform(&[3, 4, 6], 2.0, &mut rng)));
    let gid = store.add("gamma", Parameter::new(uniform(&[6], 1.0, &mut rng)));
    let bid = store.add("beta", Parameter::new(uniform(&[6], 1.0, &mut rng)));
    let r = uniform(&[3, 4, 6], 1.0, &mut rng);
    let report = finite_diff_check(&mut store, &[xid, gid, bid], 1e-5, |t| {
        let (x, g, b) = (t.param(xid), t.param(gid), t.param(bid));
        let y = t.layer_norm(x, g, b)?;
        weighted_sum(t, y, &r)
    })?;
    out.push(("layer norm", report));

    // classifier: mean pool, linear head, cross-entropy
    let mut store = ParamStore::new();
    let fid = store.add("features", Parameter::new(uniform(&[3, 5, 8], 1.0, &mut rng)));
    let head = Linear::init(&mut store, "head", 8, 4, &mut rng);
    scramble(&mut store, &[head.weight, head.bias], 0.5, &mut rng);
    let report = finite_diff_check(&mut store, &[fid, head.weight, head.bias], 1e-5, |t| {
        let f = t.param(fid);
        let pooled = t.mean_axis1(f)?;
        let logits = head.forward(t, pooled)?;
        t.cross_entropy(logits, &[3, 0, 1])
    })?;
    out.push(("classifier", report));
    Ok(out)
}

fn weighted_sum(t: &mut Tape, y: Var, r: &NdArray) -> Result<Var> {
    let rv = t.constant(r.clone());
    let prod = t.mul(y, rv)?;
    Ok(t.sum(prod))
}

fn attention_loss(
    tape: &mut Tape,
    p: &HyperSaParams,
    x: &NdArray,
    h: Var,
    hops: &Rc<[usize]>,
    readout: &NdArray,
    labels: &[usize],
) -> Result<Var> {
    let s = x.shape();
    let xv = tape.constant(x.clone());
    let aug = augment_operator(tape, h)?;
    let tr = hypersa_layer(tape, p, xv, Some(aug), hops)?;
    let flat = tape.reshape(tr.output, &[s[0], s[1] * s[2], p.config.channels])?;
    let pooled = tape.mean_axis1(flat)?;
    let r = tape.constant(readout.clone());
    let logits = tape.matmul(pooled, r)?;
    tape.cross_entropy(logits, labels)
}

/// Largest gap between a term-free HyperSA layer and plain multi-head
/// attention, over random layers with `V <= 25`, `T <= 8`.
pub fn sa_reduction_deviation(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let v = rng.random_range(1..=25);
        let t = rng.random_range(1..=8);
        let heads = rng.random_range(1..=3);
        let c = heads * rng.random_range(1..=4);
        let ci = rng.random_range(1..=5);
        let hops = shortest_path_hops(&random_connected_graph(v, &mut rng))?;
        let mut store = ParamStore::new();
        let p = HyperSaParams::init(&mut store, "attn", HyperSaConfig::new(ci, c, heads, &hops, TermFlags::NONE), &mut rng)?;
        scramble(&mut store, &p.ids(), 0.5, &mut rng);
        let x = uniform(&[2, ci, t, v], 1.0, &mut rng);
        let h = random_partition(v, &mut rng).to_array();
        let got = hypersa_forward(&store, &p, &x, &h, &hops)?;
        for n in 0..2 {
            let sample: Vec<Vec<Vec<f64>>> = (0..ci)
                .map(|ch| (0..t).map(|ti| (0..v).map(|j| x.get(&[n, ch, ti, j])).collect()).collect())
                .collect();
            let want = oracle::vanilla_self_attention(
                &sample,
                &rows(store.value(p.w_qkv)),
                &rows(store.value(p.w_out)),
                store.value(p.b_out).data(),
                heads,
            );
            for (ch, plane) in want.iter().enumerate() {
                for (ti, row) in plane.iter().enumerate() {
                    for (j, &w) in row.iter().enumerate() {
                        let d = (got.get(&[n, ch, ti, j]) - w).abs();
                        worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Number of random connected graphs (`V <= 25`) whose hop matrix differs
/// from Floyd-Warshall anywhere.
pub fn spd_mismatches(graphs: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..graphs {
        let v = rng.random_range(1..=25);
        let g = random_connected_graph(v, &mut rng);
        let got = shortest_path_hops(&g)?.rows();
        let want = oracle::floyd_warshall(v, g.edges());
        let same = got
            .iter()
            .zip(&want)
            .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| Some(x) == y));
        bad += usize::from(!same);
    }
    Ok(bad)
}

/// Largest gap between the matrix form of hyperedge aggregation (and its
/// per-joint broadcast) and explicit loops over each group's members.
pub fn aggregation_deviation(triples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..triples {
        let v = rng.random_range(1..=25);
        let (ci, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let part = random_partition(v, &mut rng);
        let x = uniform(&[v, ci], 2.0, &mut rng);
        let w = uniform(&[ci, c], 1.0, &mut rng);
        let h = part.to_array();
        let e = aggregate_hyperedges(&x, &h, &w)?;
        let aug = augment(&e, &h)?;
        let want = oracle::group_mean_project(&rows(&x), part.assignment(), part.num_edges(), &rows(&w));
        for (k, row) in want.iter().enumerate() {
            for (o, &y) in row.iter().enumerate() {
                worst = worst.max((e.get(&[k, o]) - y).abs());
            }
        }
        for (j, &k) in part.assignment().iter().enumerate() {
            for (o, &y) in want[k].iter().enumerate() {
                worst = worst.max((aug.get(&[j, o]) - y).abs());
            }
        }
        if !e.all_finite() || !aug.all_finite() {
            return Ok(f64::NAN);
        }
    }
    Ok(worst)
}

/// Largest deviation of `q . (k + e)` from term (a) plus term (b).
pub fn fused_key_deviation(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let v = rng.random_range(2..=25);
        let heads = rng.random_range(1..=3);
        let c = heads * rng.random_range(1..=4);
        let hops = shortest_path_hops(&random_connected_graph(v, &mut rng))?;
        let mut store = ParamStore::new();
        let p = HyperSaParams::init(&mut store, "attn", HyperSaConfig::new(3, c, heads, &hops, TermFlags::ALL), &mut rng)?;
        scramble(&mut store, &p.ids(), 0.5, &mut rng);
        let x = uniform(&[2, 3, 4, v], 1.0, &mut rng);
        let h = random_partition(v, &mut rng).to_array();
        let d = fused_key_equivalence_check(&store, &p, &x, &h, &hops)?;
        worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
    }
    Ok(worst)
}

fn perturb_all(model: &mut HyperformerModel, bound: f64, rng: &mut ChaCha8Rng) {
    for p in model.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = p.value.zip_map(&uniform(&shape, bound, rng), |a, b| a + b).expect("same shape");
    }
}

/// Worst `|row sum - 1|` of the softmax attention over every layer and
/// head of a perturbed model on random input.
pub fn softmax_row_deviation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HyperformerConfig {
        num_layers: 4,
        channels: 18,
        heads: 3,
        window: 8,
        stride_layers: vec![2],
        partition: PartitionMode::Learned { num_edges: 5 },
        ..HyperformerConfig::toy()
    };
    let mut model = HyperformerModel::new(cfg.clone(), &ntu25())?;
    perturb_all(&mut model, 0.5, &mut rng);
    let x = uniform(&[2, 3, cfg.window, 25], 3.0, &mut rng);
    let mut tape = Tape::with_params(&model.store);
    let xv = tape.constant(crate::model::to_channels_last(&x)?);
    let trace = model.forward(&mut tape, xv)?;
    let mut worst = 0.0_f64;
    for layer in &trace.layers {
        for row in tape.value(layer.attention).data().chunks(25) {
            let d = (row.iter().sum::<f64>() - 1.0).abs();
            worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
        }
    }
    Ok(worst)
}

/// `x` with joint `j` moved to `perm[j]` along the last axis.
pub fn permute_joints(x: &NdArray, perm: &[usize]) -> NdArray {
    let v = *x.shape().last().unwrap();
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(v).zip(out.data_mut().chunks_mut(v)) {
        for j in 0..v {
            dst[perm[j]] = src[j];
        }
    }
    out
}

/// Averages each `[.., V, V]` slab with its conjugate by `perm`, which must
/// be an involution, so that the result is invariant under `perm`.
fn tie_relational_bias(b: &NdArray, perm: &[usize]) -> NdArray {
    let s = b.shape();
    let v = s[s.len() - 1];
    let mut out = b.clone();
    for (src, dst) in b.data().chunks(v * v).zip(out.data_mut().chunks_mut(v * v)) {
        for i in 0..v {
            for j in 0..v {
                dst[i * v + j] = 0.5 * (src[i * v + j] + src[perm[i] * v + perm[j]]);
            }
        }
    }
    out
}

/// Checks that `perm` is an automorphism of `g`, maps its hop matrix to
/// itself, and maps the groups of `part` onto groups.
fn check_mirror(g: &SkeletonGraph, hops: &HopMatrix, part: &IncidenceMatrix, perm: &[usize]) -> Result<()> {
    let edges: BTreeSet<(usize, usize)> = g.edges().iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let mapped: BTreeSet<(usize, usize)> = edges
        .iter()
        .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
        .collect();
    let groups: BTreeSet<Vec<usize>> = (0..part.num_edges()).map(|e| part.members(e)).collect();
    let moved: BTreeSet<Vec<usize>> = groups
        .iter()
        .map(|m| {
            let mut m: Vec<usize> = m.iter().map(|&j| perm[j]).collect();
            m.sort_unstable();
            m
        })
        .collect();
    if edges != mapped || hops.permuted(perm) != *hops || groups != moved {
        return Err(Error::Config("permutation is not a symmetry of the skeleton and partition".into()));
    }
    Ok(())
}

/// Max gap between `layer(mirror x)` and `mirror layer(x)` for one HyperSA
/// layer with every term, on the 16-joint skeleton and its body-part
/// partition. The partition is passed unchanged on both sides.
pub fn mirror_layer_deviation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = mini16();
    let hops = shortest_path_hops(&g)?;
    let part = empirical_partition("body_parts", &g)?;
    check_mirror(&g, &hops, &part, &MINI16_MIRROR)?;
    let mut store = ParamStore::new();
    let p = HyperSaParams::init(&mut store, "attn", HyperSaConfig::new(3, 12, 3, &hops, TermFlags::ALL), &mut rng)?;
    scramble(&mut store, &p.ids(), 0.5, &mut rng);
    let bid = p.relational_bias.expect("all terms on");
    let tied = tie_relational_bias(store.value(bid), &MINI16_MIRROR);
    store.get_mut(bid).value = tied;
    let h = part.to_array();
    let x = uniform(&[2, 3, 5, 16], 1.0, &mut rng);
    let y = hypersa_forward(&store, &p, &x, &h, &hops)?;
    let py = hypersa_forward(&store, &p, &permute_joints(&x, &MINI16_MIRROR), &h, &hops)?;
    Ok(py.max_abs_diff(&permute_joints(&y, &MINI16_MIRROR)))
}

/// Max gap between the logits of a mirrored batch and the original one for
/// a perturbed three-layer model with tied relational biases.
pub fn mirror_model_deviation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = mini16();
    let cfg = HyperformerConfig {
        num_layers: 3,
        channels: 12,
        heads: 3,
        num_joints: 16,
        window: 6,
        stride_layers: vec![1],
        partition: PartitionMode::Empirical {
            strategy: "body_parts".into(),
        },
        ..HyperformerConfig::toy()
    };
    let mut model = HyperformerModel::new(cfg, &g)?;
    perturb_all(&mut model, 0.5, &mut rng);
    for layer in model.layers.clone() {
        let bid = layer.attn.relational_bias.expect("all terms on");
        let tied = tie_relational_bias(model.store.value(bid), &MINI16_MIRROR);
        model.store.get_mut(bid).value = tied;
    }
    let x = uniform(&[3, 3, 6, 16], 1.0, &mut rng);
    let y = model.logits(&x)?;
    let py = model.logits(&permute_joints(&x, &MINI16_MIRROR))?;
    Ok(py.max_abs_diff(&y))
}

/// Worst reconstruction error of the exported attention terms of a
/// perturbed layer.
pub fn breakdown_reconstruction(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hops = shortest_path_hops(&path(7))?;
    let mut store = ParamStore::new();
    let p = HyperSaParams::init(&mut store, "attn", HyperSaConfig::new(4, 6, 3, &hops, TermFlags::ALL), &mut rng)?;
    scramble(&mut store, &p.ids(), 0.5, &mut rng);
    let x = uniform(&[4, 3, 7], 2.0, &mut rng);
    let h = random_partition(7, &mut rng).to_array();
    let mut worst = 0.0_f64;
    for frame in 0..3 {
        worst = worst.max(attention_breakdown(&store, &p, &x, &h, &hops, frame)?.reconstruction_error());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for suite in SUITES {
            for outcome in run_suite(suite, 0).unwrap() {
                assert!(outcome.passed(), "{outcome}");
            }
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(matches!(run_suite("speed", 0), Err(Error::Config(_))));
    }

    #[test]
    fn nan_never_passes() {
        let o = CheckOutcome::new("x", f64::NAN, 1.0);
        assert!(!o.passed());
        assert!(o.to_string().starts_with("FAIL"));
    }

    #[test]
    fn broken_mirror_is_detected() {
        let g = mini16();
        let hops = shortest_path_hops(&g).unwrap();
        let part = empirical_partition("body_parts", &g).unwrap();
        assert!(check_mirror(&g, &hops, &part, &MINI16_MIRROR).is_ok());
        let mut swap = MINI16_MIRROR;
        swap.swap(4, 5);
        assert!(check_mirror(&g, &hops, &part, &swap).is_err());
        // an untied bias breaks equivariance
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = uniform(&[1, 16, 16], 1.0, &mut rng);
        let tied = tie_relational_bias(&b, &MINI16_MIRROR);
        let m = &MINI16_MIRROR;
        assert!((tied.get(&[0, 4, 10]) - tied.get(&[0, m[4], m[10]])).abs() < 1e-15);
        assert!((b.get(&[0, 4, 10]) - b.get(&[0, m[4], m[10]])).abs() > 1e-6);
    }

    #[test]
    fn random_graphs_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in 1..=25 {
            assert!(shortest_path_hops(&random_connected_graph(v, &mut rng)).is_ok());
        }
    }
}
