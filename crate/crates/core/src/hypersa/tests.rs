use super::*;
use crate::hypergraph::{IncidenceMatrix, RelaxedPartition};
use crate::numerics::finite_diff_check;
use crate::oracle;
use crate::skeleton::{ntu25, shortest_path_hops, SkeletonGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn path(v: usize) -> SkeletonGraph {
    SkeletonGraph::new(v, (1..v).map(|j| (j - 1, j)).collect()).unwrap()
}

fn layer(
    store: &mut ParamStore,
    hops: &HopMatrix,
    ci: usize,
    c: usize,
    heads: usize,
    flags: TermFlags,
    rng: &mut ChaCha8Rng,
) -> HyperSaParams {
    HyperSaParams::init(store, "attn", HyperSaConfig::new(ci, c, heads, hops, flags), rng).unwrap()
}

/// Overwrites every parameter of the layer with random values.
fn scramble(store: &mut ParamStore, p: &HyperSaParams, rng: &mut ChaCha8Rng) {
    for id in p.ids() {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = uniform(&shape, 0.5, rng);
    }
}

fn nested(x: &NdArray, n: usize) -> Vec<Vec<Vec<f64>>> {
    let s = x.shape();
    (0..s[1])
        .map(|c| (0..s[2]).map(|t| (0..s[3]).map(|v| x.get(&[n, c, t, v])).collect()).collect())
        .collect()
}

fn rows(a: &NdArray) -> Vec<Vec<f64>> {
    let w = *a.shape().last().unwrap();
    a.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn random_partition(v: usize, rng: &mut ChaCha8Rng) -> IncidenceMatrix {
    let e = rng.random_range(1..=v.min(4));
    let assignment = (0..v).map(|j| if j < e { j } else { rng.random_range(0..e) }).collect();
    IncidenceMatrix::from_assignment(assignment, e).unwrap()
}

#[test]
fn reduces_to_vanilla_attention_without_extra_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..8 {
        let v = rng.random_range(1..=25);
        let t = rng.random_range(1..=8);
        let heads = rng.random_range(1..=3);
        let c = heads * rng.random_range(1..=4);
        let ci = rng.random_range(1..=5);
        let g = path(v);
        let hops = shortest_path_hops(&g).unwrap();
        let mut store = ParamStore::new();
        let p = layer(&mut store, &hops, ci, c, heads, TermFlags::NONE, &mut rng);
        scramble(&mut store, &p, &mut rng);
        let x = uniform(&[2, ci, t, v], 1.0, &mut rng);
        let h = IncidenceMatrix::single(v).to_array();
        let got = hypersa_forward(&store, &p, &x, &h, &hops).unwrap();
        for n in 0..2 {
            let want = oracle::vanilla_self_attention(
                &nested(&x, n),
                &rows(store.value(p.w_qkv)),
                &rows(store.value(p.w_out)),
                store.value(p.b_out).data(),
                heads,
            );
            for (ch, plane) in want.iter().enumerate() {
                for (ti, row) in plane.iter().enumerate() {
                    for (j, &w) in row.iter().enumerate() {
                        assert!((got.get(&[n, ch, ti, j]) - w).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

#[test]
fn zeroed_terms_also_reduce_to_vanilla_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let hops = shortest_path_hops(&path(6)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    for id in [p.w_e, p.rpe_table, p.static_key, p.relational_bias].into_iter().flatten() {
        store.get_mut(id).value.fill(0.0);
    }
    let x = uniform(&[1, 3, 4, 6], 1.0, &mut rng);
    let h = random_partition(6, &mut rng).to_array();
    let full = hypersa_forward(&store, &p, &x, &h, &hops).unwrap();
    let plain = hypersa_forward(&store, &p.restricted(TermFlags::NONE).unwrap(), &x, &h, &hops).unwrap();
    assert!(full.max_abs_diff(&plain) < 1e-12);
}

#[test]
fn single_joint_copies_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let g = SkeletonGraph::new(1, vec![]).unwrap();
    let hops = shortest_path_hops(&g).unwrap();
    let mut store = ParamStore::new();
    let flags = TermFlags {
        relational_bias: false,
        ..TermFlags::ALL
    };
    let p = layer(&mut store, &hops, 2, 4, 2, flags, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[1, 2, 3, 1], 1.0, &mut rng);
    let h = IncidenceMatrix::single(1).to_array();
    let got = hypersa_forward(&store, &p, &x, &h, &hops).unwrap();
    let (wqkv, wout, bout) = (store.value(p.w_qkv), store.value(p.w_out), store.value(p.b_out));
    for t in 0..3 {
        let val: Vec<f64> = (0..4)
            .map(|o| (0..2).map(|i| x.get(&[0, i, t, 0]) * wqkv.get(&[i, 8 + o])).sum())
            .collect();
        for o in 0..4 {
            let want = bout.data()[o] + (0..4).map(|d| val[d] * wout.get(&[d, o])).sum::<f64>();
            assert!((got.get(&[0, o, t, 0]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn output_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let g = ntu25();
    let hops = shortest_path_hops(&g).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 12, 3, TermFlags::ALL, &mut rng);
    let x = uniform(&[2, 3, 4, 25], 1.0, &mut rng);
    let h = crate::hypergraph::empirical_partition("body_parts", &g).unwrap().to_array();
    let y = hypersa_forward(&store, &p, &x, &h, &hops).unwrap();
    assert_eq!(y.shape(), &[2, 12, 4, 25]);
    assert!(y.all_finite());
}

#[test]
fn rejects_indivisible_heads_and_short_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let hops = shortest_path_hops(&path(5)).unwrap();
    let mut store = ParamStore::new();
    let bad = HyperSaConfig::new(3, 10, 3, &hops, TermFlags::ALL);
    assert!(matches!(
        HyperSaParams::init(&mut store, "bad", bad, &mut rng),
        Err(Error::Config(_))
    ));
    let mut short = HyperSaConfig::new(3, 6, 3, &hops, TermFlags::ALL);
    short.rpe_rows = 3;
    let p = HyperSaParams::init(&mut store, "short", short, &mut rng).unwrap();
    let x = uniform(&[1, 3, 2, 5], 1.0, &mut rng);
    let h = IncidenceMatrix::single(5).to_array();
    assert!(matches!(hypersa_forward(&store, &p, &x, &h, &hops), Err(Error::Index(_))));
}

#[test]
fn fresh_breakdown_has_zero_positional_and_static_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let g = ntu25();
    let hops = shortest_path_hops(&g).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    let x = uniform(&[3, 4, 25], 1.0, &mut rng);
    let h = crate::hypergraph::empirical_partition("body_parts", &g).unwrap().to_array();
    let bd = attention_breakdown(&store, &p, &x, &h, &hops, 2).unwrap();
    assert_eq!(bd.heads.len(), 2);
    for hb in &bd.heads {
        assert!(hb.c.iter().flatten().all(|&x| x == 0.0));
        assert!(hb.d.iter().flatten().all(|&x| x == 0.0));
        assert!(hb.a.iter().flatten().any(|&x| x != 0.0));
        assert!(hb.b.iter().flatten().any(|&x| x != 0.0));
        for i in 0..25 {
            assert_eq!(hb.relational_bias[i][i], 1.0);
        }
    }
    assert!(bd.reconstruction_error() < 1e-9);
    assert!(matches!(
        attention_breakdown(&store, &p, &x, &h, &hops, 4),
        Err(Error::Index(_))
    ));
}

#[test]
fn breakdown_reconstructs_trained_like_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let hops = shortest_path_hops(&path(7)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 4, 6, 3, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[4, 3, 7], 2.0, &mut rng);
    let h = random_partition(7, &mut rng).to_array();
    let bd = attention_breakdown(&store, &p, &x, &h, &hops, 1).unwrap();
    assert!(bd.reconstruction_error() < 1e-9);
    let recs = bd.records(3, 0, &[0; 7]);
    assert_eq!(recs.len(), 3);
    let text = serde_json::to_string(&recs[1]).unwrap();
    assert!(text.contains("\"final\""));
    let back: BreakdownRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(back, recs[1]);
}

#[test]
fn single_group_static_term_is_constant_across_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let hops = shortest_path_hops(&path(6)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[3, 2, 6], 1.0, &mut rng);
    let h = IncidenceMatrix::single(6).to_array();
    let bd = attention_breakdown(&store, &p, &x, &h, &hops, 0).unwrap();
    for hb in &bd.heads {
        assert!(hb.d[0][0] != 0.0);
        for row in &hb.d {
            for &x in row {
                assert!((x - hb.d[0][0]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fused_key_matches_split_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let hops = shortest_path_hops(&path(8)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[2, 3, 4, 8], 1.0, &mut rng);
    let h = random_partition(8, &mut rng).to_array();
    assert!(fused_key_equivalence_check(&store, &p, &x, &h, &hops).unwrap() < 1e-12);
}

#[test]
fn fused_key_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let hops = shortest_path_hops(&path(5)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[1, 3, 2, 5], 1.0, &mut rng);
    let h = random_partition(5, &mut rng).to_array();
    let xs = x.permute(&[0, 2, 3, 1]).unwrap();
    let hops_rc: Rc<[usize]> = hops.as_slice().into();

    // zero W_e: the fused product is plain content attention
    let saved = store.value(p.w_e.unwrap()).clone();
    store.get_mut(p.w_e.unwrap()).value.fill(0.0);
    {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(xs.clone());
        let hv = tape.constant(h.clone());
        let aug = augment_operator(&mut tape, hv).unwrap();
        let tr = forward(&mut tape, &p, xv, Some(aug), &hops_rc).unwrap();
        let ke = tape.add(tr.k, tr.e_aug.unwrap()).unwrap();
        let fused = tape.matmul_t(tr.q, ke).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(tr.term_a)) < 1e-12);
        assert_eq!(tape.value(tr.term_b.unwrap()).max_abs(), 0.0);
    }
    store.get_mut(p.w_e.unwrap()).value = saved;

    // zero key columns: the fused product is term (b) alone
    let w = &mut store.get_mut(p.w_qkv).value;
    for i in 0..3 {
        for o in 6..12 {
            w.set(&[i, o], 0.0);
        }
    }
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(xs);
    let hv = tape.constant(h);
    let aug = augment_operator(&mut tape, hv).unwrap();
    let tr = forward(&mut tape, &p, xv, Some(aug), &hops_rc).unwrap();
    let ke = tape.add(tr.k, tr.e_aug.unwrap()).unwrap();
    let fused = tape.matmul_t(tr.q, ke).unwrap();
    assert!(tape.value(fused).max_abs_diff(tape.value(tr.term_b.unwrap())) < 1e-12);
    assert_eq!(tape.value(tr.term_a).max_abs(), 0.0);
}

#[test]
fn attention_rows_are_normalized_and_bias_bypasses_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let hops = shortest_path_hops(&path(9)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 3, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[2, 3, 3, 9], 3.0, &mut rng);
    let h = random_partition(9, &mut rng).to_array();
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.permute(&[0, 2, 3, 1]).unwrap());
    let hv = tape.constant(h);
    let aug = augment_operator(&mut tape, hv).unwrap();
    let hops_rc: Rc<[usize]> = hops.as_slice().into();
    let tr = forward(&mut tape, &p, xv, Some(aug), &hops_rc).unwrap();
    let attn = tape.value(tr.attention);
    let b = store.value(p.relational_bias.unwrap());
    for (r, row) in attn.data().chunks(9).enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        // row r of the [2, 3, 3, 9, 9] field belongs to head (r / 9) % 3
        let (head, i) = ((r / 9) % 3, r % 9);
        let b_row: f64 = (0..9).map(|j| b.get(&[head, i, j])).sum();
        let biased: f64 = row.iter().enumerate().map(|(j, a)| a + b.get(&[head, i, j])).sum();
        assert!((biased - (1.0 + b_row)).abs() < 1e-9);
    }
}

#[test]
fn each_term_changes_the_output_once_nonzero() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let hops = shortest_path_hops(&path(6)).unwrap();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[1, 3, 3, 6], 1.0, &mut rng);
    let h = IncidenceMatrix::from_assignment(vec![0, 0, 0, 1, 1, 1], 2).unwrap().to_array();
    let base = hypersa_forward(&store, &p.restricted(TermFlags::NONE).unwrap(), &x, &h, &hops).unwrap();
    let single = [
        TermFlags { joint_to_hyperedge: true, ..TermFlags::NONE },
        TermFlags { khop_rpe: true, ..TermFlags::NONE },
        TermFlags { hyperedge_bias: true, ..TermFlags::NONE },
        TermFlags { relational_bias: true, ..TermFlags::NONE },
    ];
    for flags in single {
        let y = hypersa_forward(&store, &p.restricted(flags).unwrap(), &x, &h, &hops).unwrap();
        assert!(y.max_abs_diff(&base) > 1e-6, "{flags:?}");
    }
    let none = p.restricted(TermFlags::NONE).unwrap();
    assert!(none.restricted(TermFlags::ALL).is_err());
}

/// Mean-pooled layer output through a fixed readout into cross-entropy.
fn layer_loss(
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
    let tr = forward(tape, p, xv, Some(aug), hops)?;
    let c = p.config.channels;
    let flat = tape.reshape(tr.output, &[s[0], s[1] * s[2], c])?;
    let pooled = tape.mean_axis1(flat)?;
    let r = tape.constant(readout.clone());
    let logits = tape.matmul(pooled, r)?;
    tape.cross_entropy(logits, labels)
}

#[test]
fn gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let hops = shortest_path_hops(&path(5)).unwrap();
    let hops_rc: Rc<[usize]> = hops.as_slice().into();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let x = uniform(&[2, 3, 5, 3], 1.0, &mut rng);
    let h = IncidenceMatrix::from_assignment(vec![0, 1, 1, 0, 2], 3).unwrap().to_array();
    let readout = uniform(&[6, 3], 1.0, &mut rng);
    let labels = [0, 2];
    let report = finite_diff_check(&mut store, &p.ids(), 1e-5, |t| {
        let hv = t.constant(h.clone());
        layer_loss(t, &p, &x, hv, &hops_rc, &readout, &labels)
    })
    .unwrap();
    assert_eq!(report.params.len(), 7);
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn relaxed_partition_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let hops = shortest_path_hops(&path(4)).unwrap();
    let hops_rc: Rc<[usize]> = hops.as_slice().into();
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 2, 4, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let logits = RelaxedPartition::from_logits(uniform(&[4, 2], 1.0, &mut rng)).unwrap();
    let lid = store.add("partition", Parameter::new(logits.logits().clone()));
    let x = uniform(&[1, 2, 4, 2], 1.0, &mut rng);
    let readout = uniform(&[4, 2], 1.0, &mut rng);
    let report = finite_diff_check(&mut store, &[lid], 1e-5, |t| {
        let l = t.param(lid);
        let hv = t.softmax(l)?;
        layer_loss(t, &p, &x, hv, &hops_rc, &readout, &[1])
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn mirror_automorphism_equivariance() {
    // 0 is the hub; arms 1-2 and 3-4 mirror each other
    let g = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (0, 3), (3, 4)]).unwrap();
    let perm = [0, 3, 4, 1, 2];
    let hops = shortest_path_hops(&g).unwrap();
    assert_eq!(hops.permuted(&perm), hops);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut store = ParamStore::new();
    let p = layer(&mut store, &hops, 3, 6, 2, TermFlags::ALL, &mut rng);
    scramble(&mut store, &p, &mut rng);
    let part = IncidenceMatrix::from_assignment(vec![0, 1, 1, 2, 2], 3).unwrap();
    let x = uniform(&[2, 3, 4, 5], 1.0, &mut rng);
    let y = hypersa_forward(&store, &p, &x, &part.to_array(), &hops).unwrap();

    let permute_joints = |a: &NdArray| {
        let s = a.shape().to_vec();
        let mut out = a.clone();
        for i in 0..s[0] * s[1] * s[2] {
            for j in 0..s[3] {
                out.data_mut()[i * s[3] + perm[j]] = a.data()[i * s[3] + j];
            }
        }
        out
    };
    let bid = p.relational_bias.unwrap();
    let b = store.value(bid).clone();
    let mut pb = b.clone();
    for h in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                pb.set(&[h, perm[i], perm[j]], b.get(&[h, i, j]));
            }
        }
    }
    store.get_mut(bid).value = pb;
    let py = hypersa_forward(&store, &p, &permute_joints(&x), &part.permuted(&perm).to_array(), &hops).unwrap();
    assert!(py.max_abs_diff(&permute_joints(&y)) < 1e-6);
}
