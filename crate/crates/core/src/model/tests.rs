use super::*;
use crate::numerics::finite_diff_check;
use crate::skeleton::ntu25;

fn path5() -> SkeletonGraph {
    SkeletonGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)])
        .unwrap()
        .with_parent(vec![0, 0, 1, 2, 3])
        .unwrap()
}

fn tiny() -> HyperformerConfig {
    HyperformerConfig {
        num_layers: 2,
        channels: 18,
        heads: 3,
        num_joints: 5,
        num_classes: 4,
        window: 8,
        partition: PartitionMode::Fixed {
            assignment: vec![0, 0, 1, 1, 2],
        },
        stride_layers: vec![],
        ..HyperformerConfig::default()
    }
}

fn batch(n: usize, cfg: &HyperformerConfig, seed: u64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&[n, cfg.input_channels, cfg.window, cfg.num_joints], 1.0, &mut rng)
}

#[test]
fn toy_logits_have_batch_by_class_shape() {
    let cfg = tiny();
    let m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
    let y = m.logits(&batch(2, &cfg, 1)).unwrap();
    assert_eq!(y.shape(), &[2, 4]);
    assert!(y.all_finite());
    let zero = m.logits(&NdArray::zeros(&[2, 3, 8, 5])).unwrap();
    assert!(zero.all_finite());
    assert!(m.logits(&NdArray::zeros(&[2, 3, 8, 4])).is_err());
}

#[test]
fn strided_layers_shrink_time() {
    let cfg = HyperformerConfig {
        num_layers: 3,
        stride_layers: vec![1, 2],
        window: 9,
        ..tiny()
    };
    assert_eq!(cfg.output_frames(), 3);
    let m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
    let x = batch(1, &cfg, 2);
    assert_eq!(m.logits(&x).unwrap().shape(), &[1, 4]);
    // frame 4 exists at layer 1 (9 frames) but not at layer 2 (5 frames)
    assert!(m.attention_breakdown(&x, 1, 0, 8).is_ok());
    assert!(m.attention_breakdown(&x, 2, 0, 4).is_ok());
    assert!(matches!(m.attention_breakdown(&x, 2, 0, 5), Err(Error::Index(_))));
}

#[test]
fn linear_count_includes_bias() {
    let mut store = ParamStore::new();
    Linear::init(&mut store, "fc", 10, 5, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(store.count_trainable(), 55);
}

#[test]
fn full_config_matches_reported_size() {
    let m = HyperformerModel::new(HyperformerConfig::default(), &ntu25()).unwrap();
    let n = m.count_parameters();
    assert!((2_340_000..=2_860_000).contains(&n), "{n}");
}

#[test]
fn ablation_sizes_are_ordered() {
    let g = ntu25();
    let count = |v: &str| {
        HyperformerModel::build_ablation(HyperformerConfig::default(), v, &g)
            .unwrap()
            .count_parameters()
    };
    let (mlp, hyper, sa, ms) = (count("sa_mlp_tc"), count("hypersa_tc"), count("sa_tc"), count("hypersa_mstc"));
    assert!(mlp > hyper && hyper > sa, "{mlp} {hyper} {sa}");
    assert!(ms < hyper);
    assert_eq!(count("full_hypersa_tc"), hyper);
}

#[test]
fn variants_set_the_table_flags() {
    let base = HyperformerConfig::default();
    let sa = base.clone().with_variant("sa_tc").unwrap();
    assert_eq!(sa.terms(), TermFlags::NONE);
    assert!(!sa.use_ms_tc && !sa.use_mlp);
    let full = base.clone().with_variant("full_hypersa_tc").unwrap();
    assert_eq!(full.terms(), TermFlags::ALL);
    assert!(!full.use_ms_tc);
    let ms = base.clone().with_variant("hypersa_mstc").unwrap();
    assert_eq!(ms.terms(), TermFlags::ALL);
    assert!(ms.use_ms_tc);
    let b = base.clone().with_variant("sa_tc_joint_to_hyperedge").unwrap();
    assert!(b.enable_b && !b.enable_c && !b.enable_d && !b.enable_relational_bias);
    assert!(matches!(base.with_variant("sa_gcn"), Err(Error::Config(_))));
}

#[test]
fn disabled_terms_allocate_nothing() {
    let m = HyperformerModel::build_ablation(tiny(), "sa_tc", &path5()).unwrap();
    for (_, name, _) in m.store.iter() {
        for banned in ["w_e", "rpe_table", "static_key", "relational_bias"] {
            assert!(!name.ends_with(banned), "{name}");
        }
    }
}

#[test]
fn zeroed_blocks_reduce_to_pooled_embedding() {
    for ms in [false, true] {
        let cfg = HyperformerConfig { use_ms_tc: ms, ..tiny() };
        let mut m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
        let mut zero = Vec::new();
        for l in &m.layers {
            zero.extend([l.attn.w_out, l.attn.b_out]);
            match &l.temporal {
                TemporalBlock::Plain(tc) => zero.extend(tc.ids()),
                TemporalBlock::MultiScale(ms) => {
                    for b in &ms.branches {
                        zero.extend([b.weight, b.bias]);
                    }
                }
            }
        }
        for id in zero {
            m.store.get_mut(id).value.fill(0.0);
        }
        let x = batch(2, &cfg, 3);
        let got = m.logits(&x).unwrap();

        // stem, ReLU (idempotent across layers), mean pool, head
        let (sw, sb) = (m.store.value(m.stem.weight), m.store.value(m.stem.bias));
        let (hw, hb) = (m.store.value(m.head.weight), m.store.value(m.head.bias));
        for n in 0..2 {
            let mut pooled = vec![0.0; 18];
            for t in 0..8 {
                for v in 0..5 {
                    for (o, acc) in pooled.iter_mut().enumerate() {
                        let e: f64 = sb.data()[o] + (0..3).map(|i| x.get(&[n, i, t, v]) * sw.get(&[i, o])).sum::<f64>();
                        *acc += e.max(0.0) / 40.0;
                    }
                }
            }
            for k in 0..4 {
                let want = hb.data()[k] + (0..18).map(|o| pooled[o] * hw.get(&[o, k])).sum::<f64>();
                assert!((got.get(&[n, k]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = tiny();
    let a = HyperformerModel::new(cfg.clone(), &path5()).unwrap().logits(&batch(3, &cfg, 4)).unwrap();
    let b = HyperformerModel::new(cfg.clone(), &path5()).unwrap().logits(&batch(3, &cfg, 4)).unwrap();
    let bits = |x: &NdArray| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    for (variant, partition) in [
        ("hypersa_mstc", PartitionMode::Learned { num_edges: 3 }),
        ("sa_mlp_tc", tiny().partition),
        ("full_hypersa_tc", tiny().partition),
    ] {
        let cfg = HyperformerConfig {
            partition,
            num_layers: 3,
            stride_layers: vec![1],
            ..tiny()
        }
        .with_variant(variant)
        .unwrap();
        let m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
        let mut tape = Tape::with_params(&m.store);
        let x = tape.constant(to_channels_last(&batch(4, &cfg, 5)).unwrap());
        let tr = m.forward(&mut tape, x).unwrap();
        let loss = tape.cross_entropy(tr.logits, &[0, 1, 2, 3]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (id, name, p) in m.store.iter() {
            if p.trainable {
                let g = grads.param(id).unwrap_or_else(|| panic!("{variant}: {name} detached"));
                assert!(g.max_abs() > 0.0, "{variant}: {name} has zero gradient");
            }
        }
    }
}

#[test]
fn whole_model_gradients_pass_finite_differences() {
    let cfg = HyperformerConfig {
        channels: 6,
        heads: 2,
        window: 4,
        num_layers: 2,
        stride_layers: vec![1],
        partition: PartitionMode::Learned { num_edges: 2 },
        ..tiny()
    };
    let mut m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in m.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = p.value.zip_map(&uniform(&shape, 0.6, &mut rng), |a, b| a + b).unwrap();
    }
    let x = to_channels_last(&batch(2, &cfg, 7)).unwrap();
    let ids: Vec<ParamId> = m.store.ids().collect();
    let skeleton = m.clone();
    let report = finite_diff_check(&mut m.store, &ids, 1e-5, |t| {
        let xv = t.constant(x.clone());
        let tr = skeleton.forward(t, xv)?;
        t.cross_entropy(tr.logits, &[1, 3])
    })
    .unwrap();
    // Through ten stacked ops some coordinates sit near 1e-8, where the
    // ~1e-11 rounding noise of central differences is already 1e-3 relative.
    // Per-block checks hold the 1e-4 line; here we only catch wiring errors.
    assert!(report.max_rel_error() < 1e-2, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = HyperformerConfig {
        partition: PartitionMode::Learned { num_edges: 2 },
        ..tiny()
    };
    let mut m = HyperformerModel::new(cfg.clone(), &path5()).unwrap();
    m.round_to_f32();
    let bytes = m.to_checkpoint_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = HyperformerModel::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), bytes);
    let x = batch(2, &cfg, 8);
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
    assert!(matches!(back.partition, PartitionState::Relaxed { .. }));

    m.freeze_partition().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let back = HyperformerModel::load(&path).unwrap();
    assert_eq!(back.assignment().unwrap(), m.assignment().unwrap());
    assert_eq!(back.count_parameters(), m.count_parameters());
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    assert!(HyperformerModel::from_checkpoint_bytes(&bad).is_err());
}

#[test]
fn config_json_round_trip_and_strictness() {
    let cfg = HyperformerConfig::toy().with_variant("sa_tc_khop_rpe").unwrap();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    assert!(text.contains("\"enable_B\""));
    let back: HyperformerConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: HyperformerConfig = serde_json::from_str(r#"{"num_layers": 3}"#).unwrap();
    assert_eq!(partial.channels, 216);
    assert!(serde_json::from_str::<HyperformerConfig>(r#"{"layers": 3}"#).is_err());
    let bad = HyperformerConfig { channels: 20, ..tiny() };
    assert!(HyperformerModel::new(bad, &path5()).is_err());
}
