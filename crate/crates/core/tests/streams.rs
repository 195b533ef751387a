use hyperformer::model::{HyperformerConfig, HyperformerModel};
use hyperformer::skeleton::mini16;
use hyperformer::training::{self, Modality, TrainConfig};

#[test]
fn joint_and_bone_streams_fuse() {
    let g = mini16();
    let cfg = TrainConfig {
        epochs: 30,
        decay_epochs: vec![22, 27],
        warmup_epochs: 2,
        data: training::DataSpec {
            n_per_class: 60,
            eval_per_class: 30,
            ..Default::default()
        },
        batch_size: 16,
        ..TrainConfig::toy()
    };
    let (train, eval) = training::toy_splits(&g, &cfg.data, 21).unwrap();
    let mut scores = Vec::new();
    let mut single = Vec::new();
    for modality in [Modality::Joint, Modality::Bone] {
        let tr = train.to_modality(modality, &g).unwrap();
        let ev = eval.to_modality(modality, &g).unwrap();
        let mc = HyperformerConfig {
            num_joints: 16,
            seed: 21,
            ..HyperformerConfig::toy()
        };
        let mut model = HyperformerModel::new(mc, &g).unwrap();
        training::train(&mut model, &tr, None, &cfg, None).unwrap();
        let s = training::predict_scores(&model, &ev).unwrap();
        let acc = training::accuracy(&training::argmax_rows(&s), &ev.labels);
        assert!(acc > 0.25 + 0.1, "{modality:?} stream held-out accuracy {acc}");
        single.push(acc);
        scores.push(s);
    }
    let fused = training::accuracy(&training::fuse_streams(&scores).unwrap(), &eval.labels);
    let best = single.iter().copied().fold(0.0, f64::max);
    assert!(fused >= best - 0.02, "fused {fused} vs streams {single:?}");
}
