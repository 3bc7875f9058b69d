use hlq_core::backprop::{backward, compress_activation, weight_grad, ActivationInput, BackwardStrategy};
use hlq_core::harness::study::model_grads;
use hlq_core::harness::{softmax_cross_entropy, synthetic, Model, ModelSpec, Optimizer, OptimizerConfig, SyntheticSpec};
use hlq_core::quantize::RngState;
use hlq_core::tensor::max_rel_err;

fn data() -> hlq_core::harness::Dataset {
    synthetic(&SyntheticSpec {
        train: 64,
        val: 8,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .0
}

#[test]
fn vanilla_sgd_reduces_fixed_batch_loss() {
    let d = data();
    let idx: Vec<usize> = (0..32).collect();
    let (x, y) = d.batch(&idx);
    let cfg = OptimizerConfig::default();
    for seed in 0..5 {
        let mut spec = ModelSpec::reference();
        spec.init_seed = seed;
        let mut model = Model::new(&spec).unwrap();
        let loss = |m: &Model| softmax_cross_entropy(&m.forward(&x, None, &RngState::new(0)).unwrap().0, &y).unwrap().0;
        let first = loss(&model);
        let mut opt = Optimizer::new(&cfg, &model.params());
        for _ in 0..10 {
            let g = model_grads(&model, &x, &y, &BackwardStrategy::vanilla(), &RngState::new(0)).unwrap();
            opt.step(model.params_mut(), &g, cfg.lr).unwrap();
        }
        let last = loss(&model);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn degenerate_strategies_match_vanilla_model_grads() {
    let d = data();
    let (x, y) = d.batch(&(0..16).collect::<Vec<_>>());
    let model = Model::new(&ModelSpec::reference()).unwrap();
    let exact = model_grads(&model, &x, &y, &BackwardStrategy::vanilla(), &RngState::new(0)).unwrap();
    for s in [BackwardStrategy::hlq(), BackwardStrategy::hq(4, 4), BackwardStrategy::lbp_wht(8), BackwardStrategy::naive(4)] {
        let got = model_grads(&model, &x, &y, &s.degenerate(), &RngState::new(3)).unwrap();
        for (g, e) in got.iter().zip(&exact) {
            let err = max_rel_err(g, e).unwrap();
            assert!(err < 1e-5, "{}: {err}", s.name());
        }
    }
}

#[test]
fn layer_operands_reproduce_model_weight_grads() {
    let d = data();
    let (x, y) = d.batch(&(0..8).collect::<Vec<_>>());
    let model = Model::new(&ModelSpec::reference()).unwrap();
    let grads = model_grads(&model, &x, &y, &BackwardStrategy::vanilla(), &RngState::new(0)).unwrap();
    let ops = model.layer_operands(&x, &y).unwrap();
    assert_eq!(ops.len(), 4);
    for (k, op) in ops.iter().enumerate() {
        let pair = backward(ActivationInput::Raw(&op.x), &op.w, &op.g_y, &BackwardStrategy::vanilla(), &mut RngState::new(0)).unwrap();
        assert_eq!(pair.g_w, grads[2 * k]);
    }
}

#[test]
fn hlq_compressed_weight_grad_matches_raw_on_model_activations() {
    let d = data();
    let (x, y) = d.batch(&(0..8).collect::<Vec<_>>());
    let model = Model::new(&ModelSpec::reference()).unwrap();
    let s = BackwardStrategy::hlq();
    for op in model.layer_operands(&x, &y).unwrap() {
        let rng = RngState::new(op.layer as u64);
        let raw = weight_grad(ActivationInput::Raw(&op.x), &op.g_y, &s, &mut rng.clone()).unwrap();
        let acbp = compress_activation(&op.x, &s, &mut rng.clone()).unwrap();
        let packed = weight_grad(ActivationInput::Compressed(&acbp), &op.g_y, &s, &mut rng.clone()).unwrap();
        assert_eq!(raw, packed, "layer {}", op.layer);
    }
}
