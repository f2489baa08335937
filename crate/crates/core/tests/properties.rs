use lrp_core::autodiff::Tape;
use lrp_core::checkpoint;
use lrp_core::config::Config;
use lrp_core::criteria::{EmaMode, ImportanceState};
use lrp_core::data::{gen_dataset, DataKind, DataSpec, Split};
use lrp_core::lora::AdapterMode;
use lrp_core::model::{Model, ModelSpec, TargetSet};
use lrp_core::oracles::{average_ranks, sgd_identity_error};
use lrp_core::pruner::{self, new_state, prune_step, zeros_for, PruneConfig, Scope};
use lrp_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grads(x: &Tensor, w: &Tensor, y: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w);
    let yv = tape.constant(y.clone());
    let z = tape.matmul(xv, wv).unwrap();
    let l1 = tape.mse_loss(z, yv).unwrap();
    let h = tape.gelu(z).unwrap();
    let l2 = tape.sum(h).unwrap();
    let a = tape.scale(l1, alpha).unwrap();
    let b = tape.scale(l2, beta).unwrap();
    let l = tape.add(a, b).unwrap();
    tape.backward(l).unwrap().get(wv).cloned().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let w = Tensor::randn(3, 5, 1.0, &mut rng).trainable();
        let y = Tensor::randn(4, 5, 1.0, &mut rng);
        let combined = grads(&x, &w, &y, alpha, beta);
        let g1 = grads(&x, &w, &y, 1.0, 0.0);
        let g2 = grads(&x, &w, &y, 0.0, 1.0);
        let expect = g1.scale(alpha).add(&g2.scale(beta)).unwrap();
        prop_assert!(combined.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn ema_stays_within_observed_range(
        lambda in 0.0f64..=1.0,
        literal in any::<bool>(),
        seq in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 6), 1..20),
    ) {
        let mode = if literal { EmaMode::Literal } else { EmaMode::Recursive };
        let mut st = ImportanceState::new(&[(2, 3)], lambda, mode).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in &seq {
            lo = v.iter().copied().fold(lo, f64::min);
            hi = v.iter().copied().fold(hi, f64::max);
            st.ema_update(0, Tensor::from_vec(2, 3, v.clone()).unwrap()).unwrap();
            for &s in st.layers[0].smooth.data() {
                prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn masks_ignore_positive_score_scaling(seed in any::<u64>(), scale in 1e-6f64..1e6, target in 0.0f64..0.95, global in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::init(ModelSpec::mlp(5, &[4], 3, 0), &mut rng).unwrap();
        model.attach_lora(2, AdapterMode::Parallel, TargetSet::All, &mut rng).unwrap();
        let mut st = new_state(&model, &PruneConfig::default()).unwrap();
        for l in &mut st.layers {
            let (r, c) = l.smooth.shape();
            l.smooth = Tensor::rand_uniform(r, c, &mut rng);
        }
        let mut scaled = st.clone();
        for l in &mut scaled.layers {
            l.smooth = l.smooth.scale(scale);
        }
        let scope = if global { Scope::Global } else { Scope::PerLayer };
        let mut m2 = model.clone();
        prune_step(&mut model, &st, target, scope).unwrap();
        prune_step(&mut m2, &scaled, target, scope).unwrap();
        for p in model.prunable() {
            prop_assert_eq!(model.layers[p].weight.mask(), m2.layers[p].weight.mask());
        }
    }

    #[test]
    fn average_ranks_are_a_permutation_mean(v in prop::collection::vec(0i32..5, 1..30)) {
        let x: Vec<f64> = v.iter().map(|&i| i as f64).collect();
        let r = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn zeros_for_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0, n in 0usize..10_000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(zeros_for(lo, n) <= zeros_for(hi, n));
        prop_assert!(zeros_for(hi, n) <= n);
    }

    #[test]
    fn product_update_matches_estimator(seed in any::<u64>(), eta in 1e-4f64..0.5) {
        prop_assert!(sgd_identity_error(seed, eta, false).unwrap() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), seq in any::<bool>(), transformer in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = if transformer {
            let mut s = ModelSpec::mlp(8, &[], 3, seed);
            s.arch = lrp_core::model::Arch::Transformer {
                tokens: 2,
                width: 4,
                ffn: 6,
                activation: lrp_core::model::Activation::Gelu,
            };
            s
        } else {
            ModelSpec::mlp(6, &[5, 4], 3, seed)
        };
        let mut model = Model::init(spec, &mut rng).unwrap();
        let mode = if seq { AdapterMode::Sequential } else { AdapterMode::Parallel };
        model.attach_lora(2, mode, TargetSet::All, &mut rng).unwrap();
        let mut st = new_state(&model, &PruneConfig::default()).unwrap();
        for l in &mut st.layers {
            let (r, c) = l.smooth.shape();
            l.smooth = Tensor::rand_uniform(r, c, &mut rng);
        }
        prune_step(&mut model, &st, 0.4, Scope::Global).unwrap();
        let bytes = checkpoint::to_bytes(&model);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
        let x = Tensor::randn(3, if transformer { 8 } else { 6 }, 1.0, &mut rng);
        prop_assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn config_canonical_form_round_trips(seed in any::<u64>(), s in 0.0f64..0.99, lambda in 0.0f64..=1.0, rank in 1usize..5) {
        let text = format!("seed = {seed}\n[lora]\nrank = {rank}\n[prune]\ntarget_sparsity = {s}\nlambda = {lambda}\n");
        let cfg = Config::parse(&text).unwrap();
        let again = Config::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.hash(), cfg.hash());
    }
}

#[test]
fn blobs_are_linearly_separable() {
    let mut spec = DataSpec::new(DataKind::Blobs, 1200, 16, 6, 11);
    spec.noise = 1.0;
    let data = gen_dataset(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probe = Model::init(ModelSpec::mlp(16, &[], 6, 0), &mut rng).unwrap();
    let iters = data.iterations(20, 32);
    pruner::train(&mut probe, &data, iters, 32, 0.05, 1).unwrap();
    let (x, y) = data.split(Split::Test);
    let acc = probe.accuracy(&x, &y).unwrap();
    assert!(acc > 0.95, "linear probe accuracy {acc}");
}
