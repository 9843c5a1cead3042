//! Property tests for kernel invariants, validators and file round trips.

mod common;

use proptest::prelude::*;
use zsad::adapters::{adapt, init_stack};
use zsad::checkpoint::{decode_checkpoint, encode_checkpoint};
use zsad::config::{LossConfig, TrainConfig};
use zsad::feature_io::{
    decode_bundle, decode_textbank, encode_bundle, encode_textbank,
    synth_dataset, validate_bundle, DatasetManifest, FeatureBundle, Split, SynthSpec,
};
use zsad::head::{fuse_stages, stage_map_from_embeddings};
use zsad::losses::{dice_loss, focal_loss};
use zsad::map_io::{decode_pfm, encode_pfm};
use zsad::numerics::{
    bilinear_resize, cosine_rows, softmax_over_states, ScoreGrid, Tensor2, NORM_EPS,
};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

fn grid(h: usize, w: usize) -> impl Strategy<Value = ScoreGrid> {
    prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |d| ScoreGrid::new(h, w, d).unwrap())
}

fn small_spec() -> impl Strategy<Value = SynthSpec> {
    (1usize..5, 1usize..4, 2usize..6, 1usize..4, any::<u64>()).prop_map(
        |(grid, scale, d_v, n_layers, seed)| SynthSpec {
            n_train: 1,
            n_test: 1,
            grid,
            image_size: grid * scale,
            d_v,
            d_t: 3,
            n_layers,
            templates_per_state: 2,
            seed,
            ..SynthSpec::default()
        },
    )
}

fn some_bundle() -> impl Strategy<Value = FeatureBundle> {
    (small_spec(), any::<bool>()).prop_map(|(spec, keep_mask)| {
        let mut b = synth_dataset(&spec).unwrap().bundles.remove(0);
        if !keep_mask {
            b.mask = None;
        }
        b
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_sum_to_one(s in tensor(5, 2), tau in 0.01f64..2.0) {
        let p = softmax_over_states(&s, tau).unwrap();
        for i in 0..5 {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn raising_a_logit_raises_its_probability(s in tensor(1, 2), bump in 0.01f64..1.0) {
        let tau = 1.0;
        let before = softmax_over_states(&s, tau).unwrap();
        let mut raised = s.clone();
        raised.row_mut(0)[1] += bump;
        let after = softmax_over_states(&raised, tau).unwrap();
        prop_assume!(before.get(0, 1) < 1.0);
        prop_assert!(after.get(0, 1) > before.get(0, 1));
    }

    #[test]
    fn cosine_self_similarity_and_scale_invariance(a in tensor(4, 3), b in tensor(2, 3), lambda in 0.01f64..100.0) {
        let self_sim = cosine_rows(&a, &a, NORM_EPS).unwrap();
        for i in 0..4 {
            let n: f64 = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n >= 1e-6 {
                prop_assert!((self_sim.get(i, i) - 1.0).abs() < 1e-12);
            }
        }
        let base = cosine_rows(&a, &b, NORM_EPS).unwrap();
        let scaled = cosine_rows(&a.scale(lambda), &b, NORM_EPS).unwrap();
        for (x, y) in base.data().iter().zip(scaled.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_is_linear(u in grid(3, 4), v in grid(3, 4), alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                        oh in 1usize..10, ow in 1usize..10) {
        let mix = ScoreGrid::new(3, 4, u.values().iter().zip(v.values()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = bilinear_resize(&mix, oh, ow).unwrap();
        let ru = bilinear_resize(&u, oh, ow).unwrap();
        let rv = bilinear_resize(&v, oh, ow).unwrap();
        for i in 0..lhs.values().len() {
            prop_assert!((lhs.values()[i] - (alpha * ru.values()[i] + beta * rv.values()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_commutes_with_resize(a in grid(3, 3), b in grid(3, 3), c in grid(3, 3)) {
        let grids = [a, b, c];
        let fused_then_up = bilinear_resize(&fuse_stages(&grids).unwrap(), 7, 5).unwrap();
        let ups: Vec<ScoreGrid> = grids.iter().map(|g| bilinear_resize(g, 7, 5).unwrap()).collect();
        let up_then_fused = fuse_stages(&ups).unwrap();
        for (x, y) in fused_then_up.values().iter().zip(up_then_fused.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_probs_are_distributions(emb in tensor(6, 4), text in tensor(2, 4), lambda in 0.1f64..10.0) {
        let s = stage_map_from_embeddings(6, &emb, &text, 0.07, 2, 3).unwrap();
        for i in 0..6 {
            prop_assert!((s.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(s.grid.values(), &s.probs.column(1)[..]);
        // rescaling adapted rows leaves probabilities untouched
        let scaled = stage_map_from_embeddings(6, &emb.scale(lambda), &text, 0.07, 2, 3).unwrap();
        for (x, y) in s.probs.data().iter().zip(scaled.probs.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_improve_toward_target(
        pred in prop::collection::vec(0.0f64..1.0, 8),
        target in prop::collection::vec(0u8..2, 8),
        idx in 0usize..8,
        step in 0.01f64..0.5,
    ) {
        let cfg = LossConfig::default();
        let f = |p: &[f64]| focal_loss(p, &target, cfg.focal_gamma, cfg.focal_alpha).unwrap().value;
        let d = |p: &[f64]| dice_loss(p, &target, cfg.dice_eps).unwrap().value;
        prop_assert!(f(&pred) >= 0.0 && d(&pred) >= 0.0);
        let goal = f64::from(target[idx]);
        let mut moved = pred.clone();
        moved[idx] += (goal - moved[idx]) * step;
        prop_assume!((moved[idx] - pred[idx]).abs() > 1e-9);
        prop_assert!(f(&moved) <= f(&pred));
        prop_assert!(d(&moved) <= d(&pred) + 1e-15);
    }

    #[test]
    fn bundle_round_trip(b in some_bundle()) {
        prop_assert!(validate_bundle(&b).is_empty());
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn validator_flags_each_mutation(b in some_bundle(), which in 0usize..8) {
        let mut m = b.clone();
        let field = match which {
            0 => { m.mask = Some(vec![2; m.image_h * m.image_w]); "mask" }
            1 => { m.mask = Some(vec![0; m.image_h * m.image_w + 1]); "mask" }
            2 => { m.layer_indices.push(0); "layer_indices" }
            3 => { m.patch_tokens.pop(); "patch_tokens" }
            4 => {
                let t = &m.patch_tokens[0];
                m.patch_tokens[0] = Tensor2::new(t.rows() + 1, t.cols(), vec![0.0; (t.rows() + 1) * t.cols()]).unwrap();
                "patch_tokens"
            }
            5 => { m.patch_tokens[0].data_mut()[0] = f64::NAN; "patch_tokens" }
            6 => { m.cls_token.push(0.0); "cls_token" }
            _ => { m.cls_token[0] = f64::INFINITY; "cls_token" }
        };
        let v = validate_bundle(&m);
        prop_assert!(v.iter().any(|x| x.field == field), "{:?}", v);
        prop_assert!(encode_bundle(&m).is_err());
    }

    #[test]
    fn textbank_and_manifest_round_trip(spec in small_spec()) {
        let data = synth_dataset(&spec).unwrap();
        let bank = decode_textbank(&encode_textbank(&data.bank).unwrap()).unwrap();
        prop_assert_eq!(bank, data.bank.clone());
        let text = data.manifest.to_text().unwrap();
        let back = DatasetManifest::parse(&text).unwrap();
        prop_assert_eq!(back, data.manifest);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), d_v in 1usize..9, d_t in 1usize..9, d_e in 1usize..9) {
        let cfg = TrainConfig { d_e, layer_indices: vec![3, 9], ..TrainConfig::default() };
        let stack = init_stack(&cfg, d_v, d_t, seed).unwrap();
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&stack).unwrap()).unwrap(), stack);
    }

    #[test]
    fn pfm_round_trip_on_f32_values(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let values: Vec<f64> = common::random_vec(&mut r, h * w, 0.0, 1.0)
            .into_iter()
            .map(|v| f64::from(v as f32))
            .collect();
        let g = ScoreGrid::new(h, w, values).unwrap();
        prop_assert_eq!(decode_pfm(&encode_pfm(&g)).unwrap(), g);
    }

    #[test]
    fn adapter_is_not_homogeneous(seed in 0u64..1000) {
        let cfg = TrainConfig { d_e: 4, layer_indices: vec![6], ..TrainConfig::default() };
        let stack = init_stack(&cfg, 6, 3, seed).unwrap();
        let mut adapter = stack.patch_adapters[0].clone();
        // Nonzero first-layer bias so that doubling the input moves pre-activations across zero.
        adapter.b1.iter_mut().for_each(|b| *b = 0.5);
        let mut r = common::rng(seed);
        let x = common::random_tensor(&mut r, 4, 6);
        let y = adapt(&adapter, &x).unwrap();
        let y2 = adapt(&adapter, &x.scale(2.0)).unwrap();
        prop_assert!(y2.data().iter().zip(y.data()).any(|(a, b)| (a - 2.0 * b).abs() > 1e-9));
    }
}

#[test]
fn fused_layer_scores_have_lower_variance() {
    let data = synth_dataset(&SynthSpec::default()).unwrap();
    let dir = &data.abnormal_direction;
    let mut per_layer_var = 0.0;
    let mut fused = Vec::new();
    let mut layers: Vec<Vec<f64>> = Vec::new();
    for b in data.split(Split::Train) {
        let mask = b.mask.as_ref().unwrap();
        let scale = b.image_h / b.grid_h;
        for p in 0..b.n_patches() {
            let (gi, gj) = (p / b.grid_w, p % b.grid_w);
            // keep normal patches only so the class signal does not enter the variance
            if mask[(gi * scale) * b.image_w + gj * scale] != 0 {
                continue;
            }
            let scores: Vec<f64> = b
                .patch_tokens
                .iter()
                .map(|t| common::dot(t.row(p), dir))
                .collect();
            if layers.is_empty() {
                layers = vec![Vec::new(); scores.len()];
            }
            for (l, s) in layers.iter_mut().zip(&scores) {
                l.push(*s);
            }
            fused.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    assert!(fused.len() >= 1000, "only {} patches", fused.len());
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    for l in &layers {
        per_layer_var += var(l);
    }
    per_layer_var /= layers.len() as f64;
    assert!(var(&fused) < per_layer_var, "{} vs {per_layer_var}", var(&fused));
}
