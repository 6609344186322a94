use forgery_peft::backbone::{
    forward_features, init_surrogate_pretrained, patch_embed, BackboneConfig, NoPeft, Preset, BACKBONE_PREFIX,
};
use forgery_peft::model::{forward, forward_baseline, init_model, ModelConfig};
use forgery_peft::numerics::{finite_difference_gradient, Graph, ParamSet, Tensor};
use forgery_peft::peft::{
    adapter_forward, cdc_apply, conv3x3, count_trainable, enumerate_trainable, lora_forward, AdapterLayer, ForgeryPeft,
    LoraLayer, PeftConfig,
};
use forgery_peft::Mode;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

fn at(t: &Tensor, idx: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

/// Brute-force central difference convolution with replicate padding.
fn cdc_oracle(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let mut out = Vec::with_capacity(b * o * h * wd);
    for n in 0..b {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        let center = at(x, [n, ic, i, j]);
                        for di in 0..3 {
                            for dj in 0..3 {
                                let ii = (i as isize + di as isize - 1).clamp(0, h as isize - 1) as usize;
                                let jj = (j as isize + dj as isize - 1).clamp(0, wd as isize - 1) as usize;
                                acc += at(w, [oc, ic, di, dj]) * (at(x, [n, ic, ii, jj]) - center);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn desk_images(batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(&[batch, 3, 32, 32], 0.0, 1.0, &mut rng)
}

#[test]
fn surrogate_init_is_deterministic() {
    let cfg = BackboneConfig::preset(Preset::Desk);
    assert_eq!(init_surrogate_pretrained(&cfg, 7).unwrap(), init_surrogate_pretrained(&cfg, 7).unwrap());
}

#[test]
fn vit_b_backbone_size_is_reported() {
    let count = BackboneConfig::preset(Preset::VitB).parameter_count();
    println!("ViT-B frozen backbone parameters: {count}");
    assert!((80_000_000..92_000_000).contains(&count));
}

#[test]
fn token_counts() {
    assert_eq!(BackboneConfig::preset(Preset::Desk).num_tokens(), 17);
    assert_eq!(BackboneConfig::preset(Preset::VitB).num_tokens(), 197);
}

#[test]
fn peft_names_are_trainable() {
    let params = init_model(&ModelConfig::preset(Preset::Desk), 0).unwrap();
    for name in params.names() {
        if name.starts_with("peft.") {
            assert!(params.is_trainable(name), "{name}");
        }
        if name.starts_with(BACKBONE_PREFIX) {
            assert!(!params.is_trainable(name), "{name}");
        }
    }
}

#[test]
fn zero_embedding_leaves_only_cls() {
    let cfg = BackboneConfig::preset(Preset::Desk);
    let mut params = init_surrogate_pretrained(&cfg, 1).unwrap();
    for name in ["backbone.patch_embed.weight", "backbone.patch_embed.bias", "backbone.pos_embed"] {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.set_value(name, Tensor::zeros(&shape)).unwrap();
    }
    let cls = params.get("backbone.cls_token").unwrap().data().to_vec();
    let mut g = Graph::new();
    let images = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
    let tokens = patch_embed(&mut g, &params, &cfg, images).unwrap();
    let out = g.value(tokens);
    assert_eq!(out.shape(), &[2, 17, cfg.dim]);
    for b in 0..2 {
        for t in 0..17 {
            let row = &out.data()[(b * 17 + t) * cfg.dim..(b * 17 + t + 1) * cfg.dim];
            if t == 0 {
                assert_eq!(row, &cls[..]);
            } else {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn zero_init_hooks_match_plain_backbone() {
    let model = ModelConfig::preset(Preset::Desk);
    let params = init_model(&model, 2).unwrap();
    let images = desk_images(3, 2);
    let run = |hooks: &dyn forgery_peft::backbone::PeftHooks| {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let feats = forward_features(&mut g, &params, &model.backbone, x, hooks, Mode::Infer).unwrap();
        g.value(feats.tokens).clone()
    };
    let plain = run(&NoPeft);
    let hooked = run(&ForgeryPeft::from_config(&model.peft));
    assert_eq!(plain.data(), hooked.data());
}

#[test]
fn identical_images_give_identical_rows() {
    let model = ModelConfig::preset(Preset::Desk);
    let params = init_model(&model, 3).unwrap();
    let one = desk_images(1, 9);
    let two = Tensor::new(vec![2, 3, 32, 32], [one.data(), one.data()].concat()).unwrap();
    let mut g = Graph::new();
    let out = forward(&mut g, &params, &model, &two, Mode::Infer, None).unwrap();
    let t = g.value(out.tokens);
    assert_eq!(t.shape(), &[2, 17, 32]);
    assert!(t.data().iter().all(|v| v.is_finite()));
    let half = t.numel() / 2;
    assert_eq!(&t.data()[..half], &t.data()[half..]);
}

#[test]
fn cdc_constant_input_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::full(&[1, 2, 4, 4], 5.0);
    let w = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    assert!(cdc_apply(&x, &w).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn cdc_zero_weights_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    assert!(cdc_apply(&x, &Tensor::zeros(&[2, 2, 3, 3])).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn cdc_matches_direct_summation_on_single_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[1, 1, 5, 5], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    let got = cdc_apply(&x, &w).unwrap();
    for (a, b) in got.data().iter().zip(cdc_oracle(&x, &w)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn adapter_with_zero_up_is_frozen_ffn() {
    let model = ModelConfig::preset(Preset::Desk);
    let params = init_model(&model, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random_tensor(&[2, 17, 32], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let hv = g.constant(h);
    let layer = AdapterLayer::bind(&mut g, &params, 0).unwrap();
    let out = adapter_forward(&mut g, &params, 0, hv, &layer, 4).unwrap();
    let mlp = forgery_peft::backbone::frozen_mlp(&mut g, &params, 0, hv).unwrap();
    assert_eq!(g.shape(out), &[2, 17, 32]);
    assert_eq!(g.value(out).data(), g.value(mlp).data());
}

#[test]
fn adapter_of_zero_input_with_zero_biases_is_zero() {
    let model = ModelConfig::preset(Preset::Desk);
    let mut params = init_model(&model, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let shape = params.get(&name).unwrap().shape().to_vec();
        if name.ends_with("bias") {
            params.set_value(&name, Tensor::zeros(&shape)).unwrap();
        } else if name.contains("adapter") {
            params.set_value(&name, random_tensor(&shape, -1.0, 1.0, &mut rng)).unwrap();
        }
    }
    let mut g = Graph::new();
    let hv = g.constant(Tensor::zeros(&[2, 17, 32]));
    let layer = AdapterLayer::bind(&mut g, &params, 1).unwrap();
    let out = adapter_forward(&mut g, &params, 1, hv, &layer, 4).unwrap();
    assert!(g.value(out).data().iter().all(|v| *v == 0.0));
}

fn lora_output(h: Tensor, w: Tensor, down: Tensor, up: Tensor) -> Tensor {
    let mut g = Graph::new();
    let hv = g.constant(h);
    let wv = g.constant(w);
    let dv = g.constant(down);
    let uv = g.constant(up);
    let layer = LoraLayer::new(&g, dv, uv).unwrap();
    let out = lora_forward(&mut g, hv, wv, &layer).unwrap();
    g.value(out).clone()
}

#[test]
fn lora_zero_up_is_frozen_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = random_tensor(&[2, 4], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[4, 4], -1.0, 1.0, &mut rng);
    let down = random_tensor(&[4, 2], -1.0, 1.0, &mut rng);
    let got = lora_output(h.clone(), w.clone(), down, Tensor::zeros(&[2, 4]));
    let mut g = Graph::new();
    let (hv, wv) = (g.constant(h), g.constant(w));
    let plain = g.matmul(hv, wv).unwrap();
    assert_eq!(got.data(), g.value(plain).data());
}

#[test]
fn lora_hand_example() {
    let got = lora_output(
        Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
        Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
    );
    assert_eq!(got.data(), &[1.0, 2.0]);
}

#[test]
fn lora_delta_has_rank_at_most_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let down = DMatrix::<f64>::from_fn(64, 8, |_, _| rng.random_range(-1.0..1.0));
    let up = DMatrix::<f64>::from_fn(8, 64, |_, _| rng.random_range(-1.0..1.0));
    let eye = DMatrix::<f64>::identity(64, 64);
    let got = lora_output(
        Tensor::new(vec![64, 64], eye.as_slice().to_vec()).unwrap(),
        Tensor::zeros(&[64, 64]),
        Tensor::new(vec![64, 8], down.transpose().as_slice().to_vec()).unwrap(),
        Tensor::new(vec![8, 64], up.transpose().as_slice().to_vec()).unwrap(),
    );
    let m = DMatrix::from_row_slice(64, 64, got.data());
    let sv = m.singular_values();
    let tol = sv.max() * 64.0 * f64::EPSILON;
    assert!(sv.iter().filter(|s| **s > tol).count() <= 8);
}

#[test]
fn lora_rank_above_width_is_an_error() {
    let mut g = Graph::new();
    let d = g.constant(Tensor::zeros(&[4, 5]));
    let u = g.constant(Tensor::zeros(&[5, 4]));
    assert!(LoraLayer::new(&g, d, u).is_err());
}

#[test]
fn vit_b_lora_budget_by_two_counts() {
    let model = ModelConfig::preset(Preset::VitB);
    let budget = count_trainable(&model);
    assert_eq!(budget.lora_total, 442_368);
    assert_eq!(12 * 3 * 2 * 768 * 8, 442_368);
    let specs = model.param_specs();
    let enumerated = enumerate_trainable(specs.iter().map(|s| (s.name.as_str(), s.numel(), s.trainable)));
    assert_eq!(enumerated, budget);
    let rel = (budget.grand_total as f64 - 1.34e6).abs() / 1.34e6;
    assert!(rel <= 0.05, "grand total {}", budget.grand_total);
}

#[test]
fn rank_zero_has_no_lora() {
    let mut model = ModelConfig::preset(Preset::VitB);
    model.peft = PeftConfig { lora_rank: 0, ..model.peft };
    assert_eq!(count_trainable(&model).lora_total, 0);
}

#[test]
fn fresh_model_matches_frozen_baseline() {
    let model = ModelConfig::preset(Preset::Desk);
    let params = init_model(&model, 11).unwrap();
    for batch in 0..10 {
        let images = desk_images(4, 100 + batch);
        let mut g = Graph::new();
        let peft = forward(&mut g, &params, &model, &images, Mode::Infer, None).unwrap();
        let base = forward_baseline(&mut g, &params, &model, &images).unwrap();
        assert_eq!(g.value(peft.logits).data(), g.value(base.logits).data());
    }
}

#[test]
fn toy_block_passes_gradient_check() {
    let model = ModelConfig::preset(Preset::Desk);
    let full = init_model(&model, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = ParamSet::new();
    for (name, t) in full.iter() {
        let keep = name.starts_with("backbone.blocks.0.mlp") || name.starts_with("peft.blocks.0.");
        if keep {
            let trainable = full.is_trainable(name);
            let v = if trainable { random_tensor(t.shape(), -0.3, 0.3, &mut rng) } else { t.clone() };
            p.insert(name, v, trainable).unwrap();
        }
    }
    let h = random_tensor(&[1, 17, 32], -1.0, 1.0, &mut rng);
    let report = finite_difference_gradient(
        |g, p| {
            let hv = g.constant(h.clone());
            let q = LoraLayer::bind(g, p, 0, forgery_peft::backbone::Projection::Query)?;
            let w = g.constant(Tensor::zeros(&[32, 32]));
            let x = lora_forward(g, hv, w, &q)?;
            let layer = AdapterLayer::bind(g, p, 0)?;
            let y = adapter_forward(g, p, 0, x, &layer, 4)?;
            let y = g.square(y)?;
            g.mean(y)
        },
        &p,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "max rel {}", report.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdc_equals_conv_minus_center_term(b in 1usize..3, c in 1usize..4, o in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[b, c, h, w], -2.0, 2.0, &mut rng);
        let k = random_tensor(&[o, c, 3, 3], -1.0, 1.0, &mut rng);
        let got = cdc_apply(&x, &k).unwrap();
        let conv = conv3x3(&x, &k).unwrap();
        let oracle = cdc_oracle(&x, &k);
        for n in 0..b {
            for oc in 0..o {
                let wsum: Vec<f64> = (0..c).map(|ic| (0..9).map(|t| at(&k, [oc, ic, t / 3, t % 3])).sum()).collect();
                for i in 0..h {
                    for j in 0..w {
                        let idx = ((n * o + oc) * h + i) * w + j;
                        let center: f64 = (0..c).map(|ic| at(&x, [n, ic, i, j]) * wsum[ic]).sum();
                        prop_assert!((got.data()[idx] - oracle[idx]).abs() <= 1e-12);
                        prop_assert!((got.data()[idx] - (conv.data()[idx] - center)).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cdc_is_high_pass(value in -10.0f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let out = cdc_apply(&Tensor::full(&[1, 3, 4, 4], value), &k).unwrap();
        prop_assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn budget_matches_enumeration(r in 0usize..9, c in 0usize..40, depth in 1usize..4) {
        let mut model = ModelConfig::preset(Preset::Desk);
        model.backbone.depth = depth;
        model.peft = PeftConfig { lora_rank: r, adapter_width: c };
        let specs = model.param_specs();
        let enumerated = enumerate_trainable(specs.iter().map(|s| (s.name.as_str(), s.numel(), s.trainable)));
        prop_assert_eq!(enumerated, count_trainable(&model));
    }
}
