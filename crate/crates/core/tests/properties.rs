//! Randomized checks that cut across modules.

use gconv::attention::attention_probs;
use gconv::checkpoint;
use gconv::grad::{backward, grouped_conv1d_backward, positionwise_fc_backward, Example};
use gconv::layers::LayerWeights;
use gconv::losses::LossSpec;
use gconv::profile::{attention_macs, count_flops, count_params};
use gconv::{build_model, forward, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Small valid configs: channels = heads · head_dim, every group count divides its layer.
fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..3, 1usize..4, 0usize..4, 0usize..4, 0usize..4, 0usize..4, 2usize..4)
        .prop_map(|(blocks, heads, hd, gmul, imul, a, b, c, d, classes)| {
            let channels = heads * hd * gmul * 2;
            let pick = |i: usize| [1, 2, gmul * 2, channels][i];
            ModelConfig {
                vocab_size: 11,
                max_positions: 9,
                channels,
                num_blocks: blocks,
                num_heads: heads,
                ffn_inner: channels * imul,
                groups_qkv: pick(a),
                groups_ffn1: pick(b),
                groups_ffn2: pick(c),
                groups_ffn3: pick(d),
                num_classes: classes,
                ..ModelConfig::preset("tiny").unwrap()
            }
        })
        .prop_filter("valid", |c| c.validate().is_ok())
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn densified_model_agrees(config in small_config(), seed in any::<u64>(), n in 1usize..9) {
        let model = build_model(&config, seed).unwrap();
        let ids = tokens(seed, n, config.vocab_size);
        let segs = vec![0; n];
        let grouped = forward(&model, &ids, &segs, None).unwrap();
        let dense = forward(&model.densified(), &ids, &segs, None).unwrap();
        prop_assert!(grouped.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn masked_padding_is_inert(config in small_config(), seed in any::<u64>(), n in 1usize..5, pad in 1usize..5) {
        let model = build_model(&config, seed).unwrap();
        let ids = tokens(seed, n, config.vocab_size);
        let base = forward(&model, &ids, &vec![0; n], None).unwrap();
        let mut padded = ids.clone();
        padded.extend(tokens(seed ^ 1, pad, config.vocab_size));
        let visible: Vec<bool> = (0..n + pad).map(|i| i < n).collect();
        let out = forward(&model, &padded, &vec![0; n + pad], Some(&visible)).unwrap();
        prop_assert!(base.max_abs_diff(&out) <= 1e-9);
    }

    #[test]
    fn params_match_enumeration(config in small_config(), seed in any::<u64>()) {
        let model = build_model(&config, seed).unwrap();
        prop_assert_eq!(count_params(&config).unwrap().total, model.enumerate_params());
    }

    #[test]
    fn group_multiplier_scales_grouped_rows(seq_len in 1usize..513, m in prop::sample::select(vec![2usize, 3, 4])) {
        let base = ModelConfig::preset("squeezebert").unwrap();
        let scaled = ModelConfig { groups_qkv: base.groups_qkv * m, groups_ffn2: base.groups_ffn2 * m, groups_ffn3: base.groups_ffn3 * m, ..base.clone() };
        let (a, b) = (count_flops(&base, seq_len).unwrap(), count_flops(&scaled, seq_len).unwrap());
        for key in ["attn.q", "attn.k", "attn.v", "ffn2", "ffn3"] {
            prop_assert_eq!(a.block_layer_macs[key], b.block_layer_macs[key] * m as u64, "{}", key);
        }
        prop_assert_eq!(a.block_layer_macs["ffn1"], b.block_layer_macs["ffn1"]);
        prop_assert_eq!(attention_macs(&base, seq_len), attention_macs(&scaled, seq_len));
    }

    #[test]
    fn checkpoint_is_byte_idempotent(config in small_config(), seed in any::<u64>()) {
        let model = build_model(&config, seed).unwrap();
        let bytes = checkpoint::to_bytes(&config, &model).unwrap();
        let (c2, m2) = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&c2, &config);
        prop_assert_eq!(checkpoint::to_bytes(&c2, &m2).unwrap(), bytes);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), p in 1usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, &[p, d]).scale(8.0);
        let k = random(&mut rng, &[p, d]).scale(8.0);
        let probs = attention_probs(&q, &k, None).unwrap();
        for r in 0..p {
            let row = probs.row(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn input_gradient_stays_in_group(seed in any::<u64>(), g in 2usize..5, cig in 1usize..4, cog in 1usize..4, p in 1usize..5, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co) = (g * cig, g * cog);
        let w = LayerWeights::new(random(&mut rng, &[co, cig, k]), random(&mut rng, &[co]), g).unwrap();
        let f = random(&mut rng, &[p, ci]);
        let target = rng.random_range(0..g);
        let mut dout = random(&mut rng, &[p, co]);
        for r in 0..p {
            for c in 0..co {
                if c / cog != target {
                    dout.row_mut(r)[c] = 0.0;
                }
            }
        }
        let grads = grouped_conv1d_backward(&f, &w, &dout).unwrap();
        for r in 0..p {
            for c in 0..ci {
                if c / cig != target {
                    prop_assert_eq!(grads.input.get2(r, c), 0.0);
                }
            }
        }
        for c in 0..co {
            if c / cog != target {
                prop_assert_eq!(grads.bias.data()[c], 0.0);
                let rows = &grads.kernel.data()[c * cig * k..(c + 1) * cig * k];
                prop_assert!(rows.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn dense_backward_equals_grouped_g1(seed in any::<u64>(), p in 1usize..6, ci in 1usize..7, co in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LayerWeights::new(random(&mut rng, &[co, ci, 1]), random(&mut rng, &[co]), 1).unwrap();
        let f = random(&mut rng, &[p, ci]);
        let dout = random(&mut rng, &[p, co]);
        let a = grouped_conv1d_backward(&f, &w, &dout).unwrap();
        let b = positionwise_fc_backward(&f, &w, &dout).unwrap();
        prop_assert!(a.kernel.bitwise_eq(&b.kernel));
        prop_assert!(a.bias.bitwise_eq(&b.bias));
        prop_assert!(a.input.bitwise_eq(&b.input));
    }

    #[test]
    fn loss_gradient_is_shift_free(config in small_config(), seed in any::<u64>(), label in 0usize..2) {
        // Logit gradients of a softmax loss sum to zero, so the classifier bias gradient does too.
        let model = build_model(&config, seed).unwrap();
        let ex = Example::new(tokens(seed, 3, config.vocab_size));
        let (_, g) = backward(&model, &config, &ex, &LossSpec::hard_label(config.num_classes, label)).unwrap();
        let s: f64 = g.get("classifier.bias").unwrap().data().iter().sum();
        prop_assert!(s.abs() <= 1e-12);
    }
}
