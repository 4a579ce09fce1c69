use aga_core::corpus::special;
use aga_core::encoders::{scaled_dot_attention, EncoderConfig, Graph, ImageEmbedding, Model, ParamStore, TextEmbedding, CrossHidden};
use aga_core::rng;
use aga_core::{Error, Tensor};
use proptest::prelude::*;

const VOCAB: usize = 12;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 8,
        num_heads: 2,
        text_layers: 3,
        image_layers: 1,
        cross_layers: 1,
        max_text_len: 10,
        patch_side: 2,
        patch_dim: 3,
        ffn_mult: 2,
        embed_dim: 4,
        init_std: 0.5,
        vocab_size: VOCAB,
        ..EncoderConfig::default()
    }
}

fn build(config: &EncoderConfig, seed: u64) -> (Model, ParamStore) {
    Model::init(config, &mut rng::stream(seed, rng::INIT)).unwrap()
}

fn set(params: &mut ParamStore, name: &str, data: Vec<f64>) {
    let id = params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = params.get(id).shape().to_vec();
    *params.get_mut(id) = Tensor::new(shape, data).unwrap();
}

fn zero(params: &mut ParamStore, name: &str) {
    let id = params.id(name).unwrap();
    let shape = params.get(id).shape().to_vec();
    *params.get_mut(id) = Tensor::zeros(&shape);
}

fn patches(config: &EncoderConfig, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, "patches");
    let (m, d) = (config.num_patches(), config.patch_dim);
    Tensor::matrix(m, d, (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Layer norm with unit gain and zero shift, as the encoders use it.
fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn trace_rows_are_distributions_with_zero_weight_on_pads() {
    let c = small_config();
    let (model, params) = build(&c, 1);
    let ids = [special::CLS, 5, 6, 7, special::SEP, special::PAD, special::PAD];
    let pads = [false, false, false, false, false, true, true];
    let mut g = Graph::new(&params, false);
    let (_, trace) = model.encode_text(&mut g, &ids, Some(&pads)).unwrap();
    assert_eq!(trace.num_layers(), c.text_layers);
    for layer in &trace.layers {
        assert_eq!(layer.len(), c.num_heads);
        for row in layer {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert_eq!(row[5], 0.0);
            assert_eq!(row[6], 0.0);
        }
    }
}

#[test]
fn padding_leaves_class_embedding_unchanged() {
    let c = small_config();
    let (model, params) = build(&c, 2);
    let ids = vec![special::CLS, 5, 9, special::SEP];
    let mut g = Graph::new(&params, false);
    let (short, _) = model.encode_text(&mut g, &ids, None).unwrap();
    let mut padded = ids.clone();
    padded.extend([special::PAD; 4]);
    let mut pads = vec![false; 4];
    pads.extend([true; 4]);
    let (long, _) = model.encode_text(&mut g, &padded, Some(&pads)).unwrap();
    let a = g.value(short.tokens).row(0).to_vec();
    let b = g.value(long.tokens).row(0).to_vec();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn single_head_trace_matches_hand_oracle() {
    let c = EncoderConfig {
        hidden_dim: 2,
        num_heads: 1,
        text_layers: 1,
        max_text_len: 3,
        vocab_size: 6,
        ..small_config()
    };
    let (model, mut params) = build(&c, 3);
    let emb = vec![0.0, 0.0, 1.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.3, 0.9, -1.2, 0.4];
    let pos = vec![0.1, 0.0, 0.0, 0.2, -0.3, 0.0];
    let wq = vec![0.7, -0.2, 0.4, 1.1];
    let bq = vec![0.05, -0.1];
    let wk = vec![-0.6, 0.3, 0.9, 0.5];
    let bk = vec![0.2, 0.0];
    set(&mut params, "text.token_embedding", emb.clone());
    set(&mut params, "text.position_embedding", pos.clone());
    set(&mut params, "text.layers.0.attn.query.weight", wq.clone());
    set(&mut params, "text.layers.0.attn.query.bias", bq.clone());
    set(&mut params, "text.layers.0.attn.key.weight", wk.clone());
    set(&mut params, "text.layers.0.attn.key.bias", bk.clone());

    let ids = [special::CLS, 4, 5];
    let mut g = Graph::new(&params, false);
    let (_, trace) = model.encode_text(&mut g, &ids, None).unwrap();

    let h: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(j, &t)| layer_norm(&[emb[t * 2] + pos[j * 2], emb[t * 2 + 1] + pos[j * 2 + 1]]))
        .collect();
    let q = affine(&h[0], &wq, &bq);
    let scores: Vec<f64> = h
        .iter()
        .map(|hj| dot(&q, &affine(hj, &wk, &bk)) / 2f64.sqrt())
        .collect();
    let want = softmax(&scores);
    for (a, b) in trace.layers[0][0].iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn attention_kernel_matches_hand_oracle() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let q = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![0.2, -1.0], vec![1.5, 0.4]]).unwrap();
    let v = Tensor::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]).unwrap();
    let (qv, kv, vv) = (g.tape.constant(q.clone()), g.tape.constant(k.clone()), g.tape.constant(v.clone()));
    let (out, probs) = scaled_dot_attention(&mut g, qv, kv, vv, None).unwrap();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| dot(q.row(i), k.row(j)) / 2f64.sqrt()).collect();
        let p = softmax(&s);
        for j in 0..2 {
            assert!((g.value(probs).at(i, j) - p[j]).abs() < 1e-12);
            let o = p[0] * v.at(0, j) + p[1] * v.at(1, j);
            assert!((g.value(out).at(i, j) - o).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_map_matches_hand_oracle() {
    let c = EncoderConfig {
        hidden_dim: 2,
        num_heads: 1,
        text_layers: 1,
        cross_layers: 1,
        max_text_len: 3,
        patch_side: 1,
        vocab_size: 6,
        ..small_config()
    };
    let (model, mut params) = build(&c, 4);
    let wq = vec![0.8, 0.1, -0.4, 0.6];
    let wk = vec![0.3, -0.7, 1.2, 0.2];
    let bk = vec![0.1, 0.3];
    set(&mut params, "cross.layers.0.cross_attn.query.weight", wq.clone());
    set(&mut params, "cross.layers.0.cross_attn.key.weight", wk.clone());
    set(&mut params, "cross.layers.0.cross_attn.key.bias", bk.clone());
    zero(&mut params, "cross.layers.0.cross_attn.query.bias");
    // no self-attention contribution: text rows reach the cross block unchanged
    zero(&mut params, "cross.layers.0.self_attn.output.weight");
    zero(&mut params, "cross.layers.0.self_attn.output.bias");

    let mut g = Graph::new(&params, false);
    let text_rows = vec![vec![0.4, -0.9], vec![1.3, 0.2]];
    let image_rows = vec![vec![-0.5, 0.7], vec![0.9, 0.1]];
    let text = TextEmbedding {
        tokens: g.tape.constant(Tensor::from_rows(&text_rows).unwrap()),
        pad_mask: vec![false, false],
    };
    let image = ImageEmbedding {
        tokens: g.tape.constant(Tensor::from_rows(&image_rows).unwrap()),
    };
    let (_, maps) = model.cross_encode(&mut g, &text, &image).unwrap();
    let map = &maps.layers[0][0];
    assert_eq!(map.shape(), &[2, 2]);
    for (i, t) in text_rows.iter().enumerate() {
        let q = affine(&layer_norm(t), &wq, &[0.0, 0.0]);
        let s: Vec<f64> = image_rows
            .iter()
            .map(|v| dot(&q, &affine(v, &wk, &bk)) / 2f64.sqrt())
            .collect();
        let want = softmax(&s);
        for j in 0..2 {
            assert!((map.at(i, j) - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_keys_give_uniform_cross_attention() {
    let c = small_config();
    let (model, params) = build(&c, 5);
    let mut g = Graph::new(&params, false);
    let (text, _) = model.encode_text(&mut g, &[special::CLS, 6, 7, special::SEP], None).unwrap();
    let m1 = c.num_patches() + 1;
    let rows = vec![vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.9, -0.4, 0.2]; m1];
    let image = ImageEmbedding {
        tokens: g.tape.constant(Tensor::from_rows(&rows).unwrap()),
    };
    let (_, maps) = model.cross_encode(&mut g, &text, &image).unwrap();
    for head in &maps.layers[0] {
        for &w in head.data() {
            assert!((w - 1.0 / m1 as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_image_values_remove_the_cross_contribution() {
    let c = small_config();
    let (model, mut params) = build(&c, 6);
    zero(&mut params, "cross.layers.0.cross_attn.value.bias");
    let run = |params: &ParamStore| {
        let mut g = Graph::new(params, false);
        let (text, _) = model.encode_text(&mut g, &[special::CLS, 8, 9, special::SEP], None).unwrap();
        let image = ImageEmbedding {
            tokens: g.tape.constant(Tensor::zeros(&[c.num_patches() + 1, c.hidden_dim])),
        };
        let (h, _) = model.cross_encode(&mut g, &text, &image).unwrap();
        g.value(h.hidden).clone()
    };
    let before = run(&params);
    // reshaping the attention weights must not matter when V = 0
    set(&mut params, "cross.layers.0.cross_attn.key.bias", (0..c.hidden_dim).map(|i| i as f64).collect());
    set(&mut params, "cross.layers.0.cross_attn.query.bias", vec![2.0; c.hidden_dim]);
    assert_eq!(before, run(&params));
}

#[test]
fn zero_patches_with_zero_projection_give_equal_rows() {
    let c = small_config();
    let (model, mut params) = build(&c, 7);
    zero(&mut params, "image.patch_proj.weight");
    zero(&mut params, "image.patch_proj.bias");
    let mut g = Graph::new(&params, false);
    let x = model
        .embed_patches(&mut g, &Tensor::zeros(&[c.num_patches(), c.patch_dim]))
        .unwrap();
    let x = g.value(x);
    for r in 1..x.rows() {
        assert_eq!(x.row(r), x.row(0));
    }
}

#[test]
fn permuting_patches_changes_the_image_embedding() {
    let c = small_config();
    let (model, params) = build(&c, 8);
    let p = patches(&c, 1);
    let mut swapped = p.clone();
    let d = c.patch_dim;
    for j in 0..d {
        swapped.data_mut().swap(j, d + j);
    }
    let mut g = Graph::new(&params, false);
    let a = model.encode_image(&mut g, &p).unwrap();
    let b = model.encode_image(&mut g, &swapped).unwrap();
    assert!(g.value(a.tokens).max_abs_diff(g.value(b.tokens)) > 1e-6);
}

#[test]
fn image_encoding_is_deterministic() {
    let c = small_config();
    let p = patches(&c, 2);
    let out = || {
        let (model, params) = build(&c, 9);
        let mut g = Graph::new(&params, false);
        let e = model.encode_image(&mut g, &p).unwrap();
        g.value(e.tokens).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(out(), out());
}

#[test]
fn zero_hidden_state_gives_uniform_mlm_distribution() {
    let c = small_config();
    let (model, params) = build(&c, 10);
    let mut g = Graph::new(&params, false);
    let hidden = CrossHidden {
        hidden: g.tape.constant(Tensor::zeros(&[5, c.hidden_dim])),
        pad_mask: vec![false; 5],
    };
    let logits = model.mlm_head(&mut g, &hidden, &[1, 3]).unwrap();
    let l = g.value(logits);
    assert_eq!(l.shape(), &[2, VOCAB]);
    for r in 0..2 {
        let p = softmax(l.row(r));
        assert!(p.iter().all(|&x| (x - 1.0 / VOCAB as f64).abs() < 1e-12));
    }
    assert!(matches!(model.mlm_head(&mut g, &hidden, &[0]), Err(Error::Contract(_))));
    assert!(matches!(model.mlm_head(&mut g, &hidden, &[5]), Err(Error::Contract(_))));
}

#[test]
fn tied_mlm_logit_grows_with_the_word_embedding() {
    let c = small_config();
    let (model, mut params) = build(&c, 11);
    let w = 7;
    let id = params.id("text.token_embedding").unwrap();
    let row: Vec<f64> = params.get(id).row(w).to_vec();
    let norm = dot(&row, &row).sqrt();
    let direction: Vec<f64> = row.iter().map(|v| v / norm).collect();
    let logit_at = |params: &ParamStore| {
        let mut g = Graph::new(params, false);
        let mut h = vec![0.0; c.hidden_dim];
        h.extend(&direction);
        let hidden = CrossHidden {
            hidden: g.tape.constant(Tensor::matrix(2, c.hidden_dim, h).unwrap()),
            pad_mask: vec![false; 2],
        };
        let logits = model.mlm_head(&mut g, &hidden, &[1]).unwrap();
        g.value(logits).at(0, w)
    };
    let mut last = logit_at(&params);
    for scale in [1.5, 2.0, 3.0] {
        let t = params.get_mut(id);
        let cols = t.cols();
        for j in 0..cols {
            t.data_mut()[w * cols + j] = row[j] * scale;
        }
        let now = logit_at(&params);
        assert!(now > last, "{now} <= {last}");
        assert!((now - scale * norm).abs() < 1e-9);
        last = now;
    }
}

#[test]
fn encoder_errors_are_categorized() {
    let c = small_config();
    let (model, params) = build(&c, 12);
    let mut g = Graph::new(&params, false);
    let long = vec![special::CLS; c.max_text_len + 1];
    assert!(matches!(model.encode_text(&mut g, &long, None), Err(Error::Length { .. })));
    assert!(matches!(
        model.encode_text(&mut g, &[special::CLS, VOCAB], None),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(model.encode_text(&mut g, &[5, 6], None), Err(Error::Contract(_))));
    assert!(matches!(
        model.encode_image(&mut g, &Tensor::zeros(&[c.num_patches() + 1, c.patch_dim])),
        Err(Error::Shape { .. })
    ));
    let mut bad = c.clone();
    bad.num_heads = 3;
    assert!(matches!(Model::init(&bad, &mut rng::stream(0, rng::INIT)), Err(Error::Config { .. })));
}

fn encode_without_positions(model: &Model, params: &ParamStore, ids: &[usize]) -> Tensor {
    let mut g = Graph::new(params, false);
    let (t, _) = model.encode_text(&mut g, ids, None).unwrap();
    g.value(t.tokens).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn content_permutation_is_covariant_without_positions(
        words in prop::collection::vec(special::COUNT..VOCAB, 2..6),
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let c = small_config();
        let (model, mut params) = build(&c, seed);
        zero(&mut params, "text.position_embedding");
        let mut ids = vec![special::CLS];
        ids.extend(&words);
        let mut order: Vec<usize> = (0..words.len()).collect();
        order.shuffle(&mut rng::stream(perm_seed, "perm"));
        let mut permuted = vec![special::CLS];
        permuted.extend(order.iter().map(|&k| words[k]));

        let a = encode_without_positions(&model, &params, &ids);
        let b = encode_without_positions(&model, &params, &permuted);
        for j in 0..c.hidden_dim {
            prop_assert!((a.at(0, j) - b.at(0, j)).abs() < 1e-9);
        }
        for (new, &old) in order.iter().enumerate() {
            for j in 0..c.hidden_dim {
                prop_assert!((b.at(new + 1, j) - a.at(old + 1, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_maps_are_distributions(seed in 0u64..1000, len in 2usize..8) {
        let c = small_config();
        let (model, params) = build(&c, seed);
        let mut ids = vec![special::CLS];
        ids.extend((1..len).map(|k| special::COUNT + (k * 7 + seed as usize) % (VOCAB - special::COUNT)));
        let mut g = Graph::new(&params, false);
        let (text, _) = model.encode_text(&mut g, &ids, None).unwrap();
        let image = model.encode_image(&mut g, &patches(&c, seed)).unwrap();
        let (_, maps) = model.cross_encode(&mut g, &text, &image).unwrap();
        for layer in &maps.layers {
            for head in layer {
                prop_assert_eq!(head.shape(), &[len, c.num_patches() + 1][..]);
                for r in 0..head.rows() {
                    prop_assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
