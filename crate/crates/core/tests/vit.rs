//! Vision Transformer forward semantics, gradients and parameter layout.

mod common;

use common::{check, random, rng, TOLERANCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitforge_core::data::ImageShape;
use vitforge_core::tensor::{Graph, ParamStore, Tensor, Var};
use vitforge_core::vit::{count_parameters, patchify, unpatchify, Mode, ViTConfig, VisionTransformer};

fn no_dropout(cfg: ViTConfig) -> ViTConfig {
    ViTConfig { dropout_rate: 0.0, head_dropout_rate: 0.0, ..cfg }
}

/// 12×12×1 images, 6×6 patches, width 8, 2 layers of 2 heads, head [16, 8].
fn miniature() -> ViTConfig {
    no_dropout(ViTConfig {
        image: ImageShape::new(12, 12, 1),
        patch_size: 6,
        projection_dim: 8,
        num_layers: 2,
        num_heads: 2,
        encoder_mlp_dims: vec![16, 8],
        head_dims: vec![16, 8],
        num_classes: 3,
        ..ViTConfig::default()
    })
}

/// One layer over 3 tokens of width `d`: a 1×3 single-channel image cut
/// into 1×1 patches.
fn three_tokens(d: usize, heads: usize) -> ViTConfig {
    no_dropout(ViTConfig {
        image: ImageShape::new(1, 3, 1),
        patch_size: 1,
        projection_dim: d,
        num_layers: 1,
        num_heads: heads,
        encoder_mlp_dims: vec![6, d],
        head_dims: vec![5],
        num_classes: 2,
        ..ViTConfig::default()
    })
}

/// Same layout as a fresh init but every value drawn from U(-1, 1), so
/// gradients are well away from zero.
fn randomized(cfg: &ViTConfig, seed: u64) -> (VisionTransformer, Vec<Tensor<f64>>) {
    let (model, store) = VisionTransformer::init::<f64>(cfg, seed).unwrap();
    let mut r = rng(seed);
    let tensors = store.iter().map(|(_, t)| random(t.shape(), &mut r)).collect();
    (model, tensors)
}

fn store_from(cfg: &ViTConfig, tensors: &[Tensor<f64>]) -> ParamStore<f64> {
    let (_, mut store) = VisionTransformer::init::<f64>(cfg, 0).unwrap();
    for (dst, src) in store.tensors_mut().zip(tensors) {
        dst.data_mut().copy_from_slice(src.data());
    }
    store
}

fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn id_of(store: &ParamStore<f64>, name: &str) -> usize {
    store.find(name).unwrap().0
}

#[test]
fn miniature_vit_gradients_match_finite_differences() {
    let cfg = miniature();
    let (model, inputs) = randomized(&cfg, 11);
    let images = Tensor::from_fn(&[2, 12, 12, 1], |i| ((i * 37) % 101) as f64 / 100.0);
    let err = check(&inputs, 12, |g, v| model.forward(g, v, &images, Mode::Eval, &mut eval_rng()).unwrap());
    assert!(err < TOLERANCE, "full ViT: {err:e}");
}

#[test]
fn position_table_gradient() {
    let cfg = miniature();
    let (model, params) = randomized(&cfg, 13);
    let store = store_from(&cfg, &params);
    let pos = id_of(&store, "position");
    let patches = patchify(&Tensor::from_fn(&[3, 12, 12, 1], |i| (i as f64 * 0.1).cos()), 6).unwrap();
    let err = check(&[params[pos].clone()], 14, |g, v| {
        let mut bound: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        bound[pos] = v[0];
        let x = g.leaf(patches.clone());
        model.embed(g, &bound, x).unwrap()
    });
    assert!(err < TOLERANCE, "position table: {err:e}");
}

#[test]
fn encoder_layer_gradient_n3_d4() {
    let cfg = three_tokens(4, 2);
    let (model, mut inputs) = randomized(&cfg, 15);
    let n_params = inputs.len();
    inputs.push(random(&[2, 3, 4], &mut rng(16)));
    let err = check(&inputs, 17, |g, v| model.encoder_layer(g, &v[..n_params], 0, v[n_params], Mode::Eval, &mut eval_rng(), None).unwrap());
    assert!(err < TOLERANCE, "encoder layer: {err:e}");
}

fn matvec_rows(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..o).map(|c| b.data()[c] + (0..i).map(|k| row[k] * w.data()[k * o + c]).sum::<f64>()).collect())
        .collect()
}

/// softmax(QKᵀ/√d)·V followed by the output projection, written out with
/// nested loops.
fn attention_direct(x: &[Vec<f64>], store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    let get = |n: &str| store.get(store.find(n).unwrap());
    let proj = |p: &str| matvec_rows(x, get(&format!("layer0.attn.{p}.weight")), get(&format!("layer0.attn.{p}.bias")));
    let (q, k, v) = (proj("query"), proj("key"), proj("value"));
    let n = x.len();
    let d = x[0].len() as f64;
    let mut ctx = vec![vec![0.0; x[0].len()]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        for j in 0..n {
            for (c, out) in ctx[i].iter_mut().enumerate() {
                *out += exp[j] / z * v[j][c];
            }
        }
    }
    matvec_rows(&ctx, get("layer0.attn.out.weight"), get("layer0.attn.out.bias"))
}

#[test]
fn single_head_attention_matches_direct_formula() {
    let cfg = three_tokens(4, 1);
    let (model, params) = randomized(&cfg, 19);
    let store = store_from(&cfg, &params);
    let x = random(&[1, 3, 4], &mut rng(20));
    let g = Graph::new();
    let bound = store.bind(&g);
    let xv = g.leaf(x.clone());
    let (out, _) = model.attention(&g, &bound, 0, xv).unwrap();
    let rows: Vec<Vec<f64>> = x.data().chunks(4).map(<[f64]>::to_vec).collect();
    let expected: Vec<f64> = attention_direct(&rows, &store).concat();
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    let mut inputs = params.clone();
    let n_params = inputs.len();
    inputs.push(x);
    let err = check(&inputs, 21, |g, v| model.attention(g, &v[..n_params], 0, v[n_params]).unwrap().0);
    assert!(err < TOLERANCE, "attention: {err:e}");
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = no_dropout(ViTConfig { image: ImageShape::new(1, 1, 1), ..three_tokens(4, 2) });
    let (model, params) = randomized(&cfg, 22);
    let store = store_from(&cfg, &params);
    let x = random(&[2, 1, 4], &mut rng(23));
    let g = Graph::new();
    let bound = store.bind(&g);
    let (out, probs) = model.attention(&g, &bound, 0, g.leaf(x.clone())).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| (p - 1.0).abs() < 1e-15));
    let get = |n: &str| store.get(store.find(n).unwrap());
    let rows: Vec<Vec<f64>> = x.data().chunks(4).map(<[f64]>::to_vec).collect();
    let v = matvec_rows(&rows, get("layer0.attn.value.weight"), get("layer0.attn.value.bias"));
    let expected = matvec_rows(&v, get("layer0.attn.out.weight"), get("layer0.attn.out.bias")).concat();
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_query_and_key_give_uniform_attention() {
    let cfg = three_tokens(4, 2);
    let (model, params) = randomized(&cfg, 24);
    let mut store = store_from(&cfg, &params);
    for name in ["query.weight", "query.bias", "key.weight", "key.bias"] {
        let id = store.find(&format!("layer0.attn.{name}")).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&[1, 3, 4], &mut rng(25));
    let g = Graph::new();
    let bound = store.bind(&g);
    let (out, probs) = model.attention(&g, &bound, 0, g.leaf(x.clone())).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let get = |n: &str| store.get(store.find(n).unwrap());
    let rows: Vec<Vec<f64>> = x.data().chunks(4).map(<[f64]>::to_vec).collect();
    let v = matvec_rows(&rows, get("layer0.attn.value.weight"), get("layer0.attn.value.bias"));
    let mean: Vec<f64> = (0..4).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / 3.0).collect();
    let expected = matvec_rows(&vec![mean; 3], get("layer0.attn.out.weight"), get("layer0.attn.out.bias")).concat();
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zeroed_residual_branches_are_identity() {
    let cfg = three_tokens(4, 2);
    let (model, params) = randomized(&cfg, 26);
    let mut store = store_from(&cfg, &params);
    for name in ["layer0.attn.out.weight", "layer0.attn.out.bias", "layer0.mlp1.weight", "layer0.mlp1.bias"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&[2, 3, 4], &mut rng(27));
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = model.encoder_layer(&g, &bound, 0, g.leaf(x.clone()), Mode::Eval, &mut eval_rng(), None).unwrap();
    assert_eq!(g.value(out), x);
}

#[test]
fn embed_zero_and_position_difference() {
    let cfg = miniature();
    let (model, params) = randomized(&cfg, 28);
    let mut store = store_from(&cfg, &params);
    // four identical patches
    let patches = Tensor::from_fn(&[1, 4, 36], |i| ((i % 36) as f64 * 0.3).sin());
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = g.value(model.embed(&g, &bound, g.leaf(patches.clone())).unwrap());
    let pos = store.get(store.find("position").unwrap());
    for n in 1..4 {
        for c in 0..8 {
            let diff = out.data()[n * 8 + c] - out.data()[c];
            let expected = pos.data()[n * 8 + c] - pos.data()[c];
            assert!((diff - expected).abs() < 1e-12);
        }
    }
    drop(g);
    for name in ["patch.weight", "patch.bias", "position"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = g.value(model.embed(&g, &bound, g.leaf(patches)).unwrap());
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_are_distributions_at_every_layer() {
    let cfg = miniature();
    let (model, params) = randomized(&cfg, 29);
    let store = store_from(&cfg, &params);
    let images = random(&[3, 12, 12, 1], &mut rng(30));
    let g = Graph::new();
    let bound = store.bind(&g);
    let (logits, trace) = model.forward_traced(&g, &bound, &images, Mode::Eval, &mut eval_rng()).unwrap();
    assert_eq!(trace.attention.len(), 2);
    for &a in &trace.attention {
        let probs = g.value(a);
        assert_eq!(probs.shape(), &[3, 2, 4, 4]);
        for row in probs.data().chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let probs = g.value(g.softmax(logits, 1).unwrap());
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = miniature();
    let (model, params) = randomized(&cfg, 31);
    let mut store = store_from(&cfg, &params);
    let pos = store.find("position").unwrap();
    store.get_mut(pos).data_mut().fill(0.0);
    let patches = random(&[2, 4, 36], &mut rng(32));
    let order = [2usize, 0, 3, 1];
    let mut permuted = Vec::new();
    for b in 0..2 {
        for &n in &order {
            permuted.extend_from_slice(&patches.data()[(b * 4 + n) * 36..(b * 4 + n + 1) * 36]);
        }
    }
    let permuted = Tensor::new(&[2, 4, 36], permuted).unwrap();
    let pooled = |p: &Tensor<f64>| {
        let g = Graph::new();
        let bound = store.bind(&g);
        let tokens = model.embed(&g, &bound, g.leaf(p.clone())).unwrap();
        let encoded = model.encode(&g, &bound, tokens, Mode::Eval, &mut eval_rng(), None).unwrap();
        g.value(g.mean(encoded, 1).unwrap())
    };
    let (a, b) = (pooled(&patches), pooled(&permuted));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn reference_config_produces_four_logits() {
    let cfg = ViTConfig::default();
    let (model, store) = VisionTransformer::init::<f32>(&cfg, 1).unwrap();
    let images = Tensor::from_fn(&[2, 72, 72, 3], |i| (i % 255) as f32 / 255.0);
    let run = || {
        let g = Graph::new();
        let bound = store.bind(&g);
        let logits = model.forward(&g, &bound, &images, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        g.value(logits)
    };
    let a = run();
    assert_eq!(a.shape(), &[2, 4]);
    assert!(a.all_finite());
    assert_eq!(a, run());
}

/// Scalars in the reference configuration, from the layer shapes:
/// patch projection 108·64+64, positions 144·64, eight layers of
/// (two norms 2·128, four 64×64 projections, MLP 64→128→64), final norm,
/// head 9216→2042→1048→4.
#[test]
fn reference_parameter_count() {
    let patch = 108 * 64 + 64;
    let position = 144 * 64;
    let layer = 2 * 2 * 64 + 4 * (64 * 64 + 64) + (64 * 128 + 128) + (128 * 64 + 64);
    let head = (144 * 64 * 2042 + 2042) + (2042 * 1048 + 1048);
    let output = 1048 * 4 + 4;
    let expected = patch + position + 8 * layer + 2 * 64 + head + output;
    assert_eq!(expected, 21_250_470);
    let count = count_parameters(&ViTConfig::default()).unwrap();
    assert_eq!(count.total, expected);
    assert_eq!(count.encoder, 8 * layer);
    assert_eq!(count.head, head);
}

#[test]
fn zero_layer_count_and_layer_linearity() {
    let zero = ViTConfig { num_layers: 0, ..miniature() };
    let c = count_parameters(&zero).unwrap();
    let (patch, position, final_norm) = (36 * 8 + 8, 4 * 8, 16);
    let head = (32 * 16 + 16) + (16 * 8 + 8) + (8 * 3 + 3);
    assert_eq!(c.encoder, 0);
    assert_eq!(c.total, patch + position + final_norm + head);

    let two = count_parameters(&miniature()).unwrap();
    let four = count_parameters(&ViTConfig { num_layers: 4, ..miniature() }).unwrap();
    assert_eq!(four.encoder, 2 * two.encoder);
    assert_eq!(four.total - two.total, two.encoder);
}

#[test]
fn patch_count_over_all_divisor_grids() {
    for h in 1..=64usize {
        for w in 1..=64usize {
            for p in (1..=h.min(w)).filter(|p| h % p == 0 && w % p == 0) {
                let cfg = ViTConfig { image: ImageShape::new(h, w, 1), patch_size: p, ..miniature() };
                assert_eq!(cfg.num_patches() * p * p, h * w);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_shape_and_round_trip(gh in 1usize..5, gw in 1usize..5, p in 1usize..6, c in 1usize..4, b in 1usize..3, seed in any::<u64>()) {
        let (h, w) = (gh * p, gw * p);
        let images = random(&[b, h, w, c], &mut rng(seed));
        let patches = patchify(&images, p).unwrap();
        prop_assert_eq!(patches.shape(), &[b, h * w / (p * p), p * p * c]);
        prop_assert_eq!(unpatchify(&patches, h, w, c, p).unwrap(), images);
    }

    #[test]
    fn encoder_layer_preserves_shape(b in 1usize..3, heads in 1usize..3, mult in 1usize..4, seed in any::<u64>()) {
        let d = heads * mult * 2;
        let cfg = three_tokens(d, heads);
        let (model, store) = VisionTransformer::init::<f64>(&cfg, seed).unwrap();
        let g = Graph::new();
        let bound = store.bind(&g);
        let x = g.leaf(random(&[b, 3, d], &mut rng(seed)));
        let out = model.encoder_layer(&g, &bound, 0, x, Mode::Train, &mut rng(seed), None).unwrap();
        prop_assert_eq!(g.shape(out), vec![b, 3, d]);
    }
}
