use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::base_linear;
use crate::gradcheck::check_model;
use crate::tensor::{Graph, Tensor};

type Rows = Vec<Vec<f64>>;

fn random_inputs(cfg: &QFormerConfig, n_img: usize, n_text: usize, seed: u64) -> ModelInputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = (0..n_img * cfg.image_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let text = (0..n_text).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    ModelInputs::new(n_img, cfg.image_dim, feats, text).unwrap()
}

/// Adds noise to every tensor so biases and norm affines are nontrivial.
fn jitter(model: &mut QFormer<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.keyed_params_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn rows_of(t: &Tensor<f64>) -> Rows {
    let (m, n) = t.dims2().unwrap();
    (0..m).map(|i| (0..n).map(|j| t.at(i, j)).collect()).collect()
}

// Straight-line reference implementation over nested Vecs.

fn p<'a>(m: &'a QFormer<f64>, name: &str) -> &'a Tensor<f64> {
    &m.param_by_name(name).unwrap_or_else(|| panic!("missing {name}")).tensor
}

fn linear(x: &Rows, w: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    let (out, inp) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| b.data()[o] + (0..inp).map(|i| row[i] * w.at(o, i)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Rows, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

fn ref_attention(m: &QFormer<f64>, prefix: &str, xq: &Rows, xkv: &Rows, heads: usize) -> Rows {
    let q = linear(xq, p(m, &format!("{prefix}.q.weight")), p(m, &format!("{prefix}.q.bias")));
    let k = linear(xkv, p(m, &format!("{prefix}.k.weight")), p(m, &format!("{prefix}.k.bias")));
    let v = linear(xkv, p(m, &format!("{prefix}.v.weight")), p(m, &format!("{prefix}.v.bias")));
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                merged[i][c] = exps.iter().zip(&v).map(|(e, vj)| e / z * vj[c]).sum();
            }
        }
    }
    linear(&merged, p(m, &format!("{prefix}.o.weight")), p(m, &format!("{prefix}.o.bias")))
}

fn reference_forward(m: &QFormer<f64>, inputs: &ModelInputs<f64>) -> Rows {
    let cfg = m.config();
    let eps = cfg.layer_norm_eps;
    let nq = cfg.num_queries;
    let mut x = rows_of(p(m, "query_embeddings"));
    let words = rows_of(p(m, "text.word_embeddings"));
    let pos = rows_of(p(m, "text.position_embeddings"));
    for (t, &id) in inputs.text_ids().iter().enumerate() {
        x.push(words[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect());
    }
    x = norm(&x, p(m, "embeddings.norm.gamma"), p(m, "embeddings.norm.beta"), eps);
    let image = rows_of(inputs.image_features());
    for l in 1..=cfg.num_layers {
        let pre = format!("L{l:02}");
        let sa = ref_attention(m, &format!("{pre}.self_attn"), &x, &x, cfg.num_heads);
        x = norm(
            &add(&x, &sa),
            p(m, &format!("{pre}.self_attn.norm.gamma")),
            p(m, &format!("{pre}.self_attn.norm.beta")),
            eps,
        );
        if cfg.has_cross_attention(l) {
            let qpart: Rows = x[..nq].to_vec();
            let ca = ref_attention(m, &format!("{pre}.cross_attn"), &qpart, &image, cfg.num_heads);
            let qpart = norm(
                &add(&qpart, &ca),
                p(m, &format!("{pre}.cross_attn.norm.gamma")),
                p(m, &format!("{pre}.cross_attn.norm.beta")),
                eps,
            );
            x.splice(..nq, qpart);
        }
        let mut h = linear(&x, p(m, &format!("{pre}.ffn.up.weight")), p(m, &format!("{pre}.ffn.up.bias")));
        for row in &mut h {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let h = linear(&h, p(m, &format!("{pre}.ffn.down.weight")), p(m, &format!("{pre}.ffn.down.bias")));
        x = norm(
            &add(&x, &h),
            p(m, &format!("{pre}.ffn.norm.gamma")),
            p(m, &format!("{pre}.ffn.norm.beta")),
            eps,
        );
    }
    x.truncate(nq);
    x
}

fn query_outputs(m: &QFormer<f64>, inputs: &ModelInputs<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let out = m.forward(&mut g, inputs, None).unwrap();
    g.tensor(out.queries)
}

#[test]
fn enumeration_counts() {
    let cfg = QFormerConfig::default();
    let count = |preset: &str| enumerate_target_matrices(&cfg, &AdapterTargetSpec::preset(preset).unwrap()).len();
    assert_eq!(count("all"), 12 * 2 + 6 * 4 + 12 * 2);
    assert_eq!(count("self-attn"), 24);
    assert_eq!(count("ffn"), 24);
    assert_eq!(count("cross-attn"), 24);

    let two = QFormerConfig::tiny(2, 16, 2).with_cross_attention([1]);
    let cross = enumerate_target_matrices(&two, &AdapterTargetSpec::preset("cross-attn").unwrap());
    assert_eq!(cross.len(), 4);
    assert!(cross.iter().all(|a| a.layer() == 1));

    let none = QFormerConfig::tiny(2, 16, 2).with_cross_attention([]);
    assert!(enumerate_target_matrices(&none, &AdapterTargetSpec::preset("cross-attn").unwrap()).is_empty());

    let all = enumerate_target_matrices(&cfg, &AdapterTargetSpec::all());
    assert!(all.windows(2).all(|w| w[0].layer() <= w[1].layer()));
}

#[test]
fn ffn_matrix_choice() {
    let cfg = QFormerConfig::tiny(3, 8, 2);
    let spec = AdapterTargetSpec::preset("ffn").unwrap().with_ffn_matrices(FfnMatrices::Up);
    let got = enumerate_target_matrices(&cfg, &spec);
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|a| a.matrix() == Matrix::Up));
}

#[test]
fn cross_address_on_even_layer_rejected() {
    let cfg = QFormerConfig::default();
    assert!(SublayerAddress::new(&cfg, 2, SublayerGroup::CrossAttn, Matrix::K).is_err());
    assert!(SublayerAddress::new(&cfg, 3, SublayerGroup::CrossAttn, Matrix::K).is_ok());
}

#[test]
fn query_output_shape() {
    let cfg = QFormerConfig::tiny(2, 16, 2).with_cross_attention([1]);
    let m = QFormer::<f64>::new(cfg.clone(), 1).unwrap();
    let out = query_outputs(&m, &random_inputs(&cfg, 5, 3, 2));
    assert_eq!(out.shape(), &[4, 16]);
    let out = query_outputs(&m, &random_inputs(&cfg, 1, 0, 3));
    assert_eq!(out.shape(), &[4, 16]);
}

#[test]
fn invalid_inputs_rejected() {
    let cfg = QFormerConfig::tiny(1, 8, 2);
    let m = QFormer::<f64>::new(cfg.clone(), 1).unwrap();
    assert!(matches!(
        ModelInputs::<f64>::new(0, cfg.image_dim, vec![], vec![]),
        Err(Error::Input(_))
    ));
    let mut g = Graph::new();
    let long = random_inputs(&cfg, 2, cfg.max_text_len + 1, 0);
    assert!(matches!(m.forward(&mut g, &long, None), Err(Error::Input(_))));
    let oov = ModelInputs::new(1, cfg.image_dim, vec![0.0; cfg.image_dim], vec![cfg.vocab_size]).unwrap();
    assert!(matches!(m.forward(&mut g, &oov, None), Err(Error::Input(_))));
}

#[test]
fn residual_path_isolation() {
    let cfg = QFormerConfig::tiny(1, 8, 2);
    let mut m = QFormer::<f64>::new(cfg.clone(), 4).unwrap();
    jitter(&mut m, 5);
    for name in [
        "L01.self_attn.o.weight",
        "L01.self_attn.o.bias",
        "L01.cross_attn.o.weight",
        "L01.cross_attn.o.bias",
        "L01.ffn.down.weight",
        "L01.ffn.down.bias",
    ] {
        for v in m.param_by_name_mut(name).unwrap().tensor.data_mut() {
            *v = 0.0;
        }
    }
    let inputs = random_inputs(&cfg, 3, 0, 6);
    let eps = cfg.layer_norm_eps;
    let mut expected = rows_of(p(&m, "query_embeddings"));
    for pre in ["embeddings", "L01.self_attn", "L01.cross_attn", "L01.ffn"] {
        expected = norm(
            &expected,
            p(&m, &format!("{pre}.norm.gamma")),
            p(&m, &format!("{pre}.norm.beta")),
            eps,
        );
    }
    let got = rows_of(&query_outputs(&m, &inputs));
    for (a, b) in got.iter().flatten().zip(expected.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn matches_reference_implementation() {
    let mut cfg = QFormerConfig::tiny(2, 8, 2).with_cross_attention([1]);
    cfg.image_dim = 6;
    cfg.ffn_dim = 12;
    let mut m = QFormer::<f64>::new(cfg.clone(), 7).unwrap();
    jitter(&mut m, 8);
    for (n_img, n_text, seed) in [(3, 4, 9), (1, 0, 10), (5, 8, 11)] {
        let inputs = random_inputs(&cfg, n_img, n_text, seed);
        let got = query_outputs(&m, &inputs);
        let want = reference_forward(&m, &inputs);
        let diff = got
            .data()
            .iter()
            .zip(want.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = QFormerConfig::tiny(2, 8, 2);
    let a = QFormer::<f64>::new(cfg.clone(), 3).unwrap();
    let b = QFormer::<f64>::new(cfg.clone(), 3).unwrap();
    let x = random_inputs(&cfg, 2, 3, 1);
    assert_eq!(query_outputs(&a, &x).data(), query_outputs(&b, &x).data());
}

fn single_head_attention(keys: &Tensor<f64>, wv: &Tensor<f64>, wo: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let q = g.constant(&Tensor::from_rows(&[&[0.3, -0.7], &[1.1, 0.2]]));
    let kv = g.constant(keys);
    let wq = g.constant(&Tensor::from_rows(&[&[0.5, 0.1], &[-0.2, 0.4]]));
    let wk = g.constant(&Tensor::from_rows(&[&[0.9, -0.3], &[0.2, 0.6]]));
    let wv = g.constant(wv);
    let wo = g.constant(wo);
    let zero = g.constant(&Tensor::zeros(&[2]));
    let out = attention(&mut g, q, kv, 1, |g, m, x| {
        let w = match m {
            Matrix::Q => wq,
            Matrix::K => wk,
            Matrix::V => wv,
            _ => wo,
        };
        base_linear(g, x, w, zero)
    })
    .unwrap();
    g.tensor(out)
}

#[test]
fn attention_single_and_duplicate_keys() {
    let wv = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]);
    let wo = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 1.0]]);
    let key = [0.4, -0.8];
    // v = Wv·key = [-1.2, 1.0]; o = Wo·v = [1.0, -0.2]
    let single = single_head_attention(&Tensor::from_rows(&[&key]), &wv, &wo);
    for r in 0..2 {
        assert!((single.at(r, 0) - 1.0).abs() < 1e-15);
        assert!((single.at(r, 1) + 0.2).abs() < 1e-15);
    }
    let double = single_head_attention(&Tensor::from_rows(&[&key, &key]), &wv, &wo);
    assert!(double.max_abs_diff(&single) < 1e-15);
}

#[test]
fn attention_head_mismatch_is_shape_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::zeros(&[2, 6]));
    let r = attention(&mut g, x, x, 4, |_, _, h| Ok(h));
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn permuting_image_rows() {
    let cfg = QFormerConfig::tiny(2, 8, 2);
    let mut m = QFormer::<f64>::new(cfg.clone(), 12).unwrap();
    jitter(&mut m, 13);
    let x = random_inputs(&cfg, 4, 2, 14);
    let rows = rows_of(x.image_features());
    let permuted: Vec<f64> = [2, 0, 3, 1].iter().flat_map(|&i| rows[i].clone()).collect();
    let y = ModelInputs::new(4, cfg.image_dim, permuted, x.text_ids().to_vec()).unwrap();
    assert!(query_outputs(&m, &x).max_abs_diff(&query_outputs(&m, &y)) < 1e-13);

    let same: Vec<f64> = (0..3).flat_map(|_| rows[0].clone()).collect();
    let a = ModelInputs::new(3, cfg.image_dim, same.clone(), vec![1]).unwrap();
    let single = ModelInputs::new(1, cfg.image_dim, rows[0].clone(), vec![1]).unwrap();
    assert!(query_outputs(&m, &a).max_abs_diff(&query_outputs(&m, &single)) < 1e-13);
}

#[test]
fn head_behaviour() {
    let mut cfg = QFormerConfig::tiny(1, 8, 2);
    cfg.num_queries = 1;
    let mut m = QFormer::<f64>::new(cfg.clone(), 15).unwrap();
    let x = random_inputs(&cfg, 2, 1, 16);

    let mut g = Graph::new();
    let q = m.forward(&mut g, &x, None).unwrap().queries;
    let logits = m.classification_head(&mut g, q).unwrap();
    let qv = g.tensor(q);
    let w = &m.head_params()[0].tensor;
    for c in 0..cfg.num_classes {
        let want: f64 = (0..8).map(|j| qv.at(0, j) * w.at(c, j)).sum();
        assert!((g.value(logits)[c] - want).abs() < 1e-15);
    }

    for (_, p) in m.keyed_params_mut().filter(|(k, _)| matches!(k, crate::params::ParamKey::Head(_))) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let logits = m.logits(&mut g, &x, None).unwrap();
    assert!(g.value(logits).iter().all(|&v| v == 0.0));
}

#[test]
fn end_to_end_gradcheck() {
    let mut cfg = QFormerConfig::tiny(2, 8, 2);
    cfg.vocab_size = 6;
    cfg.max_text_len = 3;
    cfg.image_dim = 5;
    cfg.init_std = 0.5;
    let mut m = QFormer::<f64>::new(cfg.clone(), 17).unwrap();
    jitter(&mut m, 18);
    let batch = vec![
        (random_inputs(&cfg, 3, 2, 19), 1),
        (random_inputs(&cfg, 2, 3, 20), 3),
    ];
    let report = check_model(&m, None, &batch, 0.0).unwrap();
    assert_eq!(report.params.len(), m.keyed_params().count());
    let worst = report.worst().unwrap();
    assert!(report.passed(), "{} rel err {}", worst.name, worst.max_rel_err);
}
