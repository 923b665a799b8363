//! Encoder forward pieces: embedding, one post-LN layer, task heads.

use crate::config::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{BoundLayer, BoundModel};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Token embedding plus learned positional embedding, then layer norm.
/// `ids` is `b * n` row-major token ids.
pub fn embed<S: Scalar>(
    graph: &Graph<S>,
    bound: &BoundModel<S>,
    config: &ModelConfig,
    ids: &[u32],
    b: usize,
    n: usize,
) -> Result<Tensor<S>> {
    if n > config.max_len {
        return Err(Error::LengthError {
            len: n,
            max_len: config.max_len,
        });
    }
    if ids.len() != b * n {
        return Err(Error::BadShape {
            op: "embed",
            shape: vec![ids.len()],
            what: format!("expected {b}*{n} token ids"),
        });
    }
    let d = config.d_model;
    let tok = graph.embedding(&bound.tok_emb, ids)?.reshape(&[b, n, d])?;
    let pos_rows: Vec<usize> = (0..n).collect();
    let pos = bound
        .pos_emb
        .gather_rows(&pos_rows)?
        .reshape(&[1, n, d])?
        .broadcast_to(&[b, n, d])?;
    tok.add(&pos)?
        .layer_norm(&bound.emb_ln_g, &bound.emb_ln_b, S::from_f64(LAYER_NORM_EPS))
}

/// One encoder layer with post-layer-norm residuals:
/// `h' = LN(h + MHA(h)); out = LN(h' + FFN(h'))`.
///
/// `attn_bias` (additive masking) is added to the pre-softmax scores,
/// broadcast over heads; entries are 0 or `-inf`. `mult_mask` (the
/// post-softmax multiplicative variant) scales attention weight columns
/// instead. `layer_idx` only labels numeric faults.
pub fn encoder_layer_forward<S: Scalar>(
    h: &Tensor<S>,
    attn_bias: Option<&Tensor<S>>,
    mult_mask: Option<&Tensor<S>>,
    layer: &BoundLayer<S>,
    config: &ModelConfig,
    layer_idx: usize,
) -> Result<Tensor<S>> {
    let shape = h.shape().to_vec();
    if shape.len() != 3 || shape[2] != config.d_model {
        return Err(Error::BadShape {
            op: "encoder_layer_forward",
            shape,
            what: format!("expected [B, N, {}]", config.d_model),
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let heads = config.n_heads;
    let hd = config.head_dim();

    let split = |t: Tensor<S>| -> Result<Tensor<S>> {
        t.reshape(&[b, n, heads, hd])?.permute(&[0, 2, 1, 3])
    };
    let q = split(h.linear(&layer.q_w, &layer.q_b)?)?;
    let k = h
        .linear(&layer.k_w, &layer.k_b)?
        .reshape(&[b, n, heads, hd])?
        .permute(&[0, 2, 3, 1])?;
    let v = split(h.linear(&layer.v_w, &layer.v_b)?)?;

    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut scores = q.matmul(&k)?.mul_scalar(scale);
    if let Some(bias) = attn_bias {
        let bb = bias.reshape(&[b, 1, n, n])?.broadcast_to(&[b, heads, n, n])?;
        scores = scores.add(&bb)?;
    }
    let mut probs = scores.softmax_lastdim()?;
    if let Some(mask) = mult_mask {
        let mm = mask.reshape(&[b, 1, 1, n])?.broadcast_to(&[b, heads, n, n])?;
        probs = probs.mul(&mm)?;
    }
    let ctx = probs
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    let attn_out = ctx.linear(&layer.o_w, &layer.o_b)?;

    let eps = S::from_f64(LAYER_NORM_EPS);
    let h1 = h.add(&attn_out)?.layer_norm(&layer.ln1_g, &layer.ln1_b, eps)?;
    let ff = h1
        .linear(&layer.ffn1_w, &layer.ffn1_b)?
        .gelu()
        .linear(&layer.ffn2_w, &layer.ffn2_b)?;
    let out = h1.add(&ff)?.layer_norm(&layer.ln2_g, &layer.ln2_b, eps)?;

    if out.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NumericFault {
            layer: layer_idx,
            what: "NaN in encoder layer output".into(),
        });
    }
    Ok(out)
}

/// Task head over the full-length assembled output.
/// Sequence head: logits from position 0 only, `[B, n_classes]`.
/// Token head: per-position logits, `[B, N, n_classes]`.
pub fn head_forward<S: Scalar>(
    assembled: &Tensor<S>,
    bound: &BoundModel<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    let shape = assembled.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "head_forward",
            shape,
            what: "expected [B, N, d]".into(),
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let c = config.n_classes;
    let flat = assembled.reshape(&[b * n, d])?;
    match config.head_kind {
        HeadKind::SequenceClassification => {
            let cls_rows: Vec<usize> = (0..b).map(|i| i * n).collect();
            flat.gather_rows(&cls_rows)?.linear(&bound.head_w, &bound.head_b)
        }
        HeadKind::TokenClassification => flat
            .linear(&bound.head_w, &bound.head_b)?
            .reshape(&[b, n, c]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::{BoundModel, Model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_model = 8;
        c.d_ffn = 16;
        c.vocab_size = 32;
        c.max_len = 8;
        c
    }

    fn setup(seed: u64) -> (Model<f64>, Graph<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(tiny_config(), &mut rng);
        (model, Graph::new())
    }

    #[test]
    fn embed_positions_differ_and_is_deterministic() {
        let (model, graph) = setup(11);
        let bound = BoundModel::bind(&model, &graph);
        let ids = vec![5u32, 5, 5, 5];
        let h = embed(&graph, &bound, &model.config, &ids, 1, 4).unwrap();
        assert_eq!(h.shape(), &[1, 4, 8]);
        let v = h.data();
        // Same token at different positions embeds differently.
        assert_ne!(&v[0..8], &v[8..16]);
        let h2 = embed(&graph, &bound, &model.config, &ids, 1, 4).unwrap();
        assert_eq!(v, h2.data());
        // Single position works.
        let h1 = embed(&graph, &bound, &model.config, &[3], 1, 1).unwrap();
        assert_eq!(h1.shape(), &[1, 1, 8]);
    }

    #[test]
    fn embed_rejects_out_of_vocab_and_overlong() {
        let (model, graph) = setup(11);
        let bound = BoundModel::bind(&model, &graph);
        assert!(matches!(
            embed(&graph, &bound, &model.config, &[99], 1, 1).unwrap_err(),
            Error::VocabError { .. }
        ));
        let ids = vec![0u32; 9];
        assert!(matches!(
            embed(&graph, &bound, &model.config, &ids, 1, 9).unwrap_err(),
            Error::LengthError { .. }
        ));
    }

    #[test]
    fn diagonal_only_bias_means_self_attention_only() {
        let (model, graph) = setup(13);
        let bound = BoundModel::bind(&model, &graph);
        let n = 4;
        let ids: Vec<u32> = (1..=n as u32).collect();
        let h = embed(&graph, &bound, &model.config, &ids, 1, n).unwrap();

        // Bias allowing only the diagonal.
        let neg = f64::NEG_INFINITY;
        let mut bias = vec![neg; n * n];
        for i in 0..n {
            bias[i * n + i] = 0.0;
        }
        let bias_t = graph.constant(bias, &[1, n, n]);
        let out = encoder_layer_forward(&h, Some(&bias_t), None, &bound.layers[0], &model.config, 0)
            .unwrap();

        // Reference: run each token alone through the same layer.
        for t in 0..n {
            let ht = embed(&graph, &bound, &model.config, &[ids[t]], 1, 1);
            // Positional embedding differs per position; instead gather the row.
            drop(ht);
            let row = h
                .reshape(&[n, 8])
                .unwrap()
                .gather_rows(&[t])
                .unwrap()
                .reshape(&[1, 1, 8])
                .unwrap();
            let solo =
                encoder_layer_forward(&row, None, None, &bound.layers[0], &model.config, 0)
                    .unwrap();
            let got = &out.data()[t * 8..(t + 1) * 8];
            for (a, b) in got.iter().zip(solo.data().iter()) {
                assert!((a - b).abs() < 1e-12, "token {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_bias_matches_no_bias_bit_for_bit() {
        let (model, graph) = setup(17);
        let bound = BoundModel::bind(&model, &graph);
        let ids = vec![1u32, 2, 3, 4, 5, 6];
        let h = embed(&graph, &bound, &model.config, &ids, 2, 3).unwrap();
        let zero_bias = graph.full(0.0, &[2, 3, 3]);
        let with = encoder_layer_forward(&h, Some(&zero_bias), None, &bound.layers[0], &model.config, 0)
            .unwrap();
        let without =
            encoder_layer_forward(&h, None, None, &bound.layers[0], &model.config, 0).unwrap();
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn head_shapes_and_position_zero_only() {
        let (mut model, graph) = setup(19);
        model.config.head_kind = HeadKind::SequenceClassification;
        let bound = BoundModel::bind(&model, &graph);
        let ids = vec![1u32, 2, 3, 4, 5, 6, 7, 8];
        let h = embed(&graph, &bound, &model.config, &ids, 2, 4).unwrap();
        let logits = head_forward(&h, &bound, &model.config).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);

        // Perturbing a non-CLS position leaves sequence logits unchanged.
        let mut v = h.data();
        for x in v[8..16].iter_mut() {
            *x += 10.0;
        }
        let h2 = graph.constant(v, &[2, 4, 8]);
        let logits2 = head_forward(&h2, &bound, &model.config).unwrap();
        assert_eq!(logits.data(), logits2.data());

        let mut cfg_tok = model.config.clone();
        cfg_tok.head_kind = HeadKind::TokenClassification;
        let tok_logits = head_forward(&h, &bound, &cfg_tok).unwrap();
        assert_eq!(tok_logits.shape(), &[2, 4, 2]);
    }

    #[test]
    fn zero_head_weights_give_zero_logits() {
        let (mut model, graph) = setup(23);
        for v in model.head.w.data.iter_mut() {
            *v = 0.0;
        }
        let bound = BoundModel::bind(&model, &graph);
        let ids = vec![1u32, 2, 3, 4];
        let h = embed(&graph, &bound, &model.config, &ids, 1, 4).unwrap();
        let logits = head_forward(&h, &bound, &model.config).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
}
