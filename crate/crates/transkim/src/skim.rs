//! The token-skimming mechanism: per-layer keep/skim predictor, discrete
//! decisions with a straight-through Gumbel-softmax, monotone mask algebra,
//! attention masking, forwarded-output assembly, and the skim loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::model::BoundPredictor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
#[cfg(test)]
use crate::tensor::Graph;

/// Per-token two-way logits from the predictor MLP:
/// `Linear(d,d) -> LN -> GeLU -> Linear(d,2)`. Channel 1 is keep, 0 is skim.
/// Purely per-position: no cross-token mixing.
pub fn skim_predict<S: Scalar>(h: &Tensor<S>, pred: &BoundPredictor<S>) -> Result<Tensor<S>> {
    h.linear(&pred.lin1_w, &pred.lin1_b)?
        .layer_norm(&pred.ln_g, &pred.ln_b, S::from_f64(LAYER_NORM_EPS))?
        .gelu()
        .linear(&pred.lin2_w, &pred.lin2_b)
}

/// Standard Gumbel(0,1) draws, converted to the working precision.
pub fn sample_gumbel<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>();
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            S::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// How per-token decisions are produced.
pub enum DecisionMode<S: Scalar> {
    /// Sampled hard decision in the forward value, soft Gumbel-softmax
    /// gradient in the backward pass. The training default.
    HardSt { noise: Vec<S>, tau: S },
    /// Fully soft relaxation with the same noise; used by gradient oracles.
    Soft { noise: Vec<S>, tau: S },
    /// Noise-free argmax of the logits; ties break to keep.
    Argmax,
    /// Externally imposed hard decisions (equivalence harness).
    Forced(Vec<S>),
}

/// Outcome of one layer's decision pass.
pub struct Decision<S: Scalar> {
    /// Hard keep values in {0,1}, before any forcing.
    pub hard: Vec<S>,
    /// Soft keep probabilities (equal to `hard` in the noise-free modes).
    pub soft_keep: Vec<S>,
    /// The keep mask to multiply into the graph. In `HardSt` mode its forward
    /// value is exactly `hard` while gradients flow through the soft path.
    pub st: Tensor<S>,
}

/// Reparameterized discrete decision from `[B, N, 2]` logits.
pub fn gumbel_softmax_decision<S: Scalar>(
    pi: &Tensor<S>,
    mode: &DecisionMode<S>,
) -> Result<Decision<S>> {
    let shape = pi.shape().to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::BadShape {
            op: "gumbel_softmax_decision",
            shape,
            what: "expected [B, N, 2] logits".into(),
        });
    }
    let (b, n) = (shape[0], shape[1]);
    let graph = pi.graph().clone();
    match mode {
        DecisionMode::HardSt { noise, tau } | DecisionMode::Soft { noise, tau } => {
            if !(*tau > S::zero()) {
                return Err(Error::Contract(format!("tau must be > 0, got {tau}")));
            }
            if noise.len() != b * n * 2 {
                return Err(Error::BadShape {
                    op: "gumbel_softmax_decision",
                    shape: vec![noise.len()],
                    what: format!("noise must have {} entries", b * n * 2),
                });
            }
            let logp = pi.log_softmax_lastdim()?;
            let g = graph.constant(noise.clone(), &[b, n, 2]);
            let y = logp.add(&g)?.mul_scalar(S::one() / *tau);
            let soft2 = y.softmax_lastdim()?;
            let soft_keep = soft2.select_lastdim(1)?;
            let sv = soft_keep.data();
            let half = S::from_f64(0.5);
            let hard: Vec<S> = sv
                .iter()
                .map(|&s| if s >= half { S::one() } else { S::zero() })
                .collect();
            let st = match mode {
                DecisionMode::HardSt { .. } => {
                    let hc = graph.constant(hard.clone(), &[b, n]);
                    // st = soft + stopgrad(hard - soft): value is exactly hard,
                    // gradient is the soft Gumbel-softmax gradient.
                    hc.sub(&soft_keep)?.detach().add(&soft_keep)?
                }
                _ => soft_keep.clone(),
            };
            Ok(Decision {
                hard,
                soft_keep: sv,
                st,
            })
        }
        DecisionMode::Argmax => {
            let pv = pi.data();
            let hard: Vec<S> = (0..b * n)
                .map(|t| {
                    if pv[2 * t + 1] >= pv[2 * t] {
                        S::one()
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let st = graph.constant(hard.clone(), &[b, n]);
            Ok(Decision {
                soft_keep: hard.clone(),
                hard,
                st,
            })
        }
        DecisionMode::Forced(vals) => {
            if vals.len() != b * n {
                return Err(Error::BadShape {
                    op: "gumbel_softmax_decision",
                    shape: vec![vals.len()],
                    what: format!("forced decisions must have {} entries", b * n),
                });
            }
            let st = graph.constant(vals.clone(), &[b, n]);
            Ok(Decision {
                hard: vals.clone(),
                soft_keep: vals.clone(),
                st,
            })
        }
    }
}

/// Positions pinned to a value regardless of the decision. `keep` and `skim`
/// are {0,1} indicators over the flattened `[B, N]` grid.
pub struct MaskForcing<S: Scalar> {
    pub keep: Option<Vec<S>>,
    pub skim: Option<Vec<S>>,
}

impl<S: Scalar> MaskForcing<S> {
    pub fn none() -> Self {
        MaskForcing {
            keep: None,
            skim: None,
        }
    }
}

/// `next = prev * decision`, then forced-keep positions are set to 1 and
/// forced-skim positions to 0. A skimmed token never returns: the product
/// keeps masks monotone across layers. The same algebra applied to the
/// straight-through mask carries the soft gradients.
pub fn accumulate_mask<S: Scalar>(
    prev: &Tensor<S>,
    decision: &Tensor<S>,
    forcing: &MaskForcing<S>,
) -> Result<Tensor<S>> {
    let graph = prev.graph().clone();
    let shape = prev.shape().to_vec();
    let mut next = prev.mul(decision)?;
    if let Some(keep) = &forcing.keep {
        let inv: Vec<S> = keep.iter().map(|&k| S::one() - k).collect();
        let keep_t = graph.constant(keep.clone(), &shape);
        let inv_t = graph.constant(inv, &shape);
        next = next.mul(&inv_t)?.add(&keep_t)?;
    }
    if let Some(skim) = &forcing.skim {
        let inv: Vec<S> = skim.iter().map(|&k| S::one() - k).collect();
        let inv_t = graph.constant(inv, &shape);
        next = next.mul(&inv_t)?;
    }
    Ok(next)
}

/// Value-level twin of [`accumulate_mask`] for the inference path and the
/// mask-algebra test batteries.
pub fn accumulate_mask_values<S: Scalar>(
    prev: &[S],
    decision: &[S],
    force_keep: Option<&[S]>,
    force_skim: Option<&[S]>,
) -> Vec<S> {
    let mut next: Vec<S> = prev
        .iter()
        .zip(decision.iter())
        .map(|(&p, &d)| p * d)
        .collect();
    if let Some(keep) = force_keep {
        for (n, &k) in next.iter_mut().zip(keep.iter()) {
            *n = *n * (S::one() - k) + k;
        }
    }
    if let Some(skim) = force_skim {
        for (n, &k) in next.iter_mut().zip(skim.iter()) {
            *n *= S::one() - k;
        }
    }
    next
}

/// Additive attention bias from an alive mask: every query's score against a
/// masked key column becomes `-inf`, so the softmax renormalizes over
/// survivors and masked columns get exactly zero weight.
pub fn attention_bias_values<S: Scalar>(mask: &[S], b: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(mask.len(), b * n);
    let mut bias = vec![S::zero(); b * n * n];
    for bi in 0..b {
        for key in 0..n {
            if mask[bi * n + key] == S::zero() {
                for q in 0..n {
                    bias[bi * n * n + q * n + key] = S::neg_infinity();
                }
            }
        }
    }
    bias
}

/// Full-length forwarded output: every position receives the hidden state
/// that entered the layer which skimmed it; survivors receive the final
/// layer output. `layer_inputs[i]` is the state entering layer `i`
/// (`layer_inputs[L]` is the final output); `entering[i]` is the alive mask
/// entering layer `i`, with `entering[0]` all ones. Selection weights
/// `entering[i] - entering[i+1]` telescope to a partition of every position.
pub fn assemble_forwarded_output<S: Scalar>(
    layer_inputs: &[Tensor<S>],
    entering: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if layer_inputs.len() != entering.len() || layer_inputs.is_empty() {
        return Err(Error::SkimStateInvariant(format!(
            "assemble: {} snapshots vs {} masks",
            layer_inputs.len(),
            entering.len()
        )));
    }
    let levels = layer_inputs.len(); // L + 1
    let hshape = layer_inputs[0].shape().to_vec();
    let mut out: Option<Tensor<S>> = None;
    for i in 0..levels {
        let sel = if i + 1 < levels {
            entering[i].sub(&entering[i + 1])?
        } else {
            entering[i].clone()
        };
        let sel3 = sel
            .reshape(&[hshape[0], hshape[1], 1])?
            .broadcast_to(&hshape)?;
        let contrib = layer_inputs[i].mul(&sel3)?;
        out = Some(match out {
            Some(acc) => acc.add(&contrib)?,
            None => contrib,
        });
    }
    Ok(out.expect("levels >= 1"))
}

/// Mean over layers of the kept-token ratio among `valid_count` positions.
/// `processed[i]` is the alive mask actually multiplying layer `i`; padding
/// positions are already zero there and excluded from the denominator by
/// construction. On straight-through masks the value is the exact hard ratio
/// while the gradient is the soft one.
pub fn skim_loss<S: Scalar>(processed: &[Tensor<S>], valid_count: usize) -> Result<Tensor<S>> {
    if valid_count == 0 {
        return Err(Error::EmptyInput("skim_loss: no valid positions".into()));
    }
    if processed.is_empty() {
        return Err(Error::EmptyInput("skim_loss: no layers".into()));
    }
    let mut acc: Option<Tensor<S>> = None;
    for m in processed {
        let s = m.sum_all();
        acc = Some(match acc {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    let scale = S::one() / (S::from_f64(processed.len() as f64) * S::from_f64(valid_count as f64));
    Ok(acc.expect("non-empty").mul_scalar(scale))
}

/// Hard-mask skim loss straight from recorded values.
pub fn skim_loss_values<S: Scalar>(processed: &[Vec<S>], valid_count: usize) -> Result<f64> {
    if valid_count == 0 {
        return Err(Error::EmptyInput("skim_loss: no valid positions".into()));
    }
    if processed.is_empty() {
        return Err(Error::EmptyInput("skim_loss: no layers".into()));
    }
    let mut total = 0.0f64;
    for m in processed {
        total += m.iter().map(|v| v.to_f64s()).sum::<f64>() / valid_count as f64;
    }
    Ok(total / processed.len() as f64)
}

/// `total = downstream + lambda * skim`; both terms stay separate for logs.
pub fn total_loss<S: Scalar>(
    downstream: &Tensor<S>,
    skim: &Tensor<S>,
    lambda: S,
) -> Result<Tensor<S>> {
    downstream.add(&skim.mul_scalar(lambda))
}

/// Per-layer decision record for one batch: raw hard decisions, the monotone
/// alive masks, soft keep probabilities, and per-token prune layers.
#[derive(Debug, Clone)]
pub struct SkimState<S: Scalar> {
    pub n_layers: usize,
    pub b: usize,
    pub n: usize,
    /// `L x B*N` hard predictor outputs, before forcing.
    pub raw_decisions: Vec<Vec<S>>,
    /// `L x B*N` alive mask actually processed by layer `i` (after the
    /// layer-`i` decision and all forcing). Monotone non-increasing in `i`.
    pub cumulative: Vec<Vec<S>>,
    /// `L x B*N` soft keep probabilities retained for analysis.
    pub soft_keep: Vec<Vec<S>>,
    /// Per token: `k` in `[1, L]` means first skimmed entering layer `k`
    /// (so layer `k` never processed it); `L + 1` means never skimmed.
    pub prune_layer: Vec<u32>,
}

impl<S: Scalar> SkimState<S> {
    /// Derive prune layers from the cumulative masks:
    /// `cumulative[i] == 1` iff `prune_layer > i + 1`.
    pub fn from_masks(
        n_layers: usize,
        b: usize,
        n: usize,
        raw_decisions: Vec<Vec<S>>,
        cumulative: Vec<Vec<S>>,
        soft_keep: Vec<Vec<S>>,
    ) -> Result<Self> {
        if raw_decisions.len() != n_layers || cumulative.len() != n_layers {
            return Err(Error::SkimStateInvariant(format!(
                "expected {} layers of decisions, got {}/{}",
                n_layers,
                raw_decisions.len(),
                cumulative.len()
            )));
        }
        let mut prune_layer = vec![(n_layers + 1) as u32; b * n];
        for t in 0..b * n {
            for (i, mask) in cumulative.iter().enumerate() {
                if mask[t] == S::zero() {
                    prune_layer[t] = (i + 1) as u32;
                    break;
                }
            }
        }
        let state = SkimState {
            n_layers,
            b,
            n,
            raw_decisions,
            cumulative,
            soft_keep,
            prune_layer,
        };
        state.validate()?;
        Ok(state)
    }

    /// Check monotonicity and prune-layer consistency.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_layers {
            for t in 0..self.b * self.n {
                let m = self.cumulative[i][t];
                if m != S::zero() && m != S::one() {
                    return Err(Error::SkimStateInvariant(format!(
                        "cumulative[{i}][{t}] = {m} is not binary"
                    )));
                }
                if i > 0 && m > self.cumulative[i - 1][t] {
                    return Err(Error::SkimStateInvariant(format!(
                        "mask grew at layer {i}, token {t}: a skimmed token returned"
                    )));
                }
                let alive = self.prune_layer[t] as usize > i + 1;
                if alive != (m == S::one()) {
                    return Err(Error::SkimStateInvariant(format!(
                        "prune_layer[{t}]={} inconsistent with cumulative[{i}]",
                        self.prune_layer[t]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens processed by each layer, over positions where `valid` is true.
    pub fn kept_per_layer(&self, valid: &[bool]) -> Vec<usize> {
        (0..self.n_layers)
            .map(|i| {
                self.cumulative[i]
                    .iter()
                    .zip(valid.iter())
                    .filter(|(&m, &v)| v && m == S::one())
                    .count()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::{BoundModel, Model};
    use rand::SeedableRng;

    fn graph64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn fresh_predictor_logit_gap_is_two_mu0_at_zero_input() {
        let mut cfg = ModelConfig::desk();
        cfg.mu0 = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model: Model<f64> = Model::new(cfg.clone(), &mut rng);
        let graph = graph64();
        let bound = BoundModel::bind(&model, &graph);
        let zero = graph.full(0.0, &[1, 3, cfg.d_model]);
        let logits = skim_predict(&zero, &bound.predictors[0]).unwrap();
        let v = logits.data();
        let band = 6.0 * cfg.sigma * (cfg.d_model as f64).sqrt();
        for t in 0..3 {
            let gap = v[2 * t + 1] - v[2 * t];
            assert!(
                (gap - 10.0).abs() <= band,
                "gap {gap} outside 10 +- {band}"
            );
        }
    }

    #[test]
    fn predictor_is_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model: Model<f64> = Model::new(ModelConfig::desk(), &mut rng);
        let graph = graph64();
        let bound = BoundModel::bind(&model, &graph);
        let d = model.config.d_model;
        let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let h = graph.constant(data, &[1, 2, d]);
        let logits = skim_predict(&h, &bound.predictors[0]).unwrap().data();
        assert_eq!(&logits[0..2], &logits[2..4]);
    }

    #[test]
    fn tiny_predictor_matches_straight_line_evaluation() {
        // d=2 with hand-set parameters; oracle computed step by step below.
        let mut cfg = ModelConfig::desk();
        cfg.d_model = 2;
        cfg.n_heads = 1;
        cfg.d_ffn = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model: Model<f64> = Model::new(cfg, &mut rng);
        model.predictors[0].lin1_w.data = vec![1.0, -1.0, 0.5, 2.0];
        model.predictors[0].lin1_b.data = vec![0.1, -0.2];
        model.predictors[0].ln_g.data = vec![1.5, 0.5];
        model.predictors[0].ln_b.data = vec![0.0, 0.3];
        model.predictors[0].lin2_w.data = vec![2.0, -1.0, 1.0, 1.0];
        model.predictors[0].lin2_b.data = vec![-0.4, 0.9];
        let graph = graph64();
        let bound = BoundModel::bind(&model, &graph);
        let x = [0.7, -0.3];
        let h = graph.constant(x.to_vec(), &[1, 1, 2]);
        let got = skim_predict(&h, &bound.predictors[0]).unwrap().data();

        // Straight-line oracle.
        let z = [
            x[0] * 1.0 + x[1] * 0.5 + 0.1,
            x[0] * -1.0 + x[1] * 2.0 - 0.2,
        ];
        let mean = (z[0] + z[1]) / 2.0;
        let var = ((z[0] - mean).powi(2) + (z[1] - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let ln = [
            (z[0] - mean) * inv * 1.5,
            (z[1] - mean) * inv * 0.5 + 0.3,
        ];
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let ge = [ln[0] * phi(ln[0]), ln[1] * phi(ln[1])];
        let want = [
            ge[0] * 2.0 + ge[1] * 1.0 - 0.4,
            ge[0] * -1.0 + ge[1] * 1.0 + 0.9,
        ];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn argmax_decision_prefers_keep_on_ties() {
        let g = graph64();
        let pi = g.constant(vec![0.1, 0.9, 0.5, 0.5, 0.9, 0.1], &[1, 3, 2]);
        let d = gumbel_softmax_decision(&pi, &DecisionMode::Argmax).unwrap();
        assert_eq!(d.hard, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn soft_decision_with_zero_noise_and_equal_logits_is_half() {
        let g = graph64();
        let pi = g.constant(vec![0.3, 0.3], &[1, 1, 2]);
        let mode = DecisionMode::Soft {
            noise: vec![0.0, 0.0],
            tau: 0.1,
        };
        let d = gumbel_softmax_decision(&pi, &mode).unwrap();
        assert!((d.soft_keep[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn straight_through_value_is_exactly_binary() {
        let g: Graph<f32> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 64;
        let logits: Vec<f32> = (0..2 * n).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
        let pi = g.constant(logits, &[1, n, 2]);
        let mode = DecisionMode::HardSt {
            noise: sample_gumbel::<f32>(&mut rng, 2 * n),
            tau: 0.1,
        };
        let d = gumbel_softmax_decision(&pi, &mode).unwrap();
        let st = d.st.data();
        assert_eq!(st, d.hard, "straight-through forward must be exactly hard");
        assert!(st.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn gumbel_keep_frequency_tracks_sigmoid() {
        // Monte-Carlo oracle: P(keep) -> sigmoid(keep - skim) by the
        // Gumbel-max property; tau only sharpens the soft value.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let trials = 100_000usize;
        for &(a, b) in &[(0.0f64, 0.0f64), (1.0, 0.0), (-0.5, 1.0)] {
            let g = graph64();
            let pi = g.constant(vec![b, a], &[1, 1, 2]);
            let mut keep = 0usize;
            for _ in 0..trials {
                let mode = DecisionMode::HardSt {
                    noise: sample_gumbel::<f64>(&mut rng, 2),
                    tau: 0.1,
                };
                let d = gumbel_softmax_decision(&pi, &mode).unwrap();
                if d.hard[0] == 1.0 {
                    keep += 1;
                }
            }
            let freq = keep as f64 / trials as f64;
            let want = 1.0 / (1.0 + (-(a - b) as f64).exp());
            assert!((freq - want).abs() < 0.01, "logits ({a},{b}): {freq} vs {want}");
        }
    }

    #[test]
    fn accumulate_mask_monotone_and_forced() {
        let ones = vec![1.0f64; 4];
        let dec = vec![1.0, 0.0, 1.0, 0.0];
        let next = accumulate_mask_values(&ones, &dec, None, None);
        assert_eq!(next, dec);
        // A dropped token stays dropped even if a later decision says keep.
        let again = accumulate_mask_values(&next, &[1.0, 1.0, 1.0, 1.0], None, None);
        assert_eq!(again, dec);
        // Forced keep overrides a skim decision.
        let fk = vec![1.0, 0.0, 0.0, 0.0];
        let forced = accumulate_mask_values(&ones, &[0.0, 1.0, 1.0, 1.0], Some(&fk), None);
        assert_eq!(forced, vec![1.0, 1.0, 1.0, 1.0]);
        // Forced skim wins over everything.
        let fs = vec![0.0, 0.0, 0.0, 1.0];
        let forced = accumulate_mask_values(&ones, &ones, Some(&fk), Some(&fs));
        assert_eq!(forced, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn graph_accumulate_matches_value_twin() {
        let g = graph64();
        let prev = g.constant(vec![1.0, 1.0, 0.0, 1.0], &[1, 4]);
        let dec = g.constant(vec![0.0, 1.0, 1.0, 1.0], &[1, 4]);
        let forcing = MaskForcing {
            keep: Some(vec![1.0, 0.0, 0.0, 0.0]),
            skim: Some(vec![0.0, 0.0, 0.0, 1.0]),
        };
        let next = accumulate_mask(&prev, &dec, &forcing).unwrap();
        let want = accumulate_mask_values(
            &[1.0, 1.0, 0.0, 1.0],
            &[0.0, 1.0, 1.0, 1.0],
            forcing.keep.as_deref(),
            forcing.skim.as_deref(),
        );
        assert_eq!(next.data(), want);
    }

    #[test]
    fn attention_bias_masks_whole_columns() {
        let bias = attention_bias_values(&[1.0f64, 0.0], 1, 2);
        assert_eq!(bias[0], 0.0);
        assert_eq!(bias[1], f64::NEG_INFINITY);
        assert_eq!(bias[2], 0.0);
        assert_eq!(bias[3], f64::NEG_INFINITY);
        // All-ones mask is a no-op bias.
        let bias = attention_bias_values(&[1.0f64; 3], 1, 3);
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_renormalizes_over_kept() {
        // Additive -inf on column 2 of 4: rows must equal the softmax over
        // the three kept scores, recomputed independently.
        let g = graph64();
        let scores = [0.3f64, -0.1, 0.8, 0.5];
        let mask = [1.0f64, 1.0, 0.0, 1.0];
        let bias = attention_bias_values(&mask, 1, 4);
        let biased: Vec<f64> = scores
            .iter()
            .zip(bias[0..4].iter())
            .map(|(&s, &b)| s + b)
            .collect();
        let t = g.constant(biased, &[1, 4]);
        let probs = t.softmax_lastdim().unwrap().data();
        let kept = [scores[0], scores[1], scores[3]];
        let mx = kept.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = kept.iter().map(|&s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        assert!((probs[0] - exps[0] / z).abs() < 1e-15);
        assert!((probs[1] - exps[1] / z).abs() < 1e-15);
        assert_eq!(probs[2], 0.0);
        assert!((probs[3] - exps[2] / z).abs() < 1e-15);
    }

    #[test]
    fn skim_loss_hand_cases() {
        // All kept at every layer.
        let all = vec![vec![1.0f64; 4], vec![1.0; 4]];
        assert_eq!(skim_loss_values(&all, 4).unwrap(), 1.0);
        // Everything skimmed entering layer 1.
        let none = vec![vec![0.0f64; 4], vec![0.0; 4]];
        assert_eq!(skim_loss_values(&none, 4).unwrap(), 0.0);
        // L=2: 4/4 then 2/4 -> 0.75.
        let mixed = vec![vec![1.0f64; 4], vec![1.0, 1.0, 0.0, 0.0]];
        assert_eq!(skim_loss_values(&mixed, 4).unwrap(), 0.75);
        assert!(skim_loss_values::<f64>(&mixed, 0).is_err());
    }

    #[test]
    fn graph_skim_loss_matches_values_and_total_combines() {
        let g = graph64();
        let m0 = g.constant(vec![1.0; 4], &[1, 4]);
        let m1 = g.constant(vec![1.0, 1.0, 0.0, 0.0], &[1, 4]);
        let loss = skim_loss(&[m0, m1], 4).unwrap();
        assert!((loss.item() - 0.75).abs() < 1e-12);
        let down = g.scalar(0.7);
        let total = total_loss(&down, &loss, 0.2).unwrap();
        assert!((total.item() - 0.85).abs() < 1e-12);
        let zero_lambda = total_loss(&down, &loss, 0.0).unwrap();
        assert_eq!(zero_lambda.item(), 0.7);
    }

    #[test]
    fn state_prune_layers_and_validation() {
        // L=2, 3 tokens: token 0 never skimmed, token 1 skimmed entering
        // layer 2, token 2 skimmed entering layer 1.
        let cum = vec![vec![1.0f64, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        let raw = vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]];
        let soft = raw.clone();
        let st = SkimState::from_masks(2, 1, 3, raw, cum, soft).unwrap();
        assert_eq!(st.prune_layer, vec![3, 2, 1]);
        assert_eq!(st.kept_per_layer(&[true, true, true]), vec![2, 1]);

        // Non-monotone masks are rejected.
        let bad = SkimState::from_masks(
            2,
            1,
            1,
            vec![vec![0.0f64], vec![1.0]],
            vec![vec![0.0f64], vec![1.0]],
            vec![vec![0.0f64], vec![1.0]],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn assemble_partition_covers_every_position() {
        let g = graph64();
        let (b, n, d) = (1usize, 3usize, 2usize);
        // Snapshots with recognizable values per level.
        let h0 = g.constant(vec![0.0; n * d], &[b, n, d]);
        let h1 = g.constant(vec![1.0; n * d], &[b, n, d]);
        let h2 = g.constant(vec![2.0; n * d], &[b, n, d]);
        // Token 0 survives, token 1 skimmed entering layer 2, token 2
        // skimmed entering layer 1.
        let e0 = g.constant(vec![1.0, 1.0, 1.0], &[b, n]);
        let e1 = g.constant(vec![1.0, 1.0, 0.0], &[b, n]);
        let e2 = g.constant(vec![1.0, 0.0, 0.0], &[b, n]);
        let out = assemble_forwarded_output(&[h0, h1, h2], &[e0, e1, e2]).unwrap();
        assert_eq!(out.data(), vec![2.0, 2.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn assemble_nothing_skimmed_equals_final_output() {
        let g = graph64();
        let (b, n, d) = (2usize, 2usize, 2usize);
        let h0 = g.constant((0..8).map(|v| v as f64).collect(), &[b, n, d]);
        let h1 = g.constant((8..16).map(|v| v as f64).collect(), &[b, n, d]);
        let ones = g.constant(vec![1.0; 4], &[b, n]);
        let out = assemble_forwarded_output(&[h0, h1.clone()], &[ones.clone(), ones]).unwrap();
        assert_eq!(out.data(), h1.data());
    }
}
