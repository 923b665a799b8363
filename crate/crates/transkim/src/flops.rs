//! Closed-form FLOPs accounting and speedup reporting.
//!
//! Conventions, mirrored exactly by the substrate's instrumented counter:
//! multiply-add counts as 2; elementwise add/mul/div/exp/erf/sqrt count 1;
//! softmax costs 4 per element (shift, exp, accumulate, divide);
//! layer norm costs 8 per element plus 5 per position; GeLU costs 5 per
//! element; lookups, gathers, reshapes, permutes and broadcasts are free.
//! The analytic layer formulas below must equal the counter integer-exactly
//! on the gathered inference path; the oracle test enforces it.

use serde::{Deserialize, Serialize};

use crate::config::{HeadKind, ModelConfig, PadPolicy};
use crate::error::{Error, Result};
use crate::trace::{SkimTrace, TraceExample};

fn linear_flops(rows: u64, in_dim: u64, out_dim: u64) -> u64 {
    2 * rows * in_dim * out_dim + rows * out_dim
}

fn layer_norm_flops(positions: u64, width: u64) -> u64 {
    8 * positions * width + 5 * positions
}

fn gelu_flops(count: u64) -> u64 {
    5 * count
}

/// Embedding lookup + positional add + layer norm for `n` tokens.
pub fn embed_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    n * d + layer_norm_flops(n, d)
}

/// One encoder layer processing `n` tokens.
pub fn encoder_layer_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    let dff = cfg.d_ffn as u64;
    let h = cfg.n_heads as u64;
    let mut f = 0u64;
    // Q, K, V projections.
    f += 3 * linear_flops(n, d, d);
    // Scores, scale, softmax, context.
    f += 2 * n * n * d;
    f += h * n * n;
    f += 4 * h * n * n;
    f += 2 * n * n * d;
    // Output projection, residual, norm.
    f += linear_flops(n, d, d);
    f += n * d;
    f += layer_norm_flops(n, d);
    // FFN with GeLU, residual, norm.
    f += linear_flops(n, d, dff);
    f += gelu_flops(n * dff);
    f += linear_flops(n, dff, d);
    f += n * d;
    f += layer_norm_flops(n, d);
    f
}

/// The skim predictor MLP over `n` incoming tokens.
pub fn predictor_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    linear_flops(n, d, d) + layer_norm_flops(n, d) + gelu_flops(n * d) + linear_flops(n, d, 2)
}

/// Task head over a full-length assembled output of `n` tokens.
pub fn head_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    let c = cfg.n_classes as u64;
    match cfg.head_kind {
        HeadKind::SequenceClassification => linear_flops(1, d, c),
        HeadKind::TokenClassification => linear_flops(n, d, c),
    }
}

/// Plain no-skim encoder forward on one example of `n` tokens.
pub fn baseline_example_flops(cfg: &ModelConfig, n: u64) -> u64 {
    embed_flops(cfg, n) + cfg.n_layers as u64 * encoder_layer_flops(cfg, n) + head_flops(cfg, n)
}

/// Gathered skimming forward for one example: each predictor sees the tokens
/// entering its layer, each layer processes the survivors, and the head sees
/// the full-length assembled output. Returns `(total, predictor_part)`.
pub fn skimmed_example_flops(cfg: &ModelConfig, true_len: u64, kept: &[usize]) -> (u64, u64) {
    let mut total = embed_flops(cfg, true_len);
    let mut pred = 0u64;
    let mut incoming = true_len;
    for &k in kept {
        pred += predictor_flops(cfg, incoming);
        total += encoder_layer_flops(cfg, k as u64);
        incoming = k as u64;
    }
    total += head_flops(cfg, true_len);
    (total + pred, pred)
}

/// Per-layer baseline vs. skimmed FLOPs and speedup under a padding policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub policy: PadPolicy,
    pub baseline_flops: u64,
    pub skimmed_flops: u64,
    pub predictor_overhead_flops: u64,
    /// `baseline_flops / skimmed_flops`.
    pub speedup: f64,
    /// Share of the executed (skimmed) computation spent in predictors.
    pub overhead_fraction: f64,
    /// Tokens processed by each layer, summed over examples.
    pub per_layer_kept: Vec<u64>,
}

/// Account a whole trace. The baseline pads every example per the policy
/// (`sequence`: the fixed `max_len`; `batch`: the longest true length in the
/// trace, treated as one mini-batch; `none`: each example's own length) and
/// runs the full encoder at that length. The skimmed side never pays for
/// padding: removal of padding is free and the predictors run only on
/// surviving real tokens.
pub fn count_flops(
    cfg: &ModelConfig,
    trace: &SkimTrace,
    policy: PadPolicy,
) -> Result<FlopsReport> {
    trace.validate()?;
    if trace.examples.is_empty() {
        return Err(Error::EmptyInput("count_flops: empty trace".into()));
    }
    if trace.n_layers() != cfg.n_layers {
        return Err(Error::Schema(format!(
            "trace has {} layers, config expects {}",
            trace.n_layers(),
            cfg.n_layers
        )));
    }
    let batch_max = trace
        .examples
        .iter()
        .map(|e| e.true_len)
        .max()
        .unwrap_or(0) as u64;
    let mut baseline = 0u64;
    let mut skimmed = 0u64;
    let mut pred_total = 0u64;
    let mut per_layer_kept = vec![0u64; cfg.n_layers];
    for ex in &trace.examples {
        let n_base = match policy {
            PadPolicy::Sequence => {
                if ex.true_len > cfg.max_len {
                    return Err(Error::LengthError {
                        len: ex.true_len,
                        max_len: cfg.max_len,
                    });
                }
                cfg.max_len as u64
            }
            PadPolicy::Batch => batch_max,
            PadPolicy::None => ex.true_len as u64,
        };
        baseline += baseline_example_flops(cfg, n_base);
        let (tot, pred) = skimmed_example_flops(cfg, ex.true_len as u64, &ex.kept_per_layer);
        skimmed += tot;
        pred_total += pred;
        for (acc, &k) in per_layer_kept.iter_mut().zip(ex.kept_per_layer.iter()) {
            *acc += k as u64;
        }
    }
    Ok(FlopsReport {
        policy,
        baseline_flops: baseline,
        skimmed_flops: skimmed,
        predictor_overhead_flops: pred_total,
        speedup: baseline as f64 / skimmed as f64,
        overhead_fraction: pred_total as f64 / skimmed as f64,
        per_layer_kept,
    })
}

/// Mean fraction of (non-pad) tokens alive entering each layer, averaged per
/// example; index 0 is always 1.0. The normalized area under the curve is
/// the usual sequence-length speedup proxy.
pub fn layerwise_curve(examples: &[TraceExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("layerwise_curve: no examples".into()));
    }
    let l = examples[0].kept_per_layer.len();
    let mut curve = vec![0.0f64; l + 1];
    curve[0] = 1.0;
    for ex in examples {
        if ex.kept_per_layer.len() != l {
            return Err(Error::Schema(format!(
                "example {}: layer count {} disagrees with {}",
                ex.id,
                ex.kept_per_layer.len(),
                l
            )));
        }
        for (i, &k) in ex.kept_per_layer.iter().enumerate() {
            curve[i + 1] += k as f64 / ex.true_len as f64;
        }
    }
    for v in curve.iter_mut().skip(1) {
        *v /= examples.len() as f64;
    }
    Ok(curve)
}

/// Normalized area under a retention curve.
pub fn curve_area(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len() as f64
}
