//! Orchestration of the two forward modes and their equivalence check.
//!
//! Training keeps full-length tensors: each layer's attention is masked so
//! kept tokens compute exactly what they would under real pruning, while
//! gradients still reach the skim predictors. Inference physically removes
//! skimmed rows with gathers and parks their hidden states for the final
//! assembled output.

use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionMaskMode, HeadKind};
use crate::encoder::{embed, encoder_layer_forward, head_forward};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model};
use crate::scalar::Scalar;
use crate::skim::{
    accumulate_mask, accumulate_mask_values, assemble_forwarded_output, attention_bias_values,
    gumbel_softmax_decision, sample_gumbel, skim_predict, skim_loss, total_loss, Decision,
    DecisionMode, MaskForcing, SkimState,
};
use crate::tasks::{Batch, Label};
use crate::tensor::{Graph, Tensor};

/// Everything a training step needs after one masked forward.
pub struct ForwardResult<S: Scalar> {
    pub logits: Tensor<S>,
    pub assembled: Tensor<S>,
    pub state: SkimState<S>,
    pub loss_downstream: Tensor<S>,
    pub loss_skim: Tensor<S>,
    pub loss_total: Tensor<S>,
}

pub struct TrainForward<S: Scalar> {
    pub graph: Graph<S>,
    pub bound: BoundModel<S>,
    pub result: ForwardResult<S>,
}

/// How the masked forward decides which tokens to keep.
pub enum TrainMode<'a, S: Scalar> {
    /// Sampled hard decisions, straight-through gradients: the training path.
    SampledHard(&'a mut ChaCha8Rng),
    /// Fully soft relaxation with sampled noise; the gradient-oracle path.
    SampledSoft(&'a mut ChaCha8Rng),
    /// Noise-free argmax decisions.
    Argmax,
    /// Hard decisions imposed per layer over the flattened `[B*N]` grid.
    Forced(&'a [Vec<S>]),
}

/// Full-length masked forward producing losses and a backward-ready graph.
pub fn forward_train<'a, S: Scalar>(
    model: &Model<S>,
    batch: &Batch,
    mut mode: TrainMode<'a, S>,
) -> Result<TrainForward<S>> {
    let cfg = &model.config;
    let (b, n) = (batch.b, batch.n);
    let l = cfg.n_layers;
    let tau = S::from_f64(cfg.tau);
    if let TrainMode::Forced(d) = &mode {
        if d.len() != l {
            return Err(Error::Contract(format!(
                "forced decisions cover {} layers, model has {l}",
                d.len()
            )));
        }
    }

    let graph: Graph<S> = Graph::new();
    let bound = BoundModel::bind(model, &graph);
    let mut h = embed(&graph, &bound, cfg, &batch.token_ids, b, n)?;

    // Forcing vectors over the flattened [B, N] grid.
    let keep_positions = cfg.force_keep.positions(n);
    let force_keep: Option<Vec<S>> = if keep_positions.is_empty() {
        None
    } else {
        let mut v = vec![S::zero(); b * n];
        for bi in 0..b {
            for &p in &keep_positions {
                v[bi * n + p] = S::one();
            }
        }
        Some(v)
    };
    // Padding is force-skimmed entering layer 1; monotonicity keeps it out.
    let force_skim: Option<Vec<S>> = if batch.pad_mask.iter().all(|&m| m) {
        None
    } else {
        Some(
            batch
                .pad_mask
                .iter()
                .map(|&m| if m { S::zero() } else { S::one() })
                .collect(),
        )
    };

    let mut entering: Vec<Tensor<S>> = vec![graph.full(S::one(), &[b, n])];
    let mut snapshots: Vec<Tensor<S>> = Vec::with_capacity(l + 1);
    let mut hard_prev = vec![S::one(); b * n];
    let mut raw_decisions = Vec::with_capacity(l);
    let mut cumulative = Vec::with_capacity(l);
    let mut soft_keep = Vec::with_capacity(l);

    for i in 0..l {
        let pi = skim_predict(&h, &bound.predictors[i])?;
        let decision_mode = match &mut mode {
            TrainMode::SampledHard(rng) => DecisionMode::HardSt {
                noise: sample_gumbel(rng, b * n * 2),
                tau,
            },
            TrainMode::SampledSoft(rng) => DecisionMode::Soft {
                noise: sample_gumbel(rng, b * n * 2),
                tau,
            },
            TrainMode::Argmax => DecisionMode::Argmax,
            TrainMode::Forced(d) => DecisionMode::Forced(d[i].clone()),
        };
        let dec: Decision<S> = gumbel_softmax_decision(&pi, &decision_mode)?;
        let forcing = MaskForcing {
            keep: force_keep.clone(),
            skim: if i == 0 { force_skim.clone() } else { None },
        };
        let e_next = accumulate_mask(entering.last().expect("nonempty"), &dec.st, &forcing)?;
        let hard_next = accumulate_mask_values(
            &hard_prev,
            &dec.hard,
            forcing.keep.as_deref(),
            forcing.skim.as_deref(),
        );

        snapshots.push(h.clone());
        let h_next = match cfg.attention_mask_mode {
            AttentionMaskMode::PreSoftmaxAdditive => {
                // Zero out skimmed rows (the gradient path into the
                // predictor) and block attention to them with -inf columns.
                let mask3 = e_next.reshape(&[b, n, 1])?.broadcast_to(&[b, n, cfg.d_model])?;
                let h_in = h.mul(&mask3)?;
                let bias = graph.constant(attention_bias_values(&hard_next, b, n), &[b, n, n]);
                encoder_layer_forward(&h_in, Some(&bias), None, &bound.layers[i], cfg, i)?
            }
            AttentionMaskMode::PostSoftmaxMultiplicative => {
                // Paper-literal form: attention weights to skimmed tokens are
                // multiplied to zero after the softmax; rows are not
                // renormalized.
                encoder_layer_forward(&h, None, Some(&e_next), &bound.layers[i], cfg, i)?
            }
        };
        h = h_next;

        raw_decisions.push(dec.hard);
        soft_keep.push(dec.soft_keep);
        cumulative.push(hard_next.clone());
        entering.push(e_next);
        hard_prev = hard_next;
    }
    snapshots.push(h);

    let assembled = assemble_forwarded_output(&snapshots, &entering)?;
    let logits = head_forward(&assembled, &bound, cfg)?;
    let targets = build_targets(batch, cfg.head_kind)?;
    let flat_logits = match cfg.head_kind {
        HeadKind::SequenceClassification => logits.clone(),
        HeadKind::TokenClassification => logits.reshape(&[b * n, cfg.n_classes])?,
    };
    let loss_downstream = flat_logits.cross_entropy(&targets)?;
    let loss_skim = skim_loss(&entering[1..], batch.valid_count())?;
    let loss_total = total_loss(&loss_downstream, &loss_skim, S::from_f64(cfg.lambda))?;
    if loss_total.item().is_nan() {
        return Err(Error::NumericFault {
            layer: l,
            what: "NaN in training loss".into(),
        });
    }

    let state = SkimState::from_masks(l, b, n, raw_decisions, cumulative, soft_keep)?;
    Ok(TrainForward {
        graph,
        bound,
        result: ForwardResult {
            logits,
            assembled,
            state,
            loss_downstream,
            loss_skim,
            loss_total,
        },
    })
}

fn build_targets(batch: &Batch, kind: HeadKind) -> Result<Vec<i64>> {
    match kind {
        HeadKind::SequenceClassification => batch
            .labels
            .iter()
            .map(|l| match l {
                Label::Seq(v) => Ok(*v as i64),
                Label::Token(_) => Err(Error::Contract(
                    "sequence head got token-level labels".into(),
                )),
            })
            .collect(),
        HeadKind::TokenClassification => {
            let mut out = vec![-1i64; batch.b * batch.n];
            for (i, l) in batch.labels.iter().enumerate() {
                match l {
                    Label::Token(per_tok) => {
                        for (j, &t) in per_tok.iter().enumerate() {
                            out[i * batch.n + j] = t as i64;
                        }
                    }
                    Label::Seq(_) => {
                        return Err(Error::Contract(
                            "token head got sequence-level labels".into(),
                        ))
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Gathered inference result for one example.
#[derive(Debug)]
pub struct InferForward<S: Scalar> {
    pub logits: Vec<S>,
    pub state: SkimState<S>,
    /// Full-length `[n, d]` assembled output values.
    pub assembled: Vec<S>,
    /// Instrumented forward FLOPs (multiply-add = 2) for this example.
    pub flops: u64,
}

/// Pruned forward for a single unpadded example: at each layer, tokens the
/// predictor skims are physically removed via gather; their incoming hidden
/// states are parked and reappear in the assembled output.
pub fn forward_infer<S: Scalar>(model: &Model<S>, tokens: &[u32]) -> Result<InferForward<S>> {
    forward_infer_impl(model, tokens, None)
}

/// Same as [`forward_infer`] but with imposed per-layer hard decisions,
/// indexed by original token position.
pub fn forward_infer_forced<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    decisions: &[Vec<S>],
) -> Result<InferForward<S>> {
    forward_infer_impl(model, tokens, Some(decisions))
}

fn forward_infer_impl<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    forced: Option<&[Vec<S>]>,
) -> Result<InferForward<S>> {
    let cfg = &model.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptyInput("forward_infer: empty example".into()));
    }
    let l = cfg.n_layers;
    let d = cfg.d_model;
    if let Some(dd) = forced {
        if dd.len() != l {
            return Err(Error::Contract(format!(
                "forced decisions cover {} layers, model has {l}",
                dd.len()
            )));
        }
    }
    let graph: Graph<S> = Graph::new();
    let bound = BoundModel::bind(model, &graph);
    let mut h = embed(&graph, &bound, cfg, tokens, 1, n)?;

    let force_set = cfg.force_keep.positions(n);
    let mut alive: Vec<usize> = (0..n).collect();
    let mut assembled_rows: Vec<Option<Vec<S>>> = vec![None; n];
    let mut raw_decisions = vec![vec![S::zero(); n]; l];
    let mut cumulative = vec![vec![S::zero(); n]; l];

    for i in 0..l {
        let k = alive.len();
        let pi = skim_predict(&h, &bound.predictors[i])?;
        let pv = pi.data();
        let mut keep_local: Vec<usize> = Vec::with_capacity(k);
        let mut dropped: Vec<usize> = Vec::new();
        for (j, &orig) in alive.iter().enumerate() {
            let hard = match forced {
                Some(dd) => dd[i][orig] == S::one(),
                // Ties break to keep.
                None => pv[2 * j + 1] >= pv[2 * j],
            };
            raw_decisions[i][orig] = if hard { S::one() } else { S::zero() };
            if hard || force_set.contains(&orig) {
                keep_local.push(j);
            } else {
                dropped.push(j);
            }
        }
        if keep_local.is_empty() {
            return Err(Error::EmptySequence { example: 0 });
        }
        if !dropped.is_empty() {
            let hv = h.data();
            for &j in &dropped {
                assembled_rows[alive[j]] = Some(hv[j * d..(j + 1) * d].to_vec());
            }
        }
        if keep_local.len() < k {
            h = h
                .reshape(&[k, d])?
                .gather_rows(&keep_local)?
                .reshape(&[1, keep_local.len(), d])?;
        }
        alive = keep_local.iter().map(|&j| alive[j]).collect();
        h = encoder_layer_forward(&h, None, None, &bound.layers[i], cfg, i)?;
        for &orig in &alive {
            cumulative[i][orig] = S::one();
        }
    }

    let hv = h.data();
    for (j, &orig) in alive.iter().enumerate() {
        assembled_rows[orig] = Some(hv[j * d..(j + 1) * d].to_vec());
    }
    let mut assembled = Vec::with_capacity(n * d);
    for row in &assembled_rows {
        // Every position is populated exactly once: dropped rows were parked
        // the moment they were gathered out, survivors come from the top.
        let row = row.as_ref().ok_or_else(|| {
            Error::SkimStateInvariant("assembled output has an unpopulated position".into())
        })?;
        assembled.extend_from_slice(row);
    }
    let assembled_t = graph.constant(assembled.clone(), &[1, n, d]);
    let logits = head_forward(&assembled_t, &bound, cfg)?.data();

    let soft_keep = raw_decisions.clone();
    let state = SkimState::from_masks(l, 1, n, raw_decisions, cumulative, soft_keep)?;
    Ok(InferForward {
        logits,
        state,
        assembled,
        flops: graph.flops(),
    })
}

/// Plain no-skim encoder forward on one (possibly padded) example: no
/// predictors, no masks. This is the baseline the FLOPs accounting measures
/// against; the returned counter must match the analytic baseline formula.
pub fn forward_plain<S: Scalar>(model: &Model<S>, tokens: &[u32]) -> Result<InferForward<S>> {
    let cfg = &model.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptyInput("forward_plain: empty example".into()));
    }
    let graph: Graph<S> = Graph::new();
    let bound = BoundModel::bind(model, &graph);
    let mut h = embed(&graph, &bound, cfg, tokens, 1, n)?;
    for i in 0..cfg.n_layers {
        h = encoder_layer_forward(&h, None, None, &bound.layers[i], cfg, i)?;
    }
    let assembled = h.data();
    let logits = head_forward(&h, &bound, cfg)?.data();
    let l = cfg.n_layers;
    let ones = vec![vec![S::one(); n]; l];
    let state = SkimState::from_masks(l, 1, n, ones.clone(), ones.clone(), ones)?;
    Ok(InferForward {
        logits,
        state,
        assembled,
        flops: graph.flops(),
    })
}

/// Max absolute discrepancy between the masked full-length forward and the
/// gathered forward under identical hard decisions: assembled outputs are
/// compared everywhere (survivor positions carry the final layer output),
/// plus the head logits.
pub fn equivalence_with_decisions<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    decisions: &[Vec<S>],
) -> Result<f64> {
    let gathered = forward_infer_forced(model, tokens, decisions)?;
    let batch = Batch {
        token_ids: tokens.to_vec(),
        b: 1,
        n: tokens.len(),
        pad_mask: vec![true; tokens.len()],
        true_lens: vec![tokens.len()],
        labels: vec![dummy_label(model, tokens.len())],
        relevant: vec![false; tokens.len()],
        policy: crate::config::PadPolicy::None,
    };
    let masked = forward_train(model, &batch, TrainMode::Forced(decisions))?;
    let ma = masked.result.assembled.data();
    let ml = masked.result.logits.data();
    let mut worst = 0.0f64;
    for (a, b) in ma.iter().zip(gathered.assembled.iter()) {
        worst = worst.max((a.to_f64s() - b.to_f64s()).abs());
    }
    for (a, b) in ml.iter().zip(gathered.logits.iter()) {
        worst = worst.max((a.to_f64s() - b.to_f64s()).abs());
    }
    Ok(worst)
}

fn dummy_label<S: Scalar>(model: &Model<S>, n: usize) -> Label {
    match model.config.head_kind {
        HeadKind::SequenceClassification => Label::Seq(0),
        HeadKind::TokenClassification => Label::Token(vec![0; n]),
    }
}

/// Run the model's own (noise-free) decisions on both paths and report the
/// worst per-position discrepancy across the batch.
pub fn check_train_infer_equivalence<S: Scalar>(model: &Model<S>, batch: &Batch) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..batch.b {
        let tokens = batch.example_tokens(i);
        let probe = forward_infer(model, tokens)?;
        worst = worst.max(equivalence_with_decisions(
            model,
            tokens,
            &probe.state.raw_decisions,
        )?);
    }
    Ok(worst)
}

/// Dataset-level evaluation through the gathered inference path.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Fraction of filler (non-relevant, real) tokens pruned before the
    /// final layer.
    pub skim_recall: f64,
    /// Fraction of relevant tokens never pruned.
    pub keep_precision: f64,
    pub trace: crate::trace::SkimTrace,
}

pub fn evaluate_dataset<S: Scalar>(
    model: &Model<S>,
    examples: &[crate::tasks::Example],
) -> Result<EvalOutcome> {
    use crate::tasks::Example;
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluate_dataset: no examples".into()));
    }
    let l = model.config.n_layers as u32;
    let mut trace_examples = Vec::with_capacity(examples.len());
    let mut seq_hits = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    let mut fillers = 0usize;
    let mut fillers_pruned = 0usize;
    let mut relevant_total = 0usize;
    let mut relevant_kept = 0usize;
    for (id, ex) in examples.iter().enumerate() {
        let Example {
            tokens,
            label,
            relevant,
        } = ex;
        let out = forward_infer(model, tokens)?;
        match (model.config.head_kind, label) {
            (HeadKind::SequenceClassification, Label::Seq(want)) => {
                let pred = argmax_row(&out.logits);
                if pred == *want as usize {
                    seq_hits += 1;
                }
            }
            (HeadKind::TokenClassification, Label::Token(per_tok)) => {
                let c = model.config.n_classes;
                for (j, &want) in per_tok.iter().enumerate() {
                    if argmax_row(&out.logits[j * c..(j + 1) * c]) == want as usize {
                        tok_hits += 1;
                    }
                    tok_total += 1;
                }
            }
            _ => {
                return Err(Error::Compatibility(
                    "dataset label kind does not match the model head".into(),
                ))
            }
        }
        for (t, &rel) in relevant.iter().enumerate() {
            let pruned = out.state.prune_layer[t] <= l;
            if rel {
                relevant_total += 1;
                if !pruned {
                    relevant_kept += 1;
                }
            } else {
                fillers += 1;
                if pruned {
                    fillers_pruned += 1;
                }
            }
        }
        trace_examples.push(crate::trace::TraceExample::from_state(
            id, tokens, &out.state, 0,
        ));
    }
    let accuracy = match model.config.head_kind {
        HeadKind::SequenceClassification => seq_hits as f64 / examples.len() as f64,
        HeadKind::TokenClassification => tok_hits as f64 / tok_total.max(1) as f64,
    };
    Ok(EvalOutcome {
        accuracy,
        skim_recall: if fillers == 0 {
            1.0
        } else {
            fillers_pruned as f64 / fillers as f64
        },
        keep_precision: if relevant_total == 0 {
            1.0
        } else {
            relevant_kept as f64 / relevant_total as f64
        },
        trace: crate::trace::SkimTrace {
            config_digest: model.config.digest(),
            examples: trace_examples,
        },
    })
}

fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
