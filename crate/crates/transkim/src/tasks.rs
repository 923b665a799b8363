//! Synthetic datasets with known token-relevance ground truth, the
//! miniature vocabulary, and batch padding under the three policies.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PadPolicy;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const TRIGGER: u32 = 3;
/// Signal sub-vocabulary: ids in `[SIGNAL_LO, SIGNAL_HI)`.
pub const SIGNAL_LO: u32 = 4;
pub const SIGNAL_HI: u32 = 20;

/// Human-readable token string for traces and reports.
pub fn token_string(id: u32) -> String {
    match id {
        PAD => "[PAD]".into(),
        CLS => "[CLS]".into(),
        SEP => "[SEP]".into(),
        TRIGGER => "[TRG]".into(),
        s if (SIGNAL_LO..SIGNAL_HI).contains(&s) => format!("sig{s}"),
        other => format!("tok{other}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Seq(u32),
    Token(Vec<u32>),
}

/// One unpadded example. `relevant` marks ground-truth signal positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: Label,
    pub relevant: Vec<bool>,
}

impl Example {
    pub fn true_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Number of signal classes; a signal id's class is `id % SIGNAL_CLASSES`.
pub const SIGNAL_CLASSES: u32 = 4;

/// Label rule shared by the generator and every scorer: the class of the
/// signal tokens (the generator draws all signals from one class). A class
/// carries two bits, so no one-bit-per-token summary (such as the keep/skim
/// pattern itself) can stand in for reading a kept signal's value.
pub fn needle_label(signal_ids: &[u32]) -> u32 {
    signal_ids[0] % SIGNAL_CLASSES
}

/// Sequence-classification task: signal tokens hidden in filler determine
/// the label (the class shared by the signals); everything else is noise.
pub fn gen_needle(
    n_examples: usize,
    seq_len_range: (usize, usize),
    n_signal: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let (lo, hi) = seq_len_range;
    if vocab <= SIGNAL_HI as usize + 1 {
        return Err(Error::Config(format!(
            "vocab_size {vocab} too small to separate signal ids [{SIGNAL_LO},{SIGNAL_HI}) from filler"
        )));
    }
    if n_signal == 0 {
        return Err(Error::Config("n_signal must be >= 1".into()));
    }
    if lo < n_signal + 2 || lo > hi {
        return Err(Error::Config(format!(
            "seq_len_range ({lo},{hi}) cannot hold CLS + {n_signal} signals + SEP"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let len = rng.random_range(lo..=hi);
        let mut tokens = vec![0u32; len];
        tokens[0] = CLS;
        tokens[len - 1] = SEP;
        let body: Vec<usize> = (1..len - 1).collect();
        let signal_pos = sample_positions(&mut rng, body.len(), n_signal);
        let mut relevant = vec![false; len];
        relevant[0] = true;
        let signal_ids = draw_signal_ids(&mut rng, n_signal);
        let mut next_signal = 0usize;
        for (i, slot) in body.iter().enumerate() {
            if signal_pos.contains(&i) {
                tokens[*slot] = signal_ids[next_signal];
                next_signal += 1;
                relevant[*slot] = true;
            } else {
                tokens[*slot] = rng.random_range(SIGNAL_HI..vocab as u32);
            }
        }
        let label = needle_label(&signal_ids);
        out.push(Example {
            tokens,
            label: Label::Seq(label),
            relevant,
        });
    }
    Ok(out)
}

/// Signal ids for one example: a uniformly drawn class, each id drawn from
/// that class's members. Labels are balanced across classes by construction.
fn draw_signal_ids(rng: &mut ChaCha8Rng, n_signal: usize) -> Vec<u32> {
    let class = rng.random_range(0..SIGNAL_CLASSES);
    let members: Vec<u32> = (SIGNAL_LO..SIGNAL_HI)
        .filter(|id| id % SIGNAL_CLASSES == class)
        .collect();
    (0..n_signal)
        .map(|_| members[rng.random_range(0..members.len())])
        .collect()
}

fn sample_positions(rng: &mut ChaCha8Rng, pool: usize, k: usize) -> Vec<usize> {
    // Fisher-Yates prefix over 0..pool.
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..k.min(pool) {
        let j = rng.random_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Token-classification task: a trigger token opens a contiguous span;
/// each token is labeled inside (1) or outside (0) the span.
pub fn gen_span(
    n_examples: usize,
    seq_len_range: (usize, usize),
    span_len_range: (usize, usize),
    vocab: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let (lo, hi) = seq_len_range;
    let (slo, shi) = span_len_range;
    if vocab <= SIGNAL_HI as usize + 1 {
        return Err(Error::Config(format!(
            "vocab_size {vocab} too small for the reserved id layout"
        )));
    }
    if slo < 1 || slo > shi {
        return Err(Error::Config(format!("span_len_range ({slo},{shi}) invalid")));
    }
    if lo < slo + 3 || lo > hi {
        return Err(Error::Config(format!(
            "seq_len_range ({lo},{hi}) cannot hold CLS + trigger + span of {slo} + SEP"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let mut placed = None;
        for _attempt in 0..100 {
            let len = rng.random_range(lo..=hi);
            let span_len = rng.random_range(slo..=shi);
            // Trigger at p, span at p+1 ..= p+span_len, all before the SEP.
            if 1 + span_len + 1 >= len {
                continue;
            }
            let p = rng.random_range(1..len - 1 - span_len);
            placed = Some((len, span_len, p));
            break;
        }
        let (len, span_len, p) = placed.ok_or_else(|| {
            Error::Config("span generation failed after 100 retries".into())
        })?;
        let mut tokens = vec![0u32; len];
        tokens[0] = CLS;
        tokens[len - 1] = SEP;
        for slot in tokens.iter_mut().take(len - 1).skip(1) {
            *slot = rng.random_range(SIGNAL_HI..vocab as u32);
        }
        tokens[p] = TRIGGER;
        let mut labels = vec![0u32; len];
        let mut relevant = vec![false; len];
        relevant[0] = true;
        relevant[p] = true;
        for q in p + 1..=p + span_len {
            labels[q] = 1;
            relevant[q] = true;
        }
        out.push(Example {
            tokens,
            label: Label::Token(labels),
            relevant,
        });
    }
    Ok(out)
}

/// A padded batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `b * n` token ids, PAD-filled.
    pub token_ids: Vec<u32>,
    pub b: usize,
    pub n: usize,
    /// `b * n`; true at real positions.
    pub pad_mask: Vec<bool>,
    pub true_lens: Vec<usize>,
    pub labels: Vec<Label>,
    /// `b * n`; ground-truth relevance, false at padding.
    pub relevant: Vec<bool>,
    pub policy: PadPolicy,
}

impl Batch {
    pub fn valid_count(&self) -> usize {
        self.true_lens.iter().sum()
    }

    /// Tokens of example `i` without padding.
    pub fn example_tokens(&self, i: usize) -> &[u32] {
        &self.token_ids[i * self.n..i * self.n + self.true_lens[i]]
    }
}

/// Align examples to a common length per the padding policy.
pub fn pad_batch(examples: &[Example], policy: PadPolicy, max_len: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("pad_batch: no examples".into()));
    }
    if policy == PadPolicy::None && examples.len() != 1 {
        return Err(Error::Contract(format!(
            "padding policy 'none' requires batch size 1, got {}",
            examples.len()
        )));
    }
    let longest = examples.iter().map(|e| e.true_len()).max().unwrap_or(0);
    if longest > max_len {
        return Err(Error::LengthError {
            len: longest,
            max_len,
        });
    }
    let n = match policy {
        PadPolicy::Sequence => max_len,
        PadPolicy::Batch | PadPolicy::None => longest,
    };
    let b = examples.len();
    let mut token_ids = vec![PAD; b * n];
    let mut pad_mask = vec![false; b * n];
    let mut relevant = vec![false; b * n];
    let mut true_lens = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for (i, ex) in examples.iter().enumerate() {
        let len = ex.true_len();
        token_ids[i * n..i * n + len].copy_from_slice(&ex.tokens);
        for j in 0..len {
            pad_mask[i * n + j] = true;
            relevant[i * n + j] = ex.relevant[j];
        }
        true_lens.push(len);
        labels.push(ex.label.clone());
    }
    Ok(Batch {
        token_ids,
        b,
        n,
        pad_mask,
        true_lens,
        labels,
        relevant,
        policy,
    })
}

/// Write examples as newline-delimited JSON `{tokens, label, relevant}`.
pub fn write_ndjson(path: &std::path::Path, examples: &[Example]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| Error::Schema(format!("serialize example: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_ndjson(path: &std::path::Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: format!("{}:{}", path.display(), i + 1),
            what: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scorer: recompute the needle label from scratch.
    fn score_needle(ex: &Example) -> u32 {
        let ids: Vec<u32> = ex
            .tokens
            .iter()
            .copied()
            .filter(|id| (SIGNAL_LO..SIGNAL_HI).contains(id))
            .collect();
        assert!(!ids.is_empty(), "needle example must contain a signal");
        let class = ids[0] % SIGNAL_CLASSES;
        assert!(
            ids.iter().all(|&id| id % SIGNAL_CLASSES == class),
            "all signals share one class"
        );
        class
    }

    #[test]
    fn needle_labels_match_independent_scorer() {
        let examples = gen_needle(10_000, (16, 48), 3, 1024, 9).unwrap();
        for ex in &examples {
            match ex.label {
                Label::Seq(l) => assert_eq!(l, score_needle(ex)),
                _ => panic!("needle label must be scalar"),
            }
        }
    }

    #[test]
    fn needle_label_invariant_under_filler_permutation() {
        let examples = gen_needle(200, (16, 32), 3, 1024, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ex in &examples {
            let mut shuffled = ex.clone();
            // Permute filler positions only.
            let fillers: Vec<usize> = (0..ex.tokens.len())
                .filter(|&i| ex.tokens[i] >= SIGNAL_HI)
                .collect();
            for i in (1..fillers.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.tokens.swap(fillers[i], fillers[j]);
            }
            assert_eq!(score_needle(&shuffled), score_needle(ex));
        }
    }

    #[test]
    fn needle_determinism_and_boundaries() {
        let a = gen_needle(50, (16, 48), 3, 1024, 77).unwrap();
        let b = gen_needle(50, (16, 48), 3, 1024, 77).unwrap();
        assert_eq!(a, b);
        // All-signal body: everything except the closing SEP is relevant.
        let all = gen_needle(5, (6, 6), 4, 1024, 3).unwrap();
        for ex in &all {
            let last = ex.tokens.len() - 1;
            assert!(ex.relevant[..last].iter().all(|&r| r));
            assert!(!ex.relevant[last]);
        }
        // Too-small vocab rejected.
        assert!(gen_needle(1, (16, 16), 3, 20, 0).is_err());
    }

    #[test]
    fn span_labels_rederive_from_trigger() {
        let examples = gen_span(10_000, (16, 48), (4, 12), 1024, 11).unwrap();
        for ex in &examples {
            let p = ex
                .tokens
                .iter()
                .position(|&t| t == TRIGGER)
                .expect("trigger present");
            let labels = match &ex.label {
                Label::Token(l) => l,
                _ => panic!("span labels must be per-token"),
            };
            let span_len = labels.iter().filter(|&&l| l == 1).count();
            for (q, &l) in labels.iter().enumerate() {
                let inside = q > p && q <= p + span_len;
                assert_eq!(l == 1, inside, "pos {q} of {:?}", ex.tokens);
            }
        }
    }

    #[test]
    fn span_length_one() {
        let examples = gen_span(100, (8, 16), (1, 1), 512, 12).unwrap();
        for ex in &examples {
            match &ex.label {
                Label::Token(l) => assert_eq!(l.iter().filter(|&&x| x == 1).count(), 1),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn pad_batch_policies() {
        let examples = vec![
            Example {
                tokens: vec![CLS, 30, SEP],
                label: Label::Seq(0),
                relevant: vec![true, false, false],
            },
            Example {
                tokens: vec![CLS, 31, 32, 33, SEP],
                label: Label::Seq(1),
                relevant: vec![true, false, false, false, false],
            },
        ];
        let batch = pad_batch(&examples, PadPolicy::Batch, 8).unwrap();
        assert_eq!(batch.n, 5);
        assert_eq!(batch.token_ids[3], PAD);
        let seq = pad_batch(&examples, PadPolicy::Sequence, 8).unwrap();
        assert_eq!(seq.n, 8);
        assert!(matches!(
            pad_batch(&examples, PadPolicy::None, 8).unwrap_err(),
            Error::Contract(_)
        ));
        let single = pad_batch(&examples[..1], PadPolicy::None, 8).unwrap();
        assert_eq!(single.n, 3);
        // Sequence-policy overflow.
        assert!(matches!(
            pad_batch(&examples, PadPolicy::Sequence, 4).unwrap_err(),
            Error::LengthError { .. }
        ));
    }

    #[test]
    fn ndjson_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ndjson");
        let examples = gen_needle(20, (8, 16), 2, 256, 5).unwrap();
        write_ndjson(&path, &examples).unwrap();
        let back = read_ndjson(&path).unwrap();
        assert_eq!(examples, back);
    }
}
