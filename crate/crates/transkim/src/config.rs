//! Model and run configuration, the key=value config format, and overrides.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which positions may never be skimmed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForceKeep {
    /// Keep only position 0 (the CLS slot).
    ClsOnly,
    /// No forced positions; a layer may drop everything.
    None,
    /// Explicit position set.
    Custom(Vec<usize>),
}

impl ForceKeep {
    /// Forced positions for a sequence of length `n`.
    pub fn positions(&self, n: usize) -> Vec<usize> {
        match self {
            ForceKeep::ClsOnly => {
                if n > 0 {
                    vec![0]
                } else {
                    vec![]
                }
            }
            ForceKeep::None => vec![],
            ForceKeep::Custom(v) => v.iter().copied().filter(|&p| p < n).collect(),
        }
    }
}

/// How training-time attention hides skimmed tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMaskMode {
    /// `-inf` added to masked key columns before the softmax. Rows stay
    /// normalized over survivors, so masked training equals gathered
    /// inference.
    PreSoftmaxAdditive,
    /// Attention weights multiplied by the mask after the softmax. Rows no
    /// longer sum to one; kept for fidelity experiments.
    PostSoftmaxMultiplicative,
}

/// Padding convention a speedup is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadPolicy {
    /// Pad every sequence to the fixed `max_len`.
    Sequence,
    /// Pad to the longest true length in the mini-batch.
    Batch,
    /// No padding; batch size is forced to 1.
    None,
}

impl fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PadPolicy::Sequence => write!(f, "sequence"),
            PadPolicy::Batch => write!(f, "batch"),
            PadPolicy::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for PadPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(PadPolicy::Sequence),
            "batch" => Ok(PadPolicy::Batch),
            "none" => Ok(PadPolicy::None),
            other => Err(Error::Config(format!(
                "unknown padding policy '{other}' (expected sequence|batch|none)"
            ))),
        }
    }
}

/// Task head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Logits from the position-0 output only.
    SequenceClassification,
    /// Per-position logits over the full assembled output.
    TokenClassification,
}

/// Architecture plus skimming hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Harmony coefficient weighting the skim loss.
    pub lambda: f64,
    /// Mean of the unbalanced predictor-bias initialization.
    pub mu0: f64,
    /// Std-dev of all weight initializations.
    pub sigma: f64,
    pub force_keep: ForceKeep,
    pub attention_mask_mode: AttentionMaskMode,
    pub head_kind: HeadKind,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: minutes-scale training on one CPU.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            vocab_size: 1024,
            max_len: 64,
            tau: 0.1,
            lambda: 0.0,
            mu0: 5.0,
            sigma: 0.02,
            force_keep: ForceKeep::ClsOnly,
            attention_mask_mode: AttentionMaskMode::PreSoftmaxAdditive,
            head_kind: HeadKind::SequenceClassification,
            n_classes: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_layers < 1 {
            problems.push("model.n_layers must be >= 1".to_string());
        }
        if self.n_heads < 1 || !self.d_model.is_multiple_of(self.n_heads.max(1)) {
            problems.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 1 {
            problems.push("model.max_len must be >= 1".to_string());
        }
        if self.d_ffn < 1 {
            problems.push("model.d_ffn must be >= 1".to_string());
        }
        if self.vocab_size < 1 {
            problems.push("model.vocab_size must be >= 1".to_string());
        }
        if !(self.tau > 0.0) {
            problems.push(format!("model.tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("model.lambda must be in [0,1], got {}", self.lambda));
        }
        if self.mu0 < 0.0 {
            problems.push(format!("model.mu0 must be >= 0, got {}", self.mu0));
        }
        if !(self.sigma > 0.0) {
            problems.push(format!("model.sigma must be > 0, got {}", self.sigma));
        }
        if self.n_classes < 2 {
            problems.push("model.n_classes must be >= 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Stable digest of everything that must match between a checkpoint and
    /// the data it is evaluated on. FNV-1a over the canonical JSON form.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Synthetic-task generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n_examples: usize,
    pub n_eval: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub n_signal: usize,
    pub span_min: usize,
    pub span_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Needle,
    Span,
}

impl TaskConfig {
    pub fn default_needle() -> Self {
        TaskConfig {
            kind: TaskKind::Needle,
            n_examples: 2048,
            n_eval: 512,
            seq_len_min: 16,
            seq_len_max: 48,
            n_signal: 1,
            span_min: 4,
            span_max: 12,
        }
    }
}

/// Optimizer loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            epochs: 10,
            batch_size: 32,
            seed: 42,
        }
    }
}

/// Everything a command needs: model, task, optimizer, sweep grid, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimConfig,
    pub lambda_grid: Option<Vec<f64>>,
    pub sweep_epochs: Option<usize>,
    pub train_policy: PadPolicy,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            task: TaskConfig::default_needle(),
            optimizer: OptimConfig::default(),
            lambda_grid: None,
            sweep_epochs: None,
            train_policy: PadPolicy::Batch,
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Parse UTF-8 key=value lines. `#` starts a comment; blank lines are
    /// skipped. Every problem is reported with its line or key; unknown keys
    /// are errors. Validation runs after all keys are applied.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.apply(k.trim(), v.trim()) {
                        problems.push(format!("line {}: {}", lineno + 1, e));
                    }
                }
                None => problems.push(format!(
                    "line {}: expected key=value, got '{}'",
                    lineno + 1,
                    line
                )),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Apply repeatable `--set key=value` overrides after the file.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        let mut problems = Vec::new();
        for s in sets {
            match s.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.apply(k.trim(), v.trim()) {
                        problems.push(format!("--set {s}: {e}"));
                    }
                }
                None => problems.push(format!("--set {s}: expected key=value")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        self.finish()
    }

    /// Re-resolve derived fields and validate.
    pub fn finish(&mut self) -> Result<()> {
        self.model.head_kind = match self.task.kind {
            TaskKind::Needle => HeadKind::SequenceClassification,
            TaskKind::Span => HeadKind::TokenClassification,
        };
        self.model.n_classes = match self.task.kind {
            TaskKind::Needle => crate::tasks::SIGNAL_CLASSES as usize,
            TaskKind::Span => 2,
        };
        self.model.validate()?;
        let mut problems = Vec::new();
        if self.task.seq_len_min < 3 || self.task.seq_len_min > self.task.seq_len_max {
            problems.push(format!(
                "task.seq_len range [{}, {}] invalid (min >= 3, min <= max)",
                self.task.seq_len_min, self.task.seq_len_max
            ));
        }
        if self.task.seq_len_max > self.model.max_len {
            problems.push(format!(
                "task.seq_len_max {} exceeds model.max_len {}",
                self.task.seq_len_max, self.model.max_len
            ));
        }
        if self.task.n_signal < 1 {
            problems.push("task.n_signal must be >= 1".into());
        }
        if self.optimizer.batch_size < 1 {
            problems.push("optimizer.batch_size must be >= 1".into());
        }
        if self.optimizer.epochs < 1 {
            problems.push("optimizer.epochs must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0) {
            problems.push(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr));
        }
        if let Some(grid) = &self.lambda_grid {
            for v in grid {
                if !(0.0..=1.0).contains(v) {
                    problems.push(format!("lambda_grid entry {v} outside [0,1]"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn apply(&mut self, key: &str, val: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, val: &str) -> Result<T> {
            val.parse::<T>()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse value '{val}'")))
        }
        match key {
            "model.n_layers" => self.model.n_layers = p(key, val)?,
            "model.n_heads" => self.model.n_heads = p(key, val)?,
            "model.d_model" => self.model.d_model = p(key, val)?,
            "model.d_ffn" => self.model.d_ffn = p(key, val)?,
            "model.vocab_size" => self.model.vocab_size = p(key, val)?,
            "model.max_len" => self.model.max_len = p(key, val)?,
            "model.tau" => self.model.tau = p(key, val)?,
            "model.lambda" | "lambda" => self.model.lambda = p(key, val)?,
            "model.mu0" => self.model.mu0 = p(key, val)?,
            "model.sigma" => self.model.sigma = p(key, val)?,
            "model.force_keep" => {
                self.model.force_keep = match val {
                    "cls_only" => ForceKeep::ClsOnly,
                    "none" => ForceKeep::None,
                    custom => match custom.strip_prefix("custom:") {
                        Some(list) => {
                            let mut idx = Vec::new();
                            for part in list.split(',').filter(|s| !s.is_empty()) {
                                idx.push(p::<usize>(key, part)?);
                            }
                            ForceKeep::Custom(idx)
                        }
                        None => {
                            return Err(Error::Config(format!(
                                "key '{key}': expected cls_only|none|custom:i,j,... got '{val}'"
                            )))
                        }
                    },
                };
            }
            "model.attention_mask_mode" => {
                self.model.attention_mask_mode = match val {
                    "additive" => AttentionMaskMode::PreSoftmaxAdditive,
                    "multiplicative" => AttentionMaskMode::PostSoftmaxMultiplicative,
                    _ => {
                        return Err(Error::Config(format!(
                            "key '{key}': expected additive|multiplicative, got '{val}'"
                        )))
                    }
                };
            }
            "task.kind" => {
                self.task.kind = match val {
                    "needle" => TaskKind::Needle,
                    "span" => TaskKind::Span,
                    _ => {
                        return Err(Error::Config(format!(
                            "key '{key}': expected needle|span, got '{val}'"
                        )))
                    }
                };
            }
            "task.n_examples" => self.task.n_examples = p(key, val)?,
            "task.n_eval" => self.task.n_eval = p(key, val)?,
            "task.seq_len_min" => self.task.seq_len_min = p(key, val)?,
            "task.seq_len_max" => self.task.seq_len_max = p(key, val)?,
            "task.n_signal" => self.task.n_signal = p(key, val)?,
            "task.span_min" => self.task.span_min = p(key, val)?,
            "task.span_max" => self.task.span_max = p(key, val)?,
            "optimizer.lr" => self.optimizer.lr = p(key, val)?,
            "optimizer.epochs" => self.optimizer.epochs = p(key, val)?,
            "optimizer.batch_size" => self.optimizer.batch_size = p(key, val)?,
            "optimizer.seed" | "seed" => self.optimizer.seed = p(key, val)?,
            "padding.policy" => self.train_policy = p(key, val)?,
            "lambda_grid" => {
                let mut grid = Vec::new();
                for part in val.split(',').filter(|s| !s.is_empty()) {
                    grid.push(p::<f64>(key, part)?);
                }
                if grid.is_empty() {
                    return Err(Error::Config("lambda_grid is empty".into()));
                }
                self.lambda_grid = Some(grid);
            }
            "sweep.epochs" => self.sweep_epochs = Some(p(key, val)?),
            "output_dir" => self.output_dir = val.to_string(),
            unknown => {
                return Err(Error::Config(format!("unknown key '{unknown}'")));
            }
        }
        Ok(())
    }

    /// Canonical key=value rendering of the resolved config.
    pub fn render(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("model.n_layers", self.model.n_layers.to_string());
        map.insert("model.n_heads", self.model.n_heads.to_string());
        map.insert("model.d_model", self.model.d_model.to_string());
        map.insert("model.d_ffn", self.model.d_ffn.to_string());
        map.insert("model.vocab_size", self.model.vocab_size.to_string());
        map.insert("model.max_len", self.model.max_len.to_string());
        map.insert("model.tau", self.model.tau.to_string());
        map.insert("model.lambda", self.model.lambda.to_string());
        map.insert("model.mu0", self.model.mu0.to_string());
        map.insert("model.sigma", self.model.sigma.to_string());
        map.insert(
            "model.force_keep",
            match &self.model.force_keep {
                ForceKeep::ClsOnly => "cls_only".to_string(),
                ForceKeep::None => "none".to_string(),
                ForceKeep::Custom(v) => format!(
                    "custom:{}",
                    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
                ),
            },
        );
        map.insert(
            "model.attention_mask_mode",
            match self.model.attention_mask_mode {
                AttentionMaskMode::PreSoftmaxAdditive => "additive".to_string(),
                AttentionMaskMode::PostSoftmaxMultiplicative => "multiplicative".to_string(),
            },
        );
        map.insert(
            "task.kind",
            match self.task.kind {
                TaskKind::Needle => "needle".to_string(),
                TaskKind::Span => "span".to_string(),
            },
        );
        map.insert("task.n_examples", self.task.n_examples.to_string());
        map.insert("task.n_eval", self.task.n_eval.to_string());
        map.insert("task.seq_len_min", self.task.seq_len_min.to_string());
        map.insert("task.seq_len_max", self.task.seq_len_max.to_string());
        map.insert("task.n_signal", self.task.n_signal.to_string());
        map.insert("task.span_min", self.task.span_min.to_string());
        map.insert("task.span_max", self.task.span_max.to_string());
        map.insert("optimizer.lr", self.optimizer.lr.to_string());
        map.insert("optimizer.epochs", self.optimizer.epochs.to_string());
        map.insert("optimizer.batch_size", self.optimizer.batch_size.to_string());
        map.insert("optimizer.seed", self.optimizer.seed.to_string());
        map.insert("padding.policy", self.train_policy.to_string());
        if let Some(grid) = &self.lambda_grid {
            map.insert(
                "lambda_grid",
                grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            );
        }
        if let Some(e) = self.sweep_epochs {
            map.insert("sweep.epochs", e.to_string());
        }
        map.insert("output_dir", self.output_dir.clone());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn parse_roundtrip_and_override() {
        let mut cfg = RunConfig::parse("model.d_model=32\nmodel.n_heads=2\n# comment\n").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        cfg.apply_overrides(&["lambda=0.3".to_string()]).unwrap();
        assert_eq!(cfg.model.lambda, 0.3);
        let rendered = cfg.render();
        let cfg2 = RunConfig::parse(&rendered).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let err = RunConfig::parse("model.bogus=1\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("model.bogus"), "{err}");
    }

    #[test]
    fn invalid_field_reported_by_key() {
        let err = RunConfig::parse("model.d_model=65\nmodel.n_heads=4\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("d_model"), "{err}");
    }

    #[test]
    fn digest_is_stable_and_config_sensitive() {
        let a = ModelConfig::desk();
        let mut b = ModelConfig::desk();
        assert_eq!(a.digest(), b.digest());
        b.d_model = 32;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn force_keep_positions() {
        assert_eq!(ForceKeep::ClsOnly.positions(5), vec![0]);
        assert!(ForceKeep::None.positions(5).is_empty());
        assert_eq!(ForceKeep::Custom(vec![1, 9]).positions(5), vec![1]);
    }
}
