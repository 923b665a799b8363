//! Serializable per-example skim record: which layer pruned each token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::skim::SkimState;
use crate::tasks::token_string;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExample {
    pub id: usize,
    pub tokens: Vec<String>,
    pub true_len: usize,
    /// Per token: `k` in `[1, L]` = first skimmed entering layer `k`;
    /// `L + 1` = processed by every layer.
    pub prune_layer: Vec<u32>,
    /// Tokens processed by each layer.
    pub kept_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkimTrace {
    pub config_digest: String,
    pub examples: Vec<TraceExample>,
}

impl TraceExample {
    /// Build from one example's skim state (no padding positions).
    pub fn from_state<S: Scalar>(
        id: usize,
        tokens: &[u32],
        state: &SkimState<S>,
        example_idx: usize,
    ) -> Self {
        let n = state.n;
        let true_len = tokens.len();
        debug_assert!(true_len <= n);
        let base = example_idx * n;
        let prune_layer: Vec<u32> = (0..true_len)
            .map(|t| state.prune_layer[base + t])
            .collect();
        let kept_per_layer = kept_from_prune(&prune_layer, state.n_layers);
        TraceExample {
            id,
            tokens: tokens.iter().map(|&t| token_string(t)).collect(),
            true_len,
            prune_layer,
            kept_per_layer,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.kept_per_layer.len() != n_layers {
            return Err(Error::Schema(format!(
                "example {}: kept_per_layer has {} entries, expected {}",
                self.id,
                self.kept_per_layer.len(),
                n_layers
            )));
        }
        if self.tokens.len() != self.true_len || self.prune_layer.len() != self.true_len {
            return Err(Error::Schema(format!(
                "example {}: tokens/prune_layer length disagrees with true_len {}",
                self.id, self.true_len
            )));
        }
        for (t, &p) in self.prune_layer.iter().enumerate() {
            if p < 1 || p > (n_layers + 1) as u32 {
                return Err(Error::Schema(format!(
                    "example {}: prune_layer[{t}] = {p} outside [1, {}]",
                    self.id,
                    n_layers + 1
                )));
            }
        }
        let want = kept_from_prune(&self.prune_layer, n_layers);
        if want != self.kept_per_layer {
            return Err(Error::Schema(format!(
                "example {}: kept_per_layer {:?} inconsistent with prune_layer (expected {:?})",
                self.id, self.kept_per_layer, want
            )));
        }
        Ok(())
    }
}

/// Tokens processed by layer `i` are those with `prune_layer > i + 1`.
pub fn kept_from_prune(prune_layer: &[u32], n_layers: usize) -> Vec<usize> {
    (0..n_layers)
        .map(|i| prune_layer.iter().filter(|&&p| p as usize > i + 1).count())
        .collect()
}

impl SkimTrace {
    pub fn n_layers(&self) -> usize {
        self.examples
            .first()
            .map(|e| e.kept_per_layer.len())
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        for ex in &self.examples {
            ex.validate(l)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("serialize trace: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Parse and validate; malformed JSON reports the path of the fault.
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let trace: SkimTrace =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Malformed {
                path: format!("{} (at {})", path.display(), e.path()),
                what: e.inner().to_string(),
            })?;
        trace.validate()?;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SkimTrace {
        SkimTrace {
            config_digest: "deadbeef".into(),
            examples: vec![TraceExample {
                id: 0,
                tokens: vec!["[CLS]".into(), "tok30".into(), "[SEP]".into()],
                true_len: 3,
                prune_layer: vec![3, 1, 2],
                kept_per_layer: vec![2, 1],
            }],
        }
    }

    #[test]
    fn roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        let trace = sample();
        trace.validate().unwrap();
        trace.write(&path).unwrap();
        assert_eq!(SkimTrace::read(&path).unwrap(), trace);
    }

    #[test]
    fn inconsistent_kept_counts_rejected() {
        let mut trace = sample();
        trace.examples[0].kept_per_layer = vec![2, 2];
        assert!(trace.validate().is_err());
    }

    #[test]
    fn malformed_json_reports_fault_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"config_digest":"x","examples":[{"id":0,"tokens":["a"],"true_len":1,"prune_layer":["oops"],"kept_per_layer":[1]}]}"#,
        )
        .unwrap();
        let err = SkimTrace::read(&path).unwrap_err().to_string();
        assert!(err.contains("prune_layer"), "{err}");
    }

    #[test]
    fn kept_counts_from_prune_layers() {
        // L=3: prune 4 = survivor counts toward every layer.
        assert_eq!(kept_from_prune(&[4, 1, 2, 3], 3), vec![3, 2, 1]);
    }
}
