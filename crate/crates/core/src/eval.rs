//! Metrics and the four-cell evaluation protocol: new-word accuracy and
//! WER, each under empty and full memory, with gate/location diagnostics.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline::Baseline;
use crate::data::{Split, UtteranceRecord};
use crate::memory::{EncodedMemory, MemoryEntry, MemoryModel, MemoryScores};
use crate::params::ParamStore;
use crate::tokenizer::BpeVocab;
use crate::training::build_memory_labels;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty reference")]
    EmptyReference,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Memory(#[from] crate::memory::MemoryError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Word-level Levenshtein edits (unit-cost sub/ins/del) over reference
/// length.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Case-folded, whitespace-delimited containment; multi-word phrases
/// must appear contiguously.
pub fn contains_phrase(transcript: &str, phrase: &str) -> bool {
    let words: Vec<String> = transcript.split_whitespace().map(|w| w.to_lowercase()).collect();
    let target: Vec<String> = phrase.split_whitespace().map(|w| w.to_lowercase()).collect();
    if target.is_empty() || words.len() < target.len() {
        return false;
    }
    (0..=words.len() - target.len()).any(|i| words[i..i + target.len()] == target[..])
}

/// Fraction of utterances whose designated new word appears in the
/// hypothesis transcript.
pub fn new_word_accuracy(results: &[(String, String)]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let correct = results.iter().filter(|(hyp, w)| contains_phrase(hyp, w)).count();
    correct as f64 / results.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct UtteranceDetail {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_word: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recalled: Option<bool>,
    /// Predicted BPE tokens.
    pub tokens: Vec<String>,
    /// Combiner weight g_t per token (baseline share).
    pub gates: Vec<f32>,
    /// Per-block argmax memory location per token.
    pub locations: Vec<Vec<usize>>,
    /// 1-based index of this utterance's new word in the memory list, if
    /// it is present there.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    /// "empty" or "full".
    pub condition: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_list_hash: Option<String>,
    pub seen_test_wer: f64,
    pub new_words_test_wer: f64,
    pub new_word_accuracy: f64,
    pub seen_test: Vec<UtteranceDetail>,
    pub new_words_test: Vec<UtteranceDetail>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub config_hash: String,
    pub conditions: Vec<ConditionReport>,
}

pub fn memory_list_hash(entries: &[MemoryEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.text.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Evaluator<'a> {
    pub store: &'a ParamStore<f32>,
    pub baseline: &'a Baseline,
    pub memory: Option<&'a MemoryModel>,
    pub vocab: &'a BpeVocab,
    pub max_decode_len: usize,
}

impl<'a> Evaluator<'a> {
    fn decode(
        &self,
        features: &[f32],
        memory: Option<&EncodedMemory>,
    ) -> (Vec<usize>, Option<MemoryScores>) {
        match (self.memory, memory) {
            (Some(m), Some(enc)) => {
                let (toks, diag) =
                    m.greedy_decode(self.store, self.baseline, features, enc, self.max_decode_len);
                (toks, Some(diag))
            }
            _ => (self.baseline.greedy_decode(self.store, features, self.max_decode_len), None),
        }
    }

    fn decode_detail(
        &self,
        split: &Split,
        rec: &UtteranceRecord,
        memory: Option<&EncodedMemory>,
        entries: &[MemoryEntry],
    ) -> Result<(usize, usize, UtteranceDetail), EvalError> {
        let feats = split.features(rec)?;
        let (tokens, diag) = self.decode(&feats, memory);
        let hypothesis = self.vocab.decode(&tokens)?;
        let r: Vec<&str> = rec.transcript.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        let edits = edit_distance(&r, &h);
        let entry_index = rec
            .new_word
            .as_ref()
            .and_then(|w| entries.iter().position(|e| &e.text == w).map(|i| i + 1));
        let recalled = rec.new_word.as_ref().map(|w| contains_phrase(&hypothesis, w));
        let (gates, locations) = match &diag {
            Some(d) => {
                let n = tokens.len().min(d.combine_gate.len());
                let locs: Vec<Vec<usize>> =
                    (0..n).map(|t| d.argmax.iter().map(|blk| blk[t]).collect()).collect();
                (d.combine_gate[..n].to_vec(), locs)
            }
            None => (vec![], vec![]),
        };
        let detail = UtteranceDetail {
            id: rec.id.clone(),
            reference: rec.transcript.clone(),
            hypothesis,
            new_word: rec.new_word.clone(),
            recalled,
            tokens: tokens
                .iter()
                .map(|&t| self.vocab.token(t).unwrap_or("<?>").to_string())
                .collect(),
            gates,
            locations,
            entry_index,
        };
        Ok((edits, r.len(), detail))
    }

    /// Decode every utterance of a split under one memory condition.
    pub fn eval_split(
        &self,
        split: &Split,
        memory: Option<&EncodedMemory>,
        entries: &[MemoryEntry],
    ) -> Result<(f64, Vec<UtteranceDetail>), EvalError> {
        let mut details = Vec::new();
        let mut edits = 0usize;
        let mut ref_words = 0usize;
        for rec in &split.manifest.utterances {
            let (e, n, detail) = self.decode_detail(split, rec, memory, entries)?;
            edits += e;
            ref_words += n;
            details.push(detail);
        }
        let wer = if ref_words == 0 { 0.0 } else { edits as f64 / ref_words as f64 };
        Ok((wer, details))
    }

    /// Decode a single utterance under the given memory entries.
    pub fn eval_one(
        &self,
        split: &Split,
        rec: &UtteranceRecord,
        entries: &[MemoryEntry],
    ) -> Result<(f64, UtteranceDetail), EvalError> {
        let memory = match self.memory {
            Some(m) => Some(m.snapshot_memory(self.store, entries)?),
            None => None,
        };
        let (edits, n, detail) = self.decode_detail(split, rec, memory.as_ref(), entries)?;
        Ok((edits as f64 / n.max(1) as f64, detail))
    }

    fn condition(
        &self,
        name: &str,
        seen: &Split,
        new_words: &Split,
        entries: &[MemoryEntry],
    ) -> Result<ConditionReport, EvalError> {
        let memory = match self.memory {
            Some(m) => Some(m.snapshot_memory(self.store, entries)?),
            None => None,
        };
        let (seen_wer, seen_details) = self.eval_split(seen, memory.as_ref(), entries)?;
        let (nw_wer, nw_details) = self.eval_split(new_words, memory.as_ref(), entries)?;
        let acc_pairs: Vec<(String, String)> = nw_details
            .iter()
            .filter_map(|d| d.new_word.as_ref().map(|w| (d.hypothesis.clone(), w.clone())))
            .collect();
        Ok(ConditionReport {
            condition: name.to_string(),
            memory_list_hash: if entries.is_empty() { None } else { Some(memory_list_hash(entries)) },
            seen_test_wer: seen_wer,
            new_words_test_wer: nw_wer,
            new_word_accuracy: new_word_accuracy(&acc_pairs),
            seen_test: seen_details,
            new_words_test: nw_details,
        })
    }

    /// The four-cell protocol: empty and full memory over both testsets.
    pub fn run_eval(
        &self,
        seen: &Split,
        new_words: &Split,
        full_memory: &[MemoryEntry],
        config_hash: &str,
    ) -> Result<EvalReport, EvalError> {
        let mut conditions = vec![self.condition("empty", seen, new_words, &[])?];
        if !full_memory.is_empty() {
            conditions.push(self.condition("full", seen, new_words, full_memory)?);
        }
        Ok(EvalReport {
            model: if self.memory.is_some() { "combined".into() } else { "baseline".into() },
            config_hash: config_hash.to_string(),
            conditions,
        })
    }
}

/// Token positions of `phrase` inside a hypothesis token sequence;
/// used for the gate/location diagnostics of recalled words.
pub fn phrase_token_positions(
    hyp_tokens: &[usize],
    phrase: &str,
    vocab: &BpeVocab,
) -> Vec<usize> {
    match MemoryEntry::new(phrase, vocab) {
        Ok(entry) => build_memory_labels(hyp_tokens, std::slice::from_ref(&entry), vocab)
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l != 0).then_some(i))
            .collect(),
        Err(_) => vec![],
    }
}

/// Three-row, Table-style text dump: tokens, combiner gate, first-block
/// argmax location.
pub fn gate_dump(detail: &UtteranceDetail) -> String {
    let mut rows = vec![String::new(), String::new(), String::new()];
    for (i, tok) in detail.tokens.iter().enumerate() {
        let gate = detail.gates.get(i).map_or("-".to_string(), |g| format!("{g:.2}"));
        let loc = detail
            .locations
            .get(i)
            .and_then(|l| l.first())
            .map_or("-".to_string(), |l| l.to_string());
        let w = tok.len().max(gate.len()).max(loc.len()) + 1;
        rows[0].push_str(&format!("{tok:>w$}"));
        rows[1].push_str(&format!("{gate:>w$}"));
        rows[2].push_str(&format!("{loc:>w$}"));
    }
    rows.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_basics() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a", "b"], &[]).unwrap(), 1.0);
        assert!(wer(&[], &["a"]).is_err());
    }

    #[test]
    fn wer_matches_brute_force_dp() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let alphabet = ["a", "b", "c", "d"];
        for _ in 0..1000 {
            let n = rng.gen_range(0..8);
            let m = rng.gen_range(0..8);
            let a: Vec<&str> = (0..n).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let b: Vec<&str> = (0..m).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            assert_eq!(edit_distance(&a, &b), brute_force_edits(&a, &b), "{a:?} vs {b:?}");
        }
    }

    // Plain recursive Levenshtein, memoized on (i, j).
    fn brute_force_edits(a: &[&str], b: &[&str]) -> usize {
        fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let mut best = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            best = best.min(go(a, b, i + 1, j, memo) + 1);
            best = best.min(go(a, b, i, j + 1, memo) + 1);
            memo[i][j] = Some(best);
            best
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        go(a, b, 0, 0, &mut memo)
    }

    #[test]
    fn phrase_containment() {
        assert!(contains_phrase("we have covid nineteen behind", "covid"));
        assert!(contains_phrase("have Covid nineteen", "covid nineteen"));
        assert!(!contains_phrase("discovid here", "covid"));
        assert!(!contains_phrase("", "covid"));
        assert!(contains_phrase("covid", "covid"));
    }

    #[test]
    fn accuracy_counts() {
        let results = vec![
            ("covid".to_string(), "covid".to_string()),
            ("".to_string(), "covid".to_string()),
        ];
        assert_eq!(new_word_accuracy(&results), 0.5);
    }
}
