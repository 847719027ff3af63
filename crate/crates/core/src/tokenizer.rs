//! Byte-pair-encoding vocabulary: training, encode, decode.
//!
//! Words tokenize independently; the final symbol of each word carries an
//! end-of-word marker so that token subsequences align at word boundaries.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const EOW: &str = "</w>";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocab_size {requested} below minimum {minimum} (alphabet + reserved)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {0} out of range for vocab of size {1}")]
    IdOutOfRange(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab file error: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    pub alphabet: Vec<char>,
    pub merges: Vec<(String, String)>,
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl BpeVocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// True for tokens carrying the end-of-word marker (and for EOS,
    /// which also terminates a word span).
    pub fn is_word_end(&self, id: usize) -> bool {
        id == EOS || self.tokens.get(id).is_some_and(|t| t.ends_with(EOW))
    }

    fn build_table(alphabet: &[char], merges: &[(String, String)]) -> (Vec<String>, HashMap<String, usize>) {
        let mut tokens: Vec<String> =
            vec!["<pad>".into(), "<bos>".into(), "<eos>".into(), "<unk>".into()];
        for &c in alphabet {
            tokens.push(c.to_string());
            tokens.push(format!("{c}{EOW}"));
        }
        for (a, b) in merges {
            tokens.push(format!("{a}{b}"));
        }
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        (tokens, id_of)
    }

    /// Greedy most-frequent-pair BPE training. Ties break on the
    /// lexicographically smallest pair; merging stops when `vocab_size`
    /// is reached or no adjacent pair occurs twice.
    pub fn train(corpus: &[String], vocab_size: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut alphabet: Vec<char> = corpus
            .iter()
            .flat_map(|s| s.chars())
            .filter(|c| !c.is_whitespace())
            .collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let minimum = RESERVED + 2 * alphabet.len();
        if vocab_size < minimum {
            return Err(TokenizerError::VocabTooSmall { requested: vocab_size, minimum });
        }

        // word -> (symbol sequence, frequency)
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = {
            let mut ws: Vec<(&String, &usize)> = word_freq.iter().collect();
            ws.sort_unstable_by(|a, b| a.0.cmp(b.0));
            ws.iter().map(|(w, &f)| (word_symbols(w), f)).collect()
        };

        let mut merges: Vec<(String, String)> = Vec::new();
        while RESERVED + 2 * alphabet.len() + merges.len() < vocab_size {
            let mut pair_count: HashMap<(String, String), usize> = HashMap::new();
            for (syms, f) in &words {
                for win in syms.windows(2) {
                    *pair_count.entry((win[0].clone(), win[1].clone())).or_insert(0) += f;
                }
            }
            let best = pair_count
                .into_iter()
                .filter(|(_, n)| *n >= 2)
                .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let (pair, _) = match best {
                Some(b) => b,
                None => break,
            };
            for (syms, _) in &mut words {
                apply_merge(syms, &pair);
            }
            merges.push(pair);
        }

        let (tokens, id_of) = Self::build_table(&alphabet, &merges);
        Ok(BpeVocab { alphabet, merges, tokens, id_of })
    }

    /// Encode text to token ids (no BOS/EOS). Out-of-alphabet characters
    /// map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            let mut syms = word_symbols(w);
            for pair in &self.merges {
                apply_merge(&mut syms, pair);
            }
            for s in syms {
                out.push(self.id_of.get(&s).copied().unwrap_or(UNK));
            }
        }
        out
    }

    /// Encode and wrap with BOS/EOS for use as a decoder target.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Inverse of `encode` on UNK-free input; BOS/EOS/PAD are stripped.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.size() {
                return Err(TokenizerError::IdOutOfRange(id, self.size()));
            }
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if id == UNK {
                out.push('\u{fffd}');
                continue;
            }
            let tok = &self.tokens[id];
            if let Some(stem) = tok.strip_suffix(EOW) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        Ok(out.trim_end().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = VocabFile {
            alphabet: self.alphabet.iter().collect(),
            merges: self.merges.clone(),
            reserved: [
                ("pad".to_string(), PAD),
                ("bos".to_string(), BOS),
                ("eos".to_string(), EOS),
                ("unk".to_string(), UNK),
            ]
            .into_iter()
            .collect(),
            size: self.size(),
        };
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, &file).map_err(|e| TokenizerError::Format(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let f = std::fs::File::open(path)?;
        let file: VocabFile =
            serde_json::from_reader(f).map_err(|e| TokenizerError::Format(e.to_string()))?;
        let alphabet: Vec<char> = file.alphabet.chars().collect();
        let (tokens, id_of) = Self::build_table(&alphabet, &file.merges);
        if tokens.len() != file.size {
            return Err(TokenizerError::Format(format!(
                "size field {} disagrees with reconstructed table {}",
                file.size,
                tokens.len()
            )));
        }
        Ok(BpeVocab { alphabet, merges: file.merges, tokens, id_of })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    alphabet: String,
    merges: Vec<(String, String)>,
    reserved: std::collections::BTreeMap<String, usize>,
    size: usize,
}

fn word_symbols(w: &str) -> Vec<String> {
    let chars: Vec<char> = w.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { format!("{c}{EOW}") } else { c.to_string() })
        .collect()
}

fn apply_merge(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}
