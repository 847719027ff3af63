//! Synthetic pseudo-speech task: deterministic character-to-feature
//! rendering plus Gaussian noise, dataset generation with a held-out
//! new-words split, and feature-blob I/O.

use std::collections::HashSet;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("character {0:?} outside the acoustic alphabet")]
    OutOfAlphabet(char),
    #[error("could not generate {0} new words disjoint from the lexicon")]
    NewWordExhausted(usize),
    #[error("unknown utterance id {0}")]
    UnknownUtterance(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("audit failure: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub feature_dim: usize,
    pub frames_per_char_min: usize,
    pub frames_per_char_max: usize,
    pub noise_sigma: f64,
    pub lexicon_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub new_word_count: usize,
    pub new_word_len_min: usize,
    pub new_word_len_max: usize,
    pub new_word_test_utterances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            feature_dim: 40,
            frames_per_char_min: 2,
            frames_per_char_max: 4,
            noise_sigma: 0.3,
            lexicon_size: 400,
            word_len_min: 3,
            word_len_max: 8,
            sentence_len_min: 2,
            sentence_len_max: 5,
            train_utterances: 8000,
            dev_utterances: 200,
            test_utterances: 200,
            new_word_count: 50,
            new_word_len_min: 4,
            new_word_len_max: 10,
            new_word_test_utterances: 150,
        }
    }
}

pub const ALPHABET: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z',
];

/// Per-character feature prototypes; the acoustic realization of the task.
pub struct CharAcousticMap {
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub sigma: f64,
    pub seed: u64,
    chars: Vec<char>,
    protos: Vec<Vec<f32>>,
}

impl CharAcousticMap {
    /// Alphabet plus the space character each get a random prototype.
    /// Same seed, same map; prototypes are checked pairwise distinct.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chars: Vec<char> = ALPHABET.to_vec();
        chars.push(' ');
        let protos: Vec<Vec<f32>> = chars
            .iter()
            .map(|_| (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let d: f32 = protos[i]
                    .iter()
                    .zip(&protos[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 0.0, "degenerate prototypes for {:?} and {:?}", chars[i], chars[j]);
            }
        }
        CharAcousticMap {
            feature_dim: cfg.feature_dim,
            frames_min: cfg.frames_per_char_min,
            frames_max: cfg.frames_per_char_max,
            sigma: cfg.noise_sigma,
            seed,
            chars,
            protos,
        }
    }

    fn proto(&self, c: char) -> Result<&[f32], DataError> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| self.protos[i].as_slice())
            .ok_or(DataError::OutOfAlphabet(c))
    }
}

/// Render a transcript to a `(frames, feature_dim)` row-major matrix.
/// Deterministic given the seed.
pub fn render_utterance(
    transcript: &str,
    map: &CharAcousticMap,
    seed: u64,
) -> Result<Vec<f32>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in transcript.chars() {
        let proto = map.proto(c)?.to_vec();
        let r = if map.frames_min == map.frames_max {
            map.frames_min
        } else {
            rng.gen_range(map.frames_min..=map.frames_max)
        };
        for _ in 0..r {
            for &p in &proto {
                let noise = if map.sigma > 0.0 {
                    (normal(&mut rng) * map.sigma) as f32
                } else {
                    0.0
                };
                out.push(p + noise);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub transcript: String,
    /// Offset into the split's feature blob, in f32 elements.
    pub offset: usize,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_word: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub master_seed: u64,
    pub config: DataConfig,
    pub lexicon: Vec<String>,
    pub new_words: Vec<String>,
    pub utterances: Vec<UtteranceRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path)?;
        serde_json::from_reader(f).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self).map_err(|e| DataError::Manifest(e.to_string()))?;
        Ok(())
    }
}

/// A split on disk: manifest plus feature blob.
pub struct Split {
    pub manifest: DatasetManifest,
    blob_path: PathBuf,
}

impl Split {
    pub fn open(dir: &Path, split: &str) -> Result<Self, DataError> {
        let manifest = DatasetManifest::load(&dir.join(format!("{split}.manifest.json")))?;
        Ok(Split { manifest, blob_path: dir.join(format!("{split}.features.f32")) })
    }

    pub fn features(&self, rec: &UtteranceRecord) -> Result<Vec<f32>, DataError> {
        let mut f = std::fs::File::open(&self.blob_path)?;
        f.seek(SeekFrom::Start((rec.offset * 4) as u64))?;
        let n = rec.frames * self.manifest.config.feature_dim;
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    pub fn record(&self, id: &str) -> Result<&UtteranceRecord, DataError> {
        self.manifest
            .utterances
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| DataError::UnknownUtterance(id.to_string()))
    }
}

/// Zero-padded features and lengths for a set of utterances.
pub struct FeatureBatch {
    pub features: Vec<Vec<f32>>,
    pub frames: Vec<usize>,
    pub transcripts: Vec<String>,
}

pub fn load_batch(split: &Split, ids: &[&str]) -> Result<FeatureBatch, DataError> {
    let mut features = Vec::new();
    let mut frames = Vec::new();
    let mut transcripts = Vec::new();
    for id in ids {
        let rec = split.record(id)?.clone();
        features.push(split.features(&rec)?);
        frames.push(rec.frames);
        transcripts.push(rec.transcript);
    }
    Ok(FeatureBatch { features, frames, transcripts })
}

/// Stable per-utterance seed derived from the master seed and the id.
pub fn utterance_seed(master_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// Generate all four splits plus `new_words.txt` into `dir`.
pub fn gen_dataset(cfg: &DataConfig, master_seed: u64, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);

    let lexicon = gen_word_list(&mut rng, cfg.lexicon_size, cfg.word_len_min, cfg.word_len_max, &HashSet::new());
    let lexset: HashSet<&String> = lexicon.iter().collect();
    let taken: HashSet<String> = lexicon.iter().cloned().collect();
    let new_words =
        gen_word_list(&mut rng, cfg.new_word_count, cfg.new_word_len_min, cfg.new_word_len_max, &taken);
    for w in &new_words {
        if lexset.contains(w) {
            return Err(DataError::NewWordExhausted(cfg.new_word_count));
        }
    }

    let map = CharAcousticMap::generate(cfg, master_seed);

    let make_split = |split: &str,
                          count: usize,
                          with_new_word: bool,
                          rng: &mut ChaCha8Rng|
     -> Result<(), DataError> {
        let mut utterances = Vec::new();
        let mut blob = std::io::BufWriter::new(
            std::fs::File::create(dir.join(format!("{split}.features.f32")))?,
        );
        let mut offset = 0usize;
        for i in 0..count {
            let id = format!("{split}-{i:05}");
            let n_words = rng.gen_range(cfg.sentence_len_min..=cfg.sentence_len_max);
            let mut words: Vec<String> =
                (0..n_words).map(|_| lexicon[rng.gen_range(0..lexicon.len())].clone()).collect();
            let new_word = if with_new_word {
                let w = new_words[rng.gen_range(0..new_words.len())].clone();
                let pos = rng.gen_range(0..=words.len());
                words.insert(pos, w.clone());
                Some(w)
            } else {
                None
            };
            let transcript = words.join(" ");
            let feats = render_utterance(&transcript, &map, utterance_seed(master_seed, &id))?;
            let frames = feats.len() / cfg.feature_dim;
            for v in &feats {
                blob.write_all(&v.to_le_bytes())?;
            }
            utterances.push(UtteranceRecord { id, transcript, offset, frames, new_word });
            offset += feats.len();
        }
        blob.flush()?;
        let manifest = DatasetManifest {
            split: split.to_string(),
            master_seed,
            config: cfg.clone(),
            lexicon: lexicon.clone(),
            new_words: new_words.clone(),
            utterances,
        };
        manifest.save(&dir.join(format!("{split}.manifest.json")))?;
        Ok(())
    };

    make_split("train", cfg.train_utterances, false, &mut rng)?;
    make_split("dev", cfg.dev_utterances, false, &mut rng)?;
    make_split("test", cfg.test_utterances, false, &mut rng)?;
    make_split("new_words", cfg.new_word_test_utterances, true, &mut rng)?;

    let mut f = std::fs::File::create(dir.join("new_words.txt"))?;
    for w in &new_words {
        writeln!(f, "{w}")?;
    }

    audit_dataset(dir)?;
    Ok(())
}

/// Disjointness and solvability checks over a generated dataset directory.
pub fn audit_dataset(dir: &Path) -> Result<(), DataError> {
    let train = DatasetManifest::load(&dir.join("train.manifest.json"))?;
    let nw = DatasetManifest::load(&dir.join("new_words.manifest.json"))?;
    let lexset: HashSet<&String> = train.lexicon.iter().collect();
    let alphabet: HashSet<char> = ALPHABET.iter().copied().collect();
    for w in &nw.new_words {
        if lexset.contains(w) {
            return Err(DataError::Audit(format!("new word {w:?} is in the training lexicon")));
        }
        for c in w.chars() {
            if !alphabet.contains(&c) {
                return Err(DataError::Audit(format!("new word {w:?} uses char {c:?} outside alphabet")));
            }
        }
    }
    let nwset: HashSet<&String> = nw.new_words.iter().collect();
    for u in &train.utterances {
        for word in u.transcript.split_whitespace() {
            if nwset.contains(&word.to_string()) {
                return Err(DataError::Audit(format!(
                    "new word {word:?} appears in training utterance {}",
                    u.id
                )));
            }
        }
    }
    for u in &nw.utterances {
        match &u.new_word {
            None => {
                return Err(DataError::Audit(format!("utterance {} has no new word", u.id)));
            }
            Some(w) => {
                let n = u.transcript.split_whitespace().filter(|x| x == w).count();
                if n != 1 {
                    return Err(DataError::Audit(format!(
                        "utterance {} contains new word {w:?} {n} times",
                        u.id
                    )));
                }
            }
        }
    }
    Ok(())
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Pronounceable random words: alternating consonants and vowels.
fn gen_word_list(
    rng: &mut ChaCha8Rng,
    count: usize,
    len_min: usize,
    len_max: usize,
    exclude: &HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < count * 1000, "word generation exhausted");
        let len = rng.gen_range(len_min..=len_max);
        let start_cons = rng.gen_bool(0.5);
        let w: String = (0..len)
            .map(|i| {
                let cons = (i % 2 == 0) == start_cons;
                if cons {
                    CONSONANTS[rng.gen_range(0..CONSONANTS.len())]
                } else {
                    VOWELS[rng.gen_range(0..VOWELS.len())]
                }
            })
            .collect();
        if !seen.contains(&w) && !exclude.contains(&w) {
            seen.insert(w.clone());
            out.push(w);
        }
    }
    out
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
