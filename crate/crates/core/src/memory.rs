//! Text memory: entry encoder with summary vectors and learned dummy,
//! memory-attention scoring (slot 0 is the gate), MEM and 2MEM decoder
//! blocks, and the sigmoid-gated combination with the baseline output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{causal_mask, Baseline, DecLayer, EncLayer, LnParams, ParamBuilder};
use crate::graph::{sinusoidal_table, Graph, NodeId, Real};
use crate::params::{Init, ParamStore};
use crate::tokenizer::{BpeVocab, BOS, EOS, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory entry {0:?} exceeds max entry length ({1} tokens)")]
    EntryTooLong(String, usize),
    #[error("memory entry {0:?} tokenizes to an empty sequence")]
    EmptyEntry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mem,
    #[serde(rename = "2mem")]
    TwoMem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSource {
    /// Entry token embeddings Z^emb feed the entry-attention values
    /// (default).
    Embedding,
    /// Encoded states Z^e feed the values ("encode values" ablation).
    Encoded,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryDecoderConfig {
    pub variant: Variant,
    /// Memory decoder blocks M.
    pub blocks: usize,
    /// Memory encoder layers.
    pub enc_layers: usize,
    pub value_source: ValueSource,
    /// Adds the previous block's scores to the current ones
    /// ("residual connection" ablation).
    pub residual_on_scores: bool,
    /// Similarity scaling; `None` means 1/sqrt(d_model).
    pub score_scale: Option<f64>,
    pub max_entry_tokens: usize,
}

impl Default for MemoryDecoderConfig {
    fn default() -> Self {
        MemoryDecoderConfig {
            variant: Variant::TwoMem,
            blocks: 2,
            enc_layers: 2,
            value_source: ValueSource::Embedding,
            residual_on_scores: false,
            score_scale: None,
            max_entry_tokens: 32,
        }
    }
}

/// A word or phrase in the biasing memory, tokenized with the shared
/// vocabulary. Entry tokens never include BOS/EOS/PAD.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub text: String,
    pub tokens: Vec<usize>,
}

impl MemoryEntry {
    pub fn new(text: &str, vocab: &BpeVocab) -> Result<Self, MemoryError> {
        let tokens = vocab.encode(text);
        if tokens.is_empty() {
            return Err(MemoryError::EmptyEntry(text.to_string()));
        }
        debug_assert!(tokens.iter().all(|&t| t != BOS && t != EOS && t != PAD && t != UNK));
        Ok(MemoryEntry { text: text.to_string(), tokens })
    }
}

/// Graph handles to the encoded memory: per-entry Z^emb and Z^e plus the
/// `(L+1, d)` summary matrix whose row 0 is the learned dummy.
pub struct MemoryNodes {
    pub lens: Vec<usize>,
    pub emb: Vec<NodeId>,
    pub enc: Vec<NodeId>,
    pub summaries: NodeId,
}

impl MemoryNodes {
    pub fn entry_count(&self) -> usize {
        self.lens.len()
    }
}

/// Detached snapshot of an encoded memory, reusable across decoding
/// graphs. Recomputed only when the memory list changes.
#[derive(Clone)]
pub struct EncodedMemory {
    pub lens: Vec<usize>,
    pub d_model: usize,
    pub emb: Vec<Vec<f32>>,
    pub enc: Vec<Vec<f32>>,
    pub summaries: Vec<f32>,
}

impl EncodedMemory {
    pub fn import<F: Real>(&self, g: &mut Graph<F>) -> MemoryNodes {
        let conv = |v: &[f32]| v.iter().map(|&x| F::from_f64(x as f64)).collect::<Vec<F>>();
        MemoryNodes {
            lens: self.lens.clone(),
            emb: self
                .emb
                .iter()
                .zip(&self.lens)
                .map(|(m, &l)| {
                    let vals = conv(m);
                    g.input(l, self.d_model, vals)
                })
                .collect(),
            enc: self
                .enc
                .iter()
                .zip(&self.lens)
                .map(|(m, &l)| {
                    let vals = conv(m);
                    g.input(l, self.d_model, vals)
                })
                .collect(),
            summaries: g.input(self.lens.len() + 1, self.d_model, conv(&self.summaries)),
        }
    }
}

/// Per-block score matrices and derived gate/argmax diagnostics for one
/// decoded sequence.
#[derive(Debug, Clone)]
pub struct MemoryScores {
    /// scores[m][t * (L+1) + j]
    pub scores: Vec<Vec<f32>>,
    pub slots: usize,
    /// gate[m][t] == scores[m][t][0], by definition.
    pub gates: Vec<Vec<f32>>,
    pub argmax: Vec<Vec<usize>>,
    /// Combiner weight g_t (baseline share) per position.
    pub combine_gate: Vec<f32>,
}

struct MemBlock {
    dec: DecLayer,
    score_wq: usize,
    score_wk: usize,
    /// MEM: projection of summary values.
    mem_wv: Option<usize>,
    /// 2MEM: entry-attention projections.
    entry_wq: Option<usize>,
    entry_wk: Option<usize>,
    entry_wv: Option<usize>,
}

pub struct MemoryModel {
    pub cfg: MemoryDecoderConfig,
    pub d_model: usize,
    dropout: f64,
    /// Frozen baseline token embedding, shared for prefix tokens and Z^emb.
    tok_emb: usize,
    dummy: usize,
    menc_layers: Vec<EncLayer>,
    menc_ln: LnParams,
    blocks: Vec<MemBlock>,
    ln_dec: LnParams,
    out_w: usize,
    out_b: usize,
    combine_w: usize,
    combine_b: usize,
}

impl MemoryModel {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        baseline: &Baseline,
        cfg: &MemoryDecoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self::build(&mut ParamBuilder { store, rng, create: true }, baseline, cfg)
    }

    pub fn bind<F: Real>(store: &mut ParamStore<F>, baseline: &Baseline, cfg: &MemoryDecoderConfig) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self::build(&mut ParamBuilder { store, rng: &mut rng, create: false }, baseline, cfg)
    }

    fn build<F: Real, R: Rng>(b: &mut ParamBuilder<F, R>, baseline: &Baseline, cfg: &MemoryDecoderConfig) -> Self {
        let d = baseline.cfg.d_model;
        let ff = baseline.cfg.ff_dim;
        let heads = baseline.cfg.heads;
        let blocks = (0..cfg.blocks)
            .map(|m| {
                let name = format!("memory.dec.{m}");
                MemBlock {
                    dec: DecLayer::build(b, &name, d, ff, heads),
                    score_wq: b.p(&format!("{name}.score.wq"), d, d, Init::Xavier),
                    score_wk: b.p(&format!("{name}.score.wk"), d, d, Init::Xavier),
                    mem_wv: match cfg.variant {
                        Variant::Mem => Some(b.p(&format!("{name}.score.wv"), d, d, Init::Xavier)),
                        Variant::TwoMem => None,
                    },
                    entry_wq: match cfg.variant {
                        Variant::TwoMem => Some(b.p(&format!("{name}.entry.wq"), d, d, Init::Xavier)),
                        Variant::Mem => None,
                    },
                    entry_wk: match cfg.variant {
                        Variant::TwoMem => Some(b.p(&format!("{name}.entry.wk"), d, d, Init::Xavier)),
                        Variant::Mem => None,
                    },
                    entry_wv: match cfg.variant {
                        Variant::TwoMem => Some(b.p(&format!("{name}.entry.wv"), d, d, Init::Xavier)),
                        Variant::Mem => None,
                    },
                }
            })
            .collect();
        MemoryModel {
            cfg: cfg.clone(),
            d_model: d,
            dropout: baseline.cfg.dropout,
            tok_emb: baseline.tok_emb,
            dummy: b.p("memory.dummy", 1, d, Init::Normal(0.02)),
            menc_layers: (0..cfg.enc_layers)
                .map(|i| EncLayer::build(b, &format!("memory.menc.{i}"), d, ff, heads))
                .collect(),
            menc_ln: LnParams::build(b, "memory.menc.ln", d),
            blocks,
            ln_dec: LnParams::build(b, "memory.ln_dec", d),
            out_w: b.p("memory.out.w", d, baseline.cfg.vocab_size, Init::Xavier),
            out_b: b.p("memory.out.b", 1, baseline.cfg.vocab_size, Init::Zeros),
            combine_w: b.p("memory.combine.w", cfg.blocks, 1, Init::Xavier),
            combine_b: b.p("memory.combine.b", 1, 1, Init::Zeros),
        }
    }

    fn score_scale(&self) -> f64 {
        self.cfg.score_scale.unwrap_or(1.0 / (self.d_model as f64).sqrt())
    }

    /// Encode memory entries: embeddings, encoder stack, masked mean
    /// summaries, dummy prepended at slot 0. Entries are padded to a
    /// common length internally; padding is masked out of attention and
    /// the mean, so batched and unbatched encodings agree exactly.
    pub fn encode_memory<F: Real>(
        &self,
        g: &mut Graph<F>,
        entries: &[MemoryEntry],
        rng: &mut impl Rng,
    ) -> Result<MemoryNodes, MemoryError> {
        let d = self.d_model;
        let dummy = g.param(self.dummy);
        if entries.is_empty() {
            return Ok(MemoryNodes { lens: vec![], emb: vec![], enc: vec![], summaries: dummy });
        }
        for e in entries {
            if e.tokens.len() > self.cfg.max_entry_tokens {
                return Err(MemoryError::EntryTooLong(e.text.clone(), self.cfg.max_entry_tokens));
            }
        }
        let lens: Vec<usize> = entries.iter().map(|e| e.tokens.len()).collect();
        let max_e = *lens.iter().max().unwrap();
        let l_count = entries.len();

        // Padded token stack (L * max_e rows).
        let mut ids = Vec::with_capacity(l_count * max_e);
        for e in entries {
            ids.extend_from_slice(&e.tokens);
            ids.extend(std::iter::repeat(PAD).take(max_e - e.tokens.len()));
        }
        let table = g.param(self.tok_emb);
        let gathered = g.gather(table, &ids);
        let scaled = g.scale(gathered, F::from_f64((d as f64).sqrt()));
        let pe_one: Vec<F> = sinusoidal_table(max_e, d);
        let mut pe = Vec::with_capacity(l_count * max_e * d);
        for _ in 0..l_count {
            pe.extend_from_slice(&pe_one);
        }
        let pe = g.input(l_count * max_e, d, pe);
        let emb_stack = g.add(scaled, pe);

        // Encoder stack: one attention over the whole padded stack with a
        // block-diagonal mask, so queries only see their own entry's real
        // rows. Equivalent to per-entry attention, one gemm instead of L.
        let rows = l_count * max_e;
        let mut mask = vec![false; rows * rows];
        for (l, &e_l) in lens.iter().enumerate() {
            for q in 0..max_e {
                for k in 0..e_l {
                    mask[(l * max_e + q) * rows + l * max_e + k] = true;
                }
            }
        }
        let mut h = emb_stack;
        for layer in &self.menc_layers {
            let normed = layer.ln1.apply(g, h);
            let att = layer.attn.apply(g, normed, normed, Some(&mask));
            let att = g.dropout(att, self.dropout, rng);
            let x = g.add(h, att);
            let normed = layer.ln2.apply(g, x);
            let f = layer.ff.apply(g, normed);
            let f = g.dropout(f, self.dropout, rng);
            h = g.add(x, f);
        }
        let h = self.menc_ln.apply(g, h);

        // Per-entry views and masked-mean summaries.
        let mut emb = Vec::with_capacity(l_count);
        let mut enc = Vec::with_capacity(l_count);
        let mut summary_rows = vec![dummy];
        for (l, &e_l) in lens.iter().enumerate() {
            emb.push(g.slice_rows(emb_stack, l * max_e, e_l));
            let enc_l = g.slice_rows(h, l * max_e, e_l);
            enc.push(enc_l);
            let keep = vec![true; e_l];
            summary_rows.push(g.mean_rows_masked(enc_l, &keep));
        }
        let summaries = g.concat_rows(&summary_rows);
        Ok(MemoryNodes { lens, emb, enc, summaries })
    }

    /// Similarity scores of decoder states against {dummy} ∪ summaries:
    /// `(W^Q Q)(W^K K)^T · scale`, shape `(T, L+1)`. Column 0 is the gate.
    pub fn memory_attention<F: Real>(
        &self,
        g: &mut Graph<F>,
        block: usize,
        states: NodeId,
        summaries: NodeId,
    ) -> NodeId {
        let b = &self.blocks[block];
        let wq = g.param(b.score_wq);
        let wk = g.param(b.score_wk);
        let q = g.matmul(states, wq);
        let k = g.matmul(summaries, wk);
        let kt = g.transpose(k);
        let s = g.matmul(q, kt);
        g.scale(s, F::from_f64(self.score_scale()))
    }

    /// MEM read: residual + softmax(scores) · (W^V summaries).
    pub fn mem_block_read<F: Real>(
        &self,
        g: &mut Graph<F>,
        block: usize,
        states: NodeId,
        scores: NodeId,
        mem: &MemoryNodes,
    ) -> NodeId {
        let wv = self.blocks[block].mem_wv.expect("MEM read on a 2MEM model");
        let wv = g.param(wv);
        let vhat = g.matmul(mem.summaries, wv);
        let att = g.softmax_rows(scores);
        let read = g.matmul(att, vhat);
        g.add(states, read)
    }

    /// 2MEM read: per position, argmax entry selection (lowest-index
    /// tie-break, no gradient through the selection) followed by
    /// single-head attention over that entry's tokens; dummy argmax is a
    /// pure residual passthrough.
    pub fn two_mem_block_read<F: Real>(
        &self,
        g: &mut Graph<F>,
        block: usize,
        states: NodeId,
        scores: NodeId,
        mem: &MemoryNodes,
    ) -> NodeId {
        let b = &self.blocks[block];
        let selection = g.argmax_rows(scores);
        if selection.iter().all(|&l| l == 0) {
            return states;
        }
        let wq = g.param(b.entry_wq.expect("2MEM read on a MEM model"));
        let wk = g.param(b.entry_wk.unwrap());
        let wv = g.param(b.entry_wv.unwrap());
        let scale = F::from_f64(self.score_scale());
        let t_len = g.rows(states);
        // Positions grouped by selected entry: one attention per entry
        // instead of one per position. Dummy positions pass through.
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (t, &l) in selection.iter().enumerate() {
            if l != 0 {
                groups.entry(l).or_default().push(t);
            }
        }
        // `big` stacks the untouched states first, then each group's
        // attended rows; `perm` maps every position back to its row.
        let mut perm: Vec<usize> = (0..t_len).collect();
        let mut parts = vec![states];
        let mut next_row = t_len;
        for (l, ts) in &groups {
            let keys = mem.enc[l - 1];
            let values = match self.cfg.value_source {
                ValueSource::Embedding => mem.emb[l - 1],
                ValueSource::Encoded => mem.enc[l - 1],
            };
            let khat = g.matmul(keys, wk);
            let vhat = g.matmul(values, wv);
            let sel = g.gather(states, ts);
            let qhat = g.matmul(sel, wq);
            let kt = g.transpose(khat);
            let logits = g.matmul(qhat, kt);
            let logits = g.scale(logits, scale);
            let att = g.softmax_rows(logits);
            let read = g.matmul(att, vhat);
            parts.push(g.add(sel, read));
            for &t in ts {
                perm[t] = next_row;
                next_row += 1;
            }
        }
        let big = g.concat_rows(&parts);
        g.gather(big, &perm)
    }

    /// Full memory decoder: M blocks of (decoder layer, memory attention,
    /// memory read), final norm and projection to the vocabulary.
    /// Returns the probability output, per-block scores, and the `(T, M)`
    /// stacked gates.
    pub fn decoder_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        baseline: &Baseline,
        prefix: &[usize],
        enc_out: NodeId,
        mem: &MemoryNodes,
        rng: &mut impl Rng,
    ) -> (NodeId, Vec<NodeId>, NodeId) {
        assert!(!prefix.is_empty() && prefix[0] == BOS, "prefix must start with BOS");
        let causal = causal_mask(prefix.len());
        let mut h = baseline.embed_prefix(g, prefix, self.tok_emb);
        let mut all_scores = Vec::with_capacity(self.cfg.blocks);
        let mut gates = Vec::with_capacity(self.cfg.blocks);
        for (m, block) in self.blocks.iter().enumerate() {
            h = block.dec.apply(g, h, enc_out, &causal, self.dropout, rng);
            let mut scores = self.memory_attention(g, m, h, mem.summaries);
            if self.cfg.residual_on_scores {
                if let Some(&prev) = all_scores.last() {
                    scores = g.add(scores, prev);
                }
            }
            gates.push(g.slice_cols(scores, 0, 1));
            h = match self.cfg.variant {
                Variant::Mem => self.mem_block_read(g, m, h, scores, mem),
                Variant::TwoMem => self.two_mem_block_read(g, m, h, scores, mem),
            };
            all_scores.push(scores);
        }
        let h = self.ln_dec.apply(g, h);
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let logits = g.matmul(h, w);
        let logits = g.add_row(logits, b);
        let probs = g.softmax_rows(logits);
        let gates = g.concat_cols(&gates);
        (probs, all_scores, gates)
    }

    /// Sigmoid-gated weighted sum on the probability simplex:
    /// `g_t = σ(w·gates_t + b)`, `P_final = g·P_base + (1-g)·P_mem`.
    /// Returns the combined distribution and the `(T, 1)` gate column.
    pub fn combine_outputs<F: Real>(
        &self,
        g: &mut Graph<F>,
        p_base: NodeId,
        p_mem: NodeId,
        gates: NodeId,
    ) -> (NodeId, NodeId) {
        let w = g.param(self.combine_w);
        let b = g.param(self.combine_b);
        let lin = g.matmul(gates, w);
        let lin = g.add_row(lin, b);
        let gate = g.sigmoid(lin);
        let inv_gate = g.affine(gate, F::from_f64(-1.0), F::from_f64(1.0));
        let base_part = g.mul_col(p_base, gate);
        let mem_part = g.mul_col(p_mem, inv_gate);
        (g.add(base_part, mem_part), gate)
    }

    /// Run the memory encoder once and detach the result for reuse
    /// across decoding graphs.
    pub fn snapshot_memory<F: Real>(
        &self,
        store: &ParamStore<F>,
        entries: &[MemoryEntry],
    ) -> Result<EncodedMemory, MemoryError> {
        let mut g = Graph::new(store);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let nodes = self.encode_memory(&mut g, entries, &mut rng)?;
        let to_f32 = |id: NodeId, g: &Graph<F>| -> Vec<f32> {
            g.values(id).iter().map(|&v| v.to_f64() as f32).collect()
        };
        Ok(EncodedMemory {
            lens: nodes.lens.clone(),
            d_model: self.d_model,
            emb: nodes.emb.iter().map(|&n| to_f32(n, &g)).collect(),
            enc: nodes.enc.iter().map(|&n| to_f32(n, &g)).collect(),
            summaries: to_f32(nodes.summaries, &g),
        })
    }

    /// One decoding step of the combined model; returns the last-position
    /// distribution plus gate/argmax diagnostics for every position.
    pub fn combined_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        baseline: &Baseline,
        prefix: &[usize],
        enc_out: NodeId,
        mem: &MemoryNodes,
    ) -> (NodeId, MemoryScores) {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let p_base = baseline.decode_probs(g, prefix, enc_out, &mut rng);
        let p_base = g.stop_grad(p_base);
        let (p_mem, block_scores, gates) =
            self.decoder_forward(g, baseline, prefix, enc_out, mem, &mut rng);
        let (p_final, gate) = self.combine_outputs(g, p_base, p_mem, gates);
        let slots = mem.entry_count() + 1;
        let scores_vals: Vec<Vec<f32>> = block_scores
            .iter()
            .map(|&s| g.values(s).iter().map(|&v| v.to_f64() as f32).collect())
            .collect();
        let diag = MemoryScores {
            gates: scores_vals
                .iter()
                .map(|s| s.chunks(slots).map(|row| row[0]).collect())
                .collect(),
            argmax: block_scores.iter().map(|&s| g.argmax_rows(s)).collect(),
            scores: scores_vals,
            slots,
            combine_gate: g.values(gate).iter().map(|&v| v.to_f64() as f32).collect(),
        };
        (p_final, diag)
    }

    /// Greedy decoding with the combined model. Returns the hypothesis
    /// tokens (BOS/EOS stripped) and the per-position diagnostics of the
    /// final step.
    pub fn greedy_decode<F: Real>(
        &self,
        store: &ParamStore<F>,
        baseline: &Baseline,
        features: &[f32],
        memory: &EncodedMemory,
        max_len: usize,
    ) -> (Vec<usize>, MemoryScores) {
        let mut g = Graph::new(store);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc_out = baseline.encode(&mut g, features, &mut rng);
        let mem = memory.import(&mut g);
        let mut prefix = vec![BOS];
        let mut diag;
        loop {
            let (p_final, d) = self.combined_forward(&mut g, baseline, &prefix, enc_out, &mem);
            diag = d;
            let last = g.slice_rows(p_final, prefix.len() - 1, 1);
            let next = g.argmax_rows(last)[0];
            if next == EOS || prefix.len() > max_len {
                break;
            }
            prefix.push(next);
        }
        (prefix[1..].to_vec(), diag)
    }
}

/// Load a memory list file: plain UTF-8 text, one word or phrase per
/// line; blank lines skipped.
pub fn load_memory_file(path: &std::path::Path, vocab: &BpeVocab) -> anyhow::Result<Vec<MemoryEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        entries.push(MemoryEntry::new(line, vocab)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaselineConfig;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (ParamStore<f64>, Baseline, MemoryModel, BpeVocab) {
        let corpus: Vec<String> =
            vec!["aba bab abab".into(), "bab aba ba".into(), "ab ba abba".into()];
        let vocab = BpeVocab::train(&corpus, 12).unwrap();
        let bcfg = BaselineConfig {
            d_model: 8,
            ff_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            conv_channels: 4,
            dropout: 0.0,
            vocab_size: vocab.size(),
            feature_dim: 6,
        };
        let mcfg = MemoryDecoderConfig {
            variant: Variant::TwoMem,
            blocks: 2,
            enc_layers: 1,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Baseline::new(&mut store, &bcfg, &mut rng);
        let model = MemoryModel::new(&mut store, &base, &mcfg, &mut rng);
        (store, base, model, vocab)
    }

    fn entries(vocab: &BpeVocab, texts: &[&str]) -> Vec<MemoryEntry> {
        texts.iter().map(|t| MemoryEntry::new(t, vocab).unwrap()).collect()
    }

    fn no_rng() -> rand::rngs::mock::StepRng {
        rand::rngs::mock::StepRng::new(0, 0)
    }

    #[test]
    fn empty_entry_rejected() {
        let (_, _, _, vocab) = tiny_setup();
        assert!(MemoryEntry::new("", &vocab).is_err());
        assert!(MemoryEntry::new("  ", &vocab).is_err());
    }

    #[test]
    fn empty_memory_is_dummy_only() {
        let (store, _, model, _) = tiny_setup();
        let mut g = Graph::new(&store);
        let mem = model.encode_memory(&mut g, &[], &mut no_rng()).unwrap();
        assert_eq!(mem.entry_count(), 0);
        assert_eq!(g.rows(mem.summaries), 1);
    }

    #[test]
    fn padding_is_invisible_to_encoding() {
        // Entries encoded in one padded batch must match each encoded
        // alone, bitwise.
        let (store, _, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["ab", "abab bab"]);
        let mut g = Graph::new(&store);
        let both = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        for (i, e) in es.iter().enumerate() {
            let solo =
                model.encode_memory(&mut g, std::slice::from_ref(e), &mut no_rng()).unwrap();
            assert_eq!(g.values(both.enc[i]), g.values(solo.enc[0]), "entry {i} enc");
            assert_eq!(g.values(both.emb[i]), g.values(solo.emb[0]), "entry {i} emb");
            let all = g.values(both.summaries);
            let d = model.d_model;
            assert_eq!(
                &all[(i + 1) * d..(i + 2) * d],
                &g.values(solo.summaries)[d..2 * d],
                "entry {i} summary"
            );
        }
    }

    #[test]
    fn single_token_summary_is_encoded_row() {
        let (store, _, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["ab"]);
        assert_eq!(es[0].tokens.len(), 1);
        let mut g = Graph::new(&store);
        let mem = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let d = model.d_model;
        assert_eq!(&g.values(mem.summaries)[d..2 * d], g.values(mem.enc[0]));
    }

    #[test]
    fn entry_too_long_rejected() {
        let (store, base, _, vocab) = tiny_setup();
        let mcfg = MemoryDecoderConfig { max_entry_tokens: 1, ..Default::default() };
        let mut store2 = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base2 = Baseline::new(&mut store2, &base.cfg, &mut rng);
        let model = MemoryModel::new(&mut store2, &base2, &mcfg, &mut rng);
        let es = entries(&vocab, &["abab bab"]);
        let mut g = Graph::new(&store2);
        assert!(matches!(
            model.encode_memory(&mut g, &es, &mut no_rng()),
            Err(MemoryError::EntryTooLong(..))
        ));
        drop(store);
    }

    #[test]
    fn two_mem_read_matches_dense_oracle() {
        let (store, _, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["abab bab"]);
        let d = model.d_model;
        let mut g = Graph::new(&store);
        let mem = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let t_len = 3;
        let states_v: Vec<f64> = (0..t_len * d).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let states = g.input(t_len, d, states_v.clone());
        // Row 0 prefers the dummy; rows 1-2 prefer entry 1.
        let scores_v = vec![5.0, 0.0, 0.0, 5.0, 1.0, 7.0];
        let scores = g.input(t_len, 2, scores_v);
        let out = model.two_mem_block_read(&mut g, 0, states, scores, &mem);

        // Independent dense computation in plain loops.
        let wq = &store.get(store.id("memory.dec.0.entry.wq").unwrap()).values;
        let wk = &store.get(store.id("memory.dec.0.entry.wk").unwrap()).values;
        let wv = &store.get(store.id("memory.dec.0.entry.wv").unwrap()).values;
        let keys: Vec<f64> = g.values(mem.enc[0]).to_vec();
        let vals: Vec<f64> = g.values(mem.emb[0]).to_vec();
        let e_l = mem.lens[0];
        let matmul = |a: &[f64], (ar, ac): (usize, usize), b: &[f64], bc: usize| -> Vec<f64> {
            let mut out = vec![0.0; ar * bc];
            for i in 0..ar {
                for k in 0..ac {
                    for j in 0..bc {
                        out[i * bc + j] += a[i * ac + k] * b[k * bc + j];
                    }
                }
            }
            out
        };
        let khat = matmul(&keys, (e_l, d), wk, d);
        let vhat = matmul(&vals, (e_l, d), wv, d);
        let scale = 1.0 / (d as f64).sqrt();
        let got = g.values(out);
        assert_eq!(&got[0..d], &states_v[0..d], "dummy row passes through");
        for t in 1..t_len {
            let s_t = &states_v[t * d..(t + 1) * d];
            let qhat = matmul(s_t, (1, d), wq, d);
            let mut logits: Vec<f64> =
                (0..e_l).map(|k| (0..d).map(|j| qhat[j] * khat[k * d + j]).sum::<f64>() * scale).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for l in logits.iter_mut() {
                *l = (*l - mx).exp() / z;
            }
            for j in 0..d {
                let read: f64 = (0..e_l).map(|k| logits[k] * vhat[k * d + j]).sum();
                let want = s_t[j] + read;
                assert!((got[t * d + j] - want).abs() < 1e-9, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn two_mem_all_dummy_is_identity() {
        let (store, _, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["ab"]);
        let d = model.d_model;
        let mut g = Graph::new(&store);
        let mem = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let states = g.input(2, d, (0..2 * d).map(|i| i as f64).collect());
        let scores = g.input(2, 2, vec![3.0, 0.0, 9.0, -1.0]);
        let out = model.two_mem_block_read(&mut g, 0, states, scores, &mem);
        assert_eq!(out, states, "all-dummy selection returns the input node");
    }

    #[test]
    fn mem_read_uniform_and_saturated_oracle() {
        let corpus: Vec<String> = vec!["aba bab".into(), "ab ba".into()];
        let vocab = BpeVocab::train(&corpus, 12).unwrap();
        let bcfg = BaselineConfig {
            d_model: 8,
            ff_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            conv_channels: 4,
            dropout: 0.0,
            vocab_size: vocab.size(),
            feature_dim: 6,
        };
        let mcfg = MemoryDecoderConfig { variant: Variant::Mem, blocks: 1, enc_layers: 1, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Baseline::new(&mut store, &bcfg, &mut rng);
        let model = MemoryModel::new(&mut store, &base, &mcfg, &mut rng);
        let es = entries(&vocab, &["ab", "ba"]);
        let d = 8usize;
        let mut g = Graph::new(&store);
        let mem = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let wv_pid = store.id("memory.dec.0.score.wv").unwrap();
        let wv = g.param(wv_pid);
        let vhat = g.matmul(mem.summaries, wv);
        let vhat_v = g.values(vhat).to_vec();
        let states = g.input(2, d, vec![0.0; 2 * d]);
        // Row 0 uniform over 3 slots; row 1 saturated on slot 2.
        let scores = g.input(2, 3, vec![0.0, 0.0, 0.0, -100.0, -100.0, 100.0]);
        let out = model.mem_block_read(&mut g, 0, states, scores, &mem);
        let got = g.values(out);
        for j in 0..d {
            let mean = (vhat_v[j] + vhat_v[d + j] + vhat_v[2 * d + j]) / 3.0;
            assert!((got[j] - mean).abs() < 1e-12, "uniform j={j}");
            assert!((got[d + j] - vhat_v[2 * d + j]).abs() < 1e-12, "saturated j={j}");
        }
    }

    #[test]
    fn gate_is_score_column_zero_and_dists_normalized() {
        let (store, base, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["aba", "bab ab"]);
        let mut g = Graph::new(&store);
        let feats: Vec<f32> = (0..8 * 6).map(|i| (i % 5) as f32 * 0.1).collect();
        let enc = base.encode(&mut g, &feats, &mut no_rng());
        let mem = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let prefix = vocab.encode_target("aba bab");
        let prefix = &prefix[..prefix.len() - 1];
        let (p_final, diag) = model.combined_forward(&mut g, &base, prefix, enc, &mem);
        for (m, gates) in diag.gates.iter().enumerate() {
            for (t, &gate) in gates.iter().enumerate() {
                assert_eq!(gate, diag.scores[m][t * diag.slots], "block {m} pos {t}");
            }
        }
        let v = g.values(p_final);
        for row in v.chunks(vocab.size()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert!(diag.combine_gate.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn combine_is_convex_blend() {
        let (store, _, model, _) = tiny_setup();
        let mut g = Graph::new(&store);
        let p_base = g.input(2, 3, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0]);
        let p_mem = g.input(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let gates = g.input(2, model.cfg.blocks, vec![0.3; 2 * model.cfg.blocks]);
        let (p_final, gate) = model.combine_outputs(&mut g, p_base, p_mem, gates);
        let gv = g.values(gate).to_vec();
        let bv = g.values(p_base).to_vec();
        let mv = g.values(p_mem).to_vec();
        let fv = g.values(p_final);
        for t in 0..2 {
            for j in 0..3 {
                let want = gv[t] * bv[t * 3 + j] + (1.0 - gv[t]) * mv[t * 3 + j];
                assert!((fv[t * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn snapshot_roundtrips_through_import() {
        let (store, _, model, vocab) = tiny_setup();
        let es = entries(&vocab, &["ab", "bab aba"]);
        let snap = model.snapshot_memory(&store, &es).unwrap();
        let mut g = Graph::<f64>::new(&store);
        let direct = model.encode_memory(&mut g, &es, &mut no_rng()).unwrap();
        let imported = snap.import(&mut g);
        assert_eq!(imported.lens, direct.lens);
        let a = g.values(imported.summaries).to_vec();
        let b = g.values(direct.summaries).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "f32 snapshot close to f64 direct");
        }
    }
}
