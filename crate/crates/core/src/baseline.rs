//! Frozen sequence-to-sequence transformer baseline: convolutional
//! subsampler, encoder stack, decoder stack, greedy search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{sinusoidal_table, Graph, NodeId, Real};
use crate::params::{Init, ParamStore};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub feature_dim: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        // Desk-scale defaults, sized to train on a single CPU core.
        BaselineConfig {
            d_model: 128,
            ff_dim: 256,
            enc_layers: 4,
            dec_layers: 2,
            heads: 4,
            conv_channels: 32,
            dropout: 0.1,
            vocab_size: 200,
            feature_dim: 40,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.heads == 0, "d_model must be divisible by heads");
    }
}

/// Creates parameters on first build, or re-binds pids by name after a
/// checkpoint load.
pub struct ParamBuilder<'a, F: Real, R: Rng> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
    pub create: bool,
}

impl<'a, F: Real, R: Rng> ParamBuilder<'a, F, R> {
    pub fn p(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        if self.create {
            self.store.add(name, rows, cols, init, self.rng)
        } else {
            let pid = self
                .store
                .id(name)
                .unwrap_or_else(|| panic!("checkpoint is missing parameter {name}"));
            let p = self.store.get(pid);
            assert_eq!((p.rows, p.cols), (rows, cols), "shape mismatch for {name}");
            pid
        }
    }
}

pub struct LnParams {
    pub gain: usize,
    pub bias: usize,
}

impl LnParams {
    pub fn build<F: Real, R: Rng>(b: &mut ParamBuilder<F, R>, name: &str, d: usize) -> Self {
        LnParams {
            gain: b.p(&format!("{name}.gain"), 1, d, Init::Ones),
            bias: b.p(&format!("{name}.bias"), 1, d, Init::Zeros),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, 1e-5)
    }
}

pub struct AttnParams {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub heads: usize,
}

impl AttnParams {
    fn build<F: Real, R: Rng>(b: &mut ParamBuilder<F, R>, name: &str, d: usize, heads: usize) -> Self {
        AttnParams {
            wq: b.p(&format!("{name}.wq"), d, d, Init::Xavier),
            wk: b.p(&format!("{name}.wk"), d, d, Init::Xavier),
            wv: b.p(&format!("{name}.wv"), d, d, Init::Xavier),
            wo: b.p(&format!("{name}.wo"), d, d, Init::Xavier),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention. `mask`, when given, has
    /// shape `(rows(q_in), rows(kv_in))` flattened row-major.
    pub fn apply<F: Real>(
        &self,
        g: &mut Graph<F>,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&[bool]>,
    ) -> NodeId {
        let d = g.cols(q_in);
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let att = g.softmax_rows_masked(logits, mask);
            heads_out.push(g.matmul(att, vh));
        }
        let ctx = g.concat_cols(&heads_out);
        let wo = g.param(self.wo);
        g.matmul(ctx, wo)
    }
}

pub struct FfParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl FfParams {
    fn build<F: Real, R: Rng>(b: &mut ParamBuilder<F, R>, name: &str, d: usize, ff: usize) -> Self {
        FfParams {
            w1: b.p(&format!("{name}.w1"), d, ff, Init::Xavier),
            b1: b.p(&format!("{name}.b1"), 1, ff, Init::Zeros),
            w2: b.p(&format!("{name}.w2"), ff, d, Init::Xavier),
            b2: b.p(&format!("{name}.b2"), 1, d, Init::Zeros),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }
}

pub struct EncLayer {
    pub ln1: LnParams,
    pub attn: AttnParams,
    pub ln2: LnParams,
    pub ff: FfParams,
}

impl EncLayer {
    pub fn build<F: Real, R: Rng>(
        b: &mut ParamBuilder<F, R>,
        name: &str,
        d: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        EncLayer {
            ln1: LnParams::build(b, &format!("{name}.ln1"), d),
            attn: AttnParams::build(b, &format!("{name}.attn"), d, heads),
            ln2: LnParams::build(b, &format!("{name}.ln2"), d),
            ff: FfParams::build(b, &format!("{name}.ff"), d, ff),
        }
    }

    /// Pre-layer-norm block: x + attn(LN(x)), then x + ff(LN(x)).
    pub fn apply<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        let h = self.ln1.apply(g, x);
        let a = self.attn.apply(g, h, h, None);
        let a = g.dropout(a, dropout, rng);
        let x = g.add(x, a);
        let h = self.ln2.apply(g, x);
        let f = self.ff.apply(g, h);
        let f = g.dropout(f, dropout, rng);
        g.add(x, f)
    }
}

pub struct DecLayer {
    pub ln1: LnParams,
    pub self_attn: AttnParams,
    pub ln2: LnParams,
    pub cross_attn: AttnParams,
    pub ln3: LnParams,
    pub ff: FfParams,
}

impl DecLayer {
    pub fn build<F: Real, R: Rng>(
        b: &mut ParamBuilder<F, R>,
        name: &str,
        d: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        DecLayer {
            ln1: LnParams::build(b, &format!("{name}.ln1"), d),
            self_attn: AttnParams::build(b, &format!("{name}.self_attn"), d, heads),
            ln2: LnParams::build(b, &format!("{name}.ln2"), d),
            cross_attn: AttnParams::build(b, &format!("{name}.cross_attn"), d, heads),
            ln3: LnParams::build(b, &format!("{name}.ln3"), d),
            ff: FfParams::build(b, &format!("{name}.ff"), d, ff),
        }
    }

    pub fn apply<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        enc: NodeId,
        causal: &[bool],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        let h = self.ln1.apply(g, x);
        let a = self.self_attn.apply(g, h, h, Some(causal));
        let a = g.dropout(a, dropout, rng);
        let x = g.add(x, a);
        let h = self.ln2.apply(g, x);
        let a = self.cross_attn.apply(g, h, enc, None);
        let a = g.dropout(a, dropout, rng);
        let x = g.add(x, a);
        let h = self.ln3.apply(g, x);
        let f = self.ff.apply(g, h);
        let f = g.dropout(f, dropout, rng);
        g.add(x, f)
    }
}

pub struct Baseline {
    pub cfg: BaselineConfig,
    pub conv1_w: usize,
    pub conv1_b: usize,
    pub conv2_w: usize,
    pub conv2_b: usize,
    pub in_proj_w: usize,
    pub in_proj_b: usize,
    pub enc_layers: Vec<EncLayer>,
    pub ln_enc: LnParams,
    pub tok_emb: usize,
    pub dec_layers: Vec<DecLayer>,
    pub ln_dec: LnParams,
    pub out_w: usize,
    pub out_b: usize,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

impl Baseline {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &BaselineConfig, rng: &mut impl Rng) -> Self {
        Self::build(&mut ParamBuilder { store, rng, create: true }, cfg)
    }

    pub fn bind<F: Real>(store: &mut ParamStore<F>, cfg: &BaselineConfig) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self::build(&mut ParamBuilder { store, rng: &mut rng, create: false }, cfg)
    }

    fn build<F: Real, R: Rng>(b: &mut ParamBuilder<F, R>, cfg: &BaselineConfig) -> Self {
        cfg.validate();
        let d = cfg.d_model;
        let c = cfg.conv_channels;
        Baseline {
            cfg: cfg.clone(),
            conv1_w: b.p("baseline.conv1.w", CONV_KERNEL * cfg.feature_dim, c, Init::Xavier),
            conv1_b: b.p("baseline.conv1.b", 1, c, Init::Zeros),
            conv2_w: b.p("baseline.conv2.w", CONV_KERNEL * c, c, Init::Xavier),
            conv2_b: b.p("baseline.conv2.b", 1, c, Init::Zeros),
            in_proj_w: b.p("baseline.in_proj.w", c, d, Init::Xavier),
            in_proj_b: b.p("baseline.in_proj.b", 1, d, Init::Zeros),
            enc_layers: (0..cfg.enc_layers)
                .map(|i| EncLayer::build(b, &format!("baseline.enc.{i}"), d, cfg.ff_dim, cfg.heads))
                .collect(),
            ln_enc: LnParams::build(b, "baseline.ln_enc", d),
            tok_emb: b.p("baseline.tok_emb", cfg.vocab_size, d, Init::Normal(0.02)),
            dec_layers: (0..cfg.dec_layers)
                .map(|i| DecLayer::build(b, &format!("baseline.dec.{i}"), d, cfg.ff_dim, cfg.heads))
                .collect(),
            ln_dec: LnParams::build(b, "baseline.ln_dec", d),
            out_w: b.p("baseline.out.w", d, cfg.vocab_size, Init::Xavier),
            out_b: b.p("baseline.out.b", 1, cfg.vocab_size, Init::Zeros),
        }
    }

    /// Two stride-2 conv layers plus projection: `(T, F)` features to
    /// `(ceil(ceil(T/2)/2), d_model)` frames.
    pub fn subsample<F: Real>(&self, g: &mut Graph<F>, features: NodeId) -> NodeId {
        let t = g.rows(features);
        assert!(t >= 4, "utterance too short: {t} frames (need at least 4)");
        let cols = self.im2col_conv(g, features, self.conv1_w, self.conv1_b);
        let h = g.relu(cols);
        let cols = self.im2col_conv(g, h, self.conv2_w, self.conv2_b);
        let h = g.relu(cols);
        let w = g.param(self.in_proj_w);
        let b = g.param(self.in_proj_b);
        let h = g.matmul(h, w);
        g.add_row(h, b)
    }

    fn im2col_conv<F: Real>(&self, g: &mut Graph<F>, x: NodeId, w: usize, b: usize) -> NodeId {
        let cols = g.im2col(x, CONV_KERNEL, CONV_STRIDE, 1);
        let w = g.param(w);
        let b = g.param(b);
        let h = g.matmul(cols, w);
        g.add_row(h, b)
    }

    /// Full encoder: subsample, positional encoding, encoder stack,
    /// final layer norm. Returns `(T_enc, d_model)` states.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        features: &[f32],
        rng: &mut impl Rng,
    ) -> NodeId {
        let t = features.len() / self.cfg.feature_dim;
        let vals: Vec<F> = features.iter().map(|&v| F::from_f64(v as f64)).collect();
        let x = g.input(t, self.cfg.feature_dim, vals);
        let mut h = self.subsample(g, x);
        let t_enc = g.rows(h);
        let pe = g.input(t_enc, self.cfg.d_model, sinusoidal_table(t_enc, self.cfg.d_model));
        h = g.add(h, pe);
        for layer in &self.enc_layers {
            h = layer.apply(g, h, self.cfg.dropout, rng);
        }
        self.ln_enc.apply(g, h)
    }

    /// Decoder hidden states for a teacher-forced prefix (after the final
    /// layer norm), shape `(len(prefix), d_model)`.
    pub fn decode_states<F: Real>(
        &self,
        g: &mut Graph<F>,
        prefix: &[usize],
        enc: NodeId,
        rng: &mut impl Rng,
    ) -> NodeId {
        assert!(!prefix.is_empty(), "empty decoder prefix");
        assert_eq!(prefix[0], BOS, "decoder prefix must start with BOS");
        let mut h = self.embed_prefix(g, prefix, self.tok_emb);
        let causal = causal_mask(prefix.len());
        for layer in &self.dec_layers {
            h = layer.apply(g, h, enc, &causal, self.cfg.dropout, rng);
        }
        self.ln_dec.apply(g, h)
    }

    /// Token embedding + positional encoding for a decoder prefix.
    pub fn embed_prefix<F: Real>(&self, g: &mut Graph<F>, prefix: &[usize], emb_pid: usize) -> NodeId {
        let emb = g.param(emb_pid);
        let x = g.gather(emb, prefix);
        let x = g.scale(x, F::from_f64((self.cfg.d_model as f64).sqrt()));
        let pe = g.input(prefix.len(), self.cfg.d_model, sinusoidal_table(prefix.len(), self.cfg.d_model));
        g.add(x, pe)
    }

    /// `P(Y_t | Y_0..Y_{t-1}; X)` for every prefix position, shape
    /// `(len(prefix), vocab)`; each row is a distribution.
    pub fn decode_probs<F: Real>(
        &self,
        g: &mut Graph<F>,
        prefix: &[usize],
        enc: NodeId,
        rng: &mut impl Rng,
    ) -> NodeId {
        let h = self.decode_states(g, prefix, enc, rng);
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let logits = g.matmul(h, w);
        let logits = g.add_row(logits, b);
        g.softmax_rows(logits)
    }

    /// Greedy search; returns tokens without BOS, EOS stripped.
    pub fn greedy_decode<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &[f32],
        max_len: usize,
    ) -> Vec<usize> {
        assert!(max_len >= 1);
        let mut g = Graph::new(store);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = self.encode(&mut g, features, &mut rng);
        let mut prefix = vec![BOS];
        for _ in 0..max_len {
            let probs = self.decode_probs(&mut g, &prefix, enc, &mut rng);
            let last = g.slice_rows(probs, prefix.len() - 1, 1);
            let next = g.argmax_rows(last)[0];
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        prefix[1..].to_vec()
    }
}

/// Lower-triangular self-attention mask for `t` positions.
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = true;
        }
    }
    m
}

/// Output length of the two stride-2 convolutions.
pub fn subsampled_len(t: usize) -> usize {
    let t1 = t.div_ceil(2);
    t1.div_ceil(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BaselineConfig {
        BaselineConfig {
            d_model: 8,
            ff_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            conv_channels: 4,
            dropout: 0.0,
            vocab_size: 11,
            feature_dim: 6,
        }
    }

    fn tiny() -> (ParamStore<f64>, Baseline) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = Baseline::new(&mut store, &tiny_cfg(), &mut rng);
        (store, base)
    }

    fn no_rng() -> rand::rngs::mock::StepRng {
        rand::rngs::mock::StepRng::new(0, 0)
    }

    #[test]
    fn subsample_arithmetic() {
        assert_eq!(subsampled_len(16), 4);
        assert_eq!(subsampled_len(17), 5);
        assert_eq!(subsampled_len(4), 1);
        assert_eq!(subsampled_len(100), 25);
    }

    #[test]
    fn encode_shapes() {
        let (store, base) = tiny();
        for t in [4usize, 9, 16, 17] {
            let feats: Vec<f32> = (0..t * 6).map(|i| (i % 7) as f32 * 0.1).collect();
            let mut g = Graph::new(&store);
            let enc = base.encode(&mut g, &feats, &mut no_rng());
            assert_eq!(g.rows(enc), subsampled_len(t), "T = {t}");
            assert_eq!(g.cols(enc), 8);
        }
    }

    #[test]
    fn decode_probs_shape_and_normalization() {
        let (store, base) = tiny();
        let feats: Vec<f32> = (0..8 * 6).map(|i| (i % 7) as f32 * 0.1).collect();
        let mut g = Graph::new(&store);
        let enc = base.encode(&mut g, &feats, &mut no_rng());
        let prefix = [BOS, 5, 6, 7];
        let probs = base.decode_probs(&mut g, &prefix, enc, &mut no_rng());
        assert_eq!((g.rows(probs), g.cols(probs)), (4, 11));
        for row in g.values(probs).chunks(11) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_is_causal() {
        // Changing a later prefix token must not change earlier rows.
        let (store, base) = tiny();
        let feats: Vec<f32> = (0..8 * 6).map(|i| (i % 7) as f32 * 0.1).collect();
        let run = |prefix: &[usize]| -> Vec<f64> {
            let mut g = Graph::new(&store);
            let enc = base.encode(&mut g, &feats, &mut no_rng());
            let probs = base.decode_probs(&mut g, prefix, enc, &mut no_rng());
            g.values(probs).to_vec()
        };
        let a = run(&[BOS, 5, 6, 7]);
        let b = run(&[BOS, 5, 6, 9]);
        assert_eq!(a[..3 * 11], b[..3 * 11], "rows before the changed token");
        assert_ne!(a[3 * 11..], b[3 * 11..], "changed token affects its own row");
    }

    #[test]
    fn greedy_decode_terminates_without_sentinels() {
        let (store, base) = tiny();
        let feats: Vec<f32> = (0..8 * 6).map(|i| (i % 7) as f32 * 0.1).collect();
        let toks = base.greedy_decode(&store, &feats, 12);
        assert!(toks.len() <= 12);
        assert!(toks.iter().all(|&t| t != BOS && t != EOS));
    }

    #[test]
    #[should_panic(expected = "utterance too short")]
    fn short_utterance_panics() {
        let (store, base) = tiny();
        let feats = vec![0.0f32; 3 * 6];
        let mut g = Graph::new(&store);
        base.encode(&mut g, &feats, &mut no_rng());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, true]
        );
    }
}
