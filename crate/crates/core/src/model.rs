//! A small pre-norm transformer usable as a bidirectional encoder trained by
//! masked-token prediction or as a causal decoder trained by next-token
//! prediction.
//!
//! Each block computes
//!
//! ```text
//! x = x + Attn(LN1(x))
//! x = x + FFN(LN2(x))      FFN(h) = W_down GELU(W_up h)
//! ```
//!
//! and the hidden states handed to downstream pooling are `LN_f(x)`. Every
//! linear map stores its weight as `out x in` and optionally carries a
//! low-rank adapter (`lora_a`, `lora_b`) whose contribution is scaled by
//! `alpha / rank`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{is_special, TokenSequence, BOS, PAD};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
}

fn default_mask_prob() -> f64 {
    0.15
}

impl ModelConfig {
    /// Desk-scale defaults: D=64, 2 layers, 4 heads, d_ff=128, max_len 128.
    pub fn desk(arch: ArchKind, vocab_size: usize) -> Self {
        ModelConfig {
            arch,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 128,
            mask_prob: default_mask_prob(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!("max_len {} must be at least 4", self.max_len)));
        }
        if self.vocab_size <= crate::vocab::UNK {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob {} must lie in (0, 1)", self.mask_prob)));
        }
        Ok(())
    }

    /// Names of the adaptable linear maps with their `(in, out)` sizes.
    pub fn linear_layers(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("blocks.{l}.attn.{proj}"), d, d));
            }
            out.push((format!("blocks.{l}.ffn.up"), d, f));
            out.push((format!("blocks.{l}.ffn.down"), f, d));
        }
        out
    }
}

/// Low-rank adapter settings; the update is scaled by `alpha / rank`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniLlm {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lora: Option<LoraConfig>,
}

/// Per-token representations of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// `L x D`.
    pub states: Tensor,
    pub valid_length: usize,
    pub token_ids: Vec<usize>,
}

impl HiddenStates {
    pub fn row(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }
}

/// Builds a model with Gaussian weights (std 0.02), zero biases and unit
/// layer-norm gains. All parameters start trainable.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<MiniLlm> {
    build_model_with_std(config, seed, INIT_STD)
}

/// Same as [`build_model`] with a caller-chosen weight scale; larger scales are
/// handy when finite-difference checks need non-vanishing gradients.
pub fn build_model_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<MiniLlm> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, v) = (config.d_model, config.vocab_size);
    let mut params = ParamStore::new();
    params.insert("embed.tokens", Tensor::randn(v, d, std, &mut rng));
    params.insert("embed.positions", Tensor::randn(config.max_len, d, std, &mut rng));
    for l in 0..config.n_layers {
        for ln in ["ln1", "ln2"] {
            params.insert(format!("blocks.{l}.{ln}.gain"), Tensor::filled(1, d, 1.0));
            params.insert(format!("blocks.{l}.{ln}.offset"), Tensor::zeros(1, d));
        }
    }
    for (name, fan_in, fan_out) in config.linear_layers() {
        params.insert(format!("{name}.weight"), Tensor::randn(fan_out, fan_in, std, &mut rng));
        params.insert(format!("{name}.bias"), Tensor::zeros(1, fan_out));
    }
    params.insert("final_norm.gain", Tensor::filled(1, d, 1.0));
    params.insert("final_norm.offset", Tensor::zeros(1, d));
    params.insert("lm_head.weight", Tensor::randn(v, d, std, &mut rng));
    params.insert("lm_head.bias", Tensor::zeros(1, v));
    params.set_all_trainable(true);
    Ok(MiniLlm {
        config,
        params,
        lora: None,
    })
}

impl MiniLlm {
    /// Records the forward pass for `ids` on `tape` and returns the `L x D`
    /// hidden-state node.
    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        self.forward_with(tape, &self.params, ids)
    }

    /// Forward pass reading parameters from `params`, which must follow this
    /// model's layout (it may hold extra entries such as a forecasting head).
    pub fn forward_with(&self, tape: &mut Tape, params: &ParamStore, ids: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let len = ids.len();
        if len == 0 {
            return Err(Error::Precondition("empty input sequence".into()));
        }
        if len > cfg.max_len {
            return Err(Error::Length {
                len,
                max_len: cfg.max_len,
            });
        }
        TokenSequence(ids.to_vec()).validate(cfg.vocab_size)?;
        let valid = TokenSequence(ids.to_vec()).valid_length();
        if valid == 0 {
            return Err(Error::Precondition("sequence holds only padding".into()));
        }

        let tokens = tape.param(params, "embed.tokens")?;
        let positions = tape.param(params, "embed.positions")?;
        let tok = tape.embedding(tokens, ids)?;
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(positions, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        let mask = tape.constant(self.attention_mask(len, valid))?;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        for l in 0..cfg.n_layers {
            let h = self.norm(tape, params, &format!("blocks.{l}.ln1"), x)?;
            let q = self.linear(tape, params, &format!("blocks.{l}.attn.query"), h)?;
            let k = self.linear(tape, params, &format!("blocks.{l}.attn.key"), h)?;
            let v = self.linear(tape, params, &format!("blocks.{l}.attn.value"), h)?;
            let dh = cfg.head_dim();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, mask)?;
                let probs = tape.softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let attn = self.linear(tape, params, &format!("blocks.{l}.attn.output"), merged)?;
            x = tape.add(x, attn)?;

            let h = self.norm(tape, params, &format!("blocks.{l}.ln2"), x)?;
            let up = self.linear(tape, params, &format!("blocks.{l}.ffn.up"), h)?;
            let act = tape.gelu(up)?;
            let down = self.linear(tape, params, &format!("blocks.{l}.ffn.down"), act)?;
            x = tape.add(x, down)?;
        }
        self.norm(tape, params, "final_norm", x)
    }

    /// Additive attention mask: 0 where query `i` may read key `j`, a large
    /// negative number elsewhere. Padding keys are always hidden; decoders also
    /// hide keys after the query.
    fn attention_mask(&self, len: usize, valid: usize) -> Tensor {
        let causal = self.config.arch == ArchKind::Decoder;
        let mut data = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                if j >= valid || (causal && j > i) {
                    data[i * len + j] = MASK_FILL;
                }
            }
        }
        Tensor::matrix(len, len, data)
    }

    fn norm(&self, tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(params, &format!("{prefix}.gain"))?;
        let b = tape.param(params, &format!("{prefix}.offset"))?;
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(params, &format!("{prefix}.weight"))?;
        let b = tape.param(params, &format!("{prefix}.bias"))?;
        let y = tape.matmul_nt(x, w)?;
        let mut y = tape.add_row(y, b)?;
        let a_name = format!("{prefix}.lora_a");
        if let (Some(lora), true) = (self.lora, params.contains(&a_name)) {
            let a = tape.param(params, &a_name)?;
            let bm = tape.param(params, &format!("{prefix}.lora_b"))?;
            let down = tape.matmul_nt(x, a)?;
            let up = tape.matmul_nt(down, bm)?;
            let up = tape.scale(up, lora.scale())?;
            y = tape.add(y, up)?;
        }
        Ok(y)
    }

    /// Token logits (`rows x V`) for selected hidden-state rows.
    pub fn logits_for_rows(&self, tape: &mut Tape, params: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let picked = tape.embedding(hidden, rows)?;
        let w = tape.param(params, "lm_head.weight")?;
        let b = tape.param(params, "lm_head.bias")?;
        let logits = tape.matmul_nt(picked, w)?;
        tape.add_row(logits, b)
    }

    pub fn eos_token(&self) -> usize {
        match self.config.arch {
            ArchKind::Encoder => crate::vocab::MASK,
            ArchKind::Decoder => crate::vocab::EOS,
        }
    }
}

/// Hidden states for one sequence, without gradient tracking.
pub fn encode_sequence(model: &MiniLlm, seq: &TokenSequence) -> Result<HiddenStates> {
    if model.config.arch == ArchKind::Decoder && seq.ids().first() != Some(&BOS) {
        return Err(Error::Precondition("decoder input must begin with BOS".into()));
    }
    let mut tape = Tape::new();
    let h = model.forward(&mut tape, seq.ids())?;
    Ok(HiddenStates {
        states: tape.value(h).clone(),
        valid_length: seq.valid_length(),
        token_ids: seq.ids().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Replaces `ceil(mask_prob * n)` uniformly chosen content positions with
/// `[MASK]`, where `n` counts the non-special tokens.
pub fn mask_for_mlm<R: Rng + ?Sized>(seq: &TokenSequence, mask_prob: f64, rng: &mut R) -> Result<MaskedSequence> {
    if !(mask_prob > 0.0 && mask_prob <= 1.0) {
        return Err(Error::Config(format!("mask_prob {mask_prob} must lie in (0, 1]")));
    }
    let content: Vec<usize> = (0..seq.len()).filter(|&i| !is_special(seq.ids()[i])).collect();
    if content.is_empty() {
        return Err(Error::Precondition("no maskable tokens in sequence".into()));
    }
    // Guard against products like 0.15 * 20 = 3.0000000000000004.
    let wanted = (mask_prob * content.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    let count = wanted.min(content.len());
    let mut positions: Vec<usize> = sample(rng, content.len(), count).into_iter().map(|k| content[k]).collect();
    positions.sort_unstable();
    let mut ids = seq.ids().to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        ids[p] = crate::vocab::MASK;
    }
    Ok(MaskedSequence { ids, positions, targets })
}

/// Records the masked-token loss: mean cross-entropy over masked positions.
pub fn mlm_loss_on_tape(
    model: &MiniLlm,
    tape: &mut Tape,
    params: &ParamStore,
    masked: &MaskedSequence,
) -> Result<Var> {
    if masked.positions.is_empty() {
        return Err(Error::Precondition("mask set is empty".into()));
    }
    if masked.positions.len() != masked.targets.len() {
        return Err(Error::Contract("one target per masked position".into()));
    }
    let hidden = model.forward_with(tape, params, &masked.ids)?;
    let logits = model.logits_for_rows(tape, params, hidden, &masked.positions)?;
    tape.cross_entropy(logits, &masked.targets)
}

pub fn mlm_loss(model: &MiniLlm, masked: &MaskedSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = mlm_loss_on_tape(model, &mut tape, &model.params, masked)?;
    Ok(tape.value(loss).item())
}

/// Records the next-token loss for `[BOS] ⊕ seq`: row `i - 1` predicts token
/// `i`, padding targets are skipped.
pub fn clm_loss_on_tape(model: &MiniLlm, tape: &mut Tape, params: &ParamStore, seq: &TokenSequence) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::Precondition("empty sequence".into()));
    }
    let mut input = Vec::with_capacity(seq.len() + 1);
    input.push(BOS);
    input.extend_from_slice(seq.ids());
    let (rows, targets): (Vec<usize>, Vec<usize>) = seq
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| (i, t))
        .unzip();
    if targets.is_empty() {
        return Err(Error::Precondition("sequence holds only padding".into()));
    }
    // The last real token predicts nothing, so the forward pass stops before it.
    let valid = seq.valid_length();
    let hidden = model.forward_with(tape, params, &input[..valid])?;
    let logits = model.logits_for_rows(tape, params, hidden, &rows)?;
    tape.cross_entropy(logits, &targets)
}

pub fn clm_loss(model: &MiniLlm, seq: &TokenSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = clm_loss_on_tape(model, &mut tape, &model.params, seq)?;
    Ok(tape.value(loss).item())
}

impl MiniLlm {
    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        self.params.save(&dir.join(format!("{stem}.params.json")))?;
        let sidecar = serde_json::json!({ "config": self.config, "lora": self.lora });
        let path = dir.join(format!("{stem}.config.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("config serialises"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            config: ModelConfig,
            lora: Option<LoraConfig>,
        }
        let path = dir.join(format!("{stem}.config.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        sidecar.config.validate()?;
        let params = ParamStore::load(&dir.join(format!("{stem}.params.json")))?;
        Ok(MiniLlm {
            config: sidecar.config,
            params,
            lora: sidecar.lora,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EOS, MASK, SEP};

    fn cfg(arch: ArchKind) -> ModelConfig {
        ModelConfig {
            arch,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            max_len: 12,
            mask_prob: 0.15,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(ArchKind::Encoder);
        assert_eq!(c.head_dim(), 4);
        c.n_heads = 3;
        assert!(matches!(build_model(c, 0), Err(Error::Config(_))));
        let mut c = cfg(ArchKind::Encoder);
        c.max_len = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(cfg(ArchKind::Decoder), 7).unwrap();
        let b = build_model(cfg(ArchKind::Decoder), 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_model(cfg(ArchKind::Decoder), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn encoder_shape_and_length_error() {
        let m = build_model(cfg(ArchKind::Encoder), 1).unwrap();
        for len in 1..=12 {
            let seq = TokenSequence((0..len).map(|i| 6 + i % 10).collect());
            let h = encode_sequence(&m, &seq).unwrap();
            assert_eq!(h.states.shape(), &[len, 8]);
        }
        let long = TokenSequence(vec![6; 13]);
        assert!(matches!(encode_sequence(&m, &long), Err(Error::Length { .. })));
    }

    #[test]
    fn decoder_single_bos_and_bos_requirement() {
        let m = build_model(cfg(ArchKind::Decoder), 1).unwrap();
        let h = encode_sequence(&m, &TokenSequence(vec![BOS])).unwrap();
        assert_eq!(h.states.shape(), &[1, 8]);
        assert!(h.states.all_finite());
        assert!(encode_sequence(&m, &TokenSequence(vec![7, 8])).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let m = build_model(cfg(ArchKind::Decoder), 3).unwrap();
        let base = TokenSequence(vec![BOS, 7, 8, 9, 10, 11]);
        let h0 = encode_sequence(&m, &base).unwrap();
        let mut changed = base.clone();
        changed.0[4] = 15;
        let h1 = encode_sequence(&m, &changed).unwrap();
        for i in 0..4 {
            for (a, b) in h0.row(i).iter().zip(h1.row(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(h0.row(4).iter().zip(h1.row(4)).any(|(a, b)| a != b));
    }

    #[test]
    fn padding_does_not_change_valid_rows() {
        for arch in [ArchKind::Encoder, ArchKind::Decoder] {
            let m = build_model(cfg(arch), 5).unwrap();
            let seq = TokenSequence(vec![BOS, 7, 8, 9]);
            let padded = TokenSequence(vec![BOS, 7, 8, 9, PAD, PAD]);
            let a = encode_sequence(&m, &seq).unwrap();
            let b = encode_sequence(&m, &padded).unwrap();
            assert_eq!(b.valid_length, 4);
            for i in 0..4 {
                for (x, y) in a.row(i).iter().zip(b.row(i)) {
                    assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn masking_counts_and_specials() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = TokenSequence((0..20).map(|i| 6 + i % 10).collect());
        let m = mask_for_mlm(&seq, 0.15, &mut rng).unwrap();
        assert_eq!(m.positions.len(), 3);
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(m.ids[p], MASK);
            assert_eq!(seq.ids()[p], t);
        }

        let four = TokenSequence(vec![BOS, 7, 8, SEP, 9, 10, EOS, PAD]);
        let m = mask_for_mlm(&four, 0.999_999, &mut rng).unwrap();
        assert_eq!(m.positions, vec![1, 2, 4, 5]);

        for _ in 0..50 {
            let m = mask_for_mlm(&four, 0.5, &mut rng).unwrap();
            assert!(m.positions.iter().all(|&p| ![0, 3, 6, 7].contains(&p)));
        }
        assert!(mask_for_mlm(&TokenSequence(vec![BOS, EOS]), 0.15, &mut rng).is_err());
    }

    #[test]
    fn mlm_loss_decomposes_over_masked_positions() {
        let m = build_model(cfg(ArchKind::Encoder), 2).unwrap();
        let ids = vec![7, MASK, 9, MASK, 11];
        let both = MaskedSequence {
            ids: ids.clone(),
            positions: vec![1, 3],
            targets: vec![8, 10],
        };
        let first = MaskedSequence {
            ids: ids.clone(),
            positions: vec![1],
            targets: vec![8],
        };
        let second = MaskedSequence {
            ids,
            positions: vec![3],
            targets: vec![10],
        };
        let l = mlm_loss(&m, &both).unwrap();
        let parts = (mlm_loss(&m, &first).unwrap() + mlm_loss(&m, &second).unwrap()) / 2.0;
        assert!((l - parts).abs() < 1e-12);

        let empty = MaskedSequence {
            positions: vec![],
            targets: vec![],
            ..both
        };
        assert!(matches!(mlm_loss(&m, &empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn clm_padding_invariance_and_empty() {
        let m = build_model(cfg(ArchKind::Decoder), 4).unwrap();
        let seq = TokenSequence(vec![7, 8, 9]);
        let padded = TokenSequence(vec![7, 8, 9, PAD, PAD]);
        assert_eq!(clm_loss(&m, &seq).unwrap(), clm_loss(&m, &padded).unwrap());
        assert!(clm_loss(&m, &TokenSequence(vec![])).is_err());
    }

    #[test]
    fn untrained_losses_near_uniform() {
        let v = 20.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for arch in [ArchKind::Encoder, ArchKind::Decoder] {
            let m = build_model(cfg(arch), 11).unwrap();
            let mut total = 0.0;
            for _ in 0..20 {
                let seq = TokenSequence((0..10).map(|_| rng.random_range(6..20)).collect());
                total += match arch {
                    ArchKind::Encoder => mlm_loss(&m, &mask_for_mlm(&seq, 0.15, &mut rng).unwrap()).unwrap(),
                    ArchKind::Decoder => clm_loss(&m, &seq).unwrap(),
                };
            }
            let mean = total / 20.0;
            assert!((mean - v.ln()).abs() / v.ln() < 0.15, "{arch:?}: {mean}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(cfg(ArchKind::Encoder), 2).unwrap();
        m.save(dir.path(), "base").unwrap();
        let back = MiniLlm::load(dir.path(), "base").unwrap();
        assert_eq!(back.config, m.config);
        for (name, t) in m.params.iter() {
            assert_eq!(back.params.get(name).unwrap().data(), t.data());
        }
    }
}
