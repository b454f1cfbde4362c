//! The answerer backbone: a small bidirectional transformer over a combined
//! [visual slots; text tokens] sequence with a mean-pooled answer head.
//!
//! The backbone is trained once on paired scene/caption data and then frozen.
//! Everything downstream (imagined-slot injection, substitutes, text-only
//! inference) runs against the frozen parameters; mutable access is refused
//! after freezing and a content digest makes violations detectable.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{taped_attention, taped_ffn, BufId, Matrix, Tape, LAYER_NORM_EPS};
use crate::scalar::Scalar;
use crate::rng::Rng;

/// Token id type for both text and image vocabularies.
pub type Token = u16;

/// Visual-slot embeddings: one row per slot, `visual_slots` x `dim`.
pub type VisualEmbeddings<S> = Matrix<S>;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub vocab_text: usize,
    pub vocab_image: usize,
    pub dim: usize,
    pub visual_slots: usize,
    pub max_text_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub choices: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_text: 64,
            // One id per (shape, color) object combination plus a blank:
            // 16 shapes x 4 colors + 1.
            vocab_image: 65,
            dim: 32,
            visual_slots: 8,
            max_text_len: 24,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            choices: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.visual_slots == 0 || self.max_text_len == 0 {
            return Err(Error::Config("sequence sections must be non-empty".into()));
        }
        if self.choices < 2 {
            return Err(Error::Config(format!("need at least 2 answer choices, got {}", self.choices)));
        }
        if self.vocab_text == 0 || self.vocab_image == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    /// Longest combined sequence the position table must cover.
    pub fn max_seq_len(&self) -> usize {
        self.visual_slots + self.max_text_len
    }
}

/// Where an injected visual-slot matrix came from; carried for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectionTag {
    Lim,
    Zero,
    Whitespace,
    RandomScaled,
    RandomGauss,
    BlankImage,
}

impl InjectionTag {
    pub fn name(&self) -> &'static str {
        match self {
            InjectionTag::Lim => "lim",
            InjectionTag::Zero => "zero",
            InjectionTag::Whitespace => "whitespace",
            InjectionTag::RandomScaled => "random_scaled",
            InjectionTag::RandomGauss => "random_gauss",
            InjectionTag::BlankImage => "blank_image",
        }
    }
}

/// How the visual section of the input sequence is supplied.
/// `TextOnly` omits the visual slots entirely: the sequence is shorter and
/// text occupies the positions the visual slots normally hold.
#[derive(Clone, Debug)]
pub enum ModalityInput<S> {
    Paired(VisualEmbeddings<S>),
    TextOnly,
    Injected(VisualEmbeddings<S>, InjectionTag),
}

/// Softmax answer distribution with the raw logits kept alongside.
#[derive(Clone, Debug)]
pub struct AnswerDistribution<S> {
    pub logits: Vec<S>,
    pub probs: Vec<S>,
}

impl<S: Scalar> AnswerDistribution<S> {
    pub fn from_logits(logits: Vec<S>) -> Result<Self> {
        let m = Matrix::row_vector(&logits)?;
        let p = crate::numerics::softmax_rows(&m)?;
        Ok(AnswerDistribution { logits, probs: p.row(0).to_vec() })
    }

    /// Argmax with ties broken toward the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn probs_f64(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.as_f64()).collect()
    }

    pub fn logits_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|v| v.as_f64()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub ffn_w1: Matrix<S>,
    pub ffn_w2: Matrix<S>,
    pub ln1_gamma: Matrix<S>,
    pub ln1_beta: Matrix<S>,
    pub ln2_gamma: Matrix<S>,
    pub ln2_beta: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams<S> {
    config: BackboneConfig,
    pub text_table: Matrix<S>,
    pub image_table: Matrix<S>,
    pub image_proj: Matrix<S>,
    pub pos_table: Matrix<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln_gamma: Matrix<S>,
    pub final_ln_beta: Matrix<S>,
    pub head: Matrix<S>,
    frozen: bool,
    freeze_digest: Option<[u8; 32]>,
}

pub(crate) fn xavier_uniform<S: Scalar>(
    rng: &mut Rng,
    fan_in: usize,
    fan_out: usize,
) -> Result<Matrix<S>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| S::of(rng.uniform(-limit, limit)))
}

fn gaussian_table<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix<S>> {
    Matrix::from_fn(rows, cols, |_, _| S::of(rng.normal_scaled(0.0, std)))
}

impl<S: Scalar> BackboneParams<S> {
    /// Fresh trainable parameters. Tables and position embeddings draw from
    /// N(0, 0.02^2), projections from Xavier-uniform, LayerNorms start at
    /// identity. Draw order follows the named-tensor order, so a seed pins
    /// every weight.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0x6261636b); // distinct stream per component
        let d = config.dim;
        let text_table = gaussian_table(&mut rng, config.vocab_text, d, 0.02)?;
        let image_table = gaussian_table(&mut rng, config.vocab_image, d, 0.02)?;
        let image_proj = xavier_uniform(&mut rng, d, d)?;
        let pos_table = gaussian_table(&mut rng, config.max_seq_len(), d, 0.02)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockParams {
                wq: xavier_uniform(&mut rng, d, d)?,
                wk: xavier_uniform(&mut rng, d, d)?,
                wv: xavier_uniform(&mut rng, d, d)?,
                wo: xavier_uniform(&mut rng, d, d)?,
                ffn_w1: xavier_uniform(&mut rng, d, d * config.ffn_mult)?,
                ffn_w2: xavier_uniform(&mut rng, d * config.ffn_mult, d)?,
                ln1_gamma: Matrix::from_vec(1, d, vec![S::one(); d])?,
                ln1_beta: Matrix::zeros(1, d),
                ln2_gamma: Matrix::from_vec(1, d, vec![S::one(); d])?,
                ln2_beta: Matrix::zeros(1, d),
            });
        }
        let final_ln_gamma = Matrix::from_vec(1, d, vec![S::one(); d])?;
        let final_ln_beta = Matrix::zeros(1, d);
        let head = xavier_uniform(&mut rng, d, config.choices)?;
        Ok(BackboneParams {
            config,
            text_table,
            image_table,
            image_proj,
            pos_table,
            blocks,
            final_ln_gamma,
            final_ln_beta,
            head,
            frozen: false,
            freeze_digest: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Canonical (name, tensor) listing; the order defines digests,
    /// checkpoints, and optimizer state alignment.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<S>)> {
        let mut out: Vec<(String, &Matrix<S>)> = vec![
            ("text_table".into(), &self.text_table),
            ("image_table".into(), &self.image_table),
            ("image_proj".into(), &self.image_proj),
            ("pos_table".into(), &self.pos_table),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.ffn_w1"), &b.ffn_w1));
            out.push((format!("block{i}.ffn_w2"), &b.ffn_w2));
            out.push((format!("block{i}.ln1_gamma"), &b.ln1_gamma));
            out.push((format!("block{i}.ln1_beta"), &b.ln1_beta));
            out.push((format!("block{i}.ln2_gamma"), &b.ln2_gamma));
            out.push((format!("block{i}.ln2_beta"), &b.ln2_beta));
        }
        out.push(("final_ln_gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln_beta".into(), &self.final_ln_beta));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable tensor access for the optimizer. Refused once frozen.
    pub fn named_tensors_mut(&mut self) -> Result<Vec<(String, &mut Matrix<S>)>> {
        if self.frozen {
            return Err(Error::Frozen(
                "backbone is frozen; parameter updates are not allowed".into(),
            ));
        }
        let mut out: Vec<(String, &mut Matrix<S>)> = vec![
            ("text_table".into(), &mut self.text_table),
            ("image_table".into(), &mut self.image_table),
            ("image_proj".into(), &mut self.image_proj),
            ("pos_table".into(), &mut self.pos_table),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.wv"), &mut b.wv));
            out.push((format!("block{i}.wo"), &mut b.wo));
            out.push((format!("block{i}.ffn_w1"), &mut b.ffn_w1));
            out.push((format!("block{i}.ffn_w2"), &mut b.ffn_w2));
            out.push((format!("block{i}.ln1_gamma"), &mut b.ln1_gamma));
            out.push((format!("block{i}.ln1_beta"), &mut b.ln1_beta));
            out.push((format!("block{i}.ln2_gamma"), &mut b.ln2_gamma));
            out.push((format!("block{i}.ln2_beta"), &mut b.ln2_beta));
        }
        out.push(("final_ln_gamma".into(), &mut self.final_ln_gamma));
        out.push(("final_ln_beta".into(), &mut self.final_ln_beta));
        out.push(("head".into(), &mut self.head));
        Ok(out)
    }

    /// SHA-256 over the canonical tensor listing.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.named_tensors() {
            hasher.update(name.as_bytes());
            let mut bytes = Vec::new();
            tensor.append_digest_bytes(&mut bytes);
            hasher.update(&bytes);
        }
        hasher.finalize().into()
    }

    /// Freeze the parameters and pin their digest.
    pub fn freeze(&mut self) {
        self.freeze_digest = Some(self.content_digest());
        self.frozen = true;
    }

    /// Verify the frozen parameters still hash to the pinned digest.
    pub fn assert_frozen(&self) -> Result<()> {
        let pinned = match (self.frozen, self.freeze_digest) {
            (true, Some(d)) => d,
            _ => return Err(Error::Frozen("backbone has not been frozen".into())),
        };
        if self.content_digest() != pinned {
            return Err(Error::Frozen(
                "backbone content digest changed after freezing".into(),
            ));
        }
        Ok(())
    }

    pub fn freeze_digest(&self) -> Option<[u8; 32]> {
        self.freeze_digest
    }

    /// Restore the frozen state from a loaded checkpoint: re-pin the digest
    /// from current content.
    pub(crate) fn mark_frozen_from_content(&mut self) {
        self.freeze()
    }

    fn validate_text(&self, text_tokens: &[Token]) -> Result<()> {
        if text_tokens.is_empty() {
            return Err(Error::Input("text input is empty".into()));
        }
        if text_tokens.len() > self.config.max_text_len {
            return Err(Error::Input(format!(
                "text length {} exceeds maximum {}",
                text_tokens.len(),
                self.config.max_text_len
            )));
        }
        for &t in text_tokens {
            if (t as usize) >= self.config.vocab_text {
                return Err(Error::Input(format!(
                    "text token {t} out of vocabulary {}",
                    self.config.vocab_text
                )));
            }
        }
        Ok(())
    }

    fn validate_visual(&self, z: &Matrix<S>) -> Result<()> {
        let want = (self.config.visual_slots, self.config.dim);
        if z.shape() != want {
            return Err(Error::Shape(format!(
                "visual slots must be {}x{}, got {}x{}",
                want.0,
                want.1,
                z.rows(),
                z.cols()
            )));
        }
        Ok(())
    }

    /// Register every tensor on a tape. `trainable` marks them as parameters
    /// so the training loop can read their gradients; inference and LIM
    /// training bind them as constants (gradients still flow through).
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> TapedBackbone {
        let reg = |tape: &mut Tape<S>, m: &Matrix<S>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let text_table = reg(tape, &self.text_table);
        let image_table = reg(tape, &self.image_table);
        let image_proj = reg(tape, &self.image_proj);
        let pos_table = reg(tape, &self.pos_table);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(TapedBlock {
                wq: reg(tape, &b.wq),
                wk: reg(tape, &b.wk),
                wv: reg(tape, &b.wv),
                wo: reg(tape, &b.wo),
                ffn_w1: reg(tape, &b.ffn_w1),
                ffn_w2: reg(tape, &b.ffn_w2),
                ln1_gamma: reg(tape, &b.ln1_gamma),
                ln1_beta: reg(tape, &b.ln1_beta),
                ln2_gamma: reg(tape, &b.ln2_gamma),
                ln2_beta: reg(tape, &b.ln2_beta),
            });
        }
        let final_ln_gamma = reg(tape, &self.final_ln_gamma);
        let final_ln_beta = reg(tape, &self.final_ln_beta);
        let head = reg(tape, &self.head);
        TapedBackbone {
            text_table,
            image_table,
            image_proj,
            pos_table,
            blocks,
            final_ln_gamma,
            final_ln_beta,
            head,
        }
    }

    /// Text-embedding rows for a token sequence (the same rows the forward
    /// pass consumes). This is the text representation the imagination
    /// module reads.
    pub fn embed_text(&self, text_tokens: &[Token]) -> Result<Matrix<S>> {
        self.validate_text(text_tokens)?;
        let d = self.config.dim;
        let mut data = Vec::with_capacity(text_tokens.len() * d);
        for &t in text_tokens {
            data.extend_from_slice(self.text_table.row(t as usize));
        }
        Matrix::from_vec(text_tokens.len(), d, data)
    }

    pub fn embed_text_on_tape(
        &self,
        tape: &mut Tape<S>,
        tb: &TapedBackbone,
        text_tokens: &[Token],
    ) -> Result<BufId> {
        self.validate_text(text_tokens)?;
        let ids: Vec<usize> = text_tokens.iter().map(|&t| t as usize).collect();
        tape.embed_rows(tb.text_table, &ids)
    }

    /// Visual-slot embeddings for an image token grid: table lookup followed
    /// by a linear projection.
    pub fn encode_image(&self, image_tokens: &[Token]) -> Result<VisualEmbeddings<S>> {
        let mut tape = Tape::new();
        let tb = self.bind(&mut tape, false);
        let out = self.encode_image_on_tape(&mut tape, &tb, image_tokens)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_image_on_tape(
        &self,
        tape: &mut Tape<S>,
        tb: &TapedBackbone,
        image_tokens: &[Token],
    ) -> Result<BufId> {
        if image_tokens.len() != self.config.visual_slots {
            return Err(Error::Input(format!(
                "image needs exactly {} tokens, got {}",
                self.config.visual_slots,
                image_tokens.len()
            )));
        }
        for &t in image_tokens {
            if (t as usize) >= self.config.vocab_image {
                return Err(Error::Input(format!(
                    "image token {t} out of vocabulary {}",
                    self.config.vocab_image
                )));
            }
        }
        let ids: Vec<usize> = image_tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.embed_rows(tb.image_table, &ids)?;
        tape.matmul(emb, tb.image_proj)
    }

    /// Full forward pass to answer logits (a 1 x choices buffer).
    ///
    /// The sequence is [visual slots; text] when a visual section is present
    /// and just [text] otherwise; in the text-only case the text rows take
    /// the leading positions of the learned position table, exactly as a
    /// sequence with no visual prefix would.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        tb: &TapedBackbone,
        visual: Option<BufId>,
        text_tokens: &[Token],
    ) -> Result<BufId> {
        let text = self.embed_text_on_tape(tape, tb, text_tokens)?;
        let seq = match visual {
            Some(v) => {
                let (r, c) = tape.shape(v);
                if (r, c) != (self.config.visual_slots, self.config.dim) {
                    return Err(Error::Shape(format!(
                        "visual slots must be {}x{}, got {r}x{c}",
                        self.config.visual_slots, self.config.dim
                    )));
                }
                tape.concat_rows(&[v, text])?
            }
            None => text,
        };
        let len = tape.shape(seq).0;
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = tape.embed_rows(tb.pos_table, &pos_ids)?;
        let mut h = tape.add(seq, pos)?;
        let eps = S::of(LAYER_NORM_EPS);
        for b in &tb.blocks {
            let normed = tape.layer_norm(h, b.ln1_gamma, b.ln1_beta, eps)?;
            let attn = taped_attention(
                tape,
                self.config.heads,
                normed,
                normed,
                normed,
                b.wq,
                b.wk,
                b.wv,
                b.wo,
            )?;
            h = tape.add(h, attn)?;
            let normed2 = tape.layer_norm(h, b.ln2_gamma, b.ln2_beta, eps)?;
            let ffn = taped_ffn(tape, normed2, b.ffn_w1, b.ffn_w2)?;
            h = tape.add(h, ffn)?;
        }
        let hn = tape.layer_norm(h, tb.final_ln_gamma, tb.final_ln_beta, eps)?;
        let pooled = tape.mean_rows(hn)?;
        tape.matmul(pooled, tb.head)
    }

    /// Answer distribution for one example. Paired and injected inputs with
    /// identical embeddings follow the identical code path, so their outputs
    /// are bit-identical.
    pub fn forward(
        &self,
        input: &ModalityInput<S>,
        text_tokens: &[Token],
    ) -> Result<AnswerDistribution<S>> {
        let mut tape = Tape::new();
        let tb = self.bind(&mut tape, false);
        let visual = match input {
            ModalityInput::Paired(z) | ModalityInput::Injected(z, _) => {
                self.validate_visual(z)?;
                Some(tape.constant(z.clone()))
            }
            ModalityInput::TextOnly => None,
        };
        let logits = self.forward_on_tape(&mut tape, &tb, visual, text_tokens)?;
        AnswerDistribution::from_logits(tape.value(logits).row(0).to_vec())
    }

    /// Cast every tensor to another scalar type (configs carried over).
    pub fn cast<T: Scalar>(&self) -> BackboneParams<T> {
        let mut out = BackboneParams {
            config: self.config.clone(),
            text_table: self.text_table.cast(),
            image_table: self.image_table.cast(),
            image_proj: self.image_proj.cast(),
            pos_table: self.pos_table.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ffn_w1: b.ffn_w1.cast(),
                    ffn_w2: b.ffn_w2.cast(),
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                })
                .collect(),
            final_ln_gamma: self.final_ln_gamma.cast(),
            final_ln_beta: self.final_ln_beta.cast(),
            head: self.head.cast(),
            frozen: false,
            freeze_digest: None,
        };
        if self.frozen {
            out.mark_frozen_from_content();
        }
        out
    }

    /// Build an empty (zeroed) parameter set for checkpoint loading.
    pub(crate) fn zeroed(config: BackboneConfig) -> Result<Self> {
        let mut p = BackboneParams::init(config, 0)?;
        for (_, t) in p.named_tensors_mut()? {
            for v in t.data_mut() {
                *v = S::zero();
            }
        }
        Ok(p)
    }
}

pub struct TapedBlock {
    pub wq: BufId,
    pub wk: BufId,
    pub wv: BufId,
    pub wo: BufId,
    pub ffn_w1: BufId,
    pub ffn_w2: BufId,
    pub ln1_gamma: BufId,
    pub ln1_beta: BufId,
    pub ln2_gamma: BufId,
    pub ln2_beta: BufId,
}

/// Tape buffer ids for a bound backbone, in the same structure as the
/// parameters themselves.
pub struct TapedBackbone {
    pub text_table: BufId,
    pub image_table: BufId,
    pub image_proj: BufId,
    pub pos_table: BufId,
    pub blocks: Vec<TapedBlock>,
    pub final_ln_gamma: BufId,
    pub final_ln_beta: BufId,
    pub head: BufId,
}

impl TapedBackbone {
    /// Buffer ids in canonical named-tensor order.
    pub fn ids_in_order(&self) -> Vec<BufId> {
        let mut out = vec![self.text_table, self.image_table, self.image_proj, self.pos_table];
        for b in &self.blocks {
            out.extend([
                b.wq, b.wk, b.wv, b.wo, b.ffn_w1, b.ffn_w2, b.ln1_gamma, b.ln1_beta,
                b.ln2_gamma, b.ln2_beta,
            ]);
        }
        out.extend([self.final_ln_gamma, self.final_ln_beta, self.head]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            vocab_text: 16,
            vocab_image: 12,
            dim: 8,
            visual_slots: 3,
            max_text_len: 6,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            choices: 4,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = BackboneParams::<f32>::init(small_config(), 7).unwrap();
        let b = BackboneParams::<f32>::init(small_config(), 7).unwrap();
        let c = BackboneParams::<f32>::init(small_config(), 8).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        assert_ne!(a.content_digest(), c.content_digest());
    }

    #[test]
    fn config_validation_rejects_bad_heads() {
        let mut cfg = small_config();
        cfg.heads = 3;
        assert!(matches!(
            BackboneParams::<f32>::init(cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn paired_and_injected_are_bit_identical() {
        let p = BackboneParams::<f64>::init(small_config(), 1).unwrap();
        let image: Vec<Token> = vec![1, 2, 3];
        let text: Vec<Token> = vec![4, 5, 6, 7];
        let z = p.encode_image(&image).unwrap();
        let a = p.forward(&ModalityInput::Paired(z.clone()), &text).unwrap();
        let b = p
            .forward(&ModalityInput::Injected(z, InjectionTag::Lim), &text)
            .unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = BackboneParams::<f32>::init(small_config(), 2).unwrap();
        let out = p.forward(&ModalityInput::TextOnly, &[1, 2, 3]).unwrap();
        let sum: f64 = out.probs_f64().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let d = AnswerDistribution::<f64>::from_logits(vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(d.predicted(), 0);
        let d2 = AnswerDistribution::<f64>::from_logits(vec![0.1, 0.9, 0.9]).unwrap();
        assert_eq!(d2.predicted(), 1);
    }

    #[test]
    fn text_only_accepts_every_length_up_to_max() {
        let p = BackboneParams::<f32>::init(small_config(), 3).unwrap();
        for len in 1..=small_config().max_text_len {
            let text: Vec<Token> = (0..len as Token).collect();
            p.forward(&ModalityInput::TextOnly, &text).unwrap();
        }
    }

    #[test]
    fn input_validation_errors() {
        let p = BackboneParams::<f32>::init(small_config(), 4).unwrap();
        // empty text
        assert!(matches!(
            p.forward(&ModalityInput::TextOnly, &[]),
            Err(Error::Input(_))
        ));
        // overlong text
        let long: Vec<Token> = vec![0; small_config().max_text_len + 1];
        assert!(matches!(
            p.forward(&ModalityInput::TextOnly, &long),
            Err(Error::Input(_))
        ));
        // out-of-vocabulary token
        assert!(matches!(
            p.forward(&ModalityInput::TextOnly, &[63]),
            Err(Error::Input(_))
        ));
        // wrong visual shape
        let bad = Matrix::zeros(2, 8);
        assert!(matches!(
            p.forward(&ModalityInput::Paired(bad), &[1]),
            Err(Error::Shape(_))
        ));
        // wrong image token count
        assert!(matches!(p.encode_image(&[1, 2]), Err(Error::Input(_))));
        // image token out of vocabulary
        assert!(matches!(p.encode_image(&[1, 2, 99]), Err(Error::Input(_))));
    }

    #[test]
    fn encode_image_single_token_changes_single_row() {
        let p = BackboneParams::<f64>::init(small_config(), 5).unwrap();
        let a = p.encode_image(&[1, 2, 3]).unwrap();
        let b = p.encode_image(&[1, 9, 3]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn frozen_refuses_mutation_and_detects_tampering() {
        let mut p = BackboneParams::<f32>::init(small_config(), 6).unwrap();
        assert!(p.assert_frozen().is_err(), "unfrozen params must not verify");
        p.freeze();
        p.assert_frozen().unwrap();
        assert!(matches!(p.named_tensors_mut(), Err(Error::Frozen(_))));
        // Simulate tampering through direct field access.
        let before = p.freeze_digest().unwrap();
        p.head.data_mut()[0] += 1.0;
        assert!(matches!(p.assert_frozen(), Err(Error::Frozen(_))));
        assert_eq!(p.freeze_digest().unwrap(), before);
    }

    #[test]
    fn forward_calls_leave_digest_unchanged() {
        let mut p = BackboneParams::<f32>::init(small_config(), 7).unwrap();
        p.freeze();
        let before = p.content_digest();
        let z = p.encode_image(&[4, 5, 6]).unwrap();
        for i in 0..200 {
            let text: Vec<Token> = vec![(i % 16) as Token, ((i * 7) % 16) as Token];
            p.forward(&ModalityInput::Paired(z.clone()), &text).unwrap();
            p.forward(&ModalityInput::TextOnly, &text).unwrap();
        }
        assert_eq!(p.content_digest(), before);
        p.assert_frozen().unwrap();
    }

    #[test]
    fn text_only_uses_leading_positions() {
        // With identical embeddings, a text-only pass must differ from a
        // paired pass precisely because positions and pooling change.
        let p = BackboneParams::<f64>::init(small_config(), 8).unwrap();
        let text: Vec<Token> = vec![1, 2, 3];
        let z = p.encode_image(&[1, 2, 3]).unwrap();
        let paired = p.forward(&ModalityInput::Paired(z), &text).unwrap();
        let text_only = p.forward(&ModalityInput::TextOnly, &text).unwrap();
        assert_ne!(paired.logits, text_only.logits);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        // Differentiate an answer NLL through the whole stack (both blocks,
        // pooling, head) with respect to the visual input and a handful of
        // parameters, and compare against central differences.
        let mut cfg = small_config();
        cfg.layers = 2;
        let p = BackboneParams::<f64>::init(cfg.clone(), 11).unwrap();
        let text: Vec<Token> = vec![1, 2, 3];
        let target = 2usize;
        let z0 = p.encode_image(&[1, 2, 3]).unwrap();

        // Analytic pass: visual input and all tensors bound as parameters.
        let mut tape = Tape::new();
        let tb = p.bind(&mut tape, true);
        let z_id = tape.param(z0.clone());
        let logits = p.forward_on_tape(&mut tape, &tb, Some(z_id), &text).unwrap();
        let loss = tape.nll_loss(logits, target).unwrap();
        tape.backward(&[(loss, 1.0)]).unwrap();

        let picked = [
            ("visual", z_id),
            ("block0.wq", tb.blocks[0].wq),
            ("block1.ffn_w2", tb.blocks[1].ffn_w2),
            ("block0.ln1_gamma", tb.blocks[0].ln1_gamma),
            ("pos_table", tb.pos_table),
            ("head", tb.head),
        ];
        let analytic: Vec<Matrix<f64>> =
            picked.iter().map(|&(_, id)| tape.grad(id).clone()).collect();
        let inits: Vec<Matrix<f64>> =
            picked.iter().map(|&(_, id)| tape.value(id).clone()).collect();

        let loss_fn = |vars: &[Matrix<f64>]| -> crate::error::Result<f64> {
            let mut q = p.clone();
            q.blocks[0].wq = vars[1].clone();
            q.blocks[1].ffn_w2 = vars[2].clone();
            q.blocks[0].ln1_gamma = vars[3].clone();
            q.pos_table = vars[4].clone();
            q.head = vars[5].clone();
            let out = q
                .forward(&ModalityInput::Paired(vars[0].clone()), &text)
                .unwrap();
            Ok(-out.probs[target].ln())
        };
        let report =
            crate::numerics::grad_check(loss_fn, &inits, &analytic, 1e-4).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {} entry {}",
            report.max_rel_err,
            picked[report.worst_param].0,
            report.worst_entry
        );
    }

    #[test]
    fn named_tensor_order_is_stable() {
        let p = BackboneParams::<f32>::init(small_config(), 9).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "text_table");
        assert_eq!(names[4], "block0.wq");
        assert_eq!(names[names.len() - 1], "head");
        // 4 leading tensors + 10 per block + 3 trailing.
        assert_eq!(names.len(), 4 + 10 * 2 + 3);
    }
}
