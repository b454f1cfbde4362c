//! The latent imagination module (LIM): a small cross-attention stack that
//! predicts the visual-slot embeddings a frozen answerer would have received,
//! from the text alone.
//!
//! A bank of learned latent queries (one per visual slot, plus fixed
//! sinusoidal slot positions) repeatedly cross-attends into the frozen text
//! embeddings and refines itself through residual feed-forward updates. The
//! final query states are injected into the answerer exactly where real
//! visual-slot embeddings would go. With all layers' output projections at
//! zero — or with zero layers — the module reduces to its anchor
//! `latent_queries + slot positions`, so every learned behavior is a residual
//! refinement of that anchor.

use crate::backbone::{BackboneConfig, BackboneParams, Token, VisualEmbeddings};
use crate::error::{Error, Result};
use crate::numerics::{
    taped_attention, taped_ffn, taped_split_head_attention, BufId, Matrix, SinusoidalTable, Tape,
    LAYER_NORM_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LimConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// With projections, attention uses learned Q/K/V/output maps; without,
    /// the normalized queries and text states attend to each other directly.
    pub projected: bool,
}

impl Default for LimConfig {
    fn default() -> Self {
        LimConfig { layers: 2, heads: 4, ffn_mult: 4, projected: true }
    }
}

impl LimConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} must be a positive multiple of lim heads {}",
                self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("lim ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Learned attention maps for one cross-attention layer (projected form).
#[derive(Clone, Debug)]
pub struct AttnProjections<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct LimBlock<S> {
    pub proj: Option<AttnProjections<S>>,
    pub ffn_w1: Matrix<S>,
    pub ffn_w2: Matrix<S>,
    pub ln_q_gamma: Matrix<S>,
    pub ln_q_beta: Matrix<S>,
    pub ln_kv_gamma: Matrix<S>,
    pub ln_kv_beta: Matrix<S>,
    pub ln_ffn_gamma: Matrix<S>,
    pub ln_ffn_beta: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct LimParams<S> {
    config: LimConfig,
    dim: usize,
    slots: usize,
    max_text_len: usize,
    pub latent_queries: Matrix<S>,
    sinusoid: SinusoidalTable<S>,
    pub blocks: Vec<LimBlock<S>>,
}

impl<S: Scalar> LimParams<S> {
    /// Fresh trainable parameters sized against a backbone. Latent queries
    /// draw from N(0, 0.02^2), projections from Xavier-uniform, LayerNorms
    /// start at identity; slot and text positions share one fixed sinusoidal
    /// table and are never learned.
    pub fn init(backbone: &BackboneConfig, config: LimConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        Self::init_raw(
            backbone.dim,
            backbone.visual_slots,
            backbone.max_text_len,
            config,
            seed,
        )
    }

    pub(crate) fn init_raw(
        d: usize,
        slots: usize,
        max_text_len: usize,
        config: LimConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate(d)?;
        if slots == 0 || max_text_len == 0 {
            return Err(Error::Config("lim needs positive slot and text sizes".into()));
        }
        let mut rng = Rng::derive(seed, 0x6c696d); // distinct stream per component
        let latent_queries =
            Matrix::from_fn(slots, d, |_, _| S::of(rng.normal_scaled(0.0, 0.02)))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let proj = if config.projected {
                Some(AttnProjections {
                    wq: crate::backbone::xavier_uniform(&mut rng, d, d)?,
                    wk: crate::backbone::xavier_uniform(&mut rng, d, d)?,
                    wv: crate::backbone::xavier_uniform(&mut rng, d, d)?,
                    wo: crate::backbone::xavier_uniform(&mut rng, d, d)?,
                })
            } else {
                None
            };
            blocks.push(LimBlock {
                proj,
                ffn_w1: crate::backbone::xavier_uniform(&mut rng, d, d * config.ffn_mult)?,
                ffn_w2: crate::backbone::xavier_uniform(&mut rng, d * config.ffn_mult, d)?,
                ln_q_gamma: Matrix::from_vec(1, d, vec![S::one(); d])?,
                ln_q_beta: Matrix::zeros(1, d),
                ln_kv_gamma: Matrix::from_vec(1, d, vec![S::one(); d])?,
                ln_kv_beta: Matrix::zeros(1, d),
                ln_ffn_gamma: Matrix::from_vec(1, d, vec![S::one(); d])?,
                ln_ffn_beta: Matrix::zeros(1, d),
            });
        }
        let table_len = slots.max(max_text_len);
        Ok(LimParams {
            config,
            dim: d,
            slots,
            max_text_len,
            latent_queries,
            sinusoid: SinusoidalTable::new(table_len, d)?,
            blocks,
        })
    }

    pub fn config(&self) -> &LimConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn max_text_len(&self) -> usize {
        self.max_text_len
    }

    /// Canonical (name, tensor) listing of the learned tensors; fixed
    /// sinusoidal tables are recomputable and deliberately excluded.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<S>)> {
        let mut out: Vec<(String, &Matrix<S>)> =
            vec![("latent_queries".into(), &self.latent_queries)];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(p) = &b.proj {
                out.push((format!("lim_block{i}.wq"), &p.wq));
                out.push((format!("lim_block{i}.wk"), &p.wk));
                out.push((format!("lim_block{i}.wv"), &p.wv));
                out.push((format!("lim_block{i}.wo"), &p.wo));
            }
            out.push((format!("lim_block{i}.ffn_w1"), &b.ffn_w1));
            out.push((format!("lim_block{i}.ffn_w2"), &b.ffn_w2));
            out.push((format!("lim_block{i}.ln_q_gamma"), &b.ln_q_gamma));
            out.push((format!("lim_block{i}.ln_q_beta"), &b.ln_q_beta));
            out.push((format!("lim_block{i}.ln_kv_gamma"), &b.ln_kv_gamma));
            out.push((format!("lim_block{i}.ln_kv_beta"), &b.ln_kv_beta));
            out.push((format!("lim_block{i}.ln_ffn_gamma"), &b.ln_ffn_gamma));
            out.push((format!("lim_block{i}.ln_ffn_beta"), &b.ln_ffn_beta));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<S>)> {
        let mut out: Vec<(String, &mut Matrix<S>)> =
            vec![("latent_queries".into(), &mut self.latent_queries)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(p) = &mut b.proj {
                out.push((format!("lim_block{i}.wq"), &mut p.wq));
                out.push((format!("lim_block{i}.wk"), &mut p.wk));
                out.push((format!("lim_block{i}.wv"), &mut p.wv));
                out.push((format!("lim_block{i}.wo"), &mut p.wo));
            }
            out.push((format!("lim_block{i}.ffn_w1"), &mut b.ffn_w1));
            out.push((format!("lim_block{i}.ffn_w2"), &mut b.ffn_w2));
            out.push((format!("lim_block{i}.ln_q_gamma"), &mut b.ln_q_gamma));
            out.push((format!("lim_block{i}.ln_q_beta"), &mut b.ln_q_beta));
            out.push((format!("lim_block{i}.ln_kv_gamma"), &mut b.ln_kv_gamma));
            out.push((format!("lim_block{i}.ln_kv_beta"), &mut b.ln_kv_beta));
            out.push((format!("lim_block{i}.ln_ffn_gamma"), &mut b.ln_ffn_gamma));
            out.push((format!("lim_block{i}.ln_ffn_beta"), &mut b.ln_ffn_beta));
        }
        out
    }

    /// SHA-256 over the canonical tensor listing.
    pub fn content_digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, tensor) in self.named_tensors() {
            hasher.update(name.as_bytes());
            let mut bytes = Vec::new();
            tensor.append_digest_bytes(&mut bytes);
            hasher.update(&bytes);
        }
        hasher.finalize().into()
    }

    /// Frobenius norm over every learned tensor, for decay comparisons.
    pub fn param_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                let x = v.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Register every learned tensor on a tape.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> TapedLim {
        let reg = |tape: &mut Tape<S>, m: &Matrix<S>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let latent_queries = reg(tape, &self.latent_queries);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(TapedLimBlock {
                proj: b.proj.as_ref().map(|p| TapedAttnProjections {
                    wq: reg(tape, &p.wq),
                    wk: reg(tape, &p.wk),
                    wv: reg(tape, &p.wv),
                    wo: reg(tape, &p.wo),
                }),
                ffn_w1: reg(tape, &b.ffn_w1),
                ffn_w2: reg(tape, &b.ffn_w2),
                ln_q_gamma: reg(tape, &b.ln_q_gamma),
                ln_q_beta: reg(tape, &b.ln_q_beta),
                ln_kv_gamma: reg(tape, &b.ln_kv_gamma),
                ln_kv_beta: reg(tape, &b.ln_kv_beta),
                ln_ffn_gamma: reg(tape, &b.ln_ffn_gamma),
                ln_ffn_beta: reg(tape, &b.ln_ffn_beta),
            });
        }
        TapedLim { latent_queries, blocks }
    }

    /// Imagined visual slots on an existing tape. `text_embed` must be the
    /// frozen text-embedding rows (one per token, before any positions); the
    /// module adds its own sinusoidal text positions.
    pub fn imagine_on_tape(
        &self,
        tape: &mut Tape<S>,
        tl: &TapedLim,
        text_embed: BufId,
    ) -> Result<BufId> {
        let (text_len, d) = tape.shape(text_embed);
        if d != self.dim {
            return Err(Error::Shape(format!(
                "text embedding width {d} does not match lim dim {}",
                self.dim
            )));
        }
        if text_len == 0 || text_len > self.max_text_len {
            return Err(Error::Input(format!(
                "text length {text_len} outside 1..={}",
                self.max_text_len
            )));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let slot_pos = tape.constant(self.sinusoid.slice(self.slots)?);
        let mut q = tape.add(tl.latent_queries, slot_pos)?;
        let text_pos = tape.constant(self.sinusoid.slice(text_len)?);
        let ht = tape.add(text_embed, text_pos)?;
        for b in &tl.blocks {
            let qn = tape.layer_norm(q, b.ln_q_gamma, b.ln_q_beta, eps)?;
            let kn = tape.layer_norm(ht, b.ln_kv_gamma, b.ln_kv_beta, eps)?;
            let attn = match &b.proj {
                Some(p) => taped_attention(
                    tape,
                    self.config.heads,
                    qn,
                    kn,
                    kn,
                    p.wq,
                    p.wk,
                    p.wv,
                    p.wo,
                )?,
                None => taped_split_head_attention(tape, self.config.heads, qn, kn, kn)?,
            };
            let q_hat = tape.add(q, attn)?;
            let fx = tape.layer_norm(q_hat, b.ln_ffn_gamma, b.ln_ffn_beta, eps)?;
            let ffn = taped_ffn(tape, fx, b.ffn_w1, b.ffn_w2)?;
            q = tape.add(q_hat, ffn)?;
        }
        Ok(q)
    }

    /// Imagined visual slots for a text sequence against a frozen backbone's
    /// text embeddings. One fresh tape; forward value only.
    pub fn imagine(
        &self,
        backbone: &BackboneParams<S>,
        text_tokens: &[Token],
    ) -> Result<VisualEmbeddings<S>> {
        self.check_compatible(backbone)?;
        let mut tape = Tape::new();
        let tb = backbone.bind(&mut tape, false);
        let tl = self.bind(&mut tape, false);
        let text = backbone.embed_text_on_tape(&mut tape, &tb, text_tokens)?;
        let out = self.imagine_on_tape(&mut tape, &tl, text)?;
        Ok(tape.value(out).clone())
    }

    /// Position encodings for the first `len` positions of the shared
    /// fixed sinusoidal table.
    pub fn positions(&self, len: usize) -> Result<Matrix<S>> {
        self.sinusoid.slice(len)
    }

    /// The anchor the residual stack refines: latent queries plus slot
    /// positions. Equal to the module output when every layer's attention
    /// output map and feed-forward output map are zero, or when there are no
    /// layers at all.
    pub fn anchor(&self) -> Result<VisualEmbeddings<S>> {
        let pos = self.sinusoid.slice(self.slots)?;
        self.latent_queries.add(&pos)
    }

    pub fn check_compatible(&self, backbone: &BackboneParams<S>) -> Result<()> {
        let bc = backbone.config();
        if bc.dim != self.dim || bc.visual_slots != self.slots {
            return Err(Error::Config(format!(
                "lim shaped for {} slots x {} dims but backbone has {} x {}",
                self.slots, self.dim, bc.visual_slots, bc.dim
            )));
        }
        if bc.max_text_len > self.max_text_len {
            return Err(Error::Config(format!(
                "backbone allows text length {} but lim tables stop at {}",
                bc.max_text_len, self.max_text_len
            )));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> LimParams<T> {
        LimParams {
            config: self.config.clone(),
            dim: self.dim,
            slots: self.slots,
            max_text_len: self.max_text_len,
            latent_queries: self.latent_queries.cast(),
            sinusoid: SinusoidalTable::new(self.slots.max(self.max_text_len), self.dim)
                .expect("table dims already validated"),
            blocks: self
                .blocks
                .iter()
                .map(|b| LimBlock {
                    proj: b.proj.as_ref().map(|p| AttnProjections {
                        wq: p.wq.cast(),
                        wk: p.wk.cast(),
                        wv: p.wv.cast(),
                        wo: p.wo.cast(),
                    }),
                    ffn_w1: b.ffn_w1.cast(),
                    ffn_w2: b.ffn_w2.cast(),
                    ln_q_gamma: b.ln_q_gamma.cast(),
                    ln_q_beta: b.ln_q_beta.cast(),
                    ln_kv_gamma: b.ln_kv_gamma.cast(),
                    ln_kv_beta: b.ln_kv_beta.cast(),
                    ln_ffn_gamma: b.ln_ffn_gamma.cast(),
                    ln_ffn_beta: b.ln_ffn_beta.cast(),
                })
                .collect(),
        }
    }

    /// Zeroed parameter set for checkpoint loading.
    pub(crate) fn zeroed(
        dim: usize,
        slots: usize,
        max_text_len: usize,
        config: LimConfig,
    ) -> Result<Self> {
        let mut p = LimParams::init_raw(dim, slots, max_text_len, config, 0)?;
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v = S::zero();
            }
        }
        Ok(p)
    }
}

pub struct TapedAttnProjections {
    pub wq: BufId,
    pub wk: BufId,
    pub wv: BufId,
    pub wo: BufId,
}

pub struct TapedLimBlock {
    pub proj: Option<TapedAttnProjections>,
    pub ffn_w1: BufId,
    pub ffn_w2: BufId,
    pub ln_q_gamma: BufId,
    pub ln_q_beta: BufId,
    pub ln_kv_gamma: BufId,
    pub ln_kv_beta: BufId,
    pub ln_ffn_gamma: BufId,
    pub ln_ffn_beta: BufId,
}

/// Tape buffer ids for a bound imagination module.
pub struct TapedLim {
    pub latent_queries: BufId,
    pub blocks: Vec<TapedLimBlock>,
}

impl TapedLim {
    /// Buffer ids in canonical named-tensor order.
    pub fn ids_in_order(&self) -> Vec<BufId> {
        let mut out = vec![self.latent_queries];
        for b in &self.blocks {
            if let Some(p) = &b.proj {
                out.extend([p.wq, p.wk, p.wv, p.wo]);
            }
            out.extend([
                b.ffn_w1, b.ffn_w2, b.ln_q_gamma, b.ln_q_beta, b.ln_kv_gamma, b.ln_kv_beta,
                b.ln_ffn_gamma, b.ln_ffn_beta,
            ]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModalityInput;

    fn small_backbone_config() -> BackboneConfig {
        BackboneConfig {
            vocab_text: 16,
            vocab_image: 12,
            dim: 8,
            visual_slots: 3,
            max_text_len: 6,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            choices: 4,
        }
    }

    fn small_lim_config() -> LimConfig {
        LimConfig { layers: 2, heads: 2, ffn_mult: 2, projected: true }
    }

    #[test]
    fn zero_layer_module_returns_anchor_exactly() {
        let bc = small_backbone_config();
        let backbone = BackboneParams::<f64>::init(bc.clone(), 1).unwrap();
        let lim = LimParams::<f64>::init(
            &bc,
            LimConfig { layers: 0, ..small_lim_config() },
            2,
        )
        .unwrap();
        let out = lim.imagine(&backbone, &[1, 2, 3]).unwrap();
        assert_eq!(out.data(), lim.anchor().unwrap().data());
    }

    #[test]
    fn zeroed_output_maps_reduce_to_anchor() {
        let bc = small_backbone_config();
        let backbone = BackboneParams::<f64>::init(bc.clone(), 1).unwrap();
        let mut lim = LimParams::<f64>::init(&bc, small_lim_config(), 2).unwrap();
        for b in &mut lim.blocks {
            let p = b.proj.as_mut().unwrap();
            for v in p.wo.data_mut() {
                *v = 0.0;
            }
            for v in b.ffn_w2.data_mut() {
                *v = 0.0;
            }
        }
        let out = lim.imagine(&backbone, &[4, 5]).unwrap();
        assert_eq!(out.data(), lim.anchor().unwrap().data());
    }

    #[test]
    fn output_shape_and_determinism() {
        let bc = small_backbone_config();
        let backbone = BackboneParams::<f32>::init(bc.clone(), 3).unwrap();
        let lim = LimParams::<f32>::init(&bc, small_lim_config(), 4).unwrap();
        let a = lim.imagine(&backbone, &[1, 2, 3, 4]).unwrap();
        let b = lim.imagine(&backbone, &[1, 2, 3, 4]).unwrap();
        assert_eq!(a.shape(), (3, 8));
        assert_eq!(a.data(), b.data());
        let c = lim.imagine(&backbone, &[1, 2, 4, 3]).unwrap();
        assert_ne!(a.data(), c.data(), "token order must matter");
    }

    #[test]
    fn projection_free_form_runs_and_differs() {
        let bc = small_backbone_config();
        let backbone = BackboneParams::<f64>::init(bc.clone(), 5).unwrap();
        let with = LimParams::<f64>::init(&bc, small_lim_config(), 6).unwrap();
        let without = LimParams::<f64>::init(
            &bc,
            LimConfig { projected: false, ..small_lim_config() },
            6,
        )
        .unwrap();
        assert!(without.blocks[0].proj.is_none());
        let a = with.imagine(&backbone, &[1, 2]).unwrap();
        let b = without.imagine(&backbone, &[1, 2]).unwrap();
        assert_eq!(b.shape(), (3, 8));
        assert_ne!(a.data(), b.data());
        // Projection-free listing has 8 tensors per block instead of 12.
        assert_eq!(without.named_tensors().len(), 1 + 8 * 2);
        assert_eq!(with.named_tensors().len(), 1 + 12 * 2);
    }

    #[test]
    fn single_tape_composition_matches_two_phase() {
        let bc = small_backbone_config();
        let backbone = {
            let mut p = BackboneParams::<f64>::init(bc.clone(), 7).unwrap();
            p.freeze();
            p
        };
        let lim = LimParams::<f64>::init(&bc, small_lim_config(), 8).unwrap();
        let text: Vec<Token> = vec![2, 3, 4];

        // Two-phase: imagine to a matrix, then run the answerer on it.
        let imagined = lim.imagine(&backbone, &text).unwrap();
        let two_phase = backbone
            .forward(
                &ModalityInput::Injected(imagined, crate::backbone::InjectionTag::Lim),
                &text,
            )
            .unwrap();

        // Single tape: both modules composed end to end.
        let mut tape = Tape::new();
        let tb = backbone.bind(&mut tape, false);
        let tl = lim.bind(&mut tape, false);
        let te = backbone.embed_text_on_tape(&mut tape, &tb, &text).unwrap();
        let z = lim.imagine_on_tape(&mut tape, &tl, te).unwrap();
        let logits = backbone.forward_on_tape(&mut tape, &tb, Some(z), &text).unwrap();
        let one_tape = tape.value(logits).row(0).to_vec();

        assert_eq!(two_phase.logits, one_tape);
    }

    #[test]
    fn gradients_through_frozen_backbone_match_finite_differences() {
        // The training path: answer NLL differentiated through the frozen
        // answerer into the imagination module's parameters.
        let bc = small_backbone_config();
        let backbone = {
            let mut p = BackboneParams::<f64>::init(bc.clone(), 9).unwrap();
            p.freeze();
            p
        };
        let lim = LimParams::<f64>::init(
            &bc,
            LimConfig { layers: 1, ..small_lim_config() },
            10,
        )
        .unwrap();
        let text: Vec<Token> = vec![1, 2, 3];
        let target = 1usize;

        let mut tape = Tape::new();
        let tb = backbone.bind(&mut tape, false);
        let tl = lim.bind(&mut tape, true);
        let te = backbone.embed_text_on_tape(&mut tape, &tb, &text).unwrap();
        let z = lim.imagine_on_tape(&mut tape, &tl, te).unwrap();
        let logits = backbone.forward_on_tape(&mut tape, &tb, Some(z), &text).unwrap();
        let loss = tape.nll_loss(logits, target).unwrap();
        tape.backward(&[(loss, 1.0)]).unwrap();

        let p0 = lim.blocks[0].proj.as_ref().unwrap();
        let picked = [
            ("latent_queries", tl.latent_queries),
            ("wq", tl.blocks[0].proj.as_ref().unwrap().wq),
            ("wo", tl.blocks[0].proj.as_ref().unwrap().wo),
            ("ffn_w2", tl.blocks[0].ffn_w2),
            ("ln_kv_gamma", tl.blocks[0].ln_kv_gamma),
        ];
        let analytic: Vec<Matrix<f64>> =
            picked.iter().map(|&(_, id)| tape.grad(id).clone()).collect();
        let inits = vec![
            lim.latent_queries.clone(),
            p0.wq.clone(),
            p0.wo.clone(),
            lim.blocks[0].ffn_w2.clone(),
            lim.blocks[0].ln_kv_gamma.clone(),
        ];

        let loss_fn = |vars: &[Matrix<f64>]| -> crate::error::Result<f64> {
            let mut l = lim.clone();
            l.latent_queries = vars[0].clone();
            {
                let p = l.blocks[0].proj.as_mut().unwrap();
                p.wq = vars[1].clone();
                p.wo = vars[2].clone();
            }
            l.blocks[0].ffn_w2 = vars[3].clone();
            l.blocks[0].ln_kv_gamma = vars[4].clone();
            let z = l.imagine(&backbone, &text)?;
            let out = backbone.forward(
                &ModalityInput::Injected(z, crate::backbone::InjectionTag::Lim),
                &text,
            )?;
            Ok(-out.probs[target].ln())
        };
        let report = crate::numerics::grad_check(loss_fn, &inits, &analytic, 1e-4).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {} entry {}",
            report.max_rel_err,
            picked[report.worst_param].0,
            report.worst_entry
        );
    }

    #[test]
    fn incompatible_backbone_is_rejected() {
        let bc = small_backbone_config();
        let lim = LimParams::<f32>::init(&bc, small_lim_config(), 11).unwrap();
        let mut other = bc.clone();
        other.dim = 16;
        other.heads = 2;
        let backbone = BackboneParams::<f32>::init(other, 12).unwrap();
        assert!(matches!(
            lim.imagine(&backbone, &[1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn text_length_limits_enforced() {
        let bc = small_backbone_config();
        let backbone = BackboneParams::<f32>::init(bc.clone(), 13).unwrap();
        let lim = LimParams::<f32>::init(&bc, small_lim_config(), 14).unwrap();
        assert!(lim.imagine(&backbone, &[]).is_err());
        let long: Vec<Token> = vec![0; bc.max_text_len + 1];
        assert!(lim.imagine(&backbone, &long).is_err());
    }
}
