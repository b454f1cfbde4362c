//! Closed-form FLOP accounting for the forward passes.
//!
//! Convention: a matrix product of an m×k by a k×n operand costs 2·m·k·n
//! FLOPs (one multiply and one add per inner-product term). Only matrix
//! products are counted; element-wise work (layer norm, softmax, GELU,
//! residual adds) is excluded from every figure, so ratios between modes
//! compare like with like.

use crate::backbone::BackboneConfig;
use crate::lim::LimConfig;

/// FLOPs for a single m×k by k×n matrix product.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * m as u64 * k as u64 * n as u64
}

/// One transformer block over a t-token sequence: four d×d projections,
/// per-head score and mixing products, and the two feed-forward products.
fn block_flops(t: usize, dim: usize, ffn_mult: usize) -> u64 {
    let proj = 4 * matmul_flops(t, dim, dim);
    // Scores (t×dₕ · dₕ×t) and mixing (t×t · t×dₕ) across all heads each
    // total 2·t²·d regardless of the head count.
    let attn = 2 * matmul_flops(t, dim, t);
    let ffn = matmul_flops(t, dim, dim * ffn_mult) + matmul_flops(t, dim * ffn_mult, dim);
    proj + attn + ffn
}

fn trunk_flops(config: &BackboneConfig, t: usize) -> u64 {
    config.layers as u64 * block_flops(t, config.dim, config.ffn_mult)
        + matmul_flops(1, config.dim, config.choices)
}

/// Full paired forward for a text length of `text_len`: the vision encoder's
/// projection plus the trunk over visual slots and text.
pub fn paired_forward_flops(config: &BackboneConfig, text_len: usize) -> u64 {
    let encode = matmul_flops(config.visual_slots, config.dim, config.dim);
    encode + trunk_flops(config, config.visual_slots + text_len)
}

/// Text-only forward: the trunk over the text alone.
pub fn text_only_forward_flops(config: &BackboneConfig, text_len: usize) -> u64 {
    trunk_flops(config, text_len)
}

/// One imagination forward producing the visual-slot substitutes: per layer,
/// the query/output projections over the slots, key/value projections over
/// the text, cross-attention score and mixing products, and the slot-side
/// feed-forward. The projection-free variant skips the four projections.
pub fn lim_forward_flops(
    backbone: &BackboneConfig,
    lim: &LimConfig,
    text_len: usize,
) -> u64 {
    let d = backbone.dim;
    let n = backbone.visual_slots;
    let proj = if lim.projected {
        2 * matmul_flops(n, d, d) + 2 * matmul_flops(text_len, d, d)
    } else {
        0
    };
    let attn = matmul_flops(n, d, text_len) + matmul_flops(n, text_len, d);
    let ffn = matmul_flops(n, d, d * lim.ffn_mult) + matmul_flops(n, d * lim.ffn_mult, d);
    lim.layers as u64 * (proj + attn + ffn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_product_costs_two_d_cubed() {
        for d in [1usize, 4, 32, 100] {
            assert_eq!(matmul_flops(d, d, d), 2 * (d as u64).pow(3));
        }
    }

    #[test]
    fn hand_counted_tiny_block() {
        // t = 2, d = 4, ffn_mult = 2:
        //   projections 4 · 2·2·4·4 = 256
        //   attention   2 · 2·2·4·2 = 64
        //   ffn         2·2·4·8 + 2·2·8·4 = 256
        assert_eq!(block_flops(2, 4, 2), 256 + 64 + 256);
    }

    #[test]
    fn imagination_is_under_half_a_paired_forward_at_defaults() {
        let bc = BackboneConfig::default();
        let lc = LimConfig::default();
        // Default synthetic captions: 2 tokens per object pair, 4 objects,
        // plus the 2-token question.
        let text_len = 10;
        let lim = lim_forward_flops(&bc, &lc, text_len);
        let paired = paired_forward_flops(&bc, text_len);
        assert!(
            (lim as f64) < 0.5 * paired as f64,
            "imagination {lim} vs paired {paired}"
        );
    }

    #[test]
    fn projection_free_variant_is_cheaper() {
        let bc = BackboneConfig::default();
        let with = lim_forward_flops(&bc, &LimConfig { projected: true, ..LimConfig::default() }, 10);
        let without =
            lim_forward_flops(&bc, &LimConfig { projected: false, ..LimConfig::default() }, 10);
        assert!(without < with);
    }

    #[test]
    fn text_only_is_cheaper_than_paired() {
        let bc = BackboneConfig::default();
        assert!(text_only_forward_flops(&bc, 10) < paired_forward_flops(&bc, 10));
    }
}
