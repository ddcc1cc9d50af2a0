//! Knowledge-constrained decoding.
//!
//! Steers a frozen [`LanguageModel`](lm::LanguageModel) towards text that is
//! grounded in a reference knowledge document. The guidance signal is a
//! [`GroundednessScorer`](grounding::GroundednessScorer) in `[0, 1]`, used
//! either by Monte-Carlo tree search over next tokens ([`decoding::kcts_decode`])
//! or by per-step weighted decoding ([`decoding::weighted_decode`]).
//!
//! Numeric kernels (logit transforms, PUCT statistics, logit-bias
//! composition) are generic over [`Scalar`]; the aliases below fix the
//! precision used by the decoders.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoding;
pub mod grounding;
pub mod lm;
pub mod metrics;
pub mod scalar;
pub mod text;
pub mod toy;

pub use scalar::Scalar;

pub type Logits = lm::LogitVector<f64>;
pub type Logits32 = lm::LogitVector<f32>;
pub type Tree = decoding::SearchTree<f64>;
pub type Tree32 = decoding::SearchTree<f32>;

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
