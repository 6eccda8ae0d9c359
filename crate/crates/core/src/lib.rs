//! Joint CTC/attention sequence transduction with a hierarchical encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`adcore`]: reverse-mode autodiff over 2-D tensors.
//! - [`ctc`]: exact CTC likelihood, gradient and greedy decoding.
//! - [`prefix`]: incremental CTC prefix scoring for beam search.
//! - [`model`]: sign-embedding stand-in, gloss/text encoders, attentional decoder, multi-task loss.
//! - [`beam`]: joint CTC/attention beam search and the attention-only baseline.
//! - [`synth`]: seeded generator of a miniature non-monotonic transduction task.
//! - [`metrics`]: BLEU, ROUGE-L and WER.
//! - [`train`]: Adam, the training loop, two-stage transfer, checkpoints.
//! - [`experiment`]: experiment configuration files and the ablation runner.

pub mod adcore;
pub mod beam;
pub mod ctc;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod prefix;
pub mod synth;
pub mod train;
