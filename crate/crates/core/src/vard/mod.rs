//! Value-guided fine-tuning: each transition in the window is pushed toward
//! higher value of the state it produces, while a paired-sample squared
//! distance to the frozen reference policy stands in for the KL penalty.
//!
//! Steps are diffusion indices. The transition out of step `s` maps `x_s` to
//! `x_{s-1}`, and the value is read at index `s - 1`.

mod finetune;
mod lemma;
mod objective;

pub use finetune::{
    baseline_final_step, baseline_random_last_k, finetune, last_steps, paper_preset,
    FinetuneConfig, FinetuneReport, FinetuneRow, PaperPreset, VardConfig, PAPER_PRESETS,
};
pub use lemma::{check_lemma1, LemmaReport, MeanFamily};
pub use objective::{
    kl_surrogate, surrogate_on_tape, vard_loss, vard_terms, PairNoise, PolicyPair, VardLoss,
    VardTerms,
};
