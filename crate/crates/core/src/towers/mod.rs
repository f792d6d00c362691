//! The two-tower model.
//!
//! The item tower maps an item id through an embedding table and an MLP. The
//! user tower embeds a context window, runs a causal self-attention encoder
//! and pools the hidden states with `M` learned query vectors into `M`
//! interest representations. A candidate's score is the softmax-weighted
//! mixture of its dot products with the interests.

mod model;
mod params;

pub use model::{
    all_item_representations, batch_softmax_loss, extract_interests, in_batch_mask, item_forward,
    logq_correct, score, user_encode, user_interests, Graph, LossOptions, ScoredBatch,
};
pub use params::{write_item_csv, EncoderLayerIds, Layout, TowerConfig, TowerParams};
