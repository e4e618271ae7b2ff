//! The MGML detection head.
//!
//! Dataflow for one episode, with `R` query regions and `N` sampled classes:
//!
//! ```text
//! support patches ──encode──► per-example features ──mean/class──► bank [N×d]
//!                                       │                              │
//!                                       └──► orthogonality loss        ├─► split & excite (novel rows × λ)
//! query regions ──encode──► F_qry [R×d] ───────────────────────────────┴─► meta-combine [R·N × 3d]
//!       │                                                                       │
//!       ├──► background scorer ─────────────────────────────┐                   ▼
//!       ├──► metric head (τ·cos to class directions)        └──► logits [R×(N+1)] ◄── shared scorer
//!       └──► box regressor (dx, dy, dw, dh)
//! ```

mod episode;
mod heads;
pub mod params;

pub use heads::{
    classify, encode, meta_combine, meta_combine_one, meta_loss, metric_logits, metric_loss,
    orthogonality_loss, regress_box, split_and_excite, support_bank, AggregatedFeature,
    ClassAttentiveBank,
};
pub use episode::{
    episode_losses, metric_rows, score_regions, EpisodeBatch, EpisodeLosses, HeadSwitches, LossValues,
    RegionScores,
};
pub use params::{Bound, ModelConfig, ModelParams, Trainable};
