//! Reverse contrast attention (RCA) over multi-head attention tensors, the
//! flooring bound that relates it to subthreshold hidden-state components,
//! and confidence-free detection evaluation (FitAP) for free-form VLM output.

pub mod analysis;
pub mod attn;
pub mod detparse;
pub mod dumpio;
pub mod fitap;
#[cfg(any(test, feature = "oracle"))]
pub mod naive;
pub mod report;
pub mod stats;

pub use attn::{
    aggregate, apply_rca, central_value, floor_states, flooring_lower_bound,
    partition_by_threshold, renormalize_rows, reweight, subthreshold_count, AttentionStack,
    AttnError, CentralValue, HiddenStates, RcaConfig, ReweightedAttention, Scheme, TokenPartition,
    ValueMatrix,
};
pub use detparse::{parse_response, standardize_box, NormalizedBox, RawResponse};
pub use dumpio::{read_dump, write_dump, AttentionDump, DumpError};
pub use fitap::{fitap, Detection, EvalReport, GroundTruthBox, ThresholdLadder};
