//! Request traces and the attention-score signal that drives sparsity and
//! importance tracking.

pub mod locality;
pub mod numeric;
pub mod trace;

pub use locality::{measure_locality, synth_scores, LocalityCalibration, LocalityModel, LocalityProcess};
pub use numeric::{numeric_scores, RandomWalkEmbeddings};
pub use trace::{
    arxiv_like, load_trace, parse_trace, sharegpt_like, trace_to_string, write_trace, RequestTrace, TraceError, TraceKind,
};
