//! Long-range dependence (LRD) measurement for sequences of discrete symbols,
//! synthetic oracles with known memory coefficients, and the EvoRNN family of
//! recurrent layers whose cell size grows toward the end of the sequence.
//!
//! The estimation pipeline is
//! `lookup_sequence → pad_to_length → periodogram → estimate_from_periodogram`,
//! with [`stream_aggregator`] folding per-sequence estimates over a dataset.

pub mod embeddings;
pub mod evo_rnn;
pub mod evo_schedule;
pub mod lrd_estimator;
pub mod spectral;
pub mod stream_aggregator;
pub mod synth_oracle;

pub use embeddings::{EmbeddedSeries, EmbeddingTable, OovPolicy, SymbolSequence};
pub use evo_schedule::{CellSchedule, Preset};
pub use lrd_estimator::{Abscissa, Cutoff, EstimatorConfig, LrdEstimate, OlsFit};
pub use spectral::Periodogram;
