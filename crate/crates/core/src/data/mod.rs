//! On-disk formats: embedding stores, annotations, benchmark files, configs.

mod annotations;
mod benchmark;
mod config;
mod store;

pub use annotations::{validate, AnnotationSet, StepRecord, ValidationReport, VideoRecord};
pub use benchmark::{Benchmark, Candidate, CandidateKind, QueryInstance, BENCHMARK_VERSION};
pub use config::{tenths, RunConfig};
pub use store::{EmbeddingStore, STORE_MAGIC, STORE_VERSION};
