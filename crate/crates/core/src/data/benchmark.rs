//! Benchmark files: one [`QueryInstance`] per retrieval query.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CvrError, Result};

pub const BENCHMARK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateKind {
    GroundTruth,
    StateNeg,
    IdentityNeg,
    EasyNeg,
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CandidateKind::GroundTruth => "GroundTruth",
            CandidateKind::StateNeg => "StateNeg",
            CandidateKind::IdentityNeg => "IdentityNeg",
            CandidateKind::EasyNeg => "EasyNeg",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub clip_id: String,
    pub kind: CandidateKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub query_id: String,
    /// Key into the query text store.
    pub query_text_id: String,
    pub source_video_id: String,
    pub gt_clip_id: String,
    /// Preceding clips of the source video, most recent last.
    pub context_ids: Vec<String>,
    /// Candidates in evaluation order.
    pub candidates: Vec<Candidate>,
}

impl QueryInstance {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        let bad = |reason: String| CvrError::InvalidQuery {
            query_id: self.query_id.clone(),
            reason,
        };
        if self.candidates.len() != pool_size {
            return Err(bad(format!(
                "{} candidates, pool size is {pool_size}",
                self.candidates.len()
            )));
        }
        let gts: Vec<_> = self
            .candidates
            .iter()
            .filter(|c| c.kind == CandidateKind::GroundTruth)
            .collect();
        if gts.len() != 1 {
            return Err(bad(format!("{} ground-truth candidates", gts.len())));
        }
        if gts[0].clip_id != self.gt_clip_id {
            return Err(bad("ground-truth candidate does not match gt_clip_id".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.clip_id.as_str()) {
                return Err(bad(format!("duplicate candidate {:?}", c.clip_id)));
            }
        }
        if self.context_ids.contains(&self.gt_clip_id) {
            return Err(bad("ground truth appears in its own context".into()));
        }
        Ok(())
    }

    pub fn count(&self, kind: CandidateKind) -> usize {
        self.candidates.iter().filter(|c| c.kind == kind).count()
    }

    /// Copy of this query with the context cut to the `max_len` most recent clips.
    pub fn with_context_limit(&self, max_len: usize) -> QueryInstance {
        let mut q = self.clone();
        let skip = q.context_ids.len().saturating_sub(max_len);
        q.context_ids.drain(..skip);
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub version: u32,
    pub pool_size: usize,
    pub queries: Vec<QueryInstance>,
}

impl Benchmark {
    pub fn new(pool_size: usize, queries: Vec<QueryInstance>) -> Self {
        Benchmark {
            version: BENCHMARK_VERSION,
            pool_size,
            queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != BENCHMARK_VERSION {
            return Err(CvrError::UnsupportedVersion(self.version));
        }
        let mut ids = HashSet::new();
        for q in &self.queries {
            if !ids.insert(q.query_id.as_str()) {
                return Err(CvrError::DuplicateId(q.query_id.clone()));
            }
            q.validate(self.pool_size)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(text).map_err(|e| CvrError::Schema(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Queries whose source video is in `videos`.
    pub fn restrict_to_videos(&self, videos: &HashSet<String>) -> Benchmark {
        Benchmark {
            version: self.version,
            pool_size: self.pool_size,
            queries: self
                .queries
                .iter()
                .filter(|q| videos.contains(&q.source_video_id))
                .cloned()
                .collect(),
        }
    }

    pub fn with_context_limit(&self, max_len: usize) -> Benchmark {
        Benchmark {
            version: self.version,
            pool_size: self.pool_size,
            queries: self.queries.iter().map(|q| q.with_context_limit(max_len)).collect(),
        }
    }
}
