//! Step annotations: videos made of ordered step clips.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::EmbeddingStore;
use crate::error::{CvrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub clip_id: String,
    pub step_index: u32,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_step_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub task_id: String,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub videos: Vec<VideoRecord>,
}

impl AnnotationSet {
    /// Checks the structural invariants: unique video ids, globally unique
    /// clip ids, strictly increasing step indices.
    pub fn check_structure(&self) -> Result<()> {
        let mut videos = HashSet::new();
        let mut clips = HashSet::new();
        for v in &self.videos {
            if !videos.insert(v.video_id.as_str()) {
                return Err(CvrError::DuplicateId(v.video_id.clone()));
            }
            for w in v.steps.windows(2) {
                if w[1].step_index <= w[0].step_index {
                    return Err(CvrError::NonMonotoneSteps {
                        video_id: v.video_id.clone(),
                    });
                }
            }
            for s in &v.steps {
                if !clips.insert(s.clip_id.as_str()) {
                    return Err(CvrError::DuplicateId(s.clip_id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ann: AnnotationSet =
            serde_json::from_str(text).map_err(|e| CvrError::Schema(e.to_string()))?;
        ann.check_structure()?;
        Ok(ann)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.videos.iter().map(|v| v.steps.len()).sum()
    }

    /// Keeps only the listed videos, preserving the original order.
    pub fn subset(&self, video_ids: &HashSet<String>) -> AnnotationSet {
        AnnotationSet {
            videos: self
                .videos
                .iter()
                .filter(|v| video_ids.contains(&v.video_id))
                .cloned()
                .collect(),
        }
    }
}

/// Result of [`validate`]: ids referenced by the annotations but absent from
/// the stores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub missing_clip_embeddings: Vec<String>,
    pub missing_text_embeddings: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.missing_clip_embeddings.is_empty() && self.missing_text_embeddings.is_empty()
    }

    /// Fails with `MissingEmbedding` naming the first missing id.
    pub fn ensure_complete(&self) -> Result<()> {
        if let Some(id) = self.missing_clip_embeddings.first() {
            return Err(CvrError::MissingEmbedding {
                id: id.clone(),
                store: "clip",
            });
        }
        if let Some(id) = self.missing_text_embeddings.first() {
            return Err(CvrError::MissingEmbedding {
                id: id.clone(),
                store: "text",
            });
        }
        Ok(())
    }
}

/// Validates annotations against the clip store and, when given, the query
/// text store (keyed by clip id of the step the text describes).
pub fn validate(
    ann: &AnnotationSet,
    clips: &EmbeddingStore,
    texts: Option<&EmbeddingStore>,
) -> Result<ValidationReport> {
    ann.check_structure()?;
    let mut report = ValidationReport::default();
    for v in &ann.videos {
        for (pos, s) in v.steps.iter().enumerate() {
            if !clips.contains(&s.clip_id) {
                report.missing_clip_embeddings.push(s.clip_id.clone());
            }
            // Only steps with a predecessor become queries.
            if let Some(t) = texts {
                if pos > 0 && !t.contains(&s.clip_id) {
                    report.missing_text_embeddings.push(s.clip_id.clone());
                }
            }
        }
    }
    Ok(report)
}
