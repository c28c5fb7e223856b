//! The support/query batch that training and evaluation operate on.

use crate::error::{CoreError, Result};
use crate::slots::SlotAggregates;

/// One image reduced to its frozen slot aggregates plus a class label.
#[derive(Debug, Clone)]
pub struct EpisodeImage {
    pub aggregates: SlotAggregates,
    pub class_id: usize,
}

/// An N-way episode: `way * shot` supports and `way * queries_per_class`
/// queries. Every query class must appear in the support set.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub support: Vec<EpisodeImage>,
    pub query: Vec<EpisodeImage>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

impl EpisodeBatch {
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(CoreError::EmptyInput("episode without support images".into()));
        }
        for q in &self.query {
            if !self.support.iter().any(|s| s.class_id == q.class_id) {
                return Err(CoreError::MissingClass(q.class_id));
            }
        }
        Ok(())
    }

    /// Class ids present in the support set, ascending and deduplicated.
    pub fn support_classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.support.iter().map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
