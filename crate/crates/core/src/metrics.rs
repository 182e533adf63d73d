//! Recall@K, median rank and mean rank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::SimilarityMatrix;

/// 1-based rank of `scores[truth]`. Ties with an earlier index count against it.
pub fn rank_of_truth(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < truth))
        .count()
}

/// Percentage of ranks `<= k`.
pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn median(ranks: &[usize]) -> f64 {
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Contract("retrieval report over zero queries".into()));
        }
        Ok(Self {
            r1: recall_at(&ranks, 1),
            r5: recall_at(&ranks, 5),
            r10: recall_at(&ranks, 10),
            mdr: median(&ranks),
            mnr: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
            ranks,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Rank every row's ground truth and aggregate.
pub fn report(sim: &SimilarityMatrix) -> Result<RetrievalReport> {
    let v = sim.values();
    let ranks = (0..sim.videos()).map(|i| rank_of_truth(v.row(i), sim.truth()[i])).collect();
    RetrievalReport::from_ranks(ranks)
}
