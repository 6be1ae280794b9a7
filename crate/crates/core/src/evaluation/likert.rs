use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sheets::LikertCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    pub mean: f64,
    pub cells: usize,
    pub per_rater: BTreeMap<String, f64>,
    pub per_specialty: BTreeMap<String, f64>,
    /// Count of scores 1 through 5.
    pub distribution: [usize; 5],
}

fn mean(scores: &[u8]) -> f64 {
    scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64
}

/// `None` for an empty sheet.
pub fn summarize_likert(cells: &[LikertCell]) -> Option<LikertSummary> {
    if cells.is_empty() {
        return None;
    }
    let mut by_rater: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut by_specialty: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut distribution = [0usize; 5];
    for c in cells {
        by_rater.entry(c.rater_id.clone()).or_default().push(c.score);
        if let Some(s) = &c.specialty {
            by_specialty.entry(s.clone()).or_default().push(c.score);
        }
        distribution[(c.score - 1) as usize] += 1;
    }
    let all: Vec<u8> = cells.iter().map(|c| c.score).collect();
    Some(LikertSummary {
        mean: mean(&all),
        cells: cells.len(),
        per_rater: by_rater.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        per_specialty: by_specialty.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        distribution,
    })
}
