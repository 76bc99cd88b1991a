use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BINS: usize = 100;

/// Fixed 100-bin histogram of similarities over [-1, 1].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl Histogram {
    pub fn bin_of(similarity: f32) -> usize {
        let pos = (f64::from(similarity) + 1.0) / 2.0 * HISTOGRAM_BINS as f64;
        (pos.floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    /// Lower and upper edge of a bin.
    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        (-1.0 + bin as f64 * width, -1.0 + (bin + 1) as f64 * width)
    }

    pub fn add(&mut self, similarity: f32) {
        self.counts[Self::bin_of(similarity)] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; HISTOGRAM_BINS];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    /// Shared probability mass of two histograms, in [0, 1].
    pub fn overlap(&self, other: &Histogram) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| a.min(b))
            .sum()
    }
}

/// Before/after accounting for one cleaning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage_name: String,
    pub identities_before: usize,
    pub identities_after: usize,
    pub faces_before: usize,
    pub faces_after: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_similarity_histogram: Option<Histogram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_similarity_histogram: Option<Histogram>,
}

impl StageStats {
    pub fn new(
        stage_name: impl Into<String>,
        before: (usize, usize),
        after: (usize, usize),
    ) -> Self {
        StageStats {
            stage_name: stage_name.into(),
            identities_before: before.0,
            identities_after: after.0,
            faces_before: before.1,
            faces_after: after.1,
            intra_similarity_histogram: None,
            inter_similarity_histogram: None,
        }
    }

    pub fn is_shrinking(&self) -> bool {
        self.identities_after <= self.identities_before && self.faces_after <= self.faces_before
    }

    /// Intra/inter overlap when both histograms are present.
    pub fn overlap(&self) -> Option<f64> {
        match (
            &self.intra_similarity_histogram,
            &self.inter_similarity_histogram,
        ) {
            (Some(a), Some(b)) => Some(a.overlap(b)),
            _ => None,
        }
    }
}
