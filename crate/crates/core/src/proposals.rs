//! Fixed temporal proposals from anchor scales, and temporal overlap.

use serde::{Deserialize, Serialize};

use crate::config::validate_scales;
use crate::error::{Error, Result};

/// Half-open frame interval `[st, ed)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Proposal {
    pub st: usize,
    pub ed: usize,
}

impl Proposal {
    pub fn new(st: usize, ed: usize) -> Self {
        Self { st, ed }
    }

    pub fn len(&self) -> usize {
        self.ed.saturating_sub(self.st)
    }

    pub fn is_empty(&self) -> bool {
        self.ed <= self.st
    }

    pub fn whole(video_len: usize) -> Self {
        Self { st: 0, ed: video_len }
    }

    pub fn is_valid_for(&self, video_len: usize) -> bool {
        self.st < self.ed && self.ed <= video_len
    }

    pub fn validate(&self, video_len: usize) -> Result<()> {
        if self.is_valid_for(video_len) {
            Ok(())
        } else {
            Err(Error::RejectedInput(format!(
                "proposal [{}, {}) is not a non-empty interval inside [0, {video_len})",
                self.st, self.ed
            )))
        }
    }
}

/// Intersection over union of two half-open frame intervals.
pub fn temporal_iou(a: Proposal, b: Proposal) -> f64 {
    let inter = a.ed.min(b.ed).saturating_sub(a.st.max(b.st));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSet {
    proposals: Vec<Proposal>,
    video_len: usize,
    scales: Vec<u32>,
}

impl ProposalSet {
    /// Non-overlapping sliding windows for each scale `1/m`: window `i` covers
    /// `[floor(i·L/m), ceil((i+1)·L/m))`. Ordered by scale as given, then window.
    pub fn generate(video_len: usize, scales: &[u32]) -> Result<Self> {
        if video_len == 0 {
            return Err(Error::RejectedInput("video length must be >= 1".into()));
        }
        validate_scales(scales)?;
        let mut proposals = Vec::with_capacity(scales.iter().map(|&m| m as usize).sum());
        for &m in scales {
            let m = m as usize;
            if m > video_len {
                return Err(Error::RejectedInput(format!(
                    "scale 1/{m} needs more windows than the {video_len} available frames"
                )));
            }
            for i in 0..m {
                let st = i * video_len / m;
                let ed = ((i + 1) * video_len).div_ceil(m);
                proposals.push(Proposal { st, ed });
            }
        }
        Ok(Self {
            proposals,
            video_len,
            scales: scales.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn get(&self, i: usize) -> Proposal {
        self.proposals[i]
    }

    pub fn as_slice(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn video_len(&self) -> usize {
        self.video_len
    }

    pub fn scales(&self) -> &[u32] {
        &self.scales
    }

    /// Index and IoU of the proposal overlapping `target` most (lowest index on ties).
    pub fn best_match(&self, target: Proposal) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &p) in self.proposals.iter().enumerate() {
            let iou = temporal_iou(p, target);
            if iou > best.1 {
                best = (i, iou);
            }
        }
        best
    }
}
