use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ClassLabel, SliceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Detection,
    Recommendation,
}

/// Identity of one candidate slice as the samplers see it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMeta {
    pub patient_id: String,
    /// The slice an augmented copy was derived from, or the slice itself.
    pub base_slice: String,
    pub label: ClassLabel,
}

impl SliceMeta {
    pub fn of(record: &SliceRecord) -> Self {
        Self {
            patient_id: record.patient_id.clone(),
            base_slice: format!(
                "{}/{}",
                record.scan_id,
                record.augmented_from.as_deref().unwrap_or(&record.slice_id)
            ),
            label: record.label,
        }
    }
}

/// Indices into the sampler's slice list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub regime: Regime,
}

/// Draws detection and recommendation triplets from a fixed slice list.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    slices: Vec<SliceMeta>,
    ncp: Vec<usize>,
    non_ncp: Vec<usize>,
    ncp_by_patient: BTreeMap<String, Vec<usize>>,
    /// NCP slices whose patient has another distinct (non-derived) slice.
    recommendation_anchors: Vec<usize>,
}

impl TripletSampler {
    pub fn new(slices: Vec<SliceMeta>) -> Self {
        let mut ncp = Vec::new();
        let mut non_ncp = Vec::new();
        let mut ncp_by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in slices.iter().enumerate() {
            if s.label == ClassLabel::NCP {
                ncp.push(i);
                ncp_by_patient.entry(s.patient_id.clone()).or_default().push(i);
            } else {
                non_ncp.push(i);
            }
        }
        let recommendation_anchors = ncp
            .iter()
            .copied()
            .filter(|&i| {
                ncp_by_patient[&slices[i].patient_id]
                    .iter()
                    .any(|&j| slices[j].base_slice != slices[i].base_slice)
            })
            .collect();
        Self {
            slices,
            ncp,
            non_ncp,
            ncp_by_patient,
            recommendation_anchors,
        }
    }

    pub fn slices(&self) -> &[SliceMeta] {
        &self.slices
    }

    fn pick<R: Rng>(rng: &mut R, from: &[usize]) -> usize {
        from[rng.random_range(0..from.len())]
    }

    /// Uniform draw from `from` restricted to `accept`; callers guarantee at
    /// least one accepted element, and rejection keeps the draw uniform.
    fn pick_where<R: Rng>(rng: &mut R, from: &[usize], accept: impl Fn(usize) -> bool) -> usize {
        loop {
            let i = Self::pick(rng, from);
            if accept(i) {
                return i;
            }
        }
    }

    /// Anchor: any NCP slice. Positive: an NCP slice of another patient.
    /// Negative: any CP or Normal slice.
    pub fn sample_detection<R: Rng>(&self, rng: &mut R) -> Result<TripletSample> {
        if self.ncp_by_patient.len() < 2 || self.non_ncp.is_empty() {
            return Err(Error::Sampling(format!(
                "detection triplets need NCP slices from at least 2 patients and a non-NCP slice \
                 (have {} NCP patients, {} non-NCP slices)",
                self.ncp_by_patient.len(),
                self.non_ncp.len()
            )));
        }
        let anchor = Self::pick(rng, &self.ncp);
        let patient = &self.slices[anchor].patient_id;
        let positive = Self::pick_where(rng, &self.ncp, |j| &self.slices[j].patient_id != patient);
        let negative = Self::pick(rng, &self.non_ncp);
        Ok(TripletSample {
            anchor,
            positive,
            negative,
            regime: Regime::Detection,
        })
    }

    /// Anchor: an NCP slice. Positive: a different slice of the same patient.
    /// Negative: an NCP slice of another patient.
    ///
    /// Augmented copies of the anchor do not count as different slices.
    pub fn sample_recommendation<R: Rng>(&self, rng: &mut R) -> Result<TripletSample> {
        if self.ncp_by_patient.len() < 2 || self.recommendation_anchors.is_empty() {
            return Err(Error::Sampling(format!(
                "recommendation triplets need at least 2 NCP patients, one of them with 2 distinct slices \
                 (have {} NCP patients)",
                self.ncp_by_patient.len()
            )));
        }
        let anchor = Self::pick(rng, &self.recommendation_anchors);
        let a = &self.slices[anchor];
        let own = &self.ncp_by_patient[&a.patient_id];
        let positive = Self::pick_where(rng, own, |j| self.slices[j].base_slice != a.base_slice);
        let negative = Self::pick_where(rng, &self.ncp, |j| self.slices[j].patient_id != a.patient_id);
        Ok(TripletSample {
            anchor,
            positive,
            negative,
            regime: Regime::Recommendation,
        })
    }

    /// Whether `t` satisfies its regime's constraints.
    pub fn is_valid(&self, t: &TripletSample) -> bool {
        let (a, p, n) = (&self.slices[t.anchor], &self.slices[t.positive], &self.slices[t.negative]);
        match t.regime {
            Regime::Detection => {
                a.label == ClassLabel::NCP
                    && p.label == ClassLabel::NCP
                    && p.patient_id != a.patient_id
                    && n.label != ClassLabel::NCP
            }
            Regime::Recommendation => {
                [a, p, n].iter().all(|s| s.label == ClassLabel::NCP)
                    && p.patient_id == a.patient_id
                    && p.base_slice != a.base_slice
                    && n.patient_id != a.patient_id
            }
        }
    }
}
