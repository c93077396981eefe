//! Counterfactual risk object identification: remove one tracklet at a time
//! and see how far the predicted Go confidence rises.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Checkpoint, Intervention, ResponseDist};
use crate::scene::{BinaryMask, BoundingBox, Clip, ThingCategory};

/// One tracklet removal with its per-frame masks.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSpec {
    pub target: u32,
    pub intervention: Intervention,
}

impl InterventionSpec {
    pub fn new(clip: &Clip, target: u32) -> Result<Self> {
        Ok(Self { target, intervention: Intervention::remove(clip, target)? })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.intervention.masks
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOrder {
    #[default]
    Forward,
    Reverse,
    Parallel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalConfig {
    pub order: EvalOrder,
    /// Only vehicles and pedestrians are candidates.
    pub vehicles_and_pedestrians_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRisk {
    pub id: u32,
    pub category: ThingCategory,
    /// Box in the last frame where the tracklet is seen.
    pub box_last_frame: BoundingBox,
    /// Predicted Go confidence with this object removed.
    pub go_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub baseline: ResponseDist,
    /// Set when the unmodified clip is already predicted Go.
    pub baseline_predicted_go: bool,
    /// Candidates in id order.
    pub objects: Vec<ObjectRisk>,
    pub risk_object_id: u32,
    /// Candidate ids by descending score, ties by id.
    pub ranking: Vec<u32>,
}

impl RiskReport {
    pub fn risk_object(&self) -> &ObjectRisk {
        self.objects.iter().find(|o| o.id == self.risk_object_id).expect("risk object is a candidate")
    }
}

fn candidates(clip: &Clip, config: &CausalConfig) -> Vec<(u32, ThingCategory, BoundingBox)> {
    let mut out: Vec<_> = clip
        .tracklets
        .iter()
        .filter(|t| !config.vehicles_and_pedestrians_only || t.category.is_vehicle_or_pedestrian())
        .filter_map(|t| t.last_seen().map(|(_, b)| (t.id, t.category, *b)))
        .collect();
    out.sort_by_key(|c| c.0);
    out
}

/// Baseline plus one counterfactual prediction per candidate tracklet.
pub fn assess_risk(clip: &Clip, ckpt: &Checkpoint, config: &CausalConfig) -> Result<RiskReport> {
    let cands = candidates(clip, config);
    if cands.is_empty() {
        return Err(Error::NoCandidates);
    }
    let baseline = predict(ckpt, clip, None)?.response;
    let score = |id: u32| -> Result<f64> {
        let spec = InterventionSpec::new(clip, id)?;
        Ok(predict(ckpt, clip, Some(&spec.intervention))?.response.p_go)
    };
    let scores: Vec<f64> = match config.order {
        EvalOrder::Forward => cands.iter().map(|c| score(c.0)).collect::<Result<_>>()?,
        EvalOrder::Reverse => {
            let mut s = cands.iter().rev().map(|c| score(c.0)).collect::<Result<Vec<_>>>()?;
            s.reverse();
            s
        }
        EvalOrder::Parallel => cands.par_iter().map(|c| score(c.0)).collect::<Result<_>>()?,
    };
    let objects: Vec<ObjectRisk> = cands
        .iter()
        .zip(&scores)
        .map(|(c, s)| ObjectRisk { id: c.0, category: c.1, box_last_frame: c.2, go_score: *s })
        .collect();
    let ranking = rank(&objects);
    Ok(RiskReport {
        baseline,
        baseline_predicted_go: baseline.p_go >= 0.5,
        risk_object_id: ranking[0],
        ranking,
        objects,
    })
}

/// Ids by descending Go score; equal scores keep the lower id first.
pub fn rank(objects: &[ObjectRisk]) -> Vec<u32> {
    let mut order: Vec<&ObjectRisk> = objects.iter().collect();
    order.sort_by(|a, b| b.go_score.total_cmp(&a.go_score).then(a.id.cmp(&b.id)));
    order.iter().map(|o| o.id).collect()
}

/// The candidate whose removal gives the highest Go confidence.
pub fn identify_risk_object(clip: &Clip, ckpt: &Checkpoint, config: &CausalConfig) -> Result<(u32, RiskReport)> {
    let report = assess_risk(clip, ckpt, config)?;
    Ok((report.risk_object_id, report))
}
