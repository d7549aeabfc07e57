//! Coalition scoring, grasp selection, robot-count rule and task constraints.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{self, AdvisorConfig, AdvisorError, PromptConfig};
use crate::candidates::{CandidateSet, LabeledImage};
use crate::geometry::Pose;
use crate::mesh::Mesh;
use crate::metrics::{contacts_from_grasp, evaluate, ContactSet};
use crate::scene::SceneObject;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("insufficient robots: the task needs {required}, only {budget} available")]
    InsufficientRobots { required: usize, budget: usize },
    #[error("robot budget must be at least 1")]
    ZeroBudget,
    #[error("cannot choose {m} grasps from {k} candidates")]
    BadCount { m: usize, k: usize },
    #[error("{count} subsets exceed the exhaustive limit {limit}; configure a beam search")]
    TooManySubsets { count: u128, limit: u128 },
    #[error("empty subset")]
    EmptySubset,
    #[error("label {0} is not a candidate")]
    UnknownLabel(u32),
    #[error("invalid advisor selection: {0}")]
    Validation(String),
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
}

/// Predicate on object poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MotionConstraint {
    /// Object-frame `body_axis` must stay within `tolerance` radians of the
    /// world `world_axis`.
    AxisAlignment {
        body_axis: [f64; 3],
        world_axis: [f64; 3],
        tolerance: f64,
    },
    /// Object origin height bounds (meters).
    HeightBand { min: f64, max: f64 },
    /// Object origin bounds (meters).
    WorkspaceBox { min: [f64; 3], max: [f64; 3] },
}

impl MotionConstraint {
    /// Keep the object's z axis vertical.
    pub fn upright(tolerance: f64) -> Self {
        MotionConstraint::AxisAlignment {
            body_axis: [0.0, 0.0, 1.0],
            world_axis: [0.0, 0.0, 1.0],
            tolerance,
        }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |m: &str| Err(SelectError::InvalidConstraint(m.into()));
        match self {
            MotionConstraint::AxisAlignment {
                body_axis,
                world_axis,
                tolerance,
            } => {
                if !(*tolerance > 0.0) {
                    return bad("tolerance must be positive");
                }
                if Vector3::from(*body_axis).norm() < 1e-9
                    || Vector3::from(*world_axis).norm() < 1e-9
                {
                    return bad("zero axis");
                }
            }
            MotionConstraint::HeightBand { min, max } => {
                if !(min < max) {
                    return bad("height band is empty");
                }
            }
            MotionConstraint::WorkspaceBox { min, max } => {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return bad("workspace box is empty");
                }
            }
        }
        Ok(())
    }

    /// Angle between the constrained axes (0 for bound constraints).
    pub fn axis_deviation(&self, pose: &Pose) -> f64 {
        match self {
            MotionConstraint::AxisAlignment {
                body_axis,
                world_axis,
                ..
            } => {
                let a = (pose.rotation * Vector3::from(*body_axis)).normalize();
                let b = Vector3::from(*world_axis).normalize();
                a.cross(&b).norm().atan2(a.dot(&b))
            }
            _ => 0.0,
        }
    }

    pub fn holds(&self, pose: &Pose) -> bool {
        let t = pose.translation;
        match self {
            MotionConstraint::AxisAlignment { tolerance, .. } => {
                self.axis_deviation(pose) <= *tolerance
            }
            MotionConstraint::HeightBand { min, max } => t.z >= *min && t.z <= *max,
            MotionConstraint::WorkspaceBox { min, max } => {
                (0..3).all(|k| t[k] >= min[k] && t[k] <= max[k])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub object_id: u32,
    pub p_init: Pose,
    pub p_end: Pose,
    #[serde(default)]
    pub constraints: Vec<MotionConstraint>,
    /// Robots available (N).
    pub budget: usize,
    /// Robots actually used (M), filled in by the count rule.
    #[serde(default)]
    pub allocated: Option<usize>,
}

impl Task {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.budget == 0 {
            return Err(SelectError::ZeroBudget);
        }
        if let Some(m) = self.allocated {
            if m > self.budget {
                return Err(SelectError::InsufficientRobots {
                    required: m,
                    budget: self.budget,
                });
            }
        }
        if !self.p_init.is_finite() || !self.p_end.is_finite() {
            return Err(SelectError::InvalidConstraint(
                "non-finite task pose".into(),
            ));
        }
        self.constraints.iter().try_for_each(|c| c.validate())
    }

    pub fn satisfied_at(&self, pose: &Pose) -> bool {
        self.constraints.iter().all(|c| c.holds(pose))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRule {
    /// Payload per robot (kg).
    pub payload: f64,
    /// Object length one robot can handle (m).
    pub span: f64,
}

impl Default for CountRule {
    fn default() -> Self {
        Self {
            payload: 15.0,
            span: 1.2,
        }
    }
}

/// `max(⌈mass / payload⌉, ⌈longest / span⌉)`, at least 1. Errors when it
/// exceeds the task budget; otherwise records it in the task.
pub fn infer_robot_count(
    task: &mut Task,
    mass: f64,
    extents: &Vector3<f64>,
    rule: &CountRule,
) -> Result<usize, SelectError> {
    if task.budget == 0 {
        return Err(SelectError::ZeroBudget);
    }
    let by_mass = (mass / rule.payload).ceil().max(0.0) as usize;
    let by_span = (extents.max() / rule.span).ceil().max(0.0) as usize;
    let required = by_mass.max(by_span).max(1);
    if required > task.budget {
        return Err(SelectError::InsufficientRobots {
            required,
            budget: task.budget,
        });
    }
    task.allocated = Some(required);
    Ok(required)
}

/// What the metrics need to know about the grasped object.
#[derive(Clone, Debug)]
pub struct ObjectProps {
    /// World-frame mesh.
    pub mesh: Mesh,
    pub com: Vector3<f64>,
    pub mass: f64,
    pub friction: f64,
    /// Horizontal length used to make distance scores unitless.
    pub scale: f64,
    pub max_opening: f64,
}

impl ObjectProps {
    pub fn from_object(o: &SceneObject, max_opening: f64) -> Self {
        let mesh = o.world_mesh();
        let (lo, hi) = mesh.bounds();
        let d = hi - lo;
        Self {
            mesh,
            com: o.com_world(),
            mass: o.mass,
            friction: o.friction,
            scale: d.x.hypot(d.y).max(1e-6),
            max_opening,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionScores {
    /// Signed horizontal distance of the com to the grasp-point hull,
    /// positive inside (meters).
    pub hull: f64,
    /// The hull collapsed to a segment or point.
    pub hull_degenerate: bool,
    /// Minimum pairwise distance (meters).
    pub dispersion: f64,
    /// Mean |cos| between closing lines and gravity.
    pub angle: f64,
    /// Mean local planarity, 1 for a perfect plane.
    pub local: f64,
    pub omega: Option<f64>,
    pub msv: Option<f64>,
    pub f_max: Option<f64>,
    pub metrics_error: Option<String>,
}

/// Selection weights. Hull and dispersion enter divided by the object
/// scale so all four terms are unitless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub hull: f64,
    pub dispersion: f64,
    pub angle: f64,
    pub local: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            hull: 0.4,
            dispersion: 0.2,
            angle: 0.2,
            local: 0.2,
        }
    }
}

impl ScoreWeights {
    pub fn total(&self, s: &CoalitionScores, scale: f64) -> f64 {
        self.hull * s.hull / scale
            + self.dispersion * s.dispersion / scale
            + self.angle * s.angle
            + self.local * s.local
    }
}

fn cross2(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain); collinear points dropped.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    p.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for q in &p {
        while lower.len() >= 2
            && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], q) <= 1e-12
        {
            lower.pop();
        }
        lower.push(*q);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for q in p.iter().rev() {
        while upper.len() >= 2
            && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], q) <= 1e-12
        {
            upper.pop();
        }
        upper.push(*q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let s = ((p - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

/// Signed distance of `p` to the hull of `points`, positive inside.
///
/// A hull that collapses to a segment scores the along-segment distance to
/// the nearer end (negative beyond the ends) minus the perpendicular offset;
/// a single point scores minus the distance. Both are flagged degenerate.
pub fn hull_signed_distance(p: &Vector2<f64>, points: &[Vector2<f64>]) -> (f64, bool) {
    let hull = convex_hull_2d(points);
    match hull.len() {
        0 => (f64::NEG_INFINITY, true),
        1 => (-(p - hull[0]).norm(), true),
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let ab = b - a;
            let len = ab.norm();
            let dir = ab / len;
            let s = (p - a).dot(&dir);
            let perp = ((p - a) - dir * s).norm();
            (s.min(len - s) - perp, true)
        }
        n => {
            let edge = (0..n)
                .map(|i| segment_distance(p, &hull[i], &hull[(i + 1) % n]))
                .fold(f64::INFINITY, f64::min);
            let inside = (0..n).all(|i| cross2(&hull[i], &hull[(i + 1) % n], p) >= 0.0);
            (if inside { edge } else { -edge }, false)
        }
    }
}

fn subset_candidates<'a>(
    cands: &'a CandidateSet,
    subset: &[u32],
) -> Result<Vec<&'a crate::candidates::Candidate>, SelectError> {
    if subset.is_empty() {
        return Err(SelectError::EmptySubset);
    }
    subset
        .iter()
        .map(|&l| cands.get(l).ok_or(SelectError::UnknownLabel(l)))
        .collect()
}

fn geometric_scores(
    cands: &[&crate::candidates::Candidate],
    com: &Vector3<f64>,
) -> CoalitionScores {
    let pts: Vec<Vector2<f64>> = cands.iter().map(|c| c.point.xy()).collect();
    let (hull, hull_degenerate) = hull_signed_distance(&com.xy(), &pts);
    let mut dispersion = if cands.len() < 2 { 0.0 } else { f64::INFINITY };
    for i in 0..cands.len() {
        for j in i + 1..cands.len() {
            dispersion = dispersion.min((cands[i].point - cands[j].point).norm());
        }
    }
    let n = cands.len() as f64;
    let angle = cands
        .iter()
        .map(|c| c.grasp.closing_axis().z.abs())
        .sum::<f64>()
        / n;
    let local = cands
        .iter()
        .map(|c| (1.0 - 3.0 * c.flatness).clamp(0.0, 1.0))
        .sum::<f64>()
        / n;
    CoalitionScores {
        hull,
        hull_degenerate,
        dispersion,
        angle,
        local,
        omega: None,
        msv: None,
        f_max: None,
        metrics_error: None,
    }
}

/// Two finger contacts per grasp, under gravity.
pub fn coalition_contacts(
    cands: &CandidateSet,
    subset: &[u32],
    object: &ObjectProps,
) -> Result<ContactSet, String> {
    let chosen = subset_candidates(cands, subset).map_err(|e| e.to_string())?;
    let mut contacts = Vec::new();
    for c in chosen {
        let pair = contacts_from_grasp(&c.grasp, &object.mesh, object.max_opening, object.friction)
            .map_err(|e| format!("label {}: {e}", c.label))?;
        contacts.extend(pair);
    }
    Ok(ContactSet::under_gravity(contacts, object.com, object.mass))
}

pub fn score_coalition(
    cands: &CandidateSet,
    subset: &[u32],
    object: &ObjectProps,
) -> Result<CoalitionScores, SelectError> {
    let chosen = subset_candidates(cands, subset)?;
    let mut s = geometric_scores(&chosen, &object.com);
    match coalition_contacts(cands, subset, object)
        .and_then(|cs| evaluate(&cs).map_err(|e| e.to_string()))
    {
        Ok(r) => {
            s.omega = Some(r.omega);
            s.msv = Some(r.msv);
            s.f_max = r.f_max;
            s.metrics_error = r.error;
        }
        Err(e) => s.metrics_error = Some(e),
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub weights: ScoreWeights,
    /// Largest C(K, M) searched exhaustively.
    pub max_subsets: u128,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            max_subsets: 20_000,
        }
    }
}

#[derive(Clone, Debug)]
pub enum SelectMode<'a> {
    Scorer,
    Advisor {
        endpoint: &'a AdvisorConfig,
        prompt: &'a PromptConfig,
        image: &'a LabeledImage,
        image_path: Option<&'a std::path::Path>,
        task: &'a Task,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub labels: Vec<u32>,
    pub scores: CoalitionScores,
    pub total: f64,
    /// "scorer" or "advisor".
    pub mode: String,
    pub rationale: String,
    /// Advisor output passed validation.
    pub grounding_success: Option<bool>,
    /// Why the advisor answer was replaced by the scorer's.
    pub fallback: Option<String>,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// All `m`-subsets of `labels` in lexicographic order.
pub fn subsets(labels: &[u32], m: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..m).collect();
    let n = labels.len();
    if m > n {
        return out;
    }
    loop {
        out.push(idx.iter().map(|&i| labels[i]).collect());
        let Some(pos) = (0..m).rev().find(|&i| idx[i] != i + n - m) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Every subset with its geometric scores and weighted total, in
/// lexicographic label order.
pub fn rank_subsets(
    cands: &CandidateSet,
    m: usize,
    object: &ObjectProps,
    config: &ScorerConfig,
) -> Result<Vec<(Vec<u32>, CoalitionScores, f64)>, SelectError> {
    let k = cands.k();
    if m == 0 || m > k {
        return Err(SelectError::BadCount { m, k });
    }
    let count = binomial(k, m);
    if count > config.max_subsets {
        return Err(SelectError::TooManySubsets {
            count,
            limit: config.max_subsets,
        });
    }
    let mut labels = cands.labels();
    labels.sort_unstable();
    Ok(subsets(&labels, m)
        .into_par_iter()
        .map(|s| {
            let chosen = subset_candidates(cands, &s).expect("labels come from the set");
            let sc = geometric_scores(&chosen, &object.com);
            let total = config.weights.total(&sc, object.scale);
            (s, sc, total)
        })
        .collect())
}

/// Exhaustive scorer: highest weighted total, ties to the lowest label tuple.
pub fn select_by_scorer(
    cands: &CandidateSet,
    m: usize,
    object: &ObjectProps,
    config: &ScorerConfig,
) -> Result<SelectionReport, SelectError> {
    let mut ranked = rank_subsets(cands, m, object, config)?;
    let mut best = 0;
    for i in 1..ranked.len() {
        // strict: equal totals keep the earlier (lower) tuple
        if ranked[i].2 > ranked[best].2 {
            best = i;
        }
    }
    let (labels, _, total) = ranked.swap_remove(best);
    let scores = score_coalition(cands, &labels, object)?;
    let w = &config.weights;
    let rationale = format!(
        "exhaustive over {} subsets; total {:.6} = {}*hull {:.4} + {}*dispersion {:.4} + {}*angle {:.4} + {}*local {:.4} (distances / {:.4} m)",
        binomial(cands.k(), m),
        total,
        w.hull,
        scores.hull,
        w.dispersion,
        scores.dispersion,
        w.angle,
        scores.angle,
        w.local,
        scores.local,
        object.scale
    );
    Ok(SelectionReport {
        labels,
        scores,
        total,
        mode: "scorer".into(),
        rationale,
        grounding_success: None,
        fallback: None,
    })
}

/// Labels must be distinct members of the set, exactly `m` of them.
pub fn validate_labels(labels: &[u32], cands: &CandidateSet, m: usize) -> Result<(), SelectError> {
    if labels.len() != m {
        return Err(SelectError::Validation(format!(
            "expected {m} labels, got {}",
            labels.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &l in labels {
        if l == 0 || l as usize > cands.k() || cands.get(l).is_none() {
            return Err(SelectError::Validation(format!(
                "label {l} is outside 1..{}",
                cands.k()
            )));
        }
        if !seen.insert(l) {
            return Err(SelectError::Validation(format!("label {l} repeated")));
        }
    }
    Ok(())
}

pub fn select_grasps(
    cands: &CandidateSet,
    m: usize,
    mode: &SelectMode,
    object: &ObjectProps,
    config: &ScorerConfig,
) -> Result<SelectionReport, SelectError> {
    let SelectMode::Advisor {
        endpoint,
        prompt,
        image,
        image_path,
        task,
    } = mode
    else {
        return select_by_scorer(cands, m, object, config);
    };
    let doc = advisor::build_advisor_prompt(cands, task, m, image, *image_path, prompt);
    let answer = advisor::query_advisor(endpoint, &doc).and_then(|a| {
        validate_labels(&a.labels, cands, m)
            .map_err(|e| AdvisorError::Validation(e.to_string()))?;
        Ok(a)
    });
    match answer {
        Ok(a) => {
            let mut labels = a.labels.clone();
            labels.sort_unstable();
            let scores = score_coalition(cands, &labels, object)?;
            let total = config.weights.total(&scores, object.scale);
            Ok(SelectionReport {
                labels: a.labels,
                scores,
                total,
                mode: "advisor".into(),
                rationale: a.rationale,
                grounding_success: Some(true),
                fallback: None,
            })
        }
        Err(e) => {
            let mut r = select_by_scorer(cands, m, object, config)?;
            r.grounding_success =
                matches!(e, AdvisorError::Validation(_) | AdvisorError::Parse(_)).then_some(false);
            r.fallback = Some(e.to_string());
            Ok(r)
        }
    }
}
