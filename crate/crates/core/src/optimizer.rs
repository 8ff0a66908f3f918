//! QoS estimation over plan DAGs and constrained multi-objective selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scores closer than this are ties.
pub const SCORE_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QosVector {
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default = "full_quality")]
    pub quality: f64,
}

fn full_quality() -> f64 {
    1.0
}

impl Default for QosVector {
    fn default() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }
}

impl QosVector {
    pub fn new(cost: f64, latency_ms: f64, quality: f64) -> Self {
        Self {
            cost,
            latency_ms,
            quality,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.cost.is_finite() && self.cost >= 0.0) {
            return Err(format!("cost must be a nonnegative number, got {}", self.cost));
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(format!(
                "latency_ms must be a nonnegative number, got {}",
                self.latency_ms
            ));
        }
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(format!("quality must lie in [0, 1], got {}", self.quality));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub cost: f64,
    pub latency: f64,
    pub quality: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            cost: 0.4,
            latency: 0.3,
            quality: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionMode {
    /// Weighted sum over min-max normalized cost and latency.
    #[default]
    Weighted,
    /// Strict priority: cost, then latency, then quality.
    Lexicographic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_quality: Option<f64>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub mode: SelectionMode,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            max_cost: None,
            max_latency_ms: None,
            min_quality: None,
            weights: Weights::default(),
            mode: SelectionMode::Weighted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dimension {
    Cost,
    Latency,
    Quality,
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dimension::Cost => "COST",
            Dimension::Latency => "LATENCY",
            Dimension::Quality => "QUALITY",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub dimension: Dimension,
    pub value: f64,
    pub limit: f64,
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), String> {
        let w = self.weights;
        if [w.cost, w.latency, w.quality]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err("weights must be nonnegative".into());
        }
        let sum = w.cost + w.latency + w.quality;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("weights must sum to 1, got {sum}"));
        }
        Ok(())
    }

    /// Every constraint the vector violates.
    pub fn violations(&self, q: &QosVector) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Some(limit) = self.max_cost {
            if q.cost > limit {
                out.push(Violation {
                    dimension: Dimension::Cost,
                    value: q.cost,
                    limit,
                });
            }
        }
        if let Some(limit) = self.max_latency_ms {
            if q.latency_ms > limit {
                out.push(Violation {
                    dimension: Dimension::Latency,
                    value: q.latency_ms,
                    limit,
                });
            }
        }
        if let Some(limit) = self.min_quality {
            if q.quality < limit {
                out.push(Violation {
                    dimension: Dimension::Quality,
                    value: q.quality,
                    limit,
                });
            }
        }
        out
    }

    pub fn is_feasible(&self, q: &QosVector) -> bool {
        self.violations(q).is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("node {0} has no cost hints")]
    MissingCostHints(String),
    #[error("plan graph has a cycle through {0}")]
    Cycle(String),
    #[error("no candidates to choose from")]
    NoCandidates,
    #[error("every candidate violates a constraint")]
    AllInfeasible(Vec<(String, Vec<Violation>)>),
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
}

/// One node of a plan DAG as seen by the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct CostNode {
    pub id: String,
    pub qos: Option<QosVector>,
    pub deps: Vec<String>,
}

impl CostNode {
    pub fn new(id: &str, qos: Option<QosVector>, deps: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            qos,
            deps: deps.iter().map(|d| d.to_string()).collect(),
        }
    }
}

/// Cost is summed, latency is the longest dependency path, quality is the
/// minimum over nodes. An empty plan costs nothing at full quality.
pub fn estimate(nodes: &[CostNode]) -> Result<QosVector, OptimizerError> {
    let by_id: BTreeMap<&str, &CostNode> = nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    for n in nodes {
        if n.qos.is_none() {
            return Err(OptimizerError::MissingCostHints(n.id.clone()));
        }
    }
    let mut finish: BTreeMap<&str, f64> = BTreeMap::new();
    let mut visiting: BTreeSet<&str> = BTreeSet::new();

    fn visit<'a>(
        id: &'a str,
        by_id: &BTreeMap<&'a str, &'a CostNode>,
        finish: &mut BTreeMap<&'a str, f64>,
        visiting: &mut BTreeSet<&'a str>,
    ) -> Result<f64, OptimizerError> {
        if let Some(f) = finish.get(id) {
            return Ok(*f);
        }
        let Some(node) = by_id.get(id) else {
            // Dependencies outside the plan (e.g. user input) start at zero.
            return Ok(0.0);
        };
        if !visiting.insert(id) {
            return Err(OptimizerError::Cycle(id.to_string()));
        }
        let mut start: f64 = 0.0;
        for d in &node.deps {
            start = start.max(visit(d, by_id, finish, visiting)?);
        }
        visiting.remove(id);
        let f = start + node.qos.expect("checked").latency_ms;
        finish.insert(id, f);
        Ok(f)
    }

    let mut latency: f64 = 0.0;
    for n in nodes {
        latency = latency.max(visit(&n.id, &by_id, &mut finish, &mut visiting)?);
    }
    Ok(QosVector {
        cost: nodes.iter().map(|n| n.qos.unwrap().cost).sum(),
        latency_ms: latency,
        quality: nodes.iter().map(|n| n.qos.unwrap().quality).fold(1.0, f64::min),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub qos: QosVector,
}

impl Candidate {
    pub fn new(id: &str, qos: QosVector) -> Self {
        Self {
            id: id.to_string(),
            qos,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    /// Index into the candidate slice.
    pub index: usize,
    pub id: String,
    pub qos: QosVector,
    pub score: f64,
}

fn normalize(x: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo > SCORE_EPSILON {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Scalarized objective of each feasible candidate; lower is better.
/// Cost and latency are min-max normalized over the feasible set; quality
/// already lies in [0, 1] and enters unscaled.
pub fn scores(feasible: &[&Candidate], weights: Weights) -> Vec<f64> {
    let bounds = |f: fn(&QosVector) -> f64| {
        feasible
            .iter()
            .map(|c| f(&c.qos))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    let (clo, chi) = bounds(|q| q.cost);
    let (llo, lhi) = bounds(|q| q.latency_ms);
    feasible
        .iter()
        .map(|c| {
            weights.cost * normalize(c.qos.cost, clo, chi) + weights.latency * normalize(c.qos.latency_ms, llo, lhi)
                - weights.quality * c.qos.quality
        })
        .collect()
}

fn approx_cmp(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= SCORE_EPSILON {
        Ordering::Equal
    } else {
        a.partial_cmp(&b).unwrap_or(Ordering::Equal)
    }
}

/// Drops infeasible candidates and picks the best of the rest.
pub fn choose(candidates: &[Candidate], constraints: &ConstraintSet) -> Result<Choice, OptimizerError> {
    constraints.validate().map_err(OptimizerError::InvalidConstraints)?;
    if candidates.is_empty() {
        return Err(OptimizerError::NoCandidates);
    }
    let mut report = Vec::new();
    let mut feasible: Vec<(usize, &Candidate)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let v = constraints.violations(&c.qos);
        if v.is_empty() {
            feasible.push((i, c));
        } else {
            report.push((c.id.clone(), v));
        }
    }
    if feasible.is_empty() {
        return Err(OptimizerError::AllInfeasible(report));
    }
    let refs: Vec<&Candidate> = feasible.iter().map(|(_, c)| *c).collect();
    let s = scores(&refs, constraints.weights);
    let best = (0..feasible.len())
        .min_by(|&a, &b| {
            let (ca, cb) = (feasible[a].1, feasible[b].1);
            let primary = match constraints.mode {
                SelectionMode::Weighted => approx_cmp(s[a], s[b]),
                SelectionMode::Lexicographic => approx_cmp(ca.qos.cost, cb.qos.cost)
                    .then(approx_cmp(ca.qos.latency_ms, cb.qos.latency_ms))
                    .then(approx_cmp(cb.qos.quality, ca.qos.quality)),
            };
            primary.then_with(|| ca.id.cmp(&cb.id))
        })
        .expect("nonempty");
    let (index, c) = feasible[best];
    Ok(Choice {
        index,
        id: c.id.clone(),
        qos: c.qos,
        score: s[best],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(c: f64, l: f64, qual: f64) -> Option<QosVector> {
        Some(QosVector::new(c, l, qual))
    }

    #[test]
    fn single_node_estimate() {
        let e = estimate(&[CostNode::new("a", q(2.0, 100.0, 0.9), &[])]).unwrap();
        assert_eq!(e, QosVector::new(2.0, 100.0, 0.9));
    }

    #[test]
    fn parallel_branches_use_critical_path() {
        let nodes = [
            CostNode::new("a", q(1.0, 100.0, 1.0), &[]),
            CostNode::new("b", q(1.0, 300.0, 0.8), &[]),
            CostNode::new("sink", q(0.0, 0.0, 1.0), &["a", "b"]),
        ];
        let e = estimate(&nodes).unwrap();
        assert_eq!(e.latency_ms, 300.0);
        assert_eq!(e.cost, 2.0);
        assert_eq!(e.quality, 0.8);
    }

    #[test]
    fn missing_hints_named() {
        let nodes = [CostNode::new("a", None, &[])];
        assert_eq!(estimate(&nodes), Err(OptimizerError::MissingCostHints("a".into())));
    }

    #[test]
    fn cycle_detected() {
        let nodes = [
            CostNode::new("a", q(1.0, 1.0, 1.0), &["b"]),
            CostNode::new("b", q(1.0, 1.0, 1.0), &["a"]),
        ];
        assert!(matches!(estimate(&nodes), Err(OptimizerError::Cycle(_))));
    }

    #[test]
    fn single_feasible_candidate_chosen() {
        let c = [Candidate::new("p1", QosVector::new(1.0, 1.0, 1.0))];
        assert_eq!(choose(&c, &ConstraintSet::default()).unwrap().id, "p1");
    }

    #[test]
    fn all_infeasible_reports_each() {
        let c = [
            Candidate::new("p1", QosVector::new(5.0, 1.0, 1.0)),
            Candidate::new("p2", QosVector::new(7.0, 1.0, 1.0)),
        ];
        let cs = ConstraintSet {
            max_cost: Some(4.0),
            ..Default::default()
        };
        match choose(&c, &cs) {
            Err(OptimizerError::AllInfeasible(r)) => {
                assert_eq!(r.len(), 2);
                assert_eq!(r[0].1[0].dimension, Dimension::Cost);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_break_by_id() {
        let c = [
            Candidate::new("p2", QosVector::new(1.0, 1.0, 1.0)),
            Candidate::new("p1", QosVector::new(1.0, 1.0, 1.0)),
        ];
        assert_eq!(choose(&c, &ConstraintSet::default()).unwrap().id, "p1");
    }

    #[test]
    fn lexicographic_prefers_cost() {
        let c = [
            Candidate::new("cheap", QosVector::new(1.0, 900.0, 0.1)),
            Candidate::new("fast", QosVector::new(2.0, 1.0, 1.0)),
        ];
        let cs = ConstraintSet {
            mode: SelectionMode::Lexicographic,
            ..Default::default()
        };
        assert_eq!(choose(&c, &cs).unwrap().id, "cheap");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let cs = ConstraintSet {
            weights: Weights {
                cost: 1.0,
                latency: 1.0,
                quality: 0.0,
            },
            ..Default::default()
        };
        assert!(matches!(
            choose(&[Candidate::new("a", QosVector::default())], &cs),
            Err(OptimizerError::InvalidConstraints(_))
        ));
    }
}
