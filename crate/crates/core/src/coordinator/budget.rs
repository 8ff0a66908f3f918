//! Session budgets: allocated limits, the optimizer's projection, and the
//! monotone accrual of what execution actually spent.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::optimizer::{Dimension, QosVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationPolicy {
    #[default]
    Abort,
    Confirm,
    Replan,
}

/// Limits. `None` leaves a dimension unconstrained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub min_quality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accrual {
    pub cost: f64,
    pub latency_ms: f64,
    /// Minimum quality hint over executed nodes.
    pub quality: f64,
}

impl Default for Accrual {
    fn default() -> Self {
        Self {
            cost: 0.0,
            latency_ms: 0.0,
            quality: 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid budget: {0}")]
pub struct InvalidBudget(pub String);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    #[serde(default)]
    pub allocated: Allocation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projected: Option<QosVector>,
    #[serde(default)]
    pub accrued: Accrual,
    #[serde(default)]
    pub policy: ViolationPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BudgetCheck {
    Proceed,
    Violation(Vec<Dimension>),
}

impl Budget {
    pub fn new(allocated: Allocation, policy: ViolationPolicy) -> Result<Self, InvalidBudget> {
        let b = Self {
            allocated,
            projected: None,
            accrued: Accrual::default(),
            policy,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), InvalidBudget> {
        let a = &self.allocated;
        for (name, v) in [("cost", a.cost), ("latency_ms", a.latency_ms)] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(InvalidBudget(format!("allocated {name} must be a nonnegative number")));
                }
            }
        }
        if !(0.0..=1.0).contains(&a.min_quality) {
            return Err(InvalidBudget("min_quality must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Violated dimensions if `next` were spent on top of the accrual.
    pub fn check(&self, next: &QosVector) -> BudgetCheck {
        let mut dims = Vec::new();
        if let Some(limit) = self.allocated.cost {
            if self.accrued.cost + next.cost > limit {
                dims.push(Dimension::Cost);
            }
        }
        if let Some(limit) = self.allocated.latency_ms {
            if self.accrued.latency_ms + next.latency_ms > limit {
                dims.push(Dimension::Latency);
            }
        }
        if self.accrued.quality.min(next.quality) < self.allocated.min_quality {
            dims.push(Dimension::Quality);
        }
        if dims.is_empty() {
            BudgetCheck::Proceed
        } else {
            BudgetCheck::Violation(dims)
        }
    }

    /// Adds a charge. Negative amounts are ignored so the accrual never decreases.
    pub fn accrue(&mut self, cost: f64, latency_ms: f64, quality: f64) {
        self.accrued.cost += cost.max(0.0);
        self.accrued.latency_ms += latency_ms.max(0.0);
        self.accrued.quality = self.accrued.quality.min(quality);
    }

    pub fn allocated_json(&self) -> Json {
        serde_json::to_value(self.allocated).expect("allocation serializes")
    }

    pub fn accrued_json(&self) -> Json {
        json!({
            "cost": self.accrued.cost,
            "latency_ms": self.accrued.latency_ms,
            "quality": self.accrued.quality,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget(cost: f64) -> Budget {
        Budget::new(
            Allocation {
                cost: Some(cost),
                latency_ms: None,
                min_quality: 0.5,
            },
            ViolationPolicy::Abort,
        )
        .unwrap()
    }

    #[test]
    fn cost_overrun_is_a_violation() {
        let mut b = budget(10.0);
        b.accrue(9.0, 0.0, 1.0);
        assert_eq!(
            b.check(&QosVector::new(2.0, 0.0, 1.0)),
            BudgetCheck::Violation(vec![Dimension::Cost])
        );
        assert_eq!(b.check(&QosVector::new(0.0, 0.0, 1.0)), BudgetCheck::Proceed);
    }

    #[test]
    fn low_quality_is_a_violation() {
        let b = budget(10.0);
        assert_eq!(
            b.check(&QosVector::new(0.0, 0.0, 0.4)),
            BudgetCheck::Violation(vec![Dimension::Quality])
        );
    }

    #[test]
    fn negative_allocation_rejected() {
        let bad = Allocation {
            cost: Some(-1.0),
            ..Default::default()
        };
        assert!(Budget::new(bad, ViolationPolicy::Abort).is_err());
    }

    #[test]
    fn accrual_is_monotone() {
        let mut b = budget(10.0);
        b.accrue(1.0, 5.0, 0.9);
        b.accrue(-3.0, -1.0, 1.0);
        assert_eq!(b.accrued.cost, 1.0);
        assert_eq!(b.accrued.latency_ms, 5.0);
        assert_eq!(b.accrued.quality, 0.9);
    }
}
