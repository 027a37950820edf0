//! Per-run resource caps.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Events,
    BehaviorCalls,
    ModelCalls,
    Patches,
    Depth,
    WallMs,
    Cost,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Events,
        Dimension::BehaviorCalls,
        Dimension::ModelCalls,
        Dimension::Patches,
        Dimension::Depth,
        Dimension::WallMs,
        Dimension::Cost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Events => "events",
            Dimension::BehaviorCalls => "behavior_calls",
            Dimension::ModelCalls => "model_calls",
            Dimension::Patches => "patches",
            Dimension::Depth => "depth",
            Dimension::WallMs => "wall_ms",
            Dimension::Cost => "cost",
        }
    }

    /// Accepts both `model_calls` and `max_model_calls`.
    pub fn parse(s: &str) -> Option<Dimension> {
        let s = s.strip_prefix("max_").unwrap_or(s);
        Dimension::ALL.into_iter().find(|d| d.name() == s)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("unknown budget dimension {0:?}")]
    UnknownDimension(String),
    #[error("budget cap {dimension} must be a positive number, got {value}")]
    InvalidCap { dimension: Dimension, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_events: u64,
    pub max_behavior_calls: u64,
    pub max_model_calls: u64,
    pub max_patches: u64,
    pub max_depth: u64,
    pub max_wall_ms: u64,
    pub max_cost: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_events: 10_000,
            max_behavior_calls: 2_000,
            max_model_calls: 500,
            max_patches: 2_000,
            max_depth: 64,
            max_wall_ms: 300_000,
            max_cost: 10.0,
        }
    }
}

impl Budget {
    pub fn set(&mut self, key: &str, value: &Value) -> Result<(), BudgetError> {
        let dim = Dimension::parse(key).ok_or_else(|| BudgetError::UnknownDimension(key.to_string()))?;
        let invalid = || BudgetError::InvalidCap { dimension: dim, value: value.to_string() };
        let number = match value {
            Value::String(s) => s.parse::<f64>().map_err(|_| invalid())?,
            other => other.as_f64().ok_or_else(invalid)?,
        };
        if dim == Dimension::Cost {
            if !(number.is_finite() && number > 0.0) {
                return Err(invalid());
            }
            self.max_cost = number;
            return Ok(());
        }
        if !(number >= 1.0 && number.fract() == 0.0 && number <= u64::MAX as f64) {
            return Err(invalid());
        }
        let n = number as u64;
        match dim {
            Dimension::Events => self.max_events = n,
            Dimension::BehaviorCalls => self.max_behavior_calls = n,
            Dimension::ModelCalls => self.max_model_calls = n,
            Dimension::Patches => self.max_patches = n,
            Dimension::Depth => self.max_depth = n,
            Dimension::WallMs => self.max_wall_ms = n,
            Dimension::Cost => unreachable!(),
        }
        Ok(())
    }

    pub fn limit(&self, dim: Dimension) -> Value {
        match dim {
            Dimension::Events => json!(self.max_events),
            Dimension::BehaviorCalls => json!(self.max_behavior_calls),
            Dimension::ModelCalls => json!(self.max_model_calls),
            Dimension::Patches => json!(self.max_patches),
            Dimension::Depth => json!(self.max_depth),
            Dimension::WallMs => json!(self.max_wall_ms),
            Dimension::Cost => json!(self.max_cost),
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        for dim in Dimension::ALL {
            let v = self.limit(dim);
            if v.as_f64().map_or(true, |n| !(n > 0.0 && n.is_finite())) {
                return Err(BudgetError::InvalidCap { dimension: dim, value: v.to_string() });
            }
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("budget serializes")
    }

    pub fn from_value(v: &Value) -> Option<Budget> {
        serde_json::from_value(v.clone()).ok()
    }
}

/// The state reached when a cap is hit; also the payload of `budget.exceeded`.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetExceeded {
    pub dimension: Dimension,
    pub limit: Value,
    pub used: Value,
}

impl BudgetExceeded {
    pub fn to_payload(&self) -> Value {
        json!({"dimension": self.dimension.name(), "limit": self.limit, "used": self.used})
    }
}

impl fmt::Display for BudgetExceeded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "budget exceeded: {} (limit {}, reached {})", self.dimension, self.limit, self.used)
    }
}

/// Running totals for the counted dimensions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Usage {
    pub behavior_calls: u64,
    pub model_calls: u64,
    pub patches: u64,
    pub cost: f64,
}

impl Usage {
    /// Counts one more unit of `dim`, or reports the cap it would cross.
    pub fn charge(&mut self, budget: &Budget, dim: Dimension) -> Result<(), BudgetExceeded> {
        let (counter, cap) = match dim {
            Dimension::BehaviorCalls => (&mut self.behavior_calls, budget.max_behavior_calls),
            Dimension::ModelCalls => (&mut self.model_calls, budget.max_model_calls),
            Dimension::Patches => (&mut self.patches, budget.max_patches),
            other => panic!("{other} is not a counted dimension"),
        };
        if *counter + 1 > cap {
            return Err(BudgetExceeded { dimension: dim, limit: budget.limit(dim), used: json!(*counter + 1) });
        }
        *counter += 1;
        Ok(())
    }

    pub fn add_cost(&mut self, budget: &Budget, cost: f64) -> Result<(), BudgetExceeded> {
        self.cost += cost;
        if self.cost > budget.max_cost {
            return Err(BudgetExceeded { dimension: Dimension::Cost, limit: budget.limit(Dimension::Cost), used: json!(self.cost) });
        }
        Ok(())
    }
}
