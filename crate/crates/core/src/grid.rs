//! Budget intervals and their uniform discretisations.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Closed interval of admissible budgets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpace {
    pub min: f64,
    pub max: f64,
}

impl BudgetSpace {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return domain(format!("invalid budget interval [{min}, {max}]"));
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self { min: 0.0, max: 1.0 }
    }

    pub fn contains(&self, budget: f64) -> bool {
        budget >= self.min && budget <= self.max
    }

    /// Clamps into the interval; the flag records whether clamping happened.
    pub fn clamp(&self, budget: f64) -> (f64, bool) {
        if budget < self.min {
            (self.min, true)
        } else if budget > self.max {
            (self.max, true)
        } else {
            (budget, false)
        }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Result of projecting a budget onto the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snapped {
    pub index: usize,
    pub value: f64,
    /// True when the input was not (numerically) a grid value.
    pub off_grid: bool,
}

/// Strictly increasing finite set of budgets. Deserialises from either
/// `"lo:step:hi"` or an explicit list; serialises as the list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "Vec<f64>")]
pub struct BudgetGrid {
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridRepr {
    Range(String),
    Values(Vec<f64>),
}

impl TryFrom<GridRepr> for BudgetGrid {
    type Error = crate::error::Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        match r {
            GridRepr::Range(s) => Self::parse(&s),
            GridRepr::Values(v) => Self::from_values(v),
        }
    }
}

impl From<BudgetGrid> for Vec<f64> {
    fn from(g: BudgetGrid) -> Self {
        g.values
    }
}

const ON_GRID_TOL: f64 = 1e-9;

impl BudgetGrid {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return domain("budget grid must be non-empty");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("budget grid values must be finite");
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return domain("budget grid must be strictly increasing");
        }
        Ok(Self { values })
    }

    /// `min:step:max`, inclusive of both ends. The last point is pinned to
    /// `max` exactly.
    pub fn uniform(space: BudgetSpace, step: f64) -> Result<Self> {
        if space.width() == 0.0 {
            return Self::from_values(vec![space.min]);
        }
        if !(step > 0.0) {
            return domain(format!("grid step must be positive, got {step}"));
        }
        let intervals = (space.width() / step).round() as usize;
        if intervals == 0
            || ((intervals as f64 * step) - space.width()).abs() > 1e-9 * space.width().max(1.0)
        {
            return domain(format!(
                "step {step} does not divide [{}, {}]",
                space.min, space.max
            ));
        }
        let mut values: Vec<f64> = (0..=intervals)
            .map(|i| space.min + i as f64 * step)
            .collect();
        values[intervals] = space.max;
        Self::from_values(values)
    }

    /// Parses the `lo:step:hi` notation used in the configuration files.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
        let nums: std::result::Result<Vec<f64>, _> =
            parts.iter().map(|p| p.parse::<f64>()).collect();
        match (parts.len(), nums) {
            (3, Ok(n)) => Self::uniform(BudgetSpace::new(n[0], n[2])?, n[1]),
            _ => domain(format!("expected lo:step:hi, got {spec:?}")),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn space(&self) -> BudgetSpace {
        BudgetSpace {
            min: self.min(),
            max: self.max(),
        }
    }

    /// Nearest grid point; ties resolve to the lower point.
    pub fn snap(&self, budget: f64) -> Snapped {
        let v = &self.values;
        let index = match v.binary_search_by(|x| x.total_cmp(&budget)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i == v.len() => v.len() - 1,
            Err(i) => {
                if budget - v[i - 1] <= v[i] - budget {
                    i - 1
                } else {
                    i
                }
            }
        };
        let value = v[index];
        let scale = 1.0f64.max(value.abs());
        Snapped {
            index,
            value,
            off_grid: (value - budget).abs() > ON_GRID_TOL * scale,
        }
    }
}
