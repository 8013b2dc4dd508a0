//! Entropy functions and closed-form Chernoff intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An estimate together with its confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedValue {
    pub lower: f64,
    pub point: f64,
    pub upper: f64,
    pub failure_prob: f64,
}

impl BoundedValue {
    /// A value known exactly (zero-width interval).
    pub fn exact(x: f64) -> Self {
        BoundedValue {
            lower: x,
            point: x,
            upper: x,
            failure_prob: 0.0,
        }
    }

    pub fn scale(self, k: f64) -> Self {
        assert!(k >= 0.0, "scaling a bounded value by a negative factor");
        BoundedValue {
            lower: self.lower * k,
            point: self.point * k,
            upper: self.upper * k,
            failure_prob: self.failure_prob,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Upper,
}

/// h(x) = -x log2 x - (1-x) log2(1-x), with h(0) = h(1) = 0.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            function: "binary_entropy",
            value: x,
            domain: "[0, 1]",
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-(x * x.log2()) - (1.0 - x) * (-x).ln_1p() / std::f64::consts::LN_2)
}

/// Bosonic entropy g(x) = (x+1) log2(x+1) - x log2 x of a thermal state with mean x.
pub fn hbar(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain {
            function: "hbar",
            value: x,
            domain: "[0, inf)",
        });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(((x + 1.0) * x.ln_1p() - x * x.ln()) / std::f64::consts::LN_2)
}

/// Closed-form Chernoff interval for the expectation behind an observed count.
///
/// With `beta = ln(1/xi)`:
/// `upper = x + beta + sqrt(2 beta x + beta^2)`, `lower = max(0, x - sqrt(2 beta x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chernoff {
    failure_prob: f64,
    beta: f64,
}

impl Chernoff {
    pub fn new(failure_prob: f64) -> Result<Self> {
        if !(failure_prob > 0.0 && failure_prob < 1.0) {
            return Err(Error::Domain {
                function: "Chernoff::new",
                value: failure_prob,
                domain: "(0, 1)",
            });
        }
        Ok(Chernoff {
            failure_prob,
            beta: (1.0 / failure_prob).ln(),
        })
    }

    pub fn failure_prob(&self) -> f64 {
        self.failure_prob
    }

    pub fn lower(&self, observed: f64) -> f64 {
        debug_assert!(observed >= 0.0);
        (observed - (2.0 * self.beta * observed).sqrt()).max(0.0)
    }

    pub fn upper(&self, observed: f64) -> f64 {
        debug_assert!(observed >= 0.0);
        let b = self.beta;
        observed + b + (2.0 * b * observed + b * b).sqrt()
    }

    pub fn bound(&self, observed: f64) -> BoundedValue {
        BoundedValue {
            lower: self.lower(observed),
            point: observed,
            upper: self.upper(observed),
            failure_prob: self.failure_prob,
        }
    }
}

/// One-sided bound on the expected value of an observed count.
pub fn bound_expected(observed: f64, failure_prob: f64, direction: Direction) -> Result<f64> {
    if !(observed >= 0.0) || !observed.is_finite() {
        return Err(Error::Domain {
            function: "bound_expected",
            value: observed,
            domain: "observed count in [0, inf)",
        });
    }
    let c = Chernoff::new(failure_prob)?;
    Ok(match direction {
        Direction::Lower => c.lower(observed),
        Direction::Upper => c.upper(observed),
    })
}
