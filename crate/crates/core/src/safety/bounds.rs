use serde::{Deserialize, Serialize};

use super::Interval;
use crate::plant::ControlAction;
use crate::error::{Error, Result};

/// Which setpoints a policy is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// CRAH supply-air temperature and fan speed only; CHWS stays at baseline.
    CrahOnly,
    /// CRAH setpoints and chilled-water supply temperature.
    CrahChw,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::CrahOnly => "crah_only",
            Scope::CrahChw => "crah_chw",
        }
    }
}

/// Default setpoint limits.
pub const CHWS_LIMITS: Interval = Interval::new(6.0, 12.0);
pub const SAT_LIMITS: Interval = Interval::new(18.0, 26.0);
pub const FAN_LIMITS: Interval = Interval::new(0.3, 1.0);

/// Baseline chilled-water supply temperature held by CRAH-only policies.
pub const BASELINE_CHWS: f64 = 7.0;

/// The admissible action set: a box over `[CHWS, SAT.., fan..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if let Some((l, h)) = lo.iter().zip(&hi).find(|(l, h)| !(l <= h)) {
            return Err(Error::Config(format!("action bound lo {l} > hi {h}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn uniform(n_crah: usize, chws: Interval, sat: Interval, fan: Interval) -> Self {
        let mut lo = vec![chws.lo];
        let mut hi = vec![chws.hi];
        lo.extend(std::iter::repeat_n(sat.lo, n_crah));
        hi.extend(std::iter::repeat_n(sat.hi, n_crah));
        lo.extend(std::iter::repeat_n(fan.lo, n_crah));
        hi.extend(std::iter::repeat_n(fan.hi, n_crah));
        Self { lo, hi }
    }

    /// Full plant limits for a scope. CRAH-only pins CHWS at the baseline.
    pub fn for_scope(scope: Scope, n_crah: usize) -> Self {
        let chws = match scope {
            Scope::CrahOnly => Interval::new(BASELINE_CHWS, BASELINE_CHWS),
            Scope::CrahChw => CHWS_LIMITS,
        };
        Self::uniform(n_crah, chws, SAT_LIMITS, FAN_LIMITS)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_crah(&self) -> usize {
        (self.dim() - 1) / 2
    }

    pub fn chws(&self) -> Interval {
        Interval::new(self.lo[0], self.hi[0])
    }

    pub fn sat(&self) -> Interval {
        Interval::new(self.lo[1], self.hi[1])
    }

    pub fn fan(&self) -> Interval {
        let n = self.n_crah();
        Interval::new(self.lo[1 + n], self.hi[1 + n])
    }

    pub fn contains(&self, action: &ControlAction) -> bool {
        let flat = action.to_flat();
        flat.len() == self.dim()
            && flat
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| v >= l && v <= h)
    }

    /// Euclidean projection onto the box, i.e. a per-dimension clamp.
    /// Non-finite components land on the lower bound.
    pub fn project(&self, action: &ControlAction) -> Result<ControlAction> {
        let flat = action.to_flat();
        if flat.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: flat.len(),
            });
        }
        Ok(ControlAction::from_flat(&project_flat(&flat, &self.lo, &self.hi))?)
    }
}

/// Clamp of a flat vector onto `[lo, hi]`.
pub fn project_flat(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| if x.is_nan() { l } else { x.clamp(l, h) })
        .collect()
}
