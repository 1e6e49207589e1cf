use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::{ActionBounds, Interval, Scope, BASELINE_CHWS};

/// A setpoint triple `[CHWS, SAT, fan]` applied uniformly to every CRAH.
pub type Setpoint = [f64; 3];

/// Cartesian grid of uniform setpoints. Enumeration order is lexicographic
/// in `(CHWS, SAT, fan)`, which is also the tie-breaking order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub chws: Vec<f64>,
    pub sat: Vec<f64>,
    pub fan: Vec<f64>,
}

/// `lo, lo + step, …` up to `hi` inclusive. Values are rounded to 1e-9 so
/// they compare equal to their decimal literals.
pub fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| ((lo + step * i as f64) * 1e9).round() / 1e9)
        .collect()
}

impl ActionGrid {
    pub fn new(mut chws: Vec<f64>, mut sat: Vec<f64>, mut fan: Vec<f64>) -> Result<Self> {
        for v in [&mut chws, &mut sat, &mut fan] {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("grid axes must be nonempty and finite".into()));
            }
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        Ok(Self { chws, sat, fan })
    }

    /// The full discretization: SAT 18..26 by 1, fan 0.3..1.0 by 0.05,
    /// CHWS 6..12 by 0.5. CRAH-only grids hold CHWS at the baseline.
    pub fn for_scope(scope: Scope) -> Self {
        let chws = match scope {
            Scope::CrahOnly => vec![BASELINE_CHWS],
            Scope::CrahChw => steps(6.0, 12.0, 0.5),
        };
        Self {
            chws,
            sat: steps(18.0, 26.0, 1.0),
            fan: steps(0.3, 1.0, 0.05),
        }
    }

    /// Keeps only the values inside `bounds`.
    pub fn restrict(&self, bounds: &ActionBounds) -> Result<Self> {
        let keep = |v: &[f64], i: Interval| -> Vec<f64> {
            v.iter().copied().filter(|x| i.contains(*x)).collect()
        };
        Self::new(
            keep(&self.chws, bounds.chws()),
            keep(&self.sat, bounds.sat()),
            keep(&self.fan, bounds.fan()),
        )
    }

    pub fn len(&self) -> usize {
        self.chws.len() * self.sat.len() * self.fan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, idx: usize) -> Setpoint {
        let nf = self.fan.len();
        let ns = self.sat.len();
        [
            self.chws[idx / (ns * nf)],
            self.sat[(idx / nf) % ns],
            self.fan[idx % nf],
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = Setpoint> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn lo(&self) -> Setpoint {
        [self.chws[0], self.sat[0], self.fan[0]]
    }

    pub fn hi(&self) -> Setpoint {
        [
            *self.chws.last().unwrap(),
            *self.sat.last().unwrap(),
            *self.fan.last().unwrap(),
        ]
    }

    /// Nearest grid value on each axis; ties round down.
    pub fn snap(&self, p: Setpoint) -> Setpoint {
        let near = |axis: &[f64], x: f64| {
            axis.iter()
                .copied()
                .fold((f64::INFINITY, axis[0]), |(bd, bv), v| {
                    let d = (v - x).abs();
                    if d < bd {
                        (d, v)
                    } else {
                        (bd, bv)
                    }
                })
                .1
        };
        [near(&self.chws, p[0]), near(&self.sat, p[1]), near(&self.fan, p[2])]
    }
}

/// Lexicographic comparison of setpoints.
pub fn lex_cmp(a: &Setpoint, b: &Setpoint) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        let g = ActionGrid::for_scope(Scope::CrahChw);
        assert_eq!((g.chws.len(), g.sat.len(), g.fan.len()), (13, 9, 15));
        assert_eq!(g.fan[14], 1.0);
        assert_eq!(g.fan[12], 0.9);
        assert_eq!(g.fan[6], 0.6);
        assert_eq!(ActionGrid::for_scope(Scope::CrahOnly).len(), 135);
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let g = ActionGrid::new(vec![6.0, 7.0], vec![20.0, 21.0, 22.0], vec![0.5, 0.9]).unwrap();
        let all: Vec<Setpoint> = g.iter().collect();
        assert_eq!(all.len(), 12);
        assert!(all.windows(2).all(|w| lex_cmp(&w[0], &w[1]).is_lt()));
        assert_eq!(all[0], [6.0, 20.0, 0.5]);
        assert_eq!(all[11], [7.0, 22.0, 0.9]);
    }

    #[test]
    fn snap_and_restrict() {
        let g = ActionGrid::for_scope(Scope::CrahChw);
        assert_eq!(g.snap([6.2, 30.0, 0.32]), [6.0, 26.0, 0.3]);
        let b = ActionBounds::uniform(4, Interval::new(7.0, 8.0), Interval::new(20.0, 22.0), Interval::new(0.6, 0.9));
        let r = g.restrict(&b).unwrap();
        assert_eq!(r.chws, vec![7.0, 7.5, 8.0]);
        assert_eq!(r.sat, vec![20.0, 21.0, 22.0]);
        assert_eq!(r.fan.len(), 7);
        let empty = ActionBounds::uniform(4, Interval::new(13.0, 14.0), Interval::new(20.0, 22.0), Interval::new(0.6, 0.9));
        assert!(g.restrict(&empty).is_err());
    }
}
