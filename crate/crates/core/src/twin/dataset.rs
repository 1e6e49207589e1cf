use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{self, sense, ControlAction, ExoTrace, ExogenousInput, NoiseConfig, PlantConfig, PlantState};
use crate::safety::ActionBounds;

/// One `(s, a, r, s', exo)` sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub s: PlantState,
    pub a: ControlAction,
    pub r: f64,
    pub s_next: PlantState,
    pub exo: ExogenousInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Telemetry,
    Synthetic,
}

/// Time-ordered transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub provenance: Provenance,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(provenance: Provenance, transitions: Vec<Transition>) -> Result<Self> {
        for w in transitions.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Dataset(format!(
                    "transitions out of order at t = {}",
                    w[1].t
                )));
            }
        }
        for tr in &transitions {
            tr.s.validate()?;
            tr.s_next.validate()?;
            tr.exo.validate()?;
            if !tr.r.is_finite() {
                return Err(Error::NonFinite { field: "r" });
            }
        }
        Ok(Self {
            provenance,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Splits at index `at`: `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        (
            Dataset {
                provenance: self.provenance,
                transitions: self.transitions[..at].to_vec(),
            },
            Dataset {
                provenance: self.provenance,
                transitions: self.transitions[at..].to_vec(),
            },
        )
    }

    pub fn read_jsonl(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let tr: Transition = serde_json::from_str(&line).map_err(|e| {
                Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            out.push(tr);
        }
        Self::new(provenance, out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for tr in &self.transitions {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `plant` over `trace` under uniformly random setpoints drawn from
/// `bounds` (one draw shared by all CRAHs per step) and records the sensed
/// transitions. Noise is drawn from `seed`; a noiseless config records the
/// true states.
pub fn explore(
    plant_cfg: &PlantConfig,
    trace: &ExoTrace,
    bounds: &ActionBounds,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MdpSpec {
        timestep: plant_cfg.timestep,
        ..MdpSpec::default()
    };
    let n = plant_cfg.n_crah;
    let (chws, sat, fan) = (bounds.chws(), bounds.sat(), bounds.fan());
    let draw = |rng: &mut ChaCha8Rng| {
        let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let c = pick(rng, chws.lo, chws.hi);
        let s = pick(rng, sat.lo, sat.hi);
        let f = pick(rng, fan.lo, fan.hi);
        ControlAction::uniform(c, s, f, n)
    };
    let Some(first) = trace.samples.first() else {
        return Dataset::new(Provenance::Synthetic, Vec::new());
    };
    let warm = ControlAction::uniform(7.0, 22.0, 0.85, n);
    let mut state = plant::settle(PlantState::at_rest(24.0, 0.008), &warm, first, plant_cfg, 40)?;
    let mut reading = sense(&state, noise, rng.random()).values;
    let mut out = Vec::with_capacity(trace.len());
    for exo in &trace.samples {
        let a = draw(&mut rng);
        let next = plant::step(&state, &a, exo, plant_cfg)?;
        let next_reading = sense(&next, noise, rng.random()).values;
        out.push(Transition {
            t: state.sim_time,
            s: reading,
            a,
            r: spec.reward(&next_reading),
            s_next: next_reading.clone(),
            exo: *exo,
        });
        state = next;
        reading = next_reading;
    }
    Dataset::new(Provenance::Synthetic, out)
}
