use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{ActionGrid, Setpoint};
use super::planner::{plan, SearchMode, TwinPlanning};
use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::plant::{ControlAction, ExogenousInput, PlantState};
use crate::safety::{ActionBounds, Scope, BASELINE_CHWS};
use crate::twin::{Controller, TwinModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Baseline,
    ModelFree,
    Planner,
    OfflinePessimistic,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Baseline => "baseline",
            PolicyKind::ModelFree => "model_free",
            PolicyKind::Planner => "planner",
            PolicyKind::OfflinePessimistic => "offline_pessimistic",
        }
    }
}

/// Coarse state binning by cold-aisle temperature and IT-load band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBins {
    /// Interior edges, °C. `n` edges give `n + 1` bins.
    pub temp_edges: Vec<f64>,
    /// Interior edges, kW.
    pub load_edges: Vec<f64>,
}

impl Default for StateBins {
    fn default() -> Self {
        Self {
            temp_edges: vec![20.0, 21.0, 22.0, 23.0, 24.0, 25.0],
            load_edges: vec![450.0, 500.0, 550.0, 600.0],
        }
    }
}

impl StateBins {
    pub fn len(&self) -> usize {
        (self.temp_edges.len() + 1) * (self.load_edges.len() + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, s: &PlantState, exo: &ExogenousInput) -> usize {
        let t = self.temp_edges.partition_point(|e| *e <= s.cold_aisle_temp);
        let l = self.load_edges.partition_point(|e| *e <= exo.it_load);
        t * (self.load_edges.len() + 1) + l
    }

    pub fn validate(&self) -> Result<()> {
        for edges in [&self.temp_edges, &self.load_edges] {
            if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("bin edges must be finite and increasing".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PolicyParams {
    Constant { setpoint: Setpoint },
    /// One setpoint per state bin.
    Table { bins: StateBins, actions: Vec<Setpoint> },
    /// Replans on the twin at every call.
    Planner { grid: ActionGrid, search: SearchMode },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub episodes: usize,
    pub notes: String,
}

/// A control policy. Every emitted action is projected onto the bounds of
/// its scope, so CRAH-only policies always hold CHWS at the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub kind: PolicyKind,
    pub scope: Scope,
    pub n_crah: usize,
    pub params: PolicyParams,
    #[serde(default)]
    pub meta: TrainingMeta,
}

/// What a policy may consult when acting.
#[derive(Clone, Copy)]
pub struct ActContext<'a> {
    pub model: Option<&'a dyn TwinModel>,
    /// Disturbances for the next `spec.horizon` steps.
    pub forecast: &'a [ExogenousInput],
    pub spec: &'a MdpSpec,
}

pub const BASELINE_SETPOINT: Setpoint = [BASELINE_CHWS, 22.0, 0.85];

/// The rule-based reference: SAT 22 °C, fan 0.85, CHWS 7 °C, always.
pub fn baseline_policy(n_crah: usize) -> Policy {
    Policy {
        id: "baseline".into(),
        kind: PolicyKind::Baseline,
        scope: Scope::CrahOnly,
        n_crah,
        params: PolicyParams::Constant {
            setpoint: BASELINE_SETPOINT,
        },
        meta: TrainingMeta::default(),
    }
}

/// An online planner over the scope's grid.
pub fn planner_policy(id: &str, scope: Scope, n_crah: usize, search: SearchMode) -> Policy {
    Policy {
        id: id.into(),
        kind: PolicyKind::Planner,
        scope,
        n_crah,
        params: PolicyParams::Planner {
            grid: ActionGrid::for_scope(scope),
            search,
        },
        meta: TrainingMeta::default(),
    }
}

impl Policy {
    pub fn bounds(&self) -> ActionBounds {
        ActionBounds::for_scope(self.scope, self.n_crah)
    }

    pub fn needs_model(&self) -> bool {
        matches!(self.params, PolicyParams::Planner { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("policy id must be nonempty".into()));
        }
        if self.n_crah == 0 {
            return Err(Error::Config("policy needs at least one CRAH".into()));
        }
        match &self.params {
            PolicyParams::Constant { setpoint } => check_setpoint(setpoint),
            PolicyParams::Table { bins, actions } => {
                bins.validate()?;
                if actions.len() != bins.len() {
                    return Err(Error::Dimension {
                        expected: bins.len(),
                        got: actions.len(),
                    });
                }
                actions.iter().try_for_each(check_setpoint)
            }
            PolicyParams::Planner { grid, .. } => {
                if grid.is_empty() {
                    return Err(Error::Config("planner grid is empty".into()));
                }
                Ok(())
            }
        }
    }

    fn emit(&self, p: Setpoint) -> Result<ControlAction> {
        self.bounds()
            .project(&ControlAction::uniform(p[0], p[1], p[2], self.n_crah))
    }

    /// The action for state `s`. `ctx.forecast[0]` is the current
    /// disturbance; planner policies also need `ctx.model`.
    pub fn act(&self, s: &PlantState, ctx: &ActContext) -> Result<ControlAction> {
        let exo = ctx
            .forecast
            .first()
            .ok_or_else(|| Error::Config("policy needs the current disturbance".into()))?;
        match &self.params {
            PolicyParams::Constant { setpoint } => self.emit(*setpoint),
            PolicyParams::Table { bins, actions } => self.emit(actions[bins.index(s, exo)]),
            PolicyParams::Planner { grid, search } => {
                let model = ctx
                    .model
                    .ok_or_else(|| Error::Config(format!("planner `{}` needs a twin", self.id)))?;
                let grid = grid.restrict(&self.bounds())?;
                let pm = TwinPlanning {
                    model,
                    forecast: ctx.forecast,
                    spec: ctx.spec,
                    n_crah: self.n_crah,
                };
                let horizon = ctx.spec.horizon.min(ctx.forecast.len());
                let r = plan(&pm, s, &grid, horizon, ctx.spec.gamma, search, &[BASELINE_SETPOINT])?;
                self.emit(r.first())
            }
        }
    }

    /// Binds a model so the policy can run as a closed-loop [`Controller`].
    /// Planners then assume the current disturbance persists over the horizon.
    pub fn controller<'a>(&'a self, model: Option<&'a dyn TwinModel>, spec: &'a MdpSpec) -> Bound<'a> {
        Bound {
            policy: self,
            model,
            spec,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Policy = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }
}

fn check_setpoint(p: &Setpoint) -> Result<()> {
    if p.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { field: "setpoint" })
    }
}

pub struct Bound<'a> {
    policy: &'a Policy,
    model: Option<&'a dyn TwinModel>,
    spec: &'a MdpSpec,
}

impl Controller for Bound<'_> {
    fn act(&self, s: &PlantState, exo: &ExogenousInput) -> Result<ControlAction> {
        let forecast = vec![*exo; self.spec.horizon.max(1)];
        self.policy.act(
            s,
            &ActContext {
                model: self.model,
                forecast: &forecast,
                spec: self.spec,
            },
        )
    }
}
