//! The policy reservoir: a persisted, metadata-annotated policy collection.
//!
//! On disk a reservoir is a directory holding `reservoir.json` (the record
//! index) and `policies/<id>.json` (one blob per policy). Every mutation
//! rewrites the index through a temporary file and a rename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{Policy, PolicyKind};
use crate::error::{Error, Result};
use crate::safety::Scope;

pub const RESERVOIR_VERSION: u32 = 1;

/// IT-load band `[lo, hi)` in kW plus free-form tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub load_band_kw: [f64; 2],
    #[serde(default)]
    pub tags: Vec<String>,
}

impl Default for Conditions {
    fn default() -> Self {
        Self {
            load_band_kw: [0.0, 1.0e6],
            tags: Vec::new(),
        }
    }
}

impl Conditions {
    pub fn covers(&self, load_kw: f64) -> bool {
        (self.load_band_kw[0]..self.load_band_kw[1]).contains(&load_kw)
    }
}

/// Historical performance as a running mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub mean_return: f64,
    pub compliance_pct: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub id: String,
    pub kind: PolicyKind,
    pub scope: Scope,
    pub conditions: Conditions,
    pub objectives: Vec<String>,
    pub perf: Performance,
    pub policy_blob_ref: String,
}

impl PolicyRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("record id must be nonempty".into()));
        }
        let [lo, hi] = self.conditions.load_band_kw;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("load band [{lo}, {hi}) is empty")));
        }
        crate::error::ensure_range("compliance_pct", self.perf.compliance_pct, 0.0, 100.0)?;
        crate::error::ensure_finite("mean_return", self.perf.mean_return)
    }
}

/// Metadata supplied at registration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub conditions: Conditions,
    pub objectives: Vec<String>,
    pub perf: Performance,
}

/// Filters for [`Reservoir::query`]; `None` matches everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    pub load_kw: Option<f64>,
    pub scope: Option<Scope>,
    pub kinds: Option<Vec<PolicyKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    records: Vec<PolicyRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct Reservoir {
    dir: Option<PathBuf>,
    records: BTreeMap<String, PolicyRecord>,
    policies: BTreeMap<String, Policy>,
}

impl Reservoir {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the reservoir at `dir`, creating an empty one if absent.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index_path = dir.join("reservoir.json");
        let mut r = Self {
            dir: Some(dir.clone()),
            ..Self::default()
        };
        if !index_path.exists() {
            std::fs::create_dir_all(dir.join("policies")).map_err(|e| Error::io(&dir, e))?;
            r.persist()?;
            return Ok(r);
        }
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Index = serde_json::from_str(&text)?;
        if index.version != RESERVOIR_VERSION {
            return Err(Error::Config(format!(
                "reservoir version {} is not supported",
                index.version
            )));
        }
        for rec in index.records {
            rec.validate()?;
            let policy = Policy::load(dir.join(&rec.policy_blob_ref))?;
            if policy.id != rec.id {
                return Err(Error::Config(format!(
                    "blob {} holds policy `{}`, not `{}`",
                    rec.policy_blob_ref, policy.id, rec.id
                )));
            }
            r.policies.insert(rec.id.clone(), policy);
            r.records.insert(rec.id.clone(), rec);
        }
        Ok(r)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds `policy` under its own id.
    pub fn register(&mut self, policy: Policy, meta: RecordMeta) -> Result<String> {
        policy.validate()?;
        let id = policy.id.clone();
        if self.records.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Config(format!("policy id `{id}` is not a valid file name")));
        }
        let rec = PolicyRecord {
            id: id.clone(),
            kind: policy.kind,
            scope: policy.scope,
            conditions: meta.conditions,
            objectives: meta.objectives,
            perf: meta.perf,
            policy_blob_ref: format!("policies/{id}.json"),
        };
        rec.validate()?;
        if let Some(dir) = &self.dir {
            let blobs = dir.join("policies");
            std::fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
            policy.save(dir.join(&rec.policy_blob_ref))?;
        }
        self.records.insert(id.clone(), rec);
        self.policies.insert(id.clone(), policy);
        if let Err(e) = self.persist() {
            self.records.remove(&id);
            self.policies.remove(&id);
            return Err(e);
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&PolicyRecord> {
        self.records.get(id)
    }

    pub fn policy(&self, id: &str) -> Option<&Policy> {
        self.policies.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PolicyRecord> {
        self.records.values()
    }

    /// Records matching every filter, best historical mean return first;
    /// ties by id.
    pub fn query(&self, q: &Query) -> Vec<&PolicyRecord> {
        let mut out: Vec<&PolicyRecord> = self
            .records
            .values()
            .filter(|r| q.load_kw.is_none_or(|l| r.conditions.covers(l)))
            .filter(|r| q.scope.is_none_or(|s| r.scope == s))
            .filter(|r| q.kinds.as_ref().is_none_or(|k| k.contains(&r.kind)))
            .collect();
        out.sort_by(|a, b| {
            b.perf
                .mean_return
                .total_cmp(&a.perf.mean_return)
                .then_with(|| a.id.cmp(&b.id))
        });
        out
    }

    /// Folds one outcome into the running means.
    pub fn record_performance(&mut self, id: &str, ret: f64, compliance_pct: f64) -> Result<PolicyRecord> {
        crate::error::ensure_finite("return", ret)?;
        crate::error::ensure_range("compliance_pct", compliance_pct, 0.0, 100.0)?;
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| Error::UnknownId(id.into()))?;
        let old = rec.perf;
        let n = old.n + 1;
        rec.perf = Performance {
            mean_return: old.mean_return + (ret - old.mean_return) / n as f64,
            compliance_pct: (old.compliance_pct + (compliance_pct - old.compliance_pct) / n as f64)
                .clamp(0.0, 100.0),
            n,
        };
        let updated = rec.clone();
        if let Err(e) = self.persist() {
            if let Some(r) = self.records.get_mut(id) {
                r.perf = old;
            }
            return Err(e);
        }
        Ok(updated)
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let index = Index {
            version: RESERVOIR_VERSION,
            records: self.records.values().cloned().collect(),
        };
        let path = dir.join("reservoir.json");
        let tmp = dir.join("reservoir.json.tmp");
        let json = serde_json::to_string_pretty(&index)?;
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// The id with the largest evaluated return; ties go to the smallest id.
pub fn best_of<'a, I>(evaluations: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut best: Option<(&str, f64)> = None;
    for (id, r) in evaluations {
        if r.is_nan() {
            return Err(Error::NonFinite { field: "return" });
        }
        best = match best {
            Some((bid, br)) if br > r || (br == r && bid <= id) => Some((bid, br)),
            _ => Some((id, r)),
        };
    }
    best.map(|(id, _)| id.to_string())
        .ok_or_else(|| Error::Config("best_of needs at least one evaluation".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{baseline_policy, planner_policy, SearchMode};
    use proptest::prelude::*;

    fn policy(id: &str, scope: Scope) -> Policy {
        let mut p = planner_policy(id, scope, 8, SearchMode::Hold);
        p.id = id.into();
        p
    }

    fn meta(ret: f64) -> RecordMeta {
        RecordMeta {
            perf: Performance {
                mean_return: ret,
                compliance_pct: 100.0,
                n: 1,
            },
            objectives: vec!["energy".into()],
            ..RecordMeta::default()
        }
    }

    #[test]
    fn best_of_examples() {
        assert_eq!(best_of([("p1", 2.0), ("p2", 3.5), ("p3", 1.1)]).unwrap(), "p2");
        assert_eq!(best_of([("p2", 2.0), ("p1", 2.0)]).unwrap(), "p1");
        assert_eq!(best_of([("p9", -4.0)]).unwrap(), "p9");
        assert!(best_of(std::iter::empty()).is_err());
    }

    #[test]
    fn register_and_fetch() {
        let mut r = Reservoir::in_memory();
        assert!(r.query(&Query::default()).is_empty());
        let a = r.register(baseline_policy(8), meta(-40.0)).unwrap();
        let b = r.register(policy("crah", Scope::CrahOnly), meta(-35.0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(r.get("baseline").unwrap().kind, PolicyKind::Baseline);
        assert_eq!(r.policy("crah").unwrap().scope, Scope::CrahOnly);
        assert!(matches!(
            r.register(baseline_policy(8), meta(0.0)),
            Err(Error::DuplicateId(_))
        ));
        let mut bad = meta(0.0);
        bad.perf.compliance_pct = 101.0;
        assert!(r.register(policy("x", Scope::CrahOnly), bad).is_err());
        assert!(r.get("x").is_none());
    }

    #[test]
    fn query_filters_and_orders() {
        let mut r = Reservoir::in_memory();
        r.register(policy("a", Scope::CrahOnly), meta(2.0)).unwrap();
        r.register(policy("b", Scope::CrahOnly), meta(3.5)).unwrap();
        r.register(policy("c", Scope::CrahChw), meta(9.0)).unwrap();
        let mut narrow = meta(1.0);
        narrow.conditions.load_band_kw = [400.0, 500.0];
        r.register(policy("d", Scope::CrahOnly), narrow).unwrap();
        let ids = |q: &Query| r.query(q).iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&Query::default()), ["c", "b", "a", "d"]);
        let crah = Query {
            scope: Some(Scope::CrahOnly),
            ..Query::default()
        };
        assert_eq!(ids(&crah), ["b", "a", "d"]);
        let busy = Query {
            load_kw: Some(550.0),
            ..crah.clone()
        };
        assert_eq!(ids(&busy), ["b", "a"]);
        let kinds = Query {
            kinds: Some(vec![PolicyKind::Baseline]),
            ..Query::default()
        };
        assert!(ids(&kinds).is_empty());
    }

    #[test]
    fn running_mean() {
        let mut r = Reservoir::in_memory();
        r.register(policy("p", Scope::CrahOnly), RecordMeta::default()).unwrap();
        let u = r.record_performance("p", 5.0, 100.0).unwrap();
        assert_eq!((u.perf.mean_return, u.perf.n), (5.0, 1));
        let mut r2 = Reservoir::in_memory();
        r2.register(policy("p", Scope::CrahOnly), meta(4.0)).unwrap();
        let u = r2.record_performance("p", 6.0, 0.0).unwrap();
        assert_eq!((u.perf.mean_return, u.perf.n, u.perf.compliance_pct), (5.0, 2, 50.0));
        assert!(matches!(r2.record_performance("nope", 1.0, 100.0), Err(Error::UnknownId(_))));
    }

    #[test]
    fn survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Reservoir::open(dir.path()).unwrap();
        r.register(baseline_policy(8), meta(-40.0)).unwrap();
        r.register(policy("joint", Scope::CrahChw), meta(-30.25)).unwrap();
        r.record_performance("joint", -31.0, 100.0).unwrap();
        let again = Reservoir::open(dir.path()).unwrap();
        assert_eq!(again.records, r.records);
        assert_eq!(again.policies, r.policies);
        assert!(dir.path().join("policies/joint.json").exists());
        assert!(!dir.path().join("reservoir.json.tmp").exists());
    }

    proptest! {
        #[test]
        fn best_of_attains_the_maximum(vals in prop::collection::vec(-1e6..1e6f64, 1..30)) {
            let ids: Vec<String> = (0..vals.len()).map(|i| format!("p{i:02}")).collect();
            let best = best_of(ids.iter().map(|s| s.as_str()).zip(vals.iter().copied())).unwrap();
            let i = ids.iter().position(|s| *s == best).unwrap();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(vals[i], max);
            prop_assert!(vals.iter().zip(&ids).all(|(v, id)| *v < max || *id >= best));
        }
    }
}
