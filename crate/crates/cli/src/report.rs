//! Human-readable summaries and plot-ready CSVs from earlier artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dlcf_core::config::DlcfConfig;
use dlcf_core::experiment::ComparisonReport;
use dlcf_core::orchestrator::{read_telemetry, RunSummary, TelemetryRecord};
use dlcf_core::safety::{Interval, CHWS_LIMITS, FAN_LIMITS, SAT_LIMITS};

use crate::CliError;

/// Equal-width bins over `range`; the top edge belongs to the last bin.
#[derive(Debug, Clone, Copy)]
pub struct Bins {
    pub range: Interval,
    pub width: f64,
}

impl Bins {
    pub fn count(&self) -> usize {
        ((self.range.hi - self.range.lo) / self.width).round() as usize
    }

    /// Bin of `v`, or `None` outside the range. Values within 1e-9 of an
    /// edge count as on it.
    pub fn index(&self, v: f64) -> Option<usize> {
        if v < self.range.lo - 1e-9 || v > self.range.hi + 1e-9 {
            return None;
        }
        let i = ((v - self.range.lo) / self.width + 1e-9).floor() as usize;
        Some(i.min(self.count() - 1))
    }

    pub fn histogram(&self, values: impl IntoIterator<Item = f64>) -> Vec<usize> {
        let mut h = vec![0; self.count()];
        for v in values {
            if let Some(i) = self.index(v) {
                h[i] += 1;
            }
        }
        h
    }
}

pub const FAN_BINS: Bins = Bins {
    range: FAN_LIMITS,
    width: 0.05,
};
pub const CHWS_BINS: Bins = Bins {
    range: CHWS_LIMITS,
    width: 0.5,
};
pub const SAT_BINS: Bins = Bins {
    range: SAT_LIMITS,
    width: 1.0,
};

struct Run {
    id: String,
    records: Vec<TelemetryRecord>,
}

/// Telemetry under `input`: its own telemetry.jsonl, then runs/*/ sorted by
/// name.
fn find_runs(input: &Path) -> Result<Vec<Run>, CliError> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    let own = input.join("telemetry.jsonl");
    if own.is_file() {
        let id = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        files.push((id, own));
    }
    let runs = input.join("runs");
    if runs.is_dir() {
        let mut sub: Vec<(String, PathBuf)> = fs::read_dir(&runs)?
            .filter_map(|e| e.ok())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path().join("telemetry.jsonl")))
            .filter(|(_, p)| p.is_file())
            .collect();
        sub.sort();
        files.extend(sub);
    }
    files
        .into_iter()
        .map(|(id, p)| Ok(Run { id, records: read_telemetry(&p)? }))
        .collect()
}

fn action_rows(run: &Run, w: &mut csv::Writer<fs::File>) -> Result<(), CliError> {
    let fans = run.records.iter().flat_map(|r| r.action.crah_fan_ratio.iter().copied());
    let sats = run.records.iter().flat_map(|r| r.action.crah_sat_setpoint.iter().copied());
    let chws = run.records.iter().map(|r| r.action.chw_supply_setpoint);
    for (name, bins, hist) in [
        ("fan_ratio", FAN_BINS, FAN_BINS.histogram(fans)),
        ("crah_sat_c", SAT_BINS, SAT_BINS.histogram(sats)),
        ("chw_supply_c", CHWS_BINS, CHWS_BINS.histogram(chws)),
    ] {
        for (i, n) in hist.iter().enumerate() {
            let lo = bins.range.lo + i as f64 * bins.width;
            w.write_record([
                run.id.clone(),
                name.to_string(),
                format!("{lo:.2}"),
                format!("{:.2}", lo + bins.width),
                n.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn summarize(run: &Run, dt: f64) -> RunSummary {
    RunSummary::from_telemetry(&run.id, &run.records, &[], dt, None)
}

/// Writes summary.txt, action_histogram.csv and power_breakdown.csv to `out`.
pub fn run(cfg: &DlcfConfig, input: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    if !input.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", input.display())));
    }
    let comparison: Option<ComparisonReport> = match fs::read_to_string(input.join("report.json")) {
        Ok(t) => Some(serde_json::from_str(&t)?),
        Err(_) => None,
    };
    let runs = find_runs(input)?;
    if comparison.is_none() && runs.is_empty() {
        return Err(CliError::Usage(format!("no report.json or telemetry under {}", input.display())));
    }
    let dt = cfg.plant.timestep;
    let mut text = String::new();
    if let Some(c) = &comparison {
        let _ = writeln!(text, "Strategy comparison over {} days (seed {})", c.days, c.seed);
        let _ = writeln!(
            text,
            "{:<10} {:>12} {:>9} {:>12} {:>8} {:>8} {:>8}",
            "strategy", "energy kWh", "saving %", "compliance %", "fan", "CHWS C", "SAT C"
        );
        for r in &c.rows {
            let _ = writeln!(
                text,
                "{:<10} {:>12.1} {:>9.2} {:>12.2} {:>8.3} {:>8.2} {:>8.2}",
                r.strategy.as_str(),
                r.energy_kwh,
                r.savings_pct,
                r.compliance_pct,
                r.mean_fan_ratio,
                r.mean_chws_c,
                r.mean_sat_c
            );
        }
        text.push('\n');
    }
    let mut hist = csv::Writer::from_path(out.join("action_histogram.csv")).map_err(csv_err)?;
    hist.write_record(["run", "setpoint", "bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    let mut power = csv::Writer::from_path(out.join("power_breakdown.csv")).map_err(csv_err)?;
    power.write_record(["run", "component", "energy_kwh", "share_pct"]).map_err(csv_err)?;
    for run in &runs {
        let s = summarize(run, dt);
        let _ = writeln!(
            text,
            "Run {}: {} steps, {:.1} kWh, SLA compliance {:.2} %, {} fallbacks",
            s.run_id, s.steps, s.total_energy_kwh, s.compliance_pct, s.fallbacks
        );
        let b = &s.breakdown;
        for (name, kwh) in [
            ("crah_fans", b.crah_fans_kwh),
            ("chw_pumps", b.chw_pumps_kwh),
            ("chillers", b.chillers_kwh),
            ("cond_pumps", b.cond_pumps_kwh),
            ("tower", b.tower_kwh),
        ] {
            let share = if s.total_energy_kwh > 0.0 { kwh / s.total_energy_kwh * 100.0 } else { 0.0 };
            let _ = writeln!(text, "  {name:<10} {kwh:>12.1} kWh {share:>6.2} %");
            power
                .write_record([run.id.clone(), name.into(), kwh.to_string(), share.to_string()])
                .map_err(csv_err)?;
        }
        action_rows(run, &mut hist)?;
    }
    hist.flush()?;
    power.flush()?;
    fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(vec![
        "summary.txt".into(),
        "action_histogram.csv".into(),
        "power_breakdown.csv".into(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_values_land_in_their_own_bin() {
        assert_eq!(FAN_BINS.count(), 14);
        assert_eq!(FAN_BINS.index(0.85), Some(11));
        assert_eq!(FAN_BINS.index(0.3), Some(0));
        assert_eq!(FAN_BINS.index(1.0), Some(13));
        assert_eq!(FAN_BINS.index(1.01), None);
        assert_eq!(CHWS_BINS.index(7.0), Some(2));
        assert_eq!(SAT_BINS.index(22.0), Some(4));
    }

    proptest! {
        #[test]
        fn histogram_counts_every_value_in_range(vs in proptest::collection::vec(0.3f64..=1.0, 0..200)) {
            let h = FAN_BINS.histogram(vs.iter().copied());
            prop_assert_eq!(h.iter().sum::<usize>(), vs.len());
            for v in &vs {
                let i = FAN_BINS.index(*v).unwrap();
                let lo = FAN_BINS.range.lo + i as f64 * FAN_BINS.width;
                prop_assert!(*v >= lo - 1e-9 && *v <= lo + FAN_BINS.width + 1e-9);
            }
        }
    }
}
