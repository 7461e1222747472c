//! Resource samples, the scalar availability score, and the mapping between
//! samples and rows of the `_MONITOR` table.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::sql::{ColumnDef, ColumnType, Value};
use crate::storage::TableSchema;
use crate::wire::Address;

pub const MONITOR_TABLE: &str = "_MONITOR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub instance: Address,
    pub cpu_idle: f64,
    pub mem_free_bytes: u64,
    pub mem_total_bytes: u64,
    pub disk_free_bytes: u64,
    pub disk_total_bytes: u64,
    pub ts: u64,
}

impl ResourceSample {
    /// A sample reporting every resource as fully available.
    pub fn idle(instance: Address, ts: u64) -> Self {
        const GIB: u64 = 1 << 30;
        ResourceSample {
            instance,
            cpu_idle: 1.0,
            mem_free_bytes: GIB,
            mem_total_bytes: GIB,
            disk_free_bytes: 16 * GIB,
            disk_total_bytes: 16 * GIB,
            ts,
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(0.0..=1.0).contains(&self.cpu_idle) {
            return Err(MonitorError::Validation(format!("cpu_idle {} outside [0,1]", self.cpu_idle)));
        }
        if self.mem_total_bytes == 0 || self.disk_total_bytes == 0 {
            return Err(MonitorError::Validation("resource totals must be positive".into()));
        }
        if self.mem_free_bytes > self.mem_total_bytes || self.disk_free_bytes > self.disk_total_bytes {
            return Err(MonitorError::Validation("free exceeds total".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    #[serde(rename = "cpu")]
    pub cpu: f64,
    #[serde(rename = "mem")]
    pub mem: f64,
    #[serde(rename = "disk")]
    pub disk: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { cpu: 0.5, mem: 0.25, disk: 0.25 }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let parts = [self.cpu, self.mem, self.disk];
        if parts.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(MonitorError::Validation("weights must be in [0,1]".into()));
        }
        let sum: f64 = parts.iter().sum();
        if !(sum > 1.0 - 1e-9 && sum < 1.0 + 1e-9) {
            return Err(MonitorError::Validation(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Availability in `[0, 1]`; higher means more spare capacity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AvailabilityScore(pub f64);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MonitorError {
    #[error("validation error: {0}")]
    Validation(String),
}

pub fn score(sample: &ResourceSample, w: &Weights) -> Result<AvailabilityScore, MonitorError> {
    sample.validate()?;
    w.validate()?;
    let mem = sample.mem_free_bytes as f64 / sample.mem_total_bytes as f64;
    let disk = sample.disk_free_bytes as f64 / sample.disk_total_bytes as f64;
    let v = w.cpu * sample.cpu_idle + w.mem * mem + w.disk * disk;
    Ok(AvailabilityScore(v.clamp(0.0, 1.0)))
}

pub fn monitor_schema() -> TableSchema {
    let col = |name: &str, ty| ColumnDef { name: name.into(), ty };
    TableSchema {
        name: MONITOR_TABLE.into(),
        columns: alloc::vec![
            col("instance", ColumnType::Text),
            col("cpu_idle_milli", ColumnType::Int),
            col("mem_free", ColumnType::Int),
            col("mem_total", ColumnType::Int),
            col("disk_free", ColumnType::Int),
            col("disk_total", ColumnType::Int),
            col("ts", ColumnType::Int),
        ],
    }
}

pub fn create_monitor_sql() -> String {
    String::from(
        "CREATE TABLE _MONITOR (instance TEXT, cpu_idle_milli INT, mem_free INT, mem_total INT, disk_free INT, disk_total INT, ts INT)",
    )
}

fn clamp_i64(v: u64) -> i64 {
    i64::try_from(v).unwrap_or(i64::MAX)
}

/// The delete-then-insert pair that upserts an instance's row.
pub fn publish_statements(sample: &ResourceSample) -> [String; 2] {
    let instance = Value::Text(String::from(sample.instance.as_str()));
    let milli = (sample.cpu_idle.clamp(0.0, 1.0) * 1000.0 + 0.5) as i64;
    [
        format!("DELETE FROM {MONITOR_TABLE} WHERE {MONITOR_TABLE}.instance = {instance}"),
        format!(
            "INSERT INTO {MONITOR_TABLE} VALUES ({instance}, {milli}, {}, {}, {}, {}, {})",
            clamp_i64(sample.mem_free_bytes),
            clamp_i64(sample.mem_total_bytes),
            clamp_i64(sample.disk_free_bytes),
            clamp_i64(sample.disk_total_bytes),
            clamp_i64(sample.ts),
        ),
    ]
}

/// Decodes a `_MONITOR` row (columns in schema order).
pub fn sample_from_row(values: &[Value]) -> Option<ResourceSample> {
    let int = |i: usize| match values.get(i) {
        Some(Value::Int(n)) if *n >= 0 => Some(*n as u64),
        _ => None,
    };
    let instance = match values.first() {
        Some(Value::Text(s)) if !s.is_empty() => Address::new(s.clone()),
        _ => return None,
    };
    Some(ResourceSample {
        instance,
        cpu_idle: int(1)? as f64 / 1000.0,
        mem_free_bytes: int(2)?,
        mem_total_bytes: int(3)?,
        disk_free_bytes: int(4)?,
        disk_total_bytes: int(5)?,
        ts: int(6)?,
    })
}

/// Scores from the latest `_MONITOR` rows. Rows older than `staleness_ms`
/// or failing validation score 0.
pub fn scores_from_rows<'a>(
    rows: impl IntoIterator<Item = &'a [Value]>,
    now: u64,
    staleness_ms: u64,
    w: &Weights,
) -> BTreeMap<Address, AvailabilityScore> {
    let mut out = BTreeMap::new();
    for values in rows {
        let Some(sample) = sample_from_row(values) else { continue };
        let fresh = now.saturating_sub(sample.ts) <= staleness_ms;
        let s = if fresh { score(&sample, w).unwrap_or(AvailabilityScore(0.0)) } else { AvailabilityScore(0.0) };
        out.insert(sample.instance, s);
    }
    out
}

/// Highest score, ties broken by the smallest address.
pub fn argmax(scores: &BTreeMap<Address, AvailabilityScore>) -> Option<&Address> {
    let mut best: Option<(&Address, f64)> = None;
    for (a, s) in scores {
        if best.is_none_or(|(_, b)| s.0 > b) {
            best = Some((a, s.0));
        }
    }
    best.map(|(a, _)| a)
}

/// Instances ranked by descending score, then address.
pub fn ranked(scores: &BTreeMap<Address, AvailabilityScore>) -> Vec<Address> {
    let mut v: Vec<(&Address, f64)> = scores.iter().map(|(a, s)| (a, s.0)).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(a, _)| a.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(cpu: f64, mem: (u64, u64), disk: (u64, u64)) -> ResourceSample {
        ResourceSample {
            instance: "n1".into(),
            cpu_idle: cpu,
            mem_free_bytes: mem.0,
            mem_total_bytes: mem.1,
            disk_free_bytes: disk.0,
            disk_total_bytes: disk.1,
            ts: 0,
        }
    }

    #[test]
    fn extremes_and_worked_example() {
        let w = Weights::default();
        assert_eq!(score(&sample(1.0, (8, 8), (3, 3)), &w).unwrap().0, 1.0);
        assert_eq!(score(&sample(0.0, (0, 8), (0, 3)), &w).unwrap().0, 0.0);
        let s = score(&sample(0.4, (8, 10), (2, 10)), &w).unwrap().0;
        assert!((s - 0.45).abs() < 1e-12, "{s}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let w = Weights::default();
        assert!(score(&sample(1.5, (1, 1), (1, 1)), &w).is_err());
        assert!(score(&sample(0.5, (2, 1), (1, 1)), &w).is_err());
        assert!(score(&sample(0.5, (0, 0), (1, 1)), &w).is_err());
        let bad = Weights { cpu: 0.5, mem: 0.5, disk: 0.5 };
        assert!(score(&sample(0.5, (1, 1), (1, 1)), &bad).is_err());
    }

    #[test]
    fn rows_round_trip_through_statements() {
        let s = ResourceSample { ts: 1234, ..sample(0.4, (800, 1000), (20, 100)) };
        let [del, ins] = publish_statements(&s);
        assert_eq!(del, "DELETE FROM _MONITOR WHERE _MONITOR.instance = 'n1'");
        assert_eq!(ins, "INSERT INTO _MONITOR VALUES ('n1', 400, 800, 1000, 20, 100, 1234)");
        let crate::sql::Statement::Insert { values, .. } = crate::sql::parse(&ins).unwrap() else { panic!() };
        assert_eq!(sample_from_row(&values).unwrap(), s);
        let crate::sql::Statement::CreateTable { columns, .. } = crate::sql::parse(&create_monitor_sql()).unwrap() else {
            panic!()
        };
        assert_eq!(columns, monitor_schema().columns);
    }

    #[test]
    fn stale_rows_score_zero() {
        let w = Weights::default();
        let row = |name: &str, ts: i64| {
            alloc::vec![
                Value::Text(name.into()),
                Value::Int(1000),
                Value::Int(1),
                Value::Int(1),
                Value::Int(1),
                Value::Int(1),
                Value::Int(ts),
            ]
        };
        assert!(scores_from_rows(core::iter::empty::<&[Value]>(), 0, 10, &w).is_empty());
        let rows = [row("a", 95), row("b", 10)];
        let got = scores_from_rows(rows.iter().map(|r| r.as_slice()), 100, 15, &w);
        assert_eq!(got[&Address::new("a")].0, 1.0);
        assert_eq!(got[&Address::new("b")].0, 0.0);
    }

    fn milli_sample() -> impl Strategy<Value = ResourceSample> {
        (0u64..=1000, 0u64..=1000, 0u64..=1000).prop_map(|(c, m, d)| sample(c as f64 / 1000.0, (m, 1000), (d, 1000)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn score_in_unit_range_and_monotone(s in milli_sample(), bump in 1u64..=1000, which in 0usize..3) {
            let w = Weights::default();
            let base = score(&s, &w).unwrap().0;
            prop_assert!((0.0..=1.0).contains(&base));
            let mut up = s.clone();
            match which {
                0 => up.cpu_idle = (up.cpu_idle + bump as f64 / 1000.0).min(1.0),
                1 => up.mem_free_bytes = (up.mem_free_bytes + bump).min(up.mem_total_bytes),
                _ => up.disk_free_bytes = (up.disk_free_bytes + bump).min(up.disk_total_bytes),
            }
            prop_assert!(score(&up, &w).unwrap().0 >= base);
        }

        #[test]
        fn argmax_ignores_positive_scaling(samples in proptest::collection::vec(milli_sample(), 1..8), c in 0.001f64..1000.0) {
            let w = Weights::default();
            let scores: BTreeMap<Address, AvailabilityScore> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| (Address::new(format!("n{i}")), score(s, &w).unwrap()))
                .collect();
            let scaled: BTreeMap<Address, AvailabilityScore> =
                scores.iter().map(|(a, s)| (a.clone(), AvailabilityScore(s.0 * c))).collect();
            prop_assert_eq!(argmax(&scores), argmax(&scaled));
            let best = scores[argmax(&scores).unwrap()].0;
            let ties: Vec<_> = scores.iter().filter(|(_, s)| s.0 == best).map(|(a, _)| a).collect();
            let best_scaled = scaled[argmax(&scaled).unwrap()].0;
            let ties_scaled: Vec<_> = scaled.iter().filter(|(_, s)| s.0 == best_scaled).map(|(a, _)| a).collect();
            prop_assert_eq!(ties, ties_scaled);
        }
    }
}
