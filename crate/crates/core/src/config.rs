//! Cluster configuration. Every key is optional in the JSON form.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::monitor::Weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub publish_interval_ms: u64,
    pub staleness_ms: u64,
    pub weights: Weights,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { publish_interval_ms: 5000, staleness_ms: 15000, weights: Weights::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub seed: u64,
    pub default_rf: u32,
    pub m: u32,
    pub s: usize,
    pub lock_wait_ms: u64,
    pub prepare_timeout_ms: u64,
    pub ping_interval_ms: u64,
    pub ping_timeout_count: u32,
    pub rpc_timeout_ms: u64,
    pub repair_interval_ms: u64,
    pub monitor: MonitorConfig,
    pub alpha: f64,
    pub latency_range: [u64; 2],
    pub max_retries: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            seed: 0,
            default_rf: 2,
            m: crate::overlay::DEFAULT_ID_BITS,
            s: 2,
            lock_wait_ms: 2000,
            prepare_timeout_ms: 1000,
            ping_interval_ms: 500,
            ping_timeout_count: 3,
            rpc_timeout_ms: 1000,
            repair_interval_ms: 1000,
            monitor: MonitorConfig::default(),
            alpha: crate::exec::DEFAULT_ALPHA,
            latency_range: [1, 5],
            max_retries: 2,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), String> {
        let timeouts = [
            ("lock_wait_ms", self.lock_wait_ms),
            ("prepare_timeout_ms", self.prepare_timeout_ms),
            ("ping_interval_ms", self.ping_interval_ms),
            ("rpc_timeout_ms", self.rpc_timeout_ms),
            ("repair_interval_ms", self.repair_interval_ms),
            ("monitor.publish_interval_ms", self.monitor.publish_interval_ms),
            ("monitor.staleness_ms", self.monitor.staleness_ms),
        ];
        if let Some((k, _)) = timeouts.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be positive"));
        }
        if self.ping_timeout_count == 0 {
            return Err("ping_timeout_count must be positive".into());
        }
        if self.default_rf == 0 {
            return Err("default_rf must be at least 1".into());
        }
        if self.m == 0 || self.m > 64 {
            return Err("m must be in 1..=64".into());
        }
        if self.s == 0 {
            return Err("s must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err("alpha must be in [0,1]".into());
        }
        if self.latency_range[0] > self.latency_range[1] {
            return Err("latency_range min exceeds max".into());
        }
        self.monitor.weights.validate().map_err(|e| format!("{e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: ClusterConfig =
            serde_json::from_str(r#"{"seed":7,"monitor":{"weights":{"cpu":1.0,"mem":0.0,"disk":0.0}}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lock_wait_ms, 2000);
        assert_eq!(c.monitor.publish_interval_ms, 5000);
        assert_eq!(c.monitor.weights.cpu, 1.0);
        c.validate().unwrap();
        assert!(serde_json::from_str::<ClusterConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let c = ClusterConfig { lock_wait_ms: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ClusterConfig { default_rf: 0, ..Default::default() };
        assert!(c.validate().is_err());
        ClusterConfig::default().validate().unwrap();
    }
}
