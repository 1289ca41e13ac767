//! Scenario configuration: everything a run needs, loadable from JSON.
//! A scenario wires the NIC layout, checkpoint thresholds, the cost model,
//! extraction setup, priority feature toggles, the resource policy and the
//! workload into one deterministic description.

use crate::fastpath::Thresholds;
use crate::resource::PolicyTable;
use crate::time::{Nanos, NANOS_PER_MILLI};
use crate::workload::{WorkloadClass, WorkloadSpec};
use crate::nic::Class;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("workload: {0}")]
    Workload(#[from] crate::workload::WorkloadError),
    #[error("policy: {0}")]
    Policy(#[from] crate::resource::PolicyError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NicConfig {
    #[serde(default = "default_queues")]
    pub queues: usize,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Give each flow group a high/low ring pair fed by a stateless
    /// header classifier at arrival time.
    #[serde(default)]
    pub priority_queues: bool,
}

fn default_queues() -> usize {
    4
}

fn default_capacity() -> usize {
    4096
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            queues: 4,
            capacity: 4096,
            priority_queues: false,
        }
    }
}

/// Per-operation virtual-time charges. The NIC burst and checkpoint costs
/// live in `nic` and `Thresholds`; these cover the rest of the pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default = "d_tcp_packet")]
    pub tcp_per_packet_ns: Nanos,
    #[serde(default = "d_tx_packet")]
    pub tx_per_packet_ns: Nanos,
    #[serde(default = "d_extraction")]
    pub driver_extraction_ns: Nanos,
    #[serde(default = "d_extraction")]
    pub tcp_extraction_ns: Nanos,
    #[serde(default = "d_api_poll")]
    pub api_poll_ns: Nanos,
    #[serde(default = "d_api_recv")]
    pub api_recv_ns: Nanos,
    #[serde(default = "d_api_send")]
    pub api_send_ns: Nanos,
    #[serde(default = "d_switch")]
    pub switch_ns: Nanos,
    /// Protocol timer sweep per stack round; retransmission itself is out
    /// of scope so this is a cost hook only.
    #[serde(default)]
    pub tcp_timer_check_ns: Nanos,
}

fn d_tcp_packet() -> Nanos {
    300
}
fn d_tx_packet() -> Nanos {
    30
}
fn d_extraction() -> Nanos {
    100
}
fn d_api_poll() -> Nanos {
    25
}
fn d_api_recv() -> Nanos {
    40
}
fn d_api_send() -> Nanos {
    40
}
fn d_switch() -> Nanos {
    100
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            tcp_per_packet_ns: 300,
            tx_per_packet_ns: 30,
            driver_extraction_ns: 100,
            tcp_extraction_ns: 100,
            api_poll_ns: 25,
            api_recv_ns: 40,
            api_send_ns: 40,
            switch_ns: 100,
            tcp_timer_check_ns: 0,
        }
    }
}

/// Which layers run extraction callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionSetup {
    #[default]
    None,
    Driver,
    Tcp,
    Both,
}

/// Independent priority feature toggles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorityFeatures {
    /// Priority event queues and priority-aware dispatch.
    #[serde(default)]
    pub event_queues: bool,
    /// Out-of-order receive path for fully high-labeled messages.
    #[serde(default)]
    pub ooo_receive: bool,
    /// Priority-split driver buffers.
    #[serde(default)]
    pub driver_queues: bool,
    /// Class-filtered flow bindings (high and low events of one flow may go
    /// to different consumers).
    #[serde(default)]
    pub class_routing: bool,
}

impl Default for PriorityFeatures {
    fn default() -> Self {
        PriorityFeatures {
            event_queues: false,
            ooo_receive: false,
            driver_queues: false,
            class_routing: false,
        }
    }
}

/// Static coroutine placement for runs without the resource manager.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub k: usize,
    pub m: usize,
    #[serde(default)]
    pub stack_cores: Option<Vec<usize>>,
    #[serde(default)]
    pub app_cores: Option<Vec<usize>>,
}

/// Scenario-wide class-to-consumer default bindings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassBindings {
    pub high: usize,
    pub low: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub table: PolicyTable,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            enabled: false,
            table: PolicyTable::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_ns: Nanos,
    #[serde(default = "default_cores")]
    pub cores: usize,
    #[serde(default)]
    pub nic: NicConfig,
    #[serde(default = "default_groups")]
    pub rss_groups: u32,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub extraction: ExtractionSetup,
    #[serde(default)]
    pub priority: PriorityFeatures,
    /// Checkpoint spacing inside application service segments; 0 disables
    /// intra-segment checkpoints (API-call checkpoints remain).
    #[serde(default = "default_checkpoint")]
    pub checkpoint_interval_ns: Nanos,
    #[serde(default = "default_period")]
    pub statistic_period_ns: Nanos,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub initial_plan: Option<PlanConfig>,
    #[serde(default)]
    pub class_bindings: Option<ClassBindings>,
    pub workload: WorkloadSpec,
    #[serde(default = "default_mss")]
    pub mss: u32,
}

fn default_seed() -> u64 {
    1
}
fn default_cores() -> usize {
    8
}
fn default_groups() -> u32 {
    4
}
fn default_checkpoint() -> Nanos {
    10_000
}
fn default_period() -> Nanos {
    20 * NANOS_PER_MILLI
}
fn default_mss() -> u32 {
    1460
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.cores == 0 {
            return Err(ScenarioError::Invalid("need at least one core".into()));
        }
        if self.nic.queues == 0 || self.nic.capacity == 0 {
            return Err(ScenarioError::Invalid("nic needs queues and capacity".into()));
        }
        if self.rss_groups == 0 {
            return Err(ScenarioError::Invalid("need at least one flow group".into()));
        }
        if self.statistic_period_ns == 0 {
            return Err(ScenarioError::Invalid("statistic period must be positive".into()));
        }
        if self.mss < crate::nic::MSG_HEADER_LEN {
            return Err(ScenarioError::Invalid("mss too small for the header".into()));
        }
        self.thresholds
            .validate()
            .map_err(ScenarioError::Invalid)?;
        self.workload.validate()?;
        self.policy.table.validate()?;
        if let Some(plan) = &self.initial_plan {
            if plan.k == 0 || plan.m == 0 {
                return Err(ScenarioError::Invalid("initial plan needs k >= 1, m >= 1".into()));
            }
            if let Some(sc) = &plan.stack_cores {
                if sc.len() != plan.k || sc.iter().any(|&c| c >= self.cores) {
                    return Err(ScenarioError::Invalid("bad stack core placement".into()));
                }
            }
            if let Some(ac) = &plan.app_cores {
                if ac.len() != plan.m || ac.iter().any(|&c| c >= self.cores) {
                    return Err(ScenarioError::Invalid("bad app core placement".into()));
                }
            }
            if let Some(b) = &self.class_bindings {
                if b.high >= plan.m || b.low >= plan.m {
                    return Err(ScenarioError::Invalid("class binding to unknown consumer".into()));
                }
            }
        }
        Ok(())
    }

    /// Small single-shared-core scenario used as a base by tests.
    pub fn single_core(name: &str) -> Scenario {
        Scenario {
            name: name.to_string(),
            seed: 1,
            duration_ns: 10 * NANOS_PER_MILLI,
            cores: 1,
            nic: NicConfig {
                queues: 1,
                capacity: 4096,
                priority_queues: false,
            },
            rss_groups: 1,
            thresholds: Thresholds::default(),
            costs: CostModel::default(),
            extraction: ExtractionSetup::None,
            priority: PriorityFeatures::default(),
            checkpoint_interval_ns: 10_000,
            statistic_period_ns: 20 * NANOS_PER_MILLI,
            policy: PolicyConfig::default(),
            initial_plan: Some(PlanConfig {
                k: 1,
                m: 1,
                stack_cores: None,
                app_cores: None,
            }),
            class_bindings: None,
            workload: WorkloadSpec {
                connections: 4,
                classes: vec![WorkloadClass {
                    fraction: 1.0,
                    service_ns: 1_000,
                    priority: Class::Low,
                    request_bytes: 64,
                }],
                rate_rps: 1_000,
                burst: None,
                compress_factor: None,
                duration_ns: 10 * NANOS_PER_MILLI,
                phases: None,
                response_bytes: 128,
            },
            mss: 1460,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip() {
        let sc = Scenario::single_core("roundtrip");
        let json = sc.to_json();
        let back = Scenario::from_json(&json).unwrap();
        assert_eq!(back.name, "roundtrip");
        assert_eq!(back.duration_ns, sc.duration_ns);
        assert_eq!(back.workload.rate_rps, 1_000);
    }

    #[test]
    fn validation_rejects_nonsense() {
        let mut sc = Scenario::single_core("bad");
        sc.cores = 0;
        assert!(sc.validate().is_err());

        let mut sc = Scenario::single_core("bad2");
        sc.workload.classes[0].fraction = 0.5;
        assert!(sc.validate().is_err());

        let mut sc = Scenario::single_core("bad3");
        sc.initial_plan = Some(PlanConfig {
            k: 1,
            m: 1,
            stack_cores: Some(vec![3]),
            app_cores: None,
        });
        assert!(sc.validate().is_err());
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let json = r#"{
            "name": "minimal",
            "duration_ns": 1000000,
            "workload": {
                "connections": 2,
                "classes": [{"fraction": 1.0, "service_ns": 1000, "priority": "low", "request_bytes": 64}],
                "rate_rps": 100,
                "duration_ns": 1000000
            }
        }"#;
        let sc = Scenario::from_json(json).unwrap();
        assert_eq!(sc.cores, 8);
        assert_eq!(sc.nic.capacity, 4096);
        assert_eq!(sc.thresholds.check_cost_ns, 22);
    }
}
