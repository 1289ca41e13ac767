//! Resource manager: per-period load measurement and the plan decision.
//! The manager runs off to the side (it is not charged to worker cores),
//! observes completed statistic periods only, and produces a `ResourcePlan`
//! that the engine applies between batches: core roles, the number of live
//! stack (K) and app (M) coroutines, their core placement, and the flow
//! group to stack mapping.

use crate::engine::{CoreId, CoreRole};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy table is empty")]
    Empty,
    #[error("policy rows must be sorted by load_pct_max and end at >= 100")]
    NotMonotone,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRow {
    pub load_pct_max: f64,
    pub k: usize,
    pub m: usize,
}

/// Step policy keyed on measured load percent. The default encodes the
/// scale-out ladder used by the elastic experiments: one shared core at
/// trickle load up to 3 stacks + 6 apps at three-quarter load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyTable {
    pub reference_rps: u64,
    pub rows: Vec<PolicyRow>,
    #[serde(default = "default_app_per_core")]
    pub app_per_core: usize,
    #[serde(default = "default_overload_busy_pct")]
    pub overload_busy_pct: f64,
}

fn default_app_per_core() -> usize {
    2
}

fn default_overload_busy_pct() -> f64 {
    90.0
}

impl Default for PolicyTable {
    fn default() -> Self {
        PolicyTable {
            reference_rps: 200_000,
            rows: vec![
                PolicyRow { load_pct_max: 12.0, k: 1, m: 1 },
                PolicyRow { load_pct_max: 25.0, k: 1, m: 2 },
                PolicyRow { load_pct_max: 45.0, k: 2, m: 4 },
                PolicyRow { load_pct_max: 75.0, k: 3, m: 6 },
                PolicyRow { load_pct_max: 90.0, k: 4, m: 7 },
                PolicyRow { load_pct_max: 100.0, k: 4, m: 8 },
            ],
            app_per_core: 2,
            overload_busy_pct: 90.0,
        }
    }
}

impl PolicyTable {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.rows.is_empty() {
            return Err(PolicyError::Empty);
        }
        let mut prev = f64::NEG_INFINITY;
        for row in &self.rows {
            if row.load_pct_max <= prev {
                return Err(PolicyError::NotMonotone);
            }
            if row.k == 0 {
                return Err(PolicyError::Invalid("k must stay >= 1".into()));
            }
            if row.m == 0 {
                return Err(PolicyError::Invalid("m must stay >= 1".into()));
            }
            prev = row.load_pct_max;
        }
        if self.rows.last().unwrap().load_pct_max < 100.0 {
            return Err(PolicyError::NotMonotone);
        }
        Ok(())
    }

    pub fn row_for(&self, load_pct: f64) -> &PolicyRow {
        self.rows
            .iter()
            .find(|r| load_pct <= r.load_pct_max)
            .unwrap_or_else(|| self.rows.last().unwrap())
    }
}

/// Observations for one core over a completed period.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoreObs {
    pub busy_pct: f64,
    pub event_backlog: u64,
    pub overloaded: bool,
}

/// One completed statistic period, summarized.
#[derive(Debug, Clone)]
pub struct LoadSummary {
    pub load_pct: f64,
    pub arrivals: u64,
    pub per_core: Vec<CoreObs>,
}

/// Compute the load summary from raw period counters. `load_pct` is offered
/// request rate over the configured reference capacity.
pub fn collect(
    arrivals: u64,
    period_ns: u64,
    reference_rps: u64,
    per_core: Vec<CoreObs>,
) -> LoadSummary {
    let offered_rps = arrivals as f64 * 1e9 / period_ns as f64;
    let load_pct = 100.0 * offered_rps / reference_rps as f64;
    LoadSummary {
        load_pct,
        arrivals,
        per_core,
    }
}

/// Where every coroutine lives under a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourcePlan {
    pub k: usize,
    pub m: usize,
    pub core_roles: Vec<CoreRole>,
    /// Core of each live stack coroutine, by stack index.
    pub stack_core: Vec<CoreId>,
    /// Core of each live app coroutine, by app index.
    pub app_core: Vec<CoreId>,
    /// RSS flow group -> owning stack coroutine.
    pub group_to_stack: Vec<usize>,
}

impl ResourcePlan {
    /// Pack coroutines onto cores: a lone stack+app pair shares core 0;
    /// otherwise stacks get a core each and apps are packed `app_per_core`
    /// to a core after them. Groups spread round-robin over stacks.
    pub fn packed(k: usize, m: usize, num_cores: usize, app_per_core: usize, num_groups: u32) -> Self {
        assert!(k >= 1);
        let mut core_roles = vec![CoreRole::Idle; num_cores];
        let mut stack_core = Vec::with_capacity(k);
        let mut app_core = Vec::with_capacity(m);
        if k == 1 && m == 1 {
            core_roles[0] = CoreRole::Shared;
            stack_core.push(0);
            app_core.push(0);
        } else {
            let app_cores_needed = m.div_ceil(app_per_core);
            // Fall back to sharing core 0 when the machine is too small.
            if k + app_cores_needed > num_cores {
                for i in 0..k {
                    stack_core.push(i % num_cores);
                }
                for j in 0..m {
                    app_core.push((k + j) % num_cores);
                }
                for &c in stack_core.iter() {
                    core_roles[c] = CoreRole::StackOnly;
                }
                for &c in app_core.iter() {
                    core_roles[c] = match core_roles[c] {
                        CoreRole::StackOnly | CoreRole::Shared => CoreRole::Shared,
                        _ => CoreRole::AppOnly,
                    };
                }
            } else {
                for i in 0..k {
                    stack_core.push(i);
                    core_roles[i] = CoreRole::StackOnly;
                }
                for j in 0..m {
                    let c = k + j / app_per_core;
                    app_core.push(c);
                    core_roles[c] = CoreRole::AppOnly;
                }
            }
        }
        let group_to_stack = (0..num_groups as usize).map(|g| g % k).collect();
        ResourcePlan {
            k,
            m,
            core_roles,
            stack_core,
            app_core,
            group_to_stack,
        }
    }

    /// Explicit placement, for scenarios that pin coroutines.
    pub fn explicit(
        stack_core: Vec<CoreId>,
        app_core: Vec<CoreId>,
        num_cores: usize,
        num_groups: u32,
    ) -> Self {
        let k = stack_core.len();
        let m = app_core.len();
        let mut core_roles = vec![CoreRole::Idle; num_cores];
        for &c in &stack_core {
            core_roles[c] = CoreRole::StackOnly;
        }
        for &c in &app_core {
            core_roles[c] = match core_roles[c] {
                CoreRole::StackOnly | CoreRole::Shared => CoreRole::Shared,
                _ => CoreRole::AppOnly,
            };
        }
        let group_to_stack = (0..num_groups as usize).map(|g| g % k.max(1)).collect();
        ResourcePlan {
            k,
            m,
            core_roles,
            stack_core,
            app_core,
            group_to_stack,
        }
    }

    pub fn roles_string(&self) -> String {
        self.core_roles.iter().map(|r| r.letter()).collect()
    }
}

/// Dynamic-detect state: bracket lookups on period load plus a streak
/// counter that triggers app migration off a core overloaded for two
/// consecutive periods.
#[derive(Debug)]
pub struct ResourceManager {
    pub table: PolicyTable,
    overload_streak: Vec<u32>,
}

impl ResourceManager {
    pub fn new(table: PolicyTable, num_cores: usize) -> Self {
        ResourceManager {
            table,
            overload_streak: vec![0; num_cores],
        }
    }

    /// Produce the next plan from a completed-period summary.
    pub fn decide(
        &mut self,
        summary: &LoadSummary,
        current: &ResourcePlan,
        num_cores: usize,
        num_groups: u32,
    ) -> ResourcePlan {
        let row = self.table.row_for(summary.load_pct);
        let mut plan = ResourcePlan::packed(
            row.k,
            row.m,
            num_cores,
            self.table.app_per_core,
            num_groups,
        );

        for (c, obs) in summary.per_core.iter().enumerate() {
            if obs.overloaded {
                self.overload_streak[c] += 1;
            } else {
                self.overload_streak[c] = 0;
            }
        }

        // Two consecutive overloaded periods: move part of the app load off
        // that core onto the least-loaded core already hosting apps (or an
        // idle core when none exists).
        if plan.k == current.k && plan.m == current.m {
            for c in 0..num_cores.min(self.overload_streak.len()) {
                if self.overload_streak[c] < 2 {
                    continue;
                }
                let hosted: Vec<usize> = plan
                    .app_core
                    .iter()
                    .enumerate()
                    .filter(|(_, &core)| core == c)
                    .map(|(a, _)| a)
                    .collect();
                if hosted.len() < 2 {
                    continue;
                }
                let target = (0..num_cores)
                    .filter(|&t| t != c)
                    .min_by_key(|&t| {
                        let busy = summary
                            .per_core
                            .get(t)
                            .map(|o| (o.busy_pct * 100.0) as u64)
                            .unwrap_or(0);
                        let apps_there =
                            plan.app_core.iter().filter(|&&core| core == t).count();
                        (busy, apps_there, t)
                    });
                if let Some(t) = target {
                    plan.app_core[hosted[0]] = t;
                    if plan.core_roles[t] == CoreRole::Idle {
                        plan.core_roles[t] = CoreRole::AppOnly;
                    } else if plan.core_roles[t] == CoreRole::StackOnly {
                        plan.core_roles[t] = CoreRole::Shared;
                    }
                    self.overload_streak[c] = 0;
                }
            }
        }
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collect_computes_offered_load() {
        // 20 kRPS against a 200 kRPS reference is 10% load.
        let s = collect(400, 20_000_000, 200_000, Vec::new());
        assert!((s.load_pct - 10.0).abs() < 1e-9);
        let s = collect(3000, 20_000_000, 200_000, Vec::new());
        assert!((s.load_pct - 75.0).abs() < 1e-9);
        let s = collect(0, 20_000_000, 200_000, Vec::new());
        assert_eq!(s.load_pct, 0.0);
    }

    #[test]
    fn bracket_lookup_hits_experiment_ladder() {
        let table = PolicyTable::default();
        table.validate().unwrap();
        assert_eq!((table.row_for(10.0).k, table.row_for(10.0).m), (1, 1));
        assert_eq!((table.row_for(42.5).k, table.row_for(42.5).m), (2, 4));
        assert_eq!((table.row_for(75.0).k, table.row_for(75.0).m), (3, 6));
    }

    #[test]
    fn packed_plan_shares_single_core() {
        let plan = ResourcePlan::packed(1, 1, 8, 2, 8);
        assert_eq!(plan.core_roles[0], CoreRole::Shared);
        assert!(plan.core_roles[1..].iter().all(|&r| r == CoreRole::Idle));
    }

    #[test]
    fn packed_plan_splits_stacks_and_apps() {
        let plan = ResourcePlan::packed(3, 6, 8, 2, 8);
        assert_eq!(plan.stack_core, vec![0, 1, 2]);
        assert_eq!(plan.app_core, vec![3, 3, 4, 4, 5, 5]);
        assert_eq!(plan.roles_string(), "SSSAAA..");
        // Every group maps to exactly one live stack.
        assert!(plan.group_to_stack.iter().all(|&s| s < 3));
    }

    #[test]
    fn overload_two_periods_migrates_an_app() {
        let table = PolicyTable::default();
        let mut rm = ResourceManager::new(table, 8);
        let current = ResourcePlan::packed(3, 6, 8, 2, 8);
        let mut per_core = vec![CoreObs::default(); 8];
        per_core[3].overloaded = true;
        per_core[3].busy_pct = 99.0;
        let summary = LoadSummary {
            load_pct: 75.0,
            arrivals: 1,
            per_core: per_core.clone(),
        };
        let p1 = rm.decide(&summary, &current, 8, 8);
        assert_eq!(p1.app_core, current.app_core, "no migration after one period");
        let summary2 = LoadSummary {
            load_pct: 75.0,
            arrivals: 1,
            per_core,
        };
        let p2 = rm.decide(&summary2, &p1, 8, 8);
        assert_ne!(p2.app_core, p1.app_core, "second overloaded period migrates");
        let moved = p2
            .app_core
            .iter()
            .zip(p1.app_core.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(moved, 1);
    }

    #[test]
    fn table_validation_catches_disorder() {
        let mut table = PolicyTable::default();
        table.rows[1].load_pct_max = 5.0;
        assert_eq!(table.validate(), Err(PolicyError::NotMonotone));
        let empty = PolicyTable {
            rows: Vec::new(),
            ..PolicyTable::default()
        };
        assert_eq!(empty.validate(), Err(PolicyError::Empty));
    }

    #[test]
    fn explicit_plan_marks_shared_cores() {
        let plan = ResourcePlan::explicit(vec![0], vec![0, 1], 2, 4);
        assert_eq!(plan.core_roles[0], CoreRole::Shared);
        assert_eq!(plan.core_roles[1], CoreRole::AppOnly);
    }
}
