//! The simulation: wires NIC rings, driver buffers, the connection layer,
//! the event framework, checkpoints and the resource manager onto logical
//! cores and pumps the event calendar. One instance is one deterministic
//! run; identical scenario and seed give bit-identical output.

use crate::driver::{DriverBuffer, DriverClassifier};
use crate::engine::{
    Binding, CalEntry, Calendar, Core, CoreId, CoreRun, Task, TaskId, TaskKind, TaskState,
    WorkSegment,
};
use crate::event::EventRouter;
use crate::fastpath::{CallupRegistry, CheckAction, TcpClassifier, Thresholds};
use crate::metrics::{Attr, ClassHists, ClassReport, CpuAccount};
use crate::nic::{Class, EnqueueOutcome, Label, NicQueue, Packet, QueueId, RssMap};
use crate::resource::{collect, CoreObs, ResourceManager, ResourcePlan};
use crate::scenario::{CostModel, ExtractionSetup, Scenario, ScenarioError};
use crate::tcp::FlowTable;
use crate::time::{Nanos, VirtualClock};
use crate::workload::{generate, ArrivalSchedule};
use serde::Serialize;

pub use crate::exec::{AppStage, InlineOp, StackPhase};
pub(crate) use crate::exec::{AppExec, Pending, StackExec};

/// One fired occurrence, as reported by [`Sim::advance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occurrence {
    Arrival {
        t: Nanos,
        queue: QueueId,
        request: u64,
        outcome: EnqueueOutcome,
    },
    PeriodTick {
        t: Nanos,
    },
    Timer {
        t: Nanos,
        id: u64,
    },
}

/// Outcome of one checkpoint taken inside a work segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub at: Nanos,
    pub actions: Vec<CheckAction>,
}

#[derive(Debug, Default)]
pub(crate) struct ReqRuntime {
    pub t_enter: Option<Nanos>,
    pub t_ready: Option<Nanos>,
    pub t_service_start: Option<Nanos>,
    pub t_leave: Option<Nanos>,
    pub pkts_processed: u32,
    pub pkts_high_labeled: u32,
    pub first_pkt_high: bool,
    pub dropped: bool,
}

#[derive(Debug, Default, Serialize, Clone, Copy)]
pub struct CheckCounters {
    pub checks: u64,
    pub drains: u64,
    pub tcp_batches: u64,
    pub reschedules: u64,
    pub priority_yields: u64,
    pub max_continuous_run_ns: Nanos,
}

#[derive(Debug, Serialize, Clone)]
pub struct QueueReport {
    pub queue: QueueId,
    pub enqueued: u64,
    pub dequeued: u64,
    pub drops: u64,
}

#[derive(Debug, Serialize, Clone, Copy)]
pub struct EventSection {
    pub emitted: u64,
    pub delivered: u64,
    pub orphaned: u64,
    pub rebind_warnings: u64,
}

#[derive(Debug, Serialize, Clone, Copy, Default)]
pub struct LabelStats {
    pub high_requests: u64,
    pub fully_high_labeled: u64,
    pub first_packet_only_high: u64,
    pub unlabeled_high: u64,
}

#[derive(Debug, Serialize, Clone)]
pub struct PlanChange {
    pub t_ns: Nanos,
    pub k: usize,
    pub m: usize,
    pub roles: String,
}

#[derive(Debug, Serialize, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ns: Nanos,
    pub requests_generated: u64,
    pub requests_completed: u64,
    pub requests_with_drops: u64,
    pub requests_unfinished: u64,
    pub latency_high: ClassReport,
    pub latency_low: ClassReport,
    pub latency_all: ClassReport,
    pub nic_queues: Vec<QueueReport>,
    pub total_nic_drops: u64,
    pub events: EventSection,
    pub eta: f64,
    pub cpu: CpuAccount,
    pub label_stats: LabelStats,
    pub checks: CheckCounters,
    /// Worst event-ready-to-service-start delay observed for fully
    /// high-labeled messages.
    pub high_dispatch_delay_max_ns: Option<Nanos>,
    pub plan_changes: Vec<PlanChange>,
}

#[derive(Debug, Serialize, Clone)]
pub struct TimelineRow {
    pub t_ns: Nanos,
    pub load_pct: f64,
    pub k: usize,
    pub m: usize,
    pub roles: String,
    pub arrivals: u64,
    pub completed: u64,
    pub p99_all_ns: Option<Nanos>,
    pub p99_high_ns: Option<Nanos>,
    pub p99_low_ns: Option<Nanos>,
    pub drops_cum: u64,
    pub eta_period: f64,
}

/// Render the per-period timeline as CSV with a fixed schema.
pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut out = String::from(
        "t_ns,load_pct,k,m,roles,arrivals,completed,p99_all_ns,p99_high_ns,p99_low_ns,drops_cum,eta_period\n",
    );
    for r in rows {
        let opt = |v: Option<Nanos>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.4},{},{},{},{},{},{},{},{},{},{:.6}\n",
            r.t_ns,
            r.load_pct,
            r.k,
            r.m,
            r.roles,
            r.arrivals,
            r.completed,
            opt(r.p99_all_ns),
            opt(r.p99_high_ns),
            opt(r.p99_low_ns),
            r.drops_cum,
            r.eta_period,
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub timeline: Vec<TimelineRow>,
}

pub(crate) struct StackCo {
    pub task: TaskId,
    pub exec: Option<StackExec>,
    pub driver: DriverBuffer,
    pub queues: Vec<QueueId>,
    pub active: bool,
}

pub(crate) struct AppCo {
    pub task: TaskId,
    pub exec: Option<AppExec>,
    pub active: bool,
}

struct PeriodAccum {
    start_t: Nanos,
    hists: ClassHists,
    arrivals: u64,
    completed: u64,
    cpu_start: CpuAccount,
    busy_start: Vec<Nanos>,
}

pub struct Sim {
    pub(crate) cfg: Scenario,
    pub(crate) clock: VirtualClock,
    pub(crate) calendar: Calendar,
    pub(crate) cores: Vec<Core>,
    pub(crate) tasks: Vec<Task>,
    pub(crate) stacks: Vec<StackCo>,
    pub(crate) apps: Vec<AppCo>,
    pub(crate) nic_queues: Vec<NicQueue>,
    pub(crate) rss: RssMap,
    pub(crate) queue_owner: Vec<Option<usize>>,
    pub(crate) flows: FlowTable,
    pub(crate) router: EventRouter,
    pub(crate) registry: CallupRegistry,
    pub(crate) thresholds: Thresholds,
    pub(crate) costs: CostModel,
    schedule: ArrivalSchedule,
    injected: Vec<(Nanos, Packet)>,
    pub(crate) requests: Vec<ReqRuntime>,
    rm: Option<ResourceManager>,
    pub(crate) plan: ResourcePlan,
    pub(crate) cpu: CpuAccount,
    run_hists: ClassHists,
    period: PeriodAccum,
    timeline: Vec<TimelineRow>,
    plan_changes: Vec<PlanChange>,
    pub(crate) end: Nanos,
    occ_buf: Vec<Occurrence>,
    pub(crate) seg_outcomes: Option<(TaskId, Vec<CheckOutcome>)>,
    pub(crate) seg_result: Option<Vec<CheckOutcome>>,
    pub(crate) counters: CheckCounters,
    pub(crate) completed: u64,
    pub(crate) high_dispatch_delay_max: Option<Nanos>,
    pub(crate) pending_moves: Vec<Option<CoreId>>,
    pub(crate) task_moved_notice: u64,
    pub(crate) pending: Vec<Option<Pending>>,
    pub(crate) block_start: Vec<Nanos>,
    pub(crate) carry: Vec<Nanos>,
}

impl Sim {
    pub fn from_scenario(cfg: &Scenario) -> Result<Sim, ScenarioError> {
        cfg.validate()?;
        let schedule = generate(&cfg.workload, cfg.seed, cfg.mss)
            .map_err(ScenarioError::Workload)?;
        let n_requests = schedule.requests.len();

        // Pre-create the largest coroutine population any plan can ask for;
        // plans wake and suspend rather than create.
        let (mut k_max, mut m_max) = match &cfg.initial_plan {
            Some(p) => (p.k, p.m),
            None => (1, 1),
        };
        if cfg.policy.enabled {
            for row in &cfg.policy.table.rows {
                k_max = k_max.max(row.k);
                m_max = m_max.max(row.m);
            }
        }

        let num_queues = if cfg.nic.priority_queues {
            2 * cfg.rss_groups as usize
        } else {
            cfg.nic.queues
        };
        let mut nic_queues: Vec<NicQueue> = (0..num_queues)
            .map(|i| NicQueue::new(i, cfg.nic.capacity))
            .collect();
        let rss = if cfg.nic.priority_queues {
            for g in 0..cfg.rss_groups as usize {
                nic_queues[2 * g].priority_class = Some(Class::High);
                nic_queues[2 * g + 1].priority_class = Some(Class::Low);
            }
            RssMap {
                num_groups: cfg.rss_groups,
                group_to_queue: (0..cfg.rss_groups as usize).map(|g| 2 * g).collect(),
            }
        } else {
            RssMap {
                num_groups: cfg.rss_groups,
                group_to_queue: (0..cfg.rss_groups as usize)
                    .map(|g| g % num_queues)
                    .collect(),
            }
        };

        let mut flows = FlowTable::new(cfg.workload.connections as u64);
        let mut registry = CallupRegistry::default();
        if matches!(cfg.extraction, ExtractionSetup::Driver | ExtractionSetup::Both) {
            registry.register_driver(DriverClassifier::HeaderClass);
        }
        if matches!(cfg.extraction, ExtractionSetup::Tcp | ExtractionSetup::Both) {
            registry.register_tcp(TcpClassifier::StatefulHeaderClass);
            for f in 0..cfg.workload.connections as u64 {
                flows
                    .register_extraction(f, TcpClassifier::StatefulHeaderClass)
                    .expect("flow exists");
            }
        }

        let mut router = EventRouter::new(m_max);
        router.force_low = !cfg.priority.event_queues;
        if cfg.priority.class_routing {
            if let Some(b) = cfg.class_bindings {
                router.class_defaults[Class::High.rank() as usize] = Some(b.high);
                router.class_defaults[Class::Low.rank() as usize] = Some(b.low);
            }
        }

        let mut tasks = Vec::new();
        let mut stacks = Vec::new();
        let mut apps = Vec::new();
        for s in 0..k_max {
            let id = tasks.len();
            tasks.push(Task {
                id,
                kind: TaskKind::Stack(s),
                core: 0,
                state: TaskState::Suspended,
                draining: false,
                run_start: 0,
                binding: Binding::Any,
            });
            stacks.push(StackCo {
                task: id,
                exec: None,
                driver: DriverBuffer::new(cfg.priority.driver_queues),
                queues: Vec::new(),
                active: false,
            });
        }
        for a in 0..m_max {
            let id = tasks.len();
            let binding = match cfg.class_bindings {
                Some(b) if cfg.priority.class_routing => {
                    if b.high == a && b.low != a {
                        Binding::High
                    } else if b.low == a && b.high != a {
                        Binding::Low
                    } else {
                        Binding::Any
                    }
                }
                _ => Binding::Any,
            };
            tasks.push(Task {
                id,
                kind: TaskKind::App(a),
                core: 0,
                state: TaskState::Suspended,
                draining: false,
                run_start: 0,
                binding,
            });
            apps.push(AppCo {
                task: id,
                exec: None,
                active: false,
            });
        }

        let initial_plan = match &cfg.initial_plan {
            Some(p) => match (&p.stack_cores, &p.app_cores) {
                (Some(sc), Some(ac)) => {
                    ResourcePlan::explicit(sc.clone(), ac.clone(), cfg.cores, cfg.rss_groups)
                }
                _ => ResourcePlan::packed(
                    p.k,
                    p.m,
                    cfg.cores,
                    cfg.policy.table.app_per_core,
                    cfg.rss_groups,
                ),
            },
            None => ResourcePlan::packed(
                1,
                1,
                cfg.cores,
                cfg.policy.table.app_per_core,
                cfg.rss_groups,
            ),
        };

        let rm = cfg
            .policy
            .enabled
            .then(|| ResourceManager::new(cfg.policy.table.clone(), cfg.cores));

        let n_tasks = tasks.len();
        let mut sim = Sim {
            clock: VirtualClock::default(),
            calendar: Calendar::default(),
            cores: (0..cfg.cores).map(Core::new).collect(),
            tasks,
            stacks,
            apps,
            nic_queues,
            rss,
            queue_owner: vec![None; num_queues],
            flows,
            router,
            registry,
            thresholds: cfg.thresholds,
            costs: cfg.costs,
            schedule,
            injected: Vec::new(),
            requests: (0..n_requests).map(|_| ReqRuntime::default()).collect(),
            rm,
            plan: ResourcePlan::packed(1, 1, cfg.cores, 2, cfg.rss_groups),
            cpu: CpuAccount::default(),
            run_hists: ClassHists::default(),
            period: PeriodAccum {
                start_t: 0,
                hists: ClassHists::default(),
                arrivals: 0,
                completed: 0,
                cpu_start: CpuAccount::default(),
                busy_start: vec![0; cfg.cores],
            },
            timeline: Vec::new(),
            plan_changes: Vec::new(),
            end: cfg.duration_ns,
            occ_buf: Vec::new(),
            seg_outcomes: None,
            seg_result: None,
            counters: CheckCounters::default(),
            completed: 0,
            high_dispatch_delay_max: None,
            pending_moves: vec![None; n_tasks],
            task_moved_notice: 0,
            pending: (0..cfg.cores).map(|_| None).collect(),
            block_start: vec![0; cfg.cores],
            carry: vec![0; cfg.cores],
            cfg: cfg.clone(),
        };

        sim.apply_plan(initial_plan);
        if !sim.schedule.packets.is_empty() {
            let t = sim.schedule.packets[0].0;
            sim.calendar.push(t, CalEntry::Arrival(0));
        }
        sim.calendar
            .push(sim.cfg.statistic_period_ns, CalEntry::PeriodTick);
        Ok(sim)
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    pub fn total_drops(&self) -> u64 {
        self.nic_queues.iter().map(|q| q.drops).sum()
    }

    pub fn queue(&self, id: QueueId) -> &NicQueue {
        &self.nic_queues[id]
    }

    pub fn router(&self) -> &EventRouter {
        &self.router
    }

    pub fn flows(&self) -> &FlowTable {
        &self.flows
    }

    pub fn counters(&self) -> &CheckCounters {
        &self.counters
    }

    pub fn cpu(&self) -> &CpuAccount {
        &self.cpu
    }

    pub fn core_busy_ns(&self, core: CoreId) -> Nanos {
        self.cores[core].busy_ns
    }

    pub fn task_of_app(&self, app: usize) -> TaskId {
        self.apps[app].task
    }

    pub fn task_of_stack(&self, s: usize) -> TaskId {
        self.stacks[s].task
    }

    pub fn task_state(&self, t: TaskId) -> TaskState {
        self.tasks[t].state
    }

    pub fn plan_km(&self) -> (usize, usize) {
        (self.plan.k, self.plan.m)
    }

    /// Schedule an extra arrival outside the workload schedule (harness
    /// traffic for targeted tests).
    pub fn inject_arrival(&mut self, t: Nanos, pkt: Packet) {
        assert!(t >= self.clock.now());
        let idx = self.injected.len();
        self.injected.push((t, pkt));
        self.calendar.push(t, CalEntry::InjectedArrival(idx));
    }

    pub fn schedule_timer(&mut self, t: Nanos, id: u64) {
        assert!(t >= self.clock.now());
        self.calendar.push(t, CalEntry::Timer(id));
    }

    /// Advance virtual time to `until`, firing every arrival and timer whose
    /// deadline falls inside, in deadline order with insertion-order ties.
    pub fn advance(&mut self, until: Nanos) -> Vec<Occurrence> {
        assert!(until >= self.clock.now(), "advance cannot move backwards");
        self.occ_buf.clear();
        while let Some(key) = self.calendar.pop_at_or_before(until) {
            self.clock.advance_to(key.t);
            self.handle(key.entry);
        }
        self.clock.advance_to(until);
        std::mem::take(&mut self.occ_buf)
    }

    /// Pump a single calendar entry; false when nothing is left before the
    /// configured end of run.
    fn step(&mut self) -> bool {
        match self.calendar.pop_at_or_before(self.end) {
            Some(key) => {
                self.clock.advance_to(key.t);
                self.handle(key.entry);
                true
            }
            None => false,
        }
    }

    /// Run the whole scenario and produce the report and per-period
    /// timeline.
    pub fn run(&mut self) -> RunOutput {
        while self.step() {}
        self.clock.advance_to(self.end);
        self.flush_spins();
        self.flush_period();
        RunOutput {
            report: self.report(),
            timeline: self.timeline.clone(),
        }
    }

    /// Dispatch the next task on a core per the round-robin rule, honoring
    /// expired stack deadlines and priority bindings. Returns the dispatched
    /// task. Does not start its program; the engine loop does that.
    pub fn dispatch_core(&mut self, core: CoreId) -> Option<TaskId> {
        let views = self.task_views(core);
        let idx = crate::engine::pick_next(
            &views,
            self.cores[core].rr_cursor,
            self.cfg.priority.event_queues,
        )?;
        let tid = views[idx].task;
        self.cores[core].rr_cursor = (idx + 1) % views.len().max(1);
        let now = self.clock.now();
        let t = &mut self.tasks[tid];
        t.state = TaskState::Running;
        t.run_start = now;
        Some(tid)
    }

    /// Execute a work segment on a task that is already `Running`: virtual
    /// time advances by the segment duration plus whatever its checkpoints
    /// trigger, and each checkpoint's outcome is returned in order.
    pub fn run_segment(&mut self, task: TaskId, seg: WorkSegment) -> Vec<CheckOutcome> {
        assert_eq!(self.tasks[task].state, TaskState::Running, "run_segment needs a running task");
        let TaskKind::App(app) = self.tasks[task].kind else {
            panic!("run_segment drives app coroutines");
        };
        self.seg_outcomes = Some((task, Vec::new()));
        self.seg_result = None;
        let core = self.tasks[task].core;
        self.apps[app].exec = Some(AppExec::raw_segment(seg));
        self.start_app_stage(core, app);
        while self.seg_result.is_none() {
            if !self.step() {
                break;
            }
        }
        self.seg_outcomes = None;
        self.seg_result.take().unwrap_or_default()
    }

    fn handle(&mut self, entry: CalEntry) {
        match entry {
            CalEntry::Arrival(idx) => {
                let (t, pkt) = self.schedule.packets[idx].clone();
                debug_assert_eq!(t, self.clock.now());
                if idx + 1 < self.schedule.packets.len() {
                    let (nt, _) = self.schedule.packets[idx + 1];
                    self.calendar.push(nt, CalEntry::Arrival(idx + 1));
                }
                self.deliver_arrival(pkt);
            }
            CalEntry::InjectedArrival(idx) => {
                let (_, pkt) = self.injected[idx].clone();
                self.deliver_arrival(pkt);
            }
            CalEntry::CoreStep(core) => self.core_step(core),
            CalEntry::PeriodTick => self.period_tick(),
            CalEntry::Timer(id) => {
                self.occ_buf.push(Occurrence::Timer {
                    t: self.clock.now(),
                    id,
                });
            }
            CalEntry::EndOfRun => {}
        }
    }

    fn deliver_arrival(&mut self, pkt: Packet) {
        let now = self.clock.now();
        let queue = self.arrival_queue(&pkt);
        let request = pkt.request;
        let outcome = self.nic_queues[queue].enqueue(pkt, now);
        match outcome {
            EnqueueOutcome::Accepted => {
                if let Some(r) = self.requests.get_mut(request as usize) {
                    if r.t_enter.is_none() {
                        r.t_enter = Some(now);
                    }
                }
                if let Some(owner) = self.queue_owner[queue] {
                    let core = self.tasks[self.stacks[owner].task].core;
                    self.wake_core(core);
                }
            }
            EnqueueOutcome::Dropped => {
                if let Some(r) = self.requests.get_mut(request as usize) {
                    r.dropped = true;
                }
            }
        }
        self.period.arrivals += 1;
        self.occ_buf.push(Occurrence::Arrival {
            t: now,
            queue,
            request,
            outcome,
        });
    }

    fn arrival_queue(&self, pkt: &Packet) -> QueueId {
        let group = self.rss.group_of(pkt.flow) as usize;
        let base = self.rss.group_to_queue[group];
        if self.cfg.nic.priority_queues {
            // Pre-classification at the NIC needs an injected stateless
            // classifier; reuse the header classifier.
            let class = match DriverClassifier::HeaderClass.classify(&pkt.view()) {
                Label::High => Class::High,
                _ => Class::Low,
            };
            if class == Class::High {
                base
            } else {
                base + 1
            }
        } else {
            base
        }
    }

    pub(crate) fn charge(&mut self, core: CoreId, attr: Attr, ns: Nanos, in_segment: bool) {
        if ns == 0 {
            return;
        }
        self.cores[core].busy_ns += ns;
        self.cpu.charge(attr, ns, in_segment);
    }

    pub(crate) fn wake_core(&mut self, core: CoreId) {
        let now = self.clock.now();
        match self.cores[core].run {
            CoreRun::Spin { since } => {
                let spun = now - since;
                self.charge(core, Attr::Spin, spun, false);
                self.cores[core].run = CoreRun::Waking;
                self.cores[core].idle_slices = 0;
                self.calendar.push(now, CalEntry::CoreStep(core));
            }
            CoreRun::Off => {
                let any_runnable = self.cores[core]
                    .run_queue
                    .iter()
                    .any(|&t| self.tasks[t].state == TaskState::Runnable);
                if any_runnable {
                    self.cores[core].run = CoreRun::Waking;
                    self.calendar.push(now, CalEntry::CoreStep(core));
                }
            }
            CoreRun::Waking | CoreRun::Busy => {}
        }
    }

    /// Wake every core hosting a consumer with pending events.
    pub(crate) fn wake_pending_consumers(&mut self) {
        for a in 0..self.apps.len() {
            if !self.apps[a].active && !self.tasks[self.apps[a].task].draining {
                continue;
            }
            if self.router.channel(a).is_empty() {
                continue;
            }
            let core = self.tasks[self.apps[a].task].core;
            self.wake_core(core);
        }
    }

    fn flush_spins(&mut self) {
        let now = self.clock.now();
        for c in 0..self.cores.len() {
            if let CoreRun::Spin { since } = self.cores[c].run {
                self.charge(c, Attr::Spin, now - since, false);
                self.cores[c].run = CoreRun::Spin { since: now };
            }
        }
    }

    fn period_tick(&mut self) {
        let now = self.clock.now();
        self.flush_spins();
        self.occ_buf.push(Occurrence::PeriodTick { t: now });

        let period_ns = now - self.period.start_t;
        let per_core: Vec<CoreObs> = (0..self.cores.len())
            .map(|c| {
                let busy = self.cores[c].busy_ns - self.period.busy_start[c];
                let busy_pct = if period_ns > 0 {
                    100.0 * busy as f64 / period_ns as f64
                } else {
                    0.0
                };
                let backlog: u64 = self
                    .apps
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| self.tasks[a.task].core == c && a.active)
                    .map(|(i, _)| self.router.channel(i).len() as u64)
                    .sum();
                let threshold = self
                    .rm
                    .as_ref()
                    .map(|m| m.table.overload_busy_pct)
                    .unwrap_or(90.0);
                CoreObs {
                    busy_pct,
                    event_backlog: backlog,
                    overloaded: busy_pct >= threshold,
                }
            })
            .collect();

        let reference = if self.cfg.policy.enabled {
            self.rm.as_ref().unwrap().table.reference_rps
        } else {
            self.cfg.policy.table.reference_rps
        };
        let summary = collect(self.period.arrivals, period_ns.max(1), reference, per_core);

        let d_app = self.cpu.app_ns - self.period.cpu_start.app_ns;
        let d_total = self.cpu.total_ns - self.period.cpu_start.total_ns;
        let eta_period = if d_total > 0 {
            d_app as f64 / d_total as f64
        } else {
            0.0
        };
        self.timeline.push(TimelineRow {
            t_ns: now,
            load_pct: summary.load_pct,
            k: self.plan.k,
            m: self.plan.m,
            roles: self.plan.roles_string(),
            arrivals: self.period.arrivals,
            completed: self.period.completed,
            p99_all_ns: self.period.hists.all.p99().ok(),
            p99_high_ns: self.period.hists.high.p99().ok(),
            p99_low_ns: self.period.hists.low.p99().ok(),
            drops_cum: self.total_drops(),
            eta_period,
        });

        if self.rm.is_some() {
            let current = self.plan.clone();
            let new_plan = self.rm.as_mut().unwrap().decide(
                &summary,
                &current,
                self.cfg.cores,
                self.cfg.rss_groups,
            );
            if new_plan != current {
                self.apply_plan(new_plan);
            }
        }

        self.period = PeriodAccum {
            start_t: now,
            hists: ClassHists::default(),
            arrivals: 0,
            completed: 0,
            cpu_start: self.cpu,
            busy_start: self.cores.iter().map(|c| c.busy_ns).collect(),
        };

        let next = now + self.cfg.statistic_period_ns;
        if next <= self.end {
            self.calendar.push(next, CalEntry::PeriodTick);
        }
    }

    fn flush_period(&mut self) {
        let now = self.clock.now();
        if now <= self.period.start_t {
            return;
        }
        let period_ns = now - self.period.start_t;
        let reference = self.cfg.policy.table.reference_rps;
        let summary = collect(self.period.arrivals, period_ns, reference, Vec::new());
        let d_app = self.cpu.app_ns - self.period.cpu_start.app_ns;
        let d_total = self.cpu.total_ns - self.period.cpu_start.total_ns;
        self.timeline.push(TimelineRow {
            t_ns: now,
            load_pct: summary.load_pct,
            k: self.plan.k,
            m: self.plan.m,
            roles: self.plan.roles_string(),
            arrivals: self.period.arrivals,
            completed: self.period.completed,
            p99_all_ns: self.period.hists.all.p99().ok(),
            p99_high_ns: self.period.hists.high.p99().ok(),
            p99_low_ns: self.period.hists.low.p99().ok(),
            drops_cum: self.total_drops(),
            eta_period: if d_total > 0 {
                d_app as f64 / d_total as f64
            } else {
                0.0
            },
        });
    }

    /// Apply a resource plan: wake and suspend coroutines, move survivors,
    /// swap flow-group ownership, and rebuild per-core run queues. Draining
    /// coroutines finish their local backlog before suspending.
    pub fn apply_plan(&mut self, plan: ResourcePlan) -> MigrationReport {
        let now = self.clock.now();
        let mut report = MigrationReport::default();

        // Stacks.
        for s in 0..self.stacks.len() {
            let want_active = s < plan.k;
            let tid = self.stacks[s].task;
            if want_active {
                let target = plan.stack_core[s];
                if !self.stacks[s].active {
                    self.stacks[s].active = true;
                    self.tasks[tid].draining = false;
                    if self.tasks[tid].state == TaskState::Suspended {
                        self.tasks[tid].state = TaskState::Runnable;
                    }
                    self.tasks[tid].core = target;
                    report.woken += 1;
                } else {
                    self.tasks[tid].draining = false;
                    self.move_task(tid, target, &mut report);
                }
            } else if self.stacks[s].active {
                self.stacks[s].active = false;
                if self.tasks[tid].state != TaskState::Suspended {
                    self.tasks[tid].draining = true;
                    report.draining += 1;
                }
            }
        }

        // Apps.
        for a in 0..self.apps.len() {
            let want_active = a < plan.m;
            let tid = self.apps[a].task;
            if want_active {
                let target = plan.app_core[a];
                if !self.apps[a].active {
                    self.apps[a].active = true;
                    self.tasks[tid].draining = false;
                    if self.tasks[tid].state == TaskState::Suspended {
                        self.tasks[tid].state = TaskState::Runnable;
                    }
                    self.tasks[tid].core = target;
                    report.woken += 1;
                } else {
                    self.tasks[tid].draining = false;
                    self.move_task(tid, target, &mut report);
                }
            } else if self.apps[a].active {
                self.apps[a].active = false;
                if self.tasks[tid].state != TaskState::Suspended {
                    self.tasks[tid].draining = true;
                    report.draining += 1;
                }
            }
        }
        self.router
            .set_active((0..plan.m.min(self.apps.len())).collect());

        // Flow-group ownership swaps by pointer; in-flight batches finish on
        // the stack that popped them.
        for (g, (&old_s, &new_s)) in self
            .plan
            .group_to_stack
            .iter()
            .zip(plan.group_to_stack.iter())
            .enumerate()
        {
            if old_s != new_s {
                report.groups_moved += 1;
            }
            let _ = g;
        }
        for q in self.queue_owner.iter_mut() {
            *q = None;
        }
        for s in 0..self.stacks.len() {
            let queues: Vec<QueueId> = if s < plan.k {
                let mut v: Vec<QueueId> = plan
                    .group_to_stack
                    .iter()
                    .enumerate()
                    .filter(|(_, &owner)| owner == s)
                    .flat_map(|(g, _)| {
                        let base = self.rss.group_to_queue[g];
                        if self.cfg.nic.priority_queues {
                            vec![base, base + 1]
                        } else {
                            vec![base]
                        }
                    })
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            } else {
                Vec::new()
            };
            for &q in &queues {
                self.queue_owner[q] = Some(s);
            }
            self.stacks[s].queues = queues;
        }

        // Core roles and run queues. Draining tasks stay where they are.
        for c in 0..self.cores.len() {
            self.cores[c].role = plan.core_roles[c];
            self.cores[c].run_queue.clear();
        }
        for s in 0..self.stacks.len() {
            let tid = self.stacks[s].task;
            if self.tasks[tid].state != TaskState::Suspended {
                let core = self.tasks[tid].core;
                self.cores[core].run_queue.push(tid);
            }
        }
        for a in 0..self.apps.len() {
            let tid = self.apps[a].task;
            if self.tasks[tid].state != TaskState::Suspended {
                let core = self.tasks[tid].core;
                self.cores[core].run_queue.push(tid);
            }
        }
        for c in 0..self.cores.len() {
            if self.cores[c].rr_cursor >= self.cores[c].run_queue.len().max(1) {
                self.cores[c].rr_cursor = 0;
            }
        }

        self.plan = plan;
        self.plan_changes.push(PlanChange {
            t_ns: now,
            k: self.plan.k,
            m: self.plan.m,
            roles: self.plan.roles_string(),
        });

        // Suspend drainers that have nothing left, then get cores moving.
        for tid in 0..self.tasks.len() {
            if self.tasks[tid].draining
                && self.tasks[tid].state == TaskState::Runnable
                && !self.task_has_work(tid)
            {
                self.tasks[tid].state = TaskState::Suspended;
                self.tasks[tid].draining = false;
            }
        }
        for c in 0..self.cores.len() {
            self.cores[c].idle_slices = 0;
            self.wake_core(c);
        }
        report
    }

    fn move_task(&mut self, tid: TaskId, target: CoreId, report: &mut MigrationReport) {
        if self.tasks[tid].core == target {
            return;
        }
        if self.tasks[tid].state == TaskState::Running {
            // Mid-block; move at slice end.
            self.pending_moves[tid] = Some(target);
        } else {
            self.tasks[tid].core = target;
        }
        report.moved += 1;
    }

    pub(crate) fn task_has_work(&self, tid: TaskId) -> bool {
        match self.tasks[tid].kind {
            TaskKind::Stack(s) => {
                let st = &self.stacks[s];
                st.queues.iter().any(|&q| !self.nic_queues[q].is_empty())
                    || st.driver.rx_len() > 0
                    || st.driver.tx_len() > 0
            }
            TaskKind::App(a) => {
                self.apps[a].exec.as_ref().map_or(false, |e| e.parked)
                    || !self.router.channel(a).is_empty()
            }
        }
    }

    pub(crate) fn task_views(&self, core: CoreId) -> Vec<crate::engine::TaskView> {
        let now = self.clock.now();
        self.cores[core]
            .run_queue
            .iter()
            .map(|&tid| {
                let t = &self.tasks[tid];
                let runnable = t.state == TaskState::Runnable;
                match t.kind {
                    TaskKind::Stack(s) => {
                        let backlog = self.stacks[s]
                            .queues
                            .iter()
                            .any(|&q| !self.nic_queues[q].is_empty());
                        crate::engine::TaskView {
                            task: tid,
                            runnable,
                            is_stack: true,
                            binding: Binding::Any,
                            has_high: false,
                            has_work: self.task_has_work(tid),
                            nic_deadline_expired: now
                                .saturating_sub(self.cores[core].check_state.last_nic_check)
                                >= self.thresholds.nic_check_interval_ns,
                            nic_backlog: backlog,
                        }
                    }
                    TaskKind::App(a) => crate::engine::TaskView {
                        task: tid,
                        runnable,
                        is_stack: false,
                        binding: t.binding,
                        has_high: self.router.channel(a).high_len() > 0,
                        has_work: self.task_has_work(tid),
                        nic_deadline_expired: false,
                        nic_backlog: false,
                    },
                }
            })
            .collect()
    }

    /// A high event is pending for some other dispatchable task on `core`.
    pub(crate) fn high_pending_other(&self, core: CoreId, running: TaskId) -> bool {
        self.cores[core].run_queue.iter().any(|&tid| {
            tid != running
                && self.tasks[tid].state == TaskState::Runnable
                && match self.tasks[tid].kind {
                    TaskKind::App(a) => self.router.channel(a).high_len() > 0,
                    TaskKind::Stack(_) => false,
                }
        })
    }

    pub(crate) fn stack_on_core(&self, core: CoreId) -> Option<usize> {
        self.cores[core].run_queue.iter().find_map(|&tid| {
            match (self.tasks[tid].kind, self.tasks[tid].state) {
                (TaskKind::Stack(s), TaskState::Suspended) => {
                    let _ = s;
                    None
                }
                (TaskKind::Stack(s), _) => Some(s),
                _ => None,
            }
        })
    }

    pub(crate) fn complete_request(&mut self, request: u64, t_leave: Nanos) {
        let Some(meta) = self.schedule.requests.get(request as usize) else {
            return;
        };
        let rr = &mut self.requests[request as usize];
        if rr.t_leave.is_some() {
            return;
        }
        rr.t_leave = Some(t_leave);
        let Some(t_enter) = rr.t_enter else { return };
        let latency = t_leave.saturating_sub(t_enter);
        self.run_hists.record(meta.priority, latency);
        self.period.hists.record(meta.priority, latency);
        self.completed += 1;
        self.period.completed += 1;
    }

    fn label_stats(&self) -> LabelStats {
        let mut out = LabelStats::default();
        for (meta, rr) in self.schedule.requests.iter().zip(self.requests.iter()) {
            if meta.priority != Class::High {
                continue;
            }
            out.high_requests += 1;
            if rr.pkts_processed == 0 {
                out.unlabeled_high += 1;
                continue;
            }
            if rr.pkts_high_labeled == rr.pkts_processed {
                out.fully_high_labeled += 1;
            } else if rr.first_pkt_high && rr.pkts_high_labeled == 1 {
                out.first_packet_only_high += 1;
            }
            if rr.pkts_high_labeled == 0 {
                out.unlabeled_high += 1;
            }
        }
        out
    }

    pub fn report(&self) -> RunReport {
        let generated = self.schedule.requests.len() as u64;
        let with_drops = self.requests.iter().filter(|r| r.dropped).count() as u64;
        let unfinished = self
            .requests
            .iter()
            .filter(|r| r.t_leave.is_none())
            .count() as u64;
        RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            duration_ns: self.end,
            requests_generated: generated,
            requests_completed: self.completed,
            requests_with_drops: with_drops,
            requests_unfinished: unfinished,
            latency_high: ClassReport::from_hist(&self.run_hists.high),
            latency_low: ClassReport::from_hist(&self.run_hists.low),
            latency_all: ClassReport::from_hist(&self.run_hists.all),
            nic_queues: self
                .nic_queues
                .iter()
                .map(|q| QueueReport {
                    queue: q.id,
                    enqueued: q.enqueued,
                    dequeued: q.dequeued,
                    drops: q.drops,
                })
                .collect(),
            total_nic_drops: self.total_drops(),
            events: EventSection {
                emitted: self.router.emitted,
                delivered: self.router.delivered,
                orphaned: self.router.orphaned,
                rebind_warnings: self.router.rebind_warnings,
            },
            eta: self.cpu.efficiency().unwrap_or(0.0),
            cpu: self.cpu,
            label_stats: self.label_stats(),
            checks: self.counters,
            high_dispatch_delay_max_ns: self.high_dispatch_delay_max,
            plan_changes: self.plan_changes.clone(),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MigrationReport {
    pub woken: u64,
    pub draining: u64,
    pub moved: u64,
    pub groups_moved: u64,
}
