//! Core execution state machines. A dispatched coroutine runs as a chain of
//! timed blocks on its core: API calls, service chunks between checkpoints,
//! and stack phases (ring receive, protocol batch, transmit flush). Work is
//! committed when a block is scheduled and its effects land when the block
//! completes, so cross-core interactions stay causal and deterministic.

use crate::driver::classify_into;
use crate::engine::{CalEntry, CoreId, CoreRun, TaskId, TaskKind, TaskState, WorkSegment};
use crate::fastpath::{check, CheckAction, CheckInput};
use crate::metrics::Attr;
use crate::nic::{Class, Label, Packet, QueueId, TxPacket};
use crate::sim::{CheckOutcome, Sim};
use crate::time::Nanos;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppStage {
    Poll,
    Recv,
    Serve,
    Send,
    /// Bare work segment driven by `Sim::run_segment`.
    RawSeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum After {
    None,
    ResolvePoll,
    ResolveRecv,
    ContinueServe,
    ResolveSend,
}

#[derive(Debug, Clone, Copy)]
pub enum InlineOp {
    Rx(QueueId),
    TcpBatch,
    TxFlush,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ServeCtx {
    pub request: u64,
    pub flow: u64,
    pub class: Class,
    pub resp_bytes: u32,
}

/// Program state of one app coroutine between dispatches.
#[derive(Debug)]
pub struct AppExec {
    pub stage: AppStage,
    pub(crate) ev: Option<crate::event::Event>,
    pub(crate) cur: Option<ServeCtx>,
    pub serve_left: Nanos,
    pub serve_cp: Nanos,
    pub(crate) inline: VecDeque<InlineOp>,
    pub(crate) after_inline: After,
    /// Mid-service state retained across a cooperative yield.
    pub parked: bool,
    pub(crate) pending_park: bool,
    pub(crate) did_work: bool,
}

impl AppExec {
    fn fresh() -> Self {
        AppExec {
            stage: AppStage::Poll,
            ev: None,
            cur: None,
            serve_left: 0,
            serve_cp: Nanos::MAX,
            inline: VecDeque::new(),
            after_inline: After::None,
            parked: false,
            pending_park: false,
            did_work: false,
        }
    }

    pub(crate) fn raw_segment(seg: WorkSegment) -> Self {
        AppExec {
            stage: AppStage::RawSeg,
            serve_left: seg.duration,
            serve_cp: seg.checkpoint_interval,
            ..AppExec::fresh()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackPhase {
    Rx,
    Tcp,
    Tx,
}

#[derive(Debug)]
pub struct StackExec {
    pub phase: StackPhase,
    pub qpos: usize,
    pub did_work: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Owner {
    Slice(usize),
    Inline { app: usize, stack: usize },
}

impl Owner {
    fn stack(self) -> usize {
        match self {
            Owner::Slice(s) => s,
            Owner::Inline { stack, .. } => stack,
        }
    }
}

/// A timed block in flight on a core.
#[derive(Debug)]
pub(crate) enum Pending {
    Switch {
        task: TaskId,
    },
    AppApi {
        app: usize,
    },
    AppChunk {
        app: usize,
        chunk: Nanos,
    },
    StackRx {
        owner: Owner,
        pkts: Vec<Packet>,
        rx_cost: Nanos,
        ex_cost: Nanos,
    },
    StackTcp {
        owner: Owner,
        pkts: Vec<Packet>,
        tcp_cost: Nanos,
        ex_cost: Nanos,
    },
    StackTx {
        owner: Owner,
        pkts: Vec<TxPacket>,
        started: Nanos,
    },
}

impl Sim {
    pub(crate) fn core_step(&mut self, core: CoreId) {
        match self.cores[core].run {
            CoreRun::Busy => {
                let p = self.pending[core].take().expect("busy core has a block");
                self.cores[core].run = CoreRun::Waking;
                self.finish_block(core, p);
            }
            CoreRun::Waking | CoreRun::Off | CoreRun::Spin { .. } => {
                self.dispatch_and_start(core);
            }
        }
    }

    /// Queue `pending` to complete after `cost` (plus any carried checkpoint
    /// time) and mark the core busy. Zero-cost blocks resolve immediately.
    fn schedule_block(&mut self, core: CoreId, cost: Nanos, pending: Pending) {
        let now = self.clock.now();
        let carry = std::mem::take(&mut self.carry[core]);
        self.block_start[core] = now + carry;
        if carry + cost == 0 {
            self.finish_block(core, pending);
            return;
        }
        self.pending[core] = Some(pending);
        self.cores[core].run = CoreRun::Busy;
        self.calendar.push(now + carry + cost, CalEntry::CoreStep(core));
    }

    fn elapsed_block(&self, core: CoreId) -> Nanos {
        self.clock.now().saturating_sub(self.block_start[core])
    }

    pub(crate) fn dispatch_and_start(&mut self, core: CoreId) {
        let views = self.task_views(core);
        let runnable = views.iter().filter(|v| v.runnable).count();
        let Some(idx) = crate::engine::pick_next(
            &views,
            self.cores[core].rr_cursor,
            self.cfg.priority.event_queues,
        ) else {
            self.cores[core].run = CoreRun::Off;
            return;
        };
        let anyone_busy = views.iter().any(|v| v.runnable && v.has_work);
        if !anyone_busy && self.cores[core].idle_slices >= runnable {
            // A full polling cycle found nothing; spin until a stimulus.
            let since = self.clock.now() + std::mem::take(&mut self.carry[core]);
            self.cores[core].run = CoreRun::Spin { since };
            return;
        }
        let tid = views[idx].task;
        self.cores[core].rr_cursor = (idx + 1) % views.len().max(1);
        let now = self.clock.now();
        self.tasks[tid].state = TaskState::Running;
        self.tasks[tid].run_start = now;
        let cost = self.costs.switch_ns;
        self.schedule_block(core, cost, Pending::Switch { task: tid });
    }

    fn finish_block(&mut self, core: CoreId, pending: Pending) {
        match pending {
            Pending::Switch { task } => {
                let ns = self.elapsed_block(core);
                self.charge(core, Attr::Switch, ns, false);
                match self.tasks[task].kind {
                    TaskKind::App(a) => self.start_app_program(core, a),
                    TaskKind::Stack(s) => self.start_stack_round(core, s),
                }
            }
            Pending::AppApi { app } => self.finish_app_api(core, app),
            Pending::AppChunk { app, chunk } => self.finish_app_chunk(core, app, chunk),
            Pending::StackRx {
                owner,
                pkts,
                rx_cost,
                ex_cost,
            } => self.finish_stack_rx(core, owner, pkts, rx_cost, ex_cost),
            Pending::StackTcp {
                owner,
                pkts,
                tcp_cost,
                ex_cost,
            } => self.finish_stack_tcp(core, owner, pkts, tcp_cost, ex_cost),
            Pending::StackTx {
                owner,
                pkts,
                started,
            } => self.finish_stack_tx(core, owner, pkts, started),
        }
    }

    // ---- app program ----

    fn start_app_program(&mut self, core: CoreId, app: usize) {
        let resume = matches!(&self.apps[app].exec, Some(e) if e.parked);
        if resume {
            let e = self.apps[app].exec.as_mut().unwrap();
            e.parked = false;
            e.did_work = false;
        } else {
            self.apps[app].exec = Some(AppExec::fresh());
        }
        self.start_app_stage(core, app);
    }

    pub(crate) fn start_app_stage(&mut self, core: CoreId, app: usize) {
        let exec = self.apps[app].exec.as_ref().expect("app has a program");
        match exec.stage {
            AppStage::Poll => {
                let cost = self.costs.api_poll_ns;
                self.schedule_block(core, cost, Pending::AppApi { app });
            }
            AppStage::Recv => {
                let cost = self.costs.api_recv_ns;
                self.schedule_block(core, cost, Pending::AppApi { app });
            }
            AppStage::Send => {
                let cost = self.costs.api_send_ns;
                self.schedule_block(core, cost, Pending::AppApi { app });
            }
            AppStage::Serve | AppStage::RawSeg => {
                if exec.serve_left == 0 {
                    // Zero-length segment: no checkpoints, nothing to run.
                    self.finish_segment_or_send(core, app);
                    return;
                }
                let chunk = exec.serve_cp.min(exec.serve_left);
                self.schedule_block(core, chunk, Pending::AppChunk { app, chunk });
            }
        }
    }

    fn finish_app_api(&mut self, core: CoreId, app: usize) {
        let ns = self.elapsed_block(core);
        self.charge(core, Attr::ApiCall, ns, false);
        let tid = self.apps[app].task;
        let actions = self.do_checkpoint(core, tid, false, None);
        self.queue_actions(core, app, actions);
        let exec = self.apps[app].exec.as_mut().unwrap();
        // Budget and priority yields take effect inside service segments
        // only; an API call is already a yield point.
        exec.pending_park = false;
        exec.after_inline = match exec.stage {
            AppStage::Poll => After::ResolvePoll,
            AppStage::Recv => After::ResolveRecv,
            AppStage::Send => After::ResolveSend,
            _ => After::None,
        };
        self.continue_inline_or(core, app);
    }

    fn continue_inline_or(&mut self, core: CoreId, app: usize) {
        let exec = self.apps[app].exec.as_mut().unwrap();
        if let Some(op) = exec.inline.pop_front() {
            self.start_inline_op(core, app, op);
            return;
        }
        let after = std::mem::replace(&mut exec.after_inline, After::None);
        match after {
            After::ResolvePoll => self.resolve_poll(core, app),
            After::ResolveRecv => self.resolve_recv(core, app),
            After::ContinueServe => self.continue_serve(core, app),
            After::ResolveSend => self.resolve_send(core, app),
            After::None => self.continue_serve(core, app),
        }
    }

    fn resolve_poll(&mut self, core: CoreId, app: usize) {
        match self.router.poll_one(app) {
            Ok(ev) => {
                let exec = self.apps[app].exec.as_mut().unwrap();
                exec.did_work = true;
                exec.ev = Some(ev);
                exec.stage = AppStage::Recv;
                self.start_app_stage(core, app);
            }
            Err(_) => self.end_app_slice(core, app, true),
        }
    }

    fn resolve_recv(&mut self, core: CoreId, app: usize) {
        let exec = self.apps[app].exec.as_mut().unwrap();
        let ev = exec.ev.take().expect("recv follows a polled event");
        let flow = ev.flow;
        let try_prio = self.cfg.priority.ooo_receive && ev.class == Class::High;
        let got = if try_prio {
            match self.flows.recv_priority(flow).expect("flow exists") {
                Ok(m) => Ok(m),
                Err(_) => self.flows.recv_message(flow).expect("flow exists"),
            }
        } else {
            self.flows.recv_message(flow).expect("flow exists")
        };
        match got {
            Ok(msg) => {
                let now = self.clock.now();
                let service_ns = msg.header.service_ns as Nanos;
                let rr = &mut self.requests[msg.request as usize];
                if rr.t_service_start.is_none() {
                    rr.t_service_start = Some(now);
                }
                if msg.all_high {
                    if let Some(tr) = rr.t_ready {
                        let d = now.saturating_sub(tr);
                        if self.high_dispatch_delay_max.map_or(true, |m| d > m) {
                            self.high_dispatch_delay_max = Some(d);
                        }
                    }
                }
                let exec = self.apps[app].exec.as_mut().unwrap();
                exec.cur = Some(ServeCtx {
                    request: msg.request,
                    flow,
                    class: if msg.all_high { Class::High } else { Class::Low },
                    resp_bytes: self.cfg.workload.response_bytes,
                });
                exec.serve_left = service_ns;
                exec.serve_cp = if self.cfg.checkpoint_interval_ns == 0 {
                    Nanos::MAX
                } else {
                    self.cfg.checkpoint_interval_ns
                };
                exec.stage = AppStage::Serve;
                exec.did_work = true;
                self.start_app_stage(core, app);
            }
            Err(_) => {
                // Event consumed but its message is not complete yet; the
                // completing packet's event will retry.
                self.end_app_slice(core, app, true)
            }
        }
    }

    fn finish_app_chunk(&mut self, core: CoreId, app: usize, chunk: Nanos) {
        let ns = self.elapsed_block(core);
        self.charge(core, Attr::Service, ns, false);
        let tid = self.apps[app].task;
        let (boundary, serving) = {
            let exec = self.apps[app].exec.as_mut().unwrap();
            exec.serve_left -= chunk;
            exec.did_work = true;
            (chunk == exec.serve_cp, exec.cur.map(|c| c.class))
        };
        if boundary {
            let actions = self.do_checkpoint(core, tid, true, serving);
            self.queue_actions(core, app, actions);
        }
        let exec = self.apps[app].exec.as_mut().unwrap();
        exec.after_inline = After::ContinueServe;
        self.continue_inline_or(core, app);
    }

    fn continue_serve(&mut self, core: CoreId, app: usize) {
        let tid = self.apps[app].task;
        // Inline stack work may just have surfaced a high event; yield to it
        // without waiting for the next checkpoint.
        let yield_now = {
            let exec = self.apps[app].exec.as_ref().unwrap();
            if exec.pending_park {
                true
            } else if self.thresholds.priority_check
                && exec.serve_left > 0
                && exec.cur.map(|c| c.class) == Some(Class::Low)
                && self.high_pending_other(core, tid)
            {
                self.counters.priority_yields += 1;
                true
            } else {
                false
            }
        };
        if yield_now {
            let exec = self.apps[app].exec.as_mut().unwrap();
            exec.pending_park = false;
            exec.parked = true;
            self.end_app_slice(core, app, false);
            return;
        }
        let left = self.apps[app].exec.as_ref().unwrap().serve_left;
        if left > 0 {
            self.start_app_stage(core, app);
        } else {
            self.finish_segment_or_send(core, app);
        }
    }

    fn finish_segment_or_send(&mut self, core: CoreId, app: usize) {
        let stage = self.apps[app].exec.as_ref().unwrap().stage;
        match stage {
            AppStage::RawSeg => {
                let tid = self.apps[app].task;
                if let Some((task, outcomes)) = self.seg_outcomes.take() {
                    if task == tid {
                        self.seg_result = Some(outcomes);
                    } else {
                        self.seg_outcomes = Some((task, outcomes));
                    }
                }
                self.end_app_slice(core, app, true);
            }
            _ => {
                let exec = self.apps[app].exec.as_mut().unwrap();
                exec.stage = AppStage::Send;
                self.start_app_stage(core, app);
            }
        }
    }

    fn resolve_send(&mut self, core: CoreId, app: usize) {
        let ctx = {
            let exec = self.apps[app].exec.as_mut().unwrap();
            exec.cur.take().expect("send follows a served request")
        };
        let label = match ctx.class {
            Class::High => Label::High,
            Class::Low => Label::Low,
        };
        let pkts = self
            .flows
            .send(ctx.flow, ctx.resp_bytes as u64, label, Some(ctx.request), self.cfg.mss)
            .expect("flow exists");
        let group = self.rss.group_of(ctx.flow) as usize;
        let owner = self.plan.group_to_stack[group];
        for p in pkts {
            self.stacks[owner].driver.tx_enqueue(p);
        }
        let owner_core = self.tasks[self.stacks[owner].task].core;
        self.wake_core(owner_core);
        let exec = self.apps[app].exec.as_mut().unwrap();
        exec.did_work = true;
        self.end_app_slice(core, app, true);
    }

    fn end_app_slice(&mut self, core: CoreId, app: usize, done: bool) {
        let tid = self.apps[app].task;
        let did_work = self.apps[app].exec.as_ref().map_or(false, |e| e.did_work);
        if done {
            self.apps[app].exec = None;
        }
        self.end_slice_common(core, tid, did_work);
    }

    // ---- stack program ----

    fn start_stack_round(&mut self, core: CoreId, s: usize) {
        self.stacks[s].exec = Some(StackExec {
            phase: StackPhase::Rx,
            qpos: 0,
            did_work: false,
        });
        // Protocol timer sweep is a cost hook only.
        let timer = self.costs.tcp_timer_check_ns;
        if timer > 0 {
            self.charge(core, Attr::TcpWork, timer, false);
            self.carry[core] += timer;
        }
        self.stack_next(core, s);
    }

    fn stack_next(&mut self, core: CoreId, s: usize) {
        let phase = self.stacks[s].exec.as_ref().expect("stack running").phase;
        match phase {
            StackPhase::Rx => {
                let qpos = self.stacks[s].exec.as_ref().unwrap().qpos;
                if qpos >= self.stacks[s].queues.len() {
                    self.stacks[s].exec.as_mut().unwrap().phase = StackPhase::Tcp;
                    self.stack_next(core, s);
                    return;
                }
                let q = self.stacks[s].queues[qpos];
                self.stacks[s].exec.as_mut().unwrap().qpos = qpos + 1;
                let len = self.nic_queues[q].len();
                let (pkts, rx_cost) = self.nic_queues[q].rx_burst(len.max(1));
                let ex_cost = if self.registry.driver.is_some() {
                    pkts.len() as Nanos * self.costs.driver_extraction_ns
                } else {
                    0
                };
                self.schedule_block(
                    core,
                    rx_cost + ex_cost,
                    Pending::StackRx {
                        owner: Owner::Slice(s),
                        pkts,
                        rx_cost,
                        ex_cost,
                    },
                );
            }
            StackPhase::Tcp => {
                let pkts = self.stacks[s].driver.rx_pop(64);
                self.cores[core].check_state.last_tcp_process = self.clock.now();
                if pkts.is_empty() {
                    self.stacks[s].exec.as_mut().unwrap().phase = StackPhase::Tx;
                    self.stack_next(core, s);
                    return;
                }
                let (tcp_cost, ex_cost) = self.tcp_batch_cost(&pkts);
                self.schedule_block(
                    core,
                    tcp_cost + ex_cost,
                    Pending::StackTcp {
                        owner: Owner::Slice(s),
                        pkts,
                        tcp_cost,
                        ex_cost,
                    },
                );
            }
            StackPhase::Tx => {
                let pkts = self.stacks[s].driver.tx_pop(64);
                if pkts.is_empty() {
                    self.end_stack_slice(core, s);
                    return;
                }
                let cost = pkts.len() as Nanos * self.costs.tx_per_packet_ns;
                let started = self.clock.now() + self.carry[core];
                self.schedule_block(
                    core,
                    cost,
                    Pending::StackTx {
                        owner: Owner::Slice(s),
                        pkts,
                        started,
                    },
                );
            }
        }
    }

    fn tcp_batch_cost(&self, pkts: &[Packet]) -> (Nanos, Nanos) {
        let n = pkts.len() as Nanos;
        let tcp = n * self.costs.tcp_per_packet_ns;
        let ex = pkts
            .iter()
            .filter(|p| {
                self.flows
                    .flow(p.flow)
                    .map(|f| f.extraction.is_some())
                    .unwrap_or(false)
            })
            .count() as Nanos
            * self.costs.tcp_extraction_ns;
        (tcp, ex)
    }

    fn finish_stack_rx(
        &mut self,
        core: CoreId,
        owner: Owner,
        pkts: Vec<Packet>,
        rx_cost: Nanos,
        ex_cost: Nanos,
    ) {
        self.charge(core, Attr::RxPoll, rx_cost, false);
        self.charge(core, Attr::Extraction, ex_cost, false);
        let s = owner.stack();
        let n = pkts.len();
        classify_into(
            pkts,
            self.registry.driver.as_ref(),
            &mut self.stacks[s].driver,
            0,
        );
        self.cores[core].check_state.last_nic_check = self.clock.now();
        if n > 0 {
            self.mark_work(owner);
        }
        match owner {
            Owner::Inline { app, .. } => self.continue_inline_or(core, app),
            Owner::Slice(s) => self.stack_next(core, s),
        }
    }

    fn finish_stack_tcp(
        &mut self,
        core: CoreId,
        owner: Owner,
        pkts: Vec<Packet>,
        tcp_cost: Nanos,
        ex_cost: Nanos,
    ) {
        self.charge(core, Attr::TcpWork, tcp_cost, false);
        self.charge(core, Attr::Extraction, ex_cost, false);
        let s = owner.stack();
        let now = self.clock.now();
        let ooo = self.cfg.priority.ooo_receive;
        let outcomes = self
            .flows
            .process_batch(pkts, &mut self.router, s, now, ooo);
        for o in &outcomes {
            let Some(rr) = self.requests.get_mut(o.request as usize) else {
                continue;
            };
            rr.pkts_processed += 1;
            if o.label == Label::High {
                rr.pkts_high_labeled += 1;
                if o.first_of_msg {
                    rr.first_pkt_high = true;
                }
            }
            if o.completed_msg && rr.t_ready.is_none() {
                rr.t_ready = Some(now);
            }
        }
        self.counters.tcp_batches += 1;
        self.cores[core].check_state.last_tcp_process = now;
        if !outcomes.is_empty() {
            self.mark_work(owner);
        }
        self.wake_pending_consumers();
        match owner {
            Owner::Inline { app, .. } => self.continue_inline_or(core, app),
            Owner::Slice(s) => {
                self.stacks[s].exec.as_mut().unwrap().phase = StackPhase::Tx;
                self.stack_next(core, s);
            }
        }
    }

    fn finish_stack_tx(
        &mut self,
        core: CoreId,
        owner: Owner,
        pkts: Vec<TxPacket>,
        started: Nanos,
    ) {
        let ns = self.elapsed_block(core);
        self.charge(core, Attr::TxWork, ns, false);
        let per = self.costs.tx_per_packet_ns;
        for (i, p) in pkts.iter().enumerate() {
            if p.last_of_request {
                if let Some(r) = p.request {
                    let t_leave = started + (i as Nanos + 1) * per;
                    self.complete_request(r, t_leave);
                }
            }
        }
        if !pkts.is_empty() {
            self.mark_work(owner);
        }
        match owner {
            Owner::Inline { app, .. } => self.continue_inline_or(core, app),
            Owner::Slice(s) => self.end_stack_slice(core, s),
        }
    }

    fn mark_work(&mut self, owner: Owner) {
        match owner {
            Owner::Slice(s) => {
                if let Some(e) = self.stacks[s].exec.as_mut() {
                    e.did_work = true;
                }
            }
            Owner::Inline { app, .. } => {
                if let Some(e) = self.apps[app].exec.as_mut() {
                    e.did_work = true;
                }
            }
        }
    }

    fn end_stack_slice(&mut self, core: CoreId, s: usize) {
        let did_work = self
            .stacks[s]
            .exec
            .take()
            .map(|e| e.did_work)
            .unwrap_or(false);
        let tid = self.stacks[s].task;
        self.end_slice_common(core, tid, did_work);
    }

    // ---- shared slice teardown ----

    fn end_slice_common(&mut self, core: CoreId, tid: TaskId, did_work: bool) {
        let now = self.clock.now();
        let run_len = now.saturating_sub(self.tasks[tid].run_start);
        if run_len > self.counters.max_continuous_run_ns {
            self.counters.max_continuous_run_ns = run_len;
        }
        if self.tasks[tid].draining && !self.task_has_work(tid) {
            self.tasks[tid].state = TaskState::Suspended;
            self.tasks[tid].draining = false;
        } else {
            self.tasks[tid].state = TaskState::Runnable;
        }
        if let Some(target) = self.pending_moves[tid].take() {
            let old = self.tasks[tid].core;
            self.cores[old].run_queue.retain(|&t| t != tid);
            if self.cores[old].rr_cursor >= self.cores[old].run_queue.len().max(1) {
                self.cores[old].rr_cursor = 0;
            }
            self.tasks[tid].core = target;
            self.cores[target].run_queue.push(tid);
            self.task_moved_notice += 1;
            self.wake_core(target);
        }
        if did_work {
            self.cores[core].idle_slices = 0;
        } else {
            self.cores[core].idle_slices += 1;
        }
        self.dispatch_and_start(core);
    }

    // ---- checkpoints ----

    /// One checkpoint: charge its cost, evaluate triggers, log the outcome
    /// when a segment harness is recording.
    pub(crate) fn do_checkpoint(
        &mut self,
        core: CoreId,
        tid: TaskId,
        in_segment: bool,
        serving: Option<Class>,
    ) -> Vec<CheckAction> {
        let now = self.clock.now();
        let cost = self.thresholds.check_cost_ns;
        self.charge(core, Attr::Check, cost, in_segment);
        self.carry[core] += cost;
        self.counters.checks += 1;
        let input = CheckInput {
            now,
            run_start: self.tasks[tid].run_start,
            serving_low: serving == Some(Class::Low),
            high_pending: self.high_pending_other(core, tid),
            has_stack: self.stack_on_core(core).is_some(),
        };
        let actions = check(&self.thresholds, &self.cores[core].check_state, &input);
        if in_segment {
            if let Some((task, outcomes)) = self.seg_outcomes.as_mut() {
                if *task == tid {
                    outcomes.push(CheckOutcome {
                        at: now,
                        actions: actions.clone(),
                    });
                }
            }
        }
        actions
    }

    fn queue_actions(&mut self, core: CoreId, app: usize, actions: Vec<CheckAction>) {
        if actions.is_empty() {
            return;
        }
        let stack = self.stack_on_core(core);
        let queues: Vec<QueueId> = stack
            .map(|s| self.stacks[s].queues.clone())
            .unwrap_or_default();
        let exec = self.apps[app].exec.as_mut().unwrap();
        for a in actions {
            match a {
                CheckAction::DrainNic => {
                    self.counters.drains += 1;
                    for &q in &queues {
                        exec.inline.push_back(InlineOp::Rx(q));
                    }
                    if queues.is_empty() {
                        // Nothing mapped here; note the check time anyway.
                        self.cores[core].check_state.last_nic_check = self.clock.now();
                    }
                }
                CheckAction::TcpBatch => {
                    exec.inline.push_back(InlineOp::TcpBatch);
                    exec.inline.push_back(InlineOp::TxFlush);
                }
                CheckAction::Reschedule => {
                    self.counters.reschedules += 1;
                    exec.pending_park = true;
                }
                CheckAction::PriorityYield => {
                    self.counters.priority_yields += 1;
                    exec.pending_park = true;
                }
            }
        }
    }

    fn start_inline_op(&mut self, core: CoreId, app: usize, op: InlineOp) {
        let Some(s) = self.stack_on_core(core) else {
            self.continue_inline_or(core, app);
            return;
        };
        match op {
            InlineOp::Rx(q) => {
                let len = self.nic_queues[q].len();
                let (pkts, rx_cost) = self.nic_queues[q].rx_burst(len.max(1));
                let ex_cost = if self.registry.driver.is_some() {
                    pkts.len() as Nanos * self.costs.driver_extraction_ns
                } else {
                    0
                };
                self.schedule_block(
                    core,
                    rx_cost + ex_cost,
                    Pending::StackRx {
                        owner: Owner::Inline { app, stack: s },
                        pkts,
                        rx_cost,
                        ex_cost,
                    },
                );
            }
            InlineOp::TcpBatch => {
                let pkts = self.stacks[s].driver.rx_pop(64);
                self.cores[core].check_state.last_tcp_process = self.clock.now();
                if pkts.is_empty() {
                    self.continue_inline_or(core, app);
                    return;
                }
                let (tcp_cost, ex_cost) = self.tcp_batch_cost(&pkts);
                self.schedule_block(
                    core,
                    tcp_cost + ex_cost,
                    Pending::StackTcp {
                        owner: Owner::Inline { app, stack: s },
                        pkts,
                        tcp_cost,
                        ex_cost,
                    },
                );
            }
            InlineOp::TxFlush => {
                let pkts = self.stacks[s].driver.tx_pop(64);
                if pkts.is_empty() {
                    self.continue_inline_or(core, app);
                    return;
                }
                let cost = pkts.len() as Nanos * self.costs.tx_per_packet_ns;
                let started = self.clock.now() + self.carry[core];
                self.schedule_block(
                    core,
                    cost,
                    Pending::StackTx {
                        owner: Owner::Inline { app, stack: s },
                        pkts,
                        started,
                    },
                );
            }
        }
    }
}
