//! Engine primitives: the event calendar, logical cores, coroutine tasks and
//! the dispatch rule. Cores are logical resources of a single-threaded
//! engine; "parallel" cores interleave through the calendar in time order
//! with insertion-order tie-breaking, which makes every run reproducible.

use crate::fastpath::CheckState;
use crate::time::Nanos;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

pub type TaskId = usize;
pub type CoreId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreRole {
    Idle,
    AppOnly,
    StackOnly,
    Shared,
}

impl CoreRole {
    pub fn letter(self) -> char {
        match self {
            CoreRole::Idle => '.',
            CoreRole::AppOnly => 'A',
            CoreRole::StackOnly => 'S',
            CoreRole::Shared => 'B',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Network stack coroutine; the payload is its stack index.
    Stack(usize),
    /// Application coroutine; the payload is its app index.
    App(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Runnable,
    Running,
    Suspended,
}

/// Dispatch-level class binding of an app coroutine, mirroring its event
/// bindings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    High,
    Low,
    Any,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub core: CoreId,
    pub state: TaskState,
    /// Still dispatchable, but suspends once its local backlog is drained.
    pub draining: bool,
    /// Timestamp of the current dispatch.
    pub run_start: Nanos,
    pub binding: Binding,
}

/// Execution state of a core on the calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreRun {
    /// No coroutines to run; not busy-polling.
    Off,
    /// Busy-polling with nothing to do; time is charged lazily on wake.
    Spin { since: Nanos },
    /// A dispatch decision is scheduled.
    Waking,
    /// Executing a timed block that ends at the scheduled step.
    Busy,
}

#[derive(Debug)]
pub struct Core {
    pub id: CoreId,
    pub role: CoreRole,
    /// Tasks hosted on this core, in dispatch scan order.
    pub run_queue: Vec<TaskId>,
    pub rr_cursor: usize,
    pub run: CoreRun,
    pub check_state: CheckState,
    pub busy_ns: Nanos,
    /// Consecutive dispatch slices that found no work, for spin detection.
    pub idle_slices: usize,
}

impl Core {
    pub fn new(id: CoreId) -> Self {
        Core {
            id,
            role: CoreRole::Idle,
            run_queue: Vec::new(),
            rr_cursor: 0,
            run: CoreRun::Off,
            check_state: CheckState::default(),
            busy_ns: 0,
            idle_slices: 0,
        }
    }
}

/// Snapshot of one hosted task used by the dispatch rule.
#[derive(Debug, Clone, Copy)]
pub struct TaskView {
    pub task: TaskId,
    pub runnable: bool,
    pub is_stack: bool,
    pub binding: Binding,
    /// A high-priority event is pending for this task.
    pub has_high: bool,
    /// The task has any pending work (events, parked service, packets).
    pub has_work: bool,
    /// Stack only: the NIC-drain deadline for this core has expired.
    pub nic_deadline_expired: bool,
    /// Stack only: its NIC rings hold packets.
    pub nic_backlog: bool,
}

/// Round-robin dispatch with two carve-outs: a stack task whose NIC-drain
/// deadline expired while packets wait is picked first, and when event
/// priority is enabled the task with the oldest pending high event goes
/// ahead of the rotation. A class-bound task whose matching queue is empty
/// is skipped while some other task has pending work.
///
/// Returns the index into `views` of the chosen task.
pub fn pick_next(views: &[TaskView], cursor: usize, event_prio: bool) -> Option<usize> {
    let n = views.len();
    if n == 0 || !views.iter().any(|v| v.runnable) {
        return None;
    }
    if let Some(i) = views
        .iter()
        .position(|v| v.runnable && v.is_stack && v.nic_deadline_expired && v.nic_backlog)
    {
        return Some(i);
    }
    if event_prio {
        // Scan in rotation order so equal-priority consumers still rotate.
        for off in 0..n {
            let i = (cursor + off) % n;
            if views[i].runnable && v_high(&views[i]) {
                return Some(i);
            }
        }
    }
    let any_other_work = |skip: usize| views.iter().enumerate().any(|(j, v)| j != skip && v.runnable && v.has_work);
    let mut fallback = None;
    for off in 0..n {
        let i = (cursor + off) % n;
        let v = &views[i];
        if !v.runnable {
            continue;
        }
        if fallback.is_none() {
            fallback = Some(i);
        }
        let starved_binding = match v.binding {
            Binding::High => !v.has_high && any_other_work(i),
            Binding::Low => !v.has_work && any_other_work(i),
            Binding::Any => false,
        };
        if starved_binding {
            continue;
        }
        return Some(i);
    }
    fallback
}

fn v_high(v: &TaskView) -> bool {
    v.has_high && !v.is_stack
}

/// Calendar entries, executed in (time, insertion) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalEntry {
    /// Index into the arrival schedule.
    Arrival(usize),
    /// Index into the injected-arrival table (test harness traffic).
    InjectedArrival(usize),
    CoreStep(CoreId),
    PeriodTick,
    /// User timer with an opaque id.
    Timer(u64),
    EndOfRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalKey {
    pub t: Nanos,
    pub seq: u64,
    pub entry: CalEntry,
}

impl Ord for CalKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

impl PartialOrd for CalKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct Calendar {
    heap: BinaryHeap<Reverse<CalKey>>,
    seq: u64,
}

impl Calendar {
    pub fn push(&mut self, t: Nanos, entry: CalEntry) {
        let key = CalKey {
            t,
            seq: self.seq,
            entry,
        };
        self.seq += 1;
        self.heap.push(Reverse(key));
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|Reverse(k)| k.t)
    }

    pub fn pop(&mut self) -> Option<CalKey> {
        self.heap.pop().map(|Reverse(k)| k)
    }

    pub fn pop_at_or_before(&mut self, t: Nanos) -> Option<CalKey> {
        match self.peek_time() {
            Some(pt) if pt <= t => self.pop(),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

/// A block of virtual CPU work with embedded checkpoints every
/// `checkpoint_interval` nanoseconds of progress. An interval of
/// `Nanos::MAX` means no intra-segment checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkSegment {
    pub duration: Nanos,
    pub checkpoint_interval: Nanos,
}

impl WorkSegment {
    pub fn new(duration: Nanos, checkpoint_interval: Nanos) -> Self {
        debug_assert!(checkpoint_interval > 0);
        WorkSegment {
            duration,
            checkpoint_interval,
        }
    }

    pub fn uncheckpointed(duration: Nanos) -> Self {
        WorkSegment {
            duration,
            checkpoint_interval: Nanos::MAX,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(task: TaskId) -> TaskView {
        TaskView {
            task,
            runnable: true,
            is_stack: false,
            binding: Binding::Any,
            has_high: false,
            has_work: false,
            nic_deadline_expired: false,
            nic_backlog: false,
        }
    }

    #[test]
    fn round_robin_alternates() {
        let views = vec![view(0), view(1)];
        // Last ran task 0, cursor points past it.
        assert_eq!(pick_next(&views, 1, false), Some(1));
        assert_eq!(pick_next(&views, 0, false), Some(0));
    }

    #[test]
    fn all_suspended_yields_none() {
        let mut views = vec![view(0), view(1)];
        views[0].runnable = false;
        views[1].runnable = false;
        assert_eq!(pick_next(&views, 0, false), None);
    }

    #[test]
    fn expired_stack_deadline_preempts_rotation() {
        let mut views = vec![view(0), view(1)];
        views[0].is_stack = true;
        views[0].nic_deadline_expired = true;
        views[0].nic_backlog = true;
        views[1].has_work = true;
        // Rotation would pick task 1, the stack goes first.
        assert_eq!(pick_next(&views, 1, false), Some(0));
    }

    #[test]
    fn stack_without_backlog_does_not_preempt() {
        let mut views = vec![view(0), view(1)];
        views[0].is_stack = true;
        views[0].nic_deadline_expired = true;
        assert_eq!(pick_next(&views, 1, false), Some(1));
    }

    #[test]
    fn high_bound_task_skipped_when_starved() {
        let mut views = vec![view(0), view(1)];
        views[0].binding = Binding::High;
        views[1].has_work = true;
        assert_eq!(pick_next(&views, 0, false), Some(1));
        // With a pending high event it is dispatched normally.
        views[0].has_high = true;
        views[0].has_work = true;
        assert_eq!(pick_next(&views, 0, false), Some(0));
    }

    #[test]
    fn event_prio_prefers_high_pending_consumer() {
        let mut views = vec![view(0), view(1)];
        views[0].has_work = true;
        views[1].has_high = true;
        views[1].has_work = true;
        assert_eq!(pick_next(&views, 0, true), Some(1));
        // Without the toggle the rotation wins.
        assert_eq!(pick_next(&views, 0, false), Some(0));
    }

    #[test]
    fn calendar_orders_by_time_then_insertion() {
        let mut cal = Calendar::default();
        cal.push(50, CalEntry::Arrival(0));
        cal.push(50, CalEntry::Arrival(1));
        cal.push(10, CalEntry::Timer(9));
        assert_eq!(cal.pop().unwrap().entry, CalEntry::Timer(9));
        assert_eq!(cal.pop().unwrap().entry, CalEntry::Arrival(0));
        assert_eq!(cal.pop().unwrap().entry, CalEntry::Arrival(1));
        assert!(cal.pop().is_none());
    }
}
