//! Latency percentile accounting, drop counters and CPU-efficiency
//! bookkeeping. Latencies go into a fixed-layout histogram: 1 µs buckets
//! up to 1 ms, then power-of-two buckets. Percentiles are nearest-rank over
//! the buckets, so a reported percentile is exact to one bucket width.

use crate::nic::Class;
use crate::time::Nanos;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no samples recorded for this class")]
    NoSamples,
    #[error("no cycles accounted yet")]
    NoCycles,
}

const LINEAR_BUCKETS: usize = 1000; // 1 µs resolution below 1 ms
const LOG_BUCKETS: usize = 26; // 1 ms * 2^k up to ~67 s, then overflow

/// Fixed-resolution latency histogram with exact count/sum/min/max.
#[derive(Debug, Clone)]
pub struct LatencyHistogram {
    linear: Vec<u64>,
    log: Vec<u64>,
    overflow: u64,
    count: u64,
    sum: u128,
    min: Nanos,
    max: Nanos,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            linear: vec![0; LINEAR_BUCKETS],
            log: vec![0; LOG_BUCKETS],
            overflow: 0,
            count: 0,
            sum: 0,
            min: Nanos::MAX,
            max: 0,
        }
    }
}

impl LatencyHistogram {
    pub fn record(&mut self, latency: Nanos) {
        self.count += 1;
        self.sum += latency as u128;
        self.min = self.min.min(latency);
        self.max = self.max.max(latency);
        let micros = latency / 1_000;
        if (micros as usize) < LINEAR_BUCKETS {
            self.linear[micros as usize] += 1;
            return;
        }
        let over = latency / 1_000_000; // >= 1
        let k = 63 - over.leading_zeros() as usize; // floor(log2(ms))
        if k < LOG_BUCKETS {
            self.log[k] += 1;
        } else {
            self.overflow += 1;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean_ns(&self) -> Option<Nanos> {
        if self.count == 0 {
            None
        } else {
            Some((self.sum / self.count as u128) as Nanos)
        }
    }

    pub fn min_ns(&self) -> Option<Nanos> {
        (self.count > 0).then_some(self.min)
    }

    pub fn max_ns(&self) -> Option<Nanos> {
        (self.count > 0).then_some(self.max)
    }

    /// Nearest-rank percentile, reported as the lower bound of the bucket
    /// holding that rank.
    pub fn percentile(&self, q: f64) -> Result<Nanos, MetricsError> {
        if self.count == 0 {
            return Err(MetricsError::NoSamples);
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut cum = 0u64;
        for (i, &n) in self.linear.iter().enumerate() {
            cum += n;
            if cum >= rank {
                return Ok(i as Nanos * 1_000);
            }
        }
        for (k, &n) in self.log.iter().enumerate() {
            cum += n;
            if cum >= rank {
                return Ok(1_000_000u64 << k);
            }
        }
        Ok(self.max)
    }

    pub fn p99(&self) -> Result<Nanos, MetricsError> {
        self.percentile(0.99)
    }

    pub fn p50(&self) -> Result<Nanos, MetricsError> {
        self.percentile(0.50)
    }

    /// Fewer than 100 samples make a 99th percentile statistically weak.
    pub fn low_confidence(&self) -> bool {
        self.count < 100
    }
}

/// Where each charged nanosecond of core time went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attr {
    /// Application service work; the numerator of CPU efficiency.
    Service,
    /// Checkpoint checks.
    Check,
    /// Checkpoint checks taken at intra-segment boundaries.
    ApiCall,
    RxPoll,
    TcpWork,
    TxWork,
    Extraction,
    Switch,
    Spin,
}

/// CPU cycle accounting per the efficiency definition: `app_ns` is time in
/// application service work, `total_ns` is everything charged to stack and
/// app coroutines including empty polls, checks, switches and spinning.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CpuAccount {
    pub app_ns: Nanos,
    pub total_ns: Nanos,
    pub check_ns: Nanos,
    /// Subset of `check_ns` charged at intra-segment checkpoints.
    pub segment_check_ns: Nanos,
    pub api_ns: Nanos,
    pub rx_poll_ns: Nanos,
    pub tcp_ns: Nanos,
    pub tx_ns: Nanos,
    pub extraction_ns: Nanos,
    pub switch_ns: Nanos,
    pub spin_ns: Nanos,
}

impl CpuAccount {
    pub fn charge(&mut self, attr: Attr, ns: Nanos, in_segment: bool) {
        self.total_ns += ns;
        match attr {
            Attr::Service => self.app_ns += ns,
            Attr::Check => {
                self.check_ns += ns;
                if in_segment {
                    self.segment_check_ns += ns;
                }
            }
            Attr::ApiCall => self.api_ns += ns,
            Attr::RxPoll => self.rx_poll_ns += ns,
            Attr::TcpWork => self.tcp_ns += ns,
            Attr::TxWork => self.tx_ns += ns,
            Attr::Extraction => self.extraction_ns += ns,
            Attr::Switch => self.switch_ns += ns,
            Attr::Spin => self.spin_ns += ns,
        }
    }

    /// η = app cycles / total cycles, in [0, 1].
    pub fn efficiency(&self) -> Result<f64, MetricsError> {
        if self.total_ns == 0 {
            return Err(MetricsError::NoCycles);
        }
        Ok(self.app_ns as f64 / self.total_ns as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub count: u64,
    pub p50_ns: Option<Nanos>,
    pub p99_ns: Option<Nanos>,
    pub mean_ns: Option<Nanos>,
    pub min_ns: Option<Nanos>,
    pub max_ns: Option<Nanos>,
    pub low_confidence: bool,
}

impl ClassReport {
    pub fn from_hist(h: &LatencyHistogram) -> Self {
        ClassReport {
            count: h.count(),
            p50_ns: h.p50().ok(),
            p99_ns: h.p99().ok(),
            mean_ns: h.mean_ns(),
            min_ns: h.min_ns(),
            max_ns: h.max_ns(),
            low_confidence: h.low_confidence(),
        }
    }
}

/// Completion histograms for one measurement window.
#[derive(Debug, Clone, Default)]
pub struct ClassHists {
    pub high: LatencyHistogram,
    pub low: LatencyHistogram,
    pub all: LatencyHistogram,
}

impl ClassHists {
    pub fn record(&mut self, class: Class, latency: Nanos) {
        match class {
            Class::High => self.high.record(latency),
            Class::Low => self.low.record(latency),
        }
        self.all.record(latency);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples_give_constant_p99() {
        let mut h = LatencyHistogram::default();
        for _ in 0..100 {
            h.record(5_000);
        }
        assert_eq!(h.p99().unwrap(), 5_000);
    }

    #[test]
    fn nearest_rank_over_uniform_ladder() {
        let mut h = LatencyHistogram::default();
        for us in 1..=100u64 {
            h.record(us * 1_000);
        }
        assert_eq!(h.p99().unwrap(), 99_000);
        assert_eq!(h.p50().unwrap(), 50_000);
    }

    #[test]
    fn empty_class_is_an_error() {
        let h = LatencyHistogram::default();
        assert_eq!(h.p99(), Err(MetricsError::NoSamples));
    }

    // Bucketed percentile matches a full-sort oracle to one bucket width.
    #[test]
    fn percentile_matches_sort_oracle_within_bucket() {
        let mut h = LatencyHistogram::default();
        let mut samples = Vec::new();
        let mut state = 42u64;
        for _ in 0..10_000 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let v = state % 3_000_000; // up to 3 ms, spans both regions
            samples.push(v);
            h.record(v);
        }
        samples.sort_unstable();
        let rank = (0.99f64 * samples.len() as f64).ceil() as usize;
        let oracle = samples[rank - 1];
        let got = h.p99().unwrap();
        let width = if oracle < 1_000_000 {
            1_000
        } else {
            // Power-of-two bucket containing the oracle.
            1_000_000u64 << (63 - (oracle / 1_000_000).leading_zeros())
        };
        assert!(got <= oracle);
        assert!(oracle - got <= width, "p99 {got} vs oracle {oracle}");
    }

    #[test]
    fn low_sample_counts_are_flagged() {
        let mut h = LatencyHistogram::default();
        for _ in 0..99 {
            h.record(1_000);
        }
        assert!(h.low_confidence());
        h.record(1_000);
        assert!(!h.low_confidence());
    }

    #[test]
    fn efficiency_basics() {
        let mut acc = CpuAccount::default();
        assert_eq!(acc.efficiency(), Err(MetricsError::NoCycles));
        acc.charge(Attr::Service, 50, false);
        acc.charge(Attr::RxPoll, 50, false);
        assert_eq!(acc.efficiency().unwrap(), 0.5);
    }

    #[test]
    fn idle_spin_only_is_zero_efficiency() {
        let mut acc = CpuAccount::default();
        acc.charge(Attr::Spin, 10_000, false);
        assert_eq!(acc.efficiency().unwrap(), 0.0);
    }

    #[test]
    fn efficiency_never_exceeds_one() {
        let mut acc = CpuAccount::default();
        acc.charge(Attr::Service, 1_000_000, false);
        acc.charge(Attr::Check, 22, true);
        let eta = acc.efficiency().unwrap();
        assert!(eta < 1.0 && eta > 0.99);
    }
}
