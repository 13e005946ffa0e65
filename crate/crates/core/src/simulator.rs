//! Discrete-event simulation of the split inference pipeline.
//!
//! Requests arrive as a Poisson process and flow through three single-server
//! FIFO stages with deterministic service times: device 1, the link, then
//! device 2. Queues are unbounded.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::Serialize;

use crate::cost::CostBreakdown;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("InvalidSimConfig: {0}")]
    InvalidConfig(String),
}

/// Deterministic service time of each stage, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageTimes {
    pub stage1: f64,
    pub link: f64,
    pub stage2: f64,
}

impl StageTimes {
    pub fn new(stage1: f64, link: f64, stage2: f64) -> Self {
        StageTimes { stage1, link, stage2 }
    }

    /// `(t1, t3, t2)` of an analytical cost breakdown, in pipeline order.
    pub fn from_cost<T: Scalar>(cost: &CostBreakdown<T>) -> Self {
        StageTimes::new(cost.t1.as_f64(), cost.t3.as_f64(), cost.t2.as_f64())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.stage1, self.link, self.stage2]
    }

    pub fn total(&self) -> f64 {
        self.stage1 + self.link + self.stage2
    }

    /// Saturated throughput of the pipeline, `1 / max stage time`.
    pub fn bottleneck_rate(&self) -> f64 {
        1.0 / self.stage1.max(self.link).max(self.stage2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    /// Requests per second.
    pub arrival_rate: f64,
    pub service_times: StageTimes,
    /// Simulated seconds.
    pub horizon: f64,
    /// Statistics ignore everything before this time.
    pub warmup: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Config with the default warmup of 10% of the horizon.
    pub fn new(arrival_rate: f64, service_times: StageTimes, horizon: f64, seed: u64) -> Self {
        SimConfig {
            arrival_rate,
            service_times,
            horizon,
            warmup: 0.1 * horizon,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("arrival_rate", self.arrival_rate)?;
        positive("service_times.stage1", self.service_times.stage1)?;
        positive("service_times.link", self.service_times.link)?;
        positive("service_times.stage2", self.service_times.stage2)?;
        positive("horizon", self.horizon)?;
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(SimError::InvalidConfig(format!(
                "warmup must lie in [0, horizon), got {}",
                self.warmup
            )));
        }
        Ok(())
    }
}

/// Timeline of one completed request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: usize,
    pub arrival: f64,
    pub start1: f64,
    pub end1: f64,
    pub end_link: f64,
    pub end2: f64,
}

impl RequestRecord {
    pub fn response_time(&self) -> f64 {
        self.end2 - self.arrival
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResponseStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    /// Completions per second inside the measurement window.
    pub throughput: f64,
    /// `None` when nothing completed inside the window.
    pub response_time: Option<ResponseStats>,
    /// Time-averaged number of requests at each stage (waiting or in service).
    pub queue_occupancy: [f64; 3],
    /// Time-averaged number of requests anywhere in the pipeline.
    pub mean_in_system: f64,
    /// Completions inside the measurement window.
    pub completed: usize,
    /// True when `completed == 0`.
    pub empty: bool,
    pub arrivals_total: usize,
    pub completed_total: usize,
    /// Requests in service at the horizon.
    pub in_flight: usize,
    /// Requests waiting in a queue at the horizon.
    pub queued: usize,
    /// Every completed request, in id order.
    #[serde(skip)]
    pub requests: Vec<RequestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival,
    Finish(usize),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event; `seq` keeps ties FIFO.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct Stage {
    queue: VecDeque<usize>,
    busy: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Progress {
    arrival: f64,
    start: [f64; 3],
    end: [f64; 3],
}

struct Engine {
    service: [f64; 3],
    heap: BinaryHeap<Event>,
    seq: u64,
    stages: [Stage; 3],
    counts: [usize; 3],
    progress: Vec<Progress>,
    completed: Vec<usize>,
}

impl Engine {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn enter(&mut self, stage: usize, id: usize, now: f64) {
        self.counts[stage] += 1;
        if self.stages[stage].busy.is_none() {
            self.start(stage, id, now);
        } else {
            self.stages[stage].queue.push_back(id);
        }
    }

    fn start(&mut self, stage: usize, id: usize, now: f64) {
        self.stages[stage].busy = Some(id);
        self.progress[id].start[stage] = now;
        self.schedule(now + self.service[stage], EventKind::Finish(stage));
    }

    fn finish(&mut self, stage: usize, now: f64) {
        let id = self.stages[stage].busy.take().expect("finish event for an idle stage");
        self.progress[id].end[stage] = now;
        self.counts[stage] -= 1;
        if stage + 1 < 3 {
            self.enter(stage + 1, id, now);
        } else {
            self.completed.push(id);
        }
        if let Some(next) = self.stages[stage].queue.pop_front() {
            self.start(stage, next, now);
        }
    }
}

/// Runs one simulation. Deterministic for a given config.
pub fn run(config: &SimConfig) -> Result<SimReport, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inter_arrival = Exp::new(config.arrival_rate).map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let mut engine = Engine {
        service: config.service_times.as_array(),
        heap: BinaryHeap::new(),
        seq: 0,
        stages: Default::default(),
        counts: [0; 3],
        progress: Vec::new(),
        completed: Vec::new(),
    };
    let first: f64 = rng.sample(inter_arrival);
    engine.schedule(first, EventKind::Arrival);

    let (warmup, horizon) = (config.warmup, config.horizon);
    let clip = |t: f64| t.clamp(warmup, horizon);
    let mut area = [0.0_f64; 3];
    let mut last = 0.0_f64;
    let mut window_completions = 0usize;
    let mut responses = Vec::new();

    while let Some(event) = engine.heap.pop() {
        if event.time > horizon {
            break;
        }
        let dt = clip(event.time) - clip(last);
        for (a, c) in area.iter_mut().zip(engine.counts) {
            *a += c as f64 * dt;
        }
        last = event.time;
        match event.kind {
            EventKind::Arrival => {
                let id = engine.progress.len();
                engine.progress.push(Progress {
                    arrival: event.time,
                    ..Progress::default()
                });
                engine.enter(0, id, event.time);
                let gap: f64 = rng.sample(inter_arrival);
                engine.schedule(event.time + gap, EventKind::Arrival);
            }
            EventKind::Finish(stage) => {
                let before = engine.completed.len();
                engine.finish(stage, event.time);
                if engine.completed.len() > before && event.time >= warmup {
                    let id = *engine.completed.last().expect("just completed");
                    window_completions += 1;
                    responses.push(event.time - engine.progress[id].arrival);
                }
            }
        }
    }
    let dt = horizon - clip(last);
    for (a, c) in area.iter_mut().zip(engine.counts) {
        *a += c as f64 * dt;
    }

    let window = horizon - warmup;
    let queue_occupancy = area.map(|a| a / window);
    let in_flight = engine.stages.iter().filter(|s| s.busy.is_some()).count();
    let queued = engine.stages.iter().map(|s| s.queue.len()).sum();

    let requests = engine
        .completed
        .iter()
        .map(|&id| {
            let p = engine.progress[id];
            RequestRecord {
                id,
                arrival: p.arrival,
                start1: p.start[0],
                end1: p.end[0],
                end_link: p.end[1],
                end2: p.end[2],
            }
        })
        .collect();

    Ok(SimReport {
        throughput: window_completions as f64 / window,
        response_time: response_stats(&mut responses),
        queue_occupancy,
        mean_in_system: queue_occupancy.iter().sum(),
        completed: window_completions,
        empty: window_completions == 0,
        arrivals_total: engine.progress.len(),
        completed_total: engine.completed.len(),
        in_flight,
        queued,
        requests,
    })
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn response_stats(values: &mut [f64]) -> Option<ResponseStats> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(ResponseStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p50: percentile(values, 0.50),
        p95: percentile(values, 0.95),
        max: values[values.len() - 1],
    })
}

/// Settings for the saturation cross-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// Arrival rate as a multiple of the bottleneck rate.
    pub load_factor: f64,
    /// Minimum expected completions inside the measurement window.
    pub min_completions: usize,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            load_factor: 3.0,
            min_completions: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Validation {
    pub analytic_bottleneck: f64,
    pub simulated: f64,
    pub rel_err: f64,
    /// Completions inside the measurement window.
    pub completed: usize,
}

/// Drives the pipeline at `load_factor ×` its bottleneck rate and compares
/// the measured throughput with `1 / max(t1, t2, t3)`.
pub fn validate_against_model(times: StageTimes, options: ValidationOptions) -> Result<Validation, SimError> {
    let analytic = times.bottleneck_rate();
    // Window is 90% of the horizon; 10% headroom on the completion target.
    let horizon = 1.1 * options.min_completions as f64 / (0.9 * analytic);
    let config = SimConfig::new(options.load_factor * analytic, times, horizon, options.seed);
    let report = run(&config)?;
    Ok(Validation {
        analytic_bottleneck: analytic,
        simulated: report.throughput,
        rel_err: (report.throughput - analytic).abs() / analytic,
        completed: report.completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(rate: f64, t: (f64, f64, f64), horizon: f64, seed: u64) -> SimReport {
        run(&SimConfig::new(rate, StageTimes::new(t.0, t.1, t.2), horizon, seed)).unwrap()
    }

    /// Lindley recursion for a tandem of deterministic FIFO servers.
    fn lindley(arrivals: &[f64], s: [f64; 3]) -> Vec<[f64; 3]> {
        let mut free = [0.0_f64; 3];
        arrivals
            .iter()
            .map(|&a| {
                let mut t = a;
                let mut ends = [0.0; 3];
                for j in 0..3 {
                    t = t.max(free[j]) + s[j];
                    free[j] = t;
                    ends[j] = t;
                }
                ends
            })
            .collect()
    }

    #[test]
    fn event_log_matches_lindley_recursion() {
        let r = small(40.0, (0.02, 0.01, 0.03), 50.0, 3);
        let arrivals: Vec<f64> = r.requests.iter().map(|q| q.arrival).collect();
        let expected = lindley(&arrivals, [0.02, 0.01, 0.03]);
        for (q, e) in r.requests.iter().zip(expected) {
            assert!((q.end1 - e[0]).abs() < 1e-9);
            assert!((q.end_link - e[1]).abs() < 1e-9);
            assert!((q.end2 - e[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn light_traffic() {
        let r = small(1.0, (0.01, 0.01, 0.01), 30_000.0, 1);
        assert!((r.throughput - 1.0).abs() <= 0.02);
        let mean = r.response_time.unwrap().mean;
        // M/D/1 at the first stage, no waiting downstream.
        let rho = 0.01;
        let expected = 0.03 + rho * 0.01 / (2.0 * (1.0 - rho));
        assert!((mean - expected).abs() <= 0.02 * expected);
    }

    #[test]
    fn md1_closed_form_at_half_load() {
        let s = 0.01;
        let r = small(50.0, (s, s, s), 2_000.0, 7);
        let expected = 3.0 * s + 0.5 * s / (2.0 * 0.5);
        let mean = r.response_time.unwrap().mean;
        assert!((mean - expected).abs() <= 0.02 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn saturates_at_slowest_stage() {
        let r = small(200.0, (0.05, 0.01, 0.02), 1_000.0, 2);
        assert!((r.throughput - 20.0).abs() <= 0.02 * 20.0);
    }

    #[test]
    fn empty_horizon() {
        let r = small(1e-9, (0.01, 0.01, 0.01), 10.0, 5);
        assert_eq!(r.completed, 0);
        assert!(r.empty);
        assert!(r.response_time.is_none());
        assert_eq!(r.throughput, 0.0);
    }

    #[test]
    fn invalid_configs() {
        let t = StageTimes::new(0.01, 0.01, 0.01);
        assert!(run(&SimConfig::new(0.0, t, 10.0, 0)).is_err());
        assert!(run(&SimConfig::new(1.0, StageTimes::new(0.0, 0.1, 0.1), 10.0, 0)).is_err());
        let mut c = SimConfig::new(1.0, t, 10.0, 0);
        c.warmup = 10.0;
        assert!(run(&c).is_err());
    }

    #[test]
    fn validation_examples() {
        let v = validate_against_model(StageTimes::new(0.02, 0.04, 0.01), ValidationOptions::default()).unwrap();
        assert_eq!(v.analytic_bottleneck, 25.0);
        assert!(v.rel_err <= 0.05);
        assert!(v.completed >= 10_000);

        let v = validate_against_model(StageTimes::new(0.03, 0.03, 0.03), ValidationOptions::default()).unwrap();
        assert!((v.analytic_bottleneck - 1.0 / 0.03).abs() < 1e-12);
        assert!(v.rel_err <= 0.05);
    }

    #[test]
    fn slow_link_sets_throughput() {
        // 1 MB embedding over 100 Mbps.
        let t3 = 1e6 / 12.5e6;
        let v = validate_against_model(StageTimes::new(0.01, t3, 0.02), ValidationOptions::default()).unwrap();
        assert!((v.analytic_bottleneck - 12.5).abs() < 1e-12);
        assert!(v.rel_err <= 0.05);
    }

    #[test]
    fn reproducible() {
        let a = small(30.0, (0.01, 0.02, 0.015), 100.0, 9);
        let b = small(30.0, (0.01, 0.02, 0.015), 100.0, 9);
        assert_eq!(a, b);
        let c = small(30.0, (0.01, 0.02, 0.015), 100.0, 10);
        assert_ne!(a.requests, c.requests);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conservation(rate in 1.0f64..200.0, s1 in 0.001f64..0.05, s2 in 0.001f64..0.05, s3 in 0.001f64..0.05, seed in 0u64..100) {
            let r = small(rate, (s1, s2, s3), 20.0, seed);
            prop_assert_eq!(r.arrivals_total, r.completed_total + r.in_flight + r.queued);
            prop_assert!(r.throughput <= rate * 1.5 + 1.0);
            if let Some(rt) = r.response_time {
                prop_assert!(rt.mean >= s1 + s2 + s3 - 1e-12);
            }
        }

        #[test]
        fn slower_stage_never_raises_saturated_throughput(s1 in 0.005f64..0.05, s2 in 0.005f64..0.05, s3 in 0.005f64..0.05, bump in 1.0f64..2.0) {
            let rate = 3.0 / s1.min(s2).min(s3);
            let base = small(rate, (s1, s2, s3), 200.0, 4);
            let slower = small(rate, (s1 * bump, s2, s3), 200.0, 4);
            prop_assert!(slower.throughput <= base.throughput * 1.01);
        }
    }
}
