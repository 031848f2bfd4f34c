//! Pipeline-parallel schedule construction, discrete-event simulation, and
//! the closed-form bubble/memory accounting the simulator is checked
//! against.
//!
//! Three schedules are modeled: classic one-forward-one-backward (1F1B),
//! a zero-bubble variant that splits the backward chunk into input-gradient
//! and weight-gradient halves and delays the weight work into bubbles
//! (ZB1P), and the bidirectional overlapped schedule that feeds
//! micro-batches from both ends of the pipeline with paired
//! forward+backward cells (DualPipe).

mod export;
mod schedule;
mod sim;

pub use export::{gantt_text, schedule_to_json};
pub use schedule::build_schedule;
pub use sim::simulate;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-chunk execution costs. `backward_full` covers both the
/// input-gradient and weight-gradient work; `backward_weight` is the
/// weight-gradient part alone; `overlapped` is one fused
/// forward+full-backward cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChunkCosts {
    pub forward: f64,
    pub backward_full: f64,
    pub backward_weight: f64,
    pub overlapped: f64,
}

impl ChunkCosts {
    pub fn new(
        forward: f64,
        backward_full: f64,
        backward_weight: f64,
        overlapped: f64,
    ) -> Result<Self> {
        let c = Self {
            forward,
            backward_full,
            backward_weight,
            overlapped,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.forward >= 0.0
            && self.backward_weight >= 0.0
            && self.backward_full >= self.backward_weight
            && self.overlapped <= self.forward + self.backward_full
            && self.overlapped >= 0.0;
        if !ok {
            return Err(Error::Schedule(format!(
                "invalid chunk costs {self:?}: need F,W >= 0, B >= W, FB <= F+B"
            )));
        }
        Ok(())
    }

    /// Input-gradient half of the backward chunk.
    pub fn backward_input(&self) -> f64 {
        self.backward_full - self.backward_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    OneFOneB,
    Zb1p,
    DualPipe,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::OneFOneB => "1F1B",
            Method::Zb1p => "ZB1P",
            Method::DualPipe => "DualPipe",
        }
    }
}

/// Which schedule to build, for how many ranks and micro-batches.
/// `micro_batches` counts per direction; the single-direction methods have
/// one direction, DualPipe feeds that many micro-batches from each end.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub method: Method,
    pub ranks: usize,
    pub micro_batches: usize,
}

impl ScheduleSpec {
    pub fn new(method: Method, ranks: usize, micro_batches: usize) -> Result<Self> {
        let s = Self {
            method,
            ranks,
            micro_batches,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks < 1 || self.micro_batches < 1 {
            return Err(Error::Schedule(
                "ranks and micro-batches must be >= 1".into(),
            ));
        }
        if self.micro_batches < self.ranks {
            return Err(Error::Schedule(format!(
                "steady state needs micro_batches >= ranks ({} < {})",
                self.micro_batches, self.ranks
            )));
        }
        if self.method == Method::DualPipe && (self.ranks % 2 != 0 || self.micro_batches % 2 != 0)
        {
            return Err(Error::Schedule(
                "DualPipe requires both ranks and micro-batches divisible by 2".into(),
            ));
        }
        Ok(())
    }

    /// Model-parameter copies held per rank.
    pub fn parameter_copies(&self) -> usize {
        match self.method {
            Method::DualPipe => 2,
            _ => 1,
        }
    }
}

/// One direction of pipeline flow. Single-direction methods use `Down`
/// (rank 0 towards the last rank); DualPipe adds the mirrored `Up` pipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    /// Rank that feeds `rank`'s forward in this direction.
    pub fn prev(&self, rank: usize, ranks: usize) -> Option<usize> {
        match self {
            Direction::Down => rank.checked_sub(1),
            Direction::Up => {
                if rank + 1 < ranks {
                    Some(rank + 1)
                } else {
                    None
                }
            }
        }
    }

    /// Rank whose backward feeds `rank`'s backward (the next stage towards
    /// the loss end). `None` when `rank` hosts the loss.
    pub fn succ(&self, rank: usize, ranks: usize) -> Option<usize> {
        match self {
            Direction::Down => {
                if rank + 1 < ranks {
                    Some(rank + 1)
                } else {
                    None
                }
            }
            Direction::Up => rank.checked_sub(1),
        }
    }
}

/// One scheduled chunk on a rank's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Forward {
        dir: Direction,
        micro: usize,
    },
    /// Full backward: input gradient and weight gradient together.
    BackwardFull {
        dir: Direction,
        micro: usize,
    },
    /// Input-gradient half only (zero-bubble split).
    BackwardInput {
        dir: Direction,
        micro: usize,
    },
    /// Weight-gradient half, runnable any time after its input half.
    BackwardWeight {
        dir: Direction,
        micro: usize,
    },
    /// Fused cell: forward of one direction overlapped with the full
    /// backward of the other.
    Overlapped {
        f_dir: Direction,
        f_micro: usize,
        b_dir: Direction,
        b_micro: usize,
    },
}

impl EventKind {
    pub fn duration(&self, costs: &ChunkCosts) -> f64 {
        match self {
            EventKind::Forward { .. } => costs.forward,
            EventKind::BackwardFull { .. } => costs.backward_full,
            EventKind::BackwardInput { .. } => costs.backward_input(),
            EventKind::BackwardWeight { .. } => costs.backward_weight,
            EventKind::Overlapped { .. } => costs.overlapped,
        }
    }
}

/// Dependency-ordered per-rank event lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub spec: ScheduleSpec,
    pub ranks: Vec<Vec<EventKind>>,
}

/// Closed-form schedule metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalyticMetrics {
    pub bubble: f64,
    pub parameter_copies: usize,
    /// Peak in-flight activations, in micro-batch units.
    pub peak_activation: usize,
}

/// Bubble and memory accounting: 1F1B `(PP-1)(F+B)`, ZB1P
/// `(PP-1)(F+B-2W)`, DualPipe `(PP/2-1)(F&B+B-3W)`; parameter copies
/// 1/1/2 and peak activations PP/PP/PP+1 respectively.
pub fn analytic_metrics(spec: &ScheduleSpec, costs: &ChunkCosts) -> Result<AnalyticMetrics> {
    spec.validate()?;
    costs.validate()?;
    let pp = spec.ranks as f64;
    let (f, b, w, fb) = (
        costs.forward,
        costs.backward_full,
        costs.backward_weight,
        costs.overlapped,
    );
    let (bubble, peak) = match spec.method {
        Method::OneFOneB => ((pp - 1.0) * (f + b), spec.ranks),
        Method::Zb1p => ((pp - 1.0) * (f + b - 2.0 * w), spec.ranks),
        Method::DualPipe => ((pp / 2.0 - 1.0) * (fb + b - 3.0 * w), spec.ranks + 1),
    };
    Ok(AnalyticMetrics {
        bubble,
        parameter_copies: spec.parameter_copies(),
        peak_activation: peak,
    })
}

/// Simulation outcome: makespan, per-rank idle, peak activations, and the
/// parameter copy count carried over from the spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    /// Idle time per rank (makespan minus busy time).
    pub idle_per_rank: Vec<f64>,
    /// Peak simultaneous activations per rank, in micro-batch units.
    pub peak_activation_per_rank: Vec<usize>,
    pub parameter_copies: usize,
    /// Start/finish per event, aligned with the schedule's rank rows.
    pub timeline: Vec<Vec<(f64, f64)>>,
}

impl SimReport {
    /// The pipeline bubble: the largest per-rank idle time.
    pub fn bubble(&self) -> f64 {
        self.idle_per_rank.iter().copied().fold(0.0, f64::max)
    }

    pub fn peak_activation(&self) -> usize {
        self.peak_activation_per_rank
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
    }
}
