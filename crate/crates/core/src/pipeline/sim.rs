//! Earliest-start discrete-event execution of a pipeline schedule.
//!
//! Each rank executes its event list strictly in order; an event starts as
//! soon as the rank is free and every cross-rank dependency has finished.
//! Dependency soundness is asserted as events are committed.

use std::collections::HashMap;

use super::{ChunkCosts, Direction, EventKind, PipelineSchedule, SimReport};
use crate::{Error, Result};

/// What an event completion makes available to other events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Fact {
    /// Forward output of (dir, micro) available at rank.
    Fwd(Direction, usize, usize),
    /// Input-gradient of (dir, micro) available at rank.
    Bin(Direction, usize, usize),
}

fn forward_deps(dir: Direction, micro: usize, rank: usize, ranks: usize, out: &mut Vec<Fact>) {
    if let Some(p) = dir.prev(rank, ranks) {
        out.push(Fact::Fwd(dir, micro, p));
    }
}

fn backward_deps(dir: Direction, micro: usize, rank: usize, ranks: usize, out: &mut Vec<Fact>) {
    // Needs this rank's own activations and the gradient from the stage
    // nearer the loss; the loss rank only needs its own forward.
    out.push(Fact::Fwd(dir, micro, rank));
    if let Some(s) = dir.succ(rank, ranks) {
        out.push(Fact::Bin(dir, micro, s));
    }
}

fn deps_of(ev: &EventKind, rank: usize, ranks: usize) -> Vec<Fact> {
    let mut out = Vec::with_capacity(4);
    match *ev {
        EventKind::Forward { dir, micro } => forward_deps(dir, micro, rank, ranks, &mut out),
        EventKind::BackwardFull { dir, micro } | EventKind::BackwardInput { dir, micro } => {
            backward_deps(dir, micro, rank, ranks, &mut out)
        }
        EventKind::BackwardWeight { dir, micro } => out.push(Fact::Bin(dir, micro, rank)),
        EventKind::Overlapped {
            f_dir,
            f_micro,
            b_dir,
            b_micro,
        } => {
            forward_deps(f_dir, f_micro, rank, ranks, &mut out);
            backward_deps(b_dir, b_micro, rank, ranks, &mut out);
        }
    }
    out
}

fn provides(ev: &EventKind, rank: usize, out: &mut Vec<Fact>) {
    match *ev {
        EventKind::Forward { dir, micro } => out.push(Fact::Fwd(dir, micro, rank)),
        EventKind::BackwardFull { dir, micro } | EventKind::BackwardInput { dir, micro } => {
            out.push(Fact::Bin(dir, micro, rank))
        }
        EventKind::BackwardWeight { .. } => {}
        EventKind::Overlapped {
            f_dir,
            f_micro,
            b_dir,
            b_micro,
        } => {
            out.push(Fact::Fwd(f_dir, f_micro, rank));
            out.push(Fact::Bin(b_dir, b_micro, rank));
        }
    }
}

/// Runs the schedule and reports makespan, per-rank idle time, per-rank
/// peak activation counts, and start/finish times per event.
pub fn simulate(schedule: &PipelineSchedule, costs: &ChunkCosts) -> Result<SimReport> {
    costs.validate()?;
    let ranks = schedule.spec.ranks;
    if schedule.ranks.len() != ranks {
        return Err(Error::Simulation(format!(
            "schedule has {} rank rows, spec says {}",
            schedule.ranks.len(),
            ranks
        )));
    }

    let mut facts: HashMap<Fact, f64> = HashMap::new();
    let mut cursor = vec![0usize; ranks];
    let mut free_at = vec![0.0f64; ranks];
    let mut busy = vec![0.0f64; ranks];
    let mut timeline: Vec<Vec<(f64, f64)>> = schedule
        .ranks
        .iter()
        .map(|evs| Vec::with_capacity(evs.len()))
        .collect();
    let total: usize = schedule.ranks.iter().map(Vec::len).sum();
    let mut done = 0usize;
    let mut provided = Vec::with_capacity(2);

    while done < total {
        let mut progressed = false;
        for r in 0..ranks {
            while cursor[r] < schedule.ranks[r].len() {
                let ev = &schedule.ranks[r][cursor[r]];
                let deps = deps_of(ev, r, ranks);
                let mut ready_at = free_at[r];
                let mut ready = true;
                for d in &deps {
                    match facts.get(d) {
                        Some(&t) => ready_at = ready_at.max(t),
                        None => {
                            ready = false;
                            break;
                        }
                    }
                }
                if !ready {
                    break;
                }
                let start = ready_at;
                // Dependency soundness: nothing starts before its inputs.
                for d in &deps {
                    debug_assert!(facts[d] <= start);
                }
                let end = start + ev.duration(costs);
                provided.clear();
                provides(ev, r, &mut provided);
                for f in &provided {
                    facts.insert(*f, end);
                }
                timeline[r].push((start, end));
                busy[r] += ev.duration(costs);
                free_at[r] = end;
                cursor[r] += 1;
                done += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Simulation(
                "no runnable event: cyclic or unsatisfiable dependencies".into(),
            ));
        }
    }

    let makespan = free_at.iter().copied().fold(0.0, f64::max);
    let idle_per_rank: Vec<f64> = busy.iter().map(|b| makespan - b).collect();

    // Peak activations: micro-batches whose forward has run on this rank
    // but whose input-gradient half has not. An overlapped cell holds both
    // its fresh forward and the activation it is about to release.
    let peak_activation_per_rank: Vec<usize> = schedule
        .ranks
        .iter()
        .map(|evs| {
            let mut held = 0usize;
            let mut peak = 0usize;
            for ev in evs {
                match ev {
                    EventKind::Forward { .. } => {
                        held += 1;
                        peak = peak.max(held);
                    }
                    EventKind::BackwardFull { .. } | EventKind::BackwardInput { .. } => {
                        peak = peak.max(held);
                        held = held.saturating_sub(1);
                    }
                    EventKind::BackwardWeight { .. } => {}
                    EventKind::Overlapped { .. } => {
                        peak = peak.max(held + 1);
                    }
                }
            }
            peak
        })
        .collect();

    Ok(SimReport {
        makespan,
        idle_per_rank,
        peak_activation_per_rank,
        parameter_copies: schedule.spec.parameter_copies(),
        timeline,
    })
}
