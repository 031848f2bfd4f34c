//! Schedule builders. Each produces per-rank event orders whose simulated
//! bubble reproduces the closed-form accounting in `analytic_metrics`.

use std::collections::VecDeque;

use super::{Direction, EventKind, Method, PipelineSchedule, ScheduleSpec};
use crate::Result;

/// Builds the dependency-correct event order for the requested method.
pub fn build_schedule(spec: &ScheduleSpec) -> Result<PipelineSchedule> {
    spec.validate()?;
    let ranks = match spec.method {
        Method::OneFOneB => (0..spec.ranks)
            .map(|r| one_f_one_b(r, spec.ranks, spec.micro_batches))
            .collect(),
        Method::Zb1p => (0..spec.ranks)
            .map(|r| zb1p(r, spec.ranks, spec.micro_batches))
            .collect(),
        Method::DualPipe => (0..spec.ranks)
            .map(|r| dual_pipe(r, spec.ranks, spec.micro_batches))
            .collect(),
    };
    Ok(PipelineSchedule { spec: *spec, ranks })
}

/// Classic 1F1B: rank r warms up with `PP - r` forwards, alternates
/// backward/forward in steady state, and drains backwards.
fn one_f_one_b(rank: usize, ranks: usize, micros: usize) -> Vec<EventKind> {
    let dir = Direction::Down;
    let warmup = (ranks - rank).min(micros);
    let mut ev = Vec::with_capacity(2 * micros);
    for i in 1..=warmup {
        ev.push(EventKind::Forward { dir, micro: i });
    }
    for i in 1..=(micros - warmup) {
        ev.push(EventKind::BackwardFull { dir, micro: i });
        ev.push(EventKind::Forward {
            dir,
            micro: warmup + i,
        });
    }
    for i in (micros - warmup + 1)..=micros {
        ev.push(EventKind::BackwardFull { dir, micro: i });
    }
    ev
}

/// Zero-bubble 1F1B variant: the backward is split, the steady state runs
/// input-gradient halves only, and weight halves are delayed — one into
/// each forward-sized drain gap, the rest to the very end.
fn zb1p(rank: usize, ranks: usize, micros: usize) -> Vec<EventKind> {
    let dir = Direction::Down;
    let warmup = (ranks - rank).min(micros);
    let fill = ranks - 1 - rank;
    let mut ev = Vec::with_capacity(3 * micros);
    let mut weights_done = 0usize;
    for i in 1..=warmup {
        ev.push(EventKind::Forward { dir, micro: i });
    }
    for i in 1..=(micros - warmup) {
        ev.push(EventKind::BackwardInput { dir, micro: i });
        ev.push(EventKind::Forward {
            dir,
            micro: warmup + i,
        });
    }
    // Drain: the first `fill` gaps between incoming input-gradient chunks
    // are forward-sized while downstream ranks still run steady cycles;
    // park one weight chunk in each.
    for (j, i) in ((micros - warmup + 1)..=micros).enumerate() {
        ev.push(EventKind::BackwardInput { dir, micro: i });
        if j < fill {
            weights_done += 1;
            ev.push(EventKind::BackwardWeight {
                dir,
                micro: weights_done,
            });
        }
    }
    for i in (weights_done + 1)..=micros {
        ev.push(EventKind::BackwardWeight { dir, micro: i });
    }
    ev
}

/// Bidirectional overlapped schedule. Each rank hosts one stage of the
/// `Down` pipe and one of the mirrored `Up` pipe (two parameter copies)
/// and works through eight phases: ramp-up forwards of the near-side pipe,
/// interleaved forwards of both, a zero-bubble splice, the steady zone of
/// paired forward+backward cells, and a mirrored drain.
fn dual_pipe(rank: usize, ranks: usize, micros: usize) -> Vec<EventKind> {
    let half_ranks = ranks / 2;
    let half_rank = rank.min(ranks - 1 - rank);
    let n = micros; // per direction
    // Phase-0 is the direction whose forward enters on this rank's side.
    let (p0, p1) = if rank < half_ranks {
        (Direction::Down, Direction::Up)
    } else {
        (Direction::Up, Direction::Down)
    };

    let mut ev = Vec::new();
    let (mut f0, mut f1, mut b0, mut b1) = (0usize, 0usize, 0usize, 0usize);
    // Weight halves pending from split backwards, in completion order.
    let mut wq: VecDeque<(Direction, usize)> = VecDeque::new();

    // Step 1: near-side warmup forwards.
    for _ in 0..(half_ranks - half_rank - 1) * 2 {
        f0 += 1;
        ev.push(EventKind::Forward { dir: p0, micro: f0 });
    }
    // Step 2: interleaved warmup of both directions.
    for _ in 0..half_rank + 1 {
        f0 += 1;
        ev.push(EventKind::Forward { dir: p0, micro: f0 });
        f1 += 1;
        ev.push(EventKind::Forward { dir: p1, micro: f1 });
    }
    // Step 3: zero-bubble splice into the steady zone.
    for _ in 0..half_ranks - half_rank - 1 {
        b1 += 1;
        ev.push(EventKind::BackwardInput { dir: p1, micro: b1 });
        wq.push_back((p1, b1));
        let (wd, wm) = wq.pop_front().expect("weight queue");
        ev.push(EventKind::BackwardWeight { dir: wd, micro: wm });
        f1 += 1;
        ev.push(EventKind::Forward { dir: p1, micro: f1 });
    }
    // Step 4: steady zone of paired overlapped cells.
    let steady = n - 2 * half_ranks + half_rank + 1;
    for _ in 0..steady {
        f0 += 1;
        b1 += 1;
        ev.push(EventKind::Overlapped {
            f_dir: p0,
            f_micro: f0,
            b_dir: p1,
            b_micro: b1,
        });
        f1 += 1;
        b0 += 1;
        ev.push(EventKind::Overlapped {
            f_dir: p1,
            f_micro: f1,
            b_dir: p0,
            b_micro: b0,
        });
    }
    // Step 5: far-side forwards exhausted; keep overlapping the near side.
    for _ in 0..half_ranks - half_rank - 1 {
        b1 += 1;
        ev.push(EventKind::BackwardFull { dir: p1, micro: b1 });
        f1 += 1;
        b0 += 1;
        ev.push(EventKind::Overlapped {
            f_dir: p1,
            f_micro: f1,
            b_dir: p0,
            b_micro: b0,
        });
    }
    // Step 6: paired drain; the second half of these backwards re-enter
    // zero-bubble mode so their weight halves slide to the tail.
    let pairs = half_rank + 1;
    for i in 0..pairs {
        for half in 0..2 {
            let pos = 2 * i + half;
            let zb = pos >= pairs;
            let (dir, micro) = if half == 0 {
                b1 += 1;
                (p1, b1)
            } else {
                b0 += 1;
                (p0, b0)
            };
            if zb {
                ev.push(EventKind::BackwardInput { dir, micro });
                wq.push_back((dir, micro));
            } else {
                ev.push(EventKind::BackwardFull { dir, micro });
            }
        }
    }
    // Step 7: drain of the near-side backwards, weight halves filling in.
    for _ in 0..half_ranks - half_rank - 1 {
        let (wd, wm) = wq.pop_front().expect("weight queue");
        ev.push(EventKind::BackwardWeight { dir: wd, micro: wm });
        b0 += 1;
        ev.push(EventKind::BackwardInput { dir: p0, micro: b0 });
        wq.push_back((p0, b0));
    }
    // Step 8: remaining weight halves.
    while let Some((wd, wm)) = wq.pop_front() {
        ev.push(EventKind::BackwardWeight { dir: wd, micro: wm });
    }

    debug_assert_eq!(f0, n);
    debug_assert_eq!(f1, n);
    debug_assert_eq!(b0, n);
    debug_assert_eq!(b1, n);
    ev
}
