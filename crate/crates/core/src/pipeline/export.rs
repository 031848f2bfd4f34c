//! Schedule export: a JSON event list and a plain-text Gantt grid for
//! eyeballing rank timelines.

use super::{ChunkCosts, Direction, EventKind, PipelineSchedule};
use crate::Result;

/// JSON event list: one object per event with rank, order, kind and
/// timing (timing from a fresh simulation with the given costs).
pub fn schedule_to_json(schedule: &PipelineSchedule, costs: &ChunkCosts) -> Result<String> {
    let report = super::simulate(schedule, costs)?;
    let mut events = Vec::new();
    for (rank, (evs, times)) in schedule
        .ranks
        .iter()
        .zip(report.timeline.iter())
        .enumerate()
    {
        for (idx, (ev, (start, end))) in evs.iter().zip(times).enumerate() {
            events.push(serde_json::json!({
                "rank": rank,
                "order": idx,
                "event": ev,
                "start": start,
                "end": end,
            }));
        }
    }
    let doc = serde_json::json!({
        "spec": schedule.spec,
        "makespan": report.makespan,
        "bubble": report.bubble(),
        "events": events,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| crate::Error::Serialization(e.to_string()))
}

fn cell_symbol(ev: &EventKind) -> char {
    match ev {
        EventKind::Forward {
            dir: Direction::Down,
            ..
        } => 'F',
        EventKind::Forward {
            dir: Direction::Up, ..
        } => 'f',
        EventKind::BackwardFull {
            dir: Direction::Down,
            ..
        } => 'B',
        EventKind::BackwardFull {
            dir: Direction::Up, ..
        } => 'b',
        EventKind::BackwardInput {
            dir: Direction::Down,
            ..
        } => 'I',
        EventKind::BackwardInput {
            dir: Direction::Up, ..
        } => 'i',
        EventKind::BackwardWeight {
            dir: Direction::Down,
            ..
        } => 'W',
        EventKind::BackwardWeight {
            dir: Direction::Up, ..
        } => 'w',
        EventKind::Overlapped { .. } => 'X',
    }
}

/// Text Gantt grid, one row per rank, time quantized to `width` columns.
/// Upper-case letters belong to the down pipe, lower-case to the up pipe,
/// `X` marks overlapped cells and `.` idle time.
pub fn gantt_text(schedule: &PipelineSchedule, costs: &ChunkCosts, width: usize) -> Result<String> {
    let report = super::simulate(schedule, costs)?;
    let width = width.max(16);
    let dt = report.makespan / width as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "makespan {:.3}, bubble {:.3} ('.' idle; one column = {:.3})\n",
        report.makespan,
        report.bubble(),
        dt
    ));
    for (rank, (evs, times)) in schedule
        .ranks
        .iter()
        .zip(report.timeline.iter())
        .enumerate()
    {
        let mut row = vec!['.'; width];
        for (ev, &(start, end)) in evs.iter().zip(times) {
            if end <= start {
                continue;
            }
            let a = ((start / dt).floor() as usize).min(width - 1);
            let b = (((end / dt).ceil() as usize).max(a + 1)).min(width);
            let sym = cell_symbol(ev);
            for c in row.iter_mut().take(b).skip(a) {
                *c = sym;
            }
        }
        out.push_str(&format!("rank {rank:>2} |"));
        out.extend(row);
        out.push_str("|\n");
    }
    Ok(out)
}
