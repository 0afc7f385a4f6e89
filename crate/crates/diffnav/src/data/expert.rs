//! Expert demonstrations: jittered near-optimal grid paths turned into
//! smooth sub-cell trajectories with rendered observations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::util::derive_seed;
use crate::world::{render_observation, segment_blocked, Cell, GridMap, Observation, Pose};
use crate::{Error, Result};

/// One demonstration: sub-cell poses plus the observation at each pose.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub observations: Vec<Observation>,
    pub map_seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Per-cell cost jitter in [0, max]. A pure function of (cell, seed) so the
/// whole cost field is reproducible without materializing it.
fn cell_jitter(cell: Cell, seed: u64, max: f64) -> f64 {
    let key = ((cell.x as u64) << 32) ^ (cell.y as u64 & 0xffff_ffff);
    let h = derive_seed(seed, "cell-jitter", key);
    (h >> 11) as f64 / (1u64 << 53) as f64 * max
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    cell: Cell,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap by cost, deterministic tie-break by cell
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap()
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost 4-connected path where each entered cell costs 1 plus a
/// per-cell jitter in [0, 0.3] seeded by `jitter_seed`. With `None` the cost
/// is plain length and the result matches the BFS geodesic. Distinct seeds
/// pick distinct near-optimal routes, which is what makes the expert data
/// multimodal at junctions.
pub fn plan_expert_path(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    jitter_seed: Option<u64>,
) -> Result<Vec<Cell>> {
    const JITTER_MAX: f64 = 0.3;
    if map.occupied_cell(start) || map.occupied_cell(goal) {
        return Err(Error::InvalidArgument(
            "path endpoints must be free cells".into(),
        ));
    }
    if start == goal {
        return Ok(vec![start]);
    }
    let idx = |c: Cell| c.y as usize * map.width() + c.x as usize;
    let mut dist = vec![f64::INFINITY; map.width() * map.height()];
    let mut prev: Vec<Option<Cell>> = vec![None; map.width() * map.height()];
    dist[idx(start)] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        cost: 0.0,
        cell: start,
    });
    while let Some(HeapEntry { cost, cell }) = heap.pop() {
        if cost > dist[idx(cell)] {
            continue;
        }
        if cell == goal {
            break;
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(cell.x + dx, cell.y + dy);
            if map.occupied_cell(n) {
                continue;
            }
            let step = 1.0
                + jitter_seed
                    .map(|s| cell_jitter(n, s, JITTER_MAX))
                    .unwrap_or(0.0);
            let nd = cost + step;
            if nd < dist[idx(n)] {
                dist[idx(n)] = nd;
                prev[idx(n)] = Some(cell);
                heap.push(HeapEntry { cost: nd, cell: n });
            }
        }
    }
    if dist[idx(goal)].is_infinite() {
        return Err(Error::Unreachable);
    }
    let mut path = vec![goal];
    let mut cur = goal;
    while let Some(p) = prev[idx(cur)] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    Ok(path)
}

/// Convert a cell path to sub-cell poses (~1 cell per step), smooth corners
/// with one midpoint-averaging pass, and render the observation at each
/// pose. Smoothed positions that would make a swept segment collide fall
/// back to the raw cell centers locally.
pub fn build_trajectory(
    map: &GridMap,
    path: &[Cell],
    rng: &mut impl Rng,
    obs_size: usize,
) -> Result<Trajectory> {
    if path.is_empty() {
        return Err(Error::InvalidArgument("empty path".into()));
    }
    // cell centers with a small sub-cell offset for pose diversity
    let mut raw: Vec<(f64, f64)> = Vec::with_capacity(path.len());
    for c in path {
        let (cx, cy) = c.center();
        let ox: f64 = rng.gen_range(-0.15..0.15);
        let oy: f64 = rng.gen_range(-0.15..0.15);
        raw.push((cx + ox, cy + oy));
    }
    // the offset alone may already block a segment; revert those to centers
    for i in 0..raw.len() {
        let bad = (i > 0 && segment_blocked(map, raw[i - 1], raw[i]))
            || (i + 1 < raw.len() && segment_blocked(map, raw[i], raw[i + 1]));
        if bad {
            raw[i] = path[i].center();
        }
    }

    // one smoothing pass: p' = (prev + 2p + next) / 4
    let mut pts = raw.clone();
    for i in 1..raw.len().saturating_sub(1) {
        let cand = (
            0.25 * raw[i - 1].0 + 0.5 * raw[i].0 + 0.25 * raw[i + 1].0,
            0.25 * raw[i - 1].1 + 0.5 * raw[i].1 + 0.25 * raw[i + 1].1,
        );
        if !segment_blocked(map, pts[i - 1], cand) && !segment_blocked(map, cand, raw[i + 1]) {
            pts[i] = cand;
        }
    }
    // final guard: any segment still blocked reverts both endpoints
    for i in 1..pts.len() {
        if segment_blocked(map, pts[i - 1], pts[i]) {
            pts[i - 1] = path[i - 1].center();
            pts[i] = path[i].center();
        }
    }

    let headings = headings_for(&pts);
    let mut poses = Vec::with_capacity(pts.len());
    let mut observations = Vec::with_capacity(pts.len());
    for (p, h) in pts.iter().zip(&headings) {
        let pose = Pose::new(p.0, p.1, *h);
        observations.push(render_observation(map, &pose, obs_size)?);
        poses.push(pose);
    }
    Ok(Trajectory {
        poses,
        observations,
        map_seed: map.seed(),
    })
}

fn headings_for(pts: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let h = if i + 1 < pts.len() {
            let (dx, dy) = (pts[i + 1].0 - pts[i].0, pts[i + 1].1 - pts[i].1);
            if dx.abs() + dy.abs() > 1e-9 {
                dy.atan2(dx)
            } else {
                *out.last().unwrap_or(&0.0)
            }
        } else {
            *out.last().unwrap_or(&0.0)
        };
        out.push(h);
    }
    out
}
