//! Occupancy-grid maps: procedural generation, shortest paths, file I/O.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::stream_rng;
use crate::{Error, Result};

/// Integer cell coordinate. Cell (x, y) covers [x, x+1) x [y, y+1) in
/// continuous units, so a point p lies in cell (floor(px), floor(py)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + 0.5, self.y as f64 + 0.5)
    }
}

/// Parameters for procedural map generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapParams {
    /// Rooms to carve (1..=20).
    pub room_count: usize,
    /// Corridor width in cells (1..=6).
    pub corridor_width: usize,
    /// Probability of occupying a carved cell with clutter (0.0..=0.15).
    pub obstacle_density: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams {
            room_count: 7,
            corridor_width: 3,
            obstacle_density: 0.02,
        }
    }
}

impl MapParams {
    fn validate(&self) -> Result<()> {
        if !(1..=20).contains(&self.room_count) {
            return Err(Error::Config(format!(
                "room_count {} outside 1..=20",
                self.room_count
            )));
        }
        if !(1..=6).contains(&self.corridor_width) {
            return Err(Error::Config(format!(
                "corridor_width {} outside 1..=6",
                self.corridor_width
            )));
        }
        if !(0.0..=0.15).contains(&self.obstacle_density) {
            return Err(Error::Config(format!(
                "obstacle_density {} outside 0.0..=0.15",
                self.obstacle_density
            )));
        }
        Ok(())
    }
}

/// Static binary occupancy grid. Immutable after generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    seed: u64,
    occ: Vec<bool>,
}

pub const MAP_SIZE: usize = 64;

/// Minimum double-sweep BFS diameter a generated map must offer, so that
/// well-separated start/goal pairs (>= 25 cells) always exist.
const MIN_DIAMETER: u32 = 32;
const MIN_FREE_CELLS: usize = 300;
const GEN_ATTEMPTS: u32 = 100;

impl GridMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Occupancy with out-of-bounds treated as occupied.
    pub fn occupied(&self, x: i32, y: i32) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.occ[y as usize * self.width + x as usize]
    }

    pub fn occupied_cell(&self, c: Cell) -> bool {
        self.occupied(c.x, c.y)
    }

    /// Occupancy of the cell containing a continuous point.
    pub fn occupied_at_point(&self, x: f64, y: f64) -> bool {
        self.occupied(x.floor() as i32, y.floor() as i32)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                if !self.occupied(x, y) {
                    out.push(Cell::new(x, y));
                }
            }
        }
        out
    }

    /// Free cells with at least three free 4-neighbors: route choice points.
    pub fn junction_cells(&self) -> Vec<Cell> {
        self.free_cells()
            .into_iter()
            .filter(|c| {
                let n = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .filter(|(dx, dy)| !self.occupied(c.x + dx, c.y + dy))
                    .count();
                n >= 3
            })
            .collect()
    }

    /// Build directly from an occupancy grid (for hand-crafted probe maps).
    pub fn from_occupancy(width: usize, height: usize, seed: u64, occ: Vec<bool>) -> Result<Self> {
        if occ.len() != width * height {
            return Err(Error::Config(format!(
                "occupancy length {} for {}x{} map",
                occ.len(),
                width,
                height
            )));
        }
        Ok(GridMap {
            width,
            height,
            seed,
            occ,
        })
    }

    // ── Serialization ────────────────────────────────────────────────

    /// Plain-text format: `gridmap v1 <width> <height> <seed>` then one row
    /// of '0'/'1' characters per grid row (row 0 first).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "gridmap v1 {} {} {}", self.width, self.height, self.seed)?;
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| if self.occ[y * self.width + x] { '1' } else { '0' })
                .collect();
            writeln!(w, "{}", row)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: "gridmap".into(),
                detail: "empty file".into(),
            })??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "gridmap" || parts[1] != "v1" {
            return Err(Error::Parse {
                path: "gridmap".into(),
                detail: format!("bad header: {header}"),
            });
        }
        let parse = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                path: "gridmap".into(),
                detail: format!("bad number: {s}"),
            })
        };
        let width = parse(parts[2])? as usize;
        let height = parse(parts[3])? as usize;
        let seed = parse(parts[4])?;
        let mut occ = Vec::with_capacity(width * height);
        for _ in 0..height {
            let row = lines.next().ok_or_else(|| Error::Parse {
                path: "gridmap".into(),
                detail: "truncated rows".into(),
            })??;
            if row.len() != width {
                return Err(Error::Parse {
                    path: "gridmap".into(),
                    detail: format!("row length {} != width {}", row.len(), width),
                });
            }
            for ch in row.chars() {
                occ.push(match ch {
                    '0' => false,
                    '1' => true,
                    _ => {
                        return Err(Error::Parse {
                            path: "gridmap".into(),
                            detail: format!("bad cell char: {ch}"),
                        })
                    }
                });
            }
        }
        GridMap::from_occupancy(width, height, seed, occ)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

/// Deterministic rooms-and-corridors generation. Retries internally (up to
/// 100 sub-attempts, all derived from `seed`) until the carved free space is
/// one 4-connected component with a junction and enough diameter.
pub fn generate_map(seed: u64, params: &MapParams) -> Result<GridMap> {
    params.validate()?;
    for attempt in 0..GEN_ATTEMPTS {
        if let Some(map) = try_generate(seed, attempt, params) {
            return Ok(map);
        }
    }
    Err(Error::MapGen {
        seed,
        attempts: GEN_ATTEMPTS,
    })
}

fn try_generate(seed: u64, attempt: u32, params: &MapParams) -> Option<GridMap> {
    let size = MAP_SIZE;
    let mut rng = stream_rng(seed, "mapgen", attempt as u64);
    let mut occ = vec![true; size * size];
    let mut carve_rect = |occ: &mut Vec<bool>, x0: i32, y0: i32, x1: i32, y1: i32| {
        for y in y0.max(1)..=y1.min(size as i32 - 2) {
            for x in x0.max(1)..=x1.min(size as i32 - 2) {
                occ[y as usize * size + x as usize] = false;
            }
        }
    };

    // rooms
    let mut centers = Vec::new();
    for _ in 0..params.room_count {
        let w = rng.gen_range(5..=13);
        let h = rng.gen_range(5..=13);
        let x0 = rng.gen_range(2..(size as i32 - 2 - w));
        let y0 = rng.gen_range(2..(size as i32 - 2 - h));
        carve_rect(&mut occ, x0, y0, x0 + w - 1, y0 + h - 1);
        centers.push((x0 + w / 2, y0 + h / 2));
    }

    // corridors: chain the rooms, then add a few loop connections so routes
    // to a goal are not unique
    let cw = params.corridor_width as i32;
    let mut connect = |occ: &mut Vec<bool>, a: (i32, i32), b: (i32, i32), h_first: bool| {
        let ((ax, ay), (bx, by)) = (a, b);
        if h_first {
            carve_rect(occ, ax.min(bx), ay, ax.max(bx) + cw - 1, ay + cw - 1);
            carve_rect(occ, bx, ay.min(by), bx + cw - 1, ay.max(by) + cw - 1);
        } else {
            carve_rect(occ, ax, ay.min(by), ax + cw - 1, ay.max(by) + cw - 1);
            carve_rect(occ, ax.min(bx), by, ax.max(bx) + cw - 1, by + cw - 1);
        }
    };
    for i in 1..centers.len() {
        let h_first = rng.gen_bool(0.5);
        connect(&mut occ, centers[i - 1], centers[i], h_first);
    }
    for _ in 0..(params.room_count / 2).max(1) {
        if centers.len() >= 2 {
            let i = rng.gen_range(0..centers.len());
            let j = rng.gen_range(0..centers.len());
            if i != j {
                let h_first = rng.gen_bool(0.5);
                connect(&mut occ, centers[i], centers[j], h_first);
            }
        }
    }

    // clutter
    if params.obstacle_density > 0.0 {
        for v in occ.iter_mut() {
            if !*v && rng.gen_bool(params.obstacle_density) {
                *v = true;
            }
        }
    }

    // keep only the largest 4-connected free component
    let largest = largest_component(&occ, size);
    let free_count = largest.iter().filter(|&&k| k).count();
    if free_count < MIN_FREE_CELLS {
        return None;
    }
    for (v, keep) in occ.iter_mut().zip(&largest) {
        if !*v && !keep {
            *v = true;
        }
    }

    let map = GridMap {
        width: size,
        height: size,
        seed,
        occ,
    };
    if map.junction_cells().is_empty() {
        return None;
    }
    if map_diameter(&map) < MIN_DIAMETER {
        return None;
    }
    Some(map)
}

fn largest_component(occ: &[bool], size: usize) -> Vec<bool> {
    let mut label = vec![0u32; occ.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    for start in 0..occ.len() {
        if occ[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut count = 0usize;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = ((i % size) as i32, (i / size) as i32);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= size || ny as usize >= size {
                    continue;
                }
                let j = ny as usize * size + nx as usize;
                if !occ[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if count > best.1 {
            best = (next, count);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// 4-connected BFS distance in cells; None when unreachable.
pub fn geodesic_distance(map: &GridMap, a: Cell, b: Cell) -> Result<Option<u32>> {
    if map.occupied_cell(a) || map.occupied_cell(b) {
        return Err(Error::InvalidArgument(format!(
            "geodesic endpoints must be free cells (a occupied: {}, b occupied: {})",
            map.occupied_cell(a),
            map.occupied_cell(b)
        )));
    }
    if a == b {
        return Ok(Some(0));
    }
    let field = geodesic_field(map, a)?;
    Ok(field[b.y as usize * map.width + b.x as usize])
}

/// BFS distances from one source to every free cell.
pub fn geodesic_field(map: &GridMap, from: Cell) -> Result<Vec<Option<u32>>> {
    if map.occupied_cell(from) {
        return Err(Error::InvalidArgument(
            "geodesic source must be a free cell".into(),
        ));
    }
    let mut dist: Vec<Option<u32>> = vec![None; map.width * map.height];
    let idx = |c: Cell| c.y as usize * map.width + c.x as usize;
    dist[idx(from)] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)].unwrap();
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if !map.occupied_cell(n) && dist[idx(n)].is_none() {
                dist[idx(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    Ok(dist)
}

/// Double-sweep BFS lower bound on the free-space diameter.
fn map_diameter(map: &GridMap) -> u32 {
    let free = map.free_cells();
    let Some(&start) = free.first() else { return 0 };
    let far = |from: Cell| -> (Cell, u32) {
        let field = geodesic_field(map, from).expect("free source");
        let mut best = (from, 0);
        for c in &free {
            if let Some(d) = field[c.y as usize * map.width + c.x as usize] {
                if d > best.1 {
                    best = (*c, d);
                }
            }
        }
        best
    };
    let (u, _) = far(start);
    far(u).1
}

/// Hand-built probe map: a stem corridor from the bottom joins a rectangular
/// ring around a central block, forming a T-junction where left and right
/// routes both lead to the far side. Used for multimodality probing and the
/// junction-behavior data checks.
pub fn ring_junction_map() -> GridMap {
    let size = 33;
    let mut occ = vec![true; size * size];
    let carve = |x0: usize, y0: usize, x1: usize, y1: usize, occ: &mut Vec<bool>| {
        for y in y0..=y1 {
            for x in x0..=x1 {
                occ[y * size + x] = false;
            }
        }
    };
    // ring corridor (width 3) around the central block [8..=24]^2
    carve(5, 5, 27, 27, &mut occ);
    for y in 8..=24 {
        for x in 8..=24 {
            occ[y * size + x] = true;
        }
    }
    // stem from the bottom into the ring
    carve(15, 2, 17, 4, &mut occ);
    GridMap {
        width: size,
        height: size,
        seed: 0,
        occ,
    }
}

/// Canonical probe poses on [`ring_junction_map`]: (stem start, left-branch
/// goal cell, right-branch goal cell, far-side goal cell).
pub fn ring_junction_poses() -> (crate::world::Pose, Cell, Cell, Cell) {
    (
        crate::world::Pose::new(16.5, 3.5, std::f64::consts::FRAC_PI_2),
        Cell::new(6, 16),
        Cell::new(26, 16),
        Cell::new(16, 26),
    )
}

/// Deterministic far-apart free pair (geodesic >= min_separation).
pub fn sample_far_pair(
    map: &GridMap,
    rng: &mut impl Rng,
    min_separation: u32,
) -> Result<(Cell, Cell)> {
    let free = map.free_cells();
    for _ in 0..1000 {
        let a = free[rng.gen_range(0..free.len())];
        let field = geodesic_field(map, a)?;
        let candidates: Vec<Cell> = free
            .iter()
            .copied()
            .filter(|c| {
                field[c.y as usize * map.width + c.x as usize]
                    .map(|d| d >= min_separation)
                    .unwrap_or(false)
            })
            .collect();
        if !candidates.is_empty() {
            let b = candidates[rng.gen_range(0..candidates.len())];
            return Ok((a, b));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no free pair with separation >= {min_separation} in map seed {}",
        map.seed()
    )))
}
