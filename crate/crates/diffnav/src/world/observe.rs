//! Egocentric occupancy observations.

use super::map::GridMap;
use super::motion::Pose;
use crate::{Error, Result};

/// Default observation patch side length.
pub const OBS_SIZE: usize = 24;

/// Binary egocentric occupancy patch. The robot sits at patch index
/// (size/2, size/2) and the patch is rotated so that increasing column
/// index is the robot's heading (+x) and decreasing row index its left.
/// Cells outside the map render as occupied.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    size: usize,
    cells: Vec<u8>,
}

impl Observation {
    pub fn from_cells(size: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::shape(
                "observation",
                format!("{} cells for {}x{} patch", cells.len(), size, size),
            ));
        }
        Ok(Observation { size, cells })
    }

    pub fn zeros(size: usize) -> Self {
        Observation {
            size,
            cells: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.size + col]
    }

    /// Patch as scalars in {0.0, 1.0}, row-major.
    pub fn to_values<T: crate::autodiff::Scalar>(&self) -> Vec<T> {
        self.cells
            .iter()
            .map(|&v| if v != 0 { T::one() } else { T::zero() })
            .collect()
    }
}

/// Render the egocentric patch at a pose. Pure function of (map, pose):
/// patch cell (r, c) samples the world point
///   pose + R(heading) * (c - size/2, size/2 - r)
/// with nearest-cell (floor) lookup; out-of-map points are occupied.
pub fn render_observation(map: &GridMap, pose: &Pose, size: usize) -> Result<Observation> {
    if map.occupied_at_point(pose.x, pose.y) {
        return Err(Error::InvalidArgument(format!(
            "cannot render from occupied cell ({:.2}, {:.2})",
            pose.x, pose.y
        )));
    }
    let half = (size / 2) as i32;
    let (sin, cos) = pose.heading.sin_cos();
    let mut cells = Vec::with_capacity(size * size);
    for r in 0..size as i32 {
        for col in 0..size as i32 {
            let ex = (col - half) as f64;
            let ey = (half - r) as f64;
            let wx = pose.x + ex * cos - ey * sin;
            let wy = pose.y + ex * sin + ey * cos;
            cells.push(u8::from(map.occupied_at_point(wx, wy)));
        }
    }
    Observation::from_cells(size, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::map::{generate_map, Cell, GridMap, MapParams};

    fn empty_map(side: usize) -> GridMap {
        let mut occ = vec![false; side * side];
        for i in 0..side {
            occ[i] = true;
            occ[(side - 1) * side + i] = true;
            occ[i * side] = true;
            occ[i * side + side - 1] = true;
        }
        GridMap::from_occupancy(side, side, 0, occ).unwrap()
    }

    #[test]
    fn center_cell_is_free() {
        let map = generate_map(5, &MapParams::default()).unwrap();
        let free = map.free_cells();
        for c in free.iter().step_by(17) {
            let (x, y) = c.center();
            let pose = Pose::new(x, y, 0.7);
            let obs = render_observation(&map, &pose, OBS_SIZE).unwrap();
            assert_eq!(obs.at(OBS_SIZE / 2, OBS_SIZE / 2), 0);
        }
    }

    #[test]
    fn open_interior_renders_free_with_oob_fringe() {
        let map = empty_map(64);
        let pose = Pose::new(32.5, 32.5, 0.0);
        let obs = render_observation(&map, &pose, OBS_SIZE).unwrap();
        // everything within the 24-patch around the middle of a 64-map is free
        assert!(obs.cells().iter().all(|&v| v == 0));
        // near the border the fringe renders occupied
        let pose = Pose::new(2.5, 32.5, std::f64::consts::PI);
        let obs = render_observation(&map, &pose, OBS_SIZE).unwrap();
        assert!(obs.cells().iter().any(|&v| v == 1));
    }

    #[test]
    fn wall_ahead_appears_in_forward_columns() {
        // wall segment 3 cells ahead of the robot, facing +x
        let side = 32;
        let mut occ = vec![false; side * side];
        for y in 0..side {
            occ[y * side + 19] = true; // vertical wall at x = 19
        }
        let map = GridMap::from_occupancy(side, side, 0, occ).unwrap();
        let pose = Pose::new(16.5, 16.5, 0.0);
        let obs = render_observation(&map, &pose, OBS_SIZE).unwrap();
        let half = OBS_SIZE / 2;
        // ego x = +3 lands in the wall: column half + 3 at the robot's row
        assert_eq!(obs.at(half, half + 3), 1);
        // cells closer than the wall are free
        assert_eq!(obs.at(half, half + 2), 0);
        assert_eq!(obs.at(half, half + 1), 0);
    }

    #[test]
    fn opposite_headings_give_180_rotated_patches() {
        let map = generate_map(9, &MapParams::default()).unwrap();
        let c = map.free_cells()[40];
        let (x, y) = c.center();
        for theta in [0.3f64, 1.2, -2.0] {
            let a = render_observation(&map, &Pose::new(x, y, theta), OBS_SIZE).unwrap();
            let b = render_observation(
                &map,
                &Pose::new(x, y, theta + std::f64::consts::PI),
                OBS_SIZE,
            )
            .unwrap();
            // 180-degree rotation about the robot index (half, half); with an
            // even patch side the outermost row/col 0 has no rotated partner
            let s = OBS_SIZE;
            for r in 1..s {
                for cc in 1..s {
                    assert_eq!(a.at(r, cc), b.at(s - r, s - cc), "(r={r}, c={cc})");
                }
            }
        }
    }

    #[test]
    fn pure_function_of_map_and_pose() {
        let map = generate_map(13, &MapParams::default()).unwrap();
        let c = map.free_cells()[10];
        let (x, y) = c.center();
        let pose = Pose::new(x, y, -0.4);
        let a = render_observation(&map, &pose, OBS_SIZE).unwrap();
        let b = render_observation(&map, &pose, OBS_SIZE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occupied_pose_rejected() {
        let map = generate_map(2, &MapParams::default()).unwrap();
        let occupied = Cell::new(0, 0);
        let (x, y) = occupied.center();
        assert!(render_observation(&map, &Pose::new(x, y, 0.0), OBS_SIZE).is_err());
    }
}
