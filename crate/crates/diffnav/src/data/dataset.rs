//! Dataset assembly and the binary sample container.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expert::{build_trajectory, plan_expert_path};
use super::slice::{denormalize_actions, slice_samples, SliceParams, TrainingSample};
use crate::util::{derive_seed, stream_rng};
use crate::world::{
    generate_map, geodesic_field, step_waypoints, Cell, GridMap, MapParams, Observation,
};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DNAVDS01";

/// Generation configuration (serializable; mirrored by the CLI config file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_maps: usize,
    pub trajs_per_map: usize,
    /// Expert legs chained per trajectory (each leg ends far from its start).
    pub legs_per_traj: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub dist_max: usize,
    pub action_norm: f64,
    pub obs_size: usize,
    /// Minimum geodesic separation of sampled (start, goal) cells.
    pub min_separation: u32,
    pub map_params: MapParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_maps: 100,
            trajs_per_map: 8,
            legs_per_traj: 2,
            context_len: 3,
            horizon: 8,
            dist_max: 20,
            action_norm: 2.0,
            obs_size: 24,
            min_separation: 25,
            map_params: MapParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn slice_params(&self) -> SliceParams {
        SliceParams {
            context_len: self.context_len,
            horizon: self.horizon,
            dist_max: self.dist_max,
            action_norm: self.action_norm,
        }
    }

    /// Map seeds used for training data; the benchmark derives its held-out
    /// seeds from a different label, so the two sets never collide.
    pub fn map_seeds(&self) -> Vec<u64> {
        (0..self.n_maps)
            .map(|i| derive_seed(self.seed, "dataset-map", i as u64))
            .collect()
    }
}

/// In-memory dataset. Patch payloads stay bit-packed as u8 {0,1}; records
/// serialize as little-endian f32 per the container layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub context_len: usize,
    pub horizon: usize,
    pub obs_size: usize,
    pub action_norm: f64,
    pub dist_max: usize,
    pub samples: Vec<TrainingSample>,
}

/// Human-readable sidecar written next to the binary container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub sample_count: usize,
    pub config: DatasetConfig,
}

/// Generate the full corpus: `n_maps` procedurally generated maps, several
/// multi-leg expert trajectories each, sliced into supervised samples.
/// Deterministic per seed; map generation runs in parallel but results are
/// merged in map order.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_maps == 0 || config.trajs_per_map == 0 || config.legs_per_traj == 0 {
        return Err(Error::Config("dataset counts must be positive".into()));
    }
    let seeds = config.map_seeds();
    let per_map: Vec<Result<Vec<TrainingSample>>> = seeds
        .par_iter()
        .enumerate()
        .map(|(mi, &map_seed)| build_map_samples(config, mi, map_seed))
        .collect();
    let mut samples = Vec::new();
    for r in per_map {
        samples.extend(r?);
    }
    Ok(Dataset {
        context_len: config.context_len,
        horizon: config.horizon,
        obs_size: config.obs_size,
        action_norm: config.action_norm,
        dist_max: config.dist_max,
        samples,
    })
}

fn build_map_samples(
    config: &DatasetConfig,
    map_index: usize,
    map_seed: u64,
) -> Result<Vec<TrainingSample>> {
    let map = generate_map(map_seed, &config.map_params)?;
    let params = config.slice_params();
    let mut out = Vec::new();
    for tj in 0..config.trajs_per_map {
        let stream = (map_index * 10_000 + tj) as u64;
        let mut rng = stream_rng(config.seed, "trajectory", stream);
        let path = multi_leg_path(&map, config, &mut rng)?;
        let traj = build_trajectory(&map, &path, &mut rng, config.obs_size)?;
        let samples = slice_samples(&traj, &params, &mut rng)?;
        for s in &samples {
            validate_sample(&map, s, &params)?;
        }
        out.extend(samples);
    }
    Ok(out)
}

/// Chain `legs_per_traj` far-pair expert legs into one long wander.
fn multi_leg_path(
    map: &GridMap,
    config: &DatasetConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Cell>> {
    let free = map.free_cells();
    let mut start = free[rng.gen_range(0..free.len())];
    let mut path: Vec<Cell> = vec![start];
    for _ in 0..config.legs_per_traj {
        let field = geodesic_field(map, start)?;
        let candidates: Vec<Cell> = free
            .iter()
            .copied()
            .filter(|c| {
                field[c.y as usize * map.width() + c.x as usize]
                    .map(|d| d >= config.min_separation)
                    .unwrap_or(false)
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "map seed {} offers no goal at separation {}",
                map.seed(),
                config.min_separation
            )));
        }
        let goal = candidates[rng.gen_range(0..candidates.len())];
        let jitter = rng.gen::<u64>();
        let leg = plan_expert_path(map, start, goal, Some(jitter))?;
        path.extend(leg.into_iter().skip(1));
        start = goal;
    }
    Ok(path)
}

/// Hard invariants every emitted sample satisfies: bounded normalized
/// actions, bounded label, and collision-free replay of the expert segment.
pub fn validate_sample(map: &GridMap, s: &TrainingSample, params: &SliceParams) -> Result<()> {
    for a in &s.actions {
        if !(a[0].abs() <= 1.0 && a[1].abs() <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "action {a:?} outside [-1, 1]"
            )));
        }
    }
    if !(0.0..=1.0).contains(&s.dist_label) {
        return Err(Error::InvalidArgument(format!(
            "dist_label {} outside [0, 1]",
            s.dist_label
        )));
    }
    let info = s
        .replay
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("sample lacks replay provenance".into()))?;
    let deltas = denormalize_actions(&s.actions, params.action_norm);
    for i in 1..=deltas.len() {
        let r = step_waypoints(map, &info.start_pose, &deltas[..i]);
        if r.collisions != 0 {
            return Err(Error::InvalidArgument(format!(
                "replay collided at prefix {i}"
            )));
        }
        let (ex, ey) = info.future[i - 1];
        let err = ((r.pose.x - ex).powi(2) + (r.pose.y - ey).powi(2)).sqrt();
        if err >= 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "replay error {err} at prefix {i}"
            )));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn record_values(&self) -> usize {
        let patch = self.obs_size * self.obs_size;
        (self.context_len + 1) * patch + patch + self.horizon * 2 + 1
    }

    /// Binary container: magic, then u32 LE counts/dims
    /// (samples, P, H, S) plus f32 LE action_norm and u32 dist_max,
    /// then per sample: context patches oldest-first, goal patch,
    /// H x 2 actions, dist_label — all little-endian f32.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        for v in [
            self.samples.len() as u32,
            self.context_len as u32,
            self.horizon as u32,
            self.obs_size as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.action_norm as f32).to_le_bytes())?;
        w.write_all(&(self.dist_max as u32).to_le_bytes())?;
        for s in &self.samples {
            for obs in s.context.iter().chain(std::iter::once(&s.goal)) {
                for &cell in obs.cells() {
                    w.write_all(&(cell as f32).to_le_bytes())?;
                }
            }
            for a in &s.actions {
                w.write_all(&a[0].to_le_bytes())?;
                w.write_all(&a[1].to_le_bytes())?;
            }
            w.write_all(&s.dist_label.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                path: "dataset".into(),
                detail: "bad magic".into(),
            });
        }
        fn next_u32(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let count = next_u32(&mut r)? as usize;
        let context_len = next_u32(&mut r)? as usize;
        let horizon = next_u32(&mut r)? as usize;
        let obs_size = next_u32(&mut r)? as usize;
        let action_norm = {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            f32::from_le_bytes(b) as f64
        };
        let dist_max = next_u32(&mut r)? as usize;

        let patch = obs_size * obs_size;
        let per_record = (context_len + 1 + 1) * patch + horizon * 2 + 1;
        let mut samples = Vec::with_capacity(count);
        let mut buf = vec![0u8; per_record * 4];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let mut off = 0;
            let mut patches = Vec::with_capacity(context_len + 2);
            for _ in 0..(context_len + 2) {
                let cells: Vec<u8> = vals[off..off + patch]
                    .iter()
                    .map(|&v| u8::from(v != 0.0))
                    .collect();
                patches.push(Observation::from_cells(obs_size, cells)?);
                off += patch;
            }
            let goal = patches.pop().expect("goal patch");
            let mut actions = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                actions.push([vals[off], vals[off + 1]]);
                off += 2;
            }
            let dist_label = vals[off];
            samples.push(TrainingSample {
                context: patches,
                goal,
                actions,
                dist_label,
                replay: None,
            });
        }
        Ok(Dataset {
            context_len,
            horizon,
            obs_size,
            action_norm,
            dist_max,
            samples,
        })
    }

    /// Write container plus the `.meta.toml` sidecar.
    pub fn save(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)?;
        let meta_path = meta_path_for(path);
        let _ = meta_path; // BISECT: toml serialization stubbed
        let _ = meta;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

pub fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.toml");
    std::path::PathBuf::from(os)
}
