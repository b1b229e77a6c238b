//! On-disk dataset format and in-memory access to generated trajectories.
//!
//! A dataset file is a JSON header (grid hash, dt, bus count, per-trajectory
//! index with schedules, an optional normalizer slot) followed by one
//! little-endian `f64` payload holding every extended state, laid out
//! trajectory-major, step-major, bus-major, feature-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SnapshotWindow, STATE_DIM};
use crate::sim::DisturbanceSchedule;
use crate::training::Normalizer;

const MAGIC: &[u8; 8] = b"PGDS0001";

/// Whether a trajectory is a single-disturbance settling response or a
/// recurring-disturbance response that never reaches equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Complete,
    Initial,
}

/// One trajectory's extended states plus the schedule that produced it.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub kind: TrajectoryKind,
    pub n_buses: usize,
    /// `extended[k]` is the step-k snapshot, N×10 row-major.
    pub extended: Vec<Vec<f64>>,
    pub schedule: DisturbanceSchedule,
}

impl TrajectoryRecord {
    pub fn n_steps(&self) -> usize {
        self.extended.len()
    }

    pub fn extended_step(&self, k: usize) -> &[f64] {
        &self.extended[k]
    }

    /// The 6 measurable features of every bus at step k.
    pub fn measurable(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_buses * 6);
        for bus in 0..self.n_buses {
            out.extend_from_slice(&self.extended[k][bus * STATE_DIM..bus * STATE_DIM + 6]);
        }
        out
    }

    /// Forward-difference rate of the measurable state at step k.
    pub fn rate(&self, k: usize, dt: f64) -> Vec<f64> {
        let a = self.measurable(k);
        let b = self.measurable(k + 1);
        a.iter().zip(&b).map(|(x, y)| (y - x) / dt).collect()
    }

    /// Input window ending at step k (current step first): needs k ≥ c−1.
    pub fn window(&self, k: usize, c: usize) -> Result<SnapshotWindow> {
        if k + 1 < c {
            return Err(Error::argument(format!(
                "window at step {k} needs {c} past steps"
            )));
        }
        let steps: Vec<&[f64]> = (0..c).map(|back| self.extended[k - back].as_slice()).collect();
        SnapshotWindow::from_steps(&steps, self.n_buses)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryHeader {
    kind: TrajectoryKind,
    n_steps: usize,
    schedule: DisturbanceSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    /// Canonical grid-spec JSON, embedded so training and evaluation are
    /// self-contained given the dataset file.
    grid_json: String,
    grid_hash: String,
    dt: f64,
    n_buses: usize,
    /// Identifier of the run that produced this file (empty outside the CLI).
    run_id: String,
    /// Slot for normalization statistics; populated copies travel inside
    /// checkpoints, generation leaves this empty.
    normalizer: Option<Normalizer>,
    trajectories: Vec<TrajectoryHeader>,
}

/// A generated dataset: trajectories of extended states over one grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid_json: String,
    pub grid_hash: String,
    pub dt: f64,
    pub n_buses: usize,
    pub run_id: String,
    pub normalizer: Option<Normalizer>,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn new(
        grid_json: String,
        grid_hash: String,
        dt: f64,
        n_buses: usize,
        records: Vec<TrajectoryRecord>,
    ) -> Self {
        Dataset {
            grid_json,
            grid_hash,
            dt,
            n_buses,
            run_id: String::new(),
            normalizer: None,
            records,
        }
    }

    /// Parses the embedded grid specification.
    pub fn grid_spec(&self) -> Result<crate::sim::GridSpec> {
        crate::sim::GridSpec::from_json(&self.grid_json)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            format_version: 1,
            grid_json: self.grid_json.clone(),
            grid_hash: self.grid_hash.clone(),
            dt: self.dt,
            n_buses: self.n_buses,
            run_id: self.run_id.clone(),
            normalizer: self.normalizer.clone(),
            trajectories: self
                .records
                .iter()
                .map(|r| TrajectoryHeader {
                    kind: r.kind,
                    n_steps: r.n_steps(),
                    schedule: r.schedule.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for rec in &self.records {
            for step in &rec.extended {
                for v in step {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{} is not a dataset file",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;
        if header.format_version != 1 {
            return Err(Error::format(format!(
                "unsupported dataset version {}",
                header.format_version
            )));
        }

        let step_floats = header.n_buses * STATE_DIM;
        let mut records = Vec::with_capacity(header.trajectories.len());
        let mut buf = vec![0u8; step_floats * 8];
        for th in &header.trajectories {
            let mut extended = Vec::with_capacity(th.n_steps);
            for _ in 0..th.n_steps {
                r.read_exact(&mut buf)?;
                let step: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                extended.push(step);
            }
            records.push(TrajectoryRecord {
                kind: th.kind,
                n_buses: header.n_buses,
                extended,
                schedule: th.schedule.clone(),
            });
        }
        let mut tail = Vec::new();
        r.read_to_end(&mut tail)?;
        if !tail.is_empty() {
            return Err(Error::format("trailing bytes after dataset payload"));
        }
        Ok(Dataset {
            grid_json: header.grid_json,
            grid_hash: header.grid_hash,
            dt: header.dt,
            n_buses: header.n_buses,
            run_id: header.run_id,
            normalizer: header.normalizer,
            records,
        })
    }

    /// Indices of trajectories by kind, in file order.
    pub fn indices_of(&self, kind: TrajectoryKind) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Plot-ready CSV of one trajectory: step, bus, then the ten extended
    /// features.
    pub fn write_trajectory_csv(&self, index: usize, out: &mut impl Write) -> Result<()> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| Error::argument(format!("no trajectory {index}")))?;
        writeln!(out, "step,bus,p,q,re_v,im_v,re_i,im_i,dp,dq,gamma,beta")?;
        for (k, step) in rec.extended.iter().enumerate() {
            for bus in 0..rec.n_buses {
                let f = &step[bus * STATE_DIM..(bus + 1) * STATE_DIM];
                write!(out, "{k},{bus}")?;
                for v in f {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// SHA-256 of a file, hex-encoded. Used for manifests and leakage checks.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(crate::sim::hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{desk_grid_9bus, make_dataset};

    #[test]
    fn save_load_roundtrip_bitexact() {
        let spec = desk_grid_9bus();
        let ds = make_dataset(&spec, 2, 5, 11, false).unwrap();
        let dir = std::env::temp_dir().join("pidgeun_ds_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.pgds");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        assert_eq!(back.grid_hash, ds.grid_hash);
        assert_eq!(back.dt, ds.dt);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.schedule, b.schedule);
            for (x, y) in a.extended.iter().zip(&b.extended) {
                assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }

        // Same generation, same bytes.
        let ds2 = make_dataset(&spec, 2, 5, 11, false).unwrap();
        let path2 = dir.join("b.pgds");
        ds2.save(&path2).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), file_sha256(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn window_extraction_orders_steps_current_first() {
        let spec = desk_grid_9bus();
        let ds = make_dataset(&spec, 1, 0, 5, false).unwrap();
        let rec = &ds.records[0];
        let w = rec.window(4, 3).unwrap();
        // Node 0, current step (=4) occupies the first 10 features.
        let row = w.row(0);
        assert_eq!(&row[0..STATE_DIM], &rec.extended[4][0..STATE_DIM]);
        assert_eq!(&row[STATE_DIM..2 * STATE_DIM], &rec.extended[3][0..STATE_DIM]);
        assert_eq!(
            &row[2 * STATE_DIM..3 * STATE_DIM],
            &rec.extended[2][0..STATE_DIM]
        );
        assert!(rec.window(1, 3).is_err());
    }

    #[test]
    fn rates_are_forward_differences() {
        let spec = desk_grid_9bus();
        let ds = make_dataset(&spec, 1, 0, 5, false).unwrap();
        let rec = &ds.records[0];
        let r = rec.rate(10, ds.dt);
        let a = rec.measurable(10);
        let b = rec.measurable(11);
        for ((x, y), rate) in a.iter().zip(&b).zip(&r) {
            assert!(((y - x) / ds.dt - rate).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = std::env::temp_dir().join("pidgeun_ds_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgds");
        std::fs::write(&path, b"NOTADATA00000000").unwrap();
        assert!(Dataset::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
