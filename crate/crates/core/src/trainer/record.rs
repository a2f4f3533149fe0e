use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_cell};

pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_MAGIC: &[u8; 4] = b"ULSN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCurve {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Flattened parameters after `step` optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    /// Model after each completed epoch.
    pub checkpoints: Vec<Model>,
    pub snapshots: Vec<Snapshot>,
    pub curves: Vec<EpochCurve>,
    pub config: TrainConfig,
    /// Set when training stopped on a numeric failure.
    pub aborted: Option<String>,
}

impl TrainRecord {
    pub fn new(config: TrainConfig) -> Self {
        TrainRecord {
            checkpoints: Vec::new(),
            snapshots: Vec::new(),
            curves: Vec::new(),
            config,
            aborted: None,
        }
    }

    pub fn final_model(&self) -> Option<&Model> {
        self.checkpoints.last()
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.curves.last().map(|c| c.test_acc)
    }

    /// Writes `checkpoints/epoch_NNN.json`, `curves.csv` and `snapshots.bin`.
    pub fn save(&self, dir: &Path, config_hash: Option<&str>) -> Result<()> {
        let ck_dir = dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| Error::file(&ck_dir, e))?;
        for (i, m) in self.checkpoints.iter().enumerate() {
            let mut ck = Checkpoint::new(i + 1, m.clone());
            ck.config_hash = config_hash.map(str::to_owned);
            ck.save(&ck_dir.join(format!("epoch_{:03}.json", i + 1)))?;
        }
        let comment = config_hash.map(|h| format!("config_hash={h}"));
        let mut w = csv_writer(&dir.join("curves.csv"), comment.as_deref())?;
        w.write_record(["epoch", "train_loss", "train_acc", "test_acc"])?;
        for c in &self.curves {
            w.write_record([
                c.epoch.to_string(),
                fmt_cell(c.train_loss),
                fmt_cell(c.train_acc),
                fmt_cell(c.test_acc),
            ])?;
        }
        w.flush()?;
        write_snapshots(&dir.join("snapshots.bin"), &self.snapshots, config_hash)
    }

    /// Reads a directory written by [`TrainRecord::save`].
    pub fn load(dir: &Path, config: TrainConfig) -> Result<TrainRecord> {
        let ck_dir = dir.join("checkpoints");
        let mut names: Vec<_> = fs::read_dir(&ck_dir)
            .map_err(|e| Error::file(&ck_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let checkpoints = names
            .iter()
            .map(|p| Checkpoint::load(p).map(|c| c.model))
            .collect::<Result<Vec<_>>>()?;
        let mut curves = Vec::new();
        let mut r = csv_reader(&dir.join("curves.csv"))?;
        for rec in r.deserialize() {
            curves.push(rec?);
        }
        Ok(TrainRecord {
            checkpoints,
            snapshots: read_snapshots(&dir.join("snapshots.bin"))?,
            curves,
            config,
            aborted: None,
        })
    }
}

/// Binary layout, little-endian: magic `ULSN`, u32 version, u32 hash length,
/// hash bytes (UTF-8), u64 count, u64 dim, then per snapshot a u64 step and
/// `dim` f64 values.
pub fn write_snapshots(path: &Path, snaps: &[Snapshot], config_hash: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    let dim = snaps.first().map_or(0, |s| s.params.len());
    let hash = config_hash.unwrap_or("").as_bytes();
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::file(path, e));
    put(SNAPSHOT_MAGIC)?;
    put(&SNAPSHOT_VERSION.to_le_bytes())?;
    put(&(hash.len() as u32).to_le_bytes())?;
    put(hash)?;
    put(&(snaps.len() as u64).to_le_bytes())?;
    put(&(dim as u64).to_le_bytes())?;
    for s in snaps {
        if s.params.len() != dim {
            return Err(Error::shape("snapshots differ in length"));
        }
        put(&(s.step as u64).to_le_bytes())?;
        for v in &s.params {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::file(path, e))?;
        Ok(buf)
    };
    if take(4)? != SNAPSHOT_MAGIC {
        return Err(Error::invalid(format!("{} is not a snapshot file", path.display())));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Version {
            what: "snapshots".into(),
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let hash_len = u32_at(take(4)?) as usize;
    take(hash_len)?;
    let count = u64_at(take(8)?) as usize;
    let dim = u64_at(take(8)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let step = u64_at(take(8)?) as usize;
        let raw = take(8 * dim)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Snapshot { step, params });
    }
    Ok(out)
}
