//! Versioned binary cache holding normalized fingerprints.
//!
//! Layout (little-endian, FNV-1a trailer):
//!   magic "FPC1" | version u32 | source hashes (train, test) u64 x2 |
//!   n_train u32 | n_test u32 | records...
//! Each record: 520 x f32 RSSI, lon f64, lat f64, floor i32, building i32,
//! space i32, relpos i32, timestamp i64.

use super::{Fingerprint, NUM_APS};
use crate::error::{Error, Result};
use crate::io_util::{HashReader, HashWriter};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FPC1";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct DatasetCache {
    pub train_pool: Vec<Fingerprint>,
    pub test: Vec<Fingerprint>,
    /// FNV-1a of the source CSV bytes, for provenance.
    pub train_source_hash: u64,
    pub test_source_hash: u64,
}

impl DatasetCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = HashWriter::new(BufWriter::new(File::create(path)?));
        w.write_bytes(MAGIC)?;
        w.write_u32(VERSION)?;
        w.write_u64(self.train_source_hash)?;
        w.write_u64(self.test_source_hash)?;
        w.write_u32(self.train_pool.len() as u32)?;
        w.write_u32(self.test.len() as u32)?;
        for fp in self.train_pool.iter().chain(&self.test) {
            w.write_f32_slice(&fp.rssi)?;
            w.write_f64(fp.longitude)?;
            w.write_f64(fp.latitude)?;
            w.write_bytes(&fp.floor.to_le_bytes())?;
            w.write_bytes(&fp.building.to_le_bytes())?;
            w.write_bytes(&fp.space_id.to_le_bytes())?;
            w.write_bytes(&fp.relative_position.to_le_bytes())?;
            w.write_i64(fp.timestamp)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = HashReader::new(BufReader::new(File::open(path)?))?;
        let magic = r.read_bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a dataset cache (bad magic)".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let train_source_hash = r.read_u64()?;
        let test_source_hash = r.read_u64()?;
        let n_train = r.read_u32()? as usize;
        let n_test = r.read_u32()? as usize;
        let read_fp = |r: &mut HashReader| -> Result<Fingerprint> {
            let rssi = r.read_f32_vec(NUM_APS)?;
            let longitude = r.read_f64()?;
            let latitude = r.read_f64()?;
            let floor = i32::from_le_bytes(r.read_bytes(4)?.try_into().unwrap());
            let building = i32::from_le_bytes(r.read_bytes(4)?.try_into().unwrap());
            let space_id = i32::from_le_bytes(r.read_bytes(4)?.try_into().unwrap());
            let relative_position = i32::from_le_bytes(r.read_bytes(4)?.try_into().unwrap());
            let timestamp = r.read_i64()?;
            Ok(Fingerprint {
                rssi,
                longitude,
                latitude,
                floor,
                building,
                space_id,
                relative_position,
                timestamp,
            })
        };
        let mut train_pool = Vec::with_capacity(n_train);
        for _ in 0..n_train {
            train_pool.push(read_fp(&mut r)?);
        }
        let mut test = Vec::with_capacity(n_test);
        for _ in 0..n_test {
            test.push(read_fp(&mut r)?);
        }
        Ok(DatasetCache { train_pool, test, train_source_hash, test_source_hash })
    }
}
