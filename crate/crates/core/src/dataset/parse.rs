//! CSV parsing for the UJIIndoorLoc files.
//!
//! Column layout: 520 AP columns (WAP001..WAP520), then LONGITUDE, LATITUDE,
//! FLOOR, BUILDINGID, SPACEID, RELATIVEPOSITION, USERID, PHONEID, TIMESTAMP
//! — 529 data columns total. RSSI integers are kept raw here, including the
//! sentinel 100 ("not detected"), for the normalizer to interpret.

use super::{RawRecord, NUM_APS};
use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

const NUM_COLUMNS: usize = NUM_APS + 9;

/// Parses a UJIIndoorLoc-format CSV from a reader. An empty file (header
/// only or zero bytes) yields an empty vector.
pub fn parse_ujiindoorloc<R: Read>(reader: R) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let rowno = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::Data(format!("row {rowno}: {e}")))?;
        if row.len() != NUM_COLUMNS {
            return Err(Error::Data(format!(
                "row {rowno}: expected {NUM_COLUMNS} columns, got {}",
                row.len()
            )));
        }
        let mut rssi = Vec::with_capacity(NUM_APS);
        for c in 0..NUM_APS {
            let v: i16 = row[c].trim().parse().map_err(|_| {
                Error::Data(format!("row {rowno}: non-numeric RSSI '{}' in column {}", &row[c], c + 1))
            })?;
            rssi.push(v);
        }
        let f = |c: usize| -> Result<f64> {
            row[c].trim().parse().map_err(|_| {
                Error::Data(format!("row {rowno}: bad float '{}' in column {}", &row[c], c + 1))
            })
        };
        let int = |c: usize| -> Result<i32> {
            // Some exports carry floor/building as floats; accept both.
            row[c]
                .trim()
                .parse::<i32>()
                .or_else(|_| row[c].trim().parse::<f64>().map(|v| v as i32))
                .map_err(|_| {
                    Error::Data(format!("row {rowno}: bad integer '{}' in column {}", &row[c], c + 1))
                })
        };
        records.push(RawRecord {
            rssi,
            longitude: f(NUM_APS)?,
            latitude: f(NUM_APS + 1)?,
            floor: int(NUM_APS + 2)?,
            building: int(NUM_APS + 3)?,
            space_id: int(NUM_APS + 4)?,
            relative_position: int(NUM_APS + 5)?,
            timestamp: row[NUM_APS + 8].trim().parse().unwrap_or(0),
        });
    }
    Ok(records)
}

pub fn parse_ujiindoorloc_file(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    parse_ujiindoorloc(std::io::BufReader::new(file))
}
