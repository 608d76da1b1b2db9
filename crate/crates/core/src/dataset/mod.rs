//! UJIIndoorLoc ingestion: CSV parsing, RSSI normalization, the reference
//! point catalog, train/validation splitting, augmentation, and the 24x24
//! image encoding.

pub mod augment;
pub mod cache;
pub mod parse;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Number of access-point columns in the dataset.
pub const NUM_APS: usize = 520;
/// Side of the square fingerprint image; 24*24 = 576 >= 520.
pub const IMAGE_SIDE: usize = 24;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Dataset sentinel for "access point not detected".
pub const RSSI_NOT_DETECTED: i16 = 100;

/// One row of the raw CSV: RSSI integers plus location metadata.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub rssi: Vec<i16>,
    pub longitude: f64,
    pub latitude: f64,
    pub floor: i32,
    pub building: i32,
    pub space_id: i32,
    pub relative_position: i32,
    pub timestamp: i64,
}

/// A normalized fingerprint: 520 values in [0,1] plus metadata. 0 means
/// "no signal / access point absent".
#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub rssi: Vec<f32>,
    pub longitude: f64,
    pub latitude: f64,
    pub floor: i32,
    pub building: i32,
    pub space_id: i32,
    pub relative_position: i32,
    pub timestamp: i64,
}

impl Fingerprint {
    pub fn from_raw(raw: &RawRecord) -> Self {
        Fingerprint {
            rssi: raw.rssi.iter().map(|&v| normalize_rssi(v)).collect(),
            longitude: raw.longitude,
            latitude: raw.latitude,
            floor: raw.floor,
            building: raw.building,
            space_id: raw.space_id,
            relative_position: raw.relative_position,
            timestamp: raw.timestamp,
        }
    }

    /// The reference-point key: (building, floor, space, relative position).
    pub fn rp_key(&self) -> RpKey {
        (self.building, self.floor, self.space_id, self.relative_position)
    }
}

/// Maps the sentinel to 0.0 and dBm values linearly onto [0,1], clamping
/// stray readings into [-100, 0] first.
pub fn normalize_rssi(raw: i16) -> f32 {
    if raw == RSSI_NOT_DETECTED {
        return 0.0;
    }
    let clamped = raw.clamp(-100, 0) as f32;
    (clamped + 100.0) / 100.0
}

pub type RpKey = (i32, i32, i32, i32);

/// One catalog entry: the 4-tuple plus the centroid of its training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RpEntry {
    pub key: RpKey,
    pub longitude: f64,
    pub latitude: f64,
}

/// Bidirectional map between class indices and reference points, with
/// per-class centroid coordinates.
#[derive(Debug, Clone)]
pub struct RpCatalog {
    entries: Vec<RpEntry>,
    index: BTreeMap<RpKey, usize>,
}

impl RpCatalog {
    /// Builds the catalog from training fingerprints: one class per distinct
    /// (building, floor, space, relative-position) tuple, ordered by key for
    /// determinism; centroids are the mean coordinates of the samples.
    pub fn build(records: &[Fingerprint]) -> Self {
        let mut acc: BTreeMap<RpKey, (f64, f64, usize)> = BTreeMap::new();
        for r in records {
            let e = acc.entry(r.rp_key()).or_insert((0.0, 0.0, 0));
            e.0 += r.longitude;
            e.1 += r.latitude;
            e.2 += 1;
        }
        let mut entries = Vec::with_capacity(acc.len());
        let mut index = BTreeMap::new();
        for (key, (lon, lat, n)) in acc {
            index.insert(key, entries.len());
            entries.push(RpEntry { key, longitude: lon / n as f64, latitude: lat / n as f64 });
        }
        RpCatalog { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_of(&self, key: RpKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn entry(&self, class: usize) -> Option<&RpEntry> {
        self.entries.get(class)
    }

    pub fn entries(&self) -> &[RpEntry] {
        &self.entries
    }

    /// Stable id over the class list and centroids, stored in weight files
    /// to reject evaluating a model against the wrong catalog.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.entries.len() * 40);
        for e in &self.entries {
            bytes.extend_from_slice(&e.key.0.to_le_bytes());
            bytes.extend_from_slice(&e.key.1.to_le_bytes());
            bytes.extend_from_slice(&e.key.2.to_le_bytes());
            bytes.extend_from_slice(&e.key.3.to_le_bytes());
            bytes.extend_from_slice(&e.longitude.to_le_bytes());
            bytes.extend_from_slice(&e.latitude.to_le_bytes());
        }
        crate::io_util::fnv1a(&bytes)
    }

    /// CSV serialization: class-index, building, floor, space, relpos, lon, lat.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,building,floor,space,relpos,longitude,latitude\n");
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i, e.key.0, e.key.1, e.key.2, e.key.3, e.longitude, e.latitude
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut index = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("catalog line {}: expected 7 fields", lineno + 1)));
            }
            let parse_i = |s: &str| {
                s.trim().parse::<i32>().map_err(|_| {
                    Error::Data(format!("catalog line {}: bad integer '{s}'", lineno + 1))
                })
            };
            let parse_f = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("catalog line {}: bad float '{s}'", lineno + 1))
                })
            };
            let key = (parse_i(f[1])?, parse_i(f[2])?, parse_i(f[3])?, parse_i(f[4])?);
            index.insert(key, entries.len());
            entries.push(RpEntry { key, longitude: parse_f(f[5])?, latitude: parse_f(f[6])? });
        }
        Ok(RpCatalog { entries, index })
    }
}

/// 520 normalized values embedded row-major into a 24x24 single-channel
/// image; pixels 520..575 are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintImage {
    pub pixels: Vec<f32>,
}

/// Row-major placement: AP index a lands at (row a/24, col a%24).
pub fn to_image(rssi: &[f32]) -> Result<FingerprintImage> {
    if rssi.len() != NUM_APS {
        return Err(Error::Data(format!("fingerprint has {} values, expected {NUM_APS}", rssi.len())));
    }
    let mut pixels = vec![0.0f32; IMAGE_PIXELS];
    pixels[..NUM_APS].copy_from_slice(rssi);
    Ok(FingerprintImage { pixels })
}

/// Inverse of `to_image`; the padding tail is dropped.
pub fn from_image(img: &FingerprintImage) -> Vec<f32> {
    img.pixels[..NUM_APS].to_vec()
}

/// A labeled, image-encoded sample set stored contiguously for fast batch
/// assembly: `images` holds `len * 576` floats.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub longitudes: Vec<f64>,
    pub latitudes: Vec<f64>,
    pub floors: Vec<i32>,
    pub buildings: Vec<i32>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn push(&mut self, image: &FingerprintImage, label: u32, lon: f64, lat: f64, floor: i32, building: i32) {
        self.images.extend_from_slice(&image.pixels);
        self.labels.push(label);
        self.longitudes.push(lon);
        self.latitudes.push(lat);
        self.floors.push(floor);
        self.buildings.push(building);
    }

    /// Encodes fingerprints against a catalog. Fingerprints whose 4-tuple is
    /// not in the catalog get label `u32::MAX` and are counted by the caller.
    pub fn from_fingerprints(fps: &[Fingerprint], catalog: &RpCatalog) -> Result<Self> {
        let mut set = SampleSet::default();
        for fp in fps {
            let label = catalog.class_of(fp.rp_key()).map(|c| c as u32).unwrap_or(u32::MAX);
            let img = to_image(&fp.rssi)?;
            set.push(&img, label, fp.longitude, fp.latitude, fp.floor, fp.building);
        }
        Ok(set)
    }
}

/// Train/validation membership produced by `split_train_val`.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Stratified 80:20 split. The global train count is exactly
/// `round(0.8 * n)`; per-class quotas come from largest-remainder
/// apportionment so strata stay proportional. Classes with fewer than 5
/// samples are pooled and assigned randomly to fill the remaining quota.
pub fn split_train_val(records: &[Fingerprint], seed: u64) -> SplitSet {
    const RATIO: f64 = 0.8;
    let n = records.len();
    let train_target = (RATIO * n as f64).round() as usize;
    // Domain-separated stream so split and augmentation draws never overlap.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53504c4954u64);

    let mut by_class: BTreeMap<RpKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.rp_key()).or_default().push(i);
    }

    let mut small_pool: Vec<usize> = Vec::new();
    let mut strata: Vec<Vec<usize>> = Vec::new();
    for (_, mut idxs) in by_class {
        if idxs.len() < 5 {
            small_pool.append(&mut idxs);
        } else {
            strata.push(idxs);
        }
    }

    // Largest-remainder apportionment of the stratified quota.
    let strata_total: usize = strata.iter().map(|s| s.len()).sum();
    let strata_target = ((RATIO * strata_total as f64).round() as usize)
        .min(train_target)
        .min(strata_total);
    let mut bases: Vec<usize> = Vec::with_capacity(strata.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(strata.len());
    for (ci, s) in strata.iter().enumerate() {
        let exact = RATIO * s.len() as f64;
        let base = exact.floor() as usize;
        bases.push(base);
        remainders.push((ci, exact - base as f64));
    }
    let assigned: usize = bases.iter().sum();
    let extra = strata_target.saturating_sub(assigned);
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(ci, _) in remainders.iter().take(extra) {
        bases[ci] += 1;
    }

    let mut train = Vec::with_capacity(train_target);
    let mut validation = Vec::with_capacity(n - train_target);
    for (ci, mut s) in strata.into_iter().enumerate() {
        s.shuffle(&mut rng);
        let take = bases[ci].min(s.len());
        train.extend_from_slice(&s[..take]);
        validation.extend_from_slice(&s[take..]);
    }

    // Fill the remaining global quota from the small-class pool.
    small_pool.shuffle(&mut rng);
    let need = train_target.saturating_sub(train.len()).min(small_pool.len());
    train.extend_from_slice(&small_pool[..need]);
    validation.extend_from_slice(&small_pool[need..]);

    train.sort_unstable();
    validation.sort_unstable();
    SplitSet { train, validation }
}
