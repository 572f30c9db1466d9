use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::rng::{seeded, Stream};

/// One interaction event as read from disk, before any filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Valid = 1,
    Test = 2,
}

impl Split {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(b: u8) -> Result<Split> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Valid),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("invalid split tag {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train|valid|test)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Entry {
    pub user: u32,
    pub item: u32,
    pub split: Split,
}

/// Bijection raw key → dense index, first-seen order.
#[derive(Clone, Debug, Default)]
pub struct IdMap {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn get_or_insert(&mut self, key: &str) -> u32 {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), i);
        i
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, index: u32) -> &str {
        &self.keys[index as usize]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Build a map from an explicit key list (index = list position).
    pub fn from_keys(keys: Vec<String>) -> Result<IdMap> {
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate key '{k}' in id map")));
            }
        }
        Ok(IdMap { keys, index })
    }
}

/// Sparse implicit-feedback matrix with dense contiguous IDs and a
/// train/valid/test tag per entry. Entries are kept sorted by (user,
/// item), which makes serialization canonical.
#[derive(Clone, Debug)]
pub struct InteractionMatrix {
    pub num_users: usize,
    pub num_items: usize,
    pub entries: Vec<Entry>,
    pub user_map: IdMap,
    pub item_map: IdMap,
    pub seed: u64,
}

/// Symmetric degree normalization of the train interactions:
/// entry (u,v) carries 1/√(d_u·d_v).
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub matrix: SparseMatrix,
    pub user_degrees: Vec<usize>,
    pub item_degrees: Vec<usize>,
}

/// Named CSV columns for the generic ingestion path.
#[derive(Clone, Debug)]
pub struct CsvColumns {
    pub user: String,
    pub item: String,
    pub rating: String,
    pub timestamp: Option<String>,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            user: "user_id".into(),
            item: "item_id".into(),
            rating: "rating".into(),
            timestamp: None,
        }
    }
}

/// Parse the 4-column tab-separated interaction log format
/// (`user<TAB>item<TAB>rating<TAB>timestamp`, no header), one record per
/// line, order preserved.
pub fn parse_ml100k(path: &Path) -> Result<Vec<RawInteraction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                msg: "empty user or item key".into(),
            });
        }
        let rating: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: line_no,
            msg: format!("bad rating '{}'", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("non-finite rating '{}'", fields[2]),
            });
        }
        let timestamp: i64 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: line_no,
            msg: format!("bad timestamp '{}'", fields[3]),
        })?;
        out.push(RawInteraction {
            user_key: fields[0].to_string(),
            item_key: fields[1].to_string(),
            rating,
            timestamp: Some(timestamp),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    Ok(out)
}

/// Parse a headered CSV using the named columns.
pub fn parse_csv(path: &Path, columns: &CsvColumns) -> Result<Vec<RawInteraction>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema {
            path: path.into(),
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                path: path.into(),
                msg: format!("missing column '{name}' (headers: {headers:?})"),
            })
    };
    let u_col = col(&columns.user)?;
    let i_col = col(&columns.item)?;
    let r_col = col(&columns.rating)?;
    let t_col = match &columns.timestamp {
        Some(name) => Some(col(name)?),
        None => None,
    };

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Schema {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(out.len() + 2);
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                msg: format!("row has only {} fields", record.len()),
            })
        };
        let user_key = field(u_col)?.to_string();
        let item_key = field(i_col)?.to_string();
        if user_key.is_empty() || item_key.is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: "empty user or item key".into(),
            });
        }
        let rating_str = field(r_col)?;
        let rating: f64 = rating_str.parse().map_err(|_| Error::Parse {
            path: path.into(),
            line,
            msg: format!("non-numeric rating '{rating_str}'"),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("non-finite rating '{rating_str}'"),
            });
        }
        let timestamp = match t_col {
            Some(idx) => Some(field(idx)?.parse::<i64>().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                msg: "bad timestamp".into(),
            })?),
            None => None,
        };
        out.push(RawInteraction {
            user_key,
            item_key,
            rating,
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    Ok(out)
}

/// Restrict the log to a uniformly sampled set of `n_users` distinct
/// users (partial Fisher–Yates over the first-seen user list), keeping
/// interaction order.
pub fn subsample_users(
    interactions: &[RawInteraction],
    n_users: usize,
    seed: u64,
) -> Result<Vec<RawInteraction>> {
    let mut distinct: Vec<&str> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for it in interactions {
        if seen.insert(&it.user_key, ()).is_none() {
            distinct.push(&it.user_key);
        }
    }
    if n_users > distinct.len() {
        return Err(Error::Range(format!(
            "cannot subsample {n_users} users from {} distinct",
            distinct.len()
        )));
    }
    let mut rng = seeded(seed, Stream::Subsample);
    let len = distinct.len();
    for i in 0..n_users {
        let j = rng.random_range(i..len);
        distinct.swap(i, j);
    }
    let chosen: HashMap<&str, ()> = distinct[..n_users].iter().map(|&u| (u, ())).collect();
    Ok(interactions
        .iter()
        .filter(|it| chosen.contains_key(it.user_key.as_str()))
        .cloned()
        .collect())
}

/// Quota-rule allocation of `n` interactions across (train, valid, test):
/// floors plus largest remainders, ties broken train > valid > test. Each
/// bucket lands within ±1 of its exact share, and train is forced ≥ 1.
fn allocate_split(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let quotas = [n as f64 * ratios.0, n as f64 * ratios.1, n as f64 * ratios.2];
    let mut alloc = [
        quotas[0].floor() as usize,
        quotas[1].floor() as usize,
        quotas[2].floor() as usize,
    ];
    let mut leftover = n - (alloc[0] + alloc[1] + alloc[2]);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &b in &order {
        if leftover == 0 {
            break;
        }
        alloc[b] += 1;
        leftover -= 1;
    }
    if alloc[0] == 0 && n > 0 {
        let donor = if alloc[1] >= alloc[2] { 1 } else { 2 };
        alloc[donor] -= 1;
        alloc[0] += 1;
    }
    alloc
}

/// Build the ID-mapped binary matrix: threshold-filter ratings, collapse
/// duplicate (user, item) pairs keeping the first occurrence, assign
/// dense IDs in first-seen order, split each user's interactions by the
/// quota rule with a seeded shuffle, and drop valid/test entries whose
/// item never appears in train (dimensions are kept; such items become
/// zero-degree columns).
pub fn build_matrix(
    interactions: &[RawInteraction],
    rating_threshold: f64,
    split_ratios: (f64, f64, f64),
    seed: u64,
) -> Result<InteractionMatrix> {
    let (r0, r1, r2) = split_ratios;
    if !(r0 > 0.0 && r1 >= 0.0 && r2 >= 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive with train > 0, got ({r0}, {r1}, {r2})"
        )));
    }
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            r0 + r1 + r2
        )));
    }
    if interactions.is_empty() {
        return Err(Error::EmptyDataset("no interactions supplied".into()));
    }

    let mut user_map = IdMap::default();
    let mut item_map = IdMap::default();
    let mut pair_seen: HashMap<(u32, u32), ()> = HashMap::new();
    let mut per_user: Vec<Vec<u32>> = Vec::new();
    for it in interactions {
        if it.rating < rating_threshold {
            continue;
        }
        let u = user_map.get_or_insert(&it.user_key);
        let v = item_map.get_or_insert(&it.item_key);
        if pair_seen.insert((u, v), ()).is_some() {
            continue;
        }
        if u as usize >= per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u as usize].push(v);
    }
    let num_users = user_map.len();
    let num_items = item_map.len();
    if pair_seen.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interaction reaches rating threshold {rating_threshold}"
        )));
    }

    let mut rng = seeded(seed, Stream::Split);
    let mut entries = Vec::with_capacity(pair_seen.len());
    for (u, items) in per_user.iter_mut().enumerate() {
        items.shuffle(&mut rng);
        let alloc = allocate_split(items.len(), split_ratios);
        for (pos, &v) in items.iter().enumerate() {
            let split = if pos < alloc[0] {
                Split::Train
            } else if pos < alloc[0] + alloc[1] {
                Split::Valid
            } else {
                Split::Test
            };
            entries.push(Entry {
                user: u as u32,
                item: v,
                split,
            });
        }
    }

    // Items never seen in train keep their column but lose their
    // valid/test entries (cold items are out of scope).
    let mut item_in_train = vec![false; num_items];
    for e in &entries {
        if e.split == Split::Train {
            item_in_train[e.item as usize] = true;
        }
    }
    entries.retain(|e| e.split == Split::Train || item_in_train[e.item as usize]);
    entries.sort_unstable_by_key(|e| (e.user, e.item));

    Ok(InteractionMatrix {
        num_users,
        num_items,
        entries,
        user_map,
        item_map,
        seed,
    })
}

/// Symmetric degree normalization over the train split.
pub fn normalize(matrix: &InteractionMatrix) -> Result<NormalizedAdjacency> {
    let mut user_degrees = vec![0usize; matrix.num_users];
    let mut item_degrees = vec![0usize; matrix.num_items];
    for e in &matrix.entries {
        if e.split == Split::Train {
            user_degrees[e.user as usize] += 1;
            item_degrees[e.item as usize] += 1;
        }
    }
    if let Some(u) = user_degrees.iter().position(|&d| d == 0) {
        return Err(Error::Internal(format!(
            "user {u} ('{}') has no train entry",
            matrix.user_map.key(u as u32)
        )));
    }
    let mut triplets = Vec::new();
    for e in &matrix.entries {
        if e.split == Split::Train {
            let du = user_degrees[e.user as usize] as f64;
            let dv = item_degrees[e.item as usize] as f64;
            triplets.push((e.user, e.item, 1.0 / (du * dv).sqrt()));
        }
    }
    let sparse = SparseMatrix::from_triplets(matrix.num_users, matrix.num_items, triplets)?;
    Ok(NormalizedAdjacency {
        matrix: sparse,
        user_degrees,
        item_degrees,
    })
}

const MATRIX_MAGIC: &[u8; 8] = b"HMFG-IM1";

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    m: usize,
    n: usize,
    seed: u64,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
}

impl InteractionMatrix {
    pub fn split_len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Train (user, item) pairs in canonical order — the sampling pool.
    pub fn train_pairs(&self) -> Vec<(u32, u32)> {
        self.entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| (e.user, e.item))
            .collect()
    }

    /// Per-user sorted item lists for one split.
    pub fn items_per_user(&self, split: Split) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users];
        for e in &self.entries {
            if e.split == split {
                out[e.user as usize].push(e.item);
            }
        }
        // Entries are (user, item)-sorted, so each list is already sorted.
        out
    }

    /// Serialize: magic, JSON header (dims, maps, seed), then the entry
    /// triplet list as little-endian (u32, u32, u8) records.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = MatrixHeader {
            m: self.num_users,
            n: self.num_items,
            seed: self.seed,
            user_keys: self.user_map.keys().to_vec(),
            item_keys: self.item_map.keys().to_vec(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(header_json.len() + self.entries.len() * 9 + 32);
        out.extend_from_slice(MATRIX_MAGIC);
        out.write_u64::<LittleEndian>(header_json.len() as u64)
            .expect("vec write");
        out.extend_from_slice(&header_json);
        out.write_u64::<LittleEndian>(self.entries.len() as u64)
            .expect("vec write");
        for e in &self.entries {
            out.write_u32::<LittleEndian>(e.user).expect("vec write");
            out.write_u32::<LittleEndian>(e.item).expect("vec write");
            out.write_u8(e.split.as_u8()).expect("vec write");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<InteractionMatrix> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Format("matrix file truncated before magic".into()))?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Format("not an interaction-matrix file".into()));
        }
        let header_len = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Format("matrix file truncated in header length".into()))?
            as usize;
        let mut header_json = vec![0u8; header_len];
        cur.read_exact(&mut header_json)
            .map_err(|_| Error::Format("matrix file truncated in header".into()))?;
        let header: MatrixHeader =
            serde_json::from_slice(&header_json).map_err(|e| Error::Format(e.to_string()))?;
        if header.user_keys.len() != header.m || header.item_keys.len() != header.n {
            return Err(Error::Format("id map lengths disagree with dims".into()));
        }
        let count = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Format("matrix file truncated in entry count".into()))?
            as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let user = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::Format("matrix file truncated in entries".into()))?;
            let item = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::Format("matrix file truncated in entries".into()))?;
            let split = Split::from_u8(
                cur.read_u8()
                    .map_err(|_| Error::Format("matrix file truncated in entries".into()))?,
            )?;
            if user as usize >= header.m || item as usize >= header.n {
                return Err(Error::Format(format!(
                    "entry ({user},{item}) outside {}x{}",
                    header.m, header.n
                )));
            }
            entries.push(Entry { user, item, split });
        }
        for w in entries.windows(2) {
            if (w[1].user, w[1].item) <= (w[0].user, w[0].item) {
                return Err(Error::Format(
                    "entries not in strictly increasing (user, item) order".into(),
                ));
            }
        }
        Ok(InteractionMatrix {
            num_users: header.m,
            num_items: header.n,
            entries,
            user_map: IdMap::from_keys(header.user_keys)?,
            item_map: IdMap::from_keys(header.item_keys)?,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<InteractionMatrix> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the canonical serialization (dataset identity for
    /// caches, manifests, and reports).
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}
