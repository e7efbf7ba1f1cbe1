//! Dataset manifests: indexing, stratified splitting, balance checks and
//! room/liquid subsets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frame::{ClassLabel, Liquid, Modality, Room};
use crate::store::{self, StoreError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset root {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("manifest already split ({0} entries assigned)")]
    AlreadySplit(usize),
    #[error("duplicate manifest path {0}")]
    DuplicatePath(String),
    #[error("subset {0} selects no entries")]
    EmptySubset(String),
    #[error("manifest {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub modality: Modality,
    pub class_label: ClassLabel,
    pub room: Room,
    pub liquid: Liquid,
    pub split: Split,
}

impl ManifestEntry {
    /// Pair index parsed from the file name.
    pub fn pair_index(&self) -> Option<u64> {
        let name = self.path.rsplit('/').next()?;
        store::parse_pair_file_name(name).map(|(i, _)| i)
    }

    fn cell_key(&self, with_modality: bool) -> String {
        if with_modality {
            format!("{}|{}|{}|{}", self.room, self.liquid, self.modality, self.class_label)
        } else {
            format!("{}|{}|{}", self.room, self.liquid, self.class_label)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let r = Self { train, val, test };
        for (name, v) in [("train", train), ("val", val), ("test", test)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DatasetError::Ratios(format!("{name} = {v} is outside (0, 1)")));
            }
        }
        let sum = train + val + test;
        if (sum - 1.0).abs() > EPS {
            return Err(DatasetError::Ratios(format!("ratios sum to {sum}, not 1")));
        }
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl FromStr for SplitRatios {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Result<Vec<f64>, _> = s.split(',').map(|x| x.trim().parse::<f64>()).collect();
        match v {
            Ok(v) if v.len() == 3 => SplitRatios::new(v[0], v[1], v[2]),
            _ => Err(DatasetError::Ratios(format!("expected train,val,test fractions, got `{s}`"))),
        }
    }
}

/// Largest-remainder apportionment of `n` items; remainder ties go to the
/// earlier split (train, then val, then test).
pub fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| n as f64 * r);
    let mut counts = quotas.map(|q| (q + EPS).floor().max(0.0) as usize);
    let assigned: usize = counts.iter().sum();
    let mut leftover = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| (quotas[i] - counts[i] as f64).max(0.0);
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() <= EPS {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[*i] += 1;
        leftover -= 1;
    }
    counts
}

/// Apportion several cells together: each cell gets within one item of its
/// quota and the split totals equal `apportion` of the total.
///
/// Cells start from their floors. Leftover seats go out by descending
/// remainder (ties to the earlier split, then the earlier cell), and any
/// cell left short is served along an alternating path that moves another
/// cell's seat into a split with room.
pub fn apportion_cells(sizes: &[usize], ratios: &SplitRatios) -> Vec<[usize; 3]> {
    let r = ratios.as_array();
    let quota = |c: usize, s: usize| sizes[c] as f64 * r[s];
    let floors: Vec<[usize; 3]> = (0..sizes.len())
        .map(|c| [0, 1, 2].map(|s| (quota(c, s) + EPS).floor().max(0.0) as usize))
        .collect();
    let target = apportion(sizes.iter().sum(), ratios);
    let mut room = [0, 1, 2].map(|s| target[s].saturating_sub(floors.iter().map(|f| f[s]).sum()));
    let mut need: Vec<usize> = sizes
        .iter()
        .zip(&floors)
        .map(|(n, f)| n.saturating_sub(f.iter().sum()))
        .collect();
    let mut extra = vec![[false; 3]; sizes.len()];

    let mut seats: Vec<(usize, usize, f64)> = (0..sizes.len())
        .flat_map(|c| (0..3).map(move |s| (c, s)))
        .map(|(c, s)| (c, s, quota(c, s) - floors[c][s] as f64))
        .collect();
    seats.sort_by(|a, b| {
        if (a.2 - b.2).abs() <= EPS {
            (a.1, a.0).cmp(&(b.1, b.0))
        } else {
            b.2.total_cmp(&a.2)
        }
    });
    for (c, s, _) in seats {
        if need[c] > 0 && room[s] > 0 {
            extra[c][s] = true;
            need[c] -= 1;
            room[s] -= 1;
        }
    }

    for c in 0..sizes.len() {
        while need[c] > 0 {
            // BFS over cells; parent[v] = (previous cell, split v gives up)
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; sizes.len()];
            let mut seen = vec![false; sizes.len()];
            seen[c] = true;
            let mut queue = std::collections::VecDeque::from([c]);
            let mut end = None;
            'search: while let Some(u) = queue.pop_front() {
                for s in 0..3 {
                    if extra[u][s] {
                        continue;
                    }
                    if room[s] > 0 {
                        end = Some((u, s));
                        break 'search;
                    }
                    for v in 0..sizes.len() {
                        if !seen[v] && extra[v][s] {
                            seen[v] = true;
                            parent[v] = Some((u, s));
                            queue.push_back(v);
                        }
                    }
                }
            }
            let Some((mut u, s_end)) = end else {
                unreachable!("seat totals match, so an alternating path exists");
            };
            extra[u][s_end] = true;
            room[s_end] -= 1;
            while let Some((p, s)) = parent[u] {
                extra[u][s] = false;
                extra[p][s] = true;
                u = p;
            }
            need[c] -= 1;
        }
    }

    floors
        .iter()
        .zip(&extra)
        .map(|(f, x)| [0, 1, 2].map(|s| f[s] + usize::from(x[s])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

/// Sidecar of a persisted manifest: everything that is not per-entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    root: PathBuf,
    seed: u64,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.split).or_default() += 1;
        }
        out
    }

    pub fn absolute_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.entries.iter().map(|e| e.modality).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the JSON Lines rendering, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// Writes the JSON Lines file plus a `<file>.meta.json` with root and seed.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(path, self.to_jsonl()).map_err(io)?;
        let meta = ManifestMeta {
            root: self.root.clone(),
            seed: self.seed,
        };
        std::fs::write(
            Self::meta_path(path),
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )
        .map_err(io)
    }

    /// Load a JSON Lines manifest. Without a meta sidecar the root is the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        let meta: Option<ManifestMeta> = std::fs::read_to_string(Self::meta_path(path))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let (root, seed) = match meta {
            Some(m) => (m.root, m.seed),
            None => (path.parent().map(Path::to_path_buf).unwrap_or_default(), 0),
        };
        let mut m = Self::new(root, entries)?;
        m.seed = seed;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgnoredFile {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub manifest: DatasetManifest,
    /// Files under the root that do not fit the pair layout.
    pub ignored: Vec<IgnoredFile>,
    pub warnings: Vec<String>,
}

fn is_own_artifact(name: &str) -> bool {
    name == store::SIDECAR_FILE || name.ends_with(".jsonl") || name.ends_with(".meta.json")
}

/// Index every pair image under `root`.
///
/// Room and liquid come from the `pairs.jsonl` sidecar; images it does not
/// cover are tagged `unknown` and listed in the warnings.
pub fn build_manifest(root: &Path) -> Result<BuildReport, DatasetError> {
    let read_dir = |p: &Path| {
        std::fs::read_dir(p).map_err(|source| DatasetError::Unreadable {
            path: p.to_path_buf(),
            source,
        })
    };
    let records: HashMap<u64, store::PairRecord> = store::read_sidecar(root)?
        .into_iter()
        .map(|r| (r.index, r))
        .collect();
    let mut entries = Vec::new();
    let mut ignored = Vec::new();
    let mut warnings = Vec::new();
    let mut unknown_meta = 0usize;

    let rel = |p: &Path| {
        p.strip_prefix(root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };

    let mut top: Vec<_> = read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    top.sort();
    for top_path in top {
        let name = top_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let modality = match name.parse::<Modality>() {
            Ok(m) if top_path.is_dir() => m,
            _ => {
                if !(top_path.is_file() && is_own_artifact(&name)) && !name.starts_with('.') {
                    ignored.push(IgnoredFile {
                        path: rel(&top_path),
                        reason: "not a modality directory".into(),
                    });
                }
                continue;
            }
        };
        let mut level2: Vec<_> = read_dir(&top_path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        level2.sort();
        for class_path in level2 {
            let cname = class_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let label = match cname.parse::<ClassLabel>() {
                Ok(l) if class_path.is_dir() && (cname == "spill" || cname == "no_spill") => l,
                _ => {
                    ignored.push(IgnoredFile {
                        path: rel(&class_path),
                        reason: "not a spill/no_spill class directory".into(),
                    });
                    continue;
                }
            };
            let mut files: Vec<_> = read_dir(&class_path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            for file in files {
                let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if fname.starts_with('.') && fname.ends_with(".tmp") {
                    continue;
                }
                let parsed = if file.is_file() { store::parse_pair_file_name(fname) } else { None };
                let Some((index, file_modality)) = parsed else {
                    ignored.push(IgnoredFile {
                        path: rel(&file),
                        reason: "not a pair_<index>_<modality>.png image".into(),
                    });
                    continue;
                };
                if file_modality != modality {
                    ignored.push(IgnoredFile {
                        path: rel(&file),
                        reason: format!("{file_modality} image inside the {modality} tree"),
                    });
                    continue;
                }
                let (room, liquid) = match records.get(&index) {
                    Some(r) => (r.room.clone(), r.liquid.clone()),
                    None => {
                        unknown_meta += 1;
                        (Room::Other("unknown".into()), Liquid::Other("unknown".into()))
                    }
                };
                entries.push(ManifestEntry {
                    path: rel(&file),
                    modality,
                    class_label: label,
                    room,
                    liquid,
                    split: Split::Unassigned,
                });
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if entries.is_empty() {
        warnings.push(format!("no pair images found under {}", root.display()));
    }
    if unknown_meta > 0 {
        warnings.push(format!("{unknown_meta} images have no room/liquid record in {}", store::SIDECAR_FILE));
    }
    Ok(BuildReport {
        manifest: DatasetManifest::new(root, entries)?,
        ignored,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitOptions {
    /// Keep the thermal, RGB and combined images of one pair in one split.
    pub paired: bool,
}

#[derive(Debug, Clone)]
pub struct SplitReport {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

fn cell_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Stratified split per (room, liquid, modality, class) cell.
///
/// Each cell is sorted by path, shuffled with a PRNG keyed by
/// `(seed, cell)` and cut by [`apportion`]. Cells with fewer than three
/// entries go entirely to train with a warning.
pub fn split_manifest(
    m: &DatasetManifest,
    ratios: &SplitRatios,
    seed: u64,
    opts: SplitOptions,
) -> Result<SplitReport, DatasetError> {
    let assigned = m.entries.iter().filter(|e| e.split != Split::Unassigned).count();
    if assigned > 0 {
        return Err(DatasetError::AlreadySplit(assigned));
    }
    let mut out = m.clone();
    out.seed = seed;
    let mut warnings = Vec::new();

    // cell key -> unit key -> entry indices
    let mut cells: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, e) in m.entries.iter().enumerate() {
        let unit = if opts.paired {
            match e.pair_index() {
                Some(idx) => format!("{idx:012}"),
                None => e.path.clone(),
            }
        } else {
            e.path.clone()
        };
        cells
            .entry(e.cell_key(!opts.paired))
            .or_default()
            .entry(unit)
            .or_default()
            .push(i);
    }

    // Cells too small to split go wholly to train; the rest are apportioned
    // together so the split totals are exact.
    let sizes: Vec<usize> = cells.values().map(|u| u.len()).filter(|n| *n >= 3).collect();
    let mut shares = apportion_cells(&sizes, ratios).into_iter();
    for (key, units) in cells {
        // BTreeMap iteration gives the path-sorted order.
        let mut units: Vec<Vec<usize>> = units.into_values().collect();
        let n = units.len();
        let counts = if n < 3 {
            warnings.push(format!("cell {key} has {n} entries; all assigned to train"));
            [n, 0, 0]
        } else {
            shares.next().expect("one share per splittable cell")
        };
        units.shuffle(&mut cell_rng(seed, &key));
        let mut cursor = 0;
        for (split, count) in Split::ASSIGNED.into_iter().zip(counts) {
            for unit in &units[cursor..cursor + count] {
                for &i in unit {
                    out.entries[i].split = split;
                }
            }
            cursor += count;
        }
    }
    Ok(SplitReport { manifest: out, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub per_modality: BTreeMap<Modality, usize>,
    pub per_class: BTreeMap<ClassLabel, usize>,
    pub per_modality_class: BTreeMap<String, usize>,
    /// max - min over the modality x class cells.
    pub delta: usize,
    pub balanced: bool,
    /// RGB images without a thermal image of the same pair index.
    pub orphans: Vec<String>,
    /// Thermal images without an RGB partner (informational).
    pub unpaired_thermal: Vec<String>,
}

/// Per-modality and per-class counts, imbalance and pairing check.
///
/// Balance is judged over thermal and RGB images; combined images are
/// derived from pairs and only counted.
pub fn validate_dataset(m: &DatasetManifest) -> BalanceReport {
    let mut per_modality = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    let mut cells: BTreeMap<(Modality, ClassLabel), usize> = BTreeMap::new();
    let mut thermal_idx = BTreeSet::new();
    let mut rgb_idx = BTreeSet::new();
    for e in &m.entries {
        *per_modality.entry(e.modality).or_insert(0) += 1;
        *per_class.entry(e.class_label).or_insert(0) += 1;
        if e.modality != Modality::Combined {
            *cells.entry((e.modality, e.class_label)).or_insert(0) += 1;
        }
        if let Some(i) = e.pair_index() {
            match e.modality {
                Modality::Thermal => {
                    thermal_idx.insert(i);
                }
                Modality::Rgb => {
                    rgb_idx.insert(i);
                }
                Modality::Combined => {}
            }
        }
    }
    // Every (modality, class) combination seen in the data must be present.
    let modalities: BTreeSet<Modality> = cells.keys().map(|k| k.0).collect();
    for modality in &modalities {
        for class in ClassLabel::ALL {
            cells.entry((*modality, class)).or_insert(0);
        }
    }
    let max = cells.values().copied().max().unwrap_or(0);
    let min = cells.values().copied().min().unwrap_or(0);
    let delta = max - min;
    let partner_missing = |e: &ManifestEntry, other: &BTreeSet<u64>| e.pair_index().map_or(true, |i| !other.contains(&i));
    let orphans = m
        .entries
        .iter()
        .filter(|e| e.modality == Modality::Rgb && partner_missing(e, &thermal_idx))
        .map(|e| e.path.clone())
        .collect();
    let unpaired_thermal = m
        .entries
        .iter()
        .filter(|e| e.modality == Modality::Thermal && partner_missing(e, &rgb_idx))
        .map(|e| e.path.clone())
        .collect();
    BalanceReport {
        per_modality,
        per_class,
        per_modality_class: cells
            .into_iter()
            .map(|((m, c), n)| (format!("{m}/{c}"), n))
            .collect(),
        delta,
        balanced: delta == 0,
        orphans,
        unpaired_thermal,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetFilter {
    pub room: Option<Room>,
    pub liquid: Option<Liquid>,
    pub modality: Modality,
}

impl fmt::Display for SubsetFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let any = |o: Option<&str>| o.unwrap_or("*").to_string();
        write!(
            f,
            "(room={}, liquid={}, modality={})",
            any(self.room.as_ref().map(Room::as_str)),
            any(self.liquid.as_ref().map(Liquid::as_str)),
            self.modality
        )
    }
}

/// Entries matching every given field; split labels are kept.
pub fn select_subset(m: &DatasetManifest, filter: &SubsetFilter) -> Result<DatasetManifest, DatasetError> {
    let entries: Vec<ManifestEntry> = m
        .entries
        .iter()
        .filter(|e| {
            e.modality == filter.modality
                && filter.room.as_ref().map_or(true, |r| &e.room == r)
                && filter.liquid.as_ref().map_or(true, |l| &e.liquid == l)
        })
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(DatasetError::EmptySubset(filter.to_string()));
    }
    Ok(DatasetManifest {
        root: m.root.clone(),
        entries,
        seed: m.seed,
    })
}

/// Synthetic, file-less manifest: `per_cell` entries for every
/// room x liquid x modality x class cell.
pub fn synthetic_manifest(rooms: &[Room], liquids: &[Liquid], modalities: &[Modality], per_cell: usize) -> DatasetManifest {
    let mut entries = Vec::new();
    let mut index = 1u64;
    for room in rooms {
        for liquid in liquids {
            for class in ClassLabel::ALL {
                for _ in 0..per_cell {
                    for &modality in modalities {
                        entries.push(ManifestEntry {
                            path: format!(
                                "{}/{}/{}",
                                modality.as_str(),
                                class.as_str(),
                                store::pair_file_name(index, modality)
                            ),
                            modality,
                            class_label: class,
                            room: room.clone(),
                            liquid: liquid.clone(),
                            split: Split::Unassigned,
                        });
                    }
                    index += 1;
                }
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    DatasetManifest::new("", entries).expect("generated paths are unique")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{Frame, FramePair, SessionMeta};
    use crate::store::PairStore;

    #[test]
    fn apportionment_examples() {
        let r = SplitRatios::default();
        assert_eq!(apportion(10, &r), [7, 2, 1]);
        // 6.3 / 1.8 / 0.9 -> floors 6,1,0; remainders award test then val
        assert_eq!(apportion(9, &r), [6, 2, 1]);
        assert_eq!(apportion(4000, &r), [2800, 800, 400]);
        // 87.5 / 25 / 12.5: tie on .5 goes to train
        assert_eq!(apportion(125, &r), [88, 25, 12]);
        assert_eq!(apportion(0, &r), [0, 0, 0]);
    }

    #[test]
    fn cell_apportionment_hits_global_totals() {
        let r = SplitRatios::default();
        let shares = apportion_cells(&[125; 32], &r);
        let totals = shares.iter().fold([0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]]);
        assert_eq!(totals, [2800, 800, 400]);
        for c in &shares {
            assert_eq!(c.iter().sum::<usize>(), 125);
            assert!((c[0] as f64 - 87.5).abs() <= 1.0 && c[1] == 25 && (c[2] as f64 - 12.5).abs() <= 1.0);
        }
        assert_eq!(apportion_cells(&[10], &r), vec![[7, 2, 1]]);
        assert!(apportion_cells(&[], &r).is_empty());
    }

    #[test]
    fn ratios_validation() {
        assert!(SplitRatios::new(0.7, 0.2, 0.1).is_ok());
        assert!(SplitRatios::new(0.7, 0.2, 0.2).is_err());
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
        assert_eq!("0.8,0.1,0.1".parse::<SplitRatios>().unwrap().train, 0.8);
        assert!("0.8,0.2".parse::<SplitRatios>().is_err());
    }

    fn layout_with(n_per_class: u8) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut store = PairStore::open(dir.path()).unwrap();
        for label in ClassLabel::ALL {
            for i in 0..n_per_class {
                let pair = FramePair::new(
                    Frame::filled(256, 192, Modality::Thermal, [i; 3]),
                    Frame::filled(640, 360, Modality::Rgb, [i; 3]),
                    50,
                    "s",
                )
                .unwrap();
                let meta = SessionMeta::new("s", Room::Atrium, Liquid::Water, label).unwrap();
                store.save_pair(&pair, &meta).unwrap();
            }
        }
        dir
    }

    #[test]
    fn builds_manifest_from_layout() {
        let dir = layout_with(1);
        // thermal only: drop the rgb tree
        std::fs::remove_dir_all(dir.path().join("rgb")).unwrap();
        let more = FramePair::new(
            Frame::filled(256, 192, Modality::Thermal, [3; 3]),
            Frame::filled(640, 360, Modality::Rgb, [3; 3]),
            50,
            "s",
        )
        .unwrap();
        let mut store = PairStore::open(dir.path()).unwrap();
        for label in ClassLabel::ALL {
            store
                .save_pair(&more, &SessionMeta::new("s", Room::J234, Liquid::Coke, label).unwrap())
                .unwrap();
        }
        std::fs::remove_dir_all(dir.path().join("rgb")).unwrap();
        let report = build_manifest(dir.path()).unwrap();
        let m = report.manifest;
        assert_eq!(m.len(), 4);
        assert!(m.entries.iter().all(|e| e.split == Split::Unassigned && e.modality == Modality::Thermal));
        let paths: Vec<_> = m.entries.iter().map(|e| e.path.as_str()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert_eq!(m.entries[0].path, "thermal/no_spill/pair_000002_thermal.png");
        assert_eq!(m.entries.iter().filter(|e| e.room == Room::J234).count(), 2);
        assert!(report.ignored.is_empty());
    }

    #[test]
    fn empty_root_gives_empty_manifest_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let report = build_manifest(dir.path()).unwrap();
        assert!(report.manifest.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn stray_files_are_reported() {
        let dir = layout_with(1);
        std::fs::write(dir.path().join("thermal/README.txt"), "hi").unwrap();
        std::fs::write(dir.path().join("thermal/spill/notes.txt"), "hi").unwrap();
        std::fs::write(dir.path().join("stray.bin"), "hi").unwrap();
        let report = build_manifest(dir.path()).unwrap();
        let ignored: Vec<_> = report.ignored.iter().map(|i| i.path.as_str()).collect();
        assert!(ignored.contains(&"thermal/README.txt"));
        assert!(ignored.contains(&"thermal/spill/notes.txt"));
        assert!(ignored.contains(&"stray.bin"));
        assert_eq!(report.manifest.len(), 4);
    }

    #[test]
    fn unreadable_root_errors() {
        assert!(matches!(
            build_manifest(Path::new("/definitely/not/here")),
            Err(DatasetError::Unreadable { .. })
        ));
    }

    #[test]
    fn small_cells_go_to_train_with_warning() {
        let m = synthetic_manifest(&[Room::Atrium], &[Liquid::Water], &[Modality::Thermal], 2);
        let r = split_manifest(&m, &SplitRatios::default(), 1, SplitOptions::default()).unwrap();
        assert!(r.manifest.entries.iter().all(|e| e.split == Split::Train));
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn refuses_to_resplit() {
        let m = synthetic_manifest(&[Room::Atrium], &[Liquid::Water], &[Modality::Thermal], 10);
        let r = split_manifest(&m, &SplitRatios::default(), 1, SplitOptions::default()).unwrap();
        assert!(matches!(
            split_manifest(&r.manifest, &SplitRatios::default(), 1, SplitOptions::default()),
            Err(DatasetError::AlreadySplit(20))
        ));
    }

    #[test]
    fn paired_split_keeps_partners_together() {
        let m = synthetic_manifest(&[Room::Atrium, Room::J234], &[Liquid::Water], &[Modality::Thermal, Modality::Rgb], 20);
        let r = split_manifest(&m, &SplitRatios::default(), 5, SplitOptions { paired: true }).unwrap();
        let mut by_index: HashMap<u64, BTreeSet<Split>> = HashMap::new();
        for e in &r.manifest.entries {
            by_index.entry(e.pair_index().unwrap()).or_default().insert(e.split);
        }
        assert!(by_index.values().all(|s| s.len() == 1));
        let counts = r.manifest.split_counts();
        assert_eq!(counts[&Split::Train], 2 * 2 * 2 * 14);
    }

    #[test]
    fn balance_report() {
        let m = synthetic_manifest(&[Room::Atrium], &[Liquid::Water], &[Modality::Thermal, Modality::Rgb], 1000);
        let r = validate_dataset(&m);
        assert!(r.balanced);
        assert_eq!(r.delta, 0);
        assert!(r.orphans.is_empty());

        let mut skewed = m.clone();
        // relabel one thermal spill image as no_spill: 999 vs 1001
        let e = skewed
            .entries
            .iter_mut()
            .find(|e| e.modality == Modality::Thermal && e.class_label == ClassLabel::Spill)
            .unwrap();
        e.class_label = ClassLabel::NoSpill;
        let r = validate_dataset(&skewed);
        assert!(!r.balanced);
        assert_eq!(r.delta, 2);

        let mut orphaned = m.clone();
        let pos = orphaned.entries.iter().position(|e| e.modality == Modality::Thermal).unwrap();
        orphaned.entries.remove(pos);
        let r = validate_dataset(&orphaned);
        assert_eq!(r.orphans.len(), 1);
    }

    #[test]
    fn subset_selection() {
        let m = synthetic_manifest(
            &[Room::Atrium, Room::J234],
            &[Liquid::Water, Liquid::Coke],
            &[Modality::Thermal, Modality::Rgb],
            5,
        );
        let m = split_manifest(&m, &SplitRatios::default(), 3, SplitOptions::default()).unwrap().manifest;
        let f = SubsetFilter {
            room: Some(Room::Atrium),
            liquid: Some(Liquid::Water),
            modality: Modality::Thermal,
        };
        let s = select_subset(&m, &f).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.entries.iter().all(|e| e.room == Room::Atrium && e.liquid == Liquid::Water && e.modality == Modality::Thermal));
        for e in &s.entries {
            let orig = m.entries.iter().find(|o| o.path == e.path).unwrap();
            assert_eq!(orig.split, e.split);
        }
        let all = select_subset(&m, &SubsetFilter { room: None, liquid: None, modality: Modality::Thermal }).unwrap();
        assert_eq!(all.len(), 40);
        let empty = SubsetFilter {
            room: Some(Room::Atrium),
            liquid: Some(Liquid::Other("unknown".into())),
            modality: Modality::Thermal,
        };
        assert!(matches!(select_subset(&m, &empty), Err(DatasetError::EmptySubset(_))));
    }

    #[test]
    fn manifest_persistence() {
        let m = synthetic_manifest(&[Room::Atrium], &[Liquid::Water], &[Modality::Thermal], 3);
        let mut m = split_manifest(&m, &SplitRatios::default(), 11, SplitOptions::default()).unwrap().manifest;
        m.root = PathBuf::from("/data/set");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 6);
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(m.content_hash().len(), 64);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let m = synthetic_manifest(&[Room::Atrium], &[Liquid::Water], &[Modality::Thermal], 1);
        let mut entries = m.entries.clone();
        entries.push(entries[0].clone());
        assert!(matches!(DatasetManifest::new("", entries), Err(DatasetError::DuplicatePath(_))));
    }
}
