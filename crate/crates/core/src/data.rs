//! Interaction files, the temporal split, modality-specific bipartite graphs
//! and user-embedding initialization.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmat::{self, FeatureMatrix};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionSet {
    pub edges: Vec<Interaction>,
}

impl InteractionSet {
    /// Builds a set from raw edges, keeping the earliest timestamp for
    /// repeated (user, item) pairs. First-occurrence order is preserved.
    pub fn from_edges(edges: impl IntoIterator<Item = Interaction>) -> Self {
        let mut index: HashMap<(u32, u32), usize> = HashMap::new();
        let mut out: Vec<Interaction> = Vec::new();
        for e in edges {
            match index.get(&(e.user, e.item)) {
                Some(&i) => {
                    if e.timestamp < out[i].timestamp {
                        out[i].timestamp = e.timestamp;
                    }
                }
                None => {
                    index.insert((e.user, e.item), out.len());
                    out.push(e);
                }
            }
        }
        InteractionSet { edges: out }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn max_user(&self) -> Option<u32> {
        self.edges.iter().map(|e| e.user).max()
    }

    pub fn max_item(&self) -> Option<u32> {
        self.edges.iter().map(|e| e.item).max()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::with_capacity(self.edges.len() * 16);
        for e in &self.edges {
            s.push_str(&format!("{}\t{}\t{}\n", e.user, e.item, e.timestamp));
        }
        s
    }
}

pub fn parse_edges_str(text: &str) -> Result<InteractionSet> {
    let mut edges = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64> {
            fields[i].trim().parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{name} {:?} is not an integer", fields[i]),
            })
        };
        let user = field(0, "user")?;
        let item = field(1, "item")?;
        let timestamp = field(2, "timestamp")?;
        let id = |v: i64, name: &str| -> Result<u32> {
            u32::try_from(v).map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{name} id {v} is out of range"),
            })
        };
        edges.push(Interaction {
            user: id(user, "user")?,
            item: id(item, "item")?,
            timestamp,
        });
    }
    Ok(InteractionSet::from_edges(edges))
}

pub fn parse_edges(path: &Path) -> Result<InteractionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edges_str(&text)
}

pub fn write_edges(path: &Path, set: &InteractionSet) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(set.to_tsv().as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
}

/// Sorts by `(timestamp, user, item)` and cuts `⌊train·n⌋` / `⌊valid·n⌋` /
/// remainder.
pub fn temporal_split(interactions: &InteractionSet, ratios: SplitRatios) -> Result<DatasetSplit> {
    let SplitRatios { train, valid, test } = ratios;
    if !(train > 0.0 && valid > 0.0 && test > 0.0) {
        return Err(Error::Invalid(format!("split ratios must be positive: {ratios:?}")));
    }
    if (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios must sum to 1: {ratios:?}")));
    }
    let n = interactions.len();
    if n < 3 {
        return Err(Error::Invalid(format!("need at least 3 interactions to split, found {n}")));
    }
    let mut sorted = interactions.edges.clone();
    sorted.sort_by_key(|e| (e.timestamp, e.user, e.item));
    // The epsilon absorbs representation error such as 0.1 * 30 = 3.0000000000000004.
    let n_train = ((train * n as f64) + 1e-9).floor() as usize;
    let n_valid = ((valid * n as f64) + 1e-9).floor() as usize;
    let test_part = sorted.split_off(n_train + n_valid);
    let valid_part = sorted.split_off(n_train);
    Ok(DatasetSplit {
        train: InteractionSet { edges: sorted },
        valid: InteractionSet { edges: valid_part },
        test: InteractionSet { edges: test_part },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "t")]
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Textual => "t",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" => Ok(Modality::Visual),
            "t" => Ok(Modality::Textual),
            other => Err(Error::Invalid(format!("unknown modality {other:?} (expected v or t)"))),
        }
    }
}

/// Bipartite user-item graph for one modality. Both modalities share the edge
/// set; only the attached item features differ.
#[derive(Debug, Clone)]
pub struct ModalGraph {
    pub modality: Modality,
    pub user_count: usize,
    pub item_count: usize,
    /// Sorted item neighbours of each user.
    pub user_adj: Vec<Vec<u32>>,
    /// Sorted user neighbours of each item.
    pub item_adj: Vec<Vec<u32>>,
    pub item_features: FeatureMatrix,
}

impl ModalGraph {
    pub fn user_degree(&self, u: usize) -> usize {
        self.user_adj[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_adj[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, u: usize, i: u32) -> bool {
        self.user_adj[u].binary_search(&i).is_ok()
    }

    pub fn dim(&self) -> usize {
        self.item_features.cols
    }
}

pub fn build_modal_graph(
    train: &InteractionSet,
    modality: Modality,
    features: FeatureMatrix,
    user_count: usize,
) -> Result<ModalGraph> {
    let item_count = features.rows;
    let mut user_adj = vec![Vec::new(); user_count];
    let mut item_adj = vec![Vec::new(); item_count];
    for e in &train.edges {
        if e.item as usize >= item_count {
            return Err(Error::Invalid(format!(
                "item {} is outside the {item_count}-row feature matrix",
                e.item
            )));
        }
        if e.user as usize >= user_count {
            return Err(Error::Invalid(format!(
                "user {} is outside the declared {user_count} users",
                e.user
            )));
        }
        user_adj[e.user as usize].push(e.item);
        item_adj[e.item as usize].push(e.user);
    }
    for list in user_adj.iter_mut().chain(item_adj.iter_mut()) {
        list.sort_unstable();
        list.dedup();
    }
    Ok(ModalGraph {
        modality,
        user_count,
        item_count,
        user_adj,
        item_adj,
        item_features: features,
    })
}

/// Column-wise population mean and standard deviation.
pub fn column_stats(features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = features.rows as f64;
    let mut mean = vec![0.0; features.cols];
    for r in 0..features.rows {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; features.cols];
    for r in 0..features.rows {
        for ((s, &v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
            let d = f64::from(v) - m;
            *s += d * d;
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

/// Draws each user vector per dimension from `Normal(μ_j, σ_j)` of the item
/// feature columns.
pub fn init_user_embeddings(features: &FeatureMatrix, user_count: usize, seed: u64) -> Result<Matrix> {
    if features.rows == 0 {
        return Err(Error::Invalid("cannot initialize users from zero items".into()));
    }
    let (mean, std) = column_stats(features);
    let mut rng = rng::stream(seed, rng::STREAM_USER_INIT, features.cols as u64);
    Ok(Matrix::from_fn(user_count, features.cols, |_, c| {
        let z: f64 = rng.sample(StandardNormal);
        mean[c] + std[c] * z
    }))
}

/// An ingested dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub user_count: usize,
    pub item_count: usize,
    pub split: DatasetSplit,
    pub features_v: FeatureMatrix,
    pub features_t: FeatureMatrix,
}

impl Dataset {
    pub fn new(
        interactions: &InteractionSet,
        features_v: FeatureMatrix,
        features_t: FeatureMatrix,
    ) -> Result<Self> {
        if features_v.rows != features_t.rows {
            return Err(Error::Shape(format!(
                "visual features have {} rows, textual {}",
                features_v.rows, features_t.rows
            )));
        }
        let item_count = features_v.rows;
        if let Some(max) = interactions.max_item() {
            if max as usize >= item_count {
                return Err(Error::Invalid(format!(
                    "item {max} is outside the {item_count}-row feature matrices"
                )));
            }
        }
        let user_count = interactions.max_user().map_or(0, |u| u as usize + 1);
        let split = temporal_split(interactions, SplitRatios::default())?;
        Ok(Dataset {
            user_count,
            item_count,
            split,
            features_v,
            features_t,
        })
    }

    pub fn features(&self, m: Modality) -> &FeatureMatrix {
        match m {
            Modality::Visual => &self.features_v,
            Modality::Textual => &self.features_t,
        }
    }

    pub fn graph(&self, m: Modality) -> Result<ModalGraph> {
        build_modal_graph(&self.split.train, m, self.features(m).clone(), self.user_count)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_edges(&dir.join("train.tsv"), &self.split.train)?;
        write_edges(&dir.join("valid.tsv"), &self.split.valid)?;
        write_edges(&dir.join("test.tsv"), &self.split.test)?;
        fmat::write(&dir.join("features_v.fmat"), &self.features_v)?;
        fmat::write(&dir.join("features_t.fmat"), &self.features_t)?;
        let meta = format!("users={}\nitems={}\n", self.user_count, self.item_count);
        let path = dir.join("dataset.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.txt");
        let meta = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = crate::config::parse_key_values(&meta)?;
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("dataset.txt lacks {k}")))?
                .parse()
                .map_err(|_| Error::Config(format!("dataset.txt: bad {k}")))
        };
        Ok(Dataset {
            user_count: get("users")?,
            item_count: get("items")?,
            split: DatasetSplit {
                train: parse_edges(&dir.join("train.tsv"))?,
                valid: parse_edges(&dir.join("valid.tsv"))?,
                test: parse_edges(&dir.join("test.tsv"))?,
            },
            features_v: fmat::read(&dir.join("features_v.fmat"))?,
            features_t: fmat::read(&dir.join("features_t.fmat"))?,
        })
    }
}
