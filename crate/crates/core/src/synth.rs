//! Planted-cluster interaction data for demos and statistical tests.
//!
//! Items belong to a coarse cluster and a fine sub-cluster; their features in
//! each modality are a coarse center plus a smaller fine offset plus noise.
//! Users prefer one fine cluster and mostly interact with its items.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::fmat::FeatureMatrix;
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub coarse_clusters: usize,
    /// Sub-clusters per coarse cluster (1 gives a flat clustering).
    pub fine_clusters: usize,
    pub interactions_per_user: usize,
    /// Probability that an interaction comes from the user's own fine cluster;
    /// otherwise from the same coarse cluster with probability
    /// `coarse_affinity`, else uniformly.
    pub affinity: f64,
    pub coarse_affinity: f64,
    pub dim_v: usize,
    pub dim_t: usize,
    pub fine_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 500,
            items: 300,
            coarse_clusters: 8,
            fine_clusters: 1,
            interactions_per_user: 20,
            affinity: 0.85,
            coarse_affinity: 0.5,
            dim_v: 16,
            dim_t: 32,
            fine_scale: 0.4,
            noise: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: InteractionSet,
    pub features_v: FeatureMatrix,
    pub features_t: FeatureMatrix,
    /// `(coarse, fine)` cluster of every item.
    pub item_clusters: Vec<(usize, usize)>,
    /// Preferred `(coarse, fine)` cluster of every user.
    pub user_clusters: Vec<(usize, usize)>,
}

impl SyntheticData {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(&self.interactions, self.features_v.clone(), self.features_t.clone())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let leaves = spec.coarse_clusters * spec.fine_clusters;
    if leaves == 0 || spec.items < leaves || spec.users == 0 {
        return Err(Error::Invalid(format!(
            "need at least one user and {leaves} items for {} x {} clusters",
            spec.coarse_clusters, spec.fine_clusters
        )));
    }
    if spec.interactions_per_user == 0 || spec.interactions_per_user > spec.items {
        return Err(Error::Invalid("interactions per user must be in [1, items]".into()));
    }
    let mut r = rng::stream(spec.seed, rng::STREAM_SYNTH, 0);
    // Every leaf gets at least one item; the rest are spread round-robin
    // after a shuffle so sizes differ by at most one.
    let mut item_clusters: Vec<(usize, usize)> =
        (0..spec.items).map(|i| (i % leaves / spec.fine_clusters, i % leaves % spec.fine_clusters)).collect();
    rand::seq::SliceRandom::shuffle(item_clusters.as_mut_slice(), &mut r);

    let features = |dim: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<FeatureMatrix> {
        let mut normal = |s: f64| s * r.sample::<f64, _>(StandardNormal);
        let coarse = Matrix::from_fn(spec.coarse_clusters, dim, |_, _| normal(1.0));
        let fine = Matrix::from_fn(leaves, dim, |_, _| normal(spec.fine_scale));
        let m = Matrix::from_fn(spec.items, dim, |i, c| {
            let (a, b) = item_clusters[i];
            coarse.get(a, c) + fine.get(a * spec.fine_clusters + b, c) + normal(spec.noise)
        });
        FeatureMatrix::from_matrix(&m)
    };
    let features_v = features(spec.dim_v, &mut r)?;
    let features_t = features(spec.dim_t, &mut r)?;

    let mut by_leaf: Vec<Vec<u32>> = vec![Vec::new(); leaves];
    let mut by_coarse: Vec<Vec<u32>> = vec![Vec::new(); spec.coarse_clusters];
    for (i, &(a, b)) in item_clusters.iter().enumerate() {
        by_leaf[a * spec.fine_clusters + b].push(i as u32);
        by_coarse[a].push(i as u32);
    }
    let mut edges = Vec::with_capacity(spec.users * spec.interactions_per_user);
    let mut user_clusters = Vec::with_capacity(spec.users);
    let horizon = (spec.users * spec.interactions_per_user * 10) as i64;
    for u in 0..spec.users {
        let leaf = r.random_range(0..leaves);
        let home = (leaf / spec.fine_clusters, leaf % spec.fine_clusters);
        user_clusters.push(home);
        let mut chosen: Vec<u32> = Vec::with_capacity(spec.interactions_per_user);
        let mut attempts = 0;
        while chosen.len() < spec.interactions_per_user && attempts < 100 * spec.interactions_per_user {
            attempts += 1;
            let x: f64 = r.random();
            let pool = if x < spec.affinity {
                &by_leaf[leaf]
            } else if x < spec.affinity + (1.0 - spec.affinity) * spec.coarse_affinity {
                &by_coarse[home.0]
            } else {
                chosen.push(r.random_range(0..spec.items) as u32);
                chosen.sort_unstable();
                chosen.dedup();
                continue;
            };
            let &item = pool.choose(&mut r).expect("clusters are non-empty");
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        for item in chosen {
            edges.push(Interaction {
                user: u as u32,
                item,
                timestamp: r.random_range(0..horizon),
            });
        }
    }
    Ok(SyntheticData {
        interactions: InteractionSet::from_edges(edges),
        features_v,
        features_t,
        item_clusters,
        user_clusters,
    })
}
