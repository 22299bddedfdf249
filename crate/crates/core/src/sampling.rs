//! BPR triple sampling: positives uniform over train edges, one negative per
//! positive uniform over the items the user has not interacted with.

use log::warn;
use rand::Rng;

use crate::data::InteractionSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleBatch {
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone)]
pub struct TripleSampler {
    item_count: usize,
    positives: Vec<Vec<u32>>,
    /// Edges whose user has at least one non-interacted item.
    eligible: Vec<(u32, u32)>,
    skipped_users: Vec<u32>,
}

impl TripleSampler {
    pub fn new(train: &InteractionSet, user_count: usize, item_count: usize) -> Self {
        let mut positives = vec![Vec::new(); user_count];
        for e in &train.edges {
            positives[e.user as usize].push(e.item);
        }
        for p in positives.iter_mut() {
            p.sort_unstable();
            p.dedup();
        }
        let skipped_users: Vec<u32> = positives
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty() && p.len() >= item_count)
            .map(|(u, _)| u as u32)
            .collect();
        if !skipped_users.is_empty() {
            warn!(
                "{} user(s) interacted with every item and are excluded from negative sampling",
                skipped_users.len()
            );
        }
        let eligible = train
            .edges
            .iter()
            .filter(|e| positives[e.user as usize].len() < item_count)
            .map(|e| (e.user, e.item))
            .collect();
        TripleSampler {
            item_count,
            positives,
            eligible,
            skipped_users,
        }
    }

    pub fn skipped_users(&self) -> &[u32] {
        &self.skipped_users
    }

    pub fn positives(&self, user: usize) -> &[u32] {
        &self.positives[user]
    }

    pub fn is_positive(&self, user: usize, item: u32) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    pub fn eligible_edges(&self) -> usize {
        self.eligible.len()
    }

    /// Uniform draw from the items `user` has not interacted with.
    pub fn negative_for(&self, user: usize, rng: &mut impl Rng) -> Option<u32> {
        let pos = &self.positives[user];
        if pos.len() >= self.item_count {
            return None;
        }
        if pos.len() * 2 <= self.item_count {
            loop {
                let cand = rng.random_range(0..self.item_count) as u32;
                if pos.binary_search(&cand).is_err() {
                    return Some(cand);
                }
            }
        }
        // Dense users: index directly into the complement.
        let mut k = rng.random_range(0..self.item_count - pos.len()) as u32;
        for &p in pos {
            if p <= k {
                k += 1;
            } else {
                break;
            }
        }
        Some(k)
    }

    /// The batch for `(seed, step)`; empty when no eligible edge exists.
    pub fn sample(&self, batch: usize, seed: u64, step: u64) -> TripleBatch {
        if self.eligible.is_empty() {
            return TripleBatch { triples: Vec::new() };
        }
        let mut rng = rng::stream(seed, rng::STREAM_TRIPLES, step);
        let triples = (0..batch)
            .map(|_| {
                let (user, pos) = self.eligible[rng.random_range(0..self.eligible.len())];
                let neg = self
                    .negative_for(user as usize, &mut rng)
                    .expect("eligible users have a negative");
                Triple { user, pos, neg }
            })
            .collect();
        TripleBatch { triples }
    }
}

pub fn sample_triples(
    train: &InteractionSet,
    user_count: usize,
    item_count: usize,
    batch: usize,
    seed: u64,
    step: u64,
) -> TripleBatch {
    TripleSampler::new(train, user_count, item_count).sample(batch, seed, step)
}
