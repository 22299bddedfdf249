#![allow(dead_code)]

pub mod gradcheck;

use preftok::config::{Config, StageOneConfig};
use preftok::data::{Dataset, Interaction, InteractionSet, Modality};
use preftok::fmat::FeatureMatrix;
use preftok::linalg::Matrix;
use preftok::quantizer::{CodebookStack, TokenSequence};
use preftok::rng;
use preftok::sampling::TripleBatch;
use preftok::stage1::Stage1Model;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, 1000, 0)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softplus_neg(x: f64) -> f64 {
    // −ln σ(x)
    (1.0 + (-x).exp()).ln()
}

/// Exhaustive per-level nearest code, lowest index on ties.
pub fn oracle_tokens(levels: &[Matrix], z: &[f64]) -> Vec<usize> {
    let mut r = z.to_vec();
    let mut out = Vec::new();
    for m in levels {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..m.rows() {
            let d: f64 = r.iter().zip(m.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        for (rv, cv) in r.iter_mut().zip(m.row(best)) {
            *rv -= cv;
        }
        out.push(best);
    }
    out
}

/// Dense symmetric-normalized propagation, mean over layers `0..=layers`.
/// Nodes without edges map to themselves.
/// Rows `0..users` are users, the rest items.
pub fn dense_propagate(
    users: usize,
    items: usize,
    edges: &[(usize, usize)],
    base: &Matrix,
    layers: usize,
) -> Matrix {
    let n = users + items;
    let mut deg = vec![0usize; n];
    let mut uniq: Vec<(usize, usize)> = edges.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    for &(u, i) in &uniq {
        deg[u] += 1;
        deg[users + i] += 1;
    }
    let mut adj = Matrix::zeros(n, n);
    for &(u, i) in &uniq {
        let w = 1.0 / ((deg[u] * deg[users + i]) as f64).sqrt();
        adj.set(u, users + i, w);
        adj.set(users + i, u, w);
    }
    // isolated nodes keep their embedding
    for (k, &dk) in deg.iter().enumerate() {
        if dk == 0 {
            adj.set(k, k, 1.0);
        }
    }
    let d = base.cols();
    let mut layer = base.clone();
    let mut acc = base.clone();
    for _ in 0..layers {
        let next = Matrix::from_fn(n, d, |r, c| (0..n).map(|k| adj.get(r, k) * layer.get(k, c)).sum());
        for (a, v) in acc.as_mut_slice().iter_mut().zip(next.as_slice()) {
            *a += v;
        }
        layer = next;
    }
    for a in acc.as_mut_slice() {
        *a /= (layers + 1) as f64;
    }
    acc
}

pub fn stack_rows(top: &Matrix, bottom: &Matrix) -> Matrix {
    let mut data = top.as_slice().to_vec();
    data.extend_from_slice(bottom.as_slice());
    Matrix::from_vec(top.rows() + bottom.rows(), top.cols(), data).unwrap()
}

/// A small dataset: `users × items` with a ring of interactions plus extras.
pub fn small_dataset(users: usize, items: usize, dim_v: usize, dim_t: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    let mut ts = 0;
    for u in 0..users {
        for k in 0..3 {
            ts += 1;
            edges.push(Interaction {
                user: u as u32,
                item: ((u + 2 * k) % items) as u32,
                timestamp: ts,
            });
        }
    }
    let set = InteractionSet::from_edges(edges);
    let f = |d: usize, r: &mut ChaCha8Rng| {
        FeatureMatrix::new(items, d, (0..items * d).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect()).unwrap()
    };
    let fv = f(dim_v, &mut r);
    let ft = f(dim_t, &mut r);
    Dataset::new(&set, fv, ft).unwrap()
}

pub fn small_config(dim: usize) -> StageOneConfig {
    StageOneConfig {
        dim_v: dim,
        dim_t: dim,
        levels: 2,
        codes: 3,
        batch_size: 6,
        epochs: 1,
        seed: 3,
        ..Config::profile("tiny").unwrap().stage1
    }
}

/// The stage-one objective with tokens frozen at their current values and
/// straight-through reconstructions `ẑ = z + (ẑ₀ − z₀)`, evaluated for the
/// given base tables with the dense propagation oracle. Codebook terms with
/// no encoder gradient are omitted.
pub struct Stage1Surrogate<'a> {
    pub model: &'a Stage1Model,
    pub batch: &'a TripleBatch,
    tokens: [(Vec<TokenSequence>, Vec<TokenSequence>); 2],
    offsets: [(Matrix, Matrix); 2],
    edges: Vec<(usize, usize)>,
}

impl<'a> Stage1Surrogate<'a> {
    pub fn new(model: &'a Stage1Model, batch: &'a TripleBatch) -> Self {
        let edges: Vec<(usize, usize)> = model.train.edges.iter().map(|e| (e.user as usize, e.item as usize)).collect();
        let mut tokens = Vec::new();
        let mut offsets = Vec::new();
        for m in Modality::ALL {
            let (u, i) = model.quantize_all(m).unwrap();
            let off = |q: &[preftok::quantizer::QuantizationResult]| {
                let d = q[0].reconstruction.len();
                Matrix::from_fn(q.len(), d, |r, c| q[r].reconstruction[c] - q[r].input()[c])
            };
            offsets.push((off(&u), off(&i)));
            tokens.push((
                u.into_iter().map(|q| q.tokens).collect::<Vec<_>>(),
                i.into_iter().map(|q| q.tokens).collect::<Vec<_>>(),
            ));
        }
        let t1 = tokens.pop().unwrap();
        let t0 = tokens.pop().unwrap();
        let o1 = offsets.pop().unwrap();
        let o0 = offsets.pop().unwrap();
        Stage1Surrogate {
            model,
            batch,
            tokens: [t0, t1],
            offsets: [o0, o1],
            edges,
        }
    }

    fn slot(m: Modality) -> usize {
        match m {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    /// `bases[slot] = (users, items)` for visual (0) and textual (1).
    pub fn value(&self, bases: &[(Matrix, Matrix); 2]) -> f64 {
        let cfg = &self.model.config;
        let (nu, ni) = (self.model.user_count, self.model.item_count);
        let mut z = Vec::new();
        let mut zhat = Vec::new();
        for m in Modality::ALL {
            let s = Self::slot(m);
            let stacked = stack_rows(&bases[s].0, &bases[s].1);
            let out = dense_propagate(nu, ni, &self.edges, &stacked, cfg.layers);
            let mut hat = out.clone();
            for r in 0..nu + ni {
                let off = if r < nu { self.offsets[s].0.row(r) } else { self.offsets[s].1.row(r - nu) };
                for (h, o) in hat.row_mut(r).iter_mut().zip(off) {
                    *h += o;
                }
            }
            z.push(out);
            zhat.push(hat);
        }
        let user = |s: usize, u: u32| zhat[s].row(u as usize).to_vec();
        let item = |s: usize, i: u32| zhat[s].row(nu + i as usize).to_vec();
        let concat = |a: Vec<f64>, b: Vec<f64>| a.into_iter().chain(b).collect::<Vec<f64>>();
        let n = self.batch.triples.len() as f64;
        let mut bpr = 0.0;
        let mut cm = 0.0;
        for t in &self.batch.triples {
            let zu = concat(user(1, t.user), user(0, t.user));
            let zi = concat(item(1, t.pos), item(0, t.pos));
            let zj = concat(item(1, t.neg), item(0, t.neg));
            bpr += softplus_neg(dot(&zu, &zi) - dot(&zu, &zj));
            let pos = concat(item(1, t.pos), item(0, t.pos));
            let neg = concat(item(1, t.pos), item(0, t.neg));
            cm += softplus_neg(self.model.scorer.score(&pos) - self.model.scorer.score(&neg));
        }
        let mut commit = 0.0;
        for m in Modality::ALL {
            let s = Self::slot(m);
            let stack: &CodebookStack = &self.model.modal(m).codebook;
            let mut occ = Vec::new();
            for t in &self.batch.triples {
                if cfg.rq_users {
                    occ.push((z[s].row(t.user as usize).to_vec(), &self.tokens[s].0[t.user as usize]));
                }
                occ.push((z[s].row(nu + t.pos as usize).to_vec(), &self.tokens[s].1[t.pos as usize]));
                occ.push((z[s].row(nu + t.neg as usize).to_vec(), &self.tokens[s].1[t.neg as usize]));
            }
            let mut sum = 0.0;
            for (zv, tok) in &occ {
                let mut r = zv.clone();
                for l in 0..tok.len() {
                    let e = stack.code_vector(l, tok.code(l));
                    sum += r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    for (rv, ev) in r.iter_mut().zip(e) {
                        *rv -= ev;
                    }
                }
            }
            commit += cfg.alpha * sum / occ.len() as f64;
        }
        bpr / n + cfg.beta * cm / n + commit
    }

    pub fn base_tables(&self) -> [(Matrix, Matrix); 2] {
        let b = |m: Modality| {
            let s = self.model.modal(m);
            (s.base.users.clone(), s.base.items.clone())
        };
        [b(Modality::Visual), b(Modality::Textual)]
    }
}

/// Stage two with a planted high-reward direction: a short stage-one run
/// provides tokens and reference codebooks; user histories are rendered from
/// the reference, and training starts from codebooks displaced from it by
/// twice the per-level RMS.
pub struct PlantedStage2 {
    pub model: Stage1Model,
    pub state: preftok::stage2::Stage2State,
}

pub fn planted_stage2(seed: u64, epochs: usize) -> PlantedStage2 {
    let spec = preftok::synth::SyntheticSpec {
        users: 200,
        items: 120,
        seed,
        ..Default::default()
    };
    let ds = preftok::synth::generate(&spec).unwrap().dataset().unwrap();
    let profile = Config::profile("tiny").unwrap();
    let s1 = StageOneConfig {
        epochs: 3,
        seed,
        ..profile.stage1
    };
    let (model, _) = preftok::stage1::train_stage1(&ds, &s1, &Default::default()).unwrap();
    let cfg = preftok::config::StageTwoConfig {
        lr: 1e-2,
        explore_scale: 0.3,
        batch_size: 8,
        epochs,
        ..profile.stage2
    };
    let state = preftok::stage2::Stage2State::from_stage1(&model, &cfg, seed).unwrap();
    let reference = [state.visual.clone(), state.textual.clone()];
    let mut r = rng::stream(seed, 2000, 0);
    let displace = |stack: &CodebookStack, r: &mut ChaCha8Rng| {
        let levels = (0..stack.levels())
            .map(|l| {
                let m = stack.level(l);
                let rms = (m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.as_slice().len() as f64).sqrt();
                let mut out = m.clone();
                for v in out.as_mut_slice() {
                    *v += 2.0 * rms * r.sample::<f64, _>(StandardNormal);
                }
                out
            })
            .collect();
        CodebookStack::from_levels(levels).unwrap()
    };
    let mut state = state;
    state.visual = displace(&reference[0], &mut r);
    state.textual = displace(&reference[1], &mut r);
    let state = state.with_histories_from(Some([&reference[0], &reference[1]])).unwrap();
    PlantedStage2 { model, state }
}

/// Bit-pattern hash of every stage-one base table.
pub fn base_table_checksum(model: &Stage1Model) -> u64 {
    let mut parts = Vec::new();
    for m in Modality::ALL {
        let b = &model.modal(m).base;
        parts.push(&b.users);
        parts.push(&b.items);
    }
    preftok::stage2::checksum(&parts)
}
