//! Joint stage-one training: LightGCN per modality, residual quantization,
//! BPR + residual-quantization + β·cross-modal loss, Adam on base embeddings
//! and the scorer, EMA on the codebooks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::Rng;

use crate::config::{parse_key_values, Config, StageOneConfig};
use crate::data::{
    build_modal_graph, init_user_embeddings, parse_edges, write_edges, Dataset, InteractionSet, Modality,
};
use crate::error::{Error, Result};
use crate::fmat::{self, FeatureMatrix};
use crate::gcn::{EmbeddingTable, PropagationPlan};
use crate::linalg::{axpy, dot, Matrix};
use crate::losses::{bpr_triple, cross_modal_triple, total_stage1_loss, LossBreakdown};
use crate::optim::AdamState;
use crate::par;
use crate::quantizer::{assignments, rq_loss, CodebookStack, QuantizationResult};
use crate::rng;
use crate::sampling::{Triple, TripleBatch, TripleSampler};
use crate::scorer::MlpScorer;

/// Everything one modality owns: graph operator, base table, codebooks and
/// the optimizer moments for the two embedding blocks.
#[derive(Debug, Clone)]
pub struct ModalState {
    pub modality: Modality,
    pub plan: PropagationPlan,
    pub base: EmbeddingTable,
    pub codebook: CodebookStack,
    pub adam_users: AdamState,
    pub adam_items: AdamState,
}

/// Gradients of the stage-one objective with respect to every trainable
/// block (base tables before propagation, scorer parameters).
#[derive(Debug, Clone)]
pub struct Stage1Grads {
    pub visual: EmbeddingTable,
    pub textual: EmbeddingTable,
    pub scorer: Vec<f64>,
}

impl Stage1Grads {
    pub fn modal(&self, m: Modality) -> &EmbeddingTable {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }
}

/// Quantized view of the entities one batch touches, for one modality.
struct BatchCodes {
    user_slot: Vec<usize>,
    item_slot: Vec<usize>,
    user_res: Vec<QuantizationResult>,
    item_res: Vec<QuantizationResult>,
}

const ABSENT: usize = usize::MAX;

impl BatchCodes {
    fn user(&self, u: u32) -> &QuantizationResult {
        &self.user_res[self.user_slot[u as usize]]
    }

    fn item(&self, i: u32) -> &QuantizationResult {
        &self.item_res[self.item_slot[i as usize]]
    }

    fn all(&self) -> Vec<QuantizationResult> {
        self.user_res.iter().chain(&self.item_res).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub probe: LossBreakdown,
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: StageOneConfig,
    pub user_count: usize,
    pub item_count: usize,
    pub train: InteractionSet,
    pub visual: ModalState,
    pub textual: ModalState,
    pub scorer: MlpScorer,
    pub adam_scorer: AdamState,
    pub step: u64,
    pub epoch: usize,
    sampler: TripleSampler,
}

fn modal_index(m: Modality) -> u64 {
    match m {
        Modality::Visual => 0,
        Modality::Textual => 1,
    }
}

impl Stage1Model {
    /// Fresh model: item base vectors are the item features, users are drawn
    /// from the feature statistics, codebooks are initialized from the first
    /// training batch.
    pub fn new(dataset: &Dataset, config: &StageOneConfig) -> Result<Self> {
        let sampler = TripleSampler::new(&dataset.split.train, dataset.user_count, dataset.item_count);
        let mut states = Vec::with_capacity(2);
        let first = sampler.sample(config.batch_size, config.seed, 0);
        if first.triples.is_empty() {
            return Err(Error::Invalid("no trainable interactions: every batch would be empty".into()));
        }
        for m in Modality::ALL {
            let width = match m {
                Modality::Visual => config.dim_v,
                Modality::Textual => config.dim_t,
            };
            let features = dataset.features(m);
            if features.cols != width {
                return Err(Error::Config(format!(
                    "dim_{m}={width} but the {m} features have {} columns",
                    features.cols
                )));
            }
            let graph = dataset.graph(m)?;
            let plan = PropagationPlan::new(&graph, config.layers);
            let user_seed = rng::derive_seed(config.seed, rng::STREAM_USER_INIT, modal_index(m));
            let users = init_user_embeddings(features, dataset.user_count, user_seed)?;
            let mut base = EmbeddingTable::new(users, features.to_matrix())?;
            base.train_items = !config.freeze_items;
            let final_table = plan.forward(&base)?;
            let (users_in, items_in) = batch_entities(&first, dataset.user_count, dataset.item_count);
            let rows: Vec<&[f64]> = users_in
                .iter()
                .map(|&u| final_table.users.row(u as usize))
                .chain(items_in.iter().map(|&i| final_table.items.row(i as usize)))
                .collect();
            let cb_seed = rng::derive_seed(config.seed, rng::STREAM_CODEBOOK_INIT, modal_index(m));
            let codebook = CodebookStack::init_from_batch(&rows, config.levels, config.codes, cb_seed)?;
            states.push(ModalState {
                modality: m,
                plan,
                adam_users: AdamState::new(base.users.as_slice().len()),
                adam_items: AdamState::new(base.items.as_slice().len()),
                base,
                codebook,
            });
        }
        let textual = states.pop().expect("two modalities");
        let visual = states.pop().expect("two modalities");
        let input = config.dim_t + config.dim_v;
        let scorer = MlpScorer::new(input, config.dim_v + config.dim_t, config.seed);
        Ok(Stage1Model {
            config: config.clone(),
            user_count: dataset.user_count,
            item_count: dataset.item_count,
            train: dataset.split.train.clone(),
            adam_scorer: AdamState::new(scorer.params().len()),
            scorer,
            visual,
            textual,
            step: 0,
            epoch: 0,
            sampler,
        })
    }

    pub fn modal(&self, m: Modality) -> &ModalState {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    pub fn modal_mut(&mut self, m: Modality) -> &mut ModalState {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Textual => &mut self.textual,
        }
    }

    pub fn sampler(&self) -> &TripleSampler {
        &self.sampler
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.eligible_edges().div_ceil(self.config.batch_size).max(1)
    }

    pub fn sample_batch(&self, step: u64) -> TripleBatch {
        self.sampler.sample(self.config.batch_size, self.config.seed, step)
    }

    /// A fixed batch, independent of the training stream, for tracking the
    /// objective across epochs.
    pub fn probe_batch(&self) -> TripleBatch {
        let seed = rng::derive_seed(self.config.seed, rng::STREAM_PROBE, 0);
        self.sampler.sample(self.config.batch_size, seed, 0)
    }

    /// Propagated (pre-quantization) embeddings for one modality.
    pub fn propagated(&self, m: Modality) -> Result<EmbeddingTable> {
        let s = self.modal(m);
        s.plan.forward(&s.base)
    }

    /// Quantization of every user and every item in one modality.
    pub fn quantize_all(&self, m: Modality) -> Result<(Vec<QuantizationResult>, Vec<QuantizationResult>)> {
        let table = self.propagated(m)?;
        let cb = &self.modal(m).codebook;
        Ok((cb.quantize_rows(&table.users)?, cb.quantize_rows(&table.items)?))
    }

    fn batch_codes(&self, m: Modality, final_table: &EmbeddingTable, batch: &TripleBatch) -> Result<BatchCodes> {
        let (users, items) = batch_entities(batch, self.user_count, self.item_count);
        let cb = &self.modal(m).codebook;
        let user_res = par::map_range(users.len(), |k| cb.quantize(final_table.users.row(users[k] as usize)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let item_res = par::map_range(items.len(), |k| cb.quantize(final_table.items.row(items[k] as usize)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut user_slot = vec![ABSENT; self.user_count];
        let mut item_slot = vec![ABSENT; self.item_count];
        for (k, &u) in users.iter().enumerate() {
            user_slot[u as usize] = k;
        }
        for (k, &i) in items.iter().enumerate() {
            item_slot[i as usize] = k;
        }
        Ok(BatchCodes {
            user_slot,
            item_slot,
            user_res,
            item_res,
        })
    }

    fn score_vec<'a>(&self, q: &'a QuantizationResult) -> &'a [f64] {
        if self.config.quantized_scores {
            &q.reconstruction
        } else {
            q.input()
        }
    }

    /// Loss breakdown and gradients for one batch, plus the per-modality
    /// quantizations of the batch entities (used for the EMA update).
    fn evaluate(&self, batch: &TripleBatch, want_grads: bool) -> Result<(LossBreakdown, Option<Stage1Grads>, [Vec<QuantizationResult>; 2])> {
        let cfg = &self.config;
        let n = batch.triples.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let fin_v = self.propagated(Modality::Visual)?;
        let fin_t = self.propagated(Modality::Textual)?;
        let codes_v = self.batch_codes(Modality::Visual, &fin_v, batch)?;
        let codes_t = self.batch_codes(Modality::Textual, &fin_t, batch)?;
        let (dt, dv) = (cfg.dim_t, cfg.dim_v);
        let inv_n = 1.0 / n as f64;
        let cm_weight = cfg.beta * inv_n;

        struct TripleOut {
            bpr: [Vec<f64>; 3],
            cm_text: Vec<f64>,
            cm_vis: Vec<f64>,
            cm_vis_neg: Vec<f64>,
        }
        struct ChunkOut {
            bpr: f64,
            cm: f64,
            scorer: Vec<f64>,
            triples: Vec<TripleOut>,
        }

        let concat = |t: &QuantizationResult, v: &QuantizationResult| -> Vec<f64> {
            self.score_vec(t).iter().chain(self.score_vec(v)).copied().collect()
        };
        let chunks = par::map_chunks(n, |range| {
            let mut out = ChunkOut {
                bpr: 0.0,
                cm: 0.0,
                scorer: vec![0.0; self.scorer.params().len()],
                triples: Vec::with_capacity(range.len()),
            };
            for &Triple { user, pos, neg } in &batch.triples[range] {
                let zu = concat(codes_t.user(user), codes_v.user(user));
                let zi = concat(codes_t.item(pos), codes_v.item(pos));
                let zj = concat(codes_t.item(neg), codes_v.item(neg));
                let b = bpr_triple(&zu, &zi, &zj);
                out.bpr += b.loss;
                let c = cross_modal_triple(
                    self.score_vec(codes_t.item(pos)),
                    self.score_vec(codes_v.item(pos)),
                    self.score_vec(codes_v.item(neg)),
                    &self.scorer,
                    cm_weight,
                    &mut out.scorer,
                );
                out.cm += c.loss;
                out.triples.push(TripleOut {
                    bpr: [b.user, b.pos, b.neg],
                    cm_text: c.text,
                    cm_vis: c.visual,
                    cm_vis_neg: c.visual_neg,
                });
            }
            out
        });

        let mut bpr_sum = 0.0;
        let mut cm_sum = 0.0;
        for c in &chunks {
            bpr_sum += c.bpr;
            cm_sum += c.cm;
        }
        let bpr = bpr_sum * inv_n;
        let cm = cm_sum * inv_n;

        // Residual-quantization loss over entity occurrences in the batch.
        let mut rq_total = 0.0;
        // per modality: (is_user, id) of each occurrence and its gradient
        type Occurrences = (Vec<(bool, u32)>, Vec<Vec<f64>>);
        let mut rq_grads: Vec<Occurrences> = Vec::with_capacity(2);
        for codes in [&codes_v, &codes_t] {
            let mut who = Vec::with_capacity(n * 3);
            for t in &batch.triples {
                if cfg.rq_users {
                    who.push((true, t.user));
                }
                who.push((false, t.pos));
                who.push((false, t.neg));
            }
            let occ: Vec<&QuantizationResult> = who
                .iter()
                .map(|&(is_user, id)| if is_user { codes.user(id) } else { codes.item(id) })
                .collect();
            let cb = if std::ptr::eq(codes, &codes_v) { &self.visual.codebook } else { &self.textual.codebook };
            let rq = rq_loss(cb, &occ, cfg.alpha)?;
            rq_total += rq.loss;
            rq_grads.push((who, rq.grads));
        }

        let losses = total_stage1_loss(bpr, rq_total, cm, cfg.beta);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("stage-one loss".into()));
        }
        let entities = [codes_v.all(), codes_t.all()];
        if !want_grads {
            return Ok((losses, None, entities));
        }

        // Gradients with respect to the propagated tables (straight-through:
        // ∂/∂z = ∂/∂ẑ), then back through propagation.
        let mut g_v = fin_v.zeros_like();
        let mut g_t = fin_t.zeros_like();
        let mut scorer_grad = vec![0.0; self.scorer.params().len()];
        let mut k = 0;
        for c in &chunks {
            axpy(1.0, &c.scorer, &mut scorer_grad);
            for o in &c.triples {
                let t = batch.triples[k];
                k += 1;
                let [gu, gi, gj] = &o.bpr;
                let (u, i, j) = (t.user as usize, t.pos as usize, t.neg as usize);
                axpy(inv_n, &gu[..dt], g_t.users.row_mut(u));
                axpy(inv_n, &gu[dt..], g_v.users.row_mut(u));
                axpy(inv_n, &gi[..dt], g_t.items.row_mut(i));
                axpy(inv_n, &gi[dt..], g_v.items.row_mut(i));
                axpy(inv_n, &gj[..dt], g_t.items.row_mut(j));
                axpy(inv_n, &gj[dt..], g_v.items.row_mut(j));
                axpy(1.0, &o.cm_text, g_t.items.row_mut(i));
                axpy(1.0, &o.cm_vis, g_v.items.row_mut(i));
                axpy(1.0, &o.cm_vis_neg, g_v.items.row_mut(j));
            }
        }
        debug_assert_eq!(dv, g_v.dim());
        for (g, (who, grads)) in [&mut g_v, &mut g_t].into_iter().zip(&rq_grads) {
            for (&(is_user, id), gr) in who.iter().zip(grads) {
                let row = if is_user { g.users.row_mut(id as usize) } else { g.items.row_mut(id as usize) };
                axpy(1.0, gr, row);
            }
        }
        let grads = Stage1Grads {
            visual: self.visual.plan.backward(&g_v)?,
            textual: self.textual.plan.backward(&g_t)?,
            scorer: scorer_grad,
        };
        Ok((losses, Some(grads), entities))
    }

    pub fn loss(&self, batch: &TripleBatch) -> Result<LossBreakdown> {
        Ok(self.evaluate(batch, false)?.0)
    }

    pub fn loss_and_grads(&self, batch: &TripleBatch) -> Result<(LossBreakdown, Stage1Grads)> {
        let (l, g, _) = self.evaluate(batch, true)?;
        Ok((l, g.expect("gradients requested")))
    }

    /// One optimization step on the batch for the current step counter.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.sample_batch(self.step);
        let (losses, grads, entities) = self.evaluate(&batch, true)?;
        let grads = grads.expect("gradients requested");
        let lr = self.config.lr;
        let applied = (|| -> Result<()> {
            for (m, g) in [(Modality::Visual, &grads.visual), (Modality::Textual, &grads.textual)] {
                let s = self.modal_mut(m);
                if s.base.train_users {
                    s.adam_users.step(s.base.users.as_mut_slice(), g.users.as_slice(), lr)?;
                }
                if s.base.train_items {
                    s.adam_items.step(s.base.items.as_mut_slice(), g.items.as_slice(), lr)?;
                }
            }
            self.adam_scorer.step(self.scorer.params_mut(), &grads.scorer, lr)
        })();
        if let Err(e) = applied {
            warn!("step {}: update aborted: {e}", self.step);
        }
        let decay = self.config.ema_decay;
        let window = self.config.dead_code_window;
        for (m, ents) in Modality::ALL.into_iter().zip(&entities) {
            let seed = rng::derive_seed(self.config.seed, modal_index(m), self.step);
            let cb = &mut self.modal_mut(m).codebook;
            cb.ema_update(&assignments(ents), decay)?;
            let reset = cb.reset_dead_codes(ents, window, seed);
            if !reset.is_empty() {
                debug!("step {}: re-seeded {} idle {m} code(s)", self.step, reset.len());
            }
        }
        let metrics = StepMetrics {
            step: self.step,
            losses,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs one epoch and returns the per-step metrics.
    pub fn train_epoch(&mut self) -> Result<Vec<StepMetrics>> {
        let steps = self.steps_per_epoch();
        let out = (0..steps).map(|_| self.train_step()).collect::<Result<Vec<_>>>()?;
        self.epoch += 1;
        Ok(out)
    }

    /// Concatenated (text ⊕ visual) scoring vectors for all users and items.
    pub fn scoring_tables(&self) -> Result<(Matrix, Matrix)> {
        let (u_v, i_v) = self.quantize_all(Modality::Visual)?;
        let (u_t, i_t) = self.quantize_all(Modality::Textual)?;
        let width = self.config.dim_t + self.config.dim_v;
        let build = |t: &[QuantizationResult], v: &[QuantizationResult]| {
            let mut m = Matrix::zeros(t.len(), width);
            for (r, (qt, qv)) in t.iter().zip(v).enumerate() {
                let row = m.row_mut(r);
                row[..self.config.dim_t].copy_from_slice(self.score_vec(qt));
                row[self.config.dim_t..].copy_from_slice(self.score_vec(qv));
            }
            m
        };
        Ok((build(&u_t, &u_v), build(&i_t, &i_v)))
    }

    pub fn evaluate_auc(&self, held_out: &InteractionSet) -> Result<Option<f64>> {
        let (users, items) = self.scoring_tables()?;
        Ok(evaluate_auc(
            &users,
            &items,
            held_out,
            &self.sampler,
            self.config.eval_negatives,
            self.config.seed,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let io = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io(&p, e));
        let mut cfg = Config::profile("desk")?;
        cfg.stage1 = self.config.clone();
        io(dir.join("config.txt"), cfg.to_text())?;
        io(
            dir.join("state.txt"),
            format!(
                "users={}\nitems={}\nstep={}\nepoch={}\nscorer_input={}\nscorer_hidden={}\nadam_scorer_step={}\n{}",
                self.user_count,
                self.item_count,
                self.step,
                self.epoch,
                self.scorer.input(),
                self.scorer.hidden(),
                self.adam_scorer.step,
                Modality::ALL
                    .iter()
                    .map(|&m| {
                        let s = self.modal(m);
                        format!(
                            "adam_{m}_users_step={}\nadam_{m}_items_step={}\nfreeze_items_{m}={}\n",
                            s.adam_users.step, s.adam_items.step, !s.base.train_items
                        )
                    })
                    .collect::<String>()
            ),
        )?;
        write_edges(&dir.join("train.tsv"), &self.train)?;
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
        fmat::write_matrix(&dir.join("scorer.fmat"), &row(self.scorer.params()))?;
        let adam_dir = dir.join("adam");
        fs::create_dir_all(&adam_dir).map_err(|e| Error::io(&adam_dir, e))?;
        fmat::write_matrix(&adam_dir.join("scorer_m.fmat"), &row(&self.adam_scorer.m))?;
        fmat::write_matrix(&adam_dir.join("scorer_v.fmat"), &row(&self.adam_scorer.v))?;
        for m in Modality::ALL {
            let s = self.modal(m);
            fmat::write_matrix(&dir.join(format!("emb_{m}_users.fmat")), &s.base.users)?;
            fmat::write_matrix(&dir.join(format!("emb_{m}_items.fmat")), &s.base.items)?;
            s.codebook
                .save(&dir.join(format!("codebook_{m}")), self.config.alpha, self.config.ema_decay, self.step)?;
            for (name, st) in [("users", &s.adam_users), ("items", &s.adam_items)] {
                fmat::write_matrix(&adam_dir.join(format!("{m}_{name}_m.fmat")), &row(&st.m))?;
                fmat::write_matrix(&adam_dir.join(format!("{m}_{name}_v.fmat")), &row(&st.v))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| Error::io(&p, e));
        let config = Config::parse(&read(dir.join("config.txt"))?)?.stage1;
        let state = parse_key_values(&read(dir.join("state.txt"))?)?;
        let get = |k: &str| -> Result<u64> {
            state
                .get(k)
                .ok_or_else(|| Error::Config(format!("state.txt lacks {k}")))?
                .parse()
                .map_err(|_| Error::Config(format!("state.txt: bad {k}")))
        };
        let user_count = get("users")? as usize;
        let item_count = get("items")? as usize;
        let train = parse_edges(&dir.join("train.tsv"))?;
        let flat = |p: PathBuf| -> Result<Vec<f64>> { Ok(fmat::read_matrix(&p)?.as_slice().to_vec()) };
        let adam = |prefix: &str, step: u64| -> Result<AdamState> {
            let m = flat(dir.join("adam").join(format!("{prefix}_m.fmat")))?;
            let v = flat(dir.join("adam").join(format!("{prefix}_v.fmat")))?;
            let mut st = AdamState::new(m.len());
            if v.len() != m.len() {
                return Err(Error::Shape(format!("Adam moments for {prefix} differ in length")));
            }
            st.m = m;
            st.v = v;
            st.step = step;
            Ok(st)
        };
        let mut states = Vec::with_capacity(2);
        for m in Modality::ALL {
            let users = fmat::read_matrix(&dir.join(format!("emb_{m}_users.fmat")))?;
            let items = fmat::read_matrix(&dir.join(format!("emb_{m}_items.fmat")))?;
            if users.rows() != user_count || items.rows() != item_count {
                return Err(Error::Shape(format!("{m} embedding tables do not match state.txt")));
            }
            let features = FeatureMatrix::from_matrix(&items)?;
            let graph = build_modal_graph(&train, m, features, user_count)?;
            let mut base = EmbeddingTable::new(users, items)?;
            base.train_items = state.get(&format!("freeze_items_{m}")).is_none_or(|v| v != "true");
            let (codebook, _) = CodebookStack::load(&dir.join(format!("codebook_{m}")))?;
            states.push(ModalState {
                modality: m,
                plan: PropagationPlan::new(&graph, config.layers),
                adam_users: adam(&format!("{m}_users"), get(&format!("adam_{m}_users_step"))?)?,
                adam_items: adam(&format!("{m}_items"), get(&format!("adam_{m}_items_step"))?)?,
                base,
                codebook,
            });
        }
        let textual = states.pop().expect("two modalities");
        let visual = states.pop().expect("two modalities");
        let scorer = MlpScorer::from_params(
            get("scorer_input")? as usize,
            get("scorer_hidden")? as usize,
            flat(dir.join("scorer.fmat"))?,
        )
        .ok_or_else(|| Error::Shape("scorer parameters do not match the declared sizes".into()))?;
        Ok(Stage1Model {
            sampler: TripleSampler::new(&train, user_count, item_count),
            adam_scorer: adam("scorer", get("adam_scorer_step")?)?,
            scorer,
            visual,
            textual,
            user_count,
            item_count,
            train,
            step: get("step")?,
            epoch: get("epoch")? as usize,
            config,
        })
    }
}

/// Distinct users and items of a batch, in ascending order.
fn batch_entities(batch: &TripleBatch, user_count: usize, item_count: usize) -> (Vec<u32>, Vec<u32>) {
    let mut seen_u = vec![false; user_count];
    let mut seen_i = vec![false; item_count];
    for t in &batch.triples {
        seen_u[t.user as usize] = true;
        seen_i[t.pos as usize] = true;
        seen_i[t.neg as usize] = true;
    }
    let collect = |seen: Vec<bool>| {
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(k, _)| k as u32)
            .collect::<Vec<u32>>()
    };
    (collect(seen_u), collect(seen_i))
}

/// Sampled AUC: for each held-out `(u, i)` whose user has training
/// positives, the fraction of `negatives` sampled non-interacted items that
/// score strictly below `i` (ties count one half), averaged over edges.
/// Returns `None` when no edge qualifies.
pub fn evaluate_auc(
    users: &Matrix,
    items: &Matrix,
    held_out: &InteractionSet,
    known: &TripleSampler,
    negatives: usize,
    seed: u64,
) -> Option<f64> {
    let item_count = items.rows();
    let mut held_by_user: Vec<Vec<u32>> = vec![Vec::new(); users.rows()];
    for e in &held_out.edges {
        if (e.user as usize) < users.rows() {
            held_by_user[e.user as usize].push(e.item);
        }
    }
    let per_edge = par::map_range(held_out.edges.len(), |k| {
        let e = held_out.edges[k];
        let u = e.user as usize;
        if u >= users.rows() || e.item as usize >= item_count || known.positives(u).is_empty() {
            return None;
        }
        let excluded = |c: u32| known.is_positive(u, c) || held_by_user[u].contains(&c);
        let available = (0..item_count as u32).filter(|&c| !excluded(c)).count();
        if available == 0 {
            return None;
        }
        let mut rng = rng::stream(seed, rng::STREAM_EVAL, k as u64);
        let zu = users.row(u);
        let pos = dot(zu, items.row(e.item as usize));
        let mut wins = 0.0;
        for _ in 0..negatives {
            let neg = loop {
                let c = rng.random_range(0..item_count) as u32;
                if !excluded(c) {
                    break c;
                }
            };
            let s = dot(zu, items.row(neg as usize));
            if s < pos {
                wins += 1.0;
            } else if s == pos {
                wins += 0.5;
            }
        }
        Some(wins / negatives as f64)
    });
    let scored: Vec<f64> = per_edge.into_iter().flatten().collect();
    if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    }
}

fn mean_breakdown(steps: &[StepMetrics]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| steps.iter().map(|s| f(&s.losses)).sum::<f64>() / n;
    LossBreakdown {
        bpr: sum(|l| l.bpr),
        rq: sum(|l| l.rq),
        cm: sum(|l| l.cm),
        total: sum(|l| l.total),
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint, metrics and epoch logs go here when set.
    pub out_dir: Option<PathBuf>,
    /// Compute validation AUC after every epoch.
    pub eval_each_epoch: bool,
}

pub const METRICS_HEADER: &str = "step\tbpr\trq\tcm\ttotal\n";
pub const EPOCHS_HEADER: &str = "epoch\tmean_total\tprobe_total\tvalid_auc\n";

/// Full stage-one run. With an output directory, writes `metrics.tsv` (one
/// line per step), `epochs.tsv`, and overwrites `checkpoint/` after each epoch.
pub fn train_stage1(dataset: &Dataset, config: &StageOneConfig, options: &TrainOptions) -> Result<(Stage1Model, Stage1Report)> {
    let mut model = Stage1Model::new(dataset, config)?;
    let probe = model.probe_batch();
    let mut report = Stage1Report {
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut metrics_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(METRICS_HEADER.as_bytes()).map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut epochs_text = String::from(EPOCHS_HEADER);
    for _ in 0..config.epochs {
        let steps = model.train_epoch()?;
        if let Some((path, f)) = metrics_file.as_mut() {
            let mut text = String::new();
            for s in &steps {
                let l = s.losses;
                text.push_str(&format!("{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\n", s.step, l.bpr, l.rq, l.cm, l.total));
            }
            f.write_all(text.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        let valid_auc = if options.eval_each_epoch {
            model.evaluate_auc(&dataset.split.valid)?
        } else {
            None
        };
        let epoch = EpochMetrics {
            epoch: model.epoch,
            mean: mean_breakdown(&steps),
            probe: model.loss(&probe)?,
            valid_auc,
        };
        info!(
            "epoch {}: mean loss {:.5}, probe {:.5}{}",
            epoch.epoch,
            epoch.mean.total,
            epoch.probe.total,
            valid_auc.map(|a| format!(", valid AUC {a:.4}")).unwrap_or_default()
        );
        epochs_text.push_str(&format!(
            "{}\t{:.8}\t{:.8}\t{}\n",
            epoch.epoch,
            epoch.mean.total,
            epoch.probe.total,
            valid_auc.map_or("NA".to_string(), |a| format!("{a:.6}"))
        ));
        report.steps.extend(steps);
        report.epochs.push(epoch);
        if let Some(dir) = &options.out_dir {
            model.save(&dir.join("checkpoint"))?;
            let path = dir.join("epochs.tsv");
            fs::write(&path, &epochs_text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok((model, report))
}
