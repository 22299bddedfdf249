//! Codebook-only fine-tuning against frozen toy generators, using
//! reward-weighted noise-regression (image) and likelihood (text) losses.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::StageTwoConfig;
use crate::data::{InteractionSet, Modality};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine, Matrix};
use crate::optim::AdamState;
use crate::par;
use crate::quantizer::{CodebookStack, TokenSequence};
use crate::rng;
use crate::stage1::Stage1Model;

/// Cosine similarity of two already-projected vectors. A zero vector has no
/// direction; the similarity is defined as 0.
pub fn clip_sim(a: &[f64], b: &[f64]) -> f64 {
    match cosine(a, b) {
        Some(c) => c,
        None => {
            warn!("similarity with a zero vector, using 0");
            0.0
        }
    }
}

/// Mean similarity of a generation to each history entry.
pub fn personalization_reward(gen: &[f64], history: &[Vec<f64>]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Invalid("personalization reward needs a non-empty history".into()));
    }
    Ok(history.iter().map(|h| clip_sim(gen, h)).sum::<f64>() / history.len() as f64)
}

/// Mean image/text similarity over generated pairs (already projected).
pub fn compute_ccs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("consistency score of an empty batch".into()));
    }
    Ok(pairs.iter().map(|(a, b)| clip_sim(a, b)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBundle {
    pub r_crs: f64,
    pub r_p_v: f64,
    pub r_p_t: f64,
    pub gamma: f64,
}

impl RewardBundle {
    pub fn image_weight(&self) -> f64 {
        self.r_p_v + self.gamma * self.r_crs
    }

    pub fn text_weight(&self) -> f64 {
        self.r_p_t + self.gamma * self.r_crs
    }
}

/// Frozen token-conditioned generator pair.
///
/// The image head predicts noise from `x_t ⊕ c`; it is built as
/// `[I/σ | −D/σ]`, which makes it the exact denoiser for images `D·c`.
/// The text head maps `c` to `seq_len × vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    pub image_head: Matrix,
    pub decoder: Matrix,
    pub text_head: Matrix,
    pub noise_scale: f64,
    pub explore_scale: f64,
    pub vocab: usize,
    pub seq_len: usize,
}

impl ToyGenerator {
    /// `gain` scales the random heads so that typical conditioning vectors
    /// give O(1) images and logits.
    pub fn new(dim_v: usize, dim_t: usize, cfg: &StageTwoConfig, gain: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_GENERATOR, 0);
        let mut normal = |scale: f64| scale * r.sample::<f64, _>(StandardNormal);
        let n = cfg.image_dim;
        let decoder = Matrix::from_fn(n, dim_v, |_, _| normal(gain / (dim_v as f64).sqrt()));
        let text_head = Matrix::from_fn(cfg.seq_len * cfg.vocab, dim_t, |_, _| normal(3.0 * gain / (dim_t as f64).sqrt()));
        Self::from_parts(decoder, text_head, cfg.noise_scale, cfg.explore_scale, cfg.vocab, cfg.seq_len)
    }

    pub fn from_parts(
        decoder: Matrix,
        text_head: Matrix,
        noise_scale: f64,
        explore_scale: f64,
        vocab: usize,
        seq_len: usize,
    ) -> Self {
        let (n, d) = (decoder.rows(), decoder.cols());
        let image_head = Matrix::from_fn(n, n + d, |r, c| {
            if c < n {
                if r == c {
                    1.0 / noise_scale
                } else {
                    0.0
                }
            } else {
                -decoder.get(r, c - n) / noise_scale
            }
        });
        ToyGenerator {
            image_head,
            decoder,
            text_head,
            noise_scale,
            explore_scale,
            vocab,
            seq_len,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.decoder.rows()
    }

    /// Noise prediction for a corrupted image under conditioning `c`.
    pub fn predict_noise(&self, corrupted: &[f64], c: &[f64]) -> Vec<f64> {
        let input: Vec<f64> = corrupted.iter().chain(c).copied().collect();
        self.image_head.matvec(&input)
    }

    /// Noise-free image for conditioning `c`.
    pub fn mean_image(&self, c: &[f64]) -> Vec<f64> {
        self.decoder.matvec(c)
    }

    pub fn sample_image(&self, c: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut img = self.mean_image(c);
        for v in &mut img {
            *v += self.explore_scale * rng.sample::<f64, _>(StandardNormal);
        }
        img
    }

    /// Per-position probabilities, row `j` for position `j`.
    pub fn text_probs(&self, c: &[f64]) -> Matrix {
        let logits = self.text_head.matvec(c);
        let mut probs = Matrix::from_vec(self.seq_len, self.vocab, logits).expect("text head shape");
        for j in 0..self.seq_len {
            let row = probs.row_mut(j);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        probs
    }

    /// Samples one symbol in `[1, vocab]` per position.
    pub fn sample_text(&self, c: &[f64], rng: &mut impl Rng) -> Vec<u32> {
        let probs = self.text_probs(c);
        (0..self.seq_len)
            .map(|j| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let row = probs.row(j);
                for (k, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as u32 + 1;
                    }
                }
                self.vocab as u32
            })
            .collect()
    }

    /// Symbol frequency vector of a sequence.
    pub fn histogram(&self, symbols: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.vocab];
        for &s in symbols {
            h[s as usize - 1] += 1.0 / symbols.len() as f64;
        }
        h
    }

    /// Expected symbol frequencies under conditioning `c`.
    pub fn expected_histogram(&self, c: &[f64]) -> Vec<f64> {
        let probs = self.text_probs(c);
        let mut h = vec![0.0; self.vocab];
        for j in 0..self.seq_len {
            axpy(1.0 / self.seq_len as f64, probs.row(j), &mut h);
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        checksum(&[&self.image_head, &self.decoder, &self.text_head])
    }
}

/// Fixed projections of image-analog and text-analog outputs into one
/// similarity space. Columns have unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSpaceProjector {
    pub image: Matrix,
    pub text: Matrix,
}

impl SharedSpaceProjector {
    pub fn new(shared_dim: usize, image_dim: usize, vocab: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_GENERATOR, 1);
        let mut random = |cols: usize| {
            let m = Matrix::from_fn(shared_dim, cols, |_, _| r.sample::<f64, _>(StandardNormal));
            Self::normalize_columns(m)
        };
        let image = random(image_dim);
        let text = random(vocab);
        SharedSpaceProjector { image, text }
    }

    pub fn from_parts(image: Matrix, text: Matrix) -> Self {
        SharedSpaceProjector {
            image: Self::normalize_columns(image),
            text: Self::normalize_columns(text),
        }
    }

    fn normalize_columns(mut m: Matrix) -> Matrix {
        for c in 0..m.cols() {
            let norm = (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for r in 0..m.rows() {
                    m.set(r, c, m.get(r, c) / norm);
                }
            }
        }
        m
    }

    pub fn project_image(&self, img: &[f64]) -> Vec<f64> {
        self.image.matvec(img)
    }

    pub fn project_text(&self, hist: &[f64]) -> Vec<f64> {
        self.text.matvec(hist)
    }

    pub fn checksum(&self) -> u64 {
        checksum(&[&self.image, &self.text])
    }
}

/// Hash of the exact bit patterns of a set of matrices.
pub fn checksum(parts: &[&Matrix]) -> u64 {
    let mut h = DefaultHasher::new();
    for m in parts {
        h.write_usize(m.rows());
        h.write_usize(m.cols());
        for v in m.as_slice() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Gradient for one looked-up code vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGradient {
    pub level: usize,
    pub code: usize,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    /// Reward weight times `base`.
    pub loss: f64,
    pub base: f64,
    pub grads: Vec<CodeGradient>,
}

/// Mean of the user's and the item's looked-up code vectors.
pub fn conditioning(stack: &CodebookStack, user: &TokenSequence, item: &TokenSequence) -> Result<Vec<f64>> {
    let mut c = vec![0.0; stack.dim()];
    let codes: Vec<&[f64]> = stack.lookup(user)?.into_iter().chain(stack.lookup(item)?).collect();
    let scale = 1.0 / codes.len() as f64;
    for v in codes {
        axpy(scale, v, &mut c);
    }
    Ok(c)
}

/// Spreads a conditioning gradient over the looked-up codes.
fn spread(stack: &CodebookStack, user: &TokenSequence, item: &TokenSequence, d_cond: &[f64]) -> Vec<CodeGradient> {
    let scale = 1.0 / (user.len() + item.len()) as f64;
    user.as_slice()
        .iter()
        .enumerate()
        .chain(item.as_slice().iter().enumerate())
        .map(|(level, &tok)| CodeGradient {
            level,
            code: tok as usize - 1,
            grad: d_cond.iter().map(|g| g * scale).collect(),
        })
        .inspect(|g| debug_assert!(g.level < stack.levels()))
        .collect()
}

/// `weight · ‖ε − ε̂‖²` where the target is corrupted by `noise_scale · ε`
/// and `ε̂` is the image head's prediction under the looked-up visual codes.
pub fn weighted_image_loss(
    generator: &ToyGenerator,
    stack: &CodebookStack,
    user: &TokenSequence,
    item: &TokenSequence,
    target: &[f64],
    noise: &[f64],
    weight: f64,
) -> Result<WeightedLoss> {
    let n = generator.image_dim();
    if target.len() != n || noise.len() != n {
        return Err(Error::Shape(format!("image target/noise must have {n} entries")));
    }
    if stack.dim() != generator.image_head.cols() - n {
        return Err(Error::Shape("visual codebook width does not match the image head".into()));
    }
    let c = conditioning(stack, user, item)?;
    let corrupted: Vec<f64> = target.iter().zip(noise).map(|(x, e)| x + generator.noise_scale * e).collect();
    let predicted = generator.predict_noise(&corrupted, &c);
    let diff: Vec<f64> = noise.iter().zip(&predicted).map(|(e, p)| e - p).collect();
    let base: f64 = diff.iter().map(|v| v * v).sum();
    // ∂/∂c of w‖ε − A_x x_t − A_c c‖² = −2w A_cᵀ (ε − ε̂)
    let mut d_cond = vec![0.0; c.len()];
    for (r, dv) in diff.iter().enumerate() {
        let row = &generator.image_head.row(r)[n..];
        axpy(-2.0 * weight * dv, row, &mut d_cond);
    }
    Ok(WeightedLoss {
        loss: weight * base,
        base,
        grads: spread(stack, user, item, &d_cond),
    })
}

/// `−weight · Σ_j log p(y_j)` under the text head with the looked-up
/// textual codes. Symbols are in `[1, vocab]`.
pub fn weighted_text_loss(
    generator: &ToyGenerator,
    stack: &CodebookStack,
    user: &TokenSequence,
    item: &TokenSequence,
    reference: &[u32],
    weight: f64,
) -> Result<WeightedLoss> {
    if reference.len() != generator.seq_len {
        return Err(Error::Shape(format!(
            "reference has {} symbols, expected {}",
            reference.len(),
            generator.seq_len
        )));
    }
    if let Some(&bad) = reference.iter().find(|&&s| s == 0 || s as usize > generator.vocab) {
        return Err(Error::Invalid(format!("symbol {bad} outside [1, {}]", generator.vocab)));
    }
    if stack.dim() != generator.text_head.cols() {
        return Err(Error::Shape("textual codebook width does not match the text head".into()));
    }
    let c = conditioning(stack, user, item)?;
    let probs = generator.text_probs(&c);
    let mut base = 0.0;
    let mut d_cond = vec![0.0; c.len()];
    let v = generator.vocab;
    for (j, &y) in reference.iter().enumerate() {
        let y = y as usize - 1;
        base -= probs.get(j, y).ln();
        for k in 0..v {
            let d_logit = probs.get(j, k) - if k == y { 1.0 } else { 0.0 };
            if d_logit != 0.0 {
                axpy(weight * d_logit, generator.text_head.row(j * v + k), &mut d_cond);
            }
        }
    }
    Ok(WeightedLoss {
        loss: weight * base,
        base,
        grads: spread(stack, user, item, &d_cond),
    })
}

/// Everything stage two reads or updates.
#[derive(Debug, Clone)]
pub struct Stage2State {
    pub config: StageTwoConfig,
    pub seed: u64,
    pub visual: CodebookStack,
    pub textual: CodebookStack,
    pub user_tokens: [Vec<TokenSequence>; 2],
    pub item_tokens: [Vec<TokenSequence>; 2],
    pub generator: ToyGenerator,
    pub projector: SharedSpaceProjector,
    /// Per-user train items, most recent first, capped.
    pub histories: Vec<Vec<u32>>,
    /// Projected history images and texts, fixed at construction.
    pub history_images: Vec<Vec<Vec<f64>>>,
    pub history_texts: Vec<Vec<Vec<f64>>>,
    pub train_users: Vec<u32>,
    pub heldout_users: Vec<u32>,
    pub adam_v: AdamState,
    pub adam_t: AdamState,
    pub step: u64,
    /// Replaces computed rewards when set.
    pub pinned_rewards: Option<RewardBundle>,
}

fn modal_slot(m: Modality) -> usize {
    match m {
        Modality::Visual => 0,
        Modality::Textual => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTrace {
    pub step: u64,
    pub r_p_v: f64,
    pub r_p_t: f64,
    pub r_crs: f64,
    pub loss_v: f64,
    pub loss_t: f64,
}

impl Stage2State {
    /// Builds the state from stage-one artifacts. Tokens stay fixed; only
    /// the code vectors they point to move.
    pub fn new(
        config: &StageTwoConfig,
        seed: u64,
        codebooks: [CodebookStack; 2],
        user_tokens: [Vec<TokenSequence>; 2],
        item_tokens: [Vec<TokenSequence>; 2],
        train: &InteractionSet,
    ) -> Result<Self> {
        let [visual, textual] = codebooks;
        let user_count = user_tokens[0].len();
        if user_tokens[1].len() != user_count || item_tokens[0].len() != item_tokens[1].len() {
            return Err(Error::Shape("token tables differ in length across modalities".into()));
        }
        let mut by_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); user_count];
        for e in &train.edges {
            if (e.user as usize) < user_count && (e.item as usize) < item_tokens[0].len() {
                by_user[e.user as usize].push((e.timestamp, e.item));
            }
        }
        let histories: Vec<Vec<u32>> = by_user
            .into_iter()
            .map(|mut h| {
                h.sort_by(|a, b| b.cmp(a));
                h.into_iter().take(config.history_cap).map(|(_, i)| i).collect()
            })
            .collect();
        let mut active: Vec<u32> = (0..user_count as u32).filter(|&u| !histories[u as usize].is_empty()).collect();
        if active.len() < 2 {
            return Err(Error::Invalid("stage two needs at least two users with train items".into()));
        }
        active.shuffle(&mut rng::stream(seed, rng::STREAM_STAGE2_SAMPLES, u64::MAX));
        let held = ((active.len() as f64 * config.heldout_fraction).round() as usize).clamp(1, active.len() - 1);
        let mut heldout_users = active[..held].to_vec();
        let mut train_users = active[held..].to_vec();
        heldout_users.sort_unstable();
        train_users.sort_unstable();

        // Generator gain from the typical conditioning magnitude.
        let rms = |stack: &CodebookStack, m: usize| -> Result<f64> {
            let mut acc = 0.0;
            let mut n = 0usize;
            for &u in &train_users {
                for &i in &histories[u as usize] {
                    let c = conditioning(stack, &user_tokens[m][u as usize], &item_tokens[m][i as usize])?;
                    acc += c.iter().map(|v| v * v).sum::<f64>();
                    n += 1;
                }
            }
            Ok((acc / n.max(1) as f64).sqrt())
        };
        let (rv, rt) = (rms(&visual, 0)?, rms(&textual, 1)?);
        let gain = if rv > 0.0 && rt > 0.0 { 1.0 / (0.5 * (rv + rt)) } else { 1.0 };
        let generator = ToyGenerator::new(visual.dim(), textual.dim(), config, gain, seed);
        let projector = SharedSpaceProjector::new(config.shared_dim, config.image_dim, config.vocab, seed);

        Stage2State {
            config: config.clone(),
            seed,
            adam_v: AdamState::new(visual.parameter_count()),
            adam_t: AdamState::new(textual.parameter_count()),
            visual,
            textual,
            user_tokens,
            item_tokens,
            generator,
            projector,
            histories,
            history_images: Vec::new(),
            history_texts: Vec::new(),
            train_users,
            heldout_users,
            step: 0,
            pinned_rewards: None,
        }
        .with_histories_from(None)
    }

    /// Recomputes the frozen history images and texts, from `reference`
    /// codebooks when given, else from the current ones.
    pub fn with_histories_from(mut self, reference: Option<[&CodebookStack; 2]>) -> Result<Self> {
        let [visual, textual] = reference.unwrap_or([&self.visual, &self.textual]);
        let item_mean = |stack: &CodebookStack, t: &TokenSequence| -> Result<Vec<f64>> {
            let mut c = vec![0.0; stack.dim()];
            for v in stack.lookup(t)? {
                axpy(1.0 / t.len() as f64, v, &mut c);
            }
            Ok(c)
        };
        let mut images = Vec::with_capacity(self.histories.len());
        let mut texts = Vec::with_capacity(self.histories.len());
        for h in &self.histories {
            let mut imgs = Vec::with_capacity(h.len());
            let mut txts = Vec::with_capacity(h.len());
            for &i in h {
                let cv = item_mean(visual, &self.item_tokens[0][i as usize])?;
                let ct = item_mean(textual, &self.item_tokens[1][i as usize])?;
                imgs.push(self.projector.project_image(&self.generator.mean_image(&cv)));
                txts.push(self.projector.project_text(&self.generator.expected_histogram(&ct)));
            }
            images.push(imgs);
            texts.push(txts);
        }
        self.history_images = images;
        self.history_texts = texts;
        Ok(self)
    }

    /// Stage-two state from a stage-one model: tokens come from
    /// re-quantizing the propagated embeddings.
    pub fn from_stage1(model: &Stage1Model, config: &StageTwoConfig, seed: u64) -> Result<Self> {
        let (uv, iv) = model.quantize_all(Modality::Visual)?;
        let (ut, it) = model.quantize_all(Modality::Textual)?;
        let toks = |r: Vec<crate::quantizer::QuantizationResult>| r.into_iter().map(|q| q.tokens).collect::<Vec<_>>();
        Stage2State::new(
            config,
            seed,
            [model.visual.codebook.clone(), model.textual.codebook.clone()],
            [toks(uv), toks(ut)],
            [toks(iv), toks(it)],
            &model.train,
        )
    }

    pub fn codebook(&self, m: Modality) -> &CodebookStack {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    fn tokens(&self, m: Modality, user: u32, item: u32) -> (&TokenSequence, &TokenSequence) {
        let s = modal_slot(m);
        (&self.user_tokens[s][user as usize], &self.item_tokens[s][item as usize])
    }

    /// Rewards for one generated pair, already projected.
    pub fn rewards(&self, user: u32, image: &[f64], text: &[f64]) -> Result<RewardBundle> {
        let u = user as usize;
        Ok(RewardBundle {
            r_crs: clip_sim(image, text),
            r_p_v: personalization_reward(image, &self.history_images[u])?,
            r_p_t: personalization_reward(text, &self.history_texts[u])?,
            gamma: self.config.gamma,
        })
    }

    /// Deterministic reward for a (user, item) pair: noise-free image and
    /// expected text histogram.
    pub fn expected_reward(&self, user: u32, item: u32) -> Result<f64> {
        let (uv, iv) = self.tokens(Modality::Visual, user, item);
        let (ut, it) = self.tokens(Modality::Textual, user, item);
        let cv = conditioning(&self.visual, uv, iv)?;
        let ct = conditioning(&self.textual, ut, it)?;
        let img = self.projector.project_image(&self.generator.mean_image(&cv));
        let txt = self.projector.project_text(&self.generator.expected_histogram(&ct));
        let r = self.rewards(user, &img, &txt)?;
        Ok(0.5 * (r.r_p_v + r.r_p_t) + r.gamma * r.r_crs)
    }

    /// Mean of `(R_p^v + R_p^t)/2 + γ·R_crs` over held-out users, each paired
    /// with every item in their history.
    pub fn heldout_reward(&self) -> Result<f64> {
        let per_user = par::map_range(self.heldout_users.len(), |k| -> Result<f64> {
            let u = self.heldout_users[k];
            let h = &self.histories[u as usize];
            let mut acc = 0.0;
            for &i in h {
                acc += self.expected_reward(u, i)?;
            }
            Ok(acc / h.len() as f64)
        });
        let vals = per_user.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_users.len().div_ceil(self.config.batch_size).max(1)
    }

    /// One on-policy step: generate, score (stop-gradient), weight the
    /// losses, Adam on the code vectors.
    pub fn train_step(&mut self, lr: f64) -> Result<StepTrace> {
        let batch = self.config.batch_size;
        let step = self.step;
        let mut pick = rng::stream(self.seed, rng::STREAM_STAGE2_SAMPLES, step);
        let pairs: Vec<(u32, u32)> = (0..batch)
            .map(|_| {
                let u = self.train_users[pick.random_range(0..self.train_users.len())];
                let h = &self.histories[u as usize];
                (u, h[pick.random_range(0..h.len())])
            })
            .collect();

        let per_sample = par::map_range(pairs.len(), |k| -> Result<(RewardBundle, WeightedLoss, WeightedLoss)> {
            let (u, i) = pairs[k];
            let mut r = rng::stream(self.seed, rng::STREAM_STAGE2_NOISE, step * batch as u64 + k as u64);
            let (uv, iv) = self.tokens(Modality::Visual, u, i);
            let (ut, it) = self.tokens(Modality::Textual, u, i);
            let cv = conditioning(&self.visual, uv, iv)?;
            let ct = conditioning(&self.textual, ut, it)?;
            let image = self.generator.sample_image(&cv, &mut r);
            let text = self.generator.sample_text(&ct, &mut r);
            let rewards = match self.pinned_rewards {
                Some(p) => p,
                None => self.rewards(
                    u,
                    &self.projector.project_image(&image),
                    &self.projector.project_text(&self.generator.histogram(&text)),
                )?,
            };
            let noise: Vec<f64> = (0..image.len()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let lv = weighted_image_loss(&self.generator, &self.visual, uv, iv, &image, &noise, rewards.image_weight())?;
            let lt = weighted_text_loss(&self.generator, &self.textual, ut, it, &text, rewards.text_weight())?;
            Ok((rewards, lv, lt))
        });
        let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;

        let n = per_sample.len() as f64;
        let mut trace = StepTrace {
            step,
            ..StepTrace::default()
        };
        let mut grad_v: Vec<Matrix> = (0..self.visual.levels()).map(|_| Matrix::zeros(self.visual.codes(), self.visual.dim())).collect();
        let mut grad_t: Vec<Matrix> = (0..self.textual.levels()).map(|_| Matrix::zeros(self.textual.codes(), self.textual.dim())).collect();
        for (rw, lv, lt) in &per_sample {
            trace.r_p_v += rw.r_p_v / n;
            trace.r_p_t += rw.r_p_t / n;
            trace.r_crs += rw.r_crs / n;
            trace.loss_v += lv.loss / n;
            trace.loss_t += lt.loss / n;
            for g in &lv.grads {
                axpy(1.0 / n, &g.grad, grad_v[g.level].row_mut(g.code));
            }
            for g in &lt.grads {
                axpy(1.0 / n, &g.grad, grad_t[g.level].row_mut(g.code));
            }
        }
        let flat = |g: &[Matrix]| g.iter().flat_map(|m| m.as_slice().iter().copied()).collect::<Vec<f64>>();
        for (stack, adam, grads) in [(&mut self.visual, &mut self.adam_v, flat(&grad_v)), (&mut self.textual, &mut self.adam_t, flat(&grad_t))] {
            let mut params: Vec<f64> = stack.parameters().collect();
            match adam.step(&mut params, &grads, lr) {
                Ok(()) => stack.parameters_mut().zip(params).for_each(|(p, v)| *p = v),
                Err(e) => warn!("stage-two step {step}: update aborted: {e}"),
            }
        }
        self.step += 1;
        Ok(trace)
    }

    /// Checksums of everything stage two must leave untouched.
    pub fn frozen_checksums(&self) -> BTreeMap<&'static str, u64> {
        let mut h = DefaultHasher::new();
        for seq in self.user_tokens.iter().chain(&self.item_tokens).flatten() {
            h.write_usize(seq.len());
            for &t in seq.as_slice() {
                h.write_u32(t);
            }
        }
        BTreeMap::from([
            ("generator", self.generator.checksum()),
            ("projector", self.projector.checksum()),
            ("tokens", h.finish()),
        ])
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub steps: Vec<StepTrace>,
    /// Held-out reward before training (index 0) and after each epoch.
    pub heldout: Vec<f64>,
}

pub const TRACE_HEADER: &str = "step\tR_p_v\tR_p_t\tR_crs\tweighted_loss_v\tweighted_loss_t\n";

/// Runs `config.epochs` epochs. With `out`, writes `rewards.tsv`,
/// `epochs.tsv` and the updated codebooks.
pub fn train_stage2(state: &mut Stage2State, out: Option<&Path>) -> Result<Stage2Report> {
    let lr = state.config.lr;
    let mut report = Stage2Report {
        steps: Vec::new(),
        heldout: vec![state.heldout_reward()?],
    };
    info!("stage two epoch 0: held-out reward {:.5}", report.heldout[0]);
    for epoch in 1..=state.config.epochs {
        for _ in 0..state.steps_per_epoch() {
            report.steps.push(state.train_step(lr)?);
        }
        let r = state.heldout_reward()?;
        info!("stage two epoch {epoch}: held-out reward {r:.5}");
        report.heldout.push(r);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut trace = String::from(TRACE_HEADER);
        for s in &report.steps {
            trace.push_str(&format!(
                "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\n",
                s.step, s.r_p_v, s.r_p_t, s.r_crs, s.loss_v, s.loss_t
            ));
        }
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("rewards.tsv", trace)?;
        let mut epochs = String::from("epoch\theldout_reward\n");
        for (e, r) in report.heldout.iter().enumerate() {
            epochs.push_str(&format!("{e}\t{r:.8}\n"));
        }
        write("epochs.tsv", epochs)?;
        write(
            "frozen_checksums.txt",
            state
                .frozen_checksums()
                .iter()
                .map(|(k, v)| format!("{k}={v:016x}\n"))
                .collect(),
        )?;
        state.visual.save(&dir.join("codebook_v"), 0.0, 1.0, state.step)?;
        state.textual.save(&dir.join("codebook_t"), 0.0, 1.0, state.step)?;
    }
    Ok(report)
}
