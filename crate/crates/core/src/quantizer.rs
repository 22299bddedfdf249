//! Multi-level residual quantization.
//!
//! Level `l` picks the code nearest (squared Euclidean, lowest index on ties)
//! to the running residual `r^l`, then subtracts it: `r^{l+1} = r^l - e_{c^l}`.
//! The reconstruction is the sum of the selected codes. Codes are learned
//! only through exponential moving averages of the residuals assigned to
//! them; encoders see the straight-through gradient plus the commitment term.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::fmat;
use crate::linalg::{axpy, sq_dist, Matrix};
use crate::par;
use crate::rng;

/// Code indices `(c^1, …, c^L)`, stored one-based (`1..=K`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(indices: Vec<u32>, codes: usize) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&c| c == 0 || c as usize > codes) {
            return Err(Error::Invalid(format!("token {bad} outside [1, {codes}]")));
        }
        Ok(TokenSequence(indices))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Zero-based code index at `level`.
    pub fn code(&self, level: usize) -> usize {
        self.0[level] as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub tokens: TokenSequence,
    /// `r^1 = z` through `r^{L+1}`.
    pub residuals: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
}

impl QuantizationResult {
    pub fn input(&self) -> &[f64] {
        &self.residuals[0]
    }

    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("at least one residual")
    }
}

/// One EMA observation: `residual` was assigned to `code` at `level`.
#[derive(Debug, Clone, Copy)]
pub struct Assignment<'a> {
    pub level: usize,
    pub code: usize,
    pub residual: &'a [f64],
}

pub fn assignments(results: &[QuantizationResult]) -> Vec<Assignment<'_>> {
    let mut out = Vec::new();
    for r in results {
        for level in 0..r.tokens.len() {
            out.push(Assignment {
                level,
                code: r.tokens.code(level),
                residual: &r.residuals[level],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    codes: usize,
    dim: usize,
    /// One `K x d` matrix per level.
    levels: Vec<Matrix>,
    ema_count: Vec<Vec<f64>>,
    ema_sum: Vec<Matrix>,
    /// Consecutive EMA steps without an assignment, per code.
    idle: Vec<Vec<u32>>,
    pub epsilon: f64,
}

pub const DEFAULT_EMA_EPSILON: f64 = 1e-5;

impl CodebookStack {
    /// Builds a stack from explicit code matrices with EMA statistics `(N=1, m=e)`.
    pub fn from_levels(levels: Vec<Matrix>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Invalid("a codebook stack needs at least one level".into()))?;
        let (codes, dim) = (first.rows(), first.cols());
        if codes == 0 || dim == 0 {
            return Err(Error::Invalid("codebooks must be non-empty".into()));
        }
        if levels.iter().any(|l| l.rows() != codes || l.cols() != dim) {
            return Err(Error::Shape("every level must be K x d with the same K and d".into()));
        }
        if levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        let n = levels.len();
        Ok(CodebookStack {
            codes,
            dim,
            ema_count: vec![vec![1.0; codes]; n],
            ema_sum: levels.clone(),
            idle: vec![vec![0; codes]; n],
            levels,
            epsilon: DEFAULT_EMA_EPSILON,
        })
    }

    /// Greedy level-by-level initialization: level `l` takes `K` vectors
    /// sampled from the level-`l` residuals of `batch`, which are then
    /// quantized to produce the next level's residuals.
    pub fn init_from_batch(batch: &[&[f64]], levels: usize, codes: usize, seed: u64) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Invalid("cannot initialize codebooks from an empty batch".into()));
        }
        if levels == 0 || codes == 0 {
            return Err(Error::Invalid("levels and codes must be positive".into()));
        }
        let dim = batch[0].len();
        let mut residuals: Vec<Vec<f64>> = batch.iter().map(|v| v.to_vec()).collect();
        let mut books = Vec::with_capacity(levels);
        for level in 0..levels {
            let mut rng = rng::stream(seed, rng::STREAM_CODEBOOK_INIT, level as u64);
            let n = residuals.len();
            let mut picks: Vec<usize> = index::sample(&mut rng, n, codes.min(n)).into_vec();
            while picks.len() < codes {
                picks.push(rng.random_range(0..n));
            }
            let book = Matrix::from_fn(codes, dim, |k, c| residuals[picks[k]][c]);
            for r in residuals.iter_mut() {
                let k = nearest(&book, r);
                axpy(-1.0, book.row(k), r);
            }
            books.push(book);
        }
        Self::from_levels(books)
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self, l: usize) -> &Matrix {
        &self.levels[l]
    }

    pub fn code_vector(&self, level: usize, code: usize) -> &[f64] {
        self.levels[level].row(code)
    }

    pub fn ema_count(&self, level: usize, code: usize) -> f64 {
        self.ema_count[level][code]
    }

    pub fn ema_sum(&self, level: usize, code: usize) -> &[f64] {
        self.ema_sum[level].row(code)
    }

    pub fn idle_steps(&self, level: usize, code: usize) -> u32 {
        self.idle[level][code]
    }

    /// All code vectors, flattened level-major. Stage-two training updates
    /// these directly.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.levels.iter_mut().flat_map(|m| m.as_mut_slice().iter_mut())
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.iter().flat_map(|m| m.as_slice().iter().copied())
    }

    pub fn parameter_count(&self) -> usize {
        self.levels.len() * self.codes * self.dim
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizationResult> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("input has {} dims, codebook {}", z.len(), self.dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantizer input".into()));
        }
        let mut residuals = Vec::with_capacity(self.levels() + 1);
        let mut tokens = Vec::with_capacity(self.levels());
        let mut recon = vec![0.0; self.dim];
        let mut r = z.to_vec();
        for book in &self.levels {
            let k = nearest(book, &r);
            let code = book.row(k);
            let next: Vec<f64> = r.iter().zip(code).map(|(a, b)| a - b).collect();
            axpy(1.0, code, &mut recon);
            tokens.push(k as u32 + 1);
            residuals.push(std::mem::replace(&mut r, next));
        }
        residuals.push(r);
        Ok(QuantizationResult {
            tokens: TokenSequence(tokens),
            residuals,
            reconstruction: recon,
        })
    }

    /// Quantizes every row of `m`.
    pub fn quantize_rows(&self, m: &Matrix) -> Result<Vec<QuantizationResult>> {
        par::map_range(m.rows(), |r| self.quantize(m.row(r)))
            .into_iter()
            .collect()
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.levels() {
            return Err(Error::Invalid(format!(
                "{} tokens for a {}-level codebook",
                tokens.len(),
                self.levels()
            )));
        }
        if let Some(bad) = tokens.0.iter().find(|&&c| c == 0 || c as usize > self.codes) {
            return Err(Error::Invalid(format!("token {bad} outside [1, {}]", self.codes)));
        }
        Ok(())
    }

    /// Sum of the looked-up codes.
    pub fn reconstruct(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.reconstruct_prefix(tokens, self.levels())
    }

    /// Sum of the first `depth` looked-up codes.
    pub fn reconstruct_prefix(&self, tokens: &TokenSequence, depth: usize) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut out = vec![0.0; self.dim];
        for l in 0..depth.min(self.levels()) {
            axpy(1.0, self.code_vector(l, tokens.code(l)), &mut out);
        }
        Ok(out)
    }

    /// The looked-up code vectors, one per level.
    pub fn lookup(&self, tokens: &TokenSequence) -> Result<Vec<&[f64]>> {
        self.check_tokens(tokens)?;
        Ok((0..self.levels())
            .map(|l| self.code_vector(l, tokens.code(l)))
            .collect())
    }

    /// Moving-average update. For each code with `n` assignments summing to
    /// `s`: `N ← λN + (1-λ)n`, `m ← λm + (1-λ)s`, and, when `n > 0`,
    /// `e ← m / max(N, ε)`. Codes without assignments keep `e` bit-for-bit.
    /// `λ = 1` freezes the statistics.
    pub fn ema_update(&mut self, batch: &[Assignment<'_>], decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        let levels = self.levels();
        let mut counts = vec![vec![0usize; self.codes]; levels];
        let mut sums: Vec<Matrix> = (0..levels).map(|_| Matrix::zeros(self.codes, self.dim)).collect();
        for a in batch {
            if a.level >= levels || a.code >= self.codes || a.residual.len() != self.dim {
                return Err(Error::Shape(format!(
                    "assignment (level {}, code {}, {} dims) does not fit the stack",
                    a.level,
                    a.code,
                    a.residual.len()
                )));
            }
            counts[a.level][a.code] += 1;
            axpy(1.0, a.residual, sums[a.level].row_mut(a.code));
        }
        for l in 0..levels {
            for k in 0..self.codes {
                if counts[l][k] > 0 {
                    self.idle[l][k] = 0;
                } else {
                    self.idle[l][k] = self.idle[l][k].saturating_add(1);
                }
            }
        }
        if decay >= 1.0 {
            return Ok(());
        }
        let keep = 1.0 - decay;
        for l in 0..levels {
            for k in 0..self.codes {
                let n = &mut self.ema_count[l][k];
                *n = decay * *n + keep * counts[l][k] as f64;
                let denom = n.max(self.epsilon);
                let m = self.ema_sum[l].row_mut(k);
                for (mv, sv) in m.iter_mut().zip(sums[l].row(k)) {
                    *mv = decay * *mv + keep * sv;
                }
                if counts[l][k] > 0 {
                    let e = self.levels[l].row_mut(k);
                    for (ev, mv) in e.iter_mut().zip(self.ema_sum[l].row(k)) {
                        *ev = mv / denom;
                    }
                }
            }
        }
        Ok(())
    }

    /// Re-seeds every code idle for at least `window` steps to a residual
    /// drawn uniformly from `batch` at the same level, resetting its EMA
    /// statistics to `(N=1, m=e)`. `window == 0` disables resets.
    /// Returns the `(level, code)` pairs that were reset.
    pub fn reset_dead_codes(
        &mut self,
        batch: &[QuantizationResult],
        window: u32,
        seed: u64,
    ) -> Vec<(usize, usize)> {
        let mut reset = Vec::new();
        if window == 0 || batch.is_empty() {
            return reset;
        }
        let mut rng = rng::stream(seed, rng::STREAM_DEAD_CODES, 0);
        for l in 0..self.levels() {
            for k in 0..self.codes {
                if self.idle[l][k] < window {
                    continue;
                }
                let pick = &batch[rng.random_range(0..batch.len())].residuals[l];
                self.levels[l].row_mut(k).copy_from_slice(pick);
                self.ema_sum[l].row_mut(k).copy_from_slice(pick);
                self.ema_count[l][k] = 1.0;
                self.idle[l][k] = 0;
                reset.push((l, k));
            }
        }
        reset
    }

    /// Fraction of codes (all levels) used by `results`.
    pub fn utilization(&self, results: &[QuantizationResult]) -> f64 {
        let mut used = vec![vec![false; self.codes]; self.levels()];
        for r in results {
            for l in 0..self.levels() {
                used[l][r.tokens.code(l)] = true;
            }
        }
        let n = used.iter().flatten().filter(|&&u| u).count();
        n as f64 / (self.levels() * self.codes) as f64
    }

    /// Writes `manifest.txt`, one FMAT per level and the EMA statistics.
    pub fn save(&self, dir: &Path, alpha: f64, decay: f64, step: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = format!(
            "levels={}\ncodes={}\ndim={}\ndecay={decay}\nalpha={alpha}\nstep={step}\n",
            self.levels(),
            self.codes,
            self.dim
        );
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let levels = self.levels();
        for l in 0..levels {
            fmat::write_matrix(&dir.join(format!("level_{}.fmat", l + 1)), &self.levels[l])?;
            fmat::write_matrix(&dir.join(format!("ema_sum_{}.fmat", l + 1)), &self.ema_sum[l])?;
        }
        let counts = Matrix::from_fn(levels, self.codes, |l, k| self.ema_count[l][k]);
        fmat::write_matrix(&dir.join("ema_count.fmat"), &counts)?;
        let idle = Matrix::from_fn(levels, self.codes, |l, k| f64::from(self.idle[l][k]));
        fmat::write_matrix(&dir.join("idle.fmat"), &idle)
    }

    pub fn load(dir: &Path) -> Result<(Self, CodebookManifest)> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = CodebookManifest::parse(&text)?;
        let mut levels = Vec::with_capacity(manifest.levels);
        let mut sums = Vec::with_capacity(manifest.levels);
        for l in 0..manifest.levels {
            levels.push(fmat::read_matrix(&dir.join(format!("level_{}.fmat", l + 1)))?);
            sums.push(fmat::read_matrix(&dir.join(format!("ema_sum_{}.fmat", l + 1)))?);
        }
        let mut stack = Self::from_levels(levels)?;
        if stack.codes != manifest.codes || stack.dim != manifest.dim {
            return Err(Error::Shape(format!(
                "codebook files are {}x{}, manifest says {}x{}",
                stack.codes, stack.dim, manifest.codes, manifest.dim
            )));
        }
        let counts = fmat::read_matrix(&dir.join("ema_count.fmat"))?;
        let idle = fmat::read_matrix(&dir.join("idle.fmat"))?;
        if counts.rows() != manifest.levels || counts.cols() != manifest.codes || !counts.same_shape(&idle) {
            return Err(Error::Shape("EMA statistics do not match the manifest".into()));
        }
        if sums.iter().any(|s| !s.same_shape(&stack.levels[0])) {
            return Err(Error::Shape("EMA sums do not match the manifest".into()));
        }
        stack.ema_sum = sums;
        stack.ema_count = (0..manifest.levels).map(|l| counts.row(l).to_vec()).collect();
        stack.idle = (0..manifest.levels)
            .map(|l| idle.row(l).iter().map(|&v| v as u32).collect())
            .collect();
        Ok((stack, manifest))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookManifest {
    pub levels: usize,
    pub codes: usize,
    pub dim: usize,
    pub decay: f64,
    pub alpha: f64,
    pub step: u64,
}

impl CodebookManifest {
    fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        fn get<T: std::str::FromStr>(kv: &std::collections::BTreeMap<String, String>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("codebook manifest lacks {k}")))?
                .parse()
                .map_err(|_| Error::Config(format!("codebook manifest: bad {k}")))
        }
        Ok(CodebookManifest {
            levels: get(&kv, "levels")?,
            codes: get(&kv, "codes")?,
            dim: get(&kv, "dim")?,
            decay: get(&kv, "decay")?,
            alpha: get(&kv, "alpha")?,
            step: get(&kv, "step")?,
        })
    }
}

/// Index of the row of `book` nearest to `r`; lowest index wins ties.
fn nearest(book: &Matrix, r: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..book.rows() {
        let d = sq_dist(r, book.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Value and encoder-side gradient of the residual-quantization loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RqLoss {
    /// `codebook + α · commitment`, averaged over the batch.
    pub loss: f64,
    /// Batch mean of `Σ_l ‖sg(r^l) - e_{c^l}‖²`. Reported only; codes learn by EMA.
    pub codebook: f64,
    /// Batch mean of `Σ_l ‖r^l - sg(e_{c^l})‖²`.
    pub commitment: f64,
    /// `∂loss/∂z` per batch entry: `(2α/B) Σ_l (r^l - e_{c^l})`.
    pub grads: Vec<Vec<f64>>,
}

pub fn rq_loss(stack: &CodebookStack, batch: &[&QuantizationResult], alpha: f64) -> Result<RqLoss> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("commitment weight {alpha} must be >= 0")));
    }
    if batch.is_empty() {
        return Ok(RqLoss {
            loss: 0.0,
            codebook: 0.0,
            commitment: 0.0,
            grads: Vec::new(),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for res in batch {
        let mut g = vec![0.0; stack.dim()];
        for l in 0..res.tokens.len() {
            let code = stack.code_vector(l, res.tokens.code(l));
            let r = &res.residuals[l];
            total += sq_dist(r, code);
            for ((gv, rv), cv) in g.iter_mut().zip(r).zip(code) {
                *gv += 2.0 * alpha * scale * (rv - cv);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("residual quantization loss".into()));
        }
        grads.push(g);
    }
    let mean = total * scale;
    Ok(RqLoss {
        loss: mean + alpha * mean,
        codebook: mean,
        commitment: mean,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(levels: &[&[&[f64]]]) -> CodebookStack {
        CodebookStack::from_levels(
            levels
                .iter()
                .map(|rows| Matrix::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn two_level_example() {
        let s = stack(&[&[&[0.0, 0.0], &[1.0, 1.0]], &[&[0.0, 0.0], &[-0.1, 0.1]]]);
        let q = s.quantize(&[0.9, 1.1]).unwrap();
        assert_eq!(q.tokens.as_slice(), &[2, 2]);
        assert!(close(&q.residuals[1], &[-0.1, 0.1], 1e-12));
        assert!(close(&q.residuals[2], &[0.0, 0.0], 1e-12));
        assert!(close(&q.reconstruction, &[0.9, 1.1], 1e-12));
        assert_eq!(s.reconstruct(&q.tokens).unwrap(), q.reconstruction);
    }

    #[test]
    fn exact_hit_leaves_zero_residual() {
        let s = stack(&[&[&[3.0, 1.0], &[-1.0, 0.0]], &[&[0.5, 0.5], &[0.01, 0.0]]]);
        let q = s.quantize(&[-1.0, 0.0]).unwrap();
        assert_eq!(q.residuals[1], vec![0.0, 0.0]);
        assert_eq!(q.tokens.as_slice(), &[2, 2]);
    }

    #[test]
    fn single_code_is_forced() {
        let s = stack(&[&[&[0.3, -0.7]]]);
        for z in [[5.0, 5.0], [-3.0, 0.1], [0.0, 0.0]] {
            let q = s.quantize(&z).unwrap();
            assert_eq!(q.tokens.as_slice(), &[1]);
            assert_eq!(q.reconstruction, vec![0.3, -0.7]);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = stack(&[&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]]);
        assert_eq!(s.quantize(&[0.0, 0.0]).unwrap().tokens.as_slice(), &[1]);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        let s = stack(&[&[&[0.0, 0.0]]]);
        assert!(s.quantize(&[f64::NAN, 0.0]).is_err());
        assert!(s.quantize(&[0.0]).is_err());
    }

    #[test]
    fn reconstruct_lookup_cases() {
        let zero = stack(&[&[&[0.0, 0.0], &[0.0, 0.0]], &[&[0.0, 0.0], &[0.0, 0.0]]]);
        let t = TokenSequence::new(vec![2, 1], 2).unwrap();
        assert_eq!(zero.reconstruct(&t).unwrap(), vec![0.0, 0.0]);
        let one = stack(&[&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]]);
        for k in 1..=3u32 {
            let t = TokenSequence::new(vec![k], 3).unwrap();
            assert_eq!(one.reconstruct(&t).unwrap(), one.code_vector(0, k as usize - 1));
        }
        assert!(one.reconstruct(&TokenSequence(vec![4])).is_err());
        assert!(one.reconstruct(&TokenSequence(vec![1, 1])).is_err());
        assert!(TokenSequence::new(vec![0], 3).is_err());
    }

    #[test]
    fn rq_loss_values() {
        let s = stack(&[&[&[0.0, 0.0], &[5.0, 5.0]]]);
        let q = s.quantize(&[1.0, 0.0]).unwrap();
        let l = rq_loss(&s, &[&q], 0.25).unwrap();
        assert!((l.loss - 1.25).abs() < 1e-15);
        assert_eq!(l.grads[0], vec![0.5, 0.0]);

        let hit = s.quantize(&[5.0, 5.0]).unwrap();
        assert_eq!(rq_loss(&s, &[&hit], 0.25).unwrap().loss, 0.0);
        assert!(rq_loss(&s, &[&hit], -1.0).is_err());
    }

    #[test]
    fn ema_single_vector_converges() {
        let mut s = stack(&[&[&[4.0, -3.0]]]);
        let v = [0.5, 0.25];
        for _ in 0..1000 {
            s.ema_update(&[Assignment { level: 0, code: 0, residual: &v }], 0.99).unwrap();
        }
        assert!(sq_dist(s.code_vector(0, 0), &v).sqrt() < 1e-3);
    }

    #[test]
    fn ema_without_assignments_keeps_codes_bitwise() {
        let mut s = stack(&[&[&[0.1, 0.7], &[1.0 / 3.0, -2.0]], &[&[0.3, 0.3], &[9.0, 1e-3]]]);
        let before = s.clone();
        for _ in 0..50 {
            s.ema_update(&[], 0.99).unwrap();
        }
        for l in 0..2 {
            assert_eq!(s.level(l), before.level(l));
        }
        assert_eq!(s.idle_steps(1, 1), 50);
    }

    #[test]
    fn ema_zero_decay_is_centroid() {
        let mut s = stack(&[&[&[0.0, 0.0], &[10.0, 10.0]]]);
        let a = [1.0, 2.0];
        let b = [3.0, -2.0];
        s.ema_update(
            &[
                Assignment { level: 0, code: 0, residual: &a },
                Assignment { level: 0, code: 0, residual: &b },
            ],
            0.0,
        )
        .unwrap();
        assert_eq!(s.code_vector(0, 0), &[2.0, 0.0]);
        assert_eq!(s.code_vector(0, 1), &[10.0, 10.0]);
    }

    #[test]
    fn ema_invariant_holds_for_updated_codes() {
        let mut s = stack(&[&[&[0.0, 0.0], &[1.0, 1.0]]]);
        let v = [0.2, 0.4];
        s.ema_update(&[Assignment { level: 0, code: 1, residual: &v }], 0.9).unwrap();
        let n = s.ema_count(0, 1);
        let m = s.ema_sum(0, 1).to_vec();
        assert!(close(s.code_vector(0, 1), &[m[0] / n, m[1] / n], 1e-15));
        assert!(s.ema_update(&[], 1.5).is_err());
    }

    #[test]
    fn dead_code_reset_only_touches_idle_codes() {
        let mut s = stack(&[&[&[0.0], &[100.0]]]);
        let inputs: Vec<QuantizationResult> =
            [0.1, -0.2, 0.3].iter().map(|&x| s.quantize(&[x]).unwrap()).collect();
        for _ in 0..3 {
            s.ema_update(&assignments(&inputs), 0.99).unwrap();
        }
        let no_reset = s.clone().reset_dead_codes(&inputs, 4, 1);
        assert!(no_reset.is_empty());
        let mut a = s.clone();
        let mut b = s.clone();
        let reset = a.reset_dead_codes(&inputs, 3, 1);
        assert_eq!(reset, vec![(0, 1)]);
        b.reset_dead_codes(&inputs, 3, 1);
        assert_eq!(a, b);
        assert!(inputs.iter().any(|q| q.residuals[0] == a.code_vector(0, 1)));
        assert_eq!(a.ema_count(0, 1), 1.0);
        assert_eq!(a.idle_steps(0, 1), 0);
    }

    #[test]
    fn reset_is_noop_when_all_codes_used() {
        let mut s = stack(&[&[&[0.0], &[1.0]]]);
        let inputs: Vec<QuantizationResult> =
            [0.0, 1.0].iter().map(|&x| s.quantize(&[x]).unwrap()).collect();
        for _ in 0..10 {
            s.ema_update(&assignments(&inputs), 0.99).unwrap();
            assert!(s.reset_dead_codes(&inputs, 2, 5).is_empty());
        }
    }

    #[test]
    fn init_from_batch_picks_batch_vectors() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let s = CodebookStack::init_from_batch(&refs, 2, 4, 9).unwrap();
        assert_eq!((s.levels(), s.codes(), s.dim()), (2, 4, 2));
        for k in 0..4 {
            assert!(data.iter().any(|d| d.as_slice() == s.code_vector(0, k)));
        }
        assert_eq!(s, CodebookStack::init_from_batch(&refs, 2, 4, 9).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack(&[&[&[0.5, 0.25], &[1.0, -1.0]], &[&[0.125, 0.0], &[2.0, 4.0]]]);
        s.save(dir.path(), 0.25, 0.99, 17).unwrap();
        let (back, manifest) = CodebookStack::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!((manifest.levels, manifest.codes, manifest.dim, manifest.step), (2, 2, 2, 17));
        assert_eq!(manifest.alpha, 0.25);
    }
}
