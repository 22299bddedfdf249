use preftok::config::Config;
use preftok::data::Modality;
use preftok::linalg::Matrix;
use preftok::losses::{bpr_triple, cross_modal_triple};
use preftok::quantizer::{rq_loss, CodebookStack, TokenSequence};
use preftok::scorer::MlpScorer;
use preftok::stage1::Stage1Model;
use preftok::stage2::{weighted_image_loss, weighted_text_loss, CodeGradient, ToyGenerator};

use super::*;

pub struct GradCheck {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.err.is_finite() && self.err < self.tol
    }
}

const H: f64 = 1e-5;
pub const ISOLATED_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-3;

pub fn bpr_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = normal_vec(&mut r, 24);
    let f = |x: &[f64]| softplus_neg(dot(&x[..8], &x[8..16]) - dot(&x[..8], &x[16..]));
    let g = bpr_triple(&x[..8], &x[8..16], &x[16..]);
    let analytic: Vec<f64> = g.user.iter().chain(&g.pos).chain(&g.neg).copied().collect();
    GradCheck {
        name: "bpr",
        err: rel_err(&analytic, &central_diff(&x, H, f)),
        tol: ISOLATED_TOL,
    }
}

pub fn cross_modal_checks(seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let (dt, dv) = (5, 3);
    let scorer = MlpScorer::new(dt + dv, dt + dv, seed);
    let x = normal_vec(&mut r, dt + 2 * dv);
    let weight = 0.7;
    let loss = |x: &[f64], s: &MlpScorer| {
        let pos: Vec<f64> = x[..dt].iter().chain(&x[dt..dt + dv]).copied().collect();
        let neg: Vec<f64> = x[..dt].iter().chain(&x[dt + dv..]).copied().collect();
        weight * softplus_neg(s.score(&pos) - s.score(&neg))
    };
    let mut pg = vec![0.0; scorer.params().len()];
    let g = cross_modal_triple(&x[..dt], &x[dt..dt + dv], &x[dt + dv..], &scorer, weight, &mut pg);
    let inputs: Vec<f64> = g.text.iter().chain(&g.visual).chain(&g.visual_neg).copied().collect();
    let fd_inputs = central_diff(&x, H, |x| loss(x, &scorer));
    let fd_params = central_diff(scorer.params(), H, |p| {
        loss(&x, &MlpScorer::from_params(dt + dv, dt + dv, p.to_vec()).unwrap())
    });
    vec![
        GradCheck {
            name: "cross-modal inputs",
            err: rel_err(&inputs, &fd_inputs),
            tol: ISOLATED_TOL,
        },
        GradCheck {
            name: "cross-modal scorer",
            err: rel_err(&pg, &fd_params),
            tol: ISOLATED_TOL,
        },
    ]
}

pub fn commitment_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (levels, codes, d, batch) = (3, 4, 5, 4);
    let stack = CodebookStack::from_levels((0..levels).map(|_| normal_matrix(&mut r, codes, d, 1.0)).collect()).unwrap();
    let zs: Vec<Vec<f64>> = (0..batch).map(|_| normal_vec(&mut r, d)).collect();
    let qs: Vec<_> = zs.iter().map(|z| stack.quantize(z).unwrap()).collect();
    let refs: Vec<_> = qs.iter().collect();
    let alpha = 0.25;
    let rq = rq_loss(&stack, &refs, alpha).unwrap();
    let analytic: Vec<f64> = rq.grads.concat();
    let flat: Vec<f64> = zs.concat();
    let fd = central_diff(&flat, H, |x| {
        let mut total = 0.0;
        for (b, q) in qs.iter().enumerate() {
            let mut res = x[b * d..(b + 1) * d].to_vec();
            for l in 0..levels {
                let e = stack.code_vector(l, q.tokens.code(l));
                total += res.iter().zip(e).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
                for (rv, ev) in res.iter_mut().zip(e) {
                    *rv -= ev;
                }
            }
        }
        alpha * total / batch as f64
    });
    GradCheck {
        name: "commitment",
        err: rel_err(&analytic, &fd),
        tol: ISOLATED_TOL,
    }
}

fn dense_code_grad(stack: &CodebookStack, grads: &[CodeGradient]) -> Vec<f64> {
    let mut out = vec![0.0; stack.parameter_count()];
    let per_level = stack.codes() * stack.dim();
    for g in grads {
        let off = g.level * per_level + g.code * stack.dim();
        for (o, v) in out[off..off + stack.dim()].iter_mut().zip(&g.grad) {
            *o += v;
        }
    }
    out
}

fn stack_from_flat(levels: usize, codes: usize, d: usize, p: &[f64]) -> CodebookStack {
    CodebookStack::from_levels(
        (0..levels)
            .map(|l| Matrix::from_vec(codes, d, p[l * codes * d..(l + 1) * codes * d].to_vec()).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn weighted_loss_checks(seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let cfg = Config::profile("tiny").unwrap().stage2;
    let (levels, codes, d) = (2, 3, 8);
    let gen = ToyGenerator::new(d, d, &cfg, 0.5, seed);
    let stack = CodebookStack::from_levels((0..levels).map(|_| normal_matrix(&mut r, codes, d, 1.0)).collect()).unwrap();
    // user and item share the level-2 code so duplicate lookups accumulate
    let user = TokenSequence::new(vec![1, 3], codes).unwrap();
    let item = TokenSequence::new(vec![2, 3], codes).unwrap();
    let target = normal_vec(&mut r, cfg.image_dim);
    let noise = normal_vec(&mut r, cfg.image_dim);
    let weight = 0.7;
    let params: Vec<f64> = stack.parameters().collect();

    let img = weighted_image_loss(&gen, &stack, &user, &item, &target, &noise, weight).unwrap();
    let fd_img = central_diff(&params, H, |p| {
        let s = stack_from_flat(levels, codes, d, p);
        let mut c = vec![0.0; d];
        for v in s.lookup(&user).unwrap().into_iter().chain(s.lookup(&item).unwrap()) {
            for (cv, x) in c.iter_mut().zip(v) {
                *cv += x / 4.0;
            }
        }
        let xt: Vec<f64> = target.iter().zip(&noise).map(|(x, e)| x + cfg.noise_scale * e).collect();
        let input: Vec<f64> = xt.iter().chain(&c).copied().collect();
        let pred: Vec<f64> = (0..cfg.image_dim).map(|row| dot(gen.image_head.row(row), &input)).collect();
        weight * noise.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum::<f64>()
    });

    let reference: Vec<u32> = (0..cfg.seq_len as u32).map(|j| 1 + (j * 7) % cfg.vocab as u32).collect();
    let txt = weighted_text_loss(&gen, &stack, &user, &item, &reference, weight).unwrap();
    let fd_txt = central_diff(&params, H, |p| {
        let s = stack_from_flat(levels, codes, d, p);
        let mut c = vec![0.0; d];
        for v in s.lookup(&user).unwrap().into_iter().chain(s.lookup(&item).unwrap()) {
            for (cv, x) in c.iter_mut().zip(v) {
                *cv += x / 4.0;
            }
        }
        let mut nll = 0.0;
        for (j, &y) in reference.iter().enumerate() {
            let logits: Vec<f64> = (0..cfg.vocab).map(|k| dot(gen.text_head.row(j * cfg.vocab + k), &c)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            nll += lse - logits[y as usize - 1];
        }
        weight * nll
    });
    vec![
        GradCheck {
            name: "weighted image loss",
            err: rel_err(&dense_code_grad(&stack, &img.grads), &fd_img),
            tol: ISOLATED_TOL,
        },
        GradCheck {
            name: "weighted text loss",
            err: rel_err(&dense_code_grad(&stack, &txt.grads), &fd_txt),
            tol: ISOLATED_TOL,
        },
    ]
}

/// Gradient of the full stage-one objective with respect to every base
/// table, against differences of the frozen-token surrogate.
pub fn end_to_end_checks(seed: u64) -> Vec<GradCheck> {
    let ds = small_dataset(4, 5, 4, 4, seed);
    let cfg = small_config(4);
    let model = Stage1Model::new(&ds, &cfg).unwrap();
    let batch = model.sample_batch(0);
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let sur = Stage1Surrogate::new(&model, &batch);
    let nominal = sur.base_tables();
    let mut out = Vec::new();
    for (slot, m) in Modality::ALL.into_iter().enumerate() {
        for users in [true, false] {
            let table = if users { &nominal[slot].0 } else { &nominal[slot].1 };
            let fd = central_diff(table.as_slice(), H, |p| {
                let mut b = nominal.clone();
                let t = Matrix::from_vec(table.rows(), table.cols(), p.to_vec()).unwrap();
                if users {
                    b[slot].0 = t;
                } else {
                    b[slot].1 = t;
                }
                sur.value(&b)
            });
            let g = grads.modal(m);
            let analytic = if users { g.users.as_slice() } else { g.items.as_slice() };
            out.push(GradCheck {
                name: match (m, users) {
                    (Modality::Visual, true) => "end-to-end visual users",
                    (Modality::Visual, false) => "end-to-end visual items",
                    (Modality::Textual, true) => "end-to-end textual users",
                    (Modality::Textual, false) => "end-to-end textual items",
                },
                err: rel_err(analytic, &fd),
                tol: END_TO_END_TOL,
            });
        }
    }
    out
}

pub fn full_suite(seed: u64) -> Vec<GradCheck> {
    let mut all = vec![bpr_check(seed), commitment_check(seed)];
    all.extend(cross_modal_checks(seed));
    all.extend(weighted_loss_checks(seed));
    all.extend(end_to_end_checks(seed));
    all
}
