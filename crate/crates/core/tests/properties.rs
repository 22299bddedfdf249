mod common;

use common::oracle_tokens;
use preftok::config::Config;
use preftok::data::{temporal_split, Interaction, InteractionSet, SplitRatios};
use preftok::fmat::FeatureMatrix;
use preftok::gcn::{propagate, EmbeddingTable};
use preftok::linalg::{cosine, Matrix};
use preftok::losses::bpr_triple;
use preftok::quantizer::{assignments, CodebookStack, TokenSequence};
use preftok::sampling::TripleSampler;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// `(levels, z)` with `L ≤ 4`, `K ≤ 16`, `d ≤ 8`, and optionally a duplicated
/// row per level.
fn stack_and_input() -> impl Strategy<Value = (Vec<Matrix>, Vec<f64>)> {
    (1usize..=4, 1usize..=16, 1usize..=8, any::<bool>()).prop_flat_map(|(l, k, d, dup)| {
        (
            prop::collection::vec(matrix(k, d), l).prop_map(move |mut ms| {
                if dup && k > 1 {
                    for m in ms.iter_mut() {
                        let row = m.row(0).to_vec();
                        m.row_mut(k - 1).copy_from_slice(&row);
                    }
                }
                ms
            }),
            prop::collection::vec(-4.0f64..4.0, d),
        )
    })
}

fn edges(max_user: u32, max_item: u32, n: usize) -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((0..max_user, 0..max_item, -50i64..50), 1..n)
        .prop_map(|v| v.into_iter().map(|(user, item, timestamp)| Interaction { user, item, timestamp }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantizer_agrees_with_exhaustive_search((levels, z) in stack_and_input()) {
        let stack = CodebookStack::from_levels(levels.clone()).unwrap();
        let q = stack.quantize(&z).unwrap();
        let got: Vec<usize> = (0..levels.len()).map(|l| q.tokens.code(l)).collect();
        prop_assert_eq!(got, oracle_tokens(&levels, &z));
        for ((zv, h), r) in z.iter().zip(&q.reconstruction).zip(q.final_residual()) {
            prop_assert!((zv - (h + r)).abs() <= 1e-9);
        }
        prop_assert_eq!(stack.reconstruct(&q.tokens).unwrap(), q.reconstruction.clone());
    }

    #[test]
    fn prefix_reconstructions_telescope((levels, z) in stack_and_input()) {
        let stack = CodebookStack::from_levels(levels.clone()).unwrap();
        let q = stack.quantize(&z).unwrap();
        for depth in 0..=levels.len() {
            let partial = stack.reconstruct_prefix(&q.tokens, depth).unwrap();
            for ((zv, p), r) in z.iter().zip(&partial).zip(&q.residuals[depth]) {
                prop_assert!((zv - (p + r)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn ema_leaves_unassigned_codes_bitwise(
        (levels, z) in stack_and_input(),
        decay in 0.0f64..=1.0,
    ) {
        let mut stack = CodebookStack::from_levels(levels).unwrap();
        let q = stack.quantize(&z).unwrap();
        let before = stack.clone();
        stack.ema_update(&assignments(std::slice::from_ref(&q)), decay).unwrap();
        for l in 0..stack.levels() {
            for k in 0..stack.codes() {
                if q.tokens.code(l) != k {
                    let same = stack.code_vector(l, k).iter().zip(before.code_vector(l, k)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
            }
        }
    }

    #[test]
    fn prefix_groups_refine(
        seqs in prop::collection::vec(prop::collection::vec(1u32..=3, 3), 2..40),
        seed in any::<u64>(),
    ) {
        let toks: Vec<TokenSequence> = seqs.iter().map(|s| TokenSequence::new(s.clone(), 3).unwrap()).collect();
        let mut r = common::rng(seed);
        let vecs: Vec<Vec<f64>> = toks.iter().map(|_| common::normal_vec(&mut r, 4)).collect();
        let rows = preftok::analysis::prefix_similarity_table(&toks, &vecs).unwrap();
        prop_assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            prop_assert!(w[1].n_groups >= w[0].n_groups);
            prop_assert!(w[1].max_group <= w[0].max_group);
        }
        for row in &rows {
            prop_assert!(row.min_group <= row.max_group);
            if let Some(c) = row.avg_pairwise_cos {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            }
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(-1e3f64..1e3, 1..16),
        b in prop::collection::vec(-1e3f64..1e3, 1..16),
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        match (cosine(a, b), cosine(b, a)) {
            (Some(x), Some(y)) => {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
                prop_assert_eq!(x, y);
            }
            (None, None) => {}
            _ => prop_assert!(false, "asymmetric zero handling"),
        }
    }

    #[test]
    fn bpr_is_positive_and_balanced(
        u in prop::collection::vec(-5.0f64..5.0, 6),
        i in prop::collection::vec(-5.0f64..5.0, 6),
        j in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let g = bpr_triple(&u, &i, &j);
        prop_assert!(g.loss > 0.0 && g.loss.is_finite());
        for (p, n) in g.pos.iter().zip(&g.neg) {
            prop_assert_eq!(*p, -*n);
        }
        // swapping positive and negative mirrors the loss around the gap
        let s = bpr_triple(&u, &j, &i);
        let gap = common::dot(&u, &i) - common::dot(&u, &j);
        prop_assert!((g.loss - s.loss + gap).abs() < 1e-9);
    }

    #[test]
    fn config_text_round_trips(
        layers in 0usize..4,
        levels in 1usize..6,
        codes in 1usize..200,
        alpha in 0.0f64..2.0,
        decay in 0.0f64..=1.0,
        seed in any::<u64>(),
        gamma in 0.0f64..2.0,
        rq_users in any::<bool>(),
    ) {
        let mut cfg = Config::profile("tiny").unwrap();
        cfg.stage1.layers = layers;
        cfg.stage1.levels = levels;
        cfg.stage1.codes = codes;
        cfg.stage1.alpha = alpha;
        cfg.stage1.ema_decay = decay;
        cfg.stage1.seed = seed;
        cfg.stage1.rq_users = rq_users;
        cfg.stage2.gamma = gamma;
        prop_assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn fmat_round_trips(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let values: Vec<f32> = common::normal_vec(&mut r, rows * cols).into_iter().map(|v| v as f32).collect();
        let m = FeatureMatrix::new(rows, cols, values).unwrap();
        prop_assert_eq!(FeatureMatrix::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn temporal_split_partitions_in_time_order(raw in edges(20, 20, 200)) {
        let set = InteractionSet::from_edges(raw);
        prop_assume!(set.len() >= 3);
        let s = temporal_split(&set, SplitRatios::default()).unwrap();
        prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), set.len());
        prop_assert_eq!(s.train.len(), (0.8 * set.len() as f64 + 1e-9).floor() as usize);
        let key = |e: &Interaction| (e.timestamp, e.user, e.item);
        let all: Vec<_> = s.train.edges.iter().chain(&s.valid.edges).chain(&s.test.edges).map(key).collect();
        prop_assert!(all.windows(2).all(|w| w[0] <= w[1]));
        let mut a: Vec<_> = set.edges.iter().map(key).collect();
        a.sort();
        prop_assert_eq!(a, all);
    }

    #[test]
    fn deduplication_keeps_unique_pairs(raw in edges(5, 5, 60)) {
        let set = InteractionSet::from_edges(raw.clone());
        let mut pairs: Vec<_> = set.edges.iter().map(|e| (e.user, e.item)).collect();
        let n = pairs.len();
        pairs.sort();
        pairs.dedup();
        prop_assert_eq!(pairs.len(), n);
        for e in &set.edges {
            let earliest = raw.iter().filter(|x| (x.user, x.item) == (e.user, e.item)).map(|x| x.timestamp).min();
            prop_assert_eq!(Some(e.timestamp), earliest);
        }
    }

    #[test]
    fn sampled_negatives_are_never_positives(raw in edges(8, 12, 60), seed in any::<u64>()) {
        let set = InteractionSet::from_edges(raw);
        let sampler = TripleSampler::new(&set, 8, 12);
        for t in sampler.sample(32, seed, 0).triples {
            prop_assert!(sampler.is_positive(t.user as usize, t.pos));
            prop_assert!(!sampler.is_positive(t.user as usize, t.neg));
        }
    }

    #[test]
    fn propagation_is_linear(raw in edges(5, 6, 20), seed in any::<u64>(), layers in 0usize..4) {
        let set = InteractionSet::from_edges(raw);
        let f = FeatureMatrix::new(6, 3, vec![0.0; 18]).unwrap();
        let graph = preftok::data::build_modal_graph(&set, preftok::data::Modality::Visual, f, 5).unwrap();
        let mut r = common::rng(seed);
        let mut table = || EmbeddingTable::new(common::normal_matrix(&mut r, 5, 3, 1.0), common::normal_matrix(&mut r, 6, 3, 1.0)).unwrap();
        let (a, b) = (table(), table());
        let sum = EmbeddingTable::new(
            Matrix::from_fn(5, 3, |i, j| a.users.get(i, j) + 2.0 * b.users.get(i, j)),
            Matrix::from_fn(6, 3, |i, j| a.items.get(i, j) + 2.0 * b.items.get(i, j)),
        ).unwrap();
        let (pa, pb, ps) = (propagate(&graph, &a, layers).unwrap(), propagate(&graph, &b, layers).unwrap(), propagate(&graph, &sum, layers).unwrap());
        for (x, (y, z)) in ps.users.as_slice().iter().chain(ps.items.as_slice()).zip(
            pa.users.as_slice().iter().chain(pa.items.as_slice()).zip(pb.users.as_slice().iter().chain(pb.items.as_slice())),
        ) {
            prop_assert!((x - (y + 2.0 * z)).abs() < 1e-9);
        }
    }
}
