use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segqa::answerer::{answer_loss, slice_segment};
use segqa::autograd::Graph;
use segqa::encoder::{MultiHeadAttention, SelfEncoder};
use segqa::locator::Locator;
use segqa::params::ParamGroup;
use segqa::synthbench::{generate, SynthConfig};
use segqa::training::{generate_pseudo_label, PseudoLabelRule};
use segqa::{FeatureSequence, Matrix, Modality, Mode, Model, ModelConfig, ParamStore, ProposalSet, QaSample, Variant};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn small_cfg(pos: bool) -> ModelConfig {
    ModelConfig {
        d_video: 3,
        d_question: 3,
        d_model: 8,
        heads: 2,
        n_self_layers: 2,
        n_cross_layers: 1,
        anchor_scales: vec![1, 2, 3],
        fusion_rank: 3,
        num_answers: 4,
        dropout: 0.0,
        use_position_embedding: pos,
        max_video_len: 16,
        max_question_len: 8,
        ..Default::default()
    }
}

fn sample(cfg: &ModelConfig, lv: usize, lq: usize, rng: &mut ChaCha8Rng) -> QaSample {
    QaSample {
        video: FeatureSequence::new(random(lv, cfg.d_video, rng), Modality::Video).unwrap(),
        question: FeatureSequence::new(random(lq, cfg.d_question, rng), Modality::Question).unwrap(),
        candidates: None,
        answer_index: rng.random_range(0..cfg.num_answers),
        gt_segment: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), lq in 1usize..8, lk in 1usize..12, h in prop::sample::select(vec![1usize, 2, 4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, "a", ParamGroup::Encoder, 8, h, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(random(lq, 8, &mut rng).scale(3.0));
        let kv = g.constant(random(lk, 8, &mut rng).scale(3.0));
        let out = att.forward(&mut g, q, kv, kv, &mut Mode::eval()).unwrap();
        prop_assert_eq!(out.weights.len(), h);
        for w in out.weights {
            let w = g.value(w);
            prop_assert_eq!(w.shape(), (lq, lk));
            for r in 0..lq {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(w.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn self_encoding_commutes_with_permutation(seed in any::<u64>(), perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg(false);
        let mut store = ParamStore::new();
        let enc = SelfEncoder::new(&mut store, &cfg, &mut rng);
        let x = random(7, 3, &mut rng);
        let mut g = Graph::new(&store);
        let a = enc.encode_video(&mut g, &FeatureSequence::new(x.clone(), Modality::Video).unwrap(), &mut Mode::eval()).unwrap();
        let b = enc.encode_video(&mut g, &FeatureSequence::new(x.permute_rows(&perm), Modality::Video).unwrap(), &mut Mode::eval()).unwrap();
        prop_assert!(g.value(a).permute_rows(&perm).max_abs_diff(g.value(b)) <= 1e-6);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable(seed in any::<u64>(), lv in 3usize..16, lq in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(small_cfg(true), Variant::Full, seed).unwrap();
        let s = sample(&model.cfg, lv, lq, &mut rng);
        prop_assert_eq!(model.predict(&s).unwrap(), model.predict(&s).unwrap());
    }

    #[test]
    fn proposal_scores_ignore_duplicated_tokens(seed in any::<u64>(), lv in 1usize..10, dup in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg(true);
        let mut store = ParamStore::new();
        let loc = Locator::new(&mut store, &cfg, Some(6), false, &mut rng);
        let q = random(3, 8, &mut rng);
        let v = random(lv, 8, &mut rng);
        let i = dup.index(lv);
        let mut rows: Vec<Vec<f64>> = (0..lv).map(|r| v.row(r).to_vec()).collect();
        rows.insert(rng.random_range(0..=lv), v.row(i).to_vec());
        let v2 = Matrix::from_rows(&rows).unwrap();
        let mut g = Graph::new(&store);
        let (qv, vv, vv2) = (g.constant(q), g.constant(v), g.constant(v2));
        let (_, a) = loc.score_proposals(&mut g, qv, vv).unwrap();
        let (_, b) = loc.score_proposals(&mut g, qv, vv2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn answer_loss_is_nonnegative_and_ln_k_when_uniform(scores in prop::collection::vec(-30.0f64..30.0, 1..12), c in -5.0f64..5.0, t in any::<prop::sample::Index>()) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let k = scores.len();
        let s = g.constant(Matrix::row_vector(scores));
        let l = answer_loss(&mut g, s, t.index(k));
        prop_assert!(g.value(l).item() >= 0.0);
        let u = g.constant(Matrix::row_vector(vec![c; k]));
        let l = answer_loss(&mut g, u, t.index(k));
        prop_assert!((g.value(l).item() - (k as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn slice_then_pool_is_masked_pool(seed in any::<u64>(), lv in 5usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random(lv, 4, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vv = g.constant(v.clone());
        for &p in ProposalSet::generate(lv, &[1, 2, 3, 4, 5]).unwrap().as_slice() {
            let s = slice_segment(&mut g, vv, p).unwrap();
            let pooled = g.max_rows(s);
            for c in 0..4 {
                let want = (0..lv).filter(|t| (p.st..p.ed).contains(t)).map(|t| v.get(t, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(g.value(pooled).get(0, c), want);
            }
        }
    }

    #[test]
    fn whole_video_selection_equals_no_ql(seed in any::<u64>(), lv in 3usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = Model::new(small_cfg(true), Variant::Full, seed).unwrap();
        let no_ql = full.with_variant(Variant::NoQl, 0).unwrap();
        let s = sample(&full.cfg, lv, 3, &mut rng);
        prop_assert_eq!(full.predict_on_proposal(&s, 0).unwrap(), no_ql.predict(&s).unwrap().answer);
    }

    #[test]
    fn pseudo_labels_leave_gradients_alone(seed in any::<u64>(), lv in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(small_cfg(true), Variant::Full, seed).unwrap();
        let s = sample(&model.cfg, lv, 3, &mut rng);
        let props = model.proposals(lv).unwrap();
        let grads = |with_label: bool| {
            let mut g = model.graph();
            let enc = model.encode(&mut g, &s, &mut Mode::eval()).unwrap();
            let path = model.answer_path(&mut g, &enc, &props).unwrap();
            let l = answer_loss(&mut g, path.scores, s.answer_index);
            if with_label {
                generate_pseudo_label(&model, &s, &props, PseudoLabelRule::Probability).unwrap();
            }
            g.backward(l)
        };
        let (a, b) = (grads(false), grads(true));
        for (id, _) in model.store.iter() {
            prop_assert_eq!(a.get(id), b.get(id));
        }
    }

    #[test]
    fn synthetic_labels_and_slots_are_balanced(seed in any::<u64>(), n in 5usize..40, segs in 2usize..6) {
        let cfg = SynthConfig { n_train: n, n_val: 1, n_segments: segs, n_keys: 6, key_frames: 1, seed, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let k = cfg.num_answers;
        let mut answers = vec![0usize; k];
        let mut slots = vec![0usize; segs];
        for (s, info) in ds.train.samples.iter().zip(&ds.train.info) {
            answers[s.answer_index] += 1;
            slots[info.evidence_slot] += 1;
            prop_assert_eq!(s.gt_segment, Some(cfg.segment(info.evidence_slot)));
        }
        for c in answers {
            prop_assert!(c.abs_diff(n / k) <= 1);
        }
        for c in slots {
            prop_assert!(c.abs_diff(n / segs) <= 1);
        }
    }
}
