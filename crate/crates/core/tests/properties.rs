use std::collections::HashMap;
use std::f64::consts::TAU;

use ocnn::dataset::RenderConfig;
use ocnn::eval::{
    recall_at, recall_distance, recall_tolerance, run_matrix, MatrixInputs, Prediction,
};
use ocnn::loss::{mine_pairs, MiningConfig, SampleLabel};
use ocnn::map::{ExemplarRecord, MapIndex};
use ocnn::model::{FeatureMap, Model, ModelConfig, Variant};
use ocnn::nav::{navigate, OraclePotential, PolicyConfig, RandomPotential};
use ocnn::omni::{
    circular_pad, rolling_distance, shift_columns, HorizontalPad, PadMode, Padding, VerticalPad,
};
use ocnn::pipeline::build_corpus;
use ocnn::world::{distance, World, WorldConfig};
use ocnn::{config::RunConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn desk_world() -> World {
    World::generate(&RunConfig::default().world_config()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn circular_conv_commutes_with_column_rotation(
        seed in any::<u64>(),
        h in 1usize..6,
        w in 3usize..10,
        side in prop::sample::select(vec![1usize, 3, 5]),
        pole in any::<bool>(),
        s in 0usize..20,
    ) {
        prop_assume!(side / 2 < w && (!pole || side / 2 <= h));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = random(&[h, w, cin], &mut rng);
        let k = random(&[side, side, cin, cout], &mut rng);
        let pad = Padding {
            horizontal: HorizontalPad::Circular,
            vertical: if pole { VerticalPad::PoleWrap } else { VerticalPad::Zero },
        };
        let conv = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let y = tape.conv2d(xv, kv, (1, 1), pad).unwrap();
            tape.value(y).clone()
        };
        let a = conv(&shift_columns(&x, s % w).unwrap());
        let b = shift_columns(&conv(&x), s % w).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
    }

    #[test]
    fn padded_valid_conv_keeps_width(h in 1usize..6, w in 2usize..10, p in 0usize..3) {
        prop_assume!(p < w && p <= h);
        let mut rng = ChaCha8Rng::seed_from_u64((h * 100 + w * 10 + p) as u64);
        let x = random(&[h, w, 2], &mut rng);
        let k = random(&[2 * p + 1, 2 * p + 1, 2, 3], &mut rng);
        let padded = circular_pad(&x, &PadMode::same(Padding::OMNI, 2 * p + 1, 2 * p + 1)).unwrap();
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(padded), tape.constant(k));
        let y = tape.conv2d_valid(xv, kv, (1, 1)).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[h, w, 3][..]);
    }

    #[test]
    fn rolling_distance_is_symmetric(seed in any::<u64>(), w in 1usize..16, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[w, d], &mut rng), random(&[w, d], &mut rng));
        let (ab, ba) = (rolling_distance(&a, &b).unwrap(), rolling_distance(&b, &a).unwrap());
        prop_assert!((ab.d_min - ba.d_min).abs() <= 1e-12);
        for k in 0..w {
            prop_assert!((ab.distances[k] - ba.distances[(w - k) % w]).abs() <= 1e-12);
        }
        let unique = ab.distances.iter().filter(|&&v| (v - ab.d_min).abs() <= 1e-12).count() == 1;
        if unique {
            prop_assert_eq!((ab.r_hat + ba.r_hat) % w, 0);
        }
    }

    #[test]
    fn query_ignores_record_order(seed in any::<u64>(), n in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<ExemplarRecord> = (0..n as u32)
            .map(|id| ExemplarRecord {
                id,
                room: 0,
                position: [id as f64, 0.0],
                theta: 0.0,
                rotation_bin: 0,
                // coarse values so that ties actually happen
                feature: Tensor::from_fn(&[4, 2], |_| rng.gen_range(0..3) as f32),
            })
            .collect();
        let q = FeatureMap {
            values: Tensor::from_fn(&[4, 2], |_| rng.gen_range(0..3) as f32),
            model_hash: "h".into(),
        };
        let map = MapIndex::new("h".into(), true, records.clone()).unwrap();
        let mut shuffled = records;
        shuffled.shuffle(&mut rng);
        let other = MapIndex::new("h".into(), true, shuffled).unwrap();
        prop_assert_eq!(map.query(&q).unwrap(), other.query(&q).unwrap());
    }

    #[test]
    fn rotating_the_camera_by_whole_columns_shifts_the_render(
        seed in any::<u64>(),
        k in 0usize..32,
        heading in 0.0f64..TAU,
    ) {
        let world = desk_world();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let room = rng.gen_range(0..world.rooms.len());
        let p = world.sample_in_room(room, &mut rng).unwrap();
        let (h, w) = (6, 32);
        let base = world.pose(p, heading).unwrap();
        let turned = world.pose(p, heading + k as f64 * TAU / w as f64).unwrap();
        let a = world.render_pano(&base, h, w).unwrap().pixels;
        let b = world.render_pano(&turned, h, w).unwrap().pixels;
        prop_assert_eq!(shift_columns(&a, k % w).unwrap(), b);
    }

    #[test]
    fn episodes_stay_in_free_space(seed in any::<u64>(), oracle in any::<bool>(), budget in 1usize..40) {
        let world = desk_world();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let room = rng.gen_range(0..world.rooms.len());
        let start = world.pose(world.sample_in_room(room, &mut rng).unwrap(), rng.gen_range(0.0..TAU)).unwrap();
        let target = world.sample_in_room(room, &mut rng).unwrap();
        let cfg = PolicyConfig { budget, ..Default::default() };
        let ep = if oracle {
            let mut pot = OraclePotential { target, target_heading: 0.0, bins: 16 };
            navigate(&world, &mut pot, start, 0, target, &cfg).unwrap()
        } else {
            let mut pot = RandomPotential::new(seed, 16, 1, cfg.spacing);
            navigate(&world, &mut pot, start, 0, target, &cfg).unwrap()
        };
        prop_assert!(ep.trajectory.iter().all(|p| world.is_free(p.position)));
        prop_assert!(ep.steps <= cfg.budget);
        if ep.success {
            prop_assert!(ep.final_distance <= cfg.tolerance);
        }
        if oracle {
            let d0 = distance(start.position, target);
            let bound = (d0 / (4.0 * cfg.spacing)).ceil() as usize + 1;
            prop_assert!(ep.success || cfg.budget < bound, "d0 {d0}, steps {}", ep.steps);
            prop_assert!(ep.steps <= bound);
        }
    }

    #[test]
    fn recall_curve_is_nondecreasing_and_bins_aggregate(seed in any::<u64>(), n in 0usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Prediction> = (0..n as u32)
            .map(|q| {
                let gt = rng.gen_range(0..10);
                let predicted = if rng.gen_bool(0.3) { gt } else { rng.gen_range(0..10) };
                Prediction {
                    query_id: q,
                    predicted,
                    ground_truth: gt,
                    error: if predicted == gt { 0.0 } else { rng.gen_range(0.0..1.5) },
                    gt_distance: rng.gen_range(0.0..2.5),
                }
            })
            .collect();
        let tolerances: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let curve = recall_tolerance(&preds, &tolerances);
        prop_assert!(curve.windows(2).all(|p| p[0].1 <= p[1].1));

        let bins: Vec<(f64, f64)> = (0..4).map(|k| (k as f64 * 0.5, (k + 1) as f64 * 0.5)).collect();
        let covered: Vec<Prediction> = preds
            .iter()
            .filter(|p| p.gt_distance > 0.0 && p.gt_distance <= 2.0)
            .cloned()
            .collect();
        let binned = recall_distance(&preds, &bins, 0.5);
        let hits: f64 = binned.iter().map(|b| b.recall * b.count as f64).sum();
        let count: usize = binned.iter().map(|b| b.count).sum();
        prop_assert_eq!(count, covered.len());
        if count > 0 {
            prop_assert!((hits / count as f64 - recall_at(&covered, 0.5)).abs() <= 1e-12);
        }
    }
}

/// Over many batches from one room, a same-room pair lands among the
/// pseudo-negatives at least as often as any pair sharing its anchor that
/// is physically closer.
#[test]
fn farther_pairs_are_pseudo_negatives_more_often() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 8;
    let batch: Vec<SampleLabel> = (0..n)
        .map(|i| SampleLabel {
            room: (i >= 6) as usize,
            place: i,
            position: [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)],
            rotation: 0,
        })
        .collect();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..2000 {
        let pairs = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
        for (&(i, j), pn) in pairs.positives.iter().zip(&pairs.pseudo_negatives) {
            for (anchor, list) in [(i, &pn.of_i), (j, &pn.of_j)] {
                for &k in list {
                    *counts.entry((anchor, k)).or_default() += 1;
                }
            }
        }
    }
    for anchor in 0..6 {
        let mut row: Vec<(f64, usize)> = (0..6)
            .filter(|&k| k != anchor)
            .map(|k| {
                let d = batch[anchor].distance(&batch[k]);
                (d, counts.get(&(anchor, k)).copied().unwrap_or(0))
            })
            .collect();
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(
            row.windows(2).all(|p| p[0].1 <= p[1].1),
            "anchor {anchor}: {row:?}"
        );
        assert!(row.last().unwrap().1 > row.first().unwrap().1);
    }
    assert!(!counts.keys().any(|&(a, k)| (a >= 6) != (k >= 6)));
}

#[test]
fn matrix_runs_are_reproducible() {
    let mut cfg = RunConfig::default();
    cfg.data.exemplars = 3;
    cfg.data.held_out_exemplars = 1;
    cfg.data.queries = 6;
    cfg.data.map_spacing = 1.5;
    cfg.render = RenderConfig {
        height: 8,
        width: 16,
        bins: 4,
    };
    cfg.model = ModelConfig {
        input: [8, 16, 3],
        w: 4,
        ..Default::default()
    };
    let corpus = build_corpus(&cfg).unwrap();
    let mut train = cfg.train_config();
    train.iterations = 3;
    let hash = cfg.hash();
    let inputs = MatrixInputs {
        model: &cfg.model,
        train: &train,
        train_samples: &corpus.train.samples,
        map_samples: &corpus.map.samples,
        queries: &corpus.queries.samples,
        tolerances: &cfg.eval.tolerances,
        bins: &cfg.eval.bins,
        config_hash: &hash,
    };
    let a = run_matrix(&inputs, &Variant::ALL, &[0, 1]).unwrap();
    let b = run_matrix(&inputs, &Variant::ALL, &[0, 1]).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
}

#[test]
fn trained_features_stay_finite_and_curves_repeat() {
    let mut cfg = RunConfig::default();
    cfg.data.exemplars = 4;
    cfg.render = RenderConfig {
        height: 8,
        width: 16,
        bins: 4,
    };
    cfg.model = ModelConfig {
        input: [8, 16, 3],
        w: 4,
        ..Default::default()
    };
    let corpus = build_corpus(&cfg).unwrap();
    let mut train = cfg.train_config();
    train.iterations = 25;
    let run = || {
        let mut m = Model::new(cfg.model.clone(), 1).unwrap();
        let report = m.train(&corpus.train.samples, &train).unwrap();
        (m, report.losses)
    };
    let (model, losses) = run();
    assert_eq!(losses, run().1);
    for s in &corpus.queries.samples {
        assert!(model.forward(&s.image.pixels).unwrap().values.is_finite());
    }
}

#[test]
fn world_generation_is_seeded() {
    let cfg = WorldConfig {
        seed: 5,
        ..Default::default()
    };
    assert_eq!(
        World::generate(&cfg).unwrap(),
        World::generate(&cfg).unwrap()
    );
    let other = WorldConfig {
        seed: 6,
        ..Default::default()
    };
    assert_ne!(
        World::generate(&cfg).unwrap(),
        World::generate(&other).unwrap()
    );
}
