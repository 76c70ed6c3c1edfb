use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scenediff::autodiff::Tape;
use scenediff::data::{filter_dataset, synth_generate, FilterConfig, RawObject, RawRelation, RawScene, SynthConfig};
use scenediff::ddpm::{cfg_combine, dynamic_threshold, make_schedule, q_sample, ScheduleKind};
use scenediff::denoiser::{BatchItem, Denoiser, DenoiserConfig};
use scenediff::graph::{fuse_condition, mask_condition, GraphEdge, LabelEmbedder, RelationVocab, SceneGraph};
use scenediff::objectives::{aspect_ratio_loss, volume_loss, CategoryStats, TrainConfig, Trainer, TrainingExample};
use scenediff::relations::{eval_predicate, ras_scene, PredicateConfig};
use scenediff::scene::{pad_scene, to_bounding_boxes, Normalizer, SceneMatrix, SceneObject, ROW_DIM};
use scenediff::tensor::{Precision, Tensor};

const LABELS: [&str; 4] = ["bed", "chair", "lamp", "table"];

fn object() -> impl Strategy<Value = SceneObject> {
    (
        0..LABELS.len(),
        prop::array::uniform3(-3.0..3.0f64),
        prop::array::uniform3(0.1..2.0f64),
        0.0..std::f64::consts::TAU,
    )
        .prop_map(|(l, c, s, yaw)| {
            let (sin, cos) = yaw.sin_cos();
            SceneObject {
                label: LABELS[l].to_string(),
                centroid: c,
                axes: [cos, sin, 0.0, -sin, cos, 0.0, 0.0, 0.0, 1.0],
                size: s,
            }
        })
}

fn objects(max: usize) -> impl Strategy<Value = Vec<SceneObject>> {
    prop::collection::vec(object(), 1..=max)
}

/// Random typed edges over `n` nodes, no self loops or duplicates.
fn graph_for(objs: &[SceneObject], vocab: &RelationVocab, seed: u64) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = objs.len();
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.random::<f64>() < 0.4 {
                edges.push(GraphEdge::new(s, rng.random_range(1..vocab.len()), t));
            }
        }
    }
    SceneGraph::new(objs.iter().map(|o| o.label.clone()).collect(), edges)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn padding_and_decoding_recover_objects(objs in objects(8)) {
        let scene = pad_scene(&objs, 8).unwrap();
        let norm = Normalizer::fit(std::slice::from_ref(&scene)).unwrap();
        let boxes = to_bounding_boxes(&norm.normalize(&scene).unwrap().scene, &norm).unwrap();
        prop_assert_eq!(boxes.len(), objs.len());
        for (b, o) in boxes.iter().zip(&objs) {
            prop_assert_eq!(&b.label, &o.label);
            for k in 0..3 {
                prop_assert!((b.bbox.centroid[k] - o.centroid[k]).abs() < 1e-6);
                prop_assert!((b.bbox.size[k] - o.size[k]).abs() < 1e-6);
                for j in 0..3 {
                    prop_assert!((b.bbox.axes[k][j] - o.axes[3 * k + j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn normalization_is_strictly_monotone(objs in objects(6), a in -5.0..5.0f64, gap in 1e-6..3.0f64) {
        let norm = Normalizer::fit(&[pad_scene(&objs, 6).unwrap()]).unwrap();
        for d in 0..ROW_DIM {
            prop_assert!(norm.normalize_value(d, a) < norm.normalize_value(d, a + gap));
        }
    }

    #[test]
    fn fusion_edge_count_and_canonical_mask(objs in objects(6), s1 in any::<u64>(), s2 in any::<u64>()) {
        let vocab = RelationVocab::canonical();
        let embedder = LabelEmbedder::hash_derived(&LABELS, 0);
        let rows = Tensor::zeros(&[6, ROW_DIM]);
        let (g1, g2) = (graph_for(&objs, &vocab, s1), graph_for(&objs, &vocab, s2));
        let f1 = fuse_condition(&rows, &g1, &embedder).unwrap();
        let f2 = fuse_condition(&rows, &g2, &embedder).unwrap();
        prop_assert_eq!(f1.edges.len(), 6 * 5);
        prop_assert_eq!(f1.typed_edge_count(), g1.edges.len());
        prop_assert_eq!(mask_condition(&f1), mask_condition(&f2));
    }

    #[test]
    fn threshold_bounded_and_idempotent(data in prop::collection::vec(-40.0..40.0f64, 30), p in 1.0..=100.0f64) {
        let x = Tensor::new(vec![2, 15], data).unwrap();
        let y = dynamic_threshold(&x, p);
        prop_assert!(y.max_abs() <= 1.0);
        prop_assert_eq!(dynamic_threshold(&y, p), y);
    }

    #[test]
    fn guidance_is_affine(u in prop::collection::vec(-3.0..3.0f64, 15), c in prop::collection::vec(-3.0..3.0f64, 15), w in -2.0..8.0f64) {
        let (ut, ct) = (Tensor::vector(u.clone()), Tensor::vector(c.clone()));
        let g = cfg_combine(&ut, &ct, w).unwrap();
        for i in 0..15 {
            prop_assert_eq!(g.data()[i], (1.0 - w) * u[i] + w * c[i]);
        }
    }

    #[test]
    fn size_losses_ignore_object_order(objs in objects(5), seed in any::<u64>()) {
        let scene = pad_scene(&objs, 5).unwrap();
        let stats = CategoryStats::fit(std::slice::from_ref(&scene));
        let norm = Normalizer::fit(std::slice::from_ref(&scene)).unwrap();
        let perm = permutation(objs.len(), seed);
        let mut shuffled = vec![objs[0].clone(); objs.len()];
        for (i, o) in objs.iter().enumerate() {
            shuffled[perm[i]] = o.clone();
        }
        let eval = |s: &SceneMatrix| {
            let mut tape = Tape::new(Precision::F64);
            let pred = tape.constant(norm.normalize(s).unwrap().scene.rows().clone());
            // Perturb so the losses are non-trivial.
            let pred = tape.scale(pred, 0.9);
            let v = volume_loss(&mut tape, pred, s.labels(), &stats, &norm).unwrap();
            let r = aspect_ratio_loss(&mut tape, pred, s.labels(), &stats, &norm).unwrap();
            (tape.value(v).item(), tape.value(r).item())
        };
        let (a, b) = (eval(&scene), eval(&pad_scene(&shuffled, 5).unwrap()));
        prop_assert!((a.0 - b.0).abs() <= 1e-12 * a.0.abs().max(1.0));
        prop_assert!((a.1 - b.1).abs() <= 1e-12 * a.1.abs().max(1.0));
    }

    #[test]
    fn ras_is_bounded_and_permutation_invariant(objs in objects(6), gseed in any::<u64>(), pseed in any::<u64>()) {
        let vocab = RelationVocab::canonical();
        let graph = graph_for(&objs, &vocab, gseed);
        prop_assume!(!graph.edges.is_empty());
        let cfg = PredicateConfig::default();
        let scene = pad_scene(&objs, 6).unwrap();
        let ras = ras_scene(&scene, &graph, &vocab, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&ras));
        let perm = permutation(objs.len(), pseed);
        let mut moved = vec![objs[0].clone(); objs.len()];
        for (i, o) in objs.iter().enumerate() {
            moved[perm[i]] = o.clone();
        }
        let again = ras_scene(&pad_scene(&moved, 6).unwrap(), &graph.permuted(&perm), &vocab, &cfg).unwrap();
        prop_assert_eq!(ras, again);
    }

    #[test]
    fn directional_predicates_are_antisymmetric(a in object(), b in object()) {
        let cfg = PredicateConfig::default();
        for (p, q) in [("left", "right"), ("front", "behind"), ("above", "below")] {
            for rel in [p, q] {
                prop_assert!(!(eval_predicate(rel, &a, &b, &cfg).unwrap() && eval_predicate(rel, &b, &a, &cfg).unwrap()));
            }
            prop_assert!(!(eval_predicate(p, &a, &b, &cfg).unwrap() && eval_predicate(q, &a, &b, &cfg).unwrap()));
        }
    }
}

fn raw_scene() -> impl Strategy<Value = RawScene> {
    let labels = ["bed", "chair", "lamp", "table", "sofa", "shelf", "empty"];
    let rels = ["left", "right", "front", "above", "same as", "attached to", "standing-on"];
    (
        "[a-z]{3}",
        prop::collection::vec((0..labels.len(), 0.1..2.0f64), 0..10),
        prop::collection::vec((0u64..12, 0u64..12, 0..rels.len()), 0..15),
    )
        .prop_map(move |(id, objs, relations)| {
            let objects: Vec<RawObject> = objs
                .iter()
                .enumerate()
                .map(|(i, &(l, s))| RawObject {
                    id: i as u64,
                    label: labels[l].to_string(),
                    centroid: [i as f64, 0.0, 0.0],
                    axes: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                    size: [s, 1.0, 1.0],
                })
                .collect();
            let n = objects.len() as u64;
            let relations = relations
                .into_iter()
                .filter(|&(s, o, _)| s < n && o < n)
                .map(|(s, o, r)| RawRelation {
                    subject: s,
                    object: o,
                    relation: rels[r].to_string(),
                })
                .collect();
            RawScene { id, objects, relations }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtered_scenes_satisfy_every_rule(raw in prop::collection::vec(raw_scene(), 0..8), k in 1usize..5, cap in 1usize..6) {
        let cfg = FilterConfig { top_k_categories: k, max_objects: cap, ..FilterConfig::default() };
        let vocab = cfg.vocab().unwrap();
        let out = filter_dataset(&raw, &cfg).unwrap();
        let mut labels = std::collections::BTreeSet::new();
        for s in &out {
            prop_assert!(!s.objects.is_empty() && !s.graph.edges.is_empty());
            prop_assert!(s.objects.len() <= cap);
            for o in &s.objects {
                labels.insert(o.label.clone());
                prop_assert!(o.label != "empty");
            }
            for e in &s.graph.edges {
                let name = vocab.name(e.relation).unwrap();
                prop_assert!(cfg.relation_whitelist.iter().any(|w| w == name));
                prop_assert!(e.source != e.target && e.source < s.objects.len() && e.target < s.objects.len());
            }
        }
        prop_assert!(labels.len() <= k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_pairs_score_perfectly_and_reproduce(seed in any::<u64>()) {
        let cfg = SynthConfig::default();
        let eval = PredicateConfig::default();
        let a = synth_generate(12, &cfg, &eval, seed).unwrap();
        let b = synth_generate(12, &cfg, &eval, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let vocab = cfg.vocab().unwrap();
        for (scene, graph) in &a {
            prop_assert_eq!(ras_scene(scene, graph, &vocab, &eval).unwrap(), 1.0);
        }
    }
}

#[test]
fn forward_noise_variance_matches_schedule() {
    let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    for t in [1, 10, 250, 1000] {
        let eps = gaussian(&mut rng, &[n]);
        let x = q_sample(&Tensor::zeros(&[n]), t, &eps, &sched).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - sched.alpha_bar(t).unwrap();
        // Standard error of a Gaussian sample variance.
        let se = expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "t={t}: {var} vs {expected}");
    }
}

fn tiny_model(config: DenoiserConfig) -> Denoiser {
    Denoiser::new(config, RelationVocab::canonical(), LabelEmbedder::hash_derived(&LABELS, 1), 4).unwrap()
}

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        n_max: 4,
        hidden: 8,
        rgcn_layers: 2,
        heads: 2,
        bases: 2,
        time_dim: 8,
        precision: Precision::F64,
        ..DenoiserConfig::default()
    }
}

/// Every parameter tensor gets a non-zero gradient on a generic input.
fn assert_no_dead_parameters(model: &Denoiser) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let graph = SceneGraph::new(
        vec!["bed".into(), "lamp".into(), "chair".into()],
        vec![GraphEdge::new(1, 1, 0), GraphEdge::new(2, 3, 0)],
    );
    let condition = scenediff::ddpm::Denoise::condition(model, &graph).unwrap();
    let xt = gaussian(&mut rng, &[4, ROW_DIM]);
    let mut tape = Tape::new(Precision::F64);
    let params = model.params().bind(&mut tape, true);
    let out = model
        .forward_batch(&mut tape, &params, &[BatchItem { xt: &xt, t: 40, condition: &condition }])
        .unwrap();
    let w = tape.constant(gaussian(&mut rng, &[4, ROW_DIM]));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    for (name, v) in params.iter() {
        let g = tape.grad(v).map(|g| g.max_abs()).unwrap_or(0.0);
        assert!(g > 0.0, "parameter {name} receives no gradient");
    }
}

#[test]
fn stripped_model_has_no_dead_parameters() {
    let model = tiny_model(DenoiserConfig {
        use_cross_attention: false,
        use_self_attention: false,
        use_skip_connections: false,
        use_relational_edges: false,
        ..small_config()
    });
    assert!(model.params().iter().all(|(n, _)| !n.starts_with("cross") && !n.starts_with("self")));
    assert_no_dead_parameters(&model);
}

#[test]
fn full_model_has_no_dead_parameters() {
    assert_no_dead_parameters(&tiny_model(small_config()));
}

#[test]
fn epoch_loss_is_reproducible() {
    let cfg = SynthConfig {
        n_max: 4,
        max_objects: 4,
        ..SynthConfig::default()
    };
    let pairs = synth_generate(6, &cfg, &PredicateConfig::default(), 3).unwrap();
    let scenes: Vec<SceneMatrix> = pairs.iter().map(|p| p.0.clone()).collect();
    let norm = Normalizer::fit(&scenes).unwrap();
    let stats = CategoryStats::fit(&scenes);
    let model = Denoiser::new(
        DenoiserConfig {
            precision: Precision::F32,
            ..small_config()
        },
        cfg.vocab().unwrap(),
        LabelEmbedder::hash_derived(&cfg.labels(), 0),
        2,
    )
    .unwrap();
    let examples: Vec<TrainingExample> = pairs
        .iter()
        .map(|(s, g)| TrainingExample::new(&norm.normalize(s).unwrap().scene, g, &model).unwrap())
        .collect();
    let run = || {
        let tc = TrainConfig {
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model.clone(), tc, stats.clone(), norm.clone()).unwrap();
        let metrics: Vec<_> = (0..3).map(|_| trainer.train_epoch(&examples).unwrap()).collect();
        (metrics, trainer.into_model())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}
