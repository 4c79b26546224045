use std::sync::Arc;

use gtagcn::autodiff::{Reduce, Tape, Tensor};
use gtagcn::data::{batch_graphs, load_node_dataset, readout, write_node_dataset, Dataset, Graph, NodeTask, Split};
use gtagcn::layers::{message_norm_update, powermean_aggregate, softmax_aggregate, MlpBlock, ParamStore};
use gtagcn::model::{build_model, ModelConfig, ModelInput, Operator};
use gtagcn::sparse::{normalized_adjacency, power_apply, CsrMatrix};
use gtagcn::stroke::{chain_code, resample_stroke, stroke_to_graph, IngestConfig, Stroke};
use gtagcn::train::{train, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn edges_from_mask(n: usize, mask: &[bool]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if mask[k % mask.len()] {
                edges.push((i, j));
            }
            k += 1;
        }
    }
    edges
}

type Case = (usize, Vec<(usize, usize)>, Vec<f64>, Vec<usize>);

/// Random undirected graph, node features and a node permutation.
fn graph_case(max_n: usize, d: usize) -> impl Strategy<Value = Case> {
    (2..=max_n).prop_flat_map(move |n| {
        (
            Just(n),
            prop::collection::vec(prop::bool::weighted(0.3), n * (n - 1) / 2),
            prop::collection::vec(-1.0f64..1.0, n * d),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
            .prop_map(|(n, mask, x, perm)| (n, edges_from_mask(n, &mask), x, perm))
    })
}

fn dense_power_oracle(a: &Tensor, x: &Tensor, k: usize) -> Vec<Tensor> {
    let mut out = vec![x.clone()];
    for _ in 0..k {
        out.push(a.matmul(out.last().unwrap()).unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn forwards_commute_with_node_permutation(
        (n, edges, x, perm) in graph_case(12, 3),
        op in prop::sample::select(vec![Operator::Gtagcn, Operator::Tagcn, Operator::Gcn, Operator::GenGtagcn]),
    ) {
        let cfg = ModelConfig { operator: op, hidden: 5, k: 3, ..ModelConfig::default() };
        let model = build_model(&cfg, 3, 4, false).unwrap();
        let xt = Tensor::new(n, 3, x).unwrap();
        let g = Graph::new(n, edges.clone(), xt.clone(), None).unwrap();
        // Node i of the original graph becomes node perm[i].
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let pg = Graph::new(
            n,
            edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            xt.select_rows(&inv),
            None,
        )
        .unwrap();
        let out = model.predict(&ModelInput::node_level(&g, &cfg).unwrap()).unwrap();
        let pout = model.predict(&ModelInput::node_level(&pg, &cfg).unwrap()).unwrap();
        prop_assert!(out.select_rows(&inv).max_abs_diff(&pout) < 1e-10);
    }

    #[test]
    fn sparse_products_match_dense((n, edges, x, _) in graph_case(20, 4), k in 0usize..=6, loops in any::<bool>()) {
        let a = CsrMatrix::from_edges(n, &edges, true).unwrap();
        let s = normalized_adjacency(&a, loops).unwrap();
        let dense = s.to_dense();
        let xt = Tensor::new(n, 4, x).unwrap();
        prop_assert!(s.spmm(&xt).unwrap().max_abs_diff(&dense.matmul(&xt).unwrap()) < 1e-10);
        let fast = power_apply(&s, &xt, k).unwrap();
        let slow = dense_power_oracle(&dense, &xt, k);
        prop_assert_eq!(fast.len(), k + 1);
        for (f, o) in fast.iter().zip(&slow) {
            prop_assert!(f.max_abs_diff(o) < 1e-10);
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive((n, edges, x, _) in graph_case(16, 1), loops in any::<bool>()) {
        let a = CsrMatrix::from_edges(n, &edges, true).unwrap();
        let s = normalized_adjacency(&a, loops).unwrap();
        prop_assert!(s.is_symmetric());
        // Spectral radius at most 1: no power grows a vector.
        let v = Tensor::new(n, 1, x).unwrap();
        let norm = |t: &Tensor| t.data().iter().map(|z| z * z).sum::<f64>().sqrt();
        for p in power_apply(&s, &v, 8).unwrap() {
            prop_assert!(norm(&p) <= norm(&v) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn node_dataset_round_trips((n, edges, x, _) in graph_case(10, 3), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| (i as u64 ^ seed) as usize % 3).collect();
        let splits: Vec<Split> = (0..n).map(|i| [Split::Train, Split::Val, Split::Test, Split::None][i % 4]).collect();
        let both: Vec<(usize, usize)> = edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        let g = Graph::new(n, both, Tensor::new(n, 3, x).unwrap(), None).unwrap();
        let task = NodeTask::new(g, labels, splits, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_node_dataset(dir.path(), &task).unwrap();
        prop_assert_eq!(load_node_dataset(dir.path()).unwrap(), task);
    }

    #[test]
    fn batched_readout_matches_per_graph(sizes in prop::collection::vec(1usize..6, 1..5), mode in prop::sample::select(vec![Reduce::Mean, Reduce::Sum, Reduce::Max])) {
        let mut rng = ChaCha8Rng::seed_from_u64(sizes.iter().sum::<usize>() as u64);
        let graphs: Vec<Graph> = sizes
            .iter()
            .map(|&n| Graph::new(n, (1..n).map(|i| (i - 1, i)).collect(), Tensor::glorot_uniform(n, 3, &mut rng), Some(0)).unwrap())
            .collect();
        let batch = batch_graphs(&graphs).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(batch.x.clone());
        let all = readout(&mut tape, h, &batch.graph_index, batch.num_graphs, mode).unwrap();
        let all = tape.value(all).clone();
        for (i, g) in graphs.iter().enumerate() {
            let h = tape.constant(g.x.clone());
            let one = readout(&mut tape, h, &vec![0; g.num_nodes], 1, mode).unwrap();
            prop_assert_eq!(tape.value(one).row(0), all.row(i));
        }
    }

    #[test]
    fn batched_model_matches_per_graph(sizes in prop::collection::vec(2usize..7, 1..5), op in prop::sample::select(vec![Operator::Gtagcn, Operator::Gcn])) {
        let cfg = ModelConfig { operator: op, hidden: 6, ..ModelConfig::default() };
        let model = build_model(&cfg, 3, 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(sizes.len() as u64);
        let graphs: Vec<Graph> = sizes
            .iter()
            .map(|&n| Graph::new(n, (1..n).map(|i| (i - 1, i)).collect(), Tensor::glorot_uniform(n, 3, &mut rng), Some(0)).unwrap())
            .collect();
        let together = model.predict(&ModelInput::from_graphs(&graphs, &cfg).unwrap()).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            let alone = model.predict(&ModelInput::from_graphs(&[g], &cfg).unwrap()).unwrap();
            let diff = alone.row(0).iter().zip(together.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-10);
        }
    }

    #[test]
    fn chain_code_ignores_translation_and_scale(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
        tx in -50.0f64..50.0,
        ty in -50.0f64..50.0,
        scale_exp in -4i32..4,
    ) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let Ok(s) = Stroke::new(pts) else { return Ok(()) };
        let scale = 2f64.powi(scale_exp);
        let scaled = s.map(|p| [p[0] * scale, p[1] * scale]).unwrap();
        prop_assert_eq!(chain_code(&s, 8).unwrap(), chain_code(&scaled, 8).unwrap());
        // Translation perturbs differences by rounding only; sectors cannot
        // change unless a segment lies within that rounding of a boundary.
        let moved = s.map(|p| [p[0] + tx, p[1] + ty]).unwrap();
        let a = chain_code(&s, 8).unwrap();
        let b = chain_code(&moved, 8).unwrap();
        let near_boundary = s.points().windows(2).any(|w| {
            let t = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
            let r = (t / (std::f64::consts::PI / 8.0)).rem_euclid(2.0);
            (r - 1.0).abs() < 1e-9
        });
        prop_assert!(near_boundary || a == b);
    }

    #[test]
    fn resample_keeps_endpoints(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..15),
        l in 2usize..40,
    ) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let Ok(s) = Stroke::new(pts) else { return Ok(()) };
        let once = resample_stroke(&s, l).unwrap();
        prop_assert_eq!(once.len(), l);
        prop_assert_eq!(once[0], s.points()[0]);
        prop_assert_eq!(*once.last().unwrap(), *s.points().last().unwrap());
    }

    #[test]
    fn resampling_a_uniform_stroke_is_identity(
        start in (-5.0f64..5.0, -5.0f64..5.0),
        angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 1..30),
        step in 0.01f64..3.0,
    ) {
        // Equal chord lengths make the polyline already uniform in arc length.
        let mut pts = vec![[start.0, start.1]];
        for a in &angles {
            let p = *pts.last().unwrap();
            pts.push([p[0] + step * a.cos(), p[1] + step * a.sin()]);
        }
        let s = Stroke::new(pts.clone()).unwrap();
        prop_assume!(s.len() == pts.len());
        let r = resample_stroke(&s, pts.len()).unwrap();
        for (a, b) in r.iter().zip(&pts) {
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn stroke_graphs_have_path_shape(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..12), l in 2usize..40) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let Ok(s) = Stroke::new(pts) else { return Ok(()) };
        if let Ok(g) = stroke_to_graph(&s, &IngestConfig::new(l, 8).unwrap()) {
            prop_assert_eq!(g.num_nodes, l);
            prop_assert_eq!(g.edges.len(), l - 1);
            prop_assert_eq!(g.num_features(), l);
        }
    }

    #[test]
    fn softmax_aggregate_stays_within_message_range(
        msgs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..8),
        beta in -5.0f64..5.0,
    ) {
        let out = softmax_aggregate(&msgs, beta).unwrap();
        for j in 0..3 {
            let lo = msgs.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
            let hi = msgs.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
        }
        // Weights summing to one make a constant column a fixed point.
        let same = vec![vec![1.25, -0.5, 2.0]; msgs.len()];
        let fixed = softmax_aggregate(&same, beta).unwrap();
        for (a, b) in fixed.iter().zip(&same[0]) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn powermean_is_monotone_in_p(
        msgs in prop::collection::vec(prop::collection::vec(0.05f64..4.0, 2), 1..8),
        p in 0.2f64..5.0,
        dp in 0.1f64..3.0,
    ) {
        let a = powermean_aggregate(&msgs, p).unwrap();
        let b = powermean_aggregate(&msgs, p + dp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*x <= *y * (1.0 + 1e-12));
        }
    }

    #[test]
    fn message_norm_ignores_message_scale(
        h in prop::collection::vec(-2.0f64..2.0, 6),
        m in prop::collection::vec(0.1f64..2.0, 6),
        c in 0.01f64..100.0,
        s in 0.1f64..3.0,
    ) {
        let run = |mm: Vec<f64>| {
            let mut store = ParamStore::new();
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut sess = store.session(&mut tape, false, &mut rng);
            let hv = sess.tape.constant(Tensor::new(2, 3, h.clone()).unwrap());
            let mv = sess.tape.constant(Tensor::new(2, 3, mm).unwrap());
            let out = message_norm_update(&mut sess, hv, mv, s, &MlpBlock::identity()).unwrap();
            sess.tape.value(out).clone()
        };
        let base = run(m.clone());
        let scaled = run(m.iter().map(|v| v * c).collect());
        prop_assert!(base.max_abs_diff(&scaled) < 1e-12);
    }
}

/// Labels outside the training split never reach the gradient: changing
/// every test label leaves the trained parameters and the whole training
/// trajectory untouched.
#[test]
fn test_labels_do_not_leak_into_training() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/karate");
    let task = load_node_dataset(&dir).unwrap();
    let mut flipped = task.clone();
    for i in flipped.split_indices(Split::Test) {
        flipped.labels[i] = 1 - flipped.labels[i];
    }
    let cfg = ModelConfig {
        operator: Operator::Gtagcn,
        k: 2,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        max_epochs: 30,
        patience: 30,
        ..TrainConfig::default()
    };
    let run = |t: NodeTask| {
        let ds = Dataset::Node(t);
        let mut model = build_model(&cfg, ds.num_features(), ds.num_classes(), false).unwrap();
        let report = train(&mut model, &ds, &tcfg).unwrap();
        (model.params().clone(), report)
    };
    let (pa, ra) = run(task);
    let (pb, rb) = run(flipped);
    assert_eq!(pa, pb);
    assert_eq!(ra.train_loss, rb.train_loss);
    assert_eq!(ra.val_acc, rb.val_acc);
    assert_eq!(ra.best_epoch, rb.best_epoch);
    assert_ne!(ra.test_acc, rb.test_acc);
}

#[test]
fn normalized_adjacency_of_a_path_is_exact() {
    let a = CsrMatrix::from_edges(3, &[(0, 1), (1, 2)], true).unwrap();
    let s = Arc::new(normalized_adjacency(&a, false).unwrap());
    let h = 0.5f64.sqrt();
    assert!((s.get(0, 1) - h).abs() < 1e-15);
    assert!((s.get(1, 2) - h).abs() < 1e-15);
    assert_eq!(s.get(0, 0), 0.0);
}
