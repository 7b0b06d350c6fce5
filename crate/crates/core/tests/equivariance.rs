//! Symmetry properties: permutations of points and of neighbors.

mod common;

use common::{jitter_params, random_points, random_tensor, rng};
use pgseg::augmenter::FeatureAugmenterBlock;
use pgseg::autodiff::Tape;
use pgseg::geometry::{knn, relative_neighbor_encoding, NeighborIndex, PointCloud};
use pgseg::local_context::{neighbor_features, LocalContextBlock};
use pgseg::network::{Mode, NetworkConfig, SegmentationNetwork};
use pgseg::nn::ParamStore;
use pgseg::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

const TOL: f64 = 1e-9;

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.cols();
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), w], data).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmenter_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..40, depth in 1usize..3) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let fa = FeatureAugmenterBlock::new(&mut store, "fa", 6, depth, &mut r).unwrap();
        jitter_params(&mut store, &mut r);
        let x = random_tensor(&[n, 6], &mut r);
        let perm = shuffled(n, seed ^ 1);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let out = fa.augment(&mut tape, &store, v).unwrap();
            tape.value(out).clone()
        };
        let a = permute_rows(&run(x.clone()), &perm);
        let b = run(permute_rows(&x, &perm));
        prop_assert!(a.max_abs_diff(&b) <= TOL);
    }

    #[test]
    fn local_context_ignores_neighbor_order(seed in any::<u64>(), n in 8usize..40, k in 2usize..8) {
        let mut r = rng(seed);
        let pts = random_points(n, &mut r);
        let nb = knn(&pts, k).unwrap();
        let mut rows = nb.as_flat().to_vec();
        for (i, row) in rows.chunks_mut(k).enumerate() {
            row.shuffle(&mut rng(seed.wrapping_add(i as u64)));
        }
        let shuffled_nb = NeighborIndex::from_rows(k, rows, n).unwrap();

        let mut store = ParamStore::new();
        let block = LocalContextBlock::new(&mut store, "lc", 4, 6, 1, &mut r).unwrap();
        jitter_params(&mut store, &mut r);
        let feats = random_tensor(&[n, 4], &mut r);
        let run = |nb: &NeighborIndex| {
            let mut tape = Tape::new();
            let enc = tape.constant(relative_neighbor_encoding(&pts, nb));
            let f = tape.constant(feats.clone());
            let g = neighbor_features(&mut tape, enc, Some(f), nb).unwrap();
            let out = block.forward(&mut tape, &store, g).unwrap();
            tape.value(out.context).clone()
        };
        prop_assert!(run(&nb).max_abs_diff(&run(&shuffled_nb)) <= TOL);
    }

    #[test]
    fn encoding_translation_invariant_except_centroid(seed in any::<u64>(), n in 4usize..50, shift in -5.0f64..5.0) {
        let pts = random_points(n, &mut rng(seed));
        let moved: Vec<_> = pts.iter().map(|p| [p[0] + shift, p[1] - shift, p[2] + 0.5 * shift]).collect();
        let k = 4.min(n);
        let a = relative_neighbor_encoding(&pts, &knn(&pts, k).unwrap());
        let b = relative_neighbor_encoding(&moved, &knn(&moved, k).unwrap());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if !(3..6).contains(&(i % 8)) {
                prop_assert!((x - y).abs() <= 1e-9, "channel {}: {} vs {}", i % 8, x, y);
            }
        }
    }
}

#[test]
fn network_is_point_permutation_equivariant() {
    let cfg = NetworkConfig::test_mode(vec![8, 16, 16], vec![4, 2, 2]);
    let mut net = SegmentationNetwork::build(cfg, &mut rng(31)).unwrap();
    jitter_params(net.params_mut(), &mut rng(32));
    let pts = random_points(96, &mut rng(33));
    let cloud = PointCloud::from_positions(pts.clone(), None).unwrap();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &cloud, Mode::Infer, &mut rng(34)).unwrap();
    let base = tape.value(out.logits).clone();
    let plan = out.trace.kept_sets();

    for seed in 0..5 {
        let perm = shuffled(pts.len(), 100 + seed);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let moved = PointCloud::from_positions(perm.iter().map(|&i| pts[i]).collect(), None).unwrap();
        let mut moved_plan = plan.clone();
        moved_plan[0] = plan[0].iter().map(|&i| inv[i]).collect();
        let mut tape = Tape::new();
        let out = net
            .forward_with_plan(&mut tape, &moved, Mode::Infer, &mut rng(35), Some(&moved_plan))
            .unwrap();
        let got = tape.value(out.logits);
        let want = permute_rows(&base, &perm);
        assert!(got.max_abs_diff(&want) <= TOL, "{}", got.max_abs_diff(&want));
    }
}
