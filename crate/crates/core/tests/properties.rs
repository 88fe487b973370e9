use clustergen::data::pnm::PnmImage;
use clustergen::infer::normalize_log_scores;
use clustergen::learn::{decode_latents, encode_latents};
use clustergen::metrics::{assignment_cost, clustering_accuracy, hungarian};
use clustergen::model::{log_joint, LatentState, ModelConfig};
use clustergen::netcore::{Activation, Architecture, GeneratorNet};
use clustergen::pixelwise::LabelMap;
use clustergen::rng::seeded;
use clustergen::{langevin_step, posterior_y};
use proptest::prelude::*;

fn net_for(seed: u64, d: usize, k: usize, dim: usize) -> GeneratorNet {
    let arch = Architecture {
        hidden: vec![5],
        hidden_activation: Activation::Tanh,
        output_activation: Activation::Identity,
    };
    GeneratorNet::init(&arch, d, k, dim, &mut seeded(seed)).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-50i32..50, c), r))
        .prop_map(|m| m.into_iter().map(|row| row.into_iter().map(f64::from).collect()).collect())
}

fn clustering() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(l, k)| {
        (Just(l), Just(k), prop::collection::vec((0..l, 0..k), 1..80))
    })
}

proptest! {
    #[test]
    fn hungarian_is_optimal_and_injective(cost in cost_matrix()) {
        let rows = cost.len();
        let cols = cost[0].len();
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.len(), rows);
        let used: Vec<usize> = a.iter().flatten().copied().collect();
        prop_assert_eq!(used.len(), rows.min(cols));
        let mut dedup = used.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), used.len());
        let best = permutations(rows.max(cols))
            .iter()
            .map(|p| (0..rows).filter(|&r| p[r] < cols).map(|r| cost[r][p[r]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(assignment_cost(&cost, &a), best);
    }

    #[test]
    fn accuracy_bounds_and_relabeling((labels, clusters, pairs) in clustering(), shift in 0usize..6) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let eval = clustering_accuracy(&truth, &pred, labels, clusters).unwrap();
        let total: u64 = eval.contingency.iter().flatten().sum();
        prop_assert_eq!(total as usize, truth.len());
        prop_assert!((0.0..=1.0).contains(&eval.acc));
        // any single cluster mapped to its majority label is achievable
        let single = (0..clusters)
            .map(|c| (0..labels).map(|l| eval.contingency[l][c]).max().unwrap())
            .max()
            .unwrap();
        prop_assert!(eval.acc * truth.len() as f64 >= single as f64 - 1e-9);
        let rotated: Vec<usize> = pred.iter().map(|&c| (c + shift) % clusters).collect();
        prop_assert_eq!(clustering_accuracy(&truth, &rotated, labels, clusters).unwrap().acc, eval.acc);
        // swapping roles of labels and clusters scores the same
        prop_assert_eq!(clustering_accuracy(&pred, &truth, clusters, labels).unwrap().acc, eval.acc);
    }

    #[test]
    fn posterior_is_a_distribution_matching_joint_ratios(
        seed in 0u64..1000,
        k in 1usize..6,
        x in prop::collection::vec(-3.0f64..3.0, 3),
        z in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let cfg = ModelConfig::new(k, 2, 3).with_sigma(0.5);
        let net = net_for(seed, 2, k, 3);
        let post = posterior_y(&cfg, &net, &x, &z).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(post.iter().all(|&p| p >= 0.0));
        let lj: Vec<f64> = (0..k)
            .map(|y| log_joint(&cfg, &net, &x, &LatentState::new(z.clone(), y)).unwrap())
            .collect();
        for y in 1..k {
            if post[y] > 1e-200 && post[0] > 1e-200 {
                prop_assert!(((post[y] / post[0]).ln() - (lj[y] - lj[0])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn normalization_ignores_common_shifts(
        scores in prop::collection::vec(-500.0f64..500.0, 1..8),
        shift in -1e4f64..1e4,
    ) {
        let mut a = vec![0.0; scores.len()];
        let mut b = vec![0.0; scores.len()];
        normalize_log_scores(&scores, &mut a).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        normalize_log_scores(&shifted, &mut b).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_small_step_ascends(
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 3),
        z in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let cfg = ModelConfig::new(2, 2, 3).with_sigma(0.5);
        let net = net_for(seed, 2, 2, 3);
        let state = LatentState::new(z, 1);
        let before = log_joint(&cfg, &net, &x, &state).unwrap();
        let next = langevin_step(&cfg, &net, &x, &state, 1e-4, &[0.0, 0.0]).unwrap();
        let after = log_joint(&cfg, &net, &x, &LatentState::new(next, 1)).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..10_000, d in 1usize..4, k in 1usize..4, dim in 1usize..5) {
        let net = net_for(seed, d, k, dim);
        let bytes = net.to_checkpoint();
        let back = GeneratorNet::from_checkpoint(&bytes, k).unwrap();
        prop_assert_eq!(back.to_checkpoint(), bytes);
        prop_assert_eq!(back, net);
    }

    #[test]
    fn latents_round_trip(zs in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), 0usize..9), 0..20)) {
        let latents: Vec<LatentState> = zs.into_iter().map(|(z, y)| LatentState::new(z, y)).collect();
        let bytes = encode_latents(&latents);
        let back = decode_latents(&bytes, 3).unwrap();
        prop_assert_eq!(encode_latents(&back), bytes);
        prop_assert_eq!(back, latents);
    }

    #[test]
    fn pnm_round_trip(w in 1usize..9, h in 1usize..9, colour in any::<bool>(), fill in any::<u8>()) {
        let channels = if colour { 3 } else { 1 };
        let mut img = PnmImage::filled(w, h, channels, fill);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = p.wrapping_add((i * 37) as u8);
        }
        let bytes = img.encode();
        let back = PnmImage::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, img);
    }

    #[test]
    fn label_maps_round_trip(k in 1usize..6, labels in prop::collection::vec(0usize..6, 12)) {
        let labels: Vec<usize> = labels.into_iter().map(|l| l % k).collect();
        let map = LabelMap::new(3, 4, labels, k).unwrap();
        let back = LabelMap::from_pgm(&map.to_pgm(k), k).unwrap();
        prop_assert_eq!(back, map);
    }
}
