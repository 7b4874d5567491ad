//! The batched encoder against a token-by-token loop implementation.

mod common;

use common::{brute_center_select, brute_offset_index, perturbed_encoder, reference_logits};
use proptest::prelude::*;
use varivit::encoder::{Encoder, ModelConfig, Positional, PosembStrategy};
use varivit::numerics::{Rng, Tensor};
use varivit::posemb::{build_sinusoidal_3d, Grid};

fn config(posemb: PosembStrategy) -> ModelConfig {
    ModelConfig {
        depth: 2,
        embed_dim: 12,
        heads: 3,
        mlp_ratio: 2,
        num_classes: 3,
        patch_size: 2,
        in_channels: 2,
        max_image_edge: 8,
        posemb,
    }
}

fn random_patches(n: usize, len: usize, b: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Rng::new(seed);
    (0..b).map(|_| Tensor::from_fn(&[n, len], |_| rng.normal())).collect()
}

fn cells(g: Grid) -> Vec<Grid> {
    (0..g[0])
        .flat_map(|a| (0..g[1]).flat_map(move |b| (0..g[2]).map(move |c| [a, b, c])))
        .collect()
}

#[test]
fn forward_matches_loop_reference_for_every_strategy() {
    for s in PosembStrategy::ALL {
        let cfg = config(s);
        let enc = perturbed_encoder(cfg.clone(), 31, 0.3);
        for grid in [[4, 4, 4], [2, 3, 4], [1, 1, 1], [3, 2, 1]] {
            let n: usize = grid.iter().product();
            let patches = random_patches(n, cfg.patch_len(), 3, 7);
            let (logits, _) = enc.forward(patches.clone(), grid).unwrap();
            let pos = enc.positional(grid).unwrap();
            for (b, p) in patches.iter().enumerate() {
                let want = reference_logits(&cfg, &enc.params, p, &pos);
                for (x, y) in logits.row(b).iter().zip(&want) {
                    assert!((x - y).abs() < 1e-10, "{s} {grid:?}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn center_select_positions_are_the_centered_master_block() {
    let cfg = config(PosembStrategy::CenterSelect);
    let enc = Encoder::<f64>::new(cfg.clone(), &mut Rng::new(1)).unwrap();
    let master = build_sinusoidal_3d::<f64>(cfg.max_grid(), cfg.embed_dim).unwrap();
    for grid in [[4, 4, 4], [3, 3, 3], [2, 4, 1]] {
        let Positional::Absolute(rows) = enc.positional(grid).unwrap() else {
            panic!("absolute expected");
        };
        let want = brute_center_select(&master, grid);
        for (i, w) in want.iter().enumerate() {
            assert_eq!(rows.row(i), w.as_slice());
        }
    }
}

#[test]
fn relative_bias_is_a_table_lookup_by_offset() {
    let cfg = config(PosembStrategy::Relative);
    let enc = perturbed_encoder(cfg.clone(), 2, 1.0);
    let table = &enc.params.rel_bias.as_ref().unwrap().table;
    let max = cfg.max_grid();
    for grid in [[4, 4, 4], [2, 3, 1]] {
        let Positional::Relative(bias) = enc.positional(grid).unwrap() else {
            panic!("relative expected");
        };
        let cs = cells(grid);
        let n = cs.len();
        for h in 0..cfg.heads {
            for (i, &p) in cs.iter().enumerate() {
                for (j, &q) in cs.iter().enumerate() {
                    let want = table.row(h)[brute_offset_index(max, p, q)];
                    assert_eq!(bias.data()[(h * n + i) * n + j], want);
                }
            }
        }
    }
}

#[test]
fn grids_beyond_capacity_are_rejected() {
    for s in PosembStrategy::ALL {
        let enc = Encoder::<f64>::new(config(s), &mut Rng::new(0)).unwrap();
        assert!(enc.forward(random_patches(125, 16, 1, 0), [5, 5, 5]).is_err(), "{s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn each_sample_is_independent_of_its_batch(
        s in 0usize..5, l in 1usize..=4, h in 1usize..=4, w in 1usize..=4, b in 1usize..5, seed in 0u64..1000,
    ) {
        let cfg = config(PosembStrategy::ALL[s]);
        let enc = perturbed_encoder(cfg.clone(), seed, 0.2);
        let grid = [l, h, w];
        let patches = random_patches(l * h * w, cfg.patch_len(), b, seed + 1);
        let (joint, cache) = enc.forward(patches.clone(), grid).unwrap();
        prop_assert_eq!(cache.batch(), b);
        for (i, p) in patches.into_iter().enumerate() {
            let (single, _) = enc.forward(vec![p], grid).unwrap();
            for (x, y) in joint.row(i).iter().zip(single.row(0)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_attention_is_a_sub_stochastic_grid(
        s in 0usize..5, l in 1usize..=4, h in 1usize..=4, w in 1usize..=4, seed in 0u64..1000,
    ) {
        let cfg = config(PosembStrategy::ALL[s]);
        let enc = perturbed_encoder(cfg.clone(), seed, 0.5);
        let grid = [l, h, w];
        let (_, cache) = enc.forward(random_patches(l * h * w, cfg.patch_len(), 2, seed), grid).unwrap();
        for layer in 0..cfg.depth {
            let m = cache.cls_attention(layer, 1).unwrap();
            prop_assert_eq!(m.shape(), &[l, h, w]);
            let total = m.sum();
            prop_assert!(total > 0.0 && total <= 1.0 + 1e-12);
        }
    }
}
