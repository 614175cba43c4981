use nestnet_core::nested::{build_mask, GroupSpec};
use nestnet_core::numerics::{cumulative_logits, CumulativeLinear, NoProbe, Tensor};
use nestnet_core::slicing::{select_slice, Budget, SliceCost, SliceId};
use nestnet_core::training::{aggregate_loss, LossWeightMatrix, WeightKind};
use nestnet_core::Grid;
use proptest::prelude::*;

fn scan(costs: &[SliceCost], scores: &[f64], cols: usize, budget: &Budget) -> Option<SliceId> {
    let mut best: Option<(f64, u64, u64, usize, usize)> = None;
    for (i, (c, &s)) in costs.iter().zip(scores).enumerate() {
        let fits = budget.max_macs.map_or(true, |m| c.macs <= m)
            && budget.max_params.map_or(true, |m| c.params <= m)
            && budget.max_peak_activation.map_or(true, |m| c.peak_activation <= m);
        if !fits || s.is_nan() {
            continue;
        }
        let cand = (s, c.macs, c.params, i / cols + 1, i % cols + 1);
        best = match best {
            None => Some(cand),
            Some(b) => {
                let wins = cand.0 > b.0
                    || (cand.0 == b.0 && (cand.1, cand.2, cand.3, cand.4) < (b.1, b.2, b.3, b.4));
                Some(if wins { cand } else { b })
            }
        };
    }
    best.map(|b| SliceId { d: b.3, w: b.4 })
}

proptest! {
    #[test]
    fn proportional_groups_partition_each_stage(k in 1usize..6, mult in proptest::collection::vec(1usize..5, 1..4)) {
        let widths: Vec<usize> = mult.iter().map(|m| m * k).collect();
        let spec = GroupSpec::proportional(&widths, k).unwrap();
        for (s, &w) in widths.iter().enumerate() {
            let b = spec.bounds(s);
            prop_assert_eq!(b.len(), k);
            prop_assert_eq!(*b.last().unwrap(), w);
            prop_assert!(b.windows(2).all(|p| p[1] - p[0] == w / k));
        }
    }

    #[test]
    fn causal_mask_counts(sizes_in in proptest::collection::vec(1usize..4, 1..5), scale in 1usize..3, k in prop_oneof![Just(1usize), Just(3)]) {
        let groups = sizes_in.len();
        let inb: Vec<usize> = sizes_in.iter().scan(0, |a, &s| { *a += s; Some(*a) }).collect();
        let outb: Vec<usize> = inb.iter().map(|b| b * scale).collect();
        let m = build_mask(&inb, &outb, k).unwrap();
        let mut want = 0;
        for g in 0..groups {
            let rows = outb[g] - if g == 0 { 0 } else { outb[g - 1] };
            want += rows * inb[g] * k * k;
        }
        prop_assert_eq!(m.count_ones(), want);
        for o in 0..*outb.last().unwrap() {
            let g = outb.iter().position(|&b| o < b).unwrap();
            prop_assert_eq!(m.prefix_len(o), Some(inb[g]));
        }
    }

    #[test]
    fn shorter_bounds_give_identical_prefix_logits(
        feats in proptest::collection::vec(-3.0f64..3.0, 12),
        wts in proptest::collection::vec(-1.0f64..1.0, 36),
        c in 1usize..5,
    ) {
        let layer = CumulativeLinear {
            weight: Tensor::from_vec(&[3, 12], wts).unwrap(),
            bias: Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap(),
        };
        let bounds = [3usize, 6, 9, 12];
        let full = cumulative_logits(&layer, &feats, 1, 12, &bounds, &mut NoProbe).unwrap();
        let part = cumulative_logits(&layer, &feats, 1, 12, &bounds[..c], &mut NoProbe).unwrap();
        prop_assert!(part.iter().zip(&full).all(|(a, b)| a.to_bits() == b.to_bits()));
        let last = cumulative_logits(&layer, &feats, 1, 12, &bounds[c - 1..c], &mut NoProbe).unwrap();
        prop_assert!(last.iter().zip(&full[(c - 1) * 3..c * 3]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn aggregate_is_scale_invariant(losses in proptest::collection::vec(0.0f64..5.0, 12), gamma in 1.01f64..3.0, k in 1e-3f64..1e3) {
        let g = Grid::from_vec(3, 4, losses).unwrap();
        let lam = LossWeightMatrix::make(WeightKind::Descend { gamma }, 3, 4).unwrap();
        let a = aggregate_loss(&g, &lam).unwrap();
        let b = aggregate_loss(&g, &lam.scaled(k).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn selector_matches_scan(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in proptest::collection::vec((0u64..8, 0u64..8, 0u64..8, 0u8..6), 16),
        limits in (proptest::option::of(0u64..9), proptest::option::of(0u64..9), proptest::option::of(0u64..9)),
    ) {
        let n = rows * cols;
        let costs: Vec<SliceCost> = seed[..n].iter().map(|&(m, p, a, _)| SliceCost { macs: m, params: p, peak_activation: a }).collect();
        let scores: Vec<f64> = seed[..n].iter().map(|&(_, _, _, s)| if s == 5 { f64::NAN } else { s as f64 }).collect();
        let budget = Budget { max_macs: limits.0, max_params: limits.1, max_peak_activation: limits.2 };
        let got = select_slice(
            &Grid::from_vec(rows, cols, costs.clone()).unwrap(),
            &Grid::from_vec(rows, cols, scores.clone()).unwrap(),
            &budget,
        ).unwrap();
        prop_assert_eq!(got, scan(&costs, &scores, cols, &budget));
    }
}
