use dynimg::compose::{plan_layout, LayoutConfig, Region};
use dynimg::harness::{pool_bins, structure_pool, token_budget};
use dynimg::{Error, TokenBlock, TokenKind};
use proptest::prelude::*;

#[test]
fn ablation_prompt_counts_tile_exactly() {
    for n in [1, 2, 4, 6, 12] {
        let l = plan_layout(&LayoutConfig::new(336, 14, n)).unwrap();
        assert!(l.straddling_patches().is_empty(), "n = {n}");
        assert_eq!(l.tiling_defects(), 0, "n = {n}");
        let (rows, cols) = l.patch_grid;
        assert_eq!(l.total_size, (rows * 14, cols * 14));
        // each prompt is (336 / n) px square
        let side = 336 / n / 14;
        assert_eq!(l.prompt_grid(), Some((side, side)));
        assert_eq!(rows, 24 + side);
        assert_eq!(l.tokens_of(Region::Keyframe).len(), 576);
        for j in 0..n {
            assert_eq!(l.tokens_of(Region::Prompt(j)).len(), side * side);
        }
    }
}

#[test]
fn five_prompts_do_not_fit() {
    match plan_layout(&LayoutConfig::new(336, 14, 5)) {
        Err(Error::PatchBoundaryViolation { .. }) => {}
        other => panic!("expected a boundary violation, got {other:?}"),
    }
}

#[test]
fn default_layout_counts() {
    let l = plan_layout(&LayoutConfig::default()).unwrap();
    assert_eq!(l.total_size, (420, 336));
    assert_eq!(l.patch_grid, (30, 24));
    assert_eq!(l.num_patches(), 720);
    assert_eq!(l.labels().iter().filter(|k| matches!(k, TokenKind::Prompt(_))).count(), 144);
    assert_eq!(l.region_of_patch(25, 3), Some(Region::Prompt(0)));
}

#[test]
fn budget_matches_reported_token_counts() {
    // 336 px / 14 px patches = 24x24 keyframe grid, pooled by 2 per axis
    let side = 336 / 14 / 2;
    let b = token_budget([4, side, side], 4);
    assert_eq!(b.visual_tokens, 576);
    assert_eq!(b.per_dynimg, 144);
    assert_eq!(b.baseline_16frame, 2304);
    assert_eq!(token_budget([16, 12, 12], 16).visual_tokens, 2304);
    assert_eq!(token_budget([1, 12, 12], 1).visual_tokens, 144);
}

#[test]
fn budget_linear_in_image_count() {
    for k in [1, 2, 4, 6, 8, 16] {
        assert_eq!(token_budget([k, 12, 12], k).visual_tokens, 144 * k);
    }
}

/// Bin edges by real-valued division, independent of the integer formula.
fn oracle_bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = (i as f64 * n_in as f64 / n_out as f64).floor() as usize;
    let hi = ((i + 1) as f64 * n_in as f64 / n_out as f64).ceil() as usize;
    (lo, hi)
}

fn block(shape: [usize; 3], dim: usize, values: Vec<f32>) -> TokenBlock {
    let n = shape.iter().product();
    TokenBlock::new(n, dim, values, vec![TokenKind::Keyframe; n]).unwrap().with_grid(shape).unwrap()
}

#[test]
fn default_grid_pools_to_576() {
    let shape = [4, 30, 24];
    let n: usize = shape.iter().product();
    let b = block(shape, 2, (0..n * 2).map(|i| (i % 13) as f32).collect());
    let out = structure_pool(&b, [4, 12, 12]).unwrap();
    assert_eq!(out.tokens, 576);
    assert_eq!(out.grid, Some([4, 12, 12]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bins_match_real_division(
        input in prop::array::uniform3(1usize..20),
        output in prop::array::uniform3(1usize..20),
    ) {
        let output = [output[0].min(input[0]), output[1].min(input[1]), output[2].min(input[2])];
        let bins = pool_bins(input, output).unwrap();
        let [_, ri, ci] = input;
        let mut i = 0;
        for f in 0..output[0] {
            for r in 0..output[1] {
                for c in 0..output[2] {
                    let (f0, f1) = oracle_bin(f, input[0], output[0]);
                    let (r0, r1) = oracle_bin(r, input[1], output[1]);
                    let (c0, c1) = oracle_bin(c, input[2], output[2]);
                    let mut want = Vec::new();
                    for a in f0..f1 { for b in r0..r1 { for k in c0..c1 { want.push((a * ri + b) * ci + k); } } }
                    prop_assert_eq!(&bins[i], &want);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn divisible_pool_preserves_mean(
        out in prop::array::uniform3(1usize..5),
        factor in prop::array::uniform3(1usize..4),
        seed in any::<u64>(),
    ) {
        let input = [out[0] * factor[0], out[1] * factor[1], out[2] * factor[2]];
        let n: usize = input.iter().product();
        let dim = 3;
        let values: Vec<f32> = (0..n * dim).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 40) % 1000) as f32 / 100.0).collect();
        let pooled = structure_pool(&block(input, dim, values.clone()), out).unwrap();
        for d in 0..dim {
            let before: f64 = (0..n).map(|t| values[t * dim + d] as f64).sum::<f64>() / n as f64;
            let after: f64 = (0..pooled.tokens).map(|t| pooled.row(t)[d] as f64).sum::<f64>() / pooled.tokens as f64;
            prop_assert!((before - after).abs() < 1e-5, "{before} vs {after}");
        }
    }

    #[test]
    fn identity_pool(shape in prop::array::uniform3(1usize..6)) {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n * 2).map(|i| i as f32 * 0.25).collect();
        let out = structure_pool(&block(shape, 2, values.clone()), shape).unwrap();
        prop_assert_eq!(out.values, values);
    }
}
