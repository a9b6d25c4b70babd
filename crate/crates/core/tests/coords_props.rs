use dynimg::compose::{plan_layout, DynImgLayout, LayoutConfig, Region};
use dynimg::rope::{build_coords, CoordOptions, Segment, SpatialMode, TCoord};
use dynimg::TokenKind;
use proptest::prelude::*;

/// Valid layouts: patch p, keyframe of `c` patches, `n` dividing `c`.
fn layout() -> impl Strategy<Value = DynImgLayout> {
    (1usize..=16, 1usize..=24, 1usize..=12)
        .prop_filter_map("n must divide the keyframe width in patches", |(p, c, n)| {
            (c % n == 0).then(|| plan_layout(&LayoutConfig::new(c * p, p, n)).unwrap())
        })
}

#[derive(Debug, Clone)]
enum Seg {
    Text(usize),
    Image,
}

fn segments() -> impl Strategy<Value = Vec<Seg>> {
    prop::collection::vec(prop_oneof![(0usize..5).prop_map(Seg::Text), Just(Seg::Image)], 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn coordinate_contract(l in layout(), segs in segments()) {
        let built: Vec<Segment<'_>> = segs
            .iter()
            .map(|s| match s {
                Seg::Text(n) => Segment::Text(*n),
                Seg::Image => Segment::image(&l),
            })
            .collect();
        let g = build_coords(&built, CoordOptions::default()).unwrap();
        let (kr, kc) = l.keyframe_grid();
        let per_image = l.num_patches();
        let n = l.n_prompts();

        let mut tok = 0;
        let mut pos = 0.0;
        for s in &segs {
            match s {
                Seg::Text(len) => {
                    for _ in 0..*len {
                        prop_assert_eq!(g.kinds[tok], TokenKind::Text);
                        prop_assert_eq!(g.coords[tok], [pos; 4]);
                        tok += 1;
                        pos += 1.0;
                    }
                }
                Seg::Image => {
                    let img = &g.coords[tok..tok + per_image];
                    let kinds = &g.kinds[tok..tok + per_image];
                    prop_assert!(img.iter().all(|c| c[3] == pos), "one shared s per image");

                    let (mut times, mut hmin, mut hmax, mut wmin, mut wmax) =
                        (Vec::new(), vec![f64::MAX; n], vec![f64::MIN; n], vec![f64::MAX; n], vec![f64::MIN; n]);
                    for (c, k) in img.iter().zip(kinds) {
                        prop_assert!(c[0] >= 0.0 && c[0] <= (kr - 1) as f64);
                        prop_assert!(c[1] >= 0.0 && c[1] <= (kc - 1) as f64);
                        match k {
                            TokenKind::Keyframe => prop_assert_eq!(c[2], 0.0),
                            TokenKind::Prompt(j) => {
                                let j = *j;
                                times.push((j, c[2]));
                                hmin[j] = hmin[j].min(c[0]);
                                hmax[j] = hmax[j].max(c[0]);
                                wmin[j] = wmin[j].min(c[1]);
                                wmax[j] = wmax[j].max(c[1]);
                            }
                            other => prop_assert!(false, "unexpected kind {other:?}"),
                        }
                    }

                    // one t per prompt, strictly increasing, mirror-symmetric, never 0
                    let per_prompt: Vec<f64> = (0..n).map(|j| times.iter().find(|t| t.0 == j).unwrap().1).collect();
                    prop_assert!(times.iter().all(|&(j, t)| t == per_prompt[j]));
                    prop_assert!(per_prompt.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(per_prompt.iter().all(|&t| t != 0.0));
                    let mirrored: Vec<f64> = per_prompt.iter().rev().map(|t| -t).collect();
                    if n % 2 == 0 {
                        prop_assert_eq!(&mirrored, &per_prompt);
                    }

                    // prompt grids stretch onto the keyframe range
                    let (pr, pc) = l.prompt_grid().unwrap_or((0, 0));
                    for j in 0..n {
                        let (h_lo, h_hi) = if pr > 1 { (0.0, (kr - 1) as f64) } else { let m = (kr - 1) as f64 / 2.0; (m, m) };
                        let (w_lo, w_hi) = if pc > 1 { (0.0, (kc - 1) as f64) } else { let m = (kc - 1) as f64 / 2.0; (m, m) };
                        prop_assert!((hmin[j] - h_lo).abs() < 1e-12 && (hmax[j] - h_hi).abs() < 1e-12);
                        prop_assert!((wmin[j] - w_lo).abs() < 1e-12 && (wmax[j] - w_hi).abs() < 1e-12);
                    }
                    tok += per_image;
                    pos += 1.0;
                }
            }
        }
        prop_assert_eq!(tok, g.len());
    }

    #[test]
    fn whole_image_rows_continue_below_keyframe(l in layout()) {
        let opts = CoordOptions { spatial: SpatialMode::WholeImage, t_coord: TCoord::Rank };
        let g = build_coords(&[Segment::image(&l)], opts).unwrap();
        let (rows, cols) = l.patch_grid;
        for r in 0..rows {
            for c in 0..cols {
                let x = g.coords[r * cols + c];
                prop_assert_eq!((x[0], x[1]), (r as f64, c as f64));
            }
        }
    }
}

#[test]
fn ablation_grid_times_are_ranks() {
    for (n, want) in [
        (1, vec![1.0]),
        (2, vec![-1.0, 1.0]),
        (4, vec![-2.0, -1.0, 1.0, 2.0]),
        (6, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]),
    ] {
        let l = plan_layout(&LayoutConfig::new(336, 14, n)).unwrap();
        let g = build_coords(&[Segment::image(&l)], CoordOptions::default()).unwrap();
        let got: Vec<f64> = (0..n)
            .map(|j| {
                let t = l.tokens_of(Region::Prompt(j))[0];
                g.coords[t][2]
            })
            .collect();
        assert_eq!(got, want, "n = {n}");
    }
}

#[test]
fn prompt_corner_reaches_keyframe_corner() {
    let l = plan_layout(&LayoutConfig::default()).unwrap();
    let g = build_coords(&[Segment::image(&l)], CoordOptions::default()).unwrap();
    // prompt 0 occupies patch rows 24..30, cols 0..6; its bottom-right patch is (29, 5)
    let x = g.coords[29 * 24 + 5];
    assert_eq!((x[0], x[1]), (5.0 * 23.0 / 5.0, 5.0 * 23.0 / 5.0));
}

#[test]
fn frame_offset_times_come_from_input() {
    let l = plan_layout(&LayoutConfig::new(56, 7, 2)).unwrap();
    let opts = CoordOptions { t_coord: TCoord::FrameOffset, ..Default::default() };
    let seg = Segment::DynImg { layout: &l, prompt_times: Some(vec![-0.4, 0.12]) };
    let g = build_coords(&[seg], opts).unwrap();
    let p1 = l.tokens_of(Region::Prompt(1))[0];
    assert_eq!(g.coords[p1][2], 0.12);
    assert!(build_coords(&[Segment::image(&l)], opts).is_err());
}
