use dynimg::rope::{
    angles, rope_backward, rotate_values, CoordGrid, CoordMode, RopeConfig, SpatialMode, ThetaMode, ThetaSchedule, Variant,
};
use dynimg::TokenKind;
use proptest::prelude::*;

// Plain rotary over one position, written out from the textbook definition.
fn reference_1d(q: &[f64], pos: f64, base: f64) -> Vec<f64> {
    let d = q.len();
    let mut out = q.to_vec();
    for i in 0..d / 2 {
        let a = pos * base.powf(-((2 * i) as f64) / d as f64);
        out[2 * i] = q[2 * i] * a.cos() - q[2 * i + 1] * a.sin();
        out[2 * i + 1] = q[2 * i] * a.sin() + q[2 * i + 1] * a.cos();
    }
    out
}

fn grid(coords: Vec<[f64; 4]>) -> CoordGrid {
    let n = coords.len();
    CoordGrid { coords, kinds: vec![TokenKind::Keyframe; n], image: vec![Some(0); n], spatial: SpatialMode::Interpolated }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coord() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-40.0f64..40.0)
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn trainable_init_matches_1d_over_s(
        coords in prop::collection::vec(coord(), 1..40),
        hd in prop::sample::select(vec![2usize, 4, 8, 16, 32]),
        seed_vals in vector(32 * 40),
    ) {
        let g = grid(coords.clone());
        let sched = ThetaSchedule::new(hd, RopeConfig::default()).unwrap();
        let q = &seed_vals[..coords.len() * hd];
        let ours = rotate_values(q, hd, &angles(&g, &sched).unwrap()).unwrap();
        for (t, x) in coords.iter().enumerate() {
            let want = reference_1d(&q[t * hd..(t + 1) * hd], x[3], 10000.0);
            for (a, b) in ours[t * hd..(t + 1) * hd].iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn split_fixed_equal_coords_is_1d(p in -30.0f64..30.0, q in vector(16)) {
        let cfg = RopeConfig { variant: Variant::Split, theta_mode: ThetaMode::Fixed, ..Default::default() };
        let sched = ThetaSchedule::new(16, cfg).unwrap();
        let out = rotate_values(&q, 16, &angles(&grid(vec![[p; 4]]), &sched).unwrap()).unwrap();
        for (a, b) in out.iter().zip(reference_1d(&q, p, 10000.0)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn inner_product_depends_on_offset(
        x in coord(),
        y in coord(),
        q in vector(16),
        k in vector(16),
        thetas in prop::collection::vec(-1.0f64..1.0, 24),
        split in any::<bool>(),
    ) {
        let variant = if split { Variant::Split } else { Variant::Merge };
        let mut sched = ThetaSchedule::new(16, RopeConfig { variant, ..Default::default() }).unwrap();
        for d in 0..3 {
            sched.trainable[d] = thetas[d * 8..(d + 1) * 8].to_vec();
        }
        let diff = [x[0] - y[0], x[1] - y[1], x[2] - y[2], x[3] - y[3]];
        let a = angles(&grid(vec![x, y, diff]), &sched).unwrap();
        let rot = |v: &[f64], t: usize| {
            let one = dynimg::rope::RotationAngles { tokens: 1, pairs: 8, values: a.row(t).to_vec() };
            rotate_values(v, 16, &one).unwrap()
        };
        let (rq, rk, rd) = (rot(&q, 0), rot(&k, 1), rot(&q, 2));
        let lhs = dot(&rq, &rk);
        let rhs = dot(&rd, &k);
        prop_assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
        for i in 0..8 {
            let n0 = q[2 * i].hypot(q[2 * i + 1]);
            prop_assert!((rq[2 * i].hypot(rq[2 * i + 1]) - n0).abs() <= 1e-12);
        }
    }

    #[test]
    fn norms_preserved_in_every_mode(
        x in coord(),
        q in vector(16),
        row in 0usize..7,
    ) {
        let (_, cfg) = RopeConfig::ablation_rows()[row];
        let sched = ThetaSchedule::new(16, cfg).unwrap();
        let g = CoordGrid { spatial: cfg.coord_mode.spatial(), ..grid(vec![x]) };
        let out = rotate_values(&q, 16, &angles(&g, &sched).unwrap()).unwrap();
        for i in 0..8 {
            prop_assert!((out[2 * i].hypot(out[2 * i + 1]) - q[2 * i].hypot(q[2 * i + 1])).abs() <= 1e-12);
        }
    }
}

fn loss(q: &[f64], g: &CoordGrid, sched: &ThetaSchedule, up: &[f64]) -> f64 {
    dot(&rotate_values(q, sched.head_dim, &angles(g, sched).unwrap()).unwrap(), up)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn rotate_gradients_match_finite_differences(
        coords in prop::collection::vec(prop::array::uniform4(-3.0f64..3.0), 1..6),
        vals in vector(8 * 6 * 2),
        thetas in prop::collection::vec(-0.5f64..0.5, 12),
        split in any::<bool>(),
    ) {
        let hd = 8;
        let n = coords.len();
        let variant = if split { Variant::Split } else { Variant::Merge };
        let mut sched = ThetaSchedule::new(hd, RopeConfig { variant, ..Default::default() }).unwrap();
        for d in 0..3 {
            sched.trainable[d] = thetas[d * 4..(d + 1) * 4].to_vec();
        }
        let g = grid(coords);
        let (q, up) = (&vals[..n * hd], &vals[n * hd..2 * n * hd]);
        let grads = rope_backward(q, hd, &g, &sched, up).unwrap();
        let h = 1e-5;
        for i in 0..q.len() {
            let (mut p, mut m) = (q.to_vec(), q.to_vec());
            p[i] += h;
            m[i] -= h;
            let num = (loss(&p, &g, &sched, up) - loss(&m, &g, &sched, up)) / (2.0 * h);
            prop_assert!(rel(grads.d_q[i], num) < 1e-4, "q[{i}]: {} vs {num}", grads.d_q[i]);
        }
        for d in 0..3 {
            for i in 0..4 {
                let (mut p, mut m) = (sched.clone(), sched.clone());
                p.trainable[d][i] += h;
                m.trainable[d][i] -= h;
                let num = (loss(q, &g, &p, up) - loss(q, &g, &m, up)) / (2.0 * h);
                prop_assert!(rel(grads.d_theta[d][i], num) < 1e-4, "theta[{d}][{i}]: {} vs {num}", grads.d_theta[d][i]);
            }
        }
    }
}

#[test]
fn theta_t_gradient_at_zero_init_has_closed_form() {
    let hd = 8;
    let coords = vec![[1.0, 2.0, -2.0, 3.0], [4.0, 0.0, 1.0, 3.0], [0.0, 5.0, 2.0, 3.0]];
    let g = grid(coords.clone());
    let sched = ThetaSchedule::new(hd, RopeConfig::default()).unwrap();
    let q: Vec<f64> = (0..coords.len() * hd).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
    let up = vec![1.0; q.len()];
    let grads = rope_backward(&q, hd, &g, &sched, &up).unwrap();
    for i in 0..hd / 2 {
        let theta_s = 10000f64.powf(-((2 * i) as f64) / hd as f64);
        let want: f64 = coords
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let a = x[3] * theta_s;
                let (q1, q2) = (q[t * hd + 2 * i], q[t * hd + 2 * i + 1]);
                x[2] * ((-q1 * a.sin() - q2 * a.cos()) + (q1 * a.cos() - q2 * a.sin()))
            })
            .sum();
        let h = 1e-5;
        let (mut p, mut m) = (sched.clone(), sched.clone());
        p.trainable[2][i] = h;
        m.trainable[2][i] = -h;
        let num = (loss(&q, &g, &p, &up) - loss(&q, &g, &m, &up)) / (2.0 * h);
        assert!(rel(grads.d_theta[2][i], want) < 1e-12, "{} vs {want}", grads.d_theta[2][i]);
        assert!(rel(want, num) < 1e-6, "{want} vs {num}");
    }
}

#[test]
fn fixed_merge_unit_coords_quadruple_theta_s() {
    let cfg = RopeConfig { theta_mode: ThetaMode::Fixed, ..Default::default() };
    let sched = ThetaSchedule::new(8, cfg).unwrap();
    let a = angles(&grid(vec![[1.0; 4]]), &sched).unwrap();
    for i in 0..4 {
        assert!((a.values[i] - 4.0 * 10000f64.powf(-((2 * i) as f64) / 8.0)).abs() < 1e-15);
    }
}

#[test]
fn one_d_mode_ignores_spatial_axes() {
    let sched = ThetaSchedule::new(8, RopeConfig::one_d()).unwrap();
    assert_eq!(sched.config.coord_mode, CoordMode::OneD);
    let a = angles(&grid(vec![[7.0, -3.0, 2.0, 5.0]]), &sched).unwrap();
    let b = angles(&grid(vec![[0.0, 0.0, 0.0, 5.0]]), &sched).unwrap();
    assert_eq!(a, b);
}
