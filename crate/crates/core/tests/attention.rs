mod common;

use axwin::attention::{axwin_attention, mhsa, AttentionMode, AxWinParams, HeadAllocation, MhsaParams};
use axwin::tensor::gradcheck::check_graph;
use axwin::tensor::Rng;
use axwin::Tensor;
use common::{per_group_global, weights};
use proptest::prelude::*;

#[test]
fn mhsa_matches_dense_enumeration() {
    let mut rng = Rng::new(1);
    let q = Tensor::<f64>::randn([1, 1, 5, 4], &mut rng);
    let k = Tensor::<f64>::randn([1, 1, 5, 4], &mut rng);
    let v = Tensor::<f64>::randn([1, 1, 5, 4], &mut rng);
    for heads in [1, 2] {
        let got = mhsa(&q, &k, &v, MhsaParams::new(4, heads).unwrap()).unwrap();
        let want = common::mhsa(q.data(), k.data(), v.data(), 5, 4, heads);
        assert!(common::max_abs_diff(got.data(), &want) <= 1e-6);
    }
}

#[test]
fn mhsa_width_must_split_into_heads() {
    assert!(MhsaParams::new(6, 4).is_err());
}

#[test]
fn global_degeneracy_oracle() {
    for size in [4, 7] {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let p = AxWinParams::new(16, 8, size, size, AttentionMode::Axwin).unwrap();
            let w = weights(16, &mut rng);
            let x = Tensor::randn([1, size, size, 16], &mut rng);
            let got = axwin_attention(&x, &p, &w).unwrap();
            let want = per_group_global(&x, &p, &w);
            let d = common::max_abs_diff(got.data(), &want);
            assert!(d <= 1e-5, "size {size} seed {seed}: {d}");
        }
    }
}

#[test]
fn head_allocation() {
    let a = HeadAllocation::new(64, 2, AttentionMode::Axwin).unwrap();
    assert_eq!(a.window.unwrap().heads, 1);
    assert_eq!(a.rows.unwrap().heads, 1);
    assert_eq!(a.window.unwrap().head_dim, 32);
    let a = HeadAllocation::new(512, 16, AttentionMode::Axwin).unwrap();
    assert_eq!((a.window.unwrap().heads, a.rows.unwrap().heads, a.cols.unwrap().heads), (8, 4, 4));
    let a = HeadAllocation::new(64, 2, AttentionMode::Window).unwrap();
    assert_eq!(a.window.unwrap().width(), 64);
    assert!(a.rows.is_none() && a.cols.is_none());
    let a = HeadAllocation::new(64, 4, AttentionMode::Axial).unwrap();
    assert!(a.window.is_none());
    assert_eq!(a.rows.unwrap().width() + a.cols.unwrap().width(), 64);
}

#[test]
fn mode_switch_gradients() {
    for mode in [AttentionMode::Window, AttentionMode::Axial, AttentionMode::Axwin] {
        let p = AxWinParams::new(8, 4, 2, 2, mode).unwrap();
        let mut rng = Rng::new(7);
        let w = weights(8, &mut rng);
        let x = Tensor::randn([1, 4, 4, 8], &mut rng);
        let inputs = vec![x, w.qkv_w.clone(), w.qkv_b.clone(), w.proj_w.clone(), w.proj_b.clone()];
        let r = check_graph(
            &inputs,
            |g, v| {
                let vars =
                    axwin::attention::AttentionVars { qkv_w: v[1], qkv_b: v[2], proj_w: v[3], proj_b: v[4] };
                axwin::attention::record_axwin_attention(g, v[0], &p, &vars)
            },
            3,
            1e-5,
            32,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{mode}: {}", r.max_rel_error);
    }
}

#[test]
fn modes_differ_for_the_same_weights() {
    let mut rng = Rng::new(8);
    let w = weights(8, &mut rng);
    let x = Tensor::randn([1, 6, 6, 8], &mut rng);
    let run = |mode| {
        let p = AxWinParams::new(8, 4, 3, 2, mode).unwrap();
        axwin_attention(&x, &p, &w).unwrap()
    };
    let (a, b, c) = (run(AttentionMode::Axwin), run(AttentionMode::Window), run(AttentionMode::Axial));
    assert_ne!(a, b);
    assert_ne!(a, c);
    assert_ne!(b, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_equals_input_shape(
        h in 1usize..=15,
        w in 1usize..=15,
        s in 1usize..=8,
        a in 1usize..=8,
        mode in prop_oneof![Just(AttentionMode::Axwin), Just(AttentionMode::Window), Just(AttentionMode::Axial)],
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let p = AxWinParams::new(8, 4, s, a, mode).unwrap();
        let wts = weights(8, &mut rng);
        let x = Tensor::randn([1, h, w, 8], &mut rng);
        let y = axwin_attention(&x, &p, &wts).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }

    #[test]
    fn batch_items_are_independent(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = AxWinParams::new(8, 4, 3, 2, AttentionMode::Axwin).unwrap();
        let wts = weights(8, &mut rng);
        let x = Tensor::randn([2, 5, 6, 8], &mut rng);
        let both = axwin_attention(&x, &p, &wts).unwrap().unbatch();
        for (i, xi) in x.unbatch().iter().enumerate() {
            let yi = axwin_attention(xi, &p, &wts).unwrap();
            prop_assert!(yi.max_abs_diff(&both[i]) <= 1e-12);
        }
    }
}
