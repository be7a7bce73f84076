mod common;

use axwin::partition::{
    axial_partition, axial_reverse, concat_channels, split_qkv, window_partition, window_reverse,
    AxialLayout, Axis, ChannelSplit, WindowLayout,
};
use axwin::tensor::Rng;
use axwin::{Shape, Tensor};
use proptest::prelude::*;

#[test]
fn divisible_window_count() {
    let x = Tensor::<f64>::ones([1, 14, 14, 2]);
    let (w, l) = window_partition(&x, 7).unwrap();
    assert_eq!(w.len(), 4);
    assert_eq!((l.padded_h, l.padded_w), (14, 14));
    assert!(w.iter().all(|t| t.shape().numel() == 49 * 2));
}

#[test]
fn non_divisible_window_pads_bottom_right() {
    let x = Tensor::<f64>::ones([1, 15, 15, 1]);
    let (w, l) = window_partition(&x, 7).unwrap();
    assert_eq!(w.len(), 9);
    assert_eq!((l.padded_h, l.padded_w), (21, 21));
    // The top-left window is all data, the bottom-right one holds a single pixel.
    assert_eq!(w[0].sum(), 49.0);
    assert_eq!(w[8].sum(), 1.0);
}

#[test]
fn interleaved_axial_groups() {
    let l = AxialLayout::new(Shape::new(1, 8, 8, 1), 2, Axis::Rows).unwrap();
    assert_eq!(l.n_groups, 4);
    assert_eq!(l.members(0), vec![0, 4]);
    assert_eq!(l.members(3), vec![3, 7]);
    let l = AxialLayout::new(Shape::new(1, 10, 3, 1), 4, Axis::Rows).unwrap();
    assert_eq!(l.padded_len, 12);
    assert_eq!(l.n_groups, 3);
    assert_eq!(l.members(1), vec![1, 4, 7, 10]);
}

#[test]
fn axial_group_holds_whole_rows() {
    let x = Tensor::<f64>::from_fn([1, 4, 5, 1], |[_, y, x, _]| (10 * y + x) as f64);
    let (groups, _) = axial_partition(&x, 2, Axis::Rows).unwrap();
    assert_eq!(groups.len(), 2);
    let vals: Vec<f64> = groups[1].data().to_vec();
    assert_eq!(vals, vec![10.0, 11.0, 12.0, 13.0, 14.0, 30.0, 31.0, 32.0, 33.0, 34.0]);
}

#[test]
fn channel_widths_for_c64() {
    let s = ChannelSplit::halves(64).unwrap();
    assert_eq!((s.window, s.rows, s.cols), (32, 16, 16));
    assert!(ChannelSplit::halves(6).is_err());
}

#[test]
fn zero_split_size_is_rejected() {
    assert!(WindowLayout::new(Shape::new(1, 4, 4, 1), 0).is_err());
    assert!(AxialLayout::new(Shape::new(1, 4, 4, 1), 0, Axis::Columns).is_err());
}

#[test]
fn exhaustive_coverage_and_disjointness() {
    common::partition_geometry(32, 12).unwrap();
}

fn image() -> impl Strategy<Value = (Tensor<f64>, usize)> {
    (1usize..=32, 1usize..=32, 1usize..=4, 1usize..=12, any::<u64>())
        .prop_map(|(h, w, c, s, seed)| (Tensor::randn([2, h, w, c], &mut Rng::new(seed)), s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_round_trip((x, s) in image()) {
        let (wins, l) = window_partition(&x, s).unwrap();
        prop_assert_eq!(wins.len(), l.n_windows * x.shape().n());
        prop_assert_eq!(window_reverse(&wins, &l).unwrap(), x);
    }

    #[test]
    fn axial_round_trip((x, s) in image()) {
        for axis in [Axis::Rows, Axis::Columns] {
            let (groups, l) = axial_partition(&x, s, axis).unwrap();
            prop_assert_eq!(axial_reverse(&groups, &l).unwrap(), x.clone());
        }
    }

    #[test]
    fn partition_preserves_values((x, s) in image()) {
        let (wins, _) = window_partition(&x, s).unwrap();
        let total: f64 = wins.iter().map(|w| w.data().iter().map(|v| v.abs()).sum::<f64>()).sum();
        let want: f64 = x.data().iter().map(|v| v.abs()).sum();
        prop_assert!((total - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn split_then_concat_is_identity(c4 in 1usize..=16, seed in any::<u64>()) {
        let c = 4 * c4;
        let mut rng = Rng::new(seed);
        let q = Tensor::<f64>::randn([1, 3, 2, c], &mut rng);
        let k = Tensor::<f64>::randn([1, 3, 2, c], &mut rng);
        let v = Tensor::<f64>::randn([1, 3, 2, c], &mut rng);
        let g = split_qkv(&q, &k, &v).unwrap();
        for (i, orig) in [q, k, v].iter().enumerate() {
            let back = concat_channels(&[&g.window[i], &g.rows[i], &g.cols[i]]).unwrap();
            prop_assert_eq!(&back, orig);
        }
    }
}
