//! Index geometry of axial-window attention: non-overlapping windows,
//! interleaved row/column groups and the channel split of Q/K/V.
//!
//! Every partition is expressed as an [`IndexMap`], so the same geometry
//! drives the plain tensor functions here and the recorded ops used by the
//! attention module. Inputs are zero-padded bottom/right to a multiple of the
//! split size; the reverse maps crop the padding away again.

use std::sync::Arc;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::ops::{self, IndexMap};
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

fn round_up(len: usize, to: usize) -> usize {
    len.div_ceil(to) * to
}

/// Non-overlapping `S × S` tiling of a (padded) feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub batch: usize,
    pub channels: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// Windows per image.
    pub n_windows: usize,
}

impl WindowLayout {
    pub fn new(shape: Shape, window: usize) -> Result<Self> {
        if window == 0 {
            return config_err("window size must be >= 1");
        }
        let [n, h, w, c] = shape.0;
        let (padded_h, padded_w) = (round_up(h, window), round_up(w, window));
        Ok(WindowLayout {
            window,
            batch: n,
            channels: c,
            orig_h: h,
            orig_w: w,
            padded_h,
            padded_w,
            n_windows: (padded_h / window) * (padded_w / window),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.padded_h / self.window, self.padded_w / self.window)
    }

    /// Row-major window index of a pixel.
    pub fn window_of(&self, y: usize, x: usize) -> usize {
        (y / self.window) * self.grid().1 + x / self.window
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn input_shape(&self) -> Shape {
        Shape::new(self.batch, self.orig_h, self.orig_w, self.channels)
    }

    fn windows_shape(&self) -> Shape {
        Shape::new(self.batch * self.n_windows, self.window, self.window, self.channels)
    }

    /// `(n, h, w, c) -> (n · n_windows, S, S, c)`.
    pub fn partition_map(&self) -> IndexMap {
        let s = self.window;
        let (nw, gc) = (self.n_windows, self.grid().1);
        IndexMap::build(self.input_shape(), self.windows_shape(), |[b, y, x, k]| {
            let (img, win) = (b / nw, b % nw);
            let (sy, sx) = ((win / gc) * s + y, (win % gc) * s + x);
            (sy < self.orig_h && sx < self.orig_w).then_some([img, sy, sx, k])
        })
    }

    /// `(n · n_windows, S, S, c) -> (n, h, w, c)`, dropping the padding.
    pub fn reverse_map(&self) -> IndexMap {
        let s = self.window;
        IndexMap::build(self.windows_shape(), self.input_shape(), |[img, y, x, k]| {
            Some([img * self.n_windows + self.window_of(y, x), y % s, x % s, k])
        })
    }
}

/// Which spatial axis an axial group runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Rows,
    Columns,
}

/// Interleaved grouping of rows (or columns): with `G = padded_len / s`
/// groups, group `g` holds indices `g, g + G, …, g + (s − 1)·G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxialLayout {
    /// Members per group; shared by rows and columns.
    pub size: usize,
    pub axis: Axis,
    pub batch: usize,
    pub channels: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    /// Padded length of the grouped axis.
    pub padded_len: usize,
    pub n_groups: usize,
}

impl AxialLayout {
    pub fn new(shape: Shape, size: usize, axis: Axis) -> Result<Self> {
        if size == 0 {
            return config_err("axial group size must be >= 1");
        }
        let [n, h, w, c] = shape.0;
        let len = match axis {
            Axis::Rows => h,
            Axis::Columns => w,
        };
        let padded_len = round_up(len, size);
        Ok(AxialLayout {
            size,
            axis,
            batch: n,
            channels: c,
            orig_h: h,
            orig_w: w,
            padded_len,
            n_groups: padded_len / size,
        })
    }

    /// Original indices (padded range) belonging to group `g`, in order.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.size).map(|k| g + k * self.n_groups).collect()
    }

    /// `(group, position within group)` of a row or column index.
    pub fn group_of(&self, index: usize) -> (usize, usize) {
        (index % self.n_groups, index / self.n_groups)
    }

    /// Tokens in one group.
    pub fn tokens(&self) -> usize {
        match self.axis {
            Axis::Rows => self.size * self.orig_w,
            Axis::Columns => self.orig_h * self.size,
        }
    }

    fn input_shape(&self) -> Shape {
        Shape::new(self.batch, self.orig_h, self.orig_w, self.channels)
    }

    fn groups_shape(&self) -> Shape {
        let b = self.batch * self.n_groups;
        match self.axis {
            Axis::Rows => Shape::new(b, self.size, self.orig_w, self.channels),
            Axis::Columns => Shape::new(b, self.orig_h, self.size, self.channels),
        }
    }

    /// `(n, h, w, c) -> (n · G, s, w, c)` for rows, `(n · G, h, s, c)` for
    /// columns.
    pub fn partition_map(&self) -> IndexMap {
        let g_count = self.n_groups;
        IndexMap::build(self.input_shape(), self.groups_shape(), |[b, y, x, k]| {
            let (img, g) = (b / g_count, b % g_count);
            match self.axis {
                Axis::Rows => {
                    let row = g + y * g_count;
                    (row < self.orig_h).then_some([img, row, x, k])
                }
                Axis::Columns => {
                    let col = g + x * g_count;
                    (col < self.orig_w).then_some([img, y, col, k])
                }
            }
        })
    }

    pub fn reverse_map(&self) -> IndexMap {
        let g_count = self.n_groups;
        IndexMap::build(self.groups_shape(), self.input_shape(), |[img, y, x, k]| {
            Some(match self.axis {
                Axis::Rows => {
                    let (g, pos) = self.group_of(y);
                    [img * g_count + g, pos, x, k]
                }
                Axis::Columns => {
                    let (g, pos) = self.group_of(x);
                    [img * g_count + g, y, pos, k]
                }
            })
        })
    }
}

/// Splits `x` into zero-padded `S × S` windows in row-major window order
/// (image-major when the batch is larger than one).
pub fn window_partition<T: Element>(x: &Tensor<T>, window: usize) -> Result<(Vec<Tensor<T>>, WindowLayout)> {
    let layout = WindowLayout::new(x.shape(), window)?;
    let all = ops::gather(x, &layout.partition_map())?;
    Ok((all.unbatch(), layout))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(windows: &[Tensor<T>], layout: &WindowLayout) -> Result<Tensor<T>> {
    let expected = layout.batch * layout.n_windows;
    if windows.len() != expected {
        return dim_err(format!("window_reverse: {} windows, layout has {expected}", windows.len()));
    }
    ops::gather(&Tensor::stack(windows)?, &layout.reverse_map())
}

/// Splits `x` into interleaved row or column groups.
pub fn axial_partition<T: Element>(
    x: &Tensor<T>,
    size: usize,
    axis: Axis,
) -> Result<(Vec<Tensor<T>>, AxialLayout)> {
    let layout = AxialLayout::new(x.shape(), size, axis)?;
    let all = ops::gather(x, &layout.partition_map())?;
    Ok((all.unbatch(), layout))
}

/// Inverse of [`axial_partition`].
pub fn axial_reverse<T: Element>(groups: &[Tensor<T>], layout: &AxialLayout) -> Result<Tensor<T>> {
    let expected = layout.batch * layout.n_groups;
    if groups.len() != expected {
        return dim_err(format!("axial_reverse: {} groups, layout has {expected}", groups.len()));
    }
    ops::gather(&Tensor::stack(groups)?, &layout.reverse_map())
}

/// Channel widths of the window group and the two axial groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSplit {
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ChannelSplit {
    /// `c/2` window channels, `c/4` row channels, `c/4` column channels.
    pub fn halves(c: usize) -> Result<Self> {
        if c == 0 || !c.is_multiple_of(4) {
            return config_err(format!("channel count {c} is not divisible by 4"));
        }
        Ok(ChannelSplit { window: c / 2, rows: c / 4, cols: c / 4 })
    }

    pub fn total(&self) -> usize {
        self.window + self.rows + self.cols
    }

    /// `(start, len)` ranges in window, rows, columns order. Empty groups
    /// have `len == 0`.
    pub fn ranges(&self) -> [(usize, usize); 3] {
        [(0, self.window), (self.window, self.rows), (self.window + self.rows, self.cols)]
    }
}

/// Q/K/V triples for each attention group.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvGroups<T> {
    pub window: [Tensor<T>; 3],
    pub rows: [Tensor<T>; 3],
    pub cols: [Tensor<T>; 3],
}

/// Channel split of the projected queries, keys and values: `[0, c/2)` to
/// the window group, `[c/2, 3c/4)` to axial rows, `[3c/4, c)` to axial
/// columns.
pub fn split_qkv<T: Element>(xq: &Tensor<T>, xk: &Tensor<T>, xv: &Tensor<T>) -> Result<QkvGroups<T>> {
    if xq.shape() != xk.shape() || xq.shape() != xv.shape() {
        return dim_err("split_qkv: q, k and v shapes differ");
    }
    let split = ChannelSplit::halves(xq.shape().c())?;
    let [wr, rr, cr] = split.ranges();
    let part = |(s, l): (usize, usize)| -> Result<[Tensor<T>; 3]> {
        Ok([ops::slice_channels(xq, s, l)?, ops::slice_channels(xk, s, l)?, ops::slice_channels(xv, s, l)?])
    };
    Ok(QkvGroups { window: part(wr)?, rows: part(rr)?, cols: part(cr)? })
}

/// Exact channel concatenation in argument order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    ops::concat_channels(parts)
}

/// Recorded counterpart of [`window_partition`]: returns the stacked
/// `(n · n_windows, S, S, c)` windows.
pub fn record_window_partition<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    window: usize,
) -> Result<(Var, WindowLayout)> {
    let layout = WindowLayout::new(g.shape(x), window)?;
    let v = g.gather(x, Arc::new(layout.partition_map()))?;
    Ok((v, layout))
}

pub fn record_window_reverse<T: Element>(
    g: &mut Graph<T>,
    windows: Var,
    layout: &WindowLayout,
) -> Result<Var> {
    g.gather(windows, Arc::new(layout.reverse_map()))
}

pub fn record_axial_partition<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    size: usize,
    axis: Axis,
) -> Result<(Var, AxialLayout)> {
    let layout = AxialLayout::new(g.shape(x), size, axis)?;
    let v = g.gather(x, Arc::new(layout.partition_map()))?;
    Ok((v, layout))
}

pub fn record_axial_reverse<T: Element>(g: &mut Graph<T>, groups: Var, layout: &AxialLayout) -> Result<Var> {
    g.gather(groups, Arc::new(layout.reverse_map()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn rand(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut Rng::new(seed))
    }

    #[test]
    fn window_counts() {
        let x = rand([1, 14, 14, 3], 0);
        let (ws, l) = window_partition(&x, 7).unwrap();
        assert_eq!(ws.len(), 4);
        assert!(ws.iter().all(|w| w.shape() == Shape::new(1, 7, 7, 3)));
        assert_eq!(l.n_windows, 4);

        let x = rand([1, 7, 7, 2], 1);
        let (ws, _) = window_partition(&x, 7).unwrap();
        assert_eq!(ws, vec![x]);
    }

    #[test]
    fn window_padding_is_zero() {
        let x = Tensor::<f64>::ones([1, 15, 15, 1]);
        let (ws, l) = window_partition(&x, 7).unwrap();
        assert_eq!((l.padded_h, l.padded_w, ws.len()), (21, 21, 9));
        // last window covers rows/cols 14..21: only (14, 14) is real
        let last = &ws[8];
        assert_eq!(last.sum(), 1.0);
        assert_eq!(last.at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn window_round_trips() {
        for (shape, s) in [([1, 14, 14, 8], 7), ([2, 15, 15, 4], 7), ([1, 5, 5, 3], 5)] {
            let x = rand(shape, 2);
            let (ws, l) = window_partition(&x, s).unwrap();
            assert_eq!(window_reverse(&ws, &l).unwrap(), x);
        }
    }

    #[test]
    fn window_reverse_count_mismatch() {
        let x = rand([1, 8, 8, 1], 3);
        let (mut ws, l) = window_partition(&x, 4).unwrap();
        ws.pop();
        assert!(matches!(window_reverse(&ws, &l), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn axial_interleaving() {
        let x = Tensor::<f64>::from_fn([1, 8, 3, 1], |[_, y, _, _]| y as f64);
        let (gs, l) = axial_partition(&x, 2, Axis::Rows).unwrap();
        assert_eq!(gs.len(), 4);
        assert_eq!(l.members(0), vec![0, 4]);
        assert_eq!(gs[0].at(0, 0, 0, 0), 0.0);
        assert_eq!(gs[0].at(0, 1, 0, 0), 4.0);

        let x = Tensor::<f64>::from_fn([1, 7, 2, 1], |[_, y, _, _]| y as f64);
        let (gs, _) = axial_partition(&x, 7, Axis::Rows).unwrap();
        assert_eq!(gs, vec![x]);

        let x = rand([1, 10, 3, 2], 4);
        let (gs, l) = axial_partition(&x, 4, Axis::Rows).unwrap();
        assert_eq!((l.padded_len, l.n_groups, gs.len()), (12, 3, 3));
        assert!(gs.iter().all(|g| g.shape() == Shape::new(1, 4, 3, 2)));
    }

    #[test]
    fn axial_columns_mirror_rows() {
        let x = Tensor::<f64>::from_fn([1, 3, 8, 1], |[_, _, xx, _]| xx as f64);
        let (gs, l) = axial_partition(&x, 2, Axis::Columns).unwrap();
        assert_eq!(gs.len(), 4);
        assert_eq!(gs[1].shape(), Shape::new(1, 3, 2, 1));
        assert_eq!(gs[1].at(0, 2, 1, 0), 5.0);
        assert_eq!(axial_reverse(&gs, &l).unwrap(), x);
    }

    #[test]
    fn axial_round_trips() {
        for (shape, s, axis) in [
            ([1, 8, 5, 3], 2, Axis::Rows),
            ([1, 7, 7, 2], 7, Axis::Columns),
            ([2, 10, 9, 2], 4, Axis::Rows),
            ([2, 9, 10, 2], 4, Axis::Columns),
        ] {
            let x = rand(shape, 5);
            let (gs, l) = axial_partition(&x, s, axis).unwrap();
            assert_eq!(axial_reverse(&gs, &l).unwrap(), x);
        }
    }

    #[test]
    fn split_widths() {
        let x = rand([1, 2, 2, 64], 6);
        let g = split_qkv(&x, &x, &x).unwrap();
        assert_eq!([g.window[0].shape().c(), g.rows[0].shape().c(), g.cols[0].shape().c()], [32, 16, 16]);
        let x = rand([1, 1, 1, 4], 7);
        let g = split_qkv(&x, &x, &x).unwrap();
        assert_eq!([g.window[1].shape().c(), g.rows[1].shape().c(), g.cols[1].shape().c()], [2, 1, 1]);
        let bad = rand([1, 1, 1, 6], 8);
        assert!(matches!(split_qkv(&bad, &bad, &bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn concat_is_associative_and_rejects_mismatch() {
        let a = rand([1, 3, 3, 2], 9);
        let b = rand([1, 3, 3, 1], 10);
        let c = rand([1, 3, 3, 3], 11);
        let ab = concat_channels(&[&a, &b]).unwrap();
        let bc = concat_channels(&[&b, &c]).unwrap();
        assert_eq!(concat_channels(&[&ab, &c]).unwrap(), concat_channels(&[&a, &bc]).unwrap());
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let d = rand([1, 2, 3, 1], 12);
        assert!(matches!(concat_channels(&[&a, &d]), Err(crate::Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(c4 in 1usize..6, h in 1usize..4, w in 1usize..4, seed in 0u64..100) {
            let x = rand([1, h, w, 4 * c4], seed);
            let g = split_qkv(&x, &x, &x).unwrap();
            let back = concat_channels(&[&g.window[2], &g.rows[2], &g.cols[2]]).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn partitions_invert(h in 1usize..20, w in 1usize..20, s in 1usize..9, seed in 0u64..100) {
            let x = rand([1, h, w, 2], seed);
            let (ws, l) = window_partition(&x, s).unwrap();
            prop_assert_eq!(window_reverse(&ws, &l).unwrap(), x.clone());
            for axis in [Axis::Rows, Axis::Columns] {
                let (gs, l) = axial_partition(&x, s, axis).unwrap();
                prop_assert_eq!(axial_reverse(&gs, &l).unwrap(), x.clone());
            }
        }
    }
}
