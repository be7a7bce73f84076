//! Multi-head self-attention and the axial-window assembly.
//!
//! The fused `c → 3c` projection is sliced along channels into a window
//! group (`c/2`), a row group (`c/4`) and a column group (`c/4`). The window
//! group attends inside non-overlapping `S × S` tiles; the row and column
//! groups attend inside interleaved axial groups of `s` rows or columns. The
//! three outputs are concatenated (window, rows, columns) and projected back
//! to `c` channels.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::partition::{self, Axis, ChannelSplit};
use crate::tensor::ops::IndexMap;
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

/// Which attention groups receive channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Window half plus row and column quarters.
    #[default]
    Axwin,
    /// Every channel attends inside windows.
    Window,
    /// Half the channels attend along rows, half along columns.
    Axial,
}

impl std::str::FromStr for AttentionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axwin" => Ok(AttentionMode::Axwin),
            "window" => Ok(AttentionMode::Window),
            "axial" => Ok(AttentionMode::Axial),
            other => Err(format!("unknown attention mode `{other}` (expected axwin, window or axial)")),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Axwin => "axwin",
            AttentionMode::Window => "window",
            AttentionMode::Axial => "axial",
        })
    }
}

/// Head geometry of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaParams {
    pub heads: usize,
    pub head_dim: usize,
}

impl MhsaParams {
    pub fn new(width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
            return config_err(format!("{width} channels cannot be split into {heads} heads"));
        }
        Ok(MhsaParams { heads, head_dim: width / heads })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Channel widths and head counts of the three attention groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadAllocation {
    pub split: ChannelSplit,
    pub window: Option<MhsaParams>,
    pub rows: Option<MhsaParams>,
    pub cols: Option<MhsaParams>,
}

impl HeadAllocation {
    /// Window group gets `max(1, H/2)` heads, each axial group `max(1, H/4)`.
    /// The single-group modes hand all heads of a group to it.
    pub fn new(channels: usize, heads: usize, mode: AttentionMode) -> Result<Self> {
        if heads == 0 {
            return config_err("attention needs at least one head");
        }
        let half = (heads / 2).max(1);
        let quarter = (heads / 4).max(1);
        let (split, hw, hr) = match mode {
            AttentionMode::Axwin => (ChannelSplit::halves(channels)?, half, quarter),
            AttentionMode::Window => (ChannelSplit { window: channels, rows: 0, cols: 0 }, heads, 0),
            AttentionMode::Axial => {
                if channels == 0 || !channels.is_multiple_of(2) {
                    return config_err(format!("axial mode needs even channels, got {channels}"));
                }
                (ChannelSplit { window: 0, rows: channels / 2, cols: channels / 2 }, 0, half)
            }
        };
        let group = |width: usize, heads: usize| -> Result<Option<MhsaParams>> {
            if width == 0 {
                Ok(None)
            } else {
                MhsaParams::new(width, heads).map(Some)
            }
        };
        Ok(HeadAllocation {
            split,
            window: group(split.window, hw)?,
            rows: group(split.rows, hr)?,
            cols: group(split.cols, hr)?,
        })
    }
}

/// Records multi-head attention over `(B, 1, T, W)` queries, keys and values.
/// Each head computes `softmax(q·kᵀ·scale)·v`; heads are concatenated back
/// along channels.
pub fn record_mhsa<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var, p: MhsaParams) -> Result<Var> {
    let s = g.shape(q);
    if g.shape(k) != s || g.shape(v) != s {
        return dim_err(format!("mhsa: q {} k {} v {}", s, g.shape(k), g.shape(v)));
    }
    if s.h() != 1 {
        return dim_err(format!("mhsa expects (B, 1, T, W) tokens, got {s}"));
    }
    if s.c() != p.width() {
        return config_err(format!("mhsa: width {} but {} heads of {}", s.c(), p.heads, p.head_dim));
    }
    let (b, t) = (s.n(), s.w());
    let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        if p.heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, [b, t, p.heads, p.head_dim])?;
        let map = IndexMap::permute(g.shape(x), [0, 2, 1, 3]);
        g.gather(x, map.into())
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.batched_matmul(qh, kh, false, true)?;
    let scores = g.scale(scores, p.scale())?;
    let attn = g.softmax(scores)?;
    let out = g.batched_matmul(attn, vh, false, false)?;
    if p.heads == 1 {
        return Ok(out);
    }
    let map = IndexMap::permute(g.shape(out), [0, 2, 1, 3]);
    let out = g.gather(out, map.into())?;
    g.reshape(out, [b, 1, t, p.width()])
}

/// Multi-head attention on plain tensors. Tokens are the `n·h·w` positions
/// of each input, so `(1, 1, T, W)` and `(1, T, 1, W)` are both accepted.
pub fn mhsa<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, p: MhsaParams) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let tokens = Shape::new(1, 1, q.shape().rows(), q.shape().c());
    let q = g.input(q.reshape(tokens)?);
    let k = g.input(k.reshape(tokens)?);
    let v = g.input(v.reshape(tokens)?);
    let out = record_mhsa(&mut g, q, k, v, p)?;
    Ok(g.value(out).clone())
}

/// Attention inside non-overlapping `window × window` tiles. Inputs are
/// `(n, h, w, c)`; padding is added and removed internally.
pub fn record_window_branch<T: Element>(
    g: &mut Graph<T>,
    qkv: [Var; 3],
    window: usize,
    p: MhsaParams,
) -> Result<Var> {
    let mut parts = [qkv[0]; 3];
    let mut layout = None;
    for (slot, x) in parts.iter_mut().zip(qkv) {
        let (wins, l) = partition::record_window_partition(g, x, window)?;
        let ws = g.shape(wins);
        *slot = g.reshape(wins, [ws.n(), 1, l.tokens(), ws.c()])?;
        layout = Some(l);
    }
    let layout = layout.expect("three inputs");
    let out = record_mhsa(g, parts[0], parts[1], parts[2], p)?;
    let out =
        g.reshape(out, [layout.batch * layout.n_windows, layout.window, layout.window, layout.channels])?;
    partition::record_window_reverse(g, out, &layout)
}

fn record_axial_group<T: Element>(
    g: &mut Graph<T>,
    qkv: [Var; 3],
    size: usize,
    axis: Axis,
    p: MhsaParams,
) -> Result<Var> {
    let mut parts = [qkv[0]; 3];
    let mut layout = None;
    for (slot, x) in parts.iter_mut().zip(qkv) {
        let (groups, l) = partition::record_axial_partition(g, x, size, axis)?;
        let gs = g.shape(groups);
        *slot = g.reshape(groups, [gs.n(), 1, l.tokens(), gs.c()])?;
        layout = Some(l);
    }
    let layout = layout.expect("three inputs");
    let out = record_mhsa(g, parts[0], parts[1], parts[2], p)?;
    let b = layout.batch * layout.n_groups;
    let shape = match axis {
        Axis::Rows => [b, layout.size, layout.orig_w, layout.channels],
        Axis::Columns => [b, layout.orig_h, layout.size, layout.channels],
    };
    let out = g.reshape(out, shape)?;
    partition::record_axial_reverse(g, out, &layout)
}

/// Row attention on `rows` and column attention on `cols`, each with its
/// own heads, concatenated `(rows, cols)` along channels.
pub fn record_axial_branch<T: Element>(
    g: &mut Graph<T>,
    rows: [Var; 3],
    cols: [Var; 3],
    size: usize,
    row_heads: MhsaParams,
    col_heads: MhsaParams,
) -> Result<Var> {
    let r = record_axial_group(g, rows, size, Axis::Rows, row_heads)?;
    let c = record_axial_group(g, cols, size, Axis::Columns, col_heads)?;
    g.concat(&[r, c])
}

/// Configuration of one axial-window attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxWinParams {
    pub dim: usize,
    pub heads: usize,
    /// Window edge `S`.
    pub window: usize,
    /// Axial group size `s`.
    pub axial: usize,
    pub mode: AttentionMode,
    pub alloc: HeadAllocation,
}

impl AxWinParams {
    pub fn new(dim: usize, heads: usize, window: usize, axial: usize, mode: AttentionMode) -> Result<Self> {
        if window == 0 || axial == 0 {
            return config_err("split sizes must be >= 1");
        }
        Ok(AxWinParams { dim, heads, window, axial, mode, alloc: HeadAllocation::new(dim, heads, mode)? })
    }
}

/// Projection weights of an attention layer, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `(1, 1, c, 3c)`
    pub qkv_w: Var,
    pub qkv_b: Var,
    /// `(1, 1, c, c)`
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Projection weights as plain tensors.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl<T: Element> AttentionWeights<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> AttentionVars {
        AttentionVars {
            qkv_w: g.param(self.qkv_w.clone()),
            qkv_b: g.param(self.qkv_b.clone()),
            proj_w: g.param(self.proj_w.clone()),
            proj_b: g.param(self.proj_b.clone()),
        }
    }
}

/// Records the full attention layer on an `(n, h, w, c)` input; the output
/// has the input's shape.
pub fn record_axwin_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &AxWinParams,
    w: &AttentionVars,
) -> Result<Var> {
    let c = g.shape(x).c();
    if c != p.dim {
        return dim_err(format!("attention built for {} channels, got {c}", p.dim));
    }
    let qkv = g.linear(x, w.qkv_w, w.qkv_b)?;
    let slice = |g: &mut Graph<T>, (start, len): (usize, usize)| -> Result<[Var; 3]> {
        Ok([
            g.slice_channels(qkv, start, len)?,
            g.slice_channels(qkv, c + start, len)?,
            g.slice_channels(qkv, 2 * c + start, len)?,
        ])
    };
    let [wr, rr, cr] = p.alloc.split.ranges();
    let mut outputs = Vec::with_capacity(2);
    if let Some(heads) = p.alloc.window {
        let qkv_w = slice(g, wr)?;
        outputs.push(record_window_branch(g, qkv_w, p.window, heads)?);
    }
    if let (Some(rh), Some(ch)) = (p.alloc.rows, p.alloc.cols) {
        let rows = slice(g, rr)?;
        let cols = slice(g, cr)?;
        outputs.push(record_axial_branch(g, rows, cols, p.axial, rh, ch)?);
    }
    let merged = g.concat(&outputs)?;
    g.linear(merged, w.proj_w, w.proj_b)
}

/// Plain-tensor wrapper around [`record_axwin_attention`].
pub fn axwin_attention<T: Element>(
    x: &Tensor<T>,
    p: &AxWinParams,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let vars = w.bind(&mut g);
    let out = record_axwin_attention(&mut g, xv, p, &vars)?;
    Ok(g.value(out).clone())
}
