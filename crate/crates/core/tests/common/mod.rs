//! Reference implementations written directly from the definitions, sharing
//! no code with the library kernels.
#![allow(dead_code)]

use axwin::attention::{AttentionWeights, AxWinParams};
use axwin::model::VariantConfig;
use axwin::tensor::Rng;
use axwin::Tensor;

/// `(m × k) · (k × p)` with three nested loops.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// Sliding-window cross-correlation with zero padding `pad` on every side.
/// Weight layout `(kh, kw, c_in/groups, c_out)`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, groups: usize, pad: usize) -> Tensor<f64> {
    let [n, h, wd, cin] = x.shape().0;
    let [kh, kw, cig, cout] = w.shape().0;
    let cog = cout / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    assert_eq!(cig * groups, cin);
    Tensor::from_fn([n, oh, ow, cout], |[b, oy, ox, o]| {
        let grp = o / cog;
        let mut acc = 0.0;
        for dy in 0..kh {
            for dx in 0..kw {
                let iy = (oy * stride + dy) as isize - pad as isize;
                let ix = (ox * stride + dx) as isize - pad as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                    continue;
                }
                for ci in 0..cig {
                    acc += x.at(b, iy as usize, ix as usize, grp * cig + ci) * w.at(dy, dx, ci, o);
                }
            }
        }
        acc
    })
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// One output sample of a ×2 half-pixel bilinear upsample along an axis of
/// length `len`: source coordinate `(o + 0.5) / 2 − 0.5`, clamped to the edge.
pub fn bilinear_1d(src: &[f64], o: usize) -> f64 {
    let len = src.len();
    let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    let t = s - lo as f64;
    src[lo] * (1.0 - t) + src[hi] * t
}

/// Attention over `tokens` rows of width `width`, written as an explicit
/// double loop over query and key tokens.
pub fn mhsa(q: &[f64], k: &[f64], v: &[f64], tokens: usize, width: usize, heads: usize) -> Vec<f64> {
    let d = width / heads;
    let mut out = vec![0.0; tokens * width];
    for h in 0..heads {
        for i in 0..tokens {
            let logits: Vec<f64> = (0..tokens)
                .map(|j| {
                    let dot: f64 = (0..d).map(|e| q[i * width + h * d + e] * k[j * width + h * d + e]).sum();
                    dot / (d as f64).sqrt()
                })
                .collect();
            let p = softmax(&logits);
            for e in 0..d {
                out[i * width + h * d + e] = (0..tokens).map(|j| p[j] * v[j * width + h * d + e]).sum();
            }
        }
    }
    out
}

/// Parameters of one block of width `c` and MLP ratio `r`.
pub fn block_params(c: usize, r: usize) -> usize {
    let cpe = 9 * c + c;
    let norms = 2 * (2 * c);
    let attn = (c * 3 * c + 3 * c) + (c * c + c);
    let hidden = r * c;
    let icffn = (c * hidden + hidden) + (9 * hidden + hidden) + (hidden * c + c);
    cpe + norms + attn + icffn
}

/// Parameters of an MSPE mapping `c_in` to `2·c_in` with `b` branches:
/// `b(b+1)/2` depth-wise 3×3 convs, `b − 1` fusion steps (depth-wise 3×3
/// plus 1×1) and one 1×1 projection.
pub fn mspe_params(c_in: usize, b: usize) -> usize {
    let c = 2 * c_in;
    let dw = 9 * c + c;
    let pw = c * c + c;
    b * (b + 1) / 2 * dw + (b - 1) * (dw + pw) + pw
}

/// Closed-form parameter total of a variant.
pub fn variant_params(v: &VariantConfig) -> usize {
    let c0 = v.stem_channels;
    let stem = (9 * 3 * c0 + c0) + 2 * (9 * c0 * c0 + c0);
    let branches = [4, 3, 2, 1];
    let mut total = stem;
    let mut prev = c0;
    for (i, s) in v.stages.iter().enumerate() {
        total += mspe_params(prev, branches[i]);
        total += s.depth * block_params(s.channels, s.expand_ratio);
        prev = s.channels;
    }
    total + 2 * prev + prev * v.num_classes + v.num_classes
}

/// Stem multiply-accumulates at `h × w`: one stride-2 3×3 conv from 3
/// channels, two stride-1 3×3 convs and two GELUs at half resolution.
pub fn stem_macs(c0: usize, h: usize, w: usize) -> u64 {
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let px = (oh * ow) as u64;
    let c0 = c0 as u64;
    px * 9 * 3 * c0 + 2 * px * 9 * c0 * c0 + 2 * px * c0
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12)).fold(0.0, f64::max)
}

pub fn weights(c: usize, rng: &mut Rng) -> AttentionWeights<f64> {
    AttentionWeights {
        qkv_w: Tensor::randn([1, 1, c, 3 * c], rng).map(|v| 0.3 * v),
        qkv_b: Tensor::randn([1, 1, 1, 3 * c], rng).map(|v| 0.1 * v),
        proj_w: Tensor::randn([1, 1, c, c], rng).map(|v| 0.3 * v),
        proj_b: Tensor::randn([1, 1, 1, c], rng).map(|v| 0.1 * v),
    }
}

fn linear(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape().w(), w.shape().c());
    let mut y = matmul(x, w.data(), rows, cin, cout);
    for r in 0..rows {
        for o in 0..cout {
            y[r * cout + o] += b.data()[o];
        }
    }
    y
}

fn columns(x: &[f64], rows: usize, stride: usize, start: usize, len: usize) -> Vec<f64> {
    (0..rows).flat_map(|r| x[r * stride + start..r * stride + start + len].to_vec()).collect()
}

/// Global attention run separately on the window, row and column channel
/// groups, with the library's head allocation.
pub fn per_group_global(x: &Tensor<f64>, p: &AxWinParams, w: &AttentionWeights<f64>) -> Vec<f64> {
    let c = p.dim;
    let t = x.shape().rows();
    let qkv = linear(x.data(), t, &w.qkv_w, &w.qkv_b);
    let (cw, cr) = (c / 2, c / 4);
    let groups = [(0, cw, p.alloc.window), (cw, cr, p.alloc.rows), (cw + cr, cr, p.alloc.cols)];
    let mut merged = vec![0.0; t * c];
    for (start, len, heads) in groups {
        let heads = heads.expect("axwin mode uses every branch").heads;
        let q = columns(&qkv, t, 3 * c, start, len);
        let k = columns(&qkv, t, 3 * c, c + start, len);
        let v = columns(&qkv, t, 3 * c, 2 * c + start, len);
        let o = mhsa(&q, &k, &v, t, len, heads);
        for r in 0..t {
            merged[r * c + start..r * c + start + len].copy_from_slice(&o[r * len..(r + 1) * len]);
        }
    }
    linear(&merged, t, &w.proj_w, &w.proj_b)
}

/// Enumerates every `h, w ≤ max_extent` and split size `≤ max_split`:
/// each padded pixel must occupy exactly one window slot, each padded
/// row/column index exactly one axial slot, and partition/reverse must
/// round-trip bit-exactly. Returns the number of cases.
pub fn partition_geometry(max_extent: usize, max_split: usize) -> Result<usize, String> {
    use axwin::partition::{
        axial_partition, axial_reverse, window_partition, window_reverse, AxialLayout, Axis, WindowLayout,
    };
    use axwin::Shape;
    let mut cases = 0;
    let mut rng = Rng::new(0);
    for h in 1..=max_extent {
        for w in 1..=max_extent {
            let x = Tensor::<f64>::randn([1, h, w, 2], &mut rng);
            for s in 1..=max_split {
                let wl = WindowLayout::new(Shape::new(1, h, w, 1), s).map_err(|e| e.to_string())?;
                let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
                if (wl.padded_h, wl.padded_w) != (ph, pw) {
                    return Err(format!("window padding h={h} w={w} S={s}"));
                }
                let mut hits = vec![0u32; wl.n_windows * s * s];
                for y in 0..ph {
                    for xx in 0..pw {
                        hits[wl.window_of(y, xx) * s * s + (y % s) * s + xx % s] += 1;
                    }
                }
                if hits.iter().any(|&n| n != 1) {
                    return Err(format!("window coverage h={h} w={w} S={s}"));
                }
                let (wins, l) = window_partition(&x, s).map_err(|e| e.to_string())?;
                if window_reverse(&wins, &l).map_err(|e| e.to_string())? != x {
                    return Err(format!("window round trip h={h} w={w} S={s}"));
                }

                for (axis, len) in [(Axis::Rows, h), (Axis::Columns, w)] {
                    let al = AxialLayout::new(Shape::new(1, h, w, 1), s, axis).map_err(|e| e.to_string())?;
                    if al.padded_len != len.div_ceil(s) * s {
                        return Err(format!("axial padding h={h} w={w} s={s} {axis:?}"));
                    }
                    let mut seen = vec![0u32; al.padded_len];
                    for g in 0..al.n_groups {
                        let m = al.members(g);
                        if m.len() != s {
                            return Err(format!("axial group size h={h} w={w} s={s} {axis:?}"));
                        }
                        for idx in m {
                            seen[idx] += 1;
                        }
                    }
                    if seen.iter().any(|&n| n != 1) {
                        return Err(format!("axial coverage h={h} w={w} s={s} {axis:?}"));
                    }
                    let (groups, l) = axial_partition(&x, s, axis).map_err(|e| e.to_string())?;
                    if axial_reverse(&groups, &l).map_err(|e| e.to_string())? != x {
                        return Err(format!("axial round trip h={h} w={w} s={s} {axis:?}"));
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}
