//! Self-checks run by `axwin check`. Each property produces one
//! [`Verdict`]; a suite passes when all of its verdicts pass.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{attention_flops_compare, count_flops};
use crate::attention::{
    axwin_attention, mhsa, record_axial_branch, record_axwin_attention, record_mhsa, record_window_branch,
    AttentionMode, AttentionWeights, AxWinParams, MhsaParams,
};
use crate::error::Result;
use crate::model::layers::{Block, Cpe, Icffn, Mspe, Stem};
use crate::model::{build_variant, ParamLayout};
use crate::partition::{
    axial_partition, axial_reverse, concat_channels, split_qkv, window_partition, window_reverse,
    AxialLayout, Axis, WindowLayout,
};
use crate::tensor::gradcheck::{check_graph, finite_diff_at, max_rel_error};
use crate::tensor::graph::Op;
use crate::tensor::ops::{self, IndexMap, Padding, ZERO_SLOT};
use crate::tensor::{macs, Graph, Rng, Shape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for kernels and blocks.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative-error bound for the full backbone spot check.
pub const BACKBONE_GRAD_TOL: f64 = 1e-3;
/// Max-abs bound of the global-degeneracy oracle.
pub const EQUIV_TOL: f64 = 1e-5;
/// Random seeds per gradient and equivalence property.
pub const SEEDS: u64 = 10;
/// Largest extent and split size of the exhaustive partition checks.
pub const MAX_EXTENT: usize = 32;
pub const MAX_SPLIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Partition,
    Grad,
    Equiv,
    Flops,
    All,
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "partition" => Ok(Suite::Partition),
            "grad" => Ok(Suite::Grad),
            "equiv" => Ok(Suite::Equiv),
            "flops" => Ok(Suite::Flops),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite `{other}` (expected partition, grad, equiv, flops or all)")),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Partition => "partition",
            Suite::Grad => "grad",
            Suite::Equiv => "equiv",
            Suite::Flops => "flops",
            Suite::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    /// Measured quantity, when the property is numeric.
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl Verdict {
    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Verdict { name: name.to_string(), passed, value: None, tolerance: None, detail: detail.into() }
    }

    fn bound(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.to_string(),
            passed: value <= tolerance,
            value: Some(value),
            tolerance: Some(tolerance),
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Verdict>) -> Self {
        r.unwrap_or_else(|e| Verdict::flag(name, false, format!("error: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: String,
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
}

pub fn run(suite: Suite) -> CheckReport {
    let verdicts = match suite {
        Suite::Partition => partition_suite(),
        Suite::Grad => grad_suite(),
        Suite::Equiv => equiv_suite(),
        Suite::Flops => flops_suite(),
        Suite::All => {
            let mut v = partition_suite();
            v.extend(grad_suite());
            v.extend(equiv_suite());
            v.extend(flops_suite());
            v
        }
    };
    CheckReport { suite: suite.to_string(), passed: verdicts.iter().all(|v| v.passed), verdicts }
}

// ---------------------------------------------------------------- partition

/// Every input index appears exactly once in `map`, and the remaining
/// slots are padding.
fn map_covers_once(map: &IndexMap, padded_slots: usize) -> bool {
    let mut seen = vec![0u8; map.in_shape.numel()];
    let mut zeros = 0;
    for &s in &map.src {
        if s == ZERO_SLOT {
            zeros += 1;
        } else {
            seen[s] += 1;
        }
    }
    zeros == padded_slots && seen.iter().all(|&c| c == 1)
}

fn window_coverage() -> Verdict {
    let mut cases = 0;
    for h in 1..=MAX_EXTENT {
        for w in 1..=MAX_EXTENT {
            for s in 1..=MAX_SPLIT {
                let l = WindowLayout::new(Shape::new(1, h, w, 1), s).expect("s >= 1");
                let mut slots = vec![0u8; l.n_windows * s * s];
                for y in 0..l.padded_h {
                    for x in 0..l.padded_w {
                        slots[l.window_of(y, x) * s * s + (y % s) * s + x % s] += 1;
                    }
                }
                let pad = l.padded_h * l.padded_w - h * w;
                let ok = l.padded_h.is_multiple_of(s)
                    && l.padded_h >= h
                    && l.padded_h < h + s
                    && l.padded_w.is_multiple_of(s)
                    && l.padded_w >= w
                    && l.padded_w < w + s
                    && slots.iter().all(|&c| c == 1)
                    && map_covers_once(&l.partition_map(), pad);
                if !ok {
                    return Verdict::flag("window_coverage", false, format!("h={h} w={w} S={s}"));
                }
                cases += 1;
            }
        }
    }
    Verdict::flag(
        "window_coverage",
        true,
        format!("{cases} (h, w, S) cases, every padded pixel in exactly one window slot"),
    )
}

fn axial_coverage() -> Verdict {
    let mut cases = 0;
    for h in 1..=MAX_EXTENT {
        for w in 1..=MAX_EXTENT {
            for s in 1..=MAX_SPLIT {
                for axis in [Axis::Rows, Axis::Columns] {
                    let l = AxialLayout::new(Shape::new(1, h, w, 1), s, axis).expect("s >= 1");
                    let len = if axis == Axis::Rows { h } else { w };
                    let mut slots = vec![0u8; l.n_groups * s];
                    let mut ok =
                        l.padded_len.is_multiple_of(s) && l.padded_len >= len && l.padded_len < len + s;
                    for idx in 0..l.padded_len {
                        let (g, pos) = l.group_of(idx);
                        ok &= g < l.n_groups && pos < s && l.members(g)[pos] == idx;
                        if ok {
                            slots[g * s + pos] += 1;
                        }
                    }
                    let other = if axis == Axis::Rows { w } else { h };
                    let pad = (l.padded_len - len) * other;
                    ok &= slots.iter().all(|&c| c == 1) && map_covers_once(&l.partition_map(), pad);
                    if !ok {
                        return Verdict::flag("axial_coverage", false, format!("h={h} w={w} s={s} {axis:?}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    Verdict::flag(
        "axial_coverage",
        true,
        format!("{cases} (h, w, s, axis) cases, groups disjoint with s members each"),
    )
}

fn round_trips() -> Result<Verdict> {
    let mut rng = Rng::new(0);
    let mut cases = 0;
    for h in 1..=MAX_EXTENT {
        for w in 1..=MAX_EXTENT {
            let x = Tensor::<f64>::randn([1, h, w, 2], &mut rng);
            for s in 1..=MAX_SPLIT {
                let (wins, l) = window_partition(&x, s)?;
                if window_reverse(&wins, &l)? != x {
                    return Ok(Verdict::flag("round_trips", false, format!("window h={h} w={w} S={s}")));
                }
                for axis in [Axis::Rows, Axis::Columns] {
                    let (groups, l) = axial_partition(&x, s, axis)?;
                    if axial_reverse(&groups, &l)? != x {
                        return Ok(Verdict::flag(
                            "round_trips",
                            false,
                            format!("axial h={h} w={w} s={s} {axis:?}"),
                        ));
                    }
                }
                cases += 3;
            }
        }
    }
    Ok(Verdict::flag("round_trips", true, format!("{cases} exact round trips")))
}

fn split_concat() -> Result<Verdict> {
    let mut rng = Rng::new(1);
    for c in (4..=64).step_by(4) {
        let t = || Tensor::<f64>::randn([1, 3, 2, c], &mut Rng::new(c as u64));
        let (q, k, v) = (t(), Tensor::randn([1, 3, 2, c], &mut rng), t());
        let g = split_qkv(&q, &k, &v)?;
        for (i, orig) in [&q, &k, &v].into_iter().enumerate() {
            let back = concat_channels(&[&g.window[i], &g.rows[i], &g.cols[i]])?;
            if &back != orig || g.window[i].shape().c() != c / 2 || g.rows[i].shape().c() != c / 4 {
                return Ok(Verdict::flag("split_concat", false, format!("c={c}")));
            }
        }
    }
    Ok(Verdict::flag("split_concat", true, "c = 4..64: widths c/2, c/4, c/4, exact inverse"))
}

fn partition_examples() -> Result<Verdict> {
    let x = Tensor::<f64>::ones([1, 14, 14, 1]);
    let (w14, _) = window_partition(&x, 7)?;
    let (w15, l15) = window_partition(&Tensor::<f64>::ones([1, 15, 15, 1]), 7)?;
    let rows8 = AxialLayout::new(Shape::new(1, 8, 8, 1), 2, Axis::Rows)?;
    let rows10 = AxialLayout::new(Shape::new(1, 10, 4, 1), 4, Axis::Rows)?;
    let ok = w14.len() == 4
        && l15.padded_h == 21
        && w15.len() == 9
        && w15[8].sum() == 1.0
        && rows8.n_groups == 4
        && rows8.members(0) == [0, 4]
        && rows10.padded_len == 12
        && rows10.n_groups == 3
        && rows10.members(0) == [0, 3, 6, 9];
    Ok(Verdict::flag(
        "partition_examples",
        ok,
        "14/7 -> 4 windows; 15/7 -> 9 padded windows; h=8,s=2 group 0 = {0,4}; h=10,s=4 -> 3 groups",
    ))
}

pub fn partition_suite() -> Vec<Verdict> {
    vec![
        window_coverage(),
        axial_coverage(),
        Verdict::from_result("round_trips", round_trips()),
        Verdict::from_result("split_concat", split_concat()),
        Verdict::from_result("partition_examples", partition_examples()),
    ]
}

// --------------------------------------------------------------------- grad

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    shapes: Vec<[usize; 4]>,
    build: Build,
}

fn case(
    name: &'static str,
    shapes: Vec<[usize; 4]>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase { name, shapes, build: Box::new(build) }
}

fn kernel_cases() -> Vec<GradCase> {
    vec![
        case("matmul", vec![[1, 1, 3, 4], [1, 1, 4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("batched_matmul", vec![[2, 3, 4, 5], [2, 3, 5, 4], [2, 3, 4, 5]], |g, v| {
            let ab = g.batched_matmul(v[0], v[1], false, false)?;
            let t = g.batched_matmul(ab, v[2], true, false)?;
            let u = g.batched_matmul(v[1], v[2], true, true)?;
            let w = g.batched_matmul(v[0], u, true, true)?;
            let s = g.sum(w)?;
            let t = g.sum(t)?;
            g.add(s, t)
        }),
        case("conv2d_dense", vec![[1, 5, 5, 3], [3, 3, 3, 4], [1, 1, 1, 4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1, Padding::Same)
        }),
        case("conv2d_depthwise_stride2", vec![[1, 5, 5, 4], [3, 3, 1, 4], [1, 1, 1, 4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 4, Padding::Same)
        }),
        case("conv2d_channel_multiplier", vec![[1, 6, 6, 2], [3, 3, 1, 4]], |g, v| {
            g.conv2d(v[0], v[1], None, 2, 2, Padding::Same)
        }),
        case("conv2d_valid_grouped", vec![[2, 4, 5, 4], [3, 1, 2, 6]], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 2, Padding::Valid)
        }),
        case("softmax", vec![[1, 2, 3, 5]], |g, v| g.softmax(v[0])),
        case("layer_norm", vec![[1, 3, 3, 6], [1, 1, 1, 6], [1, 1, 1, 6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("gelu", vec![[1, 2, 3, 5]], |g, v| g.gelu(v[0])),
        case("upsample2x", vec![[1, 3, 2, 2]], |g, v| g.upsample2x(v[0])),
        case("pad_crop", vec![[1, 3, 2, 2]], |g, v| {
            let p = g.pad(v[0], 5, 4)?;
            let s = g.scale(p, 1.5)?;
            g.crop(s, 2, 3)
        }),
        case("gather_permute", vec![[2, 3, 4, 2]], |g, v| {
            let map = IndexMap::permute(g.shape(v[0]), [0, 2, 1, 3]);
            g.gather(v[0], Arc::new(map))
        }),
        case("slice_concat", vec![[1, 2, 2, 6], [1, 2, 2, 2]], |g, v| {
            let s = g.slice_channels(v[0], 1, 3)?;
            g.concat(&[v[1], s, v[0]])
        }),
        case("elementwise", vec![[1, 2, 3, 4], [1, 2, 3, 4], [1, 1, 1, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[0])?;
            let s = g.scale(m, -0.7)?;
            let b = g.add_bias(s, v[2])?;
            g.reshape(b, [1, 6, 1, 4])
        }),
        case("mean_spatial", vec![[2, 3, 2, 3]], |g, v| g.mean_spatial(v[0])),
        case("cross_entropy", vec![[3, 1, 1, 4]], |g, v| g.cross_entropy(v[0], &[0, 3, 1])),
    ]
}

/// Layer parameters as leading graph inputs after `x`.
fn layer_case(
    name: &'static str,
    x: [usize; 4],
    layout: ParamLayout,
    record: impl Fn(&mut Graph<f64>, &[Var], Var) -> Result<Var> + 'static,
) -> GradCase {
    let mut shapes = vec![x];
    shapes.extend(layout.specs().iter().map(|s| s.shape.0));
    case(name, shapes, move |g, v| record(g, &v[1..], v[0]))
}

fn attention_case(name: &'static str, mode: AttentionMode) -> GradCase {
    let p = AxWinParams::new(8, 4, 2, 2, mode).expect("valid");
    case(name, vec![[1, 4, 4, 8], [1, 1, 8, 24], [1, 1, 1, 24], [1, 1, 8, 8], [1, 1, 1, 8]], move |g, v| {
        let w = crate::attention::AttentionVars { qkv_w: v[1], qkv_b: v[2], proj_w: v[3], proj_b: v[4] };
        record_axwin_attention(g, v[0], &p, &w)
    })
}

fn composed_cases() -> Vec<GradCase> {
    let mut out = vec![
        case("mhsa", vec![[2, 1, 5, 8]; 3], |g, v| record_mhsa(g, v[0], v[1], v[2], MhsaParams::new(8, 2)?)),
        attention_case("axwin_attention", AttentionMode::Axwin),
        attention_case("window_only_attention", AttentionMode::Window),
        attention_case("axial_only_attention", AttentionMode::Axial),
    ];
    let mut l = ParamLayout::new();
    let cpe = Cpe::new(&mut l, "cpe", 4);
    out.push(layer_case("cpe", [1, 4, 4, 4], l, move |g, p, x| cpe.record(g, p, x)));
    let mut l = ParamLayout::new();
    let icffn = Icffn::new(&mut l, "icffn", 8, 2);
    out.push(layer_case("icffn", [1, 4, 4, 8], l, move |g, p, x| icffn.record(g, p, x)));
    let mut l = ParamLayout::new();
    let attn = AxWinParams::new(8, 2, 2, 2, AttentionMode::Axwin).expect("valid");
    let block = Block::new(&mut l, "block", attn, 2);
    out.push(layer_case("axwin_block", [1, 4, 4, 8], l, move |g, p, x| block.record(g, p, x)));
    let mut l = ParamLayout::new();
    let mspe2 = Mspe::new(&mut l, "mspe", 2, 2).expect("valid");
    out.push(layer_case("mspe_2_branches", [1, 6, 5, 2], l, move |g, p, x| mspe2.record(g, p, x)));
    let mut l = ParamLayout::new();
    let mspe4 = Mspe::new(&mut l, "mspe", 1, 4).expect("valid");
    out.push(layer_case("mspe_4_branches", [1, 16, 16, 1], l, move |g, p, x| mspe4.record(g, p, x)));
    let mut l = ParamLayout::new();
    let stem = Stem::new(&mut l, "stem", 3, 4);
    out.push(layer_case("stem", [1, 8, 8, 3], l, move |g, p, x| stem.record(g, p, x)));
    out
}

/// Random inputs scaled so activations stay in a well-conditioned range.
fn random_inputs(shapes: &[[usize; 4]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Rng::new(seed);
    shapes.iter().map(|&s| Tensor::randn(s, &mut rng).map(|v| 0.5 * v)).collect()
}

/// Worst relative error of `case` over [`SEEDS`] random draws.
fn run_grad_case(c: &GradCase, max_probes: usize) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for seed in 0..SEEDS {
        let inputs = random_inputs(&c.shapes, seed);
        match check_graph(&inputs, &c.build, 1000 + seed, FD_STEP, max_probes) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                probed += r.probed;
            }
            Err(e) => return Verdict::flag(c.name, false, format!("error: {e}")),
        }
    }
    Verdict::bound(
        &format!("grad_{}", c.name),
        worst,
        GRAD_TOL,
        format!("{probed} probes over {SEEDS} seeds, central differences h={FD_STEP}"),
    )
}

/// Spot-checks 20 random parameter elements of the micro backbone on the
/// classifier loss at 64×64.
pub fn backbone_spot_check(seed: u64, probes: usize) -> Result<Verdict> {
    let model = build_variant("micro", 4)?;
    let params = model.init::<f64>(seed);
    let mut rng = Rng::fork(seed, "spot");
    let x = Tensor::randn([1, 64, 64, 3], &mut rng);
    let labels = [2usize];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let pv = params.bind(&mut g);
    let f = model.record(&mut g, &pv, xv)?;
    let loss = g.cross_entropy(f.logits, &labels)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let pi = rng.below(pv.len());
        let ei = rng.below(params.values()[pi].numel());
        let analytic = grads.get(pv[pi]).map_or(0.0, |t| t.data()[ei]);
        let mut probe_store = params.clone();
        let mut f = |t: &Tensor<f64>| -> Result<f64> {
            probe_store.values_mut()[pi] = t.clone();
            let out = model.forward(&probe_store, &x)?;
            Ok(ops::cross_entropy(&out.logits, &labels)?.0)
        };
        let numeric = finite_diff_at(&mut f, &params.values()[pi], FD_STEP, &[ei])?;
        worst = worst.max(max_rel_error(&[analytic], &numeric));
    }
    Ok(Verdict::bound(
        "grad_micro_backbone",
        worst,
        BACKBONE_GRAD_TOL,
        format!("{probes} random parameter elements, cross-entropy loss, 64x64 input"),
    ))
}

pub fn grad_suite() -> Vec<Verdict> {
    let mut out: Vec<Verdict> = kernel_cases().iter().map(|c| run_grad_case(c, usize::MAX)).collect();
    out.extend(composed_cases().iter().map(|c| run_grad_case(c, 48)));
    out.push(Verdict::from_result("grad_micro_backbone", backbone_spot_check(0, 20)));
    out
}

// -------------------------------------------------------------------- equiv

/// Dense single-group attention on `tokens × width` rows, written as plain
/// loops so it shares no code with the tape kernels.
pub fn naive_mhsa(q: &[f64], k: &[f64], v: &[f64], tokens: usize, width: usize, heads: usize) -> Vec<f64> {
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; tokens * width];
    for hd in 0..heads {
        for i in 0..tokens {
            let scores: Vec<f64> = (0..tokens)
                .map(|j| {
                    (0..d).map(|e| q[i * width + hd * d + e] * k[j * width + hd * d + e]).sum::<f64>() * scale
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..d {
                out[i * width + hd * d + e] =
                    (0..tokens).map(|j| ex[j] / z * v[j * width + hd * d + e]).sum();
            }
        }
    }
    out
}

fn naive_linear(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape().w(), w.shape().c());
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            out[r * cout + o] =
                b.data()[o] + (0..cin).map(|i| x[r * cin + i] * w.data()[i * cout + o]).sum::<f64>();
        }
    }
    out
}

/// Oracle for `h = w = S = s`: every group spans the whole map, so the layer
/// is plain global attention on each channel group.
pub fn global_oracle(x: &Tensor<f64>, p: &AxWinParams, w: &AttentionWeights<f64>) -> Vec<f64> {
    let c = p.dim;
    let tokens = x.shape().rows();
    let qkv = naive_linear(x.data(), tokens, &w.qkv_w, &w.qkv_b);
    let pick = |part: usize, start: usize, len: usize| -> Vec<f64> {
        (0..tokens)
            .flat_map(|t| (0..len).map(move |i| (t, i)))
            .map(|(t, i)| qkv[t * 3 * c + part * c + start + i])
            .collect()
    };
    let mut merged = vec![0.0; tokens * c];
    let groups = [
        (p.alloc.split.ranges()[0], p.alloc.window),
        (p.alloc.split.ranges()[1], p.alloc.rows),
        (p.alloc.split.ranges()[2], p.alloc.cols),
    ];
    for ((start, len), heads) in groups {
        let Some(heads) = heads else { continue };
        let o = naive_mhsa(
            &pick(0, start, len),
            &pick(1, start, len),
            &pick(2, start, len),
            tokens,
            len,
            heads.heads,
        );
        for t in 0..tokens {
            for i in 0..len {
                merged[t * c + start + i] = o[t * len + i];
            }
        }
    }
    naive_linear(&merged, tokens, &w.proj_w, &w.proj_b)
}

fn random_weights(c: usize, rng: &mut Rng) -> AttentionWeights<f64> {
    AttentionWeights {
        qkv_w: Tensor::randn([1, 1, c, 3 * c], rng).map(|v| 0.4 * v),
        qkv_b: Tensor::randn([1, 1, 1, 3 * c], rng).map(|v| 0.1 * v),
        proj_w: Tensor::randn([1, 1, c, c], rng).map(|v| 0.4 * v),
        proj_b: Tensor::randn([1, 1, 1, c], rng).map(|v| 0.1 * v),
    }
}

fn global_degeneracy() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for size in [4, 7] {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let c = 8;
            let p = AxWinParams::new(c, 4, size, size, AttentionMode::Axwin)?;
            let w = random_weights(c, &mut rng);
            let x = Tensor::randn([1, size, size, c], &mut rng);
            let got = axwin_attention(&x, &p, &w)?;
            let want = global_oracle(&x, &p, &w);
            let d = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    Ok(Verdict::bound(
        "global_degeneracy",
        worst,
        EQUIV_TOL,
        format!("h=w=S=s in {{4, 7}}, {SEEDS} seeds each, max abs difference to per-group global attention"),
    ))
}

fn single_window_is_mhsa() -> Result<Verdict> {
    let mut rng = Rng::new(3);
    let p = MhsaParams::new(6, 2)?;
    let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([1, 5, 5, 6], &mut rng)).collect();
    let mut g = Graph::new();
    let v: Vec<Var> = t.iter().map(|x| g.input(x.clone())).collect();
    let out = record_window_branch(&mut g, [v[0], v[1], v[2]], 5, p)?;
    let dense = mhsa(&t[0], &t[1], &t[2], p)?;
    let d = g.value(out).reshape(dense.shape())?.max_abs_diff(&dense);
    Ok(Verdict::bound("single_window_is_mhsa", d, 1e-12, "h=w=S=5"))
}

fn swap_windows(x: &Tensor<f64>, s: usize, a: (usize, usize), b: (usize, usize)) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |[n, y, xx, c]| {
        let (wy, wx) = (y / s, xx / s);
        let (ty, tx) = if (wy, wx) == a {
            b
        } else if (wy, wx) == b {
            a
        } else {
            (wy, wx)
        };
        x.at(n, ty * s + y % s, tx * s + xx % s, c)
    })
}

fn window_permutation() -> Result<Verdict> {
    let mut rng = Rng::new(4);
    let p = MhsaParams::new(4, 2)?;
    let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([1, 8, 8, 4], &mut rng)).collect();
    let branch = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let v: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = record_window_branch(&mut g, [v[0], v[1], v[2]], 4, p)?;
        Ok(g.value(out).clone())
    };
    let base = branch(&t)?;
    let swapped: Vec<Tensor<f64>> = t.iter().map(|x| swap_windows(x, 4, (0, 0), (1, 1))).collect();
    let got = branch(&swapped)?;
    let want = swap_windows(&base, 4, (0, 0), (1, 1));
    Ok(Verdict::flag(
        "window_permutation",
        got == want,
        "8x8, S=4: swapping windows (0,0) and (1,1) of q, k, v swaps them in the output",
    ))
}

fn axial_row_locality() -> Result<Verdict> {
    let mut rng = Rng::new(5);
    let p = MhsaParams::new(2, 1)?;
    let rows: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([1, 4, 4, 2], &mut rng)).collect();
    let run = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let v: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = record_axial_branch(&mut g, [v[0], v[1], v[2]], [v[0], v[1], v[2]], 1, p, p)?;
        let rows_only = g.slice_channels(out, 0, 2)?;
        Ok(g.value(rows_only).clone())
    };
    let base = run(&rows)?;
    let mut ok = true;
    for r in 0..4 {
        let mut pert = rows.clone();
        for t in &mut pert {
            for y in (0..4).filter(|&y| y != r) {
                for x in 0..4 {
                    for c in 0..2 {
                        let v = t.at(0, y, x, c);
                        t.set(0, y, x, c, v + 1.0);
                    }
                }
            }
        }
        let out = run(&pert)?;
        ok &= (0..4).all(|x| (0..2).all(|c| out.at(0, r, x, c) == base.at(0, r, x, c)));
    }
    Ok(Verdict::flag(
        "axial_row_locality",
        ok,
        "s=1, 4x4: row-branch output row r is unchanged when every other row is perturbed",
    ))
}

fn locality() -> Result<Verdict> {
    let mut rng = Rng::new(6);
    let c = 8;
    let p = AxWinParams::new(c, 4, 4, 2, AttentionMode::Axwin)?;
    let mut w = random_weights(c, &mut rng);
    w.proj_w = Tensor::from_fn([1, 1, c, c], |[_, _, i, j]| (i == j) as u8 as f64);
    w.proj_b = Tensor::zeros([1, 1, 1, c]);
    let x = Tensor::randn([1, 8, 8, c], &mut rng);
    let base = axwin_attention(&x, &p, &w)?;
    let (py, px) = (1, 1);
    let rows = AxialLayout::new(x.shape(), 2, Axis::Rows)?;
    let mut ok = true;
    let mut probes = 0;
    for qy in 0..8 {
        for qx in 0..8 {
            let same_window = qy / 4 == py / 4 && qx / 4 == px / 4;
            let shares_group =
                rows.group_of(qy).0 == rows.group_of(py).0 || rows.group_of(qx).0 == rows.group_of(px).0;
            if same_window || shares_group {
                continue;
            }
            let mut xp = x.clone();
            for k in 0..c {
                xp.set(0, qy, qx, k, x.at(0, qy, qx, k) + 3.0);
            }
            let out = axwin_attention(&xp, &p, &w)?;
            ok &= (0..c).all(|k| out.at(0, py, px, k) == base.at(0, py, px, k));
            probes += 1;
        }
    }
    Ok(Verdict::flag(
        "locality",
        ok && probes > 0,
        format!("8x8, S=4, s=2, identity out_proj: {probes} distant pixels leave p=(1,1) unchanged"),
    ))
}

fn zero_values() -> Result<Verdict> {
    let mut rng = Rng::new(7);
    let q = Tensor::<f64>::randn([1, 6, 5, 4], &mut rng);
    let k = Tensor::<f64>::randn([1, 6, 5, 4], &mut rng);
    let z = Tensor::<f64>::zeros([1, 6, 5, 4]);
    let p = MhsaParams::new(4, 2)?;
    let mut g = Graph::new();
    let (qv, kv, zv) = (g.input(q), g.input(k), g.input(z));
    let wb = record_window_branch(&mut g, [qv, kv, zv], 4, p)?;
    let ab = record_axial_branch(&mut g, [qv, kv, zv], [qv, kv, zv], 4, p, p)?;
    let ok = g.value(wb).data().iter().chain(g.value(ab).data()).all(|&v| v == 0.0);
    Ok(Verdict::flag("zero_values", ok, "zero v gives zero output in both branches"))
}

fn softmax_rows() -> Result<Verdict> {
    let mut rng = Rng::new(8);
    let mut worst: f64 = 0.0;
    let c = 8;
    let p = AxWinParams::new(c, 4, 3, 2, AttentionMode::Axwin)?;
    let w = random_weights(c, &mut rng);
    let mut g = Graph::new();
    let x = g.input(Tensor::randn([1, 7, 5, c], &mut rng));
    let vars = w.bind(&mut g);
    record_axwin_attention(&mut g, x, &p, &vars)?;
    let big = Tensor::<f64>::randn([1, 3, 4, 9], &mut rng).map(|v| 1e4 * v);
    let extra = ops::softmax(&big);
    let mut rows_checked = 0;
    let mut check = |t: &Tensor<f64>| {
        for row in t.data().chunks(t.shape().c()) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows_checked += 1;
        }
    };
    for v in g.vars() {
        if matches!(g.op(v), Op::Softmax) {
            check(g.value(v));
        }
    }
    check(&extra);
    Ok(Verdict::bound(
        "softmax_rows",
        worst,
        1e-6,
        format!("{rows_checked} attention rows in every branch plus magnitude-1e4 inputs"),
    ))
}

fn shape_preservation() -> Result<Verdict> {
    let mut rng = Rng::new(9);
    let c = 8;
    for mode in [AttentionMode::Axwin, AttentionMode::Window, AttentionMode::Axial] {
        let p = AxWinParams::new(c, 4, 7, 7, mode)?;
        let w = random_weights(c, &mut rng);
        for (h, wd) in [(7, 7), (14, 14), (15, 13)] {
            let x = Tensor::randn([1, h, wd, c], &mut rng);
            if axwin_attention(&x, &p, &w)?.shape() != x.shape() {
                return Ok(Verdict::flag("shape_preservation", false, format!("{mode} {h}x{wd}")));
            }
        }
    }
    Ok(Verdict::flag("shape_preservation", true, "all modes at 7x7, 14x14, 15x13 with S=s=7"))
}

fn determinism() -> Result<Verdict> {
    let model = build_variant("micro", 3)?;
    let params = model.init::<f32>(5);
    let x = Tensor::randn([1, 64, 64, 3], &mut Rng::new(5));
    let a = model.forward(&params, &x)?;
    let b = model.forward(&model.init::<f32>(5), &x)?;
    let mut g = Graph::new();
    let xv = g.input(x);
    let pv = params.bind(&mut g);
    model.record(&mut g, &pv, xv)?;
    let ok = a == b && g.is_topological() && g.replay_matches()?;
    Ok(Verdict::flag(
        "determinism",
        ok,
        "same seed and input give identical outputs; tape replay is bit-exact",
    ))
}

pub fn equiv_suite() -> Vec<Verdict> {
    vec![
        Verdict::from_result("global_degeneracy", global_degeneracy()),
        Verdict::from_result("single_window_is_mhsa", single_window_is_mhsa()),
        Verdict::from_result("window_permutation", window_permutation()),
        Verdict::from_result("axial_row_locality", axial_row_locality()),
        Verdict::from_result("locality", locality()),
        Verdict::from_result("zero_values", zero_values()),
        Verdict::from_result("softmax_rows", softmax_rows()),
        Verdict::from_result("shape_preservation", shape_preservation()),
        Verdict::from_result("determinism", determinism()),
    ]
}

// -------------------------------------------------------------------- flops

fn instrumented_matches_analytic() -> Result<Verdict> {
    let model = build_variant("micro", 10)?;
    let params = model.init::<f32>(0);
    let mut detail = Vec::new();
    let mut ok = true;
    for (h, w) in [(64, 64), (96, 64), (70, 66)] {
        let x = Tensor::zeros([1, h, w, 3]);
        let (out, counted) = macs::count(|| model.forward(&params, &x));
        out?;
        let analytic = count_flops(&model, h, w)?.total_flops;
        ok &= counted == analytic;
        detail.push(format!("{h}x{w}: {counted} vs {analytic}"));
    }
    Ok(Verdict::flag("instrumented_macs", ok, detail.join("; ")))
}

fn params_resolution_invariant() -> Result<Verdict> {
    let model = build_variant("micro", 10)?;
    let a = count_flops(&model, 64, 64)?;
    let b = count_flops(&model, 128, 96)?;
    let ok = a.total_params == b.total_params && a.total_params == model.layout().numel() as u64;
    Ok(Verdict::flag(
        "params_resolution_invariant",
        ok,
        format!("{} parameters at 64x64 and 128x96", a.total_params),
    ))
}

fn flops_monotone() -> Result<Verdict> {
    let model = build_variant("micro", 10)?;
    let mut ok = true;
    let sizes: Vec<usize> = (64..=160).step_by(6).collect();
    for &h in &sizes {
        for &w in &sizes {
            let f = count_flops(&model, h, w)?.total_flops;
            ok &= count_flops(&model, h + 6, w)?.total_flops >= f;
            ok &= count_flops(&model, h, w + 6)?.total_flops >= f;
        }
    }
    Ok(Verdict::flag("flops_monotone", ok, "h, w in 64..=166 step 6"))
}

fn tiny_conv_macs() -> Result<Verdict> {
    let x = Tensor::<f64>::ones([1, 1, 1, 2]);
    let wt = Tensor::<f64>::ones([1, 1, 2, 3]);
    let (y, n) = macs::count(|| ops::conv2d(&x, &wt, None, 1, 1, Padding::Same));
    let ok = n == 6 && y?.data().iter().all(|&v| v == 2.0);
    Ok(Verdict::flag("conv_1x1_macs", ok, "1x1 conv, 2 -> 3 channels: 6 MACs"))
}

fn comparator_laws() -> Result<Vec<Verdict>> {
    let (c, s) = (64, 7);
    let res = [56, 112, 224];
    let rows: Vec<_> = res.iter().map(|&r| attention_flops_compare(r, r, c, s, s)).collect::<Result<_>>()?;
    let ratio = |f: fn(&crate::analysis::AttentionCost) -> u64| -> Vec<f64> {
        rows.windows(2).map(|p| f(&p[1]) as f64 / f(&p[0]) as f64).collect()
    };
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    let g = ratio(|a| a.global);
    let w = ratio(|a| a.window);
    let x = ratio(|a| a.axwin);
    let worst_dev = |v: &[f64], target: f64| v.iter().map(|r| (r - target).abs()).fold(0.0, f64::max);
    let degenerate = attention_flops_compare(14, 14, c, 14, 14)?;
    Ok(vec![
        Verdict::flag(
            "compare_degeneracy",
            degenerate.global == degenerate.window
                && degenerate.global == degenerate.axial
                && degenerate.global == degenerate.axwin,
            "S = s = h = w: all four layouts cost the same",
        ),
        Verdict::bound(
            "compare_global_16x",
            worst_dev(&g, 16.0),
            0.0,
            format!("doubling ratios {}", fmt(&g)),
        ),
        Verdict::bound("compare_window_4x", worst_dev(&w, 4.0), 0.0, format!("doubling ratios {}", fmt(&w))),
        Verdict::bound("compare_axwin_4x", worst_dev(&x, 4.0), 0.0, format!("doubling ratios {}", fmt(&x))),
        Verdict::flag(
            "compare_axwin_below_global",
            rows[0].axwin < rows[0].global,
            format!("56x56, c=64, S=s=7: axwin {} vs global {}", rows[0].axwin, rows[0].global),
        ),
    ])
}

pub fn flops_suite() -> Vec<Verdict> {
    let mut out = vec![
        Verdict::from_result("instrumented_macs", instrumented_matches_analytic()),
        Verdict::from_result("params_resolution_invariant", params_resolution_invariant()),
        Verdict::from_result("flops_monotone", flops_monotone()),
        Verdict::from_result("conv_1x1_macs", tiny_conv_macs()),
    ];
    match comparator_laws() {
        Ok(v) => out.extend(v),
        Err(e) => out.push(Verdict::flag("comparator", false, format!("error: {e}"))),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Partition, Suite::Grad, Suite::Equiv, Suite::Flops, Suite::All] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("speed".parse::<Suite>().is_err());
    }

    #[test]
    fn naive_mhsa_single_token_returns_value() {
        let out = naive_mhsa(&[1.0, 2.0], &[3.0, -1.0], &[0.5, 4.0], 1, 2, 2);
        assert_eq!(out, vec![0.5, 4.0]);
    }

    #[test]
    fn equiv_suite_passes() {
        for v in equiv_suite() {
            assert!(v.passed, "{}: {}", v.name, v.detail);
        }
    }

    #[test]
    fn failing_verdicts_carry_errors() {
        let v = Verdict::from_result("x", crate::error::config_err("bad"));
        assert!(!v.passed);
        assert!(v.detail.contains("bad"));
    }
}
