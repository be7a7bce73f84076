//! Building blocks of the backbone. Each layer declares its parameters in a
//! [`ParamLayout`] at construction and records its forward pass on a
//! [`Graph`] given the bound parameter variables (indexed by [`ParamId`]).

use crate::attention::{record_axwin_attention, AttentionVars, AxWinParams};
use crate::error::{config_err, Result};
use crate::tensor::ops::{ConvGeometry, Padding};
use crate::tensor::{Element, Graph, Tensor, Var};

use super::params::{Init, ParamId, ParamLayout, ParamStore};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Runs a recording closure on plain tensors and returns its output value.
pub fn run<T, F>(store: &ParamStore<T>, x: &Tensor<T>, f: F) -> Result<Tensor<T>>
where
    T: Element,
    F: FnOnce(&mut Graph<T>, &[Var], Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let p = store.bind(&mut g);
    let out = f(&mut g, &p, xv)?;
    Ok(g.value(out).clone())
}

/// Fully connected layer applied at every position: `(…, c_in) -> (…, c_out)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(l: &mut ParamLayout, name: &str, c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: l.add(format!("{name}.weight"), [1, 1, c_in, c_out], Init::TruncNormal),
            bias: l.add(format!("{name}.bias"), [1, 1, 1, c_out], Init::Zeros),
            c_in,
            c_out,
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.0], p[self.bias.0])
    }
}

/// Square-kernel convolution with bias and same padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    pub fn new(
        l: &mut ParamLayout,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        Conv {
            weight: l.add(
                format!("{name}.weight"),
                [kernel, kernel, c_in / groups, c_out],
                Init::ConvFanOut { fan_out: kernel * kernel * c_out / groups },
            ),
            bias: l.add(format!("{name}.bias"), [1, 1, 1, c_out], Init::Zeros),
            kernel,
            c_in,
            c_out,
            stride,
            groups,
        }
    }

    /// 3×3 depth-wise conv; `c_out` may be a multiple of `c_in`.
    pub fn depthwise(l: &mut ParamLayout, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self::new(l, name, c_in, c_out, 3, stride, c_in)
    }

    pub fn pointwise(l: &mut ParamLayout, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(l, name, c_in, c_out, 1, 1, 1)
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(
            h,
            w,
            self.c_in,
            (self.kernel, self.kernel),
            self.c_out,
            self.stride,
            self.groups,
            Padding::Same,
        )
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight.0], Some(p[self.bias.0]), self.stride, self.groups, Padding::Same)
    }
}

/// Channel layer norm with affine parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Norm {
            gamma: l.add(format!("{name}.weight"), [1, 1, 1, channels], Init::Ones),
            beta: l.add(format!("{name}.bias"), [1, 1, 1, channels], Init::Zeros),
            channels,
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma.0], p[self.beta.0], LN_EPS)
    }
}

/// Conditional position encoding: `x + dw3×3(x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cpe {
    pub conv: Conv,
}

impl Cpe {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Cpe { conv: Conv::depthwise(l, name, channels, channels, 1) }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let pos = self.conv.record(g, p, x)?;
        g.add(x, pos)
    }
}

/// `fc1 → GELU → dw3×3 → GELU → fc2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Icffn {
    pub fc1: Linear,
    pub dw: Conv,
    pub fc2: Linear,
}

impl Icffn {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = channels * ratio;
        Icffn {
            fc1: Linear::new(l, &format!("{name}.fc1"), channels, hidden),
            dw: Conv::depthwise(l, &format!("{name}.dw"), hidden, hidden, 1),
            fc2: Linear::new(l, &format!("{name}.fc2"), hidden, channels),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.c_out
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.record(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.dw.record(g, p, h)?;
        let h = g.gelu(h)?;
        self.fc2.record(g, p, h)
    }
}

/// Fused qkv projection, axial-window attention and output projection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub params: AxWinParams,
}

impl Attention {
    pub fn new(l: &mut ParamLayout, name: &str, params: AxWinParams) -> Self {
        let c = params.dim;
        Attention {
            qkv: Linear::new(l, &format!("{name}.qkv"), c, 3 * c),
            proj: Linear::new(l, &format!("{name}.proj"), c, c),
            params,
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let vars = AttentionVars {
            qkv_w: p[self.qkv.weight.0],
            qkv_b: p[self.qkv.bias.0],
            proj_w: p[self.proj.weight.0],
            proj_b: p[self.proj.bias.0],
        };
        record_axwin_attention(g, x, &self.params, &vars)
    }
}

/// `x ← cpe(x); x ← x + attn(LN(x)); x ← x + icffn(LN(x))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub cpe: Cpe,
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub icffn: Icffn,
}

impl Block {
    pub fn new(l: &mut ParamLayout, name: &str, attn: AxWinParams, ratio: usize) -> Self {
        let c = attn.dim;
        Block {
            cpe: Cpe::new(l, &format!("{name}.cpe"), c),
            norm1: Norm::new(l, &format!("{name}.ln1"), c),
            attn: Attention::new(l, &format!("{name}.attn"), attn),
            norm2: Norm::new(l, &format!("{name}.ln2"), c),
            icffn: Icffn::new(l, &format!("{name}.icffn"), c, ratio),
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let x = self.cpe.record(g, p, x)?;
        let h = self.norm1.record(g, p, x)?;
        let h = self.attn.record(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.record(g, p, x)?;
        let h = self.icffn.record(g, p, h)?;
        g.add(x, h)
    }
}

/// Top-down fusion step: dw3×3 followed by a 1×1 conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fuse {
    pub dw: Conv,
    pub pw: Conv,
}

/// Multi-scale patch embedding: `(h, w, c) -> (⌈h/2⌉, ⌈w/2⌉, 2c)`.
///
/// Branch `i` (1-based) stacks `i` stride-2 depth-wise convs; the first one
/// doubles the width with a channel multiplier of 2. Starting from the
/// deepest branch, each coarser map is upsampled, cropped, added to the next
/// finer branch and passed through a [`Fuse`] step. A final 1×1 conv
/// projects the stride-2 result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mspe {
    pub c_in: usize,
    pub branches: Vec<Vec<Conv>>,
    /// `fuse[i]` merges into branch `i + 1`.
    pub fuse: Vec<Fuse>,
    pub proj: Conv,
}

impl Mspe {
    pub fn new(l: &mut ParamLayout, name: &str, c_in: usize, n_branches: usize) -> Result<Self> {
        if n_branches == 0 {
            return config_err("MSPE needs at least one branch");
        }
        let c = 2 * c_in;
        let branches = (1..=n_branches)
            .map(|i| {
                (0..i)
                    .map(|k| {
                        let cin = if k == 0 { c_in } else { c };
                        Conv::depthwise(l, &format!("{name}.branch{i}.conv{k}"), cin, c, 2)
                    })
                    .collect()
            })
            .collect();
        let fuse = (1..n_branches)
            .map(|i| Fuse {
                dw: Conv::depthwise(l, &format!("{name}.fuse{i}.dw"), c, c, 1),
                pw: Conv::pointwise(l, &format!("{name}.fuse{i}.pw"), c, c),
            })
            .collect();
        let proj = Conv::pointwise(l, &format!("{name}.proj"), c, c);
        Ok(Mspe { c_in, branches, fuse, proj })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn c_out(&self) -> usize {
        2 * self.c_in
    }

    /// Smallest spatial extent the deepest branch accepts.
    pub fn min_extent(&self) -> usize {
        1 << self.n_branches()
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        let min = self.min_extent();
        if s.h() < min || s.w() < min {
            return config_err(format!(
                "MSPE with {} branches needs at least {min}x{min}, got {}x{}",
                self.n_branches(),
                s.h(),
                s.w()
            ));
        }
        let mut outs = Vec::with_capacity(self.n_branches());
        for convs in &self.branches {
            let mut y = x;
            for conv in convs {
                y = conv.record(g, p, y)?;
            }
            outs.push(y);
        }
        let mut f = *outs.last().expect("at least one branch");
        for (fuse, &finer) in self.fuse.iter().zip(&outs).rev() {
            let target = g.shape(finer);
            let up = g.upsample2x(f)?;
            let up = if g.shape(up) == target { up } else { g.crop(up, target.h(), target.w())? };
            let sum = g.add(up, finer)?;
            let y = fuse.dw.record(g, p, sum)?;
            f = fuse.pw.record(g, p, y)?;
        }
        self.proj.record(g, p, f)
    }
}

/// `conv3×3/2 → GELU → conv3×3 → GELU → conv3×3`, all with `C₀` outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stem {
    pub convs: [Conv; 3],
}

impl Stem {
    pub fn new(l: &mut ParamLayout, name: &str, c_in: usize, c_out: usize) -> Self {
        Stem {
            convs: [
                Conv::new(l, &format!("{name}.conv0"), c_in, c_out, 3, 2, 1),
                Conv::new(l, &format!("{name}.conv1"), c_out, c_out, 3, 1, 1),
                Conv::new(l, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            ],
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return config_err(format!("stem needs even height and width, got {}x{}", s.h(), s.w()));
        }
        let [c0, c1, c2] = &self.convs;
        let y = c0.record(g, p, x)?;
        let y = g.gelu(y)?;
        let y = c1.record(g, p, y)?;
        let y = g.gelu(y)?;
        c2.record(g, p, y)
    }
}

/// `LN → global average pool → linear`, producing `(n, 1, 1, classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub norm: Norm,
    pub fc: Linear,
}

impl Head {
    pub fn new(l: &mut ParamLayout, name: &str, channels: usize, classes: usize) -> Self {
        Head {
            norm: Norm::new(l, &format!("{name}.norm"), channels),
            fc: Linear::new(l, &format!("{name}.fc"), channels, classes),
        }
    }

    pub fn record<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.norm.record(g, p, x)?;
        let y = g.mean_spatial(y)?;
        self.fc.record(g, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::tensor::{ops, Rng};

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = Rng::new(seed);
        for v in store.values_mut() {
            *v = Tensor::randn(v.shape(), &mut rng).map(|x| 0.3 * x);
        }
    }

    #[test]
    fn cpe_with_zero_weights_is_identity() {
        let mut l = ParamLayout::new();
        let cpe = Cpe::new(&mut l, "cpe", 4);
        let store = l.init::<f64>(0);
        let mut store = store;
        *store.get_mut(cpe.conv.weight) = Tensor::zeros(store.get(cpe.conv.weight).shape());
        let x = Tensor::randn([1, 5, 5, 4], &mut Rng::new(1));
        let y = run(&store, &x, |g, p, x| cpe.record(g, p, x)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn cpe_residual_is_the_depthwise_conv() {
        let mut l = ParamLayout::new();
        let cpe = Cpe::new(&mut l, "cpe", 3);
        let mut store = l.init::<f64>(0);
        randomize(&mut store, 2);
        let x = Tensor::randn([1, 6, 5, 3], &mut Rng::new(3));
        let y = run(&store, &x, |g, p, x| cpe.record(g, p, x)).unwrap();
        let conv =
            ops::conv2d(&x, store.get(cpe.conv.weight), Some(store.get(cpe.conv.bias)), 1, 3, Padding::Same)
                .unwrap();
        let diff = ops::add(&y, &ops::scale(&x, -1.0)).unwrap();
        assert!(diff.max_abs_diff(&conv) < 1e-12);
    }

    #[test]
    fn icffn_hidden_width_and_zero_fc2() {
        let mut l = ParamLayout::new();
        let f = Icffn::new(&mut l, "icffn", 8, 4);
        assert_eq!(f.hidden(), 32);
        let mut store = l.init::<f64>(0);
        randomize(&mut store, 4);
        for id in [f.fc2.weight, f.fc2.bias] {
            let s = store.get(id).shape();
            *store.get_mut(id) = Tensor::zeros(s);
        }
        let x = Tensor::randn([1, 4, 4, 8], &mut Rng::new(5));
        let y = run(&store, &x, |g, p, x| f.record(g, p, x)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_without_residual_branches_is_cpe() {
        let mut l = ParamLayout::new();
        let attn = AxWinParams::new(8, 2, 4, 4, AttentionMode::Axwin).unwrap();
        let b = Block::new(&mut l, "block", attn, 2);
        let mut store = l.init::<f64>(0);
        randomize(&mut store, 6);
        for id in [b.attn.proj.weight, b.attn.proj.bias, b.icffn.fc2.weight, b.icffn.fc2.bias] {
            let s = store.get(id).shape();
            *store.get_mut(id) = Tensor::zeros(s);
        }
        let x = Tensor::randn([1, 15, 13, 8], &mut Rng::new(7));
        let y = run(&store, &x, |g, p, x| b.record(g, p, x)).unwrap();
        let c = run(&store, &x, |g, p, x| b.cpe.record(g, p, x)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn mspe_shapes() {
        for (branches, hw, c) in [(1, 8, 4), (4, 64, 64), (3, 15, 2), (2, 7, 2)] {
            let mut l = ParamLayout::new();
            let m = Mspe::new(&mut l, "mspe", c, branches).unwrap();
            assert_eq!(m.branches.iter().map(Vec::len).sum::<usize>(), branches * (branches + 1) / 2);
            let store = l.init::<f32>(0);
            let x = Tensor::ones([1, hw, hw, c]);
            let y = run(&store, &x, |g, p, x| m.record(g, p, x)).unwrap();
            assert_eq!(y.shape().0, [1, hw.div_ceil(2), hw.div_ceil(2), 2 * c]);
        }
    }

    #[test]
    fn mspe_rejects_small_inputs() {
        let mut l = ParamLayout::new();
        let m = Mspe::new(&mut l, "mspe", 2, 4).unwrap();
        let store = l.init::<f32>(0);
        let x = Tensor::ones([1, 8, 32, 2]);
        let err = run(&store, &x, |g, p, x| m.record(g, p, x)).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn stem_output_shape() {
        let mut l = ParamLayout::new();
        let s = Stem::new(&mut l, "stem", 3, 8);
        let store = l.init::<f32>(0);
        let x = Tensor::ones([2, 16, 12, 3]);
        let y = run(&store, &x, |g, p, x| s.record(g, p, x)).unwrap();
        assert_eq!(y.shape().0, [2, 8, 6, 8]);
        assert!(run(&store, &Tensor::ones([1, 9, 8, 3]), |g, p, x| s.record(g, p, x)).is_err());
    }
}
