//! Closed-form parameter and MAC accounting.
//!
//! Counts are derived from the architecture description alone and follow
//! the kernels' own convention, so they can be checked against the MAC
//! counter of an instrumented forward pass:
//!
//! - conv: `kh·kw·(c_in/groups)·c_out·h_out·w_out`
//! - linear: `tokens·c_in·c_out`
//! - attention: `T·W·T` for `QKᵀ` and again for `AV` per group (padding
//!   included), plus one per softmax element
//! - layer norm and GELU: one per element
//!
//! Additions, bias adds, pooling, upsampling and reshapes are free.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, HeadAllocation};
use crate::error::{config_err, Result};
use crate::model::{AxWin, VariantConfig, IN_CHANNELS, MSPE_BRANCHES};

pub const CONVENTION: &str = "MAC";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer costs at one input resolution. Field order is the JSON order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub resolution: [usize; 2],
    pub convention: String,
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn new(variant: &str, resolution: [usize; 2], entries: Vec<CostEntry>) -> Self {
        CostReport {
            variant: variant.to_string(),
            resolution,
            convention: CONVENTION.to_string(),
            total_params: entries.iter().map(|e| e.params).sum(),
            total_flops: entries.iter().map(|e| e.flops).sum(),
            entries,
        }
    }

    /// Sum over entries whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .fold((0, 0), |(p, f), e| (p + e.params, f + e.flops))
    }
}

fn conv_out(len: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (len + 2 * pad - k) / stride + 1
}

/// Spatial extents seen by each part of the network.
struct Geometry {
    stem: (usize, usize),
    /// Input extents of each stage's MSPE.
    mspe_in: [(usize, usize); 4],
    /// Block extents of each stage.
    stage: [(usize, usize); 4],
}

fn geometry(h: usize, w: usize) -> Geometry {
    let stem = (conv_out(h, 3, 2), conv_out(w, 3, 2));
    let mut mspe_in = [stem; 4];
    let mut stage = [stem; 4];
    let mut cur = stem;
    for i in 0..4 {
        mspe_in[i] = cur;
        cur = (conv_out(cur.0, 3, 2), conv_out(cur.1, 3, 2));
        stage[i] = cur;
    }
    Geometry { stem, mspe_in, stage }
}

fn conv_params(k: usize, c_in: usize, c_out: usize, groups: usize) -> u64 {
    (k * k * (c_in / groups) * c_out + c_out) as u64
}

fn stem_cost(c0: usize, (h, w): (usize, usize)) -> (u64, u64) {
    let hw = (h * w) as u64;
    let c0u = c0 as u64;
    let params = conv_params(3, IN_CHANNELS, c0, 1) + 2 * conv_params(3, c0, c0, 1);
    let convs = 9 * IN_CHANNELS as u64 * c0u * hw + 2 * 9 * c0u * c0u * hw;
    (params, convs + 2 * c0u * hw)
}

fn mspe_cost(c: usize, branches: usize, (h, w): (usize, usize)) -> (u64, u64) {
    let c2 = 2 * c;
    let dw = conv_params(3, c2, c2, c2);
    let pw = conv_params(1, c2, c2, 1);
    let n_dw = branches * (branches + 1) / 2;
    let params = n_dw as u64 * dw + (branches - 1) as u64 * (dw + pw) + pw;
    let mut sizes = Vec::with_capacity(branches);
    let mut cur = (h, w);
    for _ in 0..branches {
        cur = (conv_out(cur.0, 3, 2), conv_out(cur.1, 3, 2));
        sizes.push((cur.0 * cur.1) as u64);
    }
    let c2u = c2 as u64;
    let mut flops = 0;
    for i in 0..branches {
        flops += sizes[..=i].iter().map(|&hw| 9 * c2u * hw).sum::<u64>();
    }
    for &hw in &sizes[..branches - 1] {
        flops += 9 * c2u * hw + c2u * c2u * hw;
    }
    flops += c2u * c2u * sizes[0];
    (params, flops)
}

/// `QKᵀ`, `AV` and softmax MACs of `groups` attention calls over `tokens`
/// tokens of the given width and head count.
fn attention_group_macs(groups: usize, tokens: usize, width: usize, heads: usize) -> u64 {
    let (g, t) = (groups as u64, tokens as u64);
    2 * g * t * t * width as u64 + g * heads as u64 * t * t
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn window_macs(h: usize, w: usize, size: usize, width: usize, heads: usize) -> u64 {
    let n = ceil_div(h, size) * ceil_div(w, size);
    attention_group_macs(n, size * size, width, heads)
}

fn rows_macs(h: usize, w: usize, size: usize, width: usize, heads: usize) -> u64 {
    attention_group_macs(ceil_div(h, size), size * w, width, heads)
}

fn cols_macs(h: usize, w: usize, size: usize, width: usize, heads: usize) -> u64 {
    attention_group_macs(ceil_div(w, size), h * size, width, heads)
}

struct BlockCosts {
    cpe: (u64, u64),
    ln: (u64, u64),
    attn: (u64, u64),
    icffn: (u64, u64),
}

fn block_costs(
    c: usize,
    heads: usize,
    split: usize,
    ratio: usize,
    mode: AttentionMode,
    (h, w): (usize, usize),
) -> Result<BlockCosts> {
    let hw = (h * w) as u64;
    let cu = c as u64;
    let r = (ratio * c) as u64;
    let alloc = HeadAllocation::new(c, heads, mode)?;
    let mut core = 0;
    if let Some(p) = alloc.window {
        core += window_macs(h, w, split, p.width(), p.heads);
    }
    if let Some(p) = alloc.rows {
        core += rows_macs(h, w, split, p.width(), p.heads);
    }
    if let Some(p) = alloc.cols {
        core += cols_macs(h, w, split, p.width(), p.heads);
    }
    Ok(BlockCosts {
        cpe: (10 * cu, 9 * cu * hw),
        ln: (2 * cu, cu * hw),
        attn: (4 * cu * cu + 4 * cu, 4 * cu * cu * hw + core),
        icffn: (2 * cu * r + 11 * r + cu, 2 * cu * r * hw + 9 * r * hw + 2 * r * hw),
    })
}

fn entry(name: String, (params, flops): (u64, u64)) -> CostEntry {
    CostEntry { name, params, flops }
}

/// Analytic per-layer parameters and MACs of `config` for one `h × w` image.
pub fn config_costs(config: &VariantConfig, h: usize, w: usize) -> Result<CostReport> {
    config.validate()?;
    if h < 2 || w < 2 {
        return config_err(format!("resolution {h}x{w} too small"));
    }
    let geo = geometry(h, w);
    let mut entries = vec![entry("stem".into(), stem_cost(config.stem_channels, geo.stem))];
    let mut prev = config.stem_channels;
    for (i, st) in config.stages.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        entries.push(entry(format!("{name}.mspe"), mspe_cost(prev, MSPE_BRANCHES[i], geo.mspe_in[i])));
        let b = block_costs(
            st.channels,
            st.heads,
            st.split_size,
            st.expand_ratio,
            config.attention,
            geo.stage[i],
        )?;
        for j in 0..st.depth {
            let p = format!("{name}.block{j}");
            entries.push(entry(format!("{p}.cpe"), b.cpe));
            entries.push(entry(format!("{p}.ln1"), b.ln));
            entries.push(entry(format!("{p}.attn"), b.attn));
            entries.push(entry(format!("{p}.ln2"), b.ln));
            entries.push(entry(format!("{p}.icffn"), b.icffn));
        }
        prev = st.channels;
    }
    let (fh, fw) = geo.stage[3];
    let (c, k) = (prev as u64, config.num_classes as u64);
    entries.push(entry("head".into(), (2 * c + c * k + k, c * (fh * fw) as u64 + c * k)));
    Ok(CostReport::new(&config.name, [h, w], entries))
}

/// Parameter counts only; FLOPs are zero and the resolution is `[0, 0]`.
pub fn count_params(model: &AxWin) -> CostReport {
    let mut r = config_costs(&model.config, 64, 64).expect("validated at construction");
    for e in &mut r.entries {
        e.flops = 0;
    }
    CostReport::new(&model.config.name, [0, 0], r.entries)
}

/// Parameters and MACs for one `h × w` image.
pub fn count_flops(model: &AxWin, h: usize, w: usize) -> Result<CostReport> {
    config_costs(&model.config, h, w)
}

/// `QKᵀ` plus `AV` MACs of the four attention layouts on one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub h: usize,
    pub w: usize,
    pub global: u64,
    pub window: u64,
    pub axial: u64,
    pub axwin: u64,
}

/// Softmax and projections are excluded; head counts do not change these
/// numbers. Window and axial groups include padding.
pub fn attention_flops_compare(
    h: usize,
    w: usize,
    c: usize,
    window: usize,
    axial: usize,
) -> Result<AttentionCost> {
    if !c.is_multiple_of(4) || window == 0 || axial == 0 || h == 0 || w == 0 {
        return config_err(format!(
            "attention comparison needs c % 4 == 0 and positive sizes (c={c}, S={window}, s={axial})"
        ));
    }
    let qk_av = |groups: usize, tokens: usize, width: usize| {
        2 * groups as u64 * (tokens * tokens) as u64 * width as u64
    };
    let nw = ceil_div(h, window) * ceil_div(w, window);
    let rows = |width| qk_av(ceil_div(h, axial), axial * w, width);
    let cols = |width| qk_av(ceil_div(w, axial), h * axial, width);
    Ok(AttentionCost {
        h,
        w,
        global: qk_av(1, h * w, c),
        window: qk_av(nw, window * window, c),
        axial: rows(c / 2) + cols(c / 2),
        axwin: qk_av(nw, window * window, c / 2) + rows(c / 4) + cols(c / 4),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(format!("unknown report format `{other}` (expected json, csv or table)")),
        }
    }
}

/// Human-readable count: `21.18M`, `4.31G`.
pub fn human(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        n.to_string()
    }
}

pub fn emit_report(report: &CostReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("plain data"),
        ReportFormat::Csv => {
            let mut s = String::from("name,params,flops\n");
            for e in &report.entries {
                writeln!(s, "{},{},{}", e.name, e.params, e.flops).unwrap();
            }
            s
        }
        ReportFormat::Table => {
            let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(5);
            let mut s = format!(
                "{} @ {}x{} ({} convention)\n{:<width$} {:>14} {:>16}\n",
                report.variant,
                report.resolution[0],
                report.resolution[1],
                report.convention,
                "layer",
                "params",
                "flops"
            );
            for e in &report.entries {
                writeln!(s, "{:<width$} {:>14} {:>16}", e.name, e.params, e.flops).unwrap();
            }
            writeln!(
                s,
                "{:<width$} {:>14} {:>16}\n{:<width$} {:>14} {:>16}",
                "total",
                report.total_params,
                report.total_flops,
                "",
                human(report.total_params),
                human(report.total_flops)
            )
            .unwrap();
            s
        }
    }
}

/// Table or CSV of [`AttentionCost`] rows.
pub fn emit_attention_table(rows: &[AttentionCost], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows).expect("plain data"),
        ReportFormat::Csv => {
            let mut s = String::from("h,w,global,window,axial,axwin\n");
            for r in rows {
                writeln!(s, "{},{},{},{},{},{}", r.h, r.w, r.global, r.window, r.axial, r.axwin).unwrap();
            }
            s
        }
        ReportFormat::Table => {
            let mut s = format!(
                "{:>10} {:>16} {:>16} {:>16} {:>16}\n",
                "h x w", "global", "window", "axial", "axwin"
            );
            for r in rows {
                writeln!(
                    s,
                    "{:>10} {:>16} {:>16} {:>16} {:>16}",
                    format!("{}x{}", r.h, r.w),
                    r.global,
                    r.window,
                    r.axial,
                    r.axwin
                )
                .unwrap();
            }
            s
        }
    }
}
