//! Analytic cost model: complexity terms, FLOPs, parameters, activation
//! memory and maximum path length.
//!
//! Multiply-accumulate counts mirror the contractions the graph actually
//! executes (the graph's own counter is the oracle in tests). FLOPs are twice
//! the MACs plus 4 per softmax element and 8 per layer-norm element.
//!
//! Activation counts follow the same node-by-node accounting as
//! [`Graph::activation_elements`](crate::graph::Graph::activation_elements):
//! every materialized non-leaf tensor, reshapes excluded, inference mode.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::mpl::MplClass;
use crate::blocks::{BlockKind, BlockVariant};
use crate::error::{Error, Result};
use crate::frontend::frame_count;
use crate::graph::segment_count;
use crate::separator::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Galr,
    Dprnn,
    /// Only its complexity terms and path length are modeled.
    Dptnet,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "galr" => Ok(Arch::Galr),
            "dprnn" => Ok(Arch::Dprnn),
            "dptnet" => Ok(Arch::Dptnet),
            _ => Err(Error::Usage(format!(
                "unknown architecture {s:?} (expected galr, dprnn or dptnet)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Galr => "galr",
            Arch::Dprnn => "dprnn",
            Arch::Dptnet => "dptnet",
        })
    }
}

impl Arch {
    /// Block variant of a runnable architecture.
    pub fn variant(self) -> Result<BlockVariant> {
        match self {
            Arch::Galr => Ok(BlockVariant::GALR),
            Arch::Dprnn => Ok(BlockVariant::DPRNN),
            Arch::Dptnet => Err(Error::Usage(
                "dptnet is modeled by complexity terms only".into(),
            )),
        }
    }

    pub fn of(variant: BlockVariant) -> Option<Arch> {
        match (variant.local, variant.global) {
            (BlockKind::Recurrent, BlockKind::Attentive) => Some(Arch::Galr),
            (BlockKind::Recurrent, BlockKind::Recurrent) => Some(Arch::Dprnn),
            _ => None,
        }
    }
}

/// Sizes entering the asymptotic terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityDims {
    pub k: f64,
    pub s: f64,
    pub h: f64,
    pub d: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub expr: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityTerms {
    pub arch: Arch,
    pub local: Term,
    pub global: Term,
    pub mpl: MplClass,
}

/// Leading per-block terms of each processing path.
pub fn complexity_terms(arch: Arch, d: ComplexityDims) -> Result<ComplexityTerms> {
    if [d.k, d.s, d.h, d.d].iter().any(|&x| !(x > 0.0)) || (arch == Arch::Galr && !(d.q > 0.0)) {
        return Err(Error::Usage(format!(
            "complexity dimensions must be positive: {d:?}"
        )));
    }
    let rnn = d.k * d.s * d.h * d.h;
    let term = |expr: &str, value: f64| Term {
        expr: expr.into(),
        value,
    };
    let (local, global) = match arch {
        Arch::Galr => (term("K*S*H^2", rnn), term("Q*S^2*D", d.q * d.s * d.s * d.d)),
        Arch::Dprnn => (term("K*S*H^2", rnn), term("K*S*H^2", rnn)),
        Arch::Dptnet => (
            term("K*S*H^2 + K^2*S*D", rnn + d.k * d.k * d.s * d.d),
            term("K*S*H^2 + K*S^2*D", rnn + d.k * d.s * d.s * d.d),
        ),
    };
    Ok(ComplexityTerms {
        arch,
        local,
        global,
        mpl: mpl(arch),
    })
}

/// Asymptotic maximum path length between any two positions.
pub fn mpl(arch: Arch) -> MplClass {
    match arch {
        Arch::Galr => MplClass::K,
        Arch::Dprnn | Arch::Dptnet => MplClass::SPlusK,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Costs of one component of the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub macs: u64,
    /// Softmax elements.
    pub softmax: u64,
    /// Layer-norm elements.
    pub layer_norm: u64,
    pub params: u64,
    /// Activation elements materialized (inference).
    pub activations: u64,
}

impl Counts {
    pub fn flops(&self) -> u64 {
        2 * self.macs + 4 * self.softmax + 8 * self.layer_norm
    }

    fn add(&mut self, o: Counts) {
        self.macs += o.macs;
        self.softmax += o.softmax;
        self.layer_norm += o.layer_norm;
        self.params += o.params;
        self.activations += o.activations;
    }

    fn times(mut self, n: u64) -> Counts {
        self.macs *= n;
        self.softmax *= n;
        self.layer_norm *= n;
        self.params *= n;
        self.activations *= n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub flops: u64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub q: usize,
    pub h: usize,
    pub j: usize,
    pub n: usize,
    pub c: usize,
    pub input_seconds: f64,
    pub sample_rate: u32,
    /// Frames `I` and segments `S` for the input length.
    pub frames: usize,
    pub segments: usize,
    pub components: Vec<ComponentCost>,
    pub total: ComponentCost,
    /// Peak live activation elements under a block-sequential schedule.
    pub peak_activations: u64,
    pub mpl: MplClass,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total.flops as f64 / 1e9
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "arch={} D={} M={} K={} Q={} H={} J={} N={} C={} seconds={} rate={} I={} S={}",
            self.arch,
            self.d,
            self.m,
            self.k,
            self.q,
            self.h,
            self.j,
            self.n,
            self.c,
            self.input_seconds,
            self.sample_rate,
            self.frames,
            self.segments
        );
        let _ = writeln!(
            s,
            "{:<14}{:>16}{:>16}{:>12}{:>16}",
            "component", "macs", "flops", "params", "activations"
        );
        for c in self.components.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                s,
                "{:<14}{:>16}{:>16}{:>12}{:>16}",
                c.name, c.counts.macs, c.flops, c.counts.params, c.counts.activations
            );
        }
        let _ = writeln!(s, "gflops={:.3}", self.gflops());
        let _ = writeln!(s, "params={}", self.total.counts.params);
        let _ = writeln!(s, "peak_activations={}", self.peak_activations);
        let _ = writeln!(s, "mpl={}", self.mpl);
        s
    }

    pub const CSV_HEADER: &'static str = "arch,D,M,K,Q,params,gflops,peak_activations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{}",
            self.arch,
            self.d,
            self.m,
            self.k,
            self.q,
            self.total.counts.params,
            self.gflops(),
            self.peak_activations
        )
    }
}

/// CSV with one row per report.
pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(CostReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Recurrent layer over `steps × batch` positions.
fn recurrent(steps: usize, batch: usize, d: usize, h: usize) -> Counts {
    let (t, b, d, h) = (u(steps), u(batch), u(d), u(h));
    Counts {
        macs: 2 * (t * b * d * 4 * h + t * b * h * 4 * h) + t * b * 2 * h * d,
        softmax: 0,
        layer_norm: t * b * d,
        params: u(crate::blocks::RecurrentParams::num_params(
            d as usize, h as usize,
        )),
        // gates, states and concatenation: 70 TBH; projection, bias, LN, residual: 4 TBD
        activations: 70 * t * b * h + 4 * t * b * d,
    }
}

/// Attention over `batch` sequences of length `len`, outer residual excluded.
fn attention(batch: usize, len: usize, d: usize, j: usize, positional: bool) -> Counts {
    let (b, t, d, j) = (u(batch), u(len), u(d), u(j));
    Counts {
        macs: 7 * b * t * d * d + 2 * b * t * t * d,
        softmax: b * j * t * t,
        layer_norm: 2 * b * t * d,
        params: u(crate::blocks::AttentionParams::num_params(d as usize)),
        activations: (19 + u64::from(positional)) * b * t * d + 3 * b * j * t * t,
    }
}

fn local_cost(hp: &HyperParams, s: usize) -> Counts {
    let ksd = u(hp.k * s * hp.d);
    match hp.variant.local {
        BlockKind::Recurrent => recurrent(hp.k, s, hp.d, hp.h),
        BlockKind::Attentive => {
            let mut c = attention(s, hp.k, hp.d, hp.j, hp.positional);
            c.activations += 3 * ksd;
            c
        }
    }
}

fn global_cost(hp: &HyperParams, s: usize) -> Counts {
    let ksd = u(hp.k * s * hp.d);
    let v = hp.effective_variant();
    match v.global {
        BlockKind::Recurrent => {
            let mut c = recurrent(s, hp.k, hp.d, hp.h);
            c.activations += 2 * ksd;
            c
        }
        BlockKind::Attentive if !v.use_lowdim => {
            let mut c = attention(hp.k, s, hp.d, hp.j, hp.positional);
            c.activations += ksd;
            c
        }
        BlockKind::Attentive => {
            let q = u(hp.q);
            let mut c = attention(hp.q, s, hp.d, hp.j, hp.positional);
            let sd = u(s * hp.d);
            c.macs += 2 * q * u(hp.k) * sd;
            c.params += u(crate::blocks::LowDimParams::num_params(hp.k, hp.q));
            c.activations += 2 * q * sd + 3 * ksd;
            c
        }
    }
}

/// Frames and segments for an input of `samples` samples.
fn frames_segments(hp: &HyperParams, samples: usize) -> Result<(usize, usize)> {
    if samples == 0 {
        return Ok((0, 0));
    }
    let i = frame_count(samples, hp.m)?;
    Ok((i, segment_count(i, hp.k)))
}

/// Per-component costs for `seconds` of audio at `sample_rate`.
pub fn flops_estimate(hp: &HyperParams, seconds: f64, sample_rate: u32) -> Result<CostReport> {
    hp.validate()?;
    if !(seconds >= 0.0) {
        return Err(Error::Usage(format!(
            "input length {seconds} s must be non-negative"
        )));
    }
    let samples = (seconds * f64::from(sample_rate)).round() as usize;
    let (i, s) = frames_segments(hp, samples)?;
    let (d, m, c, k) = (u(hp.d), u(hp.m), u(hp.c), u(hp.k));
    let (iu, su) = (u(i), u(s));
    let active = samples > 0;

    let encoder = Counts {
        macs: d * m * iu,
        params: d * m,
        activations: 3 * iu * d + 2 * su * k * d,
        ..Default::default()
    };
    let n = u(hp.n);
    let zero_if_idle = |mut x: Counts| {
        if !active {
            let p = x.params;
            x = Counts::default();
            x.params = p;
        }
        x
    };
    let local = zero_if_idle(local_cost(hp, s)).times(n);
    let global = zero_if_idle(global_cost(hp, s)).times(n);
    let skd = su * k * d;
    let mask = Counts {
        macs: skd * c * d + c * 3 * iu * d * d,
        params: c * d * d + c * d + 3 * (d * d + d),
        activations: skd + 2 * skd * c + iu * c * d + c * 11 * iu * d,
        ..Default::default()
    };
    let decoder = Counts {
        macs: c * iu * d * m,
        params: m * d,
        activations: c * (iu * d + iu * m + u(samples)),
        ..Default::default()
    };

    let named = [
        ("encoder", encoder),
        ("local", local),
        ("global", global),
        ("mask_head", mask),
        ("decoder", decoder),
    ];
    let mut total = Counts::default();
    let components: Vec<ComponentCost> = named
        .iter()
        .map(|&(name, counts)| {
            total.add(counts);
            ComponentCost {
                name: name.into(),
                flops: counts.flops(),
                counts,
            }
        })
        .collect();

    let retained = iu * d + skd;
    let block = (local.activations + global.activations) / n.max(1);
    let peak = if active {
        encoder
            .activations
            .max(retained + block)
            .max(retained + mask.activations + decoder.activations)
    } else {
        0
    };
    let arch = Arch::of(hp.variant).map_or_else(|| hp.variant.label(), |a| a.to_string());
    Ok(CostReport {
        arch,
        d: hp.d,
        m: hp.m,
        k: hp.k,
        q: if hp.effective_variant().use_lowdim {
            hp.q
        } else {
            0
        },
        h: hp.h,
        j: hp.j,
        n: hp.n,
        c: hp.c,
        input_seconds: seconds,
        sample_rate,
        frames: i,
        segments: s,
        components,
        total: ComponentCost {
            name: "total".into(),
            flops: total.flops(),
            counts: total,
        },
        peak_activations: peak,
        mpl: if hp.variant.global == BlockKind::Attentive {
            MplClass::K
        } else {
            MplClass::SPlusK
        },
    })
}

/// Peak live activation elements for `seconds` of input.
pub fn memory_estimate(hp: &HyperParams, seconds: f64, sample_rate: u32) -> Result<u64> {
    Ok(flops_estimate(hp, seconds, sample_rate)?.peak_activations)
}

/// Configuration for `arch` with the given sizes and defaults elsewhere.
pub fn arch_hyperparams(arch: Arch, d: usize, m: usize, k: usize, q: usize) -> Result<HyperParams> {
    let variant = arch.variant()?;
    Ok(HyperParams {
        d,
        m,
        k,
        q: if variant.use_lowdim { q } else { 0 },
        variant,
        ..HyperParams::default()
    })
}

/// `(D, M, K, Q)` of the published comparison rows.
pub const TABLE_CONFIGS: [(usize, usize, usize, usize); 6] = [
    (64, 16, 100, 32),
    (64, 8, 150, 16),
    (64, 4, 200, 8),
    (128, 16, 100, 32),
    (128, 8, 150, 16),
    (128, 4, 200, 8),
];

/// GALR and DPRNN reports for every row of [`TABLE_CONFIGS`].
pub fn table_reports(seconds: f64, sample_rate: u32) -> Result<Vec<CostReport>> {
    let mut out = Vec::new();
    for (d, m, k, q) in TABLE_CONFIGS {
        for arch in [Arch::Galr, Arch::Dprnn] {
            out.push(flops_estimate(
                &arch_hyperparams(arch, d, m, k, q)?,
                seconds,
                sample_rate,
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn galr_global_term() {
        let d = ComplexityDims {
            k: 100.0,
            s: 100.0,
            h: 128.0,
            d: 64.0,
            q: 8.0,
        };
        let t = complexity_terms(Arch::Galr, d).unwrap();
        assert_eq!(t.global.value, 5.12e6);
        let p = complexity_terms(Arch::Dprnn, d).unwrap();
        assert_eq!(p.local.value, p.global.value);
        assert!("rnn".parse::<Arch>().is_err());
    }

    #[test]
    fn empty_input_costs_nothing() {
        let hp = HyperParams::default();
        let r = flops_estimate(&hp, 0.0, 8000).unwrap();
        assert_eq!(r.peak_activations, 0);
        assert_eq!(r.total.counts.macs, 0);
        assert_eq!(r.total.counts.params, hp.count_params() as u64);
    }

    #[test]
    fn totals_are_sums() {
        let r = flops_estimate(&HyperParams::default(), 1.0, 8000).unwrap();
        let f: u64 = r.components.iter().map(|c| c.flops).sum();
        assert_eq!(f, r.total.flops);
        assert!(to_csv(&[r]).lines().count() == 2);
    }
}
