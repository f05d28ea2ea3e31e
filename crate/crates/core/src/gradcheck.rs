//! Central finite-difference verification of reverse-mode gradients (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients that are zero up
/// to rounding do not produce spurious huge ratios.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) where the worst relative error occurred.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            max_per_input: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of `f` against central differences for every
/// element of every input. `f` must build a one-element loss from the inputs.
pub fn check_gradients<Func>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: Func,
) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match opts.max_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric, opts.floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// A gradient check together with the tolerance it must meet.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Per-operation tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite layers and the full model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values bounded away from zero so finite differences never straddle a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, 0.1, 1.0).map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    // deterministic pseudo-sign from the value's low mantissa bits
    v.to_bits() & 0x10 == 0
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted<F: FnOnce(&mut Graph<f64>) -> Result<Var>>(
    g: &mut Graph<f64>,
    build: F,
) -> Result<Var> {
    let y = build(g)?;
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Checks every differentiable operation and composite layer, ending with a
/// complete one-block model under the PIT SI-SNR loss.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::blocks::{
        attention_layer, bilstm_var, block_var, global_layer_var, local_layer_var, AttentionParams,
        BiLstmParams, BlockDims, BlockKind, BlockOptions, BlockParams, BlockTrace, BlockVariant,
        Mode,
    };
    use crate::params::ParamStore;
    use crate::separator::{HyperParams, SeparatorModel};
    use crate::training::{pit_loss_var, si_snr_var, SiSnrOptions};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut op = |name: &str,
                  inputs: Vec<Tensor<f64>>,
                  tol: f64,
                  f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = check_gradients(name, &inputs, opts, f)?;
        out.push(SuiteEntry {
            report,
            tolerance: tol,
        });
        Ok(())
    };
    let r = &mut rng;
    let t = OP_TOLERANCE;

    op(
        "matmul",
        vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.matmul(v[0], v[1])),
    )?;
    op(
        "matmul_t",
        vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[2, 4], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.matmul_t(v[0], v[1], true, true)),
    )?;
    op(
        "batch_matmul",
        vec![
            random(r, &[2, 3, 4], -1.0, 1.0),
            random(r, &[2, 5, 4], -1.0, 1.0),
        ],
        t,
        &|g, v| weighted(g, |g| g.batch_matmul(v[0], v[1], true)),
    )?;
    op(
        "conv1d",
        vec![
            random(r, &[2, 11], -1.0, 1.0),
            random(r, &[3, 2, 4], -1.0, 1.0),
            random(r, &[3], -1.0, 1.0),
        ],
        t,
        &|g, v| weighted(g, |g| g.conv1d(v[0], v[1], Some(v[2]), 2)),
    )?;
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let b = if kind == 3 {
            random(r, &[4], 0.5, 1.5)
        } else {
            random(r, &[4], -1.0, 1.0)
        };
        op(
            &format!("{name}_broadcast"),
            vec![random(r, &[2, 3, 4], -1.0, 1.0), b],
            t,
            &move |g, v| {
                weighted(g, |g| match kind {
                    0 => g.add(v[0], v[1]),
                    1 => g.sub(v[0], v[1]),
                    2 => g.mul(v[0], v[1]),
                    _ => g.div(v[0], v[1]),
                })
            },
        )?;
    }
    op(
        "mul_same",
        vec![random(r, &[3, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.mul(v[0], v[1])),
    )?;
    op(
        "mul_inner_broadcast",
        vec![
            random(r, &[3, 4, 2], -1.0, 1.0),
            random(r, &[4, 1], -1.0, 1.0),
        ],
        t,
        &|g, v| weighted(g, |g| g.mul(v[0], v[1])),
    )?;
    op("tanh", vec![random(r, &[7], -2.0, 2.0)], t, &|g, v| {
        weighted(g, |g| g.tanh(v[0]))
    })?;
    op("sigmoid", vec![random(r, &[7], -3.0, 3.0)], t, &|g, v| {
        weighted(g, |g| g.sigmoid(v[0]))
    })?;
    op("relu", vec![away_from_zero(r, &[9])], t, &|g, v| {
        weighted(g, |g| g.relu(v[0]))
    })?;
    op("exp", vec![random(r, &[6], -1.0, 1.0)], t, &|g, v| {
        weighted(g, |g| g.exp(v[0]))
    })?;
    op("ln", vec![random(r, &[6], 0.5, 2.0)], t, &|g, v| {
        weighted(g, |g| g.ln(v[0]))
    })?;
    op("scale", vec![random(r, &[5], -1.0, 1.0)], t, &|g, v| {
        weighted(g, |g| g.scale(v[0], -2.5))
    })?;
    op(
        "clamp",
        vec![Tensor::from_f64([4], &[-2.0, -0.3, 0.4, 2.0])?],
        t,
        &|g, v| weighted(g, |g| g.clamp(v[0], -1.0, 1.0)),
    )?;
    op("sum", vec![random(r, &[2, 3], -1.0, 1.0)], t, &|g, v| {
        let s = g.sum(v[0])?;
        g.mul(s, s)
    })?;
    op("mean", vec![random(r, &[2, 3], -1.0, 1.0)], t, &|g, v| {
        let s = g.mean(v[0])?;
        g.mul(s, s)
    })?;
    for axis in 0..3 {
        op(
            &format!("softmax_axis{axis}"),
            vec![random(r, &[2, 3, 4], -2.0, 2.0)],
            t,
            &move |g, v| weighted(g, |g| g.softmax(v[0], axis)),
        )?;
    }
    op(
        "layer_norm",
        vec![
            random(r, &[3, 5], -2.0, 2.0),
            random(r, &[5], 0.5, 1.5),
            random(r, &[5], -0.5, 0.5),
        ],
        t,
        &|g, v| weighted(g, |g| g.layer_norm(v[0], v[1], v[2])),
    )?;
    op(
        "permute",
        vec![random(r, &[2, 3, 4], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.permute(v[0], &[2, 0, 1])),
    )?;
    op(
        "reshape",
        vec![random(r, &[2, 6], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.reshape(v[0], &[3, 4])),
    )?;
    op("slice", vec![random(r, &[3, 6], -1.0, 1.0)], t, &|g, v| {
        weighted(g, |g| g.slice(v[0], 1, 2, 3))
    })?;
    op(
        "concat",
        vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.concat(&[v[0], v[1]], 1)),
    )?;
    op(
        "segment",
        vec![random(r, &[7, 2], -1.0, 1.0)],
        t,
        &|g, v| weighted(g, |g| g.segment(v[0], 4)),
    )?;
    for normalize in [false, true] {
        op(
            &format!("overlap_add_norm{normalize}"),
            vec![random(r, &[4, 4, 2], -1.0, 1.0)],
            t,
            &move |g, v| weighted(g, |g| g.overlap_add(v[0], 2, normalize, 1, 8)),
        )?;
    }

    let m = MODEL_TOLERANCE;
    let sisnr = SiSnrOptions::default();
    op(
        "si_snr",
        vec![random(r, &[16], -1.0, 1.0), random(r, &[16], -1.0, 1.0)],
        t,
        &move |g, v| si_snr_var(g, v[0], v[1], sisnr),
    )?;
    op(
        "pit_loss",
        vec![
            random(r, &[12], -1.0, 1.0),
            random(r, &[12], -1.0, 1.0),
            random(r, &[12], -1.0, 1.0),
            random(r, &[12], -1.0, 1.0),
        ],
        t,
        &move |g, v| Ok(pit_loss_var(g, &v[..2], &v[2..], sisnr)?.0),
    )?;

    // layers: parameters are the checked inputs, bound in store order
    let mut layer = |name: &str,
                     store: ParamStore<f64>,
                     x: Tensor<f64>,
                     f: &dyn Fn(&mut Graph<f64>, Var, &[Var]) -> Result<Var>|
     -> Result<()> {
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        op(name, inputs, m, &|g, v| {
            weighted(g, |g| f(g, v[0], &v[1..]))
        })
    };

    let mut store = ParamStore::new();
    let lstm = BiLstmParams::init(&mut store, r, "lstm", 3, 2)?;
    // the single-sequence form [K, 1, D] with D=3, K=4, H=2
    layer(
        "bilstm",
        store,
        random(r, &[4, 1, 3], -1.0, 1.0),
        &|g, x, p| bilstm_var(g, x, &lstm, p),
    )?;

    let mut store = ParamStore::new();
    let attn = AttentionParams::init(&mut store, r, "attn", 8, 2)?;
    let pos = crate::blocks::PositionalEncoding::<f64>::new(8, 5).table;
    layer(
        "attention",
        store,
        random(r, &[3, 5, 8], -1.0, 1.0),
        &|g, x, p| {
            let pe = g.constant(pos.clone());
            Ok(attention_layer(g, x, &attn, p, Some(pe), &mut Mode::Eval)?.output)
        },
    )?;

    let dims = BlockDims {
        d: 8,
        k: 8,
        q: 4,
        h: 4,
        j: 2,
    };
    let opts_b = BlockOptions::default();
    for v in BlockVariant::table() {
        let mut store = ParamStore::new();
        let bp = BlockParams::init(&mut store, r, "b", dims, v)?;
        let name = format!("block_{}_{}", v.local, v.global);
        // [K=8, S=4, D=8]
        layer(
            &name,
            store,
            random(r, &[8, 4, 8], -1.0, 1.0),
            &|g, x, p| {
                block_var(
                    g,
                    x,
                    &bp,
                    p,
                    opts_b,
                    &mut Mode::Eval,
                    &mut BlockTrace::default(),
                )
            },
        )?;
    }
    let mut store = ParamStore::new();
    let bp = BlockParams::init(
        &mut store,
        r,
        "b",
        dims,
        BlockVariant::new(BlockKind::Attentive, BlockKind::Recurrent, false),
    )?;
    layer(
        "local_attention_layer",
        store,
        random(r, &[8, 4, 8], -1.0, 1.0),
        &|g, x, p| {
            local_layer_var(
                g,
                x,
                &bp.local,
                p,
                opts_b,
                &mut Mode::Eval,
                &mut BlockTrace::default(),
            )
        },
    )?;
    let mut store = ParamStore::new();
    let bp = BlockParams::init(&mut store, r, "b", dims, BlockVariant::GALR)?;
    layer(
        "lowdim_global_layer",
        store,
        random(r, &[8, 4, 8], -1.0, 1.0),
        &|g, x, p| {
            global_layer_var(
                g,
                x,
                &bp.global,
                p,
                opts_b,
                &mut Mode::Eval,
                &mut BlockTrace::default(),
            )
        },
    )?;

    // complete model, N = 1, against the PIT loss on a 200-sample mixture
    let hp = HyperParams {
        d: 8,
        m: 4,
        k: 8,
        q: 4,
        h: 4,
        j: 2,
        n: 1,
        c: 2,
        dropout: 0.0,
        ..HyperParams::default()
    };
    let model = SeparatorModel::<f64>::new(hp, seed)?;
    let len = 200;
    let targets: Vec<Vec<f32>> = (0..2)
        .map(|c| {
            (0..len)
                .map(|i| ((i as f32) * (0.05 + 0.2 * c as f32)).sin())
                .collect()
        })
        .collect();
    let mix: Vec<f32> = (0..len)
        .map(|i| targets[0][i] + 0.7 * targets[1][i])
        .collect();
    let ts: Vec<Tensor<f64>> = targets
        .iter()
        .map(|t| Tensor::new([len], t.iter().map(|&x| f64::from(x)).collect()).expect("1-D"))
        .collect();
    op(
        "full_model_n1",
        model.store.tensors().to_vec(),
        m,
        &|g, v| {
            let est = model.forward_var(g, v, &mix, &mut Mode::Eval, None)?;
            let tv: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            Ok(pit_loss_var(g, &est, &tv, sisnr)?.0)
        },
    )?;
    Ok(out)
}
