//! Bidirectional LSTM over a time-major batch.
//!
//! Gate layout inside the `4H` axis is input, forget, cell candidate, output.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// One direction: `w_ih: [4H, Din]`, `w_hh: [4H, H]`, `bias: [4H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmDirParams,
    pub bwd: LstmDirParams,
    pub hidden: usize,
}

impl LstmDirParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            uniform(rng, &[4 * hidden, input], bound),
        )?;
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            uniform(rng, &[4 * hidden, hidden], bound),
        )?;
        let mut b: Tensor<F> = uniform(rng, &[4 * hidden], bound);
        b.data_mut()[hidden..2 * hidden].fill(F::one());
        let bias = store.add(format!("{prefix}.bias"), b)?;
        Ok(LstmDirParams { w_ih, w_hh, bias })
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }
}

impl BiLstmParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiLstmParams {
            fwd: LstmDirParams::init(store, rng, &format!("{prefix}.fwd"), input, hidden)?,
            bwd: LstmDirParams::init(store, rng, &format!("{prefix}.bwd"), input, hidden)?,
            hidden,
        })
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        2 * LstmDirParams::num_params(input, hidden)
    }
}

/// Runs one direction over `x: [T, B, Din]`, returning the hidden states in time order.
fn run_direction<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &LstmDirParams,
    vars: &[Var],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let shape = g.shape(x).to_vec();
    let (steps, batch, input) = (shape[0], shape[1], shape[2]);
    let h4 = 4 * hidden;
    let (w_ih, w_hh, bias) = (
        vars[p.w_ih.index()],
        vars[p.w_hh.index()],
        vars[p.bias.index()],
    );

    // input projections for all steps in one contraction
    let flat = g.reshape(x, &[steps * batch, input])?;
    let xp = g.matmul_t(flat, w_ih, false, true)?;
    let xp = g.add(xp, bias)?;
    let xp = g.reshape(xp, &[steps, batch, h4])?;

    let mut h = g.constant(Tensor::zeros([batch, hidden]));
    let mut c = g.constant(Tensor::zeros([batch, hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let xt = g.slice(xp, 0, t, 1)?;
        let xt = g.reshape(xt, &[batch, h4])?;
        let rec = g.matmul_t(h, w_hh, false, true)?;
        let gates = g.add(xt, rec)?;
        let i = g.slice(gates, 1, 0, hidden)?;
        let f = g.slice(gates, 1, hidden, hidden)?;
        let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
        let o = g.slice(gates, 1, 3 * hidden, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let ct = g.tanh(c)?;
        h = g.mul(o, ct)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional LSTM over `x: [T, B, Din]` with zero initial state; returns
/// `[T, B, 2H]` (forward states first).
pub fn bilstm_var<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &BiLstmParams,
    vars: &[Var],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (steps, batch) = (shape[0], shape[1]);
    let fwd = run_direction(g, x, &p.fwd, vars, p.hidden, false)?;
    let bwd = run_direction(g, x, &p.bwd, vars, p.hidden, true)?;
    let mut rows = Vec::with_capacity(steps);
    for (hf, hb) in fwd.into_iter().zip(bwd) {
        let both = g.concat(&[hf, hb], 1)?;
        rows.push(g.reshape(both, &[1, batch, 2 * p.hidden])?);
    }
    g.concat(&rows, 0)
}

/// Tensor-level Bi-LSTM over a single sequence `seq: [D, K]`, returning `[2H, K]`.
pub fn bilstm_forward<F: Real>(
    seq: &Tensor<F>,
    p: &BiLstmParams,
    store: &ParamStore<F>,
) -> Result<Tensor<F>> {
    let (d, k) = (seq.shape()[0], seq.shape()[1]);
    let mut g = Graph::new();
    let vars = store.bind(&mut g, false);
    let x = g.constant(seq.permute(&[1, 0])?.reshape([k, 1, d])?);
    let y = bilstm_var(&mut g, x, p, &vars)?;
    g.value(y)
        .clone()
        .reshape([k, 2 * p.hidden])?
        .permute(&[1, 0])
}
