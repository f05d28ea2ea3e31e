//! Scale-invariant SNR and permutation-invariant training.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// Loss-mode SI-SNR is clamped to `[-CLAMP_DB, CLAMP_DB]`.
pub const CLAMP_DB: f64 = 30.0;

/// Largest source count for which every permutation is enumerated.
pub const MAX_PIT_SOURCES: usize = 5;

// relative floor added to both energies in loss mode; keeps log() finite
// without breaking scale invariance
const REL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SiSnrOptions {
    /// Subtract the mean from both signals first.
    pub zero_mean: bool,
}

fn check_pair(est: &[f32], target: &[f32]) -> Result<()> {
    if est.len() != target.len() {
        return Err(Error::Input(format!(
            "estimate has {} samples, target has {}",
            est.len(),
            target.len()
        )));
    }
    Ok(())
}

fn centered(x: &[f32], on: bool) -> Vec<f64> {
    let mean = if on && !x.is_empty() {
        x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64
    } else {
        0.0
    };
    x.iter().map(|&v| f64::from(v) - mean).collect()
}

/// `(‖Π‖², ‖ŝ − Π‖²)` with `Π` the projection of the estimate onto the target.
fn energies(est: &[f32], target: &[f32], opts: SiSnrOptions) -> Result<(f64, f64)> {
    check_pair(est, target)?;
    let s = centered(target, opts.zero_mean);
    let e = centered(est, opts.zero_mean);
    let tt: f64 = s.iter().map(|v| v * v).sum();
    if tt == 0.0 {
        return Err(Error::Input("SI-SNR target is all zeros".into()));
    }
    let dot: f64 = s.iter().zip(&e).map(|(a, b)| a * b).sum();
    let alpha = dot / tt;
    let (mut pp, mut rr) = (0.0, 0.0);
    for (a, b) in s.iter().zip(&e) {
        let p = alpha * a;
        pp += p * p;
        rr += (b - p) * (b - p);
    }
    Ok((pp, rr))
}

/// Unclamped SI-SNR in dB. A zero estimate gives `-inf`; an exact multiple of
/// the target may give `+inf`.
pub fn si_snr(est: &[f32], target: &[f32]) -> Result<f64> {
    si_snr_with(est, target, SiSnrOptions::default())
}

pub fn si_snr_with(est: &[f32], target: &[f32], opts: SiSnrOptions) -> Result<f64> {
    let (pp, rr) = energies(est, target, opts)?;
    if pp == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (pp / rr).log10())
}

/// Loss-mode SI-SNR: stabilized and clamped to `±CLAMP_DB`.
pub fn si_snr_clamped(est: &[f32], target: &[f32], opts: SiSnrOptions) -> Result<f64> {
    let (pp, rr) = energies(est, target, opts)?;
    if pp + rr == 0.0 {
        return Ok(-CLAMP_DB);
    }
    let eps = REL_EPS * (pp + rr);
    Ok((10.0 * ((pp + eps) / (rr + eps)).log10()).clamp(-CLAMP_DB, CLAMP_DB))
}

/// Differentiable loss-mode SI-SNR (dB, shape `[1]`) of `est: [L]` against
/// `target: [L]`. Matches [`si_snr_clamped`].
pub fn si_snr_var<F: Real>(
    g: &mut Graph<F>,
    est: Var,
    target: Var,
    opts: SiSnrOptions,
) -> Result<Var> {
    if g.shape(est) != g.shape(target) {
        return Err(Error::Input(format!(
            "estimate shape {:?} differs from target {:?}",
            g.shape(est),
            g.shape(target)
        )));
    }
    let (mut e, mut s) = (est, target);
    if opts.zero_mean {
        let me = g.mean(e)?;
        e = g.sub(e, me)?;
        let ms = g.mean(s)?;
        s = g.sub(s, ms)?;
    }
    let ss = g.mul(s, s)?;
    let tt = g.sum(ss)?;
    if g.value(tt).data()[0] == F::zero() {
        return Err(Error::Input("SI-SNR target is all zeros".into()));
    }
    let ee = g.mul(e, e)?;
    let total = g.sum(ee)?;
    if g.value(total).data()[0] == F::zero() {
        return Ok(g.constant(crate::tensor::Tensor::scalar(F::c(-CLAMP_DB))));
    }
    let es = g.mul(e, s)?;
    let dot = g.sum(es)?;
    let alpha = g.div(dot, tt)?;
    let proj = g.mul(s, alpha)?;
    let resid = g.sub(e, proj)?;
    let pp = g.mul(proj, proj)?;
    let pp = g.sum(pp)?;
    let rr = g.mul(resid, resid)?;
    let rr = g.sum(rr)?;
    let eps = g.scale(total, REL_EPS)?;
    let num = g.add(pp, eps)?;
    let den = g.add(rr, eps)?;
    let ratio = g.div(num, den)?;
    let db = g.ln(ratio)?;
    let db = g.scale(db, 10.0 / std::f64::consts::LN_10)?;
    g.clamp(db, -CLAMP_DB, CLAMP_DB)
}

/// All orderings of `0..c` in lexicographic order; identity first.
pub fn permutations(c: usize) -> Result<Vec<Vec<usize>>> {
    if c > MAX_PIT_SOURCES {
        return Err(Error::Usage(format!(
            "permutation search supports at most {MAX_PIT_SOURCES} sources, got {c}"
        )));
    }
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; c], &mut out);
    Ok(out)
}

/// Best assignment given pairwise scores `score[e][t]` (estimate `e`, target
/// `t`); returns `(mean score, perm)` where `perm[t]` is the estimate matched
/// to target `t`. Ties keep the first permutation in lexicographic order.
pub fn best_assignment(score: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let c = score.len();
    if c == 2 {
        // closed form for the common case
        let keep = score[0][0] + score[1][1];
        let swap = score[1][0] + score[0][1];
        return Ok(if swap > keep {
            (swap / 2.0, vec![1, 0])
        } else {
            (keep / 2.0, vec![0, 1])
        });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c)? {
        let total: f64 = perm.iter().enumerate().map(|(t, &e)| score[e][t]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.expect("at least one permutation");
    Ok((total / c as f64, perm))
}

fn check_counts(ne: usize, nt: usize) -> Result<()> {
    if ne != nt {
        return Err(Error::Usage(format!("{ne} estimates for {nt} targets")));
    }
    if ne == 0 {
        return Err(Error::Usage("no sources".into()));
    }
    if ne > MAX_PIT_SOURCES {
        return Err(Error::Usage(format!(
            "permutation search supports at most {MAX_PIT_SOURCES} sources, got {ne}"
        )));
    }
    Ok(())
}

/// PIT loss `-mean SI-SNR` (loss mode) under the best assignment.
pub fn pit_loss(
    estimates: &[&[f32]],
    targets: &[&[f32]],
    opts: SiSnrOptions,
) -> Result<(f64, Vec<usize>)> {
    check_counts(estimates.len(), targets.len())?;
    let score = estimates
        .iter()
        .map(|e| {
            targets
                .iter()
                .map(|t| si_snr_clamped(e, t, opts))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, perm) = best_assignment(&score)?;
    Ok((-mean, perm))
}

/// Differentiable PIT loss; gradients flow through the selected assignment only.
pub fn pit_loss_var<F: Real>(
    g: &mut Graph<F>,
    estimates: &[Var],
    targets: &[Var],
    opts: SiSnrOptions,
) -> Result<(Var, Vec<usize>)> {
    check_counts(estimates.len(), targets.len())?;
    let mut vars = Vec::with_capacity(estimates.len());
    let mut score = Vec::with_capacity(estimates.len());
    for &e in estimates {
        let row = targets
            .iter()
            .map(|&t| si_snr_var(g, e, t, opts))
            .collect::<Result<Vec<_>>>()?;
        score.push(
            row.iter()
                .map(|&v| g.value(v).data()[0].f64())
                .collect::<Vec<_>>(),
        );
        vars.push(row);
    }
    let (_, perm) = best_assignment(&score)?;
    let mut total = vars[perm[0]][0];
    for (t, &e) in perm.iter().enumerate().skip(1) {
        total = g.add(total, vars[e][t])?;
    }
    let loss = g.scale(total, -1.0 / perm.len() as f64)?;
    Ok((loss, perm))
}
