//! Closed-form gradients at zero initialization, each paired with an
//! independent route (enumeration, analytic backward or finite differences)
//! on the same samples.
//!
//! Scores are query-left throughout: a key-query matrix `W` scores key `k`
//! from query `q` as `c · q^T W k`, so gradients carry `q k^T`.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::onestep::DiagStats;
use crate::datagen::TaggedSequence;
use crate::error::{invalid, LabError, Result};
use crate::grad::{backward_weighted, BackwardOptions, Example};
use crate::model::{argmax, causal_softmax, log_softmax_col, AttnScale, ModelParams, TrainableInit};
use crate::probes::{recall, wk2_memory, KeyCandidates};
use crate::rng::RngStream;

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

/// Checks `joint` (rows `z`, columns `y`) is a probability table.
fn check_joint(joint: &Array2<f64>, n: usize) -> Result<()> {
    if joint.dim() != (n, n) {
        return invalid(format!("joint table must be {n}x{n} (got {:?})", joint.dim()));
    }
    if joint.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return invalid("joint table has negative or non-finite entries");
    }
    let total = joint.sum();
    if (total - 1.0).abs() > 1e-12 {
        return invalid(format!("joint table sums to {total}, not 1"));
    }
    Ok(())
}

/// `Σ_z Σ_k p(z) (p_hat(k|z) - p(k|z)) w_U(k) w_E(z)^T` for the linear model
/// `p_hat(.|z) = softmax(W_U W w_E(z))`, by enumeration of `(z, y)`.
pub fn lemma1_gradient_exact(
    w: &Array2<f64>,
    joint: &Array2<f64>,
    w_e: &Array2<f64>,
    w_u: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = w_u.nrows();
    check_joint(joint, n)?;
    if w_e.ncols() != n || w.dim() != (w_e.nrows(), w_e.nrows()) || w_u.ncols() != w_e.nrows() {
        return invalid("embedding or matrix shapes disagree");
    }
    let logits = w_u.dot(w).dot(w_e);
    // coef[k, z] = p(z) p_hat(k|z) - p(z, k)
    let mut coef = Array2::zeros((n, n));
    for z in 0..n {
        let pz = joint.row(z).sum();
        let ph = softmax(&logits.column(z).to_owned());
        for k in 0..n {
            coef[[k, z]] = pz * ph[k] - joint[[z, k]];
        }
    }
    Ok(w_u.t().dot(&coef).dot(&w_e.t()))
}

/// The same gradient through the full model's backward: two-token sequences
/// `(z, y)` weighted by `p(z, y)`, with positions, both attention outputs
/// and key-query matrices zeroed so the logits reduce to `W_U W w_E(z)`
/// (`W_F = W - I`).
pub fn lemma1_via_backward(
    w: &Array2<f64>,
    joint: &Array2<f64>,
    w_e: &Array2<f64>,
    w_u: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = w_u.nrows();
    check_joint(joint, n)?;
    let d = w_e.nrows();
    let mut params =
        ModelParams::<f64>::init(d, n, 2, TrainableInit::Zeros, true, AttnScale::One, &RngStream::new(0))?;
    params.w_e = w_e.clone();
    params.w_u = w_u.clone();
    params.pos.fill(0.0);
    params.w_o1.fill(0.0);
    params.w_f = Some(w - &Array2::<f64>::eye(d));
    let examples: Vec<Example> = joint
        .indexed_iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((z, y), &p)| Example {
            tokens: vec![z, y],
            targets: vec![(0, p)],
        })
        .collect();
    let (_, g) = backward_weighted(&params, &examples, BackwardOptions::default())?;
    Ok(g.wf.expect("feed-forward enabled"))
}

/// `Σ_k w(k) (E[p_hat_k x] - P(y=k) mu_k)^T` over a finite sample of
/// `(x, y, p_hat)`, where `w(k)` are the rows of the readout.
pub fn lemma2_gradient(readout: &Array2<f64>, xs: &Array2<f64>, ys: &[usize], p_hat: &Array2<f64>) -> Result<Array2<f64>> {
    let m = ys.len();
    if m == 0 || xs.ncols() != m || p_hat.ncols() != m || p_hat.nrows() != readout.nrows() {
        return invalid("lemma 2 sample shapes disagree or are empty");
    }
    let mut coef = p_hat.clone();
    for (i, &y) in ys.iter().enumerate() {
        coef[[y, i]] -= 1.0;
    }
    Ok(readout.t().dot(&coef).dot(&xs.t()).mapv(|a| a / m as f64))
}

/// Every in-context query of every sequence as `(sequence, query position)`.
fn queries(samples: &[TaggedSequence]) -> Vec<(&TaggedSequence, usize)> {
    samples
        .iter()
        .flat_map(|s| s.in_context_positions().map(move |t| (s, t)))
        .collect()
}

fn require_zero(w: &Array2<f64>, name: &str) -> Result<()> {
    if w.iter().any(|&a| a != 0.0) {
        return invalid(format!("{name} must be zero for the closed form"));
    }
    Ok(())
}

fn basis(params: &ModelParams<f64>) -> Array2<f64> {
    let n = params.n();
    let mut b = Array2::zeros((params.d(), n + params.t_max()));
    b.slice_mut(s![.., ..n]).assign(&params.w_e);
    b.slice_mut(s![.., n..]).assign(&params.pos);
    b
}

/// Second-layer restriction: queries and values `x0_u = w_E(z_u) + p_u`,
/// keys `x1_u = (1/u) Σ_{s<=u} Phi1 x0_s`, logits `W_U Phi2 X0 softmax(c x0_L^T W X1)`.
/// Loss and gradient in `W`, averaged over every in-context query.
pub fn restricted_wk2_backward(params: &ModelParams<f64>, w: &Array2<f64>, samples: &[TaggedSequence]) -> Result<(f64, Array2<f64>)> {
    let qs = queries(samples);
    if qs.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let d = params.d();
    let c = params.scale();
    let r = params.w_u.dot(&params.phi2());
    let phi1 = params.phi1();
    let parts: Vec<(f64, Array2<f64>)> = qs
        .par_iter()
        .map(|&(seq, tq)| {
            let l = tq + 1;
            let x0 = params.embed(&seq.tokens[..l]);
            let mut x1 = phi1.dot(&x0);
            let mut run = Array1::zeros(d);
            for u in 0..l {
                run += &x1.column(u);
                x1.column_mut(u).assign(&(&run / (u + 1) as f64));
            }
            let q = x0.column(l - 1).to_owned();
            let sc = x1.t().dot(&w.t().dot(&q)).mapv(|a| a * c);
            let a = softmax(&sc);
            let rx = r.dot(&x0);
            let logits = rx.dot(&a);
            let (lp, _) = log_softmax_col(logits.view());
            let y = seq.tokens[tq + 1];
            let mut g = lp.mapv(f64::exp);
            g[y] -= 1.0;
            let da = rx.t().dot(&g);
            let dot = a.dot(&da);
            let ds = (&a * &(da - dot)).mapv(|v| v * c);
            let kv = x1.dot(&ds);
            let grad = q.insert_axis(Axis(1)).dot(&kv.insert_axis(Axis(0)));
            (-lp[y], grad)
        })
        .collect();
    let m = parts.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((d, d));
    for (l, g) in parts {
        loss += l;
        grad += &g;
    }
    Ok((loss / m, grad / m))
}

/// Closed form of the restricted second-layer gradient at `W_K2 = 0`:
/// `c (1/L) Σ_u r_u x0_L (x1_u - x1_bar)^T` averaged over queries, with
/// `r_u = (p_hat - e_y)^T W_U Phi2 x0_u` and uniform attention.
pub fn lemma3_gradient_wk2(params: &ModelParams<f64>, samples: &[TaggedSequence]) -> Result<Array2<f64>> {
    require_zero(&params.w_k2, "W_K2")?;
    let qs = queries(samples);
    if qs.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let n = params.n();
    let m = n + params.t_max();
    let c = params.scale();
    let b = basis(params);
    // column j of `rt` is W_U Phi2 applied to basis vector j
    let rt = params.w_u.dot(&params.phi2()).dot(&b);
    let chunks: Vec<Array2<f64>> = qs
        .par_chunks(64)
        .map(|chunk| {
            let mut g = Array2::<f64>::zeros((m, m));
            for &(seq, tq) in chunk {
                let l = tq + 1;
                let toks = &seq.tokens[..l];
                let rx = Array2::from_shape_fn((n, l), |(k, u)| rt[[k, toks[u]]] + rt[[k, n + u]]);
                let logits = rx.sum_axis(Axis(1)) / l as f64;
                let mut gv = softmax(&logits);
                gv[seq.tokens[tq + 1]] -= 1.0;
                let rv = rx.t().dot(&gv);
                let rbar = rv.mean().expect("l >= 1");
                // omega_s = Σ_{u>=s} (r_u - r_bar) / u, 1-based u
                let mut omega = vec![0.0; l];
                let mut acc = 0.0;
                for u in (0..l).rev() {
                    acc += (rv[u] - rbar) / (u + 1) as f64;
                    omega[u] = acc;
                }
                let scale = c / l as f64;
                for row in [toks[l - 1], n + l - 1] {
                    for (s, &om) in omega.iter().enumerate() {
                        g[[row, toks[s]]] += scale * om;
                        g[[row, n + s]] += scale * om;
                    }
                }
            }
            g
        })
        .collect();
    let mut g = Array2::zeros((m, m));
    for part in chunks {
        g += &part;
    }
    let phi1_b = params.phi1().dot(&b);
    Ok(b.dot(&g).dot(&phi1_b.t()) / qs.len() as f64)
}

/// Structure of a key-query step `W` on token pairs: `w_E(j)^T W Phi1 w_E(i)`
/// (query `j`, key `i`), and recall of the induction key memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStructure {
    pub stats: DiagStats,
    pub recall: f64,
}

pub fn wk2_structure(params: &ModelParams<f64>, w: &Array2<f64>) -> Result<KeyStructure> {
    let phi_e = params.phi1().dot(&params.w_e);
    let sc = params.w_e.t().dot(w).dot(&phi_e);
    let keys: Vec<usize> = (0..params.n()).collect();
    Ok(KeyStructure {
        stats: DiagStats::all(&sc),
        recall: recall(w, &wk2_memory(params, &keys, KeyCandidates::FullVocab))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Report {
    pub max_abs_diff: f64,
    pub grad_max_abs: f64,
    /// Of the step `-eta · grad`.
    pub structure: KeyStructure,
}

/// Closed form against the restricted analytic backward at zero, plus the
/// structure of the resulting step.
pub fn lemma3_report(params: &ModelParams<f64>, samples: &[TaggedSequence], eta: f64) -> Result<(Array2<f64>, Lemma3Report)> {
    let closed = lemma3_gradient_wk2(params, samples)?;
    let (_, back) = restricted_wk2_backward(params, &params.w_k2, samples)?;
    let step = closed.mapv(|a| -eta * a);
    let report = Lemma3Report {
        max_abs_diff: (&closed - &back).iter().fold(0.0, |m, a| m.max(a.abs())),
        grad_max_abs: closed.iter().fold(0.0, |m, a| m.max(a.abs())),
        structure: wk2_structure(params, &step)?,
    };
    Ok((step, report))
}

/// First-layer restriction with the second layer linearized: values
/// `x_u = w_E(z_u)`, first-layer scores `c p_u^T W p_s`, keys
/// `z_u = Σ_s A1[u,s] Phi1 x_s`, second-layer weights
/// `(1/L)(1 + g_u - g_bar)` with `g_u = c x_L^T W_K2 z_u`, logits
/// `W_U Phi2 X sigma_bar`. Mean loss over every in-context query.
pub fn restricted_wk1_loss(params: &ModelParams<f64>, w: &Array2<f64>, samples: &[TaggedSequence]) -> Result<f64> {
    let qs = queries(samples);
    if qs.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let c = params.scale();
    let r = params.w_u.dot(&params.phi2());
    let phi1 = params.phi1();
    let losses: Vec<f64> = qs
        .par_iter()
        .map(|&(seq, tq)| {
            let l = tq + 1;
            let toks = &seq.tokens[..l];
            let x = Array2::from_shape_fn((params.d(), l), |(i, u)| params.w_e[[i, toks[u]]]);
            let p = params.pos.slice(s![.., ..l]);
            let mut a1 = p.t().dot(&w.dot(&p)).mapv(|v| v * c);
            causal_softmax(&mut a1);
            let z = phi1.dot(&x).dot(&a1.t());
            let q = x.column(l - 1);
            let g = z.t().dot(&params.w_k2.t().dot(&q)).mapv(|v| v * c);
            let gbar = g.mean().expect("l >= 1");
            let sig = g.mapv(|v| (1.0 + v - gbar) / l as f64);
            let logits = r.dot(&x.dot(&sig));
            let (lp, _) = log_softmax_col(logits.view());
            -lp[seq.tokens[tq + 1]]
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Closed form of the linearized first-layer gradient at `W_K1 = 0`:
/// `c^2 Σ_{u, s<=u} (1/L)(r_u - r_bar)(1/u)(gamma_s - gamma_bar_u) p_u p_s^T`
/// averaged over queries, with `r_u = (p_hat - e_y)^T W_U Phi2 x_u` and
/// `gamma_s = x_L^T W_K2 Phi1 x_s`.
pub fn lemma4_gradient_wk1(params: &ModelParams<f64>, samples: &[TaggedSequence]) -> Result<Array2<f64>> {
    require_zero(&params.w_k1, "W_K1")?;
    let qs = queries(samples);
    if qs.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let n = params.n();
    let t = params.t_max();
    let c = params.scale();
    let rt = params.w_u.dot(&params.phi2()).dot(&params.w_e);
    let gt = params.w_e.t().dot(&params.w_k2).dot(&params.phi1()).dot(&params.w_e);
    let chunks: Vec<Array2<f64>> = qs
        .par_chunks(64)
        .map(|chunk| {
            let mut acc = Array2::<f64>::zeros((t, t));
            for &(seq, tq) in chunk {
                let l = tq + 1;
                let toks = &seq.tokens[..l];
                let zl = toks[l - 1];
                let gamma: Vec<f64> = toks.iter().map(|&z| gt[[zl, z]]).collect();
                // running means of gamma give the linearized second-layer scores
                let mut gbar_u = vec![0.0; l];
                let mut run = 0.0;
                for u in 0..l {
                    run += gamma[u];
                    gbar_u[u] = run / (u + 1) as f64;
                }
                let g: Vec<f64> = gbar_u.iter().map(|v| c * v).collect();
                let gmean = g.iter().sum::<f64>() / l as f64;
                let mut logits = Array1::<f64>::zeros(n);
                for u in 0..l {
                    let sig = (1.0 + g[u] - gmean) / l as f64;
                    logits.scaled_add(sig, &rt.column(toks[u]));
                }
                let mut gv = softmax(&logits);
                gv[seq.tokens[tq + 1]] -= 1.0;
                let rv: Vec<f64> = toks.iter().map(|&z| gv.dot(&rt.column(z))).collect();
                let rbar = rv.iter().sum::<f64>() / l as f64;
                for u in 0..l {
                    let cu = c * c * (rv[u] - rbar) / (l * (u + 1)) as f64;
                    for s in 0..=u {
                        acc[[u, s]] += cu * (gamma[s] - gbar_u[u]);
                    }
                }
            }
            acc
        })
        .collect();
    let mut acc = Array2::zeros((t, t));
    for part in chunks {
        acc += &part;
    }
    Ok(params.pos.dot(&acc).dot(&params.pos.t()) / qs.len() as f64)
}

/// Previous-token structure of a first-layer step `W`: for 1-based query
/// positions `u` in `[3, t_last - 1]`, whether `argmax_{s<=u} p_u^T W p_s`
/// is `u - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStructure {
    pub prev_token_fraction: f64,
    pub checked: usize,
    /// Mean of `p_u^T W p_{u-1}` and of the other causal scores.
    pub subdiag_mean: f64,
    pub other_mean_abs: f64,
}

pub fn wk1_structure(params: &ModelParams<f64>, w: &Array2<f64>, t_last: usize) -> Result<PositionStructure> {
    if t_last < 4 || t_last > params.t_max() {
        return invalid(format!("t_last must be in [4, {}] (got {t_last})", params.t_max()));
    }
    let sc = params.pos.t().dot(w).dot(&params.pos);
    let mut hits = 0;
    let mut checked = 0;
    let mut sub = 0.0;
    let mut other = 0.0;
    let mut n_other = 0;
    for u in 3..t_last {
        // 1-based u is row u-1
        let row = sc.slice(s![u - 1, ..u]);
        checked += 1;
        if argmax(row.iter().copied()) == u - 2 {
            hits += 1;
        }
        sub += sc[[u - 1, u - 2]];
        for s in 0..u {
            if s != u - 2 {
                other += sc[[u - 1, s]].abs();
                n_other += 1;
            }
        }
    }
    Ok(PositionStructure {
        prev_token_fraction: hits as f64 / checked as f64,
        checked,
        subdiag_mean: sub / checked as f64,
        other_mean_abs: other / n_other.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma4Report {
    pub grad_max_abs: f64,
    pub structure: PositionStructure,
}

pub fn lemma4_report(
    params: &ModelParams<f64>,
    samples: &[TaggedSequence],
    eta: f64,
    t_last: usize,
) -> Result<(Array2<f64>, Lemma4Report)> {
    let closed = lemma4_gradient_wk1(params, samples)?;
    let step = closed.mapv(|a| -eta * a);
    Ok((
        step.clone(),
        Lemma4Report {
            grad_max_abs: closed.iter().fold(0.0, |m, a| m.max(a.abs())),
            structure: wk1_structure(params, &step, t_last)?,
        },
    ))
}
