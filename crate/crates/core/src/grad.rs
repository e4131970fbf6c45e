//! Hand-derived gradients of the masked cross-entropy for `W_K1`, `W_K2`,
//! `W_O2` and `W_F`, plus a central-difference oracle.
//!
//! The fast path gathers layer-1 scores from a `(N+T)×(N+T)` table
//! `B^T W_K1 B` with `B = [W_E | P]`, since layer-1 inputs are always one
//! token column plus one position column. The matching `W_K1` gradient is
//! accumulated in the same table and mapped back as `B G B^T`. The
//! finite-difference oracle goes through the dense reference forward.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::TaggedSequence;
use crate::error::{invalid, LabError, Result};
use crate::model::{causal_softmax, log_softmax_col, loss_stats, LossStats, MaskMode, ModelParams, Trainable};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Gradients for the trainable matrices; `wf` is absent without feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S: Scalar> {
    pub wk1: Array2<S>,
    pub wk2: Array2<S>,
    pub wo2: Array2<S>,
    pub wf: Option<Array2<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, m: Trainable) -> Option<&Array2<S>> {
        match m {
            Trainable::WK1 => Some(&self.wk1),
            Trainable::WK2 => Some(&self.wk2),
            Trainable::WO2 => Some(&self.wo2),
            Trainable::WF => self.wf.as_ref(),
        }
    }

    pub fn get_mut(&mut self, m: Trainable) -> Option<&mut Array2<S>> {
        match m {
            Trainable::WK1 => Some(&mut self.wk1),
            Trainable::WK2 => Some(&mut self.wk2),
            Trainable::WO2 => Some(&mut self.wo2),
            Trainable::WF => self.wf.as_mut(),
        }
    }

    pub fn is_finite(&self) -> bool {
        Trainable::ALL
            .iter()
            .filter_map(|m| self.get(*m))
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// A token sequence with weighted supervised positions; the target at
/// position `t` is `tokens[t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<(usize, f64)>,
}

impl Example {
    pub fn from_sequence(seq: &TaggedSequence, mask: MaskMode) -> Self {
        Self {
            tokens: seq.tokens.clone(),
            targets: mask.positions(seq).into_iter().map(|t| (t, 1.0)).collect(),
        }
    }
}

/// How per-chunk partial gradients are combined. Chunks have a fixed size
/// independent of the thread count, and are always combined in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Ordered,
    Compensated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardOptions {
    pub chunk: usize,
    pub reduction: Reduction,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            chunk: 8,
            reduction: Reduction::Ordered,
        }
    }
}

/// Matrices derived from the parameters once per batch.
pub struct Prepared<'a, S: Scalar> {
    params: &'a ModelParams<S>,
    n: usize,
    c: S,
    /// `[W_E | P]`, d×(N+T).
    b: Array2<S>,
    /// `c · B^T W_K1 B`.
    q1: Array2<S>,
    /// `Phi1 B`.
    phi1_b: Array2<S>,
    phi2: Array2<S>,
    /// `W_U (I + W_F)`.
    readout: Array2<S>,
}

/// Intermediate values of the fast forward pass for one sequence.
pub struct FastTrace<S: Scalar> {
    pub a1: Array2<S>,
    pub v1: Array2<S>,
    pub h1: Array2<S>,
    /// `W_K2 h1`.
    pub k2h: Array2<S>,
    pub a2: Array2<S>,
    pub v2: Array2<S>,
    pub h2: Array2<S>,
    pub logits: Array2<S>,
}

struct Accum<S: Scalar> {
    loss: f64,
    g1: Array2<S>,
    wk2: Array2<S>,
    go2: Array2<S>,
    gf: Option<Array2<S>>,
    stats: LossStats,
}

impl<S: Scalar> Accum<S> {
    fn zeros(p: &Prepared<'_, S>) -> Self {
        let d = p.params.d();
        let m = p.b.ncols();
        Self {
            loss: 0.0,
            g1: Array2::zeros((m, m)),
            wk2: Array2::zeros((d, d)),
            go2: Array2::zeros((d, d)),
            gf: p.params.use_ff().then(|| Array2::zeros((p.n, d))),
            stats: LossStats::default(),
        }
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<S>> {
        let mut v = vec![&mut self.g1, &mut self.wk2, &mut self.go2];
        if let Some(g) = self.gf.as_mut() {
            v.push(g);
        }
        v
    }
}

fn softmax_backward<S: Scalar>(a: &Array2<S>, da: &Array2<S>, c: S) -> Array2<S> {
    let mut out = Array2::zeros(a.raw_dim());
    for t in 0..a.nrows() {
        let ar = a.row(t);
        let dr = da.row(t);
        let mut dot = S::zero();
        for s in 0..=t {
            dot += ar[s] * dr[s];
        }
        for s in 0..=t {
            out[[t, s]] = ar[s] * (dr[s] - dot) * c;
        }
    }
    out
}

impl<'a, S: Scalar> Prepared<'a, S> {
    pub fn new(params: &'a ModelParams<S>) -> Self {
        let n = params.n();
        let mut b = Array2::zeros((params.d(), n + params.t_max()));
        b.slice_mut(s![.., ..n]).assign(&params.w_e);
        b.slice_mut(s![.., n..]).assign(&params.pos);
        let c = params.scale();
        let mut q1 = b.t().dot(&params.w_k1.dot(&b));
        q1.mapv_inplace(|x| x * c);
        let phi1_b = params.phi1().dot(&b);
        Self {
            params,
            n,
            c,
            q1,
            phi1_b,
            b,
            phi2: params.phi2(),
            readout: params.readout(),
        }
    }

    fn gather(&self, m: &Array2<S>, tokens: &[usize]) -> Array2<S> {
        let mut out = Array2::zeros((m.nrows(), tokens.len()));
        for (t, &z) in tokens.iter().enumerate() {
            let mut col = out.column_mut(t);
            col.assign(&m.column(z));
            col += &m.column(self.n + t);
        }
        out
    }

    pub fn forward(&self, tokens: &[usize]) -> FastTrace<S> {
        let l = tokens.len();
        let n = self.n;
        let mut a1 = Array2::zeros((l, l));
        for t in 0..l {
            let (qt, pt) = (tokens[t], n + t);
            for s in 0..=t {
                let (ks, ps) = (tokens[s], n + s);
                a1[[t, s]] = self.q1[[qt, ks]] + self.q1[[qt, ps]] + self.q1[[pt, ks]] + self.q1[[pt, ps]];
            }
        }
        causal_softmax(&mut a1);
        let x0 = self.gather(&self.b, tokens);
        let v1 = self.gather(&self.phi1_b, tokens);
        let mut h1 = x0;
        general_mat_mul(S::one(), &v1, &a1.t(), S::one(), &mut h1);
        let k2h = self.params.w_k2.dot(&h1);
        let mut a2 = h1.t().dot(&k2h);
        a2.mapv_inplace(|x| x * self.c);
        causal_softmax(&mut a2);
        let v2 = self.phi2.dot(&h1);
        let mut h2 = h1.clone();
        general_mat_mul(S::one(), &v2, &a2.t(), S::one(), &mut h2);
        let logits = self.readout.dot(&h2);
        FastTrace {
            a1,
            v1,
            h1,
            k2h,
            a2,
            v2,
            h2,
            logits,
        }
    }

    /// Adds one sequence's weighted loss and gradient pieces into `acc`;
    /// returns the forward logits.
    fn accumulate(&self, tokens: &[usize], targets: &[(usize, f64)], norm: f64, acc: &mut Accum<S>) -> Array2<S> {
        let p = self.params;
        let tr = self.forward(tokens);
        let l = tokens.len();
        let mut dlog = Array2::<S>::zeros((self.n, l));
        for &(t, w) in targets {
            let y = tokens[t + 1];
            let (lp, _) = log_softmax_col(tr.logits.column(t));
            acc.loss += w / norm * -lp[y].as_f64();
            let scale = S::cast(w / norm);
            let mut col = dlog.column_mut(t);
            for (k, g) in col.iter_mut().enumerate() {
                *g = lp[k].exp() * scale;
            }
            col[y] -= scale;
        }
        let dh2 = self.readout.t().dot(&dlog);
        if let Some(gf) = acc.gf.as_mut() {
            general_mat_mul(S::one(), &dlog, &tr.h2.t(), S::one(), gf);
        }
        // layer 2
        let dv2 = dh2.dot(&tr.a2);
        let da2 = dh2.t().dot(&tr.v2);
        let dr2 = softmax_backward(&tr.a2, &da2, self.c);
        let hdr = tr.h1.dot(&dr2);
        general_mat_mul(S::one(), &hdr, &tr.h1.t(), S::one(), &mut acc.wk2);
        general_mat_mul(S::one(), &dv2, &tr.h1.t(), S::one(), &mut acc.go2);
        let mut dh1 = dh2;
        general_mat_mul(S::one(), &tr.k2h, &dr2.t(), S::one(), &mut dh1);
        general_mat_mul(S::one(), &p.w_k2.t(), &hdr, S::one(), &mut dh1);
        general_mat_mul(S::one(), &self.phi2.t(), &dv2, S::one(), &mut dh1);
        // layer 1: scores only depend on W_K1 through the gathered table
        let da1 = dh1.t().dot(&tr.v1);
        let dr1 = softmax_backward(&tr.a1, &da1, self.c);
        let n = self.n;
        for t in 0..l {
            let (qt, pt) = (tokens[t], n + t);
            for s in 0..=t {
                let r = dr1[[t, s]];
                let (ks, ps) = (tokens[s], n + s);
                acc.g1[[qt, ks]] += r;
                acc.g1[[qt, ps]] += r;
                acc.g1[[pt, ks]] += r;
                acc.g1[[pt, ps]] += r;
            }
        }
        tr.logits
    }

    fn finish(&self, acc: Accum<S>) -> (f64, Grads<S>, LossStats) {
        let p = self.params;
        let wk1 = self.b.dot(&acc.g1).dot(&self.b.t());
        let wo2 = acc.go2.dot(&p.w_v2.t());
        let wf = acc.gf.map(|g| p.w_u.t().dot(&g));
        (
            acc.loss,
            Grads {
                wk1,
                wk2: acc.wk2,
                wo2,
                wf,
            },
            acc.stats,
        )
    }
}

/// Neumaier summation of equally shaped partials, elementwise.
fn compensated_sum<S: Scalar>(parts: &[&Array2<S>]) -> Array2<S> {
    let shape = parts[0].raw_dim();
    let mut sum = Array2::<f64>::zeros(shape.clone());
    let mut comp = Array2::<f64>::zeros(shape);
    for p in parts {
        ndarray::Zip::from(&mut sum).and(&mut comp).and(*p).for_each(|s, c, &x| {
            let x = x.as_f64();
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        });
    }
    (sum + comp).mapv(S::cast)
}

fn reduce<S: Scalar>(p: &Prepared<'_, S>, parts: Vec<Accum<S>>, reduction: Reduction) -> Accum<S> {
    match reduction {
        Reduction::Ordered => {
            let mut it = parts.into_iter();
            let mut total = it.next().unwrap_or_else(|| Accum::zeros(p));
            for part in it {
                total.loss += part.loss;
                total.stats.merge(&part.stats);
                let mut part = part;
                for (a, b) in total.arrays_mut().into_iter().zip(part.arrays_mut()) {
                    *a += &*b;
                }
            }
            total
        }
        Reduction::Compensated => {
            let mut total = Accum::zeros(p);
            total.loss = neumaier_sum(parts.iter().map(|a| a.loss));
            for part in &parts {
                total.stats.merge(&part.stats);
            }
            let slots = total.arrays_mut().len();
            let sums: Vec<Array2<S>> = (0..slots)
                .map(|i| compensated_sum(&parts.iter().map(|a| accum_slot(a, i)).collect::<Vec<_>>()))
                .collect();
            for (dst, src) in total.arrays_mut().into_iter().zip(sums) {
                *dst = src;
            }
            total
        }
    }
}

/// Neumaier-compensated sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn accum_slot<S: Scalar>(a: &Accum<S>, i: usize) -> &Array2<S> {
    match i {
        0 => &a.g1,
        1 => &a.wk2,
        2 => &a.go2,
        _ => a.gf.as_ref().expect("slot exists only with feed-forward"),
    }
}

/// Loss and gradients of `Σ w ℓ / Σ w` over weighted examples.
pub fn backward_weighted<S: Scalar>(
    params: &ModelParams<S>,
    examples: &[Example],
    opts: BackwardOptions,
) -> Result<(f64, Grads<S>)> {
    for ex in examples {
        params.check_tokens(&ex.tokens)?;
        if ex.targets.iter().any(|&(t, w)| t + 1 >= ex.tokens.len() || !(w >= 0.0)) {
            return invalid("supervised position without successor or negative weight");
        }
    }
    let norm: f64 = examples.iter().flat_map(|e| e.targets.iter().map(|t| t.1)).sum();
    if norm <= 0.0 {
        return Err(LabError::EmptyBatch);
    }
    let prep = Prepared::new(params);
    let parts: Vec<Accum<S>> = examples
        .par_chunks(opts.chunk.max(1))
        .map(|chunk| {
            let mut acc = Accum::zeros(&prep);
            for ex in chunk {
                prep.accumulate(&ex.tokens, &ex.targets, norm, &mut acc);
            }
            acc
        })
        .collect();
    let (loss, grads, _) = prep.finish(reduce(&prep, parts, opts.reduction));
    Ok((loss, grads))
}

/// Result of a backward pass over tagged sequences. `stats` pools the
/// per-position losses of the same forward pass, before any update.
#[derive(Debug, Clone)]
pub struct Backward<S: Scalar> {
    pub loss: f64,
    pub grads: Grads<S>,
    pub stats: LossStats,
}

/// Mean masked cross-entropy over all supervised positions of the batch
/// and its gradient.
pub fn backward<S: Scalar>(params: &ModelParams<S>, batch: &[TaggedSequence], mask: MaskMode) -> Result<Backward<S>> {
    backward_with(params, batch, mask, BackwardOptions::default())
}

pub fn backward_with<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[TaggedSequence],
    mask: MaskMode,
    opts: BackwardOptions,
) -> Result<Backward<S>> {
    if batch.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    for seq in batch {
        params.check_tokens(&seq.tokens)?;
    }
    let targets: Vec<Vec<(usize, f64)>> = batch
        .iter()
        .map(|s| mask.positions(s).into_iter().map(|t| (t, 1.0)).collect())
        .collect();
    let norm: usize = targets.iter().map(Vec::len).sum();
    if norm == 0 {
        return Err(LabError::EmptyBatch);
    }
    let prep = Prepared::new(params);
    let items: Vec<(&TaggedSequence, &Vec<(usize, f64)>)> = batch.iter().zip(&targets).collect();
    let parts: Vec<Accum<S>> = items
        .par_chunks(opts.chunk.max(1))
        .map(|chunk| {
            let mut acc = Accum::zeros(&prep);
            for (seq, tg) in chunk {
                let logits = prep.accumulate(&seq.tokens, tg, norm as f64, &mut acc);
                acc.stats.merge(&loss_stats(logits.view(), seq));
            }
            acc
        })
        .collect();
    let (loss, grads, stats) = prep.finish(reduce(&prep, parts, opts.reduction));
    Ok(Backward { loss, grads, stats })
}

/// Forward-only pooled metrics over a batch.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, batch: &[TaggedSequence]) -> Result<LossStats> {
    for seq in batch {
        params.check_tokens(&seq.tokens)?;
    }
    let prep = Prepared::new(params);
    let parts: Vec<LossStats> = batch
        .par_iter()
        .map(|seq| loss_stats(prep.forward(&seq.tokens).logits.view(), seq))
        .collect();
    let mut total = LossStats::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Masked mean loss through the dense reference forward.
pub fn reference_loss<S: Scalar>(params: &ModelParams<S>, examples: &[Example]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for ex in examples {
        let tr = params.forward(&ex.tokens)?;
        for &(t, w) in &ex.targets {
            let (lp, _) = log_softmax_col(tr.logits.column(t));
            num += w * -lp[ex.tokens[t + 1]].as_f64();
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(LabError::EmptyBatch);
    }
    Ok(num / den)
}

/// A matrix coordinate of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coord {
    pub matrix: Trainable,
    pub row: usize,
    pub col: usize,
}

/// Central differences of an arbitrary scalar function of the parameters.
pub fn finite_diff_with<S: Scalar>(
    params: &ModelParams<S>,
    entries: &[Coord],
    epsilon: f64,
    mut f: impl FnMut(&ModelParams<S>) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return invalid(format!("finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"));
    }
    let mut p = params.clone();
    let mut out = Vec::with_capacity(entries.len());
    for c in entries {
        let m = p
            .trainable_mut(c.matrix)
            .ok_or_else(|| LabError::InvalidArgument(format!("{} not present", c.matrix)))?;
        if c.row >= m.nrows() || c.col >= m.ncols() {
            return invalid(format!("coordinate ({}, {}) out of range for {}", c.row, c.col, c.matrix));
        }
        let w0 = m[[c.row, c.col]];
        m[[c.row, c.col]] = S::cast(w0.as_f64() + epsilon);
        let plus = f(&p)?;
        let m = p.trainable_mut(c.matrix).expect("checked above");
        m[[c.row, c.col]] = S::cast(w0.as_f64() - epsilon);
        let minus = f(&p)?;
        p.trainable_mut(c.matrix).expect("checked above")[[c.row, c.col]] = w0;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

pub fn finite_diff_gradient<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[TaggedSequence],
    mask: MaskMode,
    epsilon: f64,
    entries: &[Coord],
) -> Result<Vec<f64>> {
    let examples: Vec<Example> = batch.iter().map(|s| Example::from_sequence(s, mask)).collect();
    finite_diff_with(params, entries, epsilon, |p| reference_loss(p, &examples))
}

/// Denominator floor so vanishing gradients do not blow up relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    pub failing: Vec<CoordCheck>,
}

/// Up to `per_matrix` distinct random coordinates of each present trainable.
pub fn sample_coords<S: Scalar>(params: &ModelParams<S>, per_matrix: usize, stream: &RngStream) -> Vec<Coord> {
    let d = params.d();
    let mut out = Vec::new();
    for m in params.active_trainables() {
        let mut rng = stream.named(m.name()).rng();
        let k = per_matrix.min(d * d);
        for i in sample(&mut rng, d * d, k).into_iter() {
            out.push(Coord {
                matrix: m,
                row: i / d,
                col: i % d,
            });
        }
    }
    out
}

/// Compares supplied analytic gradients against central differences.
pub fn check_against_fd<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[TaggedSequence],
    mask: MaskMode,
    grads: &Grads<S>,
    coords: &[Coord],
    epsilon: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let numeric = finite_diff_gradient(params, batch, mask, epsilon, coords)?;
    let mut max_rel_err: f64 = 0.0;
    let mut failing = Vec::new();
    for (c, num) in coords.iter().zip(numeric) {
        let analytic = grads
            .get(c.matrix)
            .ok_or_else(|| LabError::InvalidArgument(format!("no gradient for {}", c.matrix)))?[[c.row, c.col]]
            .as_f64();
        let rel_err = relative_error(analytic, num);
        if !(rel_err <= tol) {
            failing.push(CoordCheck {
                coord: *c,
                analytic,
                numeric: num,
                rel_err,
            });
        }
        max_rel_err = max_rel_err.max(if rel_err.is_nan() { f64::INFINITY } else { rel_err });
    }
    Ok(GradcheckReport {
        max_rel_err,
        checked: coords.len(),
        tol,
        passed: failing.is_empty(),
        failing,
    })
}

/// Analytic backward vs central differences on sampled coordinates.
pub fn gradcheck<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[TaggedSequence],
    mask: MaskMode,
    tol: f64,
    per_matrix: usize,
    stream: &RngStream,
) -> Result<GradcheckReport> {
    let grads = backward(params, batch, mask)?.grads;
    let coords = sample_coords(params, per_matrix, stream);
    check_against_fd(params, batch, mask, &grads, &coords, 1e-5, tol)
}
