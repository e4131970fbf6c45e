//! Simplified two-layer attention model: frozen embeddings and value/output
//! maps, trainable key matrices `W_K1`, `W_K2`, output map `W_O2` and an
//! optional linear feed-forward `W_F`. Queries use the identity.
//!
//! Scores are `attn_scale * x_t^T W_K x_s` for query `t` and key `s <= t`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::TaggedSequence;
use crate::embeddings::gaussian_matrix;
use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    #[default]
    One,
    InvSqrtD,
}

impl AttnScale {
    pub fn value(self, d: usize) -> f64 {
        match self {
            AttnScale::One => 1.0,
            AttnScale::InvSqrtD => 1.0 / (d as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainableInit {
    #[default]
    Gaussian,
    Zeros,
}

/// The four matrices that gradients and the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Trainable {
    #[serde(rename = "W_K1")]
    WK1,
    #[serde(rename = "W_K2")]
    WK2,
    #[serde(rename = "W_O2")]
    WO2,
    #[serde(rename = "W_F")]
    WF,
}

impl Trainable {
    pub const ALL: [Trainable; 4] = [Trainable::WK1, Trainable::WK2, Trainable::WO2, Trainable::WF];

    pub fn name(self) -> &'static str {
        match self {
            Trainable::WK1 => "W_K1",
            Trainable::WK2 => "W_K2",
            Trainable::WO2 => "W_O2",
            Trainable::WF => "W_F",
        }
    }
}

impl fmt::Display for Trainable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Trainable {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Trainable::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown trainable matrix '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    /// d×N input embeddings, column per token.
    pub w_e: Array2<S>,
    /// N×d output embeddings, row per token.
    pub w_u: Array2<S>,
    /// d×T positional embeddings.
    pub pos: Array2<S>,
    pub w_v1: Array2<S>,
    pub w_o1: Array2<S>,
    pub w_v2: Array2<S>,
    pub w_k1: Array2<S>,
    pub w_k2: Array2<S>,
    pub w_o2: Array2<S>,
    /// Present iff the feed-forward layer is enabled.
    pub w_f: Option<Array2<S>>,
    pub attn_scale: AttnScale,
}

impl<S: Scalar> ModelParams<S> {
    /// Frozen matrices Gaussian with variance `1/d`; trainable ones per `init`.
    pub fn init(
        d: usize,
        n: usize,
        t: usize,
        init: TrainableInit,
        use_ff: bool,
        attn_scale: AttnScale,
        stream: &RngStream,
    ) -> Result<Self> {
        if d == 0 || n == 0 || t == 0 {
            return invalid(format!("model geometry must be positive (d={d}, N={n}, T={t})"));
        }
        let var = 1.0 / d as f64;
        let g = |name: &str, r: usize, c: usize| gaussian_matrix::<S>(r, c, var, &stream.named(name));
        let tr = |name: &str| match init {
            TrainableInit::Gaussian => g(name, d, d),
            TrainableInit::Zeros => Ok(Array2::zeros((d, d))),
        };
        Ok(Self {
            w_e: g("W_E", d, n)?,
            w_u: g("W_U", n, d)?,
            pos: g("P", d, t)?,
            w_v1: g("W_V1", d, d)?,
            w_o1: g("W_O1", d, d)?,
            w_v2: g("W_V2", d, d)?,
            w_k1: tr("W_K1")?,
            w_k2: tr("W_K2")?,
            w_o2: tr("W_O2")?,
            w_f: if use_ff { Some(tr("W_F")?) } else { None },
            attn_scale,
        })
    }

    pub fn d(&self) -> usize {
        self.w_e.nrows()
    }

    pub fn n(&self) -> usize {
        self.w_e.ncols()
    }

    pub fn t_max(&self) -> usize {
        self.pos.ncols()
    }

    pub fn use_ff(&self) -> bool {
        self.w_f.is_some()
    }

    pub fn scale(&self) -> S {
        S::cast(self.attn_scale.value(self.d()))
    }

    /// `W_O1 W_V1`.
    pub fn phi1(&self) -> Array2<S> {
        self.w_o1.dot(&self.w_v1)
    }

    /// `W_O2 W_V2`.
    pub fn phi2(&self) -> Array2<S> {
        self.w_o2.dot(&self.w_v2)
    }

    /// `W_U (I + W_F)`, or `W_U` without feed-forward.
    pub fn readout(&self) -> Array2<S> {
        match &self.w_f {
            Some(f) => &self.w_u + &self.w_u.dot(f),
            None => self.w_u.clone(),
        }
    }

    pub fn trainable(&self, m: Trainable) -> Option<&Array2<S>> {
        match m {
            Trainable::WK1 => Some(&self.w_k1),
            Trainable::WK2 => Some(&self.w_k2),
            Trainable::WO2 => Some(&self.w_o2),
            Trainable::WF => self.w_f.as_ref(),
        }
    }

    pub fn trainable_mut(&mut self, m: Trainable) -> Option<&mut Array2<S>> {
        match m {
            Trainable::WK1 => Some(&mut self.w_k1),
            Trainable::WK2 => Some(&mut self.w_k2),
            Trainable::WO2 => Some(&mut self.w_o2),
            Trainable::WF => self.w_f.as_mut(),
        }
    }

    /// Trainable matrices present in this model.
    pub fn active_trainables(&self) -> Vec<Trainable> {
        Trainable::ALL.into_iter().filter(|m| self.trainable(*m).is_some()).collect()
    }

    fn frozen(&self) -> [(&'static str, &Array2<S>); 6] {
        [
            ("W_E", &self.w_e),
            ("W_U", &self.w_u),
            ("P", &self.pos),
            ("W_V1", &self.w_v1),
            ("W_O1", &self.w_o1),
            ("W_V2", &self.w_v2),
        ]
    }

    fn all_named(&self) -> Vec<(&'static str, &Array2<S>)> {
        let mut v: Vec<_> = self.frozen().to_vec();
        v.push(("W_K1", &self.w_k1));
        v.push(("W_K2", &self.w_k2));
        v.push(("W_O2", &self.w_o2));
        if let Some(f) = &self.w_f {
            v.push(("W_F", f));
        }
        v
    }

    /// FNV-1a over the bit patterns of the frozen matrices.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, m) in self.frozen() {
            h = checksum_into(h, m);
        }
        h
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return invalid("empty token sequence");
        }
        if tokens.len() > self.t_max() {
            return invalid(format!("sequence length {} exceeds T = {}", tokens.len(), self.t_max()));
        }
        if let Some(&z) = tokens.iter().find(|&&z| z >= self.n()) {
            return invalid(format!("token {z} outside vocabulary of size {}", self.n()));
        }
        Ok(())
    }

    /// `w_E(z_t) + p_t` for each position.
    pub fn embed(&self, tokens: &[usize]) -> Array2<S> {
        let l = tokens.len();
        let mut x = self.pos.slice(s![.., ..l]).to_owned();
        for (t, &z) in tokens.iter().enumerate() {
            let mut col = x.column_mut(t);
            col += &self.w_e.column(z);
        }
        x
    }

    /// Reference forward pass, computed densely from the stored matrices.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace<S>> {
        self.check_tokens(tokens)?;
        let c = self.scale();
        let x0 = self.embed(tokens);
        let (a1, h1) = attention_block(&x0, &self.w_k1, &self.phi1(), c);
        let (a2, h2) = attention_block(&h1, &self.w_k2, &self.phi2(), c);
        let hf = match &self.w_f {
            Some(f) => &h2 + &f.dot(&h2),
            None => h2.clone(),
        };
        let logits = self.w_u.dot(&hf);
        Ok(ForwardTrace {
            x0,
            a1,
            h1,
            a2,
            h2,
            logits,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(std::fs::File::open(path)?))
    }

    /// One JSON header line, then every matrix in header order as row-major
    /// little-endian `f64`.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            d: self.d(),
            n: self.n(),
            t: self.t_max(),
            use_ff: self.use_ff(),
            attn_scale: self.attn_scale,
            scalar: S::NAME.into(),
            matrices: self
                .all_named()
                .iter()
                .map(|(name, m)| MatrixEntry {
                    name: (*name).into(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (_, m) in self.all_named() {
            for x in m.iter() {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT {
            return invalid(format!("unrecognized checkpoint format '{}'", header.format));
        }
        let (d, n, t) = (header.d, header.n, header.t);
        let mut expected = vec![
            ("W_E", d, n),
            ("W_U", n, d),
            ("P", d, t),
            ("W_V1", d, d),
            ("W_O1", d, d),
            ("W_V2", d, d),
            ("W_K1", d, d),
            ("W_K2", d, d),
            ("W_O2", d, d),
        ];
        if header.use_ff {
            expected.push(("W_F", d, d));
        }
        let got: Vec<_> = header
            .matrices
            .iter()
            .map(|m| (m.name.as_str(), m.rows, m.cols))
            .collect();
        if got != expected {
            return invalid("checkpoint matrix list does not match its geometry");
        }
        let mut mats = Vec::with_capacity(expected.len());
        for (_, rows, cols) in expected {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)?;
            let data: Vec<S> = buf
                .chunks_exact(8)
                .map(|b| S::cast(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
                .collect();
            mats.push(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return invalid("trailing bytes after checkpoint data");
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("matrix count checked");
        Ok(Self {
            w_e: next(),
            w_u: next(),
            pos: next(),
            w_v1: next(),
            w_o1: next(),
            w_v2: next(),
            w_k1: next(),
            w_k2: next(),
            w_o2: next(),
            w_f: if header.use_ff { Some(next()) } else { None },
            attn_scale: header.attn_scale,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "bilab-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    use_ff: bool,
    attn_scale: AttnScale,
    scalar: String,
    matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub(crate) fn checksum_into<S: Scalar>(mut h: u64, m: &Array2<S>) -> u64 {
    for x in m.iter() {
        for b in x.as_f64().to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Row-wise causal softmax of a square score matrix, in place.
/// Entries above the diagonal are set to exactly zero.
pub fn causal_softmax<S: Scalar>(scores: &mut Array2<S>) {
    for (t, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let m = row.iter().take(t + 1).fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for (s, x) in row.iter_mut().enumerate() {
            if s <= t {
                *x = (*x - m).exp();
                z += *x;
            } else {
                *x = S::zero();
            }
        }
        for x in row.iter_mut().take(t + 1) {
            *x /= z;
        }
    }
}

/// Returns `(A, H + Phi·H·A^T)` with `A` the causal attention of `H` under `W_K`.
pub fn attention_block<S: Scalar>(h: &Array2<S>, w_k: &Array2<S>, phi: &Array2<S>, c: S) -> (Array2<S>, Array2<S>) {
    let mut a = h.t().dot(&w_k.dot(h));
    a.mapv_inplace(|x| x * c);
    causal_softmax(&mut a);
    let out = phi.dot(h).dot(&a.t());
    (a, h + &out)
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    pub x0: Array2<S>,
    pub a1: Array2<S>,
    pub h1: Array2<S>,
    pub a2: Array2<S>,
    pub h2: Array2<S>,
    /// N×L.
    pub logits: Array2<S>,
}

/// Which positions contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    All,
    InContextOnly,
}

impl MaskMode {
    /// Supervised positions `t` (target `z_{t+1}`).
    pub fn positions(self, seq: &TaggedSequence) -> Vec<usize> {
        match self {
            MaskMode::All => (0..seq.len().saturating_sub(1)).collect(),
            MaskMode::InContextOnly => seq.in_context_positions().collect(),
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(v: impl IntoIterator<Item = S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, x) in v.into_iter().enumerate() {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

/// `(log_softmax, argmax)` of one logit column.
pub(crate) fn log_softmax_col<S: Scalar>(col: ndarray::ArrayView1<S>) -> (Array1<S>, usize) {
    let m = col.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let lse = col.iter().map(|&x| (x - m).exp()).sum::<S>().ln() + m;
    (col.mapv(|x| x - lse), argmax(col.iter().copied()))
}

/// Pooled sums of per-position losses and hits; merged across sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub sum_all: f64,
    pub n_all: usize,
    pub hit_all: usize,
    pub sum_global: f64,
    pub n_global: usize,
    pub sum_icl: f64,
    pub n_icl: usize,
    pub hit_icl: usize,
}

impl LossStats {
    pub fn merge(&mut self, o: &LossStats) {
        self.sum_all += o.sum_all;
        self.n_all += o.n_all;
        self.hit_all += o.hit_all;
        self.sum_global += o.sum_global;
        self.n_global += o.n_global;
        self.sum_icl += o.sum_icl;
        self.n_icl += o.n_icl;
        self.hit_icl += o.hit_icl;
    }

    pub fn metrics(&self) -> Metrics {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Metrics {
            loss_all: mean(self.sum_all, self.n_all),
            loss_global: mean(self.sum_global, self.n_global),
            loss_icl: mean(self.sum_icl, self.n_icl),
            acc_icl: mean(self.hit_icl as f64, self.n_icl),
            acc_all: mean(self.hit_all as f64, self.n_all),
        }
    }
}

/// Token-pooled means; `None` when the corresponding mask is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss_all: Option<f64>,
    pub loss_global: Option<f64>,
    pub loss_icl: Option<f64>,
    pub acc_icl: Option<f64>,
    pub acc_all: Option<f64>,
}

/// Per-position losses of `logits` (N×L) against `seq`, pooled by mask.
pub fn loss_stats<S: Scalar>(logits: ArrayView2<S>, seq: &TaggedSequence) -> LossStats {
    let mut st = LossStats::default();
    let l = seq.len();
    for t in 0..l.saturating_sub(1) {
        let y = seq.tokens[t + 1];
        let (lp, am) = log_softmax_col(logits.column(t));
        let loss = -lp[y].as_f64();
        let hit = (am == y) as usize;
        st.sum_all += loss;
        st.n_all += 1;
        st.hit_all += hit;
        if !seq.is_trigger[t] {
            st.sum_global += loss;
            st.n_global += 1;
        } else if seq.occurrence_index[t] >= 2 {
            st.sum_icl += loss;
            st.n_icl += 1;
            st.hit_icl += hit;
        }
    }
    st
}

pub fn loss_and_metrics<S: Scalar>(trace: &ForwardTrace<S>, seq: &TaggedSequence) -> Result<Metrics> {
    if trace.logits.ncols() != seq.len() {
        return invalid("trace length does not match sequence length");
    }
    Ok(loss_stats(trace.logits.view(), seq).metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{MarkovSpec, OutputMode, SequenceSampler, TriggerConfig};

    fn small(init: TrainableInit, ff: bool) -> ModelParams<f64> {
        ModelParams::init(16, 7, 12, init, ff, AttnScale::One, &RngStream::new(5)).unwrap()
    }

    #[test]
    fn zeros_init_trainables() {
        let p = small(TrainableInit::Zeros, true);
        for m in Trainable::ALL {
            assert!(p.trainable(m).unwrap().iter().all(|&x| x == 0.0));
        }
        assert!(small(TrainableInit::Zeros, false).trainable(Trainable::WF).is_none());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(TrainableInit::Gaussian, true), small(TrainableInit::Gaussian, true));
    }

    #[test]
    fn zero_keys_give_uniform_prefix_attention() {
        let p = small(TrainableInit::Zeros, false);
        let tr = p.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        for t in 0..6 {
            for s in 0..6 {
                let want = if s <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert_eq!(tr.a1[[t, s]], want);
                assert_eq!(tr.a2[[t, s]], want);
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_n() {
        let mut p = small(TrainableInit::Zeros, false);
        p.w_u.fill(0.0);
        let seq = TaggedSequence::annotate(vec![0, 1, 2, 3], vec![], vec![]);
        let m = loss_and_metrics(&p.forward(&seq.tokens).unwrap(), &seq).unwrap();
        assert!((m.loss_all.unwrap() - (7f64).ln()).abs() < 1e-14);
        assert_eq!(m.loss_icl, None);
        assert_eq!(m.acc_icl, None);
    }

    #[test]
    fn residual_reconstruction() {
        let p = small(TrainableInit::Gaussian, true);
        let tokens = [3, 1, 4, 1, 5, 2, 6];
        let tr = p.forward(&tokens).unwrap();
        let rebuilt = &tr.x0 + &p.phi1().dot(&tr.x0).dot(&tr.a1.t());
        assert!((&rebuilt - &tr.h1).iter().all(|x| x.abs() < 1e-12));
        let rebuilt = &tr.h1 + &p.phi2().dot(&tr.h1).dot(&tr.a2.t());
        assert!((&rebuilt - &tr.h2).iter().all(|x| x.abs() < 1e-12));
        for a in [&tr.a1, &tr.a2] {
            for (t, row) in a.axis_iter(Axis(0)).enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(t + 1).all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn token_range_checked() {
        let p = small(TrainableInit::Zeros, false);
        assert!(p.forward(&[7]).is_err());
        assert!(p.forward(&[0; 13]).is_err());
        assert!(p.forward(&[]).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_scores() {
        let mut a = Array2::from_shape_vec((2, 2), vec![1e4, 0.0, -1e4, 2e4]).unwrap();
        causal_softmax(&mut a);
        assert_eq!(a[[0, 0]], 1.0);
        assert_eq!(a[[1, 1]], 1.0);
        assert_eq!(a[[1, 0]], 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = small(TrainableInit::Gaussian, true);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::<f64>::read_checkpoint(&mut &buf[..]).unwrap();
        assert_eq!(p, q);
        let mut bad = buf.clone();
        bad.push(0);
        assert!(ModelParams::<f64>::read_checkpoint(&mut &bad[..]).is_err());
        assert!(ModelParams::<f64>::read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn masks_partition_positions() {
        let spec = MarkovSpec::synthetic(9, 0).unwrap();
        let cfg = TriggerConfig::random(2, spec.pi_u.clone(), OutputMode::Uniform);
        let seq = SequenceSampler::new(&spec, &cfg).unwrap().sample(12, &RngStream::new(3)).unwrap();
        let p: ModelParams<f64> =
            ModelParams::init(8, 9, 12, TrainableInit::Gaussian, true, AttnScale::One, &RngStream::new(1)).unwrap();
        let st = loss_stats(p.forward(&seq.tokens).unwrap().logits.view(), &seq);
        assert_eq!(st.n_all, 11);
        let first_occ = (0..11).filter(|&t| seq.occurrence_index[t] == 1).count();
        assert_eq!(st.n_global + st.n_icl + first_occ, 11);
    }

    #[test]
    fn trainable_names_parse() {
        for m in Trainable::ALL {
            assert_eq!(m.name().parse::<Trainable>().unwrap(), m);
        }
        assert!("W_V1".parse::<Trainable>().is_err());
    }
}
