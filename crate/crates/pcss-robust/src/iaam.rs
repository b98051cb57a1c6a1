//! Invertible attention alignment: an affine-coupling flow for bidirectional
//! feature mapping, a multi-head self-attention pseudo-labeler, and the
//! mapping / cycle / attention / overlap-suppression losses trained jointly.
//!
//! Coupling blocks clamp their log-scales with `s_max * tanh(.)` so the
//! Jacobian stays bounded during joint training; subnets start with zero
//! output layers, making the initial flow an exact identity.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::Checkpoint;
use crate::ot::{sinkhorn_on_tape, OtError, SinkhornConfig};
use crate::segnet::Dense;
use crate::tensor::{Arr, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum IaamError {
    #[error("feature width {got} does not match flow width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("attention input must be nonempty")]
    EmptyInput,
    #[error("row {row} of y_pred sums to {sum}, not a probability vector")]
    NotAProbability { row: usize, sum: f64 },
    #[error("class count mismatch: {0}")]
    ClassMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ot(#[from] OtError),
}

pub const FLOW_SUBNET_HIDDEN: usize = 64;

/// One affine coupling block. The passive half feeds two 2-layer subnets
/// producing log-scale and translation for the active half; `swap` alternates
/// which half is passive across the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub s1: Dense,
    pub s2: Dense,
    pub t1: Dense,
    pub t2: Dense,
    pub swap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    pub dim: usize,
    pub s_max: f64,
    pub blocks: Vec<CouplingBlock>,
}

impl CouplingFlow {
    /// Random hidden layers, zero output layers: the initial map is identity.
    pub fn new(dim: usize, num_blocks: usize, s_max: f64, seed: u64) -> Self {
        assert!(dim % 2 == 0, "flow width must be even");
        let half = dim / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |inp: usize, out: usize| {
            let scale = (1.0 / inp as f64).sqrt();
            Dense {
                w: Arr {
                    shape: vec![inp, out],
                    data: (0..inp * out).map(|_| rng.gen_range(-scale..scale)).collect(),
                },
                b: Arr::zeros(&[out]),
            }
        };
        let blocks = (0..num_blocks)
            .map(|i| CouplingBlock {
                s1: init(half, FLOW_SUBNET_HIDDEN),
                s2: Dense::zeros(FLOW_SUBNET_HIDDEN, half),
                t1: init(half, FLOW_SUBNET_HIDDEN),
                t2: Dense::zeros(FLOW_SUBNET_HIDDEN, half),
                swap: i % 2 == 1,
            })
            .collect();
        CouplingFlow {
            dim,
            s_max: 2.0,
            blocks,
        }
        .with_s_max(s_max)
    }

    fn with_s_max(mut self, s_max: f64) -> Self {
        self.s_max = s_max;
        self
    }

    pub fn params(&self) -> Vec<(String, &Arr)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, d) in [("s1", &b.s1), ("s2", &b.s2), ("t1", &b.t1), ("t2", &b.t2)] {
                out.push((format!("flow.block{}.{}.w", i, tag), &d.w));
                out.push((format!("flow.block{}.{}.b", i, tag), &d.b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            for d in [&mut b.s1, &mut b.s2, &mut b.t1, &mut b.t2] {
                out.push(&mut d.w);
                out.push(&mut d.b);
            }
        }
        out
    }

    pub fn vars<'t>(&self, tape: &'t Tape, requires_grad: bool) -> FlowVars<'t> {
        FlowVars {
            dim: self.dim,
            s_max: self.s_max,
            swap: self.blocks.iter().map(|b| b.swap).collect(),
            vars: self
                .params()
                .into_iter()
                .map(|(_, p)| tape.leaf(p.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn append_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert("flow.s_max", Arr::scalar(self.s_max));
        for (name, p) in self.params() {
            ck.insert(&name, p.clone());
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, dim: usize) -> Result<Self, IaamError> {
        let mut blocks = Vec::new();
        let half = dim / 2;
        for i in 0.. {
            if ck.blocks.get(&format!("flow.block{}.s1.w", i)).is_none() {
                break;
            }
            let load = |tag: &str| -> Result<Dense, IaamError> {
                let w = ck
                    .get(&format!("flow.block{}.{}.w", i, tag))
                    .map_err(|e| IaamError::ClassMismatch(e.to_string()))?
                    .clone();
                let b = ck
                    .get(&format!("flow.block{}.{}.b", i, tag))
                    .map_err(|e| IaamError::ClassMismatch(e.to_string()))?
                    .clone();
                Ok(Dense { w, b })
            };
            blocks.push(CouplingBlock {
                s1: load("s1")?,
                s2: load("s2")?,
                t1: load("t1")?,
                t2: load("t2")?,
                swap: i % 2 == 1,
            });
        }
        let s_max = ck
            .blocks
            .get("flow.s_max")
            .map(|a| a.data[0])
            .unwrap_or(2.0);
        let _ = half;
        Ok(CouplingFlow { dim, s_max, blocks })
    }
}

/// Tape handles for the flow parameters, 8 per block in params() order.
pub struct FlowVars<'t> {
    dim: usize,
    s_max: f64,
    swap: Vec<bool>,
    pub vars: Vec<Var<'t>>,
}

impl<'t> FlowVars<'t> {
    fn block(&self, i: usize) -> [(Var<'t>, Var<'t>); 4] {
        let base = 8 * i;
        [
            (self.vars[base], self.vars[base + 1]),
            (self.vars[base + 2], self.vars[base + 3]),
            (self.vars[base + 4], self.vars[base + 5]),
            (self.vars[base + 6], self.vars[base + 7]),
        ]
    }

    pub fn sgd_step(&self, flow: &mut CouplingFlow, lr: f64) {
        for (var, param) in self.vars.iter().zip(flow.params_mut()) {
            let g = var.grad();
            for (p, gv) in param.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }

    fn subnets(
        &self,
        i: usize,
        passive: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let [(s1w, s1b), (s2w, s2b), (t1w, t1b), (t2w, t2b)] = self.block(i);
        let s_raw = passive
            .matmul(s1w)?
            .add_row_broadcast(s1b)?
            .tanh()?
            .matmul(s2w)?
            .add_row_broadcast(s2b)?;
        let s = s_raw.tanh()?.scale(self.s_max)?;
        let t = passive
            .matmul(t1w)?
            .add_row_broadcast(t1b)?
            .tanh()?
            .matmul(t2w)?
            .add_row_broadcast(t2b)?;
        Ok((s, t))
    }
}

fn check_width(x: &Var<'_>, dim: usize) -> Result<(), IaamError> {
    let got = x.value().dims2().1;
    if got != dim {
        return Err(IaamError::WidthMismatch { got, want: dim });
    }
    Ok(())
}

/// Source-to-target map. Returns (output, log-det-Jacobian scalar).
pub fn flow_forward<'t>(
    fv: &FlowVars<'t>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>), IaamError> {
    check_width(&x, fv.dim)?;
    let half = fv.dim / 2;
    let mut cur = x;
    let mut logdet: Option<Var<'t>> = None;
    for i in 0..fv.swap.len() {
        let (pa, ac) = if fv.swap[i] {
            (cur.slice_cols(half, fv.dim)?, cur.slice_cols(0, half)?)
        } else {
            (cur.slice_cols(0, half)?, cur.slice_cols(half, fv.dim)?)
        };
        let (s, t) = fv.subnets(i, pa)?;
        let mapped = ac.mul(s.exp()?)?.add(t)?;
        cur = if fv.swap[i] {
            mapped.concat_cols(pa)?
        } else {
            pa.concat_cols(mapped)?
        };
        let ld = s.sum_all()?;
        logdet = Some(match logdet {
            Some(acc) => acc.add(ld)?,
            None => ld,
        });
    }
    Ok((cur, logdet.expect("flow has no blocks")))
}

/// Target-to-source map: exact inverse of [`flow_forward`].
pub fn flow_inverse<'t>(fv: &FlowVars<'t>, y: Var<'t>) -> Result<Var<'t>, IaamError> {
    check_width(&y, fv.dim)?;
    let half = fv.dim / 2;
    let mut cur = y;
    for i in (0..fv.swap.len()).rev() {
        let (pa, ac) = if fv.swap[i] {
            (cur.slice_cols(half, fv.dim)?, cur.slice_cols(0, half)?)
        } else {
            (cur.slice_cols(0, half)?, cur.slice_cols(half, fv.dim)?)
        };
        let (s, t) = fv.subnets(i, pa)?;
        let unmapped = ac.sub(t)?.mul(s.neg()?.exp()?)?;
        cur = if fv.swap[i] {
            unmapped.concat_cols(pa)?
        } else {
            pa.concat_cols(unmapped)?
        };
    }
    Ok(cur)
}

/// Multi-head self-attention followed by a projection to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub dim: usize,
    pub num_classes: usize,
    pub heads: usize,
    /// dim x (heads * head_dim), fused across heads.
    pub wq: Arr,
    pub wk: Arr,
    pub wv: Arr,
    pub out: Dense,
}

impl AttentionHead {
    pub fn new(dim: usize, num_classes: usize, heads: usize, seed: u64) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / dim as f64).sqrt();
        let mut mk = |r: usize, c: usize| Arr {
            shape: vec![r, c],
            data: (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
        };
        AttentionHead {
            dim,
            num_classes,
            heads,
            wq: mk(dim, dim),
            wk: mk(dim, dim),
            wv: mk(dim, dim),
            out: Dense {
                w: mk(dim, num_classes),
                b: Arr::zeros(&[num_classes]),
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn params(&self) -> Vec<(String, &Arr)> {
        vec![
            ("att.wq".into(), &self.wq),
            ("att.wk".into(), &self.wk),
            ("att.wv".into(), &self.wv),
            ("att.out.w".into(), &self.out.w),
            ("att.out.b".into(), &self.out.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    pub fn vars<'t>(&self, tape: &'t Tape, requires_grad: bool) -> AttVars<'t> {
        AttVars {
            dim: self.dim,
            heads: self.heads,
            vars: self
                .params()
                .into_iter()
                .map(|(_, p)| tape.leaf(p.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn append_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert("att.heads", Arr::scalar(self.heads as f64));
        for (name, p) in self.params() {
            ck.insert(&name, p.clone());
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, dim: usize, num_classes: usize) -> Result<Self, IaamError> {
        let heads = ck
            .blocks
            .get("att.heads")
            .map(|a| a.data[0] as usize)
            .unwrap_or(2);
        let get = |n: &str| -> Result<Arr, IaamError> {
            ck.get(n)
                .map(|a| a.clone())
                .map_err(|e| IaamError::ClassMismatch(e.to_string()))
        };
        Ok(AttentionHead {
            dim,
            num_classes,
            heads,
            wq: get("att.wq")?,
            wk: get("att.wk")?,
            wv: get("att.wv")?,
            out: Dense {
                w: get("att.out.w")?,
                b: get("att.out.b")?,
            },
        })
    }
}

pub struct AttVars<'t> {
    dim: usize,
    heads: usize,
    pub vars: Vec<Var<'t>>,
}

impl<'t> AttVars<'t> {
    pub fn sgd_step(&self, att: &mut AttentionHead, lr: f64) {
        for (var, param) in self.vars.iter().zip(att.params_mut()) {
            let g = var.grad();
            for (p, gv) in param.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }
}

/// Self-attention class logits for a feature batch.
pub fn attention_logits<'t>(av: &AttVars<'t>, feats: Var<'t>) -> Result<Var<'t>, IaamError> {
    let (n, w) = feats.value().dims2();
    if n == 0 {
        return Err(IaamError::EmptyInput);
    }
    if w != av.dim {
        return Err(IaamError::WidthMismatch { got: w, want: av.dim });
    }
    let (wq, wk, wv) = (av.vars[0], av.vars[1], av.vars[2]);
    let (wo, bo) = (av.vars[3], av.vars[4]);
    let q = feats.matmul(wq)?;
    let k = feats.matmul(wk)?;
    let v = feats.matmul(wv)?;
    let hd = av.dim / av.heads;
    let mut merged: Option<Var<'t>> = None;
    for h in 0..av.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul(kh.transpose()?)?.scale(1.0 / (hd as f64).sqrt())?;
        let weights = scores.row_softmax()?;
        let out = weights.matmul(vh)?;
        merged = Some(match merged {
            Some(acc) => acc.concat_cols(out)?,
            None => out,
        });
    }
    Ok(merged.unwrap().matmul(wo)?.add_row_broadcast(bo)?)
}

/// Class distributions (softmax rows) from the attention module.
pub fn attention_predict<'t>(av: &AttVars<'t>, feats: Var<'t>) -> Result<Var<'t>, IaamError> {
    Ok(attention_logits(av, feats)?.row_softmax()?)
}

/// Eq-style mapping loss: half the sum of the two cross-domain transport costs.
pub fn mapping_loss<'t>(
    tape: &'t Tape,
    f_s2t: Var<'t>,
    f_t: Var<'t>,
    f_t2s: Var<'t>,
    f_s: Var<'t>,
    cfg: &SinkhornConfig,
) -> Result<Var<'t>, IaamError> {
    let w1 = sinkhorn_on_tape(tape, f_s2t, f_t, cfg)?.cost;
    let w2 = sinkhorn_on_tape(tape, f_t2s, f_s, cfg)?.cost;
    Ok(w1.add(w2)?.scale(0.5)?)
}

/// Cycle-consistency guard: half the batch L2 norm of each round-trip residual.
pub fn cycle_loss<'t>(
    f_s: Var<'t>,
    f_s2t2s: Var<'t>,
    f_t: Var<'t>,
    f_t2s2t: Var<'t>,
) -> Result<Var<'t>, IaamError> {
    let r1 = f_s.sub(f_s2t2s)?.l2_norm()?;
    let r2 = f_t.sub(f_t2s2t)?.l2_norm()?;
    Ok(r1.scale(0.5)?.add(r2.scale(0.5)?)?)
}

/// Attention training loss: CE on source features, CE on forward-mapped source
/// features (labels carried over), plus the L2 distance between the attention
/// distribution on inverse-mapped target features and the student distribution
/// on the original target features (batch Frobenius norm over sqrt n).
pub fn attention_loss<'t>(
    av: &AttVars<'t>,
    f_s: Var<'t>,
    y_s: &[usize],
    f_s2t: Var<'t>,
    f_t2s: Var<'t>,
    student_probs_on_f_t: Var<'t>,
) -> Result<Var<'t>, IaamError> {
    let ce_s = attention_logits(av, f_s)?.cross_entropy(y_s)?;
    let ce_s2t = attention_logits(av, f_s2t)?.cross_entropy(y_s)?;
    let att_t2s = attention_predict(av, f_t2s)?;
    let (n, c) = att_t2s.value().dims2();
    let (ns, cs) = student_probs_on_f_t.value().dims2();
    if n != ns || c != cs {
        return Err(IaamError::ClassMismatch(format!(
            "attention {}x{} vs student {}x{}",
            n, c, ns, cs
        )));
    }
    let l2 = att_t2s
        .sub(student_probs_on_f_t)?
        .l2_norm()?
        .scale(1.0 / (n as f64).sqrt())?;
    Ok(ce_s.add(ce_s2t)?.add(l2)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapLossConfig {
    /// Balance weight between matching and overlap terms.
    pub gamma_o: f64,
    /// Overlap temperature; higher values enforce larger inter-class margins.
    pub beta_o: f64,
}

impl Default for OverlapLossConfig {
    fn default() -> Self {
        OverlapLossConfig {
            gamma_o: 1.0,
            beta_o: 20.0,
        }
    }
}

pub struct OverlapLoss<'t> {
    pub total: Var<'t>,
    pub match_term: Var<'t>,
    pub overlap_term: Var<'t>,
}

/// Overlap suppression on probability rows: cross-entropy matching plus the
/// temperature-weighted pairwise log-sum penalty over wrong-class mass.
pub fn overlap_loss<'t>(
    y_pred: Var<'t>,
    labels: &[usize],
    cfg: &OverlapLossConfig,
) -> Result<OverlapLoss<'t>, IaamError> {
    assert!(cfg.beta_o > 0.0, "beta_o must be positive");
    let probs = y_pred.value();
    let (n, c) = probs.dims2();
    for r in 0..n {
        let sum: f64 = probs.data[r * c..(r + 1) * c].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(IaamError::NotAProbability { row: r, sum });
        }
    }
    if labels.len() != n {
        return Err(IaamError::ClassMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let beta = cfg.beta_o;
    // matching: -(1/N) sum log y_{i,k_i} (tiny floor keeps ln finite)
    let match_term = y_pred
        .select_per_row(labels)?
        .add_scalar(1e-300)?
        .ln()?
        .mean_all()?
        .neg()?;
    // overlap: (1/(beta N)) sum_i sum_{l != k} ln(e^{beta y_il} + e^{-beta y_ik})
    let pos = y_pred.scale(beta)?.exp()?; // e^{beta y_il}, n x C
    let neg_k = y_pred
        .select_per_row(labels)?
        .scale(-beta)?
        .exp()?; // e^{-beta y_ik}, n x 1
    let terms = pos.add_col_broadcast(neg_k)?.ln()?; // n x C
    let diag = terms.select_per_row(labels)?.sum_all()?;
    let overlap_term = terms
        .sum_all()?
        .sub(diag)?
        .scale(1.0 / (beta * n as f64))?;
    let total = match_term.add(overlap_term.scale(cfg.gamma_o)?)?;
    Ok(OverlapLoss {
        total,
        match_term,
        overlap_term,
    })
}

/// One training batch for the joint flow + attention objective.
#[derive(Debug, Clone)]
pub struct InnBatch {
    pub f_s: Arr,
    pub y_s: Vec<usize>,
    pub f_t: Arr,
    /// Student softmax distributions on the original target features.
    pub student_probs: Arr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for InnTrainConfig {
    fn default() -> Self {
        InnTrainConfig {
            learning_rate: 1e-3,
            steps: 50,
            sinkhorn: SinkhornConfig {
                reg: 0.1,
                max_iters: 100,
                tol: 1e-6,
            },
        }
    }
}

/// Joint SGD on flow and attention parameters minimizing the combined
/// mapping + cycle + attention objective. Returns the per-step loss trace.
pub fn train_inn(
    flow: &mut CouplingFlow,
    att: &mut AttentionHead,
    batches: &[InnBatch],
    cfg: &InnTrainConfig,
) -> Result<Vec<f64>, IaamError> {
    assert!(!batches.is_empty(), "no batches");
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = &batches[step % batches.len()];
        let tape = Tape::new();
        let fv = flow.vars(&tape, true);
        let av = att.vars(&tape, true);
        let f_s = tape.constant(batch.f_s.clone());
        let f_t = tape.constant(batch.f_t.clone());
        let student = tape.constant(batch.student_probs.clone());
        let loss = inn_loss_on_tape(&tape, &fv, &av, f_s, &batch.y_s, f_t, student, &cfg.sinkhorn)?;
        let lv = loss.scalar_value();
        if !lv.is_finite() || lv > 1e6 {
            return Err(IaamError::Diverged { step, loss: lv });
        }
        trace.push(lv);
        tape.backward(loss)?;
        fv.sgd_step(flow, cfg.learning_rate);
        av.sgd_step(att, cfg.learning_rate);
    }
    Ok(trace)
}

/// L^m + L^c + L^att on an existing tape.
#[allow(clippy::too_many_arguments)]
pub fn inn_loss_on_tape<'t>(
    tape: &'t Tape,
    fv: &FlowVars<'t>,
    av: &AttVars<'t>,
    f_s: Var<'t>,
    y_s: &[usize],
    f_t: Var<'t>,
    student_probs: Var<'t>,
    sinkhorn: &SinkhornConfig,
) -> Result<Var<'t>, IaamError> {
    let (f_s2t, _) = flow_forward(fv, f_s)?;
    let f_t2s = flow_inverse(fv, f_t)?;
    let f_s2t2s = flow_inverse(fv, f_s2t)?;
    let (f_t2s2t, _) = flow_forward(fv, f_t2s)?;
    let l_map = mapping_loss(tape, f_s2t, f_t, f_t2s, f_s, sinkhorn)?;
    let l_cyc = cycle_loss(f_s, f_s2t2s, f_t, f_t2s2t)?;
    let l_att = attention_loss(av, f_s, y_s, f_s2t, f_t2s, student_probs)?;
    Ok(l_map.add(l_cyc)?.add(l_att)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_feats(seed: u64, n: usize, d: usize) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr {
            shape: vec![n, d],
            data: (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn identity_at_init_with_zero_logdet() {
        let flow = CouplingFlow::new(8, 4, 2.0, 1);
        let tape = Tape::new();
        let fv = flow.vars(&tape, false);
        let x = tape.constant(random_feats(2, 5, 8));
        let (y, ld) = flow_forward(&fv, x).unwrap();
        assert_eq!(y.value(), x.value());
        assert_eq!(ld.scalar_value(), 0.0);
        let back = flow_inverse(&fv, y).unwrap();
        assert_eq!(back.value(), x.value());
    }

    fn trained_like_flow(seed: u64) -> CouplingFlow {
        // random non-identity flow: perturb every parameter
        let mut flow = CouplingFlow::new(8, 4, 2.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        for p in flow.params_mut() {
            for v in p.data.iter_mut() {
                *v += 0.3 * rng.gen_range(-1.0..1.0);
            }
        }
        flow
    }

    #[test]
    fn roundtrip_error_below_1e6() {
        let flow = trained_like_flow(7);
        let tape = Tape::new();
        let fv = flow.vars(&tape, false);
        let x = tape.constant(random_feats(3, 50, 8));
        let (y, _) = flow_forward(&fv, x).unwrap();
        let back = flow_inverse(&fv, y).unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in back.value().data.iter().zip(&x.value().data) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-6, "roundtrip error {}", worst);
    }

    #[test]
    fn width_mismatch_rejected() {
        let flow = CouplingFlow::new(8, 2, 2.0, 1);
        let tape = Tape::new();
        let fv = flow.vars(&tape, false);
        let x = tape.constant(random_feats(1, 3, 6));
        assert!(matches!(
            flow_forward(&fv, x),
            Err(IaamError::WidthMismatch { got: 6, want: 8 })
        ));
    }

    #[test]
    fn attention_uniform_when_queries_zero() {
        let mut att = AttentionHead::new(8, 4, 2, 1);
        for v in att.wq.data.iter_mut() {
            *v = 0.0;
        }
        let tape = Tape::new();
        let av = att.vars(&tape, false);
        let feats = tape.constant(random_feats(4, 6, 8));
        // zero queries -> uniform attention -> every output row identical
        let probs = attention_predict(&av, feats).unwrap().value();
        let (n, c) = probs.dims2();
        for r in 1..n {
            for j in 0..c {
                assert!((probs.at(r, j) - probs.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_element_weight_is_one() {
        let att = AttentionHead::new(8, 4, 2, 2);
        let tape = Tape::new();
        let av = att.vars(&tape, false);
        let feats = tape.constant(random_feats(5, 1, 8));
        let probs = attention_predict(&av, feats).unwrap().value();
        let s: f64 = probs.data.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_normalized() {
        let att = AttentionHead::new(8, 4, 2, 3);
        let tape = Tape::new();
        let av = att.vars(&tape, false);
        let feats = tape.constant(random_feats(6, 9, 8));
        let probs = attention_predict(&av, feats).unwrap().value();
        let (n, c) = probs.dims2();
        for r in 0..n {
            let s: f64 = probs.data[r * c..(r + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_empty_input_rejected() {
        let att = AttentionHead::new(8, 4, 2, 3);
        let tape = Tape::new();
        let av = att.vars(&tape, false);
        let feats = tape.constant(Arr::zeros(&[0, 8]));
        assert!(matches!(
            attention_logits(&av, feats),
            Err(IaamError::EmptyInput)
        ));
    }

    #[test]
    fn mapping_loss_near_zero_for_identical_batches() {
        // well-separated points: entropic blur across pairs is negligible
        let mut fa = random_feats(1, 6, 4);
        let mut fb = random_feats(2, 6, 4);
        for v in fa.data.iter_mut().chain(fb.data.iter_mut()) {
            *v *= 3.0;
        }
        let tape = Tape::new();
        let a = tape.constant(fa);
        let b = tape.constant(fb);
        let cfg = SinkhornConfig {
            max_iters: 5000,
            ..SinkhornConfig::default()
        };
        let loss = mapping_loss(&tape, a, a, b, b, &cfg).unwrap();
        assert!(loss.scalar_value().abs() < 1e-6, "{}", loss.scalar_value());
    }

    #[test]
    fn mapping_loss_nonnegative_and_symmetric() {
        let tape = Tape::new();
        let a = tape.constant(random_feats(3, 5, 4));
        let b = tape.constant(random_feats(4, 5, 4));
        let cfg = SinkhornConfig {
            reg: 0.2,
            max_iters: 20000,
            tol: 1e-13,
        };
        let l1 = mapping_loss(&tape, a, b, b, a, &cfg).unwrap().scalar_value();
        let l2 = mapping_loss(&tape, b, a, a, b, &cfg).unwrap().scalar_value();
        assert!(l1 >= 0.0);
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn cycle_loss_hand_value() {
        // per-row unit offset in one coordinate: loss = 0.5 * sqrt(n)
        let n = 9;
        let tape = Tape::new();
        let f_s = tape.constant(Arr::zeros(&[n, 4]));
        let mut shifted = Arr::zeros(&[n, 4]);
        for r in 0..n {
            shifted.data[r * 4] = 1.0;
        }
        let f_s2t2s = tape.constant(shifted);
        let f_t = tape.constant(Arr::zeros(&[n, 4]));
        let loss = cycle_loss(f_s, f_s2t2s, f_t, f_t).unwrap();
        assert!((loss.scalar_value() - 0.5 * (n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_symmetric_in_pairs() {
        let tape = Tape::new();
        let a = tape.constant(random_feats(1, 4, 4));
        let a2 = tape.constant(random_feats(2, 4, 4));
        let b = tape.constant(random_feats(3, 4, 4));
        let b2 = tape.constant(random_feats(4, 4, 4));
        let l1 = cycle_loss(a, a2, b, b2).unwrap().scalar_value();
        let l2 = cycle_loss(b, b2, a, a2).unwrap().scalar_value();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn overlap_loss_hand_values() {
        let cfg = OverlapLossConfig::default();
        // confident correct
        let tape = Tape::new();
        let pred = tape.constant(Arr::from_rows(&[vec![1.0, 0.0]]));
        let out = overlap_loss(pred, &[0], &cfg).unwrap();
        assert!((out.overlap_term.scalar_value() - 1.03e-10).abs() < 1e-11);
        assert!(out.match_term.scalar_value().abs() < 1e-9);
        // confident wrong
        let tape = Tape::new();
        let pred = tape.constant(Arr::from_rows(&[vec![0.0, 1.0]]));
        let out = overlap_loss(pred, &[0], &cfg).unwrap();
        assert!((out.overlap_term.scalar_value() - 1.0).abs() < 1e-6);
        // uniform match term = ln 2
        let tape = Tape::new();
        let pred = tape.constant(Arr::from_rows(&[vec![0.5, 0.5]]));
        let out = overlap_loss(pred, &[0], &cfg).unwrap();
        assert!((out.match_term.scalar_value() - 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn overlap_loss_rejects_non_probability_rows() {
        let tape = Tape::new();
        let pred = tape.constant(Arr::from_rows(&[vec![0.9, 0.3]]));
        assert!(matches!(
            overlap_loss(pred, &[0], &OverlapLossConfig::default()),
            Err(IaamError::NotAProbability { row: 0, .. })
        ));
    }

    #[test]
    fn overlap_term_monotone_in_wrong_class_mass() {
        // moving mass from the labeled class to the wrong classes raises the
        // penalty roughly linearly in total wrong-class mass
        let cfg = OverlapLossConfig::default();
        let value_at = |wrong: f64| {
            let tape = Tape::new();
            let pred =
                tape.constant(Arr::from_rows(&[vec![1.0 - wrong, wrong / 2.0, wrong / 2.0]]));
            overlap_loss(pred, &[0], &cfg)
                .unwrap()
                .overlap_term
                .scalar_value()
        };
        let mut prev = value_at(0.0);
        for w in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let cur = value_at(w);
            assert!(cur > prev, "not increasing at {}", w);
            prev = cur;
        }
    }

    #[test]
    fn higher_temperature_shrinks_confident_floor() {
        // a confident correct prediction is penalized less as beta_o grows:
        // the soft-margin floor ln(1 + e^{-beta}) / beta vanishes
        let floor_at = |beta: f64| {
            let cfg = OverlapLossConfig {
                gamma_o: 1.0,
                beta_o: beta,
            };
            let tape = Tape::new();
            let pred = tape.constant(Arr::from_rows(&[vec![1.0, 0.0]]));
            overlap_loss(pred, &[0], &cfg)
                .unwrap()
                .overlap_term
                .scalar_value()
        };
        assert!(floor_at(20.0) < floor_at(5.0));
        assert!(floor_at(5.0) < floor_at(1.0));
    }

    #[test]
    fn inn_training_decreases_loss_on_shifted_gaussians() {
        for seed in 0..5 {
            let mut flow = CouplingFlow::new(8, 4, 2.0, seed);
            let mut att = AttentionHead::new(8, 3, 2, seed + 50);
            let n = 16;
            let f_s = random_feats(seed, n, 8);
            let mut f_t = random_feats(seed + 10, n, 8);
            for v in f_t.data.iter_mut() {
                *v += 0.8; // mean shift
            }
            let y_s: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let student_probs = Arr {
                shape: vec![n, 3],
                data: vec![1.0 / 3.0; n * 3],
            };
            let batch = InnBatch {
                f_s,
                y_s,
                f_t,
                student_probs,
            };
            let cfg = InnTrainConfig {
                steps: 50,
                ..InnTrainConfig::default()
            };
            let trace = train_inn(&mut flow, &mut att, &[batch], &cfg).unwrap();
            assert!(
                trace.last().unwrap() < trace.first().unwrap(),
                "seed {}: {:?} .. {:?}",
                seed,
                trace.first(),
                trace.last()
            );
        }
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut flow = trained_like_flow(3);
        let mut att = AttentionHead::new(8, 3, 2, 4);
        let flow_before = flow.clone();
        let att_before = att.clone();
        let batch = InnBatch {
            f_s: random_feats(1, 8, 8),
            y_s: (0..8).map(|i| i % 3).collect(),
            f_t: random_feats(2, 8, 8),
            student_probs: Arr {
                shape: vec![8, 3],
                data: vec![1.0 / 3.0; 24],
            },
        };
        let cfg = InnTrainConfig {
            learning_rate: 0.0,
            steps: 1,
            ..InnTrainConfig::default()
        };
        train_inn(&mut flow, &mut att, &[batch], &cfg).unwrap();
        assert_eq!(flow, flow_before);
        assert_eq!(att, att_before);
    }
}
