//! Quality-aware contrastive memory bank: density/cleanliness feature
//! scoring with class-balanced neighbor counts, a momentum-updated prototype
//! store, and the InfoNCE-style contrastive adaptation loss.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::Checkpoint;
use crate::segnet::Dense;
use crate::tensor::{Arr, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum QcmbError {
    #[error("need at least 2 features to score, got {0}")]
    TooFewFeatures(usize),
    #[error("{got} labels for {want} features")]
    LabelMismatch { got: usize, want: usize },
    #[error("label {label} out of range for {classes} classes")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("no class has selected features")]
    NothingSelected,
    #[error("every query lacked a filled positive prototype")]
    AllQueriesSkipped,
    #[error("feature width {got} does not match bank input width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    /// Neighbor budget before class-aware scaling.
    pub k_base: usize,
    /// Density vs. cleanliness balance.
    pub gamma_q: f64,
    /// Per-class selection fraction (top scores kept).
    pub rho: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            k_base: 16,
            gamma_q: 1.0,
            rho: 0.25,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<(), QcmbError> {
        assert!(self.k_base >= 1, "k_base must be >= 1");
        assert!(self.gamma_q >= 0.0, "gamma_q must be nonnegative");
        assert!(
            self.rho > 0.0 && self.rho <= 1.0,
            "rho must lie in (0, 1]"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Cap on positive prototypes per query (filled same-class slots).
    pub max_positives: usize,
    /// Cap on negative prototypes per query (filled other-class slots).
    pub max_negatives: usize,
    /// Weight of the contrastive term in the combined loss.
    pub lambda_c: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.07,
            max_positives: 64,
            max_negatives: 64,
            lambda_c: 0.1,
        }
    }
}

/// Class-aware neighbor count: k_base scaled by the cube root of the class
/// share, rounded to nearest and floored at 1.
pub fn class_k(k_base: usize, n_c: usize, n_total: usize) -> usize {
    assert!(n_c >= 1 && n_total >= n_c, "need 1 <= N_c <= N_total");
    let k = k_base as f64 * (n_c as f64 / n_total as f64).cbrt();
    (k.round() as usize).max(1)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub struct QualityScores {
    pub scores: Vec<f64>,
    /// True when some class's k had to be clamped to n-1.
    pub k_clamped: bool,
}

/// Density-minus-cleanliness score per feature: mean inverse-shifted distance
/// over the k nearest latent neighbors, minus the gamma_q-weighted mean cosine
/// similarity to differently-labeled neighbors among them. k follows the
/// query's class via [`class_k`].
pub fn quality_score(
    feats: &Arr,
    labels: &[usize],
    cfg: &QualityConfig,
) -> Result<QualityScores, QcmbError> {
    cfg.validate()?;
    let (n, d) = feats.dims2();
    if n < 2 {
        return Err(QcmbError::TooFewFeatures(n));
    }
    if labels.len() != n {
        return Err(QcmbError::LabelMismatch {
            got: labels.len(),
            want: n,
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let mut k_clamped = false;
    let k_for: BTreeMap<usize, usize> = counts
        .iter()
        .map(|(&c, &nc)| {
            let mut k = class_k(cfg.k_base, nc, n);
            if k > n - 1 {
                k = n - 1;
                k_clamped = true;
            }
            (c, k)
        })
        .collect();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &feats.data[i * d..(i + 1) * d];
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let xj = &feats.data[j * d..(j + 1) * d];
                let dist2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                (dist2.sqrt(), j)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = k_for[&labels[i]];
        let mut density = 0.0;
        let mut penalty = 0.0;
        for &(dist, j) in dists.iter().take(k) {
            density += 1.0 / (dist + 1.0);
            if labels[j] != labels[i] {
                let xj = &feats.data[j * d..(j + 1) * d];
                penalty += cosine(xi, xj);
            }
        }
        scores.push((density - cfg.gamma_q * penalty) / k as f64);
    }
    Ok(QualityScores { scores, k_clamped })
}

/// Top-ceil(rho * count) feature indices per class by score, ties broken by
/// the lower feature index. Classes absent from the batch simply don't appear.
pub fn select_high_quality(
    labels: &[usize],
    scores: &[f64],
    rho: f64,
) -> BTreeMap<usize, Vec<usize>> {
    assert_eq!(labels.len(), scores.len(), "label/score length mismatch");
    assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for members in by_class.values_mut() {
        members.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let keep = ((rho * members.len() as f64).ceil() as usize).max(1);
        members.truncate(keep);
        members.sort_unstable();
    }
    by_class
}

pub const PROJ_HIDDEN: usize = 64;

/// C x M x m prototype store with momentum updates and a small projection
/// head mapping backbone features into the bank's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    pub num_classes: usize,
    /// Anchors per class (M).
    pub slots: usize,
    /// Embedding width (m).
    pub width: usize,
    pub beta_m: f64,
    /// Row-major C*M x m.
    pub prototypes: Vec<f64>,
    pub filled: Vec<bool>,
    /// Round-robin cursor per class.
    pub next_slot: Vec<usize>,
    pub proj1: Dense,
    pub proj2: Dense,
}

impl MemoryBank {
    pub fn new(
        dim: usize,
        num_classes: usize,
        slots: usize,
        width: usize,
        beta_m: f64,
        seed: u64,
    ) -> Self {
        assert!(num_classes >= 2 && slots >= 1 && width >= 1);
        assert!((0.0..1.0).contains(&beta_m));
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
        MemoryBank {
            dim,
            num_classes,
            slots,
            width,
            beta_m,
            prototypes: vec![0.0; num_classes * slots * width],
            filled: vec![false; num_classes * slots],
            next_slot: vec![0; num_classes],
            proj1: init(dim, PROJ_HIDDEN),
            proj2: init(PROJ_HIDDEN, width),
        }
    }

    pub fn slot(&self, class: usize, slot: usize) -> &[f64] {
        let base = (class * self.slots + slot) * self.width;
        &self.prototypes[base..base + self.width]
    }

    pub fn filled_slots(&self, class: usize) -> Vec<usize> {
        (0..self.slots)
            .filter(|&s| self.filled[class * self.slots + s])
            .collect()
    }

    /// Projection head applied off-tape.
    pub fn project(&self, feats: &Arr) -> Result<Arr, QcmbError> {
        let (n, d) = feats.dims2();
        if d != self.dim {
            return Err(QcmbError::WidthMismatch {
                got: d,
                want: self.dim,
            });
        }
        let tape = Tape::new();
        let x = tape.constant(feats.clone());
        let pv = self.proj_vars(&tape, false);
        let out = project_on_tape(&pv, x)?;
        let _ = n;
        Ok(out.value())
    }

    pub fn proj_vars<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ProjVars<'t> {
        ProjVars {
            dim: self.dim,
            vars: [
                tape.leaf(self.proj1.w.clone(), requires_grad),
                tape.leaf(self.proj1.b.clone(), requires_grad),
                tape.leaf(self.proj2.w.clone(), requires_grad),
                tape.leaf(self.proj2.b.clone(), requires_grad),
            ],
        }
    }

    pub fn append_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert(
            "bank.meta",
            Arr {
                shape: vec![5],
                data: vec![
                    self.dim as f64,
                    self.num_classes as f64,
                    self.slots as f64,
                    self.width as f64,
                    self.beta_m,
                ],
            },
        );
        ck.insert(
            "bank.prototypes",
            Arr {
                shape: vec![self.num_classes * self.slots, self.width],
                data: self.prototypes.clone(),
            },
        );
        ck.insert(
            "bank.filled",
            Arr {
                shape: vec![self.num_classes * self.slots],
                data: self.filled.iter().map(|&f| f as u8 as f64).collect(),
            },
        );
        ck.insert(
            "bank.next_slot",
            Arr {
                shape: vec![self.num_classes],
                data: self.next_slot.iter().map(|&s| s as f64).collect(),
            },
        );
        ck.insert("bank.proj1.w", self.proj1.w.clone());
        ck.insert("bank.proj1.b", self.proj1.b.clone());
        ck.insert("bank.proj2.w", self.proj2.w.clone());
        ck.insert("bank.proj2.b", self.proj2.b.clone());
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, QcmbError> {
        let grab = |name: &str| -> Result<Arr, QcmbError> {
            ck.get(name)
                .map(|a| a.clone())
                .map_err(|_| QcmbError::NothingSelected)
        };
        let meta = grab("bank.meta")?;
        let (dim, num_classes, slots, width) = (
            meta.data[0] as usize,
            meta.data[1] as usize,
            meta.data[2] as usize,
            meta.data[3] as usize,
        );
        Ok(MemoryBank {
            dim,
            num_classes,
            slots,
            width,
            beta_m: meta.data[4],
            prototypes: grab("bank.prototypes")?.data,
            filled: grab("bank.filled")?.data.iter().map(|&v| v != 0.0).collect(),
            next_slot: grab("bank.next_slot")?
                .data
                .iter()
                .map(|&v| v as usize)
                .collect(),
            proj1: Dense {
                w: grab("bank.proj1.w")?,
                b: grab("bank.proj1.b")?,
            },
            proj2: Dense {
                w: grab("bank.proj2.w")?,
                b: grab("bank.proj2.b")?,
            },
        })
    }
}

/// Tape handles for the projection head (w1, b1, w2, b2).
pub struct ProjVars<'t> {
    dim: usize,
    pub vars: [Var<'t>; 4],
}

impl<'t> ProjVars<'t> {
    pub fn sgd_step(&self, bank: &mut MemoryBank, lr: f64) {
        let params = [
            &mut bank.proj1.w,
            &mut bank.proj1.b,
            &mut bank.proj2.w,
            &mut bank.proj2.b,
        ];
        for (var, param) in self.vars.iter().zip(params) {
            let g = var.grad();
            for (p, gv) in param.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }
}

/// Differentiable projection of backbone features into bank space.
pub fn project_on_tape<'t>(pv: &ProjVars<'t>, feats: Var<'t>) -> Result<Var<'t>, QcmbError> {
    let (_, d) = feats.value().dims2();
    if d != pv.dim {
        return Err(QcmbError::WidthMismatch { got: d, want: pv.dim });
    }
    Ok(feats
        .matmul(pv.vars[0])?
        .add_row_broadcast(pv.vars[1])?
        .tanh()?
        .matmul(pv.vars[2])?
        .add_row_broadcast(pv.vars[3])?)
}

/// Momentum update for one class: the class mean of the selected features is
/// projected and either initializes the next unfilled slot directly or is
/// momentum-blended into the round-robin slot.
pub fn update_bank(
    bank: &mut MemoryBank,
    class: usize,
    selected: &Arr,
) -> Result<(), QcmbError> {
    if class >= bank.num_classes {
        return Err(QcmbError::ClassOutOfRange {
            label: class,
            classes: bank.num_classes,
        });
    }
    let (n, d) = selected.dims2();
    if n == 0 {
        return Err(QcmbError::NothingSelected);
    }
    if d != bank.dim {
        return Err(QcmbError::WidthMismatch { got: d, want: bank.dim });
    }
    let mut mean = Arr::zeros(&[1, d]);
    for r in 0..n {
        for c in 0..d {
            mean.data[c] += selected.at(r, c) / n as f64;
        }
    }
    let u = bank.project(&mean)?;
    let slot = bank.next_slot[class];
    let flag = class * bank.slots + slot;
    let base = flag * bank.width;
    if bank.filled[flag] {
        for j in 0..bank.width {
            bank.prototypes[base + j] =
                bank.beta_m * bank.prototypes[base + j] + (1.0 - bank.beta_m) * u.data[j];
        }
    } else {
        bank.prototypes[base..base + bank.width].copy_from_slice(&u.data);
        bank.filled[flag] = true;
    }
    bank.next_slot[class] = (slot + 1) % bank.slots;
    Ok(())
}

fn l2_normalize_rows_const(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                r.clone()
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

/// InfoNCE-style loss of projected queries against the bank's prototypes:
/// cosine similarities over temperature, positives are the query class's
/// filled slots, negatives the other classes' filled slots. Queries without a
/// filled positive are skipped; an all-skipped batch is an error.
pub fn contrastive_loss<'t>(
    tape: &'t Tape,
    queries: Var<'t>,
    bank: &MemoryBank,
    labels: &[usize],
    cfg: &ContrastConfig,
) -> Result<Var<'t>, QcmbError> {
    assert!(cfg.temperature > 0.0, "temperature must be positive");
    assert!(cfg.max_positives >= 1 && cfg.max_negatives >= 1);
    let (b, m) = queries.value().dims2();
    if labels.len() != b {
        return Err(QcmbError::LabelMismatch {
            got: labels.len(),
            want: b,
        });
    }
    if m != bank.width {
        return Err(QcmbError::WidthMismatch {
            got: m,
            want: bank.width,
        });
    }
    for &l in labels {
        if l >= bank.num_classes {
            return Err(QcmbError::ClassOutOfRange {
                label: l,
                classes: bank.num_classes,
            });
        }
    }
    // prototype matrix: all filled slots, tagged with their class
    let mut proto_rows: Vec<Vec<f64>> = Vec::new();
    let mut proto_class: Vec<usize> = Vec::new();
    for c in 0..bank.num_classes {
        for s in bank.filled_slots(c) {
            proto_rows.push(bank.slot(c, s).to_vec());
            proto_class.push(c);
        }
    }
    let total = proto_rows.len();
    if total == 0 {
        return Err(QcmbError::AllQueriesSkipped);
    }
    let protos = l2_normalize_rows_const(&proto_rows);

    // per-row positive / in-play masks honoring the per-query caps
    let mut pos_mask = Arr::zeros(&[b, total]);
    let mut all_mask = Arr::zeros(&[b, total]);
    let mut active = Vec::with_capacity(b);
    for (i, &l) in labels.iter().enumerate() {
        let mut pos = 0usize;
        let mut neg = 0usize;
        for (p, &pc) in proto_class.iter().enumerate() {
            if pc == l && pos < cfg.max_positives {
                pos_mask.data[i * total + p] = 1.0;
                all_mask.data[i * total + p] = 1.0;
                pos += 1;
            } else if pc != l && neg < cfg.max_negatives {
                all_mask.data[i * total + p] = 1.0;
                neg += 1;
            }
        }
        active.push(pos > 0);
    }
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(QcmbError::AllQueriesSkipped);
    }
    // skipped rows contribute ln(1) - ln(1) = 0 via a dummy all-ones row
    for (i, &ok) in active.iter().enumerate() {
        if !ok {
            for p in 0..total {
                pos_mask.data[i * total + p] = 0.0;
                all_mask.data[i * total + p] = 0.0;
            }
            pos_mask.data[i * total] = 1.0;
            all_mask.data[i * total] = 1.0;
        }
    }

    // L2-normalize queries on tape so the inner product is cosine similarity
    let sq = queries.mul(queries)?;
    let norms = sq.row_sum()?.add_scalar(1e-24)?.sqrt()?;
    let qn = queries.mul_col_broadcast(norms.recip()?)?;

    let proto_t = {
        let mut a = Arr::zeros(&[m, total]);
        for (p, row) in protos.iter().enumerate() {
            for j in 0..m {
                a.data[j * total + p] = row[j];
            }
        }
        tape.constant(a)
    };
    let logits = qn.matmul(proto_t)?.scale(1.0 / cfg.temperature)?;
    // skipped rows have identical pos/all sums, so their log-ratio is exactly 0
    let e = logits.exp()?;
    let pos_sum = e.mul(tape.constant(pos_mask))?.row_sum()?;
    let all_sum = e.mul(tape.constant(all_mask))?.row_sum()?;
    let per_row = pos_sum.ln()?.sub(all_sum.ln()?)?;
    Ok(per_row.sum_all()?.scale(-1.0 / n_active as f64)?)
}

/// L_c = L_seg + lambda_c * L_con.
pub fn combined_loss<'t>(
    l_seg: Var<'t>,
    l_con: Var<'t>,
    lambda_c: f64,
) -> Result<Var<'t>, QcmbError> {
    Ok(l_seg.add(l_con.scale(lambda_c)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn class_k_hand_values() {
        assert_eq!(class_k(16, 1, 8), 8);
        assert_eq!(class_k(16, 8, 8), 16);
        assert_eq!(class_k(16, 1, 1000), 2);
        assert_eq!(class_k(4, 1, 1_000_000), 1); // floored at 1
    }

    #[test]
    fn class_k_monotone_in_class_count() {
        let mut prev = 0;
        for nc in 1..=100 {
            let k = class_k(16, nc, 100);
            assert!(k >= prev);
            prev = k;
        }
    }

    #[test]
    fn quality_score_same_class_neighbors_at_unit_distance() {
        // equilateral triangle, side 1, all one class, k forced to 2
        let h = 3f64.sqrt() / 2.0;
        let feats = Arr::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, h],
        ]);
        let cfg = QualityConfig {
            k_base: 2,
            ..QualityConfig::default()
        };
        let out = quality_score(&feats, &[0, 0, 0], &cfg).unwrap();
        for s in out.scores {
            assert_relative_eq!(s, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn quality_score_penalizes_aligned_wrong_class_neighbor() {
        // query (1,0): same-class neighbor at distance 1, plus a collinear
        // wrong-class neighbor at distance 1 with cosine similarity 1
        let feats = Arr::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0]]);
        let cfg = QualityConfig {
            k_base: 2,
            ..QualityConfig::default()
        };
        let out = quality_score(&feats, &[0, 1, 0], &cfg).unwrap();
        assert_relative_eq!(out.scores[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quality_score_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let feats = Arr {
            shape: vec![n, 5],
            data: (0..n * 5).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let cfg = QualityConfig::default();
        let out = quality_score(&feats, &labels, &cfg).unwrap();
        for s in out.scores {
            // density in (0,1], penalty magnitude at most gamma_q
            assert!(s > -cfg.gamma_q - 1e-12 && s <= 1.0 + cfg.gamma_q + 1e-12);
        }
    }

    #[test]
    fn quality_score_clamps_oversized_k() {
        let feats = Arr::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let cfg = QualityConfig {
            k_base: 50,
            ..QualityConfig::default()
        };
        let out = quality_score(&feats, &[0, 0, 0], &cfg).unwrap();
        assert!(out.k_clamped);
        assert_eq!(out.scores.len(), 3);
    }

    #[test]
    fn quality_score_rejects_tiny_batches() {
        let feats = Arr::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(
            quality_score(&feats, &[0], &QualityConfig::default()),
            Err(QcmbError::TooFewFeatures(1))
        ));
    }

    #[test]
    fn selection_rules() {
        let labels = [0, 0, 1, 1, 1, 1];
        let scores = [0.9, 0.1, 0.5, 0.5, 0.8, 0.2];
        // rho = 1: everything kept
        let all = select_high_quality(&labels, &scores, 1.0);
        assert_eq!(all[&0], vec![0, 1]);
        assert_eq!(all[&1], vec![2, 3, 4, 5]);
        // rho = 0.5: top half, ties to the lower index
        let half = select_high_quality(&labels, &scores, 0.5);
        assert_eq!(half[&0], vec![0]);
        assert_eq!(half[&1], vec![2, 4]); // 0.8 first, then 0.5-tie -> index 2
    }

    fn tiny_bank(slots: usize) -> MemoryBank {
        MemoryBank::new(4, 3, slots, 2, 0.98, 5)
    }

    #[test]
    fn first_update_initializes_slot_exactly() {
        let mut bank = tiny_bank(2);
        let feats = Arr::from_rows(&[vec![0.4, -0.2, 0.9, 0.1], vec![0.0, 0.6, -0.3, 0.5]]);
        update_bank(&mut bank, 1, &feats).unwrap();
        let mut mean = Arr::zeros(&[1, 4]);
        for c in 0..4 {
            mean.data[c] = (feats.at(0, c) + feats.at(1, c)) / 2.0;
        }
        let u = bank.project(&mean).unwrap();
        assert_eq!(bank.slot(1, 0), &u.data[..]);
        assert_eq!(bank.filled_slots(1), vec![0]);
        assert_eq!(bank.next_slot[1], 1);
    }

    #[test]
    fn momentum_blend_from_zero_slot_is_two_percent_of_target() {
        let mut bank = tiny_bank(1);
        // pretend the slot is already filled with zeros
        bank.filled[0] = true;
        let feats = Arr::from_rows(&[vec![1.0, 0.5, -0.5, 0.2]]);
        let u = bank.project(&feats).unwrap();
        update_bank(&mut bank, 0, &feats).unwrap();
        for (got, want) in bank.slot(0, 0).iter().zip(&u.data) {
            assert_relative_eq!(*got, 0.02 * want, epsilon = 1e-12);
        }
    }

    #[test]
    fn repeated_updates_converge_geometrically() {
        let mut bank = tiny_bank(1);
        let feats = Arr::from_rows(&[vec![0.3, -0.8, 0.1, 0.6]]);
        let u = bank.project(&feats).unwrap();
        update_bank(&mut bank, 2, &feats).unwrap(); // initialization
        let start: Vec<f64> = bank.slot(2, 0).to_vec();
        for _ in 0..10 {
            update_bank(&mut bank, 2, &feats).unwrap();
        }
        // residual shrinks by beta_m^10
        for ((got, want), s0) in bank.slot(2, 0).iter().zip(&u.data).zip(&start) {
            let predicted = want + (s0 - want) * 0.98f64.powi(10);
            assert_relative_eq!(*got, predicted, epsilon = 1e-12);
        }
    }

    #[test]
    fn update_is_convex_combination() {
        let mut bank = tiny_bank(1);
        bank.filled[0] = true;
        let lo = -0.07;
        let hi = 0.12;
        for v in bank.prototypes[0..2].iter_mut() {
            *v = hi;
        }
        let feats = Arr::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let u = bank.project(&feats).unwrap();
        assert!(u.data.iter().all(|&v| v >= lo && v <= hi), "pick better bounds");
        update_bank(&mut bank, 0, &feats).unwrap();
        for &v in bank.slot(0, 0) {
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn bank_shape_is_stable_across_updates() {
        let mut bank = tiny_bank(2);
        let feats = Arr::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]);
        for step in 0..7 {
            update_bank(&mut bank, step % 3, &feats).unwrap();
            assert_eq!(bank.prototypes.len(), 3 * 2 * 2);
            assert_eq!(bank.filled.len(), 3 * 2);
        }
    }

    /// Bank with hand-set prototypes in 2-D embedding space.
    fn hand_bank(protos: &[(usize, Vec<f64>)]) -> MemoryBank {
        let mut bank = MemoryBank::new(4, 3, 4, 2, 0.98, 9);
        for (i, (class, v)) in protos.iter().enumerate() {
            let slot = bank.next_slot[*class];
            let flag = class * bank.slots + slot;
            bank.prototypes[flag * 2..flag * 2 + 2].copy_from_slice(v);
            bank.filled[flag] = true;
            bank.next_slot[*class] = (slot + 1) % bank.slots;
            let _ = i;
        }
        bank
    }

    #[test]
    fn contrastive_equal_similarity_is_ln_two() {
        let bank = hand_bank(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let tape = Tape::new();
        let q = tape.leaf(Arr::from_rows(&[vec![1.0, 1.0]]), false);
        let loss = contrastive_loss(&tape, q, &bank, &[0], &ContrastConfig::default()).unwrap();
        assert_relative_eq!(loss.scalar_value(), 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn contrastive_perfect_separation_is_near_zero() {
        let bank = hand_bank(&[(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0])]);
        let tape = Tape::new();
        let q = tape.leaf(Arr::from_rows(&[vec![1.0, 0.0]]), false);
        let loss = contrastive_loss(&tape, q, &bank, &[0], &ContrastConfig::default()).unwrap();
        let expected = (1.0 + (-2.0 / 0.07f64).exp()).ln();
        assert_relative_eq!(loss.scalar_value(), expected, epsilon = 1e-12);
        assert!(loss.scalar_value() < 1e-12);
    }

    #[test]
    fn contrastive_duplicated_batch_keeps_mean() {
        let bank = hand_bank(&[
            (0, vec![0.8, 0.6]),
            (1, vec![-0.6, 0.8]),
            (2, vec![0.0, -1.0]),
        ]);
        let cfg = ContrastConfig::default();
        let tape = Tape::new();
        let q1 = tape.leaf(Arr::from_rows(&[vec![1.0, 0.2], vec![-0.3, 0.9]]), false);
        let l1 = contrastive_loss(&tape, q1, &bank, &[0, 1], &cfg)
            .unwrap()
            .scalar_value();
        let q2 = tape.leaf(
            Arr::from_rows(&[
                vec![1.0, 0.2],
                vec![-0.3, 0.9],
                vec![1.0, 0.2],
                vec![-0.3, 0.9],
            ]),
            false,
        );
        let l2 = contrastive_loss(&tape, q2, &bank, &[0, 1, 0, 1], &cfg)
            .unwrap()
            .scalar_value();
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_monotone_in_similarities() {
        // pulling the query toward its positive lowers the loss; toward the
        // negative raises it
        let bank = hand_bank(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let cfg = ContrastConfig::default();
        let loss_at = |angle: f64| {
            let tape = Tape::new();
            let q = tape.leaf(Arr::from_rows(&[vec![angle.cos(), angle.sin()]]), false);
            contrastive_loss(&tape, q, &bank, &[0], &cfg)
                .unwrap()
                .scalar_value()
        };
        let mut prev = loss_at(0.0);
        for step in 1..=6 {
            let cur = loss_at(step as f64 * std::f64::consts::FRAC_PI_2 / 6.0);
            assert!(cur > prev, "loss not increasing toward negative");
            prev = cur;
        }
    }

    #[test]
    fn contrastive_skips_classes_without_prototypes() {
        let bank = hand_bank(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let cfg = ContrastConfig::default();
        let tape = Tape::new();
        // class 2 has no prototypes: that query is skipped, the other counted
        let q = tape.leaf(Arr::from_rows(&[vec![1.0, 1.0], vec![0.5, 0.5]]), false);
        let loss = contrastive_loss(&tape, q, &bank, &[0, 2], &cfg).unwrap();
        assert_relative_eq!(loss.scalar_value(), 2f64.ln(), epsilon = 1e-9);
        // all queries orphaned -> error
        let q2 = tape.leaf(Arr::from_rows(&[vec![1.0, 1.0]]), false);
        assert!(matches!(
            contrastive_loss(&tape, q2, &bank, &[2], &cfg),
            Err(QcmbError::AllQueriesSkipped)
        ));
    }

    #[test]
    fn contrastive_gradient_reaches_projection_head() {
        let bank = hand_bank(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let tape = Tape::new();
        let pv = bank.proj_vars(&tape, true);
        let feats = tape.constant(Arr::from_rows(&[vec![0.2, -0.4, 0.6, 0.1]]));
        let z = project_on_tape(&pv, feats).unwrap();
        let loss = contrastive_loss(&tape, z, &bank, &[0], &ContrastConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        let g = pv.vars[0].grad();
        assert!(g.data.iter().any(|&v| v != 0.0));
        assert!(g.all_finite());
    }

    #[test]
    fn combined_loss_arithmetic() {
        let tape = Tape::new();
        let seg = tape.constant(Arr::scalar(1.0));
        let con = tape.constant(Arr::scalar(0.5));
        let total = combined_loss(seg, con, 0.1).unwrap();
        assert_relative_eq!(total.scalar_value(), 1.05, epsilon = 1e-15);
        let zero = combined_loss(seg, con, 0.0).unwrap();
        assert_relative_eq!(zero.scalar_value(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bank_checkpoint_roundtrip() {
        let mut bank = tiny_bank(2);
        let feats = Arr::from_rows(&[vec![0.3, 0.1, -0.2, 0.7]]);
        update_bank(&mut bank, 0, &feats).unwrap();
        update_bank(&mut bank, 2, &feats).unwrap();
        let mut ck = Checkpoint::new(4, 3);
        bank.append_to_checkpoint(&mut ck);
        let back = MemoryBank::from_checkpoint(&ck).unwrap();
        assert_eq!(bank, back);
    }
}
