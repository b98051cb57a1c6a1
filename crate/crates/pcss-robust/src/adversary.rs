//! White-box attacks on point coordinates (I-FGSM and PGD) and the
//! robustness metrics: per-class IoU, mIoU and the relative robustness drop.
//!
//! Both attacks ascend the softmax cross-entropy of the model's predictions
//! against the ground-truth labels, differentiating through the descriptor
//! pipeline with the neighbor structure recomputed (and then frozen) at each
//! iteration. sign(0) = 0. The PGD projection ball is L-infinity; the PGD
//! step uses the global L2 norm of the whole N x 3 gradient tensor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::PointCloud;
use crate::segnet::{self, SegModel};
use crate::tensor::{Arr, Tape, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient during {0} iteration {1}")]
    NonFiniteGradient(&'static str, usize),
    #[error("confusion matrix has no populated classes")]
    EmptyConfusion,
    #[error("robustness drop undefined: clean mIoU is zero")]
    ZeroCleanMiou,
    #[error(transparent)]
    Seg(#[from] segnet::SegError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Ifgsm,
    Pgd,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Ifgsm => write!(f, "ifgsm"),
            AttackKind::Pgd => write!(f, "pgd"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Step intensity in coordinate units.
    pub alpha: f64,
    /// PGD projection budget; defaults to alpha when omitted.
    pub epsilon: Option<f64>,
    pub iterations: usize,
}

impl AttackConfig {
    pub fn ifgsm(alpha: f64, iterations: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Ifgsm,
            alpha,
            epsilon: None,
            iterations,
        }
    }

    pub fn pgd(alpha: f64, epsilon: f64, iterations: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            alpha,
            epsilon: Some(epsilon),
            iterations,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.alpha <= 0.0 {
            return Err(AttackError::BadConfig(format!("alpha {} <= 0", self.alpha)));
        }
        if self.iterations < 1 {
            return Err(AttackError::BadConfig("iterations < 1".into()));
        }
        if self.kind == AttackKind::Pgd && self.epsilon() < self.alpha {
            return Err(AttackError::BadConfig(format!(
                "pgd budget epsilon {} < alpha {}",
                self.epsilon(),
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Cross-entropy gradient w.r.t. the point coordinates.
fn coordinate_gradient(
    model: &SegModel,
    points: &[[f64; 3]],
    labels: &[usize],
) -> Result<Arr, AttackError> {
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let coords = tape.leaf(
        Arr {
            shape: vec![points.len(), 3],
            data: points.iter().flat_map(|p| p.iter().copied()).collect(),
        },
        true,
    );
    let nbrs = segnet::knn_indices(points, model.k);
    let (_, logits) = segnet::forward_from_coords(&vars, coords, &nbrs, model.coord_scale)?;
    let loss = logits.cross_entropy(labels)?;
    tape.backward(loss)?;
    Ok(coords.grad())
}

/// Iterative fast gradient sign method: T signed-gradient ascent steps.
pub fn ifgsm_attack(
    model: &SegModel,
    pc: &PointCloud,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<PointCloud, AttackError> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Ifgsm {
        return Err(AttackError::BadConfig("kind must be ifgsm".into()));
    }
    let mut points = pc.points.clone();
    for t in 0..cfg.iterations {
        let grad = coordinate_gradient(model, &points, labels)?;
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient("ifgsm", t));
        }
        let step = grad.sign();
        for (i, p) in points.iter_mut().enumerate() {
            for c in 0..3 {
                p[c] += cfg.alpha * step.data[i * 3 + c];
            }
        }
    }
    Ok(PointCloud {
        points,
        labels: pc.labels.clone(),
        domain: pc.domain,
        scene_id: pc.scene_id,
    })
}

/// Projected gradient descent: L2-normalized steps, cumulative perturbation
/// projected onto the L-infinity ball of radius epsilon around the clean cloud.
pub fn pgd_attack(
    model: &SegModel,
    pc: &PointCloud,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<PointCloud, AttackError> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Pgd {
        return Err(AttackError::BadConfig("kind must be pgd".into()));
    }
    let eps = cfg.epsilon();
    let mut points = pc.points.clone();
    for t in 0..cfg.iterations {
        let grad = coordinate_gradient(model, &points, labels)?;
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient("pgd", t));
        }
        let norm = grad.frobenius_norm();
        if norm > 0.0 {
            for (i, p) in points.iter_mut().enumerate() {
                for c in 0..3 {
                    p[c] += cfg.alpha * grad.data[i * 3 + c] / norm;
                }
            }
        }
        // project the cumulative perturbation back into the eps ball
        for (p, clean) in points.iter_mut().zip(&pc.points) {
            for c in 0..3 {
                p[c] = p[c].clamp(clean[c] - eps, clean[c] + eps);
            }
        }
        debug_assert!(points
            .iter()
            .zip(&pc.points)
            .all(|(p, q)| (0..3).all(|c| (p[c] - q[c]).abs() <= eps + 1e-12)));
    }
    Ok(PointCloud {
        points,
        labels: pc.labels.clone(),
        domain: pc.domain,
        scene_id: pc.scene_id,
    })
}

pub fn run_attack(
    model: &SegModel,
    pc: &PointCloud,
    cfg: &AttackConfig,
) -> Result<PointCloud, AttackError> {
    let labels = pc.labels_usize();
    match cfg.kind {
        AttackKind::Ifgsm => ifgsm_attack(model, pc, &labels, cfg),
        AttackKind::Pgd => pgd_attack(model, pc, &labels, cfg),
    }
}

/// C x C counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn add_predictions(&mut self, truth: &[usize], pred: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.record(t, p);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes)
            .map(|j| self.counts[i * self.num_classes + j])
            .sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes)
            .map(|i| self.counts[i * self.num_classes + j])
            .sum()
    }
}

/// IoU_i = tp / (row_i + col_i - tp); classes with an empty union are
/// excluded from the mean (returned as None).
pub fn compute_miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>), AttackError> {
    let mut per_class = Vec::with_capacity(cm.num_classes);
    let mut sum = 0.0;
    let mut populated = 0usize;
    for i in 0..cm.num_classes {
        let tp = cm.counts[i * cm.num_classes + i];
        let union = cm.row_sum(i) + cm.col_sum(i) - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            populated += 1;
        }
    }
    if populated == 0 {
        return Err(AttackError::EmptyConfusion);
    }
    Ok((sum / populated as f64, per_class))
}

/// (mIoU_clean - mIoU_adv) / mIoU_clean.
pub fn robustness_drop(miou_clean: f64, miou_adv: f64) -> Result<f64, AttackError> {
    if miou_clean <= 0.0 {
        return Err(AttackError::ZeroCleanMiou);
    }
    Ok((miou_clean - miou_adv) / miou_clean)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassIou {
    pub class: usize,
    pub iou_clean: Option<f64>,
    pub iou_adv: Option<f64>,
}

/// Evaluation summary for one attack condition, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub attack: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub miou_clean: f64,
    pub miou_adv: f64,
    pub robustness_drop: f64,
    pub per_class: Vec<PerClassIou>,
}

/// Evaluate a model on clean and attacked versions of the given clouds.
pub fn evaluate_robustness(
    model: &SegModel,
    clouds: &[PointCloud],
    cfg: &AttackConfig,
) -> Result<RobustnessReport, AttackError> {
    let mut cm_clean = ConfusionMatrix::new(model.num_classes);
    let mut cm_adv = ConfusionMatrix::new(model.num_classes);
    for pc in clouds {
        let truth = pc.labels_usize();
        cm_clean.add_predictions(&truth, &segnet::predict(model, pc)?);
        let adv = run_attack(model, pc, cfg)?;
        cm_adv.add_predictions(&truth, &segnet::predict(model, &adv)?);
    }
    let (miou_clean, per_clean) = compute_miou(&cm_clean)?;
    let (miou_adv, per_adv) = compute_miou(&cm_adv)?;
    Ok(RobustnessReport {
        attack: cfg.kind.to_string(),
        alpha: cfg.alpha,
        epsilon: cfg.epsilon(),
        iterations: cfg.iterations,
        miou_clean,
        miou_adv,
        robustness_drop: robustness_drop(miou_clean, miou_adv)?,
        per_class: per_clean
            .iter()
            .zip(&per_adv)
            .enumerate()
            .map(|(class, (&c, &a))| PerClassIou {
                class,
                iou_clean: c,
                iou_adv: a,
            })
            .collect(),
    })
}
