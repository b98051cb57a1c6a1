//! Teacher-student adaptation loop: confidence-filtered pseudo-labeling with
//! an EMA teacher, optionally strengthened by the invertible alignment losses
//! and the contrastive memory bank. Step order is fixed for reproducibility:
//! pseudo-labels, INN step, loss assembly, student step, EMA update.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::adversary::{compute_miou, AttackError, ConfusionMatrix};
use crate::iaam::{
    self, attention_predict, flow_inverse, AttentionHead, CouplingFlow, IaamError, InnBatch,
    InnTrainConfig, OverlapLossConfig,
};
use crate::ot::SinkhornConfig;
use crate::qcmb::{
    self, contrastive_loss, project_on_tape, select_high_quality, update_bank, ContrastConfig,
    MemoryBank, QcmbError, QualityConfig,
};
use crate::scene::PointCloud;
use crate::segnet::{
    self, argmax_rows, forward_from_coords, knn_indices, SegError, SegModel,
};
use crate::tensor::{Arr, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error("need at least one source and one target scene")]
    NoScenes,
    #[error("teacher/student architectures differ: {0}")]
    ArchMismatch(String),
    #[error("non-finite {component} at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Iaam(#[from] IaamError),
    #[error(transparent)]
    Qcmb(#[from] QcmbError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    /// Teacher probability required to accept a pseudo-label.
    pub confidence_threshold: f64,
    pub ema_rate: f64,
    pub lr_student: f64,
    pub lr_inn: f64,
    pub lr_projection: f64,
    pub overlap: OverlapLossConfig,
    pub contrast: ContrastConfig,
    pub quality: QualityConfig,
    pub sinkhorn: SinkhornConfig,
    /// Anchors per class (M).
    pub bank_slots: usize,
    /// Bank embedding width (m).
    pub bank_width: usize,
    pub beta_m: f64,
    pub flow_blocks: usize,
    pub attention_heads: usize,
    pub enable_iaam: bool,
    pub enable_qcmb: bool,
    /// Validation mIoU every this many steps (0 = never).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 100,
            confidence_threshold: 0.85,
            ema_rate: 0.99,
            lr_student: 1e-2,
            lr_inn: 1e-3,
            lr_projection: 1e-3,
            overlap: OverlapLossConfig::default(),
            contrast: ContrastConfig::default(),
            quality: QualityConfig::default(),
            sinkhorn: InnTrainConfig::default().sinkhorn,
            bank_slots: 64,
            bank_width: 32,
            beta_m: 0.98,
            flow_blocks: 4,
            attention_heads: 2,
            enable_iaam: true,
            enable_qcmb: true,
            validate_every: 0,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "ema_rate {} outside (0, 1)",
                self.ema_rate
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "confidence_threshold {} outside (0, 1]",
                self.confidence_threshold
            )));
        }
        if self.steps == 0 {
            return Err(PipelineError::InvalidConfig("steps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_seg: f64,
    pub l_inn: f64,
    pub l_o: f64,
    pub l_con: f64,
    pub accept_rate: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub records: Vec<StepRecord>,
}

impl AdaptTrace {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<(), PipelineError> {
        writeln!(w, "step,l_seg,l_inn,l_o,l_con,accept_rate,val_miou")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step,
                r.l_seg,
                r.l_inn,
                r.l_o,
                r.l_con,
                r.accept_rate,
                r.val_miou.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)
    }
}

/// theta_teacher <- rate * theta_teacher + (1 - rate) * theta_student.
pub fn ema_update(
    teacher: &mut SegModel,
    student: &SegModel,
    rate: f64,
) -> Result<(), PipelineError> {
    assert!((0.0..=1.0).contains(&rate), "EMA rate outside [0, 1]");
    let s_params = student.params();
    for ((name, sp), tp) in s_params.iter().zip(teacher.params_mut()) {
        if sp.shape != tp.shape {
            return Err(PipelineError::ArchMismatch(format!(
                "{}: {:?} vs {:?}",
                name, tp.shape, sp.shape
            )));
        }
        for (t, &s) in tp.data.iter_mut().zip(&sp.data) {
            *t = rate * *t + (1.0 - rate) * s;
        }
    }
    Ok(())
}

/// Mean IoU of a model's predictions over labeled clouds.
pub fn clean_miou(model: &SegModel, clouds: &[PointCloud]) -> Result<f64, PipelineError> {
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for pc in clouds {
        cm.add_predictions(&pc.labels_usize(), &segnet::predict(model, pc)?);
    }
    Ok(compute_miou(&cm)?.0)
}

/// Teacher pseudo-labels above the confidence threshold: (indices, labels).
pub fn pseudo_labels(
    teacher: &SegModel,
    pc: &PointCloud,
    threshold: f64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let probs = segnet::predict_probs(teacher, pc)?;
    let (n, c) = probs.dims2();
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for r in 0..n {
        let row = &probs.data[r * c..(r + 1) * c];
        let (best, &conf) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        if conf >= threshold {
            idx.push(r);
            labels.push(best);
        }
    }
    Ok((idx, labels))
}

struct NanGuard {
    step: usize,
}

impl NanGuard {
    fn check(&self, component: &'static str, v: f64) -> Result<f64, PipelineError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PipelineError::NonFiniteLoss {
                component,
                step: self.step,
            })
        }
    }
}

/// Adapted student plus the auxiliary modules trained along the way.
pub struct AdaptOutcome {
    pub student: SegModel,
    pub teacher: SegModel,
    pub flow: Option<CouplingFlow>,
    pub attention: Option<AttentionHead>,
    pub bank: Option<MemoryBank>,
    pub trace: AdaptTrace,
}

/// Run the adaptation loop. Source scenes keep their labels; target labels are
/// never read during training (only for the periodic validation entries).
pub fn adapt(
    student_init: &SegModel,
    source: &[PointCloud],
    target: &[PointCloud],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome, PipelineError> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(PipelineError::NoScenes);
    }
    let mut student = student_init.clone();
    let mut teacher = student_init.clone();
    let dim = student.dim;
    let c = student.num_classes;
    let mut flow = cfg
        .enable_iaam
        .then(|| CouplingFlow::new(dim, cfg.flow_blocks, 2.0, cfg.seed ^ 0x1aa));
    let mut attention = cfg
        .enable_iaam
        .then(|| AttentionHead::new(dim, c, cfg.attention_heads, cfg.seed ^ 0xa77));
    let mut bank = cfg.enable_qcmb.then(|| {
        MemoryBank::new(
            dim,
            c,
            cfg.bank_slots,
            cfg.bank_width,
            cfg.beta_m,
            cfg.seed ^ 0xba2c,
        )
    });
    let mut trace = AdaptTrace::default();

    for step in 0..cfg.steps {
        let guard = NanGuard { step };
        let src = &source[step % source.len()];
        let tgt = &target[step % target.len()];
        let y_src = src.labels_usize();

        // (1) teacher pseudo-labels on the target scene
        let (accept_idx, accept_labels) =
            pseudo_labels(&teacher, tgt, cfg.confidence_threshold)?;
        let accept_rate = accept_idx.len() as f64 / tgt.len() as f64;

        // student tape: both forwards share the student parameters
        let tape = Tape::new();
        let sv = student.vars(&tape, true);
        let src_coords = tape.constant(Arr {
            shape: vec![src.len(), 3],
            data: src.coords_flat(),
        });
        let tgt_coords = tape.constant(Arr {
            shape: vec![tgt.len(), 3],
            data: tgt.coords_flat(),
        });
        let src_nbrs = knn_indices(&src.points, student.k);
        let tgt_nbrs = knn_indices(&tgt.points, student.k);
        let (f_s, logits_s) = forward_from_coords(&sv, src_coords, &src_nbrs, student.coord_scale)?;
        let (f_t, logits_t) = forward_from_coords(&sv, tgt_coords, &tgt_nbrs, student.coord_scale)?;

        // (2) supervised + pseudo-supervised segmentation loss
        let mut l_seg = logits_s.cross_entropy(&y_src)?;
        if !accept_idx.is_empty() {
            let pseudo_ce = logits_t
                .gather_rows(&accept_idx)?
                .cross_entropy(&accept_labels)?;
            l_seg = l_seg.add(pseudo_ce)?;
        }
        let l_seg_v = guard.check("l_seg", l_seg.scalar_value())?;

        // (3) INN step on detached features, then overlap loss through the
        // frozen flow/attention back into the student features
        let mut l_inn_v = 0.0;
        let mut l_o: Option<Var<'_>> = None;
        let mut l_o_v = 0.0;
        if let (Some(flow_m), Some(att_m)) = (flow.as_mut(), attention.as_mut()) {
            let student_probs_t = logits_t.row_softmax()?.value();
            let batch = InnBatch {
                f_s: f_s.value(),
                y_s: y_src.clone(),
                f_t: f_t.value(),
                student_probs: student_probs_t,
            };
            let inn_cfg = InnTrainConfig {
                learning_rate: cfg.lr_inn,
                steps: 1,
                sinkhorn: cfg.sinkhorn.clone(),
            };
            let inn_trace = iaam::train_inn(flow_m, att_m, &[batch], &inn_cfg)?;
            l_inn_v = guard.check("l_inn", inn_trace[0])?;

            let fv = flow_m.vars(&tape, false);
            let av = att_m.vars(&tape, false);
            let f_t2s = flow_inverse(&fv, f_t)?;
            let joint = f_s.concat_rows(f_t2s)?;
            let att_probs = attention_predict(&av, joint)?;
            // labels: source ground truth, then attention pseudo-labels
            let att_vals = att_probs.value();
            let att_argmax = argmax_rows(&att_vals);
            let mut joint_labels = y_src.clone();
            joint_labels.extend_from_slice(&att_argmax[y_src.len()..]);
            let ol = iaam::overlap_loss(att_probs, &joint_labels, &cfg.overlap)?;
            l_o_v = guard.check("l_o", ol.total.scalar_value())?;
            l_o = Some(ol.total);
        }

        // (4) quality-guided bank update and contrastive loss on the mapped
        // target features (projection head trains on this same tape)
        let mut l_con: Option<Var<'_>> = None;
        let mut l_con_v = 0.0;
        let mut proj_vars = None;
        if let Some(bank_m) = bank.as_mut() {
            let f_t_for_bank = match (flow.as_ref(), cfg.enable_iaam) {
                (Some(flow_m), true) => {
                    let fv = flow_m.vars(&tape, false);
                    flow_inverse(&fv, f_t)?
                }
                _ => f_t,
            };
            let fa = f_s.value();
            let fb = f_t_for_bank.value();
            let joint_feats = Arr {
                shape: vec![fa.dims2().0 + fb.dims2().0, dim],
                data: fa.data.iter().chain(&fb.data).cloned().collect(),
            };
            let t2s_labels = argmax_rows(&segnet::classify(&student, &f_t_for_bank.value())?);
            let mut joint_labels = y_src.clone();
            joint_labels.extend_from_slice(&t2s_labels);
            let scored = qcmb::quality_score(&joint_feats, &joint_labels, &cfg.quality)?;
            let chosen = select_high_quality(&joint_labels, &scored.scores, cfg.quality.rho);
            for (&class, members) in &chosen {
                if members.is_empty() {
                    continue;
                }
                let rows: Vec<Vec<f64>> = members
                    .iter()
                    .map(|&i| joint_feats.data[i * dim..(i + 1) * dim].to_vec())
                    .collect();
                update_bank(bank_m, class, &Arr::from_rows(&rows))?;
            }
            let pv = bank_m.proj_vars(&tape, true);
            let queries = project_on_tape(&pv, f_t_for_bank)?;
            match contrastive_loss(&tape, queries, bank_m, &t2s_labels, &cfg.contrast) {
                Ok(l) => {
                    l_con_v = guard.check("l_con", l.scalar_value())?;
                    l_con = Some(l);
                    proj_vars = Some(pv);
                }
                Err(QcmbError::AllQueriesSkipped) => {} // cold bank: skip this step
                Err(e) => return Err(e.into()),
            }
        }

        // (5) one student step on the combined objective
        let mut total = l_seg;
        if let Some(lo) = l_o {
            total = total.add(lo)?;
        }
        if let Some(lc) = l_con {
            total = total.add(lc.scale(cfg.contrast.lambda_c)?)?;
        }
        tape.backward(total)?;
        sv.sgd_step(&mut student, cfg.lr_student);
        if let (Some(pv), Some(bank_m)) = (proj_vars, bank.as_mut()) {
            pv.sgd_step(bank_m, cfg.lr_projection);
        }

        // (6) teacher follows the student
        ema_update(&mut teacher, &student, cfg.ema_rate)?;

        let val_miou = if cfg.validate_every > 0 && (step + 1) % cfg.validate_every == 0 {
            Some(clean_miou(&student, target)?)
        } else {
            None
        };
        trace.records.push(StepRecord {
            step,
            l_seg: l_seg_v,
            l_inn: l_inn_v,
            l_o: l_o_v,
            l_con: l_con_v,
            accept_rate,
            val_miou,
        });
    }

    Ok(AdaptOutcome {
        student,
        teacher,
        flow,
        attention,
        bank,
        trace,
    })
}
