//! Command implementations behind the `pcss-robust` binary: dataset
//! generation, source training, adaptation, attack sweeps, evaluation, and
//! report rendering. Each command reads/writes artifacts under the config's
//! output directory and stamps them with the config hash so mismatched runs
//! can't be combined silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    compute_miou, evaluate_robustness, robustness_drop, run_attack, AttackConfig, AttackError,
    ConfusionMatrix, PerClassIou, RobustnessReport,
};
use crate::ckpt::{Checkpoint, CkptError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::pipeline::{adapt, AdaptConfig, PipelineError};
use crate::report::{
    drop_consistent, pca_basis, project_2d, render_iou_bars_svg, render_markdown,
    render_scatter_svg,
};
use crate::scene::{
    apply_corruption, apply_domain_shift, generate_scene, load_pcss, save_pcss, Domain,
    PointCloud, SceneError,
};
use crate::segnet::{self, SegError, SegModel};

/// Feature width of the segmentation backbone (kept even for the flow).
pub const MODEL_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact: {0} (run the upstream command first)")]
    MissingArtifact(PathBuf),
    #[error(
        "config hash mismatch: artifact {path} was produced by {found}, current config is {want}; \
         pass --force or set eval.allow_hash_mismatch to override"
    )]
    HashMismatch {
        path: PathBuf,
        found: String,
        want: String,
    },
    #[error("empty run directory: {0}")]
    EmptyRun(PathBuf),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad artifact {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
}

impl CliError {
    /// Process exit code: 2 for config problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable artifact");
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::BadArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seed: u64,
    pub num_classes: usize,
    pub source_files: Vec<String>,
    pub target_files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config_hash: String,
    pub checkpoint: String,
    pub variants: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvManifest {
    pub config_hash: String,
    pub attack: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_hash: String,
    pub report: RobustnessReport,
}

pub struct Dirs {
    pub data: PathBuf,
    pub models: PathBuf,
    pub adv: PathBuf,
    pub reports: PathBuf,
    pub report: PathBuf,
}

pub fn dirs(cfg: &ExperimentConfig) -> Dirs {
    let root = &cfg.output_dir;
    Dirs {
        data: root.join("data"),
        models: root.join("models"),
        adv: root.join("adv"),
        reports: root.join("reports"),
        report: root.join("report"),
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn check_hash(
    artifact: &Path,
    found: &str,
    want: &str,
    allow_mismatch: bool,
) -> Result<(), CliError> {
    if found != want && !allow_mismatch {
        return Err(CliError::HashMismatch {
            path: artifact.to_path_buf(),
            found: found.to_string(),
            want: want.to_string(),
        });
    }
    Ok(())
}

/// Generate source and target scene files plus the dataset manifest.
pub fn cmd_generate(cfg: &ExperimentConfig, hash: &str) -> Result<DataManifest, CliError> {
    let d = dirs(cfg);
    ensure_dir(&d.data)?;
    let mut source_files = Vec::new();
    let mut target_files = Vec::new();
    let c = cfg.scene.num_classes as u32;
    for i in 0..cfg.scene.source_scenes {
        let sc = cfg.scene.scene_config(cfg.seed * 10_000 + i as u64);
        let pc = generate_scene(&sc)?;
        let name = format!("source_{:03}.pcss", i);
        save_pcss(&d.data.join(&name), &pc, c)?;
        source_files.push(name);
    }
    for i in 0..cfg.scene.target_scenes {
        let seed = cfg.seed * 10_000 + 50_000 + i as u64;
        let sc = cfg.scene.scene_config(seed);
        let base = generate_scene(&sc)?;
        let shifted = apply_domain_shift(&base, &cfg.scene.shift, seed + 1)?;
        let pc = apply_corruption(
            &shifted,
            cfg.scene.corruption.kind,
            cfg.scene.corruption.severity,
            seed + 2,
        )?;
        let name = format!("target_{:03}.pcss", i);
        save_pcss(&d.data.join(&name), &pc, c)?;
        target_files.push(name);
    }
    let manifest = DataManifest {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        num_classes: cfg.scene.num_classes,
        source_files,
        target_files,
    };
    write_json(&d.data.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(
    cfg: &ExperimentConfig,
    hash: &str,
    allow_mismatch: bool,
) -> Result<(Vec<PointCloud>, Vec<PointCloud>), CliError> {
    let d = dirs(cfg);
    let manifest_path = d.data.join("manifest.json");
    let manifest: DataManifest = read_json(&manifest_path)?;
    check_hash(&manifest_path, &manifest.config_hash, hash, allow_mismatch)?;
    let load_set = |files: &[String], domain: Domain| -> Result<Vec<PointCloud>, CliError> {
        files
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let path = d.data.join(name);
                if !path.exists() {
                    return Err(CliError::MissingArtifact(path));
                }
                Ok(load_pcss(&path, domain, i as u32)?.0)
            })
            .collect()
    };
    let source = load_set(&manifest.source_files, Domain::Source)?;
    let target = load_set(&manifest.target_files, Domain::Target)?;
    Ok((source, target))
}

/// Train the source model; writes checkpoint, loss CSV, and manifest.
pub fn cmd_train_source(cfg: &ExperimentConfig, hash: &str) -> Result<PathBuf, CliError> {
    let d = dirs(cfg);
    ensure_dir(&d.models)?;
    let (source, _) = load_dataset(cfg, hash, false)?;
    let mut model = SegModel::new(
        MODEL_DIM,
        cfg.scene.num_classes,
        cfg.train.neighborhood_k,
        cfg.seed,
    );
    segnet::fit_coord_scale(&mut model, &source);
    let trace = segnet::train_source(&mut model, &source, &cfg.train)?;
    let ckpt_path = d.models.join("source.segm");
    model.to_checkpoint().save(&ckpt_path)?;
    let loss_path = d.models.join("source_loss.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e, l));
    }
    std::fs::write(&loss_path, csv).map_err(io_err(&loss_path))?;
    write_json(
        &d.models.join("manifest.json"),
        &ModelManifest {
            config_hash: hash.to_string(),
            checkpoint: "source.segm".into(),
            variants: vec![],
        },
    )?;
    Ok(ckpt_path)
}

fn load_model(path: &Path) -> Result<SegModel, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(SegModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn adapt_variant(
    cfg: &ExperimentConfig,
    init: &SegModel,
    source: &[PointCloud],
    target: &[PointCloud],
    enable_iaam: bool,
    enable_qcmb: bool,
    name: &str,
    models_dir: &Path,
) -> Result<String, CliError> {
    let adapt_cfg = AdaptConfig {
        enable_iaam,
        enable_qcmb,
        ..cfg.adapt.clone()
    };
    let out = adapt(init, source, target, &adapt_cfg)?;
    let mut ck = out.student.to_checkpoint();
    if let Some(flow) = &out.flow {
        flow.append_to_checkpoint(&mut ck);
    }
    if let Some(att) = &out.attention {
        att.append_to_checkpoint(&mut ck);
    }
    if let Some(bank) = &out.bank {
        bank.append_to_checkpoint(&mut ck);
    }
    let file = format!("{}.segm", name);
    ck.save(&models_dir.join(&file))?;
    out.trace
        .save_csv(&models_dir.join(format!("{}_trace.csv", name)))?;
    Ok(file)
}

/// Adapt the source model to the target domain. With `ablation`, also train
/// the pseudo-labeling-only baseline and the alignment-only variant.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    hash: &str,
    ablation: bool,
) -> Result<Vec<String>, CliError> {
    let d = dirs(cfg);
    ensure_dir(&d.models)?;
    let (source, target) = load_dataset(cfg, hash, false)?;
    let init = load_model(&d.models.join("source.segm"))?;
    let mut variants = vec![adapt_variant(
        cfg, &init, &source, &target, cfg.adapt.enable_iaam, cfg.adapt.enable_qcmb, "adapted",
        &d.models,
    )?];
    if ablation {
        variants.push(adapt_variant(
            cfg, &init, &source, &target, false, false, "adapted_baseline", &d.models,
        )?);
        variants.push(adapt_variant(
            cfg, &init, &source, &target, true, false, "adapted_iaam", &d.models,
        )?);
    }
    write_json(
        &d.models.join("manifest.json"),
        &ModelManifest {
            config_hash: hash.to_string(),
            checkpoint: "source.segm".into(),
            variants: variants.clone(),
        },
    )?;
    Ok(variants)
}

/// Pick the model a downstream command should use: an explicit path wins,
/// otherwise the adapted model, otherwise the source model.
pub fn resolve_model(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let d = dirs(cfg);
    let adapted = d.models.join("adapted.segm");
    if adapted.exists() {
        adapted
    } else {
        d.models.join("source.segm")
    }
}

fn condition_name(cfg: &ExperimentConfig, alpha: f64) -> String {
    format!("{}_alpha_{:.2}", cfg.attack.kind, alpha)
}

fn attack_config(cfg: &ExperimentConfig, alpha: f64) -> AttackConfig {
    AttackConfig {
        kind: cfg.attack.kind,
        alpha,
        epsilon: cfg.attack.epsilon,
        iterations: cfg.attack.iterations,
    }
}

/// Write adversarial copies of every target scene for each alpha in the sweep.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    hash: &str,
    model_path: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    let (_, target) = load_dataset(cfg, hash, false)?;
    let model = load_model(&resolve_model(cfg, model_path))?;
    let d = dirs(cfg);
    let mut out_dirs = Vec::new();
    for &alpha in &cfg.attack.alphas {
        let atk = attack_config(cfg, alpha);
        atk.validate()?;
        let dir = d.adv.join(condition_name(cfg, alpha));
        ensure_dir(&dir)?;
        let mut files = Vec::new();
        for (i, pc) in target.iter().enumerate() {
            let adv = run_attack(&model, pc, &atk)?;
            let name = format!("target_{:03}.pcss", i);
            save_pcss(&dir.join(&name), &adv, cfg.scene.num_classes as u32)?;
            files.push(name);
        }
        write_json(
            &dir.join("manifest.json"),
            &AdvManifest {
                config_hash: hash.to_string(),
                attack: cfg.attack.kind.to_string(),
                alpha,
                epsilon: atk.epsilon(),
                iterations: atk.iterations,
                files,
            },
        )?;
        out_dirs.push(dir);
    }
    Ok(out_dirs)
}

fn model_miou(model: &SegModel, clouds: &[PointCloud]) -> Result<(f64, Vec<Option<f64>>), CliError> {
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for pc in clouds {
        cm.add_predictions(&pc.labels_usize(), &segnet::predict(model, pc)?);
    }
    Ok(compute_miou(&cm)?)
}

/// Score stored adversarial datasets against the clean target scenes and
/// emit one RobustnessReport JSON per condition plus a merged summary table.
/// With ablation checkpoints present, also emits the ablation table.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    hash: &str,
    model_path: Option<&Path>,
    force: bool,
) -> Result<Vec<RobustnessReport>, CliError> {
    let allow = force || cfg.eval.allow_hash_mismatch;
    let (_, target) = load_dataset(cfg, hash, allow)?;
    let model = load_model(&resolve_model(cfg, model_path))?;
    let d = dirs(cfg);
    ensure_dir(&d.reports)?;
    let (miou_clean, per_clean) = model_miou(&model, &target)?;
    let mut reports = Vec::new();
    for &alpha in &cfg.attack.alphas {
        let dir = d.adv.join(condition_name(cfg, alpha));
        let manifest_path = dir.join("manifest.json");
        let manifest: AdvManifest = read_json(&manifest_path)?;
        check_hash(&manifest_path, &manifest.config_hash, hash, allow)?;
        let mut cm = ConfusionMatrix::new(model.num_classes);
        for (i, name) in manifest.files.iter().enumerate() {
            let path = dir.join(name);
            if !path.exists() {
                return Err(CliError::MissingArtifact(path));
            }
            let (adv, _) = load_pcss(&path, Domain::Target, i as u32)?;
            cm.add_predictions(&adv.labels_usize(), &segnet::predict(&model, &adv)?);
        }
        let (miou_adv, per_adv) = compute_miou(&cm)?;
        let report = RobustnessReport {
            attack: manifest.attack.clone(),
            alpha: manifest.alpha,
            epsilon: manifest.epsilon,
            iterations: manifest.iterations,
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
        };
        write_json(
            &d.reports
                .join(format!("eval_{}.json", condition_name(cfg, alpha))),
            &EvalArtifact {
                config_hash: hash.to_string(),
                report: report.clone(),
            },
        )?;
        reports.push(report);
    }
    let summary = render_markdown(&cfg.report.title, &reports);
    let summary_path = d.reports.join("summary.md");
    std::fs::write(&summary_path, summary).map_err(io_err(&summary_path))?;
    emit_ablation_table(cfg, hash, &d, &target)?;
    Ok(reports)
}

/// Merged table over the ablation variants, clean and under
/// the strongest attack of the sweep. Silently skipped when the variants
/// were not trained.
fn emit_ablation_table(
    cfg: &ExperimentConfig,
    hash: &str,
    d: &Dirs,
    target: &[PointCloud],
) -> Result<(), CliError> {
    let variants = [
        ("baseline (pseudo-labeling)", "adapted_baseline.segm"),
        ("alignment only", "adapted_iaam.segm"),
        ("full pipeline", "adapted.segm"),
    ];
    if !variants
        .iter()
        .all(|(_, file)| d.models.join(file).exists())
    {
        return Ok(());
    }
    let strongest = cfg
        .attack
        .alphas
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let atk = attack_config(cfg, strongest);
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for (label, file) in variants {
        let model = load_model(&d.models.join(file))?;
        let rep = evaluate_robustness(&model, target, &atk)?;
        rows.push((label.to_string(), rep.miou_clean, rep.miou_adv));
    }
    let mut md = String::from("# Ablation\n\n");
    md.push_str(&format!(
        "| variant | clean mIoU | adv mIoU ({} alpha={:.2}) |\n|---|---|---|\n",
        atk.kind, strongest
    ));
    for (label, clean, adv) in &rows {
        md.push_str(&format!(
            "| {} | {:.2} | {:.2} |\n",
            label,
            100.0 * clean,
            100.0 * adv
        ));
    }
    let path = d.reports.join("ablation.md");
    std::fs::write(&path, md).map_err(io_err(&path))?;
    let _ = hash;
    Ok(())
}

/// Render the report bundle (markdown + SVGs) from stored evaluation output.
pub fn cmd_report(cfg: &ExperimentConfig, hash: &str) -> Result<PathBuf, CliError> {
    let d = dirs(cfg);
    if !d.reports.exists() {
        return Err(CliError::EmptyRun(d.reports));
    }
    let mut artifacts: BTreeMap<String, EvalArtifact> = BTreeMap::new();
    for entry in std::fs::read_dir(&d.reports).map_err(io_err(&d.reports))? {
        let entry = entry.map_err(io_err(&d.reports))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("eval_") && name.ends_with(".json") {
            artifacts.insert(name.clone(), read_json(&entry.path())?);
        }
    }
    if artifacts.is_empty() {
        return Err(CliError::EmptyRun(d.reports));
    }
    ensure_dir(&d.report)?;
    let reports: Vec<RobustnessReport> = artifacts.values().map(|a| a.report.clone()).collect();
    for (name, a) in &artifacts {
        if !drop_consistent(&a.report) {
            return Err(CliError::BadArtifact {
                path: d.reports.join(name),
                message: "stored robustness_drop disagrees with the mIoU cells".into(),
            });
        }
    }
    let md = render_markdown(&cfg.report.title, &reports);
    let md_path = d.report.join("report.md");
    std::fs::write(&md_path, md).map_err(io_err(&md_path))?;
    for r in &reports {
        let svg = render_iou_bars_svg(r);
        let path = d.report.join(format!("iou_{}_alpha_{:.2}.svg", r.attack, r.alpha));
        std::fs::write(&path, svg).map_err(io_err(&path))?;
    }
    // feature scatter: clean vs strongest-attack features of the first
    // target scene, projected on the clean PCA basis
    let (_, target) = load_dataset(cfg, hash, true)?;
    let model = load_model(&resolve_model(cfg, None))?;
    if let Some(first) = target.first() {
        let clean_feats = segnet::extract_features(&model, first)?;
        let basis = pca_basis(&clean_feats);
        let labels = first.labels_usize();
        let svg = render_scatter_svg(
            "clean features",
            &project_2d(&clean_feats, &basis),
            &labels,
        );
        let path = d.report.join("scatter_clean.svg");
        std::fs::write(&path, svg).map_err(io_err(&path))?;
        let strongest = cfg
            .attack
            .alphas
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let adv_path = d
            .adv
            .join(condition_name(cfg, strongest))
            .join("target_000.pcss");
        if adv_path.exists() {
            let (adv, _) = load_pcss(&adv_path, Domain::Target, 0)?;
            let adv_feats = segnet::extract_features(&model, &adv)?;
            let svg = render_scatter_svg(
                "attacked features",
                &project_2d(&adv_feats, &basis),
                &adv.labels_usize(),
            );
            let path = d.report.join("scatter_attacked.svg");
            std::fs::write(&path, svg).map_err(io_err(&path))?;
        }
    }
    Ok(d.report.clone())
}
