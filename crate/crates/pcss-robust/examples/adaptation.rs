//! Full teacher-student domain adaptation with the invertible alignment
//! module and the contrastive memory bank, compared against the plain
//! pseudo-labeling baseline, on clean and attacked target scenes.
//!
//!     cargo run --release --example adaptation

use pcss_robust::adversary::{evaluate_robustness, AttackConfig};
use pcss_robust::pipeline::{adapt, clean_miou, AdaptConfig};
use pcss_robust::scene::{apply_domain_shift, generate_scene, SceneConfig, ShiftConfig};
use pcss_robust::segnet::{fit_coord_scale, train_source, SegModel, TrainConfig};

fn main() {
    let extent = 2.0;
    let make = |seed: u64| {
        generate_scene(&SceneConfig {
            num_classes: 4,
            points_per_scene: 100,
            extent,
            seed,
            ..SceneConfig::default()
        })
        .unwrap()
    };
    let source: Vec<_> = (0..3).map(make).collect();
    let shift = ShiftConfig {
        rotation_z: 0.7,
        scale: [1.25, 0.8, 1.0],
        dropout: 0.15,
        jitter_sigma: 0.025 * extent,
    };
    let target: Vec<_> = (500..503)
        .map(|s| apply_domain_shift(&make(s), &shift, s + 7).unwrap())
        .collect();

    let mut model = SegModel::new(32, 4, 6, 1);
    fit_coord_scale(&mut model, &source);
    train_source(
        &mut model,
        &source,
        &TrainConfig {
            learning_rate: 0.05,
            epochs: 120,
            seed: 1,
            neighborhood_k: 6,
        },
    )
    .unwrap();

    let attack = AttackConfig::pgd(0.10, 0.10, 10);
    let report = |name: &str, m: &SegModel| {
        let clean = clean_miou(m, &target).unwrap();
        let adv = evaluate_robustness(m, &target, &attack).unwrap().miou_adv;
        println!("| {:22} | {:10.2} | {:8.2} |", name, 100.0 * clean, 100.0 * adv);
    };

    println!("| model                  | mIoU clean | mIoU adv |");
    println!("|------------------------|------------|----------|");
    report("source only", &model);

    for (name, iaam, qcmb) in [
        ("baseline pseudo-label", false, false),
        ("+ invertible alignment", true, false),
        ("+ memory bank (full)", true, true),
    ] {
        let cfg = AdaptConfig {
            steps: 150,
            seed: 1,
            confidence_threshold: 0.6,
            enable_iaam: iaam,
            enable_qcmb: qcmb,
            ..AdaptConfig::default()
        };
        let out = adapt(&model, &source, &target, &cfg).unwrap();
        report(name, &out.student);
    }
}
