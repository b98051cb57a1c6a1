//! White-box attack sweep: degrade a trained segmentation model with I-FGSM
//! (unbounded signed steps) and PGD (normalized steps projected into an
//! L-infinity ball) across step intensities, and print the robustness drops.
//!
//!     cargo run --release --example attack_sweep

use pcss_robust::adversary::{evaluate_robustness, AttackConfig};
use pcss_robust::scene::{apply_domain_shift, generate_scene, SceneConfig, ShiftConfig};
use pcss_robust::segnet::{fit_coord_scale, train_source, SegModel, TrainConfig};

fn main() {
    let extent = 2.0;
    let make = |seed: u64| {
        generate_scene(&SceneConfig {
            num_classes: 4,
            points_per_scene: 120,
            extent,
            seed,
            ..SceneConfig::default()
        })
        .unwrap()
    };
    let source: Vec<_> = (0..3).map(make).collect();
    let shift = ShiftConfig {
        rotation_z: 0.3,
        scale: [1.08, 0.92, 1.0],
        dropout: 0.08,
        jitter_sigma: 0.01 * extent,
    };
    let target: Vec<_> = (500..503)
        .map(|s| apply_domain_shift(&make(s), &shift, s + 7).unwrap())
        .collect();

    let mut model = SegModel::new(32, 4, 6, 1);
    fit_coord_scale(&mut model, &source);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 100,
        seed: 1,
        neighborhood_k: 6,
    };
    train_source(&mut model, &source, &cfg).unwrap();

    println!("| attack | alpha | mIoU clean | mIoU adv | drop % |");
    println!("|--------|-------|------------|----------|--------|");
    for &alpha in &[0.03, 0.05, 0.07, 0.10] {
        for cfg in [
            AttackConfig::pgd(alpha, alpha, 10),
            AttackConfig::ifgsm(alpha, 10),
        ] {
            let r = evaluate_robustness(&model, &target, &cfg).unwrap();
            println!(
                "| {:6} | {:.2}  | {:10.2} | {:8.2} | {:6.2} |",
                r.attack,
                r.alpha,
                100.0 * r.miou_clean,
                100.0 * r.miou_adv,
                100.0 * r.robustness_drop
            );
        }
    }
}
