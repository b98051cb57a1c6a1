//! Generate a synthetic labeled scene, then show the two target-domain
//! transforms: a geometric domain shift (rotation, anisotropic scale,
//! dropout, jitter) and a weather-style corruption.
//!
//!     cargo run --example scene_generation

use pcss_robust::scene::{
    apply_corruption, apply_domain_shift, chamfer_distance, generate_scene, CorruptionKind,
    SceneConfig, ShiftConfig,
};

fn class_histogram(labels: &[u16], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l as usize] += 1;
    }
    h
}

fn main() {
    let cfg = SceneConfig {
        num_classes: 4,
        points_per_scene: 400,
        extent: 4.0,
        seed: 7,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg).expect("scene generation");
    println!("source scene: {} points, {} classes", scene.len(), cfg.num_classes);
    println!("  class histogram: {:?}", class_histogram(&scene.labels, cfg.num_classes));
    let (lo, hi) = scene.points.iter().fold(
        ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]),
        |(mut lo, mut hi), p| {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
            (lo, hi)
        },
    );
    println!("  bounds: x [{:.2}, {:.2}]  y [{:.2}, {:.2}]  z [{:.2}, {:.2}]",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]);

    let shift = ShiftConfig {
        rotation_z: 0.4,
        scale: [1.1, 0.9, 1.0],
        dropout: 0.1,
        jitter_sigma: 0.03,
    };
    let shifted = apply_domain_shift(&scene, &shift, 99).expect("domain shift");
    println!("\nafter domain shift (rot 0.4 rad, scale [1.1, 0.9, 1.0], 10% dropout, jitter 0.03):");
    println!("  {} points survive dropout", shifted.len());
    println!("  chamfer distance to the original: {:.4}", chamfer_distance(&scene, &shifted));

    for kind in [CorruptionKind::Fog, CorruptionKind::Snow, CorruptionKind::Rain] {
        let corrupted = apply_corruption(&shifted, kind, 0.5, 123).expect("corruption");
        println!(
            "  {:?} at severity 0.5: {} points, chamfer to shifted {:.4}",
            kind,
            corrupted.len(),
            chamfer_distance(&shifted, &corrupted)
        );
    }
}
