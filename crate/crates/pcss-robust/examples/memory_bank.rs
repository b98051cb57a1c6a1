//! Quality-guided contrastive memory bank walkthrough: score features by
//! local density and label cleanliness, keep the top fraction per class,
//! momentum-update class prototypes, and evaluate the InfoNCE loss.
//!
//!     cargo run --example memory_bank

use pcss_robust::qcmb::{
    class_k, contrastive_loss, quality_score, select_high_quality, update_bank, ContrastConfig,
    MemoryBank, QualityConfig,
};
use pcss_robust::{Arr, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;

/// Three class clusters, with the last few points of class 0 thrown into
/// class 1's cluster to simulate noisy pseudo-labels.
fn clustered_features(rng: &mut ChaCha8Rng, per_class: usize) -> (Arr, Vec<usize>) {
    let centers = [[2.0, 0.0], [-2.0, 1.0], [0.0, -2.5]];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let mislabeled = c == 0 && i + 2 >= per_class;
            let anchor = if mislabeled { centers[1] } else { *center };
            for d in 0..DIM {
                let base = anchor[d % 2];
                data.push(base + rng.gen_range(-0.4..0.4));
            }
            labels.push(c);
        }
    }
    (
        Arr {
            shape: vec![labels.len(), DIM],
            data,
        },
        labels,
    )
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (feats, labels) = clustered_features(&mut rng, 10);
    let qcfg = QualityConfig::default();

    println!("class-aware neighbor counts (k_base = {}):", qcfg.k_base);
    for c in 0..3 {
        let n_c = labels.iter().filter(|&&l| l == c).count();
        println!("  class {}: {} of {} points -> k = {}", c, n_c, labels.len(),
            class_k(qcfg.k_base, n_c, labels.len()));
    }

    let scores = quality_score(&feats, &labels, &qcfg).unwrap();
    let selected = select_high_quality(&labels, &scores.scores, qcfg.rho);
    println!("\ntop-{}% selection per class:", (qcfg.rho * 100.0) as u32);
    for (class, idx) in &selected {
        let picked: Vec<f64> = idx.iter().map(|&i| scores.scores[i]).collect();
        println!("  class {}: kept {:?} (scores {:?})", class, idx,
            picked.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>());
    }

    let mut bank = MemoryBank::new(DIM, 3, 4, 16, 0.98, 0);
    for round in 0..3 {
        for (&class, idx) in &selected {
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| feats.data[i * DIM..(i + 1) * DIM].to_vec())
                .collect();
            update_bank(&mut bank, class, &Arr::from_rows(&rows)).unwrap();
        }
        let filled: usize = (0..3).map(|c| bank.filled_slots(c).len()).sum();
        println!("after update round {}: {} of {} slots filled", round + 1, filled, 3 * bank.slots);
    }

    let tape = Tape::new();
    let pv = bank.proj_vars(&tape, false);
    let v = tape.constant(feats.clone());
    let queries = pcss_robust::qcmb::project_on_tape(&pv, v).unwrap();
    let loss = contrastive_loss(&tape, queries, &bank, &labels, &ContrastConfig::default()).unwrap();
    println!("\nInfoNCE loss of the batch against the bank: {:.4}", loss.scalar_value());
}
