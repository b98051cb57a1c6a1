//! Report rendering: a markdown robustness table plus dependency-free SVG
//! artifacts (per-class IoU bars and a 2-D PCA feature scatter). Everything
//! is built from deterministic string formatting so regeneration is
//! byte-identical for the same inputs.

use std::fmt::Write as _;

use crate::adversary::RobustnessReport;
use crate::tensor::Arr;

const PALETTE: [&str; 8] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#222222",
];

/// Markdown summary with one row per evaluated condition.
pub fn render_markdown(title: &str, reports: &[RobustnessReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", title);
    let _ = writeln!(
        out,
        "| attack | alpha | epsilon | iters | mIoU clean | mIoU adv | drop % |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {} | {:.2} | {:.2} | {:.2} |",
            r.attack,
            r.alpha,
            r.epsilon,
            r.iterations,
            100.0 * r.miou_clean,
            100.0 * r.miou_adv,
            100.0 * r.robustness_drop,
        );
    }
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "## {} alpha={:.2}: per-class IoU\n", r.attack, r.alpha);
        let _ = writeln!(out, "| class | clean | adversarial |");
        let _ = writeln!(out, "|---|---|---|");
        for pc in &r.per_class {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{:.3}", x),
                None => "-".into(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} |",
                pc.class,
                fmt(pc.iou_clean),
                fmt(pc.iou_adv)
            );
        }
        out.push('\n');
    }
    out
}

/// Recompute the stored robustness drop from the mIoU cells.
pub fn drop_consistent(r: &RobustnessReport) -> bool {
    if r.miou_clean == 0.0 {
        return false;
    }
    let recomputed = (r.miou_clean - r.miou_adv) / r.miou_clean;
    (recomputed - r.robustness_drop).abs() < 1e-12
}

/// Horizontal clean-vs-adversarial IoU bars, one pair per class.
pub fn render_iou_bars_svg(r: &RobustnessReport) -> String {
    let bar_h = 14;
    let pair_h = 2 * bar_h + 10;
    let label_w = 70;
    let plot_w = 300;
    let height = r.per_class.len() * pair_h + 30;
    let width = label_w + plot_w + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="11">"#,
        width, height
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="14">{} alpha={:.2} per-class IoU (dark=clean light=adv)</text>"#,
        r.attack, r.alpha
    );
    for (i, pc) in r.per_class.iter().enumerate() {
        let y = 24 + i * pair_h;
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}">class {}</text>"#,
            y + bar_h,
            pc.class
        );
        for (j, (iou, opacity)) in [(pc.iou_clean, "1.0"), (pc.iou_adv, "0.45")]
            .iter()
            .enumerate()
        {
            let w = (iou.unwrap_or(0.0).clamp(0.0, 1.0) * plot_w as f64).round() as i64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="{}"/>"#,
                label_w,
                y + j * bar_h,
                w,
                bar_h - 2,
                PALETTE[pc.class % PALETTE.len()],
                opacity
            );
        }
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Top-2 principal directions of the (column-centered) feature matrix,
/// found by deterministic power iteration with deflation.
pub fn pca_basis(feats: &Arr) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = feats.dims2();
    assert!(n > 0 && d >= 2, "need a nonempty matrix at least 2 wide");
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += feats.at(r, c) / n as f64;
        }
    }
    // covariance, d x d
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        for a in 0..d {
            let xa = feats.at(r, a) - mean[a];
            for b in 0..d {
                cov[a * d + b] += xa * (feats.at(r, b) - mean[b]) / n as f64;
            }
        }
    }
    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|a| (0..d).map(|b| m[a * d + b] * v[b]).sum())
            .collect()
    };
    let normalize = |v: &mut Vec<f64>| {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    };
    let power = |deflate: Option<&[f64]>, start: usize| -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[start % d] = 1.0;
        for _ in 0..200 {
            let mut next = matvec(&cov, &v);
            if let Some(u) = deflate {
                let dot: f64 = next.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, &uv) in next.iter_mut().zip(u) {
                    *x -= dot * uv;
                }
            }
            normalize(&mut next);
            if next.iter().all(|&x| x == 0.0) {
                // degenerate spectrum: fall back to a coordinate axis
                next[(start + 1) % d] = 1.0;
            }
            v = next;
        }
        v
    };
    let u1 = power(None, 0);
    let u2 = power(Some(&u1), 1);
    (u1, u2)
}

/// Project rows onto a fixed 2-D basis (shared across conditions so clean and
/// attacked scatters are comparable).
pub fn project_2d(feats: &Arr, basis: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let (n, d) = feats.dims2();
    (0..n)
        .map(|r| {
            let mut x = 0.0;
            let mut y = 0.0;
            for c in 0..d {
                x += feats.at(r, c) * basis.0[c];
                y += feats.at(r, c) * basis.1[c];
            }
            (x, y)
        })
        .collect()
}

/// Class-colored 2-D scatter of projected features.
pub fn render_scatter_svg(title: &str, points: &[(f64, f64)], labels: &[usize]) -> String {
    assert_eq!(points.len(), labels.len(), "point/label length mismatch");
    let size = 360.0;
    let margin = 24.0;
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    if points.is_empty() || !(lo_x.is_finite() && hi_x.is_finite()) {
        lo_x = 0.0;
        hi_x = 1.0;
        lo_y = 0.0;
        hi_y = 1.0;
    }
    let span_x = (hi_x - lo_x).max(1e-12);
    let span_y = (hi_y - lo_y).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" font-family="monospace" font-size="11">"#,
        w = size as i64 + 2 * margin as i64
    );
    let _ = writeln!(s, r#"<text x="4" y="14">{}</text>"#, title);
    for (&(x, y), &l) in points.iter().zip(labels) {
        let px = margin + (x - lo_x) / span_x * size;
        let py = margin + (1.0 - (y - lo_y) / span_y) * size;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{}"/>"#,
            px,
            py,
            PALETTE[l % PALETTE.len()]
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}
