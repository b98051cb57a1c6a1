//! Synthetic labeled point-cloud scenes for the source and target domains.
//!
//! Each class occupies a distinct parametric primitive (ground plane, box
//! clusters, pole lines, scattered blobs) so that the clean source domain is
//! separable by construction. Domain shift (rotation, scale, dropout, jitter)
//! and weather-style corruptions (fog, snow, rain) are geometric caricatures;
//! everything is a pure function of (config, seed).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class_frequency must sum to 1 (got {0})")]
    BadFrequency(f64),
    #[error("invalid {field}: {detail}")]
    BadField { field: &'static str, detail: String },
    #[error("unknown corruption kind {0:?}")]
    UnknownCorruption(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad point-cloud file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// N labeled 3-D points plus a domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// Flat N x 3 coordinates in meters.
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<u16>,
    pub domain: Domain,
    pub scene_id: u32,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Rotation about the z axis, radians.
    pub rotation_z: f64,
    pub scale: [f64; 3],
    /// Uniform point dropout probability in [0, 1).
    pub dropout: f64,
    /// Gaussian jitter sigma, meters.
    pub jitter_sigma: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            rotation_z: 0.0,
            scale: [1.0, 1.0, 1.0],
            dropout: 0.0,
            jitter_sigma: 0.0,
        }
    }
}

impl ShiftConfig {
    pub fn is_identity(&self) -> bool {
        self.rotation_z == 0.0
            && self.scale == [1.0, 1.0, 1.0]
            && self.dropout == 0.0
            && self.jitter_sigma == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    None,
    Fog,
    Snow,
    Rain,
}

impl std::str::FromStr for CorruptionKind {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, SceneError> {
        match s {
            "none" => Ok(CorruptionKind::None),
            "fog" => Ok(CorruptionKind::Fog),
            "snow" => Ok(CorruptionKind::Snow),
            "rain" => Ok(CorruptionKind::Rain),
            other => Err(SceneError::UnknownCorruption(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub kind: CorruptionKind,
    /// Severity in [0, 1]; 0 is the identity.
    pub severity: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            kind: CorruptionKind::None,
            severity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub points_per_scene: usize,
    /// Simplex weights over classes; must sum to 1.
    pub class_frequency: Vec<f64>,
    pub shift: ShiftConfig,
    pub corruption: CorruptionConfig,
    /// Overall scene half-extent in meters.
    pub extent: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 4,
            points_per_scene: 600,
            class_frequency: vec![0.25; 4],
            shift: ShiftConfig::default(),
            corruption: CorruptionConfig::default(),
            extent: 4.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_classes < 2 {
            return Err(SceneError::TooFewClasses(self.num_classes));
        }
        if self.class_frequency.len() != self.num_classes {
            return Err(SceneError::BadField {
                field: "class_frequency",
                detail: format!(
                    "{} weights for {} classes",
                    self.class_frequency.len(),
                    self.num_classes
                ),
            });
        }
        let sum: f64 = self.class_frequency.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SceneError::BadFrequency(sum));
        }
        if self.class_frequency.iter().any(|&w| w < 0.0) {
            return Err(SceneError::BadField {
                field: "class_frequency",
                detail: "negative weight".into(),
            });
        }
        if !(0.0..1.0).contains(&self.shift.dropout) {
            return Err(SceneError::BadField {
                field: "shift.dropout",
                detail: format!("{} not in [0,1)", self.shift.dropout),
            });
        }
        if self.shift.jitter_sigma < 0.0 {
            return Err(SceneError::BadField {
                field: "shift.jitter_sigma",
                detail: "negative sigma".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.corruption.severity) {
            return Err(SceneError::BadField {
                field: "corruption.severity",
                detail: format!("{} not in [0,1]", self.corruption.severity),
            });
        }
        if self.points_per_scene == 0 {
            return Err(SceneError::BadField {
                field: "points_per_scene",
                detail: "zero points".into(),
            });
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample one point for `class` from its parametric primitive.
///
/// Classes beyond 3 reuse the four primitives with a per-class height offset
/// and rotated cluster anchors, keeping geometry separable.
fn sample_class_point(class: usize, extent: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let family = class % 4;
    let tier = (class / 4) as f64;
    let e = extent;
    // Vertical structure scales with the footprint so the whole scene is
    // similar under a change of extent (heights below are sized for e = 4).
    let v = e / 4.0;
    match family {
        // ground plane
        0 => {
            let x = rng.gen_range(-e..e);
            let y = rng.gen_range(-e..e);
            let z = v * (0.05 * rng.gen::<f64>() + 4.0 * tier);
            [x, y, z]
        }
        // box clusters in a ring
        1 => {
            let which = rng.gen_range(0..3);
            let ang = which as f64 * std::f64::consts::TAU / 3.0 + 0.4 + tier;
            let cx = 0.6 * e * ang.cos();
            let cy = 0.6 * e * ang.sin();
            let x = cx + rng.gen_range(-0.35..0.35) * v;
            let y = cy + rng.gen_range(-0.35..0.35) * v;
            let z = v * (rng.gen_range(0.4..1.2) + 4.0 * tier);
            [x, y, z]
        }
        // vertical pole lines
        2 => {
            let which = rng.gen_range(0..4);
            let ang = which as f64 * std::f64::consts::TAU / 4.0 + 1.1 + tier;
            let cx = 0.8 * e * ang.cos();
            let cy = 0.8 * e * ang.sin();
            let x = cx + 0.03 * v * rng.sample::<f64, _>(StandardNormal);
            let y = cy + 0.03 * v * rng.sample::<f64, _>(StandardNormal);
            let z = v * (rng.gen_range(0.0..3.0) + 4.0 * tier);
            [x, y, z]
        }
        // scattered gaussian blobs
        _ => {
            let which = rng.gen_range(0..3);
            let ang = which as f64 * std::f64::consts::TAU / 3.0 + 2.3 + tier;
            let cx = 0.35 * e * ang.cos();
            let cy = 0.35 * e * ang.sin();
            let s = 0.12 * v;
            let x = cx + s * rng.sample::<f64, _>(StandardNormal);
            let y = cy + s * rng.sample::<f64, _>(StandardNormal);
            let z = v * (1.8 + 0.3 * rng.sample::<f64, _>(StandardNormal) + 4.0 * tier);
            [x, y, z]
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<PointCloud, SceneError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0);
    let n = cfg.points_per_scene;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = cfg.num_classes - 1;
        for (c, &w) in cfg.class_frequency.iter().enumerate() {
            acc += w;
            if u < acc {
                class = c;
                break;
            }
        }
        points.push(sample_class_point(class, cfg.extent, &mut rng));
        labels.push(class as u16);
    }
    Ok(PointCloud {
        points,
        labels,
        domain: Domain::Source,
        scene_id: cfg.seed as u32,
    })
}

/// Rigid rotation/scale, uniform dropout, Gaussian jitter. Labels survive.
pub fn apply_domain_shift(
    pc: &PointCloud,
    shift: &ShiftConfig,
    seed: u64,
) -> Result<PointCloud, SceneError> {
    if !(0.0..1.0).contains(&shift.dropout) {
        return Err(SceneError::BadField {
            field: "dropout",
            detail: format!("{} not in [0,1)", shift.dropout),
        });
    }
    if shift.is_identity() {
        let mut out = pc.clone();
        out.domain = Domain::Target;
        return Ok(out);
    }
    let mut rng = rng_for(seed, 1);
    let (s, c) = shift.rotation_z.sin_cos();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (p, &l) in pc.points.iter().zip(&pc.labels) {
        if shift.dropout > 0.0 && rng.gen::<f64>() < shift.dropout {
            continue;
        }
        let [x, y, z] = *p;
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        let mut q = [
            rx * shift.scale[0],
            ry * shift.scale[1],
            z * shift.scale[2],
        ];
        if shift.jitter_sigma > 0.0 {
            for v in q.iter_mut() {
                *v += shift.jitter_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        points.push(q);
        labels.push(l);
    }
    Ok(PointCloud {
        points,
        labels,
        domain: Domain::Target,
        scene_id: pc.scene_id,
    })
}

/// Weather-style corruption. Severity 0 is the identity for every kind.
pub fn apply_corruption(
    pc: &PointCloud,
    kind: CorruptionKind,
    severity: f64,
    seed: u64,
) -> Result<PointCloud, SceneError> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SceneError::BadField {
            field: "severity",
            detail: format!("{} not in [0,1]", severity),
        });
    }
    if severity == 0.0 || kind == CorruptionKind::None {
        return Ok(pc.clone());
    }
    let mut rng = rng_for(seed, 2);
    let mut out = match kind {
        CorruptionKind::None => unreachable!(),
        CorruptionKind::Fog => {
            // range-dependent dropout plus backscatter points near the sensor
            let max_r = pc
                .points
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
                .fold(0.0_f64, f64::max)
                .max(1e-9);
            let mut points = Vec::new();
            let mut labels = Vec::new();
            for (p, &l) in pc.points.iter().zip(&pc.labels) {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt() / max_r;
                let p_drop = severity * (0.25 + 0.75 * r);
                if rng.gen::<f64>() >= p_drop {
                    points.push(*p);
                    labels.push(l);
                }
            }
            if points.is_empty() {
                points.push(pc.points[0]);
                labels.push(pc.labels[0]);
            }
            // backscatter: spurious near-range returns, labeled by nearest survivor
            let n_back = (severity * 0.1 * pc.len() as f64) as usize;
            for _ in 0..n_back {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.0..0.3) * max_r;
                let q = [
                    r * ang.cos(),
                    r * ang.sin(),
                    rng.gen_range(0.0..1.5),
                ];
                let nearest = points
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        sqdist(a, &q).partial_cmp(&sqdist(b, &q)).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                let lbl = labels[nearest];
                points.push(q);
                labels.push(lbl);
            }
            PointCloud {
                points,
                labels,
                domain: pc.domain,
                scene_id: pc.scene_id,
            }
        }
        CorruptionKind::Snow => {
            // additive cluster points plus jitter; point count strictly grows
            let mut points = pc.points.clone();
            let mut labels = pc.labels.clone();
            let sigma = 0.02 + 0.05 * severity;
            for p in points.iter_mut() {
                for v in p.iter_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let n_add = 1 + (severity * 0.2 * pc.len() as f64) as usize;
            let extent = pc
                .points
                .iter()
                .map(|p| p[0].abs().max(p[1].abs()))
                .fold(0.0_f64, f64::max)
                .max(1.0);
            for _ in 0..n_add {
                let src = rng.gen_range(0..pc.len());
                let base = pc.points[src];
                points.push([
                    base[0] + 0.1 * extent * rng.sample::<f64, _>(StandardNormal),
                    base[1] + 0.1 * extent * rng.sample::<f64, _>(StandardNormal),
                    (base[2] + rng.gen_range(0.0..2.0)).max(0.0),
                ]);
                labels.push(pc.labels[src]);
            }
            PointCloud {
                points,
                labels,
                domain: pc.domain,
                scene_id: pc.scene_id,
            }
        }
        CorruptionKind::Rain => {
            // attenuation dropout plus vertical streak jitter
            let mut points = Vec::new();
            let mut labels = Vec::new();
            for (p, &l) in pc.points.iter().zip(&pc.labels) {
                if rng.gen::<f64>() < 0.35 * severity {
                    continue;
                }
                let mut q = *p;
                q[2] += 0.08 * severity * rng.sample::<f64, _>(StandardNormal).abs();
                q[0] += 0.03 * severity * rng.sample::<f64, _>(StandardNormal);
                q[1] += 0.03 * severity * rng.sample::<f64, _>(StandardNormal);
                points.push(q);
                labels.push(l);
            }
            if points.is_empty() {
                points.push(pc.points[0]);
                labels.push(pc.labels[0]);
            }
            PointCloud {
                points,
                labels,
                domain: pc.domain,
                scene_id: pc.scene_id,
            }
        }
    };
    out.scene_id = pc.scene_id;
    Ok(out)
}

fn sqdist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Symmetric Chamfer distance between two clouds (mean nearest-neighbor
/// distance each way). Used as the perturbation-magnitude metric.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |xs: &[[f64; 3]], ys: &[[f64; 3]]| -> f64 {
        xs.iter()
            .map(|p| {
                ys.iter()
                    .map(|q| sqdist(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / xs.len() as f64
    };
    0.5 * (one_way(&a.points, &b.points) + one_way(&b.points, &a.points))
}

const MAGIC: &[u8; 4] = b"PCSS";
const VERSION: u32 = 1;

/// Binary exporter: "PCSS", u32 version, u32 N, u32 C, then
/// N x (f32 x, f32 y, f32 z, u16 label), little-endian.
pub fn write_pcss<W: Write>(w: &mut W, pc: &PointCloud, num_classes: u32) -> Result<(), SceneError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(pc.len() as u32).to_le_bytes())?;
    w.write_all(&num_classes.to_le_bytes())?;
    for (p, &l) in pc.points.iter().zip(&pc.labels) {
        for &v in p {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pcss<R: Read>(r: &mut R, domain: Domain, scene_id: u32) -> Result<(PointCloud, u32), SceneError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SceneError::BadFile(format!("bad magic {:?}", magic)));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(SceneError::BadFile(format!("unsupported version {}", version)));
    }
    r.read_exact(&mut buf4)?;
    let n = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let c = u32::from_le_bytes(buf4);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut fb = [0u8; 4];
    let mut lb = [0u8; 2];
    for _ in 0..n {
        let mut p = [0.0; 3];
        for v in p.iter_mut() {
            r.read_exact(&mut fb)?;
            *v = f32::from_le_bytes(fb) as f64;
        }
        r.read_exact(&mut lb)?;
        let l = u16::from_le_bytes(lb);
        if u32::from(l) >= c {
            return Err(SceneError::BadFile(format!("label {} >= C {}", l, c)));
        }
        points.push(p);
        labels.push(l);
    }
    Ok((
        PointCloud {
            points,
            labels,
            domain,
            scene_id,
        },
        c,
    ))
}

pub fn save_pcss(path: &Path, pc: &PointCloud, num_classes: u32) -> Result<(), SceneError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pcss(&mut f, pc, num_classes)
}

pub fn load_pcss(path: &Path, domain: Domain, scene_id: u32) -> Result<(PointCloud, u32), SceneError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_pcss(&mut f, domain, scene_id)
}

/// Debug exporter: one `x,y,z,label` line per point.
pub fn write_csv<W: Write>(w: &mut W, pc: &PointCloud) -> Result<(), SceneError> {
    for (p, l) in pc.points.iter().zip(&pc.labels) {
        writeln!(w, "{},{},{},{}", p[0], p[1], p[2], l)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_counts_within_multinomial_bound() {
        let cfg = SceneConfig {
            points_per_scene: 1000,
            seed: 7,
            ..SceneConfig::default()
        };
        let pc = generate_scene(&cfg).unwrap();
        assert_eq!(pc.len(), 1000);
        let mut counts = [0usize; 4];
        for &l in &pc.labels {
            counts[l as usize] += 1;
        }
        // 3 sigma of Binomial(1000, 0.25)
        let sigma = (1000.0 * 0.25 * 0.75_f64).sqrt();
        for &c in &counts {
            assert!((c as f64 - 250.0).abs() < 3.0 * sigma, "count {}", c);
        }
    }

    #[test]
    fn degenerate_simplex_gives_single_class() {
        let cfg = SceneConfig {
            class_frequency: vec![1.0, 0.0, 0.0, 0.0],
            ..SceneConfig::default()
        };
        let pc = generate_scene(&cfg).unwrap();
        assert!(pc.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_few_classes_rejected() {
        let cfg = SceneConfig {
            num_classes: 1,
            class_frequency: vec![1.0],
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg),
            Err(SceneError::TooFewClasses(1))
        ));
    }

    #[test]
    fn identity_shift_is_identity() {
        let pc = generate_scene(&SceneConfig::default()).unwrap();
        let out = apply_domain_shift(&pc, &ShiftConfig::default(), 3).unwrap();
        assert_eq!(out.points, pc.points);
        assert_eq!(out.labels, pc.labels);
        assert_eq!(out.domain, Domain::Target);
    }

    #[test]
    fn dropout_survivor_count_in_binomial_bound() {
        let cfg = SceneConfig {
            points_per_scene: 1000,
            ..SceneConfig::default()
        };
        let pc = generate_scene(&cfg).unwrap();
        let shift = ShiftConfig {
            dropout: 0.5,
            ..ShiftConfig::default()
        };
        let out = apply_domain_shift(&pc, &shift, 11).unwrap();
        let sigma = (1000.0 * 0.25_f64).sqrt();
        assert!((out.len() as f64 - 500.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn rotation_90_about_z() {
        let pc = PointCloud {
            points: vec![[1.0, 0.0, 0.0]],
            labels: vec![0],
            domain: Domain::Source,
            scene_id: 0,
        };
        let shift = ShiftConfig {
            rotation_z: std::f64::consts::FRAC_PI_2,
            ..ShiftConfig::default()
        };
        let out = apply_domain_shift(&pc, &shift, 0).unwrap();
        assert!((out.points[0][0]).abs() < 1e-12);
        assert!((out.points[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labels_never_mutated_by_shift() {
        let pc = generate_scene(&SceneConfig::default()).unwrap();
        let shift = ShiftConfig {
            rotation_z: 0.3,
            scale: [1.1, 0.9, 1.0],
            jitter_sigma: 0.02,
            ..ShiftConfig::default()
        };
        let out = apply_domain_shift(&pc, &shift, 5).unwrap();
        assert_eq!(out.labels, pc.labels);
    }

    #[test]
    fn corruption_severity_zero_is_identity() {
        let pc = generate_scene(&SceneConfig::default()).unwrap();
        for kind in [CorruptionKind::Fog, CorruptionKind::Snow, CorruptionKind::Rain] {
            let out = apply_corruption(&pc, kind, 0.0, 9).unwrap();
            assert_eq!(out, pc);
        }
    }

    #[test]
    fn fog_dropout_monotone_in_severity() {
        let pc = generate_scene(&SceneConfig {
            points_per_scene: 1500,
            ..SceneConfig::default()
        })
        .unwrap();
        let half = apply_corruption(&pc, CorruptionKind::Fog, 0.5, 1).unwrap();
        let full = apply_corruption(&pc, CorruptionKind::Fog, 1.0, 1).unwrap();
        // compare surviving originals (backscatter adds ~10% extra)
        assert!(full.len() < half.len());
    }

    #[test]
    fn snow_adds_points() {
        let pc = generate_scene(&SceneConfig::default()).unwrap();
        let out = apply_corruption(&pc, CorruptionKind::Snow, 0.5, 4).unwrap();
        assert!(out.len() > pc.len());
    }

    #[test]
    fn chamfer_monotone_in_severity_over_seeds() {
        let mut wins = 0;
        for seed in 0..20 {
            let pc = generate_scene(&SceneConfig {
                seed,
                points_per_scene: 300,
                ..SceneConfig::default()
            })
            .unwrap();
            let lo = apply_corruption(&pc, CorruptionKind::Rain, 0.3, seed).unwrap();
            let hi = apply_corruption(&pc, CorruptionKind::Rain, 0.9, seed).unwrap();
            if chamfer_distance(&pc, &hi) >= chamfer_distance(&pc, &lo) {
                wins += 1;
            }
        }
        assert!(wins >= 18, "monotone in {}/20 seeds", wins);
    }

    #[test]
    fn pcss_roundtrip() {
        let pc = generate_scene(&SceneConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_pcss(&mut buf, &pc, 4).unwrap();
        let (rt, c) = read_pcss(&mut buf.as_slice(), Domain::Source, pc.scene_id).unwrap();
        assert_eq!(c, 4);
        assert_eq!(rt.labels, pc.labels);
        for (a, b) in rt.points.iter().zip(&pc.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6); // f32 storage
            }
        }
    }
}
