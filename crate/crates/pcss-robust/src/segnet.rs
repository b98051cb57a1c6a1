//! Per-point segmentation network: an MLP over augmented point descriptors
//! (raw xyz plus local k-neighborhood statistics) standing in for a sparse
//! convolutional backbone, split into a feature extractor and a linear
//! classifier, plus supervised source training with plain SGD.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{Checkpoint, CkptError};
use crate::scene::PointCloud;
use crate::tensor::{Arr, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("feature width {got} does not match classifier input {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("non-finite loss at epoch {epoch}, scene {scene}")]
    NonFiniteLoss { epoch: usize, scene: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Descriptor width: xyz (3) + centroid offset (3) + covariance trace (1).
pub const DESC_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// in x out
    pub w: Arr,
    pub b: Arr,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        let scale = (1.0 / inp as f64).sqrt();
        let data = (0..inp * out)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Dense {
            w: Arr {
                shape: vec![inp, out],
                data,
            },
            b: Arr::zeros(&[out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Dense {
            w: Arr::zeros(&[inp, out]),
            b: Arr::zeros(&[out]),
        }
    }
}

/// Feature extractor (3 dense layers over descriptors) plus linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub dim: usize,
    pub num_classes: usize,
    /// Neighborhood size for descriptors.
    pub k: usize,
    /// Coordinates are divided by this before descriptor extraction so the
    /// network sees inputs of unit scale regardless of scene size. Fitted
    /// from the training data by [`fit_coord_scale`]; 1.0 means no scaling.
    pub coord_scale: f64,
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

pub const HIDDEN: [usize; 2] = [64, 64];

impl SegModel {
    pub fn new(dim: usize, num_classes: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Dense::init(&mut rng, DESC_DIM, HIDDEN[0]),
            Dense::init(&mut rng, HIDDEN[0], HIDDEN[1]),
            Dense::init(&mut rng, HIDDEN[1], dim),
        ];
        let classifier = Dense::init(&mut rng, dim, num_classes);
        SegModel {
            dim,
            num_classes,
            k,
            coord_scale: 1.0,
            layers,
            classifier,
        }
    }

    /// All-zero parameters (features collapse to zero; softmax is uniform).
    pub fn zeroed(dim: usize, num_classes: usize, k: usize) -> Self {
        SegModel {
            dim,
            num_classes,
            k,
            coord_scale: 1.0,
            layers: vec![
                Dense::zeros(DESC_DIM, HIDDEN[0]),
                Dense::zeros(HIDDEN[0], HIDDEN[1]),
                Dense::zeros(HIDDEN[1], dim),
            ],
            classifier: Dense::zeros(dim, num_classes),
        }
    }

    pub fn params(&self) -> Vec<(String, &Arr)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("seg.layer{}.w", i), &l.w));
            out.push((format!("seg.layer{}.b", i), &l.b));
        }
        out.push(("seg.classifier.w".into(), &self.classifier.w));
        out.push(("seg.classifier.b".into(), &self.classifier.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    /// Load parameters onto a tape, in `params()` order.
    pub fn vars<'t>(&self, tape: &'t Tape, requires_grad: bool) -> SegVars<'t> {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, p)| tape.leaf(p.clone(), requires_grad))
            .collect();
        SegVars { vars }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.dim as u32, self.num_classes as u32);
        ck.insert("seg.k", Arr::scalar(self.k as f64));
        ck.insert("seg.coord_scale", Arr::scalar(self.coord_scale));
        for (name, p) in self.params() {
            ck.insert(&name, p.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SegError> {
        let dim = ck.dim as usize;
        let num_classes = ck.num_classes as usize;
        let k = ck.get("seg.k")?.data[0] as usize;
        let mut model = SegModel::zeroed(dim, num_classes, k);
        model.coord_scale = ck.get("seg.coord_scale")?.data[0];
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            *slot = ck.get(name)?.clone();
        }
        Ok(model)
    }
}

/// Tape handles for every model parameter, aligned with `SegModel::params()`.
pub struct SegVars<'t> {
    pub vars: Vec<Var<'t>>,
}

impl<'t> SegVars<'t> {
    fn layer(&self, i: usize) -> (Var<'t>, Var<'t>) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn classifier(&self) -> (Var<'t>, Var<'t>) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }

    /// SGD step: subtract `lr * grad` from every parameter of `model`.
    pub fn sgd_step(&self, model: &mut SegModel, lr: f64) {
        for (var, param) in self.vars.iter().zip(model.params_mut()) {
            let g = var.grad();
            for (p, gv) in param.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }
}

/// Exact k-nearest-neighbor index lists (self excluded), ties broken by index.
pub fn knn_indices(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1)).max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                let dz = points[i][2] - points[j][2];
                (dx * dx + dy * dy + dz * dz, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(dists.iter().take(k).map(|&(_, j)| j).collect());
    }
    out
}

/// Per-point descriptors on tape: [xyz | neighbor centroid - xyz | spread].
pub fn descriptors<'t>(
    coords: Var<'t>,
    nbrs: &[Vec<usize>],
) -> Result<Var<'t>, TensorError> {
    let centroid = coords.neighbor_mean(nbrs)?;
    let offset = centroid.sub(coords)?;
    let spread = coords.neighbor_spread(nbrs)?;
    coords.concat_cols(offset)?.concat_cols(spread)
}

/// Largest absolute coordinate over the given scenes, stored on the model as
/// its input normalizer. Leaves the scale at 1.0 for all-zero data.
pub fn fit_coord_scale(model: &mut SegModel, scenes: &[PointCloud]) {
    let mut m: f64 = 0.0;
    for pc in scenes {
        for p in &pc.points {
            for &c in p {
                m = m.max(c.abs());
            }
        }
    }
    model.coord_scale = if m > 0.0 { m } else { 1.0 };
}

/// Full forward pass from coordinates: normalize -> descriptors -> features
/// -> logits. `coord_scale` divides the raw coordinates (on tape, so attack
/// gradients flow through it).
pub fn forward_from_coords<'t>(
    vars: &SegVars<'t>,
    coords: Var<'t>,
    nbrs: &[Vec<usize>],
    coord_scale: f64,
) -> Result<(Var<'t>, Var<'t>), SegError> {
    assert!(
        coord_scale.is_finite() && coord_scale > 0.0,
        "coord_scale must be positive"
    );
    let n = coords.value().dims2().0;
    if n == 0 {
        return Err(SegError::EmptyCloud);
    }
    let scaled = coords.scale(1.0 / coord_scale)?;
    let desc = descriptors(scaled, nbrs)?;
    let feats = extract_from_descriptors(vars, desc)?;
    let logits = classify_on_tape(vars, feats)?;
    Ok((feats, logits))
}

fn extract_from_descriptors<'t>(vars: &SegVars<'t>, desc: Var<'t>) -> Result<Var<'t>, SegError> {
    let n_layers = (vars.vars.len() - 2) / 2;
    let mut x = desc;
    for i in 0..n_layers {
        let (w, b) = vars.layer(i);
        x = x.matmul(w)?.add_row_broadcast(b)?;
        if i + 1 < n_layers {
            x = x.tanh()?; // final feature layer stays linear
        }
    }
    Ok(x)
}

/// Linear classifier on already-extracted features.
pub fn classify_on_tape<'t>(vars: &SegVars<'t>, feats: Var<'t>) -> Result<Var<'t>, SegError> {
    let (w, b) = vars.classifier();
    let want = w.value().dims2().0;
    let got = feats.value().dims2().1;
    if got != want {
        return Err(SegError::WidthMismatch { got, want });
    }
    Ok(feats.matmul(w)?.add_row_broadcast(b)?)
}

/// Non-differentiating convenience: per-point features for a cloud.
pub fn extract_features(model: &SegModel, pc: &PointCloud) -> Result<Arr, SegError> {
    if pc.is_empty() {
        return Err(SegError::EmptyCloud);
    }
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let coords = tape.constant(Arr {
        shape: vec![pc.len(), 3],
        data: pc.coords_flat(),
    });
    let nbrs = knn_indices(&pc.points, model.k);
    let (feats, _) = forward_from_coords(&vars, coords, &nbrs, model.coord_scale)?;
    Ok(feats.value())
}

/// Logits for pre-extracted features.
pub fn classify(model: &SegModel, feats: &Arr) -> Result<Arr, SegError> {
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let f = tape.constant(feats.clone());
    Ok(classify_on_tape(&vars, f)?.value())
}

/// Softmax class distributions for a whole cloud.
pub fn predict_probs(model: &SegModel, pc: &PointCloud) -> Result<Arr, SegError> {
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let coords = tape.constant(Arr {
        shape: vec![pc.len(), 3],
        data: pc.coords_flat(),
    });
    let nbrs = knn_indices(&pc.points, model.k);
    let (_, logits) = forward_from_coords(&vars, coords, &nbrs, model.coord_scale)?;
    Ok(logits.row_softmax()?.value())
}

/// Argmax class predictions for a whole cloud.
pub fn predict(model: &SegModel, pc: &PointCloud) -> Result<Vec<usize>, SegError> {
    let probs = predict_probs(model, pc)?;
    Ok(argmax_rows(&probs))
}

pub fn argmax_rows(m: &Arr) -> Vec<usize> {
    let (rows, cols) = m.dims2();
    (0..rows)
        .map(|r| {
            let row = &m.data[r * cols..(r + 1) * cols];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Neighborhood size for descriptors (also stored on the model).
    pub neighborhood_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            seed: 0,
            neighborhood_k: 8,
        }
    }
}

/// Supervised source training with plain SGD; returns the per-epoch mean loss.
pub fn train_source(
    model: &mut SegModel,
    scenes: &[PointCloud],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, SegError> {
    assert!(cfg.learning_rate >= 0.0, "negative learning rate");
    assert!(cfg.epochs >= 1, "need at least one epoch");
    let nbrs: Vec<Vec<Vec<usize>>> = scenes
        .iter()
        .map(|pc| knn_indices(&pc.points, model.k))
        .collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (si, pc) in scenes.iter().enumerate() {
            let tape = Tape::new();
            let vars = model.vars(&tape, true);
            let coords = tape.constant(Arr {
                shape: vec![pc.len(), 3],
                data: pc.coords_flat(),
            });
            let (_, logits) = forward_from_coords(&vars, coords, &nbrs[si], model.coord_scale)?;
            let loss = logits.cross_entropy(&pc.labels_usize())?;
            let lv = loss.scalar_value();
            if !lv.is_finite() {
                return Err(SegError::NonFiniteLoss { epoch, scene: si });
            }
            epoch_loss += lv;
            tape.backward(loss)?;
            vars.sgd_step(model, cfg.learning_rate);
        }
        trace.push(epoch_loss / scenes.len() as f64);
    }
    Ok(trace)
}
