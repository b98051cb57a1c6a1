//! Robustness benchmark for point-cloud semantic segmentation under domain
//! shift: white-box attacks (I-FGSM, PGD), invertible attention alignment,
//! and a quality-guided contrastive memory bank, all driven on synthetic
//! scenes through a small CLI.

pub mod adversary;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod iaam;
pub mod ot;
pub mod pipeline;
pub mod qcmb;
pub mod report;
pub mod scene;
pub mod segnet;
pub mod tensor;

pub use tensor::{Arr, Tape, TensorError, Var};
