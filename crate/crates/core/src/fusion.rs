//! Adaptive fusion of scene and gaze-history features, the gaze and
//! confidence heads, and the training objective.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::linear;
use crate::params::{param_tree, Linear};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T = Tensor> {
    /// Concatenated features to the fused width.
    pub proj_combined: Linear<T>,
    pub proj_spatial: Linear<T>,
    pub proj_temporal: Linear<T>,
    /// Scalar gate `w_s = σ(f_combined · W + b)`, `W: [combined × 1]`.
    pub gate: Linear<T>,
}
param_tree!(FusionParams {
    leaves: [],
    nodes: [proj_combined, proj_spatial, proj_temporal, gate]
});

impl FusionParams {
    pub fn init(spatial: usize, temporal: usize, fused: usize, rng: &mut SplitMix64) -> Self {
        Self {
            proj_combined: linear(spatial + temporal, fused, rng),
            proj_spatial: linear(spatial, fused, rng),
            proj_temporal: linear(temporal, fused, rng),
            gate: linear(spatial + temporal, 1, rng),
        }
    }
}

/// Two-layer perceptron with a ReLU hidden layer and sigmoid outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = Tensor> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}
param_tree!(Mlp {
    leaves: [],
    nodes: [hidden, out]
});

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut SplitMix64) -> Self {
        Self {
            hidden: linear(input, hidden, rng),
            out: linear(hidden, output, rng),
        }
    }
}

impl Mlp<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        let y = self.out.forward(tape, h)?;
        tape.sigmoid(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub gaze: Mlp<T>,
    pub confidence: Mlp<T>,
}
param_tree!(HeadParams {
    leaves: [],
    nodes: [gaze, confidence]
});

impl HeadParams {
    pub fn init(fused: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            gaze: Mlp::init(fused, hidden, 2, rng),
            confidence: Mlp::init(fused, hidden, 1, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[1 × (spatial + temporal)]`
    pub combined: Var,
    /// `[1 × fused]`
    pub fused: Var,
    pub w_spatial: Var,
    pub w_temporal: Var,
}

/// `f_fused = w_s·P_s(f_s) + w_t·P_t(f_t) + P_c([f_s, f_t])` with the scalar
/// gate `w_s = σ(W·[f_s, f_t] + b)` and `w_t = 1 − w_s`.
pub fn fuse(tape: &mut Tape, spatial: Var, temporal: Var, p: &FusionParams<Var>) -> Result<FusionOutput> {
    let combined = tape.concat_cols(&[spatial, temporal])?;
    let gate = p.gate.forward(tape, combined)?;
    let w_spatial = tape.sigmoid(gate)?;
    let w_temporal = tape.affine(w_spatial, -1.0, 1.0)?;
    let ps = p.proj_spatial.forward(tape, spatial)?;
    let pt = p.proj_temporal.forward(tape, temporal)?;
    let ps = tape.scale_by(ps, w_spatial)?;
    let pt = tape.scale_by(pt, w_temporal)?;
    let pc = p.proj_combined.forward(tape, combined)?;
    let weighted = tape.add(ps, pt)?;
    Ok(FusionOutput {
        combined,
        fused: tape.add(weighted, pc)?,
        w_spatial,
        w_temporal,
    })
}

/// `[1 × 2]` normalized gaze in `(0, 1)²`.
pub fn predict_gaze(tape: &mut Tape, fused: Var, head: &Mlp<Var>) -> Result<Var> {
    head.forward(tape, fused)
}

/// `[1 × 1]` confidence in `(0, 1)`.
pub fn predict_confidence(tape: &mut Tape, fused: Var, head: &Mlp<Var>) -> Result<Var> {
    head.forward(tape, fused)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_gaze: f64,
    pub lambda_conf: f64,
    /// Hit radius in normalized units (Euclidean distance).
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_gaze: 1.0,
            lambda_conf: 0.1,
            tau: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gaze >= 0.0 && self.lambda_conf >= 0.0 && self.tau > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "loss weights must be >= 0 and tau > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn squared_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])
}

/// 1 when the prediction lies within `tau` (Euclidean) of the target.
pub fn hit_indicator(pred: [f64; 2], gt: [f64; 2], tau: f64) -> f64 {
    if squared_distance(pred, gt) < tau * tau {
        1.0
    } else {
        0.0
    }
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Empty("loss batch"));
    }
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Mean squared Euclidean error in normalized coordinates.
pub fn gaze_loss(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_batch(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| squared_distance(*p, *g)).sum::<f64>() / pred.len() as f64)
}

/// Mean of `(c − 1[‖ŷ − y‖ < τ])²`.
pub fn confidence_loss(conf: &[f64], pred: &[[f64; 2]], gt: &[[f64; 2]], cfg: &LossConfig) -> Result<f64> {
    check_batch(conf.len(), pred.len())?;
    check_batch(pred.len(), gt.len())?;
    let total: f64 = conf
        .iter()
        .zip(pred.iter().zip(gt))
        .map(|(c, (p, g))| {
            let d = c - hit_indicator(*p, *g, cfg.tau);
            d * d
        })
        .sum();
    Ok(total / conf.len() as f64)
}

pub fn combine_losses(gaze: f64, conf: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_gaze * gaze + cfg.lambda_conf * conf
}

pub fn total_loss(pred: &[[f64; 2]], gt: &[[f64; 2]], conf: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok(combine_losses(gaze_loss(pred, gt)?, confidence_loss(conf, pred, gt, cfg)?, cfg))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub gaze: Var,
    pub confidence: Var,
}

/// Loss on tape nodes `pred: [N × 2]`, `conf: [N × 1]`.
///
/// The hit indicator is read off the current prediction values and enters
/// as a constant, so no gradient flows from the confidence term into the
/// gaze branch.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, conf: Var, gt: &[[f64; 2]], cfg: &LossConfig) -> Result<LossTerms> {
    let n = gt.len();
    if n == 0 {
        return Err(Error::Empty("loss batch"));
    }
    if tape.shape(pred) != [n, 2] || tape.value(conf).len() != n {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: tape.shape(pred).to_vec(),
            right: alloc::vec![n, 2],
        });
    }
    let targets: Vec<f64> = gt.iter().flat_map(|g| g.iter().copied()).collect();
    let target = tape.constant(Tensor::new(&[n, 2], targets)?)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum(sq)?;
    let gaze = tape.affine(sum, 1.0 / n as f64, 0.0)?;

    let pv = tape.value(pred).data().to_vec();
    let indicator: Vec<f64> = gt
        .iter()
        .enumerate()
        .map(|(i, g)| hit_indicator([pv[2 * i], pv[2 * i + 1]], *g, cfg.tau))
        .collect();
    let indicator = tape.constant(Tensor::new(tape.shape(conf), indicator)?)?;
    let cd = tape.sub(conf, indicator)?;
    let csq = tape.mul(cd, cd)?;
    let csum = tape.sum(csq)?;
    let confidence = tape.affine(csum, 1.0 / n as f64, 0.0)?;

    let wg = tape.affine(gaze, cfg.lambda_gaze, 0.0)?;
    let wc = tape.affine(confidence, cfg.lambda_conf, 0.0)?;
    Ok(LossTerms {
        total: tape.add(wg, wc)?,
        gaze,
        confidence,
    })
}
