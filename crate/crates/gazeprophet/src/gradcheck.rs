//! End-to-end finite-difference check of the full model.

use gazeprophet_core::data::{synthesize, SynthConfig};
use gazeprophet_core::fusion::LossConfig;
use gazeprophet_core::model::{BaselineKind, Model, ModelDims};
use gazeprophet_core::train::{model_gradient_check, prepare_samples, GroupCheck};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub kind: BaselineKind,
    /// Coordinates sampled per parameter array.
    pub per_group: usize,
    pub seed: u64,
    pub eps: f64,
    /// Samples in the checked batch.
    pub batch: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Full,
            per_group: 8,
            seed: 0,
            eps: 1e-5,
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub max_relative_error: f64,
    pub worst_group: String,
    pub groups: usize,
    pub coordinates: usize,
    pub checks: Vec<GroupCheck>,
}

/// Check the batch loss of a freshly initialized model on synthetic data,
/// in eval mode (dropout off).
pub fn run_gradcheck(dims: &ModelDims, loss: &LossConfig, opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    dims.validate()?;
    let ds = synthesize(&SynthConfig {
        scenes: 1,
        seed: opts.seed,
        width: dims.vit.image_w,
        height: dims.vit.image_h,
        blobs: 3,
        length: 10 + opts.batch.max(1),
        ..SynthConfig::default()
    })?;
    let samples = ds.samples()?;
    let batch = prepare_samples(opts.kind, dims, &ds.scenes, &samples)?;
    let model = Model::new(opts.kind, dims.clone(), opts.seed)?;
    let checks = model_gradient_check(&model, &batch, loss, opts.per_group, opts.seed, opts.eps)?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error));
    Ok(GradcheckSummary {
        max_relative_error: worst.map_or(0.0, |w| w.report.max_relative_error),
        worst_group: worst.map_or(String::new(), |w| w.name.clone()),
        groups: checks.len(),
        coordinates: checks.iter().map(|c| c.report.checked).sum(),
        checks,
    })
}
