//! The full predictor and its ablation baselines.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::data::SceneImage;
use crate::error::{Error, Result};
use crate::fusion::{fuse, predict_confidence, predict_gaze, FusionOutput, FusionParams, HeadParams};
use crate::init::linear;
use crate::params::{bind, count, param_tree, Linear, ParamTree};
use crate::rng::SplitMix64;
use crate::temporal::{encode_prepared, prepare_sequence, GazePoint, LstmParams, TemporalEncoding, WINDOW_LEN};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{encode_patches, extract_patches, SceneEncoding, VitConfig, VitParams};

/// Forward-pass mode. Training mode owns the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SplitMix64),
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Full,
    TemporalOnly,
    SpatialOnly,
    CenterFixed,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Full,
        BaselineKind::TemporalOnly,
        BaselineKind::SpatialOnly,
        BaselineKind::CenterFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Full => "full",
            BaselineKind::TemporalOnly => "temporal_only",
            BaselineKind::SpatialOnly => "spatial_only",
            BaselineKind::CenterFixed => "center_fixed",
        }
    }

    /// Accepts the snake-case names and the short forms `temporal`/`spatial`/`center`.
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => BaselineKind::Full,
            "temporal" | "temporal_only" => BaselineKind::TemporalOnly,
            "spatial" | "spatial_only" => BaselineKind::SpatialOnly,
            "center" | "center_fixed" => BaselineKind::CenterFixed,
            _ => return None,
        })
    }

    pub fn uses_scene(self) -> bool {
        matches!(self, BaselineKind::Full | BaselineKind::SpatialOnly)
    }

    pub fn uses_history(self) -> bool {
        matches!(self, BaselineKind::Full | BaselineKind::TemporalOnly)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub vit: VitConfig,
    pub lstm_hidden: usize,
    pub fused_dim: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    pub fn full() -> Self {
        Self {
            vit: VitConfig::full(),
            lstm_hidden: 128,
            fused_dim: 256,
            head_hidden: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            vit: VitConfig::desk(),
            lstm_hidden: 16,
            fused_dim: 32,
            head_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.lstm_hidden == 0 || self.fused_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn combined_dim(&self) -> usize {
        self.vit.embed_dim + self.lstm_hidden
    }
}

/// Every learned array. Sub-trees a baseline does not use are `None`.
/// Ablations route a single modality through `proj_spatial` or
/// `proj_temporal` straight into the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub vit: Option<VitParams<T>>,
    pub lstm: Option<LstmParams<T>>,
    pub fusion: Option<FusionParams<T>>,
    pub proj_spatial: Option<Linear<T>>,
    pub proj_temporal: Option<Linear<T>>,
    pub heads: Option<HeadParams<T>>,
}
param_tree!(ModelParams {
    leaves: [],
    nodes: [vit, lstm, fusion, proj_spatial, proj_temporal, heads]
});

const VIT_STREAM: u64 = 0x11;
const LSTM_STREAM: u64 = 0x12;
const FUSION_STREAM: u64 = 0x13;
const HEAD_STREAM: u64 = 0x14;

impl ModelParams {
    pub fn init(kind: BaselineKind, dims: &ModelDims, seed: u64) -> Self {
        let rng = |label| SplitMix64::stream(seed, label);
        let (d, h, f) = (dims.vit.embed_dim, dims.lstm_hidden, dims.fused_dim);
        let vit = kind.uses_scene().then(|| VitParams::init(&dims.vit, &mut rng(VIT_STREAM)));
        let lstm = kind.uses_history().then(|| LstmParams::init(h, &mut rng(LSTM_STREAM)));
        let mut fusion_rng = rng(FUSION_STREAM);
        let (fusion, proj_spatial, proj_temporal) = match kind {
            BaselineKind::Full => (Some(FusionParams::init(d, h, f, &mut fusion_rng)), None, None),
            BaselineKind::SpatialOnly => (None, Some(linear(d, f, &mut fusion_rng)), None),
            BaselineKind::TemporalOnly => (None, None, Some(linear(h, f, &mut fusion_rng))),
            BaselineKind::CenterFixed => (None, None, None),
        };
        let heads = (kind != BaselineKind::CenterFixed).then(|| HeadParams::init(f, dims.head_hidden, &mut rng(HEAD_STREAM)));
        Self {
            vit,
            lstm,
            fusion,
            proj_spatial,
            proj_temporal,
            heads,
        }
    }
}

/// Model inputs after preprocessing: `[tokens × 3p²]` patches and the
/// `[10 × 4]` history. Patches are shared between samples of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub patches: Option<Rc<Tensor>>,
    pub sequence: Tensor,
}

/// Intermediate tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[1 × 2]`
    pub gaze: Var,
    /// `[1 × 1]`
    pub confidence: Var,
    pub scene: Option<SceneEncoding>,
    pub temporal: Option<TemporalEncoding>,
    pub fusion: Option<FusionOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Prediction {
    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: BaselineKind,
    pub dims: ModelDims,
    pub params: ModelParams,
}

fn missing(what: &'static str) -> Error {
    Error::InvalidArgument(alloc::format!("model is missing its {what} parameters"))
}

/// Run `kind` on already-bound parameters.
pub fn forward_bound(
    tape: &mut Tape,
    kind: BaselineKind,
    dims: &ModelDims,
    p: &ModelParams<Var>,
    input: &PreparedInput,
    mode: &mut Mode<'_>,
) -> Result<ForwardTrace> {
    let scene = encode_scene_bound(tape, kind, dims, p, input, mode)?;
    forward_with_scene(tape, kind, p, input, scene)
}

/// The scene half of [`forward_bound`]; `None` for kinds without a scene.
pub fn encode_scene_bound(
    tape: &mut Tape,
    kind: BaselineKind,
    dims: &ModelDims,
    p: &ModelParams<Var>,
    input: &PreparedInput,
    mode: &mut Mode<'_>,
) -> Result<Option<SceneEncoding>> {
    if !kind.uses_scene() {
        return Ok(None);
    }
    let patches = input.patches.as_ref().ok_or(Error::Empty("scene patches"))?;
    let vit = p.vit.as_ref().ok_or_else(|| missing("vision transformer"))?;
    Ok(Some(encode_patches(tape, patches, vit, &dims.vit, mode)?))
}

/// The rest of [`forward_bound`] given the scene encoding of `input`, which
/// may be shared by several windows of one scene on the same tape.
pub fn forward_with_scene(
    tape: &mut Tape,
    kind: BaselineKind,
    p: &ModelParams<Var>,
    input: &PreparedInput,
    scene: Option<SceneEncoding>,
) -> Result<ForwardTrace> {
    if kind == BaselineKind::CenterFixed {
        return Ok(ForwardTrace {
            gaze: tape.constant(Tensor::row(&[0.5, 0.5]))?,
            confidence: tape.constant(Tensor::row(&[1.0]))?,
            scene: None,
            temporal: None,
            fusion: None,
        });
    }
    if kind.uses_scene() != scene.is_some() {
        let what = if scene.is_some() { "takes no" } else { "needs a" };
        return Err(Error::InvalidArgument(alloc::format!("{} {what} scene encoding", kind.name())));
    }
    let temporal = if kind.uses_history() {
        let lstm = p.lstm.as_ref().ok_or_else(|| missing("lstm"))?;
        Some(encode_prepared(tape, &input.sequence, lstm)?)
    } else {
        None
    };
    let (fused, fusion) = match (&scene, &temporal) {
        (Some(s), Some(t)) => {
            let fp = p.fusion.as_ref().ok_or_else(|| missing("fusion"))?;
            let out = fuse(tape, s.features, t.features, fp)?;
            (out.fused, Some(out))
        }
        (Some(s), None) => {
            let proj = p.proj_spatial.as_ref().ok_or_else(|| missing("spatial projection"))?;
            (proj.forward(tape, s.features)?, None)
        }
        (None, Some(t)) => {
            let proj = p.proj_temporal.as_ref().ok_or_else(|| missing("temporal projection"))?;
            (proj.forward(tape, t.features)?, None)
        }
        (None, None) => unreachable!("every learned baseline uses a modality"),
    };
    let heads = p.heads.as_ref().ok_or_else(|| missing("head"))?;
    Ok(ForwardTrace {
        gaze: predict_gaze(tape, fused, &heads.gaze)?,
        confidence: predict_confidence(tape, fused, &heads.confidence)?,
        scene,
        temporal,
        fusion,
    })
}

impl Model {
    pub fn new(kind: BaselineKind, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let params = ModelParams::init(kind, &dims, seed);
        Ok(Self { kind, dims, params })
    }

    /// Check that stored arrays match the shapes `kind` and `dims` imply.
    pub fn from_params(kind: BaselineKind, dims: ModelDims, params: ModelParams) -> Result<Self> {
        dims.validate()?;
        let reference = ModelParams::init(kind, &dims, 0);
        let expected = crate::params::flatten(&reference);
        let found = crate::params::flatten(&params);
        if expected.len() != found.len() {
            return Err(Error::LengthMismatch {
                left: found.len(),
                right: expected.len(),
            });
        }
        for ((en, et), (fnm, ft)) in expected.iter().zip(&found) {
            if en != fnm || et.shape() != ft.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    left: ft.shape().to_vec(),
                    right: et.shape().to_vec(),
                });
            }
        }
        Ok(Self { kind, dims, params })
    }

    pub fn parameter_count(&self) -> usize {
        count(&self.params)
    }

    pub fn prepare(&self, image: &SceneImage, window: &[GazePoint]) -> Result<PreparedInput> {
        let patches = if self.kind.uses_scene() {
            Some(Rc::new(extract_patches(image, &self.dims.vit)?))
        } else {
            None
        };
        Ok(PreparedInput {
            patches,
            sequence: prepare_sequence(window, WINDOW_LEN)?,
        })
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, input: &PreparedInput, mode: &mut Mode<'_>) -> Result<(ModelParams<Var>, ForwardTrace)> {
        let bound = bind(&self.params, tape)?;
        let trace = forward_bound(tape, self.kind, &self.dims, &bound, input, mode)?;
        Ok((bound, trace))
    }

    pub fn forward_prepared(&self, input: &PreparedInput) -> Result<Prediction> {
        Ok(self.forward_shared(&[input])?[0])
    }

    /// Eval-mode predictions for windows of one scene, encoding the scene
    /// once. Kinds without a scene accept any windows.
    pub fn forward_shared(&self, inputs: &[&PreparedInput]) -> Result<Vec<Prediction>> {
        if self.kind == BaselineKind::CenterFixed {
            let p = Prediction {
                x: 0.5,
                y: 0.5,
                confidence: 1.0,
            };
            return Ok(alloc::vec![p; inputs.len()]);
        }
        let Some(first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape)?;
        let scene = encode_scene_bound(&mut tape, self.kind, &self.dims, &bound, first, &mut Mode::Eval)?;
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            if !same_scene(input, first) {
                return Err(Error::InvalidArgument("forward_shared windows come from different scenes".into()));
            }
            let trace = forward_with_scene(&mut tape, self.kind, &bound, input, scene.clone())?;
            let g = tape.value(trace.gaze).data();
            out.push(Prediction {
                x: g[0],
                y: g[1],
                confidence: tape.item(trace.confidence),
            });
        }
        Ok(out)
    }

    fn bind_constants(&self, tape: &mut Tape) -> Result<ModelParams<Var>> {
        let mut failed = None;
        let bound = self.params.map_named("", &mut |_, t| match tape.constant(t.clone()) {
            Ok(v) => v,
            Err(e) => {
                failed.get_or_insert(e);
                Var::from_index(0)
            }
        });
        failed.map_or(Ok(bound), Err)
    }

    /// Eval-mode prediction from an image and a 10-point history.
    pub fn predict(&self, image: &SceneImage, window: &[GazePoint]) -> Result<Prediction> {
        self.forward_prepared(&self.prepare(image, window)?)
    }
}

/// Whether two inputs carry the same scene allocation (or both none).
pub fn same_scene(a: &PreparedInput, b: &PreparedInput) -> bool {
    match (&a.patches, &b.patches) {
        (Some(x), Some(y)) => Rc::ptr_eq(x, y),
        (None, None) => true,
        _ => false,
    }
}

/// Bound parameter leaves in tree order.
pub fn bound_leaves(p: &ModelParams<Var>) -> Vec<Var> {
    crate::params::flatten(p).into_iter().map(|(_, v)| v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;

    fn window(shift: f64) -> Vec<GazePoint> {
        (0..WINDOW_LEN)
            .map(|i| GazePoint::new(250.0 * i as f64, 0.3 + 0.02 * i as f64 + shift, 0.5, 0.9))
            .collect()
    }

    fn tiny_dims() -> ModelDims {
        let mut d = ModelDims::desk();
        d.vit.image_h = 32;
        d.vit.image_w = 64;
        d
    }

    #[test]
    fn center_fixed_is_constant() {
        let m = Model::new(BaselineKind::CenterFixed, tiny_dims(), 1).unwrap();
        assert_eq!(m.parameter_count(), 0);
        let img = SceneImage::filled(64, 32, [10, 20, 30]);
        let p = m.predict(&img, &window(0.0)).unwrap();
        assert_eq!((p.x, p.y, p.confidence), (0.5, 0.5, 1.0));
    }

    #[test]
    fn temporal_only_ignores_image() {
        let m = Model::new(BaselineKind::TemporalOnly, tiny_dims(), 2).unwrap();
        assert!(m.params.vit.is_none() && m.params.fusion.is_none());
        let a = generate_scene(1, 64, 32, 2).unwrap().0;
        let b = generate_scene(2, 64, 32, 4).unwrap().0;
        assert_eq!(m.predict(&a, &window(0.0)).unwrap(), m.predict(&b, &window(0.0)).unwrap());
        assert_ne!(m.predict(&a, &window(0.0)).unwrap(), m.predict(&a, &window(0.1)).unwrap());
    }

    #[test]
    fn spatial_only_ignores_history() {
        let m = Model::new(BaselineKind::SpatialOnly, tiny_dims(), 3).unwrap();
        assert!(m.params.lstm.is_none() && m.params.fusion.is_none());
        let a = generate_scene(1, 64, 32, 2).unwrap().0;
        let b = generate_scene(2, 64, 32, 4).unwrap().0;
        assert_eq!(m.predict(&a, &window(0.0)).unwrap(), m.predict(&a, &window(0.1)).unwrap());
        assert_ne!(m.predict(&a, &window(0.0)).unwrap(), m.predict(&b, &window(0.0)).unwrap());
    }

    #[test]
    fn full_model_outputs_in_range_and_deterministic() {
        let m = Model::new(BaselineKind::Full, tiny_dims(), 4).unwrap();
        let img = generate_scene(5, 64, 32, 3).unwrap().0;
        let p = m.predict(&img, &window(0.0)).unwrap();
        for v in [p.x, p.y, p.confidence] {
            assert!(v > 0.0 && v < 1.0);
        }
        assert_eq!(p, m.predict(&img, &window(0.0)).unwrap());
        assert_eq!(m, Model::new(BaselineKind::Full, tiny_dims(), 4).unwrap());
        assert_ne!(m.params, Model::new(BaselineKind::Full, tiny_dims(), 5).unwrap().params);
    }

    #[test]
    fn predict_rejects_short_window() {
        let m = Model::new(BaselineKind::TemporalOnly, tiny_dims(), 2).unwrap();
        let img = SceneImage::filled(64, 32, [0, 0, 0]);
        let short = &window(0.0)[..9];
        assert!(matches!(m.predict(&img, short), Err(Error::WindowLength { expected: 10, found: 9 })));
    }

    #[test]
    fn from_params_checks_shapes() {
        let desk = Model::new(BaselineKind::Full, ModelDims::desk(), 1).unwrap();
        assert!(Model::from_params(BaselineKind::Full, ModelDims::desk(), desk.params.clone()).is_ok());
        assert!(Model::from_params(BaselineKind::Full, tiny_dims(), desk.params.clone()).is_ok());
        let mut other = ModelDims::desk();
        other.lstm_hidden = 8;
        assert!(Model::from_params(BaselineKind::Full, other, desk.params).is_err());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in BaselineKind::ALL {
            assert_eq!(BaselineKind::parse(k.name()), Some(k));
        }
        assert_eq!(BaselineKind::parse("temporal"), Some(BaselineKind::TemporalOnly));
        assert_eq!(BaselineKind::parse("nope"), None);
    }
}
