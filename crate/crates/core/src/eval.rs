//! Per-sample metrics, aggregate reports and spatial error grids.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::hit_indicator;
use crate::math::sqrt;
use crate::model::Model;
use crate::sphere::angular_error_deg;
use crate::stats::{mean, median, pearson};
use crate::train::{predict_all, PreparedSample};

/// Pixel radii for the accuracy metrics.
pub const ACC_RADII_PX: [f64; 3] = [10.0, 20.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Center,
    Peripheral,
}

impl Region {
    /// Center is the middle half of the frame in both axes.
    pub fn of(gt: [f64; 2]) -> Self {
        if (gt[0] - 0.5).abs() < 0.25 && (gt[1] - 0.5).abs() < 0.25 {
            Region::Center
        } else {
            Region::Peripheral
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Center => "center",
            Region::Peripheral => "peripheral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center" => Some(Region::Center),
            "peripheral" => Some(Region::Peripheral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleMetrics {
    pub idx: usize,
    pub scene_id: String,
    pub pred: [f64; 2],
    pub target: [f64; 2],
    /// Squared Euclidean error in normalized coordinates.
    pub mse: f64,
    pub ang_deg: f64,
    pub px_dist: f64,
    pub conf: f64,
    pub region: Region,
}

pub fn sample_metrics(
    idx: usize,
    scene_id: &str,
    pred: [f64; 2],
    target: [f64; 2],
    conf: f64,
    image_w: usize,
    image_h: usize,
) -> SampleMetrics {
    let (dx, dy) = (pred[0] - target[0], pred[1] - target[1]);
    let (px, py) = (dx * image_w as f64, dy * image_h as f64);
    SampleMetrics {
        idx,
        scene_id: scene_id.into(),
        pred,
        target,
        mse: dx * dx + dy * dy,
        ang_deg: angular_error_deg(pred, target),
        px_dist: sqrt(px * px + py * py),
        conf,
        region: Region::of(target),
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mse: f64,
    pub mean_ang_deg: f64,
    pub median_ang_deg: f64,
    pub acc_10px: f64,
    pub acc_20px: f64,
    pub acc_50px: f64,
    pub mean_confidence: f64,
    pub center_count: usize,
    pub center_mean_ang_deg: Option<f64>,
    pub peripheral_count: usize,
    pub peripheral_mean_ang_deg: Option<f64>,
    /// Pearson correlation of predicted confidence with the hit indicator
    /// `‖ŷ − y‖ < τ`; absent when either side is constant.
    pub confidence_hit_correlation: Option<f64>,
}

impl Aggregates {
    pub fn acc(&self) -> [f64; 3] {
        [self.acc_10px, self.acc_20px, self.acc_50px]
    }
}

fn fraction(rows: &[SampleMetrics], f: impl Fn(&SampleMetrics) -> bool) -> f64 {
    rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64
}

/// Aggregates depend only on the per-sample rows.
pub fn aggregate(rows: &[SampleMetrics], tau: f64) -> Result<Aggregates> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let col = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let ang = col(|r| r.ang_deg);
    let region_mean = |region| {
        let v: Vec<f64> = rows.iter().filter(|r| r.region == region).map(|r| r.ang_deg).collect();
        (v.len(), mean(&v).ok())
    };
    let (center_count, center_mean_ang_deg) = region_mean(Region::Center);
    let (peripheral_count, peripheral_mean_ang_deg) = region_mean(Region::Peripheral);
    let hits: Vec<f64> = rows
        .iter()
        .map(|r| if sqrt(r.mse) < tau { 1.0 } else { 0.0 })
        .collect();
    Ok(Aggregates {
        count: rows.len(),
        mse: mean(&col(|r| r.mse))?,
        mean_ang_deg: mean(&ang)?,
        median_ang_deg: median(&ang)?,
        acc_10px: fraction(rows, |r| r.px_dist <= ACC_RADII_PX[0]),
        acc_20px: fraction(rows, |r| r.px_dist <= ACC_RADII_PX[1]),
        acc_50px: fraction(rows, |r| r.px_dist <= ACC_RADII_PX[2]),
        mean_confidence: mean(&col(|r| r.conf))?,
        center_count,
        center_mean_ang_deg,
        peripheral_count,
        peripheral_mean_ang_deg,
        confidence_hit_correlation: pearson(&col(|r| r.conf), &hits).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub image_w: usize,
    pub image_h: usize,
    pub tau: f64,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn from_rows(model: &str, image_w: usize, image_h: usize, tau: f64, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        Ok(Self {
            model: model.into(),
            image_w,
            image_h,
            tau,
            aggregates: aggregate(&per_sample, tau)?,
            per_sample,
        })
    }

    pub fn angular_errors(&self) -> Vec<f64> {
        self.per_sample.iter().map(|r| r.ang_deg).collect()
    }
}

/// Eval-mode metrics of `model` over prepared samples.
pub fn evaluate(model: &Model, samples: &[PreparedSample], tau: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = predict_all(model, samples)?;
    let (w, h) = (model.dims.vit.image_w, model.dims.vit.image_h);
    let rows = samples
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (s, p))| sample_metrics(i, &s.scene_id, p.xy(), s.target, p.confidence, w, h))
        .collect();
    EvalReport::from_rows(model.kind.name(), w, h, tau, rows)
}

/// Mean angular error per ground-truth cell; `None` marks empty cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl Heatmap {
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.cells[r * self.cols + c]
    }

    /// Count-weighted mean of the non-empty cells.
    pub fn weighted_mean(&self) -> Option<f64> {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return None;
        }
        let total: f64 = self
            .cells
            .iter()
            .zip(&self.counts)
            .filter_map(|(c, k)| c.map(|v| v * *k as f64))
            .sum();
        Some(total / n as f64)
    }
}

pub fn cell_of(target: [f64; 2], rows: usize, cols: usize) -> (usize, usize) {
    let r = ((target[1] * rows as f64) as usize).min(rows - 1);
    let c = ((target[0] * cols as f64) as usize).min(cols - 1);
    (r, c)
}

pub fn spatial_heatmap(samples: &[SampleMetrics], rows: usize, cols: usize) -> Result<Heatmap> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(alloc::format!("heatmap grid must be at least 1x1, got {rows}x{cols}")));
    }
    let mut sums = alloc::vec![0.0; rows * cols];
    let mut counts = alloc::vec![0usize; rows * cols];
    for s in samples {
        let (r, c) = cell_of(s.target, rows, cols);
        sums[r * cols + c] += s.ang_deg;
        counts[r * cols + c] += 1;
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(s, &k)| (k > 0).then(|| s / k as f64))
        .collect();
    Ok(Heatmap { rows, cols, cells, counts })
}

/// `1[‖ŷ − y‖ < τ]` per row, as used by the confidence objective.
pub fn hits(rows: &[SampleMetrics], tau: f64) -> Vec<bool> {
    rows.iter().map(|r| hit_indicator(r.pred, r.target, tau) == 1.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn rows_from(pairs: &[([f64; 2], [f64; 2])]) -> Vec<SampleMetrics> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (p, t))| sample_metrics(i, "s", *p, *t, 0.5, 512, 256))
            .collect()
    }

    #[test]
    fn perfect_predictor() {
        let mut rng = SplitMix64::new(1);
        let pairs: Vec<_> = (0..50)
            .map(|_| {
                let t = [rng.next_f64(), rng.next_f64()];
                (t, t)
            })
            .collect();
        let rows = rows_from(&pairs);
        let a = aggregate(&rows, 0.05).unwrap();
        assert_eq!(a.mse, 0.0);
        assert_eq!(a.mean_ang_deg, 0.0);
        assert_eq!(a.acc(), [1.0, 1.0, 1.0]);
        let hm = spatial_heatmap(&rows, 4, 4).unwrap();
        assert!(hm.cells.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn pixel_distance_and_region() {
        let m = sample_metrics(0, "s", [0.5, 0.5], [0.5 + 3.0 / 512.0, 0.5 + 4.0 / 256.0], 0.9, 512, 256);
        assert!((m.px_dist - 5.0).abs() < 1e-9);
        assert_eq!(m.region, Region::Center);
        assert_eq!(Region::of([0.75, 0.5]), Region::Peripheral);
        assert_eq!(Region::of([0.74, 0.26]), Region::Center);
    }

    #[test]
    fn center_fixed_on_uniform_targets() {
        // Monte Carlo reference: fraction of uniform targets within 10 px of
        // the frame center at 512x256.
        let mut mc = SplitMix64::new(77);
        let n = 100_000;
        let inside = (0..n)
            .filter(|_| {
                let (x, y) = (mc.next_f64() * 512.0 - 256.0, mc.next_f64() * 256.0 - 128.0);
                x * x + y * y <= 100.0
            })
            .count() as f64
            / n as f64;
        let mut rng = SplitMix64::new(78);
        let pairs: Vec<_> = (0..n).map(|_| ([0.5, 0.5], [rng.next_f64(), rng.next_f64()])).collect();
        let a = aggregate(&rows_from(&pairs), 0.05).unwrap();
        let area = core::f64::consts::PI * 100.0 / (512.0 * 256.0);
        assert!((a.acc_10px - inside).abs() < 0.002, "{} vs {inside}", a.acc_10px);
        assert!((a.acc_10px - area).abs() < 0.002);
        assert!(a.acc_10px < 0.01);
    }

    #[test]
    fn single_cell_heatmap_is_global_mean() {
        let mut rng = SplitMix64::new(3);
        let pairs: Vec<_> = (0..100)
            .map(|_| ([rng.next_f64(), rng.next_f64()], [rng.next_f64(), rng.next_f64()]))
            .collect();
        let rows = rows_from(&pairs);
        let hm = spatial_heatmap(&rows, 1, 1).unwrap();
        let a = aggregate(&rows, 0.05).unwrap();
        assert!((hm.get(0, 0).unwrap() - a.mean_ang_deg).abs() < 1e-9);
    }

    #[test]
    fn empty_cells_are_absent() {
        let rows = rows_from(&[([0.1, 0.1], [0.1, 0.1])]);
        let hm = spatial_heatmap(&rows, 2, 2).unwrap();
        assert_eq!(hm.get(0, 0), Some(0.0));
        assert_eq!(hm.get(1, 1), None);
        assert!(aggregate(&[], 0.05).is_err());
        assert!(spatial_heatmap(&rows, 0, 2).is_err());
    }

    #[test]
    fn calibration_correlation_sign() {
        let mut rows = rows_from(&[
            ([0.5, 0.5], [0.5, 0.5]),
            ([0.5, 0.5], [0.51, 0.5]),
            ([0.5, 0.5], [0.9, 0.5]),
            ([0.5, 0.5], [0.1, 0.2]),
        ]);
        for (r, c) in rows.iter_mut().zip([0.9, 0.8, 0.2, 0.1]) {
            r.conf = c;
        }
        assert!(aggregate(&rows, 0.05).unwrap().confidence_hit_correlation.unwrap() > 0.9);
        assert_eq!(hits(&rows, 0.05), vec![true, true, false, false]);
    }

    proptest! {
        #[test]
        fn accuracy_is_nested_and_cells_partition(seed in any::<u64>(), n in 1usize..200, gr in 1usize..6, gc in 1usize..9) {
            let mut rng = SplitMix64::new(seed);
            let pairs: Vec<_> = (0..n)
                .map(|_| {
                    let t = [rng.next_f64(), rng.next_f64()];
                    let p = [(t[0] + 0.05 * rng.normal()).clamp(0.0, 1.0), (t[1] + 0.05 * rng.normal()).clamp(0.0, 1.0)];
                    (p, t)
                })
                .collect();
            let rows = rows_from(&pairs);
            let a = aggregate(&rows, 0.05).unwrap();
            prop_assert!(a.acc_10px <= a.acc_20px && a.acc_20px <= a.acc_50px);
            prop_assert_eq!(a.center_count + a.peripheral_count, n);
            let hm = spatial_heatmap(&rows, gr, gc).unwrap();
            prop_assert_eq!(hm.counts.iter().sum::<usize>(), n);
            prop_assert!((hm.weighted_mean().unwrap() - a.mean_ang_deg).abs() < 1e-9);
        }
    }
}
