//! Evaluation exports: `report.json`, `per_sample.csv`, `heatmap.csv` and
//! `heatmap.ppm`.

use std::path::Path;

use gazeprophet_core::eval::{aggregate, Aggregates, EvalReport, Heatmap, Region, SampleMetrics};
use gazeprophet_core::stats::{cohens_d, paired_t_test, TTest};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PER_SAMPLE_HEADER: [&str; 7] = ["idx", "scene_id", "mse", "ang_deg", "px_dist", "conf", "region"];

/// Paired comparison of two models' angular errors on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    pub mean_ang_deg: f64,
    pub baseline_mean_ang_deg: f64,
    pub t_test: TTest,
    pub cohens_d: f64,
}

impl Comparison {
    pub fn new(a: &EvalReport, b: &EvalReport) -> Result<Self> {
        let (ea, eb) = (a.angular_errors(), b.angular_errors());
        Ok(Self {
            model: a.model.clone(),
            baseline: b.model.clone(),
            mean_ang_deg: a.aggregates.mean_ang_deg,
            baseline_mean_ang_deg: b.aggregates.mean_ang_deg,
            t_test: paired_t_test(&ea, &eb)?,
            cohens_d: cohens_d(&ea, &eb)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub model: String,
    pub image_w: usize,
    pub image_h: usize,
    pub tau: f64,
    pub aggregates: Aggregates,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comparison: Option<Comparison>,
}

impl ReportFile {
    pub fn new(report: &EvalReport, comparison: Option<Comparison>) -> Self {
        Self {
            model: report.model.clone(),
            image_w: report.image_w,
            image_h: report.image_h,
            tau: report.tau,
            aggregates: report.aggregates.clone(),
            comparison,
        }
    }
}

/// Values use the shortest exact decimal, so aggregates recompute exactly.
pub fn encode_per_sample(rows: &[SampleMetrics]) -> String {
    let mut out = PER_SAMPLE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.idx,
            r.scene_id,
            r.mse,
            r.ang_deg,
            r.px_dist,
            r.conf,
            r.region.name()
        ));
    }
    out
}

/// Rows of a per-sample CSV. Predictions and targets are not stored, so
/// `pred` and `target` come back as NaN.
pub fn parse_per_sample(path: &Path, text: &str) -> Result<Vec<SampleMetrics>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let row_err = |line: u64, reason: String| Error::Row {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != PER_SAMPLE_HEADER {
        return Err(row_err(1, format!("header must be '{}'", PER_SAMPLE_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| row_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| row_err(line, format!("field {}: '{}' is not a number", PER_SAMPLE_HEADER[k], &rec[k])))
        };
        rows.push(SampleMetrics {
            idx: rec[0].parse().map_err(|_| row_err(line, format!("field idx: '{}' is not an index", &rec[0])))?,
            scene_id: rec[1].to_string(),
            pred: [f64::NAN; 2],
            target: [f64::NAN; 2],
            mse: num(2)?,
            ang_deg: num(3)?,
            px_dist: num(4)?,
            conf: num(5)?,
            region: Region::parse(&rec[6]).ok_or_else(|| row_err(line, format!("field region: unknown '{}'", &rec[6])))?,
        });
    }
    Ok(rows)
}

pub fn recompute_aggregates(path: &Path, tau: f64) -> Result<Aggregates> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(aggregate(&parse_per_sample(path, &text)?, tau)?)
}

/// One line per grid row; empty fields mark cells without samples.
pub fn encode_heatmap_csv(h: &Heatmap) -> String {
    let mut out = String::new();
    for r in 0..h.rows {
        let line: Vec<String> = (0..h.cols).map(|c| h.get(r, c).map_or(String::new(), |v| v.to_string())).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Blue (low) to red (high) over `[0, max]`; grey for empty cells.
fn false_color(v: Option<f64>, max: f64) -> [u8; 3] {
    match v {
        None => [128, 128, 128],
        Some(v) => {
            let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
            let g = 1.0 - (2.0 * t - 1.0).abs();
            [(255.0 * t).round() as u8, (255.0 * g).round() as u8, (255.0 * (1.0 - t)).round() as u8]
        }
    }
}

pub const HEATMAP_CELL_PX: usize = 16;

pub fn encode_heatmap_ppm(h: &Heatmap) -> Vec<u8> {
    let max = h.cells.iter().flatten().copied().fold(0.0, f64::max);
    let (w, ht) = (h.cols * HEATMAP_CELL_PX, h.rows * HEATMAP_CELL_PX);
    let mut px = Vec::with_capacity(w * ht * 3);
    for y in 0..ht {
        for x in 0..w {
            px.extend_from_slice(&false_color(h.get(y / HEATMAP_CELL_PX, x / HEATMAP_CELL_PX), max));
        }
    }
    crate::ppm::encode(w, ht, &px)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    crate::atomic::write(path, text.as_bytes())
}

pub fn write_heatmap(dir: &Path, h: &Heatmap) -> Result<()> {
    crate::atomic::write(&dir.join("heatmap.csv"), encode_heatmap_csv(h).as_bytes())?;
    crate::atomic::write(&dir.join("heatmap.ppm"), &encode_heatmap_ppm(h))
}

pub fn write_report(dir: &Path, report: &EvalReport, comparison: Option<Comparison>, heatmap: &Heatmap) -> Result<ReportFile> {
    let file = ReportFile::new(report, comparison);
    write_json(&dir.join("report.json"), &file)?;
    crate::atomic::write(&dir.join("per_sample.csv"), encode_per_sample(&report.per_sample).as_bytes())?;
    write_heatmap(dir, heatmap)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazeprophet_core::eval::{sample_metrics, spatial_heatmap};

    fn rows() -> Vec<SampleMetrics> {
        vec![
            sample_metrics(0, "a", [0.5, 0.5], [0.52, 0.49], 0.9, 128, 64),
            sample_metrics(1, "a", [0.1, 0.2], [0.9, 0.1], 0.3, 128, 64),
            sample_metrics(2, "b", [1.0 / 3.0, 0.7], [0.3, 0.7], 0.55, 128, 64),
        ]
    }

    #[test]
    fn per_sample_csv_recomputes_aggregates() {
        let r = rows();
        let back = parse_per_sample(Path::new("p.csv"), &encode_per_sample(&r)).unwrap();
        assert_eq!(aggregate(&back, 0.05).unwrap(), aggregate(&r, 0.05).unwrap());
        assert_eq!(back[2].scene_id, "b");
        assert_eq!(back[1].region, r[1].region);
    }

    #[test]
    fn heatmap_exports() {
        let h = spatial_heatmap(&rows(), 2, 2).unwrap();
        let csv = encode_heatmap_csv(&h);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().any(|l| l.split(',').any(str::is_empty)));
        let (w, ht, px) = crate::ppm::decode(&encode_heatmap_ppm(&h)).unwrap();
        assert_eq!((w, ht, px.len()), (32, 32, 32 * 32 * 3));
    }

    #[test]
    fn colors() {
        assert_eq!(false_color(None, 1.0), [128, 128, 128]);
        assert_eq!(false_color(Some(0.0), 2.0), [0, 0, 255]);
        assert_eq!(false_color(Some(2.0), 2.0), [255, 0, 0]);
    }
}
