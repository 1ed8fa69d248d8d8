//! On-disk dataset layout: `<root>/scenes/<id>.ppm` and `<root>/gaze/<id>.csv`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gazeprophet_core::data::{Dataset, ScanpathRecord};
use gazeprophet_core::temporal::GazePoint;

use crate::error::{Error, Result};
use crate::ppm;

pub const CSV_HEADER: [&str; 4] = ["t_ms", "x", "y", "conf"];

pub fn scene_path(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(format!("{id}.ppm"))
}

pub fn gaze_path(root: &Path, id: &str) -> PathBuf {
    root.join("gaze").join(format!("{id}.csv"))
}

/// Timestamps use the shortest exact decimal; x, y and conf are written with
/// 6 decimals.
pub fn encode_gaze_csv(points: &[GazePoint]) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", p.t_ms, p.x, p.y, p.confidence));
    }
    out
}

/// Parse and validate a gaze CSV. Field ranges and strictly increasing
/// timestamps are checked; errors carry the file line.
pub fn parse_gaze_csv(path: &Path, text: &str) -> Result<Vec<GazePoint>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let row_err = |line: u64, reason: String| Error::Row {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(row_err(1, format!("header must be '{}'", CSV_HEADER.join(","))));
    }
    let mut points: Vec<GazePoint> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut v = [0.0; 4];
        for (k, name) in CSV_HEADER.iter().enumerate() {
            let raw = &rec[k];
            v[k] = raw
                .trim()
                .parse::<f64>()
                .map_err(|_| row_err(line, format!("field {name}: '{raw}' is not a number")))?;
        }
        let p = GazePoint::new(v[0], v[1], v[2], v[3]);
        match p.validate(points.len()) {
            Ok(()) => {}
            Err(gazeprophet_core::Error::FieldOutOfRange {
                field,
                value,
                min,
                max,
                ..
            }) => {
                return Err(row_err(line, format!("field {field}: {value} outside [{min}, {max}]")));
            }
            Err(e) => return Err(row_err(line, e.to_string())),
        }
        if let Some(prev) = points.last() {
            if p.t_ms <= prev.t_ms {
                return Err(row_err(
                    line,
                    format!("field t_ms: {} does not increase on {}", p.t_ms, prev.t_ms),
                ));
            }
        }
        points.push(p);
    }
    Ok(points)
}

pub fn read_gaze_csv(path: &Path) -> Result<Vec<GazePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gaze_csv(path, &text)
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    for (id, image) in &ds.scenes {
        ppm::write_scene(&scene_path(root, id), image)?;
    }
    for r in &ds.records {
        crate::atomic::write(&gaze_path(root, &r.scene_id), encode_gaze_csv(&r.points).as_bytes())?;
    }
    Ok(())
}

fn ids_with_ext(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.exists() {
        return Ok(ids);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Load every scene/scanpath pair under `root`. A root without `scenes/`
/// and `gaze/` is an empty dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::format(root, "dataset root is not a directory"));
    }
    let scenes = ids_with_ext(&root.join("scenes"), "ppm")?;
    let gaze = ids_with_ext(&root.join("gaze"), "csv")?;
    let no_gaze: Vec<String> = scenes.difference(&gaze).cloned().collect();
    if !no_gaze.is_empty() {
        return Err(Error::Pairing {
            missing: "a gaze CSV",
            ids: no_gaze,
        });
    }
    let no_scene: Vec<String> = gaze.difference(&scenes).cloned().collect();
    if !no_scene.is_empty() {
        return Err(Error::Pairing {
            missing: "a scene image",
            ids: no_scene,
        });
    }
    let mut ds = Dataset::default();
    for id in scenes {
        let image = ppm::read_scene(&scene_path(root, &id))?;
        let path = gaze_path(root, &id);
        let record = ScanpathRecord {
            scene_id: id.clone(),
            points: read_gaze_csv(&path)?,
        };
        record.validate().map_err(|e| Error::format(&path, e.to_string()))?;
        ds.scenes.insert(id, image);
        ds.records.push(record);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(body: &str) -> Result<Vec<GazePoint>> {
        parse_gaze_csv(Path::new("g.csv"), &format!("t_ms,x,y,conf\n{body}"))
    }

    #[test]
    fn direct_parse() {
        let p = parse("0,0.5,0.5,1.0\n").unwrap();
        assert_eq!(p, vec![GazePoint::new(0.0, 0.5, 0.5, 1.0)]);
    }

    #[test]
    fn out_of_range_names_field_and_line() {
        let msg = parse("0,0.5,0.5,1.0\n10,1.5,0.5,1.0\n").unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("field x") && msg.contains("[0, 1]"), "{msg}");
    }

    #[test]
    fn malformed_rows() {
        let msg = parse("0,abc,0.5,1.0\n").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("field x"), "{msg}");
        let msg = parse("0,0.5,0.5\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
        let msg = parse("5,0.5,0.5,1\n5,0.5,0.5,1\n").unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("t_ms"), "{msg}");
        let msg = parse_gaze_csv(Path::new("g.csv"), "t,x,y,c\n").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("header"), "{msg}");
    }

    #[test]
    fn encode_then_parse() {
        let pts = vec![GazePoint::new(0.0, 0.123456, 0.5, 0.95), GazePoint::new(250.0, 1.0, 0.0, 0.9)];
        assert_eq!(parse_gaze_csv(Path::new("g"), &encode_gaze_csv(&pts)).unwrap(), pts);
    }
}
