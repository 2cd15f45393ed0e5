//! Label JSON, feature header + raw f32 payload, score CSV and manifest files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Dataset, Manifest, SequenceMeta, SequenceRecord};
use crate::error::{Error, Result};
use crate::seqcore::{Grid, Start, StartSet};

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    if e.is_io() {
        return Error::io(path, e.into());
    }
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| json_err(path, e))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| json_err(path, e))
}

/// Starts of one sequence with the context needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub fps: f64,
    pub frames: usize,
    pub behaviors: Vec<String>,
    pub starts: StartSet,
}

#[derive(Serialize, Deserialize)]
struct RawLabels {
    fps: f64,
    #[serde(rename = "T")]
    frames: usize,
    behaviors: Vec<String>,
    starts: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidences: Option<Map<String, Value>>,
}

pub fn write_labels(path: &Path, labels: &LabelFile) -> Result<()> {
    if labels.behaviors.len() != labels.starts.behaviors() {
        return Err(Error::invalid("behavior names do not match the start set"));
    }
    let mut starts = Map::new();
    let mut confidences = Map::new();
    let mut scored = false;
    for (name, list) in labels.behaviors.iter().zip(labels.starts.iter()) {
        starts.insert(
            name.clone(),
            list.iter().map(|s| s.frame).collect::<Vec<_>>().into(),
        );
        scored |= list.iter().any(|s| s.confidence.is_some());
        confidences.insert(
            name.clone(),
            list.iter()
                .map(|s| s.confidence.unwrap_or(1.0))
                .collect::<Vec<_>>()
                .into(),
        );
    }
    let raw = RawLabels {
        fps: labels.fps,
        frames: labels.frames,
        behaviors: labels.behaviors.clone(),
        starts,
        confidences: scored.then_some(confidences),
    };
    write_json(path, &raw)
}

pub fn read_labels(path: &Path) -> Result<LabelFile> {
    let raw: RawLabels = read_json(path)?;
    let mut starts = Vec::with_capacity(raw.behaviors.len());
    for name in &raw.behaviors {
        let frames: Vec<usize> = match raw.starts.get(name) {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| format_err(path, format!("starts of '{name}': {e}")))?,
            None => Vec::new(),
        };
        let conf: Option<Vec<f64>> = match raw.confidences.as_ref().and_then(|c| c.get(name)) {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| format_err(path, format!("confidences of '{name}': {e}")))?,
            ),
            None => None,
        };
        if conf.as_ref().is_some_and(|c| c.len() != frames.len()) {
            return Err(format_err(
                path,
                format!("'{name}' has mismatched confidences"),
            ));
        }
        if let Some(&f) = frames.iter().find(|&&f| f >= raw.frames) {
            return Err(format_err(
                path,
                format!("'{name}' start {f} beyond T = {}", raw.frames),
            ));
        }
        starts.push(
            frames
                .iter()
                .enumerate()
                .map(|(i, &f)| match &conf {
                    Some(c) => Start::scored(f, c[i]),
                    None => Start::at(f),
                })
                .collect(),
        );
    }
    if let Some(extra) = raw.starts.keys().find(|k| !raw.behaviors.contains(k)) {
        return Err(format_err(path, format!("unknown behavior '{extra}'")));
    }
    let starts = StartSet::new(starts).map_err(|e| format_err(path, e.to_string()))?;
    Ok(LabelFile {
        fps: raw.fps,
        frames: raw.frames,
        behaviors: raw.behaviors,
        starts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    #[serde(rename = "T")]
    pub frames: usize,
    pub d: usize,
    pub dtype: String,
    /// Payload file name, relative to the header.
    pub payload: String,
}

/// `x.features.json` -> `x.features.bin`.
pub fn features_payload_name(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn write_features(header_path: &Path, features: &Array2<f32>) -> Result<()> {
    let payload = features_payload_name(header_path);
    let header = FeatureHeader {
        frames: features.nrows(),
        d: features.ncols(),
        dtype: "f32le".into(),
        payload: payload
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
    };
    write_json(header_path, &header)?;
    let mut out = create(&payload)?;
    for v in features.iter() {
        out.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(&payload, e))?;
    }
    out.flush().map_err(|e| Error::io(&payload, e))
}

pub fn read_features(header_path: &Path) -> Result<Array2<f32>> {
    let header: FeatureHeader = read_json(header_path)?;
    if header.dtype != "f32le" {
        return Err(format_err(
            header_path,
            format!("unsupported dtype '{}'", header.dtype),
        ));
    }
    let payload = header_path.with_file_name(&header.payload);
    let mut bytes = Vec::new();
    open(&payload)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&payload, e))?;
    let expected = header.frames * header.d * 4;
    if bytes.len() != expected {
        return Err(format_err(
            &payload,
            format!(
                "payload has {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((header.frames, header.d), values)
        .map_err(|e| format_err(header_path, e.to_string()))
}

/// Per-frame scores of one sequence, optionally next to the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub behaviors: Vec<String>,
    pub scores: Grid,
    pub truth: Option<Grid>,
}

/// Columns: `frame`, then `<b>_gt` (when truth is given) and `<b>_pred` per behavior.
pub fn write_scores_csv(
    path: &Path,
    behaviors: &[String],
    scores: &Grid,
    truth: Option<&Grid>,
) -> Result<()> {
    if scores.behaviors() != behaviors.len() || truth.is_some_and(|t| t.shape() != scores.shape()) {
        return Err(Error::invalid(
            "score and truth grids must match the behavior list",
        ));
    }
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["frame".to_string()];
    for b in behaviors {
        if truth.is_some() {
            header.push(format!("{b}_gt"));
        }
        header.push(format!("{b}_pred"));
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(header.len());
    for t in 0..scores.frames() {
        row.clear();
        row.push(t.to_string());
        for b in 0..behaviors.len() {
            if let Some(g) = truth {
                row.push(g.get(t, b).to_string());
            }
            row.push(scores.get(t, b).to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreFile> {
    let parse = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        parse(line, e.to_string())
    };
    let mut r = csv::Reader::from_reader(open(path)?);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("frame") {
        return Err(parse(1, "first column must be 'frame'".into()));
    }
    let columns: Vec<&str> = header.iter().skip(1).collect();
    let with_truth = columns.first().is_some_and(|c| c.ends_with("_gt"));
    let step = if with_truth { 2 } else { 1 };
    if columns.is_empty() || columns.len() % step != 0 {
        return Err(parse(
            1,
            "expected <behavior>_gt/<behavior>_pred column pairs".into(),
        ));
    }
    let mut behaviors = Vec::new();
    for chunk in columns.chunks(step) {
        let pred = chunk[step - 1].strip_suffix("_pred").ok_or_else(|| {
            parse(
                1,
                format!("column '{}' is not a _pred column", chunk[step - 1]),
            )
        })?;
        if with_truth && chunk[0].strip_suffix("_gt") != Some(pred) {
            return Err(parse(
                1,
                format!("column '{}' does not pair with '{}'", chunk[0], chunk[1]),
            ));
        }
        behaviors.push(pred.to_string());
    }

    let nb = behaviors.len();
    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for (t, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let frame: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse(line, format!("bad frame index '{}'", &record[0])))?;
        if frame != t {
            return Err(parse(line, format!("expected frame {t}, found {frame}")));
        }
        for (k, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse(line, format!("bad number '{field}'")))?;
            if with_truth && k % 2 == 0 {
                truth.push(v);
            } else {
                scores.push(v);
            }
        }
    }
    let frames = scores.len() / nb;
    let scores = Grid::from_vec(frames, nb, scores)?;
    let truth = if with_truth {
        Some(Grid::from_vec(frames, nb, truth)?)
    } else {
        None
    };
    Ok(ScoreFile {
        behaviors,
        scores,
        truth,
    })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

/// Writes `manifest.json` and the label and feature files of every sequence into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (record, entry) in data.records.iter().zip(&data.manifest.sequences) {
        write_labels(
            &dir.join(&entry.labels),
            &LabelFile {
                fps: record.meta.fps,
                frames: record.features.nrows(),
                behaviors: data.manifest.behaviors.clone(),
                starts: record.labels.clone(),
            },
        )?;
        write_features(&dir.join(&entry.features), &record.features)?;
    }
    write_manifest(&dir.join("manifest.json"), &data.manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let records = manifest
        .sequences
        .iter()
        .map(|entry| {
            let labels_path = dir.join(&entry.labels);
            let labels = read_labels(&labels_path)?;
            if labels.behaviors != manifest.behaviors {
                return Err(format_err(
                    &labels_path,
                    "behaviors differ from the manifest",
                ));
            }
            let features_path = dir.join(&entry.features);
            let features = read_features(&features_path)?;
            if features.nrows() != labels.frames {
                return Err(format_err(
                    &features_path,
                    "frame count differs from the labels",
                ));
            }
            Ok(SequenceRecord {
                features,
                labels: labels.starts,
                meta: SequenceMeta {
                    id: entry.id.clone(),
                    seed: entry.seed,
                    fps: labels.fps,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { records, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_csv_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "frame,a_gt,a_pred\n0,0,0.5\n1,1,oops\n").unwrap();
        match read_scores_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feature_payload_size_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.features.json");
        write_features(&path, &Array2::<f32>::ones((4, 3))).unwrap();
        let bin = features_payload_name(&path);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_reject_unknown_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.json");
        std::fs::write(
            &path,
            r#"{"fps":500,"T":10,"behaviors":["a"],"starts":{"a":[1],"b":[2]}}"#,
        )
        .unwrap();
        assert!(read_labels(&path).is_err());
    }
}
