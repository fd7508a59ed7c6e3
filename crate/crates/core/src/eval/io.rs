use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Detection, EvalReport};
use crate::error::{Error, Result};

/// Reads a JSON-lines detection dump. Blank lines are skipped.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {}", n + 1, reason),
        };
        let det: Detection = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        det.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![Detection {
            image_id: "img_0001".into(),
            class_id: 3,
            bbox: [1.0, 2.0, 30.5, 40.0].into(),
            score: 0.75,
        }];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"image_id\":\"img_0001\",\"class_id\":3,\"box\":[1.0,2.0,30.5,40.0],\"score\":0.75}\n"
        );
        assert_eq!(read_detections(&path).unwrap(), dets);

        std::fs::write(&path, format!("{}\n{{\"image_id\":\"x\",\"class_id\":0,\"box\":[5,5,1,1],\"score\":0.5}}\n", text.trim())).unwrap();
        let err = read_detections(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
