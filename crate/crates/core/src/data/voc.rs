use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use roxmltree::{Document, Node};

use super::{ImageRecord, LabeledBox};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Boxes leaving the image by at most this many pixels are clamped instead
/// of rejected.
pub const OVERFLOW_TOLERANCE: f64 = 2.0;

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_of(node: Node, name: &str) -> Option<String> {
    child(node, name).and_then(|c| c.text()).map(|t| t.trim().to_string())
}

/// Parses annotation XML. `path` is only used in messages and as the base
/// for the image file name. Returns the record and any clamp warnings.
pub fn parse_voc_str(text: &str, path: &Path) -> Result<(ImageRecord, Vec<String>)> {
    let fail = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let doc = Document::parse(text).map_err(|e| fail(format!("malformed XML: {}", e)))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(fail(format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
    }
    let size = child(root, "size").ok_or_else(|| fail("missing <size>".into()))?;
    let dim = |name: &str| -> Result<usize> {
        let raw = text_of(size, name).ok_or_else(|| fail(format!("missing <size><{}>", name)))?;
        raw.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| fail(format!("<{}> must be a positive integer, got {:?}", name, raw)))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let image = match text_of(root, "filename") {
        Some(f) if !f.is_empty() => PathBuf::from(f),
        _ => PathBuf::from(path.file_stem().unwrap_or_default()).with_extension("png"),
    };

    let mut objects = Vec::new();
    let mut warnings = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let name = text_of(obj, "name")
            .filter(|n| !n.is_empty())
            .ok_or_else(|| fail(format!("object {} has no <name>", i)))?;
        let bnd = child(obj, "bndbox").ok_or_else(|| fail(format!("object {} ({}) has no <bndbox>", i, name)))?;
        let coord = |tag: &str| -> Result<f64> {
            let raw = text_of(bnd, tag).ok_or_else(|| fail(format!("object {} missing <{}>", i, tag)))?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("object {} <{}> is not a number: {:?}", i, tag, raw)))
        };
        let raw = BBox::new(coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        let (w, h) = (width as f64, height as f64);
        let overflow = [-raw.x1, -raw.y1, raw.x2 - w, raw.y2 - h]
            .into_iter()
            .fold(0.0, f64::max);
        if overflow > OVERFLOW_TOLERANCE {
            return Err(fail(format!(
                "object {} ({}) box {:?} leaves the {}x{} image by {} px",
                i,
                name,
                <[f64; 4]>::from(raw),
                width,
                height,
                overflow
            )));
        }
        let bbox = raw.clip(w, h);
        if bbox != raw {
            warnings.push(format!(
                "{}: object {} ({}) clamped from {:?} to {:?}",
                path.display(),
                i,
                name,
                <[f64; 4]>::from(raw),
                <[f64; 4]>::from(bbox)
            ));
        }
        if bbox.area() <= 0.0 {
            return Err(fail(format!("object {} ({}) has zero area", i, name)));
        }
        objects.push(LabeledBox { name, bbox });
    }
    Ok((
        ImageRecord {
            image,
            width,
            height,
            objects,
        },
        warnings,
    ))
}

/// Reads and parses an annotation file, logging clamp warnings.
pub fn parse_voc_xml(path: &Path) -> Result<ImageRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (record, warnings) = parse_voc_str(&text, path)?;
    for w in warnings {
        log::warn!("{}", w);
    }
    Ok(record)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Serializes a record with integer pixel coordinates.
pub fn to_voc_xml(record: &ImageRecord) -> String {
    let mut s = String::from("<annotation>\n");
    let file = record.image.file_name().unwrap_or_default().to_string_lossy();
    let _ = writeln!(s, "  <filename>{}</filename>", escape(&file));
    let _ = writeln!(
        s,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        record.width, record.height
    );
    for o in &record.objects {
        let _ = writeln!(
            s,
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>",
            escape(&o.name),
            o.bbox.x1.round() as i64,
            o.bbox.y1.round() as i64,
            o.bbox.x2.round() as i64,
            o.bbox.y2.round() as i64
        );
    }
    s.push_str("</annotation>\n");
    s
}
