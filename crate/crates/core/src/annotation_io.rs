//! CVAT import and the JSON annotation/detection files.
//!
//! CVAT labels follow `<class>_<index>` with snake-case class names, e.g.
//! `floating_left_3`. Only `points` shapes are read.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::heatmap::{AnnotatedPoint, Detection, DetectionSet, FrameAnnotation};
use crate::pool_model::{KeyPointClass, KeyPointId};

pub fn parse_cvat(xml: &str) -> Result<Vec<FrameAnnotation>> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Xml { line: e.pos().row, message: e.to_string() })?;
    let line_of = |node: roxmltree::Node| doc.text_pos_at(node.range().start).row;

    let root = doc.root_element();
    if root.tag_name().name() != "annotations" {
        return Err(Error::Xml { line: line_of(root), message: format!("expected <annotations>, found <{}>", root.tag_name().name()) });
    }

    let mut frames = Vec::new();
    for image in root.children().filter(|n| n.has_tag_name("image")) {
        let line = line_of(image);
        let attr = |name: &str| {
            image
                .attribute(name)
                .ok_or_else(|| Error::Xml { line, message: format!("<image> missing `{name}`") })
        };
        let dimension = |name: &str| -> Result<usize> {
            let text = attr(name)?;
            text.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| *x >= 1.0 && x.fract() == 0.0)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Xml { line, message: format!("bad {name} `{text}`") })
        };
        let name = attr("name")?;
        let frame_id = frame_id_from_name(name);
        let (cols, rows) = (dimension("width")?, dimension("height")?);

        let mut points = Vec::new();
        for shape in image.children().filter(|n| n.has_tag_name("points")) {
            let line = line_of(shape);
            let label = shape
                .attribute("label")
                .ok_or_else(|| Error::Xml { line, message: "<points> missing `label`".into() })?;
            let id = KeyPointId::parse_label(label)?;
            let coords = shape
                .attribute("points")
                .ok_or_else(|| Error::Xml { line, message: "<points> missing `points`".into() })?;
            for pair in coords.split(';').filter(|s| !s.trim().is_empty()) {
                let (u, v) = parse_pair(pair).ok_or_else(|| Error::Xml { line, message: format!("bad point `{pair}`") })?;
                if points.iter().any(|p: &AnnotatedPoint| p.id == id) {
                    return Err(Error::Input(format!("image `{name}` has more than one `{label}` point")));
                }
                points.push(AnnotatedPoint { id, u, v });
            }
        }
        frames.push(FrameAnnotation::new(frame_id, rows, cols, points)?);
    }
    Ok(frames)
}

fn parse_pair(pair: &str) -> Option<(f64, f64)> {
    let (u, v) = pair.split_once(',')?;
    let u: f64 = u.trim().parse().ok()?;
    let v: f64 = v.trim().parse().ok()?;
    (u.is_finite() && v.is_finite()).then_some((u, v))
}

/// File stem of a CVAT image name (`dir/frame_12.jpg` -> `frame_12`).
pub fn frame_id_from_name(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes annotations in the "CVAT for images" layout.
pub fn serialize_cvat(frames: &[FrameAnnotation]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<annotations>\n  <version>1.1</version>\n");
    for (i, f) in frames.iter().enumerate() {
        out.push_str(&format!(
            "  <image id=\"{i}\" name=\"{}\" width=\"{}\" height=\"{}\">\n",
            escape_xml(&f.frame_id),
            f.cols,
            f.rows
        ));
        for p in &f.points {
            // `{}` on f64 prints the shortest representation that round-trips.
            out.push_str(&format!(
                "    <points label=\"{}\" occluded=\"0\" source=\"manual\" points=\"{},{}\" z_order=\"0\"/>\n",
                p.id.label(),
                p.u,
                p.v
            ));
        }
        out.push_str("  </image>\n");
    }
    out.push_str("</annotations>\n");
    out
}

/// Divides coordinates by `factor`; frame dimensions are divided and rounded.
pub fn rescale_annotation(ann: &FrameAnnotation, factor: f64) -> Result<FrameAnnotation> {
    check_factor(factor)?;
    Ok(FrameAnnotation {
        frame_id: ann.frame_id.clone(),
        rows: (ann.rows as f64 / factor).round() as usize,
        cols: (ann.cols as f64 / factor).round() as usize,
        points: ann
            .points
            .iter()
            .map(|p| AnnotatedPoint { id: p.id, u: p.u / factor, v: p.v / factor })
            .collect(),
    })
}

pub fn rescale_detections(det: &DetectionSet, factor: f64) -> Result<DetectionSet> {
    check_factor(factor)?;
    Ok(DetectionSet {
        frame_id: det.frame_id.clone(),
        rows: (det.rows as f64 / factor).round() as usize,
        cols: (det.cols as f64 / factor).round() as usize,
        detections: det
            .detections
            .iter()
            .map(|d| Detection { u: d.u / factor, v: d.v / factor, ..*d })
            .collect(),
    })
}

fn check_factor(factor: f64) -> Result<()> {
    if factor > 0.0 && factor.is_finite() {
        Ok(())
    } else {
        Err(Error::validation("factor", format!("{factor} must be positive")))
    }
}

// JSON: {frame_id, rows, cols, points:[{class, index, u, v}]} and
// {frame_id, rows, cols, detections:[{class, index, u, v, entropy}]}

pub fn annotation_to_json(ann: &FrameAnnotation) -> String {
    let points: Vec<Value> = ann
        .points
        .iter()
        .map(|p| json!({"class": p.id.class(), "index": p.id.index(), "u": p.u, "v": p.v}))
        .collect();
    let doc = json!({"frame_id": ann.frame_id, "rows": ann.rows, "cols": ann.cols, "points": points});
    serde_json::to_string_pretty(&doc).unwrap()
}

pub fn detections_to_json(det: &DetectionSet) -> String {
    let detections: Vec<Value> = det
        .detections
        .iter()
        .map(|d| json!({"class": d.id.class(), "index": d.id.index(), "u": d.u, "v": d.v, "entropy": d.entropy}))
        .collect();
    let doc = json!({"frame_id": det.frame_id, "rows": det.rows, "cols": det.cols, "detections": detections});
    serde_json::to_string_pretty(&doc).unwrap()
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Fields<'a> {
    fn of(value: &'a Value, path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        let map = value.as_object().ok_or_else(|| Error::validation(&path, "expected an object"))?;
        Ok(Self { map, path })
    }

    fn name(&self, field: &str) -> String {
        if self.path.is_empty() {
            field.to_string()
        } else {
            format!("{}.{field}", self.path)
        }
    }

    fn get(&self, field: &str) -> Result<&'a Value> {
        self.map.get(field).ok_or_else(|| Error::validation(self.name(field), "missing"))
    }

    fn str(&self, field: &str) -> Result<&'a str> {
        self.get(field)?.as_str().ok_or_else(|| Error::validation(self.name(field), "expected a string"))
    }

    fn uint(&self, field: &str) -> Result<u64> {
        self.get(field)?
            .as_u64()
            .ok_or_else(|| Error::validation(self.name(field), "expected a non-negative integer"))
    }

    fn num(&self, field: &str) -> Result<f64> {
        self.get(field)?
            .as_f64()
            .ok_or_else(|| Error::validation(self.name(field), "expected a number"))
    }

    fn array(&self, field: &str) -> Result<&'a Vec<Value>> {
        self.get(field)?.as_array().ok_or_else(|| Error::validation(self.name(field), "expected an array"))
    }

    fn id(&self) -> Result<KeyPointId> {
        let class: KeyPointClass = self
            .str("class")?
            .parse()
            .map_err(|_| Error::validation(self.name("class"), "unknown key-point class"))?;
        let index = self.uint("index")?;
        u8::try_from(index)
            .ok()
            .and_then(|i| KeyPointId::new(class, i).ok())
            .ok_or_else(|| Error::validation(self.name("index"), format!("{index} out of range for {class}")))
    }
}

fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::validation("document", e.to_string()))
}

pub fn annotation_from_json(text: &str) -> Result<FrameAnnotation> {
    let value = parse_json(text)?;
    let doc = Fields::of(&value, "")?;
    let mut points = Vec::new();
    for (i, item) in doc.array("points")?.iter().enumerate() {
        let p = Fields::of(item, format!("points[{i}]"))?;
        points.push(AnnotatedPoint { id: p.id()?, u: p.num("u")?, v: p.num("v")? });
    }
    let ann = FrameAnnotation {
        frame_id: doc.str("frame_id")?.to_string(),
        rows: doc.uint("rows")? as usize,
        cols: doc.uint("cols")? as usize,
        points,
    };
    ann.validate()?;
    Ok(ann)
}

pub fn detections_from_json(text: &str) -> Result<DetectionSet> {
    let value = parse_json(text)?;
    let doc = Fields::of(&value, "")?;
    let mut detections = Vec::new();
    for (i, item) in doc.array("detections")?.iter().enumerate() {
        let d = Fields::of(item, format!("detections[{i}]"))?;
        detections.push(Detection { id: d.id()?, u: d.num("u")?, v: d.num("v")?, entropy: d.num("entropy")? });
    }
    let det = DetectionSet {
        frame_id: doc.str("frame_id")?.to_string(),
        rows: doc.uint("rows")? as usize,
        cols: doc.uint("cols")? as usize,
        detections,
    };
    det.validate()?;
    Ok(det)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<FrameAnnotation> {
    annotation_from_json(&read_text(path.as_ref())?)
}

pub fn write_annotation(ann: &FrameAnnotation, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &annotation_to_json(ann))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionSet> {
    detections_from_json(&read_text(path.as_ref())?)
}

pub fn write_detections(det: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &detections_to_json(det))
}
