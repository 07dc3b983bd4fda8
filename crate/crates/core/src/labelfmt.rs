//! YOLO-style label files, prediction files and the `classes.txt` label map.
//!
//! Ground-truth lines are `class cx cy w h`; detection lines carry a trailing
//! confidence, `class cx cy w h conf`. Coordinates are normalized to the image
//! size and written with exactly six decimals so output is byte-stable.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking that a box lies inside the unit square.
pub const EXTENT_EPSILON: f64 = 1e-6;

/// Name of the label map file inside workspaces and dataset directories.
pub const LABEL_MAP_FILE: &str = "classes.txt";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: field `{field}` is not a number: {value:?}")]
    NotNumeric {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: field `{field}` out of range: {value}")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: box extends past the image edge along {axis}")]
    OutsideImage { line: usize, axis: char },
    #[error("line {line}: class id {class_id} is not in the label map ({classes} classes)")]
    UnknownClass {
        line: usize,
        class_id: u32,
        classes: usize,
    },
    #[error("empty label map")]
    EmptyLabelMap,
    #[error("label map line {line}: duplicate class name {name:?}")]
    DuplicateClass { line: usize, name: String },
    #[error("label map line {line}: empty class name")]
    EmptyClassName { line: usize },
    #[error("class name {0:?} contains a line break")]
    LineBreakInName(String),
}

/// One labeled object: class id plus normalized center/size geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            cx,
            cy,
            w,
            h,
        }
    }

    /// Builds a box from normalized corner coordinates.
    pub fn from_corners(class_id: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            class_id,
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Checks the normalized-geometry invariants. `line` is only used to
    /// label the error.
    pub fn check(&self, line: usize) -> Result<(), LabelError> {
        let fields = [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)];
        for (field, value) in fields {
            if !value.is_finite() {
                return Err(LabelError::NotNumeric {
                    line,
                    field,
                    value: value.to_string(),
                });
            }
        }
        for (field, value) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(out_of_range(line, field, value));
            }
        }
        for (field, value) in [("w", self.w), ("h", self.h)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(out_of_range(line, field, value));
            }
        }
        if self.x_min() < -EXTENT_EPSILON || self.x_max() > 1.0 + EXTENT_EPSILON {
            return Err(LabelError::OutsideImage { line, axis: 'x' });
        }
        if self.y_min() < -EXTENT_EPSILON || self.y_max() > 1.0 + EXTENT_EPSILON {
            return Err(LabelError::OutsideImage { line, axis: 'y' });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        self.check(0)
    }

    /// The box as it reads back after a six-decimal write.
    pub fn quantized(&self) -> Self {
        Self {
            class_id: self.class_id,
            cx: quantize(self.cx),
            cy: quantize(self.cy),
            w: quantize(self.w),
            h: quantize(self.h),
        }
    }
}

/// A detection: a box plus the detector's confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Prediction {
    pub const fn new(bbox: BoundingBox, confidence: f64) -> Self {
        Self { bbox, confidence }
    }

    pub fn check(&self, line: usize) -> Result<(), LabelError> {
        self.bbox.check(line)?;
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(out_of_range(line, "confidence", self.confidence));
        }
        Ok(())
    }

    pub fn quantized(&self) -> Self {
        Self {
            bbox: self.bbox.quantized(),
            confidence: quantize(self.confidence),
        }
    }
}

/// Result of parsing a single line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelRecord {
    Truth(BoundingBox),
    Prediction(Prediction),
}

/// A line type that can appear in a label file.
pub trait LabelLine: Sized + Copy {
    /// Number of whitespace-separated fields on a line.
    const FIELDS: usize;

    fn from_fields(fields: &[&str], line: usize) -> Result<Self, LabelError>;

    /// Validates after six-decimal quantization and appends one line.
    fn write_line(&self, out: &mut String, line: usize) -> Result<(), LabelError>;

    fn bbox(&self) -> &BoundingBox;
}

impl LabelLine for BoundingBox {
    const FIELDS: usize = 5;

    fn from_fields(fields: &[&str], line: usize) -> Result<Self, LabelError> {
        let b = BoundingBox {
            class_id: parse_class(fields[0], line)?,
            cx: parse_real(fields[1], "cx", line)?,
            cy: parse_real(fields[2], "cy", line)?,
            w: parse_real(fields[3], "w", line)?,
            h: parse_real(fields[4], "h", line)?,
        };
        b.check(line)?;
        Ok(b)
    }

    fn write_line(&self, out: &mut String, line: usize) -> Result<(), LabelError> {
        let q = self.quantized();
        q.check(line)?;
        push_box(out, &q);
        out.push('\n');
        Ok(())
    }

    fn bbox(&self) -> &BoundingBox {
        self
    }
}

impl LabelLine for Prediction {
    const FIELDS: usize = 6;

    fn from_fields(fields: &[&str], line: usize) -> Result<Self, LabelError> {
        let bbox = BoundingBox::from_fields(&fields[..5], line)?;
        let p = Prediction {
            bbox,
            confidence: parse_real(fields[5], "confidence", line)?,
        };
        p.check(line)?;
        Ok(p)
    }

    fn write_line(&self, out: &mut String, line: usize) -> Result<(), LabelError> {
        let q = self.quantized();
        q.check(line)?;
        push_box(out, &q.bbox);
        out.push(' ');
        push_real(out, q.confidence);
        out.push('\n');
        Ok(())
    }

    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }
}

/// Parses one line. `line` is the 1-based line number used in errors.
pub fn parse_label_line(
    text: &str,
    line: usize,
    expect_confidence: bool,
) -> Result<LabelRecord, LabelError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if expect_confidence {
        check_count(&fields, Prediction::FIELDS, line)?;
        Prediction::from_fields(&fields, line).map(LabelRecord::Prediction)
    } else {
        check_count(&fields, BoundingBox::FIELDS, line)?;
        BoundingBox::from_fields(&fields, line).map(LabelRecord::Truth)
    }
}

/// Parses a whole label file. Every line yields exactly one box or an error;
/// a missing final newline is accepted.
pub fn parse_label_file<T: LabelLine>(text: &str) -> Result<Vec<T>, LabelError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(idx, raw)| {
            let line = idx + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            let fields: Vec<&str> = raw.split_whitespace().collect();
            check_count(&fields, T::FIELDS, line)?;
            T::from_fields(&fields, line)
        })
        .collect()
}

/// Canonical text for a list of boxes: one line per box, six decimals,
/// newline-terminated. An empty list gives an empty string.
pub fn serialize_label_file<T: LabelLine>(boxes: &[T]) -> Result<String, LabelError> {
    let mut out = String::with_capacity(boxes.len() * 48);
    for (idx, b) in boxes.iter().enumerate() {
        b.write_line(&mut out, idx + 1)?;
    }
    Ok(out)
}

/// Ordered class-id to class-name table. The class id is the zero-based
/// position of the name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new<I, S>(names: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(LabelError::EmptyLabelMap);
        }
        for (idx, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(LabelError::EmptyClassName { line: idx + 1 });
            }
            if name.contains(['\n', '\r']) {
                return Err(LabelError::LineBreakInName(name.clone()));
            }
            if names[..idx].contains(name) {
                return Err(LabelError::DuplicateClass {
                    line: idx + 1,
                    name: name.clone(),
                });
            }
        }
        Ok(Self { names })
    }

    /// Parses `classes.txt`. Trailing blank lines are ignored; blank lines
    /// between names are an error.
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let mut lines: Vec<&str> = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        Self::new(lines)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.names.get(class_id as usize).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn check_class(&self, class_id: u32, line: usize) -> Result<(), LabelError> {
        if (class_id as usize) < self.names.len() {
            Ok(())
        } else {
            Err(LabelError::UnknownClass {
                line,
                class_id,
                classes: self.names.len(),
            })
        }
    }

    /// Checks every box's class id and geometry against this map.
    pub fn check_boxes<T: LabelLine>(&self, boxes: &[T]) -> Result<(), LabelError> {
        for (idx, b) in boxes.iter().enumerate() {
            b.bbox().check(idx + 1)?;
            self.check_class(b.bbox().class_id, idx + 1)?;
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for LabelMap {
    type Error = LabelError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(map: LabelMap) -> Self {
        map.names
    }
}

impl fmt::Display for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// The labels of one image: ground truth (`BoundingBox`) or detections
/// (`Prediction`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile<T> {
    pub image_id: String,
    pub boxes: Vec<T>,
}

impl<T: LabelLine> LabelFile<T> {
    pub fn parse(image_id: impl Into<String>, text: &str) -> Result<Self, LabelError> {
        Ok(Self {
            image_id: image_id.into(),
            boxes: parse_label_file(text)?,
        })
    }

    pub fn to_text(&self) -> Result<String, LabelError> {
        serialize_label_file(&self.boxes)
    }

    pub fn validate(&self, map: &LabelMap) -> Result<(), LabelError> {
        map.check_boxes(&self.boxes)
    }
}

fn check_count(fields: &[&str], expected: usize, line: usize) -> Result<(), LabelError> {
    if fields.len() == expected {
        Ok(())
    } else {
        Err(LabelError::FieldCount {
            line,
            expected,
            found: fields.len(),
        })
    }
}

fn parse_class(field: &str, line: usize) -> Result<u32, LabelError> {
    field.parse::<u32>().map_err(|_| match field.parse::<i64>() {
        Ok(v) => out_of_range(line, "class_id", v),
        Err(_) => LabelError::NotNumeric {
            line,
            field: "class_id",
            value: field.to_string(),
        },
    })
}

fn parse_real(field: &str, name: &'static str, line: usize) -> Result<f64, LabelError> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(LabelError::NotNumeric {
            line,
            field: name,
            value: field.to_string(),
        }),
    }
}

fn out_of_range(line: usize, field: &'static str, value: impl fmt::Display) -> LabelError {
    LabelError::OutOfRange {
        line,
        field,
        value: value.to_string(),
    }
}

fn quantize(v: f64) -> f64 {
    // Round-tripping through the decimal text is the only rounding that is
    // guaranteed to agree with what a reader of the file sees.
    format!("{:.6}", v + 0.0).parse().unwrap_or(v)
}

fn push_real(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    // `+ 0.0` folds -0.0 into 0.0
    let _ = write!(out, "{:.6}", v + 0.0);
}

fn push_box(out: &mut String, b: &BoundingBox) {
    use std::fmt::Write as _;
    let _ = write!(out, "{}", b.class_id);
    for v in [b.cx, b.cy, b.w, b.h] {
        out.push(' ');
        push_real(out, v);
    }
}
