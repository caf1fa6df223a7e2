//! KITTI object label files.
//!
//! Each line: `type truncated occluded alpha left top right bottom h w l x y z ry [score]`.
//! Only the type and the 2-D box (columns 5–8) are used.

use mscnn_core::BBox;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct LabelError {
    pub line: usize,
    pub message: String,
}

/// One labeled object, class name verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledObject {
    pub class: String,
    pub bbox: BBox,
}

impl LabeledObject {
    /// Box height in pixels.
    pub fn height(&self) -> f64 {
        self.bbox.h
    }
}

pub fn parse_kitti_labels(text: &str) -> Result<Vec<LabeledObject>, LabelError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| LabelError { line: i + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", f.len())));
        }
        let mut c = [0.0f64; 4];
        for (k, v) in c.iter_mut().enumerate() {
            let s = f[4 + k];
            *v = s.parse().map_err(|_| err(format!("bad box coordinate {s:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite box coordinate {s:?}")));
            }
        }
        let [x1, y1, x2, y2] = c;
        if x2 <= x1 || y2 <= y1 {
            return Err(err(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        out.push(LabeledObject { class: f[0].to_string(), bbox: BBox::from_corners(x1, y1, x2, y2) });
    }
    Ok(out)
}

/// Formats objects as KITTI lines; 3-D fields are written as KITTI's "unknown" values.
pub fn emit_kitti_labels(objects: &[LabeledObject]) -> String {
    let mut s = String::new();
    for o in objects {
        let (x1, y1, x2, y2) = o.bbox.corners();
        s.push_str(&format!(
            "{} 0.00 0 -10 {} {} {} {} -1 -1 -1 -1000 -1000 -1000 -10\n",
            o.class, x1, y1, x2, y2
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_corner_fields() {
        let objs = parse_kitti_labels("Car 0 0 0 10 20 50 60 1.5 1.6 3.9 1 2 3 0.1\n").unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].class, "Car");
        assert_eq!(objs[0].bbox.corners(), (10.0, 20.0, 50.0, 60.0));
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_kitti_labels("").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_number() {
        let e = parse_kitti_labels("Car 0 0 0 1 2 3 4\nCar 0 0 0 x 2 3 4\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_kitti_labels("Car 0 0\n").unwrap_err();
        assert_eq!(e.line, 1);
    }
}
