//! CSV point annotations: one `x,y,category` row per object center.
//!
//! Coordinates are pixel positions (fractional allowed) in image space;
//! the category is a zero-based label index. An optional header row with
//! the exact field names is tolerated on read and always emitted on write.

use std::fs;
use std::path::Path;

use crate::counting::Point;
use crate::error::{MocError, Result};

const HEADER: &str = "x,y,category";

/// Parses annotation CSV text. `categories` bounds the label index; rows
/// with `category >= categories` are rejected. Blank lines are skipped and
/// line numbers in errors are 1-based.
pub fn parse_annotations(text: &str, categories: usize) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        if idx == 0 && row == HEADER {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(MocError::Parse {
                line,
                msg: format!("expected 3 comma-separated fields, found {}", fields.len()),
            });
        }
        let coord = |name: &str, text: &str| -> Result<f64> {
            let v: f64 = text
                .parse()
                .map_err(|_| MocError::Parse { line, msg: format!("bad {name} {text:?}") })?;
            if !v.is_finite() || v < 0.0 {
                return Err(MocError::Parse {
                    line,
                    msg: format!("{name} must be finite and non-negative, got {text}"),
                });
            }
            Ok(v)
        };
        let x = coord("x", fields[0])?;
        let y = coord("y", fields[1])?;
        let category: usize = fields[2]
            .parse()
            .map_err(|_| MocError::Parse { line, msg: format!("bad category {:?}", fields[2]) })?;
        if category >= categories {
            return Err(MocError::Parse {
                line,
                msg: format!("category {category} out of range (have {categories})"),
            });
        }
        points.push(Point { x, y, category });
    }
    Ok(points)
}

/// Reads and parses an annotation file.
pub fn read_annotations(path: &Path, categories: usize) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, categories)
}

/// Writes points as annotation CSV with a header row.
pub fn write_annotations(path: &Path, points: &[Point]) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.category));
    }
    fs::write(path, out)?;
    Ok(())
}
