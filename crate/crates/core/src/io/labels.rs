use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::TruthBox;

/// Parses `class_id cx cy w h` lines (normalized coordinates). Blank lines are
/// ignored; `path` is only used for error context.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<TruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(Error::parse(path, i + 1, format!("expected 5 fields, got {}", toks.len())));
        }
        let class: usize =
            toks[0].parse().map_err(|_| Error::parse(path, i + 1, format!("bad class id {:?}", toks[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, tok) in v.iter_mut().zip(&toks[1..]) {
            *slot = tok.parse().map_err(|_| Error::parse(path, i + 1, format!("bad coordinate {tok:?}")))?;
        }
        let b = TruthBox::new(v[0], v[1], v[2], v[3], class).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<TruthBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn format_labels(boxes: &[TruthBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", b.class, b.x, b.y, b.w, b.h);
    }
    s
}

pub fn write_label_file(path: impl AsRef<Path>, boxes: &[TruthBox]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_line_numbers() {
        let p = Path::new("img7.txt");
        let boxes = parse_labels("0 0.5 0.5 0.25 0.5\n\n2 0.1 0.2 0.1 0.1\n", p).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].class, 2);

        let e = parse_labels("0 0.5 0.5 0.2 0.2\n1 1.5 0.5 0.2 0.2\n", p).unwrap_err().to_string();
        assert!(e.starts_with("img7.txt:2:"), "{e}");
        let e = parse_labels("0 0.5 0.5 0.2\n", p).unwrap_err().to_string();
        assert!(e.starts_with("img7.txt:1:"), "{e}");
        assert!(parse_labels("-1 0.5 0.5 0.2 0.2\n", p).is_err());
        assert!(parse_labels("0 0.5 0.5 0 0.2\n", p).is_err());
    }

    #[test]
    fn format_round_trip() {
        let boxes = vec![TruthBox::new(0.5, 0.25, 0.5, 0.125, 1).unwrap()];
        let back = parse_labels(&format_labels(&boxes), Path::new("x")).unwrap();
        assert_eq!(back, boxes);
    }
}
