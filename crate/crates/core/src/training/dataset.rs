use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{ppm_read, read_label_file, ImageFile};
use crate::loss::TruthBox;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// Image/label pairs plus class names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub classes: Vec<String>,
}

impl DatasetManifest {
    /// Reads `image<TAB>label` lines. Relative paths are resolved against the
    /// manifest's directory; class names come from `classes.txt` beside it
    /// when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(img), Some(lbl), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, i + 1, "expected image<TAB>label"));
            };
            entries.push((base.join(img.trim()), base.join(lbl.trim())));
        }
        let classes_path = base.join(CLASSES_FILE);
        let classes = if classes_path.exists() { read_class_names(&classes_path)? } else { Vec::new() };
        Ok(DatasetManifest { entries, classes })
    }

    /// Writes the manifest with paths relative to its own directory where possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let text: String = self.entries.iter().map(|(i, l)| format!("{}\t{}\n", rel(i), rel(l))).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        if !self.classes.is_empty() {
            let cp = base.join(CLASSES_FILE);
            let names: String = self.classes.iter().map(|c| format!("{c}\n")).collect();
            fs::write(&cp, names).map_err(|e| Error::io(&cp, e))?;
        }
        Ok(())
    }
}

pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageFile,
    pub truths: Vec<TruthBox>,
}

/// Loads every image and label of a manifest into memory.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    if manifest.entries.is_empty() {
        return Err(Error::Config("dataset manifest has no entries".into()));
    }
    manifest
        .entries
        .iter()
        .map(|(img, lbl)| Ok(Sample { image: ppm_read(img)?, truths: read_label_file(lbl)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            entries: vec![(dir.path().join("images/0000.ppm"), dir.path().join("labels/0000.txt"))],
            classes: vec!["circle".into(), "square".into()],
        };
        let p = dir.path().join(MANIFEST_FILE);
        m.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "images/0000.ppm\tlabels/0000.txt\n");
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
    }

    #[test]
    fn malformed_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "a.ppm\ta.txt\nonly-one-field\n").unwrap();
        let e = DatasetManifest::load(&p).unwrap_err().to_string();
        assert!(e.contains(":2:"), "{e}");
    }
}
