use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Known class names, in label order.
pub const CLASS_CATALOG: [&str; 3] = ["COVID-19", "Pneumonia", "No-Findings"];

/// Class names of the two-class task.
pub const TWO_CLASS: [&str; 2] = ["COVID-19", "No-Findings"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Absolute, or relative to the current directory.
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
}

/// Labeled image records. Labels index `classes`, which lists the catalog
/// classes present in the manifest in catalog order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    class_name: String,
}

impl DatasetManifest {
    /// Builds a manifest from `(path, class name)` pairs.
    pub fn from_pairs(pairs: Vec<(PathBuf, String)>) -> Result<Self> {
        for (path, name) in &pairs {
            if !CLASS_CATALOG.contains(&name.as_str()) {
                return Err(Error::Ingestion {
                    path: path.clone(),
                    detail: format!("unknown class {name:?}; expected one of {CLASS_CATALOG:?}"),
                });
            }
        }
        let classes: Vec<String> = CLASS_CATALOG
            .iter()
            .filter(|c| pairs.iter().any(|(_, n)| n == *c))
            .map(|c| c.to_string())
            .collect();
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "manifest needs at least two classes, found {classes:?}"
            )));
        }
        let records = pairs
            .into_iter()
            .map(|(path, class_name)| ManifestRecord {
                label: classes.iter().position(|c| *c == class_name).unwrap(),
                path,
                class_name,
            })
            .collect();
        Ok(Self { classes, records })
    }

    /// Reads a `path,class_name` CSV with a header row. Relative paths are
    /// resolved against the manifest's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut pairs = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
            let p = base.join(&row.path);
            if !p.is_file() {
                return Err(Error::Ingestion {
                    path: p,
                    detail: "listed in manifest but missing".into(),
                });
            }
            pairs.push((p, row.class_name));
        }
        if pairs.is_empty() {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                detail: "manifest has no records".into(),
            });
        }
        Self::from_pairs(pairs)
    }

    /// Writes the manifest with paths made relative to its directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        for r in &self.records {
            let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
            w.serialize(Row {
                path: rel.to_string_lossy().replace('\\', "/"),
                class_name: r.class_name.clone(),
            })
            .map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_catalog_order() {
        let m = DatasetManifest::from_pairs(vec![
            ("a.png".into(), "No-Findings".into()),
            ("b.png".into(), "COVID-19".into()),
        ])
        .unwrap();
        assert_eq!(m.classes, vec!["COVID-19", "No-Findings"]);
        assert_eq!(m.labels(), vec![1, 0]);
        assert_eq!(m.class_counts(), vec![1, 1]);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let err = DatasetManifest::from_pairs(vec![
            ("a.png".into(), "COVID-19".into()),
            ("b.png".into(), "Flu".into()),
        ]);
        assert!(matches!(err, Err(Error::Ingestion { .. })));
    }

    #[test]
    fn missing_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.csv");
        std::fs::write(&mpath, "path,class_name\nnope.png,COVID-19\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&mpath),
            Err(Error::Ingestion { .. })
        ));
    }
}
