//! `path,object_id,camera_id,split` dataset manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, ReidError, Result};
use crate::metrics::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub object_id: usize,
    pub camera_id: usize,
    pub split: Split,
}

impl Record {
    pub fn label(&self) -> Label {
        Label {
            object_id: self.object_id,
            camera_id: self.camera_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Relative record paths resolve against this directory.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Train records with object ids remapped to `0..num_ids`.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub records: Vec<usize>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub num_ids: usize,
    /// Original object id of each contiguous label.
    pub original_ids: Vec<usize>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| ReidError::Format(format!("{}: {e}", path.display())))?;
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Record>, _>>()
            .map_err(|e| ReidError::Format(format!("{}: {e}", path.display())))?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)
                .map_err(|e| ReidError::Format(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ReidError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ReidError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Checks the training invariants and, optionally, that every file exists.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            *counts.entry(r.object_id).or_default() += 1;
        }
        if let Some((id, _)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(config(format!(
                "train identity {id} has fewer than 2 images"
            )));
        }
        if check_paths {
            if let Some(r) = self.records.iter().find(|r| !self.resolve(r).exists()) {
                return Err(config(format!(
                    "missing image {}",
                    self.resolve(r).display()
                )));
            }
        }
        Ok(())
    }

    pub fn train_view(&self) -> Result<TrainView> {
        self.validate(false)?;
        let records = self.split(Split::Train);
        if records.is_empty() {
            return Err(config("manifest has no train records"));
        }
        let original_ids: Vec<usize> = {
            let mut ids: Vec<usize> = records.iter().map(|&i| self.records[i].object_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        let remap: BTreeMap<usize, usize> = original_ids
            .iter()
            .enumerate()
            .map(|(i, &o)| (o, i))
            .collect();
        Ok(TrainView {
            labels: records
                .iter()
                .map(|&i| remap[&self.records[i].object_id])
                .collect(),
            cameras: records.iter().map(|&i| self.records[i].camera_id).collect(),
            num_ids: original_ids.len(),
            original_ids,
            records,
        })
    }

    /// Train images serve as both queries and gallery.
    pub fn sanity_split(&self) -> Self {
        let mut records = Vec::new();
        for split in [Split::Query, Split::Gallery] {
            records.extend(
                self.records
                    .iter()
                    .filter(|r| r.split == Split::Train)
                    .map(|r| Record { split, ..r.clone() }),
            );
        }
        Self {
            root: self.root.clone(),
            records,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, o: usize, c: usize, split: Split) -> Record {
        Record {
            path: path.into(),
            object_id: o,
            camera_id: c,
            split,
        }
    }

    #[test]
    fn csv_roundtrip_and_remap() {
        let m = DatasetManifest {
            root: PathBuf::new(),
            records: vec![
                rec("a.ppm", 10, 0, Split::Train),
                rec("b.ppm", 10, 1, Split::Train),
                rec("c.ppm", 42, 0, Split::Train),
                rec("d.ppm", 42, 1, Split::Train),
                rec("e.ppm", 42, 1, Split::Query),
            ],
        };
        let csv = m.to_csv().unwrap();
        assert!(csv.starts_with("path,object_id,camera_id,split\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.records, m.records);
        let tv = back.train_view().unwrap();
        assert_eq!(tv.labels, vec![0, 0, 1, 1]);
        assert_eq!(tv.original_ids, vec![10, 42]);
    }

    #[test]
    fn singleton_identity_rejected() {
        let m = DatasetManifest {
            root: PathBuf::new(),
            records: vec![rec("a.ppm", 1, 0, Split::Train)],
        };
        assert!(m.validate(false).is_err());
    }
}
