use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Location of the tensor file, relative to the manifest's directory
    /// unless absolute.
    pub path: String,
    pub identity_label: usize,
    pub camera_id: usize,
    pub modality: Modality,
}

/// Dataset description serialised as a single JSON document:
/// `{"num_identities": n, "items": [{"path", "identity_label", "camera_id", "modality"}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_identities: usize,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Checks that identity labels cover exactly `0..num_identities`.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = vec![false; self.num_identities];
        for (i, item) in self.items.iter().enumerate() {
            match seen.get_mut(item.identity_label) {
                Some(s) => *s = true,
                None => {
                    return Err(DataError::InvalidManifest(format!(
                        "item {i} has label {} outside 0..{}",
                        item.identity_label, self.num_identities
                    )))
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::InvalidManifest(format!(
                "identity label {missing} has no items; labels must be contiguous"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: Self = serde_json::from_str(text).map_err(|e| DataError::InvalidManifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Splits each identity's items (in manifest order) so that the last
    /// `per_identity` go to the second manifest.
    pub fn split_holdout(&self, per_identity: usize) -> Result<(Self, Self), DataError> {
        let mut counts = vec![0usize; self.num_identities];
        for item in &self.items {
            counts[item.identity_label] += 1;
        }
        if let Some(label) = counts.iter().position(|&c| c <= per_identity) {
            return Err(DataError::InvalidManifest(format!(
                "identity {label} has {} items, cannot hold out {per_identity}",
                counts[label]
            )));
        }
        let mut seen = vec![0usize; self.num_identities];
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for item in &self.items {
            let label = item.identity_label;
            seen[label] += 1;
            if seen[label] > counts[label] - per_identity {
                held.push(item.clone());
            } else {
                train.push(item.clone());
            }
        }
        Ok((
            Self {
                num_identities: self.num_identities,
                items: train,
            },
            Self {
                num_identities: self.num_identities,
                items: held,
            },
        ))
    }
}

pub(crate) fn resolve(manifest_path: &Path, item_path: &str) -> PathBuf {
    let p = Path::new(item_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .map(|dir| dir.join(p))
            .unwrap_or_else(|| p.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(label: usize, cam: usize) -> ManifestItem {
        ManifestItem {
            path: format!("{label}_{cam}.fseq"),
            identity_label: label,
            camera_id: cam,
            modality: Modality::Video,
        }
    }

    #[test]
    fn json_schema_field_names() {
        let m = DatasetManifest {
            num_identities: 1,
            items: vec![item(0, 1)],
        };
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["num_identities"], 1);
        let it = &v["items"][0];
        assert_eq!(it["path"], "0_1.fseq");
        assert_eq!(it["identity_label"], 0);
        assert_eq!(it["camera_id"], 1);
        assert_eq!(it["modality"], "video");
    }

    #[test]
    fn gaps_in_labels_are_rejected() {
        let m = DatasetManifest {
            num_identities: 3,
            items: vec![item(0, 0), item(2, 0)],
        };
        assert!(matches!(m.validate(), Err(DataError::InvalidManifest(_))));
    }

    #[test]
    fn holdout_takes_last_items_per_identity() {
        let m = DatasetManifest {
            num_identities: 2,
            items: vec![item(0, 0), item(0, 1), item(0, 2), item(1, 0), item(1, 1), item(1, 2)],
        };
        let (train, held) = m.split_holdout(1).unwrap();
        assert_eq!(train.items.len(), 4);
        assert_eq!(held.items, vec![item(0, 2), item(1, 2)]);
        assert!(m.split_holdout(3).is_err());
    }
}
