//! Cases on disk: one directory per case holding `t1`, `t1gd`, `t2`,
//! `flair` and `seg` NIfTI files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    load_labels, load_volume, save_labels, save_volume, Foreground, LabelMap, Modality, MultiModalVolume,
};

pub const LABEL_STEM: &str = "seg";
pub const EXTENSION: &str = ".nii.gz";
pub const MANIFEST_NAME: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: MultiModalVolume,
    pub labels: LabelMap,
}

impl Case {
    pub fn new(id: impl Into<String>, image: MultiModalVolume, labels: LabelMap) -> Result<Self> {
        if !image.geometry().same_shape(labels.geometry()) {
            return Err(Error::ShapeMismatch(format!(
                "image shape {:?} and label shape {:?} differ",
                image.geometry().shape,
                labels.geometry().shape
            )));
        }
        Ok(Case {
            id: id.into(),
            image,
            labels,
        })
    }

    /// The same case with every channel z-normalized.
    pub fn normalized(&self, policy: Foreground) -> Case {
        Case {
            id: self.id.clone(),
            image: self.image.normalized(policy),
            labels: self.labels.clone(),
        }
    }
}

pub fn file_name(stem: &str) -> String {
    format!("{stem}{EXTENSION}")
}

/// Loads the four modalities of a case directory, checking that their
/// geometries agree.
pub fn load_image(case_dir: &Path) -> Result<MultiModalVolume> {
    let channels = Modality::ALL.map(|m| load_volume(case_dir.join(file_name(m.file_stem()))));
    let [a, b, c, d] = channels;
    let channels = [a?, b?, c?, d?];
    let g0 = *channels[0].geometry();
    for (m, ch) in Modality::ALL.iter().zip(&channels) {
        if ch.geometry() != &g0 {
            return Err(Error::InvalidGeometry(format!(
                "{}: {} has geometry {:?}, t1 has {:?}",
                case_dir.display(),
                m.file_stem(),
                ch.geometry(),
                g0
            )));
        }
    }
    MultiModalVolume::new(channels)
}

pub fn case_id(case_dir: &Path) -> String {
    case_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_case(case_dir: &Path) -> Result<Case> {
    let image = load_image(case_dir)?;
    let labels = load_labels(case_dir.join(file_name(LABEL_STEM)))?;
    if labels.geometry() != image.geometry() {
        return Err(Error::InvalidGeometry(format!(
            "{}: seg geometry {:?} differs from image geometry {:?}",
            case_dir.display(),
            labels.geometry(),
            image.geometry()
        )));
    }
    Case::new(case_id(case_dir), image, labels)
}

/// Writes `root/{id}/` and returns the case directory.
pub fn save_case(root: &Path, case: &Case) -> Result<PathBuf> {
    let dir = root.join(&case.id);
    std::fs::create_dir_all(&dir)?;
    for (m, ch) in Modality::ALL.iter().zip(case.image.channels()) {
        save_volume(dir.join(file_name(m.file_stem())), ch)?;
    }
    save_labels(dir.join(file_name(LABEL_STEM)), &case.labels)?;
    Ok(dir)
}

/// Case directories (those containing a `t1` file) in name order.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(file_name(Modality::T1.file_stem())).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Case>> {
    list_cases(root)?.iter().map(|d| load_case(d)).collect()
}

/// Index of a dataset directory: case IDs and their files relative to it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<ManifestEntry>,
    /// Free-form provenance, e.g. generator seed or upscaling factor.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub files: BTreeMap<String, String>,
}

impl ManifestEntry {
    pub fn for_case(id: &str) -> Self {
        let files = Modality::ALL
            .iter()
            .map(|m| m.file_stem())
            .chain([LABEL_STEM])
            .map(|stem| (stem.to_string(), format!("{id}/{}", file_name(stem))))
            .collect();
        ManifestEntry { id: id.to_string(), files }
    }
}

impl DatasetManifest {
    pub fn write(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(root.join(MANIFEST_NAME), text + "\n")?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomSpec};
    use crate::volume::{Geometry, Volume};

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { shape: [16; 3], r_et: [1.0, 1.5], r_tc: [2.0, 2.5], r_wt: [3.0, 4.0], ..PhantomSpec::default() };
        let (image, labels) = generate_case(&spec).unwrap();
        let case = Case::new("case_000", image, labels).unwrap();
        save_case(dir.path(), &case).unwrap();
        let listed = list_cases(dir.path()).unwrap();
        assert_eq!(listed.len(), 1);
        let back = load_case(&listed[0]).unwrap();
        assert_eq!(back, case);
        let entry = ManifestEntry::for_case("case_000");
        assert_eq!(entry.files["seg"], "case_000/seg.nii.gz");
        let m = DatasetManifest { cases: vec![entry], notes: BTreeMap::new() };
        m.write(dir.path()).unwrap();
        assert_eq!(DatasetManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn mismatched_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (image, labels) = generate_case(&PhantomSpec { shape: [16; 3], r_et: [1.0, 1.5], r_tc: [2.0, 2.5], r_wt: [3.0, 4.0], ..PhantomSpec::default() }).unwrap();
        let case_dir = save_case(dir.path(), &Case::new("c", image, labels).unwrap()).unwrap();
        let other = Volume::<f32>::zeros(Geometry::with_shape([16, 16, 8]).unwrap());
        save_volume(case_dir.join("t2.nii.gz"), &other).unwrap();
        assert!(matches!(load_case(&case_dir), Err(Error::InvalidGeometry(_))));
        assert!(matches!(list_cases(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
