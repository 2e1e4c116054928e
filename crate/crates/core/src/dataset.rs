//! Dataset enumeration: MVTec-style directory trees and explicit manifests.

use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use maae_tensor::Tensor;

use crate::backbone::{load_feature_file, FeatureStack, ToyBackbone};
use crate::error::{MaaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Image file, or a `.maaf` feature file.
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
    pub label: Label,
    pub mask: Option<PathBuf>,
}

impl Record {
    pub fn image_id(&self) -> String {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = self
            .path
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}_{}_{parent}_{stem}", self.class_id, self.split)
    }

    pub fn is_feature_file(&self) -> bool {
        self.path.extension().is_some_and(|e| e == "maaf")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    /// Checks the unsupervised-setting invariants.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.class_id >= self.class_names.len() {
                return Err(MaaeError::Layout(format!("{}: unknown class id {}", r.path.display(), r.class_id)));
            }
            if r.split == Split::Train && r.label == Label::Anomalous {
                return Err(MaaeError::Layout(format!(
                    "{}: anomalous record in the train split",
                    r.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Records of one class only, keeping the full class table.
    pub fn only_class(&self, class_id: usize) -> DatasetIndex {
        DatasetIndex {
            records: self.records.iter().filter(|r| r.class_id == class_id).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Line-oriented manifest: `path<TAB>class<TAB>split<TAB>label<TAB>mask?`.
    pub fn to_manifest(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                rel(&r.path),
                self.class_names[r.class_id],
                r.split,
                r.label,
                r.mask.as_deref().map(rel).unwrap_or_default()
            ));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_manifest(base)).map_err(|e| MaaeError::io(path, e))
    }
}

/// Loads a dataset from an MVTec-style directory or a manifest file.
///
/// With `require_masks`, every anomalous test record must have a mask.
pub fn load_dataset_manifest(path: &Path, require_masks: bool) -> Result<DatasetIndex> {
    let index = if path.is_dir() {
        let manifest = path.join("manifest.tsv");
        if manifest.is_file() {
            parse_manifest_file(&manifest)?
        } else {
            walk_mvtec(path)?
        }
    } else {
        parse_manifest_file(path)?
    };
    index.validate()?;
    if require_masks {
        for r in index.split(Split::Test).filter(|r| r.label == Label::Anomalous) {
            match &r.mask {
                Some(m) if m.is_file() => {}
                Some(m) => return Err(MaaeError::MissingMask(m.clone())),
                None => return Err(MaaeError::MissingMask(r.path.clone())),
            }
        }
    }
    Ok(index)
}

fn parse_manifest_file(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| MaaeError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetIndex> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(MaaeError::Layout(format!(
                "manifest line {}: expected 4 or 5 tab-separated fields",
                n + 1
            )));
        }
        let split = match fields[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(MaaeError::Layout(format!("manifest line {}: bad split `{other}`", n + 1))),
        };
        let label = match fields[3] {
            "normal" => Label::Normal,
            "anomalous" => Label::Anomalous,
            other => return Err(MaaeError::Layout(format!("manifest line {}: bad label `{other}`", n + 1))),
        };
        let mask = fields.get(4).filter(|m| !m.is_empty()).map(|m| base.join(m));
        rows.push((base.join(fields[0]), fields[1].to_string(), split, label, mask));
    }
    let mut class_names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let records = rows
        .into_iter()
        .map(|(path, class, split, label, mask)| Record {
            path,
            class_id: class_names.binary_search(&class).expect("collected above"),
            split,
            label,
            mask,
        })
        .collect();
    Ok(DatasetIndex { records, class_names })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| MaaeError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| MaaeError::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp" | "maaf"))
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `class/train/good`, `class/test/<defect|good>`, `class/ground_truth/<defect>/<stem>_mask.png`.
fn walk_mvtec(root: &Path) -> Result<DatasetIndex> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(MaaeError::Layout(format!(
            "{}: no class directories with a train/ folder",
            root.display()
        )));
    }
    let mut index = DatasetIndex::default();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        index.class_names.push(name_of(dir));
        for sub in sorted_entries(&dir.join("train"))? {
            if !sub.is_dir() {
                continue;
            }
            if name_of(&sub) != "good" {
                return Err(MaaeError::Layout(format!("{}: train split may only contain `good`", sub.display())));
            }
            for img in sorted_entries(&sub)?.into_iter().filter(|p| is_image(p)) {
                index.records.push(Record {
                    path: img,
                    class_id,
                    split: Split::Train,
                    label: Label::Normal,
                    mask: None,
                });
            }
        }
        let test = dir.join("test");
        if !test.is_dir() {
            continue;
        }
        for sub in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
            let defect = name_of(&sub);
            let label = if defect == "good" { Label::Normal } else { Label::Anomalous };
            for img in sorted_entries(&sub)?.into_iter().filter(|p| is_image(p)) {
                let mask = (label == Label::Anomalous).then(|| {
                    let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"))
                });
                index.records.push(Record {
                    path: img,
                    class_id,
                    split: Split::Test,
                    label,
                    mask: mask.filter(|m| m.is_file()),
                });
            }
        }
    }
    Ok(index)
}

/// Loads an RGB image as a `3×size×size` tensor in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| MaaeError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, size, size], data)?)
}

/// Loads a binary mask (`true` = defect) resized to `size×size`.
pub fn load_mask(path: &Path, size: usize) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| MaaeError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut gray = img.to_luma8();
    if gray.width() as usize != size || gray.height() as usize != size {
        gray = image::imageops::resize(&gray, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(gray.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Ground truth for one record: its mask, or all-normal for normal images.
pub fn record_mask(record: &Record, size: usize) -> Result<Vec<bool>> {
    match (&record.mask, record.label) {
        (Some(m), _) => load_mask(m, size),
        (None, Label::Normal) => Ok(vec![false; size * size]),
        (None, Label::Anomalous) => Err(MaaeError::MissingMask(record.path.clone())),
    }
}

/// Features of one record: read from a MAAF file or extracted from the image.
pub fn record_features(record: &Record, backbone: &ToyBackbone, image_size: usize) -> Result<FeatureStack> {
    if record.is_feature_file() {
        let mut stack = load_feature_file(&record.path)?;
        stack.class_id = record.class_id;
        Ok(stack)
    } else {
        let img = load_image(&record.path, image_size)?;
        backbone.extract(&img, &record.image_id(), record.class_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let base = Path::new("/data");
        let text = "a/1.png\tscrew\ttrain\tnormal\nb/2.png\tbottle\ttest\tanomalous\tgt/2.png\nb/3.png\tbottle\ttest\tnormal\t\n";
        let idx = parse_manifest(text, base).unwrap();
        assert_eq!(idx.class_names, vec!["bottle", "screw"]);
        assert_eq!(idx.records[0].class_id, 1);
        assert_eq!(idx.records[1].mask.as_deref(), Some(Path::new("/data/gt/2.png")));
        assert_eq!(idx.records[2].mask, None);
        let again = parse_manifest(&idx.to_manifest(base), base).unwrap();
        assert_eq!(again, idx);
    }

    #[test]
    fn manifest_rejects_anomalous_training_records() {
        let idx = parse_manifest("x.png\tc\ttrain\tanomalous\n", Path::new(".")).unwrap();
        assert!(matches!(idx.validate(), Err(MaaeError::Layout(_))));
        assert!(parse_manifest("x.png\tc\tval\tnormal\n", Path::new(".")).is_err());
    }
}
