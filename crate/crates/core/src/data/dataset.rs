//! Dataset layout scanning.
//!
//! Expected layout (the de-facto public defect-dataset structure, so real
//! data drops in unchanged):
//!
//! ```text
//! <root>/<category>/test/<defect_type>/NNN.png
//! <root>/<category>/ground_truth/<defect_type>/NNN_mask.png
//! ```
//!
//! The `good` defect type holds normal samples and carries no masks (their
//! masks are implicitly all zero). Every other sample must have a mask of
//! matching dimensions. Scanning is lexicographic over defect types and
//! file names, so indices are deterministic across platforms; validation
//! problems (missing masks, unreadable files, size mismatches) are
//! collected and reported together.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
    pub defect_type: String,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub category: String,
    pub samples: Vec<Sample>,
}

impl DatasetIndex {
    pub fn abnormal_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.label == Label::Abnormal)
            .count()
    }

    pub fn normal_count(&self) -> usize {
        self.samples.len() - self.abnormal_count()
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scan one category. An absent or empty `test/` directory yields an empty
/// index; structural problems are collected into one validation error.
pub fn scan_dataset(root: &Path, category: &str) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} does not exist", root.display()),
        )));
    }
    let test_dir = root.join(category).join("test");
    let gt_dir = root.join(category).join("ground_truth");
    let mut samples = Vec::new();
    let mut problems = Vec::new();

    if test_dir.is_dir() {
        for type_dir in sorted_entries(&test_dir)? {
            if !type_dir.is_dir() {
                continue;
            }
            let defect_type = type_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let normal = defect_type == "good";
            for image_path in sorted_entries(&type_dir)? {
                if !is_image(&image_path) {
                    continue;
                }
                let dims = match super::images::probe_dimensions(&image_path) {
                    Ok(d) => Some(d),
                    Err(e) => {
                        problems.push(format!("unreadable image: {e}"));
                        None
                    }
                };
                let mask_path = if normal {
                    None
                } else {
                    let stem = image_path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default();
                    let candidate = gt_dir.join(&defect_type).join(format!("{stem}_mask.png"));
                    if candidate.is_file() {
                        match super::images::probe_dimensions(&candidate) {
                            Ok(mask_dims) => {
                                if let Some(d) = dims {
                                    if mask_dims != d {
                                        problems.push(format!(
                                            "mask size {}x{} does not match image {}x{}: {}",
                                            mask_dims.0,
                                            mask_dims.1,
                                            d.0,
                                            d.1,
                                            candidate.display()
                                        ));
                                    }
                                }
                            }
                            Err(e) => problems.push(format!("unreadable mask: {e}")),
                        }
                        Some(candidate)
                    } else {
                        problems.push(format!(
                            "missing mask for abnormal sample {}",
                            image_path.display()
                        ));
                        None
                    }
                };
                samples.push(Sample {
                    image_path,
                    label: if normal { Label::Normal } else { Label::Abnormal },
                    mask_path,
                    defect_type: defect_type.clone(),
                });
            }
        }
    }

    if !problems.is_empty() {
        return Err(Error::DatasetValidation(problems));
    }
    Ok(DatasetIndex {
        category: category.to_string(),
        samples,
    })
}
