//! Dataset manifests: one `image_path,mask_path,case_id,split` record per
//! line, paths relative to the manifest's directory. `mask_path` may be
//! empty for unlabeled images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::io::{load_f32img, mask_to_tensor, save_f32img, tensor_to_mask};
use super::synth::{Mask, SyntheticScene};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "image_path,mask_path,case_id,split";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => bail!(Data, "unknown split '{s}'"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub case_id: String,
    pub split: Split,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [image, mask, case, split] = fields[..] else {
            bail!(Data, "manifest line {}: expected 4 fields, got {}", n + 1, fields.len());
        };
        if image.is_empty() || case.is_empty() {
            bail!(Data, "manifest line {}: empty image path or case id", n + 1);
        }
        out.push(ManifestRecord {
            image_path: image.into(),
            mask_path: (!mask.is_empty()).then(|| mask.into()),
            case_id: case.to_string(),
            split: split.parse().map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?,
        });
    }
    Ok(out)
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let mask = r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        s.push_str(&format!("{},{mask},{},{}\n", r.image_path.display(), r.case_id, r.split));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub split: Split,
    /// Raw `[C, H, W]` image.
    pub image: Tensor<f32>,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Assigns the first `train` scenes to the training split, the next
    /// `val` to validation and the rest to test.
    pub fn from_scenes(scenes: Vec<SyntheticScene>, train: usize, val: usize) -> Self {
        let samples = scenes
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample {
                case_id: format!("case_{i:04}"),
                split: if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                },
                image: s.image,
                mask: Some(s.mask),
            })
            .collect();
        Self { samples }
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(manifest)?;
        let mut samples = Vec::new();
        for rec in parse_manifest(&text)? {
            let image = load_f32img(&dir.join(&rec.image_path))?;
            let mask = match &rec.mask_path {
                Some(p) => {
                    let m = tensor_to_mask(&load_f32img(&dir.join(p))?)?;
                    if image.shape()[1..] != [m.height, m.width] {
                        bail!(Data, "case {}: mask {}x{} does not match image {:?}", rec.case_id, m.height, m.width, image.shape());
                    }
                    Some(m)
                }
                None => None,
            };
            samples.push(Sample {
                case_id: rec.case_id,
                split: rec.split,
                image,
                mask,
            });
        }
        if samples.is_empty() {
            bail!(Data, "manifest {} lists no images", manifest.display());
        }
        Ok(Self { samples })
    }

    /// Writes `images/`, `masks/` and `manifest.csv` under `dir`; returns
    /// the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image_path = PathBuf::from("images").join(format!("{}.f32img", s.case_id));
            save_f32img(&dir.join(&image_path), &s.image)?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let p = PathBuf::from("masks").join(format!("{}.f32img", s.case_id));
                    save_f32img(&dir.join(&p), &mask_to_tensor(m))?;
                    Some(p)
                }
                None => None,
            };
            records.push(ManifestRecord {
                image_path,
                mask_path,
                case_id: s.case_id.clone(),
                split: s.split,
            });
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, format_manifest(&records))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let recs = vec![
            ManifestRecord {
                image_path: "images/a.f32img".into(),
                mask_path: Some("masks/a.f32img".into()),
                case_id: "a".into(),
                split: Split::Train,
            },
            ManifestRecord {
                image_path: "images/b.f32img".into(),
                mask_path: None,
                case_id: "b".into(),
                split: Split::Test,
            },
        ];
        assert_eq!(parse_manifest(&format_manifest(&recs)).unwrap(), recs);
    }

    #[test]
    fn bad_lines_are_data_errors() {
        assert!(matches!(parse_manifest("a,b,c"), Err(Error::Data(_))));
        assert!(matches!(parse_manifest("a,b,c,holdout"), Err(Error::Data(_))));
    }
}
