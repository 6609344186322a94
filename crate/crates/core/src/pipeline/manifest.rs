//! Dataset manifests (`path,label,domain,group,split`) and in-memory datasets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_HEADER: [&str; 5] = ["path", "label", "domain", "group", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub domain: u32,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub group: Option<String>,
    pub split: Split,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Relative image paths resolve against this directory.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Manifest { line: 1, detail: e.to_string() })?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: 1,
                detail: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
            });
        }
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<ManifestEntry>().enumerate() {
            let line = i + 2;
            let entry = row.map_err(|e| Error::Manifest { line, detail: e.to_string() })?;
            if entry.label.is_fake() == (entry.domain == 0) {
                return Err(Error::Manifest {
                    line,
                    detail: format!("label {:?} is inconsistent with domain {}", entry.label, entry.domain),
                });
            }
            entries.push(entry);
        }
        Ok(Manifest { root: root.into(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for entry in &self.entries {
            writer.serialize(entry).map_err(|e| Error::Manifest { line: 0, detail: e.to_string() })?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Manifest { line: 0, detail: e.to_string() })?;
        let mut text = String::from_utf8(bytes).expect("csv output is utf-8");
        if self.entries.is_empty() {
            text = MANIFEST_HEADER.join(",") + "\n";
        }
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Sorted distinct forgery domain ids.
    pub fn fake_domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.entries.iter().filter(|e| e.domain != 0).map(|e| e.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Manifest {
        Manifest { root: self.root.clone(), entries: self.entries.iter().filter(|e| keep(e)).cloned().collect() }
    }
}

/// Decoded images alongside their manifest entries.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<RgbImage>,
    pub image_size: usize,
}

impl Dataset {
    /// Decodes every entry of `manifest`; images must be `image_size` square.
    pub fn load(manifest: &Manifest, image_size: usize) -> Result<Self> {
        let images = manifest
            .entries
            .par_iter()
            .map(|entry| {
                let path = manifest.resolve(entry);
                let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgb8();
                if img.width() as usize != image_size || img.height() as usize != image_size {
                    return Err(Error::shape(
                        "dataset",
                        format!("{} is {}x{}, expected {image_size}x{image_size}", path.display(), img.width(), img.height()),
                    ));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { entries: manifest.entries.clone(), images, image_size })
    }

    pub fn from_parts(entries: Vec<ManifestEntry>, images: Vec<RgbImage>, image_size: usize) -> Result<Self> {
        if entries.len() != images.len() {
            return Err(Error::shape("dataset", format!("{} entries vs {} images", entries.len(), images.len())));
        }
        Ok(Dataset { entries, images, image_size })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Dataset {
        let (entries, images) = self
            .entries
            .iter()
            .zip(&self.images)
            .filter(|(e, _)| keep(e))
            .map(|(e, i)| (e.clone(), i.clone()))
            .unzip();
        Dataset { entries, images, image_size: self.image_size }
    }

    /// `[n, 3, H, W]` pixels in `[0, 1]` for the given rows.
    pub fn tensor(&self, indices: &[usize]) -> Result<Tensor> {
        images_to_tensor(indices.iter().map(|&i| &self.images[i]), self.image_size)
    }
}

pub fn images_to_tensor<'a>(images: impl Iterator<Item = &'a RgbImage>, size: usize) -> Result<Tensor> {
    let plane = size * size;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for (k, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[start + c * plane + k] = f64::from(px[c]) / 255.0;
            }
        }
        n += 1;
    }
    Tensor::new(vec![n, 3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "path,label,domain,group,split\na.png,real,0,v1,train\nb.png,fake,2,,test\n";

    #[test]
    fn parse_and_write_roundtrip() {
        let m = Manifest::parse(TEXT, "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].group.as_deref(), Some("v1"));
        assert_eq!(m.entries[1].group, None);
        assert_eq!(m.to_text().unwrap(), TEXT);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a.png"));
    }

    #[test]
    fn header_is_required() {
        assert!(matches!(Manifest::parse("a.png,real,0,,train\n", "."), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn inconsistent_label_is_rejected() {
        let err = Manifest::parse("path,label,domain,group,split\na.png,fake,0,,train\n", ".").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }
}
