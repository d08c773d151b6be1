//! JSON-lines dataset manifest.
//!
//! One record per line; paths are relative to the manifest's directory:
//!
//! ```json
//! {"id": "face-000", "image": "images/face-000.png",
//!  "landmarks": [[x0, y0], …, [x67, y67]],
//!  "foreground": "foreground/face-000.png", "split": "train"}
//! ```
//!
//! Landmarks are in source-image pixels with pixel centres at integer
//! coordinates. `split` is one of `train`, `val`, `test`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;
use crate::preprocessing::{
    build_region_bundle, foreground_weight_map, BundleOptions, HoleSpec, LandmarkSet, RawSample, RegionBundle,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}` (train, val or test)"))),
        }
    }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub landmarks: Vec<[f64; 2]>,
    pub foreground: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| {
                Error::InvalidArgument(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads one sample; every failure names the sample id.
    pub fn load_sample(&self, rec: &Record) -> Result<RawSample> {
        let ingest = |message: String| Error::Ingestion {
            sample: rec.id.clone(),
            message,
        };
        let image = imageio::load_rgb(&self.root.join(&rec.image)).map_err(|e| ingest(e.to_string()))?;
        let foreground = imageio::load_mask(&self.root.join(&rec.foreground)).map_err(|e| ingest(e.to_string()))?;
        let landmarks = LandmarkSet::new(rec.landmarks.clone()).map_err(|e| ingest(e.to_string()))?;
        Ok(RawSample {
            id: rec.id.clone(),
            image,
            landmarks,
            foreground,
        })
    }

    /// Every sample of `split` crossed with every hole spec, sample-major.
    pub fn bundles(&self, split: Split, specs: &[HoleSpec], opts: &BundleOptions) -> Result<Vec<RegionBundle>> {
        let mut out = Vec::new();
        for rec in self.split(split) {
            let raw = self.load_sample(rec)?;
            for spec in specs {
                out.push(build_region_bundle(&raw, spec, opts)?);
            }
        }
        Ok(out)
    }
}

pub const BUNDLE_FORMAT: &str = "degnet-bundle/1";

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    format: String,
    id: String,
    label: String,
    resolution: usize,
    gamma: f64,
}

/// Saves a bundle as a tensor archive with keys `x_real`, `x_crop`, `x_m`,
/// `x_f`, `x_l`, `x_fg`, `hole_mask`, `landmarks` (68×2) and the weight
/// map `w_fb`.
pub fn save_bundle(b: &RegionBundle, gamma: f64, path: &Path) -> Result<()> {
    let meta = BundleMeta {
        format: BUNDLE_FORMAT.into(),
        id: b.id.clone(),
        label: b.label.clone(),
        resolution: b.x_real.shape()[1],
        gamma,
    };
    let mut a = Archive::new(serde_json::to_value(meta)?);
    for (k, t) in [
        ("x_real", &b.x_real),
        ("x_crop", &b.x_crop),
        ("x_m", &b.x_m),
        ("x_f", &b.x_f),
        ("x_l", &b.x_l),
        ("x_fg", &b.x_fg),
        ("hole_mask", &b.hole_mask),
    ] {
        a.insert(k, t.clone());
    }
    let pts = b.landmarks.points();
    a.insert("landmarks", Tensor::new(vec![pts.len(), 2], pts.iter().flatten().copied().collect())?);
    a.insert("w_fb", foreground_weight_map(&b.x_fg, gamma)?);
    a.write(path)
}

pub fn load_bundle(path: &Path) -> Result<RegionBundle> {
    let mut a = Archive::read(path)?;
    let meta: BundleMeta = serde_json::from_value(a.metadata.clone()).map_err(|e| Error::Integrity {
        path: path.to_path_buf(),
        message: format!("bad bundle metadata: {e}"),
    })?;
    let mut take = |k: &str| a.take(k, path);
    let pts = take("landmarks")?;
    let landmarks = LandmarkSet::new(pts.data().chunks_exact(2).map(|p| [p[0], p[1]]).collect())?;
    Ok(RegionBundle {
        x_real: take("x_real")?,
        x_crop: take("x_crop")?,
        x_m: take("x_m")?,
        x_f: take("x_f")?,
        x_l: take("x_l")?,
        x_fg: take("x_fg")?,
        hole_mask: take("hole_mask")?,
        landmarks,
        id: meta.id,
        label: meta.label,
    })
}
