//! Annotation and detection records (line-delimited JSON), image
//! loading with per-channel normalization, and flip augmentation.
//! Angles live in degrees on disk and radians in memory.

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::real::Real;
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// One annotated object; `theta_deg` in `[-90, 90)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
}

impl ObjectAnnotation {
    /// Canonical in-memory box (radians, `w` the long side).
    pub fn to_box(self) -> Result<RotatedBox> {
        RotatedBox::new(self.cx, self.cy, self.w, self.h, self.theta_deg.to_radians())
    }

    pub fn from_box(b: &RotatedBox) -> Self {
        ObjectAnnotation {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            theta_deg: b.theta.to_degrees(),
        }
    }
}

/// One image's annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub objects: Vec<ObjectAnnotation>,
}

impl AnnotationRecord {
    pub fn boxes(&self) -> Result<Vec<RotatedBox>> {
        self.objects.iter().map(|o| o.to_box()).collect()
    }
}

/// One detection, serialized per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn to_box(&self) -> Result<RotatedBox> {
        RotatedBox::new(self.cx, self.cy, self.w, self.h, self.theta_deg.to_radians())
    }
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Dataset(format!("serialize failed: {e}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}:{}: parse failed: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Flip variant applied to an image/annotation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

impl Flip {
    pub const AUGMENTATIONS: [Flip; 3] = [Flip::None, Flip::Horizontal, Flip::Vertical];

    /// Transforms a box under this flip within a `width × height` image
    /// (mirror negates θ; canonicalization restores the range).
    pub fn apply_box(&self, b: &RotatedBox, width: f64, height: f64) -> RotatedBox {
        match self {
            Flip::None => *b,
            Flip::Horizontal => RotatedBox::new(width - b.cx, b.cy, b.w, b.h, -b.theta).unwrap(),
            Flip::Vertical => RotatedBox::new(b.cx, height - b.cy, b.w, b.h, -b.theta).unwrap(),
        }
    }
}

/// Dataset rooted at a directory holding `annotations.jsonl` and the
/// referenced images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let ann = root.join("annotations.jsonl");
        if !ann.exists() {
            return Err(Error::Dataset(format!(
                "no annotations.jsonl under {}",
                root.display()
            )));
        }
        let records = load_jsonl(&ann)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of training samples including flip augmentation.
    pub fn augmented_len(&self, flips: bool) -> usize {
        if flips {
            self.len() * Flip::AUGMENTATIONS.len()
        } else {
            self.len()
        }
    }

    /// Loads sample `index` (augmented indexing: variant-major).
    /// Returns the normalized image tensor and canonical boxes.
    pub fn fetch<T: Real>(&self, index: usize, flips: bool) -> Result<(Tensor4<T>, Vec<RotatedBox>)> {
        let (base, flip) = if flips {
            let n = self.len();
            (index % n, Flip::AUGMENTATIONS[(index / n) % 3])
        } else {
            (index, Flip::None)
        };
        let record = &self.records[base];
        let img_path = self.root.join(&record.image);
        let rgb = image::open(&img_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut tensor = image_to_tensor::<T>(&rgb, flip);
        normalize_per_channel(&mut tensor);
        let boxes = record
            .boxes()?
            .iter()
            .map(|b| flip.apply_box(b, w as f64, h as f64))
            .collect();
        Ok((tensor, boxes))
    }

    /// Ground-truth boxes of base image `index` (no flip).
    pub fn boxes(&self, index: usize) -> Result<Vec<RotatedBox>> {
        self.records[index].boxes()
    }

    /// Deterministic split into two datasets (first `n` / rest).
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let a = Dataset {
            root: self.root.clone(),
            records: self.records[..n.min(self.len())].to_vec(),
        };
        let b = Dataset {
            root: self.root.clone(),
            records: self.records[n.min(self.len())..].to_vec(),
        };
        (a, b)
    }
}

fn image_to_tensor<T: Real>(rgb: &image::RgbImage, flip: Flip) -> Tensor4<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match flip {
                Flip::None => (x, y),
                Flip::Horizontal => (w - 1 - x, y),
                Flip::Vertical => (x, h - 1 - y),
            };
            let p = rgb.get_pixel(sx as u32, sy as u32);
            for c in 0..3 {
                *t.at_mut(0, c, y, x) = T::from_f64(p.0[c] as f64 / 255.0);
            }
        }
    }
    t
}

/// In-place per-channel standardization to zero mean, unit variance.
pub fn normalize_per_channel<T: Real>(t: &mut Tensor4<T>) {
    let [n, c, _, _] = t.shape();
    for b in 0..n {
        for ci in 0..c {
            let plane = t.plane(b, ci);
            let len = plane.len() as f64;
            let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / len;
            let var =
                plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / len;
            let std = var.sqrt().max(1e-6);
            let plane = t.plane_mut(b, ci);
            for v in plane.iter_mut() {
                *v = T::from_f64((v.as_f64() - mean) / std);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn annotation_angle_units_and_canonicalization() {
        let o = ObjectAnnotation {
            cx: 10.0,
            cy: 20.0,
            w: 8.0,
            h: 30.0, // sides swapped on purpose
            theta_deg: 45.0,
        };
        let b = o.to_box().unwrap();
        assert!(b.w >= b.h);
        assert_eq!(b.w, 30.0);
        // swap rotates by 90°: 45 + 90 → 135 ≡ -45
        assert!((b.theta.to_degrees() - (-45.0)).abs() < 1e-9);
    }

    #[test]
    fn jsonl_roundtrip_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![
            DetectionRecord {
                image: "a.png".into(),
                cx: 1.25,
                cy: -3.5,
                w: 40.125,
                h: 10.0625,
                theta_deg: 33.3,
                score: 0.875,
            },
            DetectionRecord {
                image: "b.png".into(),
                cx: 0.1 + 0.2, // representable but awkward value
                cy: 7.0,
                w: 20.0,
                h: 6.0,
                theta_deg: -89.999,
                score: 1.0 / 3.0,
            },
        ];
        save_jsonl(&path, &dets).unwrap();
        let back: Vec<DetectionRecord> = load_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in dets.iter().zip(back.iter()) {
            assert_eq!(a.cx, b.cx);
            assert_eq!(a.score, b.score);
            assert_eq!(a.theta_deg, b.theta_deg);
        }
    }

    #[test]
    fn flip_twice_restores_boxes() {
        let b = RotatedBox::new(30.0, 70.0, 40.0, 12.0, 0.7).unwrap();
        for flip in [Flip::Horizontal, Flip::Vertical] {
            let once = flip.apply_box(&b, 256.0, 256.0);
            let twice = flip.apply_box(&once, 256.0, 256.0);
            assert!((twice.cx - b.cx).abs() < 1e-12);
            assert!((twice.cy - b.cy).abs() < 1e-12);
            assert!((twice.theta - b.theta).abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_flip_negates_theta() {
        let b = RotatedBox::new(30.0, 70.0, 40.0, 12.0, 0.7).unwrap();
        let f = Flip::Horizontal.apply_box(&b, 256.0, 256.0);
        assert!((f.theta + 0.7).abs() < 1e-12);
        assert!((f.cx - 226.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let mut t = Tensor4::<f64>::from_fn([1, 2, 8, 8], {
            let mut i = 0usize;
            move || {
                i += 1;
                (i % 13) as f64
            }
        });
        normalize_per_channel(&mut t);
        for c in 0..2 {
            let plane = t.plane(0, c);
            let mean: f64 = plane.iter().sum::<f64>() / plane.len() as f64;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / plane.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
