//! Synthetic scene generator: rotated high-contrast "ship" rectangles
//! on a textured sea background, with a dense-dock mode packing
//! parallel near-touching hulls and a cluttered mode adding unannotated
//! distractors. Fully reproducible from a seed.

use crate::dataset::{save_jsonl, AnnotationRecord, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// 1–4 well-separated ships.
    Sparse,
    /// Parallel ships docked side by side with 2–6 px gaps.
    DenseDock,
    /// Sparse ships plus unannotated distractor shapes.
    Cluttered,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(SynthMode::Sparse),
            "dense-dock" => Ok(SynthMode::DenseDock),
            "cluttered" => Ok(SynthMode::Cluttered),
            other => Err(Error::InvalidArgument(format!(
                "unknown synth mode '{other}' (sparse|dense-dock|cluttered)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub image_size: u32,
    pub mode: SynthMode,
    pub ships_min: usize,
    pub ships_max: usize,
    pub ship_w: (f64, f64),
    pub aspect: (f64, f64),
    /// Maximum pairwise rotated IoU between annotations outside
    /// dense-dock mode.
    pub max_overlap: f64,
    pub dock_gap: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            image_size: 256,
            mode: SynthMode::Sparse,
            ships_min: 1,
            ships_max: 4,
            ship_w: (38.0, 88.0),
            aspect: (3.0, 5.5),
            max_overlap: 0.1,
            dock_gap: (2.0, 6.0),
        }
    }
}

/// One generated scene: pixel buffer plus its annotations.
pub struct Scene {
    pub rgb: image::RgbImage,
    pub boxes: Vec<RotatedBox>,
}

/// Generates `count` images plus `annotations.jsonl` under `dir`
/// (images in `images/`). Byte-identical across runs with equal seeds.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, params: &SynthParams) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("image count must be positive".into()));
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images)
        .map_err(|e| Error::Dataset(format!("cannot create {}: {e}", images.display())))?;
    let mut records = Vec::with_capacity(count);
    for idx in 0..count {
        let scene = generate_scene(seed, idx as u64, params);
        let name = format!("images/img_{idx:05}.png");
        scene
            .rgb
            .save(dir.join(&name))
            .map_err(|e| Error::Dataset(format!("png write failed: {e}")))?;
        records.push(AnnotationRecord {
            image: name,
            objects: scene.boxes.iter().map(ObjectAnnotation::from_box).collect(),
        });
    }
    save_jsonl(&dir.join("annotations.jsonl"), &records)?;
    Ok(())
}

/// Deterministic scene for `(seed, index)`.
pub fn generate_scene(seed: u64, index: u64, params: &SynthParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let size = params.image_size;
    let mut canvas = sea_background(size, &mut rng);

    let boxes = match params.mode {
        SynthMode::Sparse => place_sparse(&mut rng, params),
        SynthMode::DenseDock => place_dense_dock(&mut canvas, &mut rng, params),
        SynthMode::Cluttered => {
            draw_distractors(&mut canvas, &mut rng, params);
            place_sparse(&mut rng, params)
        }
    };
    for b in &boxes {
        draw_ship(&mut canvas, b, &mut rng);
    }
    Scene {
        rgb: canvas,
        boxes,
    }
}

fn sea_background(size: u32, rng: &mut ChaCha8Rng) -> image::RgbImage {
    let base = [
        rng.gen_range(18.0..42.0),
        rng.gen_range(46.0..84.0),
        rng.gen_range(78.0..126.0),
    ];
    // two wave components + pixel noise
    let (fx1, fy1) = (rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08));
    let (fx2, fy2) = (rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2));
    let phase1 = rng.gen_range(0.0..PI * 2.0);
    let phase2 = rng.gen_range(0.0..PI * 2.0);
    let amp1 = rng.gen_range(3.0..9.0);
    let amp2 = rng.gen_range(1.0..4.0);
    let mut img = image::RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let wave = amp1 * ((x as f64 * fx1 + y as f64 * fy1 + phase1).sin())
                + amp2 * ((x as f64 * fx2 - y as f64 * fy2 + phase2).sin());
            let noise = rng.gen_range(-3.0..3.0);
            let px = img.get_pixel_mut(x, y);
            for c in 0..3 {
                px.0[c] = (base[c] + wave + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn sample_ship_shape(rng: &mut ChaCha8Rng, params: &SynthParams) -> (f64, f64) {
    let w = rng.gen_range(params.ship_w.0..params.ship_w.1);
    let aspect = rng.gen_range(params.aspect.0..params.aspect.1);
    (w, w / aspect)
}

fn fits_inside(b: &RotatedBox, size: f64) -> bool {
    let (x0, y0, x1, y1) = b.aabb();
    x0 >= 2.0 && y0 >= 2.0 && x1 <= size - 2.0 && y1 <= size - 2.0
}

fn place_sparse(rng: &mut ChaCha8Rng, params: &SynthParams) -> Vec<RotatedBox> {
    let size = params.image_size as f64;
    let n = rng.gen_range(params.ships_min..=params.ships_max);
    let mut boxes: Vec<RotatedBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n && attempts < 300 {
        attempts += 1;
        let (w, h) = sample_ship_shape(rng, params);
        let theta = rng.gen_range(-PI / 2.0..PI / 2.0);
        let margin = (w * w + h * h).sqrt() / 2.0 + 3.0;
        if 2.0 * margin >= size {
            continue;
        }
        let cx = rng.gen_range(margin..size - margin);
        let cy = rng.gen_range(margin..size - margin);
        let cand = RotatedBox::new(cx, cy, w, h, theta).unwrap();
        if fits_inside(&cand, size)
            && boxes
                .iter()
                .all(|b| rotated_iou(b, &cand) < params.max_overlap)
        {
            boxes.push(cand);
        }
    }
    boxes
}

/// Parallel ships beside a dock strip, gap 2–6 px edge to edge.
fn place_dense_dock(
    canvas: &mut image::RgbImage,
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
) -> Vec<RotatedBox> {
    let size = params.image_size as f64;
    let n = rng.gen_range(2..=params.ships_max.max(2));
    let theta = rng.gen_range(-PI / 2.0..PI / 2.0);
    let (w, h) = sample_ship_shape(rng, params);
    // row of ships along the normal of their shared axis
    let (sin_t, cos_t) = theta.sin_cos();
    let normal = (-sin_t, cos_t);
    let run = n as f64 * (h + params.dock_gap.1);
    let margin = (w + run) / 2.0 + 8.0;
    let cx0 = rng.gen_range(margin.min(size / 2.0)..(size - margin).max(size / 2.0 + 1.0));
    let cy0 = rng.gen_range(margin.min(size / 2.0)..(size - margin).max(size / 2.0 + 1.0));

    // dock: a darker strip along the row on one side
    let dock_offset = -(h + rng.gen_range(6.0..12.0));
    let dock = RotatedBox::new(
        cx0 + normal.0 * dock_offset,
        cy0 + normal.1 * dock_offset,
        w * 1.4,
        h.max(10.0),
        theta,
    )
    .unwrap();
    let shade = rng.gen_range(60.0..90.0) as u8;
    fill_box(canvas, &dock, [shade, shade, shade], 1.0);

    let mut boxes = Vec::new();
    let mut offset = 0.0;
    for i in 0..n {
        let gap = rng.gen_range(params.dock_gap.0..params.dock_gap.1);
        if i > 0 {
            offset += h + gap;
        }
        let cand = RotatedBox::new(
            cx0 + normal.0 * offset,
            cy0 + normal.1 * offset,
            w * rng.gen_range(0.92..1.08),
            h,
            theta,
        )
        .unwrap();
        if fits_inside(&cand, size) {
            boxes.push(cand);
        }
    }
    boxes
}

fn draw_distractors(canvas: &mut image::RgbImage, rng: &mut ChaCha8Rng, params: &SynthParams) {
    let size = params.image_size as f64;
    // buoys: small bright circles
    for _ in 0..rng.gen_range(2..6) {
        let r = rng.gen_range(2.0..5.0);
        let cx = rng.gen_range(r..size - r);
        let cy = rng.gen_range(r..size - r);
        let bright = rng.gen_range(170.0..240.0) as u8;
        fill_circle(canvas, cx, cy, r, [bright, bright, bright]);
    }
    // square buildings near a corner
    for _ in 0..rng.gen_range(1..4) {
        let side = rng.gen_range(8.0..18.0);
        let b = RotatedBox::new(
            rng.gen_range(side..size - side),
            rng.gen_range(side..size - side),
            side * rng.gen_range(1.0..1.3),
            side,
            rng.gen_range(-PI / 2.0..PI / 2.0),
        )
        .unwrap();
        let g = rng.gen_range(90.0..150.0) as u8;
        fill_box(canvas, &b, [g, g, g], 1.0);
    }
}

fn draw_ship(canvas: &mut image::RgbImage, b: &RotatedBox, rng: &mut ChaCha8Rng) {
    // hull: bright or dark against the sea
    let hull: [u8; 3] = if rng.gen_bool(0.75) {
        let v = rng.gen_range(185.0..245.0);
        [v as u8, v as u8, (v * 0.97) as u8]
    } else {
        let v = rng.gen_range(8.0..40.0);
        [v as u8, v as u8, v as u8]
    };
    fill_box(canvas, b, hull, 1.0);
    // superstructure: a contrasting block amidships giving an
    // orientation cue along the long axis
    let deck = RotatedBox::new(b.cx, b.cy, b.w * 0.45, (b.h * 0.5).max(1.5), b.theta).unwrap();
    let deck_color = if hull[0] > 128 {
        [90u8, 90, 100]
    } else {
        [200u8, 200, 210]
    };
    fill_box(canvas, &deck, deck_color, 1.0);
    // bow marker near one end
    let (sin_t, cos_t) = b.theta.sin_cos();
    let bow = RotatedBox::new(
        b.cx + cos_t * b.w * 0.38,
        b.cy + sin_t * b.w * 0.38,
        (b.w * 0.12).max(2.0),
        (b.h * 0.6).max(1.5),
        b.theta,
    )
    .unwrap();
    fill_box(canvas, &bow, deck_color, 0.8);
}

/// Rasterizes a rotated box with 2×2 supersampled coverage blending.
fn fill_box(canvas: &mut image::RgbImage, b: &RotatedBox, color: [u8; 3], opacity: f64) {
    let (x0, y0, x1, y1) = b.aabb();
    let size = canvas.width() as i64;
    let (x0, y0) = ((x0.floor() as i64).max(0), (y0.floor() as i64).max(0));
    let (x1, y1) = (
        (x1.ceil() as i64).min(size - 1),
        (y1.ceil() as i64).min(canvas.height() as i64 - 1),
    );
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut cover = 0.0;
            for dy in SUB {
                for dx in SUB {
                    if b.contains(x as f64 + dx, y as f64 + dy) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                let alpha = cover * opacity;
                let px = canvas.get_pixel_mut(x as u32, y as u32);
                for c in 0..3 {
                    px.0[c] =
                        ((1.0 - alpha) * px.0[c] as f64 + alpha * color[c] as f64).round() as u8;
                }
            }
        }
    }
}

fn fill_circle(canvas: &mut image::RgbImage, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
    let size = canvas.width() as i64;
    let (x0, y0) = (((cx - r).floor() as i64).max(0), ((cy - r).floor() as i64).max(0));
    let (x1, y1) = (
        ((cx + r).ceil() as i64).min(size - 1),
        ((cy + r).ceil() as i64).min(canvas.height() as i64 - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            if d <= r {
                canvas.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}
