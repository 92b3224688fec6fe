use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::raster::{bilinear_resize, Raster};
use crate::dataset::split::derive_seed;
use crate::dataset::{save_manifest, ImageRecord, Split};
use crate::error::{Error, Result};

/// How strongly defect motifs stand out from the background texture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separation {
    Low,
    Medium,
    High,
}

impl Separation {
    /// Motif contrast against the background, in intensity units.
    /// Frozen after calibrating 1-NN leave-one-out accuracy of the
    /// reference embedder on the generated sets.
    fn contrast(self) -> f32 {
        match self {
            Separation::Low => 0.05,
            Separation::Medium => 0.16,
            Separation::High => 0.45,
        }
    }
}

/// Parameters of the synthetic defect-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// (height, width) of emitted images.
    pub image_size: (usize, usize),
    pub separation: Separation,
    pub wafers_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 11,
            images_per_class: 20,
            image_size: (340, 340),
            separation: Separation::High,
            wafers_per_class: 4,
            seed: 7,
        }
    }
}

/// Number of distinct procedural defect motifs.
pub const MOTIF_COUNT: usize = 12;

/// Files produced by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub records: Vec<ImageRecord>,
}

/// Generate a labeled synthetic SEM-style defect dataset.
///
/// Each class renders one fixed motif at a randomized pose over correlated
/// background noise. The coarse background texture is seeded per wafer so
/// images from one wafer share it; fine noise and motif pose are seeded per
/// image. Images land in `out_dir/images/`, the manifest (all records
/// `unassigned`, paths relative to `out_dir`) in `out_dir/manifest.jsonl`.
/// Fully deterministic given `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    validate_spec(spec)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut records = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for class_ix in 0..spec.num_classes {
        let class_id = (class_ix + 1) as u32;
        let wafer_fields: Vec<WaferField> = (0..spec.wafers_per_class)
            .map(|j| {
                let wafer_global = (class_ix * spec.wafers_per_class + j) as u64;
                WaferField::new(spec, derive_seed(spec.seed, "wafer", wafer_global))
            })
            .collect();

        for i in 0..spec.images_per_class {
            let wafer_local = i % spec.wafers_per_class;
            let global_index = (class_ix * spec.images_per_class + i) as u64;
            let image = render_image(
                spec,
                class_ix,
                &wafer_fields[wafer_local],
                derive_seed(spec.seed, "image", global_index),
            );
            let rel = PathBuf::from(format!("images/c{class_id:02}_i{i:03}.png"));
            image.save_png(&out_dir.join(&rel))?;
            records.push(ImageRecord {
                image_path: rel,
                layer_id: 1,
                class_label: Some(class_id),
                wafer_id: format!("c{class_id:02}w{wafer_local:02}"),
                split: Split::Unassigned,
            });
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&records, &manifest_path)?;
    Ok(SynthOutput {
        manifest_path,
        records,
    })
}

fn validate_spec(spec: &SynthSpec) -> Result<()> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "num_classes must be at least 2, got {}",
            spec.num_classes
        )));
    }
    if spec.num_classes > MOTIF_COUNT {
        return Err(Error::Config(format!(
            "num_classes {} exceeds the {} defined motifs",
            spec.num_classes, MOTIF_COUNT
        )));
    }
    if spec.images_per_class < 1 || spec.wafers_per_class < 1 {
        return Err(Error::Config(
            "images_per_class and wafers_per_class must be at least 1".into(),
        ));
    }
    if spec.image_size.0 < 16 || spec.image_size.1 < 16 {
        return Err(Error::Config("image_size must be at least 16x16".into()));
    }
    Ok(())
}

/// Per-wafer background: base brightness plus a coarse correlated field.
struct WaferField {
    base: f32,
    coarse: Raster,
}

impl WaferField {
    fn new(spec: &SynthSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 0.42 + 0.10 * rng.random::<f32>();
        let grid = 9usize;
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let control: Vec<f32> = (0..grid * grid)
            .map(|_| normal.sample(&mut rng) * 0.040)
            .collect();
        let control = Raster::new(grid, grid, control).unwrap();
        let coarse = bilinear_resize(&control, spec.image_size.0, spec.image_size.1);
        WaferField { base, coarse }
    }
}

fn render_image(spec: &SynthSpec, class_ix: usize, wafer: &WaferField, seed: u64) -> Raster {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Pose jitter keeps the motif near the center so center crops keep it.
    let cu = -0.05 + 0.10 * rng.random::<f32>();
    let cv = -0.05 + 0.10 * rng.random::<f32>();
    let scale = 0.90 + 0.20 * rng.random::<f32>();
    let theta = MOTIF_CANONICAL_ANGLE[class_ix] - 0.25 + 0.50 * rng.random::<f32>();
    let brightness = -0.01 + 0.02 * rng.random::<f32>();

    let contrast = spec.separation.contrast();
    let polarity = MOTIF_POLARITY[class_ix];
    let (sin_t, cos_t) = theta.sin_cos();
    let fine = Normal::new(0.0f32, 0.018).unwrap();

    let mut img = Raster::zeros(h, w);
    for r in 0..h {
        let v = (r as f32 + 0.5) / h as f32 - 0.5;
        for c in 0..w {
            let u = (c as f32 + 0.5) / w as f32 - 0.5;
            let du = u - cu;
            let dv = v - cv;
            let x = (du * cos_t + dv * sin_t) / scale;
            let y = (-du * sin_t + dv * cos_t) / scale;
            let mask = motif_mask(class_ix, x, y);
            let value = wafer.base
                + brightness
                + wafer.coarse.get(r, c)
                + fine.sample(&mut rng)
                + polarity * contrast * mask;
            img.set(r, c, value.clamp(0.0, 1.0));
        }
    }
    img
}

/// Whether a motif brightens (+1) or darkens (-1) the surface.
const MOTIF_POLARITY: [f32; MOTIF_COUNT] =
    [1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0];

/// Canonical orientation per motif; the pose adds a small jitter on top.
const MOTIF_CANONICAL_ANGLE: [f32; MOTIF_COUNT] = [
    0.0, 0.785, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.6, 0.0, 0.0,
];

fn smoothstep01(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft inside-test: `q < 1` is inside, `width` controls edge softness.
fn soft_in(q: f32, width: f32) -> f32 {
    smoothstep01(0.5 + (1.0 - q) / width)
}

/// Mask value of motif `m` at pose-normalized coordinates.
///
/// Motifs: blob, scratch, ring, bridge, void, particle cluster, cross,
/// half-disc pit, double dot, hatch, arc, dark band.
fn motif_mask(m: usize, x: f32, y: f32) -> f32 {
    let r = (x * x + y * y).sqrt();
    match m {
        // blob: filled ellipse
        0 => soft_in(((x / 0.17).powi(2) + (y / 0.12).powi(2)).sqrt(), 0.15),
        // scratch: long diagonal bar
        1 => soft_in((x / 0.40).abs().max((y / 0.045).abs()), 0.20),
        // ring
        2 => soft_in((r - 0.20).abs() / 0.065, 0.25),
        // bridge: short horizontal bar
        3 => soft_in((x / 0.24).abs().max((y / 0.075).abs()), 0.20),
        // void: dark disc
        4 => soft_in(r / 0.16, 0.15),
        // particle cluster: five dots
        5 => {
            const OFFSETS: [(f32, f32); 5] = [
                (0.0, 0.0),
                (0.17, 0.06),
                (-0.16, 0.10),
                (0.06, -0.17),
                (-0.09, -0.14),
            ];
            let mut best: f32 = 0.0;
            for (ox, oy) in OFFSETS {
                let d = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
                best = best.max(soft_in(d / 0.065, 0.25));
            }
            best
        }
        // cross
        6 => {
            let horiz = (x / 0.30).abs().max((y / 0.07).abs());
            let vert = (x / 0.07).abs().max((y / 0.30).abs());
            soft_in(horiz.min(vert), 0.20)
        }
        // wedge pit: dark right triangle
        7 => soft_in(
            (x / 0.24)
                .abs()
                .max((y / 0.24).abs())
                .max(1.0 + (x + y) / 0.10),
            0.15,
        ),
        // double dot, stacked vertically
        8 => {
            let d1 = (x * x + (y - 0.15).powi(2)).sqrt();
            let d2 = (x * x + (y + 0.15).powi(2)).sqrt();
            soft_in(d1 / 0.095, 0.20).max(soft_in(d2 / 0.095, 0.20))
        }
        // hatch: fat parallel stripes inside a disc
        9 => {
            let s = (x * 3.0).rem_euclid(1.0);
            let stripe = s.min(1.0 - s) / 0.30;
            soft_in(stripe.max(r / 0.32), 0.25)
        }
        // arc: half ring
        10 => soft_in(((r - 0.21).abs() / 0.06).max(1.0 - x / 0.08), 0.25),
        // dark band across the image
        11 => (-(x / 0.13) * (x / 0.13)).exp(),
        _ => 0.0,
    }
}
