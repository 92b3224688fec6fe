use crate::dataset::{bilinear_resize, Raster};
use crate::error::{Error, Result};

/// Input side length required by the reference embedder.
pub const REF_INPUT: usize = 224;
/// Side of the downsampled intensity block.
pub const REF_GRID: usize = 16;
/// Embedding length: 16*16 block + mean + std + two gradient energies.
pub const REF_DIM: usize = REF_GRID * REF_GRID + 4;

/// Deterministic fixed-formula embedding, the test stand-in for a
/// pretrained backbone.
///
/// Concatenates: the image bilinearly downsampled to 16x16 and
/// standardized to zero mean / unit variance (all zeros when the variance
/// is zero), flattened row-major; the global intensity mean; the global
/// standard deviation (population); the mean squared horizontal forward
/// difference; and the mean squared vertical forward difference.
pub fn reference_embed(image: &Raster) -> Result<Vec<f32>> {
    if image.height != REF_INPUT || image.width != REF_INPUT {
        return Err(Error::Geometry(format!(
            "reference embedder expects {REF_INPUT}x{REF_INPUT}, got {}x{}",
            image.height, image.width
        )));
    }
    let mut out = Vec::with_capacity(REF_DIM);

    let block = bilinear_resize(image, REF_GRID, REF_GRID);
    let n_block = (REF_GRID * REF_GRID) as f64;
    let mean_b: f64 = block.data.iter().map(|&v| v as f64).sum::<f64>() / n_block;
    let var_b: f64 = block
        .data
        .iter()
        .map(|&v| (v as f64 - mean_b).powi(2))
        .sum::<f64>()
        / n_block;
    if var_b > 0.0 {
        let inv_std = 1.0 / var_b.sqrt();
        out.extend(block.data.iter().map(|&v| ((v as f64 - mean_b) * inv_std) as f32));
    } else {
        out.extend(std::iter::repeat(0.0f32).take(REF_GRID * REF_GRID));
    }

    let n = (image.height * image.width) as f64;
    let mean: f64 = image.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = image
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    out.push(mean as f32);
    out.push(var.sqrt() as f32);

    let mut h_energy = 0.0f64;
    for r in 0..image.height {
        for c in 0..image.width - 1 {
            let d = (image.get(r, c + 1) - image.get(r, c)) as f64;
            h_energy += d * d;
        }
    }
    h_energy /= (image.height * (image.width - 1)) as f64;

    let mut v_energy = 0.0f64;
    for r in 0..image.height - 1 {
        for c in 0..image.width {
            let d = (image.get(r + 1, c) - image.get(r, c)) as f64;
            v_energy += d * d;
        }
    }
    v_energy /= ((image.height - 1) * image.width) as f64;

    out.push(h_energy as f32);
    out.push(v_energy as f32);
    debug_assert_eq!(out.len(), REF_DIM);
    Ok(out)
}
