//! Image-to-vector embedding behind a pluggable backend contract, plus
//! bit-exact embedding persistence.

mod onnx;
mod reference;
mod store;

pub use onnx::{OnnxBackend, OnnxBackendSpec};
pub use reference::{reference_embed, REF_DIM, REF_GRID, REF_INPUT};
pub use store::{load_store, save_store, EmbeddingStore};

use std::path::Path;

use crate::dataset::{preprocess_image, CropSpec, ImageRecord, Raster};
use crate::error::{Error, Result};

/// Identity and output contract of an embedding backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub name: String,
    pub embedding_dim: usize,
    pub kind: BackendKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Reference,
    ExternalModelFile,
}

/// Turns one preprocessed raster into an embedding vector.
///
/// Implementations must be deterministic and return exactly
/// `descriptor().embedding_dim` values. `parallel_safe` declares whether
/// concurrent read-only inference is allowed.
pub trait EmbedBackend: Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn embed(&self, image: &Raster) -> Result<Vec<f32>>;
    fn parallel_safe(&self) -> bool {
        true
    }
}

/// Deterministic fixed-formula backend; see [`reference_embed`].
pub struct ReferenceBackend {
    descriptor: BackendDescriptor,
}

impl ReferenceBackend {
    pub fn new() -> Self {
        ReferenceBackend {
            descriptor: BackendDescriptor {
                name: "reference".into(),
                embedding_dim: REF_DIM,
                kind: BackendKind::Reference,
            },
        }
    }
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl EmbedBackend for ReferenceBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed(&self, image: &Raster) -> Result<Vec<f32>> {
        reference_embed(image)
    }
}

/// Concatenate a class token with row-major flattened patch tokens.
///
/// `patch_tokens` holds `N_p` rows of the class token's dimension; the
/// result has length `(1 + N_p) * D`.
pub fn compose_embedding(class_token: &[f32], patch_tokens: &[f32]) -> Result<Vec<f32>> {
    let d = class_token.len();
    if d == 0 {
        return Err(Error::Data("class token must be non-empty".into()));
    }
    if patch_tokens.len() % d != 0 {
        return Err(Error::Dimension {
            what: "patch token matrix".into(),
            expected: (patch_tokens.len() / d + 1) * d,
            got: patch_tokens.len(),
        });
    }
    let mut out = Vec::with_capacity(d + patch_tokens.len());
    out.extend_from_slice(class_token);
    out.extend_from_slice(patch_tokens);
    Ok(out)
}

/// Embed a batch of preprocessed rasters; row i is image i.
///
/// Fans out over `threads` workers when the backend permits; output order
/// is independent of the worker count. Errors carry the failing image
/// index.
pub fn embed_batch(
    images: &[Raster],
    backend: &dyn EmbedBackend,
    threads: usize,
) -> Result<EmbeddingStore> {
    let desc = backend.descriptor();
    let dim = desc.embedding_dim;
    if dim == 0 {
        return Err(Error::Backend(format!(
            "backend \"{}\" declares zero embedding dim",
            desc.name
        )));
    }
    let workers = if backend.parallel_safe() {
        threads.max(1).min(images.len().max(1))
    } else {
        1
    };

    let mut slots: Vec<Option<Result<Vec<f32>>>> = (0..images.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, image) in slots.iter_mut().zip(images) {
            *slot = Some(backend.embed(image));
        }
    } else {
        let chunk = images.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (img_chunk, slot_chunk) in images.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (slot, image) in slot_chunk.iter_mut().zip(img_chunk) {
                        *slot = Some(backend.embed(image));
                    }
                });
            }
        });
    }

    let mut data = Vec::with_capacity(images.len() * dim);
    for (i, slot) in slots.into_iter().enumerate() {
        let row = slot.expect("every slot filled").map_err(|e| {
            Error::Backend(format!("backend \"{}\" failed on image {i}: {e}", desc.name))
        })?;
        if row.len() != dim {
            return Err(Error::Backend(format!(
                "backend \"{}\" returned {} values for image {i}, descriptor declares {dim}",
                desc.name,
                row.len()
            )));
        }
        data.extend_from_slice(&row);
    }
    let mut store = EmbeddingStore::new(dim, data, None)?;
    store.backend_name = desc.name.clone();
    Ok(store)
}

/// Picks the crop window for one image: a fixed origin from the spec, or
/// the centered window when `centered` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSpec {
    /// Top-left (row, col); `None` means centered.
    pub origin: Option<(usize, usize)>,
    pub crop_size: (usize, usize),
    pub output_size: (usize, usize),
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            origin: None,
            crop_size: (340, 340),
            output_size: (224, 224),
        }
    }
}

impl PreprocessSpec {
    pub fn crop_for(&self, src: (usize, usize)) -> Result<CropSpec> {
        match self.origin {
            Some(origin) => CropSpec::new(origin, self.crop_size, self.output_size),
            None => CropSpec::centered(src, self.crop_size, self.output_size),
        }
    }
}

/// Load, preprocess and embed every record, in record order.
///
/// `base_dir` resolves relative manifest paths; `preprocess` maps each
/// record's layer to its crop geometry. Labels are carried over when every
/// record has one.
pub fn embed_records(
    records: &[ImageRecord],
    base_dir: &Path,
    preprocess: &dyn Fn(u32) -> PreprocessSpec,
    backend: &dyn EmbedBackend,
    threads: usize,
) -> Result<EmbeddingStore> {
    let mut rasters = Vec::with_capacity(records.len());
    for rec in records {
        let path = if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            base_dir.join(&rec.image_path)
        };
        let raster = Raster::load_png(&path)?;
        let spec = preprocess(rec.layer_id);
        let crop = spec.crop_for((raster.height, raster.width))?;
        rasters.push(preprocess_image(&raster, &crop)?);
    }
    let store = embed_batch(&rasters, backend, threads)?;
    if records.iter().all(|r| r.class_label.is_some()) && !records.is_empty() {
        let labels = records.iter().map(|r| r.class_label.unwrap()).collect();
        let mut labeled = store.with_labels(Some(labels))?;
        labeled.backend_name = backend.descriptor().name.clone();
        Ok(labeled)
    } else {
        Ok(store)
    }
}
