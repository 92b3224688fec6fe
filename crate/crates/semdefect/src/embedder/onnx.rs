use std::path::PathBuf;

use tract_onnx::prelude::*;

use crate::dataset::Raster;
use crate::embedder::{compose_embedding, BackendDescriptor, BackendKind, EmbedBackend};
use crate::error::{Error, Result};

/// Configuration for serving a serialized ViT-style model file.
///
/// The model must map a `[1, 3, H, W]` float input to `[1, T, D]` tokens
/// with the class token first. Grayscale rasters are replicated to three
/// channels and normalized with the backbone's published constants before
/// inference; the class token and flattened patch tokens are concatenated
/// into the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct OnnxBackendSpec {
    pub model_path: PathBuf,
    /// (height, width) every incoming raster must match.
    pub input_size: (usize, usize),
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    /// When set, loading fails if the model's token output does not
    /// flatten to this many values.
    pub expected_dim: Option<usize>,
}

impl OnnxBackendSpec {
    pub fn new(model_path: impl Into<PathBuf>) -> Self {
        OnnxBackendSpec {
            model_path: model_path.into(),
            input_size: (224, 224),
            // ImageNet constants, the usual choice for ViT backbones.
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            expected_dim: None,
        }
    }
}

/// Embedding backend running a serialized model file.
pub struct OnnxBackend {
    descriptor: BackendDescriptor,
    spec: OnnxBackendSpec,
    token_count: usize,
    token_dim: usize,
    plan: Arc<TypedSimplePlan>,
}

impl std::fmt::Debug for OnnxBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackend")
            .field("descriptor", &self.descriptor)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl OnnxBackend {
    pub fn load(spec: OnnxBackendSpec) -> Result<Self> {
        if !spec.model_path.exists() {
            return Err(Error::Backend(format!(
                "model file not found: {}",
                spec.model_path.display()
            )));
        }
        let (h, w) = spec.input_size;
        let plan = (|| -> TractResult<Arc<TypedSimplePlan>> {
            tract_onnx::onnx()
                .model_for_path(&spec.model_path)?
                .with_input_fact(0, InferenceFact::dt_shape(f32::datum_type(), [1, 3, h, w]))?
                .into_optimized()?
                .into_runnable()
        })()
        .map_err(|e| {
            Error::Backend(format!(
                "failed to load model {}: {e:?}",
                spec.model_path.display()
            ))
        })?;

        let out_shape = plan
            .model()
            .output_fact(0)
            .ok()
            .and_then(|f| f.shape.as_concrete().map(|s| s.to_vec()))
            .ok_or_else(|| {
                Error::Backend(format!(
                    "model {} has no concrete output shape",
                    spec.model_path.display()
                ))
            })?;
        if out_shape.len() != 3 || out_shape[0] != 1 || out_shape[1] < 1 {
            return Err(Error::Backend(format!(
                "model output must be [1, tokens, dim], got {out_shape:?}"
            )));
        }
        let (token_count, token_dim) = (out_shape[1], out_shape[2]);
        let embedding_dim = token_count * token_dim;
        if let Some(expected) = spec.expected_dim {
            if expected != embedding_dim {
                return Err(Error::Backend(format!(
                    "model produces {token_count}x{token_dim} tokens ({embedding_dim} values), \
                     descriptor declares {expected}"
                )));
            }
        }
        let name = format!(
            "onnx:{}",
            spec.model_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.model_path.display().to_string())
        );
        Ok(OnnxBackend {
            descriptor: BackendDescriptor {
                name,
                embedding_dim,
                kind: BackendKind::ExternalModelFile,
            },
            spec,
            token_count,
            token_dim,
            plan,
        })
    }

    pub fn token_shape(&self) -> (usize, usize) {
        (self.token_count, self.token_dim)
    }
}

impl EmbedBackend for OnnxBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed(&self, image: &Raster) -> Result<Vec<f32>> {
        let (h, w) = self.spec.input_size;
        if image.height != h || image.width != w {
            return Err(Error::Geometry(format!(
                "backend {} expects {h}x{w} rasters, got {}x{}",
                self.descriptor.name, image.height, image.width
            )));
        }
        let mut buf = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let mean = self.spec.channel_mean[c];
            let std = self.spec.channel_std[c];
            buf.extend(image.data.iter().map(|&v| (v - mean) / std));
        }
        let input = Tensor::from_shape(&[1, 3, h, w], &buf)
            .map_err(|e| Error::Backend(format!("tensor build failed: {e:?}")))?;
        let outputs = self
            .plan
            .run(tvec!(input.into_tvalue()))
            .map_err(|e| Error::Backend(format!("inference failed: {e:?}")))?;
        let tokens = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Backend(format!("output is not f32: {e:?}")))?;
        let flat: Vec<f32> = tokens.iter().copied().collect();
        if flat.len() != self.descriptor.embedding_dim {
            return Err(Error::Backend(format!(
                "model returned {} values, expected {}",
                flat.len(),
                self.descriptor.embedding_dim
            )));
        }
        compose_embedding(&flat[..self.token_dim], &flat[self.token_dim..])
    }
}
