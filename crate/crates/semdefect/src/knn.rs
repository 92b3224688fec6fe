//! Gaussian-kernel weighted k-nearest-neighbor classification over
//! embedding vectors. Exact exhaustive search only; the tie rules make
//! every prediction deterministic.

use crate::embedder::EmbeddingStore;
use crate::error::{Error, Result};

/// Distance metric over embedding vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// 1 - cosine similarity; zero vectors are treated as orthogonal.
    CosineDistance,
}

/// Immutable labeled embedding collection supporting weighted queries.
///
/// Vectors are held in f64 regardless of source precision so all distance
/// arithmetic is 64-bit.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    vectors: Vec<f64>,
    dim: usize,
    labels: Vec<u32>,
    classes: Vec<u32>,
    metric: Metric,
}

impl KnnIndex {
    pub fn new(vectors: Vec<f64>, dim: usize, labels: Vec<u32>, metric: Metric) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Dimension {
                what: "knn index vectors".into(),
                expected: (vectors.len() / dim.max(1)) * dim.max(1),
                got: vectors.len(),
            });
        }
        let n = vectors.len() / dim;
        if n == 0 {
            return Err(Error::Data("knn index needs at least one vector".into()));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                what: "knn index labels".into(),
                expected: n,
                got: labels.len(),
            });
        }
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        Ok(KnnIndex {
            vectors,
            dim,
            labels,
            classes,
            metric,
        })
    }

    /// Build from a labeled embedding store (f32 rows widen exactly).
    pub fn from_store(store: &EmbeddingStore, metric: Metric) -> Result<Self> {
        let labels = store
            .labels
            .clone()
            .ok_or_else(|| Error::Data("knn index requires a labeled store".into()))?;
        let vectors = store.data.iter().map(|&v| v as f64).collect();
        KnnIndex::new(vectors, store.dim, labels, metric)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => {
                let mut acc = 0.0f64;
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    acc += d * d;
                }
                acc.sqrt()
            }
            Metric::CosineDistance => {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
                }
            }
        }
    }
}

/// Neighbor weighting parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub k: usize,
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median over training points of the distance to their k-th nearest
    /// other training point.
    MedianHeuristic,
}

impl KernelParams {
    pub fn new(k: usize, bandwidth: Bandwidth) -> Self {
        KernelParams { k, bandwidth }
    }

    fn validate(&self, index: &KnnIndex) -> Result<()> {
        if self.k < 1 || self.k > index.len() {
            return Err(Error::Config(format!(
                "k must be in [1, {}], got {}",
                index.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// Concrete bandwidth for this index.
    pub fn resolve_bandwidth(&self, index: &KnnIndex) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(h) => {
                if h <= 0.0 {
                    Err(Error::Config(format!("bandwidth must be positive, got {h}")))
                } else {
                    Ok(h)
                }
            }
            Bandwidth::MedianHeuristic => median_heuristic_bandwidth(index, self.k),
        }
    }
}

/// Gaussian kernel weight `exp(-d^2 / (2 h^2))`.
pub fn gaussian_weight(d: f64, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
    }
    if d < 0.0 {
        return Err(Error::Data(format!("distance must be nonnegative, got {d}")));
    }
    Ok((-d * d / (2.0 * h * h)).exp())
}

/// Per-class accumulated kernel weight for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class: u32,
    pub score: f64,
    /// Summed distance of the contributing neighbors; used for tie breaks.
    pub summed_distance: f64,
}

/// Classification result: predicted label plus unnormalized per-class scores.
#[derive(Debug, Clone)]
pub struct Classification {
    pub label: u32,
    pub scores: Vec<ClassScore>,
}

/// Classify one query against the index.
///
/// The k nearest training points vote with Gaussian weights; distance
/// ties break toward the lower training index, score ties toward the
/// smaller summed neighbor distance, then the lower class id.
pub fn classify(index: &KnnIndex, query: &[f64], params: &KernelParams) -> Result<Classification> {
    let h = params.resolve_bandwidth(index)?;
    classify_with_bandwidth(index, query, params.k, h, usize::MAX)
}

fn classify_with_bandwidth(
    index: &KnnIndex,
    query: &[f64],
    k: usize,
    h: f64,
    skip: usize,
) -> Result<Classification> {
    if query.len() != index.dim {
        return Err(Error::Dimension {
            what: "knn query".into(),
            expected: index.dim,
            got: query.len(),
        });
    }
    let available = index.len() - usize::from(skip < index.len());
    if k < 1 || k > available {
        return Err(Error::Config(format!(
            "k must be in [1, {available}], got {k}"
        )));
    }

    let mut order: Vec<(f64, usize)> = (0..index.len())
        .filter(|&i| i != skip)
        .map(|i| (index.distance(query, index.vector(i)), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut scores: Vec<ClassScore> = index
        .classes
        .iter()
        .map(|&class| ClassScore {
            class,
            score: 0.0,
            summed_distance: 0.0,
        })
        .collect();
    for &(d, i) in order.iter().take(k) {
        let w = gaussian_weight(d, h)?;
        let class = index.labels[i];
        let slot = index
            .classes
            .binary_search(&class)
            .expect("label in class set");
        scores[slot].score += w;
        scores[slot].summed_distance += d;
    }

    let mut best = 0usize;
    for s in 1..scores.len() {
        let cand = &scores[s];
        let cur = &scores[best];
        let better = cand.score > cur.score
            || (cand.score == cur.score
                && (cand.summed_distance < cur.summed_distance
                    || (cand.summed_distance == cur.summed_distance && cand.class < cur.class)));
        if better {
            best = s;
        }
    }
    Ok(Classification {
        label: scores[best].class,
        scores,
    })
}

/// Batch evaluation result.
#[derive(Debug, Clone)]
pub struct KnnEvaluation {
    pub accuracy: f64,
    pub predictions: Vec<u32>,
}

/// Classify every row of a labeled test store and report accuracy.
pub fn evaluate_knn(
    index: &KnnIndex,
    test: &EmbeddingStore,
    params: &KernelParams,
) -> Result<KnnEvaluation> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("evaluation requires a labeled test store".into()))?;
    if test.dim != index.dim {
        return Err(Error::Dimension {
            what: "test store".into(),
            expected: index.dim,
            got: test.dim,
        });
    }
    params.validate(index)?;
    let h = params.resolve_bandwidth(index)?;

    let mut predictions = Vec::with_capacity(test.count());
    let mut correct = 0usize;
    for i in 0..test.count() {
        let query: Vec<f64> = test.row(i).iter().map(|&v| v as f64).collect();
        let pred = classify_with_bandwidth(index, &query, params.k, h, usize::MAX)?;
        if pred.label == labels[i] {
            correct += 1;
        }
        predictions.push(pred.label);
    }
    let accuracy = if test.count() == 0 {
        0.0
    } else {
        correct as f64 / test.count() as f64
    };
    Ok(KnnEvaluation {
        accuracy,
        predictions,
    })
}

/// Leave-one-out accuracy over the index's own points.
pub fn leave_one_out_accuracy(index: &KnnIndex, params: &KernelParams) -> Result<f64> {
    if index.len() < 2 {
        return Err(Error::Data("leave-one-out needs at least two points".into()));
    }
    let h = params.resolve_bandwidth(index)?;
    let mut correct = 0usize;
    for i in 0..index.len() {
        let pred = classify_with_bandwidth(index, index.vector(i), params.k, h, i)?;
        if pred.label == index.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / index.len() as f64)
}

/// Median over training points of the distance to their k-th nearest
/// other point. Falls back to the smallest positive pairwise distance when
/// the median is zero; errors if all vectors coincide.
pub fn median_heuristic_bandwidth(index: &KnnIndex, k: usize) -> Result<f64> {
    let n = index.len();
    if n < 2 {
        return Err(Error::Data("median heuristic needs at least two points".into()));
    }
    if k < 1 || k > n - 1 {
        return Err(Error::Config(format!(
            "median heuristic k must be in [1, {}], got {k}",
            n - 1
        )));
    }
    let mut kth = Vec::with_capacity(n);
    let mut smallest_positive = f64::INFINITY;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| index.distance(index.vector(i), index.vector(j)))
            .collect();
        dists.sort_by(|a, b| a.total_cmp(b));
        for &d in &dists {
            if d > 0.0 && d < smallest_positive {
                smallest_positive = d;
            }
        }
        kth.push(dists[k - 1]);
    }
    kth.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        kth[n / 2]
    } else {
        0.5 * (kth[n / 2 - 1] + kth[n / 2])
    };
    if median > 0.0 {
        return Ok(median);
    }
    if smallest_positive.is_finite() {
        return Ok(smallest_positive);
    }
    Err(Error::Data(
        "all training vectors are identical; no usable bandwidth".into(),
    ))
}
