//! Basic pseudo-labeling: label the unlabeled pool with the trained head,
//! then train on labeled and pseudo-labeled data simultaneously.

use crate::embedder::EmbeddingStore;
use crate::error::{Error, Result};
use crate::trainer::{
    evaluate_head, predict, run_training, HeadParams, HeadSpec, TrainConfig, TrainProblem,
    TrainedHead,
};

/// Pseudo-labeling loop parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelConfig {
    /// Confidence threshold; only predictions with max softmax >= tau
    /// become pseudo-labels.
    pub tau: f64,
    /// Weight of the pseudo-label loss term.
    pub alpha: f64,
    pub rounds: usize,
    /// Ramp alpha linearly from zero over the first half of the steps
    /// instead of holding it fixed.
    pub alpha_ramp: bool,
    /// Continue from the previous round's head instead of retraining from
    /// a fresh seeded init.
    pub continue_head: bool,
    pub train: TrainConfig,
}

impl PseudoLabelConfig {
    pub fn new(train: TrainConfig) -> Self {
        PseudoLabelConfig {
            tau: 0.9,
            alpha: 1.0,
            rounds: 1,
            alpha_ramp: false,
            continue_head: false,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.rounds < 1 {
            return Err(Error::Config(format!("rounds must be >= 1, got {}", self.rounds)));
        }
        Ok(())
    }
}

/// Rows of the unlabeled store selected as pseudo-labeled, with the
/// assigned dense class indices and their confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub confidences: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Label every row whose max softmax probability reaches `tau`.
pub fn assign_pseudo_labels(
    head: &HeadParams,
    unlabeled: &EmbeddingStore,
    tau: f64,
) -> Result<PseudoLabelSet> {
    let preds = predict(head, unlabeled)?;
    let mut set = PseudoLabelSet {
        indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
    };
    for i in 0..unlabeled.count() {
        if preds.confidences[i] >= tau {
            set.indices.push(i);
            set.labels.push(preds.labels[i]);
            set.confidences.push(preds.confidences[i]);
        }
    }
    Ok(set)
}

/// Train on `CE(labeled) + alpha * CE(pseudo)` from a fresh seeded init
/// (or `initial` when given). Labeled targets are dense class indices.
pub fn train_with_pseudo(
    labeled: &EmbeddingStore,
    pseudo: &PseudoLabelSet,
    unlabeled: &EmbeddingStore,
    class_count: usize,
    spec: HeadSpec,
    config: &PseudoLabelConfig,
    initial: Option<HeadParams>,
) -> Result<TrainedHead> {
    config.validate()?;
    let targets = labeled
        .labels
        .clone()
        .ok_or_else(|| Error::Data("pseudo-label training requires a labeled store".into()))?;
    run_training(
        &TrainProblem {
            labeled,
            labeled_targets: &targets,
            pseudo: Some((unlabeled, &pseudo.indices, &pseudo.labels)),
            alpha: config.alpha,
            alpha_ramp: config.alpha_ramp,
            class_count,
            spec,
            val: None,
            initial,
        },
        &config.train,
    )
}

/// One round's report.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub test_accuracy: f64,
    pub pseudo_count: usize,
    /// Fraction of pseudo-labels matching ground truth, when the caller
    /// supplied the pool's true labels (evaluation only).
    pub pseudo_correctness: Option<f64>,
}

/// Full pseudo-label experiment output.
#[derive(Debug, Clone)]
pub struct PseudoLabelOutcome {
    pub head: HeadParams,
    /// Test accuracy of the supervised-only baseline head.
    pub baseline_accuracy: f64,
    pub rounds: Vec<RoundReport>,
}

/// Run the full loop: train on labeled data, then per round assign
/// pseudo-labels with the current head and retrain on labeled + pseudo.
///
/// All stores must be embedded by the same backend and carry dense class
/// indices as labels. `pool_truth`, when given, scores pseudo-label
/// correctness against the pool's held-back ground truth.
pub fn pseudo_label_rounds(
    labeled: &EmbeddingStore,
    unlabeled: &EmbeddingStore,
    test: &EmbeddingStore,
    class_count: usize,
    spec: HeadSpec,
    config: &PseudoLabelConfig,
    pool_truth: Option<&[u32]>,
) -> Result<PseudoLabelOutcome> {
    config.validate()?;
    if labeled.dim != unlabeled.dim || labeled.dim != test.dim {
        return Err(Error::Dimension {
            what: "pseudo-label stores".into(),
            expected: labeled.dim,
            got: unlabeled.dim,
        });
    }
    let test_targets = test
        .labels
        .clone()
        .ok_or_else(|| Error::Data("pseudo-label evaluation requires a labeled test store".into()))?;
    if let Some(truth) = pool_truth {
        if truth.len() != unlabeled.count() {
            return Err(Error::Dimension {
                what: "pool ground truth".into(),
                expected: unlabeled.count(),
                got: truth.len(),
            });
        }
    }

    let baseline = crate::trainer::train_head(labeled, class_count, spec, &config.train, None)?;
    let baseline_accuracy = evaluate_head(&baseline.head, test, &test_targets)?;

    let mut current = baseline.head;
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let pseudo = assign_pseudo_labels(&current, unlabeled, config.tau)?;
        let pseudo_correctness = pool_truth.map(|truth| {
            if pseudo.is_empty() {
                0.0
            } else {
                let correct = pseudo
                    .indices
                    .iter()
                    .zip(&pseudo.labels)
                    .filter(|(&i, &l)| truth[i] == l)
                    .count();
                correct as f64 / pseudo.len() as f64
            }
        });
        let initial = config.continue_head.then(|| current.clone());
        let trained = train_with_pseudo(
            labeled,
            &pseudo,
            unlabeled,
            class_count,
            spec,
            config,
            initial,
        )?;
        current = trained.head;
        let test_accuracy = evaluate_head(&current, test, &test_targets)?;
        rounds.push(RoundReport {
            round,
            test_accuracy,
            pseudo_count: pseudo.len(),
            pseudo_correctness,
        });
    }

    Ok(PseudoLabelOutcome {
        head: current,
        baseline_accuracy,
        rounds,
    })
}
