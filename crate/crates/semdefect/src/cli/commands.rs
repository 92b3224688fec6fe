use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cli::config::RunConfig;
use crate::dataset::{
    derive_seed, generate_synthetic, load_manifest, sample_few_shot, save_manifest,
    wafer_aware_split, ClassSet, ImageRecord, Manifest, Split,
};
use crate::embedder::{
    embed_records, load_store, save_store, EmbedBackend, EmbeddingStore, OnnxBackend,
    OnnxBackendSpec, ReferenceBackend,
};
use crate::error::{Error, Result};
use crate::knn::{evaluate_knn, KnnIndex};
use crate::metrics::{
    confusion, emit_run_report, file_digest, load_run_report, precision_recall_f1,
    shots_curve, write_layout_svg, CurvePoint, RunReport,
};
use crate::pseudolabel::{pseudo_label_rounds, PseudoLabelConfig};
use crate::trainer::{
    evaluate_head, load_head, penultimate, save_head, train_head, HeadParams, TrainedHead,
};
use crate::tsne::{export_layout_csv, layout_label_agreement, run_tsne};

/// One invocation's environment: run directory, resolved config, restart
/// semantics.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub force: bool,
    pub resume: bool,
}

impl Ctx {
    pub fn new(run_dir: impl Into<PathBuf>, config: RunConfig) -> Self {
        Ctx {
            run_dir: run_dir.into(),
            config,
            force: false,
            resume: false,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    /// Create the run directory and pin the config echo. A differing
    /// existing echo is an error unless `--force` rewrites it.
    fn ensure_run_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let echo_path = self.path("config.toml");
        let echo = self.config.to_toml()?;
        if echo_path.exists() && !self.force {
            let existing =
                std::fs::read_to_string(&echo_path).map_err(|e| Error::io(&echo_path, e))?;
            if existing != echo {
                return Err(Error::Config(format!(
                    "resolved config differs from the run's config echo at {}; \
                     pass --force to replace it",
                    echo_path.display()
                )));
            }
        } else {
            std::fs::write(&echo_path, &echo).map_err(|e| Error::io(&echo_path, e))?;
        }
        Ok(())
    }

    /// Restart policy for a stage's output files. Returns false when the
    /// stage should be skipped (`--resume` with complete outputs).
    fn guard_outputs(&self, outputs: &[PathBuf]) -> Result<bool> {
        let existing: Vec<&PathBuf> = outputs.iter().filter(|p| p.exists()).collect();
        if self.force || existing.is_empty() {
            return Ok(true);
        }
        if self.resume {
            if existing.len() == outputs.len() {
                return Ok(false);
            }
            return Err(Error::Data(format!(
                "partial outputs present ({} of {}); refusing to mix; use --force to redo",
                existing.len(),
                outputs.len()
            )));
        }
        Err(Error::Data(format!(
            "output {} already exists; pass --resume to reuse or --force to overwrite",
            existing[0].display()
        )))
    }

    fn load_report(&self) -> Result<RunReport> {
        let path = self.path("report.json");
        if path.exists() {
            load_run_report(&path)
        } else {
            let config = serde_json::to_value(&self.config)
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(RunReport::new(self.config.seed, config))
        }
    }

    fn record_step(
        &self,
        command: &str,
        details: serde_json::Value,
        files: &[&str],
    ) -> Result<()> {
        let mut report = self.load_report()?;
        report.push_step(command, details);
        for name in files {
            report
                .digests
                .insert((*name).to_string(), file_digest(&self.path(name))?);
        }
        emit_run_report(&report, &self.path("report.json"))
    }

    fn manifest(&self) -> Result<Manifest> {
        let path = self.path("manifest.jsonl");
        if !path.exists() {
            return Err(Error::Data(format!(
                "missing manifest {}; run `semdefect synth` or `semdefect ingest` first",
                path.display()
            )));
        }
        load_manifest(&path)
    }

    fn store(&self, name: &str, producer: &str) -> Result<EmbeddingStore> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Data(format!(
                "missing upstream artifact {}; run `semdefect {producer}` first",
                path.display()
            )));
        }
        load_store(&path)
    }
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Manifest records carrying a label and this split, in manifest order —
/// the row order of the corresponding embedding store.
fn subset_records(manifest: &Manifest, split: Split) -> Vec<ImageRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == split && r.class_label.is_some())
        .cloned()
        .collect()
}

fn dense_targets(records: &[ImageRecord], class_set: &ClassSet) -> Result<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            let label = r.class_label.ok_or_else(|| {
                Error::Data(format!("record {} has no label", r.image_path.display()))
            })?;
            class_set
                .index_of(label)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Data(format!("label {label} outside the class set")))
        })
        .collect()
}

fn build_backend(ctx: &Ctx) -> Result<Box<dyn EmbedBackend>> {
    match ctx.config.embed.backend.as_str() {
        "reference" => Ok(Box::new(ReferenceBackend::new())),
        "onnx" => {
            let section = &ctx.config.embed;
            if section.model_file.is_empty() {
                return Err(Error::Config(
                    "embed.backend = \"onnx\" requires embed.model_file".into(),
                ));
            }
            let output = ctx.config.preprocess.for_layer(0).output_size;
            let backend = OnnxBackend::load(OnnxBackendSpec {
                model_path: PathBuf::from(&section.model_file),
                input_size: output,
                channel_mean: section.channel_mean,
                channel_std: section.channel_std,
                expected_dim: (section.expected_dim > 0).then_some(section.expected_dim),
            })?;
            Ok(Box::new(backend))
        }
        other => Err(Error::Config(format!("unknown backend \"{other}\""))),
    }
}

pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let manifest_path = ctx.path("manifest.jsonl");
    if !ctx.guard_outputs(&[manifest_path.clone()])? {
        println!("synth: reusing {}", manifest_path.display());
        return Ok(());
    }
    let spec = ctx.config.synth.to_spec(ctx.config.seed);
    let out = generate_synthetic(&spec, &ctx.run_dir)?;
    let classes = ClassSet::from_records(&out.records);
    println!(
        "synth: {} images, {} classes -> {}",
        out.records.len(),
        classes.len(),
        manifest_path.display()
    );
    ctx.record_step(
        "synth",
        json!({
            "images": out.records.len(),
            "classes": classes.len(),
            "separation": format!("{:?}", spec.separation).to_lowercase(),
            "manifest": "manifest.jsonl",
        }),
        &["manifest.jsonl"],
    )
}

pub fn cmd_ingest(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let source = PathBuf::from(&ctx.config.ingest.manifest);
    if ctx.config.ingest.manifest.is_empty() {
        return Err(Error::Config(
            "ingest requires a manifest (ingest.manifest or --manifest)".into(),
        ));
    }
    let manifest_path = ctx.path("manifest.jsonl");
    if !ctx.guard_outputs(&[manifest_path.clone()])? {
        println!("ingest: reusing {}", manifest_path.display());
        return Ok(());
    }
    let manifest = load_manifest(&source)?;
    // anchor relative image paths to the source manifest's directory
    let base = source.parent().unwrap_or(Path::new("."));
    let records: Vec<ImageRecord> = manifest
        .records
        .iter()
        .map(|r| {
            let mut rec = r.clone();
            if !rec.image_path.is_absolute() {
                rec.image_path = base.join(&rec.image_path);
            }
            rec
        })
        .collect();
    save_manifest(&records, &manifest_path)?;
    let mut split_counts = BTreeMap::new();
    for r in &records {
        *split_counts.entry(r.split.to_string()).or_insert(0u64) += 1;
    }
    println!(
        "ingest: {} records, {} classes, layers {:?}",
        records.len(),
        manifest.class_set.len(),
        manifest.layers
    );
    ctx.record_step(
        "ingest",
        json!({
            "source": ctx.config.ingest.manifest,
            "records": records.len(),
            "classes": manifest.class_set.ids(),
            "layers": manifest.layers,
            "split_counts": split_counts,
        }),
        &["manifest.jsonl"],
    )
}

pub fn cmd_split(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let manifest = ctx.manifest()?;
    let assigned = manifest
        .records
        .iter()
        .any(|r| r.split != Split::Unassigned);
    if assigned {
        if ctx.resume {
            println!("split: manifest already split, reusing");
            return Ok(());
        }
        if !ctx.force {
            return Err(Error::Data(
                "manifest already carries split assignments; pass --resume to keep or --force to re-split"
                    .into(),
            ));
        }
    }
    let [train, val, test] = ctx.config.split.ratios;
    let outcome = wafer_aware_split(
        manifest.records,
        (train, val, test),
        derive_seed(ctx.config.seed, "split", 0),
    )?;
    print_warnings(&outcome.warnings);
    save_manifest(&outcome.records, &ctx.path("manifest.jsonl"))?;
    println!(
        "split: train {} / val {} / test {}",
        outcome.counts[0], outcome.counts[1], outcome.counts[2]
    );
    ctx.record_step(
        "split",
        json!({
            "ratios": ctx.config.split.ratios,
            "counts": outcome.counts,
            "warnings": outcome.warnings,
        }),
        &["manifest.jsonl"],
    )
}

const STORE_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.embs"),
    (Split::Val, "val.embs"),
    (Split::Test, "test.embs"),
];

pub fn cmd_embed(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let manifest = ctx.manifest()?;

    let mut jobs: Vec<(&str, Vec<ImageRecord>)> = Vec::new();
    for (split, name) in STORE_FILES {
        let records = subset_records(&manifest, split);
        if !records.is_empty() {
            jobs.push((name, records));
        }
    }
    let unlabeled: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| r.class_label.is_none())
        .cloned()
        .collect();
    if !unlabeled.is_empty() {
        jobs.push(("unlabeled.embs", unlabeled));
    }
    if jobs.is_empty() {
        return Err(Error::Data(
            "manifest has no embeddable records; run `semdefect split` first".into(),
        ));
    }

    let outputs: Vec<PathBuf> = jobs.iter().map(|(name, _)| ctx.path(name)).collect();
    if !ctx.guard_outputs(&outputs)? {
        println!("embed: reusing {} stores", jobs.len());
        return Ok(());
    }

    let backend = build_backend(ctx)?;
    let preprocess = &ctx.config.preprocess;
    let threads = ctx.config.threads.max(1);
    let mut details = BTreeMap::new();
    let mut files = Vec::new();
    for (name, records) in &jobs {
        let store = embed_records(
            records,
            &ctx.run_dir,
            &|layer| preprocess.for_layer(layer),
            backend.as_ref(),
            threads,
        )?;
        save_store(&store, &ctx.path(name))?;
        println!(
            "embed: {name} <- {} rows x {} dims ({})",
            store.count(),
            store.dim,
            backend.descriptor().name
        );
        details.insert(
            name.to_string(),
            json!({"rows": store.count(), "dim": store.dim, "labeled": store.labels.is_some()}),
        );
        files.push(*name);
    }
    ctx.record_step(
        "embed",
        json!({
            "backend": backend.descriptor().name,
            "dim": backend.descriptor().embedding_dim,
            "stores": details,
        }),
        &files,
    )
}

/// Optionally L2-normalize a store's rows (unit vectors).
fn maybe_normalize(store: EmbeddingStore, enable: bool) -> EmbeddingStore {
    if !enable {
        return store;
    }
    let mut data = store.data.clone();
    for row in data.chunks_mut(store.dim) {
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
    EmbeddingStore {
        dim: store.dim,
        data,
        labels: store.labels.clone(),
        backend_name: store.backend_name,
    }
}

/// Select the few-shot index subset of the train store, when configured.
fn few_shot_rows(
    train_records: &[ImageRecord],
    shots: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<String>)> {
    if shots == 0 {
        return Ok(((0..train_records.len()).collect(), Vec::new(), Vec::new()));
    }
    let sample = sample_few_shot(train_records, shots, seed)?;
    Ok((sample.labeled, sample.pool, sample.warnings))
}

pub fn cmd_knn(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let manifest = ctx.manifest()?;
    let section = &ctx.config.knn;
    let train = maybe_normalize(ctx.store("train.embs", "embed")?, section.l2_normalize);
    let test = maybe_normalize(ctx.store("test.embs", "embed")?, section.l2_normalize);

    let train_records = subset_records(&manifest, Split::Train);
    let (rows, _, warnings) = few_shot_rows(
        &train_records,
        section.shots,
        derive_seed(ctx.config.seed, "knn-shots", section.shots as u64),
    )?;
    print_warnings(&warnings);
    let index_store = train.select_rows(&rows);
    let index = KnnIndex::from_store(&index_store, section.metric()?)?;

    let mut ks: Vec<usize> = std::iter::once(section.k)
        .chain(section.sweep_k.iter().copied())
        .map(|k| k.min(index.len()))
        .collect();
    ks.sort_unstable();
    ks.dedup();

    let mut accuracies = BTreeMap::new();
    let mut primary_eval = None;
    for &k in &ks {
        let params = section.kernel_params(k)?;
        let eval = evaluate_knn(&index, &test, &params)?;
        println!("knn: k={k} accuracy {:.4}", eval.accuracy);
        accuracies.insert(k.to_string(), eval.accuracy);
        if k == section.k.min(index.len()) {
            primary_eval = Some(eval);
        }
    }
    let eval = primary_eval.expect("primary k evaluated");

    let class_set = &manifest.class_set;
    let truth = dense_targets(&subset_records(&manifest, Split::Test), class_set)?;
    let preds: Vec<u32> = eval
        .predictions
        .iter()
        .map(|&raw| class_set.index_of(raw).map(|i| i as u32).unwrap_or(u32::MAX))
        .collect();
    let cm = confusion(&truth, &preds, class_set.len())?;
    let report = precision_recall_f1(&cm)?;
    let per_class: Vec<serde_json::Value> = report
        .per_class
        .iter()
        .map(|m| {
            json!({
                "class": class_set.id_at(m.class_index),
                "precision": round4(m.precision),
                "recall": round4(m.recall),
                "f1": round4(m.f1),
                "support": m.support,
            })
        })
        .collect();

    ctx.record_step(
        "knn",
        json!({
            "index_rows": index.len(),
            "shots": section.shots,
            "metric": section.metric,
            "l2_normalize": section.l2_normalize,
            "accuracy_by_k": accuracies,
            "accuracy": eval.accuracy,
            "macro_f1": round4(report.macro_f1),
            "per_class": per_class,
        }),
        &[],
    )
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Train and evaluate the classification head; returns the trained head
/// alongside its test accuracy.
pub fn cmd_train(ctx: &Ctx) -> Result<(HeadParams, f64)> {
    ctx.ensure_run_dir()?;
    let head_path = ctx.path("head.ckpt");
    let manifest = ctx.manifest()?;
    let class_set = &manifest.class_set;
    let section = &ctx.config.train;

    if !ctx.guard_outputs(&[head_path.clone()])? {
        println!("train: reusing {}", head_path.display());
        let head = load_head(&head_path)?;
        let test = ctx.store("test.embs", "embed")?;
        let truth = dense_targets(&subset_records(&manifest, Split::Test), class_set)?;
        let accuracy = evaluate_head(&head, &test, &truth)?;
        return Ok((head, accuracy));
    }

    let train = ctx.store("train.embs", "embed")?;
    let test = ctx.store("test.embs", "embed")?;
    let train_records = subset_records(&manifest, Split::Train);
    let (rows, _, warnings) = few_shot_rows(
        &train_records,
        section.shots,
        derive_seed(ctx.config.seed, "train-shots", section.shots as u64),
    )?;
    print_warnings(&warnings);

    let selected: Vec<ImageRecord> = rows.iter().map(|&i| train_records[i].clone()).collect();
    let targets = dense_targets(&selected, class_set)?;
    let labeled = train.select_rows(&rows).with_labels(Some(targets))?;

    let val_pair = if ctx.path("val.embs").exists() {
        let val = ctx.store("val.embs", "embed")?;
        let truth = dense_targets(&subset_records(&manifest, Split::Val), class_set)?;
        Some((val, truth))
    } else {
        None
    };

    let config = section.train_config(derive_seed(ctx.config.seed, "train", 0))?;
    let trained: TrainedHead = train_head(
        &labeled,
        class_set.len(),
        section.head_spec()?,
        &config,
        val_pair.as_ref().map(|(s, t)| (s, t.as_slice())),
    )?;
    print_warnings(&trained.warnings);
    save_head(&trained.head, &head_path)?;

    let truth = dense_targets(&subset_records(&manifest, Split::Test), class_set)?;
    let accuracy = evaluate_head(&trained.head, &test, &truth)?;
    let final_loss = trained.history.last().map(|h| h.loss);
    println!(
        "train: {} shots/class ({} rows), test accuracy {:.4}",
        if section.shots == 0 { "all".to_string() } else { section.shots.to_string() },
        labeled.count(),
        accuracy
    );

    ctx.record_step(
        "train",
        json!({
            "head": section.head,
            "shots": section.shots,
            "rows": labeled.count(),
            "epochs": config.epochs,
            "final_loss": final_loss,
            "best_epoch": trained.best_epoch,
            "test_accuracy": accuracy,
            "warnings": trained.warnings,
        }),
        &["head.ckpt"],
    )?;
    Ok((trained.head, accuracy))
}

pub fn cmd_pseudo(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let head_path = ctx.path("pseudo_head.ckpt");
    if !ctx.guard_outputs(&[head_path.clone()])? {
        println!("pseudo: reusing {}", head_path.display());
        return Ok(());
    }
    let manifest = ctx.manifest()?;
    let class_set = &manifest.class_set;
    let section = &ctx.config.pseudo;

    let train = ctx.store("train.embs", "embed")?;
    let test = ctx.store("test.embs", "embed")?;
    let train_records = subset_records(&manifest, Split::Train);
    let shots = if section.shots == 0 {
        return Err(Error::Config("pseudo.shots must be at least 1".into()));
    } else {
        section.shots
    };
    let sample = sample_few_shot(
        &train_records,
        shots,
        derive_seed(ctx.config.seed, "pseudo-shots", shots as u64),
    )?;
    print_warnings(&sample.warnings);

    let selected: Vec<ImageRecord> =
        sample.labeled.iter().map(|&i| train_records[i].clone()).collect();
    let labeled = train
        .select_rows(&sample.labeled)
        .with_labels(Some(dense_targets(&selected, class_set)?))?;
    let pool_records: Vec<ImageRecord> =
        sample.pool.iter().map(|&i| train_records[i].clone()).collect();
    let pool_truth = dense_targets(&pool_records, class_set)?;
    let pool = train.select_rows(&sample.pool).with_labels(None)?;
    let test_dense = test.with_labels(Some(dense_targets(
        &subset_records(&manifest, Split::Test),
        class_set,
    )?))?;

    let mut config = PseudoLabelConfig::new(
        ctx.config
            .train
            .train_config(derive_seed(ctx.config.seed, "pseudo", 0))?,
    );
    config.tau = section.tau;
    config.alpha = section.alpha;
    config.rounds = section.rounds;
    config.alpha_ramp = section.alpha_ramp;
    config.continue_head = section.continue_head;

    let outcome = pseudo_label_rounds(
        &labeled,
        &pool,
        &test_dense,
        class_set.len(),
        ctx.config.train.head_spec()?,
        &config,
        Some(&pool_truth),
    )?;
    save_head(&outcome.head, &head_path)?;

    println!("pseudo: baseline accuracy {:.4}", outcome.baseline_accuracy);
    let mut rounds = Vec::new();
    for r in &outcome.rounds {
        println!(
            "pseudo: round {} accuracy {:.4} ({} pseudo-labels, correctness {})",
            r.round,
            r.test_accuracy,
            r.pseudo_count,
            r.pseudo_correctness
                .map(|c| format!("{c:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
        rounds.push(json!({
            "round": r.round,
            "test_accuracy": r.test_accuracy,
            "pseudo_count": r.pseudo_count,
            "pseudo_correctness": r.pseudo_correctness,
        }));
    }
    ctx.record_step(
        "pseudo",
        json!({
            "shots": shots,
            "tau": section.tau,
            "alpha": section.alpha,
            "baseline_accuracy": outcome.baseline_accuracy,
            "rounds": rounds,
        }),
        &["pseudo_head.ckpt"],
    )
}

/// Stratified deterministic subsample: up to `max_points` rows, classes
/// kept balanced, order stable.
fn stratified_rows(labels: &[u32], max_points: usize, seed: u64) -> Vec<usize> {
    if max_points == 0 || labels.len() <= max_points {
        return (0..labels.len()).collect();
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rows in by_class.values_mut() {
        rows.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(max_points);
    let mut cursor = 0usize;
    while picked.len() < max_points {
        let mut advanced = false;
        for rows in by_class.values() {
            if cursor < rows.len() && picked.len() < max_points {
                picked.push(rows[cursor]);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
        cursor += 1;
    }
    picked.sort_unstable();
    picked
}

/// Run t-SNE over the configured source rows; returns the layout label
/// agreement for the report.
pub fn cmd_tsne(ctx: &Ctx) -> Result<f64> {
    ctx.ensure_run_dir()?;
    let csv_path = ctx.path("tsne_layout.csv");
    let svg_path = ctx.path("tsne_layout.svg");
    if !ctx.guard_outputs(&[csv_path.clone(), svg_path.clone()])? {
        println!("tsne: reusing {}", csv_path.display());
        return Ok(f64::NAN);
    }
    let section = &ctx.config.tsne;

    let store = match section.source.as_str() {
        "test" => ctx.store("test.embs", "embed")?,
        "train" => ctx.store("train.embs", "embed")?,
        "all" => {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let mut dim = 0;
            for name in ["train.embs", "val.embs", "test.embs"] {
                if ctx.path(name).exists() {
                    let s = ctx.store(name, "embed")?;
                    dim = s.dim;
                    data.extend_from_slice(&s.data);
                    if let Some(l) = &s.labels {
                        labels.extend_from_slice(l);
                    }
                }
            }
            if data.is_empty() {
                return Err(Error::Data("no stores found; run `semdefect embed` first".into()));
            }
            let count = data.len() / dim;
            let labels = (labels.len() == count).then_some(labels);
            EmbeddingStore::new(dim, data, labels)?
        }
        other => return Err(Error::Config(format!("unknown tsne.source \"{other}\""))),
    };
    let labels = store
        .labels
        .clone()
        .ok_or_else(|| Error::Data("t-SNE source store must be labeled".into()))?;

    let rows = stratified_rows(
        &labels,
        section.max_points,
        derive_seed(ctx.config.seed, "tsne-sample", 0),
    );
    let sub = store.select_rows(&rows);
    let sub_labels: Vec<u32> = rows.iter().map(|&i| labels[i]).collect();
    let n = sub.count();

    let (x, dim): (Vec<f64>, usize) = match section.representation.as_str() {
        "embedding" => (sub.data.iter().map(|&v| v as f64).collect(), sub.dim),
        "head" => {
            let head_path = ctx.path("head.ckpt");
            if !head_path.exists() {
                return Err(Error::Data(format!(
                    "missing upstream artifact {}; run `semdefect train` first",
                    head_path.display()
                )));
            }
            let head = load_head(&head_path)?;
            let rep = penultimate(&head, &sub)?;
            let d = rep.len() / n.max(1);
            (rep, d)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown tsne.representation \"{other}\""
            )))
        }
    };

    let mut tsne_config = section.tsne_config(derive_seed(ctx.config.seed, "tsne", 0));
    let max_perplexity = (n as f64 - 1.0) / 3.0;
    if tsne_config.perplexity > max_perplexity {
        eprintln!(
            "warning: perplexity {} clamped to {max_perplexity:.3} for {n} points",
            tsne_config.perplexity
        );
        tsne_config.perplexity = max_perplexity;
    }

    let layout = run_tsne(&x, n, dim, &tsne_config)?;
    export_layout_csv(&layout, Some(&sub_labels), &csv_path)?;
    write_layout_svg(&layout.points, Some(&sub_labels), &svg_path)?;

    let k = 10.min(n.saturating_sub(1)).max(1);
    let agreement = layout_label_agreement(&layout.points, &sub_labels, k)?;
    let initial_kl = layout.trace.first().map(|t| t.1);
    println!(
        "tsne: {n} points, final KL {:.4}, {k}-NN label agreement {:.4}",
        layout.final_kl, agreement
    );
    ctx.record_step(
        "tsne",
        json!({
            "source": section.source,
            "representation": section.representation,
            "points": n,
            "initial_kl": initial_kl,
            "final_kl": layout.final_kl,
            "label_agreement": agreement,
            "k": k,
        }),
        &["tsne_layout.csv", "tsne_layout.svg"],
    )?;
    Ok(agreement)
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let csv_path = ctx.path("curves.csv");
    let svg_path = ctx.path("curves.svg");
    if !ctx.guard_outputs(&[csv_path.clone(), svg_path.clone()])? {
        println!("sweep: reusing {}", csv_path.display());
        return Ok(());
    }
    let manifest = ctx.manifest()?;
    let class_set = &manifest.class_set;
    let train = ctx.store("train.embs", "embed")?;
    let test = ctx.store("test.embs", "embed")?;
    let train_records = subset_records(&manifest, Split::Train);
    let test_records = subset_records(&manifest, Split::Test);

    let mut shots_grid = ctx.config.sweep.shots.clone();
    shots_grid.sort_unstable();
    shots_grid.dedup();
    if shots_grid.is_empty() || shots_grid[0] == 0 {
        return Err(Error::Config("sweep.shots must be positive".into()));
    }
    let methods = &ctx.config.sweep.methods;

    let mut points = Vec::new();
    for &layer in &manifest.layers {
        let layer_tag = layer.to_string();
        let train_rows: Vec<usize> = train_records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.layer_id == layer)
            .map(|(i, _)| i)
            .collect();
        let test_rows: Vec<usize> = test_records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.layer_id == layer)
            .map(|(i, _)| i)
            .collect();
        if train_rows.is_empty() || test_rows.is_empty() {
            eprintln!("warning: layer {layer} lacks train or test rows; skipped");
            continue;
        }
        let layer_train_records: Vec<ImageRecord> =
            train_rows.iter().map(|&i| train_records[i].clone()).collect();
        let layer_train = train.select_rows(&train_rows);
        let layer_test = test.select_rows(&test_rows);
        let layer_test_records: Vec<ImageRecord> =
            test_rows.iter().map(|&i| test_records[i].clone()).collect();
        let test_truth = dense_targets(&layer_test_records, class_set)?;
        let test_dense = layer_test.with_labels(Some(test_truth.clone()))?;

        for &shots in &shots_grid {
            let sample_seed = derive_seed(
                ctx.config.seed,
                "sweep-sample",
                (layer as u64) << 32 | shots as u64,
            );
            let sample = sample_few_shot(&layer_train_records, shots, sample_seed)?;
            print_warnings(&sample.warnings);
            let selected: Vec<ImageRecord> = sample
                .labeled
                .iter()
                .map(|&i| layer_train_records[i].clone())
                .collect();
            let targets = dense_targets(&selected, class_set)?;
            let labeled_raw = layer_train.select_rows(&sample.labeled);
            let labeled_dense = labeled_raw.with_labels(Some(targets))?;
            let train_seed = derive_seed(
                ctx.config.seed,
                "sweep-train",
                (layer as u64) << 32 | shots as u64,
            );

            for method in methods {
                let accuracy = match method.as_str() {
                    "knn" => {
                        let index =
                            KnnIndex::from_store(&labeled_raw, ctx.config.knn.metric()?)?;
                        let k = ctx.config.knn.k.min(index.len());
                        let eval =
                            evaluate_knn(&index, &layer_test, &ctx.config.knn.kernel_params(k)?)?;
                        eval.accuracy
                    }
                    "finetune" => {
                        let config = ctx.config.train.train_config(train_seed)?;
                        let trained = train_head(
                            &labeled_dense,
                            class_set.len(),
                            ctx.config.train.head_spec()?,
                            &config,
                            None,
                        )?;
                        evaluate_head(&trained.head, &layer_test, &test_truth)?
                    }
                    "pseudo" => {
                        let pool = layer_train.select_rows(&sample.pool).with_labels(None)?;
                        let pool_records: Vec<ImageRecord> = sample
                            .pool
                            .iter()
                            .map(|&i| layer_train_records[i].clone())
                            .collect();
                        let pool_truth = dense_targets(&pool_records, class_set)?;
                        let mut config =
                            PseudoLabelConfig::new(ctx.config.train.train_config(train_seed)?);
                        config.tau = ctx.config.pseudo.tau;
                        config.alpha = ctx.config.pseudo.alpha;
                        config.rounds = ctx.config.pseudo.rounds;
                        config.alpha_ramp = ctx.config.pseudo.alpha_ramp;
                        config.continue_head = ctx.config.pseudo.continue_head;
                        let outcome = pseudo_label_rounds(
                            &labeled_dense,
                            &pool,
                            &test_dense,
                            class_set.len(),
                            ctx.config.train.head_spec()?,
                            &config,
                            Some(&pool_truth),
                        )?;
                        outcome
                            .rounds
                            .last()
                            .map(|r| r.test_accuracy)
                            .unwrap_or(outcome.baseline_accuracy)
                    }
                    other => {
                        return Err(Error::Config(format!("unknown sweep method \"{other}\"")))
                    }
                };
                println!("sweep: layer {layer} shots {shots} {method} accuracy {accuracy:.4}");
                points.push(CurvePoint {
                    shots,
                    accuracy,
                    method: method.clone(),
                    layer: layer_tag.clone(),
                });
            }
        }
    }

    let curves = shots_curve(&points, &csv_path, &svg_path)?;
    println!(
        "sweep: {} points across {} series -> {}",
        points.len(),
        curves.series.len(),
        csv_path.display()
    );
    let point_dump: Vec<serde_json::Value> = points
        .iter()
        .map(|p| json!({"shots": p.shots, "accuracy": p.accuracy, "method": p.method, "layer": p.layer}))
        .collect();
    ctx.record_step(
        "sweep",
        json!({
            "shots": shots_grid,
            "methods": methods,
            "points": point_dump,
        }),
        &["curves.csv", "curves.svg"],
    )
}

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    ctx.ensure_run_dir()?;
    let mut report = ctx.load_report()?;
    let mut names = Vec::new();
    let entries = std::fs::read_dir(&ctx.run_dir).map_err(|e| Error::io(&ctx.run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&ctx.run_dir, e))?;
        if entry.path().is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != "report.json" {
                names.push(name);
            }
        }
    }
    names.sort();
    report.digests.clear();
    for name in &names {
        report
            .digests
            .insert(name.clone(), file_digest(&ctx.path(name))?);
    }
    report.push_step("report", json!({ "files": names }));
    emit_run_report(&report, &ctx.path("report.json"))?;
    println!(
        "report: {} files digested -> {}",
        report.digests.len(),
        ctx.path("report.json").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Separation;
    use crate::metrics::REPORT_SCHEMA_VERSION;

    fn test_ctx(dir: &Path) -> Ctx {
        let mut config = RunConfig::default();
        config.seed = 11;
        config.synth.num_classes = 4;
        config.synth.images_per_class = 12;
        config.synth.wafers_per_class = 3;
        config.synth.image_size = [64, 64];
        config.synth.separation = Separation::High;
        config.preprocess.crop_size = [64, 64];
        config.train.epochs = 40;
        config.train.shots = 3;
        config.pseudo.shots = 2;
        config.knn.k = 3;
        config.tsne.iterations = 60;
        config.tsne.max_points = 40;
        config.sweep.shots = vec![1, 3];
        config.sweep.methods = vec!["knn".into(), "finetune".into()];
        Ctx::new(dir.join("run"), config)
    }

    #[test]
    fn pipeline_smoke_and_restart_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = test_ctx(dir.path());

        cmd_synth(&ctx).unwrap();
        // rerun without --resume/--force fails, resume skips
        assert!(cmd_synth(&ctx).is_err());
        let mut resume_ctx = ctx.clone();
        resume_ctx.resume = true;
        cmd_synth(&resume_ctx).unwrap();

        cmd_split(&ctx).unwrap();
        assert!(cmd_split(&ctx).is_err());
        cmd_split(&resume_ctx).unwrap();

        cmd_embed(&ctx).unwrap();
        cmd_knn(&ctx).unwrap();
        let (_, acc) = cmd_train(&ctx).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        cmd_pseudo(&ctx).unwrap();
        cmd_tsne(&ctx).unwrap();
        cmd_sweep(&ctx).unwrap();
        cmd_report(&ctx).unwrap();

        let report = load_run_report(&ctx.run_dir.join("report.json")).unwrap();
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
        let commands: Vec<&str> = report.steps.iter().map(|s| s.command.as_str()).collect();
        assert_eq!(
            commands,
            vec!["synth", "split", "embed", "knn", "train", "pseudo", "tsne", "sweep", "report"]
        );
        // digests cover the emitted artifacts
        for name in ["manifest.jsonl", "train.embs", "test.embs", "curves.csv"] {
            assert!(report.digests.contains_key(name), "missing digest for {name}");
        }
        // recompute a digest independently
        let bytes = std::fs::read(ctx.run_dir.join("curves.csv")).unwrap();
        assert_eq!(report.digests["curves.csv"], format!("{:08x}", crc32fast::hash(&bytes)));
    }

    #[test]
    fn missing_upstream_artifact_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = test_ctx(dir.path());
        let err = cmd_knn(&ctx).unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");
        cmd_synth(&ctx).unwrap();
        cmd_split(&ctx).unwrap();
        let err = cmd_knn(&ctx).unwrap_err();
        assert!(err.to_string().contains("train.embs"), "{err}");
        assert!(err.to_string().contains("embed"), "{err}");
    }

    #[test]
    fn config_drift_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = test_ctx(dir.path());
        cmd_synth(&ctx).unwrap();
        let mut drifted = ctx.clone();
        drifted.config.knn.k = 99;
        drifted.resume = true;
        let err = cmd_synth(&drifted).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
        drifted.force = true;
        cmd_synth(&drifted).unwrap();
    }

    #[test]
    fn stratified_rows_balanced_and_deterministic() {
        let labels: Vec<u32> = (0..100).map(|i| (i % 4) as u32).collect();
        let a = stratified_rows(&labels, 20, 7);
        let b = stratified_rows(&labels, 20, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let mut counts = BTreeMap::new();
        for &i in &a {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        for (_, c) in counts {
            assert_eq!(c, 5);
        }
        // no subsampling when it fits
        assert_eq!(stratified_rows(&labels, 0, 7).len(), 100);
        assert_eq!(stratified_rows(&labels, 200, 7).len(), 100);
    }
}
