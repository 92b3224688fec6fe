//! Cross-module integration tests: generator separability, metric
//! consistency across modules, head-representation t-SNE through the CLI
//! layer, and binary-level smoke checks.

mod common;

use common::{dense_labels, embed_all, records_of, synth_spec};

use semdefect::cli::{
    cmd_embed, cmd_knn, cmd_split, cmd_synth, cmd_train, cmd_tsne, Ctx, RunConfig,
};
use semdefect::dataset::{
    generate_synthetic, load_manifest, save_manifest, wafer_aware_split, ClassSet, ImageRecord,
    Separation, Split, SynthSpec,
};
use semdefect::embedder::{load_store, save_store};
use semdefect::knn::{evaluate_knn, leave_one_out_accuracy, Bandwidth, KernelParams, KnnIndex, Metric};
use semdefect::metrics::{confusion, precision_recall_f1};

#[test]
fn high_separation_set_has_tight_clusters() {
    // generator contract: the frozen constants keep 1-NN leave-one-out
    // accuracy of the reference embedding at 0.95 or better
    let dir = tempfile::tempdir().unwrap();
    let spec = synth_spec(Separation::High, 20, 4);
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    assert_eq!(out.records.len(), 220);
    let store = embed_all(&out.records, dir.path());
    let index = KnnIndex::from_store(&store, Metric::Euclidean).unwrap();
    let loo =
        leave_one_out_accuracy(&index, &KernelParams::new(1, Bandwidth::MedianHeuristic)).unwrap();
    assert!(loo >= 0.95, "1-NN leave-one-out accuracy {loo:.4}");
}

#[test]
fn micro_accuracy_matches_knn_evaluation_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 5,
        images_per_class: 12,
        wafers_per_class: 3,
        separation: Separation::Medium,
        image_size: (96, 96),
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    let split = wafer_aware_split(out.records, (0.6, 0.0, 0.4), 2).unwrap();
    let class_set = ClassSet::from_records(&split.records);
    let train = records_of(&split.records, Split::Train);
    let test = records_of(&split.records, Split::Test);
    let backend_spec = semdefect::embedder::PreprocessSpec {
        crop_size: (96, 96),
        ..Default::default()
    };
    let backend = semdefect::embedder::ReferenceBackend::new();
    let train_store =
        semdefect::embedder::embed_records(&train, dir.path(), &|_| backend_spec, &backend, 2)
            .unwrap();
    let test_store =
        semdefect::embedder::embed_records(&test, dir.path(), &|_| backend_spec, &backend, 2)
            .unwrap();

    let index = KnnIndex::from_store(&train_store, Metric::Euclidean).unwrap();
    let eval = evaluate_knn(
        &index,
        &test_store,
        &KernelParams::new(5.min(index.len()), Bandwidth::MedianHeuristic),
    )
    .unwrap();

    let truth = dense_labels(&test_store, &class_set);
    let preds: Vec<u32> = eval
        .predictions
        .iter()
        .map(|&raw| class_set.index_of(raw).unwrap() as u32)
        .collect();
    let cm = confusion(&truth, &preds, class_set.len()).unwrap();
    let report = precision_recall_f1(&cm).unwrap();
    assert_eq!(
        report.accuracy, eval.accuracy,
        "trace/total accuracy must equal the evaluator's count exactly"
    );
    let support: u64 = report.per_class.iter().map(|m| m.support).sum();
    assert_eq!(support as usize, test_store.count());
}

fn small_ctx(dir: &std::path::Path) -> Ctx {
    let mut config = RunConfig::default();
    config.seed = 5;
    config.synth.num_classes = 5;
    config.synth.images_per_class = 16;
    config.synth.wafers_per_class = 4;
    config.train.epochs = 150;
    config.train.peak_lr = 0.03;
    config.train.shots = 8;
    config.train.head = "mlp".into();
    config.train.hidden = 32;
    config.tsne.iterations = 250;
    config.tsne.max_points = 60;
    config.tsne.source = "all".into();
    Ctx::new(dir.join("run"), config)
}

#[test]
fn head_representation_tsne_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = small_ctx(dir.path());
    cmd_synth(&ctx).unwrap();
    cmd_split(&ctx).unwrap();
    cmd_embed(&ctx).unwrap();
    cmd_train(&ctx).unwrap();

    let mut raw_ctx = ctx.clone();
    raw_ctx.config.tsne.representation = "embedding".into();
    let raw_agreement = cmd_tsne(&raw_ctx).unwrap();

    let mut head_ctx = ctx.clone();
    head_ctx.config.tsne.representation = "head".into();
    head_ctx.force = true; // overwrite the raw layout files
    let head_agreement = cmd_tsne(&head_ctx).unwrap();

    assert!((0.0..=1.0).contains(&raw_agreement));
    assert!((0.0..=1.0).contains(&head_agreement));
    let csv = std::fs::read_to_string(ctx.run_dir.join("tsne_layout.csv")).unwrap();
    assert!(csv.starts_with("index,x,y,label\n"));
    assert!(ctx.run_dir.join("tsne_layout.svg").exists());
}

#[test]
fn onnx_backend_without_model_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = small_ctx(dir.path());
    ctx.config.embed.backend = "onnx".into();
    cmd_synth(&ctx).unwrap();
    cmd_split(&ctx).unwrap();
    let err = cmd_embed(&ctx).unwrap_err();
    assert!(err.to_string().contains("model_file"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn ingest_external_manifest_and_knn() {
    let data_dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 3,
        images_per_class: 10,
        wafers_per_class: 2,
        image_size: (96, 96),
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, data_dir.path()).unwrap();
    // pre-assign splits in the external manifest
    let split = wafer_aware_split(out.records, (0.5, 0.0, 0.5), 1).unwrap();
    // external manifests may carry absolute paths
    let records: Vec<ImageRecord> = split
        .records
        .iter()
        .map(|r| {
            let mut rec = r.clone();
            rec.image_path = data_dir.path().join(&r.image_path);
            rec
        })
        .collect();
    let manifest_path = data_dir.path().join("external.jsonl");
    save_manifest(&records, &manifest_path).unwrap();

    let run_dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.ingest.manifest = manifest_path.to_string_lossy().into_owned();
    config.preprocess.crop_size = [96, 96];
    config.knn.k = 3;
    let ctx = Ctx::new(run_dir.path().join("run"), config);
    semdefect::cli::cmd_ingest(&ctx).unwrap();
    let manifest = load_manifest(&ctx.run_dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.records.len(), 30);
    cmd_embed(&ctx).unwrap();
    cmd_knn(&ctx).unwrap();
}

#[test]
fn store_files_round_trip_through_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = small_ctx(dir.path());
    cmd_synth(&ctx).unwrap();
    cmd_split(&ctx).unwrap();
    cmd_embed(&ctx).unwrap();
    let store = load_store(&ctx.run_dir.join("train.embs")).unwrap();
    assert!(store.count() > 0);
    assert_eq!(store.dim, semdefect::embedder::REF_DIM);
    let copy = ctx.run_dir.join("copy.embs");
    save_store(&store, &copy).unwrap();
    assert_eq!(
        std::fs::read(ctx.run_dir.join("train.embs")).unwrap(),
        std::fs::read(&copy).unwrap()
    );
}

// Binary-level smoke checks through the real argument parser.
mod binary {
    use std::process::Command;

    fn bin() -> Command {
        Command::new(env!("CARGO_BIN_EXE_semdefect"))
    }

    #[test]
    fn synth_and_report_via_binary() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let config_path = dir.path().join("exp.toml");
        std::fs::write(
            &config_path,
            "seed = 3\n[synth]\nnum_classes = 3\nimages_per_class = 4\nimage_size = [64, 64]\n",
        )
        .unwrap();
        let status = bin()
            .args([
                "--config",
                config_path.to_str().unwrap(),
                "--run-dir",
                run.to_str().unwrap(),
                "synth",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        assert!(run.join("manifest.jsonl").exists());

        let status = bin()
            .args([
                "--config",
                config_path.to_str().unwrap(),
                "--run-dir",
                run.to_str().unwrap(),
                "report",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        assert!(run.join("report.json").exists());

        // forgetting the config file on a later stage is caught as drift
        let out = bin()
            .args(["--run-dir", run.to_str().unwrap(), "report"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1));
    }

    #[test]
    fn unknown_config_key_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args([
                "--run-dir",
                dir.path().to_str().unwrap(),
                "--set",
                "knn.bandwith=2",
                "knn",
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1));
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("bandwith"), "{stderr}");
    }

    #[test]
    fn missing_artifact_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args(["--run-dir", dir.path().to_str().unwrap(), "embed"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2));
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("manifest"), "{stderr}");
    }

    #[test]
    fn help_exits_0() {
        let out = bin().arg("--help").output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let stdout = String::from_utf8_lossy(&out.stdout);
        for sub in ["synth", "ingest", "split", "embed", "knn", "train", "pseudo", "tsne", "sweep", "report"] {
            assert!(stdout.contains(sub), "help lists {sub}");
        }
    }
}
