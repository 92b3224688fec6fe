// Scratch calibration driver (temporary).
use semdefect::dataset::*;
use semdefect::embedder::*;
use semdefect::knn::*;
use semdefect::pseudolabel::*;
use semdefect::trainer::*;

fn embed_all(records: &[ImageRecord], dir: &std::path::Path) -> EmbeddingStore {
    let backend = ReferenceBackend::new();
    embed_records(records, dir, &|_| PreprocessSpec::default(), &backend, 8).unwrap()
}

fn dense_labels(store: &EmbeddingStore, class_set: &ClassSet) -> Vec<u32> {
    store
        .labels
        .as_ref()
        .unwrap()
        .iter()
        .map(|&l| class_set.index_of(l).unwrap() as u32)
        .collect()
}

fn main() {
    let t0 = std::time::Instant::now();
    // ---- high separation: 1-NN LOO ----
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 11,
        images_per_class: 20,
        separation: Separation::High,
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    println!("generated 220 in {:?}", t0.elapsed());
    let store = embed_all(&out.records, dir.path());
    println!("embedded in {:?}", t0.elapsed());
    let index = KnnIndex::from_store(&store, Metric::Euclidean).unwrap();
    let loo = leave_one_out_accuracy(&index, &KernelParams::new(1, Bandwidth::MedianHeuristic)).unwrap();
    println!("high-sep 1-NN LOO = {loo:.4}");

    // ---- high separation, 15-shot linear head ----
    let dir2 = tempfile::tempdir().unwrap();
    let spec2 = SynthSpec {
        num_classes: 11,
        images_per_class: 40,
        wafers_per_class: 4,
        separation: Separation::High,
        ..SynthSpec::default()
    };
    let out2 = generate_synthetic(&spec2, dir2.path()).unwrap();
    let split = wafer_aware_split(out2.records.clone(), (0.7, 0.1, 0.2), 11).unwrap();
    let class_set = ClassSet::from_records(&split.records);
    let train_recs: Vec<ImageRecord> = split.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test_recs: Vec<ImageRecord> = split.records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    println!("train {} test {}", train_recs.len(), test_recs.len());
    let shot = sample_few_shot(&train_recs, 15, 7).unwrap();
    let shot_recs: Vec<ImageRecord> = shot.labeled.iter().map(|&i| train_recs[i].clone()).collect();
    let labeled = embed_all(&shot_recs, dir2.path());
    let test_store = embed_all(&test_recs, dir2.path());
    let labeled_dense = labeled.with_labels(Some(dense_labels(&labeled, &class_set))).unwrap();
    let test_dense_targets = dense_labels(&test_store, &class_set);
    let mut config = TrainConfig::for_epochs(400).with_seed(5);
    config.peak_lr = 0.05;
    config.weight_decay = 1e-4;
    let trained = train_head(&labeled_dense, class_set.len(), HeadSpec::Linear, &config, None).unwrap();
    let acc = evaluate_head(&trained.head, &test_store, &test_dense_targets).unwrap();
    println!("high-sep 15-shot linear head test acc = {acc:.4} ({} shots)", shot_recs.len());
    // upper bounds: all train rows
    let train_store_all = embed_all(&train_recs, dir2.path());
    let full_index = KnnIndex::from_store(&train_store_all, Metric::Euclidean).unwrap();
    let full_eval = evaluate_knn(&full_index, &test_store, &KernelParams::new(10, Bandwidth::MedianHeuristic)).unwrap();
    println!("high-sep ALL-train knn test acc = {:.4}", full_eval.accuracy);
    let train_dense_all = train_store_all.with_labels(Some(dense_labels(&train_store_all, &class_set))).unwrap();
    let trained_all = train_head(&train_dense_all, class_set.len(), HeadSpec::Linear, &config, None).unwrap();
    let acc_all = evaluate_head(&trained_all.head, &test_store, &test_dense_targets).unwrap();
    println!("high-sep ALL-train head test acc = {acc_all:.4}");
    // per-class errors of the 15-shot head
    let preds = predict(&trained.head, &test_store).unwrap();
    let mut errs = std::collections::BTreeMap::new();
    for (i, (&p, &t)) in preds.labels.iter().zip(&test_dense_targets).enumerate() {
        if p != t {
            *errs.entry((class_set.id_at(t as usize), class_set.id_at(p as usize))).or_insert(0) += 1;
            let _ = i;
        }
    }
    println!("15-shot head errors (true -> pred): {errs:?}");
    // knn on same
    let knn_index = KnnIndex::from_store(&labeled, Metric::Euclidean).unwrap();
    let eval = evaluate_knn(&knn_index, &test_store, &KernelParams::new(10.min(knn_index.len()), Bandwidth::MedianHeuristic)).unwrap();
    println!("high-sep 15-shot knn test acc = {:.4}", eval.accuracy);

    // ---- Fig-4 analog: trained-head reps vs raw embeddings ----
    {
        use semdefect::tsne::*;
        let dirf = tempfile::tempdir().unwrap();
        let specf = SynthSpec {
            num_classes: 11,
            images_per_class: 30,
            wafers_per_class: 4,
            separation: Separation::High,
            ..SynthSpec::default()
        };
        let outf = generate_synthetic(&specf, dirf.path()).unwrap();
        let splitf = wafer_aware_split(outf.records.clone(), (0.7, 0.1, 0.2), 5).unwrap();
        let csf = ClassSet::from_records(&splitf.records);
        let trainf: Vec<ImageRecord> = splitf.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let labeled_all: Vec<ImageRecord> = splitf.records.iter().filter(|r| r.class_label.is_some()).cloned().collect();
        let all_store = embed_all(&labeled_all, dirf.path());
        let train_store = embed_all(&trainf, dirf.path());
        // stratified 300
        let labels_raw: Vec<u32> = all_store.labels.clone().unwrap();
        let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, &l) in labels_raw.iter().enumerate() { by_class.entry(l).or_default().push(i); }
        let mut rows = Vec::new();
        let mut cursor = 0;
        while rows.len() < 300 {
            let mut adv = false;
            for v in by_class.values() {
                if cursor < v.len() && rows.len() < 300 { rows.push(v[cursor]); adv = true; }
            }
            if !adv { break; }
            cursor += 1;
        }
        rows.sort_unstable();
        let sub = all_store.select_rows(&rows);
        let sub_labels: Vec<u32> = rows.iter().map(|&i| labels_raw[i]).collect();
        let n = sub.count();

        let shotf = sample_few_shot(&trainf, 15, 7).unwrap();
        let shot_store = train_store.select_rows(&shotf.labeled);
        let shot_dense = shot_store.with_labels(Some(dense_labels(&shot_store, &csf))).unwrap();
        let mut cfgf = TrainConfig::for_epochs(400).with_seed(5);
        cfgf.peak_lr = 0.05;
        cfgf.weight_decay = 1e-4;
        let headf = train_head(&shot_dense, csf.len(), HeadSpec::Mlp { hidden: 64 }, &cfgf, None).unwrap();

        let tcfg = TsneConfig { perplexity: 30.0, iterations: 500, seed: 9, ..TsneConfig::default() };
        let x_raw: Vec<f64> = sub.data.iter().map(|&v| v as f64).collect();
        let lay_raw = run_tsne(&x_raw, n, sub.dim, &tcfg).unwrap();
        let agree_raw = layout_label_agreement(&lay_raw.points, &sub_labels, 10).unwrap();
        let rep = penultimate(&headf.head, &sub).unwrap();
        let d_rep = rep.len() / n;
        let lay_rep = run_tsne(&rep, n, d_rep, &tcfg).unwrap();
        let agree_rep = layout_label_agreement(&lay_rep.points, &sub_labels, 10).unwrap();
        println!(
            "fig4: raw agree {agree_raw:.4} (kl {:.3}->{:.3}), trained agree {agree_rep:.4} (kl {:.3}->{:.3})",
            lay_raw.trace[0].1, lay_raw.final_kl, lay_rep.trace[0].1, lay_rep.final_kl
        );
    }

    // ---- medium separation, pseudo-labels ----
    let dir3 = tempfile::tempdir().unwrap();
    let spec3 = SynthSpec {
        num_classes: 11,
        images_per_class: 140,
        wafers_per_class: 10,
        separation: Separation::Medium,
        ..SynthSpec::default()
    };
    let t1 = std::time::Instant::now();
    let out3 = generate_synthetic(&spec3, dir3.path()).unwrap();
    println!("generated {} in {:?}", out3.records.len(), t1.elapsed());
    let split3 = wafer_aware_split(out3.records.clone(), (0.8, 0.0, 0.2), 3).unwrap();
    let class_set3 = ClassSet::from_records(&split3.records);
    let train3: Vec<ImageRecord> = split3.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test3: Vec<ImageRecord> = split3.records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let train_store = embed_all(&train3, dir3.path());
    let test_store3 = embed_all(&test3, dir3.path());
    println!("embedded {} in {:?}", train3.len() + test3.len(), t1.elapsed());
    let test_targets3 = dense_labels(&test_store3, &class_set3);
    let test_dense3 = test_store3.with_labels(Some(test_targets3.clone())).unwrap();

    let mut improvements = Vec::new();
    for seed in 0..10u64 {
        let shot = sample_few_shot(&train3, 5, seed).unwrap();
        // cap pool at 100/class
        let mut per_class = std::collections::BTreeMap::new();
        let mut pool_idx = Vec::new();
        for &i in &shot.pool {
            let c = train3[i].class_label.unwrap();
            let n = per_class.entry(c).or_insert(0usize);
            if *n < 100 {
                pool_idx.push(i);
                *n += 1;
            }
        }
        let labeled_rows = shot.labeled.clone();
        let labeled_store = train_store.select_rows(&labeled_rows);
        let labeled_dense = labeled_store
            .with_labels(Some(dense_labels(&labeled_store, &class_set3)))
            .unwrap();
        let pool_store = train_store.select_rows(&pool_idx);
        let pool_truth: Vec<u32> = pool_store
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .map(|&l| class_set3.index_of(l).unwrap() as u32)
            .collect();
        let pool_unlabeled = pool_store.with_labels(None).unwrap();

        let mut tc = TrainConfig::for_epochs(300).with_seed(seed);
        tc.peak_lr = 0.02;
        let mut pconfig = PseudoLabelConfig::new(tc);
        pconfig.tau = 0.9;
        let outp = pseudo_label_rounds(
            &labeled_dense,
            &pool_unlabeled,
            &test_dense3,
            class_set3.len(),
            HeadSpec::Linear,
            &pconfig,
            Some(&pool_truth),
        )
        .unwrap();
        let delta = outp.rounds[0].test_accuracy - outp.baseline_accuracy;
        println!(
            "seed {seed}: baseline {:.4} pseudo {:.4} delta {:+.4} count {} correct {:.3}",
            outp.baseline_accuracy,
            outp.rounds[0].test_accuracy,
            delta,
            outp.rounds[0].pseudo_count,
            outp.rounds[0].pseudo_correctness.unwrap()
        );
        improvements.push(delta);
    }
    improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "median improvement = {:+.4} (elapsed {:?})",
        improvements[improvements.len() / 2],
        t0.elapsed()
    );
}
