use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokalign::pipeline::{run_pipeline, verify_artifacts, Manifest, PipelineConfig, StageStatus};
use tokalign::synth::PermutationBenchmark;
use tokalign::tensor::{read_bundle, write_bundle, Tensor, TensorBundle};
use tokalign::vocab::{save_vocab, Vocab};
use tokalign::{corpus, Error};

fn source_bundle(rows: usize, dim: usize, seed: u64) -> TensorBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = TensorBundle::new();
    for name in ["embedding", "lm_head"] {
        let data = (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        b.insert(name, Tensor::new(vec![rows, dim], data).unwrap()).unwrap();
    }
    b.insert("final_norm", Tensor::new(vec![dim], vec![1.0; dim]).unwrap()).unwrap();
    b
}

/// Both sides share one byte-level vocabulary and one text corpus.
fn identity_workspace(dir: &Path) -> PipelineConfig {
    save_vocab(&Vocab::byte_level(), dir.join("vocab.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = ["alpha", "beta", "gamma", "delta", "token", "align", "zeta", "omega"];
    let text: Vec<String> = (0..200)
        .map(|_| (0..30).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    fs::write(dir.join("corpus.txt"), text.join("\n")).unwrap();
    write_bundle(&source_bundle(256, 8, 2), dir.join("model.tal")).unwrap();
    let toml = r#"
        seed = 5
        output_dir = "out"
        corpus = "corpus.txt"
        [source]
        vocab = "vocab.json"
        bundle = "model.tal"
        [target]
        vocab = "vocab.json"
        [glove]
        dim = 8
        epochs = 5
        [align]
        max_iter = 20
    "#;
    PipelineConfig::from_toml_str(toml, dir).unwrap()
}

#[test]
fn identity_tokenizer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = identity_workspace(dir.path());
    let m = run_pipeline(&cfg).unwrap();
    assert!(m.complete);
    assert_eq!(m.metric_f64("bleu1_t2s"), Some(1.0));
    assert_eq!(m.metric_f64("bleu1_s2t"), Some(1.0));
    assert_eq!(m.metrics["remap_bitwise_identical"], serde_json::Value::Bool(true));
    assert_eq!(m.metric_f64("src_compression_rate"), Some(1.0));
    let out = dir.path().join("out");
    assert_eq!(fs::read(out.join("init.tal")).unwrap(), fs::read(dir.path().join("model.tal")).unwrap());
    verify_artifacts(&out, &m).unwrap();
    assert_eq!(Manifest::load(out.join("manifest.json")).unwrap(), m);
}

#[test]
fn rerun_with_same_seed_gives_identical_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = identity_workspace(dir.path());
    cfg.cache = false;
    let first = run_pipeline(&cfg).unwrap();
    cfg.output_dir = dir.path().join("out2");
    let second = run_pipeline(&cfg).unwrap();
    let digests = |m: &Manifest| m.artifacts.iter().map(|(k, a)| (k.clone(), a.sha256.clone())).collect::<Vec<_>>();
    assert_eq!(digests(&first), digests(&second));
    assert_eq!(first.metrics, second.metrics);
}

#[test]
fn cached_rerun_matches_cold_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = identity_workspace(dir.path());
    let cold = run_pipeline(&cfg).unwrap();
    let warm = run_pipeline(&cfg).unwrap();
    assert!(warm.stages.iter().all(|s| s.status == StageStatus::Cached), "{:?}", warm.stages);
    assert_eq!(cold.artifacts, warm.artifacts);
    assert_eq!(cold.metrics, warm.metrics);

    // A changed downstream setting reruns only the affected stages.
    let mut changed = cfg.clone();
    changed.plan.total_steps = 400;
    let third = run_pipeline(&changed).unwrap();
    assert_eq!(third.stage("glove_src").unwrap().status, StageStatus::Cached);
    assert_eq!(third.stage("plan").unwrap().status, StageStatus::Ran);
    assert_eq!(third.artifacts["lexicon_t2s.tsv"], cold.artifacts["lexicon_t2s.tsv"]);
}

#[test]
fn verification_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = identity_workspace(dir.path());
    let m = run_pipeline(&cfg).unwrap();
    let out = dir.path().join("out");
    let lex = out.join("lexicon_t2s.tsv");
    let mut text = fs::read_to_string(&lex).unwrap();
    text.push('\n');
    fs::write(&lex, text).unwrap();
    assert!(verify_artifacts(&out, &m).is_err());
}

#[test]
fn permutation_benchmark_is_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bench = PermutationBenchmark::new(120, 300_000, 500, 9);
    save_vocab(&bench.src_vocab, d.join("src.json")).unwrap();
    save_vocab(&bench.tgt_vocab, d.join("tgt.json")).unwrap();
    corpus::write_token_stream(&bench.src_stream, d.join("src.tits")).unwrap();
    corpus::write_token_stream(&bench.tgt_stream, d.join("tgt.tits")).unwrap();
    fs::write(d.join("gold.json"), serde_json::to_string(&bench.inverse()).unwrap()).unwrap();
    let src_model = source_bundle(120, 16, 4);
    write_bundle(&src_model, d.join("model.tal")).unwrap();
    let toml = r#"
        seed = 3
        output_dir = "out"
        [source]
        vocab = "src.json"
        tokens = "src.tits"
        bundle = "model.tal"
        [target]
        vocab = "tgt.json"
        tokens = "tgt.tits"
        [glove]
        dim = 32
        epochs = 10
        learning_rate = 0.2
        [align]
        unsupervised_init = true
        use_shared_seed = false
        [eval]
        gold_t2s = "gold.json"
        gold_min_frequency = 50
    "#;
    let cfg = PipelineConfig::from_toml_str(toml, d).unwrap();
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(m.metric_f64("shared_tokens"), Some(0.0));
    // Every token is recovered, so conversion is lossless and the tokalign
    // init is exactly the row-permuted source matrix.
    assert_eq!(m.metric_f64("top1_accuracy"), Some(1.0), "{:?}", m.metrics);
    assert_eq!(m.metric_f64("bleu1_t2s"), Some(1.0));
    assert_eq!(m.metric_f64("bleu1_s2t"), Some(1.0));
    let init = read_bundle(d.join("out/init.tal")).unwrap();
    let inv = bench.inverse();
    for name in ["embedding", "lm_head"] {
        let (src, dst) = (src_model.get(name).unwrap(), init.get(name).unwrap());
        for (t, &s) in inv.iter().enumerate() {
            assert_eq!(dst.row(t), src.row(s as usize));
        }
    }
}

#[test]
fn failing_stage_is_recorded_and_artifacts_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut cfg = identity_workspace(d);
    // A bundle whose vocabulary tensors do not match the source vocabulary.
    write_bundle(&source_bundle(10, 8, 2), d.join("model.tal")).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "remap"), "{err}");
    let m = Manifest::load(d.join("out/manifest.json")).unwrap();
    assert!(!m.complete);
    assert_eq!(m.stages.last().unwrap().status, StageStatus::Failed);
    assert!(m.stages.last().unwrap().error.is_some());
    assert!(m.artifacts.values().all(|a| a.partial));

    cfg.source.vocab = d.join("missing.json");
    assert!(run_pipeline(&cfg).is_err());
}

#[test]
fn large_tensor_bundle_round_trips_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let rows = 256_000;
    let data: Vec<f32> = (0..rows * 64).map(|i| (i % 9973) as f32 * 1e-3).collect();
    let mut b = TensorBundle::new();
    b.insert("embedding", Tensor::new(vec![rows, 64], data).unwrap()).unwrap();
    let start = std::time::Instant::now();
    write_bundle(&b, dir.path().join("big.tal")).unwrap();
    let back = read_bundle(dir.path().join("big.tal")).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0, "{:?}", start.elapsed());
    assert_eq!(back, b);
}
