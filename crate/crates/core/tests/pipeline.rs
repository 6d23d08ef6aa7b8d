//! End-to-end command-line workflow on the synthetic tone corpus:
//! make-synth -> estimate-cmvn -> extract-features -> pretrain ->
//! finetune (post-CNN masking) -> decode -> score, finishing at CER 0 on
//! the training set.

use std::fs;
use std::path::Path;

use koe::audio;
use koe::ckpt::{self, CheckpointMeta};
use koe::dataio;
use koe::params::ParameterSet;
use koe::tensor::Tensor;

fn run_cli(args: &[&str]) -> i32 {
    koe::cli::dispatch(std::iter::once("koe").chain(args.iter().copied()))
}

fn ok(args: &[&str]) {
    let code = run_cli(args);
    assert_eq!(code, 0, "CLI {args:?} exited {code}");
}

const TOY_CFG: &str = "\
model.encoder_dim = 64
model.encoder_blocks = 2
model.heads = 4
model.ffn_dim = 128
model.conv_kernel = 7
model.dropout = 0.05
frontend.channels = 4
quantizer.groups = 2
quantizer.entries = 16
quantizer.entry_dim = 8
quantizer.target_dim = 32
pretrain.mask_prob = 0.2
pretrain.mask_span = 3
pretrain.distractors = 20
pretrain.max_steps = 150
pretrain.peak_lr = 3e-3
pretrain.checkpoint_every = 50
finetune.max_steps = 400
finetune.peak_lr = 2e-3
finetune.eval_every = 50
finetune.keep_top = 5
";

#[test]
fn overfit_workflow_reaches_zero_cer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus_dir = root.join("corpus");
    ok(&[
        "make-synth",
        "-n",
        "10",
        "--seed",
        "42",
        "--out",
        corpus_dir.to_str().unwrap(),
    ]);
    let manifest = corpus_dir.join("manifest_wav.tsv");
    let vocab = corpus_dir.join("vocab.txt");
    let cfg = root.join("toy.cfg");
    fs::write(&cfg, TOY_CFG).unwrap();

    let pt = root.join("pt");
    ok(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        pt.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    let pretrained = pt.join("final_model.bin");
    assert!(pretrained.exists());

    let ft = root.join("ft");
    ok(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--dev-manifest",
        manifest.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--out",
        ft.to_str().unwrap(),
        "--seed",
        "5",
        "--init",
        pretrained.to_str().unwrap(),
        "--mask-position",
        "post",
    ]);
    let model = ft.join("averaged_model.bin");
    assert!(model.exists());

    let hyp = root.join("decoded.tsv");
    ok(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--ckpt",
        model.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--cmvn",
        ft.join("cmvn.txt").to_str().unwrap(),
        "--out",
        hyp.to_str().unwrap(),
    ]);

    let report_path = root.join("score.json");
    ok(&[
        "score",
        "--ref",
        manifest.to_str().unwrap(),
        "--hyp",
        hyp.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(
        report["error_rate"].as_f64().unwrap(),
        0.0,
        "training-set CER after the overfit recipe: {report}"
    );
}

#[test]
fn feature_and_cmvn_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus_dir = root.join("corpus");
    ok(&[
        "make-synth",
        "-n",
        "4",
        "--seed",
        "3",
        "--out",
        corpus_dir.to_str().unwrap(),
    ]);
    let manifest = corpus_dir.join("manifest_wav.tsv");

    let stats_path = root.join("cmvn.txt");
    ok(&[
        "estimate-cmvn",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        stats_path.to_str().unwrap(),
    ]);
    let stats = audio::CmvnStats::load(&stats_path).unwrap();
    assert!(stats.frame_count > 0);

    let feats = root.join("feats");
    ok(&[
        "extract-features",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        feats.to_str().unwrap(),
        "--cmvn",
        stats_path.to_str().unwrap(),
    ]);
    let feat_manifest = dataio::load_manifest(&feats.join("manifest_fbank.tsv")).unwrap();
    assert_eq!(feat_manifest.len(), 4);
    for entry in &feat_manifest {
        let f = koe::cli::read_feature_file(Path::new(&entry.audio_path)).unwrap();
        assert_eq!(f.frames(), entry.length);
        // Normalized with the corpus stats that were just estimated.
        assert!(f.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn average_ckpt_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut a = ParameterSet::<f32>::new();
    a.insert("w", Tensor::param(&[3], vec![0.0, 2.0, 4.0])).unwrap();
    let mut b = ParameterSet::<f32>::new();
    b.insert("w", Tensor::param(&[3], vec![2.0, 2.0, 0.0])).unwrap();
    let pa = root.join("a.bin");
    let pb = root.join("b.bin");
    ckpt::save(&pa, &a, &CheckpointMeta { step: 1, dev_metric: None }).unwrap();
    ckpt::save(&pb, &b, &CheckpointMeta { step: 2, dev_metric: None }).unwrap();
    let out = root.join("avg.bin");
    ok(&[
        "average-ckpt",
        "--out",
        out.to_str().unwrap(),
        pa.to_str().unwrap(),
        pb.to_str().unwrap(),
    ]);
    let (avg, _) = ckpt::load::<f32>(&out).unwrap();
    assert_eq!(avg.get("w").unwrap().data(), &[1.0, 2.0, 2.0]);
}

#[test]
fn decode_without_cmvn_is_a_usage_problem() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus_dir = root.join("corpus");
    ok(&[
        "make-synth",
        "-n",
        "2",
        "--seed",
        "1",
        "--out",
        corpus_dir.to_str().unwrap(),
    ]);
    // No checkpoint/CMVN: runtime error (exit 2), not a crash.
    let code = run_cli(&[
        "decode",
        "--ckpt",
        root.join("missing.bin").to_str().unwrap(),
        "--manifest",
        corpus_dir.join("manifest_wav.tsv").to_str().unwrap(),
        "--vocab",
        corpus_dir.join("vocab.txt").to_str().unwrap(),
        "--out",
        root.join("h.tsv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}
