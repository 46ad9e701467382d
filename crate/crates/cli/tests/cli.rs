use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inrcodec::codec::Codec;
use inrcodec::compressor::Compressor;
use inrcodec::data::*;
use inrcodec::meta::{MetaModel, TrainingStats};
use inrcodec::metrics::{mse, psnr};
use inrcodec::Tensor;

const CONFIG: &str = r#"{
  "inr": {"coord_dim": 2, "feature_dim": 3, "depth": 3, "width": 16, "omega0": 30.0,
          "gate_rank": 1, "latent_dim": 16, "predictor_width": 16, "predictor_blocks": 1},
  "meta": {"steps": 12, "batch_size": 4, "outer": {"lr": 0.001}},
  "rd": {"lambda": 1000.0, "steps": 40, "batch_size": 4, "width": 16, "code_dim": 16,
         "optimizer": {"lr": 0.003}},
  "eval": {"dataset": "toy"},
  "seed": 3
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inrcodec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("config.json"), CONFIG).unwrap();
        ok(&["synth", "--output", p(&root.join("train")), "--count", "16", "--size", "8", "--seed", "3"]);
        ok(&["synth", "--output", p(&root.join("test")), "--count", "2", "--size", "8", "--seed", "4"]);
        ok(&[
            "meta-train",
            "--config",
            p(&root.join("config.json")),
            "--data",
            p(&root.join("train")),
            "--model",
            p(&root.join("model.bin")),
        ]);
        Setup { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        p(&self.root.join(name)).to_string()
    }

    fn quantizer(&self, name: &str, extra: &[&str]) {
        let mut args = vec![
            "train-quantizer".to_string(),
            "--config".into(),
            self.path("config.json"),
            "--model".into(),
            self.path("model.bin"),
            "--data".into(),
            self.path("train"),
            "--quantizer".into(),
            self.path(name),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_round_trip() {
    let s = Setup::new();
    for side in ["model.bin", "model.bin.stats.json", "model.bin.latents.ntf"] {
        assert!(s.root.join(side).exists(), "{side} missing");
    }
    s.quantizer("q.bin", &[]);
    let c = ok(&[
        "compress", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("q.bin"), "--data", &s.path("test"), "--output", &s.path("bits.vcnr"),
    ]);
    assert_eq!(c["items"], 2);
    assert!(c["rate"].as_f64().unwrap() > 0.0);
    assert_eq!(c["rate_unit"], "bpp");

    // Same config and seed, same bytes.
    ok(&[
        "compress", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("q.bin"), "--data", &s.path("test"), "--output", &s.path("bits2.vcnr"),
    ]);
    assert_eq!(std::fs::read(s.root.join("bits.vcnr")).unwrap(), std::fs::read(s.root.join("bits2.vcnr")).unwrap());

    ok(&[
        "decompress", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("q.bin"), "--input", &s.path("bits.vcnr"), "--output", &s.path("recon"),
    ]);
    let via_files = ok(&[
        "eval", "--config", &s.path("config.json"), "--data", &s.path("test"),
        "--input", &s.path("bits.vcnr"), "--recon", &s.path("recon"),
    ]);
    let direct = ok(&[
        "eval", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("q.bin"), "--data", &s.path("test"), "--input", &s.path("bits.vcnr"),
    ]);
    let a = via_files["psnr_db"].as_f64().unwrap();
    let b = direct["psnr_db"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-9);
    assert_eq!(via_files["rate"], c["rate"]);

    // In-process pipeline.
    let model = MetaModel::load(s.root.join("model.bin")).unwrap();
    let stats = TrainingStats::load(s.root.join("model.bin.stats.json")).unwrap();
    let comp = Compressor::load(s.root.join("q.bin")).unwrap();
    let items = load_dataset(s.root.join("test"), true).unwrap();
    let codec = Codec::new(&model, &comp, ModalitySpec::default(), stats.features, 3).unwrap();
    let bytes = codec.compress(&items, 1).unwrap().pack().unwrap();
    assert_eq!(bytes, std::fs::read(s.root.join("bits.vcnr")).unwrap());
    let decoded = codec.decompress(&bytes, 1).unwrap();
    let mean: f64 = items
        .iter()
        .zip(&decoded)
        .map(|(o, d)| psnr(mse(o.data(), d.data())))
        .sum::<f64>()
        / items.len() as f64;
    assert!((mean - a).abs() < 1e-9, "cli {a} vs in-process {mean}");
}

#[test]
fn wrong_quantizer_exits_with_code_two() {
    let s = Setup::new();
    s.quantizer("q.bin", &[]);
    s.quantizer("other.bin", &["--lambda", "10", "--seed", "11"]);
    ok(&[
        "compress", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("q.bin"), "--data", &s.path("test"), "--output", &s.path("bits.vcnr"),
    ]);
    let out = run(&[
        "decompress", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--quantizer", &s.path("other.bin"), "--input", &s.path("bits.vcnr"), "--output", &s.path("recon"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let expected = format!("{:016x}", Compressor::load(s.root.join("other.bin")).unwrap().hash());
    let found = format!("{:016x}", Compressor::load(s.root.join("q.bin")).unwrap().hash());
    assert!(err.contains(&expected) && err.contains(&found), "{err}");
    assert!(!s.root.join("recon").exists());
}

#[test]
fn fit_writes_one_latent_per_item() {
    let s = Setup::new();
    let v = ok(&[
        "fit", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--data", &s.path("test"), "--output", &s.path("fit.ntf"),
    ]);
    assert_eq!(v["patches"], 2);
    let t = load_ntf(s.root.join("fit.ntf")).unwrap().to_tensor(false);
    assert_eq!(t.shape(), &[2, 16]);
}

#[test]
fn rd_curve_writes_measured_and_reference_csv() {
    let s = Setup::new();
    let v = ok(&[
        "rd-curve", "--config", &s.path("config.json"), "--model", &s.path("model.bin"),
        "--data", &s.path("train"), "--input", &s.path("test"), "--output", &s.path("rd.csv"),
        "--lambda", "10", "--lambda", "1000", "--lambda", "100000",
    ]);
    let csv = std::fs::read_to_string(s.root.join("rd.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("toy,")));
    let reference = std::fs::read_to_string(s.root.join("rd_reference.csv")).unwrap();
    assert_eq!(reference, inrcodec::metrics::REFERENCE_RD_CSV);
    assert_eq!(v["reference"], s.path("rd_reference.csv"));
    let rates: Vec<f64> = v["points"].as_array().unwrap().iter().map(|p| p["rate"].as_f64().unwrap()).collect();
    for w in rates.windows(2) {
        assert!(w[1] >= w[0] * 0.95, "rates {rates:?}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"meta": {"inner_steps": "three"}}"#).unwrap();
    let out = run(&["fit", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta.inner_steps"));
}

#[test]
fn numeric_fault_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("config.json"), CONFIG).unwrap();
    let mut data = vec![0.5; 8 * 8 * 3];
    data[5] = f64::NAN;
    let items = vec![NtfArray::from_f64(&Tensor::new([8, 8, 3], data)); 4];
    write_dataset(root.join("nan"), &items).unwrap();
    let out = run(&[
        "meta-train", "--config", p(&root.join("config.json")), "--data", p(&root.join("nan")),
        "--model", p(&root.join("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
