use std::fs;
use std::path::Path;

use medusa::cli::{apply_override, load_config, run};
use medusa::model::load_checkpoint;
use serde_json::{json, Value};

const TINY: &str = r#"{
  "corpus": {"n_utterances": 20, "min_tokens": 3, "max_tokens": 8, "d_feat": 6, "vocab_size": 16},
  "model": {"vocab_size": 16, "d_model": 16, "n_enc_layers": 1, "n_dec_layers": 2, "n_attn_heads": 4,
            "d_ff": 24, "d_feat": 6, "max_src_frames": 90, "max_tgt_tokens": 30, "k": 2},
  "train": {
    "base": {"learning_rate": 0.01, "batch_size": 2, "max_steps": 8, "eval_every": 4},
    "medusa": {"learning_rate": 0.01, "batch_size": 2, "max_steps": 8, "eval_every": 4}
  }
}"#;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("medusa").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> std::path::PathBuf {
        let out = self.path("corpus");
        if !out.exists() {
            let (code, _, err) = cli(&[
                "gen-data",
                "--config",
                s(&self.path("cfg.json")),
                "--out",
                s(&out),
            ]);
            assert_eq!(code, 0, "{err}");
        }
        out
    }

    fn trained(&self) -> std::path::PathBuf {
        let ckpt = self.path("linear.ckpt");
        if !ckpt.exists() {
            let corpus = self.corpus();
            let (code, _, err) = cli(&[
                "train",
                "--config",
                s(&self.path("cfg.json")),
                "--corpus",
                s(&corpus),
                "--variant",
                "linear",
                "--out-checkpoint",
                s(&ckpt),
                "--save-base",
                s(&self.path("base.ckpt")),
            ]);
            assert_eq!(code, 0, "{err}");
        }
        ckpt
    }
}

#[test]
fn gen_data_writes_three_deterministic_files() {
    let f = Fixture::new();
    let a = f.corpus();
    let b = f.path("again");
    let (code, _, _) = cli(&[
        "gen-data",
        "--config",
        s(&f.path("cfg.json")),
        "--out",
        s(&b),
    ]);
    assert_eq!(code, 0);
    for name in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap()
        );
    }
}

#[test]
fn missing_config_exits_two_and_names_path() {
    let (code, _, err) = cli(&["gen-data", "--config", "/nope/cfg.json", "--out", "/tmp/x"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nope/cfg.json"));
}

#[test]
fn unknown_keys_and_bad_values_exit_two() {
    let f = Fixture::new();
    let cfg = f.path("cfg.json");
    let out = f.path("o");
    for set in [
        "corpus.colour=3",
        "train.base.learning_rate=-1",
        "model.vocab_size=12",
        "nonsense",
    ] {
        let (code, _, err) = cli(&[
            "gen-data",
            "--config",
            s(&cfg),
            "--set",
            set,
            "--out",
            s(&out),
        ]);
        assert_eq!(code, 2, "{set}: {err}");
    }
    let (code, _, _) = cli(&["gen-data", "--bogus-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn overrides_reach_nested_fields() {
    let mut v = json!({"train": {"medusa": null}});
    apply_override(&mut v, "train.medusa.learning_rate=0.5").unwrap();
    apply_override(&mut v, "policy.mode=exact_match").unwrap();
    assert_eq!(v["train"]["medusa"]["learning_rate"], json!(0.5));
    assert_eq!(v["policy"]["mode"], Value::String("exact_match".into()));
    let rc = load_config(
        None,
        &[
            "policy.epsilon=0.05".into(),
            "train.medusa.crop.min_len=4".into(),
        ],
    )
    .unwrap();
    assert_eq!(rc.policy.epsilon, 0.05);
    assert_eq!(rc.train.medusa.crop.unwrap().min_len, 4);
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let log = fs::read_to_string(format!("{}.log.jsonl", s(&ckpt))).unwrap();
    assert!(!log.is_empty());
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "base");
    assert!(log.lines().any(|l| l.contains("\"medusa\"")));
    let m = load_checkpoint(&ckpt).unwrap();
    assert_eq!(m.config().k, 2);
    let leftovers: Vec<_> = fs::read_dir(f.dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn block_training_keeps_base_parameters_byte_equal() {
    let f = Fixture::new();
    f.trained();
    let base = f.path("base.ckpt");
    let block = f.path("block.ckpt");
    let (code, _, err) = cli(&[
        "train",
        "--config",
        s(&f.path("cfg.json")),
        "--corpus",
        s(&f.corpus()),
        "--variant",
        "block",
        "--base",
        s(&base),
        "--out-checkpoint",
        s(&block),
    ]);
    assert_eq!(code, 0, "{err}");
    let b = load_checkpoint(&base).unwrap();
    let m = load_checkpoint(&block).unwrap();
    for (name, t) in b.params().iter() {
        let other = m.params().get(name).unwrap();
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data()), bits(other.data()), "{name}");
    }
}

#[test]
fn exact_match_decode_equals_greedy_decode() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let corpus = f.corpus();
    let (c1, greedy, _) = cli(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&corpus),
        "--mode",
        "greedy",
        "--json",
    ]);
    let (c2, medusa, _) = cli(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&corpus),
        "--mode",
        "medusa",
        "--policy",
        "exact-match",
        "--json",
    ]);
    assert_eq!((c1, c2), (0, 0));
    let tokens = |text: &str| -> Vec<Value> {
        text.lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["result"]["tokens"].clone())
            .collect()
    };
    let n_test = fs::read_to_string(corpus.join("test.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(greedy.lines().count(), n_test);
    assert_eq!(tokens(&greedy), tokens(&medusa));
    let first: Value = serde_json::from_str(medusa.lines().next().unwrap()).unwrap();
    for field in [
        "n_iterations",
        "n_decoder_forward_passes",
        "accepted_per_iteration",
    ] {
        assert!(first["result"].get(field).is_some(), "{field}");
    }
    let (c3, assisted, err) = cli(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&corpus),
        "--mode",
        "assisted",
        "--assistant",
        s(&f.path("base.ckpt")),
        "--json",
    ]);
    assert_eq!(c3, 0, "{err}");
    assert_eq!(tokens(&greedy), tokens(&assisted));
}

#[test]
fn decode_with_bad_checkpoint_exits_two() {
    let f = Fixture::new();
    let (code, _, err) = cli(&[
        "decode",
        "--checkpoint",
        "/nope.ckpt",
        "--input",
        s(&f.corpus()),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("/nope.ckpt"));
    let junk = f.path("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let (code, _, _) = cli(&[
        "decode",
        "--checkpoint",
        s(&junk),
        "--input",
        s(&f.corpus()),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn bench_emits_json_and_csv() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let csv = f.path("buckets.csv");
    let (code, out, err) = cli(&[
        "bench",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--repeats",
        "1",
        "--json",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_str(out.trim()).unwrap();
    assert!(report["pass_speedup"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("min_len,max_len,mean_speedup,n\n"));
    assert_eq!(
        csv.lines().count(),
        report["buckets"].as_array().unwrap().len() + 1
    );
}

#[test]
fn ablate_emits_one_row_per_k() {
    let f = Fixture::new();
    let (code, out, err) = cli(&[
        "ablate",
        "--config",
        s(&f.path("cfg.json")),
        "--corpus",
        s(&f.corpus()),
        "--k-list",
        "2,4,8",
        "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<Value> = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(
        rows.iter()
            .map(|r| r["k"].as_u64().unwrap())
            .collect::<Vec<_>>(),
        vec![2, 4, 8]
    );
    let (code, text, _) = cli(&[
        "ablate",
        "--config",
        s(&f.path("cfg.json")),
        "--corpus",
        s(&f.corpus()),
        "--k-list",
        "2,4,8",
    ]);
    assert_eq!(code, 0);
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn pseudo_label_drops_ceil_five_percent() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let out_file = f.path("pseudo.jsonl");
    let unlabeled = f.corpus().join("train.jsonl");
    let n = fs::read_to_string(&unlabeled).unwrap().lines().count();
    let (code, out, err) = cli(&[
        "pseudo-label",
        "--checkpoint",
        s(&ckpt),
        "--unlabeled",
        s(&unlabeled),
        "--out",
        s(&out_file),
        "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let set: Value = serde_json::from_str(out.trim()).unwrap();
    let dropped = set["items"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["kept"] == false)
        .count();
    assert_eq!(dropped, (n as f64 * 0.05).ceil() as usize);
    assert_eq!(
        fs::read_to_string(out_file).unwrap().lines().count(),
        n - dropped
    );
}
