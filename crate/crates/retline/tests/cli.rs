use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn retline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retline"))
        .args(args)
        .env_remove("RETLINE_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 4

[model]
layers = 2
heads = 2
d_model = 16
d_ff = 32
max_text_len = 8
max_image_tokens = 64
cnn_channels = [2, 3, 3]

[train]
epochs = 1
batch_size = 4
augment = false

[data]
alphabet = "abc"
min_len = 2
max_len = 4
train_lines = 8
val_lines = 4
"#;

#[test]
fn bench_flops_recurrent_rows_have_the_published_total() {
    let dir = tempfile::tempdir().unwrap();
    let o = retline(&["bench-flops", "--form", "recurrent", "--d", "8", "--n", "1..4", "--out-dir", path(dir.path())]);
    assert!(o.status.success());
    let text = fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert_eq!(text, stdout(&o));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h = r.headers().unwrap().clone();
    let col = h.iter().position(|c| c == "closed_form_total").unwrap();
    let n = h.iter().position(|c| c == "n").unwrap();
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(&row[col], "135");
        assert_eq!(row[n].parse::<usize>().unwrap(), i + 1);
    }
    assert!(dir.path().join("config.echo.toml").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(retline(&["bench-flops", "--bogus"]).status.code(), Some(2));
    assert_eq!(retline(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(retline(&[]).status.code(), Some(2));
}

#[test]
fn failed_preconditions_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = retline(&["bench-flops", "--n", "4..1", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = retline(&["bench-flops", "--form", "quantum", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let missing = dir.path().join("missing.toml");
    let o = retline(&["gen-data", "--config", path(&missing), "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let o = retline(&["gen-data", "--config", path(&bad), "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn environment_overrides_the_config_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_retline"))
        .args(["gen-data", "--split", "val", "--out-dir", path(&out)])
        .env("RETLINE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("val.tsv")).unwrap().lines().count(), 4);
}

#[test]
fn verify_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = retline(&["verify", "--seed", "7", "--out-dir", path(&a)]);
    let ob = retline(&["verify", "--seed", "7", "--out-dir", path(&b)]);
    let ta = fs::read_to_string(a.join("verify.txt")).unwrap();
    assert_eq!(ta, fs::read_to_string(b.join("verify.txt")).unwrap());
    assert_eq!(oa.status.code(), ob.status.code());
    let failed = ta.lines().any(|l| l.starts_with("[FAIL]"));
    assert_eq!(oa.status.code(), Some(if failed { 1 } else { 0 }));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(retline(&["gen-data", "--count", "3", "--seed", "2", "--out-dir", path(d)]).status.success());
    }
    for f in ["train.tsv", "train.json", "images/train-00000.pgm", "images/train-00002.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_decode_maps_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = retline(&["train", "--config", path(&cfg), "--out-dir", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,lr,loss,val_cer,val_wer\n"));
    assert_eq!(metrics.lines().count(), 2);

    let again = dir.path().join("again");
    assert!(retline(&["train", "--config", path(&cfg), "--out-dir", path(&again)]).status.success());
    assert_eq!(fs::read(run.join("model.bin")).unwrap(), fs::read(again.join("model.bin")).unwrap());
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());

    let ckpt = run.join("model");
    let val = run.join("data").join("val.tsv");
    let decode = |extra: &[&str], out: &Path| {
        let mut args = vec!["decode", "--checkpoint", path(&ckpt), "--manifest", path(&val), "--out-dir", path(out)];
        args.extend_from_slice(extra);
        let o = retline(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let rec = decode(&["--beam", "1"], &dir.path().join("d1"));
    let kv = decode(&["--beam", "1", "--backend", "kv"], &dir.path().join("d2"));
    assert_eq!(rec, kv);
    assert_eq!(rec.lines().count(), 4);
    let stats = fs::read_to_string(dir.path().join("d2").join("decode_stats.csv")).unwrap();
    assert!(stats.starts_with("step,backend,beam,mults,adds,live_elements\n"));
    assert!(stats.lines().nth(1).unwrap().contains(",kv,1,"));
    decode(&["--beam", "3"], &run);

    let o = retline(&["dump-maps", "--checkpoint", path(&ckpt), "--text", "abca", "--out-dir", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("maps").join("layer1_head0_scores.pgm").exists());
    assert!(run.join("maps").join("layer0_head1_decay.pgm").exists());
    assert!(run.join("maps.csv").exists());

    assert!(retline(&["bench-memory", "--out-dir", path(&run)]).status.success());
    let o = retline(&["report", "--out-dir", path(&run)]);
    assert!(o.status.success());
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(report.starts_with("section,key,value\n"));
    for key in ["train,final_val_cer", "decode,lines,4", "memory,flag"] {
        assert!(report.contains(key), "{key} missing from report");
    }
    assert_eq!(stdout(&o), fs::read_to_string(run.join("report.txt")).unwrap());
}

#[test]
fn baseline_rejects_the_recurrent_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.toml");
    fs::write(&cfg, TINY.replace("[model]\n", "[model]\nmixer = \"attention\"\n")).unwrap();
    let run = dir.path().join("run");
    assert!(retline(&["train", "--config", path(&cfg), "--out-dir", path(&run)]).status.success());
    let (ckpt, val) = (run.join("model"), run.join("data").join("val.tsv"));
    let args = ["decode", "--checkpoint", path(&ckpt), "--manifest", path(&val), "--out-dir", path(&run)];
    assert!(retline(&args).status.success(), "default backend is kv");
    let mut rec = args.to_vec();
    rec.extend(["--backend", "recurrent"]);
    assert_eq!(retline(&rec).status.code(), Some(1));
}
