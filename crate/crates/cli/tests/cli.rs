use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lshnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lshnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TOY: &str = "\
model.layers = 16:relu:1.0, 200:softmax:0.1
model.c2 = 0.5
data.synth_classes = 200
data.synth_per_class = 3
data.synth_features = 64
train.epochs = 2
train.batch_size = 50
train.lr = 0.01
train.seed = 3
output.model = model.bin
output.report = report.jsonl
";

fn write_config(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn help_lists_every_config_key() {
    let dir = TempDir::new().unwrap();
    let out = lshnet(&["train", "--help"], dir.path());
    assert_eq!(code(&out), 0);
    let help = stdout(&out);
    for key in [
        "model.layers", "model.seed", "model.c1", "model.c2", "model.l_max", "model.k_bits", "model.num_tables",
        "model.bucket_cap", "train.batch_size", "train.epochs", "train.lr", "train.rebuild_interval", "train.aln",
        "train.inference_sparsity", "train.seed", "train.deterministic", "train.workers", "data.train", "data.test",
        "data.index_base", "data.synth_classes", "data.synth_per_class", "data.synth_features", "data.synth_sigma",
        "data.synth_seed", "output.model", "output.report", "output.bench", "bench.checkpoints_per_epoch",
        "bench.mode", "bench.eval_samples",
    ] {
        assert!(help.contains(key), "missing {key}");
    }
}

#[test]
fn train_writes_model_and_full_report_deterministically() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", TOY);
    let out = lshnet(&["train", "run.cfg"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = fs::read(dir.path().join("model.bin")).unwrap();
    // 400 training samples in batches of 50, two epochs.
    let report = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 16);
    assert_eq!(stdout(&out).lines().count(), 16);
    for key in ["\"epoch\"", "\"batch\"", "\"loss\"", "\"p_at_1\"", "\"seconds\""] {
        assert!(report.lines().next().unwrap().contains(key));
    }

    let out = lshnet(&["train", "run.cfg"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(dir.path().join("model.bin")).unwrap(), first);
}

#[test]
fn infeasible_sparsity_exits_2_without_files() {
    let dir = TempDir::new().unwrap();
    let cfg = TOY.replace("200:softmax:0.1", "2000:softmax:0.2").replace("model.c2 = 0.5", "model.c2 = 0.1");
    write_config(dir.path(), "run.cfg", &cfg);
    let out = lshnet(&["train", "run.cfg"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("infeasible sparsity"), "{}", stderr(&out));
    assert!(stderr(&out).contains("raise c2"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "a.cfg", &format!("{TOY}train.momentum = 0.9\n"));
    let out = lshnet(&["train", "a.cfg"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown key"));
    write_config(dir.path(), "b.cfg", &TOY.replace("train.lr = 0.01", "train.lr = fast"));
    assert_eq!(code(&lshnet(&["train", "b.cfg"], dir.path())), 2);
}

#[test]
fn label_out_of_range_exits_3_without_files() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("train.txt"), "2 4 9\n0 0:1.0 2:0.5\n8 1:1.0\n").unwrap();
    write_config(
        dir.path(),
        "run.cfg",
        "model.layers = 4:softmax:1.0\ndata.train = train.txt\noutput.model = model.bin\noutput.report = r.jsonl\n",
    );
    let out = lshnet(&["train", "run.cfg"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!dir.path().join("model.bin").exists());
    assert!(!dir.path().join("r.jsonl").exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn malformed_data_exits_3() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("train.txt"), "1 4 4\n0 0:x\n").unwrap();
    write_config(dir.path(), "run.cfg", "model.layers = 4:softmax:1.0\ndata.train = train.txt\noutput.model = m.bin\n");
    assert_eq!(code(&lshnet(&["train", "run.cfg"], dir.path())), 3);
}

#[test]
fn missing_files_exit_4() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", TOY);
    assert_eq!(code(&lshnet(&["eval", "--model", "nope.bin", "--config", "run.cfg"], dir.path())), 4);
    assert_eq!(code(&lshnet(&["train", "absent.cfg"], dir.path())), 4);
    write_config(dir.path(), "d.cfg", "model.layers = 4:softmax:1.0\ndata.train = none.txt\noutput.model = m.bin\n");
    assert_eq!(code(&lshnet(&["train", "d.cfg"], dir.path())), 4);
}

#[test]
fn eval_on_noiseless_task_is_exact() {
    let dir = TempDir::new().unwrap();
    write_config(
        dir.path(),
        "run.cfg",
        "model.layers = 50:softmax:1.0\n\
         data.synth_classes = 50\ndata.synth_per_class = 2\ndata.synth_features = 64\ndata.synth_sigma = 0\n\
         train.epochs = 40\ntrain.batch_size = 10\ntrain.lr = 0.05\noutput.model = model.bin\n",
    );
    assert_eq!(code(&lshnet(&["train", "run.cfg"], dir.path())), 0);
    let out = lshnet(&["eval", "--model", "model.bin", "--config", "run.cfg", "--k", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out);
    assert!(line.starts_with("p@1=1.000000 latency_ms="), "{line}");
    assert!(line.trim_end().ends_with("mode=dense"));

    let out = lshnet(&["eval", "--model", "model.bin", "--config", "run.cfg", "--mode", "sparse"], dir.path());
    assert!(stdout(&out).trim_end().ends_with("mode=sparse"), "{}", stdout(&out));
}

#[test]
fn eval_dimension_mismatch_exits_3() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", TOY);
    assert_eq!(code(&lshnet(&["train", "run.cfg"], dir.path())), 0);
    fs::write(dir.path().join("other.txt"), "1 10 200\n0 0:1.0\n").unwrap();
    let out = lshnet(&["eval", "--model", "model.bin", "--data", "other.txt"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn corrupt_model_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", TOY);
    fs::write(dir.path().join("bad.bin"), b"BLTM\x01").unwrap();
    let out = lshnet(&["eval", "--model", "bad.bin", "--config", "run.cfg"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn predict_prints_k_labels_per_example() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", TOY);
    assert_eq!(code(&lshnet(&["train", "run.cfg"], dir.path())), 0);
    fs::write(dir.path().join("q.txt"), "2 64 200\n0 0:1.0 5:0.5\n3 7:-1.0\n").unwrap();
    let out = lshnet(&["predict", "--model", "model.bin", "--data", "q.txt", "--k", "3"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        let ids: Vec<u32> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i < 200));
    }
}

#[test]
fn autotune_prints_plan() {
    let dir = TempDir::new().unwrap();
    let out = lshnet(&["autotune", "--dim", "670091", "--sparsity", "0.05"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "K=12\nL=205\nR=328\ncost_ratio=0.053671\n");
    let out = lshnet(&["autotune", "--dim", "10000", "--sparsity", "0.2"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_csv_has_two_checkpoints_per_epoch() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", &format!("{TOY}output.bench = curve.csv\nbench.mode = sparse\n"));
    let out = lshnet(&["bench", "run.cfg"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seconds,p_at_1"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (s, p) = l.split_once(',').unwrap();
            (s.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[1].0 >= w[0].0));
    assert!(rows.iter().all(|&(_, p)| (0.0..=1.0).contains(&p)));
}

#[test]
fn workers_key_is_accepted() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "run.cfg", &format!("{TOY}train.workers = 2\n"));
    let out = lshnet(&["train", "run.cfg"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
