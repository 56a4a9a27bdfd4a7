use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgc_core::embed::write_embeddings;
use kgc_core::numerics::Checkpoint;
use tempfile::TempDir;

fn kgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// 30 nodes in three groups, three relations, deterministic edges, and a
/// 4-dimensional embedding per node that points at its group.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("toy");
        fs::create_dir(&data).unwrap();
        let mut rows = Vec::new();
        for h in 0..30usize {
            for r in 0..3usize {
                let t = (h * 7 + r * 11 + 3) % 30;
                if t != h {
                    rows.push(format!("rel{r}\tnode {h}\tnode {t}"));
                }
            }
        }
        let (test, rest) = rows.split_at(8);
        let (dev, train) = rest.split_at(8);
        for (name, part) in [("train.tsv", train), ("dev.tsv", dev), ("test.tsv", test)] {
            fs::write(data.join(name), part.join("\n") + "\n").unwrap();
        }
        let phrases: Vec<String> = (0..30).map(|i| format!("node {i}")).collect();
        let emb: Vec<f32> = (0..30)
            .flat_map(|i| {
                let g = i % 3;
                (0..4).map(move |k| if k == g { 1.0 } else { 0.05 * ((i + k) % 5) as f32 })
            })
            .collect();
        write_embeddings(&dir.path().join("emb.bin"), &dir.path().join("emb.phrases.txt"), &phrases, 4, &emb).unwrap();
        fs::write(
            dir.path().join("config.json"),
            r#"{
  "version": 1,
  "variant": "gcn+convtranse",
  "epochs": 3,
  "learning_rate": 0.01,
  "embedding_dim": 8,
  "gcn_layers": 1,
  "channels": 4,
  "kernel_width": 3,
  "batch_size": 16,
  "subgraph_edges": 40,
  "eval_every": 1,
  "seed": 1
}
"#,
        )
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, config, out) = (self.s("toy"), self.s("config.json"), self.s(out));
        let mut args = vec!["train", "--data", &data, "--config", &config, "--out-dir", &out];
        args.extend_from_slice(extra);
        kgc(&args)
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn stats_prints_a_table_row() {
    let f = Fixture::new();
    let out = f.s("stats");
    let o = ok(kgc(&["stats", "--data", &f.s("toy"), "--out-dir", &out]));
    let text = stdout(&o);
    assert!(text.starts_with("dataset\tnodes\tedges\trelations\tdensity\tavg_in_degree\n"));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "toy");
    assert_eq!(row[1], "30");
    assert_eq!(row[3], "3");
    assert!(f.path("stats/stats.json").is_file());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(kgc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kgc(&["stats", "--bogus"]).status.code(), Some(2));
    let o = kgc(&["stats", "--data", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--help"));
    let f = Fixture::new();
    // sim variant without a sim file
    let o = f.train("bad", &["--variant", "sim+gcn+convtranse"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(f.path("broken.json"), "{\"epochz\": 3}").unwrap();
    let o = kgc(&["train", "--data", &f.s("toy"), "--config", &f.s("broken.json"), "--out-dir", &f.s("x")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let f = Fixture::new();
    fs::write(f.path("garbage.bin"), b"nope").unwrap();
    fs::write(f.path("garbage.phrases.txt"), "node 0\n").unwrap();
    let o = kgc(&[
        "densify",
        "--data",
        &f.s("toy"),
        "--embeddings",
        &f.s("garbage.bin"),
        "--tau",
        "0.9",
        "--out-dir",
        &f.s("d"),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn split_writes_three_files() {
    let f = Fixture::new();
    ok(kgc(&["split", "--data", &f.s("toy"), "--seed", "3", "--out-dir", &f.s("split")]));
    let count = |n: &str| read(&f.path(&format!("split/{n}"))).lines().count();
    let (tr, dv, te) = (count("train.tsv"), count("dev.tsv"), count("test.tsv"));
    assert_eq!(tr + dv + te, 90);
    assert!(tr >= 72);
    ok(kgc(&["split", "--data", &f.s("toy"), "--seed", "3", "--out-dir", &f.s("split2")]));
    assert_eq!(read(&f.path("split/dev.tsv")), read(&f.path("split2/dev.tsv")));
}

#[test]
fn densify_modes_write_tsv() {
    let f = Fixture::new();
    for (mode, value) in [("--tau", Some("0.95")), ("--cap", Some("200")), ("--tail", None)] {
        let out = f.s(&format!("sim{mode}"));
        let (data, emb) = (f.s("toy"), f.s("emb.bin"));
        let mut args = vec!["densify", "--data", &data, "--embeddings", &emb, "--out-dir", &out, mode];
        if let Some(v) = value {
            args.push(v);
        } else {
            args.extend(["--tail-samples", "300", "--tail-k", "1.0"]);
        }
        ok(kgc(&args));
        let tsv = read(&Path::new(&out).join("sim.tsv"));
        for line in tsv.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 3);
            assert!(cols[0].starts_with("node ") && cols[1].starts_with("node "));
            assert!(cols[2].parse::<f64>().unwrap() <= 1.0 + 1e-12);
        }
        let summary: serde_json::Value = serde_json::from_str(&read(&Path::new(&out).join("sim.json"))).unwrap();
        assert_eq!(summary["pairs"].as_u64().unwrap() as usize, tsv.lines().count());
    }
    let cap: serde_json::Value = serde_json::from_str(&read(&f.path("sim--cap/sim.json"))).unwrap();
    assert!(cap["pairs"].as_u64().unwrap() <= 200);
}

#[test]
fn training_is_reproducible_and_checkpoint_records_config() {
    let f = Fixture::new();
    ok(f.train("a", &["--seed", "7"]));
    ok(f.train("b", &["--seed", "7"]));
    let a = fs::read(f.path("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(f.path("b/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with("epoch,split,mrr,hits1,hits3,hits10\n"));

    let ckpt = Checkpoint::load(&f.path("a/model.ckpt")).unwrap();
    let recorded = &ckpt.metadata["extra"]["train_config"];
    assert_eq!(recorded["seed"], 7);
    assert_eq!(recorded["epochs"], 3);
    let resolved: serde_json::Value = serde_json::from_str(&read(&f.path("a/config.json"))).unwrap();
    assert_eq!(resolved["train"]["seed"], 7);
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    ok(f.train("o", &["--epochs", "2", "--variant", "distmult"]));
    let resolved: serde_json::Value = serde_json::from_str(&read(&f.path("o/config.json"))).unwrap();
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["train"]["variant"], "distmult");
    assert_eq!(resolved["train"]["channels"], 4);
}

#[test]
fn paths_can_come_from_the_config_file() {
    let f = Fixture::new();
    let config = format!(
        r#"{{"data": {:?}, "out_dir": {:?}, "epochs": 2, "embedding_dim": 8, "channels": 2, "kernel_width": 3, "variant": "convtranse"}}"#,
        f.s("toy"),
        f.s("from_file")
    );
    fs::write(f.path("paths.json"), config).unwrap();
    ok(kgc(&["train", "--config", &f.s("paths.json")]));
    assert!(f.path("from_file/metrics.csv").is_file());
}

#[test]
fn eval_and_permutation_on_a_checkpoint() {
    let f = Fixture::new();
    ok(f.train("m", &[]));
    let ckpt = f.s("m/model.ckpt");
    let o = ok(kgc(&["eval", "--checkpoint", &ckpt, "--split", "test", "--out-dir", &f.s("ev")]));
    let text = stdout(&o);
    assert!(text.starts_with("model\tsplit\tMRR\tHITS@1\tHITS@3\tHITS@10\n"));
    assert!(text.contains("gcn+convtranse\ttest\t"));
    let csv = read(&f.path("ev/eval.csv"));
    assert_eq!(csv.lines().count(), 4);

    let o = ok(kgc(&["perm-test", "--checkpoint", &ckpt, "--split", "dev", "--seed", "2", "--out-dir", &f.s("pt")]));
    assert!(stdout(&o).contains("delta MRR"));
    let perm = read(&f.path("pt/perm.csv"));
    assert!(perm.starts_with("setting,mrr,hits1,hits3,hits10\nbase,"));
    assert!(perm.contains("\nshuffled,"));
}

#[test]
fn fused_model_with_text_and_sim_edges() {
    let f = Fixture::new();
    let (data, emb) = (f.s("toy"), f.s("emb.bin"));
    ok(kgc(&["densify", "--data", &data, "--embeddings", &emb, "--tau", "0.99", "--out-dir", &f.s("sim")]));
    let sim = f.s("sim/sim.tsv");
    ok(f.train(
        "fused",
        &["--variant", "sim+gcn+bert+convtranse", "--embeddings", &emb, "--sim", &sim, "--mask-horizon", "2"],
    ));
    // Paths recorded in the checkpoint are enough for evaluation.
    ok(kgc(&["eval", "--checkpoint", &f.s("fused/model.ckpt"), "--out-dir", &f.s("fev")]));
}

#[test]
fn density_ablation_writes_one_row_per_level() {
    let f = Fixture::new();
    let (data, config, out) = (f.s("toy"), f.s("config.json"), f.s("abl"));
    let o = kgc(&["stats", "--data", &data]);
    let density: f64 = stdout(&o).lines().nth(1).unwrap().split('\t').nth(4).unwrap().parse().unwrap();
    let levels = format!("{},{}", density * 0.9, density * 0.5);
    ok(kgc(&[
        "ablate-density",
        "--data",
        &data,
        "--config",
        &config,
        "--densities",
        &levels,
        "--out-dir",
        &out,
    ]));
    let csv = read(&f.path("abl/ablation.csv"));
    assert!(csv.starts_with("target_density,density,edges,mrr,hits1,hits3,hits10\n"));
    assert_eq!(csv.lines().count(), 3);
    let bad = kgc(&["ablate-density", "--data", &data, "--config", &config, "--densities", "1e-9,1e-3", "--out-dir", &out]);
    assert_eq!(bad.status.code(), Some(2));
}
