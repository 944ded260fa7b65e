use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_fixpool");

const TINY: &str = "\
n_classes = 8
per_class = 30
dim = 4
n_train_classes = 5
n_way = 3
k_shot = 2
q_query = 3
embedding_dim = 4
epochs = 2
episodes_per_epoch = 20
eval_episodes = 20
diag_episodes = 50
tic_episodes = 100
stability_tasks = 6
stability_probes = 5
stability_steps = 10
n_perturbations = 3
oracle_mc = 2000
oracle_empirical_tasks = 200
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FIXPOOL_WORKERS").output().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_pools_output_and_errors() {
    let out = run(&["count-pools", "64", "600", "5", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("= 755.5\n") && text.contains("= 59.0\n"), "{text}");
    let out = run(&["count-pools", "1", "5", "5", "5"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().matches("= 0.0\n").count(), 2);
    assert_eq!(run(&["count-pools", "4", "3", "4", "2"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "bogus_key = 1\n");
    assert_eq!(run(&["train", s(&bad)]).status.code(), Some(2));
    let no_pool = write_config(dir.path(), "fml.cfg", "objective = fixml\n");
    assert_eq!(run(&["train", s(&no_pool)]).status.code(), Some(2));
    let interp = write_config(dir.path(), "interp.cfg", "checkpoint_fml = a.ckpt\n");
    assert_eq!(run(&["diagnose", "interpolate", s(&interp)]).status.code(), Some(2));
    let empty = write_config(dir.path(), "oracle.cfg", "oracle_population = meta\noracle_tasks = 0\n");
    assert_eq!(run(&["oracle", s(&empty)]).status.code(), Some(2));
    assert_eq!(run(&["train", s(&dir.path().join("missing.cfg"))]).status.code(), Some(3));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.cfg", "checkpoint = nowhere.ckpt\n");
    assert_eq!(run(&["eval", s(&cfg)]).status.code(), Some(3));
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.cfg", "lr = 10000\n");
    assert_eq!(run(&["train", s(&cfg)]).status.code(), Some(4));
}

#[test]
fn train_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.cfg", "objective = fixml\npool_seed = 4\ntrack_pools = 2\n");
    let t = Instant::now();
    assert!(run(&["train", s(&cfg)]).status.success());
    assert!(t.elapsed().as_secs_f64() < 5.0);
    let run_dir = dir.path().join("run");
    let first = std::fs::read(run_dir.join("trajectory.csv")).unwrap();
    let header = String::from_utf8(first.clone()).unwrap();
    assert!(header.starts_with("epoch,train_loss,ml_loss,ml_acc,pool_0_loss,pool_1_loss\n"));
    for f in ["config.lock", "final.ckpt", "pools.csv", "checkpoints/epoch_00000.ckpt", "checkpoints/epoch_00002.ckpt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let pools = std::fs::read_to_string(run_dir.join("pools.csv")).unwrap();
    assert_eq!(pools.lines().filter(|l| l.starts_with("base,")).count(), 5);
    assert!(run(&["train", s(&cfg)]).status.success());
    assert_eq!(std::fs::read(run_dir.join("trajectory.csv")).unwrap(), first);
}

#[test]
fn eval_defaults_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.cfg", "");
    assert!(run(&["train", s(&cfg)]).status.success());
    assert!(run(&["eval", s(&cfg)]).status.success());
    let path = dir.path().join("run/eval.csv");
    let a = std::fs::read_to_string(&path).unwrap();
    assert!(a.lines().nth(1).unwrap().starts_with("test,2000,"));
    assert!(run(&["eval", s(&cfg)]).status.success());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), a);
}

fn polylines(svg: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants().filter(|n| n.has_tag_name("polyline")).count()
}

#[test]
fn diagnostics_write_matching_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let ml = write_config(dir.path(), "ml.cfg", "run_dir = ml\n");
    let fml = write_config(
        dir.path(),
        "fml.cfg",
        "run_dir = fml\nobjective = fixml\npool_seed = 1\ncheckpoint_fml = fml/final.ckpt\ncheckpoint_ml = ml/final.ckpt\n",
    );
    assert!(run(&["train", s(&ml)]).status.success());
    assert!(run(&["train", s(&fml)]).status.success());
    for which in ["interpolate", "pools", "tic", "gap", "stability"] {
        let out = run(&["diagnose", which, s(&fml)]);
        assert!(out.status.success(), "{which}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let rd = dir.path().join("fml");
    let read = |f: &str| std::fs::read_to_string(rd.join(f)).unwrap();

    let pools = read("pool_trajectory.csv");
    let header: Vec<&str> = pools.lines().next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|h| h.starts_with("green_")).count(), 10);
    assert_eq!(pools.lines().count(), 1 + 3);
    assert_eq!(polylines(&read("pool_trajectory.svg")), 12);

    let interp = read("interpolation.csv");
    assert_eq!(interp.lines().count(), 1 + 27);
    assert_eq!(polylines(&read("interpolation.svg")), 2);
    assert_eq!(polylines(&read("stability.svg")), 1);
    assert_eq!(read("stability.csv").lines().count(), 1 + 3);
    assert!(read("tic.csv").starts_with("tr_c,tr_f,ratio,n_samples,train_loss,gen_gap\n"));
    assert!(read("gap.csv").starts_with("gap,train_loss,train_hw95,test_loss,test_hw95\n"));
}

#[test]
fn oracle_rows_reproduce_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "o.cfg", "");
    assert!(run(&["oracle", s(&cfg)]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("run/oracle.csv")).unwrap();
    let row = |op: &str| -> Vec<f64> {
        let line = csv.lines().find(|l| l.starts_with(&format!("{op},"))).unwrap();
        line.rsplit(',').next().unwrap().split(';').map(|v| v.parse().unwrap()).collect()
    };
    let d = row("diagonal.theta_star");
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!(row("diagonal.invariance_max_dev")[0] < 1e-8);
    assert!(row("empirical_sol.gradient_norm")[0] < 1e-8);
    for op in ["opt_sol.theta_star_fml", "opt_sol.theta_star_ml_mc", "optimal_af.a", "concentration.report"] {
        assert!(!row(op).is_empty());
    }
}
