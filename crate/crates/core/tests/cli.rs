use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "data.size = 32\ndata.holdout = 2\nencoder.patch = 2\nencoder.dim = 8\nfusion.dim = 8\nunet.base = 8\n\
                     unet.mult = 1,2\nunet.attn_levels = 1\nunet.groups = 2\nunet.time_dim = 8\ntrain.steps = 4\n\
                     train.batch = 2\ntrain.warmup = 1\nddim.steps = 4\n";

fn partfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partfuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = partfuse(args);
    assert!(out.status.success(), "partfuse {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let config = root.join("small.cfg");
    std::fs::write(&config, SMALL).unwrap();
    ok(&["gen-data", "--identities", "5", "--views", "2", "--size", "32", "--out", s(&data)]);
    Fixture { _dir: dir, root, data, config }
}

fn view(f: &Fixture, id: usize, v: usize) -> String {
    let base = f.data.join(format!("id_{id}/view_{v}"));
    format!("{}.ppm:{}", s(&base), s(&base))
}

fn count(dir: &Path, ext: &str) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count(&p, ext);
        } else if p.extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    n
}

#[test]
fn gen_data_writes_every_view_and_mask() {
    let f = fixture();
    assert_eq!(count(&f.data, "ppm"), 10);
    assert_eq!(count(&f.data, "pgm"), 30);
    assert!(f.data.join("manifest.txt").is_file());
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let f = fixture();
    assert_eq!(partfuse(&["swap"]).status.code(), Some(2));
    let bad_set = partfuse(&["train", "--data", s(&f.data), "--out", "x.fapw", "--set", "no.such.key=1"]);
    assert_eq!(bad_set.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad_set.stderr));
    let missing = f.root.join("missing");
    let out = partfuse(&["train", "--config", s(&f.config), "--data", s(&missing), "--out", s(&f.root.join("m.fapw"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn resume_continues_the_step_counter_and_log() {
    let f = fixture();
    let ck = f.root.join("m.fapw");
    let log = f.root.join("loss.tsv");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&ck), "--log", s(&log)]);
    ok(&["train", "--resume", s(&ck), "--set", "train.steps=7", "--data", s(&f.data), "--out", s(&ck), "--log", s(&log)]);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step\tloss\tlr");
    let steps: Vec<u64> = lines[1..].iter().map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..7).collect::<Vec<_>>());
}

#[test]
fn swap_writes_output_and_grid_and_invert_fix_at_zero_matches_it() {
    let f = fixture();
    let ck = f.root.join("m.fapw");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&ck)]);
    let (target, mouth) = (view(&f, 0, 0), view(&f, 1, 1));
    let out = f.root.join("swap.ppm");
    ok(&["swap", "--checkpoint", s(&ck), "--target", &target, "--mouth", &mouth, "--seed", "3", "--out", s(&out)]);
    let grid = std::fs::read(f.root.join("swap.grid.ppm")).unwrap();
    let swapped = std::fs::read(&out).unwrap();
    assert!(grid.len() > swapped.len());

    let fixed = f.root.join("fixed.ppm");
    let args = ["invert-fix", "--checkpoint", s(&ck), "--target", &target, "--mouth", &mouth, "--seed", "3", "--out", s(&fixed)];
    ok(&[&args[..], &["--threshold", "0"]].concat());
    assert_eq!(std::fs::read(&fixed).unwrap(), swapped);
    ok(&[&args[..], &["--threshold", "4"]].concat());
    assert_ne!(std::fs::read(&fixed).unwrap(), swapped);
    assert_eq!(partfuse(&[&args[..], &["--threshold", "5"]].concat()).status.code(), Some(3));
}

#[test]
fn eval_reports_every_metric() {
    let f = fixture();
    let ck = f.root.join("m.fapw");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&ck)]);
    let manifest = f.root.join("manifest.tsv");
    ok(&["eval-manifest", "--config", s(&f.config), "--data", s(&f.data), "--set", "data.holdout=1", "--triples", "3", "--parts", "mouth", "--out", s(&manifest)]);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4, "{text}");
    let report = f.root.join("report.txt");
    ok(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--data", s(&f.data), "--out", s(&report)]);
    let r = std::fs::read_to_string(&report).unwrap();
    for key in ["fid\tface\t", "fpsim\tmouth\t", "mse\tface\t"] {
        assert!(r.contains(key), "{r}");
    }
}
