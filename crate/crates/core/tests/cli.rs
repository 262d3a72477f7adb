use std::path::Path;
use std::process::{Command, Output};

use insloc::config::KEYS;

fn insloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insloc"))
        .args(args)
        .output()
        .expect("spawn insloc")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = insloc(&["pretrain", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_values_and_unknown_keys_exit_2() {
    for set in ["tau=0", "steps=-3", "no_such_key=1", "mode=moco"] {
        let o = insloc(&["compose", "--set", set]);
        assert_eq!(o.status.code(), Some(2), "--set {set}: {}", stderr(&o));
    }
}

#[test]
fn help_lists_every_key() {
    for sub in [
        &["--help"][..],
        &["pretrain", "--help"],
        &["probe", "--help"],
        &["compose", "--help"],
    ] {
        let o = insloc(sub);
        assert!(o.status.success());
        let text = String::from_utf8_lossy(&o.stdout);
        for k in KEYS {
            assert!(text.contains(k.key), "{sub:?} help lacks {}", k.key);
        }
    }
}

#[test]
fn compose_with_zero_count_writes_an_empty_listing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &format!("compose_count = 0\nout_dir = {}\n", out.display()));
    let o = insloc(&["compose", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("composites.tsv")).unwrap(), "");
}

#[test]
fn compose_writes_boxes_inside_the_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_set = format!("out_dir={}", out.display());
    let o = insloc(&[
        "compose",
        "--set",
        "compose_count=3",
        "--set",
        "gallery_size=8",
        "--set",
        "batch_size=4",
        "--set",
        &out_set,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(out.join("composites.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r.len(), 7);
        let img = insloc::imaging::read_ppm(out.join(r[0])).unwrap();
        let c: Vec<f64> = r[1..5].iter().map(|v| v.parse().unwrap()).collect();
        assert!(c[0] >= 0.0 && c[1] >= 0.0 && c[2] <= img.width() as f64 && c[3] <= img.height() as f64);
        assert!(out.join(r[0].replace(".ppm", "_box.ppm")).exists());
    }
}

#[test]
fn pretrain_then_probe_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            "# tiny run\nsteps = 3\nbatch_size = 4\ngallery_size = 12\nqueue_size = 16\nwidths = 4,4,8,8\n\
             convs_per_stage = 1\nhead_width = 8\nmlp_hidden = 8\nembed_dim = 8\nprobe_steps = 20\n\
             probe_train_views = 1\nprobe_eval_views = 1\nout_dir = {}\n",
            out.display()
        ),
    );
    let o = insloc(&["pretrain", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().all(|l| l.split('\t').count() == 3));

    let a = insloc(&["probe", "--config", &cfg, "--M", "4"]);
    let b = insloc(&["probe", "--config", &cfg, "--M", "4"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let row = String::from_utf8(a.stdout).unwrap();
    let fields: Vec<&str> = row.trim_end().split('\t').collect();
    assert_eq!(fields[0], "insloc-c4");
    assert_eq!(fields[1], "4");

    let missing = insloc(&["probe", "--config", &cfg, "--checkpoint", "/no/such.ilck"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn selfcheck_names_the_broken_kernel() {
    let o = insloc(&["selfcheck", "--perturb-bilinear-weight", "1.01"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("roialign-adjointness"), "{err}");
    assert!(!err.contains("roialign-dense-oracle"), "{err}");
}
