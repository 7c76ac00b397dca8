use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semistream::image::{encode_ppm, encode_raw};
use semistream::report::text_field;
use semistream_core::model::{random_image, Dims};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semistream")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = dir.join(name);
    let out = out.to_str().unwrap();
    let mut args = vec!["gen-model", "--out", out];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_string()
}

fn small(dir: &Path, name: &str, seed: &str) -> String {
    gen(dir, name, &["--width-multiplier", "0.35", "--resolution", "32", "--seed", seed])
}

fn same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), fs::read_dir(b).unwrap().count());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn gen_model_is_deterministic_and_prints_seventeen_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", &["--seed", "0"]);
    let b = gen(dir.path(), "b", &["--seed", "0"]);
    same_tree(Path::new(&a), Path::new(&b));
    let o = run(&["gen-model", "--seed", "0", "--out", dir.path().join("c").to_str().unwrap()]);
    assert!(stdout(&o).contains("rounds: 17 (+1 trailing)"), "{}", stdout(&o));
}

#[test]
fn gen_model_into_a_bad_path_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let bad = file.join("model");
    let o = run(&["gen-model", "--resolution", "32", "--width-multiplier", "0.35", "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));
}

#[test]
fn prepare_rewrites_for_truncation_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(dir.path(), "m", "3");
    let t = dir.path().join("t");
    let n = dir.path().join("n");
    assert!(run(&["prepare", "--model", &m, "--rounding", "truncate", "--out", t.to_str().unwrap()]).status.success());
    assert!(run(&["prepare", "--model", t.to_str().unwrap(), "--out", n.to_str().unwrap()]).status.success());
    same_tree(Path::new(&m), &n);
}

#[test]
fn stream_and_sequential_logits_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(dir.path(), "m", "1");
    for seed in ["0", "7"] {
        let s = run(&["infer", "--model", &m, "--seed", seed, "--mode", "stream"]);
        let q = run(&["infer", "--model", &m, "--seed", seed, "--mode", "sequential"]);
        assert!(s.status.success(), "{}", stderr(&s));
        assert_eq!(stdout(&s), stdout(&q));
        let lines: Vec<_> = stdout(&s).lines().skip(1).map(str::to_owned).collect();
        assert_eq!(lines.len(), 1001);
        assert!(lines.iter().all(|l| l.split(' ').count() == 3));
        assert!(stderr(&s).contains("# engine layers cycles madds useful_madds"));
    }
}

#[test]
fn image_files_are_read_and_sizes_checked() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(dir.path(), "m", "2");
    let img = random_image(Dims::new(32, 32, 3), 4);
    let ppm = dir.path().join("x.ppm");
    let raw = dir.path().join("x.raw");
    fs::write(&ppm, encode_ppm(&img).unwrap()).unwrap();
    fs::write(&raw, encode_raw(&img)).unwrap();
    let out = dir.path().join("logits");
    let a = run(&["infer", "--model", &m, "--image", ppm.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).starts_with("# engine"));
    let b = run(&["infer", "--model", &m, "--image", raw.to_str().unwrap(), "--mode", "sequential"]);
    assert_eq!(fs::read_to_string(&out).unwrap(), stdout(&b));

    let wrong = dir.path().join("wrong.ppm");
    fs::write(&wrong, encode_ppm(&random_image(Dims::new(31, 32, 3), 0)).unwrap()).unwrap();
    let o = run(&["infer", "--model", &m, "--image", wrong.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32x32x3"), "{}", stderr(&o));
}

#[test]
fn verify_exit_codes() {
    let ok = run(&["verify", "--trials", "10"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("verify: ok"));

    let bad = run(&["verify", "--trials", "10", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = stdout(&bad);
    assert!(text.contains("FAIL") && text.contains("first mismatch at row="), "{text}");

    let none = run(&["verify", "--trials", "0"]);
    assert_eq!(none.status.code(), Some(0));
    assert!(stdout(&none).contains("(0 cases)"), "{}", stdout(&none));
    assert!(stderr(&none).contains("warning"), "{}", stderr(&none));
}

#[test]
fn verify_with_a_model_compares_whole_inference() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(dir.path(), "m", "6");
    let o = run(&["verify", "--trials", "2", "--model", &m]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS model-stream-vs-sequential"));
}

#[test]
fn report_defaults_and_infinite_bandwidth() {
    let o = run(&["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text_field(&text, "throughput", "gops"), ["89.6", "16.0", "27.2", "27.2", "5.4"]);
    assert_eq!(text_field(&text, "bandwidth", "gbps"), ["140.8", "233.6", "230.4", "12.8"]);
    let ms: f64 = text_field(&text, "total", "latency_ms")[0].parse().unwrap();
    assert!((ms - 10.6).abs() <= 1.06);

    let inf = stdout(&run(&["report", "--bandwidth-gbps", "inf"]));
    assert!(text_field(&inf, "timeline", "limiting").iter().all(|&l| l == "compute"));
}

#[test]
fn report_csv_has_header_rows() {
    let text = stdout(&run(&["report", "--format", "csv"]));
    let lines: Vec<_> = text.lines().collect();
    let at = lines.iter().position(|l| *l == "# throughput").unwrap();
    assert_eq!(lines[at + 1], "engine,ops_per_cycle,gops,cycles,madds,useful_madds");
    assert!(lines[at + 2].starts_with("C2D,896,89.6,"));
    assert!(lines.contains(&"# timeline"));
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(run(&["report", "--bandwidth-gbps", "-3"]).status.code(), Some(2));
    assert_eq!(run(&["report", "--freq-mhz", "0"]).status.code(), Some(2));
    assert_eq!(run(&["infer", "--model", "/nonexistent/model"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}
