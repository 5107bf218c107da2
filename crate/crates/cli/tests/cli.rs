use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.d=16
model.heads=2
model.d_ff=16
model.text_layers=1
model.vision_layers=1
model.dec_layers=1
model.n_pred=4
model.align_dim=8
model.mask_dim=8
data.canvas=32
data.train_per_task=3
data.test_per_task=2
train.teacher_epochs=1
train.student_epochs=1
distill.epochs=1
distill.n_mem=4
distill.k=2
eval.sweep_k_max=2
eval.elim_scenes=2
eval.elim_rounds=2
eval.overlays=2
";

fn afford(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afford")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let s = stdout(o);
    let line = s.lines().find_map(|l| l.strip_prefix("run_dir=")).unwrap_or_else(|| panic!("no run_dir in {s}\n{}", stderr(o)));
    PathBuf::from(line)
}

fn ok(args: &[&str]) -> (Output, PathBuf) {
    let o = afford(args);
    assert!(o.status.success(), "{args:?} failed:\n{}\n{}", stdout(&o), stderr(&o));
    let d = run_dir(&o);
    (o, d)
}

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
    out: String,
}

fn env() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    fs::write(root.join("tiny.cfg"), TINY).unwrap();
    Env {
        config: root.join("tiny.cfg").display().to_string(),
        out: root.join("runs").display().to_string(),
        root,
        _tmp: tmp,
    }
}

fn manifest_files(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("file "))
        .map(String::from)
        .collect()
}

#[test]
fn gradcheck_passes_and_lists_every_suite() {
    let e = env();
    let (o, dir) = ok(&["gradcheck", "--out", &e.out]);
    let lines: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("gradcheck ")).map(String::from).collect();
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.ends_with(" ok") && l.contains("points=50")));
    for name in ["l1", "giou", "dice", "focal", "soft_token", "token_m", "alignment", "cluster", "kl", "fusion_bf", "fusion_va"] {
        assert!(lines.iter().any(|l| l.contains(&format!("suite={name} "))), "{name}");
    }
    assert!(dir.join("config.txt").exists() && dir.join("manifest.txt").exists());
    let name = dir.file_name().unwrap().to_string_lossy().into_owned();
    let (stamp, hash) = name.split_once('-').unwrap();
    assert_eq!(stamp.len(), 16);
    assert_eq!(hash.len(), 12);
}

#[test]
fn invalid_configs_exit_2_with_the_key() {
    let e = env();
    let bad = e.root.join("bad.cfg");
    fs::write(&bad, "model.d=16\nmodel.colour=red\n").unwrap();
    let o = afford(&["gradcheck", "--config", bad.to_str().unwrap(), "--out", &e.out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.colour"), "{}", stderr(&o));

    fs::write(&bad, "optim.lr=fast\n").unwrap();
    let o = afford(&["gradcheck", "--config", bad.to_str().unwrap(), "--out", &e.out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.lr") && stderr(&o).contains("number"));

    let o = afford(&["gradcheck", "--set", "distill.k=0", "--out", &e.out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("distill.k"));

    let o = afford(&["launch", "--out", &e.out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_on_an_empty_dataset_exits_2() {
    let e = env();
    let table = e.root.join("empty.tsv");
    fs::write(&table, "# task\tcategory\trank\tprovenance\n").unwrap();
    let (_, dir) = ok(&["build-data", "--config", &e.config, "--out", &e.out, "--set", &format!("data.table={}", table.display())]);
    let data = dir.join("data");
    let ds = fs::read_to_string(data.join("dataset.json")).unwrap();
    assert!(ds.contains("zero tasks"));
    let o = afford(&["eval", "--config", &e.config, "--out", &e.out, "--set", &format!("paths.data={}", data.display())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty dataset"));
}

#[test]
fn full_command_chain_writes_self_describing_artifacts() {
    let e = env();
    let base = ["--config", e.config.as_str(), "--out", e.out.as_str()];
    let with = |cmd: &str, sets: &[String]| {
        let mut a: Vec<&str> = vec![cmd];
        a.extend(base);
        for s in sets {
            a.push("--set");
            a.push(s);
        }
        ok(&a)
    };

    let (_, dd) = with("build-data", &["data.table=mock".into()]);
    assert!(dd.join("table.tsv").exists() && dd.join("quarantine.tsv").exists());
    let data = format!("paths.data={}", dd.join("data").display());

    let (o, td) = with("train-teacher", &[data.clone()]);
    assert!(stdout(&o).contains("teacher map_box="));
    for f in ["teacher.ckpt", "eval.json", "trace.log", "config.txt", "manifest.txt", "overlays/0000.png"] {
        assert!(td.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(td.join("trace.log")).unwrap();
    assert!(trace.starts_with("epoch=1 "));
    let report = fs::read_to_string(td.join("eval.json")).unwrap();
    assert!(report.contains("model.d=16"), "config echoed into the report");
    let teacher = format!("paths.teacher={}", td.join("teacher.ckpt").display());

    let (_, sd) = with("train-student", &[data.clone()]);
    let student = format!("paths.student={}", sd.join("student.ckpt").display());

    let (o, dsd) = with("distill", &[data.clone(), teacher.clone(), student.clone()]);
    assert!(stdout(&o).contains("distilled map_box="));
    let distilled = format!("paths.student={}", dsd.join("student.ckpt").display());

    let (o, ed) = with("eval", &[data.clone(), teacher.clone(), distilled.clone()]);
    assert!(stdout(&o).contains("mAP^box"));
    assert!(ed.join("eval_teacher.json").exists() && ed.join("eval_distilled.json").exists());

    let (o, swd) = with("sweep-threshold", &[data.clone(), teacher.clone()]);
    assert!(stdout(&o).contains("box threshold=0.9"));
    let tsv = fs::read_to_string(swd.join("sweep_box.tsv")).unwrap();
    let recalls: Vec<f64> = tsv.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap().parse().unwrap()).collect();
    assert!(recalls.windows(2).all(|w| w[1] <= w[0]));

    let (o, kd) = with("sweep-k", &[data.clone(), teacher.clone(), student.clone()]);
    let rows = fs::read_to_string(kd.join("sweep_k.tsv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(stdout(&o).contains("K=1") && stdout(&o).contains("K=2"));

    let (o, eld) = with("eliminate", &[data.clone(), distilled.clone()]);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("scene=")).count(), 2);
    assert!(eld.join("elimination.json").exists());

    // same config and seed: identical artifacts
    let (_, td2) = with("train-teacher", &[data.clone()]);
    assert_ne!(td, td2);
    assert_eq!(manifest_files(&td), manifest_files(&td2));
}

#[test]
fn checkpoint_loading_checks_the_config_hash() {
    let e = env();
    let base = ["--config", e.config.as_str(), "--out", e.out.as_str()];
    let mut a = vec!["train-teacher"];
    a.extend(base);
    let (_, td) = ok(&a);
    let ckpt = td.join("teacher.ckpt");
    let teacher = format!("paths.teacher={}", ckpt.display());

    let mut a = vec!["eval", "--set", &teacher, "--set", "model.decoder_self_attn=false"];
    a.extend(base);
    let o = afford(&a);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config hash mismatch"), "{}", stderr(&o));
    a.push("--force");
    let o = afford(&a);
    assert!(o.status.success(), "{}", stderr(&o));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = e.root.join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let teacher = format!("paths.teacher={}", cut.display());
    let mut a = vec!["eval", "--set", &teacher];
    a.extend(base);
    let o = afford(&a);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint") && stderr(&o).contains("offset"), "{}", stderr(&o));
}
