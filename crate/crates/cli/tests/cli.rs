use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ifs_seg::dataset::read_intensity;
use ifs_seg::encoding::{membership, MembershipConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ifs-seg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ifs-seg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantoms(dir: &Path, count: usize) {
    let out = run(&[
        "--out",
        p(dir),
        "--seed",
        "4",
        "phantom-gen",
        "--count",
        &count.to_string(),
        "--size",
        "16",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: [&str; 6] = ["--depth", "2", "--base-filters", "4", "--epochs", "2"];

#[test]
fn encode_writes_six_files_matching_membership() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, 1);
    let input = data.join("images/phantom_00000.png");
    let out_dir = tmp.path().join("enc");
    let out = run(&[
        "--out",
        p(&out_dir),
        "encode",
        "--input",
        p(&input),
        "--lambda",
        "1.5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "phantom_00000_mu.png",
            "phantom_00000_mu_hist.csv",
            "phantom_00000_nu.png",
            "phantom_00000_nu_hist.csv",
            "phantom_00000_pi.png",
            "phantom_00000_pi_hist.csv"
        ]
    );
    let expected = membership(
        &read_intensity(&input).unwrap(),
        &MembershipConfig::default(),
    )
    .unwrap();
    let mu = image::open(out_dir.join("phantom_00000_mu.png"))
        .unwrap()
        .to_luma16();
    for (raw, want) in mu.into_raw().iter().zip(&expected) {
        let got = f64::from(*raw) / 65535.0;
        assert!((got - want).abs() <= 1.0 / 65535.0, "{got} vs {want}");
    }
    let hist = fs::read_to_string(out_dir.join("phantom_00000_pi_hist.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count\n"));
    assert_eq!(hist.lines().count(), 65);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(
        code(&run(&["encode", "--input", "x.png", "--lambda", "0"])),
        2
    );
    assert_eq!(
        code(&run(&["encode", "--input", "x.png", "--lambda", "-1"])),
        2
    );
    assert_eq!(
        code(&run(&[
            "encode",
            "--input",
            "x.png",
            "--negation",
            "yager",
            "--alpha",
            "1"
        ])),
        2
    );
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["--jobs", "0", "plot", "--reported"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let bad = run(&["--out", p(tmp.path()), "phantom-gen", "--size", "15"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(code(&run(&["encode", "--input", p(&missing)])), 1);
    assert_eq!(code(&run(&["train", "--data", p(&missing)])), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["ablate", "--help"])), 0);
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, 6);
    let tr = tmp.path().join("tr");
    let mut args = vec![
        "--out",
        p(&tr),
        "train",
        "--data",
        p(&data),
        "--negation",
        "sugeno",
    ];
    args.extend(TINY);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "model.ifsnet",
        "model.ifsnet.json",
        "epoch_log.csv",
        "metrics.json",
        "metrics.csv",
    ] {
        assert!(tr.join(f).exists(), "{f}");
    }
    let ev = tmp.path().join("ev");
    let out = run(&[
        "--out",
        p(&ev),
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&tr.join("model.ifsnet")),
        "--save-predictions",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for k in ["ac", "dc", "iou"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    // eval on the held-out split matches what train reported
    assert_eq!(
        fs::read_to_string(ev.join("metrics.csv")).unwrap(),
        fs::read_to_string(tr.join("metrics.csv")).unwrap()
    );
    assert_eq!(fs::read_dir(ev.join("predictions")).unwrap().count(), 1);

    let manifest = data.join("dataset.json");
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replace("\"num_classes\": 4", "\"num_classes\": 5");
    fs::write(&manifest, text).unwrap();
    let out = run(&[
        "--out",
        p(&ev),
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&tr.join("model.ifsnet")),
    ]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid label"));
}

#[test]
fn same_seed_gives_identical_epoch_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, 5);
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = tmp.path().join(name);
            let mut args = vec![
                "--seed",
                "7",
                "--out",
                p(&out_dir),
                "train",
                "--data",
                p(&data),
            ];
            args.extend(TINY);
            assert_eq!(code(&run(&args)), 0);
            fs::read(out_dir.join("epoch_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert!(logs[0].starts_with(b"epoch,train_loss,val_loss,val_ac,val_dc,val_iou\n"));
}

#[test]
fn ablate_grid_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, 5);
    let out_dir = tmp.path().join("abl");
    let mut args = vec![
        "--out",
        p(&out_dir),
        "--jobs",
        "2",
        "ablate",
        "--data",
        p(&data),
        "--families",
        "unet",
        "--lambdas",
        "2.0",
        "--alphas",
        "0.4",
        "--repeats",
        "2",
    ];
    args.extend(TINY);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "family,negation,param,repeat,ac,dc,iou");
    assert_eq!(lines.len(), 1 + (1 + 1 + 1) * 2);
    assert!(lines[1].starts_with("unet,,,0,"));
    assert!(lines[3].starts_with("unet,sugeno,2.0,0,"));
    let summary = fs::read_to_string(out_dir.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    for f in ["unet_sugeno_dc.svg", "unet_yager_iou.svg"] {
        assert!(out_dir.join("plots").join(f).exists(), "{f}");
    }

    let plot_dir = tmp.path().join("plots");
    let out = run(&[
        "--out",
        p(&plot_dir),
        "plot",
        "--summary",
        p(&out_dir.join("ablation_summary.csv")),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_dir(&plot_dir).unwrap().count(), 2 * 3);
}

#[test]
fn ablate_baselines_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, 5);
    let out_dir = tmp.path().join("abl");
    let mut args = vec![
        "--out",
        p(&out_dir),
        "ablate",
        "--data",
        p(&data),
        "--lambdas",
        "",
        "--alphas",
        "",
        "--repeats",
        "1",
        "--no-early-stop",
    ];
    args.extend(TINY);
    let last = args.len() - 1;
    args[last] = "1";
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!((cols[1], cols[2]), ("", ""));
    }
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let out_dir = tmp.path().join("ph");
    fs::write(
        &cfg,
        format!(
            r#"{{"out": "{}", "seed": 3, "phantom-gen": {{"count": 3, "size": 16}}, "train": {{"epochs": 99}}}}"#,
            p(&out_dir)
        ),
    )
    .unwrap();
    let out = run(&["--config", p(&cfg), "phantom-gen"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(out_dir.join("images")).unwrap().count(), 3);
    let spec = fs::read_to_string(out_dir.join("phantom_spec.json")).unwrap();
    assert!(spec.contains("\"seed\": 3"));

    let out = run(&[
        "--seed",
        "8",
        "--config",
        p(&cfg),
        "phantom-gen",
        "--count",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let spec = fs::read_to_string(out_dir.join("phantom_spec.json")).unwrap();
    assert!(spec.contains("\"seed\": 8"));
    let manifest = fs::read_to_string(out_dir.join("dataset.json")).unwrap();
    assert_eq!(manifest.matches("phantom_").count(), 2);
}
