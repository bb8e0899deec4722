use std::path::Path;
use std::process::{Command, Output};

use synreg_cli::Smvf;
use synreg_core::{GridMeta, ScalarField, VectorField};
use synreg_net::{NetState, TrainSettings, UNetConfig};

fn synreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synreg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = synreg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read(path: &str) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn gen_labels_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (p(d.path(), "a.smvf"), p(d.path(), "b.smvf"));
    let h1 = ok(&[
        "gen-labels",
        "--seed",
        "1",
        "--dims",
        "32,32",
        "--labels",
        "8",
        "--out",
        &a,
    ]);
    let h2 = ok(&[
        "gen-labels",
        "--seed",
        "1",
        "--dims",
        "32,32",
        "--labels",
        "8",
        "--out",
        &b,
    ]);
    assert_eq!(read(&a), read(&b));
    assert_eq!(h1, h2);
    assert!(h1.starts_with("label,count\n"));
    let total: usize = h1
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 32 * 32);
    let c = p(d.path(), "c.smvf");
    ok(&[
        "gen-labels",
        "--seed",
        "2",
        "--dims",
        "32,32",
        "--labels",
        "8",
        "--out",
        &c,
    ]);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn single_label_histogram() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "s.smvf");
    let h = ok(&[
        "gen-labels",
        "--seed",
        "4",
        "--dims",
        "16,24",
        "--labels",
        "1",
        "--out",
        &out,
    ]);
    assert_eq!(h, "label,count\n1,384\n");
}

#[test]
fn gen_pair_writes_truth_fields() {
    let d = tempfile::tempdir().unwrap();
    for (mode, has_net) in [("shapes", false), ("supervised", true), ("two-maps", false)] {
        let dir = p(d.path(), mode);
        ok(&[
            "gen-pair",
            "--seed",
            "3",
            "--dims",
            "32,32",
            "--labels",
            "6",
            "--mode",
            mode,
            "--out-dir",
            &dir,
        ]);
        for f in ["s_m", "s_f", "m", "f", "v_m", "v_f"] {
            assert!(
                Path::new(&dir).join(format!("{f}.smvf")).exists(),
                "{mode}/{f}"
            );
        }
        assert_eq!(
            Path::new(&dir).join("u_net.smvf").exists(),
            has_net,
            "{mode}"
        );
        let m = Smvf::load(&Path::new(&dir).join("m.smvf"))
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(m.min() >= 0.0 && m.max() <= 1.0);
        Smvf::load(&Path::new(&dir).join("v_f.smvf"))
            .unwrap()
            .to_vector()
            .unwrap();
    }
    let again = p(d.path(), "again");
    ok(&[
        "gen-pair",
        "--seed",
        "3",
        "--dims",
        "32,32",
        "--labels",
        "6",
        "--out-dir",
        &again,
    ]);
    for f in ["s_m", "s_f", "m", "f", "v_m", "v_f"] {
        assert_eq!(
            read(&p(Path::new(&again), &format!("{f}.smvf"))),
            read(&p(&d.path().join("shapes"), &format!("{f}.smvf")))
        );
    }
}

#[test]
fn synth_image_from_label_file() {
    let d = tempfile::tempdir().unwrap();
    let labels = p(d.path(), "l.smvf");
    ok(&[
        "gen-labels",
        "--seed",
        "5",
        "--dims",
        "32,32",
        "--labels",
        "4",
        "--out",
        &labels,
    ]);
    let (a, b, c) = (
        p(d.path(), "a.smvf"),
        p(d.path(), "b.smvf"),
        p(d.path(), "c.smvf"),
    );
    ok(&[
        "synth-image",
        "--seed",
        "9",
        "--label-map",
        &labels,
        "--out",
        &a,
    ]);
    ok(&[
        "synth-image",
        "--seed",
        "9",
        "--label-map",
        &labels,
        "--out",
        &b,
    ]);
    ok(&[
        "synth-image",
        "--seed",
        "9",
        "--label-map",
        &labels,
        "--lut-sigma",
        "64",
        "--out",
        &c,
    ]);
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let img = Smvf::load(Path::new(&c)).unwrap().to_scalar().unwrap();
    assert_eq!(img.dims(), &[32, 32]);
}

#[test]
fn zero_net_registration_is_identity() {
    let d = tempfile::tempdir().unwrap();
    let pair = p(d.path(), "pair");
    ok(&[
        "gen-pair",
        "--seed",
        "6",
        "--dims",
        "32,32",
        "--labels",
        "4",
        "--out-dir",
        &pair,
    ]);
    let cfg = UNetConfig {
        levels: 2,
        width: 4,
        ..UNetConfig::desk()
    };
    let weights = p(d.path(), "zero.smwt");
    NetState::zeros(cfg, TrainSettings::default())
        .unwrap()
        .write_weights(std::fs::File::create(&weights).unwrap())
        .unwrap();
    let pd = Path::new(&pair);
    let (u, moved, moved_l) = (
        p(d.path(), "u.smvf"),
        p(d.path(), "moved.smvf"),
        p(d.path(), "moved_l.smvf"),
    );
    ok(&[
        "register",
        "--weights",
        &weights,
        "--moving",
        &p(pd, "m.smvf"),
        "--fixed",
        &p(pd, "f.smvf"),
        "--out",
        &u,
        "--moved",
        &moved,
        "--moving-labels",
        &p(pd, "s_m.smvf"),
        "--moved-labels",
        &moved_l,
    ]);
    let field = Smvf::load(Path::new(&u)).unwrap().to_vector().unwrap();
    assert!(field.data().iter().all(|&v| v == 0.0));
    assert_eq!(
        Smvf::load(Path::new(&moved)).unwrap().to_scalar().unwrap(),
        Smvf::load(&pd.join("m.smvf")).unwrap().to_scalar().unwrap()
    );
    assert_eq!(read(&moved_l), read(&p(pd, "s_m.smvf")));
}

#[test]
fn evaluate_identical_maps() {
    let d = tempfile::tempdir().unwrap();
    let labels = p(d.path(), "l.smvf");
    ok(&[
        "gen-labels",
        "--seed",
        "7",
        "--dims",
        "32,32",
        "--labels",
        "5",
        "--out",
        &labels,
    ]);
    let (csv, json) = (p(d.path(), "r.csv"), p(d.path(), "r.json"));
    let out = ok(&[
        "evaluate", "--a", &labels, "--b", &labels, "--csv", &csv, "--json", &json,
    ]);
    assert_eq!(out, "mean_dice 1\n");
    let text = String::from_utf8(read(&csv)).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("label,dice,msd_mm,absent_flag"));
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!((cols[1], cols[2], cols[3]), ("1", "0", "0"), "{row}");
    }
    let v: serde_json::Value = serde_json::from_slice(&read(&json)).unwrap();
    assert_eq!(v["mean_dice"], 1.0);
}

#[test]
fn jacobian_of_zero_field() {
    let d = tempfile::tempdir().unwrap();
    let u = p(d.path(), "u.smvf");
    Smvf::from_vector(&VectorField::zeros(GridMeta::new(&[8, 8]).unwrap()))
        .save(Path::new(&u))
        .unwrap();
    let det = p(d.path(), "det.smvf");
    let out = ok(&["jacobian", "--warp", &u, "--out", &det]);
    assert_eq!(out, "folding_fraction 0\nmean_det 1\n");
    let det = Smvf::load(Path::new(&det)).unwrap().to_scalar().unwrap();
    assert!(det.data().iter().all(|&v| v == 1.0));
}

#[test]
fn export_png_windows_to_8_bit() {
    let d = tempfile::tempdir().unwrap();
    let src = p(d.path(), "ramp.smvf");
    let meta = GridMeta::new(&[2, 3, 4]).unwrap();
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    Smvf::from_scalar(&ScalarField::new(meta, 1, data).unwrap())
        .save(Path::new(&src))
        .unwrap();
    let (a, b) = (p(d.path(), "a.png"), p(d.path(), "b.png"));
    ok(&["export-png", "--input", &src, "--out", &a, "--slice", "1"]);
    ok(&["export-png", "--input", &src, "--out", &b, "--slice", "1"]);
    assert_eq!(read(&a), read(&b));
    let img = image::open(&a).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (4, 3));
    assert_eq!(img.get_pixel(0, 0).0[0], 0);
    assert_eq!(img.get_pixel(3, 2).0[0], 255);
    assert_eq!(img.get_pixel(1, 0).0[0], 23);
}

#[test]
fn train_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let run = |tag: &str, prefetch: bool| {
        let (w, t) = (
            p(d.path(), &format!("{tag}.smwt")),
            p(d.path(), &format!("{tag}.csv")),
        );
        let mut args = vec![
            "train",
            "--seed",
            "2",
            "--dims",
            "32,32",
            "--labels",
            "4",
            "--iterations",
            "6",
            "--levels",
            "2",
            "--width",
            "4",
            "--out",
            &w,
            "--trace",
            &t,
        ];
        if prefetch {
            args.push("--prefetch");
        }
        ok(&args);
        (read(&w), read(&t))
    };
    let a = run("a", false);
    let b = run("b", true);
    assert_eq!(a, b);
    let trace = String::from_utf8(a.1).unwrap();
    assert!(trace.starts_with("iteration,dice_term,reg_term,total,lr\n"));
    assert_eq!(trace.lines().count(), 7);
    let state = synreg_cli::load_weights(&d.path().join("a.smwt")).unwrap();
    assert_eq!(state.train.iteration, 6);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "x.smvf");
    // argument errors
    assert_eq!(
        synreg(&["gen-labels", "--dims", "8,8", "--out", &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        synreg(&["gen-labels", "--seed", "1", "--dims", "8", "--out", &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        synreg(&[
            "gen-labels",
            "--seed",
            "1",
            "--dims",
            "8,8",
            "--labels",
            "0",
            "--out",
            &out
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(synreg(&["no-such-command"]).status.code(), Some(2));
    // I/O errors
    let missing = p(d.path(), "missing.smvf");
    assert_eq!(
        synreg(&["jacobian", "--warp", &missing]).status.code(),
        Some(3)
    );
    let unwritable = p(d.path(), "no/such/dir/x.smvf");
    assert_eq!(
        synreg(&[
            "gen-labels",
            "--seed",
            "1",
            "--dims",
            "8,8",
            "--out",
            &unwritable
        ])
        .status
        .code(),
        Some(3)
    );
    std::fs::write(&out, b"not a container").unwrap();
    assert_eq!(synreg(&["jacobian", "--warp", &out]).status.code(), Some(3));
}

#[test]
fn divergence_maps_to_exit_4() {
    let e: synreg_cli::CliError = synreg_net::NetError::Divergence {
        iteration: 3,
        reason: "loss NaN".into(),
    }
    .into();
    assert_eq!(e.exit_code(), 4);
}
