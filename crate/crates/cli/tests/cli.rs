use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn dfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfn"))
        .args(args)
        .env("DFN_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TWO_JOINTS: &str = "HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Chest
  {
    OFFSET 0 10 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 5 0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.0333333
0 0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0 0
";

#[test]
fn preprocess_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = dir.path().join("out");
    fs::create_dir_all(&raw).unwrap();

    let o = dfn(&["preprocess", "--input", s(&raw), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().count() == 0);

    let walk = raw.join("walk.bvh");
    let o = dfn(&["synth", "--out", s(&walk), "--seconds", "1", "--fps", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dfn(&["preprocess", "--input", s(&raw), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = dfn::mocap::read_bvh_file(&walk).unwrap().len();
    let feats = dfn::mocap::read_features(&out.join("features/walk.dfnf")).unwrap();
    assert_eq!(feats.len(), frames - 1);
    assert!(fs::read_to_string(out.join("manifest.csv"))
        .unwrap()
        .contains(&format!("walk,{}", frames - 1)));

    fs::write(raw.join("tiny.bvh"), TWO_JOINTS).unwrap();
    let mixed = dir.path().join("mixed");
    let o = dfn(&["preprocess", "--input", s(&raw), "--out", s(&mixed)]);
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(
        err.contains("mixed skeletons") && err.contains("tiny (2 joints)"),
        "{err}"
    );
    assert!(!mixed.exists() || fs::read_dir(&mixed).unwrap().count() == 0);
}

#[test]
fn argument_errors() {
    let o = dfn(&["train", "--config", "/no/such/dfn.conf"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/no/such/dfn.conf"));

    let o = dfn(&["train", "--config", "x.conf", "--stage", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains('1') && err.contains("all"), "{err}");

    let o = dfn(&["evaluate", "--mode", "bogus", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("pca") && err.contains("divergence") && err.contains("meandist"),
        "{err}"
    );

    let o = dfn(&["inspect", "/no/such/file.txt"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Tiny trained pipeline shared by the tests below.
struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    prefix: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        fs::create_dir_all(&raw).unwrap();
        let o = dfn(&[
            "synth",
            "--out",
            s(&raw.join("walk.bvh")),
            "--seconds",
            "6",
            "--fps",
            "30",
            "--seed",
            "2",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let data = dir.path().join("data");
        assert!(dfn(&["preprocess", "--input", s(&raw), "--out", s(&data)])
            .status
            .success());
        let conf = dir.path().join("tiny.conf");
        fs::write(
            &conf,
            "# small enough for a unit-test budget\nsteps = 4\nbatch_size = 2\npose_batch = 16\nseed = 5\n\
             data_dir = data\ncheckpoint_dir = ckpt\nenc_widths = 32, 16\nquat_dec_widths = 32\nvel_dec_widths = 8\n\
             horizon_H = 4\nsummary_dim = 8\ns_dim = 4\nf_dim = 4\nh_dim = 8\ntd_pairs_K = 2\n\
             kl_anneal_steps = 2\nwindow_len = 12\nwindow_stride = 8\n",
        )
        .unwrap();
        let o = dfn(&["train", "--config", s(&conf), "--stage", "all"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = dir.path().join("ckpt");
        let prefix = data.join("features/walk.dfnf");
        Trained {
            data,
            ckpt,
            prefix,
            _dir: dir,
        }
    })
}

#[test]
fn staged_training_writes_three_checkpoints() {
    let t = trained();
    for stage in 1..=3 {
        assert!(t.ckpt.join(format!("stage{stage}.dfnw")).exists());
        let log = fs::read_to_string(t.ckpt.join(format!("stage{stage}_log.csv"))).unwrap();
        assert_eq!(log.lines().count(), 5, "header plus one row per step");
    }
    let o = dfn(&["inspect", s(&t.ckpt)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("stage 3:"));
}

#[test]
fn generate_outputs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let run = |frames: &str, name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = dfn(&[
            "generate",
            "--checkpoints",
            s(&t.ckpt),
            "--prefix",
            s(&t.prefix),
            "--frames",
            frames,
            "--seed",
            seed,
            "--out",
            s(&out),
        ]);
        (o, out)
    };

    let (o, out) = run("0", "empty.bvh", "1");
    assert!(o.status.success(), "{}", stderr(&o));
    let bvh = fs::read_to_string(&out).unwrap();
    assert!(bvh.starts_with("HIERARCHY") && bvh.contains("Frames: 0\n"));
    let trace = fs::read_to_string(out.with_extension("trace.csv")).unwrap();
    // warm-up rows for the (capped) prefix, all at t <= 0
    assert_eq!(trace.lines().count(), 1 + 64);
    let ts: Vec<i64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ts, (-63..=0).collect::<Vec<i64>>());

    let (o, _) = run("-3", "neg.bvh", "1");
    assert_eq!(o.status.code(), Some(2));

    let (a, pa) = run("12", "a.bvh", "9");
    let (b, pb) = run("12", "b.bvh", "9");
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    assert_eq!(
        fs::read(pa.with_extension("trace.csv")).unwrap(),
        fs::read(pb.with_extension("trace.csv")).unwrap()
    );
    let clip = dfn::mocap::read_bvh_file(&pa).unwrap();
    assert_eq!(clip.len(), 12);
    assert!(clip.frames.iter().flatten().all(|v| v.is_finite()));

    let (c, pc) = run("12", "c.bvh", "10");
    assert!(c.status.success());
    assert_ne!(fs::read(&pa).unwrap(), fs::read(&pc).unwrap());

    let missing = dfn(&[
        "generate",
        "--checkpoints",
        "/no/ckpt",
        "--prefix",
        s(&t.prefix),
        "--frames",
        "3",
        "--out",
        s(&dir.path().join("m.bvh")),
    ]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn evaluate_shapes() {
    let t = trained();
    let out = tempfile::tempdir().unwrap();
    let base = [
        "--data",
        s(&t.data),
        "--checkpoints",
        s(&t.ckpt),
        "--out",
        s(out.path()),
    ];
    let eval = |extra: &[&str]| {
        let mut args = vec!["evaluate"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&base);
        dfn(&args)
    };

    let o = eval(&["--mode", "pca"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = dfn::mocap::read_features(&t.prefix).unwrap().len();
    let csv = fs::read_to_string(out.path().join("pca.csv")).unwrap();
    assert!(csv.starts_with("# explained_variance_ratio,"));
    assert_eq!(csv.lines().count(), 2 + frames);
    assert!(out.path().join("pca.svg").exists());

    let o = eval(&[
        "--mode",
        "divergence",
        "--sequences",
        "5",
        "--t-list",
        "2,6,9",
        "--prefix-frames",
        "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.path().join("divergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
    assert_eq!(
        fs::read_to_string(out.path().join("dispersion.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let o = eval(&["--mode", "divergence", "--sequences", "1", "--t-list", "3"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("undefined"));

    let o = eval(&["--mode", "meandist", "--sequences", "4", "--length", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.path().join("meandist.csv")).unwrap();
    assert!(csv.starts_with("t,generated_mean,generated_variance,train_mean,train_variance\n"));
    assert_eq!(csv.lines().count(), 31);
    let first = fs::read(out.path().join("meandist.csv")).unwrap();
    assert!(eval(&["--mode", "meandist", "--sequences", "4", "--length", "30"])
        .status
        .success());
    assert_eq!(fs::read(out.path().join("meandist.csv")).unwrap(), first);
}
