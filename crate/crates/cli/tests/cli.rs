use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[env]
tile_size = 64
ring_radius_range = [3, 6]

[net]
tile_size = 64
glimpse_size = 8
stem_channels = 2
stage_channels = 2
branch_features = 4
context_features = 4
hidden1 = 8
hidden2 = 4

[data]
train_per_class = 2
val_per_class = 1

[train]
epochs = 1
"#;

fn roiscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roiscope")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn first_tile(data: &Path) -> PathBuf {
    let mut tiles: Vec<PathBuf> = std::fs::read_dir(data.join("2"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "img"))
        .collect();
    tiles.sort();
    tiles.remove(0)
}

/// Count of pixels in a 16-bit binary PPM that have exactly this colour.
fn count_color(ppm: &[u8], rgb: [u16; 3]) -> usize {
    // header: "P6\n<w> <h>\n65535\n"
    let mut newlines = 0;
    let start = ppm.iter().position(|&b| {
        newlines += usize::from(b == b'\n');
        newlines == 3
    });
    let body = &ppm[start.unwrap() + 1..];
    body.chunks_exact(6)
        .filter(|px| (0..3).all(|c| u16::from_be_bytes([px[2 * c], px[2 * c + 1]]) == rgb[c]))
        .count()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let out = roiscope(&["--config", s(&cfg), "gen-data", "--out", s(&data), "--slides", "1", "--slide-rows", "2", "--slide-cols", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.toml").is_file());

    let out = roiscope(&["--config", s(&cfg), "train", "--out", s(&run), "--data", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.ckpt", "last.ckpt", "report.toml", "train_log.csv", "config.toml", "run_manifest.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let ckpt = run.join("best.ckpt");
    let out = roiscope(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir.path().join("eval"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("eval/eval_report.toml")).unwrap();
    assert!(report.contains("accuracy"));

    let slide = data.join("slides/slide_000");
    let out = roiscope(&["score-slide", "--checkpoint", s(&ckpt), "--slide", s(&slide), "--out", s(&dir.path().join("slide"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("slide/slide_report.toml")).unwrap();
    assert!(report.contains("slide_score") && report.contains("combined"));

    let ablate = dir.path().join("ablate");
    let out = roiscope(&["--config", s(&cfg), "ablate", "--out", s(&ablate), "--data", s(&data), "--seeds", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(ablate.join("ablation.md")).unwrap();
    for arm in ["full", "no_ior", "random_uniform"] {
        assert!(table.contains(arm), "{table}");
    }

    let out = roiscope(&["--config", s(&cfg), "ablate", "--out", s(&ablate), "--data", s(&data), "--sweep", "roi-size", "--values", "8,12"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ablate.join("sweep_roi_size.md").is_file());

    let img = dir.path().join("vis/trace.ppm");
    let out = roiscope(&["visualize", "--tile", s(&first_tile(&data)), "--checkpoint", s(&ckpt), "--out", s(&img)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("vis/trace.trace.toml").is_file());
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("x");
    for args in [
        vec!["--config", s(&cfg), "--mode", "greedy", "train", "--out", s(&out_dir)],
        vec!["--config", s(&cfg), "--ablation", "no_brain", "train", "--out", s(&out_dir)],
        vec!["train"],
        vec!["frobnicate"],
        vec!["--config", "/nonexistent/config.toml", "train", "--out", s(&out_dir)],
    ] {
        assert_eq!(code(&roiscope(&args)), 1, "{args:?}");
    }
    assert_eq!(code(&roiscope(&["--help"])), 0);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = roiscope(&["--config", s(&cfg), "train", "--out", s(&dir.path().join("r")), "--data", s(&dir.path().join("nope"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, format!("{TINY}lr0 = 1e200\nlocation_clip = 1e300\n")).unwrap();
    let out = roiscope(&["--config", s(&cfg), "train", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn visualize_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&roiscope(&["--config", s(&cfg), "gen-data", "--out", s(&data)])), 0);
    let tile = first_tile(&data);

    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "locations = []\n").unwrap();
    let six = dir.path().join("six.toml");
    std::fs::write(&six, "locations = [[0.0, 0.0], [0.3, 0.1], [0.6, 0.2], [0.9, 0.4], [0.2, 0.7], [1.0, 1.0]]\n").unwrap();

    let render = |trace: &Path, name: &str| {
        let img = dir.path().join(name);
        let out = roiscope(&["--config", s(&cfg), "visualize", "--tile", s(&tile), "--trace", s(trace), "--out", s(&img)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(img).unwrap()
    };
    let plain = render(&empty, "plain.ppm");
    let a = render(&six, "a.ppm");
    let b = render(&six, "b.ppm");
    assert_eq!(a, b, "rendering is deterministic");
    assert_eq!(plain.len(), a.len());

    // the empty trace leaves every pixel alone: compare with a 0-box render of
    // the same tile via the no-trace path
    let bare = dir.path().join("bare.ppm");
    assert_eq!(code(&roiscope(&["--config", s(&cfg), "visualize", "--tile", s(&tile), "--out", s(&bare)])), 0);
    assert_eq!(plain, std::fs::read(bare).unwrap());
    assert_ne!(plain, a);

    for i in 0..6 {
        let t = i as f64 / 5.0;
        let q = |v: f64| (v * 65535.0).round() as u16;
        let rgb = [q(t), 0, q(1.0 - t)];
        assert!(count_color(&a, rgb) > 0, "box {} missing", i + 1);
        assert_eq!(count_color(&plain, rgb), 0);
    }
}
