use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tumormap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumormap"))
        .current_dir(dir)
        .env_remove("TUMORMAP_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn demo(dir: &Path) {
    let out = tumormap(dir, &["synth", "--out", ".", "--cols", "8", "--rows", "8", "--tumor", "2,2,6,6"]);
    assert_eq!(code(&out), 0, "{out:?}");
}

#[test]
fn run_then_rerun_then_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    let first = tumormap(dir.path(), &["--config", "config.toml", "run", "--manifest", "slides.txt"]);
    assert_eq!(code(&first), 0, "{first:?}");
    assert!(stdout(&first).contains("1 done"));
    for name in ["scores.csv", "qc.csv", "heatmap.png", "mask.png", "tumor.geojson", ".done"] {
        assert!(dir.path().join("out/demo").join(name).exists(), "{name}");
    }

    let again = Command::new(env!("CARGO_BIN_EXE_tumormap"))
        .current_dir(dir.path())
        .env("TUMORMAP_CONFIG", "config.toml")
        .args(["run", "--manifest", "slides.txt"])
        .output()
        .unwrap();
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("1 skipped"));

    fs::write(dir.path().join("bad.toml"), "threshold = 2.0\n").unwrap();
    let bad = tumormap(dir.path(), &["--config", "bad.toml", "run", "--manifest", "slides.txt"]);
    assert_eq!(code(&bad), 2);
    let missing = tumormap(dir.path(), &["run", "--manifest", "slides.txt"]);
    assert_eq!(code(&missing), 2, "no classifier configured");
}

#[test]
fn corrupt_slide_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    demo(dir.path());
    fs::write(dir.path().join("broken.tiff"), b"II*\0nope").unwrap();
    fs::write(dir.path().join("slides.txt"), "demo.tiff\nbroken.tiff\n").unwrap();
    let out = tumormap(dir.path(), &["--config", "config.toml", "run", "--manifest", "slides.txt"]);
    assert_eq!(code(&out), 1, "{out:?}");
    assert!(dir.path().join("out/demo/.done").exists());
    assert!(dir.path().join("out/broken/error.log").exists());
}

#[test]
fn stepwise_commands_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    demo(d);
    assert_eq!(code(&tumormap(d, &["--config", "config.toml", "run", "--manifest", "slides.txt"])), 0);

    let infer = tumormap(d, &["--config", "config.toml", "infer", "--slide", "demo.tiff", "--out", "s.csv", "--qc", "q.csv"]);
    assert_eq!(code(&infer), 0, "{infer:?}");
    assert_eq!(fs::read(d.join("s.csv")).unwrap(), fs::read(d.join("out/demo/scores.csv")).unwrap());
    assert_eq!(fs::read(d.join("q.csv")).unwrap(), fs::read(d.join("out/demo/qc.csv")).unwrap());

    let hm = tumormap(
        d,
        &["heatmap", "--scores", "s.csv", "--qc", "q.csv", "--sigma", "1.0", "--threshold", "0.5", "--geojson", "t.geojson", "--png", "h.png", "--mask", "m.png"],
    );
    assert_eq!(code(&hm), 0, "{hm:?}");
    for (mine, theirs) in [("t.geojson", "tumor.geojson"), ("h.png", "heatmap.png"), ("m.png", "mask.png")] {
        assert_eq!(fs::read(d.join(mine)).unwrap(), fs::read(d.join("out/demo").join(theirs)).unwrap(), "{mine}");
    }

    let geo = tumormap(d, &["geojson", "--input", "t.geojson", "--out", "t2.geojson", "--slide-id", "demo"]);
    assert_eq!(code(&geo), 0);
    assert_eq!(fs::read(d.join("t2.geojson")).unwrap(), fs::read(d.join("t.geojson")).unwrap());
    fs::write(d.join("open.geojson"), r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1]]]},"properties":{}}]}"#).unwrap();
    assert_ne!(code(&tumormap(d, &["geojson", "--input", "open.geojson"])), 0);
}

#[test]
fn tile_qc_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    demo(d);
    let tile = tumormap(d, &["tile", "--slide", "demo.tiff", "--level", "0", "--tile-size", "224", "--out", "tiles"]);
    assert_eq!(code(&tile), 0, "{tile:?}");
    assert!(d.join("tiles/demo_c3_r5.png").exists());
    assert_eq!(fs::read_to_string(d.join("tiles/manifest.ndjson")).unwrap().lines().count(), 64);

    assert_eq!(code(&tumormap(d, &["qc", "--tiles", "tiles", "--report", "a.csv"])), 0);
    assert_eq!(code(&tumormap(d, &["qc", "--tiles", "tiles/manifest.ndjson", "--report", "b.csv"])), 0);
    let report = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(d.join("b.csv")).unwrap());
    assert!(report.starts_with("slide_id,col,row,tissue_fraction,blur_score,blood_fraction,pass,reject_reasons\n"));
    assert!(report.contains("LowTissue"));

    let norm = tumormap(d, &["normalize", "--tiles", "tiles", "--out", "norm", "--estimate-reference", "demo.tiff", "--reference", "ref.json"]);
    assert_eq!(code(&norm), 0, "{norm:?}");
    assert!(d.join("ref.json").exists());
    assert_eq!(fs::read_dir(d.join("norm")).unwrap().count(), 64);
    let again = tumormap(d, &["normalize", "--tiles", "tiles", "--reference", "ref.json", "--out", "norm2"]);
    assert_eq!(code(&again), 0, "{again:?}");
    let missing = tumormap(d, &["normalize", "--tiles", "tiles", "--reference", "nope.json", "--out", "norm3"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn balance_is_byte_stable_and_eval_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut manifest = String::new();
    for i in 0..300 {
        manifest.push_str(&format!(
            "{{\"path\":\"t{i}.png\",\"label\":{},\"tumor_type\":\"CRC\",\"patient_id\":\"p{}\"}}\n",
            i % 2,
            i % 3
        ));
    }
    fs::write(d.join("m.ndjson"), manifest).unwrap();
    for out in ["a.ndjson", "b.ndjson"] {
        let r = tumormap(d, &["balance", "--manifest", "m.ndjson", "--target", "60", "--seed", "7", "--by-patient", "--out", out]);
        assert_eq!(code(&r), 0, "{r:?}");
    }
    let a = fs::read(d.join("a.ndjson")).unwrap();
    assert_eq!(a, fs::read(d.join("b.ndjson")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 60);
    let short = tumormap(d, &["balance", "--manifest", "m.ndjson", "--target", "1000", "--seed", "7", "--out", "c.ndjson"]);
    assert_eq!(code(&short), 1);

    fs::write(
        d.join("p.csv"),
        "slide_id,col,row,p_pos,label,cohort\ns,0,0,0.1,0,MEL\ns,1,0,0.4,0,MEL\ns,2,0,0.35,1,MEL\ns,3,0,0.8,1,MEL\n",
    )
    .unwrap();
    let eval = tumormap(d, &["eval", "--predictions", "p.csv", "--threshold", "0.5", "--out", "metrics.json"]);
    assert_eq!(code(&eval), 0, "{eval:?}");
    assert!(stdout(&eval).contains("MEL"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["rows"][0]["auc"], 0.75);
}

#[test]
fn shard_listing_partitions_slides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let list: String = (0..10).map(|i| format!("s{i}.tiff\n")).collect();
    fs::write(d.join("slides.txt"), list).unwrap();
    let out = tumormap(d, &["shard", "--manifest", "slides.txt", "--n-shards", "3"]);
    assert_eq!(code(&out), 0);
    let sizes: Vec<usize> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["slides"].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, [4, 3, 3]);
    assert_eq!(code(&tumormap(d, &["shard", "--manifest", "slides.txt", "--n-shards", "0"])), 2);
}
