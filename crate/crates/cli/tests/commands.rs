use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaforge::voxel::{load_grid, save_grid, VoxelGrid};

const TINY: &str = r#"
[model]
latent_dim = 3
channels = [4]
fc_hidden = [16]
head_channels = []
mdn_hidden = [8]

[schedule]
latent_dims = [3]
alpha2 = [1e-3]
alpha3 = [1e-3]

[schedule.train]
epochs = 2
patience = 2
batch_size = 4

[nsga]
population = 8
generations = 2

[uq]
n_samples = 10
bulk_draws = 8

[verification]
replicates = 2
"#;

fn metaforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaforge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = metaforge(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn csv_rows(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    (header, r.records().map(Result::unwrap).collect())
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = csv_rows(path);
    let i = h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].to_string()).collect()
}

fn record_hashes(path: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["outputs"].as_array().unwrap().iter().map(|o| o["sha256"].as_str().unwrap().to_string()).collect()
}

#[test]
fn gen_data_is_reproducible_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--count", "200", "--edge", "16", "--seed", "7", "--out"];
    ok(dir.path(), &[&args[..], &["a"]].concat());
    ok(dir.path(), &[&args[..], &["b"]].concat());
    let vfs = column(&dir.path().join("a/manifest.csv"), "volume_fraction");
    assert_eq!(vfs.len(), 200);
    assert!(vfs.iter().all(|v| (0.05..=0.4).contains(&v.parse::<f64>().unwrap())));
    let a = record_hashes(&dir.path().join("a/manifest.csv.run.json"));
    let b = record_hashes(&dir.path().join("b/manifest.csv.run.json"));
    assert_eq!(a.len(), 201);
    assert_eq!(a, b);
}

#[test]
fn empty_generation_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--count", "0", "--out", "d"]);
    let (h, rows) = csv_rows(&dir.path().join("d/manifest.csv"));
    assert!(rows.is_empty());
    assert_eq!(&h[0], "id");
}

fn write_manifest(dir: &Path, rows: &[(&str, &VoxelGrid)]) -> PathBuf {
    std::fs::create_dir_all(dir.join("voxels")).unwrap();
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["id", "family", "spec_json", "edge_voxels", "volume_fraction", "voxel_path"]).unwrap();
    for (id, g) in rows {
        let rel = format!("voxels/{id}.vox");
        save_grid(g, &dir.join(&rel)).unwrap();
        w.write_record([id, "fixture", "{}", &g.edge().to_string(), &g.volume_fraction().to_string(), &rel]).unwrap();
    }
    w.flush().unwrap();
    path
}

#[test]
fn solid_cube_labels_match_the_base_material() {
    let dir = tempfile::tempdir().unwrap();
    let solid = VoxelGrid::filled(4, true);
    write_manifest(dir.path(), &[("solid", &solid)]);
    ok(dir.path(), &["simulate", "--manifest", "manifest.csv", "--out", "labeled.csv"]);
    let e: f64 = column(&dir.path().join("labeled.csv"), "E_mean")[0].parse().unwrap();
    let nu: f64 = column(&dir.path().join("labeled.csv"), "nu_mean")[0].parse().unwrap();
    // A single draw carries the 1% material scatter.
    assert!((e / 68_300.0 - 1.0).abs() < 0.04, "E {e}");
    assert!((nu - 0.3).abs() < 0.012, "nu {nu}");
}

#[test]
fn noise_draws_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--count", "4", "--edge", "8", "--seed", "3", "--out", "d"]);
    ok(dir.path(), &["simulate", "--manifest", "d/manifest.csv", "--noise-draws", "8"]);
    let labeled = dir.path().join("d/labeled.csv");
    let means = column(&labeled, "E_mean");
    let stds = column(&labeled, "E_std");
    for (m, s) in means.iter().zip(&stds) {
        let ratio = s.parse::<f64>().unwrap() / m.parse::<f64>().unwrap();
        assert!((0.002..0.025).contains(&ratio), "E_std/E_mean = {ratio}");
    }

    let ids = column(&dir.path().join("d/manifest.csv"), "id");
    std::fs::remove_file(dir.path().join(format!("d/voxels/{}.vox", ids[0]))).unwrap();
    let out = ok(dir.path(), &["simulate", "--manifest", "d/manifest.csv", "--out", "d/partial.csv"]);
    assert_eq!(column(&dir.path().join("d/partial.csv"), "id").len(), 3);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("skipping") && log.contains("1 rows skipped"), "{log}");
}

#[test]
fn bad_inputs_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = metaforge(dir.path(), &["simulate", "--manifest", "nope.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    std::fs::write(dir.path().join("bad.toml"), "[nsga]\npopulation = \"many\"\n").unwrap();
    let out = metaforge(dir.path(), &["--config", "bad.toml", "gen-data", "--count", "2"]);
    assert!(!out.status.success());
    let out = metaforge(dir.path(), &["gen-data", "--count", "x"]);
    assert!(!out.status.success());
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let c = ["--config", "tiny.toml"];
    let run = |args: &[&str]| ok(d, &[&c[..], args].concat());

    run(&["gen-data", "--count", "16", "--edge", "8", "--seed", "5", "--out", "data"]);
    run(&["simulate"]);
    run(&["train", "--out", "ck/model"]);

    let ledger = column(&d.join("ck/model.ledger.csv"), "phase");
    assert!(ledger.len() >= 3);
    assert_eq!(ledger, ["step1", "step2", "step3"]);
    let (model, meta) = metaforge::model::Model::load(&d.join("ck/model")).unwrap();
    assert!(meta.metrics.contains_key("val_recon_accuracy_voxels"));
    model.save(&d.join("ck/copy"), &meta).unwrap();
    assert_eq!(std::fs::read(d.join("ck/model.params")).unwrap(), std::fs::read(d.join("ck/copy.params")).unwrap());

    run(&["evaluate", "--checkpoint", "ck/model", "--split", "val", "--out", "res/eval.csv"]);
    run(&["evaluate", "--checkpoint", "ck/model", "--split", "test", "--out", "res/eval.csv"]);
    let (h, rows) = csv_rows(&d.join("res/eval.csv"));
    assert_eq!(h.iter().collect::<Vec<_>>(), ["split", "metric", "property", "value", "n"]);
    assert_eq!(rows.len(), 10);

    run(&["encode", "--checkpoint", "ck/model", "--out", "res/latent.csv"]);
    let (h, rows) = csv_rows(&d.join("res/latent.csv"));
    assert_eq!(h.len(), 1 + 3);
    assert_eq!(rows.len(), 16);

    let ids = column(&d.join("data/labeled.csv"), "id");
    run(&["interp", "--checkpoint", "ck/model", "--id1", &ids[0], "--id2", &ids[1], "--steps", "2", "--out", "res/i2"]);
    run(&["interp", "--checkpoint", "ck/model", "--id1", &ids[0], "--id2", &ids[1], "--steps", "5", "--out", "res/i5"]);
    assert_eq!(column(&d.join("res/i2/interp.csv"), "t"), ["0", "1"]);
    assert_eq!(column(&d.join("res/i5/interp.csv"), "step").len(), 5);
    // Endpoints are the reconstructions of the two inputs.
    assert_eq!(load_grid(&d.join("res/i2/step_000.vox")).unwrap(), load_grid(&d.join("res/i5/step_000.vox")).unwrap());
    assert_eq!(load_grid(&d.join("res/i2/step_001.vox")).unwrap(), load_grid(&d.join("res/i5/step_004.vox")).unwrap());
    let samples = metaforge::training::load_samples(
        &metaforge::homogenizer::LabeledDataset::read_csv(&d.join("data/labeled.csv")).unwrap(),
        &d.join("data/labeled.csv"),
    )
    .unwrap();
    let cell = metaforge::voxel::EighthCell::from_values(4, samples[0].cell.clone()).unwrap();
    let z = model.encode(&cell).unwrap().mean;
    let octant = metaforge::voxel::binarize(model.decode(&z).unwrap().grid(), 0.5);
    let expect = metaforge::voxel::mirror_eighth(&metaforge::voxel::EighthCell::new(octant));
    assert_eq!(load_grid(&d.join("res/i2/step_000.vox")).unwrap(), expect);

    run(&["uq", "--checkpoint", "ck/model", "--id", &ids[2], "--n", "20", "--out", "res/uq.json"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("res/uq.json")).unwrap()).unwrap();
    for p in ["E", "nu"] {
        let (a, e, t) = (v[p]["aleatoric"].as_f64().unwrap(), v[p]["epistemic"].as_f64().unwrap(), v[p]["total"].as_f64().unwrap());
        assert!((t * t - a * a - e * e).abs() <= 1e-9 * t * t);
    }
    assert!(d.join("res/uq.json.run.json").exists());

    run(&["uq-converge", "--checkpoint", "ck/model", "--id", &ids[2], "--ns", "10,20,40", "--out", "res/conv.csv"]);
    assert_eq!(column(&d.join("res/conv.csv"), "N"), ["10", "20", "40"]);

    run(&["design", "--checkpoint", "ck/model", "--case", "bulk", "--beta", "0.5", "--beta", "5", "--no-verify", "--out", "res/bulk"]);
    let (h, rows) = csv_rows(&d.join("res/bulk/archive.csv"));
    assert_eq!(
        h.iter().collect::<Vec<_>>(),
        ["case", "beta", "z_json", "pred_mu_E", "pred_sigma_E", "pred_mu_nu", "pred_sigma_nu", "pred_mu_K", "pred_sigma_K", "vf", "fea_E", "fea_nu", "fea_K"]
    );
    assert_eq!(rows.len(), 2);

    run(&["design", "--checkpoint", "ck/model", "--case", "e-nu", "--mode", "deterministic", "--vf", "0.5", "--out", "res/det"]);
    let archive = d.join("res/det/archive.csv");
    for col in ["pred_sigma_E", "pred_sigma_nu", "pred_sigma_K"] {
        assert!(column(&archive, col).iter().all(String::is_empty), "{col} should be empty");
    }
}
