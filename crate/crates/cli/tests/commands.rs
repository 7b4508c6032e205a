use std::path::Path;

use lacvis_cli::commands::{self, InvertArgs, InvertTarget};
use lacvis_cli::config::RunConfig;
use lacvis_cli::pipeline::{HISTORY_FILE, MODEL_FILE};

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        [train]
        steps = 12
        dataset_size = 4

        [data]
        probe_images = 48
        test_images = 24

        [analysis]
        random_orderings = 50

        [attention]
        enabled = true
        images = 2

        [attention.head]
        steps = 4
        train_size = 16
        "#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn train_is_deterministic_and_creates_the_output_dir() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a/nested"), root.path().join("b"));
    commands::train(&small(&a)).unwrap();
    commands::train(&small(&b)).unwrap();
    for f in [MODEL_FILE, HISTORY_FILE, "lac_dataset.lacv", "attention_history.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between runs");
    }
    let (header, rows) = csv_rows(&a.join(HISTORY_FILE));
    assert_eq!(header, ["step", "loss", "mean_abs_beta", "min_gamma"]);
    assert_eq!(rows.len(), 12);
}

#[test]
fn invert_emits_every_layer_and_a_normalization_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let args = InvertArgs {
        image: 1,
        layer: None,
        target: InvertTarget::Class(0),
    };
    commands::invert(&cfg, &args).unwrap();
    for l in 0..cfg.encoder.widths.len() {
        assert!(dir.path().join(format!("x_hat_l{l}.ppm")).exists());
    }
    for part in ["full", "positive", "negative"] {
        assert!(dir.path().join(format!("class0_{part}.ppm")).exists());
    }
    let (header, rows) = csv_rows(&dir.path().join("invert_normalization.csv"));
    assert_eq!(header, ["file", "max_abs", "offset", "scale"]);
    assert_eq!(rows.len(), 1 + cfg.encoder.widths.len() + 3);
    let ppm = read(&dir.path().join("input.ppm"));
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);

    let bad = InvertArgs {
        image: 0,
        layer: Some(1),
        target: InvertTarget::Channels(vec![2, 16]),
    };
    let e = commands::invert(&cfg, &bad).unwrap_err().to_string();
    assert!(e.contains("0..16"), "{e}");
}

#[test]
fn select_ablate_and_attend_emit_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let r = commands::select(&cfg).unwrap();
    assert!(r.summary.contains_key("duality_agreement_rate"));
    let (_, rows) = csv_rows(&dir.path().join("selection.csv"));
    assert_eq!(rows.len(), 3 * cfg.selection.k);
    assert!(dir.path().join("duality.json").exists());

    commands::ablate(&cfg).unwrap();
    let (header, rows) = csv_rows(&dir.path().join("ablation.csv"));
    assert_eq!(header, ["fraction", "descending_mean", "ascending_mean", "random_mean", "random_std"]);
    assert_eq!(rows.len(), 21);
    let (_, rows) = csv_rows(&dir.path().join("severity.csv"));
    assert_eq!(rows.len(), 6);
    let sev: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(sev, ["0", "1", "2", "3", "4", "5"]);

    let r = commands::attend(&cfg).unwrap();
    assert!(r.passed(), "{}", r.to_json());
    assert!(dir.path().join("attend_img0_tokens0.ppm").exists());
}

#[test]
fn select_rejects_k_above_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.selection.k = 33;
    let e = format!("{:#}", commands::select(&cfg).unwrap_err());
    assert!(e.contains("selection.k"), "{e}");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    commands::ablate(&cfg).unwrap();
    let first = (read(&dir.path().join("ablate_report.json")), read(&dir.path().join("ablation.csv")));
    commands::ablate(&cfg).unwrap();
    let second = (read(&dir.path().join("ablate_report.json")), read(&dir.path().join("ablation.csv")));
    assert_eq!(first, second);
}
