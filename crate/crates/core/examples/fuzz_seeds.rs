//! Regenerates the binary fuzz corpus seeds under `fuzz/corpus/`.
//!
//! `cargo run -p stagediff-core --example fuzz_seeds`

use std::fs;
use std::path::Path;

use stagediff::dataio::{self, encode_window_cache, fit_normalize, make_windows, PreparedData};
use stagediff::manifest::ExperimentManifest;
use stagediff::model::{self, StageDiffConfig, TrainConfig};
use stagediff::schedule::ScheduleConfig;

fn main() -> stagediff::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = root.join(target);
        fs::create_dir_all(&dir).expect("corpus dir");
        fs::write(dir.join(name), bytes).expect("corpus file");
    };

    let raw = dataio::toy_sine_series(24, 0);
    let (scaled, norm) = fit_normalize(&raw);
    let windows = make_windows(&scaled, 8, 4)?;
    let data = PreparedData {
        content_hash: "seed".into(),
        feature_names: raw.feature_names.clone(),
        norm,
        windows: windows.clone(),
    };
    write("window_cache", "toy", &encode_window_cache(&data));

    fs::create_dir_all(root.join("windows_csv")).expect("corpus dir");
    dataio::write_windows_csv(
        root.join("windows_csv/toy"),
        &windows.windows,
        &raw.feature_names,
        dataio::CsvLayout::Long,
    )?;

    let cfg = StageDiffConfig {
        l_ser: 8,
        stages: 2,
        dim: 2,
        scales: 1,
        l_patch: 2,
        l_win: 2,
        d_model: 4,
        heads: 1,
        schedule: ScheduleConfig {
            steps: 2,
            ..Default::default()
        },
        train: TrainConfig {
            steps: 1,
            batch_size: 2,
            log_every: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let (ckpt, _) = model::train(&windows, &cfg)?;
    write("checkpoint", "micro", &ckpt.encode());
    write("checkpoint", "micro_no_optimizer", &ckpt.clone().without_optimizer().encode());

    let manifest = ExperimentManifest::from_toml_str(MANIFEST)?;
    write("manifest", "full", manifest.to_toml_string()?.as_bytes());
    write("manifest", "minimal", MANIFEST.as_bytes());
    Ok(())
}

const MANIFEST: &str = r#"name = "toy"
seed = 1

[data]
path = "toy.csv"
schema = { columns = ["a", "b"] }

[model]
l_ser = 8
stages = 2
dim = 2
ablation = "no_cd"
"#;
