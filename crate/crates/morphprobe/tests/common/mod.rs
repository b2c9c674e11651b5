#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use morphprobe::{Experiment, ExperimentConfig, Options, Pipeline};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The bundled fixture config with its output redirected to `out`.
pub fn fixture_experiment(out: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> Experiment {
    let dir = workspace_root().join("configs");
    let text = std::fs::read_to_string(dir.join("fixture.toml")).unwrap();
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.output = out.to_path_buf();
    edit(&mut cfg);
    Experiment::from_config(cfg, dir, &[]).unwrap()
}

pub fn pipeline(exp: Experiment) -> Pipeline {
    Pipeline::new(exp, Options::default()).unwrap()
}

/// Relative path -> contents for every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
