//! Recipe expansions are pinned by golden files under `recipes/`.
//! Regenerate with `CLASSIL_UPDATE_GOLDEN=1 cargo test -p classil --test recipes`.

use std::path::PathBuf;

use classil::config::ExperimentConfig;
use classil::recipes::{expand, Recipe, RECIPES};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("recipes").join(format!("{name}.toml"))
}

fn base_for(name: &str) -> ExperimentConfig {
    if name == "desk" {
        ExperimentConfig::desk()
    } else {
        ExperimentConfig::cifar100()
    }
}

#[test]
fn expansions_match_golden_files() {
    let update = std::env::var_os("CLASSIL_UPDATE_GOLDEN").is_some();
    for (name, aliases) in RECIPES {
        let recipe = expand(name, &base_for(name)).unwrap();
        let path = golden_path(name);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, toml::to_string_pretty(&recipe).unwrap()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let golden: Recipe = toml::from_str(&text).unwrap();
        assert_eq!(recipe, golden, "recipe {name} drifted from {}", path.display());
        for alias in *aliases {
            assert_eq!(expand(alias, &base_for(name)).unwrap(), golden);
        }
    }
}

#[test]
fn expansion_is_pure() {
    for (name, _) in RECIPES {
        let base = base_for(name);
        let before = base.clone();
        assert_eq!(expand(name, &base).unwrap(), expand(name, &base).unwrap());
        assert_eq!(base, before);
    }
}

#[test]
fn every_variant_validates() {
    for (name, _) in RECIPES {
        for v in expand(name, &base_for(name)).unwrap().variant {
            v.config.validate().unwrap_or_else(|e| panic!("{name}/{}: {e}", v.label));
        }
    }
}

#[test]
fn preset_files_match_presets() {
    let update = std::env::var_os("CLASSIL_UPDATE_GOLDEN").is_some();
    for name in ["desk", "cifar100"] {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.toml"));
        let preset = ExperimentConfig::preset(name).unwrap();
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, preset.to_toml()).unwrap();
        }
        assert_eq!(ExperimentConfig::load(&path).unwrap(), preset, "{}", path.display());
    }
}
