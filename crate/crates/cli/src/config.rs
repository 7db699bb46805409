use std::path::{Path, PathBuf};

use clap::ValueEnum;
use metaforge::design::{NsgaConfig, Verification};
use metaforge::generators::GeneratorConfig;
use metaforge::homogenizer::SolverConfig;
use metaforge::model::ModelConfig;
use metaforge::training::{PhaseSchedule, SplitSpec};
use metaforge::uq::UqConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 16^3 cells and small networks; minutes on a laptop.
    Desk,
    /// 48^3 cells and the full-size network.
    #[value(alias = "paper")]
    #[serde(alias = "paper")]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub results_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub solver: SolverConfig,
    /// Material draws per unit when labeling.
    pub noise_draws: usize,
    pub label_seed: u64,
    pub model: ModelConfig,
    pub schedule: PhaseSchedule,
    pub split: SplitSpec,
    pub uq: UqConfig,
    pub nsga: NsgaConfig,
    pub verification: Verification,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (edge, count, model, schedule) = match profile {
            Profile::Desk => (16, 200, ModelConfig::desk(), PhaseSchedule::desk()),
            Profile::Full => (48, 46_840, ModelConfig::full(), PhaseSchedule::full()),
        };
        Self {
            profile,
            paths: Paths {
                data_dir: "data".into(),
                checkpoint_dir: "checkpoints".into(),
                results_dir: "results".into(),
            },
            generator: GeneratorConfig { edge_voxels: edge, count, seed: 7, ..GeneratorConfig::default() },
            solver: SolverConfig::default(),
            noise_draws: 1,
            label_seed: 7,
            model,
            schedule,
            split: SplitSpec::default(),
            uq: UqConfig::default(),
            nsga: NsgaConfig::default(),
            verification: Verification::default(),
        }
    }

    /// Profile defaults overlaid with the keys present in a TOML file. The
    /// profile comes from `profile_flag`, else the file, else desk.
    pub fn load(file: Option<&Path>, profile_flag: Option<Profile>) -> Result<Self, String> {
        let overrides = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let from_file = match overrides.get("profile") {
            Some(v) => Some(Profile::deserialize(v.clone()).map_err(|e| format!("profile: {e}"))?),
            None => None,
        };
        let profile = profile_flag.or(from_file).unwrap_or(Profile::Desk);
        let defaults = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| e.to_string())?;
        let mut merged = defaults;
        overlay(&mut merged, overrides);
        merged.insert("profile".into(), toml::Value::try_from(profile).map_err(|e| e.to_string())?);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| format!("config: {e}"))
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_override_profile_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "profile = \"full\"\n[model]\nlatent_dim = 12\n[nsga]\ngenerations = 5\n").unwrap();
        let c = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!(c.profile, Profile::Full);
        assert_eq!(c.model.latent_dim, 12);
        assert_eq!(c.model.input_edge, 24);
        assert_eq!(c.nsga.generations, 5);
        assert_eq!(c.nsga.population, 64);
        let desk = RunConfig::load(Some(&p), Some(Profile::Desk)).unwrap();
        assert_eq!(desk.generator.edge_voxels, 16);
        assert_eq!(desk.model.latent_dim, 12);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::load(None, None).unwrap();
        assert_eq!(c, RunConfig::for_profile(Profile::Desk));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[model]\nlatent_dim = \"wide\"\n").unwrap();
        assert!(RunConfig::load(Some(&p), None).is_err());
    }
}
