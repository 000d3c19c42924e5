//! Optional TOML run configuration. Every key mirrors a command-line flag;
//! flags win over file values, which win over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use decamel::eval::ShotMode;
use decamel::extractor::ExtractorKind;
use decamel::pipeline::InitMode;
use decamel::{Error, Result};
use serde::Deserialize;

use crate::FreezeArg;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, rename = "export-projection")]
    pub export: ExportSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub out: Option<PathBuf>,
    pub identities: Option<usize>,
    pub views: Option<usize>,
    pub images: Option<usize>,
    pub dim: Option<usize>,
    pub spread: Option<f64>,
    pub noise: Option<f64>,
    pub distortion: Option<f64>,
    pub families: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub target_dim: Option<usize>,
    pub max_alternations: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub refresh_period: Option<usize>,
    pub extractor: Option<ExtractorKind>,
    pub hidden: Option<usize>,
    pub init: Option<InitMode>,
    pub symmetric: Option<bool>,
    pub freeze: Option<FreezeArg>,
    pub view_clusters: Option<usize>,
    pub ivc: Option<bool>,
    pub labels_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<ShotMode>,
    pub repetitions: Option<usize>,
    pub max_rank: Option<usize>,
    pub unseen_views: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let c = FileConfig::parse(
            "seed = 4\n[train]\nlambda = 0.5\ninit = \"identity\"\nfreeze = \"metric\"\n\
             [eval]\nmode = \"single-shot\"\nunseen_views = [3]\n[export-projection]\nout = \"p\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.train.lambda, Some(0.5));
        assert_eq!(c.train.init, Some(InitMode::Identity));
        assert_eq!(c.train.freeze, Some(FreezeArg::Metric));
        assert_eq!(c.eval.mode, Some(ShotMode::SingleShot));
        assert_eq!(c.eval.unseen_views, Some(vec![3]));
        assert_eq!(c.export.out, Some(PathBuf::from("p")));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(FileConfig::parse("[train]\nlamda = 1.0\n").is_err());
        assert!(FileConfig::parse("colour = 1\n").is_err());
    }
}
