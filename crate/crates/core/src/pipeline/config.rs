use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, PipelineError};
use crate::compressors::CompressionMethod;
use crate::trainer::{Budget, PrehabConfig, RehabConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Hidden widths of the student; input and output come from the dataset.
    pub hidden_widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionSpec {
    pub methods: Vec<CompressionMethod>,
    /// Ratio `0.0` leaves the model uncompressed.
    pub ratios: Vec<f64>,
    /// Compressed layers; `None` means every layer except the head.
    pub layers: Option<Vec<usize>>,
}

impl Default for CompressionSpec {
    fn default() -> Self {
        Self {
            methods: CompressionMethod::ALL.to_vec(),
            ratios: vec![0.2, 0.4, 0.5, 0.6],
            layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub prehab: bool,
    pub rehab: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            prehab: true,
            rehab: true,
        }
    }
}

/// Full experiment description. Every per-run seed is `base seed + s` for
/// each `s` in `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub base: TrainConfig,
    /// Template for every prehab run; `lambda` is taken from `lambdas`.
    pub prehab: PrehabConfig,
    /// `0.0` is the no-prehab baseline.
    pub lambdas: Vec<f64>,
    pub compression: CompressionSpec,
    pub rehab: RehabConfig,
    pub stages: StageToggles,
    pub seeds: Vec<u64>,
    /// Leading singular values kept in per-layer spectrum summaries.
    pub spectrum_top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                teacher_hidden: vec![16],
                train_samples: 32768,
                ..DatasetSpec::default()
            },
            model: ModelSpec::default(),
            base: TrainConfig {
                budget: Budget::Steps(8000),
                ..TrainConfig::default()
            },
            prehab: PrehabConfig::default(),
            lambdas: vec![0.0, 0.1],
            compression: CompressionSpec::default(),
            rehab: RehabConfig::default(),
            stages: StageToggles::default(),
            seeds: (0..10).collect(),
            spectrum_top_k: 8,
        }
    }
}

fn check_unique<T: fmt::Display>(name: &str, values: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut seen = HashSet::new();
    for v in values {
        let key = v.to_string();
        if !seen.insert(key.clone()) {
            return Err(PipelineError::Config(format!("duplicate {name} {key}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let config: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        self.dataset.validate()?;
        if self.model.hidden_widths.contains(&0) {
            return bad("model widths must be >= 1".into());
        }
        for &r in &self.compression.ratios {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("ratio {r} must lie in [0, 1)"));
            }
        }
        for &l in &self.lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda {l} must be finite and >= 0"));
            }
            if l > 0.0 && !self.stages.prehab {
                return bad(format!("lambda {l} needs the prehab stage enabled"));
            }
        }
        if self.stages.prehab {
            let steps = self
                .prehab
                .budget
                .steps(self.dataset.train_samples, self.prehab.batch_size);
            if steps == 0 {
                return bad("prehab needs at least one step".into());
            }
        }
        let rehab_samples = match self.dataset.rehab_samples {
            0 => self.dataset.train_samples,
            n => n,
        };
        for (name, batch, samples) in [
            ("base", self.base.batch_size, self.dataset.train_samples),
            ("prehab", self.prehab.batch_size, self.dataset.train_samples),
            ("rehab", self.rehab.batch_size, rehab_samples),
        ] {
            if batch == 0 || batch > samples {
                return bad(format!("{name} batch size {batch} must be in 1..={samples}"));
            }
        }
        let layers = self.model.hidden_widths.len() + 1;
        if let Some(list) = &self.compression.layers {
            if let Some(l) = list.iter().find(|&&l| l >= layers) {
                return bad(format!("compression layer {l} out of range for {layers} layers"));
            }
        }
        if self.prehab.layer_lambdas.len() > layers {
            return bad("more per-layer lambdas than layers".into());
        }
        check_unique("method", self.compression.methods.iter())?;
        check_unique("ratio", self.compression.ratios.iter())?;
        check_unique("lambda", self.lambdas.iter())?;
        check_unique("seed", self.seeds.iter())?;
        Ok(())
    }

    /// Student widths including input and class count.
    pub fn student_widths(&self) -> Vec<usize> {
        let mut w = vec![self.dataset.input_dim];
        w.extend(&self.model.hidden_widths);
        w.push(self.dataset.num_classes);
        w
    }

    /// Grid whose axes named in `filter` are replaced by that single value.
    /// Values need not appear in the original grid.
    pub fn restrict(&self, filter: &CellFilter) -> Result<Self, PipelineError> {
        let mut out = self.clone();
        if let Some(m) = filter.method {
            out.compression.methods = vec![m];
        }
        if let Some(r) = filter.ratio {
            out.compression.ratios = vec![r];
        }
        if let Some(l) = filter.lambda {
            out.lambdas = vec![l];
        }
        if let Some(s) = filter.seed {
            out.seeds = vec![s];
        }
        out.validate()?;
        Ok(out)
    }
}

/// Cell selector parsed from `method=…,ratio=…,lambda=…,seed=…`; every key
/// is optional.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub method: Option<CompressionMethod>,
    pub ratio: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
}

impl FromStr for CellFilter {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = CellFilter::default();
        let bad = |msg: String| PipelineError::Config(format!("cell `{s}`: {msg}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
            let value = value.trim();
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key.trim() {
                "method" => out.method = Some(value.parse().map_err(bad)?),
                "ratio" => out.ratio = Some(num(value)?),
                "lambda" => out.lambda = Some(num(value)?),
                "seed" => out.seed = Some(value.parse().map_err(|e| bad(format!("seed: {e}")))?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), config);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), config);
        assert_eq!(config.student_widths(), vec![64, 64, 64, 4]);
    }

    #[test]
    fn invalid_configs() {
        assert!(ExperimentConfig::from_json(r#"{"lambdas":[-1.0]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"compression":{"ratios":[1.0]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds":[1,1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus":1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds":[1"#).is_err());
    }

    #[test]
    fn cell_filter_parsing() {
        let f: CellFilter = "method=whitened_svd, ratio=0.5,lambda=0.1,seed=3".parse().unwrap();
        assert_eq!(f.method, Some(CompressionMethod::WhitenedSvd));
        assert_eq!(f.ratio, Some(0.5));
        assert_eq!(f.lambda, Some(0.1));
        assert_eq!(f.seed, Some(3));
        assert!("method=svd".parse::<CellFilter>().is_err());
        assert!("ratio".parse::<CellFilter>().is_err());
        let restricted = ExperimentConfig::default().restrict(&f).unwrap();
        assert_eq!(restricted.seeds, vec![3]);
        assert_eq!(restricted.compression.ratios, vec![0.5]);
    }
}
