//! Run configuration: a JSON document with one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::AnalysisConfig;
use crate::error::{Error, Result};
use crate::eval::default_thresholds;
use crate::gradcore::ProbKind;
use crate::model::{PoolingMode, CONV_WIDTHS};
use crate::rib::{PretrainConfig, Preset, RibConfig, ScratchConfig};
use crate::toydata::DatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub init_seed: u64,
    /// Conv widths; fixed, accepted only so the schema is explicit.
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            init_seed: 0,
            widths: CONV_WIDTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch: d.batch,
        }
    }
}

/// RIB settings on top of a preset; unset fields take the preset's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RibSection {
    pub preset: Preset,
    pub k: Option<usize>,
    pub lr: Option<f64>,
    pub margin: Option<f64>,
    pub batch: Option<usize>,
    pub tau: Option<f64>,
    pub pooling: Option<PoolingMode>,
    pub seed: Option<u64>,
}

impl Default for RibSection {
    fn default() -> Self {
        RibSection {
            preset: Preset::Toy,
            k: None,
            lr: None,
            margin: None,
            batch: None,
            tau: None,
            pooling: None,
            seed: None,
        }
    }
}

impl RibSection {
    pub fn resolve(&self) -> RibConfig {
        let p = RibConfig::preset(self.preset);
        RibConfig {
            k: self.k.unwrap_or(p.k),
            lr: self.lr.unwrap_or(p.lr),
            margin: self.margin.unwrap_or(p.margin),
            batch: self.batch.unwrap_or(p.batch),
            tau: self.tau.unwrap_or(p.tau),
            pooling: self.pooling.unwrap_or(p.pooling),
            seed: self.seed.unwrap_or(p.seed),
        }
    }

    fn filled(&self) -> Self {
        let r = self.resolve();
        RibSection {
            preset: self.preset,
            k: Some(r.k),
            lr: Some(r.lr),
            margin: Some(r.margin),
            batch: Some(r.batch),
            tau: Some(r.tau),
            pooling: Some(r.pooling),
            seed: Some(r.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    /// Marked eval images adapted by `rib` and scored by `eval-seed`.
    pub n_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: default_thresholds(),
            n_images: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// BCE output nonlinearities compared against the margin loss.
    pub kinds: Vec<ProbKind>,
    pub n_images: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            kinds: ProbKind::ALL.to_vec(),
            n_images: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub n_images: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection { n_images: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub rib: RibSection,
    pub analysis: AnalysisConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub scratch: ScratchConfig,
    pub render: RenderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            rib: RibSection::default(),
            analysis: AnalysisConfig::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            scratch: ScratchConfig::default(),
            render: RenderSection::default(),
        }
    }
}

/// Command-line settings layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    /// `section.key=value` pairs, applied last.
    pub keys: Vec<String>,
}

fn set_path(root: &mut Value, path: &[&str], value: Value) -> Result<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file, then flags, then `key=value` overrides.
    pub fn load(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingArtifact(p.to_path_buf()),
                    _ => Error::io(p, e),
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        if let Some(out) = &o.out {
            set_path(&mut root, &["out"], Value::String(out.display().to_string()))?;
        }
        if let Some(seed) = o.seed {
            for path in [["dataset", "seed"], ["model", "init_seed"], ["rib", "seed"], ["scratch", "seed"]] {
                set_path(&mut root, &path, Value::from(seed))?;
            }
        }
        if let Some(preset) = o.preset {
            set_path(&mut root, &["rib", "preset"], serde_json::to_value(preset)?)?;
        }
        for kv in &o.keys {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            let path: Vec<&str> = key.split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("override key {key:?} is malformed")));
            }
            set_path(&mut root, &path, parse_value(raw))?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same settings with every preset-derived field written out.
    pub fn resolved(mut self) -> Self {
        self.rib = self.rib.filled();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| {
            r.map_err(|e| match e {
                Error::Validation(m) => Error::Config(m),
                e => e,
            })
        };
        if self.model.widths != CONV_WIDTHS {
            return Err(Error::Config(format!(
                "model.widths must be {CONV_WIDTHS:?}, got {:?}",
                self.model.widths
            )));
        }
        wrap(self.dataset.validate())?;
        wrap(self.rib.resolve().validate())?;
        wrap(self.analysis.validate())?;
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch == 0 || !(p.lr > 0.0) || !(0.0..1.0).contains(&p.momentum) {
            return Err(Error::Config(
                "pretrain needs epochs ≥ 1, batch ≥ 1, lr > 0 and momentum in [0, 1)".into(),
            ));
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.thresholds must be a non-empty list within [0, 1]".into()));
        }
        if self.eval.n_images == 0 || self.ablate.n_images == 0 || self.render.n_images == 0 {
            return Err(Error::Config("image counts must be at least 1".into()));
        }
        if self.scratch.batch == 0 || self.scratch.epochs == 0 {
            return Err(Error::Config("scratch needs epochs ≥ 1 and batch ≥ 1".into()));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            batch: self.pretrain.batch,
            seed: self.model.init_seed,
        }
    }

    pub fn rib_config(&self) -> RibConfig {
        self.rib.resolve()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("config serializes");
        v.push(b'\n');
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(k: &[&str]) -> Overrides {
        Overrides {
            keys: k.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_resolve_the_toy_preset() {
        let c = RunConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(c.rib_config(), RibConfig::preset(Preset::Toy));
        assert_eq!(c.rib.lr, Some(1e-3));
        assert_eq!(c.analysis.threshold, 0.3);
        let back: RunConfig = serde_json::from_slice(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn precedence_and_presets() {
        let o = Overrides {
            preset: Some(Preset::Paper),
            seed: Some(9),
            keys: vec!["rib.k=3".into(), "dataset.seed=4".into(), "rib.pooling=gap".into()],
            ..Default::default()
        };
        let c = RunConfig::load(None, &o).unwrap();
        let r = c.rib_config();
        assert_eq!((r.k, r.lr, r.margin, r.seed), (3, 8e-6, 600.0, 9));
        assert_eq!(r.pooling, PoolingMode::Gap);
        assert_eq!((c.dataset.seed, c.model.init_seed, c.scratch.seed), (4, 9, 9));
    }

    #[test]
    fn file_values_and_nulls() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"rib": {"lr": 0.5}, "scratch": {"margin": 100}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &keys(&["scratch.margin=null"])).unwrap();
        assert_eq!(c.rib_config().lr, 0.5);
        assert_eq!(c.scratch.margin, None);
        let c = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(c.scratch.margin, Some(100.0));
    }

    #[test]
    fn rejections() {
        for bad in [
            &["rib.kk=3"][..],
            &["nosection.x=1"],
            &["model.widths=[1,2]"],
            &["rib.tau=0"],
            &["analysis.threshold=2"],
            &["eval.thresholds=[]"],
            &["rib.k"],
            &["rib..k=1"],
        ] {
            let e = RunConfig::load(None, &keys(bad)).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad:?}: {e}");
        }
        let missing = RunConfig::load(Some(Path::new("/nonexistent/c.json")), &Overrides::default());
        assert!(matches!(missing, Err(Error::MissingArtifact(_))));
    }
}
