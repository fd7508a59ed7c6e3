//! Run configuration: a scale preset, overlaid with an optional JSON file,
//! then `--set` overrides, then `--seed` / `--out`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mfd_core::data::SynthConfig;
use mfd_core::detector::{Ablation, DetectorConfig, InferConfig, OptimConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 5 synthetic classes at 128×128, 3000 iterations.
    #[default]
    Toy,
    /// 1500 classes at 600×800 with the long schedule.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory with `annotations/`, `images/` and optionally
    /// `manifest.json`. When absent, the synthetic corpus described by
    /// `synth` is generated under `<out>/corpus`.
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            test_split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Continue from `optimizer.mfdn` / `model.mfdn` in the output directory.
    pub resume: bool,
    /// Also checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    /// Log a progress line every this many steps; 0 disables it.
    pub log_every: usize,
    /// Stop once this many steps are done, leaving a resumable checkpoint;
    /// 0 runs the whole schedule.
    pub stop_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub infer: InferConfig,
    /// Defaults to `<out>/model.mfdn`.
    pub checkpoint: Option<PathBuf>,
    /// Score this detection dump instead of running the model.
    pub detections: Option<PathBuf>,
    /// Split to evaluate; defaults to `dataset.test_split`.
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    /// Drives scene generation, parameter init, data order and sampling.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// One of `baseline`, `+fom`, `+bfp`, `+both`; overrides the two model
    /// toggles when set.
    pub ablation: Option<String>,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub model: DetectorConfig,
    pub optim: OptimConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Scale::Toy)
    }
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let (model, optim) = match scale {
            Scale::Toy => (DetectorConfig::toy(5), OptimConfig::toy()),
            Scale::Full => (DetectorConfig::default(), OptimConfig::default()),
        };
        Self {
            scale,
            seed: None,
            out: None,
            ablation: None,
            dataset: DatasetConfig::default(),
            synth: SynthConfig {
                num_classes: model.num_classes,
                ..SynthConfig::default()
            },
            model,
            optim,
            train: TrainOptions {
                log_every: 100,
                ..TrainOptions::default()
            },
            eval: EvalOptions::default(),
        }
    }

    /// Builds the effective configuration. `sets` are `key.path=value`
    /// strings; values parse as JSON and fall back to plain strings.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        if !user.is_object() {
            bail!("config must be a JSON object");
        }
        for s in sets {
            apply_set(&mut user, s)?;
        }
        if let Some(seed) = seed {
            user["seed"] = seed.into();
        }
        if let Some(out) = out {
            user["out"] = out.to_string_lossy().into_owned().into();
        }
        let scale: Scale = match user.get("scale") {
            Some(v) => serde_json::from_value(v.clone()).context("scale must be \"toy\" or \"full\"")?,
            None => Scale::Toy,
        };
        let mut merged = serde_json::to_value(Self::preset(scale))?;
        merge(&mut merged, user);
        let mut cfg: RunConfig = serde_json::from_value(merged).context("invalid configuration")?;
        if let Some(a) = &cfg.ablation {
            let a = Ablation::parse(a).with_context(|| format!("unknown ablation {:?}", a))?;
            cfg.model = cfg.model.with_ablation(a);
        }
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.optim.seed = seed;
        }
        cfg.synth.validate()?;
        cfg.model.validate()?;
        cfg.optim.validate()?;
        Ok(cfg)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.context("a seed is required (--seed N or \"seed\" in the config)")
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("an output directory is required (--out DIR or \"out\" in the config)")
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("--set expects KEY=VALUE, got {:?}", assignment))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("--set has an empty key segment in {:?}", key);
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        if !slot.is_object() {
            bail!("--set {}: {:?} is not an object", key, part);
        }
        slot = slot
            .as_object_mut()
            .expect("checked above")
            .entry(part)
            .or_insert_with(|| Value::Object(Map::new()));
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_toy_preset() {
        let c = RunConfig::resolve(None, &[], None, None).unwrap();
        assert_eq!(c.model, DetectorConfig::toy(5));
        assert_eq!(c.optim, OptimConfig::toy());
        assert!(c.require_seed().is_err());
    }

    #[test]
    fn set_overrides_nested_values() {
        let sets = ["optim.lr=0.5".to_string(), "model.fom.k=3".into(), "ablation=+bfp".into(), "dataset.root=data/x".into()];
        let c = RunConfig::resolve(None, &sets, Some(7), Some(Path::new("o"))).unwrap();
        assert_eq!(c.optim.lr, 0.5);
        assert_eq!(c.model.fom.k, 3);
        assert!(!c.model.fom_enabled && c.model.bfp_enabled);
        assert_eq!(c.dataset.root, Some(PathBuf::from("data/x")));
        assert_eq!((c.optim.seed, c.synth.seed), (7, 7));
        assert_eq!(c.out, Some(PathBuf::from("o")));
    }

    #[test]
    fn file_merges_over_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"scale": "full", "optim": {"iterations": 9}, "seed": 3}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &["seed=4".into()], None, None).unwrap();
        assert_eq!(c.model.num_classes, 1500);
        assert_eq!(c.optim.iterations, 9);
        assert_eq!(c.optim.momentum, 0.9);
        assert_eq!(c.seed, Some(4));
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::resolve(Some(Path::new("/nonexistent/c.json")), &[], None, None).is_err());
        assert!(RunConfig::resolve(None, &["model.no_such_field=1".into()], None, None).is_err());
        assert!(RunConfig::resolve(None, &["ablation=+everything".into()], None, None).is_err());
        assert!(RunConfig::resolve(None, &["novalue".into()], None, None).is_err());
        assert!(RunConfig::resolve(None, &["optim.momentum=2".into()], None, None).is_err());
    }
}
