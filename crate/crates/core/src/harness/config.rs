//! The experiment file: one TOML document describing data, model, defenses,
//! attacks, evaluation protocol, seeds and outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, SuccessCriterion};
use crate::defenses::{Preprocessor, SapConfig};
use crate::diagnostics::DiagnosticConfig;
use crate::error::{Error, Result};
use crate::lid::LidConfig;
use crate::model::{AdversarialTraining, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    /// Master seed; every other stream is derived from it unless a section
    /// sets its own.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lid: Option<LidSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_defenses() -> Vec<DefenseSpec> {
    vec![DefenseSpec::none()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// The built-in 16×16 synthetic digits.
    Desk {
        #[serde(default)]
        seed: u64,
    },
    Idx {
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_labels: Option<PathBuf>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Desk { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    Cnn,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: default_hidden() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Checkpoint of the classifier behind defenses that keep the input
    /// shape. Loaded if it exists.
    pub checkpoint: Option<PathBuf>,
    /// Train classifiers whose checkpoint is missing instead of failing.
    pub train_missing: bool,
    pub training: TrainConfig,
    pub adversarial: Option<AdversarialTraining>,
    /// Initialization seed of the network weights.
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            checkpoint: None,
            train_missing: true,
            training: TrainConfig::default(),
            adversarial: None,
            init_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub name: String,
    #[serde(default)]
    pub stages: Vec<Preprocessor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sap: Option<SapConfig>,
    /// Classifier for this defense; defaults to the model checkpoint when
    /// the stages keep the input shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// When training through shattered stages, differentiate the inner
    /// maximization through their surrogates.
    #[serde(default = "yes")]
    pub train_surrogates: bool,
    /// Adversarial training for this defense's classifier, replacing
    /// `model.adversarial`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdversarialTraining>,
}

fn yes() -> bool {
    true
}

impl DefenseSpec {
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            stages: Vec::new(),
            sap: None,
            checkpoint: None,
            train_surrogates: true,
            adversarial: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    #[default]
    Untargeted,
    /// Each image gets a uniformly random class other than its label.
    TargetedRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub mode: EvaluationMode,
    /// Test images evaluated, starting at `offset`; 0 means all.
    pub samples: usize,
    pub offset: usize,
    /// Success rule on stochastic defenses; deterministic ones always use
    /// a single trial.
    pub success: SuccessCriterion,
    /// Images per attack job.
    pub chunk_size: usize,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Run the obfuscation checklist on every defense.
    pub diagnose: bool,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            mode: EvaluationMode::Untargeted,
            samples: 100,
            offset: 0,
            success: SuccessCriterion::TEN_OF_TEN,
            chunk_size: 25,
            workers: 0,
            diagnose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidSpec {
    pub detector: LidConfig,
    /// Attack used to craft the detector's positive examples.
    pub attack: AttackConfig,
    /// Training images the detector attack is run on.
    pub train_images: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for LidSpec {
    fn default() -> Self {
        Self {
            detector: LidConfig::default(),
            attack: AttackConfig {
                kind: crate::attacks::AttackKind::Fgsm,
                epsilon: 0.1,
                iterations: 1,
                random_start: false,
                ..AttackConfig::default()
            },
            train_images: 2000,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Directory receiving `records.jsonl` and `summary.json`.
    pub dir: Option<PathBuf>,
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Rejects values that parse but cannot run; errors name the key.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.defenses.is_empty() {
            return fail("defenses", "at least one defense is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, d) in self.defenses.iter().enumerate() {
            if !names.insert(d.name.as_str()) {
                return fail(&format!("defenses[{i}].name"), format!("duplicate defense `{}`", d.name));
            }
            if let Some(adv) = &d.adversarial {
                if !(adv.epsilon >= 0.0) || adv.steps == 0 {
                    return fail(&format!("defenses[{i}].adversarial"), "needs ε ≥ 0 and at least one step".into());
                }
            }
            if let Some(s) = &d.sap {
                if let Err(e) = s.validate() {
                    return fail(&format!("defenses[{i}].sap"), e.to_string());
                }
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if let Err(e) = a.validate() {
                return fail(&format!("attacks[{i}]"), e.to_string());
            }
        }
        if let Err(e) = self.evaluation.success.validate() {
            return fail("evaluation.success", e.to_string());
        }
        if self.evaluation.chunk_size == 0 {
            return fail("evaluation.chunk_size", "must be positive".into());
        }
        if let Some(adv) = &self.model.adversarial {
            if !(adv.epsilon >= 0.0) || adv.steps == 0 {
                return fail("model.adversarial", "needs ε ≥ 0 and at least one step".into());
            }
        }
        if self.model.training.batch_size == 0 {
            return fail("model.training.batch_size", "must be positive".into());
        }
        if let Some(d) = &self.diagnostics {
            if d.grid.len() < 2 {
                return fail("diagnostics.grid", "grid must have ≥ 2 points".into());
            }
            if let Err(e) = d.attack.validate() {
                return fail("diagnostics.attack", e.to_string());
            }
        }
        if let Some(l) = &self.lid {
            if let Err(e) = l.attack.validate() {
                return fail("lid.attack", e.to_string());
            }
        }
        Ok(())
    }

    /// Label of attack `i`, unique within the config.
    pub fn attack_label(&self, i: usize) -> String {
        let a = &self.attacks[i];
        let base = format!("{}@{}", a.kind.name(), a.epsilon);
        let twins = self
            .attacks
            .iter()
            .filter(|b| b.kind == a.kind && b.epsilon == a.epsilon)
            .count();
        if twins > 1 {
            format!("{base}#{i}")
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3

[dataset]
kind = "desk"

[model]
architecture = { kind = "mlp", hidden = [64] }
training = { epochs = 2 }

[[defenses]]
name = "none"

[[defenses]]
name = "thermometer"
stages = [{ kind = "thermometer", levels = 10 }]

[[attacks]]
kind = "pgd_linf"
epsilon = 0.1
iterations = 10

[evaluation]
mode = "targeted_random"
samples = 20
"#;

    #[test]
    fn parse_and_round_trip() {
        let cfg = HarnessConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.defenses.len(), 2);
        assert_eq!(cfg.evaluation.mode, EvaluationMode::TargetedRandom);
        assert_eq!(cfg.model.training.epochs, 2);
        assert_eq!(cfg.model.training.batch_size, TrainConfig::default().batch_size);
        let again = HarnessConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = HarnessConfig::parse("").unwrap();
        assert_eq!(cfg.defenses, vec![DefenseSpec::none()]);
        assert!(cfg.attacks.is_empty());
        assert_eq!(cfg.evaluation.success, SuccessCriterion::TEN_OF_TEN);
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = HarnessConfig::parse("[evaluation]\nsampels = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("sampels"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert!(HarnessConfig::parse("[[attacks]]\nkind = \"pgd_linf\"\nepsilom = 0.1\n").is_err());
        assert!(HarnessConfig::parse("[[defenses]]\nname = \"x\"\nstages = [{ kind = \"thermometer\", bits = 3 }]\n").is_err());
    }

    #[test]
    fn validation_names_the_key() {
        let msg = HarnessConfig::parse("[[attacks]]\nkind = \"pgd_linf\"\niterations = 0\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("attacks[0]"), "{msg}");
        let msg = HarnessConfig::parse("[[defenses]]\nname = \"a\"\n[[defenses]]\nname = \"a\"\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("defenses[1].name"), "{msg}");
        let msg = HarnessConfig::parse("[evaluation]\nsuccess = { required = 11, trials = 10 }\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("evaluation.success"), "{msg}");
    }

    #[test]
    fn attack_labels_are_unique() {
        let cfg = HarnessConfig::parse(
            "[[attacks]]\nkind = \"fgsm\"\n[[attacks]]\nkind = \"pgd_linf\"\n[[attacks]]\nkind = \"pgd_linf\"\n",
        )
        .unwrap();
        let labels: Vec<String> = (0..3).map(|i| cfg.attack_label(i)).collect();
        assert_eq!(labels[0], "fgsm@0.3");
        assert_ne!(labels[1], labels[2]);
    }
}
