//! Input-transformation and stochastic-activation defenses.
//!
//! A defense is a chain of [`InputStage`]s in front of a [`Classifier`],
//! optionally with stochastic activation pruning inside it. Stages that
//! break differentiation record a single tape node; an attacker can attach a
//! backward surrogate to that node without touching the forward pass.

mod chain;
pub mod geometric;
pub mod quantize;
pub mod sap;
pub mod thermometer;
pub mod tv;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use advlab_autodiff::{AnalyticRule, BackwardRule, IdentityRule, NodeId, Tape};
use serde::{Deserialize, Serialize};

pub use chain::{ChainDraw, DefendedModel, DefendedModelFront};
pub use geometric::{crop_rescale, random_rescale_pad, CropRescale, RescalePad};
pub use quantize::{bit_depth_reduce, jpeg_proxy, BitDepth, JpegProxy};
pub use sap::{sap_layer, SapConfig};
pub use thermometer::{thermometer_encode, thermometer_surrogate, Thermometer, ThermometerSurrogate};
pub use tv::{tv_minimize, TvMinimize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Differentiability {
    /// Differentiable given any fixed draw of its randomness.
    Differentiable,
    /// Gradient is zero almost everywhere or undefined.
    Shattered,
}

/// Selects one realization of a stage's randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Draw {
    /// The only realization of a deterministic stage.
    Fixed,
    /// A realization sampled from the stage's distribution.
    Seed(u64),
    /// The i-th member of a finite enumerable transformation set.
    Pattern(usize),
}

/// Nodes produced when a stage is recorded.
#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    pub output: NodeId,
    /// The node computing the non-differentiable transform, if any.
    pub shattered: Option<NodeId>,
}

pub trait InputStage: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn differentiability(&self) -> Differentiability;
    fn is_stochastic(&self) -> bool;
    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
    fn record(&self, tape: &mut Tape, x: NodeId, draw: Draw) -> Result<StageNodes>;
    /// Probabilities of the stage's finite transformation set, indexed by
    /// [`Draw::Pattern`]; `None` if the set is not enumerable.
    fn patterns(&self, _input: &[usize]) -> Option<Vec<f64>> {
        None
    }
    /// The backward substitute used when none is registered explicitly.
    fn default_surrogate(&self) -> Option<Surrogate> {
        match self.differentiability() {
            Differentiability::Differentiable => None,
            Differentiability::Shattered => Some(Surrogate::Identity),
        }
    }
}

/// Backward-pass substitute for a stage.
#[derive(Clone, Debug)]
pub enum Surrogate {
    /// Straight-through: the incoming gradient passes unchanged.
    Identity,
    /// The node's own analytic backward rule.
    TrueBackward,
    /// Any other rule, e.g. the smoothed thermometer code.
    Rule(Arc<dyn BackwardRule>),
}

impl Surrogate {
    pub(crate) fn install(&self, tape: &mut Tape, node: NodeId) -> Result<()> {
        let rule: Arc<dyn BackwardRule> = match self {
            Surrogate::Identity => Arc::new(IdentityRule),
            Surrogate::TrueBackward => Arc::new(AnalyticRule(tape.node(node)?.op.clone())),
            Surrogate::Rule(r) => r.clone(),
        };
        tape.set_override(node, rule)?;
        Ok(())
    }
}

/// Per-stage backward substitutes keyed by stage name.
#[derive(Clone, Debug, Default)]
pub struct SurrogateRegistry {
    rules: BTreeMap<String, Surrogate>,
}

impl SurrogateRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Each stage's own default surrogate.
    pub fn defaults(stages: &[Arc<dyn InputStage>]) -> Self {
        let mut reg = Self::default();
        for s in stages {
            if let Some(sur) = s.default_surrogate() {
                reg.rules.insert(s.name().to_string(), sur);
            }
        }
        reg
    }

    pub fn register(&mut self, stage: &str, surrogate: Surrogate) {
        self.rules.insert(stage.to_string(), surrogate);
    }

    pub fn remove(&mut self, stage: &str) {
        self.rules.remove(stage);
    }

    pub fn get(&self, stage: &str) -> Option<&Surrogate> {
        self.rules.get(stage)
    }
}

/// Serializable description of a preprocessing stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preprocessor {
    Thermometer {
        #[serde(default = "defaults::levels")]
        levels: usize,
    },
    BitDepth {
        #[serde(default = "defaults::bits")]
        bits: u32,
    },
    JpegProxy {
        #[serde(default = "defaults::quality")]
        quality: u32,
    },
    TvMinimize {
        #[serde(default = "defaults::keep_prob")]
        keep_prob: f64,
        #[serde(default = "defaults::tv_weight")]
        weight: f64,
        #[serde(default = "defaults::tv_steps")]
        steps: usize,
        #[serde(default = "defaults::tv_step_size")]
        step_size: f64,
    },
    CropRescale {
        #[serde(default = "defaults::crop_fraction")]
        fraction: f64,
    },
    RescalePad {
        #[serde(default = "defaults::out_size")]
        out_size: usize,
    },
    None,
}

pub mod defaults {
    pub fn levels() -> usize {
        10
    }
    pub fn bits() -> u32 {
        3
    }
    pub fn quality() -> u32 {
        75
    }
    pub fn keep_prob() -> f64 {
        0.5
    }
    pub fn tv_weight() -> f64 {
        0.03
    }
    pub fn tv_steps() -> usize {
        30
    }
    pub fn tv_step_size() -> f64 {
        0.1
    }
    pub fn crop_fraction() -> f64 {
        0.875
    }
    pub fn out_size() -> usize {
        19
    }
}

impl Preprocessor {
    /// Builds the stage; `None` yields no stage at all.
    pub fn build(&self) -> Result<Option<Arc<dyn InputStage>>> {
        Ok(Some(match *self {
            Preprocessor::Thermometer { levels } => Arc::new(Thermometer::new(levels)?),
            Preprocessor::BitDepth { bits } => Arc::new(BitDepth::new(bits)?),
            Preprocessor::JpegProxy { quality } => Arc::new(JpegProxy::new(quality)?),
            Preprocessor::TvMinimize {
                keep_prob,
                weight,
                steps,
                step_size,
            } => Arc::new(TvMinimize::new(keep_prob, weight, steps, step_size)?),
            Preprocessor::CropRescale { fraction } => Arc::new(CropRescale::new(fraction)?),
            Preprocessor::RescalePad { out_size } => Arc::new(RescalePad::new(out_size)),
            Preprocessor::None => return Ok(None),
        }))
    }
}

type TransformFn = dyn Fn(&advlab_autodiff::Tensor) -> Result<advlab_autodiff::Tensor> + Send + Sync;

/// A tape op evaluating an arbitrary transform whose true gradient is zero.
pub struct ShatteredOp {
    name: String,
    f: Box<TransformFn>,
}

impl ShatteredOp {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&advlab_autodiff::Tensor) -> Result<advlab_autodiff::Tensor> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Box::new(f),
        }
    }

    /// Records the op on `x` and returns the node.
    pub fn record(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        Ok(tape.custom(Arc::new(self), &[x])?)
    }
}

impl fmt::Debug for ShatteredOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShatteredOp").field("name", &self.name).finish()
    }
}

impl advlab_autodiff::CustomOp for ShatteredOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&advlab_autodiff::Tensor]) -> advlab_autodiff::Result<advlab_autodiff::Tensor> {
        (self.f)(inputs[0]).map_err(|e| advlab_autodiff::AutodiffError::InvalidArgument {
            op: self.name.clone(),
            message: e.to_string(),
        })
    }

    fn vjp(&self, ctx: &advlab_autodiff::VjpContext<'_>) -> advlab_autodiff::Result<Vec<Option<advlab_autodiff::Tensor>>> {
        advlab_autodiff::ZeroRule.vjp(ctx)
    }
}

/// Records a shattered stage: one transform node, with the registered
/// surrogate installed on it when `bpda` is set.
pub(crate) fn shattered_nodes(tape: &mut Tape, x: NodeId, op: ShatteredOp) -> Result<StageNodes> {
    let node = op.record(tape, x)?;
    Ok(StageNodes {
        output: node,
        shattered: Some(node),
    })
}
