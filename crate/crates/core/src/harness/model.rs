use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Bound, ParamStore, Tape, Tensor, Var};
use crate::baselines::{MdnConfig, MdnModel};
use crate::conditioners::{ConditionerSpec, Context, ContextBatch, Variant};
use crate::density::ConditionalDensity;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};

use super::config::{ExperimentConfig, ModelKind};
use super::data::TaskData;

/// A trainable density chosen by the `model` config key.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Flow(FlowModel),
    Mdn(MdnModel),
}

impl Model {
    /// Fresh model for `cfg`, with standardizers fitted on the training split.
    pub fn build(cfg: &ExperimentConfig, data: &TaskData) -> Result<Self> {
        let mut model = match cfg.model {
            ModelKind::Flow => {
                let spec = match cfg.conditioner {
                    Variant::Identity => ConditionerSpec::identity(1),
                    Variant::Mlp => ConditionerSpec::mlp(1, cfg.cond_hidden, cfg.cond_output),
                    v => ConditionerSpec::sequential(v),
                };
                let fc = FlowConfig {
                    blocks: cfg.blocks,
                    affine_hidden: cfg.affine_hidden,
                    base_hidden: cfg.base_hidden.clone(),
                    ..FlowConfig::new(2, spec, cfg.seed)
                };
                let mut f = FlowModel::new(&fc)?;
                // start from the standardized data's Gaussian fit
                f.zero_affine_and_base();
                Model::Flow(f)
            }
            ModelKind::Mdn => Model::Mdn(MdnModel::new(&MdnConfig {
                components: cfg.mdn_components,
                hidden: cfg.mdn_hidden.clone(),
                ..MdnConfig::new(2, 1, cfg.seed)
            })?),
        };
        let dn = data.fit_data_normalizer();
        let cn = data.fit_context_normalizer();
        match &mut model {
            Model::Flow(f) => {
                f.set_data_normalizer(dn)?;
                f.set_context_normalizer(cn)?;
            }
            Model::Mdn(m) => {
                m.set_data_normalizer(dn)?;
                m.set_context_normalizer(cn)?;
            }
        }
        Ok(model)
    }
}

impl ConditionalDensity for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Flow(m) => m.dim(),
            Model::Mdn(m) => m.dim(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            Model::Flow(m) => m.params(),
            Model::Mdn(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Flow(m) => m.params_mut(),
            Model::Mdn(m) => m.params_mut(),
        }
    }

    fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, x: &Tensor, ctx: &ContextBatch) -> Result<Var> {
        match self {
            Model::Flow(m) => m.log_prob_tape(tape, p, x, ctx),
            Model::Mdn(m) => m.log_prob_tape(tape, p, x, ctx),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, ctx: &Context, rng: &mut R) -> Result<Tensor> {
        match self {
            Model::Flow(m) => m.sample(n, ctx, rng),
            Model::Mdn(m) => m.sample(n, ctx, rng),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub model: Model,
    pub optimizer: AdamState,
    /// Completed training iterations.
    pub iteration: usize,
    /// Mean NLL of the final weights on the batch drawn for `iteration`.
    pub final_loss: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported format version {v} (expected {CHECKPOINT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing format version", path.display()))),
        }
        serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
