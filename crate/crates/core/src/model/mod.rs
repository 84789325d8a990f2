//! Temporal multi-interest graph model: configuration, parameters, the
//! forward pass and checkpoints.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::dataio::SessionRecord;
use crate::error::{ConfigError, ModelError};
use crate::graph::{build_graph, GraphConfig, MultiInterestGraph};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{
    combine_and_stack, corr_loss, init_nodes, interest_attaching_layer, interest_extraction_layer,
    item_propagation_layer, predict, session_readout, total_loss, InterestState, LayerTrace, Readout, StackOutput,
};
pub use params::{GruParams, IntervalMlp, LayerParams, ModelParams, ParamSet, ParamVars, ReadoutParams};

/// Guard on interest compactness before dividing by it (bucket units).
pub const COMPACTNESS_EPS: f64 = 1e-3;
/// Lower clamp on log arguments in the loss.
pub const LOG_EPS: f64 = 1e-8;
/// Guard on vector norms (embedding normalization, cosine similarity).
pub const NORM_EPS: f64 = 1e-12;

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Uniform item-item attention instead of interval-driven weights.
    pub disable_vv_time: bool,
    /// Drop the temporal term from the interest-to-item attention.
    pub disable_uv_time: bool,
    /// Readout keys without the last-item interval embedding.
    pub disable_last_time: bool,
    /// Readout keys use the offset from the first item instead of the last.
    pub use_first_time: bool,
    /// No interest nodes; the readout attends with one learned query.
    pub single_interest: bool,
    /// Train without the interest-independence term.
    pub disable_corr_loss: bool,
}

impl Ablation {
    /// The variants compared in an ablation run, by their table labels.
    pub const VARIANTS: [&'static str; 7] = ["full", "-V2V", "-U2V", "-Last", "First", "-Interest", "-Loss"];

    pub fn from_label(label: &str) -> Option<Ablation> {
        let mut a = Ablation::default();
        match label {
            "full" => {}
            "-V2V" => a.disable_vv_time = true,
            "-U2V" => a.disable_uv_time = true,
            "-Last" => a.disable_last_time = true,
            "First" => a.use_first_time = true,
            "-Interest" => a.single_interest = true,
            "-Loss" => a.disable_corr_loss = true,
            _ => return None,
        }
        Some(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub item_count: usize,
    pub dim: usize,
    pub interests: usize,
    pub layers: usize,
    pub max_step: usize,
    pub bucket_width: u64,
    pub bidirectional: bool,
    pub leaky_slope: f64,
    pub init_std: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(item_count: usize) -> Self {
        ModelConfig {
            item_count,
            dim: 128,
            interests: 2,
            layers: 3,
            max_step: 300,
            bucket_width: 8,
            bidirectional: true,
            leaky_slope: 0.01,
            init_std: 0.1,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.item_count == 0 {
            return Err(ConfigError::new("vocabulary is empty"));
        }
        if self.dim == 0 || self.layers == 0 || self.interests == 0 {
            return Err(ConfigError::new("dim, layers and interests must all be at least 1"));
        }
        if self.bucket_width == 0 {
            return Err(ConfigError::new("bucket width must be positive"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(ConfigError::new("init std must be finite and non-negative"));
        }
        let a = &self.ablation;
        if a.disable_last_time && a.use_first_time {
            return Err(ConfigError::new(
                "disable_last_time and use_first_time both replace the readout time signal",
            ));
        }
        if a.single_interest && self.interests != 1 {
            return Err(ConfigError::new("single_interest requires interests = 1"));
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            interests: self.interests,
            bucket_width: self.bucket_width,
            max_step: self.max_step,
            bidirectional: self.bidirectional,
        }
    }
}

/// Result of one forward pass on a tape.
pub struct ForwardOutput {
    pub graph: MultiInterestGraph,
    /// `[|V|]` item scores.
    pub scores: Var,
    /// `[H×d]` final interest embeddings, absent when interests are disabled.
    pub interests: Option<Var>,
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn graph(&self, session: &SessionRecord) -> Result<MultiInterestGraph, ModelError> {
        if let Some(&bad) = session.items.iter().find(|&&i| i >= self.config.item_count) {
            return Err(ModelError::UnknownItem {
                index: bad,
                vocab: self.config.item_count,
            });
        }
        Ok(build_graph(session, &self.config.graph_config())?)
    }

    /// Full forward pass for one session using already-registered parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        session: &SessionRecord,
    ) -> Result<ForwardOutput, ModelError> {
        let graph = self.graph(session)?;
        let stack = combine_and_stack(tape, &graph, vars, &self.config)?;
        let interests = stack.interests.as_ref().map(|s| s.embedding);
        let readout = session_readout(tape, &graph, stack.items, interests, vars, &self.config)?;
        let scores = predict(tape, readout.sessions, vars)?;
        Ok(ForwardOutput {
            graph,
            scores,
            interests,
            trace: stack.trace,
        })
    }

    /// Item scores for a session, without gradient tracking.
    pub fn scores(&self, session: &SessionRecord) -> Result<Tensor, ModelError> {
        Ok(self.infer(session)?.0)
    }

    /// Item scores plus the per-layer attention trace.
    pub fn infer(&self, session: &SessionRecord) -> Result<(Tensor, Vec<LayerTrace>, MultiInterestGraph), ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let out = self.forward(&mut tape, &vars, session)?;
        Ok((tape.value(out.scores).clone(), out.trace, out.graph))
    }

    /// Loss on one example and its gradient w.r.t. every parameter.
    pub fn loss_and_grads(
        &self,
        session: &SessionRecord,
        target: usize,
        lambda: f64,
    ) -> Result<(f64, ModelParams), ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let loss = self.loss_on_tape(&mut tape, &vars, session, target, lambda)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        tape.backward(loss)?;
        Ok((value, vars.gradients(&mut tape)))
    }

    /// Loss value only.
    pub fn loss(&self, session: &SessionRecord, target: usize, lambda: f64) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let loss = self.loss_on_tape(&mut tape, &vars, session, target, lambda)?;
        Ok(tape.value(loss).item())
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        session: &SessionRecord,
        target: usize,
        lambda: f64,
    ) -> Result<Var, ModelError> {
        if target >= self.config.item_count {
            return Err(ModelError::UnknownItem {
                index: target,
                vocab: self.config.item_count,
            });
        }
        let out = self.forward(tape, vars, session)?;
        let lambda = if self.config.ablation.disable_corr_loss {
            0.0
        } else {
            lambda
        };
        let corr = match out.interests {
            Some(u) if lambda != 0.0 => Some(corr_loss(tape, u)),
            _ => None,
        };
        total_loss(tape, out.scores, target, corr, lambda)
    }
}
