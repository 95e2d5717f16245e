//! Optimizers and the per-step renormalization hook.
//!
//! An [`Optimizer`] walks a model's parameters in their stable visitation
//! order and applies one of the standard elementwise update rules to every
//! trainable scalar — factor entries, `lambda`, `sigma`, lengths, and biases
//! alike. [`post_step_renormalize`] projects every CP factor column back to
//! unit norm after the update; because the forward map is invariant to
//! column magnitudes, the projection changes no activation.

use crate::nn::Model;
use crate::{Error, Result};

const RMSPROP_DECAY: f64 = 0.99;
const RMSPROP_EPS: f64 = 1e-8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Update rule selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    RmsProp,
    Adam,
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimKind::Sgd => "sgd",
            OptimKind::RmsProp => "rmsprop",
            OptimKind::Adam => "adam",
        })
    }
}

enum SlotState {
    Sgd,
    RmsProp { sq: Vec<f64> },
    Adam { m1: Vec<f64>, m2: Vec<f64> },
}

struct Slot {
    name: String,
    state: SlotState,
}

/// Optimizer state: one accumulator slot per parameter slice, created on the
/// first step and matched by position afterwards.
///
/// Accumulators are deliberately untouched by the renormalization hook: the
/// forward map is scale-invariant in the factor columns, so stale magnitudes
/// only modulate effective step sizes and the update rules stay textbook.
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            step_count: 0,
            slots: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable scalar from its accumulated
    /// gradient. A non-finite gradient aborts before any parameter of the
    /// step is touched, identifying the offending parameter.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        model.visit_params(&mut |name, _v, g| {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    layer: name.to_string(),
                    context: "gradient",
                });
            }
            Ok(())
        })?;

        self.step_count += 1;
        let t = self.step_count;
        let kind = self.kind;
        let lr = self.lr;
        let slots = &mut self.slots;
        let mut idx = 0usize;
        model.visit_params(&mut |name, v, g| {
            if idx == slots.len() {
                slots.push(Slot {
                    name: name.to_string(),
                    state: match kind {
                        OptimKind::Sgd => SlotState::Sgd,
                        OptimKind::RmsProp => SlotState::RmsProp {
                            sq: vec![0.0; v.len()],
                        },
                        OptimKind::Adam => SlotState::Adam {
                            m1: vec![0.0; v.len()],
                            m2: vec![0.0; v.len()],
                        },
                    },
                });
            }
            let slot = &mut slots[idx];
            if slot.name != name {
                return Err(Error::InvalidArgument(format!(
                    "optimizer state built for parameter {} but visited {}; \
                     rebuild the optimizer after changing the model structure",
                    slot.name, name
                )));
            }
            match &mut slot.state {
                SlotState::Sgd => {
                    for (x, &gx) in v.iter_mut().zip(g.iter()) {
                        *x -= lr * gx;
                    }
                }
                SlotState::RmsProp { sq } => {
                    if sq.len() != v.len() {
                        return Err(state_size_error(name, sq.len(), v.len()));
                    }
                    for ((x, &gx), s) in v.iter_mut().zip(g.iter()).zip(sq.iter_mut()) {
                        *s = RMSPROP_DECAY * *s + (1.0 - RMSPROP_DECAY) * gx * gx;
                        *x -= lr * gx / (s.sqrt() + RMSPROP_EPS);
                    }
                }
                SlotState::Adam { m1, m2 } => {
                    if m1.len() != v.len() {
                        return Err(state_size_error(name, m1.len(), v.len()));
                    }
                    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    for ((x, &gx), (a, b)) in v
                        .iter_mut()
                        .zip(g.iter())
                        .zip(m1.iter_mut().zip(m2.iter_mut()))
                    {
                        *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * gx;
                        *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * gx * gx;
                        let mh = *a / c1;
                        let vh = *b / c2;
                        *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            idx += 1;
            Ok(())
        })
    }
}

fn state_size_error(name: &str, state: usize, param: usize) -> Error {
    Error::InvalidArgument(format!(
        "optimizer state for {name} has {state} entries but the parameter has \
         {param}; rebuild the optimizer after changing the model structure"
    ))
}

/// Projects every CP factor column back to unit norm, leaving `lambda` and
/// `sigma` untouched. Run strictly after [`Optimizer::step`]; a collapsed
/// column signals divergence and is reported with its layer, mode, and term.
pub fn post_step_renormalize(model: &mut Model) -> Result<()> {
    model.renormalize_cp()
}
