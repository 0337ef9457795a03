//! Reverse-mode gradients over small dense networks, plus Adam.

mod adam;
mod mlp;
mod params;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState, Direction};
pub use mlp::{mlp_eval, mlp_init, time_embedding, Activation, MlpScratch, MlpSpec, TapeMlp};
pub use params::{ParamVector, Segment};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;

/// Evaluates `loss` on a fresh tape with one trainable leaf per parameter
/// segment and returns `(loss value, d loss / d params)`.
pub fn gradient<F>(params: &ParamVector, loss: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = (0..params.layout().len())
        .map(|i| tape.param(params.segment(i).to_vec()))
        .collect();
    let out = loss(&mut tape, &leaves);
    tape.check_finite()?;
    let grads = tape.backward(out);
    let mut g = params.zeros_like();
    for (i, v) in leaves.iter().enumerate() {
        grads.accumulate_into(*v, g.segment_mut(i));
    }
    Ok((tape.scalar(out), g))
}
