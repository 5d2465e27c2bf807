//! Per-layer Hard Gumbel gates for both encoders.
//!
//! Each gate is a bias-free `2 × d` projection of a conditioning feature.
//! Logit index [`OPEN`] means "apply the prompt" (gate value 1). Training
//! samples `argmax(softmax((z + g) / τ))` with Gumbel noise `g` and passes
//! gradients through the relaxed probability; evaluation takes `argmax(z)`
//! with no noise.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Side};
use crate::error::{Error, Result};
use crate::numerics::{lit, mean_vector, softmax, Embedding, Mat, Rng, Scalar};
use crate::tape::{NodeId, Tape};
use crate::TaskId;

/// Logit index of the open state.
pub const OPEN: usize = 0;

/// Gumbel temperature used by default.
pub const DEFAULT_TEMPERATURE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    Train,
    Eval,
}

/// Gradient path used for a sampled gate on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Forward uses the hard sample; backward uses the relaxed probability.
    StraightThrough,
    /// Forward and backward both use the relaxed probability.
    Soft,
}

/// One layer's gate outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision<T> {
    /// 0 or 1.
    pub hard: T,
    /// Relaxed open probability.
    pub soft: T,
    pub logits: [T; 2],
    pub mode: GateMode,
}

impl<T: Scalar> GateDecision<T> {
    pub fn is_open(&self) -> bool {
        self.hard == T::one()
    }
}

fn logits<T: Scalar>(w: &Mat<T>, cond: &[T]) -> Result<[T; 2]> {
    if w.rows() != 2 || w.cols() != cond.len() {
        return Err(Error::shape(
            "gate projection",
            format!("(2, {})", cond.len()),
            format!("{:?}", w.shape()),
        ));
    }
    Ok([
        crate::numerics::dot(w.row(0), cond),
        crate::numerics::dot(w.row(1), cond),
    ])
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(Error::Parameter(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Draws a pair of standard Gumbel variates.
pub fn gumbel_pair<T: Scalar>(rng: &mut Rng) -> [T; 2] {
    [lit(rng.gumbel()), lit(rng.gumbel())]
}

/// Gate decision for projection `w` and conditioning feature `cond`.
pub fn gate_forward<T: Scalar>(
    w: &Mat<T>,
    cond: &[T],
    tau: T,
    mode: GateMode,
    rng: &mut Rng,
) -> Result<GateDecision<T>> {
    check_tau(tau)?;
    let z = logits(w, cond)?;
    match mode {
        GateMode::Eval => {
            let p = softmax(&z, tau)?;
            let hard = if z[OPEN] >= z[1 - OPEN] {
                T::one()
            } else {
                T::zero()
            };
            Ok(GateDecision {
                hard,
                soft: p[OPEN],
                logits: z,
                mode,
            })
        }
        GateMode::Train => {
            let noise = gumbel_pair::<T>(rng);
            sample_with_noise(z, noise, tau, mode)
        }
    }
}

fn sample_with_noise<T: Scalar>(
    z: [T; 2],
    noise: [T; 2],
    tau: T,
    mode: GateMode,
) -> Result<GateDecision<T>> {
    let perturbed = [z[0] + noise[0], z[1] + noise[1]];
    let y = softmax(&perturbed, tau)?;
    let hard = if y[OPEN] >= y[1 - OPEN] {
        T::one()
    } else {
        T::zero()
    };
    Ok(GateDecision {
        hard,
        soft: y[OPEN],
        logits: z,
        mode,
    })
}

/// Records a sampled gate on the tape and returns its 1×1 node.
///
/// `noise` is supplied by the caller so gradient checks can freeze it.
pub fn gate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: NodeId,
    cond: NodeId,
    tau: T,
    noise: [T; 2],
    relax: Relaxation,
) -> Result<(NodeId, GateDecision<T>)> {
    check_tau(tau)?;
    let z = tape.matmul_nt(cond, w);
    let zv = tape.value(z);
    if zv.shape() != (1, 2) {
        return Err(Error::shape(
            "gate logits",
            "(1, 2)",
            format!("{:?}", zv.shape()),
        ));
    }
    let zl = [zv.get(0, 0), zv.get(0, 1)];
    let decision = sample_with_noise(zl, noise, tau, GateMode::Train)?;
    let nz = tape.constant(Mat::row_vector(noise.to_vec()));
    let zp = tape.add(z, nz);
    let y = tape.softmax_rows(zp, T::one() / tau);
    let soft = tape.col_slice(y, OPEN, 1);
    let out = match relax {
        Relaxation::Soft => soft,
        Relaxation::StraightThrough => tape.straight_through(soft, Mat::scalar(decision.hard)),
    };
    Ok((out, decision))
}

/// Mean image feature over a batch.
pub fn batch_condition<T: Scalar, V: AsRef<[T]>>(features: &[V]) -> Result<Embedding<T>> {
    if features.is_empty() {
        return Err(Error::Empty("batch conditioning over an empty batch"));
    }
    Ok(Embedding(mean_vector(features)?))
}

/// Text-side gate weights: `tasks × layers × 2 × d`.
pub fn count_text_gate_params(tasks: usize, text_layers: usize, embed_dim: usize) -> usize {
    tasks * text_layers * 2 * embed_dim
}

/// Analytic open probability of a Gumbel-argmax gate with logit gap
/// `Δ = z_open − z_closed`: the logistic function of `Δ`.
pub fn analytic_open_rate(gap: f64) -> f64 {
    crate::numerics::sigmoid(gap)
}

/// Gate projections of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBank<T> {
    pub task: TaskId,
    pub image: Vec<Mat<T>>,
    pub text: Vec<Mat<T>>,
    pub temperature: T,
}

impl<T: Scalar> GateBank<T> {
    pub fn zeros(task: TaskId, cfg: &EncoderConfig, temperature: T) -> Self {
        GateBank {
            task,
            image: vec![Mat::zeros(2, cfg.embed_dim); cfg.image_layers],
            text: vec![Mat::zeros(2, cfg.embed_dim); cfg.text_layers],
            temperature,
        }
    }

    pub fn side(&self, side: Side) -> &[Mat<T>] {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    /// Deterministic per-layer gate values (0 or 1).
    pub fn eval_gates(&self, side: Side, cond: &[T]) -> Result<Vec<T>> {
        let mut rng = Rng::seed(0);
        self.side(side)
            .iter()
            .map(|w| {
                gate_forward(w, cond, self.temperature, GateMode::Eval, &mut rng).map(|d| d.hard)
            })
            .collect()
    }

    pub fn parameter_count(&self, side: Side) -> usize {
        self.side(side).iter().map(|m| m.data().len()).sum()
    }
}
