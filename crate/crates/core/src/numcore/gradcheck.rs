//! Central-difference gradient checking.

use crate::error::Result;
use crate::numcore::tape::{Gradients, OpKind, Tape, Var};
use crate::numcore::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor: `|a - n| / max(|a|, |n|, FLOOR)`. Keeps gradients that
/// are zero analytically from dividing round-off by round-off.
pub const FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: usize,
    pub len: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Ops present on the checked tape.
    pub ops: Vec<OpKind>,
    /// When the check fails: the node whose backward rule produced the
    /// first wrong gradient, e.g. `"tanh #7"`.
    pub offending: Option<String>,
}

/// Checks the tape gradient of the scalar built by `build` against central
/// differences in every entry of `params`.
///
/// `build` receives a fresh tape plus one trainable leaf per parameter tensor
/// and must return the loss node. It is called `2 * P + 1` times.
pub fn gradcheck<F>(build: F, params: &[Tensor]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(build, params, |_| {})
}

/// Like [`gradcheck`], with a hook to configure the tape before building
/// (used to inject faults).
pub fn gradcheck_with<F, P>(build: F, params: &[Tensor], prepare: P) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: Fn(&mut Tape),
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.item(loss))
    };

    let mut tape = Tape::new();
    prepare(&mut tape);
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf).clone();
        let mut worst = 0.0f64;
        for e in 0..params[k].len() {
            let orig = params[k].data()[e];
            work[k].data_mut()[e] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
        checks.push(LeafCheck {
            leaf: leaf.id(),
            len: params[k].len(),
            max_rel_error: worst,
        });
    }

    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = max_rel_error < TOLERANCE;
    let mut ops: Vec<OpKind> = (0..tape.len())
        .map(|i| tape.op_kind(var_at(&tape, i)))
        .collect();
    ops.sort_by_key(|k| *k as u8);
    ops.dedup();
    let offending = if passed {
        None
    } else {
        locate_fault(&tape, &grads, loss)
    };
    Ok(GradcheckReport {
        leaves: checks,
        max_rel_error,
        passed,
        ops,
        offending,
    })
}

fn var_at(tape: &Tape, id: usize) -> Var {
    tape.var(id)
}

/// Finite-difference adjoint of every intermediate node, compared against the
/// tape's. The latest node with a wrong adjoint feeds the broken rule; the
/// consumer of that node whose own adjoint is right is reported.
fn locate_fault(tape: &Tape, grads: &Gradients, loss: Var) -> Option<String> {
    let node_ok = |v: Var| -> Option<bool> {
        let analytic = grads.get(v)?;
        let base = tape.value(v);
        if base.len() > 4096 {
            return None;
        }
        let mut worst = 0.0f64;
        for e in 0..base.len() {
            let mut up = base.clone();
            up.data_mut()[e] += STEP;
            let mut down = base.clone();
            down.data_mut()[e] -= STEP;
            let fu = tape.replay_with(v, up, loss).ok()?.item();
            let fd = tape.replay_with(v, down, loss).ok()?.item();
            worst = worst.max(relative_error(analytic.data()[e], (fu - fd) / (2.0 * STEP)));
        }
        Some(worst < TOLERANCE)
    };

    let mut verdict: Vec<Option<bool>> = vec![None; tape.len()];
    for id in (0..loss.id()).rev() {
        verdict[id] = node_ok(var_at(tape, id));
    }
    verdict[loss.id()] = Some(true);
    let bad = (0..loss.id()).rev().find(|&id| verdict[id] == Some(false))?;
    (bad + 1..=loss.id())
        .find(|&c| {
            verdict[c] == Some(true) && tape.inputs_of(var_at(tape, c)).iter().any(|v| v.id() == bad)
        })
        .map(|c| format!("{} #{c}", tape.op_kind(var_at(tape, c))))
}
