use std::rc::Rc;

use crate::autodiff::rng::Rng;
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative-error denominator floor. Keeps finite-difference noise on truly
/// zero gradients from registering as error, while a wrong analytic gradient
/// of any real magnitude still stands out.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Loss builder a gradient check drives: receives a fresh tape plus leaf ids
/// for the checked tensors (in order) and returns the scalar loss node.
pub type LossBuilder<'a, F> = dyn FnMut(&Tape<F>, &[NodeId]) -> Result<NodeId> + 'a;

/// Central-difference gradient check for an arbitrary scalar-valued function
/// of a list of tensors.
///
/// `f` receives a fresh tape plus leaf ids for `tensors` (in order) and must
/// build a scalar loss node deterministically — in particular no
/// training-mode dropout. The analytic gradient comes from one backward pass;
/// each tensor then has up to `coords_per_tensor` coordinates (all, if the
/// tensor is small) perturbed by `±h` and compared against the centered
/// difference. Relative error is `|a - fd| / max(|a|, |fd|, REL_ERR_FLOOR)`.
///
/// Meant to be run with `F = f64`; in f32 the finite differences themselves
/// drown in rounding error.
pub fn grad_check_flat<F: Scalar>(
    tensors: &mut [Rc<Tensor<F>>],
    f: &mut LossBuilder<'_, F>,
    h: f64,
    rng: &mut Rng,
    coords_per_tensor: usize,
) -> Result<GradCheckReport> {
    // Analytic gradients.
    let analytic: Vec<Tensor<F>> = {
        let tape: Tape<F> = Tape::new();
        let ids = stage(&tape, tensors)?;
        let loss = f(&tape, &ids)?;
        let mut grads = tape.backward(loss)?;
        ids.iter()
            .zip(tensors.iter())
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0usize;
    for ti in 0..tensors.len() {
        let len = tensors[ti].len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            sample_distinct(len, coords_per_tensor, rng)
        };
        for c in coords {
            let orig = tensors[ti].data()[c];
            set_coord(&mut tensors[ti], c, F::from_f64(orig.as_f64() + h));
            let loss_plus = eval_loss(tensors, f)?;
            set_coord(&mut tensors[ti], c, F::from_f64(orig.as_f64() - h));
            let loss_minus = eval_loss(tensors, f)?;
            set_coord(&mut tensors[ti], c, orig);

            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic[ti].data()[c].as_f64();
            let denom = a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
            let rel = (a - fd).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, coords_checked })
}

fn stage<F: Scalar>(tape: &Tape<F>, tensors: &[Rc<Tensor<F>>]) -> Result<Vec<NodeId>> {
    tensors.iter().map(|t| tape.leaf_rc(Rc::clone(t))).collect()
}

fn eval_loss<F: Scalar>(
    tensors: &[Rc<Tensor<F>>],
    f: &mut LossBuilder<'_, F>,
) -> Result<f64> {
    let tape: Tape<F> = Tape::new();
    let ids = stage(&tape, tensors)?;
    let loss = f(&tape, &ids)?;
    Ok(tape.value(loss).first().as_f64())
}

fn set_coord<F: Scalar>(t: &mut Rc<Tensor<F>>, c: usize, v: F) {
    Rc::make_mut(t).data_mut()[c] = v;
}

fn sample_distinct(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    // Partial Fisher-Yates over the index range.
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}
