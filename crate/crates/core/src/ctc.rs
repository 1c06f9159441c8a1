//! CTC branch: loss via the log-space forward recursion recorded on the tape,
//! frame-level argmax labels and the standard collapse rule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Minimum frame count for which `target` has at least one alignment.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-ln P(target | log_probs)` summed over every alignment.
///
/// `log_probs` is `[T × C]` of per-frame log-probabilities whose last class
/// `blank` is the CTC blank.
pub fn ctc_loss<R: Real>(tape: &mut Tape<'_, R>, log_probs: Var, target: &[u32], blank: u32) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape(format!("ctc log-probs must be [T × C], got {shape:?}")));
    }
    let (frames, classes) = (shape[0], shape[1]);
    if blank as usize >= classes {
        return Err(Error::InvalidArgument(format!("blank id {blank} is outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= blank) {
        return Err(Error::InvalidInput(format!("ctc target contains id {bad}, which is blank or out of range")));
    }
    let needed = min_frames(target);
    if frames < needed.max(1) {
        return Err(Error::InfeasibleAlignment { target_len: target.len(), needed: needed.max(1), frames });
    }

    // Extended label sequence with blanks interleaved: ∅ y1 ∅ y2 … yn ∅.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s = ext.len();
    let skip: Vec<R> = (0..s)
        .map(|i| {
            if i >= 2 && ext[i] != blank && ext[i] != ext[i - 2] {
                R::zero()
            } else {
                R::neg_infinity()
            }
        })
        .collect();
    let skip = tape.constant(Tensor::from_parts(vec![s], skip));
    let emit = |tape: &mut Tape<'_, R>, t: usize| {
        let idx: Vec<usize> = ext.iter().map(|&z| t * classes + z as usize).collect();
        tape.pick(log_probs, &idx)
    };

    let mut init = vec![R::neg_infinity(); s];
    init[0] = R::zero();
    if s > 1 {
        init[1] = R::zero();
    }
    let init = tape.constant(Tensor::from_parts(vec![s], init));
    let e0 = emit(tape, 0);
    let mut alpha = tape.add(init, e0);
    for t in 1..frames {
        let stay = alpha;
        let step = tape.shift_neg_inf(alpha, 1);
        let jump = tape.shift_neg_inf(alpha, 2);
        let jump = tape.add(jump, skip);
        let a = tape.log_add_exp(stay, step);
        let a = tape.log_add_exp(a, jump);
        let e = emit(tape, t);
        alpha = tape.add(a, e);
    }
    let last = if s > 1 { vec![s - 1, s - 2] } else { vec![0, 0] };
    let ends = tape.pick(alpha, &last);
    let (a, b) = (tape.pick(ends, &[0]), tape.pick(ends, &[1]));
    let total = if s > 1 { tape.log_add_exp(a, b) } else { a };
    let total = tape.sum(total);
    Ok(tape.scale(total, -R::one()))
}

/// Row-wise argmax with ties broken toward the smallest id.
pub fn frame_labels<R: Real>(log_probs: &Tensor<R>) -> Vec<u32> {
    (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse(labels: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}
