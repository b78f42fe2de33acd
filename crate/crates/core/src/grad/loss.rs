use super::{GradError, Primitive, Real, Tape, Tensor, Var};

/// A scalar loss node plus whether its contributing set was empty.
///
/// Empty losses are recorded as a constant zero so they add nothing to the
/// backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub empty: bool,
}

fn empty<F: Real>(tape: &mut Tape<F>) -> Result<LossValue, GradError> {
    Ok(LossValue { var: tape.constant(Tensor::scalar(F::zero()))?, empty: true })
}

/// Mean binary cross-entropy on logits over elements selected by `mask`.
pub fn bce_with_logits<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    target: Var,
    mask: Vec<bool>,
) -> Result<LossValue, GradError> {
    if !mask.iter().any(|&m| m) {
        return empty(tape);
    }
    let var = tape.apply(Primitive::BceWithLogits { mask }, &[logits, target])?;
    Ok(LossValue { var, empty: false })
}

/// Mean softmax cross-entropy over the rows of `logits[R, C]`.
pub fn softmax_ce<F: Real>(tape: &mut Tape<F>, logits: Var, labels: Vec<usize>) -> Result<LossValue, GradError> {
    if labels.is_empty() {
        return empty(tape);
    }
    let var = tape.apply(Primitive::SoftmaxCe { labels }, &[logits])?;
    Ok(LossValue { var, empty: false })
}

/// Mean smooth-L1 over elements selected by `mask`.
pub fn smooth_l1<F: Real>(
    tape: &mut Tape<F>,
    prediction: Var,
    target: Var,
    mask: Vec<bool>,
) -> Result<LossValue, GradError> {
    if !mask.iter().any(|&m| m) {
        return empty(tape);
    }
    let var = tape.apply(Primitive::SmoothL1 { mask }, &[prediction, target])?;
    Ok(LossValue { var, empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::new(shape, data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn bce_at_zero_logit() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        let t = c(&mut tape, &[1], &[1.0]);
        let l = bce_with_logits(&mut tape, x, t, vec![true]).unwrap();
        assert!((tape.value(l.var).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let g = tape.backward(l.var).unwrap();
        assert!((g.get(x).unwrap().item() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_softmax_is_ln_classes() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[1, 4], &[0.3; 4]);
        for label in 0..4 {
            let l = softmax_ce(&mut tape, x, vec![label]).unwrap();
            assert!((tape.value(l.var).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[1], &[0.5]);
        let t = c(&mut tape, &[1], &[0.0]);
        let l = smooth_l1(&mut tape, x, t, vec![true]).unwrap();
        assert_eq!(tape.value(l.var).item(), 0.125);
        let x2 = c(&mut tape, &[2], &[3.0, -7.0]);
        let t2 = c(&mut tape, &[2], &[0.0, 0.0]);
        let l2 = smooth_l1(&mut tape, x2, t2, vec![true, false]).unwrap();
        assert_eq!(tape.value(l2.var).item(), 2.5);
    }

    #[test]
    fn empty_sets_are_flagged_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let t = c(&mut tape, &[2], &[0.0, 1.0]);
        let l = bce_with_logits(&mut tape, x, t, vec![false, false]).unwrap();
        assert!(l.empty);
        assert_eq!(tape.value(l.var).item(), 0.0);
        let l = softmax_ce(&mut tape, x, vec![]).unwrap();
        assert!(l.empty);
        let g = tape.backward(l.var).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn masked_elements_do_not_contribute() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[2], &[0.0, 50.0]);
        let t = c(&mut tape, &[2], &[1.0, 0.0]);
        let l = bce_with_logits(&mut tape, x, t, vec![true, false]).unwrap();
        assert!((tape.value(l.var).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
