use super::{GradError, Tape, Tensor, Var};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

fn evaluate<Fun>(f: &Fun, point: &Tensor<f64>) -> Result<f64, GradError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone())?;
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(GradError::NotScalar(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(GradError::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}

/// Central-difference gradient of the scalar function built by `f`.
pub fn central_difference<Fun>(f: &Fun, point: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>, GradError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, GradError>,
{
    if !(eps > 0.0) {
        return Err(GradError::Invalid { op: "finite_diff_check", detail: format!("eps must be > 0, got {eps}") });
    }
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(point.shape(), out)
}

/// `max_i |a_i − n_i| / max(1, |n_i|)` and its argmax.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Checks the reverse-mode gradient of `f` at `point` against central
/// differences with step `eps`.
pub fn finite_diff_check<Fun>(f: Fun, point: &Tensor<f64>, eps: f64) -> Result<FdReport, GradError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, point);
    let numeric = central_difference(&f, point, eps)?;
    let (max_rel_error, worst_index) = relative_error(analytic.data(), numeric.data());
    Ok(FdReport { max_rel_error, worst_index, analytic, numeric })
}
