//! Finite-difference sweep over every differentiable primitive.
//!
//! Each case draws random inputs, reduces the primitive's output to a scalar
//! with a fixed random weighting (losses are already scalar) and compares the
//! reverse-mode gradient of every input against central differences in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{bce_with_logits, finite_diff_check, smooth_l1, softmax_ce, CropWindow, GradError, Tape, Tensor, Var};

/// Step used by the sweep.
pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub points: usize,
    /// Worst relative error over all points and inputs.
    pub max_rel_error: f64,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
    /// Rejects points too close to a kink.
    valid: fn(&[Tensor<f64>]) -> bool,
}

fn any_point(_: &[Tensor<f64>]) -> bool {
    true
}

fn away_from_zero(xs: &[Tensor<f64>]) -> bool {
    xs[0].data().iter().all(|v| v.abs() > 0.05)
}

fn away_from_unit_gap(xs: &[Tensor<f64>]) -> bool {
    xs[0].data().iter().zip(xs[1].data()).all(|(p, t)| ((p - t).abs() - 1.0).abs() > 0.05)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    valid: fn(&[Tensor<f64>]) -> bool,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError> + 'static,
) -> Case {
    Case { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build: Box::new(build), valid }
}

fn random_windows(rng: &mut ChaCha8Rng, count: usize, batch: usize, extent: f64) -> Vec<CropWindow> {
    (0..count)
        .map(|i| {
            let a: f64 = rng.random_range(0.0..extent * 0.6);
            let b: f64 = rng.random_range(0.0..extent * 0.6);
            let w: f64 = rng.random_range(2.0..extent - a);
            let h: f64 = rng.random_range(2.0..extent - b);
            CropWindow { batch: i % batch, x0: a, y0: b, x1: a + w, y1: b + h }
        })
        .collect()
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let windows = random_windows(rng, 3, 2, 12.0);
    let bce_mask: Vec<bool> = (0..6).map(|i| i != 2).collect();
    let l1_mask: Vec<bool> = (0..6).map(|i| i != 4).collect();
    vec![
        case("add", &[&[2, 3], &[2, 3]], any_point, |t, v| t.add(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], any_point, |t, v| t.mul(v[0], v[1])),
        case("matmul", &[&[2, 3], &[3, 4]], any_point, |t, v| t.matmul(v[0], v[1])),
        case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], any_point, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        case("relu", &[&[2, 4]], away_from_zero, |t, v| t.relu(v[0])),
        case("leaky_relu", &[&[2, 4]], away_from_zero, |t, v| t.leaky_relu(v[0], 0.1)),
        case("sigmoid", &[&[2, 4]], any_point, |t, v| t.sigmoid(v[0])),
        case("concat", &[&[2, 2], &[2, 3]], any_point, |t, v| t.concat(&[v[0], v[1]], 1)),
        case("tile", &[&[1, 4]], any_point, |t, v| t.tile(v[0], 0, 3)),
        case("bilinear_crop", &[&[2, 2, 6, 6]], any_point, move |t, v| t.bilinear_crop(v[0], windows.clone(), 3, 0.5)),
        case("flatten", &[&[2, 2, 3]], any_point, |t, v| t.flatten(v[0])),
        case("linear", &[&[3, 4], &[2, 4], &[2]], any_point, |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("reshape", &[&[6]], any_point, |t, v| t.reshape(v[0], &[2, 3])),
        case("slice", &[&[2, 4]], any_point, |t, v| t.slice(v[0], 1, 1, 2)),
        case("sum", &[&[2, 3]], any_point, |t, v| t.sum(v[0])),
        case("bce_with_logits", &[&[6], &[6]], any_point, move |t, v| {
            Ok(bce_with_logits(t, v[0], v[1], bce_mask.clone())?.var)
        }),
        case("softmax_ce", &[&[3, 4]], any_point, |t, v| Ok(softmax_ce(t, v[0], vec![0, 3, 1])?.var)),
        case("smooth_l1", &[&[6], &[6]], away_from_unit_gap, move |t, v| Ok(smooth_l1(t, v[0], v[1], l1_mask.clone())?.var)),
    ]
}

fn check_case(c: &Case, points: usize, rng: &mut ChaCha8Rng) -> Result<PrimitiveCheck, GradError> {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let values = loop {
            let v: Vec<Tensor<f64>> = c.shapes.iter().map(|s| randn(rng, s)).collect();
            if (c.valid)(&v) {
                break v;
            }
        };
        let out_shape = {
            let mut tape = Tape::new();
            let vars = values.iter().map(|v| tape.constant(v.clone())).collect::<Result<Vec<_>, _>>()?;
            let out = (c.build)(&mut tape, &vars)?;
            tape.value(out).shape().to_vec()
        };
        let weight = randn(rng, &out_shape);
        for i in 0..values.len() {
            let f = |tape: &mut Tape<f64>, x: Var| -> Result<Var, GradError> {
                let vars = values
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { Ok(x) } else { tape.constant(v.clone()) })
                    .collect::<Result<Vec<_>, _>>()?;
                let out = (c.build)(tape, &vars)?;
                let w = tape.constant(weight.clone())?;
                let weighted = tape.mul(out, w)?;
                tape.sum(weighted)
            };
            worst = worst.max(finite_diff_check(f, &values[i], FD_EPS)?.max_rel_error);
        }
    }
    Ok(PrimitiveCheck { name: c.name, points, max_rel_error: worst })
}

/// Runs every case at `points` random points drawn from `seed`.
pub fn check_all_primitives(points: usize, seed: u64) -> Result<Vec<PrimitiveCheck>, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = cases(&mut rng);
    all.iter().map(|c| check_case(c, points, &mut rng)).collect()
}

/// Names of the primitives the sweep covers. `stop_gradient` is absent: its
/// gradient is zero by definition and is checked for exact zeros instead.
pub fn covered_primitives() -> Vec<&'static str> {
    cases(&mut ChaCha8Rng::seed_from_u64(0)).iter().map(|c| c.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Primitive;

    #[test]
    fn every_primitive_is_covered() {
        let covered = covered_primitives();
        let all = [
            Primitive::Add,
            Primitive::Mul,
            Primitive::Matmul,
            Primitive::Conv2d { stride: 1, pad: 0 },
            Primitive::Relu,
            Primitive::LeakyRelu { alpha: 0.1 },
            Primitive::Sigmoid,
            Primitive::Concat { axis: 0 },
            Primitive::Tile { axis: 0, count: 1 },
            Primitive::BilinearCrop { windows: vec![], out_size: 1, scale: 1.0 },
            Primitive::Flatten,
            Primitive::Linear,
            Primitive::Reshape { shape: vec![] },
            Primitive::Slice { axis: 0, start: 0, len: 1 },
            Primitive::Sum,
            Primitive::StopGradient,
            Primitive::BceWithLogits { mask: vec![] },
            Primitive::SoftmaxCe { labels: vec![] },
            Primitive::SmoothL1 { mask: vec![] },
        ];
        for p in all {
            assert!(covered.contains(&p.name()) || p == Primitive::StopGradient, "{} not covered", p.name());
        }
    }

    #[test]
    fn sweep_passes_at_a_few_points() {
        for c in check_all_primitives(3, 11).unwrap() {
            assert!(c.max_rel_error <= 1e-4, "{}: {:e}", c.name, c.max_rel_error);
        }
    }
}
