use super::ops::{self, CropWindow, Primitive};
use super::{GradError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F> {
    value: Tensor<F>,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Linear record of primitive applications for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. A tape supports exactly one [`Tape::backward`].
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, prim: None, inputs: Vec::new(), needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Result<Var, GradError> {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var, GradError> {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Applies `prim` to `inputs`, recording the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, GradError> {
        if self.consumed {
            return Err(GradError::Consumed);
        }
        let op = prim.name();
        let value = {
            let vals: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&prim, &vals)?
        };
        if !value.all_finite() {
            return Err(GradError::NonFinite { op });
        }
        let needs_grad = prim != Primitive::StopGradient && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, prim: Some(prim), inputs: inputs.to_vec(), needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, GradError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Primitive::Conv2d { stride, pad }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var, GradError> {
        self.apply(Primitive::LeakyRelu { alpha }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GradError> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn tile(&mut self, x: Var, axis: usize, count: usize) -> Result<Var, GradError> {
        self.apply(Primitive::Tile { axis, count }, &[x])
    }

    pub fn bilinear_crop(
        &mut self,
        x: Var,
        windows: Vec<CropWindow>,
        out_size: usize,
        scale: f64,
    ) -> Result<Var, GradError> {
        self.apply(Primitive::BilinearCrop { windows, out_size, scale }, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Flatten, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GradError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Primitive::Linear, &inputs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, GradError> {
        self.apply(Primitive::StopGradient, &[x])
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Nodes are visited in reverse recording order. A variable that no
    /// gradient path reaches (including paths cut by `stop_gradient`) has no
    /// entry in the result.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, GradError> {
        if self.consumed {
            return Err(GradError::Consumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(GradError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(prim) = node.prim.as_ref() else { continue };
            if !node.needs_grad || *prim == Primitive::StopGradient {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let vals: Vec<&Tensor<F>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = ops::backward(prim, &vals, &node.value, &g, &needs);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !ig.all_finite() {
                    return Err(GradError::NonFinite { op: prim.name() });
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[v.0] = Some(ig),
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.prim.is_some() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulated gradients of a loss, keyed by leaf variable.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when no gradient path from the loss reaches `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
