//! Weight transfer: predicting per-class mask weights from per-class
//! detection weights with a small shared MLP.
//!
//! For class `c` the predicted mask weights are `T(w_det[c]; θ)` where
//! `w_det[c]` is one row of the class embedding matrix and `θ` is shared by
//! every class. Rows never interact, so the function generalizes to classes
//! whose masks were never observed, provided their embeddings live in the
//! same space.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grad::{Real, Tape, Tensor, Var};
use crate::net::{Bindings, NetError, ParamStore};

/// Per-class rows read from an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbedding {
    rows: Tensor<f32>,
}

impl ExternalEmbedding {
    pub fn new(rows: Tensor<f32>) -> Result<Self, NetError> {
        if rows.shape().len() != 2 {
            return Err(NetError::Shape(format!("embedding must be 2-D, got {:?}", rows.shape())));
        }
        Ok(ExternalEmbedding { rows })
    }

    pub fn classes(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }

    /// Parses `embedding <C> <Din>` followed by one whitespace-separated row
    /// per class id `1..=C`.
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let bad = |m: String| NetError::Embedding(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let (classes, width) = match header.as_slice() {
            ["embedding", c, d] => (
                c.parse::<usize>().map_err(|_| bad(format!("bad class count {c:?}")))?,
                d.parse::<usize>().map_err(|_| bad(format!("bad width {d:?}")))?,
            ),
            _ => return Err(bad("missing `embedding <C> <Din>` header".into())),
        };
        if classes == 0 || width == 0 {
            return Err(bad("class count and width must be positive".into()));
        }
        let mut data = Vec::with_capacity(classes * width);
        let mut seen = 0;
        for line in lines {
            let row: Vec<f32> = line
                .split_whitespace()
                .map(|t| t.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("row {}: {e}", seen + 1)))?;
            if row.len() != width {
                return Err(bad(format!("row {} has {} values, header says {width}", seen + 1, row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("row {} has non-finite values", seen + 1)));
            }
            data.extend(row);
            seen += 1;
        }
        if seen != classes {
            return Err(bad(format!("{seen} rows, header says {classes}")));
        }
        Ok(ExternalEmbedding { rows: Tensor::new(&[classes, width], data)? })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = fs::read_to_string(path).map_err(|e| NetError::Embedding(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let (c, d) = (self.classes(), self.width());
        let mut out = format!("embedding {c} {d}\n");
        for row in self.rows.data().chunks_exact(d) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Where the per-class input vectors of the transfer function come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    /// Classification rows (`D + 1` wide).
    Cls,
    /// The four regression rows of each class, flattened (`4(D + 1)` wide).
    Box,
    /// Concatenation of both (`5(D + 1)` wide).
    ClsBox,
    /// Fixed Gaussian vectors, `D + 1` wide, one per `(class, seed)`.
    Randn { seed: u64 },
    External(ExternalEmbedding),
}

impl EmbeddingSource {
    /// Input width given the box-head trunk width `box_dim` (= D).
    pub fn width(&self, box_dim: usize) -> usize {
        match self {
            EmbeddingSource::Cls | EmbeddingSource::Randn { .. } => box_dim + 1,
            EmbeddingSource::Box => 4 * (box_dim + 1),
            EmbeddingSource::ClsBox => 5 * (box_dim + 1),
            EmbeddingSource::External(e) => e.width(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EmbeddingSource::Cls => "cls",
            EmbeddingSource::Box => "box",
            EmbeddingSource::ClsBox => "cls+box",
            EmbeddingSource::Randn { .. } => "randn",
            EmbeddingSource::External(_) => "external",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu { alpha } => write!(f, "leaky_relu({alpha})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSpec {
    pub source: EmbeddingSource,
    /// Number of affine layers, 1 to 3. The activation sits between layers.
    pub layers: usize,
    pub activation: Activation,
    /// Hidden width; `None` uses the output width `E + 1`.
    pub hidden: Option<usize>,
    pub stop_grad: bool,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            source: EmbeddingSource::ClsBox,
            layers: 2,
            activation: Activation::LeakyRelu { alpha: 0.01 },
            hidden: None,
            stop_grad: true,
        }
    }
}

impl TransferSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(1..=3).contains(&self.layers) {
            return Err(NetError::Config(format!("transfer layers must be 1..=3, got {}", self.layers)));
        }
        if self.hidden == Some(0) {
            return Err(NetError::Config("transfer hidden width must be >= 1".into()));
        }
        if let Activation::LeakyRelu { alpha } = self.activation {
            if !(alpha > 0.0) {
                return Err(NetError::Config(format!("leaky slope must be > 0, got {alpha}")));
            }
        }
        Ok(())
    }

    /// Layer widths `[Din, hidden, ..., out]`.
    pub fn dims(&self, din: usize, out: usize) -> Vec<usize> {
        let hidden = self.hidden.unwrap_or(out);
        let mut dims = vec![din];
        dims.extend(std::iter::repeat_n(hidden, self.layers - 1));
        dims.push(out);
        dims
    }
}

pub fn layer_names(layer: usize) -> (String, String) {
    (format!("transfer.l{layer}.weight"), format!("transfer.l{layer}.bias"))
}

/// Fan-in normal initialization of θ; the last layer is scaled by 0.1.
pub fn init_transfer(spec: &TransferSpec, din: usize, out: usize, seed: u64, store: &mut ParamStore) {
    let dims = spec.dims(din, out);
    for l in 0..spec.layers {
        let (wn, bn) = layer_names(l);
        let scale = if l + 1 == spec.layers { 0.1 } else { 1.0 };
        store.insert(&wn, crate::net::he_normal(&[dims[l + 1], dims[l]], dims[l], seed, &wn, scale));
        store.insert(&bn, Tensor::zeros(&[dims[l + 1]]));
    }
}

/// Deterministic Gaussian row for `(class, seed)`.
pub fn randn_row(class: usize, seed: u64, width: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::shapes::scene_seed(seed, class as u64));
    (0..width).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Class embedding matrix `[C, Din]` for foreground classes `1..=C`.
///
/// `w_cls` is `[(C+1), D+1]` with background in row 0; `w_box` is `[4C, D+1]`.
pub fn build_class_embedding<F: Real>(
    tape: &mut Tape<F>,
    w_cls: Var,
    w_box: Var,
    source: &EmbeddingSource,
    num_classes: usize,
) -> Result<Var, NetError> {
    let dcols = tape.value(w_cls).shape()[1];
    let cls = |tape: &mut Tape<F>| tape.slice(w_cls, 0, 1, num_classes);
    let bx = |tape: &mut Tape<F>| tape.reshape(w_box, &[num_classes, 4 * dcols]);
    let out = match source {
        EmbeddingSource::Cls => cls(tape)?,
        EmbeddingSource::Box => bx(tape)?,
        EmbeddingSource::ClsBox => {
            let a = cls(tape)?;
            let b = bx(tape)?;
            tape.concat(&[a, b], 1)?
        }
        EmbeddingSource::Randn { seed } => {
            let data: Vec<F> = (0..num_classes)
                .flat_map(|c| randn_row(c, *seed, dcols))
                .map(|v| F::lit(f64::from(v)))
                .collect();
            tape.constant(Tensor::new(&[num_classes, dcols], data)?)?
        }
        EmbeddingSource::External(e) => {
            if e.classes() != num_classes {
                return Err(NetError::Embedding(format!(
                    "file has {} classes, model has {num_classes}",
                    e.classes()
                )));
            }
            tape.constant(e.rows().cast())?
        }
    };
    Ok(out)
}

/// `w_seg = T(embedding; θ)`, one output row per embedding row.
pub fn transfer_forward<F: Real>(
    tape: &mut Tape<F>,
    embedding: Var,
    params: &Bindings,
    spec: &TransferSpec,
) -> Result<Var, NetError> {
    let mut x = if spec.stop_grad { tape.stop_gradient(embedding)? } else { embedding };
    for l in 0..spec.layers {
        let (wn, bn) = layer_names(l);
        let (w, b) = (params.get(&wn)?, params.get(&bn)?);
        let din = tape.value(w).shape()[1];
        if tape.value(x).shape()[1] != din {
            return Err(NetError::Shape(format!(
                "transfer layer {l} expects width {din}, embedding has {}",
                tape.value(x).shape()[1]
            )));
        }
        x = tape.linear(x, w, Some(b))?;
        if l + 1 < spec.layers {
            x = match spec.activation {
                Activation::Relu => tape.relu(x)?,
                Activation::LeakyRelu { alpha } => tape.leaky_relu(x, alpha)?,
            };
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(tape: &mut Tape<f64>, store: &ParamStore) -> Bindings {
        Bindings::bind(tape, store, |_| true).unwrap()
    }

    #[test]
    fn zero_theta_gives_zero_weights() {
        let spec = TransferSpec::default();
        let mut store = ParamStore::default();
        init_transfer(&spec, 6, 4, 1, &mut store);
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store);
        let emb = tape.constant(Tensor::from_fn(&[3, 6], |i| i as f64 - 4.0)).unwrap();
        let out = transfer_forward(&mut tape, emb, &p, &spec).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let spec = TransferSpec::default();
        let mut store = ParamStore::default();
        init_transfer(&spec, 5, 3, 9, &mut store);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store);
        let row = [0.3, -1.0, 2.0, 0.5, -0.7];
        let data: Vec<f64> = row.iter().chain(&[1.0, 1.0, 1.0, 1.0, 1.0]).chain(&row).copied().collect();
        let emb = tape.constant(Tensor::new(&[3, 5], data).unwrap()).unwrap();
        let out = transfer_forward(&mut tape, emb, &p, &spec).unwrap();
        let v = tape.value(out).data();
        assert_eq!(&v[0..3], &v[6..9]);
    }

    #[test]
    fn two_layer_leaky_matches_hand_composition() {
        // W1 = [[1, -2], [0.5, 1]], b1 = [0, -1]; W2 = [[2, 1], [-1, 3]], b2 = [0.5, 0]
        // x = [1, 2]:  h = W1x + b1 = [-3, 1.5];  leaky(0.01) → [-0.03, 1.5]
        // y = W2h + b2 = [-0.06 + 1.5 + 0.5, 0.03 + 4.5] = [1.94, 4.53]
        let spec = TransferSpec { hidden: Some(2), ..TransferSpec::default() };
        let mut store = ParamStore::default();
        store.insert("transfer.l0.weight", Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 1.0]).unwrap());
        store.insert("transfer.l0.bias", Tensor::new(&[2], vec![0.0, -1.0]).unwrap());
        store.insert("transfer.l1.weight", Tensor::new(&[2, 2], vec![2.0, 1.0, -1.0, 3.0]).unwrap());
        store.insert("transfer.l1.bias", Tensor::new(&[2], vec![0.5, 0.0]).unwrap());
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store);
        let emb = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let out = transfer_forward(&mut tape, emb, &p, &spec).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 1.94).abs() < 1e-12 && (v[1] - 4.53).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn one_layer_is_affine() {
        let spec = TransferSpec { layers: 1, ..TransferSpec::default() };
        let mut store = ParamStore::default();
        init_transfer(&spec, 4, 3, 5, &mut store);
        store.insert("transfer.l0.bias", Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let (w, b) = (store.get("transfer.l0.weight").unwrap().clone(), store.get("transfer.l0.bias").unwrap().clone());
        let x: Vec<f64> = vec![0.5, -1.5, 2.0, 0.25, 1.0, 1.0, -1.0, 0.0];
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store);
        let emb = tape.constant(Tensor::new(&[2, 4], x.clone()).unwrap()).unwrap();
        let out = transfer_forward(&mut tape, emb, &p, &spec).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let want: f64 = (0..4).map(|i| x[r * 4 + i] * f64::from(w.data()[o * 4 + i])).sum::<f64>()
                    + f64::from(b.data()[o]);
                assert!((tape.value(out).data()[r * 3 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_widths() {
        // a 1024-d classification vector plus the bias entry
        assert_eq!(EmbeddingSource::Cls.width(1024), 1025);
        assert_eq!(EmbeddingSource::ClsBox.width(128), EmbeddingSource::Cls.width(128) + EmbeddingSource::Box.width(128));
        assert_eq!(randn_row(3, 11, 8), randn_row(3, 11, 8));
        assert_ne!(randn_row(3, 11, 8), randn_row(4, 11, 8));
    }

    #[test]
    fn embedding_file_round_trip_and_errors() {
        let e = ExternalEmbedding::new(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.25, 0.0, 1.0, -3.5]).unwrap()).unwrap();
        assert_eq!(ExternalEmbedding::parse(&e.render()).unwrap(), e);
        assert!(ExternalEmbedding::parse("embedding 2 3\n1 2 3\n").is_err());
        assert!(ExternalEmbedding::parse("embedding 1 3\n1 2\n").is_err());
        assert!(ExternalEmbedding::parse("1 2 3\n").is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(TransferSpec { layers: 4, ..TransferSpec::default() }.validate().is_err());
        assert!(TransferSpec { hidden: Some(0), ..TransferSpec::default() }.validate().is_err());
        assert_eq!(TransferSpec::default().dims(10, 4), vec![10, 4, 4]);
        assert_eq!(TransferSpec { layers: 3, hidden: Some(7), ..TransferSpec::default() }.dims(10, 4), vec![10, 7, 7, 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn apply(spec: &TransferSpec, store: &ParamStore, rows: usize, emb: &[f64]) -> Vec<f64> {
            let mut tape = Tape::new();
            let p = bind(&mut tape, store);
            let e = tape.constant(Tensor::new(&[rows, 5], emb.to_vec()).unwrap()).unwrap();
            let out = transfer_forward(&mut tape, e, &p, spec).unwrap();
            tape.value(out).data().to_vec()
        }

        proptest! {
            #[test]
            fn rows_are_mapped_independently_and_follow_permutations(
                emb in prop::collection::vec(-3.0f64..3.0, 20),
                perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
                layers in 1usize..4,
                seed in 0u64..50,
            ) {
                let spec = TransferSpec { layers, ..TransferSpec::default() };
                let mut store = ParamStore::default();
                init_transfer(&spec, 5, 3, seed, &mut store);
                let out = apply(&spec, &store, 4, &emb);
                let permuted: Vec<f64> = perm.iter().flat_map(|&r| emb[r * 5..r * 5 + 5].to_vec()).collect();
                let out_p = apply(&spec, &store, 4, &permuted);
                for (i, &r) in perm.iter().enumerate() {
                    prop_assert_eq!(&out_p[i * 3..i * 3 + 3], &out[r * 3..r * 3 + 3]);
                    let alone = apply(&spec, &store, 1, &emb[r * 5..r * 5 + 5]);
                    prop_assert_eq!(&alone[..], &out[r * 3..r * 3 + 3]);
                }
            }
        }
    }
}
