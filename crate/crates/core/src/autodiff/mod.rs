//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each call to
//! [`Tape::apply`] evaluates a [`Primitive`] eagerly and appends a node, so node
//! ids are topologically ordered by construction. [`Tape::backward`] walks the
//! nodes once in reverse.
//!
//! Tapes are single-threaded (`!Sync` in spirit: they take `&mut self`);
//! independent tapes can be built on separate threads.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_difference_check, max_relative_error};
pub use ops::{sigmoid, Primitive};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<Var>)>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or variable under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<Var>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Evaluate `kind` on `inputs` and record the application.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::UnknownNode(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = kind.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            Ok(self.push(out, Some((kind, inputs.to_vec())), true))
        } else {
            // Nothing upstream needs a gradient; keep the value only.
            Ok(self.push(out, None, false))
        }
    }

    /// Gradients of the scalar `output` with respect to every node that requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some((kind, inputs)) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = kind.backward(&values, &node.value, &g, &needs);
            for (v, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &ig)?,
                    slot => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, kernel])
    }

    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanPool, &[a])
    }

    pub fn max_n(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::MaxN, xs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.apply(Primitive::Powf(p), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Dot, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SquaredNorm, &[a])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Primitive::GatherRows(rows.to_vec()), &[table])
    }

    /// Left-fold of `add` over a non-empty list.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) =
            xs.split_first().ok_or_else(|| Error::Invalid("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }
}

/// Gradient map produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the output or needs no gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with zeros filled in for unreached nodes.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let out = Primitive::Add.forward(&[&t(&[2], &[1., 2.]), &t(&[2], &[3., 4.])]).unwrap();
        assert_eq!(out.data(), &[4., 6.]);
    }

    #[test]
    fn max_n_is_union() {
        let out = Primitive::MaxN.forward(&[&t(&[2], &[1., 0.]), &t(&[2], &[0., 2.])]).unwrap();
        assert_eq!(out.data(), &[1., 2.]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let img = Tensor::ones(&[5, 5, 1]);
        let k = Tensor::ones(&[3, 3, 1, 1]);
        let out = Primitive::Conv2d { stride: 1, pad: 1 }.forward(&[&img, &k]).unwrap();
        assert_eq!(out.shape(), &[5, 5, 1]);
        // direct summation: interior windows see 9 ones, corners 4, edges 6
        let expect = |y: usize, x: usize| {
            let span = |c: usize| if c == 0 || c == 4 { 2.0 } else { 3.0 };
            span(y) * span(x)
        };
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(out.data()[y * 5 + x], expect(y, x));
            }
        }
        assert_eq!(out.data()[12], 9.0);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let err = Primitive::Add.forward(&[&Tensor::zeros(&[2]), &Tensor::zeros(&[3])]).unwrap_err();
        match err {
            Error::ShapeMismatch { shapes, .. } => assert_eq!(shapes, vec![vec![2], vec![3]]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        assert!(matches!(
            Primitive::Log.forward(&[&t(&[2], &[1.0, 0.0])]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = tape.leaf(Tensor::vector(vec![3.0]));
        let xy = tape.dot(x, y).unwrap();
        let g = tape.backward(xy).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
        assert_eq!(g.get(y).unwrap().data(), &[2.0]);
        assert_eq!(g.get(xy).unwrap().data(), &[1.0]);
    }

    #[test]
    fn logistic_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(x).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let cv = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let c = tape.constant(cv.clone());
        let d = tape.sub(x, c).unwrap();
        let n = tape.squared_norm(d).unwrap();
        let g = tape.backward(n).unwrap();
        for i in 0..6 {
            let expect = 2.0 * (xv.data()[i] - cv.data()[i]);
            assert!((g.get(x).unwrap().data()[i] - expect).abs() < 1e-15);
        }
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 5.0]));
        let b = tape.leaf(t(&[2], &[1.0, 2.0]));
        let m = tape.max_n(&[a, b]).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::uniform(&[4], 0.1, 1.0, &mut rng);
        let build = |tape: &mut Tape, which: u8| {
            let x = tape.leaf(xv.clone());
            let f = {
                let l = tape.log(x).unwrap();
                tape.sum(l).unwrap()
            };
            let h = {
                let s = tape.tanh(x).unwrap();
                tape.squared_norm(s).unwrap()
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => tape.add(f, h).unwrap(),
            };
            let g = tape.backward(out).unwrap();
            g.wrt(tape, x)
        };
        let gf = build(&mut Tape::new(), 0);
        let gh = build(&mut Tape::new(), 1);
        let gs = build(&mut Tape::new(), 2);
        for i in 0..4 {
            assert!((gs.data()[i] - gf.data()[i] - gh.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[9, 9, 3], 0.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 3, 3, 4], -1.0, 1.0, &mut rng);
        let op = Primitive::Conv2d { stride: 2, pad: 1 };
        let a = op.forward(&[&img, &k]).unwrap();
        let b = op.forward(&[&img, &k]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn constants_only_graph_records_nothing() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}
