//! Linear tape for reverse-mode gradients.
//!
//! Each recorded node keeps its forward value and the op that produced it.
//! [`Tape::backward`] walks the nodes in reverse and applies the matching
//! adjoint from [`crate::ops`] or [`crate::attender`]. Nodes that no trainable
//! leaf feeds are never differentiated.

use crate::attender;
use crate::error::{shape_err, Error, Result};
use crate::neighborhood::Offset;
use crate::ops::{self, NormAxis};
use crate::tensor::{ConvKernel, FeatureMap, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value<T: Real> {
    Map(FeatureMap<T>),
    Kernel(ConvKernel<T>),
    Vector(Vec<T>),
    Scalar(T),
}

impl<T: Real> Value<T> {
    fn kind(&self) -> &'static str {
        match self {
            Value::Map(_) => "map",
            Value::Kernel(_) => "kernel",
            Value::Vector(_) => "vector",
            Value::Scalar(_) => "scalar",
        }
    }

    /// Flat views of every scalar in this value, in storage order.
    pub fn parts(&self) -> Vec<&[T]> {
        match self {
            Value::Map(m) => vec![m.data()],
            Value::Kernel(k) => vec![k.weights(), k.bias()],
            Value::Vector(v) => vec![v],
            Value::Scalar(s) => vec![std::slice::from_ref(s)],
        }
    }

    pub fn parts_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Value::Map(m) => vec![m.data_mut()],
            Value::Kernel(k) => {
                let (w, b) = k.parts_mut();
                vec![w, b]
            }
            Value::Vector(v) => vec![v.as_mut_slice()],
            Value::Scalar(s) => vec![std::slice::from_mut(s)],
        }
    }

    fn accumulate(&mut self, other: Value<T>) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    ConvTranspose2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    Conv1x1 { x: NodeId, k: NodeId },
    Relu(NodeId),
    Softmax(NodeId),
    Nearest(NodeId),
    Bilinear(NodeId),
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Norm { x: NodeId, gamma: NodeId, beta: NodeId, axis: NormAxis },
    LocalPool { a: NodeId, v: NodeId, offsets: Vec<Offset>, cell: usize },
    L2 { a: NodeId, b: NodeId },
    Sum(Vec<NodeId>),
}

struct Node<T: Real> {
    value: Value<T>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient for every node reached by the backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Value<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Value<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn map(&self, id: NodeId) -> Option<&FeatureMap<T>> {
        match self.get(id) {
            Some(Value::Map(m)) => Some(m),
            _ => None,
        }
    }

    pub fn kernel(&self, id: NodeId) -> Option<&ConvKernel<T>> {
        match self.get(id) {
            Some(Value::Kernel(k)) => Some(k),
            _ => None,
        }
    }

    pub fn vector(&self, id: NodeId) -> Option<&[T]> {
        match self.get(id) {
            Some(Value::Vector(v)) => Some(v),
            _ => None,
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Autodiff(format!("node {} is not on this tape", id.0)))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Record an input. Only `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Value<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, map: FeatureMap<T>) -> NodeId {
        self.leaf(Value::Map(map), false)
    }

    pub fn param_map(&mut self, map: FeatureMap<T>) -> NodeId {
        self.leaf(Value::Map(map), true)
    }

    pub fn param_kernel(&mut self, kernel: ConvKernel<T>) -> NodeId {
        self.leaf(Value::Kernel(kernel), true)
    }

    pub fn param_vector(&mut self, v: Vec<T>) -> NodeId {
        self.leaf(Value::Vector(v), true)
    }

    pub fn value(&self, id: NodeId) -> Result<&Value<T>> {
        Ok(&self.node(id)?.value)
    }

    pub fn map(&self, id: NodeId) -> Result<&FeatureMap<T>> {
        match &self.node(id)?.value {
            Value::Map(m) => Ok(m),
            other => Err(Error::Autodiff(format!(
                "node {} holds a {}, expected a map",
                id.0,
                other.kind()
            ))),
        }
    }

    pub fn kernel(&self, id: NodeId) -> Result<&ConvKernel<T>> {
        match &self.node(id)?.value {
            Value::Kernel(k) => Ok(k),
            other => Err(Error::Autodiff(format!(
                "node {} holds a {}, expected a kernel",
                id.0,
                other.kind()
            ))),
        }
    }

    fn vector(&self, id: NodeId) -> Result<&[T]> {
        match &self.node(id)?.value {
            Value::Vector(v) => Ok(v),
            other => Err(Error::Autodiff(format!(
                "node {} holds a {}, expected a vector",
                id.0,
                other.kind()
            ))),
        }
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        match &self.node(id)?.value {
            Value::Scalar(s) => Ok(*s),
            other => Err(Error::Autodiff(format!(
                "node {} holds a {}, expected a scalar",
                id.0,
                other.kind()
            ))),
        }
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = ops::conv2d(self.map(x)?, self.kernel(k)?, stride, pad)?;
        let ng = self.needs(&[x, k]);
        Ok(self.push(Value::Map(out), Op::Conv2d { x, k, stride, pad }, ng))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = ops::conv_transpose2d(self.map(x)?, self.kernel(k)?, stride, pad)?;
        let ng = self.needs(&[x, k]);
        Ok(self.push(Value::Map(out), Op::ConvTranspose2d { x, k, stride, pad }, ng))
    }

    pub fn conv1x1(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let out = ops::conv1x1(self.map(x)?, self.kernel(k)?)?;
        let ng = self.needs(&[x, k]);
        Ok(self.push(Value::Map(out), Op::Conv1x1 { x, k }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::relu(self.map(x)?);
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Map(out), Op::Relu(x), ng))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::softmax_lastdim(self.map(x)?);
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Map(out), Op::Softmax(x), ng))
    }

    pub fn nearest_resize(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let out = ops::nearest_resize(self.map(x)?, h, w);
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Map(out), Op::Nearest(x), ng))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let out = ops::bilinear_resize(self.map(x)?, h, w);
        let ng = self.needs(&[x]);
        Ok(self.push(Value::Map(out), Op::Bilinear(x), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.map(a)?, self.map(b)?)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Map(out), Op::Add(a, b), ng))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(self.map(a)?, self.map(b)?)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Map(out), Op::Concat(a, b), ng))
    }

    pub fn normalize(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: NormAxis,
    ) -> Result<NodeId> {
        let out = ops::normalize(self.map(x)?, self.vector(gamma)?, self.vector(beta)?, axis)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(Value::Map(out), Op::Norm { x, gamma, beta, axis }, ng))
    }

    /// Pool `v` with attention weights `a` over `offsets`.
    pub fn local_pool(
        &mut self,
        a: NodeId,
        v: NodeId,
        offsets: &[Offset],
        cell: usize,
    ) -> Result<NodeId> {
        let out = attender::local_pool(self.map(a)?, self.map(v)?, offsets, cell)?;
        let ng = self.needs(&[a, v]);
        Ok(self.push(
            Value::Map(out),
            Op::LocalPool {
                a,
                v,
                offsets: offsets.to_vec(),
                cell,
            },
            ng,
        ))
    }

    /// Full local attender: projection, softmax, pooling. Returns the output
    /// node and the attender-map node.
    pub fn attend(
        &mut self,
        g: NodeId,
        v: NodeId,
        projection: NodeId,
        offsets: &[Offset],
    ) -> Result<(NodeId, NodeId)> {
        let (gm, vm) = (self.map(g)?, self.map(v)?);
        let cell = attender::cell_scale((gm.height(), gm.width()), (vm.height(), vm.width()))?;
        let logits = self.conv1x1(g, projection)?;
        let a = self.softmax(logits)?;
        Ok((self.local_pool(a, v, offsets, cell)?, a))
    }

    pub fn l2_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::l2_loss(self.map(a)?, self.map(b)?)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Value::Scalar(out), Op::L2 { a, b }, ng))
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Autodiff("cannot sum zero terms".into()));
        }
        let mut total = T::zero();
        for &t in terms {
            total += self.scalar(t)?;
        }
        let ng = self.needs(terms);
        Ok(self.push(Value::Scalar(total), Op::Sum(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward called on an empty tape".into()));
        }
        self.scalar(loss)?;
        let mut grads: Vec<Option<Value<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Value::Scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(&node.op, &node.value, &upstream)?;
            grads[idx] = Some(upstream);
            for (id, g) in contributions {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.accumulate(g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(
        &self,
        op: &Op,
        output: &Value<T>,
        upstream: &Value<T>,
    ) -> Result<Vec<(NodeId, Value<T>)>> {
        let up_map = || match upstream {
            Value::Map(m) => Ok(m),
            other => Err(shape_err!("expected map gradient, got {}", other.kind())),
        };
        let up_scalar = || match upstream {
            Value::Scalar(s) => Ok(*s),
            other => Err(shape_err!("expected scalar gradient, got {}", other.kind())),
        };
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let (gx, gk) = ops::conv2d_backward(
                    self.map(*x)?,
                    self.kernel(*k)?,
                    *stride,
                    *pad,
                    up_map()?,
                    needs(*x),
                );
                out.push((*k, Value::Kernel(gk)));
                if let Some(gx) = gx {
                    out.push((*x, Value::Map(gx)));
                }
            }
            Op::ConvTranspose2d { x, k, stride, pad } => {
                let (gx, gk) = ops::conv_transpose2d_backward(
                    self.map(*x)?,
                    self.kernel(*k)?,
                    *stride,
                    *pad,
                    up_map()?,
                    needs(*x),
                );
                out.push((*k, Value::Kernel(gk)));
                if let Some(gx) = gx {
                    out.push((*x, Value::Map(gx)));
                }
            }
            Op::Conv1x1 { x, k } => {
                let (gx, gk) =
                    ops::conv1x1_backward(self.map(*x)?, self.kernel(*k)?, up_map()?, needs(*x));
                out.push((*k, Value::Kernel(gk)));
                if let Some(gx) = gx {
                    out.push((*x, Value::Map(gx)));
                }
            }
            Op::Relu(x) => {
                out.push((*x, Value::Map(ops::relu_backward(self.map(*x)?, up_map()?))));
            }
            Op::Softmax(x) => {
                let Value::Map(y) = output else {
                    return Err(Error::Autodiff("softmax output is not a map".into()));
                };
                out.push((*x, Value::Map(ops::softmax_backward(y, up_map()?))));
            }
            Op::Nearest(x) => {
                let shape = self.map(*x)?.shape();
                out.push((*x, Value::Map(ops::nearest_resize_backward(shape, up_map()?))));
            }
            Op::Bilinear(x) => {
                let shape = self.map(*x)?.shape();
                out.push((*x, Value::Map(ops::bilinear_resize_backward(shape, up_map()?))));
            }
            Op::Add(a, b) => {
                let g = up_map()?;
                out.push((*a, Value::Map(g.clone())));
                out.push((*b, Value::Map(g.clone())));
            }
            Op::Concat(a, b) => {
                let (ga, gb) = ops::split_channels(up_map()?, self.map(*a)?.channels());
                out.push((*a, Value::Map(ga)));
                out.push((*b, Value::Map(gb)));
            }
            Op::Norm { x, gamma, beta, axis } => {
                let (gx, gg, gb) =
                    ops::normalize_backward(self.map(*x)?, self.vector(*gamma)?, *axis, up_map()?);
                out.push((*x, Value::Map(gx)));
                out.push((*gamma, Value::Vector(gg)));
                out.push((*beta, Value::Vector(gb)));
            }
            Op::LocalPool {
                a,
                v,
                offsets,
                cell,
            } => {
                let (ga, gv) = attender::local_pool_backward(
                    self.map(*a)?,
                    self.map(*v)?,
                    offsets,
                    *cell,
                    up_map()?,
                );
                out.push((*a, Value::Map(ga)));
                out.push((*v, Value::Map(gv)));
            }
            Op::L2 { a, b } => {
                let ga = ops::l2_loss_backward(self.map(*a)?, self.map(*b)?, up_scalar()?);
                if needs(*b) {
                    out.push((*b, Value::Map(ga.map(|v| -v))));
                }
                out.push((*a, Value::Map(ga)));
            }
            Op::Sum(terms) => {
                let g = up_scalar()?;
                for t in terms {
                    out.push((*t, Value::Scalar(g)));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = FeatureMap::<f64>::random_uniform(3, 2, 2, 1.0, &mut rng);
        let b = FeatureMap::<f64>::random_uniform(3, 2, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let an = tape.param_map(a.clone());
        let bn = tape.constant(b.clone());
        let loss = tape.l2_loss(an, bn).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ga = grads.map(an).unwrap();
        for ((&g, &x), &y) in ga.data().iter().zip(a.data()).zip(b.data()) {
            assert!((g - 2.0 * (x - y) / 12.0).abs() < 1e-15);
        }
        assert!(grads.get(bn).is_none());
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let tape = Tape::<f32>::new();
        assert!(tape.backward(NodeId(0)).is_err());
        let mut tape = Tape::<f32>::new();
        let x = tape.param_map(FeatureMap::zeros(1, 1, 1));
        assert!(tape.backward(x).is_err());
        assert!(tape.backward(NodeId(5)).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param_map(FeatureMap::filled(1, 1, 1, 3.0));
        let zero = tape.constant(FeatureMap::zeros(1, 1, 1));
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.l2_loss(doubled, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx (2x)^2 = 8x
        assert!((grads.map(x).unwrap().get(0, 0, 0) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(FeatureMap::random_uniform(4, 4, 3, 1.0, &mut rng));
        let v = tape.constant(FeatureMap::random_uniform(2, 2, 2, 1.0, &mut rng));
        let k = tape.param_kernel(ConvKernel::init_uniform(5, 3, 1, 1, &mut rng));
        let n = crate::neighborhood::Neighborhood::named(crate::neighborhood::Pattern::N5);
        let (out, _) = tape.attend(g, v, k, n.offsets()).unwrap();
        let target = tape.constant(tape.map(out).unwrap().clone());
        let loss = tape.l2_loss(out, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gk = grads.kernel(k).unwrap();
        assert!(gk.weights().iter().chain(gk.bias()).all(|&v| v == 0.0));
    }
}
