//! Static computation graphs and reverse-mode differentiation.
//!
//! A [`Graph`] records primitive operations in creation order, so parents
//! always precede children. Parameters are bound at evaluation time from a
//! [`ParameterStore`], named inputs from an [`Inputs`] map.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{GradientMap, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub type Inputs = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Param(ParamId),
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be a row vector broadcast over rows.
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Mean squared error between predictions and targets.
    Mse(NodeId, NodeId),
    /// Mean softmax cross-entropy of logits `[n, c]` against class indices `[n]`.
    SoftmaxCrossEntropy(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Sum of all entries.
    Sum(NodeId),
}

impl Op {
    fn parents(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Param(_) | Op::Input(_) | Op::Constant(_) => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mse(a, b) | Op::SoftmaxCrossEntropy(a, b) => [Some(a), Some(b)],
            Op::Tanh(a) | Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) => [Some(a), None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for p in op.parents().into_iter().flatten() {
            assert!(p.0 < self.nodes.len(), "parent {} not yet defined", p.0);
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: impl Into<ParamId>) -> NodeId {
        self.push(Op::Param(id.into()))
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::Mse(pred, target))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits, labels))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0]
    }

    /// Parameter ids referenced by this graph, in first-use order, deduplicated.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param(id) if seen.insert(id.clone()) => Some(id.clone()),
                _ => None,
            })
            .collect()
    }

    fn output_node(&self) -> Result<NodeId> {
        self.output
            .ok_or_else(|| Error::Contract("graph has no designated output".into()))
    }
}

/// Values of every node from one forward pass.
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
    output: NodeId,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self) -> &Tensor {
        self.value(self.output)
    }
}

/// Runs the forward pass, keeping every intermediate value.
pub fn forward<'a>(graph: &Graph, params: &'a ParameterStore, inputs: &'a Inputs) -> Result<Evaluation<'a>> {
    let output = graph.output_node()?;
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(graph.nodes.len());
    for op in &graph.nodes {
        let v = eval_op(op, &values, params, inputs)?;
        v.ensure_finite(op.name())?;
        values.push(v);
    }
    Ok(Evaluation { values, output })
}

/// Output tensor of the graph. Pure: nothing is mutated.
pub fn evaluate(graph: &Graph, params: &ParameterStore, inputs: &Inputs) -> Result<Tensor> {
    Ok(forward(graph, params, inputs)?.output().clone())
}

fn eval_op<'a>(
    op: &Op,
    values: &[Cow<'a, Tensor>],
    params: &'a ParameterStore,
    inputs: &'a Inputs,
) -> Result<Cow<'a, Tensor>> {
    let v = |n: &NodeId| -> &Tensor { &values[n.0] };
    Ok(match op {
        Op::Param(id) => Cow::Borrowed(
            params
                .get(id)
                .ok_or_else(|| Error::Contract(format!("unbound parameter {id}")))?,
        ),
        Op::Input(name) => Cow::Borrowed(
            inputs
                .get(name)
                .ok_or_else(|| Error::Contract(format!("unbound input `{name}`")))?,
        ),
        Op::Constant(t) => Cow::Owned(t.clone()),
        Op::MatMul(a, b) => Cow::Owned(matmul(v(a), v(b))?),
        Op::Add(a, b) => Cow::Owned(add(v(a), v(b))?),
        Op::Tanh(a) => Cow::Owned(v(a).map(f64::tanh)),
        Op::Relu(a) => Cow::Owned(v(a).map(|x| x.max(0.0))),
        Op::Mse(p, t) => {
            let (p, t) = (v(p), v(t));
            check_same(p, t, "mse")?;
            let n = p.len() as f64;
            let s: f64 = p.values().iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum();
            Cow::Owned(Tensor::scalar(s / n))
        }
        Op::SoftmaxCrossEntropy(z, y) => {
            let (z, y) = (v(z), v(y));
            let labels = class_labels(z, y)?;
            let (n, c) = z.dims2()?;
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = &z.values()[i * c..(i + 1) * c];
                total += log_sum_exp(row) - row[label];
            }
            Cow::Owned(Tensor::scalar(total / n as f64))
        }
        Op::Scale(a, f) => Cow::Owned(v(a).map(|x| x * f)),
        Op::Sum(a) => Cow::Owned(Tensor::scalar(v(a).values().iter().sum())),
    })
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dimension(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = av[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bv[p * m..(p + 1) * m];
            for (o, &w) in orow.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}

/// True when `b` is a row vector broadcast over the rows of `a`.
fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() == b.shape() || a.shape().len() != 2 {
        return false;
    }
    let cols = a.shape()[1];
    matches!(b.shape(), [c] if *c == cols) || matches!(b.shape(), [1, c] if *c == cols)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        return Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), values));
    }
    if is_row_broadcast(a, b) {
        let cols = b.len();
        let values = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.values()[i % cols])
            .collect();
        return Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), values));
    }
    Err(Error::Dimension(format!("add {:?} + {:?}", a.shape(), b.shape())))
}

fn class_labels(logits: &Tensor, labels: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = logits.dims2()?;
    if logits.shape().len() != 2 || labels.len() != n {
        return Err(Error::Dimension(format!(
            "cross-entropy logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    labels
        .values()
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < c {
                Ok(y as usize)
            } else {
                Err(Error::Dimension(format!("class label {y} invalid for {c} classes")))
            }
        })
        .collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradient of the scalar output with respect to every parameter leaf.
pub fn backward(graph: &Graph, params: &ParameterStore, inputs: &Inputs) -> Result<GradientMap> {
    let eval = forward(graph, params, inputs)?;
    backward_from(graph, &eval)
}

/// Reverse pass reusing the values of a previous [`forward`].
pub fn backward_from(graph: &Graph, eval: &Evaluation<'_>) -> Result<GradientMap> {
    let out = eval.output;
    if !eval.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "backward needs a scalar output, got shape {:?}",
            eval.value(out).shape()
        )));
    }
    let n = graph.nodes.len();
    let mut needs = vec![false; n];
    for (i, op) in graph.nodes.iter().enumerate() {
        needs[i] = matches!(op, Op::Param(_)) || op.parents().into_iter().flatten().any(|p| needs[p.0]);
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[out.0] = Some(Tensor::scalar(1.0));
    let mut result = GradientMap::new();

    for i in (0..=out.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        if !needs[i] {
            continue;
        }
        let val = |node: NodeId| eval.value(node);
        match &graph.nodes[i] {
            Op::Param(id) => accumulate_map(&mut result, id, g)?,
            Op::Input(_) | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs[a.0] {
                    accumulate(&mut grads, *a, matmul_nt(&g, bv)?)?;
                }
                if needs[b.0] {
                    accumulate(&mut grads, *b, matmul_tn(av, &g)?)?;
                }
            }
            Op::Add(a, b) => {
                if needs[b.0] {
                    let gb = if is_row_broadcast(val(*a), val(*b)) {
                        column_sums(&g, val(*b).shape().to_vec())?
                    } else {
                        g.clone()
                    };
                    accumulate(&mut grads, *b, gb)?;
                }
                if needs[a.0] {
                    accumulate(&mut grads, *a, g)?;
                }
            }
            Op::Tanh(a) => {
                let y = eval.value(NodeId(i));
                let values = g
                    .values()
                    .iter()
                    .zip(y.values())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(&mut grads, *a, Tensor::from_parts_unchecked(y.shape().to_vec(), values))?;
            }
            Op::Relu(a) => {
                let x = val(*a);
                let values = g
                    .values()
                    .iter()
                    .zip(x.values())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads, *a, Tensor::from_parts_unchecked(x.shape().to_vec(), values))?;
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let scale = 2.0 * g.item()? / pv.len() as f64;
                let diff: Vec<f64> = pv
                    .values()
                    .iter()
                    .zip(tv.values())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                if needs[t.0] {
                    let neg = diff.iter().map(|d| -d).collect();
                    accumulate(&mut grads, *t, Tensor::from_parts_unchecked(tv.shape().to_vec(), neg))?;
                }
                if needs[p.0] {
                    accumulate(&mut grads, *p, Tensor::from_parts_unchecked(pv.shape().to_vec(), diff))?;
                }
            }
            Op::SoftmaxCrossEntropy(z, y) => {
                if needs[z.0] {
                    let zv = val(*z);
                    let labels = class_labels(zv, val(*y))?;
                    let (rows, c) = zv.dims2()?;
                    let scale = g.item()? / rows as f64;
                    let mut out = Vec::with_capacity(rows * c);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &zv.values()[r * c..(r + 1) * c];
                        let lse = log_sum_exp(row);
                        for (j, &x) in row.iter().enumerate() {
                            let p = (x - lse).exp();
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            out.push(scale * (p - onehot));
                        }
                    }
                    accumulate(&mut grads, *z, Tensor::from_parts_unchecked(zv.shape().to_vec(), out))?;
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f))?,
            Op::Sum(a) => {
                let s = g.item()?;
                let shape = val(*a).shape().to_vec();
                let len = val(*a).len();
                accumulate(&mut grads, *a, Tensor::from_parts_unchecked(shape, vec![s; len]))?;
            }
        }
    }

    // Parameters that do not influence the output still get an explicit zero.
    for op in &graph.nodes {
        if let Op::Param(id) = op {
            if !result.contains_key(id) {
                let shape = eval
                    .values
                    .iter()
                    .zip(&graph.nodes)
                    .find_map(|(v, o)| matches!(o, Op::Param(p) if p == id).then(|| v.shape().to_vec()))
                    .expect("param evaluated");
                result.insert(id.clone(), Tensor::zeros(shape));
            }
        }
    }
    for (id, g) in &result {
        g.ensure_finite(&format!("gradient of {id}"))?;
    }
    Ok(result)
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[node.0] {
        Some(existing) => add_into(existing, &g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_map(map: &mut GradientMap, id: &ParamId, g: Tensor) -> Result<()> {
    match map.get_mut(id) {
        Some(existing) => add_into(existing, &g),
        None => {
            map.insert(id.clone(), g);
            Ok(())
        }
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) -> Result<()> {
    if acc.len() != g.len() {
        return Err(Error::Dimension(format!(
            "gradient shapes {:?} vs {:?}",
            acc.shape(),
            g.shape()
        )));
    }
    for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
        *a += b;
    }
    Ok(())
}

/// `g · bᵀ`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = g.dims2()?;
    let (k, m2) = b.dims2()?;
    debug_assert_eq!(m, m2);
    let (gv, bv) = (g.values(), b.values());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &gv[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &bv[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, k], out))
}

/// `aᵀ · g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (n2, m) = g.dims2()?;
    debug_assert_eq!(n, n2);
    let (av, gv) = (a.values(), g.values());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &gv[i * m..(i + 1) * m];
        for p in 0..k {
            let x = av[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![k, m], out))
}

fn column_sums(g: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let (n, c) = g.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(&g.values()[i * c..(i + 1) * c]) {
            *o += x;
        }
    }
    Tensor::new(shape, out)
}

/// Central-difference estimate of the output gradient for every parameter
/// leaf of `graph`.
pub fn numerical_gradient(graph: &Graph, params: &ParameterStore, inputs: &Inputs, h: f64) -> Result<GradientMap> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut work = params.clone();
    let mut result = GradientMap::new();
    for id in graph.param_ids() {
        let len = work
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("unbound parameter {id}")))?
            .len();
        let shape = work.get(&id).expect("bound").shape().to_vec();
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work.get(&id).expect("bound").values()[j];
            work.get_mut(&id).expect("bound").values_mut()[j] = orig + h;
            let plus = evaluate(graph, &work, inputs)?.item()?;
            work.get_mut(&id).expect("bound").values_mut()[j] = orig - h;
            let minus = evaluate(graph, &work, inputs)?.item()?;
            work.get_mut(&id).expect("bound").values_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        result.insert(id, Tensor::new(shape, g)?);
    }
    Ok(result)
}
