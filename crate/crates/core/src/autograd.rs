//! Minimal reverse-mode differentiation over a fixed graph of dense ops.
//!
//! A [`Graph`] is built once with a [`GraphBuilder`] and is immutable
//! afterwards. Evaluating it on an input produces a [`Trace`] holding every
//! intermediate value; [`Trace::backward`] then pulls a cotangent on the
//! output back to the input and/or the parameters.
//!
//! The op set covers what an MLP and a convolutional text classifier need:
//! matrix-vector products, additions, `relu`/`tanh`, 1-d convolution,
//! max-over-time pooling, concatenation, dropout and a final log-softmax.
//! Only first derivatives are supported.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// A dimension of a node shape. `Var` dimensions are resolved per input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Fixed(usize),
    Var { min: usize },
}

impl Dim {
    fn fixed(self) -> Option<usize> {
        match self {
            Dim::Fixed(n) => Some(n),
            Dim::Var { .. } => None,
        }
    }

    fn min(self) -> usize {
        match self {
            Dim::Fixed(n) => n,
            Dim::Var { min } => min,
        }
    }

    fn accepts(self, n: usize) -> bool {
        match self {
            Dim::Fixed(m) => m == n,
            Dim::Var { min } => n >= min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    /// `weight [m, n] · x [n] -> [m]`
    MatVec { weight: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// `x [n, d]`, `weight [f, width * d]` -> `[n - width + 1, f]`, no bias.
    Conv1d {
        x: NodeId,
        weight: NodeId,
        width: usize,
    },
    /// `[t, f] -> [f]`
    MaxOverTime(NodeId),
    Concat(Vec<NodeId>),
    Dropout { x: NodeId, rate: f64 },
    LogSoftmax(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatVec { .. } => "matvec",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxOverTime(_) => "max_over_time",
            Op::Concat(_) => "concat",
            Op::Dropout { .. } => "dropout",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatVec { weight, x } => vec![*weight, *x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::Tanh(x) | Op::MaxOverTime(x) | Op::LogSoftmax(x) => vec![*x],
            Op::Conv1d { x, weight, .. } => vec![*x, *weight],
            Op::Concat(parts) => parts.clone(),
            Op::Dropout { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<Dim>,
}

/// Name and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Incrementally assembles a [`Graph`], checking shapes as nodes are added.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamDecl>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<Dim>) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                op: Op::Input,
                shape: input_shape,
            }],
            params: Vec::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    fn push(&mut self, op: Op, shape: Vec<Dim>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[Dim] {
        &self.nodes[id.0].shape
    }

    fn fixed_shape(&self, id: NodeId, what: &str) -> Result<Vec<usize>> {
        self.shape(id)
            .iter()
            .map(|d| d.fixed())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Shape(format!("{what} needs a fixed-size operand")))
    }

    pub fn param(&mut self, name: impl Into<String>, shape: Vec<usize>) -> NodeId {
        let index = self.params.len();
        self.params.push(ParamDecl {
            name: name.into(),
            shape: shape.clone(),
        });
        self.push(Op::Param(index), shape.into_iter().map(Dim::Fixed).collect())
    }

    pub fn matvec(&mut self, weight: NodeId, x: NodeId) -> Result<NodeId> {
        let w = self.fixed_shape(weight, "matvec")?;
        let v = self.fixed_shape(x, "matvec")?;
        if w.len() != 2 || v.len() != 1 || w[1] != v[0] {
            return Err(Error::Shape(format!("matvec of {w:?} and {v:?}")));
        }
        Ok(self.push(Op::MatVec { weight, x }, vec![Dim::Fixed(w[0])]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.fixed_shape(a, "add")?;
        let sb = self.fixed_shape(b, "add")?;
        if sa != sb {
            return Err(Error::Shape(format!("add of {sa:?} and {sb:?}")));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh(x), shape)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidSpec(format!("dropout rate {rate} not in [0, 1)")));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { x, rate }, shape))
    }

    /// Valid (unpadded) 1-d convolution over the rows of `x`.
    pub fn conv1d(&mut self, x: NodeId, weight: NodeId, width: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let w = self.fixed_shape(weight, "conv1d")?;
        if xs.len() != 2 || w.len() != 2 || width == 0 {
            return Err(Error::Shape(format!("conv1d of {xs:?} and {w:?}")));
        }
        let d = xs[1]
            .fixed()
            .ok_or_else(|| Error::Shape("conv1d needs a fixed feature width".into()))?;
        if w[1] != width * d {
            return Err(Error::Shape(format!(
                "conv1d weight {w:?} does not match width {width} x {d}"
            )));
        }
        if xs[0].min() < width {
            return Err(Error::Shape(format!(
                "conv1d width {width} exceeds minimum sequence length {}",
                xs[0].min()
            )));
        }
        let rows = match xs[0] {
            Dim::Fixed(n) => Dim::Fixed(n - width + 1),
            Dim::Var { min } => Dim::Var {
                min: min - width + 1,
            },
        };
        Ok(self.push(Op::Conv1d { x, weight, width }, vec![rows, Dim::Fixed(w[0])]))
    }

    pub fn max_over_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0].min() == 0 {
            return Err(Error::Shape(format!("max_over_time of {xs:?}")));
        }
        let f = xs[1]
            .fixed()
            .ok_or_else(|| Error::Shape("max_over_time needs fixed columns".into()))?;
        Ok(self.push(Op::MaxOverTime(x), vec![Dim::Fixed(f)]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = 0;
        for &p in parts {
            let s = self.fixed_shape(p, "concat")?;
            if s.len() != 1 {
                return Err(Error::Shape(format!("concat of non-vector {s:?}")));
            }
            total += s[0];
        }
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), vec![Dim::Fixed(total)]))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.fixed_shape(x, "log_softmax")?;
        if s.len() != 1 {
            return Err(Error::Shape(format!("log_softmax of {s:?}")));
        }
        Ok(self.push(Op::LogSoftmax(x), vec![Dim::Fixed(s[0])]))
    }

    /// Finishes the graph. `output` must be the last node added and a
    /// log-softmax over at least two classes.
    pub fn build(self, output: NodeId) -> Result<Graph> {
        if output.0 + 1 != self.nodes.len() {
            return Err(Error::Shape("output must be the last node".into()));
        }
        let classes = match (&self.nodes[output.0].op, &self.nodes[output.0].shape[..]) {
            (Op::LogSoftmax(_), [Dim::Fixed(c)]) if *c >= 2 => *c,
            _ => {
                return Err(Error::Shape(
                    "output must be a log_softmax over >= 2 classes".into(),
                ))
            }
        };
        let n = self.nodes.len();
        let mut on_input_path = vec![false; n];
        let mut on_param_path = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Input => on_input_path[i] = true,
                Op::Param(_) => on_param_path[i] = true,
                _ => {
                    for dep in node.op.inputs() {
                        on_input_path[i] |= on_input_path[dep.0];
                        on_param_path[i] |= on_param_path[dep.0];
                    }
                }
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            params: self.params,
            classes,
            on_input_path,
            on_param_path,
        })
    }
}

/// An immutable, topologically ordered computation producing class
/// log-probabilities.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamDecl>,
    classes: usize,
    on_input_path: Vec<bool>,
    on_param_path: Vec<bool>,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// The trainable tensors of a graph, in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        ParamSet { params }
    }

    pub fn zeros_like(decls: &[ParamDecl]) -> Self {
        ParamSet {
            params: decls
                .iter()
                .map(|d| Param {
                    name: d.name.clone(),
                    value: Tensor::zeros(d.shape.clone()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn accumulate(&mut self, other: &[Tensor]) {
        for (p, g) in self.params.iter_mut().zip(other) {
            for (a, b) in p.value.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Which gradients [`Trace::backward`] should produce.
#[derive(Debug, Clone, Copy)]
pub struct Targets {
    pub input: bool,
    pub params: bool,
}

/// Gradients returned by a backward pass.
#[derive(Debug, Clone)]
pub struct Grads {
    pub input: Option<Tensor>,
    pub params: Option<Vec<Tensor>>,
}

enum Aux {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

/// All intermediate values of one forward evaluation.
pub struct Trace<'a> {
    graph: &'a Graph,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Graph {
    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn param_decls(&self) -> &[ParamDecl] {
        &self.params
    }

    /// Declared shape of the input node.
    pub fn input_shape(&self) -> &[Dim] {
        &self.nodes[0].shape
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "graph declares {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (decl, p) in self.params.iter().zip(params.iter()) {
            if decl.shape != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} expects {:?}, got {:?}",
                    decl.name,
                    decl.shape,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let dims = self.input_shape();
        if dims.len() != input.shape().len()
            || !dims.iter().zip(input.shape()).all(|(d, &n)| d.accepts(n))
        {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match declared {:?}",
                input.shape(),
                dims
            )));
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        Ok(())
    }

    /// Evaluates the graph in inference mode (dropout disabled).
    pub fn trace(&self, input: &Tensor, params: &ParamSet) -> Result<Trace<'_>> {
        self.run(input, params, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Evaluates the graph in training mode, drawing dropout masks from `rng`.
    pub fn trace_train<R: Rng>(
        &self,
        input: &Tensor,
        params: &ParamSet,
        rng: &mut R,
    ) -> Result<Trace<'_>> {
        self.run(input, params, Some(rng))
    }

    fn run<'a, R: Rng>(
        &'a self,
        input: &Tensor,
        params: &ParamSet,
        mut rng: Option<&mut R>,
    ) -> Result<Trace<'a>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, extra) = match &node.op {
                Op::Input => (input.clone(), Aux::None),
                Op::Param(i) => (params.get(*i).clone(), Aux::None),
                Op::MatVec { weight, x } => {
                    let w = &values[weight.0];
                    let v = values[x.0].data();
                    let n = v.len();
                    let out = w.data().chunks_exact(n).map(|row| dot(row, v)).collect();
                    (Tensor::vector(out), Aux::None)
                }
                Op::Add(a, b) => (values[a.0].axpy(1.0, &values[b.0])?, Aux::None),
                Op::Relu(x) => (map(&values[x.0], |v| v.max(0.0)), Aux::None),
                Op::Tanh(x) => (map(&values[x.0], f64::tanh), Aux::None),
                Op::Conv1d { x, weight, width } => {
                    (conv1d(&values[x.0], &values[weight.0], *width)?, Aux::None)
                }
                Op::MaxOverTime(x) => {
                    let (out, arg) = max_over_time(&values[x.0]);
                    (out, Aux::Argmax(arg))
                }
                Op::Concat(parts) => {
                    let data = parts
                        .iter()
                        .flat_map(|p| values[p.0].data().iter().copied())
                        .collect();
                    (Tensor::vector(data), Aux::None)
                }
                Op::Dropout { x, rate } => match rng.as_deref_mut() {
                    Some(r) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..values[x.0].len())
                            .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let mut out = values[x.0].clone();
                        out.data_mut()
                            .iter_mut()
                            .zip(&mask)
                            .for_each(|(v, m)| *v *= m);
                        (out, Aux::Mask(mask))
                    }
                    _ => (values[x.0].clone(), Aux::None),
                },
                Op::LogSoftmax(x) => (log_softmax(values[x.0].data()), Aux::None),
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(node.op.name().into()));
            }
            values.push(value);
            aux.push(extra);
        }
        Ok(Trace {
            graph: self,
            values,
            aux,
        })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax(z: &[f64]) -> Tensor {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Tensor::vector(z.iter().map(|v| v - lse).collect())
}

fn conv1d(x: &Tensor, w: &Tensor, width: usize) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < width {
        return Err(Error::Shape(format!(
            "sequence of length {n} shorter than filter width {width}"
        )));
    }
    let filters = w.shape()[0];
    let span = width * d;
    let steps = n - width + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(steps * filters);
    for t in 0..steps {
        let window = &xd[t * d..t * d + span];
        out.extend(w.data().chunks_exact(span).map(|row| dot(row, window)));
    }
    Tensor::new(vec![steps, filters], out)
}

fn max_over_time(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; f];
    let mut arg = vec![0; f];
    for step in 0..t {
        for k in 0..f {
            let v = xd[step * f + k];
            if v > out[k] {
                out[k] = v;
                arg[k] = step;
            }
        }
    }
    (Tensor::vector(out), arg)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Trace<'_> {
    /// Log-probabilities produced by the output node.
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has an output")
    }

    /// Pulls the cotangent `seed` (same length as the output) back through
    /// the graph.
    pub fn backward(&self, seed: &[f64], targets: Targets) -> Result<Grads> {
        let graph = self.graph;
        let n = graph.nodes.len();
        if seed.len() != graph.classes {
            return Err(Error::Shape(format!(
                "seed of length {} for {} outputs",
                seed.len(),
                graph.classes
            )));
        }
        let needed: Vec<bool> = (0..n)
            .map(|i| {
                (targets.input && graph.on_input_path[i])
                    || (targets.params && graph.on_param_path[i])
            })
            .collect();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[n - 1] = Some(seed.to_vec());
        let mut param_grads: Option<Vec<Tensor>> = targets.params.then(|| {
            graph
                .params
                .iter()
                .map(|d| Tensor::zeros(d.shape.clone()))
                .collect()
        });

        for i in (0..n).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &graph.nodes[i];
            match &node.op {
                Op::Input => adj[i] = Some(dy),
                Op::Param(p) => {
                    if let Some(grads) = param_grads.as_mut() {
                        grads[*p]
                            .data_mut()
                            .iter_mut()
                            .zip(&dy)
                            .for_each(|(g, d)| *g += d);
                    }
                }
                Op::MatVec { weight, x } => {
                    let w = self.values[weight.0].data();
                    let xv = self.values[x.0].data();
                    let cols = xv.len();
                    if needed[weight.0] {
                        let dw = accumulate(&mut adj[weight.0], w.len());
                        for (r, &g) in dy.iter().enumerate() {
                            let row = &mut dw[r * cols..(r + 1) * cols];
                            row.iter_mut().zip(xv).for_each(|(a, b)| *a += g * b);
                        }
                    }
                    if needed[x.0] {
                        let dx = accumulate(&mut adj[x.0], cols);
                        for (r, &g) in dy.iter().enumerate() {
                            let row = &w[r * cols..(r + 1) * cols];
                            dx.iter_mut().zip(row).for_each(|(a, b)| *a += g * b);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        if needed[id.0] {
                            let da = accumulate(&mut adj[id.0], dy.len());
                            da.iter_mut().zip(&dy).for_each(|(s, d)| *s += d);
                        }
                    }
                }
                Op::Relu(x) => {
                    if needed[x.0] {
                        let xv = self.values[x.0].data();
                        let dx = accumulate(&mut adj[x.0], xv.len());
                        for ((s, d), v) in dx.iter_mut().zip(&dy).zip(xv) {
                            if *v > 0.0 {
                                *s += d;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if needed[x.0] {
                        let yv = self.values[i].data();
                        let dx = accumulate(&mut adj[x.0], yv.len());
                        for ((s, d), y) in dx.iter_mut().zip(&dy).zip(yv) {
                            *s += d * (1.0 - y * y);
                        }
                    }
                }
                Op::Conv1d { x, weight, width } => {
                    let xt = &self.values[x.0];
                    let w = self.values[weight.0].data();
                    let d = xt.shape()[1];
                    let span = width * d;
                    let filters = self.values[weight.0].shape()[0];
                    let xd = xt.data();
                    let steps = dy.len() / filters;
                    if needed[weight.0] {
                        let dw = accumulate(&mut adj[weight.0], w.len());
                        for t in 0..steps {
                            let window = &xd[t * d..t * d + span];
                            for k in 0..filters {
                                let g = dy[t * filters + k];
                                if g != 0.0 {
                                    let row = &mut dw[k * span..(k + 1) * span];
                                    row.iter_mut().zip(window).for_each(|(a, b)| *a += g * b);
                                }
                            }
                        }
                    }
                    if needed[x.0] {
                        let dx = accumulate(&mut adj[x.0], xd.len());
                        for t in 0..steps {
                            let window = &mut dx[t * d..t * d + span];
                            for k in 0..filters {
                                let g = dy[t * filters + k];
                                if g != 0.0 {
                                    let row = &w[k * span..(k + 1) * span];
                                    window.iter_mut().zip(row).for_each(|(a, b)| *a += g * b);
                                }
                            }
                        }
                    }
                }
                Op::MaxOverTime(x) => {
                    if needed[x.0] {
                        let Aux::Argmax(arg) = &self.aux[i] else {
                            unreachable!("max_over_time records its argmax")
                        };
                        let f = dy.len();
                        let dx = accumulate(&mut adj[x.0], self.values[x.0].len());
                        for (k, &t) in arg.iter().enumerate() {
                            dx[t * f + k] += dy[k];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.values[p.0].len();
                        if needed[p.0] {
                            let dp = accumulate(&mut adj[p.0], len);
                            dp.iter_mut()
                                .zip(&dy[offset..offset + len])
                                .for_each(|(s, d)| *s += d);
                        }
                        offset += len;
                    }
                }
                Op::Dropout { x, .. } => {
                    if needed[x.0] {
                        let dx = accumulate(&mut adj[x.0], dy.len());
                        match &self.aux[i] {
                            Aux::Mask(mask) => {
                                for ((s, d), m) in dx.iter_mut().zip(&dy).zip(mask) {
                                    *s += d * m;
                                }
                            }
                            _ => dx.iter_mut().zip(&dy).for_each(|(s, d)| *s += d),
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    if needed[x.0] {
                        let y = self.values[i].data();
                        let total: f64 = dy.iter().sum();
                        let dx = accumulate(&mut adj[x.0], y.len());
                        for ((s, d), ly) in dx.iter_mut().zip(&dy).zip(y) {
                            *s += d - ly.exp() * total;
                        }
                    }
                }
            }
        }

        let input = if targets.input {
            let shape = self.values[0].shape().to_vec();
            let data = adj[0].take().unwrap_or_else(|| vec![0.0; self.values[0].len()]);
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite("input gradient".into()));
            }
            Some(t)
        } else {
            None
        };
        if let Some(grads) = &param_grads {
            if !grads.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite("parameter gradient".into()));
            }
        }
        Ok(Grads {
            input,
            params: param_grads,
        })
    }

    /// One row per class: `∂ log p(y | x) / ∂x`, each shaped like the input.
    pub fn input_jacobian(&self) -> Result<Vec<Tensor>> {
        let c = self.graph.classes;
        (0..c)
            .map(|y| {
                let mut seed = vec![0.0; c];
                seed[y] = 1.0;
                let g = self.backward(
                    &seed,
                    Targets {
                        input: true,
                        params: false,
                    },
                )?;
                Ok(g.input.expect("input gradient requested"))
            })
            .collect()
    }
}

/// Log-probability vector of length C.
pub fn forward(graph: &Graph, input: &Tensor, params: &ParamSet) -> Result<Tensor> {
    Ok(graph.trace(input, params)?.output().clone())
}

/// `∂ log p(y = output_index | x) / ∂x`, shaped like `input`.
pub fn grad_input(
    graph: &Graph,
    input: &Tensor,
    params: &ParamSet,
    output_index: usize,
) -> Result<Tensor> {
    let c = graph.num_classes();
    if output_index >= c {
        return Err(Error::ClassIndex {
            index: output_index,
            classes: c,
        });
    }
    let trace = graph.trace(input, params)?;
    let mut seed = vec![0.0; c];
    seed[output_index] = 1.0;
    let grads = trace.backward(
        &seed,
        Targets {
            input: true,
            params: false,
        },
    )?;
    Ok(grads.input.expect("input gradient requested"))
}

/// Gradient of the mean cross-entropy over `batch` with respect to every
/// parameter, evaluated in inference mode.
pub fn grad_params(
    graph: &Graph,
    batch: &[Tensor],
    labels: &[usize],
    params: &ParamSet,
) -> Result<ParamSet> {
    let (grads, _, _) = batch_loss_grad(graph, batch, labels, params, |_| None)?;
    Ok(grads)
}

/// Mean cross-entropy gradient and mean loss over a batch.
///
/// `rng_for` supplies a dropout RNG for the example at the given batch
/// position (or `None` for inference mode). Per-example gradients may be
/// computed in parallel; they are summed in batch order so the result does
/// not depend on scheduling.
pub(crate) fn batch_loss_grad<F>(
    graph: &Graph,
    batch: &[Tensor],
    labels: &[usize],
    params: &ParamSet,
    rng_for: F,
) -> Result<(ParamSet, f64, Vec<usize>)>
where
    F: Fn(usize) -> Option<rand_chacha::ChaCha8Rng> + Sync,
{
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if batch.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let c = graph.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::ClassIndex {
            index: bad,
            classes: c,
        });
    }
    let per_example: Vec<Result<(Vec<Tensor>, f64, usize)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let trace = match rng_for(i) {
                Some(mut rng) => graph.trace_train(&batch[i], params, &mut rng)?,
                None => graph.trace(&batch[i], params)?,
            };
            let logp = trace.output().data();
            let loss = crate::train::cross_entropy_value(logp[labels[i]]);
            let prediction = argmax(logp);
            let mut seed = vec![0.0; c];
            seed[labels[i]] = -1.0;
            let g = trace.backward(
                &seed,
                Targets {
                    input: false,
                    params: true,
                },
            )?;
            Ok((g.params.expect("param gradient requested"), loss, prediction))
        })
        .collect();

    let mut total = ParamSet::zeros_like(graph.param_decls());
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(batch.len());
    for r in per_example {
        let (g, l, p) = r?;
        total.accumulate(&g);
        loss += l;
        predictions.push(p);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((total, loss * scale, predictions))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
