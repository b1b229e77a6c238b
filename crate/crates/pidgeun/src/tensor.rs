//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Operations are recorded on an explicit [`Tape`]; calling [`Tape::backward`]
//! on a scalar root walks the tape in reverse and accumulates gradients into
//! a map keyed by parameter name. A tape is single-writer: one forward and
//! backward pass owns it exclusively. Distinct tapes over distinct data may
//! run in parallel.
//!
//! The engine is double precision throughout: the Chebyshev recursion and
//! long rollouts accumulate error in single precision.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul_at_into, matmul_bt_into, matmul_into};

/// Handle to a value on a tape (or a detached constant).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }
}

/// Named trainable value. Names must be unique within a model; gradient maps
/// and checkpoints are keyed by them.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let shape_len: usize = shape.iter().product();
        assert_eq!(shape_len, value.len(), "parameter data/shape mismatch");
        Parameter {
            name: name.into(),
            shape,
            value,
        }
    }

    /// Uniform init in ±sqrt(6/(fan_in+fan_out)).
    pub fn glorot(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let value: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Parameter::new(name, shape, value)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Parameter::new(name, shape, vec![0.0; n])
    }

    pub fn constant(name: impl Into<String>, shape: Vec<usize>, c: f64) -> Self {
        let n: usize = shape.iter().product();
        Parameter::new(name, shape, vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    ConstLeaf,
    ParamLeaf { name: String },
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    ScalarMul { a: usize, c: f64 },
    ScalarAdd { a: usize },
    Exp { a: usize },
    Sqrt { a: usize },
    Recip { a: usize },
    Square { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    ColMean { a: usize },
    RowSum { a: usize },
    ColSlice { a: usize, col: usize },
    ConcatCols { a: usize, b: usize },
    Reshape { a: usize },
    AddRowVec { a: usize, v: usize },
    MulRowVec { a: usize, v: usize },
    MulColVec { a: usize, v: usize },
    LeakyRelu { a: usize, epsilon: f64 },
    Prelu { a: usize, theta: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter name.
/// Parameters the root does not depend on are reported as zero.
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: HashMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(|v| v.as_slice())
    }

    pub fn get_or_zero(&self, param: &Parameter) -> Vec<f64> {
        self.by_name
            .get(&param.name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; param.len()])
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    /// Elementwise sum of two gradient maps (used for batch accumulation
    /// across windows; missing entries are zeros).
    pub fn merged_with(mut self, other: Gradients) -> Gradients {
        for (name, g) in other.by_name {
            self.by_name
                .entry(name)
                .and_modify(|acc| {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                })
                .or_insert(g);
        }
        self
    }
}

/// Records a forward computation; replays it in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    param_cache: HashMap<String, Tensor>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
            param_cache: HashMap::new(),
        }
    }

    /// A tape that rejects any non-finite intermediate value at creation.
    pub fn with_finite_check() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Tensor> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite value produced by {:?}",
                op
            )));
        }
        let rc = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: rc.clone(),
            needs_grad,
        });
        Ok(Tensor {
            shape,
            data: rc,
            node: Some(id),
        })
    }

    fn node_needs_grad(&self, t: &Tensor) -> bool {
        t.node.map(|id| self.nodes[id].needs_grad).unwrap_or(false)
    }

    fn id_of(&self, t: &Tensor) -> Result<usize> {
        t.node
            .ok_or_else(|| Error::argument("tensor is not bound to this tape"))
    }

    /// Constant input (no gradient).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::argument(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::argument("tensors have 1 to 3 axes"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite value in tensor input"));
        }
        self.push(Op::ConstLeaf, shape, data, false)
    }

    /// Trainable leaf: gradients accumulate under the parameter's name.
    /// Repeated requests for the same parameter on one tape reuse the same
    /// leaf (parameter values are frozen for the lifetime of a tape).
    pub fn param(&mut self, p: &Parameter) -> Result<Tensor> {
        if let Some(t) = self.param_cache.get(&p.name) {
            return Ok(t.clone());
        }
        if p.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite value in parameter {}",
                p.name
            )));
        }
        let t = self.push(
            Op::ParamLeaf {
                name: p.name.clone(),
            },
            p.shape.clone(),
            p.value.clone(),
            true,
        )?;
        self.param_cache.insert(p.name.clone(), t.clone());
        Ok(t)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], vec![1])
    }

    fn binary_elementwise(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::argument(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        let value: Vec<f64> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.node_needs_grad(a) || self.node_needs_grad(b);
        self.push(op(ia, ib), a.shape.clone(), value, ng)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x * y, |a, b| Op::Hadamard { a, b })
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Tensor> {
        let ia = self.id_of(a)?;
        let value: Vec<f64> = a.data.iter().map(|x| f(*x)).collect();
        let ng = self.node_needs_grad(a);
        self.push(op(ia), a.shape.clone(), value, ng)
    }

    pub fn scalar_mul(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| c * x, |a| Op::ScalarMul { a, c })
    }

    pub fn scalar_add(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| x + c, |a| Op::ScalarAdd { a })
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::exp, |a| Op::Exp { a })
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::sqrt, |a| Op::Sqrt { a })
    }

    pub fn recip(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| 1.0 / x, |a| Op::Recip { a })
    }

    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x * x, |a| Op::Square { a })
    }

    /// Standard LeakyReLU: `x` for `x ≥ 0`, `ε·x` otherwise.
    pub fn leaky_relu(&mut self, a: &Tensor, epsilon: f64) -> Result<Tensor> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::argument("leaky_relu epsilon must be in (0,1)"));
        }
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { epsilon * x },
            |a| Op::LeakyRelu { a, epsilon },
        )
    }

    /// PReLU with a learnable scalar slope: `x` for `x ≥ 0`, `θ·x` otherwise.
    /// Gradient flows to both the input and θ.
    pub fn prelu(&mut self, a: &Tensor, theta: &Tensor) -> Result<Tensor> {
        if theta.len() != 1 {
            return Err(Error::argument("prelu slope must be a scalar tensor"));
        }
        let (ia, it) = (self.id_of(a)?, self.id_of(theta)?);
        let th = theta.data[0];
        let value: Vec<f64> = a
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { th * x })
            .collect();
        let ng = self.node_needs_grad(a) || self.node_needs_grad(theta);
        self.push(Op::Prelu { a: ia, theta: it }, a.shape.clone(), value, ng)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::argument(format!(
                "matmul shape mismatch: {:?} · {:?}",
                a.shape, b.shape
            )));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        let mut value = vec![0.0; m * n];
        matmul_into(&mut value, &a.data, &b.data, m, k, n);
        let ng = self.node_needs_grad(a) || self.node_needs_grad(b);
        self.push(Op::Matmul { a: ia, b: ib }, vec![m, n], value, ng)
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.id_of(a)?;
        let s: f64 = a.data.iter().sum();
        let ng = self.node_needs_grad(a);
        self.push(Op::Sum { a: ia }, vec![1], vec![s], ng)
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::argument("mean of empty tensor"));
        }
        let ia = self.id_of(a)?;
        let s: f64 = a.data.iter().sum::<f64>() / a.len() as f64;
        let ng = self.node_needs_grad(a);
        self.push(Op::Mean { a: ia }, vec![1], vec![s], ng)
    }

    /// Column means of a 2-D tensor: `[m×n] → [1×n]`.
    pub fn col_mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(Error::argument("col_mean needs a 2-D tensor"));
        }
        let (m, n) = (a.rows(), a.cols());
        if m == 0 {
            return Err(Error::argument("col_mean of empty tensor"));
        }
        let ia = self.id_of(a)?;
        let mut value = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                value[j] += a.data[i * n + j];
            }
        }
        value.iter_mut().for_each(|v| *v /= m as f64);
        let ng = self.node_needs_grad(a);
        self.push(Op::ColMean { a: ia }, vec![1, n], value, ng)
    }

    /// Row sums of a 2-D tensor: `[m×n] → [m×1]`.
    pub fn row_sum(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(Error::argument("row_sum needs a 2-D tensor"));
        }
        let (m, n) = (a.rows(), a.cols());
        let ia = self.id_of(a)?;
        let value: Vec<f64> = (0..m)
            .map(|i| a.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        let ng = self.node_needs_grad(a);
        self.push(Op::RowSum { a: ia }, vec![m, 1], value, ng)
    }

    /// Extracts column `col` of a 2-D tensor as `[m×1]`.
    pub fn col_slice(&mut self, a: &Tensor, col: usize) -> Result<Tensor> {
        if a.shape.len() != 2 || col >= a.cols() {
            return Err(Error::argument("col_slice out of range"));
        }
        let (m, n) = (a.rows(), a.cols());
        let ia = self.id_of(a)?;
        let value: Vec<f64> = (0..m).map(|i| a.data[i * n + col]).collect();
        let ng = self.node_needs_grad(a);
        self.push(Op::ColSlice { a: ia, col }, vec![m, 1], value, ng)
    }

    /// Concatenates two 2-D tensors along the last axis.
    pub fn concat_last_axis(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.rows() != b.rows() {
            return Err(Error::argument(format!(
                "concat_last_axis shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (m, na, nb) = (a.rows(), a.cols(), b.cols());
        let (ia, ib) = (self.id_of(a)?, self.id_of(b)?);
        let mut value = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            value.extend_from_slice(&a.data[i * na..(i + 1) * na]);
            value.extend_from_slice(&b.data[i * nb..(i + 1) * nb]);
        }
        let ng = self.node_needs_grad(a) || self.node_needs_grad(b);
        self.push(Op::ConcatCols { a: ia, b: ib }, vec![m, na + nb], value, ng)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != a.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::argument(format!(
                "cannot reshape {:?} to {:?}",
                a.shape, shape
            )));
        }
        let ia = self.id_of(a)?;
        let ng = self.node_needs_grad(a);
        self.push(Op::Reshape { a: ia }, shape, a.data.as_ref().clone(), ng)
    }

    /// `[m×n] + [1×n]`, broadcast over rows.
    pub fn add_rowvec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.rowvec_op(a, v, |x, y| x + y, |a, v| Op::AddRowVec { a, v })
    }

    /// `[m×n] ⊙ [1×n]`, broadcast over rows.
    pub fn mul_rowvec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.rowvec_op(a, v, |x, y| x * y, |a, v| Op::MulRowVec { a, v })
    }

    fn rowvec_op(
        &mut self,
        a: &Tensor,
        v: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        if a.shape.len() != 2 || v.shape != [1, a.cols()] {
            return Err(Error::argument(format!(
                "row-vector broadcast mismatch: {:?} with {:?}",
                a.shape, v.shape
            )));
        }
        let (m, n) = (a.rows(), a.cols());
        let (ia, iv) = (self.id_of(a)?, self.id_of(v)?);
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                value.push(f(a.data[i * n + j], v.data[j]));
            }
        }
        let ng = self.node_needs_grad(a) || self.node_needs_grad(v);
        self.push(op(ia, iv), a.shape.clone(), value, ng)
    }

    /// `[m×n] ⊙ [m×1]`, broadcast over columns.
    pub fn mul_colvec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || v.shape != [a.rows(), 1] {
            return Err(Error::argument(format!(
                "column-vector broadcast mismatch: {:?} with {:?}",
                a.shape, v.shape
            )));
        }
        let (m, n) = (a.rows(), a.cols());
        let (ia, iv) = (self.id_of(a)?, self.id_of(v)?);
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                value.push(a.data[i * n + j] * v.data[i]);
            }
        }
        let ng = self.node_needs_grad(a) || self.node_needs_grad(v);
        self.push(Op::MulColVec { a: ia, v: iv }, a.shape.clone(), value, ng)
    }

    /// Row-wise maximum over a masked support, returned as a *constant*
    /// `[m×1]` tensor. Used to shift attention scores before exponentiation;
    /// softmax is invariant to the shift, so detaching it from the gradient
    /// is exact.
    pub fn row_max_masked_const(&mut self, a: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if a.shape != mask.shape || a.shape.len() != 2 {
            return Err(Error::argument("row_max_masked_const shape mismatch"));
        }
        let (m, n) = (a.rows(), a.cols());
        let mut value = vec![0.0; m];
        for i in 0..m {
            let mut best = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.data[i * n + j] != 0.0 {
                    best = best.max(a.data[i * n + j]);
                }
            }
            value[i] = if best.is_finite() { best } else { 0.0 };
        }
        self.leaf(value, vec![m, 1])
    }

    /// Reverse-mode sweep from a scalar root. The same tape can be swept
    /// multiple times; each call allocates fresh gradient buffers.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::argument("backward root must be scalar"));
        }
        let root_id = self.id_of(root)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_name = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::ParamLeaf { name } = &node.op {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                // Two leaves of the same parameter on one tape accumulate.
                by_name
                    .entry(name.clone())
                    .and_modify(|acc: &mut Vec<f64>| {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    })
                    .or_insert(g);
            }
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: impl Fn(&mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id].value.len()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        match &node.op {
            Op::ConstLeaf | Op::ParamLeaf { .. } => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Hadamard { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * va[i];
                    }
                });
            }
            Op::ScalarMul { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::ScalarAdd { a } => {
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Exp { a } => {
                let out = node.value.as_ref();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * out[i];
                    }
                });
            }
            Op::Sqrt { a } => {
                let out = node.value.as_ref();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * 0.5 / out[i];
                    }
                });
            }
            Op::Recip { a } => {
                let out = node.value.as_ref();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] -= g[i] * out[i] * out[i];
                    }
                });
            }
            Op::Square { a } => {
                let va = val(*a);
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += 2.0 * g[i] * va[i];
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let m = self.nodes[*a].shape[0];
                let k = self.nodes[*a].shape[1];
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(&mut ga, g, vb, m, n, k);
                    self.accumulate(grads, *a, |acc| {
                        for (x, y) in acc.iter_mut().zip(&ga) {
                            *x += y;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(&mut gb, va, g, m, k, n);
                    self.accumulate(grads, *b, |acc| {
                        for (x, y) in acc.iter_mut().zip(&gb) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accumulate(grads, *a, |acc| {
                    for x in acc.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Mean { a } => {
                let s = g[0] / self.nodes[*a].value.len() as f64;
                self.accumulate(grads, *a, |acc| {
                    for x in acc.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::ColMean { a } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                let inv = 1.0 / m as f64;
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::RowSum { a } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[i];
                        }
                    }
                });
            }
            Op::ColSlice { a, col } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                let col = *col;
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        acc[i * n + col] += g[i];
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let m = self.nodes[*a].shape[0];
                let na = self.nodes[*a].shape[1];
                let nb = self.nodes[*b].shape[1];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..na {
                            acc[i * na + j] += g[i * (na + nb) + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..m {
                        for j in 0..nb {
                            acc[i * nb + j] += g[i * (na + nb) + na + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::AddRowVec { a, v } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                self.accumulate(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *v, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::MulRowVec { a, v } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                let (va, vv) = (val(*a), val(*v));
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[i * n + j] * vv[j];
                        }
                    }
                });
                self.accumulate(grads, *v, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j] * va[i * n + j];
                        }
                    }
                });
            }
            Op::MulColVec { a, v } => {
                let m = self.nodes[*a].shape[0];
                let n = self.nodes[*a].shape[1];
                let (va, vv) = (val(*a), val(*v));
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[i * n + j] * vv[i];
                        }
                    }
                });
                self.accumulate(grads, *v, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[i] += g[i * n + j] * va[i * n + j];
                        }
                    }
                });
            }
            Op::LeakyRelu { a, epsilon } => {
                let va = val(*a);
                let eps = *epsilon;
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * if va[i] >= 0.0 { 1.0 } else { eps };
                    }
                });
            }
            Op::Prelu { a, theta } => {
                let va = val(*a);
                let th = val(*theta)[0];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * if va[i] >= 0.0 { 1.0 } else { th };
                    }
                });
                self.accumulate(grads, *theta, |acc| {
                    let mut s = 0.0;
                    for i in 0..va.len() {
                        if va[i] < 0.0 {
                            s += g[i] * va[i];
                        }
                    }
                    acc[0] += s;
                });
            }
        }
    }
}

/// Running statistics and hyperparameters of one batch-norm layer. The
/// learnable scale/shift live beside it as ordinary [`Parameter`]s.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn update(&mut self, batch: &BnBatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch statistics observed during one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward mode for layers whose behavior differs between training and
/// inference (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the row (node) dimension of `x: [N×D]`.
///
/// Train mode normalizes with batch statistics (biased variance) and returns
/// them so the caller can fold them into the running state; eval mode uses
/// the stored running statistics. Built from primitive tape ops, so the
/// backward pass needs no dedicated rule.
pub fn batch_norm(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BnState,
    mode: Mode,
) -> Result<(Tensor, Option<BnBatchStats>)> {
    if x.shape().len() != 2 {
        return Err(Error::argument("batch_norm input must be 2-D"));
    }
    let d = x.shape()[1];
    if gamma.shape() != [1, d] || beta.shape() != [1, d] {
        return Err(Error::argument("batch_norm scale/shift must be [1×D]"));
    }
    match mode {
        Mode::Train => {
            if x.shape()[0] < 2 {
                return Err(Error::argument(
                    "batch_norm in train mode needs at least 2 rows",
                ));
            }
            let mu = tape.col_mean(x)?;
            let neg_mu = tape.scalar_mul(&mu, -1.0)?;
            let centered = tape.add_rowvec(x, &neg_mu)?;
            let sq = tape.square(&centered)?;
            let var = tape.col_mean(&sq)?;
            let var_eps = tape.scalar_add(&var, state.eps)?;
            let std = tape.sqrt(&var_eps)?;
            let inv_std = tape.recip(&std)?;
            let xhat = tape.mul_rowvec(&centered, &inv_std)?;
            let scaled = tape.mul_rowvec(&xhat, gamma)?;
            let y = tape.add_rowvec(&scaled, beta)?;
            let stats = BnBatchStats {
                mean: mu.data().to_vec(),
                var: var.data().to_vec(),
            };
            Ok((y, Some(stats)))
        }
        Mode::Eval => {
            let neg_mean = tape.leaf(state.running_mean.iter().map(|v| -v).collect(), vec![1, d])?;
            let inv_std = tape.leaf(
                state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + state.eps).sqrt())
                    .collect(),
                vec![1, d],
            )?;
            let centered = tape.add_rowvec(x, &neg_mean)?;
            let xhat = tape.mul_rowvec(&centered, &inv_std)?;
            let scaled = tape.mul_rowvec(&xhat, gamma)?;
            let y = tape.add_rowvec(&scaled, beta)?;
            Ok((y, None))
        }
    }
}
