//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every executed operation in an append-only list whose
//! order is a topological order of the computation DAG. [`Tape::backward`]
//! replays the list once, in reverse, accumulating gradients into every
//! tensor that requires them. One tape belongs to one training or inference
//! session; independent sessions share nothing.
//!
//! Parameter buffers are `Rc<RefCell<Vec<T>>>` so a model can re-leaf its
//! weights onto a fresh tape each step without copying, and an optimizer can
//! update them in place between tapes.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shared storage for one tensor's values.
pub type SharedBuf<T> = Rc<RefCell<Vec<T>>>;

pub fn shared_buf<T: Scalar>(data: Vec<T>) -> SharedBuf<T> {
    Rc::new(RefCell::new(data))
}

/// Backward rule for one recorded operation. Indices refer to tape slots.
enum Rule<T: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>> },
    Silu { a: usize },
    Gelu { a: usize },
    Rope { a: usize, positions: Vec<usize> },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    MaskFill { a: usize, allowed: Rc<Vec<bool>> },
    Dropout { a: usize, mask: Rc<Vec<bool>>, keep_scale: T },
}

struct Node<T: Scalar> {
    data: SharedBuf<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    rule: Rule<T>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

/// Append-only operation record for one session.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor on a tape.
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("data", &self.to_vec())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Scalar>(data: &[T]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value {v} at flat index {i}"
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                params: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, rule: Rule<T>) -> Tensor<T> {
        self.push_shared(shared_buf(data), shape, requires_grad, rule)
    }

    fn push_shared(
        &self,
        data: SharedBuf<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        rule: Rule<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(data.borrow().len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape: shape.clone(),
            requires_grad,
            grad: None,
            rule,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// New leaf tensor. Rejects empty shapes and non-finite values.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor<T>> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(Error::Dimension {
                op: "leaf",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        check_finite(&data)?;
        Ok(self.push(data, shape.to_vec(), requires_grad, Rule::Leaf))
    }

    /// Non-trainable leaf.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: T) -> Result<Tensor<T>> {
        self.leaf(vec![v], &[1], false)
    }

    /// Leaf backed by an external shared buffer, registered under `name`.
    /// Re-binding the same name returns the existing tensor so a weight
    /// appears on the tape once per session.
    pub fn param(
        &self,
        name: &str,
        buf: &SharedBuf<T>,
        shape: &[usize],
        trainable: bool,
    ) -> Tensor<T> {
        if let Some(id) = self.param_id(name) {
            let shape = self.inner.borrow().nodes[id].shape.clone();
            return Tensor {
                tape: self.clone(),
                id,
                shape,
            };
        }
        let t = self.push_shared(Rc::clone(buf), shape.to_vec(), trainable, Rule::Leaf);
        self.inner
            .borrow_mut()
            .params
            .push((name.to_string(), t.id));
        t
    }

    fn param_id(&self, name: &str) -> Option<usize> {
        self.inner
            .borrow()
            .params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    /// Gradient accumulated for a named parameter, if any.
    pub fn param_grad(&self, name: &str) -> Option<Vec<T>> {
        let id = self.param_id(name)?;
        self.inner.borrow().nodes[id].grad.clone()
    }

    /// Reverse pass from a scalar loss. Visits nodes in reverse append
    /// order, which is a reverse topological order of the DAG.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::Contract("loss lives on a different tape".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        inner.nodes[loss.id].grad = Some(vec![T::one()]);
        for id in (0..n).rev() {
            if inner.nodes[id].grad.is_none() {
                continue;
            }
            backward_node(&mut inner.nodes, id);
        }
        Ok(())
    }
}

/// Accumulate `delta` into the grad slot of node `id` (lazy zero-init).
/// Nodes with no trainable ancestry are skipped entirely.
fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: usize, delta: &[T]) {
    let node = &mut nodes[id];
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| vec![T::zero(); numel(&node.shape)]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += *d;
    }
}

fn backward_node<T: Scalar>(nodes: &mut [Node<T>], id: usize) {
    let upstream = nodes[id].grad.clone().expect("grad present");
    // Interior nodes never alias leaves, so reading input data while
    // accumulating into other slots is safe with split borrows below.
    match &nodes[id].rule {
        Rule::Leaf => {}
        Rule::Add { a, b } => {
            let (a, b) = (*a, *b);
            accumulate(nodes, a, &upstream);
            accumulate(nodes, b, &upstream);
        }
        Rule::AddRow { a, bias } => {
            let (a, bias) = (*a, *bias);
            let n = nodes[bias].shape[0];
            accumulate(nodes, a, &upstream);
            let mut db = vec![T::zero(); n];
            for (i, g) in upstream.iter().enumerate() {
                db[i % n] += *g;
            }
            accumulate(nodes, bias, &db);
        }
        Rule::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let av = nodes[a].data.borrow().clone();
            let bv = nodes[b].data.borrow().clone();
            let da: Vec<T> = upstream.iter().zip(&bv).map(|(g, x)| *g * *x).collect();
            let db: Vec<T> = upstream.iter().zip(&av).map(|(g, x)| *g * *x).collect();
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        Rule::Scale { a, factor } => {
            let (a, f) = (*a, *factor);
            let da: Vec<T> = upstream.iter().map(|g| *g * f).collect();
            accumulate(nodes, a, &da);
        }
        Rule::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let p = nodes[b].shape[1];
            let av = nodes[a].data.borrow().clone();
            let bv = nodes[b].data.borrow().clone();
            // dA = dC · Bᵀ
            let mut da = vec![T::zero(); m * k];
            for i in 0..m {
                for j in 0..k {
                    let mut s = T::zero();
                    for c in 0..p {
                        s += upstream[i * p + c] * bv[j * p + c];
                    }
                    da[i * k + j] = s;
                }
            }
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); k * p];
            for i in 0..k {
                for j in 0..p {
                    let mut s = T::zero();
                    for r in 0..m {
                        s += av[r * k + i] * upstream[r * p + j];
                    }
                    db[i * p + j] = s;
                }
            }
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        Rule::Transpose { a } => {
            let a = *a;
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            let mut da = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = upstream[j * m + i];
                }
            }
            accumulate(nodes, a, &da);
        }
        Rule::SliceCols { a, start } => {
            let (a, start) = (*a, *start);
            let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
            let width = nodes[id].shape[1];
            let mut da = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..width {
                    da[r * cols + start + c] = upstream[r * width + c];
                }
            }
            accumulate(nodes, a, &da);
        }
        Rule::ConcatCols { parts } => {
            let parts = parts.clone();
            let rows = nodes[id].shape[0];
            let total = nodes[id].shape[1];
            let mut offset = 0;
            for part in parts {
                let width = nodes[part].shape[1];
                let mut dp = vec![T::zero(); rows * width];
                for r in 0..rows {
                    for c in 0..width {
                        dp[r * width + c] = upstream[r * total + offset + c];
                    }
                }
                accumulate(nodes, part, &dp);
                offset += width;
            }
        }
        Rule::Sum { a } => {
            let a = *a;
            let da = vec![upstream[0]; numel(&nodes[a].shape)];
            accumulate(nodes, a, &da);
        }
        Rule::Mean { a } => {
            let a = *a;
            let n = numel(&nodes[a].shape);
            let g = upstream[0] / T::from_f64(n as f64);
            let da = vec![g; n];
            accumulate(nodes, a, &da);
        }
        Rule::SoftmaxRows { a } => {
            let a = *a;
            let y = nodes[id].data.borrow().clone();
            let cols = *nodes[id].shape.last().expect("rank >= 1");
            let rows = y.len() / cols;
            let mut da = vec![T::zero(); y.len()];
            for r in 0..rows {
                let row = &y[r * cols..(r + 1) * cols];
                let up = &upstream[r * cols..(r + 1) * cols];
                let dot: T = row.iter().zip(up).map(|(y, g)| *y * *g).sum();
                for c in 0..cols {
                    da[r * cols + c] = row[c] * (up[c] - dot);
                }
            }
            accumulate(nodes, a, &da);
        }
        Rule::LayerNorm { x, gain, bias, eps } => {
            let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
            let xv = nodes[x].data.borrow().clone();
            let gv = nodes[gain].data.borrow().clone();
            let cols = gv.len();
            let rows = xv.len() / cols;
            let inv_n = T::one() / T::from_f64(cols as f64);
            let mut dx = vec![T::zero(); xv.len()];
            let mut dg = vec![T::zero(); cols];
            let mut db = vec![T::zero(); cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let up = &upstream[r * cols..(r + 1) * cols];
                let mean: T = row.iter().copied().sum::<T>() * inv_n;
                let var: T = row
                    .iter()
                    .map(|v| (*v - mean) * (*v - mean))
                    .sum::<T>()
                    * inv_n;
                let inv_std = T::one() / (var + eps).sqrt();
                let xhat: Vec<T> = row.iter().map(|v| (*v - mean) * inv_std).collect();
                let dyh: Vec<T> = up.iter().zip(&gv).map(|(u, g)| *u * *g).collect();
                let mean_dyh: T = dyh.iter().copied().sum::<T>() * inv_n;
                let mean_dyh_xhat: T = dyh
                    .iter()
                    .zip(&xhat)
                    .map(|(d, h)| *d * *h)
                    .sum::<T>()
                    * inv_n;
                for c in 0..cols {
                    dx[r * cols + c] = inv_std * (dyh[c] - mean_dyh - xhat[c] * mean_dyh_xhat);
                    dg[c] += up[c] * xhat[c];
                    db[c] += up[c];
                }
            }
            accumulate(nodes, x, &dx);
            accumulate(nodes, gain, &dg);
            accumulate(nodes, bias, &db);
        }
        Rule::CrossEntropy { logits, targets } => {
            let logits = *logits;
            let targets = targets.clone();
            let vocab = nodes[logits].shape[1];
            let lv = nodes[logits].data.borrow().clone();
            let m = targets.iter().filter(|t| t.is_some()).count();
            let mut dl = vec![T::zero(); lv.len()];
            if m > 0 {
                let scale = upstream[0] / T::from_f64(m as f64);
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = target else { continue };
                    let row = &lv[r * vocab..(r + 1) * vocab];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let denom: T = row.iter().map(|v| (*v - max).exp()).sum();
                    for c in 0..vocab {
                        let p = (row[c] - max).exp() / denom;
                        let indicator = if c == *t { T::one() } else { T::zero() };
                        dl[r * vocab + c] = (p - indicator) * scale;
                    }
                }
            }
            accumulate(nodes, logits, &dl);
        }
        Rule::Silu { a } => {
            let a = *a;
            let xv = nodes[a].data.borrow().clone();
            let da: Vec<T> = xv
                .iter()
                .zip(&upstream)
                .map(|(x, g)| {
                    let s = T::one() / (T::one() + (-*x).exp());
                    *g * s * (T::one() + *x * (T::one() - s))
                })
                .collect();
            accumulate(nodes, a, &da);
        }
        Rule::Gelu { a } => {
            let a = *a;
            let xv = nodes[a].data.borrow().clone();
            let c = T::from_f64(SQRT_2_OVER_PI);
            let k = T::from_f64(GELU_CUBIC);
            let half = T::from_f64(0.5);
            let da: Vec<T> = xv
                .iter()
                .zip(&upstream)
                .map(|(x, g)| {
                    let x = *x;
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                    *g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                })
                .collect();
            accumulate(nodes, a, &da);
        }
        Rule::Rope { a, positions } => {
            let a = *a;
            let positions = positions.clone();
            let dim = nodes[id].shape[1];
            let mut da = vec![T::zero(); upstream.len()];
            for (r, &pos) in positions.iter().enumerate() {
                for pair in 0..dim / 2 {
                    let (sin, cos) = rope_angle::<T>(pos, pair, dim);
                    let g0 = upstream[r * dim + 2 * pair];
                    let g1 = upstream[r * dim + 2 * pair + 1];
                    // transpose of the forward rotation
                    da[r * dim + 2 * pair] = cos * g0 + sin * g1;
                    da[r * dim + 2 * pair + 1] = -sin * g0 + cos * g1;
                }
            }
            accumulate(nodes, a, &da);
        }
        Rule::EmbeddingLookup { table, ids } => {
            let table = *table;
            let ids = ids.clone();
            let dim = nodes[table].shape[1];
            let mut dt = vec![T::zero(); numel(&nodes[table].shape)];
            for (r, &tok) in ids.iter().enumerate() {
                for c in 0..dim {
                    dt[tok * dim + c] += upstream[r * dim + c];
                }
            }
            accumulate(nodes, table, &dt);
        }
        Rule::MaskFill { a, allowed } => {
            let a = *a;
            let allowed = Rc::clone(allowed);
            let da: Vec<T> = upstream
                .iter()
                .zip(allowed.iter())
                .map(|(g, &keep)| if keep { *g } else { T::zero() })
                .collect();
            accumulate(nodes, a, &da);
        }
        Rule::Dropout { a, mask, keep_scale } => {
            let (a, scale) = (*a, *keep_scale);
            let mask = Rc::clone(mask);
            let da: Vec<T> = upstream
                .iter()
                .zip(mask.iter())
                .map(|(g, &keep)| if keep { *g * scale } else { T::zero() })
                .collect();
            accumulate(nodes, a, &da);
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn rope_angle<T: Scalar>(pos: usize, pair: usize, dim: usize) -> (T, T) {
    let theta = (pos as f64) * (10_000f64).powf(-2.0 * pair as f64 / dim as f64);
    (T::from_f64(theta.sin()), T::from_f64(theta.cos()))
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.tape.inner.borrow().nodes[self.id].data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    fn same_tape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands on different tapes")))
        }
    }

    fn any_grad(&self, other: &Tensor<T>) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    /// Standard matrix product `[m×n]·[n×p] -> [m×p]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(rhs, "matmul")?;
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let a = self.to_vec();
        let b = rhs.to_vec();
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            for j in 0..k {
                let aij = a[i * k + j];
                if aij == T::zero() {
                    continue;
                }
                let brow = &b[j * p..(j + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aij * *bv;
                }
            }
        }
        Ok(self.tape.push(
            out,
            vec![m, p],
            self.any_grad(rhs),
            Rule::Matmul {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(rhs, "add")?;
        if self.shape != rhs.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .zip(rhs.to_vec().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.any_grad(rhs),
            Rule::Add {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    /// Broadcast a length-n vector over the rows of `[..×n]`.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(bias, "add_row")?;
        let n = *self.shape.last().unwrap_or(&0);
        if bias.shape.len() != 1 || bias.shape[0] != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let b = bias.to_vec();
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % n])
            .collect();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.any_grad(bias),
            Rule::AddRow {
                a: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(rhs, "mul")?;
        if self.shape != rhs.shape {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .zip(rhs.to_vec().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.any_grad(rhs),
            Rule::Mul {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out: Vec<T> = self.to_vec().iter().map(|v| *v * factor).collect();
        self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::Scale {
                a: self.id,
                factor,
            },
        )
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let a = self.to_vec();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(self.tape.push(
            out,
            vec![n, m],
            self.requires_grad(),
            Rule::Transpose { a: self.id },
        ))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || start + len > self.shape[1] || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let a = self.to_vec();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a[r * cols + start..r * cols + start + len]);
        }
        Ok(self.tape.push(
            out,
            vec![rows, len],
            self.requires_grad(),
            Rule::SliceCols {
                a: self.id,
                start,
            },
        ))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
        let rows = first.shape[0];
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat_cols")?;
            if p.shape.len() != 2 || p.shape[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[1];
        }
        let datas: Vec<Vec<T>> = parts.iter().map(Tensor::to_vec).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, data) in parts.iter().zip(&datas) {
                let w = p.shape[1];
                out.extend_from_slice(&data[r * w..(r + 1) * w]);
            }
        }
        let requires = parts.iter().any(Tensor::requires_grad);
        Ok(first.tape.push(
            out,
            vec![rows, total],
            requires,
            Rule::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.to_vec().iter().copied().sum();
        self.tape
            .push(vec![s], vec![1], self.requires_grad(), Rule::Sum { a: self.id })
    }

    pub fn mean(&self) -> Tensor<T> {
        let v = self.to_vec();
        let s: T = v.iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        self.tape
            .push(vec![m], vec![1], self.requires_grad(), Rule::Mean { a: self.id })
    }

    /// Row-wise softmax with per-row max subtraction. `-inf` entries are
    /// legal (masked positions); NaN input and fully masked rows are errors.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let cols = *self
            .shape
            .last()
            .ok_or_else(|| Error::Contract("softmax on rank-0 tensor".into()))?;
        let x = self.to_vec();
        let rows = x.len() / cols;
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            for v in row {
                if v.is_nan() {
                    return Err(Error::Numeric(format!("NaN in softmax input row {r}")));
                }
                if *v > max {
                    max = *v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Numeric(format!("softmax row {r} fully masked")));
            }
            let mut denom = T::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::SoftmaxRows { a: self.id },
        ))
    }

    /// Row-wise normalization over the last axis, then affine `gain⊙x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        self.same_tape(gain, "layer_norm")?;
        self.same_tape(bias, "layer_norm")?;
        if eps <= T::zero() {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let cols = *self
            .shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on rank-0 tensor".into()))?;
        if gain.shape != [cols] || bias.shape != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let x = self.to_vec();
        let g = gain.to_vec();
        let b = bias.to_vec();
        let rows = x.len() / cols;
        let inv_n = T::one() / T::from_f64(cols as f64);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean: T = row.iter().copied().sum::<T>() * inv_n;
            let var: T = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = g[c] * (row[c] - mean) * inv_std + b[c];
            }
        }
        let requires = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            requires,
            Rule::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-softmax.
    /// `None` targets are excluded from the mean; if every position is
    /// excluded the loss is exactly zero.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || self.shape[0] != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = self.shape[1];
        let x = self.to_vec();
        let mut total = T::zero();
        let mut m = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            if *t >= vocab {
                return Err(Error::Index(format!(
                    "cross_entropy target {t} at position {r} exceeds vocab {vocab}"
                )));
            }
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse: T = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[*t];
            m += 1;
        }
        let loss = if m == 0 {
            T::zero()
        } else {
            total / T::from_f64(m as f64)
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross_entropy produced {loss}")));
        }
        Ok(self.tape.push(
            vec![loss],
            vec![1],
            self.requires_grad(),
            Rule::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn silu(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .map(|x| *x / (T::one() + (-*x).exp()))
            .collect();
        self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::Silu { a: self.id },
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64(SQRT_2_OVER_PI);
        let k = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .map(|x| {
                let x = *x;
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            })
            .collect();
        self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::Gelu { a: self.id },
        )
    }

    /// Rotary position encoding over pairs of the last axis, one absolute
    /// position per row.
    pub fn rope(&self, positions: &[usize]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || self.shape[0] != positions.len() || !self.shape[1].is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "rope",
                lhs: self.shape.clone(),
                rhs: vec![positions.len()],
            });
        }
        let dim = self.shape[1];
        let x = self.to_vec();
        let mut out = vec![T::zero(); x.len()];
        for (r, &pos) in positions.iter().enumerate() {
            for pair in 0..dim / 2 {
                let (sin, cos) = rope_angle::<T>(pos, pair, dim);
                let x0 = x[r * dim + 2 * pair];
                let x1 = x[r * dim + 2 * pair + 1];
                out[r * dim + 2 * pair] = x0 * cos - x1 * sin;
                out[r * dim + 2 * pair + 1] = x0 * sin + x1 * cos;
            }
        }
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::Rope {
                a: self.id,
                positions: positions.to_vec(),
            },
        ))
    }

    /// Gather rows of `self` (a `[vocab×dim]` table) by token id.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: self.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, dim) = (self.shape[0], self.shape[1]);
        let table = self.to_vec();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &tok in ids {
            if tok >= vocab {
                return Err(Error::Index(format!(
                    "token id {tok} exceeds vocab size {vocab}"
                )));
            }
            out.extend_from_slice(&table[tok * dim..(tok + 1) * dim]);
        }
        Ok(self.tape.push(
            out,
            vec![ids.len(), dim],
            self.requires_grad(),
            Rule::EmbeddingLookup {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Keep entries where `allowed` is true, set the rest to `-inf`.
    pub fn mask_fill(&self, allowed: &[bool]) -> Result<Tensor<T>> {
        if allowed.len() != self.numel() {
            return Err(Error::Dimension {
                op: "mask_fill",
                lhs: self.shape.clone(),
                rhs: vec![allowed.len()],
            });
        }
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .zip(allowed)
            .map(|(v, &keep)| if keep { *v } else { T::neg_infinity() })
            .collect();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::MaskFill {
                a: self.id,
                allowed: Rc::new(allowed.to_vec()),
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..self.numel()).map(|_| rng.gen::<f64>() >= p).collect();
        let out: Vec<T> = self
            .to_vec()
            .iter()
            .zip(&mask)
            .map(|(v, &keep)| if keep { *v * keep_scale } else { T::zero() })
            .collect();
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            self.requires_grad(),
            Rule::Dropout {
                a: self.id,
                mask: Rc::new(mask),
                keep_scale,
            },
        ))
    }
}
