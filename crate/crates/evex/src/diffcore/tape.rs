//! Wengert tape: dense f64 tensors recorded during the forward pass and
//! replayed in reverse for gradients.
//!
//! Tensors are 0-, 1-, or 2-dimensional, row-major. Creation order is the
//! topological order, so one reverse sweep visits every operation exactly
//! once. Gradients accumulate: calling `backward` twice without a fresh tape
//! doubles them, which is the documented contract.

use crate::{Error, Result};

/// Probability floor used inside the cross-entropy ops so that a zero
/// probability at the gold index yields a large finite loss instead of inf.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Dense row-major f64 tensor with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRow { m: Var, v: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleRows { x: Var, factors: Vec<f64> },
    Sigmoid { x: Var },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    CrossEntropy { p: Var, gold: usize },
    BinaryCrossEntropy { p: Var, labels: Vec<f64> },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumRows { x: Var },
    RepeatRow { v: Var, rows: usize },
    Concat { parts: Vec<Var> },
    ConcatCols { a: Var, b: Var },
    GatherRows { table: Var, idx: Vec<usize> },
    Row { x: Var, i: usize },
    ColSlice { x: Var, start: usize, end: usize },
    StackRows { parts: Vec<Var> },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records the forward computation of one document and replays it backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{:?}", s)
}

fn gelu_fwd(x: f64) -> f64 {
    // exact x * Phi(x) with the standard normal CDF
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_bwd(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].tensor.numel(), 1);
        self.nodes[v.0].tensor.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// True if every stored value and gradient on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.tensor.data.iter().all(|x| x.is_finite())
                && n.tensor
                    .grad
                    .as_ref()
                    .map_or(true, |g| g.iter().all(|x| x.is_finite()))
        })
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.tensor(v);
        if t.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got shape {}", shape_str(&t.shape)),
            ));
        }
        Ok((t.rows(), t.cols()))
    }

    fn check_1d(&self, op: &'static str, v: Var) -> Result<usize> {
        let t = self.tensor(v);
        if t.shape.len() != 1 {
            return Err(Error::shape(
                op,
                format!("expected a vector, got shape {}", shape_str(&t.shape)),
            ));
        }
        Ok(t.shape[0])
    }

    // ---- leaves ------------------------------------------------------

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {} does not match {} values", shape_str(&shape), data.len()),
            ));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {} does not match {} values", shape_str(&shape), data.len()),
            ));
        }
        Ok(self.push(shape, data, true, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul", a)?;
        let (k2, n) = self.check_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {} x {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(b))
                ),
            ));
        }
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.check_2d("transpose", x)?;
        let d = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose { x }))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    /// Matrix plus a row vector broadcast over every row.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.check_2d("add_row", m)?;
        let n = self.check_1d("add_row", v)?;
        if n != c {
            return Err(Error::shape(
                "add_row",
                format!("{} vs {}", shape_str(self.shape(m)), shape_str(self.shape(v))),
            ));
        }
        let dm = &self.nodes[m.0].tensor.data;
        let dv = &self.nodes[v.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = dm[i * c + j] + dv[j];
            }
        }
        let rg = self.needs_grad(m) || self.needs_grad(v);
        Ok(self.push(vec![r, c], out, rg, Op::AddRow { m, v }))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].tensor.data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(x);
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    /// Scales each row of a matrix by a constant per-row factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.check_2d("scale_rows", x)?;
        if factors.len() != r {
            return Err(Error::shape(
                "scale_rows",
                format!("{} rows vs {} factors", r, factors.len()),
            ));
        }
        let d = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = d[i * c + j] * factors[i];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(vec![r, c], out, rg, Op::ScaleRows { x, factors }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0]
            .tensor
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(x);
        self.push(shape, out, rg, Op::Sigmoid { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].tensor.data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(x);
        self.push(shape, out, rg, Op::Gelu { x })
    }

    /// Softmax over the last axis: per row for matrices, over the whole
    /// vector for 1-D input.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.tensor(x);
        let (rows, cols) = match t.shape.len() {
            1 => (1, t.shape[0]),
            2 => (t.rows(), t.cols()),
            _ => {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("expected vector or matrix, got {}", shape_str(&t.shape)),
                ))
            }
        };
        if cols == 0 {
            return Err(Error::shape("softmax_rows", "empty axis".to_string()));
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_row(
                &t.data[i * cols..(i + 1) * cols],
                &mut out[i * cols..(i + 1) * cols],
            );
        }
        let shape = t.shape.clone();
        let rg = self.needs_grad(x);
        Ok(self.push(shape, out, rg, Op::SoftmaxRows { x }))
    }

    // ---- losses --------------------------------------------------------

    /// Negative log probability of the gold class. `p` is a probability
    /// vector; values at the gold index are floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, p: Var, gold: usize) -> Result<Var> {
        let n = self.check_1d("cross_entropy", p)?;
        if gold >= n {
            return Err(Error::index(
                "cross_entropy",
                format!("gold class {} out of range for {} classes", gold, n),
            ));
        }
        let d = &self.nodes[p.0].tensor.data;
        let sum: f64 = d.iter().sum();
        if sum.is_finite() && (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "cross_entropy input sums to {} (expected 1 within 1e-6)",
                sum
            )));
        }
        // non-finite probabilities must surface as a non-finite loss, not be
        // swallowed by the floor
        let pv = d[gold];
        let loss = if pv.is_finite() {
            -pv.max(PROB_FLOOR).ln()
        } else {
            f64::NAN
        };
        let rg = self.needs_grad(p);
        Ok(self.push(vec![], vec![loss], rg, Op::CrossEntropy { p, gold }))
    }

    /// Sum of elementwise Bernoulli cross-entropies between probabilities
    /// `p` and constant labels in [0,1].
    pub fn binary_cross_entropy(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let n = self.check_1d("binary_cross_entropy", p)?;
        if labels.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities vs {} labels", n, labels.len()),
            ));
        }
        let d = &self.nodes[p.0].tensor.data;
        let mut loss = 0.0;
        for (&pi, &y) in d.iter().zip(&labels) {
            if !pi.is_finite() {
                loss = f64::NAN;
                break;
            }
            loss -= y * pi.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - pi).max(PROB_FLOOR).ln();
        }
        let rg = self.needs_grad(p);
        Ok(self.push(vec![], vec![loss], rg, Op::BinaryCrossEntropy { p, labels }))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].tensor.data.iter().sum();
        let rg = self.needs_grad(x);
        self.push(vec![], vec![s], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.tensor(x).numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let s: f64 = self.nodes[x.0].tensor.data.iter().sum();
        let rg = self.needs_grad(x);
        Ok(self.push(vec![], vec![s / n as f64], rg, Op::MeanAll { x }))
    }

    /// Sum over axis 0: a (r, c) matrix reduces to a length-c vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.check_2d("sum_rows", x)?;
        let d = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(vec![c], out, rg, Op::SumRows { x }))
    }

    /// Mean over axis 0.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.check_2d("mean_rows", x)?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "zero rows".to_string()));
        }
        let s = self.sum_rows(x)?;
        Ok(self.scale(s, 1.0 / r as f64))
    }

    // ---- shape plumbing -------------------------------------------------

    /// Broadcast a vector to `rows` identical matrix rows.
    pub fn repeat_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        let c = self.check_1d("repeat_row", v)?;
        let d = &self.nodes[v.0].tensor.data;
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(d);
        }
        let rg = self.needs_grad(v);
        Ok(self.push(vec![rows, c], out, rg, Op::RepeatRow { v, rows }))
    }

    /// Concatenates 1-D tensors (scalars count as length-1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.tensor(p);
            if t.shape.len() > 1 {
                return Err(Error::shape(
                    "concat",
                    format!("expected vectors, got {}", shape_str(&t.shape)),
                ));
            }
            out.extend_from_slice(&t.data);
            rg |= t.requires_grad;
        }
        let len = out.len();
        Ok(self.push(vec![len], out, rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// Concatenates two matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.check_2d("concat_cols", a)?;
        let (rb, cb) = self.check_2d("concat_cols", b)?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![ra, ca + cb], out, rg, Op::ConcatCols { a, b }))
    }

    /// Selects rows from a matrix; indices may repeat. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.check_2d("gather_rows", table)?;
        for &i in idx {
            if i >= r {
                return Err(Error::index(
                    "gather_rows",
                    format!("row {} out of range for {} rows", i, r),
                ));
            }
        }
        let d = &self.nodes[table.0].tensor.data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(table);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            rg,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Extracts row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, c) = self.check_2d("row", x)?;
        if i >= r {
            return Err(Error::index("row", format!("row {} out of range for {} rows", i, r)));
        }
        let d = self.nodes[x.0].tensor.data[i * c..(i + 1) * c].to_vec();
        let rg = self.needs_grad(x);
        Ok(self.push(vec![c], d, rg, Op::Row { x, i }))
    }

    /// Column range [start, end) of a matrix.
    pub fn col_slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.check_2d("col_slice", x)?;
        if start >= end || end > c {
            return Err(Error::index(
                "col_slice",
                format!("columns {}..{} out of range for {} columns", start, end, c),
            ));
        }
        let d = &self.nodes[x.0].tensor.data;
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let rg = self.needs_grad(x);
        Ok(self.push(vec![r, w], out, rg, Op::ColSlice { x, start, end }))
    }

    /// Stacks equal-length vectors into a matrix, one row each.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows", "no parts".to_string()));
        }
        let c = self.check_1d("stack_rows", parts[0])?;
        let mut out = Vec::with_capacity(parts.len() * c);
        let mut rg = false;
        for &p in parts {
            let n = self.check_1d("stack_rows", p)?;
            if n != c {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row lengths disagree: {} vs {}", c, n),
                ));
            }
            out.extend_from_slice(&self.nodes[p.0].tensor.data);
            rg |= self.needs_grad(p);
        }
        Ok(self.push(
            vec![parts.len(), c],
            out,
            rg,
            Op::StackRows { parts: parts.to_vec() },
        ))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.tensor(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} to {}", shape_str(&t.shape), shape_str(&shape)),
            ));
        }
        let data = t.data.clone();
        let rg = t.requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Each call computes one full sweep
    /// and adds it into the `grad` buffers of every tensor with
    /// `requires_grad` on the loss path, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let g = match work[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(&mut work, i, &op, &g);
            let t = &mut self.nodes[i].tensor;
            let n = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; n]);
            for (dst, src) in buf.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn wbuf<'w>(&self, work: &'w mut [Option<Vec<f64>>], v: Var) -> &'w mut Vec<f64> {
        let n = self.nodes[v.0].tensor.numel();
        work[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(&self, work: &mut [Option<Vec<f64>>], node: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs_grad(*a) {
                    // dA = G . B^T
                    let db = &self.nodes[b.0].tensor.data;
                    let ga = self.wbuf(work, *a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.needs_grad(*b) {
                    // dB = A^T . G
                    let da = &self.nodes[a.0].tensor.data;
                    let gb = self.wbuf(work, *b);
                    for p in 0..k {
                        for i in 0..m {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if self.needs_grad(*x) {
                    let (c, r) = (self.shape(Var(node))[0], self.shape(Var(node))[1]);
                    let gx = self.wbuf(work, *x);
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] += g[i * r + j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs_grad(*v) {
                        let gv = self.wbuf(work, *v);
                        for (dst, src) in gv.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::AddRow { m, v } => {
                let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                if self.needs_grad(*m) {
                    let gm = self.wbuf(work, *m);
                    for (dst, src) in gm.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.needs_grad(*v) {
                    let gv = self.wbuf(work, *v);
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs_grad(*a) {
                    let db = &self.nodes[b.0].tensor.data;
                    let ga = self.wbuf(work, *a);
                    for ((dst, src), other) in ga.iter_mut().zip(g).zip(db) {
                        *dst += src * other;
                    }
                }
                if self.needs_grad(*b) {
                    let da = &self.nodes[a.0].tensor.data;
                    let gb = self.wbuf(work, *b);
                    for ((dst, src), other) in gb.iter_mut().zip(g).zip(da) {
                        *dst += src * other;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs_grad(*x) {
                    let c = *c;
                    let gx = self.wbuf(work, *x);
                    for (dst, src) in gx.iter_mut().zip(g) {
                        *dst += src * c;
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if self.needs_grad(*x) {
                    let c = self.shape(*x)[1];
                    let gx = self.wbuf(work, *x);
                    for (i, &f) in factors.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] * f;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs_grad(*x) {
                    let out = &self.nodes[node].tensor.data;
                    let gx = self.wbuf(work, *x);
                    for ((dst, src), y) in gx.iter_mut().zip(g).zip(out) {
                        *dst += src * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs_grad(*x) {
                    let xin = &self.nodes[x.0].tensor.data;
                    let gx = self.wbuf(work, *x);
                    for ((dst, src), xv) in gx.iter_mut().zip(g).zip(xin) {
                        *dst += src * gelu_bwd(*xv);
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs_grad(*x) {
                    let out = &self.nodes[node].tensor.data;
                    let shape = &self.nodes[node].tensor.shape;
                    let (rows, cols) = if shape.len() == 1 {
                        (1, shape[0])
                    } else {
                        (shape[0], shape[1])
                    };
                    let gx = self.wbuf(work, *x);
                    for i in 0..rows {
                        let p = &out[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[i * cols + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { p, gold } => {
                if self.needs_grad(*p) {
                    let pv = self.nodes[p.0].tensor.data[*gold];
                    let gold = *gold;
                    let gp = self.wbuf(work, *p);
                    if pv > PROB_FLOOR {
                        gp[gold] += g[0] * (-1.0 / pv);
                    }
                }
            }
            Op::BinaryCrossEntropy { p, labels } => {
                if self.needs_grad(*p) {
                    let pv = &self.nodes[p.0].tensor.data;
                    let gp = self.wbuf(work, *p);
                    for (i, (&pi, &y)) in pv.iter().zip(labels).enumerate() {
                        let mut d = 0.0;
                        if pi > PROB_FLOOR {
                            d -= y / pi;
                        }
                        if 1.0 - pi > PROB_FLOOR {
                            d += (1.0 - y) / (1.0 - pi);
                        }
                        gp[i] += g[0] * d;
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs_grad(*x) {
                    let gx = self.wbuf(work, *x);
                    for dst in gx.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.needs_grad(*x) {
                    let n = self.nodes[x.0].tensor.numel() as f64;
                    let gx = self.wbuf(work, *x);
                    for dst in gx.iter_mut() {
                        *dst += g[0] / n;
                    }
                }
            }
            Op::SumRows { x } => {
                if self.needs_grad(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gx = self.wbuf(work, *x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j];
                        }
                    }
                }
            }
            Op::RepeatRow { v, rows } => {
                if self.needs_grad(*v) {
                    let c = self.shape(*v)[0];
                    let rows = *rows;
                    let gv = self.wbuf(work, *v);
                    for i in 0..rows {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].tensor.numel();
                    if self.needs_grad(*p) {
                        let gp = self.wbuf(work, *p);
                        for j in 0..n {
                            gp[j] += g[offset + j];
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                if self.needs_grad(*a) {
                    let ga = self.wbuf(work, *a);
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let gb = self.wbuf(work, *b);
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.needs_grad(*table) {
                    let c = self.shape(*table)[1];
                    let gt = self.wbuf(work, *table);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Row { x, i } => {
                if self.needs_grad(*x) {
                    let c = self.shape(*x)[1];
                    let i = *i;
                    let gx = self.wbuf(work, *x);
                    for j in 0..c {
                        gx[i * c + j] += g[j];
                    }
                }
            }
            Op::ColSlice { x, start, end } => {
                if self.needs_grad(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let (start, end) = (*start, *end);
                    let w = end - start;
                    let gx = self.wbuf(work, *x);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::StackRows { parts } => {
                let c = self.nodes[parts[0].0].tensor.numel();
                for (k, p) in parts.iter().enumerate() {
                    if self.needs_grad(*p) {
                        let gp = self.wbuf(work, *p);
                        for j in 0..c {
                            gp[j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs_grad(*x) {
                    let gx = self.wbuf(work, *x);
                    for (dst, src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }
}
