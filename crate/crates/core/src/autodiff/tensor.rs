//! Dense row-major tensors with optional gradient-tape participation.
//!
//! Every op validates shapes, refuses to produce non-finite values, and
//! records itself on the tape when any operand participates in gradients.
//! Tensors without a tape context are plain data and cost nothing extra,
//! so the same network code serves both training and inference.

use std::sync::Arc;

use super::tape::{Op, Tape, GATHER_PAD};
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    ctx: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, grad={}, values=[",
            self.shape,
            self.ctx.is_some()
        )?;
        for (i, v) in self.values.iter().take(8).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        if self.values.len() > 8 {
            write!(f, ", ...")?;
        }
        write!(f, "])")
    }
}

fn ensure_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Single shared tape across operands, or an error when two tapes mix.
fn unified_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.ctx {
            match &found {
                None => found = Some(tape.clone()),
                Some(existing) if existing.same_tape(tape) => {}
                Some(_) => {
                    return Err(Error::Tape(
                        "operands recorded on different tapes".into(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

/// Finalize an op result: finite check, tape recording, tensor assembly.
fn record(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op_name: &'static str,
    build: impl FnOnce() -> Op,
) -> Result<Tensor> {
    ensure_finite(&values, op_name)?;
    let ctx = match unified_tape(inputs)? {
        Some(tape) => {
            let id = tape.push(build())?;
            Some((tape, id))
        }
        None => None,
    };
    Ok(Tensor { shape, values, ctx })
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        ensure_finite(&values, "from_vec")?;
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            ctx: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![0.0; n]),
            ctx: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![v; n]),
            ctx: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        self.values.clone()
    }

    /// Scalar extraction; errors unless the tensor holds exactly one value.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::Dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.ctx.is_some()
    }

    pub(crate) fn ctx(&self) -> Option<(&Tape, usize)> {
        self.ctx.as_ref().map(|(t, id)| (t, *id))
    }

    fn parent(&self) -> Option<usize> {
        self.ctx.as_ref().map(|(_, id)| *id)
    }

    /// Register as a leaf on `tape`; the result participates in gradients.
    pub fn watch(&self, tape: &Tape) -> Result<Tensor> {
        let id = tape.push(Op::Leaf)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            ctx: Some((tape.clone(), id)),
        })
    }

    /// Same values, no gradient participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            ctx: None,
        }
    }

    /// Zero-cost reinterpretation of the flat buffer; keeps the tape node.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            values: self.values.clone(),
            ctx: self.ctx.clone(),
        })
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            s => Err(Error::Dim(format!("expected matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a + b)
            .collect();
        record(&[self, other], self.shape.clone(), Arc::new(values), "add", || {
            Op::Add {
                a: self.parent(),
                b: other.parent(),
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        record(&[self, other], self.shape.clone(), Arc::new(values), "sub", || {
            Op::Sub {
                a: self.parent(),
                b: other.parent(),
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .collect();
        record(&[self, other], self.shape.clone(), Arc::new(values), "mul", || {
            Op::Mul {
                a: self.parent(),
                av: self.values_arc(),
                b: other.parent(),
                bv: other.values_arc(),
            }
        })
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| scale * v + shift).collect();
        record(&[self], self.shape.clone(), Arc::new(values), "affine", || {
            Op::Affine {
                a: self.parent(),
                scale,
            }
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.affine(s, 0.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!("matmul: [{m},{k}] @ [{k2},{n}]")));
        }
        let values = super::raw::matmul(&self.values, &other.values, m, k, n);
        record(&[self, other], vec![m, n], Arc::new(values), "matmul", || {
            Op::Matmul {
                a: self.parent(),
                av: self.values_arc(),
                b: other.parent(),
                bv: other.values_arc(),
                m,
                k,
                n,
            }
        })
    }

    /// `[r,c] + [c]` row-broadcast (bias add).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if row.len() != c {
            return Err(Error::Dim(format!(
                "add_row: {c} columns vs row of {}",
                row.len()
            )));
        }
        let mut values = self.values.to_vec();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += row.values[j];
            }
        }
        record(&[self, row], self.shape.clone(), Arc::new(values), "add_row", || {
            Op::AddRow {
                a: self.parent(),
                b: row.parent(),
                rows: r,
                cols: c,
            }
        })
    }

    /// `[r,c] * [r]` column-broadcast (per-row scaling).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if col.len() != r {
            return Err(Error::Dim(format!(
                "mul_col: {r} rows vs column of {}",
                col.len()
            )));
        }
        let mut values = self.values.to_vec();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] *= col.values[i];
            }
        }
        record(&[self, col], self.shape.clone(), Arc::new(values), "mul_col", || {
            Op::MulCol {
                a: self.parent(),
                av: self.values_arc(),
                b: col.parent(),
                bv: col.values_arc(),
                rows: r,
                cols: c,
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| v.max(0.0)).collect();
        record(&[self], self.shape.clone(), Arc::new(values), "relu", || Op::Relu {
            a: self.parent(),
            av: self.values_arc(),
        })
    }

    pub fn abs(&self) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| v.abs()).collect();
        record(&[self], self.shape.clone(), Arc::new(values), "abs", || Op::Abs {
            a: self.parent(),
            av: self.values_arc(),
        })
    }

    /// `sqrt(max(x, 0))` with subgradient 0 at the origin, so exact zeros
    /// (identical descriptors, coincident points) stay exact.
    pub fn sqrt0(&self) -> Result<Tensor> {
        let out = Arc::new(
            self.values
                .iter()
                .map(|v| v.max(0.0).sqrt())
                .collect::<Vec<f64>>(),
        );
        record(&[self], self.shape.clone(), out.clone(), "sqrt0", || Op::SqrtZ {
            a: self.parent(),
            out,
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = Arc::new(self.values.iter().map(|v| v.exp()).collect::<Vec<f64>>());
        record(&[self], self.shape.clone(), out.clone(), "exp", || Op::Exp {
            a: self.parent(),
            out,
        })
    }

    pub fn recip(&self) -> Result<Tensor> {
        let out = Arc::new(self.values.iter().map(|v| 1.0 / v).collect::<Vec<f64>>());
        record(&[self], self.shape.clone(), out.clone(), "recip", || Op::Recip {
            a: self.parent(),
            out,
        })
    }

    pub fn sin(&self) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| v.sin()).collect();
        record(&[self], self.shape.clone(), Arc::new(values), "sin", || Op::Sin {
            a: self.parent(),
            av: self.values_arc(),
        })
    }

    pub fn cos(&self) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| v.cos()).collect();
        record(&[self], self.shape.clone(), Arc::new(values), "cos", || Op::Cos {
            a: self.parent(),
            av: self.values_arc(),
        })
    }

    /// Row-wise temperature softmax with max-subtraction stabilization.
    /// A 1-D tensor is treated as a single row.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (r, c) = self.dims2()?;
        if c == 0 {
            return Err(Error::Dim("softmax over empty row".into()));
        }
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.values[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = ((row[j] - m) / temperature).exp();
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        let out = Arc::new(values);
        record(&[self], self.shape.clone(), out.clone(), "softmax", || {
            Op::SoftmaxRows {
                a: self.parent(),
                out,
                rows: r,
                cols: c,
                temp: temperature,
            }
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.values.iter().sum();
        record(&[self], vec![1], Arc::new(vec![s]), "sum", || Op::Sum {
            a: self.parent(),
            len: self.values.len(),
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.values.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        self.sum()?.affine(1.0 / self.values.len() as f64, 0.0)
    }

    /// `[r,c] -> [r,1]` row sums.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let values: Vec<f64> = (0..r)
            .map(|i| self.values[i * c..(i + 1) * c].iter().sum())
            .collect();
        record(&[self], vec![r, 1], Arc::new(values), "row_sum", || Op::RowSum {
            a: self.parent(),
            rows: r,
            cols: c,
        })
    }

    /// Sum consecutive blocks of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn sum_groups(&self, group: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if group == 0 || r % group != 0 {
            return Err(Error::Dim(format!(
                "sum_groups: {r} rows not divisible by group {group}"
            )));
        }
        let g = r / group;
        let mut values = vec![0.0; g * c];
        for gi in 0..g {
            for k in 0..group {
                let base = (gi * group + k) * c;
                for j in 0..c {
                    values[gi * c + j] += self.values[base + j];
                }
            }
        }
        record(&[self], vec![g, c], Arc::new(values), "sum_groups", || {
            Op::SumGroups {
                a: self.parent(),
                groups: g,
                group,
                cols: c,
            }
        })
    }

    /// Flat-index gather. `GATHER_PAD` entries yield 0 and carry no gradient.
    pub fn gather(&self, idx: &[usize], shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != idx.len() {
            return Err(Error::Dim(format!(
                "gather: {} indices vs shape {:?}",
                idx.len(),
                shape
            )));
        }
        let mut values = vec![0.0; idx.len()];
        for (i, &src) in idx.iter().enumerate() {
            if src == GATHER_PAD {
                continue;
            }
            let v = self.values.get(src).ok_or_else(|| {
                Error::Dim(format!("gather index {src} out of range {}", self.len()))
            })?;
            values[i] = *v;
        }
        let idx = Arc::new(idx.to_vec());
        let in_len = self.values.len();
        record(&[self], shape, Arc::new(values), "gather", || Op::Gather {
            a: self.parent(),
            idx,
            in_len,
        })
    }

    /// Gather whole rows of a matrix: `[n,c]` + row indices -> `[m,c]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let mut idx = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            for j in 0..c {
                idx.push(if r == GATHER_PAD { GATHER_PAD } else { r * c + j });
            }
        }
        self.gather(&idx, vec![rows.len(), c])
    }

    /// Column concatenation of matrices sharing a row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (rows, _) = parts[0].dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::Dim(format!(
                    "concat_cols: row mismatch {rows} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &c) in parts.iter().zip(&widths) {
            for i in 0..rows {
                values[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&p.values[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let op_parts: Vec<(Option<usize>, usize)> = parts
            .iter()
            .zip(&widths)
            .map(|(p, &c)| (p.parent(), c))
            .collect();
        record(parts, vec![rows, total], Arc::new(values), "concat_cols", || {
            Op::ConcatCols {
                parts: op_parts,
                rows,
            }
        })
    }

    /// Bilinear sampling of a `[h,w]` plane at coordinates `(xs, ys)`.
    /// Out-of-bounds samples yield 0; differentiable in the plane and in
    /// both coordinate vectors inside the valid domain.
    pub fn bilinear2d(src: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        let (h, w) = src.dims2()?;
        if xs.len() != ys.len() {
            return Err(Error::Dim(format!(
                "bilinear2d: {} xs vs {} ys",
                xs.len(),
                ys.len()
            )));
        }
        let n = xs.len();
        let mut values = vec![0.0; n];
        for i in 0..n {
            if let Some(v) = super::raw::bilerp(&src.values, h, w, xs.values[i], ys.values[i]) {
                values[i] = v;
            }
        }
        record(&[src, xs, ys], vec![n], Arc::new(values), "bilinear2d", || {
            Op::Bilinear2d {
                src: src.parent(),
                sv: src.values_arc(),
                h,
                w,
                xs: xs.parent(),
                xv: xs.values_arc(),
                ys: ys.parent(),
                yv: ys.values_arc(),
            }
        })
    }

    /// Valid-region box sum over a `(2r+1)^2` window of a `[h,w]` plane.
    pub fn box_sum(&self, r: usize) -> Result<Tensor> {
        let (h, w) = self.dims2()?;
        if h < 2 * r + 1 || w < 2 * r + 1 {
            return Err(Error::Dim(format!(
                "box_sum: window {} exceeds [{h},{w}]",
                2 * r + 1
            )));
        }
        let values = super::raw::box_sum_valid(&self.values, h, w, r);
        record(
            &[self],
            vec![h - 2 * r, w - 2 * r],
            Arc::new(values),
            "box_sum",
            || Op::BoxSum {
                a: self.parent(),
                h,
                w,
                r,
            },
        )
    }
}
