//! Dense row-major matrices, named parameter storage, the differentiable
//! primitives used by the recurrent model, and a central-difference
//! gradient oracle.
//!
//! Everything is `f64`. The gradient checks downstream are only meaningful
//! in double precision.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {r} has {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A `len x 1` column.
    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self * x` for a plain vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        self.add_matvec_into(x, &mut out)?;
        Ok(out)
    }

    /// `out += self * x`
    pub fn add_matvec_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(Error::shape(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("x[{}] -> out[{}]", x.len(), out.len()),
            ));
        }
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, x);
        }
        Ok(())
    }

    /// `out += self^T * y`
    pub fn add_transpose_matvec_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        if y.len() != self.rows || out.len() != self.cols {
            return Err(Error::shape(
                "transpose matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("y[{}] -> out[{}]", y.len(), out.len()),
            ));
        }
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(row) {
                *o += yr * a;
            }
        }
        Ok(())
    }

    /// `self += a * b^T`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(Error::shape(
                "outer product",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", a.len(), b.len()),
            ));
        }
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols.max(1))) {
            if ar == 0.0 {
                continue;
            }
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "axpy",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += alpha * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn tanh(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// `ln sum exp(logits)`, stable for large magnitudes.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean of `-ln p[target]` over the positions whose mask is set.
pub fn cross_entropy_masked(
    probabilities: &[Vec<f64>],
    targets: &[usize],
    mask: &[bool],
) -> Result<f64> {
    if probabilities.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::shape(
            "cross_entropy_masked",
            format!("{} distributions", probabilities.len()),
            format!("{} targets / {} mask entries", targets.len(), mask.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, &t), &m) in probabilities.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let pt = *p.get(t).ok_or_else(|| {
            Error::Domain(format!(
                "target index {t} outside distribution of size {}",
                p.len()
            ))
        })?;
        total -= pt.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("mask selects no supervised positions".into()));
    }
    Ok(total / count as f64)
}

/// Handle for a parameter registered in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One matrix per registered parameter, addressed by [`ParamId`].
///
/// A store holds two tables of identical layout: values and gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTable(Vec<Matrix>);

impl ParamTable {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.0.iter_mut()
    }

    pub fn zeros_like(&self) -> ParamTable {
        ParamTable(
            self.0
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        )
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(|m| m.fill(0.0));
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(Matrix::squared_norm).sum()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|m| m.scale(alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }
}

impl Index<ParamId> for ParamTable {
    type Output = Matrix;

    fn index(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }
}

impl IndexMut<ParamId> for ParamTable {
    fn index_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.0[id.0]
    }
}

/// Named trainable parameters, each paired with a gradient buffer of the
/// same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    by_name: HashMap<String, ParamId>,
    values: ParamTable,
    grads: ParamTable,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Input(format!("parameter {name:?} registered twice")));
        }
        let id = ParamId(self.names.len());
        self.grads.0.push(Matrix::zeros(value.rows, value.cols));
        self.values.0.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id]
    }

    pub fn values(&self) -> &ParamTable {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut ParamTable {
        &mut self.values
    }

    pub fn grads(&self) -> &ParamTable {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut ParamTable {
        &mut self.grads
    }

    /// Split borrow: read values while accumulating into gradients.
    pub fn split_mut(&mut self) -> (&ParamTable, &mut ParamTable) {
        (&self.values, &mut self.grads)
    }

    /// Split borrow: update values from the current gradients.
    pub fn values_and_grads_mut(&mut self) -> (&mut ParamTable, &ParamTable) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }
}

/// Worst mismatch found for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat row-major index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .fold(None, |best: Option<&ParamCheck>, p| match best {
                Some(b) if b.max_relative_error >= p.max_relative_error => Some(b),
                _ => Some(p),
            })
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }
}

/// Denominator floor for the relative error. Entries whose gradients are
/// both below this magnitude are effectively compared in absolute terms
/// at `tolerance * RELATIVE_ERROR_FLOOR`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradients already stored in `store` against
/// central differences `(L(w+eps) - L(w-eps)) / 2eps` of `loss_fn`.
///
/// Every perturbed entry is restored bit-for-bit before returning.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    store: &mut ParameterStore,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Oracle(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let base = loss_fn(store)?;
    let again = loss_fn(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic ({base} then {again})"
        )));
    }

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + epsilon;
            let plus = loss_fn(store);
            store.value_mut(id).data_mut()[k] = original - epsilon;
            let minus = loss_fn(store);
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let analytic = store.grad(id).data()[k];
            let err = relative_error(analytic, numeric);
            if !err.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite comparison at {}[{k}]",
                    check.name
                )));
            }
            if err > check.max_relative_error || k == 0 {
                check.max_relative_error = err;
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        params,
    })
}
