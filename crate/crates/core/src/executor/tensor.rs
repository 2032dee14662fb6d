use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ExecError;
use crate::manifest::TensorShape;

/// Dense row-major f64 tensor with a resolved batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub batch: usize,
    /// Per-sample axes.
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(batch: usize, dims: Vec<usize>, values: Vec<f64>) -> Result<Self, ExecError> {
        let expected = batch * dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(ExecError::ShapeMismatch {
                layer: "tensor".into(),
                detail: format!("{} values for shape {batch}x{dims:?}", values.len()),
            });
        }
        Ok(Self {
            batch,
            dims,
            values,
        })
    }

    pub fn zeros(batch: usize, dims: Vec<usize>) -> Self {
        let n = batch * dims.iter().product::<usize>();
        Self {
            batch,
            dims,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::fixed(self.batch, self.dims.clone())
    }

    pub fn per_sample(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let n = self.per_sample();
        &self.values[b * n..(b + 1) * n]
    }

    /// Single-sample tensor holding row `b`.
    pub fn sample(&self, b: usize) -> Tensor {
        Tensor {
            batch: 1,
            dims: self.dims.clone(),
            values: self.row(b).to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor, ExecError> {
        let first = parts.first().ok_or_else(|| ExecError::ShapeMismatch {
            layer: "stack".into(),
            detail: "nothing to stack".into(),
        })?;
        let mut values = Vec::with_capacity(first.values.len() * parts.len());
        let mut batch = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(ExecError::ShapeMismatch {
                    layer: "stack".into(),
                    detail: format!("{:?} vs {:?}", p.dims, first.dims),
                });
            }
            batch += p.batch;
            values.extend_from_slice(&p.values);
        }
        Tensor::new(batch, first.dims.clone(), values)
    }

    /// One CSV row per batch entry, per-sample values flattened row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for b in 0..self.batch {
            let row: Vec<String> = self.row(b).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Reads the format written by [`Tensor::to_csv`]; `dims` gives the
    /// per-sample shape every row must fill exactly.
    pub fn from_csv(text: &str, dims: &[usize]) -> Result<Tensor, ExecError> {
        let per_sample: usize = dims.iter().product();
        let mut values = Vec::new();
        let mut batch = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ExecError::BadInput(format!("line {}: {e}", i + 1)))?;
            if row.len() != per_sample {
                return Err(ExecError::BadInput(format!(
                    "line {}: {} values, expected {per_sample}",
                    i + 1,
                    row.len()
                )));
            }
            values.extend(row);
            batch += 1;
        }
        if batch == 0 {
            return Err(ExecError::BadInput("no rows".into()));
        }
        Tensor::new(batch, dims.to_vec(), values)
    }
}
