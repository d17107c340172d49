//! Elementwise and linear-algebra primitives with backward rules.

use std::rc::Rc;
use std::sync::Arc;

use super::tape::{EdgeFn, Node};
use super::Tensor;
use crate::{Error, Result};

/// Record an op result. `edges` is aligned with `inputs`; closures for
/// untracked inputs are dropped. Panics if tracked inputs sit on different
/// tapes (a programming error, not a recoverable condition).
pub(crate) fn record(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    edges: Vec<EdgeFn>,
) -> Tensor {
    debug_assert_eq!(inputs.len(), edges.len());
    let tape = inputs.iter().find_map(|t| t.tape()).cloned();
    match tape {
        None => Tensor::from_vec(shape, data),
        Some(tape) => {
            for t in inputs {
                if let Some(tp) = t.tape() {
                    assert!(Rc::ptr_eq(tp, &tape), "operands recorded on different tapes");
                }
            }
            let node_edges = inputs
                .iter()
                .zip(edges)
                .filter_map(|(t, e)| t.node_id().map(|id| (id, e)))
                .collect();
            let id = tape.push(Node { len: data.len(), edges: node_edges });
            Tensor::tracked(shape, Arc::new(data), tape, id)
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(record(
            &[self, other],
            self.shape().to_vec(),
            data,
            vec![Box::new(|g: &[f64]| g.to_vec()), Box::new(|g: &[f64]| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(record(
            &[self, other],
            self.shape().to_vec(),
            data,
            vec![
                Box::new(|g: &[f64]| g.to_vec()),
                Box::new(|g: &[f64]| g.iter().map(|v| -v).collect()),
            ],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (da, db) = (self.data_arc(), other.data_arc());
        Ok(record(
            &[self, other],
            self.shape().to_vec(),
            data,
            vec![
                Box::new(move |g: &[f64]| g.iter().zip(db.iter()).map(|(g, b)| g * b).collect()),
                Box::new(move |g: &[f64]| g.iter().zip(da.iter()).map(|(g, a)| g * a).collect()),
            ],
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        record(
            &[self],
            self.shape().to_vec(),
            data,
            vec![Box::new(|g: &[f64]| g.iter().map(|v| -v).collect())],
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        record(&[self], self.shape().to_vec(), data, vec![Box::new(|g: &[f64]| g.to_vec())])
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        record(
            &[self],
            self.shape().to_vec(),
            data,
            vec![Box::new(move |g: &[f64]| g.iter().map(|v| v * c).collect())],
        )
    }

    /// c - self, elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| c - v).collect();
        record(
            &[self],
            self.shape().to_vec(),
            data,
            vec![Box::new(|g: &[f64]| g.iter().map(|v| -v).collect())],
        )
    }

    /// Multiply by a one-element tensor (the only supported broadcast).
    pub fn scale(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(Error::shape("scale: multiplier must be a one-element tensor"));
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|v| v * sv).collect();
        let xs = self.data_arc();
        Ok(record(
            &[self, s],
            self.shape().to_vec(),
            data,
            vec![
                Box::new(move |g: &[f64]| g.iter().map(|v| v * sv).collect()),
                Box::new(move |g: &[f64]| {
                    vec![g.iter().zip(xs.iter()).map(|(g, x)| g * x).sum()]
                }),
            ],
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let (da, db) = (self.data_arc(), other.data_arc());
        Ok(record(
            &[self, other],
            vec![m, n],
            out,
            vec![
                // dA = G * B^T
                Box::new(move |g: &[f64]| {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    ga
                }),
                // dB = A^T * G
                Box::new(move |g: &[f64]| {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    gb
                }),
            ],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose: expected rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(record(
            &[self],
            vec![n, m],
            out,
            vec![Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                gx
            })],
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Ok(record(
            &[self],
            shape,
            self.data().to_vec(),
            vec![Box::new(|g: &[f64]| g.to_vec())],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.len();
        let s = self.data().iter().sum();
        record(&[self], vec![1], vec![s], vec![Box::new(move |g: &[f64]| vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let s: f64 = self.data().iter().sum();
        record(
            &[self],
            vec![1],
            vec![s / n as f64],
            vec![Box::new(move |g: &[f64]| vec![g[0] / n as f64; n])],
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        let x = self.data_arc();
        record(
            &[self],
            self.shape().to_vec(),
            data,
            vec![Box::new(move |g: &[f64]| {
                g.iter().zip(x.iter()).map(|(g, &x)| g * df(x)).collect()
            })],
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, f64::exp)
    }

    pub fn relu(&self) -> Tensor {
        // subgradient at the kink is 0
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_val, gelu_grad)
    }

    /// Hard rounding forward (threshold at 0.5), identity gradient backward.
    pub fn round_ste(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        record(&[self], self.shape().to_vec(), data, vec![Box::new(|g: &[f64]| g.to_vec())])
    }

    /// Extract row i of a rank-2 tensor as a `[1, d]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::shape(format!("row {i} of {s:?}")));
        }
        let (m, d) = (s[0], s[1]);
        let data = self.data()[i * d..(i + 1) * d].to_vec();
        Ok(record(
            &[self],
            vec![1, d],
            data,
            vec![Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; m * d];
                gx[i * d..(i + 1) * d].copy_from_slice(g);
                gx
            })],
        ))
    }

    /// Extract element i of a rank-1 tensor as a scalar tensor.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 || i >= s[0] {
            return Err(Error::shape(format!("index {i} of {s:?}")));
        }
        let n = s[0];
        let data = vec![self.data()[i]];
        Ok(record(
            &[self],
            vec![1],
            data,
            vec![Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; n];
                gx[i] = g[0];
                gx
            })],
        ))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("softmax_rows: expected rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let y = Arc::new(out.clone());
        Ok(record(
            &[self],
            vec![m, n],
            out,
            vec![Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                gx
            })],
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
