//! Identification data and the FIR regression form `Y = G theta + E`.
//!
//! Inputs are taken to be zero before the first sample, so every `G_k` is
//! exactly Toeplitz: `G_k[t][a] = u_k[t - a]` (0-based), zero for `t < a`.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output samples plus the `m` input sequences that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    inputs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        if y.is_empty() || inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for u in &inputs {
            if u.len() != y.len() {
                return Err(Error::Dimension { expected: y.len(), got: u.len() });
            }
        }
        Ok(Self { y, inputs })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.inputs.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k]
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Sample variance of the output (denominator `n - 1`, or `n` when n = 1).
    pub fn output_variance(&self) -> f64 {
        sample_variance(&self.y)
    }

    /// CSV with header `y,u1,..,um`, one row per sample.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.m()).map(|k| format!("u{k}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.m() + 1);
        for t in 0..self.n() {
            row.clear();
            row.push(self.y[t].to_string());
            row.extend(self.inputs.iter().map(|u| u[t].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0).map(str::trim) != Some("y") {
            return Err(Error::Format("first column must be `y`".into()));
        }
        for (k, name) in header.iter().enumerate().skip(1) {
            if name.trim() != format!("u{k}") {
                return Err(Error::Format(format!("column {} must be `u{k}`, found `{name}`", k + 1)));
            }
        }
        let m = header.len() - 1;
        let mut y = Vec::new();
        let mut inputs = vec![Vec::new(); m];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != m + 1 {
                return Err(Error::Format(format!("row {} has {} fields, expected {}", line + 2, rec.len(), m + 1)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {}: {e}", line + 2)))
            };
            y.push(parse(&rec[0])?);
            for k in 0..m {
                inputs[k].push(parse(&rec[k + 1])?);
            }
        }
        Dataset::new(y, inputs)
    }
}

pub(crate) fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    ss / (n - 1.0).max(1.0)
}

/// Stacked impulse-response coefficients `[theta_1' .. theta_m']'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    m: usize,
    p: usize,
    values: Vec<f64>,
}

impl CoefficientVector {
    pub fn zeros(m: usize, p: usize) -> Self {
        Self { m, p, values: vec![0.0; m * p] }
    }

    pub fn from_flat(m: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * p {
            return Err(Error::Dimension { expected: m * p, got: values.len() });
        }
        Ok(Self { m, p, values })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let m = blocks.len();
        if m == 0 {
            return Err(Error::Domain("at least one block required".into()));
        }
        let p = blocks[0].len();
        let mut values = Vec::with_capacity(m * p);
        for b in blocks {
            if b.len() != p {
                return Err(Error::Dimension { expected: p, got: b.len() });
            }
            values.extend_from_slice(b);
        }
        Ok(Self { m, p, values })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.values[k * self.p..(k + 1) * self.p]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.p..(k + 1) * self.p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// The Toeplitz regressor bank `G = [G_1 .. G_m]`, held implicitly through
/// the dataset it was built from.
#[derive(Debug, Clone)]
pub struct RegressorBank {
    data: Dataset,
    p: usize,
}

impl RegressorBank {
    pub fn new(data: Dataset, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Domain("FIR order must be at least 1".into()));
        }
        if p > data.n() {
            warn!("FIR order {p} exceeds sample count {}", data.n());
        }
        Ok(Self { data, p })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.data.m()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn columns(&self) -> usize {
        self.m() * self.p
    }

    /// Materialize `G_k` (n x p).
    pub fn block(&self, k: usize) -> DMatrix<f64> {
        let u = self.data.input(k);
        DMatrix::from_fn(self.n(), self.p, |t, a| if t >= a { u[t - a] } else { 0.0 })
    }

    /// Materialize the full `n x mp` matrix. Refused above `max_entries`.
    pub fn to_dense(&self, max_entries: usize) -> Result<DMatrix<f64>> {
        let entries = self.n() * self.columns();
        if entries > max_entries {
            return Err(Error::SizeGuard(format!(
                "dense regressor would hold {entries} entries (limit {max_entries})"
            )));
        }
        let mut g = DMatrix::zeros(self.n(), self.columns());
        for k in 0..self.m() {
            g.columns_mut(k * self.p, self.p).copy_from(&self.block(k));
        }
        Ok(g)
    }

    /// `G theta` by direct truncated convolution.
    pub fn predict(&self, theta: &CoefficientVector) -> Result<Vec<f64>> {
        if theta.m() != self.m() || theta.p() != self.p {
            return Err(Error::Dimension { expected: self.columns(), got: theta.m() * theta.p() });
        }
        let n = self.n();
        let mut out = vec![0.0; n];
        for k in 0..self.m() {
            let u = self.data.input(k);
            let th = theta.block(k);
            for (t, o) in out.iter_mut().enumerate() {
                let taps = th.len().min(t + 1);
                let mut acc = 0.0;
                for a in 0..taps {
                    acc += th[a] * u[t - a];
                }
                *o += acc;
            }
        }
        Ok(out)
    }

    /// `Y - G theta`.
    pub fn residual(&self, theta: &CoefficientVector) -> Result<Vec<f64>> {
        let pred = self.predict(theta)?;
        Ok(self.data.y().iter().zip(pred).map(|(y, g)| y - g).collect())
    }

    /// `G_i' G_j` computed by lagged correlation. The first row and column
    /// are direct sums; the rest follows from
    /// `C[a+1][b+1] = C[a][b] - u_i[n-1-a] u_j[n-1-b]`.
    pub fn gram(&self, i: usize, j: usize) -> DMatrix<f64> {
        let ui = self.data.input(i);
        let uj = self.data.input(j);
        let n = self.n();
        let p = self.p;
        let lagged = |x: &[f64], y: &[f64], lag: usize| -> f64 {
            // sum_{t >= lag} x[t - lag] y[t]
            if lag >= n {
                return 0.0;
            }
            x[..n - lag].iter().zip(&y[lag..]).map(|(a, b)| a * b).sum()
        };
        let mut c = DMatrix::zeros(p, p);
        for b in 0..p {
            // C[0][b] = sum_t u_i[t] u_j[t - b]
            c[(0, b)] = lagged(uj, ui, b);
        }
        for a in 1..p {
            c[(a, 0)] = lagged(ui, uj, a);
        }
        let tail = |x: &[f64], a: usize| if a < n { x[n - 1 - a] } else { 0.0 };
        let starts = (0..p).map(|b| (0, b)).chain((1..p).map(|a| (a, 0)));
        for (mut a, mut b) in starts {
            while a + 1 < p && b + 1 < p {
                c[(a + 1, b + 1)] = c[(a, b)] - tail(ui, a) * tail(uj, b);
                a += 1;
                b += 1;
            }
        }
        c
    }

    /// `G_k' Y`.
    pub fn gty(&self, k: usize) -> DVector<f64> {
        let u = self.data.input(k);
        let y = self.data.y();
        let n = self.n();
        DVector::from_fn(self.p, |a, _| {
            if a >= n {
                0.0
            } else {
                u[..n - a].iter().zip(&y[a..]).map(|(x, y)| x * y).sum()
            }
        })
    }
}

/// Cached `{G_i' G_j}` for `i <= j`, `{G_k' Y}` and `Y'Y`, so that no
/// conditional update needs another pass over the samples.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    m: usize,
    p: usize,
    n: usize,
    grams: Vec<DMatrix<f64>>,
    gty: Vec<DVector<f64>>,
    yty: f64,
}

impl CrossProducts {
    pub fn compute(bank: &RegressorBank) -> Self {
        let m = bank.m();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
        let grams = pairs.par_iter().map(|&(i, j)| bank.gram(i, j)).collect();
        let gty = (0..m).into_par_iter().map(|k| bank.gty(k)).collect();
        let yty = bank.data().y().iter().map(|y| y * y).sum();
        Self { m, p: bank.p(), n: bank.n(), grams, gty, yty }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j);
        i * (2 * self.m - i + 1) / 2 + (j - i)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    pub fn gty(&self, k: usize) -> &DVector<f64> {
        &self.gty[k]
    }

    /// Owned copy of `G_i' G_j`.
    pub fn gram(&self, i: usize, j: usize) -> DMatrix<f64> {
        if i <= j {
            self.grams[self.index(i, j)].clone()
        } else {
            self.grams[self.index(j, i)].transpose()
        }
    }

    /// `out += scale * (G_i' G_j) v`.
    pub fn gram_mul_add(&self, i: usize, j: usize, v: &[f64], scale: f64, out: &mut [f64]) {
        let p = self.p;
        if i <= j {
            let c = &self.grams[self.index(i, j)];
            for (b, &vb) in v.iter().enumerate() {
                let s = scale * vb;
                if s == 0.0 {
                    continue;
                }
                let col = c.column(b);
                for a in 0..p {
                    out[a] += col[a] * s;
                }
            }
        } else {
            let c = &self.grams[self.index(j, i)];
            for (a, o) in out.iter_mut().enumerate() {
                let col = c.column(a);
                let mut acc = 0.0;
                for b in 0..p {
                    acc += col[b] * v[b];
                }
                *o += scale * acc;
            }
        }
    }

    /// `||Y - G theta||^2 = Y'Y - 2 theta'G'Y + theta'G'G theta`, clamped at 0.
    pub fn residual_sum_of_squares(&self, theta: &CoefficientVector) -> f64 {
        let p = self.p;
        let mut cross = 0.0;
        let mut quad = 0.0;
        let mut buf = vec![0.0; p];
        for i in 0..self.m {
            let ti = theta.block(i);
            cross += self.gty[i].iter().zip(ti).map(|(g, t)| g * t).sum::<f64>();
            buf.iter_mut().for_each(|x| *x = 0.0);
            self.gram_mul_add(i, i, ti, 1.0, &mut buf);
            quad += ti.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
            for j in i + 1..self.m {
                buf.iter_mut().for_each(|x| *x = 0.0);
                self.gram_mul_add(i, j, theta.block(j), 1.0, &mut buf);
                quad += 2.0 * ti.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        (self.yty - 2.0 * cross + quad).max(0.0)
    }
}

/// Dataset, regressor bank and cached cross-products for one FIR order.
#[derive(Debug, Clone)]
pub struct Problem {
    bank: RegressorBank,
    products: CrossProducts,
}

impl Problem {
    pub fn new(data: Dataset, p: usize) -> Result<Self> {
        let bank = RegressorBank::new(data, p)?;
        let products = CrossProducts::compute(&bank);
        Ok(Self { bank, products })
    }

    pub fn bank(&self) -> &RegressorBank {
        &self.bank
    }

    pub fn products(&self) -> &CrossProducts {
        &self.products
    }

    pub fn data(&self) -> &Dataset {
        self.bank.data()
    }

    pub fn m(&self) -> usize {
        self.bank.m()
    }

    pub fn p(&self) -> usize {
        self.bank.p()
    }

    pub fn n(&self) -> usize {
        self.bank.n()
    }
}
