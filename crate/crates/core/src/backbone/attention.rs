//! Cross-attention from the content stream onto style tokens: a closed-form
//! reference path over dense matrices and the tensor module used in the U-Net.

use candle_core::{Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use nalgebra::DMatrix;

use crate::error::{ensure, Result};

/// Projection weights in `out x in` layout: `W_Q: d_h x d_h`, `W_K, W_V: d_h x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl CrossAttnWeights {
    pub fn hidden_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.w_k.ncols()
    }

    fn validate(&self) -> Result<()> {
        let dh = self.w_q.nrows();
        ensure!(self.w_q.ncols() == dh, Validation, "W_Q must be square, got {}x{}", dh, self.w_q.ncols());
        ensure!(
            self.w_k.nrows() == dh && self.w_v.nrows() == dh,
            Validation,
            "W_K/W_V must have {dh} rows"
        );
        ensure!(
            self.w_k.ncols() == self.w_v.ncols(),
            Validation,
            "W_K and W_V disagree on token dimension"
        );
        Ok(())
    }
}

/// Forward intermediates. Rows of `h` are query tokens, rows of `s` style tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnTrace {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub attn: DMatrix<f64>,
    pub out: DMatrix<f64>,
}

fn check_inputs(h: &DMatrix<f64>, s: &DMatrix<f64>, w: &CrossAttnWeights) -> Result<()> {
    w.validate()?;
    ensure!(
        h.ncols() == w.hidden_dim(),
        Validation,
        "h has width {}, W_Q expects {}",
        h.ncols(),
        w.hidden_dim()
    );
    ensure!(
        s.ncols() == w.token_dim(),
        Validation,
        "s has width {}, W_K expects {}",
        s.ncols(),
        w.token_dim()
    );
    ensure!(s.nrows() >= 1 && h.nrows() >= 1, Validation, "empty token set");
    Ok(())
}

fn row_softmax(t: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = t.clone();
    for mut row in a.row_iter_mut() {
        let m = row.max();
        row.apply(|x| *x = (*x - m).exp());
        let z = row.sum();
        row /= z;
    }
    a
}

pub fn cross_attention_trace(
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &CrossAttnWeights,
) -> Result<CrossAttnTrace> {
    check_inputs(h, s, w)?;
    let q = h * w.w_q.transpose();
    let k = s * w.w_k.transpose();
    let v = s * w.w_v.transpose();
    let scores = (&q * k.transpose()) / (w.hidden_dim() as f64).sqrt();
    let attn = row_softmax(&scores);
    let out = &attn * &v;
    Ok(CrossAttnTrace {
        q,
        k,
        v,
        scores,
        attn,
        out,
    })
}

pub fn cross_attention(h: &DMatrix<f64>, s: &DMatrix<f64>, w: &CrossAttnWeights) -> Result<DMatrix<f64>> {
    Ok(cross_attention_trace(h, s, w)?.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnGrads {
    /// Gradient reaching the content stream `h`.
    pub dh: DMatrix<f64>,
    /// Gradient reaching the style tokens `s`.
    pub ds: DMatrix<f64>,
}

/// Closed-form input gradients given the upstream gradient `g = dL/dO`.
///
/// Each attention row `a` contributes `J(a)^T (G V^T)_row` with
/// `J(a) = diag(a) - a a^T`; the query path then reaches `h` through `W_Q`
/// and the key path reaches `s` through `W_K`, while the value path reaches
/// `s` through `W_V^T A^T G`.
pub fn cross_attention_grads(
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &CrossAttnWeights,
    g: &DMatrix<f64>,
) -> Result<CrossAttnGrads> {
    let tr = cross_attention_trace(h, s, w)?;
    ensure!(
        g.shape() == tr.out.shape(),
        Validation,
        "upstream gradient {:?} does not match output {:?}",
        g.shape(),
        tr.out.shape()
    );
    let da = g * tr.v.transpose();
    let mut dt = DMatrix::zeros(da.nrows(), da.ncols());
    for i in 0..da.nrows() {
        let a = tr.attn.row(i).transpose();
        let jac = DMatrix::from_diagonal(&a) - &a * a.transpose();
        // J is symmetric, J^T = J
        let row = jac.transpose() * da.row(i).transpose();
        dt.set_row(i, &row.transpose());
    }
    let inv = 1.0 / (w.hidden_dim() as f64).sqrt();
    let dq = &dt * &tr.k * inv;
    let dk = dt.transpose() * &tr.q * inv;
    let dv = tr.attn.transpose() * g;
    Ok(CrossAttnGrads {
        dh: dq * &w.w_q,
        ds: dk * &w.w_k + dv * &w.w_v,
    })
}

/// Multi-head cross-attention over `(B, M, C)` queries and `(B, N, d)` tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Option<Linear>,
    heads: usize,
}

impl CrossAttention {
    pub fn new(channels: usize, token_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        ensure!(
            heads >= 1 && channels % heads == 0,
            Config,
            "{channels} channels not divisible into {heads} heads"
        );
        Ok(Self {
            to_q: candle_nn::linear_no_bias(channels, channels, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(token_dim, channels, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(token_dim, channels, vb.pp("to_v"))?,
            to_out: Some(candle_nn::linear(channels, channels, vb.pp("to_out"))?),
            heads,
        })
    }

    /// Bare projections with no output layer, matching [`cross_attention`]
    /// when `heads == 1`.
    pub fn from_weights(w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: usize) -> Result<Self> {
        let c = w_q.dim(0)?;
        ensure!(c % heads == 0, Config, "{c} channels not divisible into {heads} heads");
        Ok(Self {
            to_q: Linear::new(w_q, None),
            to_k: Linear::new(w_k, None),
            to_v: Linear::new(w_v, None),
            to_out: None,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, m, c) = x.dims3()?;
        let (bt, n, _) = tokens.dims3()?;
        ensure!(b == bt, Validation, "query batch {b} vs token batch {bt}");
        let hd = c / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * self.heads, len, hd))?)
        };
        let q = split(self.to_q.forward(x)?, m)?;
        let k = split(self.to_k.forward(tokens)?, n)?;
        let v = split(self.to_v.forward(tokens)?, n)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn
            .matmul(&v)?
            .reshape((b, self.heads, m, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, m, c))?;
        match &self.to_out {
            Some(l) => Ok(l.forward(&o)?),
            None => Ok(o),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEVICE;
    use candle_core::{DType, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn instance(m: usize, n: usize, dh: usize, d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, CrossAttnWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = CrossAttnWeights {
            w_q: rand_mat(dh, dh, &mut rng),
            w_k: rand_mat(dh, d, &mut rng),
            w_v: rand_mat(dh, d, &mut rng),
        };
        (rand_mat(m, dh, &mut rng), rand_mat(n, d, &mut rng), w)
    }

    fn to_tensor(m: &DMatrix<f64>) -> Tensor {
        let data: Vec<f64> = m.transpose().iter().copied().collect();
        Tensor::from_vec(data, (m.nrows(), m.ncols()), &DEVICE).unwrap()
    }

    fn from_tensor(t: &Tensor) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = t.to_vec2().unwrap();
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn single_token_attention_is_constant() {
        let (h, s, w) = instance(5, 1, 4, 3, 1);
        let tr = cross_attention_trace(&h, &s, &w).unwrap();
        assert!(tr.attn.iter().all(|&a| a == 1.0));
        for i in 0..5 {
            assert_eq!(tr.out.row(i), tr.v.row(0));
        }
        let other = cross_attention(&(h * 3.0), &s, &w).unwrap();
        assert!((other - tr.out).abs().max() < 1e-15);
    }

    #[test]
    fn zero_style_gives_zero_output() {
        let (h, s, w) = instance(3, 4, 4, 3, 2);
        let out = cross_attention(&h, &DMatrix::zeros(s.nrows(), s.ncols()), &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_line_reimplementation_agrees() {
        let (h, s, w) = instance(6, 5, 8, 7, 3);
        let out = cross_attention(&h, &s, &w).unwrap();
        let dh = 8;
        for i in 0..6 {
            let q: Vec<f64> = (0..dh).map(|r| (0..dh).map(|c| w.w_q[(r, c)] * h[(i, c)]).sum()).collect();
            let mut logits = vec![0.0; 5];
            let mut vals = vec![vec![0.0; dh]; 5];
            for j in 0..5 {
                let k: Vec<f64> = (0..dh).map(|r| (0..7).map(|c| w.w_k[(r, c)] * s[(j, c)]).sum()).collect();
                vals[j] = (0..dh).map(|r| (0..7).map(|c| w.w_v[(r, c)] * s[(j, c)]).sum()).collect();
                logits[j] = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for r in 0..dh {
                let o: f64 = (0..5).map(|j| logits[j].exp() / z * vals[j][r]).sum();
                assert!((o - out[(i, r)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (h, s, w) = instance(4, 3, 4, 5, 4);
        let g = cross_attention_grads(&h, &s, &w, &DMatrix::zeros(4, 4)).unwrap();
        assert!(g.dh.iter().chain(g.ds.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_style_gradient_is_value_path() {
        let (h, s, w) = instance(4, 1, 4, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = rand_mat(4, 4, &mut rng);
        let grads = cross_attention_grads(&h, &s, &w, &g).unwrap();
        let tr = cross_attention_trace(&h, &s, &w).unwrap();
        let expected = tr.attn.transpose() * &g * &w.w_v;
        // the softmax Jacobian vanishes, so only the value path survives
        assert!((&grads.ds - &expected).abs().max() < 1e-14);
        assert!(grads.dh.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn shape_errors() {
        let (h, s, w) = instance(4, 3, 4, 5, 6);
        assert!(cross_attention(&DMatrix::zeros(4, 3), &s, &w).is_err());
        assert!(cross_attention(&h, &DMatrix::zeros(3, 2), &w).is_err());
        assert!(cross_attention_grads(&h, &s, &w, &DMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn tensor_module_matches_dense_path_and_autodiff() {
        let (h, s, w) = instance(6, 4, 8, 5, 7);
        let hv = Var::from_tensor(&to_tensor(&h)).unwrap();
        let sv = Var::from_tensor(&to_tensor(&s)).unwrap();
        let attn = CrossAttention::from_weights(to_tensor(&w.w_q), to_tensor(&w.w_k), to_tensor(&w.w_v), 1).unwrap();
        let out = attn
            .forward(&hv.as_tensor().unsqueeze(0).unwrap(), &sv.as_tensor().unsqueeze(0).unwrap())
            .unwrap()
            .squeeze(0)
            .unwrap();
        assert_eq!(out.dtype(), DType::F64);
        let dense = cross_attention(&h, &s, &w).unwrap();
        assert!((from_tensor(&out) - &dense).abs().max() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = rand_mat(6, 8, &mut rng);
        let loss = (out * to_tensor(&g)).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = cross_attention_grads(&h, &s, &w, &g).unwrap();
        let dh = from_tensor(grads.get(hv.as_tensor()).unwrap());
        let ds = from_tensor(grads.get(sv.as_tensor()).unwrap());
        assert!((dh - analytic.dh).abs().max() < 1e-10);
        assert!((ds - analytic.ds).abs().max() < 1e-10);
    }
}
