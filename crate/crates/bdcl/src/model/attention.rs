//! Single-head self-attention over the three modality tokens, followed by a
//! two-layer feed-forward with a smooth (SiLU) activation; both sub-layers
//! carry residual connections. No layer normalization: the inputs are already
//! unit-norm and omitting it keeps the gradients hand-derivable.

use crate::core::dot;
use crate::core::rng::SeededRng;

use super::Linear;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dim: usize,
}

/// Feed-forward hidden width relative to the token dimension.
pub const FF_MULT: usize = 4;

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached intermediates of one forward pass over a token sequence.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub tokens: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    pub ctx: Vec<Vec<f64>>,
    pub h1: Vec<Vec<f64>>,
    pub pre1: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

impl AttentionBlock {
    pub fn zeros(dim: usize) -> Self {
        AttentionBlock {
            wq: Linear::zeros(dim, dim),
            wk: Linear::zeros(dim, dim),
            wv: Linear::zeros(dim, dim),
            wo: Linear::zeros(dim, dim),
            ff1: Linear::zeros(FF_MULT * dim, dim),
            ff2: Linear::zeros(dim, FF_MULT * dim),
            dim,
        }
    }

    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        AttentionBlock {
            wq: Linear::init(dim, dim, rng),
            wk: Linear::init(dim, dim, rng),
            wv: Linear::init(dim, dim, rng),
            wo: Linear::init(dim, dim, rng),
            ff1: Linear::init(FF_MULT * dim, dim, rng),
            ff2: Linear::init(dim, FF_MULT * dim, rng),
            dim,
        }
    }

    /// Adds the identity to the attention output map (identity-plus-noise
    /// initialization).
    pub fn add_identity_to_output(&mut self) {
        for i in 0..self.dim {
            self.wo.w[i * self.dim + i] += 1.0;
        }
    }

    /// Zeroes the output-side maps so the block becomes an exact identity on
    /// its inputs (residuals carry the tokens through unchanged).
    pub fn make_passthrough(&mut self) {
        self.wo = Linear::zeros(self.dim, self.dim);
        self.ff2 = Linear::zeros(self.dim, FF_MULT * self.dim);
    }

    pub fn forward(&self, tokens: &[Vec<f64>]) -> AttentionCache {
        let n = tokens.len();
        let scale = 1.0 / (self.dim as f64).sqrt();
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| self.wq.forward(t)).collect();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| self.wk.forward(t)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| self.wv.forward(t)).collect();

        let mut attn = vec![vec![0.0; n]; n];
        for s in 0..n {
            let scores: Vec<f64> = (0..n).map(|t| dot(&q[s], &k[t]) * scale).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for t in 0..n {
                attn[s][t] = exps[t] / sum;
            }
        }

        let ctx: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let mut c = vec![0.0; self.dim];
                for t in 0..n {
                    for d in 0..self.dim {
                        c[d] += attn[s][t] * v[t][d];
                    }
                }
                c
            })
            .collect();

        let h1: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let o = self.wo.forward(&ctx[s]);
                tokens[s].iter().zip(&o).map(|(a, b)| a + b).collect()
            })
            .collect();

        let pre1: Vec<Vec<f64>> = h1.iter().map(|h| self.ff1.forward(h)).collect();
        let act: Vec<Vec<f64>> = pre1
            .iter()
            .map(|p| p.iter().map(|&x| silu(x)).collect())
            .collect();
        let out: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let f = self.ff2.forward(&act[s]);
                h1[s].iter().zip(&f).map(|(a, b)| a + b).collect()
            })
            .collect();

        AttentionCache {
            tokens: tokens.to_vec(),
            q,
            k,
            v,
            attn,
            ctx,
            h1,
            pre1,
            act,
            out,
        }
    }

    /// Reverse pass: given d(loss)/d(out) per token, accumulates parameter
    /// gradients into `grad` and returns d(loss)/d(tokens).
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &[Vec<f64>],
        grad: &mut AttentionBlock,
    ) -> Vec<Vec<f64>> {
        let n = cache.tokens.len();
        debug_assert_eq!(dout.len(), n);
        let scale = 1.0 / (self.dim as f64).sqrt();

        let mut dtokens = vec![vec![0.0; self.dim]; n];
        let mut dh1 = dout.to_vec();

        // feed-forward sub-layer (residual: dout flows into both branches)
        for s in 0..n {
            let dact = self.ff2.backward(&cache.act[s], &dout[s], &mut grad.ff2);
            let dpre1: Vec<f64> = dact
                .iter()
                .zip(&cache.pre1[s])
                .map(|(g, &x)| g * silu_derivative(x))
                .collect();
            let dh = self.ff1.backward(&cache.h1[s], &dpre1, &mut grad.ff1);
            for d in 0..self.dim {
                dh1[s][d] += dh[d];
            }
        }

        // attention sub-layer
        let mut dq = vec![vec![0.0; self.dim]; n];
        let mut dk = vec![vec![0.0; self.dim]; n];
        let mut dv = vec![vec![0.0; self.dim]; n];
        for s in 0..n {
            // residual into tokens
            for d in 0..self.dim {
                dtokens[s][d] += dh1[s][d];
            }
            let dctx = self.wo.backward(&cache.ctx[s], &dh1[s], &mut grad.wo);
            let dattn: Vec<f64> = (0..n).map(|t| dot(&dctx, &cache.v[t])).collect();
            for t in 0..n {
                for d in 0..self.dim {
                    dv[t][d] += cache.attn[s][t] * dctx[d];
                }
            }
            // softmax jacobian per row
            let inner: f64 = (0..n).map(|u| cache.attn[s][u] * dattn[u]).sum();
            for t in 0..n {
                let dscore = cache.attn[s][t] * (dattn[t] - inner);
                for d in 0..self.dim {
                    dq[s][d] += dscore * cache.k[t][d] * scale;
                    dk[t][d] += dscore * cache.q[s][d] * scale;
                }
            }
        }
        for s in 0..n {
            let dt_q = self.wq.backward(&cache.tokens[s], &dq[s], &mut grad.wq);
            let dt_k = self.wk.backward(&cache.tokens[s], &dk[s], &mut grad.wk);
            let dt_v = self.wv.backward(&cache.tokens[s], &dv[s], &mut grad.wv);
            for d in 0..self.dim {
                dtokens[s][d] += dt_q[d] + dt_k[d] + dt_v[d];
            }
        }
        dtokens
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.wq.w);
        out.extend_from_slice(&self.wq.b);
        out.extend_from_slice(&self.wk.w);
        out.extend_from_slice(&self.wk.b);
        out.extend_from_slice(&self.wv.w);
        out.extend_from_slice(&self.wv.b);
        out.extend_from_slice(&self.wo.w);
        out.extend_from_slice(&self.wo.b);
        out.extend_from_slice(&self.ff1.w);
        out.extend_from_slice(&self.ff1.b);
        out.extend_from_slice(&self.ff2.w);
        out.extend_from_slice(&self.ff2.b);
    }

    pub fn unflatten_from(&mut self, data: &[f64], cursor: &mut usize) {
        for layer in [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff1,
            &mut self.ff2,
        ] {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&data[*cursor..*cursor + nw]);
            *cursor += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&data[*cursor..*cursor + nb]);
            *cursor += nb;
        }
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
            + self.ff1.param_count()
            + self.ff2.param_count()
    }
}
