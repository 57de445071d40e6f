//! Reference student: mean-pooled source context feeding a position-wise
//! decoder under teacher forcing.
//!
//! ```text
//! c    = mean(E[s] for s in src, s != PAD)
//! h_t  = tanh(W [c ; E[tgt_{t-1}]] + b)
//! row_t = U h_t + b_out
//! ```
//!
//! All parameters live in one flat vector laid out as `E | W | b | U | b_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::types::{TokenId, BOS, PAD};

pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Name and shape of one parameter block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelDims {
    pub fn new(vocab: usize, config: &RunConfig) -> Self {
        ModelDims { vocab, embed: config.embed_dim, hidden: config.hidden_dim }
    }

    pub fn blocks(&self) -> [Block; 5] {
        let (v, e, h) = (self.vocab, self.embed, self.hidden);
        [
            Block { name: "embedding", rows: v, cols: e },
            Block { name: "decoder_weight", rows: h, cols: 2 * e },
            Block { name: "decoder_bias", rows: h, cols: 1 },
            Block { name: "output_weight", rows: v, cols: h },
            Block { name: "output_bias", rows: v, cols: 1 },
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(Block::len).sum()
    }

    fn offsets(&self) -> Offsets {
        let (v, e, h) = (self.vocab, self.embed, self.hidden);
        let w = v * e;
        let b = w + h * 2 * e;
        let u = b + h;
        let b_out = u + v * h;
        Offsets { w, b, u, b_out }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w: usize,
    b: usize,
    u: usize,
    b_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams { dims, data: vec![0.0; dims.num_params()] }
    }

    pub fn from_flat(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.num_params() {
            return Err(Error::shape(format!("{} parameters", dims.num_params()), data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(ModelParams { dims, data })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        let e = self.dims.embed;
        &self.data[token as usize * e..(token as usize + 1) * e]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.dims.vocab) {
            Some(t) => Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.dims.vocab))),
            None => Ok(()),
        }
    }

    /// Mean embedding of the non-PAD source tokens.
    pub fn context(&self, src: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(src)?;
        let mut c = vec![0.0; self.dims.embed];
        let mut n = 0usize;
        for &s in src.iter().filter(|&&s| s != PAD) {
            axpy(1.0, self.embedding(s), &mut c);
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("source is empty after PAD exclusion"));
        }
        let inv = 1.0 / n as f64;
        c.iter_mut().for_each(|x| *x *= inv);
        Ok(c)
    }

    fn hidden(&self, context: &[f64], prev: TokenId) -> Vec<f64> {
        let (e, h) = (self.dims.embed, self.dims.hidden);
        let off = self.dims.offsets();
        let emb = self.embedding(prev);
        (0..h)
            .map(|j| {
                let row = &self.data[off.w + j * 2 * e..off.w + (j + 1) * 2 * e];
                let a = dot(&row[..e], context) + dot(&row[e..], emb) + self.data[off.b + j];
                a.tanh()
            })
            .collect()
    }

    fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let h = self.dims.hidden;
        let off = self.dims.offsets();
        (0..self.dims.vocab)
            .map(|k| dot(&self.data[off.u + k * h..off.u + (k + 1) * h], hidden) + self.data[off.b_out + k])
            .collect()
    }

    /// Next-token scores given a context and the previous token.
    pub fn step_logits(&self, context: &[f64], prev: TokenId) -> Vec<f64> {
        self.project(&self.hidden(context, prev))
    }

    /// Teacher-forced logits, one row per target position `1..tgt.len()`.
    pub fn forward(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<Matrix> {
        if tgt.first() != Some(&BOS) {
            return Err(Error::invalid("target must begin with BOS"));
        }
        self.check_ids(tgt)?;
        let c = self.context(src)?;
        let steps = tgt.len() - 1;
        let mut out = Matrix::zeros(steps, self.dims.vocab);
        for t in 0..steps {
            let row = self.step_logits(&c, tgt[t]);
            out.row_mut(t).copy_from_slice(&row);
        }
        Ok(out)
    }

    /// Gradient of `sum(upstream .* forward(src, tgt))` w.r.t. the flat
    /// parameter vector.
    pub fn backward(&self, src: &[TokenId], tgt: &[TokenId], upstream: &Matrix) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.data.len()];
        self.backward_into(src, tgt, upstream, &mut grad)?;
        Ok(grad)
    }

    /// As [`backward`](Self::backward), accumulating into `grad`.
    pub fn backward_into(
        &self,
        src: &[TokenId],
        tgt: &[TokenId],
        upstream: &Matrix,
        grad: &mut [f64],
    ) -> Result<()> {
        let (v, e, h) = (self.dims.vocab, self.dims.embed, self.dims.hidden);
        if tgt.is_empty() || upstream.shape() != (tgt.len() - 1, v) {
            return Err(Error::shape(
                format!("{}x{v}", tgt.len().saturating_sub(1)),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        if grad.len() != self.data.len() {
            return Err(Error::shape(self.data.len(), grad.len()));
        }
        if tgt[0] != BOS {
            return Err(Error::invalid("target must begin with BOS"));
        }
        self.check_ids(tgt)?;
        let c = self.context(src)?;
        let off = self.dims.offsets();
        let mut d_context = vec![0.0; e];
        let mut d_hidden = vec![0.0; h];

        for t in 0..tgt.len() - 1 {
            let up = upstream.row(t);
            if up.iter().all(|&g| g == 0.0) {
                continue;
            }
            let prev = tgt[t];
            let hid = self.hidden(&c, prev);

            d_hidden.iter_mut().for_each(|x| *x = 0.0);
            for (k, &g) in up.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, &hid, &mut grad[off.u + k * h..off.u + (k + 1) * h]);
                grad[off.b_out + k] += g;
                axpy(g, &self.data[off.u + k * h..off.u + (k + 1) * h], &mut d_hidden);
            }

            let emb = self.embedding(prev).to_vec();
            let mut d_emb = vec![0.0; e];
            for j in 0..h {
                let da = d_hidden[j] * (1.0 - hid[j] * hid[j]);
                if da == 0.0 {
                    continue;
                }
                let w_row = off.w + j * 2 * e;
                axpy(da, &c, &mut grad[w_row..w_row + e]);
                axpy(da, &emb, &mut grad[w_row + e..w_row + 2 * e]);
                grad[off.b + j] += da;
                axpy(da, &self.data[w_row..w_row + e], &mut d_context);
                axpy(da, &self.data[w_row + e..w_row + 2 * e], &mut d_emb);
            }
            let p = prev as usize;
            axpy(1.0, &d_emb, &mut grad[p * e..(p + 1) * e]);
        }

        let live: Vec<TokenId> = src.iter().copied().filter(|&s| s != PAD).collect();
        let inv = 1.0 / live.len() as f64;
        for s in live {
            let s = s as usize;
            axpy(inv, &d_context, &mut grad[s * e..(s + 1) * e]);
        }
        Ok(())
    }
}

/// Uniform `[-0.08, 0.08]` initialisation.
pub fn init_params<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> ModelParams {
    let data = (0..dims.num_params()).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect();
    ModelParams { dims, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn dims() -> ModelDims {
        ModelDims { vocab: 11, embed: 4, hidden: 5 }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(dims(), &mut seeded_rng(3));
        let b = init_params(dims(), &mut seeded_rng(3));
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|x| x.abs() <= INIT_SCALE));
        let cfg = RunConfig { embed_dim: 8, hidden_dim: 8, ..RunConfig::default() };
        assert_eq!(ModelDims::new(20, &cfg).blocks()[0].len(), 160);
    }

    #[test]
    fn single_token_context_is_embedding() {
        let p = init_params(dims(), &mut seeded_rng(1));
        assert_eq!(p.context(&[7]).unwrap(), p.embedding(7));
        assert_eq!(p.context(&[7, PAD, PAD]).unwrap(), p.embedding(7));
        assert!(p.context(&[PAD, PAD]).is_err());
    }

    #[test]
    fn source_order_does_not_matter() {
        let p = init_params(dims(), &mut seeded_rng(2));
        let tgt = [BOS, 5, 6, 2];
        let a = p.forward(&[4, 5, 9], &tgt).unwrap();
        let b = p.forward(&[9, 4, 5], &tgt).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::zeros(dims());
        let l = p.forward(&[4, 5], &[BOS, 6, 2]).unwrap();
        assert_eq!(l.shape(), (2, 11));
        assert!(l.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = ModelParams::zeros(dims());
        assert!(p.forward(&[4], &[6, 2]).is_err());
        assert!(p.forward(&[40], &[BOS, 2]).is_err());
        assert!(p.forward(&[PAD], &[BOS, 2]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = init_params(dims(), &mut seeded_rng(4));
        let g = p.backward(&[4, 5], &[BOS, 6, 2], &Matrix::zeros(2, 11)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(p.backward(&[4], &[BOS, 6], &Matrix::zeros(2, 11)).is_err());
    }

    #[test]
    fn unused_embeddings_get_no_gradient() {
        let p = init_params(dims(), &mut seeded_rng(4));
        let up = Matrix::from_vec(2, 11, (0..22).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let g = p.backward(&[4, 5], &[BOS, 6, 2], &up).unwrap();
        let e = dims().embed;
        // used: 4,5 (source), BOS and 6 (previous tokens); EOS=2 is only a gold token
        for tok in [0usize, 2, 3, 7, 8, 9, 10] {
            assert!(g[tok * e..(tok + 1) * e].iter().all(|&x| x == 0.0), "token {tok}");
        }
        for tok in [1usize, 4, 5, 6] {
            assert!(g[tok * e..(tok + 1) * e].iter().any(|&x| x != 0.0), "token {tok}");
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-5;
        let mut rng = seeded_rng(11);
        for trial in 0..5 {
            let mut p = init_params(dims(), &mut rng);
            // larger weights so tanh is not linear
            p.as_mut_slice().iter_mut().for_each(|x| *x *= 10.0);
            let src = [4, 5, 4, 8];
            let tgt = [BOS, 6, 7, 2];
            let up = Matrix::from_vec(3, 11, (0..33).map(|i| ((i + trial) as f64 * 0.71).cos()).collect())
                .unwrap();
            let analytic = p.backward(&src, &tgt, &up).unwrap();
            let objective = |q: &ModelParams| -> f64 {
                let l = q.forward(&src, &tgt).unwrap();
                dot(l.as_slice(), up.as_slice())
            };
            for i in 0..p.len() {
                let orig = p.as_slice()[i];
                p.as_mut_slice()[i] = orig + h;
                let fp = objective(&p);
                p.as_mut_slice()[i] = orig - h;
                let fm = objective(&p);
                p.as_mut_slice()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[i] - numeric).abs() / denom <= 1e-4,
                    "param {i}: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }
}
