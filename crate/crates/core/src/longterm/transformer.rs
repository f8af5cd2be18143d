//! Single pre-norm transformer encoder layer with learnable positional
//! embeddings, mean pooling and a linear class head.
//!
//! ```text
//! x0 = P(tokens) + pos            P = identity, or linear when input_dim ≠ d_model
//! x1 = x0 + MHA(LN1(x0))
//! x2 = x1 + FFN(LN2(x1))          FFN = W2 · gelu(W1 · h + b1) + b2
//! logits = Wc · mean_rows(x2) + bc
//! ```

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Token, Tokens};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::math::{
    affine, affine_backward, dot, gelu, gelu_grad, init_uniform, rng, softmax_in_place, Matrix,
};

const MAGIC: &[u8; 4] = b"SWLT";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Learned,
    /// Fixed at zero and never updated: the layer becomes permutation
    /// invariant.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    /// Width of incoming token vectors.
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub classes: usize,
    pub positional: Positional,
}

impl TransformerSpec {
    /// 768 dimensions, 12 heads, room for 8 interleaved KB pairs.
    pub fn paper(classes: usize) -> Self {
        Self {
            input_dim: 768,
            d_model: 768,
            heads: 12,
            ffn: 3072,
            max_len: 16,
            classes,
            positional: Positional::Learned,
        }
    }

    pub fn small(classes: usize) -> Self {
        Self {
            input_dim: 64,
            d_model: 64,
            heads: 4,
            ffn: 256,
            max_len: 16,
            classes,
            positional: Positional::Learned,
        }
    }

    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(classes)),
            "small" => Ok(Self::small(classes)),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected paper or small"))),
        }
    }

    /// Accepts tokens of width `input_dim`, adding a learned input
    /// projection when it differs from `d_model`.
    pub fn with_input_dim(mut self, input_dim: usize) -> Self {
        self.input_dim = input_dim;
        self
    }

    /// `d_model` equal to the incoming width, no projection.
    pub fn native(mut self, input_dim: usize) -> Self {
        let ratio = self.ffn / self.d_model.max(1);
        self.input_dim = input_dim;
        self.d_model = input_dim;
        self.ffn = (ratio * input_dim).max(1);
        while self.heads > 1 && !input_dim.is_multiple_of(self.heads) {
            self.heads -= 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_model == 0 || self.heads == 0 || self.ffn == 0 || self.max_len == 0 || self.classes == 0 {
            return Err(Error::invalid(format!("transformer dimensions must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide d_model = {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone)]
struct Layout {
    proj: Option<(Range<usize>, Range<usize>)>,
    pos: Range<usize>,
    null: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    bk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    wc: Range<usize>,
    bc: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(s: &TransformerSpec) -> Self {
        let d = s.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let proj = (s.input_dim != d).then(|| (take(d * s.input_dim), take(d)));
        let pos = take(s.max_len * d);
        let null = take(s.input_dim);
        let ln1_g = take(d);
        let ln1_b = take(d);
        let wq = take(d * d);
        let bq = take(d);
        let wk = take(d * d);
        let bk = take(d);
        let wv = take(d * d);
        let bv = take(d);
        let wo = take(d * d);
        let bo = take(d);
        let ln2_g = take(d);
        let ln2_b = take(d);
        let w1 = take(s.ffn * d);
        let b1 = take(s.ffn);
        let w2 = take(d * s.ffn);
        let b2 = take(d);
        let wc = take(s.classes * d);
        let bc = take(s.classes);
        Self {
            proj,
            pos,
            null,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            wc,
            bc,
            total: at,
        }
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat.row_mut(i)[j] = h;
            y.row_mut(i)[j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dg`, `db`.
fn layer_norm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &Matrix,
    dg: &mut [f64],
    db: &mut [f64],
) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn linear(w: &[f64], b: &[f64], x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), b.len());
    for i in 0..x.rows() {
        affine(w, b, x.row(i), out.row_mut(i));
    }
    out
}

fn linear_backward(w: &[f64], x: &Matrix, dy: &Matrix, dw: &mut [f64], db: &mut [f64]) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        affine_backward(w, x.row(i), dy.row(i), dw, db, Some(dx.row_mut(i)));
    }
    dx
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

struct Cache {
    raw: Matrix,
    null_rows: Vec<bool>,
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    o: Matrix,
    ln2: LnCache,
    h2: Matrix,
    u: Matrix,
    a: Matrix,
    pool: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    spec: TransformerSpec,
    params: Vec<f64>,
}

impl Transformer {
    pub fn new(spec: TransformerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let l = Layout::new(&spec);
        let d = spec.d_model;
        let mut p = vec![0.0; l.total];
        let mut r = rng(seed);
        if spec.positional == Positional::Learned {
            init_uniform(&mut r, &mut p[l.pos.clone()], d);
        }
        if let Some((w, _)) = &l.proj {
            init_uniform(&mut r, &mut p[w.clone()], spec.input_dim);
        }
        init_uniform(&mut r, &mut p[l.null.clone()], spec.input_dim);
        p[l.ln1_g.clone()].fill(1.0);
        p[l.ln2_g.clone()].fill(1.0);
        for w in [&l.wq, &l.wk, &l.wv, &l.wo] {
            init_uniform(&mut r, &mut p[w.clone()], d);
        }
        init_uniform(&mut r, &mut p[l.w1.clone()], d);
        init_uniform(&mut r, &mut p[l.w2.clone()], spec.ffn);
        init_uniform(&mut r, &mut p[l.wc.clone()], d);
        Ok(Self { spec, params: p })
    }

    pub fn from_params(spec: TransformerSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n = Layout::new(&spec).total;
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &TransformerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter indices that training must leave untouched.
    pub fn frozen_range(&self) -> Option<Range<usize>> {
        (self.spec.positional == Positional::Zero).then(|| Layout::new(&self.spec).pos)
    }

    /// Positional embedding rows, `max_len × d`.
    pub fn positional(&self) -> &[f64] {
        &self.params[Layout::new(&self.spec).pos]
    }

    /// Raw token rows (nulls substituted) and `x0`.
    fn embed(&self, l: &Layout, tokens: &Tokens) -> Result<(Matrix, Matrix, Vec<bool>)> {
        let d = self.spec.d_model;
        let din = self.spec.input_dim;
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.spec.max_len {
            return Err(Error::invalid(format!(
                "{} tokens exceed the positional capacity {}",
                tokens.len(),
                self.spec.max_len
            )));
        }
        let p = &self.params;
        let mut raw = Matrix::zeros(tokens.len(), din);
        let mut nulls = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let src = match t {
                Token::Vector(v) => {
                    if v.len() != din {
                        return Err(Error::DimensionMismatch {
                            expected: din,
                            actual: v.len(),
                        });
                    }
                    if !v.iter().all(|x| x.is_finite()) {
                        return Err(Error::invalid("token contains non-finite values"));
                    }
                    nulls.push(false);
                    &v[..]
                }
                Token::Null => {
                    nulls.push(true);
                    &p[l.null.clone()]
                }
            };
            raw.row_mut(i).copy_from_slice(src);
        }
        let mut x = match &l.proj {
            Some((w, b)) => linear(&p[w.clone()], &p[b.clone()], &raw),
            None => raw.clone(),
        };
        for i in 0..x.rows() {
            let pos = &p[l.pos.start + i * d..l.pos.start + (i + 1) * d];
            x.row_mut(i).iter_mut().zip(pos).for_each(|(o, q)| *o += q);
        }
        Ok((raw, x, nulls))
    }

    fn run(&self, tokens: &Tokens) -> Result<(Vec<f64>, Cache)> {
        let l = Layout::new(&self.spec);
        let p = &self.params;
        let (raw, x0, null_rows) = self.embed(&l, tokens)?;
        let n = x0.rows();
        let d = self.spec.d_model;
        let dh = self.spec.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, ln1) = layer_norm(&x0, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()]);
        let q = linear(&p[l.wq.clone()], &p[l.bq.clone()], &h1);
        let k = linear(&p[l.wk.clone()], &p[l.bk.clone()], &h1);
        let v = linear(&p[l.wv.clone()], &p[l.bv.clone()], &h1);
        let mut o = Matrix::zeros(n, d);
        let mut attn = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..n {
                    a.row_mut(i)[j] = scale * dot(qi, &k.row(j)[cols.clone()]);
                }
                softmax_in_place(a.row_mut(i));
                for j in 0..n {
                    let w = a.get(i, j);
                    for (oc, vc) in o.row_mut(i)[cols.clone()].iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *oc += w * vc;
                    }
                }
            }
            attn.push(a);
        }
        let x1 = add(&x0, &linear(&p[l.wo.clone()], &p[l.bo.clone()], &o));
        let (h2, ln2) = layer_norm(&x1, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()]);
        let u = linear(&p[l.w1.clone()], &p[l.b1.clone()], &h2);
        let a_data = u.as_slice().iter().map(|&z| gelu(z)).collect();
        let a = Matrix::from_vec(n, self.spec.ffn, a_data)?;
        let x2 = add(&x1, &linear(&p[l.w2.clone()], &p[l.b2.clone()], &a));
        let mut pool = vec![0.0; d];
        for row in x2.iter_rows() {
            for (s, v) in pool.iter_mut().zip(row) {
                *s += v;
            }
        }
        pool.iter_mut().for_each(|s| *s /= n as f64);
        let mut logits = vec![0.0; self.spec.classes];
        affine(&p[l.wc.clone()], &p[l.bc.clone()], &pool, &mut logits);
        Ok((
            logits,
            Cache {
                raw,
                null_rows,
                ln1,
                h1,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                h2,
                u,
                a,
                pool,
            },
        ))
    }

    pub fn logits(&self, tokens: &Tokens) -> Result<Vec<f64>> {
        Ok(self.run(tokens)?.0)
    }

    pub fn probs(&self, tokens: &Tokens) -> Result<Vec<f64>> {
        let mut z = self.logits(tokens)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Mean-pooled representation before the class head.
    pub fn pooled(&self, tokens: &Tokens) -> Result<Vec<f64>> {
        Ok(self.run(tokens)?.1.pool)
    }

    /// Attention maps, one `L × L` matrix per head.
    pub fn attention(&self, tokens: &Tokens) -> Result<Vec<Matrix>> {
        Ok(self.run(tokens)?.1.attn)
    }

    pub fn predict(&self, tokens: &Tokens) -> Result<usize> {
        Ok(crate::math::argmax(&self.logits(tokens)?))
    }

    /// Cross-entropy of one sequence and the gradient w.r.t. every parameter
    /// (accumulated into `grad`, scaled by `weight`).
    pub fn loss_and_grad_into(
        &self,
        tokens: &Tokens,
        label: usize,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let c = self.spec.classes;
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let (logits, cache) = self.run(tokens)?;
        let mut probs = logits;
        softmax_in_place(&mut probs);
        let loss = -probs[label].max(crate::segment_model::PROB_FLOOR).ln();
        let mut dz = probs;
        dz[label] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= weight);
        self.backward(&cache, &dz, grad);
        Ok(loss)
    }

    pub fn loss_and_grad(&self, tokens: &Tokens, label: usize) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.num_params()];
        let loss = self.loss_and_grad_into(tokens, label, 1.0, &mut g)?;
        Ok((loss, g))
    }

    fn backward(&self, c: &Cache, dz: &[f64], g: &mut [f64]) {
        let l = Layout::new(&self.spec);
        let p = &self.params;
        let n = c.h1.rows();
        let d = self.spec.d_model;
        let dh = self.spec.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dpool = vec![0.0; d];
        {
            let (gw, gb) = pair(g, &l.wc, &l.bc);
            affine_backward(&p[l.wc.clone()], &c.pool, dz, gw, gb, Some(&mut dpool));
        }
        let mut dx2 = Matrix::zeros(n, d);
        for i in 0..n {
            for (o, v) in dx2.row_mut(i).iter_mut().zip(&dpool) {
                *o = v / n as f64;
            }
        }

        // Feed-forward branch.
        let da = {
            let (gw, gb) = pair(g, &l.w2, &l.b2);
            linear_backward(&p[l.w2.clone()], &c.a, &dx2, gw, gb)
        };
        let du_data = da
            .as_slice()
            .iter()
            .zip(c.u.as_slice())
            .map(|(d, &z)| d * gelu_grad(z))
            .collect();
        let du = Matrix::from_vec(n, self.spec.ffn, du_data).expect("shape");
        let dh2 = {
            let (gw, gb) = pair(g, &l.w1, &l.b1);
            linear_backward(&p[l.w1.clone()], &c.h2, &du, gw, gb)
        };
        let dx1_ln = {
            let (gg, gb) = pair(g, &l.ln2_g, &l.ln2_b);
            layer_norm_backward(&c.ln2, &p[l.ln2_g.clone()], &dh2, gg, gb)
        };
        let dx1 = add(&dx2, &dx1_ln);

        // Attention branch.
        let d_o = {
            let (gw, gb) = pair(g, &l.wo, &l.bo);
            linear_backward(&p[l.wo.clone()], &c.o, &dx1, gw, gb)
        };
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut da_row = vec![0.0; n];
        for (h, a) in c.attn.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let doi = &d_o.row(i)[cols.clone()];
                for (j, da) in da_row.iter_mut().enumerate() {
                    *da = dot(doi, &c.v.row(j)[cols.clone()]);
                    let w = a.get(i, j);
                    for (dvc, g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                        *dvc += w * g;
                    }
                }
                let ai = a.row(i);
                let inner = dot(&da_row, ai);
                for j in 0..n {
                    let ds = ai[j] * (da_row[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for (dqc, kc) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&c.k.row(j)[cols.clone()]) {
                        *dqc += ds * kc;
                    }
                    for (dkc, qc) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&c.q.row(i)[cols.clone()]) {
                        *dkc += ds * qc;
                    }
                }
            }
        }
        let mut dh1 = Matrix::zeros(n, d);
        for (dy, w, b) in [(&dq, &l.wq, &l.bq), (&dk, &l.wk, &l.bk), (&dv, &l.wv, &l.bv)] {
            let (gw, gb) = pair(g, w, b);
            let part = linear_backward(&p[w.clone()], &c.h1, dy, gw, gb);
            dh1 = add(&dh1, &part);
        }
        let dx0_ln = {
            let (gg, gb) = pair(g, &l.ln1_g, &l.ln1_b);
            layer_norm_backward(&c.ln1, &p[l.ln1_g.clone()], &dh1, gg, gb)
        };
        let dx0 = add(&dx1, &dx0_ln);

        // Positional gradients are reported even when frozen; the optimizer
        // mask skips them.
        for i in 0..n {
            let dst = &mut g[l.pos.start + i * d..l.pos.start + (i + 1) * d];
            dst.iter_mut().zip(dx0.row(i)).for_each(|(a, b)| *a += b);
        }
        let draw = match &l.proj {
            Some((w, b)) => {
                let (gw, gb) = pair(g, w, b);
                linear_backward(&p[w.clone()], &c.raw, &dx0, gw, gb)
            }
            None => dx0,
        };
        for i in 0..n {
            if c.null_rows[i] {
                g[l.null.clone()].iter_mut().zip(draw.row(i)).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, MAGIC, &self.spec, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (spec, params) = checkpoint::load(path, MAGIC)?;
        Self::from_params(spec, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(MAGIC, &self.spec, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (spec, params) = checkpoint::decode(MAGIC, bytes)?;
        Self::from_params(spec, params)
    }
}

/// Two adjacent parameter ranges as disjoint mutable slices.
fn pair<'a>(g: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(a.end, b.start);
    g[a.start..b.end].split_at_mut(a.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand_distr::{Distribution, Normal};

    fn tiny(positional: Positional) -> TransformerSpec {
        TransformerSpec {
            input_dim: 6,
            d_model: 6,
            heads: 2,
            ffn: 8,
            max_len: 5,
            classes: 3,
            positional,
        }
    }

    fn random_tokens(seed: u64, n: usize, d: usize, with_null: bool) -> Tokens {
        let mut r = rng(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut t: Vec<Token> = (0..n)
            .map(|_| Token::Vector((0..d).map(|_| dist.sample(&mut r)).collect()))
            .collect();
        if with_null {
            t[n / 2] = Token::Null;
        }
        Tokens::new(t)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..6 {
            for positional in [Positional::Learned, Positional::Zero] {
                let spec = tiny(positional);
                let m = Transformer::new(spec, seed).unwrap();
                let tokens = random_tokens(50 + seed, 4, 6, seed % 2 == 0);
                let label = (seed % 3) as usize;
                let (_, analytic) = m.loss_and_grad(&tokens, label).unwrap();
                let err = gradcheck::check(
                    |p| {
                        Transformer::from_params(spec, p.to_vec())
                            .unwrap()
                            .loss_and_grad(&tokens, label)
                            .unwrap()
                            .0
                    },
                    m.params(),
                    &analytic,
                    1e-5,
                );
                assert!(err < 1e-4, "seed {seed} {positional:?}: {err}");
            }
        }
    }

    #[test]
    fn projected_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let spec = tiny(Positional::Learned).with_input_dim(9);
            let m = Transformer::new(spec, seed).unwrap();
            let tokens = random_tokens(70 + seed, 4, 9, true);
            let (_, analytic) = m.loss_and_grad(&tokens, 1).unwrap();
            let err = gradcheck::check(
                |p| {
                    Transformer::from_params(spec, p.to_vec())
                        .unwrap()
                        .loss_and_grad(&tokens, 1)
                        .unwrap()
                        .0
                },
                m.params(),
                &analytic,
                1e-5,
            );
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Transformer::new(tiny(Positional::Learned), 3).unwrap();
        for a in m.attention(&random_tokens(1, 5, 6, false)).unwrap() {
            for row in a.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_token_matches_single_without_positions() {
        let m = Transformer::new(tiny(Positional::Zero), 4).unwrap();
        let one = random_tokens(2, 1, 6, false);
        let two = Tokens::new(vec![one[0].clone(), one[0].clone()]);
        let a = m.logits(&one).unwrap();
        let b = m.logits(&two).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_positions_make_layer_permutation_invariant() {
        let m = Transformer::new(tiny(Positional::Zero), 5).unwrap();
        let t = random_tokens(3, 4, 6, false);
        let mut rev: Vec<Token> = t.iter().cloned().collect();
        rev.reverse();
        let a = m.logits(&t).unwrap();
        let b = m.logits(&Tokens::new(rev)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(m.positional().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_and_dimension_errors() {
        let m = Transformer::new(tiny(Positional::Learned), 0).unwrap();
        assert!(m.logits(&random_tokens(0, 6, 6, false)).is_err());
        assert!(m.logits(&random_tokens(0, 2, 5, false)).is_err());
        assert!(m.logits(&Tokens::new(Vec::new())).is_err());
        assert!(m.loss_and_grad(&random_tokens(0, 2, 6, false), 3).is_err());
    }

    #[test]
    fn spec_validation_and_presets() {
        let mut bad = tiny(Positional::Learned);
        bad.heads = 4;
        assert!(Transformer::new(bad, 0).is_err());
        let p = TransformerSpec::paper(10);
        assert_eq!((p.d_model, p.heads, p.ffn), (768, 12, 3072));
        assert!(p.validate().is_ok());
        assert!(TransformerSpec::small(3).validate().is_ok());
        assert_eq!(TransformerSpec::small(3).native(30).heads, 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Transformer::new(tiny(Positional::Learned), 1).unwrap();
        assert_eq!(Transformer::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
    }
}
