use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};

use super::{MicroLmParams, ModelMode, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Operand layout for [`gemm`]: `N` is row-major as given, `T` reads the
/// row-major buffer transposed.
#[derive(Clone, Copy)]
enum Op {
    N,
    T,
}

/// `c = beta·c + op(a)·op(b)` with `op(a)` of shape `m × k`, `op(b)` of shape
/// `k × n` and `c` row-major `m × n`. Each output element accumulates over
/// `k` in order, independent of `m`, so single-row calls reproduce the rows
/// of a batched call exactly.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the bounds asserted above cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}

/// Accumulates `dx` for a layer norm given upstream `dy`, and the gain/bias
/// gradients.
#[inline]
fn layer_norm_backward(
    dy: &[f64],
    gain: &[f64],
    xhat: &[f64],
    rstd: f64,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let d = dy.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..dy.len() {
        let g = dy[i] * gain[i];
        m1 += g;
        m2 += g * xhat[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    m1 /= d;
    m2 /= d;
    for i in 0..dy.len() {
        dx[i] += rstd * (dy[i] * gain[i] - m1 - xhat[i] * m2);
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Borrowed view of every tensor.
pub(crate) struct Weights<'a> {
    pub d: usize,
    pub vocab: usize,
    pub causal: bool,
    pub e: &'a [f64],
    pub pos: &'a [f64],
    wq: &'a [f64],
    wk: &'a [f64],
    wv: &'a [f64],
    wo: &'a [f64],
    w1: &'a [f64],
    c1: &'a [f64],
    w2: &'a [f64],
    c2: &'a [f64],
    g1: &'a [f64],
    b1: &'a [f64],
    g2: &'a [f64],
    b2: &'a [f64],
    gf: &'a [f64],
    bf: &'a [f64],
}

impl<'a> Weights<'a> {
    pub fn new(p: &'a MicroLmParams) -> Self {
        Weights {
            d: p.shape.dim,
            vocab: p.shape.vocab_size,
            causal: p.shape.mode == ModelMode::Causal,
            e: p.get(Tensor::TokenEmbedding),
            pos: p.get(Tensor::Position),
            wq: p.get(Tensor::Query),
            wk: p.get(Tensor::Key),
            wv: p.get(Tensor::Value),
            wo: p.get(Tensor::AttnOutput),
            w1: p.get(Tensor::FfnIn),
            c1: p.get(Tensor::FfnInBias),
            w2: p.get(Tensor::FfnOut),
            c2: p.get(Tensor::FfnOutBias),
            g1: p.get(Tensor::AttnNormGain),
            b1: p.get(Tensor::AttnNormBias),
            g2: p.get(Tensor::FfnNormGain),
            b2: p.get(Tensor::FfnNormBias),
            gf: p.get(Tensor::OutNormGain),
            bf: p.get(Tensor::OutNormBias),
        }
    }
}

/// Normalized inputs and Q/K/V projections for a block of rows.
pub(crate) struct Projected {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub(crate) fn project(w: &Weights, x0: &[f64]) -> Projected {
    let d = w.d;
    let m = x0.len() / d;
    let mut p = Projected {
        xhat: vec![0.0; m * d],
        rstd: vec![0.0; m],
        a: vec![0.0; m * d],
        q: vec![0.0; m * d],
        k: vec![0.0; m * d],
        v: vec![0.0; m * d],
    };
    for i in 0..m {
        let r = i * d..(i + 1) * d;
        p.rstd[i] = layer_norm(
            &x0[r.clone()],
            w.g1,
            w.b1,
            &mut p.xhat[r.clone()],
            &mut p.a[r],
        );
    }
    gemm(m, d, d, &p.a, Op::N, w.wq, Op::N, 0.0, &mut p.q);
    gemm(m, d, d, &p.a, Op::N, w.wk, Op::N, 0.0, &mut p.k);
    gemm(m, d, d, &p.a, Op::N, w.wv, Op::N, 0.0, &mut p.v);
    p
}

/// Attention of one query over `keys`/`values` (row-major, `att.len()` rows).
#[inline]
pub(crate) fn attend_row(
    w: &Weights,
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    att: &mut [f64],
    o: &mut [f64],
) {
    let d = w.d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for (j, a) in att.iter_mut().enumerate() {
        *a = dot(q, &keys[j * d..(j + 1) * d]) * scale;
        max = max.max(*a);
    }
    let mut sum = 0.0;
    for a in att.iter_mut() {
        *a = (*a - max).exp();
        sum += *a;
    }
    o.fill(0.0);
    for (j, a) in att.iter_mut().enumerate() {
        *a /= sum;
        axpy(*a, &values[j * d..(j + 1) * d], o);
    }
}

/// Everything between the attention output and the final norm.
pub(crate) struct Post {
    x1: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    bn: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    pub f: Vec<f64>,
}

pub(crate) fn post_attention(w: &Weights, x0: &[f64], o: &[f64]) -> Post {
    let d = w.d;
    let f4 = 4 * d;
    let m = x0.len() / d;
    let mut p = Post {
        x1: vec![0.0; m * d],
        xhat2: vec![0.0; m * d],
        rstd2: vec![0.0; m],
        bn: vec![0.0; m * d],
        u: vec![0.0; m * f4],
        h: vec![0.0; m * f4],
        xhatf: vec![0.0; m * d],
        rstdf: vec![0.0; m],
        f: vec![0.0; m * d],
    };
    gemm(m, d, d, o, Op::N, w.wo, Op::N, 0.0, &mut p.x1);
    for (x1, &x) in p.x1.iter_mut().zip(x0) {
        *x1 += x;
    }
    for i in 0..m {
        let r = i * d..(i + 1) * d;
        p.rstd2[i] = layer_norm(
            &p.x1[r.clone()],
            w.g2,
            w.b2,
            &mut p.xhat2[r.clone()],
            &mut p.bn[r],
        );
    }
    gemm(m, d, f4, &p.bn, Op::N, w.w1, Op::N, 0.0, &mut p.u);
    for (row_u, row_h) in p.u.chunks_exact_mut(f4).zip(p.h.chunks_exact_mut(f4)) {
        for ((u, h), &c) in row_u.iter_mut().zip(row_h.iter_mut()).zip(w.c1) {
            *u += c;
            *h = gelu(*u);
        }
    }
    let mut x2 = vec![0.0; m * d];
    gemm(m, f4, d, &p.h, Op::N, w.w2, Op::N, 0.0, &mut x2);
    for (row2, row1) in x2.chunks_exact_mut(d).zip(p.x1.chunks_exact(d)) {
        for ((x2, &x1), &c) in row2.iter_mut().zip(row1).zip(w.c2) {
            *x2 += x1 + c;
        }
    }
    for i in 0..m {
        let r = i * d..(i + 1) * d;
        p.rstdf[i] = layer_norm(
            &x2[r.clone()],
            w.gf,
            w.bf,
            &mut p.xhatf[r.clone()],
            &mut p.f[r],
        );
    }
    p
}

/// Tied output head for a block of final-norm rows.
pub(crate) fn head(w: &Weights, f: &[f64], logits: &mut [f64]) {
    let m = f.len() / w.d;
    gemm(m, w.d, w.vocab, f, Op::N, w.e, Op::T, 0.0, logits);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub(crate) struct Trace {
    n: usize,
    proj: Projected,
    att: Vec<f64>,
    o: Vec<f64>,
    post: Post,
}

impl Trace {
    pub fn f(&self) -> &[f64] {
        &self.post.f
    }
}

/// Input rows: token embedding plus positions.
pub(crate) fn input_rows(w: &Weights, tokens: &[TokenId]) -> Vec<f64> {
    let d = w.d;
    let mut x0 = Vec::with_capacity(tokens.len() * d);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        x0.extend(
            w.e[t * d..(t + 1) * d]
                .iter()
                .zip(&w.pos[i * d..(i + 1) * d])
                .map(|(e, p)| e + p),
        );
    }
    x0
}

fn rows_plus_positions(w: &Weights, rows: &[f64]) -> Vec<f64> {
    rows.iter().zip(w.pos).map(|(r, p)| r + p).collect()
}

pub(crate) fn forward_trace(w: &Weights, x0: Vec<f64>) -> Trace {
    let d = w.d;
    let n = x0.len() / d;
    let proj = project(w, &x0);
    let mut att = vec![0.0; n * n];
    let mut o = vec![0.0; n * d];
    for i in 0..n {
        let span = if w.causal { i + 1 } else { n };
        attend_row(
            w,
            &proj.q[i * d..(i + 1) * d],
            &proj.k[..span * d],
            &proj.v[..span * d],
            &mut att[i * n..i * n + span],
            &mut o[i * d..(i + 1) * d],
        );
    }
    let post = post_attention(w, &x0, &o);
    Trace {
        n,
        proj,
        att,
        o,
        post,
    }
}

/// Per-position logit rows (`n × V`).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    rows: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn softmax(&self, i: usize) -> Vec<f64> {
        let row = self.row(i);
        let lse = log_sum_exp(row);
        row.iter().map(|l| (l - lse).exp()).collect()
    }
}

pub fn forward_logits(params: &MicroLmParams, tokens: &[TokenId]) -> Result<Logits> {
    params.check_tokens(tokens)?;
    let w = Weights::new(params);
    let trace = forward_trace(&w, input_rows(&w, tokens));
    let mut data = vec![0.0; tokens.len() * w.vocab];
    head(&w, trace.f(), &mut data);
    Ok(Logits {
        rows: tokens.len(),
        vocab: w.vocab,
        data,
    })
}

fn require_causal(params: &MicroLmParams) -> Result<()> {
    if params.mode() != ModelMode::Causal {
        return Err(Error::WrongMode { expected: "causal" });
    }
    Ok(())
}

fn require_predictable(len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::config(format!(
            "need at least 2 tokens to score, got {len}"
        )));
    }
    Ok(())
}

fn next_token_logprobs(w: &Weights, trace: &Trace, tokens: &[TokenId]) -> Vec<f64> {
    let rows = tokens.len() - 1;
    let mut logits = vec![0.0; rows * w.vocab];
    head(w, &trace.f()[..rows * w.d], &mut logits);
    logits
        .chunks_exact(w.vocab)
        .zip(&tokens[1..])
        .map(|(row, &t)| row[t as usize] - log_sum_exp(row))
        .collect()
}

/// `log p(t_i | t_<i)` for `i = 1..n` (the first token is context only), so a
/// sequence of `n` tokens yields `n - 1` entries.
pub fn token_logprobs(params: &MicroLmParams, tokens: &[TokenId]) -> Result<Vec<f64>> {
    require_causal(params)?;
    params.check_tokens(tokens)?;
    require_predictable(tokens.len())?;
    let w = Weights::new(params);
    let trace = forward_trace(&w, input_rows(&w, tokens));
    Ok(next_token_logprobs(&w, &trace, tokens))
}

/// Mean per-token log-probability.
pub fn sequence_logprob(params: &MicroLmParams, tokens: &[TokenId]) -> Result<f64> {
    let lp = token_logprobs(params, tokens)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Like [`sequence_logprob`], but the embedding lookup is replaced by
/// caller-supplied rows (`targets.len() × d`). Targets supply the token ids
/// being predicted.
pub fn score_embeddings(params: &MicroLmParams, rows: &[f64], targets: &[TokenId]) -> Result<f64> {
    require_causal(params)?;
    params.check_tokens(targets)?;
    require_predictable(targets.len())?;
    let w = Weights::new(params);
    if rows.len() != targets.len() * w.d {
        return Err(Error::config(format!(
            "embedding rows hold {} values, expected {}x{}",
            rows.len(),
            targets.len(),
            w.d
        )));
    }
    let trace = forward_trace(&w, rows_plus_positions(&w, rows));
    let lp = next_token_logprobs(&w, &trace, targets);
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Mean negative log-likelihood per predicted token over the batch.
pub fn clm_loss(params: &MicroLmParams, batch: &[TokenSequence]) -> Result<f64> {
    require_causal(params)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let lp = token_logprobs(params, &s.tokens)?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok(total / count as f64)
}

pub fn perplexity(params: &MicroLmParams, dataset: &[TokenSequence]) -> Result<f64> {
    Ok(clm_loss(params, dataset)?.exp())
}

/// Fills every `mask_id` position with the arg-max prediction of a masked
/// model. The mask token itself is never predicted.
pub fn mlm_fill(
    params: &MicroLmParams,
    tokens: &[TokenId],
    mask_id: TokenId,
) -> Result<Vec<TokenId>> {
    if params.mode() != ModelMode::Masked {
        return Err(Error::WrongMode { expected: "masked" });
    }
    params.check_tokens(tokens)?;
    if !tokens.contains(&mask_id) {
        return Err(Error::NoMaskToken);
    }
    let w = Weights::new(params);
    let trace = forward_trace(&w, input_rows(&w, tokens));
    let mut logits = vec![0.0; tokens.len() * w.vocab];
    head(&w, trace.f(), &mut logits);
    let mut out = tokens.to_vec();
    for (t, row) in out.iter_mut().zip(logits.chunks_exact(w.vocab)) {
        if *t != mask_id {
            continue;
        }
        let mut best = (None, f64::NEG_INFINITY);
        for (id, &l) in row.iter().enumerate() {
            if id as TokenId != mask_id && l > best.1 {
                best = (Some(id), l);
            }
        }
        // Non-finite logits fall back to the first non-mask id.
        *t = best.0.unwrap_or(if mask_id == 0 { 1 } else { 0 }) as TokenId;
    }
    Ok(out)
}

/// One training example: the model input and the `(row, token)` pairs whose
/// log-likelihood is maximized.
pub(crate) struct Example {
    pub input: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

impl Example {
    pub fn causal(tokens: &[TokenId]) -> Self {
        Example {
            input: tokens.to_vec(),
            targets: (0..tokens.len().saturating_sub(1))
                .map(|i| (i, tokens[i + 1]))
                .collect(),
        }
    }
}

fn split_grad<'g>(params: &MicroLmParams, grad: &'g mut [f64]) -> Vec<&'g mut [f64]> {
    let mut out = Vec::with_capacity(16);
    let mut rest = grad;
    for t in Tensor::ALL {
        let (head, tail) = rest.split_at_mut(params.tensor_range(t).len());
        out.push(head);
        rest = tail;
    }
    out
}

/// Mean target NLL over all examples; accumulates its gradient into `grad`.
pub(crate) fn loss_and_gradient(
    params: &MicroLmParams,
    examples: &[Example],
    grad: &mut [f64],
) -> f64 {
    let count: usize = examples.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return 0.0;
    }
    let weight = 1.0 / count as f64;
    let w = Weights::new(params);
    let mut g = split_grad(params, grad);
    let mut loss = 0.0;
    for ex in examples {
        let trace = forward_trace(&w, input_rows(&w, &ex.input));
        loss += backward(&w, &trace, ex, weight, &mut g);
    }
    loss
}

/// [`clm_loss`] together with its gradient with respect to every parameter,
/// laid out like [`MicroLmParams::as_slice`].
pub fn clm_loss_gradient(
    params: &MicroLmParams,
    batch: &[TokenSequence],
) -> Result<(f64, Vec<f64>)> {
    require_causal(params)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        params.check_tokens(&s.tokens)?;
        require_predictable(s.tokens.len())?;
    }
    let examples: Vec<Example> = batch.iter().map(|s| Example::causal(&s.tokens)).collect();
    let mut grad = vec![0.0; params.num_params()];
    let loss = loss_and_gradient(params, &examples, &mut grad);
    Ok((loss, grad))
}

/// Mean target NLL without the backward pass.
pub(crate) fn examples_loss(params: &MicroLmParams, examples: &[Example]) -> f64 {
    let count: usize = examples.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return 0.0;
    }
    let w = Weights::new(params);
    let mut total = 0.0;
    for ex in examples {
        let trace = forward_trace(&w, input_rows(&w, &ex.input));
        let mut logits = vec![0.0; trace.n * w.vocab];
        head(&w, trace.f(), &mut logits);
        for &(i, tok) in &ex.targets {
            let row = &logits[i * w.vocab..(i + 1) * w.vocab];
            total += log_sum_exp(row) - row[tok as usize];
        }
    }
    total / count as f64
}

fn column_sums(rows: &[f64], width: usize, out: &mut [f64]) {
    for row in rows.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn backward(w: &Weights, t: &Trace, ex: &Example, weight: f64, g: &mut [&mut [f64]]) -> f64 {
    let d = w.d;
    let f4 = 4 * d;
    let n = t.n;
    let vocab = w.vocab;
    let mut loss = 0.0;
    let mut active = vec![false; n];

    // Tied output head.
    let mut dl = vec![0.0; n * vocab];
    head(w, t.f(), &mut dl);
    for &(i, _) in &ex.targets {
        active[i] = true;
    }
    let mut lse = vec![0.0; n];
    for (i, row) in dl.chunks_exact_mut(vocab).enumerate() {
        if active[i] {
            lse[i] = log_sum_exp(row);
        }
    }
    for &(i, tok) in &ex.targets {
        loss += weight * (lse[i] - dl[i * vocab + tok as usize]);
    }
    for (i, row) in dl.chunks_exact_mut(vocab).enumerate() {
        if active[i] {
            for l in row.iter_mut() {
                *l = weight * (*l - lse[i]).exp();
            }
        } else {
            row.fill(0.0);
        }
    }
    for &(i, tok) in &ex.targets {
        dl[i * vocab + tok as usize] -= weight;
    }
    let mut df = vec![0.0; n * d];
    gemm(n, vocab, d, &dl, Op::N, w.e, Op::N, 0.0, &mut df);
    gemm(vocab, n, d, &dl, Op::T, t.f(), Op::N, 1.0, g[0]);

    // Final norm.
    let mut dx2 = vec![0.0; n * d];
    for i in (0..n).filter(|&i| active[i]) {
        let r = i * d..(i + 1) * d;
        let (gf, bf) = pair_mut(g, 14, 15);
        layer_norm_backward(
            &df[r.clone()],
            w.gf,
            &t.post.xhatf[r.clone()],
            t.post.rstdf[i],
            &mut dx2[r],
            gf,
            bf,
        );
    }

    // Feed-forward block; the residual carries dx2 into dx1.
    let p = &t.post;
    column_sums(&dx2, d, g[9]);
    let mut dh = vec![0.0; n * f4];
    gemm(n, d, f4, &dx2, Op::N, w.w2, Op::T, 0.0, &mut dh);
    gemm(f4, n, d, &p.h, Op::T, &dx2, Op::N, 1.0, g[8]);
    for (dhv, &u) in dh.iter_mut().zip(&p.u) {
        *dhv *= gelu_grad(u);
    }
    column_sums(&dh, f4, g[7]);
    let mut dbn = vec![0.0; n * d];
    gemm(n, f4, d, &dh, Op::N, w.w1, Op::T, 0.0, &mut dbn);
    gemm(d, n, f4, &p.bn, Op::T, &dh, Op::N, 1.0, g[6]);
    let mut dx1 = dx2;
    for i in (0..n).filter(|&i| active[i]) {
        let r = i * d..(i + 1) * d;
        let (g2, b2) = pair_mut(g, 12, 13);
        layer_norm_backward(
            &dbn[r.clone()],
            w.g2,
            &p.xhat2[r.clone()],
            p.rstd2[i],
            &mut dx1[r],
            g2,
            b2,
        );
    }

    // Attention output projection; the residual carries dx1 into dx0.
    let mut d_o = vec![0.0; n * d];
    gemm(n, d, d, &dx1, Op::N, w.wo, Op::T, 0.0, &mut d_o);
    gemm(d, n, d, &t.o, Op::T, &dx1, Op::N, 1.0, g[5]);

    // Softmax attention.
    let scale = 1.0 / (d as f64).sqrt();
    let pr = &t.proj;
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut ds = vec![0.0; n];
    for i in (0..n).filter(|&i| active[i]) {
        let span = if w.causal { i + 1 } else { n };
        let att = &t.att[i * n..i * n + span];
        let doi = &d_o[i * d..(i + 1) * d];
        let mut weighted = 0.0;
        for j in 0..span {
            let da = dot(doi, &pr.v[j * d..(j + 1) * d]);
            axpy(att[j], doi, &mut dv[j * d..(j + 1) * d]);
            ds[j] = da;
            weighted += att[j] * da;
        }
        let qi = &pr.q[i * d..(i + 1) * d];
        let dqi = &mut dq[i * d..(i + 1) * d];
        for j in 0..span {
            let s = att[j] * (ds[j] - weighted) * scale;
            axpy(s, &pr.k[j * d..(j + 1) * d], dqi);
            axpy(s, qi, &mut dk[j * d..(j + 1) * d]);
        }
    }

    // Q/K/V projections and the pre-attention norm.
    let mut da = vec![0.0; n * d];
    gemm(n, d, d, &dq, Op::N, w.wq, Op::T, 0.0, &mut da);
    gemm(n, d, d, &dk, Op::N, w.wk, Op::T, 1.0, &mut da);
    gemm(n, d, d, &dv, Op::N, w.wv, Op::T, 1.0, &mut da);
    gemm(d, n, d, &pr.a, Op::T, &dq, Op::N, 1.0, g[2]);
    gemm(d, n, d, &pr.a, Op::T, &dk, Op::N, 1.0, g[3]);
    gemm(d, n, d, &pr.a, Op::T, &dv, Op::N, 1.0, g[4]);
    let mut dx0 = dx1;
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let (g1, b1) = pair_mut(g, 10, 11);
        layer_norm_backward(
            &da[r.clone()],
            w.g1,
            &pr.xhat[r.clone()],
            pr.rstd[i],
            &mut dx0[r],
            g1,
            b1,
        );
    }

    // Embedding and positions.
    for (i, &tok) in ex.input.iter().enumerate() {
        let src = &dx0[i * d..(i + 1) * d];
        let tok = tok as usize;
        axpy(1.0, src, &mut g[0][tok * d..(tok + 1) * d]);
        axpy(1.0, src, &mut g[1][i * d..(i + 1) * d]);
    }
    loss
}

fn pair_mut<'s, 'g>(
    g: &'s mut [&'g mut [f64]],
    a: usize,
    b: usize,
) -> (&'s mut [f64], &'s mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut *lo[a], &mut *hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitLabel;
    use crate::microlm::ModelShape;

    fn uniform_params(vocab: usize) -> MicroLmParams {
        let shape = ModelShape::new(ModelMode::Causal, vocab, 8, 16);
        let mut p = MicroLmParams::init(shape, 1).unwrap();
        // Zero everything but E: the final norm then emits its (zero) offset.
        for t in Tensor::ALL.iter().skip(1) {
            p.get_mut(*t).fill(0.0);
        }
        p
    }

    /// Two-token model whose logits are a fixed vector at every position.
    fn fixed_logit_model(vocab: usize, logits: &[f64]) -> MicroLmParams {
        let d = vocab.max(2);
        let shape = ModelShape::new(ModelMode::Causal, vocab, d, 8);
        let mut p = MicroLmParams::zeros(shape).unwrap();
        // f = OutNormBias = e_0 and E_v = logits[v] e_0.
        p.get_mut(Tensor::OutNormBias)[0] = 1.0;
        let e = p.get_mut(Tensor::TokenEmbedding);
        for (v, &l) in logits.iter().enumerate() {
            e[v * d] = l;
        }
        p
    }

    #[test]
    fn uniform_output_when_only_embedding_is_nonzero() {
        let p = uniform_params(259);
        let logits = forward_logits(&p, &[1, 2, 3]).unwrap();
        for i in 0..3 {
            for prob in logits.softmax(i) {
                assert!((prob - 1.0 / 259.0).abs() < 1e-15);
            }
        }
        let lp = token_logprobs(&p, &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(lp.len(), 4);
        for v in &lp {
            assert!((v + (259f64).ln()).abs() < 1e-12);
        }
        let batch = vec![TokenSequence::new(
            "a",
            vec![1, 2, 3, 4],
            SplitLabel::Member,
        )];
        assert!((clm_loss(&p, &batch).unwrap() - (259f64).ln()).abs() < 1e-12);
        assert!((perplexity(&p, &batch).unwrap() - 259.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_two_token_model() {
        let p = fixed_logit_model(2, &[0.0, 2.0]);
        let logits = forward_logits(&p, &[0, 1, 1]).unwrap();
        for i in 0..3 {
            let row = logits.row(i);
            assert!((row[1] - row[0] - 2.0).abs() < 1e-12);
            let prob = logits.softmax(i)[1];
            assert!((prob - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
            assert!((prob - 0.8808).abs() < 1e-4);
        }
    }

    #[test]
    fn hand_arithmetic_half_and_quarter() {
        // Logits (ln .5, ln .25, ln .25) give probabilities (.5, .25, .25).
        let p = fixed_logit_model(3, &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]);
        let tokens = [2, 0, 1];
        let lp = token_logprobs(&p, &tokens).unwrap();
        assert!((lp[0] + 0.6931).abs() < 1e-4);
        assert!((lp[1] + 1.3863).abs() < 1e-4);
        let batch = vec![TokenSequence::new("x", tokens.to_vec(), SplitLabel::Member)];
        let loss = clm_loss(&p, &batch).unwrap();
        assert!((loss - 1.0397).abs() < 1e-4);
        assert!((perplexity(&p, &batch).unwrap() - 2.828).abs() < 1e-3);
        let mean = lp.iter().sum::<f64>() / 2.0;
        assert!((sequence_logprob(&p, &tokens).unwrap() - mean).abs() < 1e-15);
        assert!((mean + loss).abs() < 1e-9);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        // Token 0 always followed by 0 with probability ~1.
        let p = fixed_logit_model(2, &[200.0, 0.0]);
        let batch = vec![TokenSequence::new("x", vec![0; 6], SplitLabel::Member)];
        assert!(clm_loss(&p, &batch).unwrap() < 1e-12);
        assert!((perplexity(&p, &batch).unwrap() - 1.0).abs() < 1e-12);
    }

    fn random_params(mode: ModelMode) -> MicroLmParams {
        MicroLmParams::init_with_scale(ModelShape::new(mode, 13, 8, 12), 3, 0.5).unwrap()
    }

    #[test]
    fn causal_prefix_bitwise_invariant() {
        let p = random_params(ModelMode::Causal);
        let a = [1, 2, 3, 4, 5, 6, 7, 8];
        let mut b = a;
        b[5] = 12;
        let la = forward_logits(&p, &a).unwrap();
        let lb = forward_logits(&p, &b).unwrap();
        for i in 0..5 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert_ne!(la.row(5), lb.row(5));
    }

    #[test]
    fn masked_mode_sees_the_future() {
        let p = random_params(ModelMode::Masked);
        let la = forward_logits(&p, &[1, 2, 3, 4]).unwrap();
        let lb = forward_logits(&p, &[1, 2, 3, 9]).unwrap();
        assert_ne!(la.row(0), lb.row(0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = random_params(ModelMode::Causal);
        let l = forward_logits(&p, &[0, 4, 8, 12, 3]).unwrap();
        for i in 0..l.rows() {
            assert!((l.softmax(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tied_head_is_dot_with_embedding_rows() {
        let p = random_params(ModelMode::Causal);
        let w = Weights::new(&p);
        let tokens = [3, 1, 4, 1, 5];
        let trace = forward_trace(&w, input_rows(&w, &tokens));
        let logits = forward_logits(&p, &tokens).unwrap();
        let e = p.embedding_matrix();
        for i in 0..tokens.len() {
            for v in 0..13 {
                let direct: f64 = trace.f()[i * 8..(i + 1) * 8]
                    .iter()
                    .zip(e.row(v))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((logits.row(i)[v as usize] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_scoring_matches_token_scoring() {
        let p = random_params(ModelMode::Causal);
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let rows = p.embedding_matrix().embed(&tokens);
        assert_eq!(
            score_embeddings(&p, &rows, &tokens).unwrap(),
            sequence_logprob(&p, &tokens).unwrap()
        );
        let masked = p.with_mode(ModelMode::Masked);
        assert!(matches!(
            score_embeddings(&masked, &rows, &tokens),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let p = random_params(ModelMode::Causal);
        assert!(matches!(
            forward_logits(&p, &[13]),
            Err(Error::TokenOutOfRange { id: 13, .. })
        ));
        assert!(matches!(
            forward_logits(&p, &[0; 13]),
            Err(Error::SequenceTooLong {
                len: 13,
                max_len: 12
            })
        ));
        assert!(matches!(clm_loss(&p, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mlm_fill_contract() {
        let p = random_params(ModelMode::Masked);
        let mask = 11;
        assert!(matches!(
            mlm_fill(&p, &[1, 2, 3], mask),
            Err(Error::NoMaskToken)
        ));
        let filled = mlm_fill(&p, &[1, mask, 3, mask], mask).unwrap();
        assert_eq!(filled[0], 1);
        assert_eq!(filled[2], 3);
        assert!(filled[1] != mask && filled[3] != mask);
        // Suppression holds even when the mask logit dominates.
        let mut p = MicroLmParams::zeros(ModelShape::new(ModelMode::Masked, 3, 3, 4)).unwrap();
        p.get_mut(Tensor::OutNormBias)[0] = 1.0;
        p.get_mut(Tensor::TokenEmbedding)[2 * 3] = 50.0;
        assert_eq!(mlm_fill(&p, &[0, 2], 2).unwrap(), vec![0, 0]);
        assert!(matches!(
            mlm_fill(&random_params(ModelMode::Causal), &[1, mask], mask),
            Err(Error::WrongMode { .. })
        ));
    }

    /// Central finite differences against the analytic gradient.
    fn check_gradient(mode: ModelMode) {
        let shape = ModelShape::new(mode, 8, 4, 8);
        let mut p = MicroLmParams::init_with_scale(shape, 11, 0.4).unwrap();
        // Non-trivial norm parameters so every tensor has a real gradient.
        for (i, x) in p.as_mut_slice().iter_mut().enumerate() {
            if *x == 1.0 {
                *x = 0.8 + 0.05 * (i % 7) as f64;
            } else if *x == 0.0 {
                *x = 0.03 * ((i % 5) as f64 - 2.0);
            }
        }
        let examples = match mode {
            ModelMode::Causal => vec![
                Example::causal(&[1, 5, 2, 7, 3, 3, 0, 6]),
                Example::causal(&[4, 4, 1, 2]),
            ],
            ModelMode::Masked => vec![Example {
                input: vec![1, 6, 2, 6, 3, 0],
                targets: vec![(1, 5), (3, 7)],
            }],
        };
        let mut grad = vec![0.0; p.num_params()];
        loss_and_gradient(&p, &examples, &mut grad);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.num_params() {
            let orig = p.as_slice()[i];
            p.as_mut_slice()[i] = orig + h;
            let mut scratch = vec![0.0; grad.len()];
            let up = loss_and_gradient(&p, &examples, &mut scratch);
            p.as_mut_slice()[i] = orig - h;
            let down = loss_and_gradient(&p, &examples, &mut scratch);
            p.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - grad[i]).abs();
            let scale = numeric.abs().max(grad[i].abs());
            assert!(
                err <= 1e-4 * scale || err < 1e-9,
                "coordinate {i}: analytic {} numeric {numeric}",
                grad[i]
            );
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences_causal() {
        check_gradient(ModelMode::Causal);
    }

    #[test]
    fn gradient_matches_finite_differences_masked() {
        check_gradient(ModelMode::Masked);
    }
}
