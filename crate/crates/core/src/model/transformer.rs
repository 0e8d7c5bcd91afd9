use super::{Batch, Layout, ModelConfig, WeightVector, RMS_EPS, ROPE_BASE};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;

/// Dense `rows x seq_len x width` activations or logits, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T = f32> {
    pub rows: usize,
    pub seq_len: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn at(&self, row: usize, pos: usize) -> &[T] {
        let start = (row * self.seq_len + pos) * self.width;
        &self.values[start..start + self.width]
    }
}

struct LayerParams<'a, T> {
    attn_norm: &'a [T],
    wq: &'a [T],
    wk: &'a [T],
    wv: &'a [T],
    wo: &'a [T],
    ffn_norm: &'a [T],
    w1: &'a [T],
    w3: &'a [T],
    w2: &'a [T],
}

struct Params<'a, T> {
    embed: &'a [T],
    layers: Vec<LayerParams<'a, T>>,
    final_norm: &'a [T],
    head: &'a [T],
}

struct LayerGrads<'a, T> {
    attn_norm: &'a mut [T],
    wq: &'a mut [T],
    wk: &'a mut [T],
    wv: &'a mut [T],
    wo: &'a mut [T],
    ffn_norm: &'a mut [T],
    w1: &'a mut [T],
    w3: &'a mut [T],
    w2: &'a mut [T],
}

struct Grads<'a, T> {
    embed: &'a mut [T],
    layers: Vec<LayerGrads<'a, T>>,
    final_norm: &'a mut [T],
    head: &'a mut [T],
}

fn take<'a, T>(rest: &mut &'a [T], n: usize) -> &'a [T] {
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    head
}

fn take_mut<'a, T>(rest: &mut &'a mut [T], n: usize) -> &'a mut [T] {
    let (head, tail) = std::mem::take(rest).split_at_mut(n);
    *rest = tail;
    head
}

fn split<'a, T>(values: &'a [T], cfg: &ModelConfig) -> Params<'a, T> {
    let (d, f, v) = (cfg.d_model, cfg.ffw_dim, cfg.vocab_size);
    let mut rest = values;
    let embed = take(&mut rest, v * d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            attn_norm: take(&mut rest, d),
            wq: take(&mut rest, d * d),
            wk: take(&mut rest, d * d),
            wv: take(&mut rest, d * d),
            wo: take(&mut rest, d * d),
            ffn_norm: take(&mut rest, d),
            w1: take(&mut rest, f * d),
            w3: take(&mut rest, f * d),
            w2: take(&mut rest, d * f),
        })
        .collect();
    let final_norm = take(&mut rest, d);
    let head = take(&mut rest, v * d);
    debug_assert!(rest.is_empty());
    Params {
        embed,
        layers,
        final_norm,
        head,
    }
}

fn split_mut<'a, T>(values: &'a mut [T], cfg: &ModelConfig) -> Grads<'a, T> {
    let (d, f, v) = (cfg.d_model, cfg.ffw_dim, cfg.vocab_size);
    let mut rest = values;
    let embed = take_mut(&mut rest, v * d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerGrads {
            attn_norm: take_mut(&mut rest, d),
            wq: take_mut(&mut rest, d * d),
            wk: take_mut(&mut rest, d * d),
            wv: take_mut(&mut rest, d * d),
            wo: take_mut(&mut rest, d * d),
            ffn_norm: take_mut(&mut rest, d),
            w1: take_mut(&mut rest, f * d),
            w3: take_mut(&mut rest, f * d),
            w2: take_mut(&mut rest, d * f),
        })
        .collect();
    let final_norm = take_mut(&mut rest, d);
    let head = take_mut(&mut rest, v * d);
    Grads {
        embed,
        layers,
        final_norm,
        head,
    }
}

fn check<T: Real>(weights: &WeightVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    cfg.validate()?;
    if **weights.layout() != Layout::for_config(cfg) {
        return Err(Error::Layout(format!(
            "weights ({} values) do not match the layout of {cfg:?}",
            weights.len()
        )));
    }
    batch.check(cfg)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent accumulators so the loop vectorises; the
    // summation order is fixed, so results stay deterministic.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `y[r][o] = sum_i x[r][i] * w[o][i]`.
fn linear<T: Real>(x: &[T], w: &[T], inp: usize, out: usize) -> Vec<T> {
    let rows = x.len() / inp;
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        y.extend(w.chunks_exact(inp).map(|wo| dot(xr, wo)));
    }
    y
}

/// Backward of [`linear`]: accumulates into `dx` (if given) and `dw`.
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    inp: usize,
    out: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
) {
    let rows = x.len() / inp;
    for r in 0..rows {
        let dyr = &dy[r * out..(r + 1) * out];
        let xr = &x[r * inp..(r + 1) * inp];
        for (o, &g) in dyr.iter().enumerate() {
            if g != T::zero() {
                axpy(&mut dw[o * inp..(o + 1) * inp], g, xr);
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * out..(r + 1) * out];
            let dxr = &mut dx[r * inp..(r + 1) * inp];
            for (o, &g) in dyr.iter().enumerate() {
                if g != T::zero() {
                    axpy(dxr, g, &w[o * inp..(o + 1) * inp]);
                }
            }
        }
    }
}

struct NormCache<T> {
    normed: Vec<T>,
    inv_rms: Vec<T>,
}

fn rmsnorm<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, NormCache<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let mut normed = Vec::with_capacity(x.len());
    let mut inv_rms = Vec::with_capacity(rows);
    let eps = T::of(RMS_EPS);
    let dn = T::of(d as f64);
    for xr in x.chunks_exact(d) {
        let ms = dot(xr, xr) / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv_rms.push(r);
        for (&xi, &g) in xr.iter().zip(gain) {
            let n = xi * r;
            normed.push(n);
            out.push(n * g);
        }
    }
    (out, NormCache { normed, inv_rms })
}

fn rmsnorm_backward<T: Real>(dy: &[T], gain: &[T], cache: &NormCache<T>, dx: &mut [T], dgain: &mut [T]) {
    let d = gain.len();
    let dn_f = T::of(d as f64);
    let mut dn = vec![T::zero(); d];
    for (r, (dyr, nr)) in dy.chunks_exact(d).zip(cache.normed.chunks_exact(d)).enumerate() {
        for i in 0..d {
            dgain[i] = dgain[i] + dyr[i] * nr[i];
            dn[i] = dyr[i] * gain[i];
        }
        let m = dot(&dn, nr) / dn_f;
        let inv = cache.inv_rms[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = dxr[i] + inv * (dn[i] - nr[i] * m);
        }
    }
}

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Real> Rope<T> {
    fn new(seq_len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for t in 0..seq_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = t as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotate each head's `(i, i + half)` pairs in place; `inverse` applies
    /// the transpose rotation (used for gradients).
    fn apply(&self, x: &mut [T], d_model: usize, inverse: bool) {
        let hd = 2 * self.half;
        for (t, xr) in x.chunks_exact_mut(d_model).enumerate() {
            let cs = &self.cos[t * self.half..(t + 1) * self.half];
            let sn = &self.sin[t * self.half..(t + 1) * self.half];
            for head in xr.chunks_exact_mut(hd) {
                let (a, b) = head.split_at_mut(self.half);
                for i in 0..self.half {
                    let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                    let (ai, bi) = (a[i], b[i]);
                    a[i] = ai * c - bi * s;
                    b[i] = ai * s + bi * c;
                }
            }
        }
    }
}

struct LayerCache<T> {
    norm1: NormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Causal attention probabilities, `n_heads x S x S` (upper triangle zero).
    probs: Vec<T>,
    o: Vec<T>,
    norm2: NormCache<T>,
    b: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct RowCache<T> {
    layers: Vec<LayerCache<T>>,
    norm_f: NormCache<T>,
    z: Vec<T>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn embed<T: Real>(p: &Params<'_, T>, cfg: &ModelConfig, inputs: &[u32]) -> Vec<T> {
    let d = cfg.d_model;
    let mut h = Vec::with_capacity(inputs.len() * d);
    for &tok in inputs {
        let t = tok as usize;
        h.extend_from_slice(&p.embed[t * d..(t + 1) * d]);
    }
    h
}

fn layer_forward<T: Real>(
    lp: &LayerParams<'_, T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    h_in: Vec<T>,
) -> (Vec<T>, LayerCache<T>) {
    let (d, f, hd, nh) = (cfg.d_model, cfg.ffw_dim, cfg.head_dim, cfg.n_heads);
    let s = h_in.len() / d;
    let (a, norm1) = rmsnorm(&h_in, lp.attn_norm);
    let mut q = linear(&a, lp.wq, d, d);
    let mut k = linear(&a, lp.wk, d, d);
    let v = linear(&a, lp.wv, d, d);
    rope.apply(&mut q, d, false);
    rope.apply(&mut k, d, false);

    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); nh * s * s];
    let mut o = vec![T::zero(); s * d];
    for h in 0..nh {
        let off = h * hd;
        for t in 0..s {
            let qt = &q[t * d + off..t * d + off + hd];
            let row = &mut probs[(h * s + t) * s..(h * s + t) * s + t + 1];
            let mut max = T::neg_infinity();
            for (u, p) in row.iter_mut().enumerate() {
                *p = dot(qt, &k[u * d + off..u * d + off + hd]) * scale;
                max = max.max(*p);
            }
            let mut sum = T::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum = sum + *p;
            }
            let inv = T::one() / sum;
            let ot = &mut o[t * d + off..t * d + off + hd];
            for (u, p) in row.iter_mut().enumerate() {
                *p = *p * inv;
                axpy(ot, *p, &v[u * d + off..u * d + off + hd]);
            }
        }
    }
    let attn = linear(&o, lp.wo, d, d);
    let h_mid: Vec<T> = h_in.iter().zip(&attn).map(|(&x, &y)| x + y).collect();

    let (b, norm2) = rmsnorm(&h_mid, lp.ffn_norm);
    let gate = linear(&b, lp.w1, d, f);
    let up = linear(&b, lp.w3, d, f);
    let act: Vec<T> = gate
        .iter()
        .zip(&up)
        .map(|(&g, &u)| g * sigmoid(g) * u)
        .collect();
    let ff = linear(&act, lp.w2, f, d);
    let h_out = h_mid.iter().zip(&ff).map(|(&x, &y)| x + y).collect();
    (
        h_out,
        LayerCache {
            norm1,
            a,
            q,
            k,
            v,
            probs,
            o,
            norm2,
            b,
            gate,
            up,
            act,
        },
    )
}

/// Gradient of one layer: `dh` is the gradient w.r.t. the layer output on
/// entry and w.r.t. its input on return.
fn layer_backward<T: Real>(
    lp: &LayerParams<'_, T>,
    lg: &mut LayerGrads<'_, T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    c: &LayerCache<T>,
    dh: Vec<T>,
) -> Vec<T> {
    let (d, f, hd, nh) = (cfg.d_model, cfg.ffw_dim, cfg.head_dim, cfg.n_heads);
    let s = dh.len() / d;

    // feed-forward branch
    let mut dact = vec![T::zero(); s * f];
    linear_backward(&dh, &c.act, lp.w2, f, d, Some(&mut dact), lg.w2);
    let mut dgate = vec![T::zero(); s * f];
    let mut dup = vec![T::zero(); s * f];
    for i in 0..s * f {
        let g = c.gate[i];
        let sg = sigmoid(g);
        let silu = g * sg;
        dup[i] = dact[i] * silu;
        dgate[i] = dact[i] * c.up[i] * sg * (T::one() + g * (T::one() - sg));
    }
    let mut db = vec![T::zero(); s * d];
    linear_backward(&dgate, &c.b, lp.w1, d, f, Some(&mut db), lg.w1);
    linear_backward(&dup, &c.b, lp.w3, d, f, Some(&mut db), lg.w3);
    let mut dh_mid = dh;
    rmsnorm_backward(&db, lp.ffn_norm, &c.norm2, &mut dh_mid, lg.ffn_norm);

    // attention branch
    let mut do_ = vec![T::zero(); s * d];
    linear_backward(&dh_mid, &c.o, lp.wo, d, d, Some(&mut do_), lg.wo);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut dp = vec![T::zero(); s];
    for h in 0..nh {
        let off = h * hd;
        for t in 0..s {
            let probs = &c.probs[(h * s + t) * s..(h * s + t) * s + t + 1];
            let dot_ = &do_[t * d + off..t * d + off + hd];
            let mut weighted = T::zero();
            for u in 0..=t {
                dp[u] = dot(dot_, &c.v[u * d + off..u * d + off + hd]);
                weighted = weighted + probs[u] * dp[u];
                axpy(&mut dv[u * d + off..u * d + off + hd], probs[u], dot_);
            }
            let qt = &c.q[t * d + off..t * d + off + hd];
            for u in 0..=t {
                let ds = probs[u] * (dp[u] - weighted) * scale;
                if ds != T::zero() {
                    axpy(&mut dq[t * d + off..t * d + off + hd], ds, &c.k[u * d + off..u * d + off + hd]);
                    axpy(&mut dk[u * d + off..u * d + off + hd], ds, qt);
                }
            }
        }
    }
    rope.apply(&mut dq, d, true);
    rope.apply(&mut dk, d, true);
    let mut da = vec![T::zero(); s * d];
    linear_backward(&dq, &c.a, lp.wq, d, d, Some(&mut da), lg.wq);
    linear_backward(&dk, &c.a, lp.wk, d, d, Some(&mut da), lg.wk);
    linear_backward(&dv, &c.a, lp.wv, d, d, Some(&mut da), lg.wv);
    let mut dh_in = dh_mid;
    rmsnorm_backward(&da, lp.attn_norm, &c.norm1, &mut dh_in, lg.attn_norm);
    dh_in
}

/// Residual stream after `upto` blocks plus the caches needed to continue.
fn trunk<T: Real>(
    p: &Params<'_, T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    inputs: &[u32],
    upto: usize,
) -> (Vec<T>, Vec<LayerCache<T>>) {
    let mut h = embed(p, cfg, inputs);
    let mut caches = Vec::with_capacity(upto);
    for lp in p.layers.iter().take(upto) {
        let (next, cache) = layer_forward(lp, cfg, rope, h);
        caches.push(cache);
        h = next;
    }
    (h, caches)
}

fn row_forward<T: Real>(
    p: &Params<'_, T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    inputs: &[u32],
) -> (Vec<T>, RowCache<T>) {
    let (h_final, layers) = trunk(p, cfg, rope, inputs, cfg.n_layers);
    let (z, norm_f) = rmsnorm(&h_final, p.final_norm);
    let logits = linear(&z, p.head, cfg.d_model, cfg.vocab_size);
    (
        logits,
        RowCache {
            layers,
            norm_f,
            z,
        },
    )
}

/// Sum of token cross-entropies for one row (f64), and optionally the
/// gradient of `scale * sum` w.r.t. the logits.
fn row_xent<T: Real>(logits: &[T], targets: &[u32], vocab: usize, scale: Option<T>) -> (f64, Vec<T>) {
    let mut total = 0.0f64;
    let mut grad = if scale.is_some() {
        Vec::with_capacity(logits.len())
    } else {
        Vec::new()
    };
    for (lr, &y) in logits.chunks_exact(vocab).zip(targets) {
        let max = lr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = lr.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - lr[y as usize]).f64();
        if let Some(sc) = scale {
            let inv = T::one() / sum;
            for (i, &v) in lr.iter().enumerate() {
                let p = (v - max).exp() * inv;
                let g = if i == y as usize { p - T::one() } else { p };
                grad.push(g * sc);
            }
        }
    }
    (total, grad)
}

/// Logits for every position of every row.
pub fn forward<T: Real>(weights: &WeightVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<Logits<T>> {
    forward_with(Exec::default(), weights, cfg, batch)
}

pub fn forward_with<T: Real>(
    exec: Exec,
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<Logits<T>> {
    check(weights, cfg, batch)?;
    let p = split(weights.values(), cfg);
    let rope = Rope::new(batch.seq_len(), cfg.head_dim);
    let rows = exec.map(batch.rows(), |r| row_forward(&p, cfg, &rope, batch.inputs(r)).0);
    Ok(Logits {
        rows: batch.rows(),
        seq_len: batch.seq_len(),
        width: cfg.vocab_size,
        values: rows.concat(),
    })
}

/// Mean token cross-entropy in nats, accumulated in f64.
pub fn cross_entropy<T: Real>(logits: &Logits<T>, targets: &[u32]) -> Result<f64> {
    let n = logits.rows * logits.seq_len;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} positions", targets.len())));
    }
    if n == 0 {
        return Err(Error::Empty("no positions".into()));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= logits.width) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: logits.width,
        });
    }
    let (sum, _) = row_xent(&logits.values, targets, logits.width, None::<T>);
    Ok(sum / n as f64)
}

/// Per-row summed cross-entropy without materialising the whole logit
/// tensor.
pub fn row_losses<T: Real>(
    exec: Exec,
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<Vec<f64>> {
    check(weights, cfg, batch)?;
    let p = split(weights.values(), cfg);
    let rope = Rope::new(batch.seq_len(), cfg.head_dim);
    Ok(exec.map(batch.rows(), |r| {
        let (logits, _) = row_forward(&p, cfg, &rope, batch.inputs(r));
        row_xent(&logits, batch.targets(r), cfg.vocab_size, None::<T>).0
    }))
}

/// Mean cross-entropy of the batch.
pub fn batch_loss<T: Real>(exec: Exec, weights: &WeightVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<f64> {
    let per_row = row_losses(exec, weights, cfg, batch)?;
    Ok(per_row.iter().sum::<f64>() / (batch.rows() * batch.seq_len()) as f64)
}

/// Mean loss and `loss_scale * d(mean loss)/d(theta)`.
pub fn loss_and_gradients<T: Real>(
    exec: Exec,
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    loss_scale: f64,
) -> Result<(f64, WeightVector<T>)> {
    check(weights, cfg, batch)?;
    let n_tokens = (batch.rows() * batch.seq_len()) as f64;
    let scale = T::of(loss_scale / n_tokens);
    let p = split(weights.values(), cfg);
    let rope = Rope::new(batch.seq_len(), cfg.head_dim);
    let per_row = exec.map(batch.rows(), |r| {
        let mut g = vec![T::zero(); weights.len()];
        let loss = row_backward(&p, &mut split_mut(&mut g, cfg), cfg, &rope, batch.inputs(r), batch.targets(r), scale);
        (loss, g)
    });
    let mut total = 0.0;
    let mut grad = WeightVector::zeros(weights.layout().clone());
    for (loss, g) in per_row {
        total += loss;
        for (a, b) in grad.values_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    Ok((total / n_tokens, grad))
}

/// Gradient of the mean token cross-entropy.
pub fn gradients<T: Real>(weights: &WeightVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<WeightVector<T>> {
    gradients_scaled(weights, cfg, batch, 1.0)
}

pub fn gradients_scaled<T: Real>(
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    loss_scale: f64,
) -> Result<WeightVector<T>> {
    loss_and_gradients(Exec::default(), weights, cfg, batch, loss_scale).map(|(_, g)| g)
}

fn row_backward<T: Real>(
    p: &Params<'_, T>,
    g: &mut Grads<'_, T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    inputs: &[u32],
    targets: &[u32],
    scale: T,
) -> f64 {
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let (logits, cache) = row_forward(p, cfg, rope, inputs);
    let (loss, dlogits) = row_xent(&logits, targets, v, Some(scale));
    let s = inputs.len();

    let mut dz = vec![T::zero(); s * d];
    linear_backward(&dlogits, &cache.z, p.head, d, v, Some(&mut dz), g.head);
    let mut dh = vec![T::zero(); s * d];
    rmsnorm_backward(&dz, p.final_norm, &cache.norm_f, &mut dh, g.final_norm);
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        dh = layer_backward(&p.layers[l], &mut g.layers[l], cfg, rope, lc, dh);
    }
    for (t, &tok) in inputs.iter().enumerate() {
        let row = tok as usize;
        axpy(&mut g.embed[row * d..(row + 1) * d], T::one(), &dh[t * d..(t + 1) * d]);
    }
    loss
}

/// Residual-stream activations after block `layer` (0 = embeddings),
/// shaped `rows x seq_len x d_model`.
pub fn hidden_states<T: Real>(
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    layer: usize,
) -> Result<Logits<T>> {
    hidden_states_impl(Exec::default(), weights, cfg, batch, layer, false)
}

/// Like [`hidden_states`] but passed through the model's final RMSNorm,
/// the representation the output head consumes.
pub fn hidden_states_normed<T: Real>(
    exec: Exec,
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    layer: usize,
) -> Result<Logits<T>> {
    hidden_states_impl(exec, weights, cfg, batch, layer, true)
}

fn hidden_states_impl<T: Real>(
    exec: Exec,
    weights: &WeightVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    layer: usize,
    normed: bool,
) -> Result<Logits<T>> {
    check(weights, cfg, batch)?;
    if layer > cfg.n_layers {
        return Err(Error::Domain {
            value: layer as f64,
            domain: "layer in [0, n_layers]",
        });
    }
    let p = split(weights.values(), cfg);
    let rope = Rope::new(batch.seq_len(), cfg.head_dim);
    let rows = exec.map(batch.rows(), |r| {
        let (h, _) = trunk(&p, cfg, &rope, batch.inputs(r), layer);
        if normed {
            rmsnorm(&h, p.final_norm).0
        } else {
            h
        }
    });
    Ok(Logits {
        rows: batch.rows(),
        seq_len: batch.seq_len(),
        width: cfg.d_model,
        values: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            ffw_dim: 12,
            head_dim: 4,
            n_heads: 2,
            vocab_size: 11,
            seq_len: 6,
        }
    }

    fn batch(rows: usize, seed: u32) -> Batch {
        let cfg = tiny();
        let toks = (0..rows * (cfg.seq_len + 1))
            .map(|i| ((i as u32 * 7 + seed * 13 + 3) % 10) as u32)
            .collect();
        Batch::new(rows, cfg.seq_len, toks).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform() {
        let cfg = tiny();
        let mut w = WeightVector::<f64>::init(&cfg, 1);
        w.segment_mut("lm_head").unwrap().fill(0.0);
        let b = batch(2, 0);
        let logits = forward(&w, &cfg, &b).unwrap();
        assert!(logits.values.iter().all(|&x| x == 0.0));
        let targets: Vec<u32> = (0..2).flat_map(|r| b.targets(r).to_vec()).collect();
        let loss = cross_entropy(&logits, &targets).unwrap();
        assert!((loss - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_token_xent() {
        let logits = Logits { rows: 1, seq_len: 1, width: 2, values: vec![0.0f64, 0.0] };
        assert!((cross_entropy(&logits, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&logits, &[2]).is_err());
        let sharp = Logits { rows: 1, seq_len: 1, width: 2, values: vec![60.0f64, 0.0] };
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-20);
    }

    #[test]
    fn row_permutation_equivariance() {
        let cfg = tiny();
        let w = WeightVector::<f32>::init(&cfg, 5);
        let b = batch(3, 1);
        let perm = [2, 0, 1];
        let a = forward(&w, &cfg, &b).unwrap();
        let p = forward(&w, &cfg, &b.permute_rows(&perm)).unwrap();
        for (new_r, &old_r) in perm.iter().enumerate() {
            for t in 0..cfg.seq_len {
                assert_eq!(p.at(new_r, t), a.at(old_r, t));
            }
        }
    }

    #[test]
    fn causal_mask_is_exact() {
        let cfg = tiny();
        let w = WeightVector::<f32>::init(&cfg, 9);
        let b = batch(1, 2);
        let mut toks = b.tokens().to_vec();
        for tok in toks.iter_mut().skip(4) {
            *tok = (*tok + 5) % 10;
        }
        let b2 = Batch::new(1, cfg.seq_len, toks).unwrap();
        let l1 = forward(&w, &cfg, &b).unwrap();
        let l2 = forward(&w, &cfg, &b2).unwrap();
        for t in 0..4 {
            assert_eq!(l1.at(0, t), l2.at(0, t));
        }
        assert_ne!(l1.at(0, 4), l2.at(0, 4));
    }

    #[test]
    fn unused_embedding_row_has_zero_gradient() {
        let cfg = tiny();
        let w = WeightVector::<f64>::init(&cfg, 2);
        let b = batch(2, 0);
        let used: Vec<bool> = (0..cfg.vocab_size)
            .map(|t| (0..2).any(|r| b.inputs(r).contains(&(t as u32))))
            .collect();
        assert!(!used[10]);
        let g = gradients(&w, &cfg, &b).unwrap();
        let emb = g.segment("tok_embed").unwrap();
        assert!(emb[10 * 8..11 * 8].iter().all(|&x| x == 0.0));
        assert!(emb[..8].iter().any(|&x| x != 0.0) || !used[0]);
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let cfg = tiny();
        let w = WeightVector::<f64>::init(&cfg, 2);
        let b = batch(2, 3);
        let g1 = gradients_scaled(&w, &cfg, &b, 1.0).unwrap();
        let g2 = gradients_scaled(&w, &cfg, &b, 2.0).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1e-30));
        }
    }

    #[test]
    fn hidden_state_layers() {
        let cfg = tiny();
        let w = WeightVector::<f32>::init(&cfg, 4);
        let b = batch(2, 0);
        let h0 = hidden_states(&w, &cfg, &b, 0).unwrap();
        let emb = w.segment("tok_embed").unwrap();
        let t = b.inputs(1)[3] as usize;
        assert_eq!(h0.at(1, 3), &emb[t * 8..(t + 1) * 8]);
        let top = hidden_states(&w, &cfg, &b, cfg.n_layers).unwrap();
        assert_eq!(top.values.len(), 2 * cfg.seq_len * cfg.d_model);
        assert!(top.values.iter().all(|x| x.is_finite()));
        assert!(hidden_states(&w, &cfg, &b, 3).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let cfg = tiny();
        let w = WeightVector::<f32>::init(&cfg, 4);
        let b = batch(4, 0);
        let (l1, g1) = loss_and_gradients(Exec::Sequential, &w, &cfg, &b, 1.0).unwrap();
        let (l2, g2) = loss_and_gradients(Exec::Parallel, &w, &cfg, &b, 1.0).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let cfg = tiny();
        let other = ModelConfig { ffw_dim: 16, ..cfg };
        let w = WeightVector::<f32>::init(&other, 0);
        assert!(matches!(forward(&w, &cfg, &batch(1, 0)), Err(Error::Layout(_))));
        let bogus = WeightVector::<f32>::zeros(Arc::new(Layout::single("x", super::super::SegmentKind::Matrix, vec![3])));
        assert!(forward(&bogus, &cfg, &batch(1, 0)).is_err());
    }
}
