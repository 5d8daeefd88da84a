//! Token-at-a-time inference.

use super::ops::{layer_norm, lit, normalize, sigmoid, vec_mat, vec_mat_acc, Real, GN_EPS};
use super::{LayerOffsets, Model, ModelError, State};

/// `exp(-0.5)`: scales the sigmoid so each decay lies in `(exp(-e^-0.5), 1)`.
pub(super) const DECAY_SCALE: f64 = 0.606_530_659_712_633_4;

pub(super) const KK_EPS: f64 = 1e-12;

/// One WKV update for a single head, returning nothing; `s` is `n × n` with
/// value rows and key columns.
#[inline]
pub(super) fn wkv_update<F: Real>(s: &mut [F], w: &[F], kk: &[F], a: &[F], v: &[F], k: &[F], u: &mut [F]) {
    let n = w.len();
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        u[i] = -row.iter().zip(kk).map(|(&x, &y)| x * y).sum::<F>();
    }
    for i in 0..n {
        let row = &mut s[i * n..(i + 1) * n];
        let (ui, vi) = (u[i], v[i]);
        for j in 0..n {
            row[j] = row[j] * w[j] + ui * kk[j] * a[j] + vi * k[j];
        }
    }
}

/// L2-normalizes each `n`-wide head of `x` in place; returns the norms.
pub(super) fn normalize_heads<F: Real>(x: &mut [F], n: usize, norms: &mut [F]) {
    for (h, chunk) in x.chunks_mut(n).enumerate() {
        let norm = chunk.iter().map(|&v| v * v).sum::<F>().sqrt();
        norms[h] = norm;
        let d = norm.max(lit(KK_EPS));
        chunk.iter_mut().for_each(|v| *v = *v / d);
    }
}

impl<F: Real> Model<F> {
    fn p(&self, off: usize, len: usize) -> &[F] {
        &self.params[off..off + len]
    }

    fn time_mix_step(&self, o: &LayerOffsets, x: &[F], st: &mut [F], vfirst: &mut Vec<F>) -> Vec<F> {
        let cfg = &self.cfg;
        let c = cfg.d_model;
        let n = cfg.head_size;
        let prev = st[..c].to_vec();
        st[..c].copy_from_slice(x);
        let mix = |off: usize| -> Vec<F> {
            let mu = self.p(off, c);
            (0..c).map(|i| x[i] + (prev[i] - x[i]) * mu[i]).collect()
        };
        let (xr, xw, xk, xv, xa, xg) = (mix(o.x_r), mix(o.x_w), mix(o.x_k), mix(o.x_v), mix(o.x_a), mix(o.x_g));
        let mut r = vec![F::zero(); c];
        let mut k0 = vec![F::zero(); c];
        let mut v = vec![F::zero(); c];
        vec_mat(&xr, self.p(o.wr, c * c), &mut r);
        vec_mat(&xk, self.p(o.wk, c * c), &mut k0);
        vec_mat(&xv, self.p(o.wv, c * c), &mut v);

        let low_rank = |xin: &[F], a1: usize, a2: usize, d: usize, inner: &dyn Fn(F) -> F| -> Vec<F> {
            let mut hidden = vec![F::zero(); d];
            vec_mat(xin, self.p(a1, c * d), &mut hidden);
            hidden.iter_mut().for_each(|h| *h = inner(*h));
            let mut out = vec![F::zero(); c];
            vec_mat(&hidden, self.p(a2, d * c), &mut out);
            out
        };
        let ident = |h: F| h;
        let wl = low_rank(&xw, o.w1, o.w2, cfg.d_decay(), &|h: F| h.tanh());
        let w0 = self.p(o.w0, c);
        let w: Vec<F> = (0..c)
            .map(|i| (-lit::<F>(DECAY_SCALE) * sigmoid(w0[i] + wl[i])).exp())
            .collect();
        if let (Some(v0), Some(v1), Some(v2)) = (o.v0, o.v1, o.v2) {
            let vl = low_rank(&xv, v1, v2, cfg.d_mv(), &ident);
            let v0 = self.p(v0, c);
            for i in 0..c {
                let gate = sigmoid(v0[i] + vl[i]);
                v[i] = v[i] + (vfirst[i] - v[i]) * gate;
            }
        } else {
            *vfirst = v.clone();
        }
        let al = low_rank(&xa, o.a1, o.a2, cfg.d_aaa(), &ident);
        let a0 = self.p(o.a0, c);
        let a: Vec<F> = (0..c).map(|i| sigmoid(a0[i] + al[i])).collect();
        let g = low_rank(&xg, o.g1, o.g2, cfg.d_gate(), &|h: F| sigmoid(h));

        let (k_k, k_a) = (self.p(o.k_k, c), self.p(o.k_a, c));
        let mut kk: Vec<F> = (0..c).map(|i| k0[i] * k_k[i]).collect();
        let mut norms = vec![F::zero(); cfg.n_heads()];
        normalize_heads(&mut kk, n, &mut norms);
        let k: Vec<F> = (0..c).map(|i| k0[i] * (F::one() + (a[i] - F::one()) * k_a[i])).collect();

        let r_k = self.p(o.r_k, c);
        let (lnx_w, lnx_b) = (self.p(o.lnx_w, c), self.p(o.lnx_b, c));
        let wkv = &mut st[2 * c..];
        let mut out = vec![F::zero(); c];
        let mut u = vec![F::zero(); n];
        let mut y = vec![F::zero(); n];
        let mut yn = vec![F::zero(); n];
        for h in 0..cfg.n_heads() {
            let hs = h * n..(h + 1) * n;
            let s = &mut wkv[h * n * n..(h + 1) * n * n];
            wkv_update(s, &w[hs.clone()], &kk[hs.clone()], &a[hs.clone()], &v[hs.clone()], &k[hs.clone()], &mut u);
            for i in 0..n {
                y[i] = s[i * n..(i + 1) * n].iter().zip(&r[hs.clone()]).map(|(&x, &y)| x * y).sum();
            }
            normalize(&y, lit(GN_EPS), &mut yn);
            let bonus: F = hs.clone().map(|j| r[j] * k[j] * r_k[j]).sum();
            for (i, ch) in hs.enumerate() {
                out[ch] = (yn[i] * lnx_w[ch] + lnx_b[ch] + bonus * v[ch]) * g[ch];
            }
        }
        let mut res = vec![F::zero(); c];
        vec_mat(&out, self.p(o.wo, c * c), &mut res);
        res
    }

    fn channel_mix_step(&self, o: &LayerOffsets, x: &[F], shift: &mut [F]) -> Vec<F> {
        let c = self.cfg.d_model;
        let f = self.cfg.d_ffn;
        let mu = self.p(o.ffn_x_k, c);
        let kx: Vec<F> = (0..c).map(|i| x[i] + (shift[i] - x[i]) * mu[i]).collect();
        shift.copy_from_slice(x);
        let mut hk = vec![F::zero(); f];
        vec_mat(&kx, self.p(o.ffn_key, c * f), &mut hk);
        hk.iter_mut().for_each(|h| {
            let r = h.max(F::zero());
            *h = r * r;
        });
        let mut out = vec![F::zero(); c];
        vec_mat_acc(&hk, self.p(o.ffn_value, f * c), &mut out);
        out
    }

    /// Final hidden vector (after the output norm) for one token.
    pub fn hidden_step(&self, token: u32, state: &mut State<F>) -> Result<Vec<F>, ModelError> {
        self.check_tokens(&[token])?;
        if state.cfg != self.cfg {
            return Err(ModelError::Shape("state belongs to another config".into()));
        }
        let c = self.cfg.d_model;
        let lay = self.layout.clone();
        let row = lay.emb + token as usize * c;
        let mut xn = vec![F::zero(); c];
        let mut x = vec![F::zero(); c];
        layer_norm(self.p(row, c), self.p(lay.ln0_w, c), self.p(lay.ln0_b, c), &mut xn, &mut x);
        let mut vfirst = Vec::new();
        let mut h = vec![F::zero(); c];
        for (l, o) in lay.layers.iter().enumerate() {
            let st = state.layer_mut(l);
            layer_norm(&x, self.p(o.ln1_w, c), self.p(o.ln1_b, c), &mut xn, &mut h);
            let att = self.time_mix_step(o, &h, st, &mut vfirst);
            x.iter_mut().zip(&att).for_each(|(a, b)| *a = *a + *b);
            layer_norm(&x, self.p(o.ln2_w, c), self.p(o.ln2_b, c), &mut xn, &mut h);
            let ffn = self.channel_mix_step(o, &h, &mut st[c..2 * c]);
            x.iter_mut().zip(&ffn).for_each(|(a, b)| *a = *a + *b);
        }
        let mut out = vec![F::zero(); c];
        layer_norm(&x, self.p(lay.ln_out_w, c), self.p(lay.ln_out_b, c), &mut xn, &mut out);
        Ok(out)
    }

    /// Next-token logits after feeding `token`; advances `state`.
    pub fn forward_step(&self, token: u32, state: &mut State<F>) -> Result<Vec<F>, ModelError> {
        let hidden = self.hidden_step(token, state)?;
        Ok(self.head_logits(&hidden))
    }

    pub(super) fn head_logits(&self, hidden: &[F]) -> Vec<F> {
        let c = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let mut logits = vec![F::zero(); v];
        vec_mat(hidden, self.p(self.layout.head, c * v), &mut logits);
        logits
    }

    /// Feeds a prefix without computing logits.
    pub fn absorb(&self, ids: &[u32], state: &mut State<F>) -> Result<(), ModelError> {
        for &id in ids {
            self.hidden_step(id, state)?;
        }
        Ok(())
    }

    /// Mean cross-entropy over masked targets, computed token by token in
    /// memory independent of the sequence length. Mask conventions follow
    /// [`Model::loss_and_grads`].
    pub fn sequence_loss(&self, ids: &[u32], mask: &[bool], state0: Option<&State<F>>) -> Result<F, ModelError> {
        super::tape::check_mask(ids, mask)?;
        let mut state = state0.cloned().unwrap_or_else(|| State::zeros(&self.cfg));
        let mut total = F::zero();
        let mut count = 0usize;
        for t in 0..ids.len() {
            let need = t + 1 < ids.len() && mask[t + 1];
            if need {
                let logits = self.forward_step(ids[t], &mut state)?;
                total = total + super::ops::cross_entropy(&logits, ids[t + 1] as usize, F::one(), None);
                count += 1;
            } else {
                self.hidden_step(ids[t], &mut state)?;
            }
        }
        Ok(total / lit(count as f64))
    }
}
