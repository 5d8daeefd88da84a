//! Whole-sequence forward pass with cached activations, and its exact
//! reverse-mode gradient.
//!
//! The forward runs layer by layer so every projection is one matrix product
//! over the sequence. WKV matrices are kept only every [`CHUNK`] steps; the
//! backward scan recomputes each chunk from its checkpoint.

use super::ops::{
    cross_entropy, layer_norm, layer_norm_backward, lit, matmul, matmul_at_acc, matmul_bt_acc, normalize,
    normalize_backward, sigmoid, Real, GN_EPS,
};
use super::step::{normalize_heads, wkv_update, DECAY_SCALE, KK_EPS};
use super::{LayerOffsets, Model, ModelError, State};

const CHUNK: usize = 16;

/// Which gradients [`Model::loss_and_grads`] accumulates. Activation
/// gradients always flow through every layer; skipping parameter gradients
/// saves the weight-gradient products when only the state is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Need {
    pub params: bool,
    pub state: bool,
}

impl Need {
    pub const ALL: Need = Need { params: true, state: true };
    pub const PARAMS: Need = Need { params: true, state: false };
    pub const STATE: Need = Need { params: false, state: true };
}

#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub loss: F,
    /// Number of masked target positions averaged over.
    pub targets: usize,
    /// Same layout as the parameter vector; empty when not requested.
    pub params: Vec<F>,
    /// Same layout as [`State::data`]; empty when not requested.
    pub state: Vec<F>,
}

/// `mask[t]` marks `ids[t]` as a target predicted from position `t - 1`, so
/// `mask[0]` must be false. Returns the number of targets.
pub(super) fn check_mask(ids: &[u32], mask: &[bool]) -> Result<usize, ModelError> {
    if mask.len() != ids.len() {
        return Err(ModelError::Shape(format!("mask has {} entries for {} ids", mask.len(), ids.len())));
    }
    if mask.first() == Some(&true) {
        return Err(ModelError::Shape("the first token has no predecessor and cannot be a target".into()));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(ModelError::EmptyMask),
        n => Ok(n),
    }
}

#[derive(Default)]
struct LayerTape<F> {
    xn1: Vec<F>,
    rstd1: Vec<F>,
    h: Vec<F>,
    xx: Vec<F>,
    /// Shifted inputs in the order r, w, k, v, a, g.
    xz: [Vec<F>; 6],
    r: Vec<F>,
    k0: Vec<F>,
    vraw: Vec<F>,
    wl: Vec<F>,
    ws: Vec<F>,
    w: Vec<F>,
    vl: Vec<F>,
    vg: Vec<F>,
    al: Vec<F>,
    a: Vec<F>,
    gl: Vec<F>,
    g: Vec<F>,
    kk: Vec<F>,
    knorm: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    s_ckpt: Vec<Vec<F>>,
    yn: Vec<F>,
    grstd: Vec<F>,
    o: Vec<F>,
    bsum: Vec<F>,
    xn2: Vec<F>,
    rstd2: Vec<F>,
    f: Vec<F>,
    fxx: Vec<F>,
    kx: Vec<F>,
    hk: Vec<F>,
}

struct Tape<F> {
    xn0: Vec<F>,
    rstd0: Vec<F>,
    layers: Vec<LayerTape<F>>,
    vfirst: Vec<F>,
    /// Residual stream after the last layer.
    x_out: Vec<F>,
}

fn zeros<F: Real>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

impl<F: Real> Model<F> {
    fn w(&self, off: usize, len: usize) -> &[F] {
        &self.params[off..off + len]
    }

    fn mixes(o: &LayerOffsets) -> [usize; 6] {
        [o.x_r, o.x_w, o.x_k, o.x_v, o.x_a, o.x_g]
    }

    fn time_mix_forward(&self, o: &LayerOffsets, tp: &mut LayerTape<F>, st: &mut [F], vfirst: &mut Vec<F>) -> Vec<F> {
        let cfg = &self.cfg;
        let (c, n, nh) = (cfg.d_model, cfg.head_size, cfg.n_heads());
        let t_len = tp.h.len() / c;
        let h = &tp.h;
        tp.xx = zeros(t_len * c);
        for t in 0..t_len {
            for i in 0..c {
                let prev = if t == 0 { st[i] } else { h[(t - 1) * c + i] };
                tp.xx[t * c + i] = prev - h[t * c + i];
            }
        }
        if t_len > 0 {
            st[..c].copy_from_slice(&h[(t_len - 1) * c..]);
        }
        for (z, &off) in Self::mixes(o).iter().enumerate() {
            let mu = self.w(off, c);
            tp.xz[z] = (0..t_len * c).map(|j| h[j] + tp.xx[j] * mu[j % c]).collect();
        }
        let proj = |x: &[F], off: usize, din: usize, dout: usize| -> Vec<F> {
            let mut y: Vec<F> = zeros(t_len * dout);
            matmul(x, self.w(off, din * dout), din, dout, &mut y);
            y
        };
        tp.r = proj(&tp.xz[0], o.wr, c, c);
        tp.k0 = proj(&tp.xz[2], o.wk, c, c);
        tp.vraw = proj(&tp.xz[3], o.wv, c, c);

        let dd = cfg.d_decay();
        tp.wl = proj(&tp.xz[1], o.w1, c, dd);
        tp.wl.iter_mut().for_each(|v| *v = v.tanh());
        let pre = proj(&tp.wl, o.w2, dd, c);
        let w0 = self.w(o.w0, c);
        tp.ws = (0..t_len * c).map(|j| sigmoid(w0[j % c] + pre[j])).collect();
        tp.w = tp.ws.iter().map(|&s| (-lit::<F>(DECAY_SCALE) * s).exp()).collect();

        if let (Some(v0), Some(v1), Some(v2)) = (o.v0, o.v1, o.v2) {
            let dm = cfg.d_mv();
            tp.vl = proj(&tp.xz[3], v1, c, dm);
            let pre = proj(&tp.vl, v2, dm, c);
            let v0 = self.w(v0, c);
            tp.vg = (0..t_len * c).map(|j| sigmoid(v0[j % c] + pre[j])).collect();
            tp.v = (0..t_len * c)
                .map(|j| tp.vraw[j] + (vfirst[j] - tp.vraw[j]) * tp.vg[j])
                .collect();
        } else {
            tp.v = tp.vraw.clone();
            *vfirst = tp.v.clone();
        }

        let da = cfg.d_aaa();
        tp.al = proj(&tp.xz[4], o.a1, c, da);
        let pre = proj(&tp.al, o.a2, da, c);
        let a0 = self.w(o.a0, c);
        tp.a = (0..t_len * c).map(|j| sigmoid(a0[j % c] + pre[j])).collect();

        let dg = cfg.d_gate();
        tp.gl = proj(&tp.xz[5], o.g1, c, dg);
        tp.gl.iter_mut().for_each(|v| *v = sigmoid(*v));
        tp.g = proj(&tp.gl, o.g2, dg, c);

        let (k_k, k_a) = (self.w(o.k_k, c), self.w(o.k_a, c));
        tp.kk = (0..t_len * c).map(|j| tp.k0[j] * k_k[j % c]).collect();
        tp.knorm = zeros(t_len * nh);
        for t in 0..t_len {
            normalize_heads(&mut tp.kk[t * c..(t + 1) * c], n, &mut tp.knorm[t * nh..(t + 1) * nh]);
        }
        tp.k = (0..t_len * c)
            .map(|j| tp.k0[j] * (F::one() + (tp.a[j] - F::one()) * k_a[j % c]))
            .collect();

        let r_k = self.w(o.r_k, c);
        let (lnx_w, lnx_b) = (self.w(o.lnx_w, c), self.w(o.lnx_b, c));
        tp.yn = zeros(t_len * c);
        tp.grstd = zeros(t_len * nh);
        tp.o = zeros(t_len * c);
        tp.bsum = zeros(t_len * nh);
        tp.s_ckpt.clear();
        let wkv = &mut st[2 * c..];
        let mut u: Vec<F> = zeros(n);
        let mut y: Vec<F> = zeros(n);
        for t in 0..t_len {
            if t % CHUNK == 0 {
                tp.s_ckpt.push(wkv.to_vec());
            }
            for hd in 0..nh {
                let hs = t * c + hd * n..t * c + (hd + 1) * n;
                let s = &mut wkv[hd * n * n..(hd + 1) * n * n];
                wkv_update(s, &tp.w[hs.clone()], &tp.kk[hs.clone()], &tp.a[hs.clone()], &tp.v[hs.clone()], &tp.k[hs.clone()], &mut u);
                let r = &tp.r[hs.clone()];
                for i in 0..n {
                    y[i] = s[i * n..(i + 1) * n].iter().zip(r).map(|(&a, &b)| a * b).sum();
                }
                tp.grstd[t * nh + hd] = normalize(&y, lit(GN_EPS), &mut tp.yn[hs.clone()]);
                let bonus: F = (0..n).map(|j| tp.r[hs.start + j] * tp.k[hs.start + j] * r_k[hd * n + j]).sum();
                tp.bsum[t * nh + hd] = bonus;
                for j in 0..n {
                    let (idx, ch) = (hs.start + j, hd * n + j);
                    tp.o[idx] = tp.yn[idx] * lnx_w[ch] + lnx_b[ch] + bonus * tp.v[idx];
                }
            }
        }
        let og: Vec<F> = tp.o.iter().zip(&tp.g).map(|(&a, &b)| a * b).collect();
        proj(&og, o.wo, c, c)
    }

    fn channel_mix_forward(&self, o: &LayerOffsets, tp: &mut LayerTape<F>, shift: &mut [F]) -> Vec<F> {
        let (c, fd) = (self.cfg.d_model, self.cfg.d_ffn);
        let t_len = tp.f.len() / c;
        let f = &tp.f;
        tp.fxx = (0..t_len * c)
            .map(|j| {
                let prev = if j < c { shift[j] } else { f[j - c] };
                prev - f[j]
            })
            .collect();
        if t_len > 0 {
            shift.copy_from_slice(&f[(t_len - 1) * c..]);
        }
        let mu = self.w(o.ffn_x_k, c);
        tp.kx = (0..t_len * c).map(|j| f[j] + tp.fxx[j] * mu[j % c]).collect();
        tp.hk = zeros(t_len * fd);
        matmul(&tp.kx, self.w(o.ffn_key, c * fd), c, fd, &mut tp.hk);
        let z: Vec<F> = tp.hk.iter().map(|&v| v.max(F::zero()) * v.max(F::zero())).collect();
        let mut out: Vec<F> = zeros(t_len * c);
        matmul(&z, self.w(o.ffn_value, fd * c), fd, c, &mut out);
        out
    }

    fn run(&self, ids: &[u32], state: &mut State<F>) -> Result<Tape<F>, ModelError> {
        self.check_tokens(ids)?;
        if state.cfg != self.cfg {
            return Err(ModelError::Shape("state belongs to another config".into()));
        }
        let c = self.cfg.d_model;
        let t_len = ids.len();
        let lay = self.layout.clone();
        let mut xn0: Vec<F> = zeros(t_len * c);
        let mut rstd0: Vec<F> = zeros(t_len);
        let mut x: Vec<F> = zeros(t_len * c);
        for (t, &id) in ids.iter().enumerate() {
            let row = self.w(lay.emb + id as usize * c, c);
            let sl = t * c..(t + 1) * c;
            rstd0[t] = layer_norm(row, self.w(lay.ln0_w, c), self.w(lay.ln0_b, c), &mut xn0[sl.clone()], &mut x[sl]);
        }
        let mut vfirst = Vec::new();
        let mut layers = Vec::with_capacity(lay.layers.len());
        for (l, o) in lay.layers.iter().enumerate() {
            let mut tp = LayerTape::<F> {
                xn1: zeros(t_len * c),
                rstd1: zeros(t_len),
                h: zeros(t_len * c),
                xn2: zeros(t_len * c),
                rstd2: zeros(t_len),
                f: zeros(t_len * c),
                ..Default::default()
            };
            for t in 0..t_len {
                let sl = t * c..(t + 1) * c;
                tp.rstd1[t] = layer_norm(&x[sl.clone()], self.w(o.ln1_w, c), self.w(o.ln1_b, c), &mut tp.xn1[sl.clone()], &mut tp.h[sl]);
            }
            let st = state.layer_mut(l);
            let att = self.time_mix_forward(o, &mut tp, st, &mut vfirst);
            x.iter_mut().zip(&att).for_each(|(a, b)| *a = *a + *b);
            for t in 0..t_len {
                let sl = t * c..(t + 1) * c;
                tp.rstd2[t] = layer_norm(&x[sl.clone()], self.w(o.ln2_w, c), self.w(o.ln2_b, c), &mut tp.xn2[sl.clone()], &mut tp.f[sl]);
            }
            let ffn = self.channel_mix_forward(o, &mut tp, &mut st[c..2 * c]);
            x.iter_mut().zip(&ffn).for_each(|(a, b)| *a = *a + *b);
            layers.push(tp);
        }
        Ok(Tape {
            xn0,
            rstd0,
            layers,
            vfirst,
            x_out: x,
        })
    }

    /// Logits at every position for a whole sequence, and the state after it.
    pub fn forward_sequence(&self, ids: &[u32], state0: Option<&State<F>>) -> Result<(Vec<Vec<F>>, State<F>), ModelError> {
        let mut state = state0.cloned().unwrap_or_else(|| State::zeros(&self.cfg));
        let tape = self.run(ids, &mut state)?;
        let c = self.cfg.d_model;
        let lay = &self.layout;
        let mut xn: Vec<F> = zeros(c);
        let mut hid: Vec<F> = zeros(c);
        let logits = (0..ids.len())
            .map(|t| {
                layer_norm(&tape.x_out[t * c..(t + 1) * c], self.w(lay.ln_out_w, c), self.w(lay.ln_out_b, c), &mut xn, &mut hid);
                self.head_logits(&hid)
            })
            .collect();
        Ok((logits, state))
    }

    /// Mean cross-entropy over the masked targets and its gradient.
    ///
    /// `mask[t]` selects `ids[t]` as a target predicted from position `t - 1`;
    /// `mask[0]` must be false and at least one entry must be set. The initial
    /// state defaults to zeros.
    pub fn loss_and_grads(&self, ids: &[u32], mask: &[bool], state0: Option<&State<F>>, need: Need) -> Result<Gradients<F>, ModelError> {
        let count = check_mask(ids, mask)?;
        let mut state = state0.cloned().unwrap_or_else(|| State::zeros(&self.cfg));
        let tape = self.run(ids, &mut state)?;
        let c = self.cfg.d_model;
        let vsz = self.cfg.vocab_size;
        let t_len = ids.len();
        let lay = self.layout.clone();
        let mut gp: Vec<F> = zeros(if need.params { lay.total } else { 0 });
        let mut gs: Vec<F> = zeros(self.cfg.state_len());
        let np = need.params;

        // Output head.
        let scale = F::one() / lit(count as f64);
        let mut dx: Vec<F> = zeros(t_len * c);
        let mut loss = F::zero();
        let (mut xn, mut hid, mut dl, mut scratch) = (zeros(c), zeros(c), zeros(vsz), zeros(c));
        let mut dhid: Vec<F> = zeros(c);
        let mut g_out: Vec<F> = zeros(2 * c);
        let mut g_head: Vec<F> = zeros(if np { c * vsz } else { 0 });
        for t in 0..t_len.saturating_sub(1) {
            if !mask[t + 1] {
                continue;
            }
            let sl = t * c..(t + 1) * c;
            let rstd = layer_norm(&tape.x_out[sl.clone()], self.w(lay.ln_out_w, c), self.w(lay.ln_out_b, c), &mut xn, &mut hid);
            let logits = self.head_logits(&hid);
            loss = loss + scale * cross_entropy(&logits, ids[t + 1] as usize, scale, Some(&mut dl));
            dhid.iter_mut().for_each(|v| *v = F::zero());
            super::ops::mat_vec_acc(self.w(lay.head, c * vsz), &dl, &mut dhid);
            if np {
                super::ops::outer_acc(&hid, &dl, &mut g_head);
            }
            let (gw, gb) = g_out.split_at_mut(c);
            layer_norm_backward(&xn, rstd, self.w(lay.ln_out_w, c), &dhid, &mut dx[sl], Some(gw), Some(gb), &mut scratch);
        }
        if np {
            gp[lay.head..lay.head + c * vsz].copy_from_slice(&g_head);
            gp[lay.ln_out_w..lay.ln_out_w + 2 * c].copy_from_slice(&g_out);
        }

        let mut dvfirst: Vec<F> = zeros(t_len * c);
        let mut state_grad: Vec<F> = zeros(self.cfg.state_layer_len());
        for l in (0..lay.layers.len()).rev() {
            state_grad.iter_mut().for_each(|v| *v = F::zero());
            let o = &lay.layers[l];
            self.backward_layer(o, &tape.layers[l], &tape.vfirst, &mut dx, &mut dvfirst, &mut gp, &mut state_grad, np);
            let n = self.cfg.state_layer_len();
            gs[l * n..(l + 1) * n].copy_from_slice(&state_grad);
        }

        if np {
            let mut gln0: Vec<F> = zeros(2 * c);
            let mut demb: Vec<F> = zeros(c);
            for t in 0..t_len {
                let sl = t * c..(t + 1) * c;
                demb.iter_mut().for_each(|v| *v = F::zero());
                let (gw, gb) = gln0.split_at_mut(c);
                layer_norm_backward(&tape.xn0[sl.clone()], tape.rstd0[t], self.w(lay.ln0_w, c), &dx[sl], &mut demb, Some(gw), Some(gb), &mut scratch);
                let row = lay.emb + ids[t] as usize * c;
                for i in 0..c {
                    gp[row + i] = gp[row + i] + demb[i];
                }
            }
            for i in 0..2 * c {
                gp[lay.ln0_w + i] = gp[lay.ln0_w + i] + gln0[i];
            }
        }

        Ok(Gradients {
            loss,
            targets: count,
            params: gp,
            state: if need.state { gs } else { Vec::new() },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer(
        &self,
        o: &LayerOffsets,
        tp: &LayerTape<F>,
        vfirst: &[F],
        dx: &mut [F],
        dvfirst: &mut [F],
        gp: &mut [F],
        gs: &mut [F],
        np: bool,
    ) {
        let cfg = &self.cfg;
        let (c, n, nh, fd) = (cfg.d_model, cfg.head_size, cfg.n_heads(), cfg.d_ffn);
        let t_len = dx.len() / c;
        let mut scratch: Vec<F> = zeros(c);

        // Channel mix.
        let z: Vec<F> = tp.hk.iter().map(|&v| v.max(F::zero()) * v.max(F::zero())).collect();
        if np {
            matmul_at_acc(&z, dx, fd, c, &mut gp[o.ffn_value..o.ffn_value + fd * c]);
        }
        let mut dhk: Vec<F> = zeros(t_len * fd);
        matmul_bt_acc(dx, self.w(o.ffn_value, fd * c), fd, c, &mut dhk);
        for (d, &v) in dhk.iter_mut().zip(&tp.hk) {
            *d = *d * lit::<F>(2.0) * v.max(F::zero());
        }
        if np {
            matmul_at_acc(&tp.kx, &dhk, c, fd, &mut gp[o.ffn_key..o.ffn_key + c * fd]);
        }
        let mut dkx: Vec<F> = zeros(t_len * c);
        matmul_bt_acc(&dhk, self.w(o.ffn_key, c * fd), c, fd, &mut dkx);
        let mu = self.w(o.ffn_x_k, c);
        let mut df: Vec<F> = zeros(t_len * c);
        for t in 0..t_len {
            for i in 0..c {
                let j = t * c + i;
                if np {
                    gp[o.ffn_x_k + i] = gp[o.ffn_x_k + i] + dkx[j] * tp.fxx[j];
                }
                df[j] = df[j] + dkx[j] * (F::one() - mu[i]);
                let dp = dkx[j] * mu[i];
                if t == 0 {
                    gs[c + i] = gs[c + i] + dp;
                } else {
                    df[j - c] = df[j - c] + dp;
                }
            }
        }
        let mut gln: Vec<F> = zeros(2 * c);
        for t in 0..t_len {
            let sl = t * c..(t + 1) * c;
            let (gw, gb) = gln.split_at_mut(c);
            layer_norm_backward(&tp.xn2[sl.clone()], tp.rstd2[t], self.w(o.ln2_w, c), &df[sl.clone()], &mut dx[sl], Some(gw), Some(gb), &mut scratch);
        }
        if np {
            for i in 0..2 * c {
                gp[o.ln2_w + i] = gp[o.ln2_w + i] + gln[i];
            }
        }

        // Time mix: output projection, gate, group norm and bonus.
        let og: Vec<F> = tp.o.iter().zip(&tp.g).map(|(&a, &b)| a * b).collect();
        if np {
            matmul_at_acc(&og, dx, c, c, &mut gp[o.wo..o.wo + c * c]);
        }
        let mut dog: Vec<F> = zeros(t_len * c);
        matmul_bt_acc(dx, self.w(o.wo, c * c), c, c, &mut dog);
        let d_o: Vec<F> = dog.iter().zip(&tp.g).map(|(&a, &b)| a * b).collect();
        let dg: Vec<F> = dog.iter().zip(&tp.o).map(|(&a, &b)| a * b).collect();
        let r_k = self.w(o.r_k, c);
        let lnx_w = self.w(o.lnx_w, c);
        let mut dr: Vec<F> = zeros(t_len * c);
        let mut dk: Vec<F> = zeros(t_len * c);
        let mut dv: Vec<F> = zeros(t_len * c);
        let mut dy: Vec<F> = zeros(t_len * c);
        let mut dyn_: Vec<F> = zeros(n);
        for t in 0..t_len {
            for hd in 0..nh {
                let base = t * c + hd * n;
                let bsum = tp.bsum[t * nh + hd];
                let mut dbsum = F::zero();
                for j in 0..n {
                    let (idx, ch) = (base + j, hd * n + j);
                    dbsum = dbsum + d_o[idx] * tp.v[idx];
                    dv[idx] = dv[idx] + d_o[idx] * bsum;
                    if np {
                        gp[o.lnx_w + ch] = gp[o.lnx_w + ch] + d_o[idx] * tp.yn[idx];
                        gp[o.lnx_b + ch] = gp[o.lnx_b + ch] + d_o[idx];
                    }
                    dyn_[j] = d_o[idx] * lnx_w[ch];
                }
                for j in 0..n {
                    let (idx, ch) = (base + j, hd * n + j);
                    dr[idx] = dr[idx] + dbsum * tp.k[idx] * r_k[ch];
                    dk[idx] = dk[idx] + dbsum * tp.r[idx] * r_k[ch];
                    if np {
                        gp[o.r_k + ch] = gp[o.r_k + ch] + dbsum * tp.r[idx] * tp.k[idx];
                    }
                }
                normalize_backward(&tp.yn[base..base + n], tp.grstd[t * nh + hd], &dyn_, &mut dy[base..base + n]);
            }
        }

        // Reverse WKV scan, one chunk at a time.
        let mut dw: Vec<F> = zeros(t_len * c);
        let mut dalpha: Vec<F> = zeros(t_len * c);
        let mut dbeta: Vec<F> = zeros(t_len * c);
        let nn = n * n;
        let mut ds: Vec<F> = zeros(nh * nn);
        let mut buf: Vec<Vec<F>> = Vec::new();
        let mut u: Vec<F> = zeros(n);
        let mut q: Vec<F> = zeros(n);
        for (ci, ckpt) in tp.s_ckpt.iter().enumerate().rev() {
            let c0 = ci * CHUNK;
            let c1 = (c0 + CHUNK).min(t_len);
            buf.clear();
            buf.push(ckpt.clone());
            for t in c0..c1 {
                let mut s = buf.last().unwrap().clone();
                for hd in 0..nh {
                    let hs = t * c + hd * n..t * c + (hd + 1) * n;
                    wkv_update(&mut s[hd * nn..(hd + 1) * nn], &tp.w[hs.clone()], &tp.kk[hs.clone()], &tp.a[hs.clone()], &tp.v[hs.clone()], &tp.k[hs], &mut u);
                }
                buf.push(s);
            }
            for t in (c0..c1).rev() {
                let s_new = &buf[t - c0 + 1];
                let s_old = &buf[t - c0];
                for hd in 0..nh {
                    let base = t * c + hd * n;
                    let sn = &s_new[hd * nn..(hd + 1) * nn];
                    let so = &s_old[hd * nn..(hd + 1) * nn];
                    let dsh = &mut ds[hd * nn..(hd + 1) * nn];
                    let r = &tp.r[base..base + n];
                    let dyh = &dy[base..base + n];
                    for i in 0..n {
                        let row = &sn[i * n..(i + 1) * n];
                        let drow = &mut dsh[i * n..(i + 1) * n];
                        for j in 0..n {
                            dr[base + j] = dr[base + j] + row[j] * dyh[i];
                            drow[j] = drow[j] + dyh[i] * r[j];
                        }
                    }
                    let kk = &tp.kk[base..base + n];
                    let a = &tp.a[base..base + n];
                    let w = &tp.w[base..base + n];
                    let k = &tp.k[base..base + n];
                    let v = &tp.v[base..base + n];
                    for i in 0..n {
                        let row = &so[i * n..(i + 1) * n];
                        // u = S_prev α with α = -κ̂
                        u[i] = -row.iter().zip(kk).map(|(&x, &y)| x * y).sum::<F>();
                        let drow = &dsh[i * n..(i + 1) * n];
                        q[i] = (0..n).map(|j| drow[j] * kk[j] * a[j]).sum();
                        dv[base + i] = dv[base + i] + (0..n).map(|j| drow[j] * k[j]).sum::<F>();
                    }
                    for i in 0..n {
                        let row = &so[i * n..(i + 1) * n];
                        let drow = &mut dsh[i * n..(i + 1) * n];
                        for j in 0..n {
                            let idx = base + j;
                            dk[idx] = dk[idx] + drow[j] * v[i];
                            dbeta[idx] = dbeta[idx] + drow[j] * u[i];
                            dalpha[idx] = dalpha[idx] + row[j] * q[i];
                            dw[idx] = dw[idx] + drow[j] * row[j];
                            drow[j] = drow[j] * w[j] - q[i] * kk[j];
                        }
                    }
                }
            }
        }
        for hd in 0..nh {
            for e in 0..nn {
                gs[2 * c + hd * nn + e] = gs[2 * c + hd * nn + e] + ds[hd * nn + e];
            }
        }

        // Key paths.
        let (k_k, k_a) = (self.w(o.k_k, c), self.w(o.k_a, c));
        let mut da: Vec<F> = zeros(t_len * c);
        let mut dkk: Vec<F> = zeros(t_len * c);
        let mut dk0: Vec<F> = zeros(t_len * c);
        for j in 0..t_len * c {
            let ch = j % c;
            dkk[j] = -dalpha[j] + dbeta[j] * tp.a[j];
            da[j] = dbeta[j] * tp.kk[j] + dk[j] * tp.k0[j] * k_a[ch];
            dk0[j] = dk[j] * (F::one() + (tp.a[j] - F::one()) * k_a[ch]);
            if np {
                gp[o.k_a + ch] = gp[o.k_a + ch] + dk[j] * tp.k0[j] * (tp.a[j] - F::one());
            }
        }
        for t in 0..t_len {
            for hd in 0..nh {
                let base = t * c + hd * n;
                let norm = tp.knorm[t * nh + hd];
                let kk = &tp.kk[base..base + n];
                let g = &dkk[base..base + n];
                let (dot, denom) = if norm > lit(KK_EPS) {
                    (kk.iter().zip(g).map(|(&a, &b)| a * b).sum::<F>(), norm)
                } else {
                    (F::zero(), lit(KK_EPS))
                };
                for j in 0..n {
                    let idx = base + j;
                    let dkr = (g[j] - kk[j] * dot) / denom;
                    let ch = hd * n + j;
                    dk0[idx] = dk0[idx] + dkr * k_k[ch];
                    if np {
                        gp[o.k_k + ch] = gp[o.k_k + ch] + dkr * tp.k0[idx];
                    }
                }
            }
        }

        let mut dxz: [Vec<F>; 6] = Default::default();
        for d in dxz.iter_mut() {
            *d = zeros(t_len * c);
        }

        // In-context rate.
        let dpre: Vec<F> = (0..t_len * c).map(|j| da[j] * tp.a[j] * (F::one() - tp.a[j])).collect();
        self.low_rank_backward(&dpre, o.a0, o.a1, o.a2, cfg.d_aaa(), &tp.al, &tp.xz[4], None, &mut dxz[4], gp, np);

        // Output gate: g = σ(x G1) G2.
        let dgd = cfg.d_gate();
        if np {
            matmul_at_acc(&tp.gl, &dg, dgd, c, &mut gp[o.g2..o.g2 + dgd * c]);
        }
        let mut dgl: Vec<F> = zeros(t_len * dgd);
        matmul_bt_acc(&dg, self.w(o.g2, dgd * c), dgd, c, &mut dgl);
        for (d, &s) in dgl.iter_mut().zip(&tp.gl) {
            *d = *d * s * (F::one() - s);
        }
        if np {
            matmul_at_acc(&tp.xz[5], &dgl, c, dgd, &mut gp[o.g1..o.g1 + c * dgd]);
        }
        matmul_bt_acc(&dgl, self.w(o.g1, c * dgd), c, dgd, &mut dxz[5]);

        // Value and value residual.
        let mut dvraw: Vec<F> = zeros(t_len * c);
        if let (Some(v0), Some(v1), Some(v2)) = (o.v0, o.v1, o.v2) {
            let mut dpre: Vec<F> = zeros(t_len * c);
            for j in 0..t_len * c {
                let gate = tp.vg[j];
                dvraw[j] = dv[j] * (F::one() - gate);
                dvfirst[j] = dvfirst[j] + dv[j] * gate;
                dpre[j] = dv[j] * (vfirst[j] - tp.vraw[j]) * gate * (F::one() - gate);
            }
            self.low_rank_backward(&dpre, v0, v1, v2, cfg.d_mv(), &tp.vl, &tp.xz[3], None, &mut dxz[3], gp, np);
        } else {
            for j in 0..t_len * c {
                dvraw[j] = dv[j] + dvfirst[j];
            }
        }
        for (z, off, dout) in [(3, o.wv, &dvraw), (2, o.wk, &dk0), (0, o.wr, &dr)] {
            if np {
                matmul_at_acc(&tp.xz[z], dout, c, c, &mut gp[off..off + c * c]);
            }
            matmul_bt_acc(dout, self.w(off, c * c), c, c, &mut dxz[z]);
        }

        // Decay.
        let dpre: Vec<F> = (0..t_len * c)
            .map(|j| {
                let s = tp.ws[j];
                -dw[j] * tp.w[j] * lit::<F>(DECAY_SCALE) * s * (F::one() - s)
            })
            .collect();
        let tanh = |x: F| F::one() - x * x;
        self.low_rank_backward(&dpre, o.w0, o.w1, o.w2, cfg.d_decay(), &tp.wl, &tp.xz[1], Some(&tanh), &mut dxz[1], gp, np);

        // Token shift and the first norm.
        let mut dh: Vec<F> = zeros(t_len * c);
        for (z, &off) in Self::mixes(o).iter().enumerate() {
            let mu = self.w(off, c);
            for t in 0..t_len {
                for i in 0..c {
                    let j = t * c + i;
                    let g = dxz[z][j];
                    if np {
                        gp[off + i] = gp[off + i] + g * tp.xx[j];
                    }
                    dh[j] = dh[j] + g * (F::one() - mu[i]);
                    let dp = g * mu[i];
                    if t == 0 {
                        gs[i] = gs[i] + dp;
                    } else {
                        dh[j - c] = dh[j - c] + dp;
                    }
                }
            }
        }
        gln.iter_mut().for_each(|v| *v = F::zero());
        for t in 0..t_len {
            let sl = t * c..(t + 1) * c;
            let (gw, gb) = gln.split_at_mut(c);
            layer_norm_backward(&tp.xn1[sl.clone()], tp.rstd1[t], self.w(o.ln1_w, c), &dh[sl.clone()], &mut dx[sl], Some(gw), Some(gb), &mut scratch);
        }
        if np {
            for i in 0..2 * c {
                gp[o.ln1_w + i] = gp[o.ln1_w + i] + gln[i];
            }
        }
    }

    /// Backward of `σ/tanh(x A1) A2 + bias` given the gradient at the
    /// pre-activation `dpre`; `hidden` holds the activated inner values and
    /// `act_grad` maps an activated value to the activation's derivative
    /// (identity when absent).
    #[allow(clippy::too_many_arguments)]
    fn low_rank_backward(
        &self,
        dpre: &[F],
        bias: usize,
        a1: usize,
        a2: usize,
        d: usize,
        hidden: &[F],
        xin: &[F],
        act_grad: Option<&dyn Fn(F) -> F>,
        dxin: &mut [F],
        gp: &mut [F],
        np: bool,
    ) {
        let c = self.cfg.d_model;
        let t_len = dpre.len() / c;
        if np {
            for (j, &g) in dpre.iter().enumerate() {
                gp[bias + j % c] = gp[bias + j % c] + g;
            }
            matmul_at_acc(hidden, dpre, d, c, &mut gp[a2..a2 + d * c]);
        }
        let mut dh: Vec<F> = zeros(t_len * d);
        matmul_bt_acc(dpre, self.w(a2, d * c), d, c, &mut dh);
        if let Some(f) = act_grad {
            for (g, &h) in dh.iter_mut().zip(hidden) {
                *g = *g * f(h);
            }
        }
        if np {
            matmul_at_acc(xin, &dh, c, d, &mut gp[a1..a1 + c * d]);
        }
        matmul_bt_acc(&dh, self.w(a1, c * d), c, d, dxin);
    }
}
