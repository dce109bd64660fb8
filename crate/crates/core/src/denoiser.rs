//! E(n)-equivariant noise predictor with analytic parameter gradients.
//!
//! Per atom the network sees coordinates `x_i` and an invariant input
//! `[z_h_i, t/T]`. Each message-passing layer computes
//!
//! ```text
//! m_ij  = silu(W2 · silu(W1 [h_i, h_j, |x_i - x_j|²] + b1) + b2)
//! x_i  += Σ_j (x_i - x_j) / (|x_i - x_j| + 1) · R tanh(wc2 · silu(Wc1 m_ij + bc1))
//! h_i  += Wn2 · silu(Wn1 [h_i, Σ_j m_ij] + bn1) + bn2
//! ```
//!
//! and the outputs are `eps_x = x_L - x_0` (projected to zero CoM) and
//! `eps_h = Wo h_L + bo`. Only masked-in atoms take part, visited in row
//! order, so padding never changes a single bit of the result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, Vec3};
use crate::rng::{mix64, SeedSpec};

/// Tolerance of the centered-input precondition.
pub const CENTER_TOL: f64 = 1e-6;
/// Bound `R` on the per-edge coordinate gate.
pub const COORD_RANGE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub layers: usize,
    pub hidden: usize,
    pub features: usize,
}

impl Architecture {
    pub fn new(layers: usize, hidden: usize, features: usize) -> Self {
        Self { layers, hidden, features }
    }

    /// Width of one latent row, `3 + F`.
    pub fn latent_width(&self) -> usize {
        3 + self.features
    }

    pub fn param_count(&self) -> usize {
        Layout::new(*self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    w1a: usize,
    w1b: usize,
    w1d: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wc1: usize,
    bc1: usize,
    wc2: usize,
    wn1a: usize,
    wn1b: usize,
    bn1: usize,
    wn2: usize,
    bn2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    emb_w: usize,
    emb_b: usize,
    layers: Vec<LayerLayout>,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(a: Architecture) -> Self {
        let (h, f) = (a.hidden, a.features);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let emb_w = take(h * (f + 1));
        let emb_b = take(h);
        let layers = (0..a.layers)
            .map(|_| LayerLayout {
                w1a: take(h * h),
                w1b: take(h * h),
                w1d: take(h),
                b1: take(h),
                w2: take(h * h),
                b2: take(h),
                wc1: take(h * h),
                bc1: take(h),
                wc2: take(h),
                wn1a: take(h * h),
                wn1b: take(h * h),
                bn1: take(h),
                wn2: take(h * h),
                bn2: take(h),
            })
            .collect();
        let out_w = take(f * h);
        let out_b = take(f);
        Self { emb_w, emb_b, layers, out_w, out_b, total: off }
    }
}

/// All denoiser weights in one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, data: vec![0.0; arch.param_count()] }
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self> {
        if data.len() != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter vector has {} entries, architecture needs {}",
                data.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat_view(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_view_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// 64-bit digest of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.data.len() as u64);
        for v in &self.data {
            h = mix64(h ^ v.to_bits());
        }
        h
    }
}

/// Fresh parameters: weights uniform in ±1/√fan_in, biases zero, and the
/// coordinate-gate output layer zero so the initial coordinate update vanishes.
pub fn init_params(layers: usize, hidden: usize, features: usize, seed: SeedSpec) -> PolicyParams {
    assert!(layers >= 1 && hidden >= 4, "need L >= 1 and H >= 4");
    let arch = Architecture::new(layers, hidden, features);
    let lay = Layout::new(arch);
    let mut p = PolicyParams::zeros(arch);
    let mut rng = seed.rng();
    let (h, f) = (hidden, features);
    let mut fill = |data: &mut [f64], start: usize, len: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut data[start..start + len] {
            *v = rng.gen_range(-bound..bound);
        }
    };
    let d = &mut p.data;
    fill(d, lay.emb_w, h * (f + 1), f + 1);
    for l in &lay.layers {
        fill(d, l.w1a, h * h, 2 * h + 1);
        fill(d, l.w1b, h * h, 2 * h + 1);
        fill(d, l.w1d, h, 2 * h + 1);
        fill(d, l.w2, h * h, h);
        fill(d, l.wc1, h * h, h);
        fill(d, l.wn1a, h * h, 2 * h);
        fill(d, l.wn1b, h * h, 2 * h);
        fill(d, l.wn2, h * h, h);
    }
    fill(d, lay.out_w, f * h, h);
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_x: Vec<Vec3>,
    /// Row-major `N × F`.
    pub eps_h: Vec<f64>,
}

impl DenoiserOutput {
    pub fn zeros(capacity: usize, features: usize) -> Self {
        Self { eps_x: vec![[0.0; 3]; capacity], eps_h: vec![0.0; capacity * features] }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out[o] += Σ_i w[o, i] x[i]` with `w` row-major `out.len() × x.len()`.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        let mut s = 0.0;
        for k in 0..n {
            s += row[k] * x[k];
        }
        *y += s;
    }
}

/// `out[i] += Σ_o w[o, i] g[o]`.
#[inline]
fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let row = &w[o * n..(o + 1) * n];
        for k in 0..n {
            out[k] += row[k] * go;
        }
    }
}

/// `gw[o, i] += g[o] x[i]`.
#[inline]
fn outer_acc(gw: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let row = &mut gw[o * n..(o + 1) * n];
        for k in 0..n {
            row[k] += go * x[k];
        }
    }
}

#[inline]
fn add_into(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Node features entering the layer, `n × H`.
    h: Vec<f64>,
    pre1: Vec<f64>,
    pre2: Vec<f64>,
    m: Vec<f64>,
    pc: Vec<f64>,
    gate: Vec<f64>,
    diff: Vec<Vec3>,
    dist: Vec<f64>,
    agg: Vec<f64>,
    pn: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_fingerprint: u64,
    capacity: usize,
    /// Row indices of the real atoms.
    real: Vec<usize>,
    h_in: Vec<f64>,
    layers: Vec<LayerCache>,
    h_out: Vec<f64>,
}

impl ForwardCache {
    pub fn params_fingerprint(&self) -> u64 {
        self.params_fingerprint
    }
}

fn check_inputs(arch: Architecture, z: &[f64], mask: &[bool]) -> Result<Vec<usize>> {
    let w = arch.latent_width();
    if z.len() != mask.len() * w {
        return Err(Error::InvalidMolecule(format!(
            "latent has {} entries, expected {} × {}",
            z.len(),
            mask.len(),
            w
        )));
    }
    let real: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if real.is_empty() {
        return Err(Error::EmptyMolecule);
    }
    let mut com = [0.0; 3];
    for &i in &real {
        for k in 0..3 {
            com[k] += z[i * w + k];
        }
    }
    let c = norm(com) / real.len() as f64;
    // round-off in the centering grows with the coordinate magnitude
    let scale = real.iter().map(|&i| norm([z[i * w], z[i * w + 1], z[i * w + 2]])).fold(1.0, f64::max);
    if !(c <= CENTER_TOL * scale) {
        return Err(Error::NotCentered(c));
    }
    Ok(real)
}

/// Predict `(eps_x, eps_h)` for the latent `z` (row-major `N × (3+F)`).
pub fn forward(params: &PolicyParams, z: &[f64], t_frac: f64, mask: &[bool]) -> Result<(DenoiserOutput, ForwardCache)> {
    let arch = params.arch;
    let real = check_inputs(arch, z, mask)?;
    let lay = Layout::new(arch);
    let p = &params.data;
    let (hd, f, w) = (arch.hidden, arch.features, arch.latent_width());
    let n = real.len();

    let mut h_in = vec![0.0; n * (f + 1)];
    let mut x: Vec<Vec3> = Vec::with_capacity(n);
    for (a, &i) in real.iter().enumerate() {
        let row = &z[i * w..(i + 1) * w];
        x.push([row[0], row[1], row[2]]);
        h_in[a * (f + 1)..a * (f + 1) + f].copy_from_slice(&row[3..]);
        h_in[a * (f + 1) + f] = t_frac;
    }
    let x0 = x.clone();

    let mut h = vec![0.0; n * hd];
    for a in 0..n {
        let out = &mut h[a * hd..(a + 1) * hd];
        out.copy_from_slice(&p[lay.emb_b..lay.emb_b + hd]);
        matvec_acc(&p[lay.emb_w..lay.emb_w + hd * (f + 1)], &h_in[a * (f + 1)..(a + 1) * (f + 1)], out);
    }

    let n_edges = n * n.saturating_sub(1);
    let mut caches = Vec::with_capacity(arch.layers);
    let mut node_a = vec![0.0; n * hd];
    let mut node_b = vec![0.0; n * hd];
    let mut act = vec![0.0; hd];
    for l in &lay.layers {
        let w1a = &p[l.w1a..l.w1a + hd * hd];
        let w1b = &p[l.w1b..l.w1b + hd * hd];
        let w1d = &p[l.w1d..l.w1d + hd];
        let b1 = &p[l.b1..l.b1 + hd];
        let w2 = &p[l.w2..l.w2 + hd * hd];
        let b2 = &p[l.b2..l.b2 + hd];
        let wc1 = &p[l.wc1..l.wc1 + hd * hd];
        let bc1 = &p[l.bc1..l.bc1 + hd];
        let wc2 = &p[l.wc2..l.wc2 + hd];

        node_a.iter_mut().for_each(|v| *v = 0.0);
        node_b.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..n {
            let ha = &h[a * hd..(a + 1) * hd];
            matvec_acc(w1a, ha, &mut node_a[a * hd..(a + 1) * hd]);
            matvec_acc(w1b, ha, &mut node_b[a * hd..(a + 1) * hd]);
        }

        let mut c = LayerCache {
            h: h.clone(),
            pre1: vec![0.0; n_edges * hd],
            pre2: vec![0.0; n_edges * hd],
            m: vec![0.0; n_edges * hd],
            pc: vec![0.0; n_edges * hd],
            gate: vec![0.0; n_edges],
            diff: vec![[0.0; 3]; n_edges],
            dist: vec![0.0; n_edges],
            agg: vec![0.0; n * hd],
            pn: vec![0.0; n * hd],
        };
        let mut x_new = x.clone();
        let mut e = 0;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let diff = sub(x[a], x[b]);
                let d2 = dot(diff, diff);
                let r = d2.sqrt();
                c.diff[e] = diff;
                c.dist[e] = r;
                let pre1 = &mut c.pre1[e * hd..(e + 1) * hd];
                for k in 0..hd {
                    pre1[k] = node_a[a * hd + k] + node_b[b * hd + k] + w1d[k] * d2 + b1[k];
                    act[k] = silu(pre1[k]);
                }
                let pre2 = &mut c.pre2[e * hd..(e + 1) * hd];
                pre2.copy_from_slice(b2);
                matvec_acc(w2, &act, pre2);
                let m = &mut c.m[e * hd..(e + 1) * hd];
                for k in 0..hd {
                    m[k] = silu(pre2[k]);
                }
                add_into(&mut c.agg[a * hd..(a + 1) * hd], m);
                let pc = &mut c.pc[e * hd..(e + 1) * hd];
                pc.copy_from_slice(bc1);
                matvec_acc(wc1, m, pc);
                let mut g = 0.0;
                for k in 0..hd {
                    g += wc2[k] * silu(pc[k]);
                }
                let g = COORD_RANGE * (g / COORD_RANGE).tanh();
                c.gate[e] = g;
                let s = g / (r + 1.0);
                for k in 0..3 {
                    x_new[a][k] += diff[k] * s;
                }
                e += 1;
            }
        }

        let wn1a = &p[l.wn1a..l.wn1a + hd * hd];
        let wn1b = &p[l.wn1b..l.wn1b + hd * hd];
        let bn1 = &p[l.bn1..l.bn1 + hd];
        let wn2 = &p[l.wn2..l.wn2 + hd * hd];
        let bn2 = &p[l.bn2..l.bn2 + hd];
        let mut h_new = h.clone();
        for a in 0..n {
            let pn = &mut c.pn[a * hd..(a + 1) * hd];
            pn.copy_from_slice(bn1);
            matvec_acc(wn1a, &h[a * hd..(a + 1) * hd], pn);
            matvec_acc(wn1b, &c.agg[a * hd..(a + 1) * hd], pn);
            for k in 0..hd {
                act[k] = silu(pn[k]);
            }
            let out = &mut h_new[a * hd..(a + 1) * hd];
            add_into(out, bn2);
            matvec_acc(wn2, &act, out);
        }
        caches.push(c);
        h = h_new;
        x = x_new;
    }

    let cap = mask.len();
    let mut out = DenoiserOutput::zeros(cap, f);
    let mut mean = [0.0; 3];
    for a in 0..n {
        let d = sub(x[a], x0[a]);
        for k in 0..3 {
            mean[k] += d[k];
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    for (a, &i) in real.iter().enumerate() {
        let d = sub(x[a], x0[a]);
        out.eps_x[i] = [d[0] - mean[0], d[1] - mean[1], d[2] - mean[2]];
        let eh = &mut out.eps_h[i * f..(i + 1) * f];
        eh.copy_from_slice(&p[lay.out_b..lay.out_b + f]);
        matvec_acc(&p[lay.out_w..lay.out_w + f * hd], &h[a * hd..(a + 1) * hd], eh);
    }

    let cache = ForwardCache {
        params_fingerprint: params.fingerprint(),
        capacity: cap,
        real,
        h_in,
        layers: caches,
        h_out: h,
    };
    Ok((out, cache))
}

/// Accumulate `∂loss/∂θ` into `grad` given `upstream = ∂loss/∂output`.
pub fn backward_into(params: &PolicyParams, cache: &ForwardCache, upstream: &DenoiserOutput, grad: &mut [f64]) -> Result<()> {
    if cache.params_fingerprint != params.fingerprint()
        || upstream.eps_x.len() != cache.capacity
        || cache.layers.len() != params.arch.layers
        || grad.len() != params.len()
    {
        return Err(Error::StaleCache);
    }
    let arch = params.arch;
    let lay = Layout::new(arch);
    let p = &params.data;
    let (hd, f) = (arch.hidden, arch.features);
    let real = &cache.real;
    let n = real.len();

    // eps_x = (x_L - x_0) - mean: the projection is self-adjoint on real rows.
    let mut g_x: Vec<Vec3> = real.iter().map(|&i| upstream.eps_x[i]).collect();
    let mut gm = [0.0; 3];
    for g in &g_x {
        for k in 0..3 {
            gm[k] += g[k];
        }
    }
    for g in g_x.iter_mut() {
        for k in 0..3 {
            g[k] -= gm[k] / n as f64;
        }
    }

    let mut g_h = vec![0.0; n * hd];
    for (a, &i) in real.iter().enumerate() {
        let ge = &upstream.eps_h[i * f..(i + 1) * f];
        let ha = &cache.h_out[a * hd..(a + 1) * hd];
        outer_acc(&mut grad[lay.out_w..lay.out_w + f * hd], ge, ha);
        add_into(&mut grad[lay.out_b..lay.out_b + f], ge);
        matvec_t_acc(&p[lay.out_w..lay.out_w + f * hd], ge, &mut g_h[a * hd..(a + 1) * hd]);
    }

    let mut act = vec![0.0; hd];
    let mut g_act = vec![0.0; hd];
    let mut g_pre = vec![0.0; hd];
    let mut g_m = vec![0.0; hd];
    for (li, l) in lay.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];

        // Feature update h' = h + Wn2 silu(Wn1a h + Wn1b agg + bn1) + bn2.
        let mut g_agg = vec![0.0; n * hd];
        let mut g_h_prev = g_h.clone();
        for a in 0..n {
            let go = &g_h[a * hd..(a + 1) * hd];
            let pn = &c.pn[a * hd..(a + 1) * hd];
            for k in 0..hd {
                act[k] = silu(pn[k]);
            }
            outer_acc(&mut grad[l.wn2..l.wn2 + hd * hd], go, &act);
            add_into(&mut grad[l.bn2..l.bn2 + hd], go);
            g_act.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&p[l.wn2..l.wn2 + hd * hd], go, &mut g_act);
            for k in 0..hd {
                g_pre[k] = g_act[k] * silu_grad(pn[k]);
            }
            outer_acc(&mut grad[l.wn1a..l.wn1a + hd * hd], &g_pre, &c.h[a * hd..(a + 1) * hd]);
            outer_acc(&mut grad[l.wn1b..l.wn1b + hd * hd], &g_pre, &c.agg[a * hd..(a + 1) * hd]);
            add_into(&mut grad[l.bn1..l.bn1 + hd], &g_pre);
            matvec_t_acc(&p[l.wn1a..l.wn1a + hd * hd], &g_pre, &mut g_h_prev[a * hd..(a + 1) * hd]);
            matvec_t_acc(&p[l.wn1b..l.wn1b + hd * hd], &g_pre, &mut g_agg[a * hd..(a + 1) * hd]);
        }

        // Edge messages and coordinate update.
        let mut g_x_prev = g_x.clone();
        let mut s_src = vec![0.0; n * hd];
        let mut s_dst = vec![0.0; n * hd];
        let wc1 = &p[l.wc1..l.wc1 + hd * hd];
        let wc2 = &p[l.wc2..l.wc2 + hd];
        let w2 = &p[l.w2..l.w2 + hd * hd];
        let w1d = &p[l.w1d..l.w1d + hd];
        let mut e = 0;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let diff = c.diff[e];
                let r = c.dist[e];
                let inv = 1.0 / (r + 1.0);
                let gx = g_x[a];
                let u = [diff[0] * inv, diff[1] * inv, diff[2] * inv];
                let gate = c.gate[e];
                let th = gate / COORD_RANGE;
                let g_gate = dot(gx, u) * (1.0 - th * th);
                let g_u = [gx[0] * gate, gx[1] * gate, gx[2] * gate];
                let mut g_diff = [g_u[0] * inv, g_u[1] * inv, g_u[2] * inv];
                if r > 0.0 {
                    let s = dot(diff, g_u) / (r * (r + 1.0) * (r + 1.0));
                    for k in 0..3 {
                        g_diff[k] -= diff[k] * s;
                    }
                }

                let m = &c.m[e * hd..(e + 1) * hd];
                g_m.copy_from_slice(&g_agg[a * hd..(a + 1) * hd]);
                if g_gate != 0.0 {
                    let pc = &c.pc[e * hd..(e + 1) * hd];
                    for k in 0..hd {
                        act[k] = silu(pc[k]);
                        g_pre[k] = g_gate * wc2[k] * silu_grad(pc[k]);
                    }
                    for k in 0..hd {
                        grad[l.wc2 + k] += g_gate * act[k];
                    }
                    outer_acc(&mut grad[l.wc1..l.wc1 + hd * hd], &g_pre, m);
                    add_into(&mut grad[l.bc1..l.bc1 + hd], &g_pre);
                    matvec_t_acc(wc1, &g_pre, &mut g_m);
                }

                let pre2 = &c.pre2[e * hd..(e + 1) * hd];
                for k in 0..hd {
                    g_pre[k] = g_m[k] * silu_grad(pre2[k]);
                }
                let pre1 = &c.pre1[e * hd..(e + 1) * hd];
                for k in 0..hd {
                    act[k] = silu(pre1[k]);
                }
                outer_acc(&mut grad[l.w2..l.w2 + hd * hd], &g_pre, &act);
                add_into(&mut grad[l.b2..l.b2 + hd], &g_pre);
                g_act.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(w2, &g_pre, &mut g_act);
                let d2 = r * r;
                let mut g_d2 = 0.0;
                for k in 0..hd {
                    let gp = g_act[k] * silu_grad(pre1[k]);
                    s_src[a * hd + k] += gp;
                    s_dst[b * hd + k] += gp;
                    grad[l.w1d + k] += gp * d2;
                    grad[l.b1 + k] += gp;
                    g_d2 += w1d[k] * gp;
                }
                for k in 0..3 {
                    g_diff[k] += 2.0 * diff[k] * g_d2;
                    g_x_prev[a][k] += g_diff[k];
                    g_x_prev[b][k] -= g_diff[k];
                }
                e += 1;
            }
        }
        for a in 0..n {
            let ha = &c.h[a * hd..(a + 1) * hd];
            outer_acc(&mut grad[l.w1a..l.w1a + hd * hd], &s_src[a * hd..(a + 1) * hd], ha);
            outer_acc(&mut grad[l.w1b..l.w1b + hd * hd], &s_dst[a * hd..(a + 1) * hd], ha);
            matvec_t_acc(&p[l.w1a..l.w1a + hd * hd], &s_src[a * hd..(a + 1) * hd], &mut g_h_prev[a * hd..(a + 1) * hd]);
            matvec_t_acc(&p[l.w1b..l.w1b + hd * hd], &s_dst[a * hd..(a + 1) * hd], &mut g_h_prev[a * hd..(a + 1) * hd]);
        }
        g_h = g_h_prev;
        g_x = g_x_prev;
    }

    for a in 0..n {
        let go = &g_h[a * hd..(a + 1) * hd];
        outer_acc(&mut grad[lay.emb_w..lay.emb_w + hd * (f + 1)], go, &cache.h_in[a * (f + 1)..(a + 1) * (f + 1)]);
        add_into(&mut grad[lay.emb_b..lay.emb_b + hd], go);
    }
    Ok(())
}

/// Gradient of a scalar loss with respect to every parameter.
pub fn backward(params: &PolicyParams, cache: &ForwardCache, upstream: &DenoiserOutput) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    backward_into(params, cache, upstream, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat_vec, RigidMotion};
    use crate::rng::standard_normal;

    fn random_latent(n: usize, f: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = SeedSpec::new(seed, 0).rng();
        let w = 3 + f;
        let mut z: Vec<f64> = (0..n * w).map(|_| standard_normal(&mut rng)).collect();
        let mut com = [0.0; 3];
        for i in 0..n {
            for k in 0..3 {
                com[k] += z[i * w + k] / n as f64;
            }
        }
        for i in 0..n {
            for k in 0..3 {
                z[i * w + k] -= com[k];
            }
        }
        (z, vec![true; n])
    }

    fn perturbed(arch: Architecture, seed: u64) -> PolicyParams {
        let mut p = init_params(arch.layers, arch.hidden, arch.features, SeedSpec::new(seed, 1));
        let mut rng = SeedSpec::new(seed, 2).rng();
        for v in p.flat_view_mut() {
            *v += 0.2 * standard_normal(&mut rng);
        }
        p
    }

    #[test]
    fn closed_form_parameter_count() {
        let (l, h, f) = (2usize, 16usize, 4usize);
        let embed = h * (f + 1) + h;
        let edge = h * (2 * h + 1) + h + h * h + h;
        let coord = h * h + h + h;
        let node = h * 2 * h + h + h * h + h;
        let head = f * h + f;
        assert_eq!(Architecture::new(l, h, f).param_count(), embed + l * (edge + coord + node) + head);
        assert_eq!(Architecture::new(2, 16, 4).param_count(), 3972);
    }

    #[test]
    fn init_is_deterministic_and_zero_coordinate_head() {
        let a = init_params(2, 16, 4, SeedSpec::new(9, 0));
        let b = init_params(2, 16, 4, SeedSpec::new(9, 0));
        assert_eq!(a.flat_view(), b.flat_view());
        let (z, mask) = random_latent(5, 4, 3);
        let (out, _) = forward(&a, &z, 0.4, &mask).unwrap();
        assert!(out.eps_x.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn flat_view_round_trip() {
        let a = perturbed(Architecture::new(2, 8, 4), 5);
        let b = PolicyParams::from_flat(a.arch(), a.flat_view().to_vec()).unwrap();
        assert_eq!(a, b);
        assert!(PolicyParams::from_flat(a.arch(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn uncentered_input_rejected() {
        let p = init_params(1, 8, 4, SeedSpec::new(1, 0));
        let (mut z, mask) = random_latent(3, 4, 1);
        z[0] += 0.1;
        assert!(matches!(forward(&p, &z, 0.1, &mask), Err(Error::NotCentered(_))));
    }

    #[test]
    fn rotation_equivariance() {
        let p = perturbed(Architecture::new(2, 16, 4), 21);
        let mut rng = SeedSpec::new(77, 0).rng();
        for trial in 0..20 {
            let (z, mask) = random_latent(6, 4, 100 + trial);
            let r = RigidMotion::random_orthogonal(&mut rng);
            let mut zr = z.clone();
            for i in 0..6 {
                let v = mat_vec(&r, [z[i * 7], z[i * 7 + 1], z[i * 7 + 2]]);
                zr[i * 7..i * 7 + 3].copy_from_slice(&v);
            }
            let (a, _) = forward(&p, &z, 0.3, &mask).unwrap();
            let (b, _) = forward(&p, &zr, 0.3, &mask).unwrap();
            for i in 0..6 {
                let ra = mat_vec(&r, a.eps_x[i]);
                for k in 0..3 {
                    assert!((ra[k] - b.eps_x[i][k]).abs() < 1e-8);
                }
            }
            for (x, y) in a.eps_h.iter().zip(&b.eps_h) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn padding_is_bit_exact() {
        let p = perturbed(Architecture::new(2, 8, 4), 4);
        let (z, mask) = random_latent(4, 4, 8);
        let mut zp = z.clone();
        zp.extend(std::iter::repeat(0.0).take(3 * 7));
        let mut mp = mask.clone();
        mp.extend([false; 3]);
        let (a, _) = forward(&p, &z, 0.5, &mask).unwrap();
        let (b, _) = forward(&p, &zp, 0.5, &mp).unwrap();
        assert_eq!(&b.eps_x[..4], &a.eps_x[..]);
        assert_eq!(&b.eps_h[..16], &a.eps_h[..]);
        assert!(b.eps_x[4..].iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = perturbed(Architecture::new(2, 8, 4), 6);
        let (z, mask) = random_latent(4, 4, 2);
        let (_, cache) = forward(&p, &z, 0.5, &mask).unwrap();
        let g = backward(&p, &cache, &DenoiserOutput::zeros(4, 4)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = perturbed(Architecture::new(1, 8, 4), 6);
        let (z, mask) = random_latent(3, 4, 2);
        let (out, cache) = forward(&p, &z, 0.5, &mask).unwrap();
        p.flat_view_mut()[0] += 1.0;
        assert!(matches!(backward(&p, &cache, &out), Err(Error::StaleCache)));
    }
}
