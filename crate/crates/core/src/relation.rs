//! Object-aware multi-branch region modelling and relation reasoning.
//!
//! Branch `t` modulates every region feature with gates produced from
//! object `t`, then scores each region against that object; a softmax over
//! the regions of a frame gives the branch's matching distribution. The
//! main branch (object 0) then attends, within each frame, over the regions
//! of every auxiliary branch, weighting each candidate by both branches'
//! matching probabilities and by an attention term that also sees the
//! relative box geometry.

use crate::tensor::{add_into, axpy, dot, softmax, softmax_backward, Real, Tensor};

crate::param_group! {
    /// Modulation gates, the object projection used for matching, and the
    /// matching scorer `wᵀ tanh(W_c [r; q; r⊙q; r−q] + b_c)`.
    pub struct BranchParams {
        w_gamma: Tensor,
        b_gamma: Tensor,
        w_delta: Tensor,
        b_delta: Tensor,
        w_obj: Tensor,
        b_obj: Tensor,
        w_c: Tensor,
        b_c: Tensor,
        w_match: Tensor,
    }
}

impl<F: Real> BranchParams<F> {
    pub fn zeros(feat: usize, obj: usize, attn: usize) -> Self {
        Self {
            w_gamma: Tensor::zeros(&[feat, obj]),
            b_gamma: Tensor::zeros(&[feat]),
            w_delta: Tensor::zeros(&[feat, obj]),
            b_delta: Tensor::zeros(&[feat]),
            w_obj: Tensor::zeros(&[feat, obj]),
            b_obj: Tensor::zeros(&[feat]),
            w_c: Tensor::zeros(&[attn, 4 * feat]),
            b_c: Tensor::zeros(&[attn]),
            w_match: Tensor::zeros(&[attn]),
        }
    }
}

crate::param_group! {
    /// `ε = wᵀ tanh(W1 r_main + W2 r_aux + W3 g + b)` with `g` the relative box geometry.
    pub struct RelationParams {
        w1: Tensor,
        w2: Tensor,
        w3: Tensor,
        b: Tensor,
        w: Tensor,
    }
}

impl<F: Real> RelationParams<F> {
    pub fn zeros(feat: usize, attn: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[attn, feat]),
            w2: Tensor::zeros(&[attn, feat]),
            w3: Tensor::zeros(&[attn, 4]),
            b: Tensor::zeros(&[attn]),
            w: Tensor::zeros(&[attn]),
        }
    }
}

/// Branch activations. Rows of the per-region tensors are indexed
/// `(t * frames + n) * regions + k`.
#[derive(Clone, Debug)]
pub struct BranchState<F> {
    pub branches: usize,
    pub frames: usize,
    pub regions: usize,
    pub gamma: Tensor<F>,
    pub delta: Tensor<F>,
    /// `[T * N * K, feat]`
    pub modulated: Tensor<F>,
    /// `[T, feat]` object projection used by the matcher.
    pub query: Tensor<F>,
    /// `[T * N * K, attn]` tanh activations of the matcher.
    match_hidden: Tensor<F>,
    /// `[T * N * K]` matching logits.
    pub logits: Tensor<F>,
    /// `[T * N * K]` per-frame softmax of `logits` over regions.
    pub dist: Tensor<F>,
}

impl<F> BranchState<F> {
    pub fn index(&self, t: usize, n: usize, k: usize) -> usize {
        (t * self.frames + n) * self.regions + k
    }
}

impl<F: Real> BranchState<F> {
    /// Matching distribution of branch `t` on frame `n` (0-based).
    pub fn distribution(&self, t: usize, n: usize) -> &[F] {
        let i = self.index(t, n, 0);
        &self.dist.data()[i..i + self.regions]
    }
}

fn affine_tanh<F: Real>(w: &Tensor<F>, b: &Tensor<F>, x: &[F]) -> Vec<F> {
    let mut v = w.mv(x);
    for (vi, &bi) in v.iter_mut().zip(b.data()) {
        *vi = (*vi + bi).tanh();
    }
    v
}

fn matcher_input<F: Real>(r: &[F], q: &[F]) -> Vec<F> {
    let mut x = Vec::with_capacity(4 * r.len());
    x.extend_from_slice(r);
    x.extend_from_slice(q);
    x.extend(r.iter().zip(q).map(|(&a, &b)| a * b));
    x.extend(r.iter().zip(q).map(|(&a, &b)| a - b));
    x
}

/// `γ_t ⊙ r + δ_t` for every branch. Returns `(gamma, delta, modulated)`.
pub fn modulate<F: Real>(
    regions: &Tensor<F>,
    objects: &Tensor<F>,
    p: &BranchParams<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (t_count, feat) = (objects.rows(), p.b_gamma.len());
    let rows = regions.rows();
    let mut gamma = Tensor::zeros(&[t_count, feat]);
    let mut delta = Tensor::zeros(&[t_count, feat]);
    let mut modulated = Tensor::zeros(&[t_count * rows, feat]);
    for t in 0..t_count {
        let g = affine_tanh(&p.w_gamma, &p.b_gamma, objects.row(t));
        let d = affine_tanh(&p.w_delta, &p.b_delta, objects.row(t));
        for i in 0..rows {
            let out = modulated.row_mut(t * rows + i);
            for (j, (&r, o)) in regions.row(i).iter().zip(out.iter_mut()).enumerate() {
                *o = g[j] * r + d[j];
            }
        }
        gamma.row_mut(t).copy_from_slice(&g);
        delta.row_mut(t).copy_from_slice(&d);
    }
    (gamma, delta, modulated)
}

/// Modulation and cross-modal matching for all branches.
pub fn branch_forward<F: Real>(
    regions: &Tensor<F>,
    objects: &Tensor<F>,
    p: &BranchParams<F>,
    frames: usize,
    regions_per_frame: usize,
) -> BranchState<F> {
    let (gamma, delta, modulated) = modulate(regions, objects, p);
    let t_count = objects.rows();
    let feat = p.b_gamma.len();
    let attn = p.b_c.len();
    let total = modulated.rows();
    let mut query = Tensor::zeros(&[t_count, feat]);
    for t in 0..t_count {
        let row = query.row_mut(t);
        p.w_obj.matvec(objects.row(t), row);
        add_into(p.b_obj.data(), row);
    }
    let mut match_hidden = Tensor::zeros(&[total, attn]);
    let mut logits = Tensor::zeros(&[total]);
    for i in 0..total {
        let t = i / (frames * regions_per_frame);
        let x = matcher_input(modulated.row(i), query.row(t));
        let h = affine_tanh(&p.w_c, &p.b_c, &x);
        logits.data_mut()[i] = dot(p.w_match.data(), &h);
        match_hidden.row_mut(i).copy_from_slice(&h);
    }
    let mut dist = Tensor::zeros(&[total]);
    for (src, dst) in logits
        .data()
        .chunks_exact(regions_per_frame)
        .zip(dist.data_mut().chunks_exact_mut(regions_per_frame))
    {
        dst.copy_from_slice(&softmax(src));
    }
    BranchState {
        branches: t_count,
        frames,
        regions: regions_per_frame,
        gamma,
        delta,
        modulated,
        query,
        match_hidden,
        logits,
        dist,
    }
}

/// Gradients w.r.t. the unmodulated regions and the object features.
pub struct BranchGrads<F> {
    pub regions: Tensor<F>,
    pub objects: Tensor<F>,
}

/// Backward through matching and modulation. `d_modulated` and `d_dist`
/// are the upstream gradients of `state.modulated` and `state.dist`.
pub fn branch_backward<F: Real>(
    regions: &Tensor<F>,
    objects: &Tensor<F>,
    p: &BranchParams<F>,
    state: &BranchState<F>,
    mut d_modulated: Tensor<F>,
    d_dist: &Tensor<F>,
    g: &mut BranchParams<F>,
) -> BranchGrads<F> {
    let (t_count, feat) = (state.branches, p.b_gamma.len());
    let kk = state.regions;
    let rows = regions.rows();
    let attn = p.b_c.len();

    // softmax over regions, then the matcher
    let mut d_query = Tensor::zeros(&[t_count, feat]);
    for (chunk, (dist, dd)) in state
        .dist
        .data()
        .chunks_exact(kk)
        .zip(d_dist.data().chunks_exact(kk))
        .enumerate()
    {
        let d_logits = softmax_backward(dist, dd);
        for (k, &dl) in d_logits.iter().enumerate() {
            if dl == F::zero() {
                continue;
            }
            let i = chunk * kk + k;
            let t = i / rows;
            let h = state.match_hidden.row(i);
            axpy(dl, h, g.w_match.data_mut());
            let dv: Vec<F> = (0..attn)
                .map(|a| dl * p.w_match.data()[a] * (F::one() - h[a] * h[a]))
                .collect();
            let r = state.modulated.row(i);
            let q = state.query.row(t);
            g.w_c.outer_acc(&dv, &matcher_input(r, q));
            add_into(&dv, g.b_c.data_mut());
            let mut dx = vec![F::zero(); 4 * feat];
            p.w_c.matvec_t_acc(&dv, &mut dx);
            let dr = d_modulated.row_mut(i);
            let dq = d_query.row_mut(t);
            for j in 0..feat {
                let (a, b, c, d) = (dx[j], dx[feat + j], dx[2 * feat + j], dx[3 * feat + j]);
                dr[j] += a + c * q[j] + d;
                dq[j] += b + c * r[j] - d;
            }
        }
    }

    let mut d_objects = Tensor::zeros(objects.shape());
    for t in 0..t_count {
        let dq = d_query.row(t);
        g.w_obj.outer_acc(dq, objects.row(t));
        add_into(dq, g.b_obj.data_mut());
        p.w_obj.matvec_t_acc(dq, d_objects.row_mut(t));
    }

    // modulation
    let mut d_regions = Tensor::zeros(regions.shape());
    for t in 0..t_count {
        let gamma = state.gamma.row(t);
        let delta = state.delta.row(t);
        let mut d_gamma = vec![F::zero(); feat];
        let mut d_delta = vec![F::zero(); feat];
        for i in 0..rows {
            let dm = d_modulated.row(t * rows + i);
            let r = regions.row(i);
            let drow = d_regions.row_mut(i);
            for j in 0..feat {
                d_gamma[j] += dm[j] * r[j];
                d_delta[j] += dm[j];
                drow[j] += dm[j] * gamma[j];
            }
        }
        for j in 0..feat {
            d_gamma[j] *= F::one() - gamma[j] * gamma[j];
            d_delta[j] *= F::one() - delta[j] * delta[j];
        }
        let o = objects.row(t);
        g.w_gamma.outer_acc(&d_gamma, o);
        add_into(&d_gamma, g.b_gamma.data_mut());
        g.w_delta.outer_acc(&d_delta, o);
        add_into(&d_delta, g.b_delta.data_mut());
        let dob = d_objects.row_mut(t);
        p.w_gamma.matvec_t_acc(&d_gamma, dob);
        p.w_delta.matvec_t_acc(&d_delta, dob);
    }
    BranchGrads {
        regions: d_regions,
        objects: d_objects,
    }
}

/// Activations of relation reasoning.
#[derive(Clone, Debug)]
pub struct RelationTrace<F> {
    /// `[(T-1) * N * K * K, attn]` tanh activations, index `((a * N + n) * K + k) * K + l`.
    hidden: Tensor<F>,
    /// `[(T-1) * N * K, K]` attention over auxiliary regions.
    pub attention: Tensor<F>,
    /// `[N * K, feat]` pre-activation sum.
    pub pre: Tensor<F>,
    /// `[N * K, feat]` final region features after ReLU.
    pub output: Tensor<F>,
}

/// `geometry` holds `[N * K * K, 4]` relative geometry of region `k`
/// (main) to region `l` (auxiliary) on the same frame.
pub fn relate<F: Real>(state: &BranchState<F>, geometry: &Tensor<F>, p: &RelationParams<F>) -> RelationTrace<F> {
    let (t_count, nf, kk) = (state.branches, state.frames, state.regions);
    let feat = state.modulated.cols();
    let attn = p.b.len();
    let aux = t_count.saturating_sub(1);
    let mut hidden = Tensor::zeros(&[aux * nf * kk * kk, attn]);
    let mut attention = Tensor::zeros(&[aux * nf * kk, kk]);
    let mut pre = Tensor::zeros(&[nf * kk, feat]);
    let main_proj: Vec<Vec<F>> = (0..nf * kk).map(|i| p.w1.mv(state.modulated.row(i))).collect();
    let geo_proj: Vec<Vec<F>> = (0..nf * kk * kk).map(|i| p.w3.mv(geometry.row(i))).collect();
    for i in 0..nf * kk {
        pre.row_mut(i).copy_from_slice(state.modulated.row(i));
    }
    for t in 1..t_count {
        let a = t - 1;
        for n in 0..nf {
            let aux_proj: Vec<Vec<F>> = (0..kk)
                .map(|l| p.w2.mv(state.modulated.row(state.index(t, n, l))))
                .collect();
            let d_aux = state.distribution(t, n).to_vec();
            let d_main = state.distribution(0, n).to_vec();
            for k in 0..kk {
                let mut logits = vec![F::zero(); kk];
                for l in 0..kk {
                    let h = hidden.row_mut(((a * nf + n) * kk + k) * kk + l);
                    let m = &main_proj[n * kk + k];
                    let gp = &geo_proj[(n * kk + k) * kk + l];
                    for j in 0..attn {
                        h[j] = (m[j] + aux_proj[l][j] + gp[j] + p.b.data()[j]).tanh();
                    }
                    logits[l] = dot(p.w.data(), h);
                }
                let att = softmax(&logits);
                let out = pre.row_mut(n * kk + k);
                for l in 0..kk {
                    let c = d_main[k] * d_aux[l] * att[l];
                    axpy(c, state.modulated.row(state.index(t, n, l)), out);
                }
                attention.row_mut((a * nf + n) * kk + k).copy_from_slice(&att);
            }
        }
    }
    let mut output = pre.clone();
    output
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = x.max(F::zero()));
    RelationTrace {
        hidden,
        attention,
        pre,
        output,
    }
}

/// Returns `(d_modulated, d_dist)` and accumulates parameter gradients.
pub fn relate_backward<F: Real>(
    state: &BranchState<F>,
    geometry: &Tensor<F>,
    p: &RelationParams<F>,
    trace: &RelationTrace<F>,
    d_output: &Tensor<F>,
    g: &mut RelationParams<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (t_count, nf, kk) = (state.branches, state.frames, state.regions);
    let attn = p.b.len();
    let mut d_mod = Tensor::zeros(state.modulated.shape());
    let mut d_dist = Tensor::zeros(state.dist.shape());
    // ReLU, subgradient 0 at 0
    let mut d_pre = d_output.clone();
    for (d, &x) in d_pre.data_mut().iter_mut().zip(trace.pre.data()) {
        if x <= F::zero() {
            *d = F::zero();
        }
    }
    for i in 0..nf * kk {
        add_into(d_pre.row(i), d_mod.row_mut(i));
    }
    for t in 1..t_count {
        let a = t - 1;
        for n in 0..nf {
            let d_main = state.distribution(0, n).to_vec();
            let d_aux = state.distribution(t, n).to_vec();
            let mut du_aux_sum = vec![vec![F::zero(); attn]; kk];
            for k in 0..kk {
                let dp = d_pre.row(n * kk + k);
                let att = trace.attention.row((a * nf + n) * kk + k);
                let mut d_att = vec![F::zero(); kk];
                for l in 0..kk {
                    let ai = state.index(t, n, l);
                    let r = state.modulated.row(ai);
                    let c = d_main[k] * d_aux[l] * att[l];
                    axpy(c, dp, d_mod.row_mut(ai));
                    let dc = dot(dp, r);
                    d_dist.data_mut()[state.index(0, n, k)] += dc * d_aux[l] * att[l];
                    d_dist.data_mut()[ai] += dc * d_main[k] * att[l];
                    d_att[l] = dc * d_main[k] * d_aux[l];
                }
                let d_logits = softmax_backward(att, &d_att);
                let mut du_main = vec![F::zero(); attn];
                for l in 0..kk {
                    let h = trace.hidden.row(((a * nf + n) * kk + k) * kk + l);
                    let dl = d_logits[l];
                    axpy(dl, h, g.w.data_mut());
                    let du: Vec<F> = (0..attn)
                        .map(|j| dl * p.w.data()[j] * (F::one() - h[j] * h[j]))
                        .collect();
                    g.w3.outer_acc(&du, geometry.row((n * kk + k) * kk + l));
                    add_into(&du, &mut du_main);
                    add_into(&du, &mut du_aux_sum[l]);
                }
                add_into(&du_main, g.b.data_mut());
                let mi = state.index(0, n, k);
                g.w1.outer_acc(&du_main, state.modulated.row(mi));
                p.w1.matvec_t_acc(&du_main, d_mod.row_mut(mi));
            }
            for (l, du) in du_aux_sum.iter().enumerate() {
                let ai = state.index(t, n, l);
                g.w2.outer_acc(du, state.modulated.row(ai));
                p.w2.matvec_t_acc(du, d_mod.row_mut(ai));
            }
        }
    }
    (d_mod, d_dist)
}

/// Mean pairwise inner product of branch distributions over the given
/// 0-based frames. Zero when fewer than two branches exist.
pub fn diversity_loss<F: Real>(state: &BranchState<F>, frames: &[usize]) -> F {
    let t_count = state.branches;
    if t_count < 2 || frames.is_empty() {
        return F::zero();
    }
    let z = F::lit(0.5 * (frames.len() * t_count * (t_count - 1)) as f64);
    let mut total = F::zero();
    for &n in frames {
        for i in 0..t_count - 1 {
            for j in i + 1..t_count {
                total += dot(state.distribution(i, n), state.distribution(j, n));
            }
        }
    }
    total / z
}

/// Adds `scale * dL_d/d(dist)` into `d_dist`.
pub fn diversity_backward<F: Real>(state: &BranchState<F>, frames: &[usize], scale: F, d_dist: &mut Tensor<F>) {
    let t_count = state.branches;
    if t_count < 2 || frames.is_empty() {
        return;
    }
    let z = F::lit(0.5 * (frames.len() * t_count * (t_count - 1)) as f64);
    let s = scale / z;
    let kk = state.regions;
    for &n in frames {
        for i in 0..t_count {
            let start = state.index(i, n, 0);
            for j in (0..t_count).filter(|&j| j != i) {
                let other = state.distribution(j, n).to_vec();
                axpy(s, &other, &mut d_dist.data_mut()[start..start + kk]);
            }
        }
    }
}
