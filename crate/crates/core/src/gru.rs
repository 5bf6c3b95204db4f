//! Gated recurrent unit with a hand-written backward pass.
//!
//! Cell: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
//! `ĥ = tanh(W_h x + b_h + r ⊙ (U_h h))`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`,
//! starting from `h = 0`.

use crate::tensor::{sigmoid, Real, Tensor};

crate::param_group! {
    /// Weights of one recurrence direction.
    pub struct GruParams {
        w_z: Tensor, u_z: Tensor, b_z: Tensor,
        w_r: Tensor, u_r: Tensor, b_r: Tensor,
        w_h: Tensor, u_h: Tensor, b_h: Tensor,
    }
}

impl<F: Real> GruParams<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }
}

crate::param_group! {
    pub struct BiGruParams {
        fwd: GruParams,
        bwd: GruParams,
    }
}

impl<F: Real> BiGruParams<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            fwd: GruParams::zeros(input, hidden),
            bwd: GruParams::zeros(input, hidden),
        }
    }
}

#[derive(Clone, Debug)]
struct Step<F> {
    h_prev: Vec<F>,
    z: Vec<F>,
    r: Vec<F>,
    uh: Vec<F>,
    cand: Vec<F>,
}

/// Activations of one direction, in processing order.
#[derive(Clone, Debug)]
pub struct GruTrace<F> {
    steps: Vec<Step<F>>,
    reverse: bool,
}

/// Runs one direction over the rows of `xs`. Output row `i` is the state
/// after consuming input row `i`, whichever direction is used.
pub fn gru_forward<F: Real>(p: &GruParams<F>, xs: &Tensor<F>, reverse: bool) -> (Tensor<F>, GruTrace<F>) {
    let len = xs.rows();
    let hd = p.hidden();
    let mut out = Tensor::zeros(&[len, hd]);
    let mut h = vec![F::zero(); hd];
    let mut steps = Vec::with_capacity(len);
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for &i in &order {
        let x = xs.row(i);
        let mut z = p.w_z.mv(x);
        let uz = p.u_z.mv(&h);
        let mut r = p.w_r.mv(x);
        let ur = p.u_r.mv(&h);
        let mut cand = p.w_h.mv(x);
        let uh = p.u_h.mv(&h);
        for j in 0..hd {
            z[j] = sigmoid(z[j] + uz[j] + p.b_z.data()[j]);
            r[j] = sigmoid(r[j] + ur[j] + p.b_r.data()[j]);
        }
        for j in 0..hd {
            cand[j] = (cand[j] + p.b_h.data()[j] + r[j] * uh[j]).tanh();
        }
        let h_new: Vec<F> = (0..hd)
            .map(|j| (F::one() - z[j]) * h[j] + z[j] * cand[j])
            .collect();
        out.row_mut(i).copy_from_slice(&h_new);
        steps.push(Step {
            h_prev: std::mem::replace(&mut h, h_new),
            z,
            r,
            uh,
            cand,
        });
    }
    (out, GruTrace { steps, reverse })
}

/// Accumulates parameter gradients into `g` and returns `dL/dxs`.
pub fn gru_backward<F: Real>(
    p: &GruParams<F>,
    trace: &GruTrace<F>,
    xs: &Tensor<F>,
    d_out: &Tensor<F>,
    g: &mut GruParams<F>,
) -> Tensor<F> {
    let len = xs.rows();
    let hd = p.hidden();
    let mut dx = Tensor::zeros(xs.shape());
    let mut carry = vec![F::zero(); hd];
    for (s, step) in trace.steps.iter().enumerate().rev() {
        let i = if trace.reverse { len - 1 - s } else { s };
        let x = xs.row(i);
        let dh: Vec<F> = d_out.row(i).iter().zip(&carry).map(|(&a, &b)| a + b).collect();
        let mut dh_prev: Vec<F> = (0..hd).map(|j| dh[j] * (F::one() - step.z[j])).collect();

        let mut da_h = vec![F::zero(); hd];
        let mut da_z = vec![F::zero(); hd];
        let mut da_r = vec![F::zero(); hd];
        let mut d_uh = vec![F::zero(); hd];
        for j in 0..hd {
            let (z, r, c) = (step.z[j], step.r[j], step.cand[j]);
            let dc = dh[j] * z;
            let dz = dh[j] * (c - step.h_prev[j]);
            da_h[j] = dc * (F::one() - c * c);
            d_uh[j] = da_h[j] * r;
            let dr = da_h[j] * step.uh[j];
            da_z[j] = dz * z * (F::one() - z);
            da_r[j] = dr * r * (F::one() - r);
        }

        g.w_h.outer_acc(&da_h, x);
        crate::tensor::add_into(&da_h, g.b_h.data_mut());
        g.u_h.outer_acc(&d_uh, &step.h_prev);
        g.w_z.outer_acc(&da_z, x);
        crate::tensor::add_into(&da_z, g.b_z.data_mut());
        g.u_z.outer_acc(&da_z, &step.h_prev);
        g.w_r.outer_acc(&da_r, x);
        crate::tensor::add_into(&da_r, g.b_r.data_mut());
        g.u_r.outer_acc(&da_r, &step.h_prev);

        let dxi = dx.row_mut(i);
        p.w_h.matvec_t_acc(&da_h, dxi);
        p.w_z.matvec_t_acc(&da_z, dxi);
        p.w_r.matvec_t_acc(&da_r, dxi);
        p.u_h.matvec_t_acc(&d_uh, &mut dh_prev);
        p.u_z.matvec_t_acc(&da_z, &mut dh_prev);
        p.u_r.matvec_t_acc(&da_r, &mut dh_prev);
        carry = dh_prev;
    }
    dx
}

#[derive(Clone, Debug)]
pub struct BiGruTrace<F> {
    fwd: GruTrace<F>,
    bwd: GruTrace<F>,
}

/// Output row `i` is `[forward state; backward state]` at position `i`.
pub fn bigru_forward<F: Real>(p: &BiGruParams<F>, xs: &Tensor<F>) -> (Tensor<F>, BiGruTrace<F>) {
    let (hf, tf) = gru_forward(&p.fwd, xs, false);
    let (hb, tb) = gru_forward(&p.bwd, xs, true);
    let hd = p.fwd.hidden();
    let mut out = Tensor::zeros(&[xs.rows(), 2 * hd]);
    for i in 0..xs.rows() {
        let row = out.row_mut(i);
        row[..hd].copy_from_slice(hf.row(i));
        row[hd..].copy_from_slice(hb.row(i));
    }
    (out, BiGruTrace { fwd: tf, bwd: tb })
}

pub fn bigru_backward<F: Real>(
    p: &BiGruParams<F>,
    trace: &BiGruTrace<F>,
    xs: &Tensor<F>,
    d_out: &Tensor<F>,
    g: &mut BiGruParams<F>,
) -> Tensor<F> {
    let hd = p.fwd.hidden();
    let len = xs.rows();
    let mut df = Tensor::zeros(&[len, hd]);
    let mut db = Tensor::zeros(&[len, hd]);
    for i in 0..len {
        df.row_mut(i).copy_from_slice(&d_out.row(i)[..hd]);
        db.row_mut(i).copy_from_slice(&d_out.row(i)[hd..]);
    }
    let mut dx = gru_backward(&p.fwd, &trace.fwd, xs, &df, &mut g.fwd);
    dx.add_assign(&gru_backward(&p.bwd, &trace.bwd, xs, &db, &mut g.bwd));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruParams<f64> {
        let mut p = GruParams::zeros(input, hidden);
        p.for_each_mut("", &mut |_, t| {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-0.5..0.5))
        });
        p
    }

    /// Scalar, per-timestep recurrence written without any helper kernels.
    fn scalar_oracle(p: &GruParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hd = p.hidden();
        let d = p.input();
        let at = |t: &Tensor<f64>, i: usize, j: usize| t.data()[i * t.cols() + j];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hd];
        let mut out = Vec::new();
        for x in xs {
            let mut nh = vec![0.0; hd];
            for j in 0..hd {
                let (mut az, mut ar, mut ah, mut uh) = (p.b_z.data()[j], p.b_r.data()[j], p.b_h.data()[j], 0.0);
                for i in 0..d {
                    az += at(&p.w_z, j, i) * x[i];
                    ar += at(&p.w_r, j, i) * x[i];
                    ah += at(&p.w_h, j, i) * x[i];
                }
                for i in 0..hd {
                    az += at(&p.u_z, j, i) * h[i];
                    ar += at(&p.u_r, j, i) * h[i];
                    uh += at(&p.u_h, j, i) * h[i];
                }
                let (z, r) = (sig(az), sig(ar));
                let c = (ah + r * uh).tanh();
                nh[j] = (1.0 - z) * h[j] + z * c;
            }
            h = nh;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn zero_params_give_zero_states() {
        let p = BiGruParams::<f64>::zeros(3, 4);
        let xs = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]);
        let (out, _) = bigru_forward(&p, &xs);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 3, 4);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let xs = Tensor::from_vec(&[3, 3], rows.concat());
        let (fwd, _) = gru_forward(&p, &xs, false);
        let expect = scalar_oracle(&p, &rows);
        for i in 0..3 {
            for j in 0..4 {
                assert!((fwd.row(i)[j] - expect[i][j]).abs() < 1e-12);
            }
        }
        let (bwd, _) = gru_forward(&p, &xs, true);
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let expect = scalar_oracle(&p, &rev);
        for i in 0..3 {
            for j in 0..4 {
                assert!((bwd.row(2 - i)[j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_directions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 2, 3);
        let bi = BiGruParams {
            fwd: p.clone(),
            bwd: p,
        };
        let xs = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]);
        let (out, _) = bigru_forward(&bi, &xs);
        assert_eq!(out.row(0)[..3], out.row(0)[3..]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BiGruParams {
            fwd: random_params(&mut rng, 2, 3),
            bwd: random_params(&mut rng, 2, 3),
        };
        let xs = Tensor::from_vec(&[4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let weights: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &BiGruParams<f64>, xs: &Tensor<f64>| {
            let (o, _) = bigru_forward(p, xs);
            crate::tensor::dot(o.data(), &weights)
        };
        let (_, trace) = bigru_forward(&p, &xs);
        let mut g = p.zeros_like();
        let d_out = Tensor::from_vec(&[4, 6], weights.clone());
        let dx = bigru_backward(&p, &trace, &xs, &d_out, &mut g);
        let h = 1e-6;
        for i in 0..xs.len() {
            let mut a = xs.clone();
            a.data_mut()[i] += h;
            let mut b = xs.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
        let analytic = g.flat();
        let base = p.flat();
        let mut probe = p.clone();
        let fds: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut v = base.clone();
                v[i] = base[i] + h;
                probe.set_flat(&v);
                let lp = loss(&probe, &xs);
                v[i] = base[i] - h;
                probe.set_flat(&v);
                let lm = loss(&probe, &xs);
                (lp - lm) / (2.0 * h)
            })
            .collect();
        for (a, f) in analytic.iter().zip(&fds) {
            assert!((a - f).abs() < 1e-8, "{a} vs {f}");
        }
    }
}
