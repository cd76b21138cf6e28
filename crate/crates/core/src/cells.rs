//! Single-timestep forward and backward computation for vanilla RNN, GRU,
//! and LSTM cells, plus parameter construction.
//!
//! Forward steps come in two flavours: the plain `*_step` functions, and
//! cached variants that record every intermediate needed for exact
//! backpropagation through time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CellKind::Vanilla),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::argument(format!("unknown cell kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub u_i: Matrix,
    pub w_f: Matrix,
    pub u_f: Matrix,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub w_c: Matrix,
    pub u_c: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_c: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Vanilla(VanillaParams),
    Gru(GruParams),
    Lstm(LstmParams),
}

/// Hidden state carried between timesteps; `c` is present only for LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Option<Vector>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        CellState {
            h: Vector::zeros(hidden),
            c: match kind {
                CellKind::Lstm => Some(Vector::zeros(hidden)),
                _ => None,
            },
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Uniform Glorot weights, zero biases; deterministic per seed.
pub fn init_params(kind: CellKind, input_dim: usize, hidden: usize, seed: u64) -> Result<CellParams> {
    if input_dim == 0 || hidden == 0 {
        return Err(Error::argument(format!(
            "cell dims must be >= 1, got input {input_dim} hidden {hidden}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = || glorot(&mut rng, hidden, input_dim);
    match kind {
        CellKind::Vanilla => {
            let w = w();
            let u = glorot(&mut rng, hidden, hidden);
            Ok(CellParams::Vanilla(VanillaParams {
                w,
                u,
                b: Vector::zeros(hidden),
            }))
        }
        CellKind::Gru => {
            let w_z = w();
            let w_r = glorot(&mut rng, hidden, input_dim);
            let w_h = glorot(&mut rng, hidden, input_dim);
            let u_z = glorot(&mut rng, hidden, hidden);
            let u_r = glorot(&mut rng, hidden, hidden);
            let u_h = glorot(&mut rng, hidden, hidden);
            Ok(CellParams::Gru(GruParams {
                w_z,
                u_z,
                w_r,
                u_r,
                w_h,
                u_h,
                b_z: Vector::zeros(hidden),
                b_r: Vector::zeros(hidden),
                b_h: Vector::zeros(hidden),
            }))
        }
        CellKind::Lstm => {
            let w_i = w();
            let w_f = glorot(&mut rng, hidden, input_dim);
            let w_o = glorot(&mut rng, hidden, input_dim);
            let w_c = glorot(&mut rng, hidden, input_dim);
            let u_i = glorot(&mut rng, hidden, hidden);
            let u_f = glorot(&mut rng, hidden, hidden);
            let u_o = glorot(&mut rng, hidden, hidden);
            let u_c = glorot(&mut rng, hidden, hidden);
            Ok(CellParams::Lstm(LstmParams {
                w_i,
                u_i,
                w_f,
                u_f,
                w_o,
                u_o,
                w_c,
                u_c,
                b_i: Vector::zeros(hidden),
                b_f: Vector::zeros(hidden),
                b_o: Vector::zeros(hidden),
                b_c: Vector::zeros(hidden),
            }))
        }
    }
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Vanilla(_) => CellKind::Vanilla,
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Vanilla(p) => p.w.rows(),
            CellParams::Gru(p) => p.w_z.rows(),
            CellParams::Lstm(p) => p.w_i.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CellParams::Vanilla(p) => p.w.cols(),
            CellParams::Gru(p) => p.w_z.cols(),
            CellParams::Lstm(p) => p.w_i.cols(),
        }
    }

    pub fn zeros_like(&self) -> CellParams {
        let (h, d) = (self.hidden(), self.input_dim());
        let m = |r, c| Matrix::zeros(r, c);
        match self {
            CellParams::Vanilla(_) => CellParams::Vanilla(VanillaParams {
                w: m(h, d),
                u: m(h, h),
                b: Vector::zeros(h),
            }),
            CellParams::Gru(_) => CellParams::Gru(GruParams {
                w_z: m(h, d),
                u_z: m(h, h),
                w_r: m(h, d),
                u_r: m(h, h),
                w_h: m(h, d),
                u_h: m(h, h),
                b_z: Vector::zeros(h),
                b_r: Vector::zeros(h),
                b_h: Vector::zeros(h),
            }),
            CellParams::Lstm(_) => CellParams::Lstm(LstmParams {
                w_i: m(h, d),
                u_i: m(h, h),
                w_f: m(h, d),
                u_f: m(h, h),
                w_o: m(h, d),
                u_o: m(h, h),
                w_c: m(h, d),
                u_c: m(h, h),
                b_i: Vector::zeros(h),
                b_f: Vector::zeros(h),
                b_o: Vector::zeros(h),
                b_c: Vector::zeros(h),
            }),
        }
    }

    /// Learnable slices in a stable order. Bias slices are omitted when
    /// `include_biases` is false so they never receive updates.
    pub fn param_slices(&self, include_biases: bool) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match self {
            CellParams::Vanilla(p) => {
                out.push(p.w.as_slice());
                out.push(p.u.as_slice());
                if include_biases {
                    out.push(p.b.as_slice());
                }
            }
            CellParams::Gru(p) => {
                for m in [&p.w_z, &p.u_z, &p.w_r, &p.u_r, &p.w_h, &p.u_h] {
                    out.push(m.as_slice());
                }
                if include_biases {
                    for b in [&p.b_z, &p.b_r, &p.b_h] {
                        out.push(b.as_slice());
                    }
                }
            }
            CellParams::Lstm(p) => {
                for m in [&p.w_i, &p.u_i, &p.w_f, &p.u_f, &p.w_o, &p.u_o, &p.w_c, &p.u_c] {
                    out.push(m.as_slice());
                }
                if include_biases {
                    for b in [&p.b_i, &p.b_f, &p.b_o, &p.b_c] {
                        out.push(b.as_slice());
                    }
                }
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self, include_biases: bool) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match self {
            CellParams::Vanilla(p) => {
                out.push(p.w.as_mut_slice());
                out.push(p.u.as_mut_slice());
                if include_biases {
                    out.push(p.b.as_mut_slice());
                }
            }
            CellParams::Gru(p) => {
                out.push(p.w_z.as_mut_slice());
                out.push(p.u_z.as_mut_slice());
                out.push(p.w_r.as_mut_slice());
                out.push(p.u_r.as_mut_slice());
                out.push(p.w_h.as_mut_slice());
                out.push(p.u_h.as_mut_slice());
                if include_biases {
                    out.push(p.b_z.as_mut_slice());
                    out.push(p.b_r.as_mut_slice());
                    out.push(p.b_h.as_mut_slice());
                }
            }
            CellParams::Lstm(p) => {
                out.push(p.w_i.as_mut_slice());
                out.push(p.u_i.as_mut_slice());
                out.push(p.w_f.as_mut_slice());
                out.push(p.u_f.as_mut_slice());
                out.push(p.w_o.as_mut_slice());
                out.push(p.u_o.as_mut_slice());
                out.push(p.w_c.as_mut_slice());
                out.push(p.u_c.as_mut_slice());
                if include_biases {
                    out.push(p.b_i.as_mut_slice());
                    out.push(p.b_f.as_mut_slice());
                    out.push(p.b_o.as_mut_slice());
                    out.push(p.b_c.as_mut_slice());
                }
            }
        }
        out
    }
}

fn affine(w: &Matrix, x: &Vector, u: &Matrix, h: &Vector, b: &Vector) -> Result<Vector> {
    let mut a = w.matvec(x)?;
    let uh = u.matvec(h)?;
    a.add_assign(&uh);
    a.add_assign(b);
    Ok(a)
}

/// h_t = tanh(W x_t + U h_{t-1} + b)
pub fn rnn_step(w: &Matrix, u: &Matrix, b: &Vector, x_t: &Vector, h_prev: &Vector) -> Result<Vector> {
    let a = affine(w, x_t, u, h_prev, b)?;
    Ok(Vector::from_vec(a.as_slice().iter().map(|v| v.tanh()).collect()))
}

pub fn gru_step(p: &GruParams, x_t: &Vector, h_prev: &Vector) -> Result<Vector> {
    gru_step_cached(p, x_t, h_prev).map(|(h, _)| h)
}

pub fn lstm_step(p: &LstmParams, x_t: &Vector, state: &CellState) -> Result<CellState> {
    let (s, _) = lstm_step_cached(p, x_t, state)?;
    Ok(s)
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub enum StepCache {
    Vanilla {
        x: Vector,
        h_prev: Vector,
        h: Vector,
    },
    Gru {
        x: Vector,
        h_prev: Vector,
        z: Vector,
        r: Vector,
        rh: Vector,
        hcand: Vector,
    },
    Lstm {
        x: Vector,
        h_prev: Vector,
        c_prev: Vector,
        i: Vector,
        f: Vector,
        o: Vector,
        ccand: Vector,
        c: Vector,
        tanh_c: Vector,
    },
}

pub fn vanilla_step_cached(
    p: &VanillaParams,
    x_t: &Vector,
    h_prev: &Vector,
) -> Result<(Vector, StepCache)> {
    let h = rnn_step(&p.w, &p.u, &p.b, x_t, h_prev)?;
    Ok((
        h.clone(),
        StepCache::Vanilla {
            x: x_t.clone(),
            h_prev: h_prev.clone(),
            h,
        },
    ))
}

pub fn gru_step_cached(p: &GruParams, x_t: &Vector, h_prev: &Vector) -> Result<(Vector, StepCache)> {
    let hidden = p.w_z.rows();
    let a_z = affine(&p.w_z, x_t, &p.u_z, h_prev, &p.b_z)?;
    let a_r = affine(&p.w_r, x_t, &p.u_r, h_prev, &p.b_r)?;
    let z = Vector::from_vec(a_z.as_slice().iter().map(|&v| sigmoid(v)).collect());
    let r = Vector::from_vec(a_r.as_slice().iter().map(|&v| sigmoid(v)).collect());
    let mut rh = Vector::zeros(hidden);
    for j in 0..hidden {
        rh[j] = r[j] * h_prev[j];
    }
    let a_h = affine(&p.w_h, x_t, &p.u_h, &rh, &p.b_h)?;
    let hcand = Vector::from_vec(a_h.as_slice().iter().map(|v| v.tanh()).collect());
    let mut h = Vector::zeros(hidden);
    for j in 0..hidden {
        h[j] = (1.0 - z[j]) * h_prev[j] + z[j] * hcand[j];
    }
    Ok((
        h,
        StepCache::Gru {
            x: x_t.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            rh,
            hcand,
        },
    ))
}

pub fn lstm_step_cached(
    p: &LstmParams,
    x_t: &Vector,
    state: &CellState,
) -> Result<(CellState, StepCache)> {
    let hidden = p.w_i.rows();
    let h_prev = &state.h;
    let c_prev = state
        .c
        .as_ref()
        .ok_or_else(|| Error::argument("lstm_step requires a memory cell in the state"))?;
    let i = Vector::from_vec(
        affine(&p.w_i, x_t, &p.u_i, h_prev, &p.b_i)?
            .as_slice()
            .iter()
            .map(|&v| sigmoid(v))
            .collect(),
    );
    let f = Vector::from_vec(
        affine(&p.w_f, x_t, &p.u_f, h_prev, &p.b_f)?
            .as_slice()
            .iter()
            .map(|&v| sigmoid(v))
            .collect(),
    );
    let o = Vector::from_vec(
        affine(&p.w_o, x_t, &p.u_o, h_prev, &p.b_o)?
            .as_slice()
            .iter()
            .map(|&v| sigmoid(v))
            .collect(),
    );
    let ccand = Vector::from_vec(
        affine(&p.w_c, x_t, &p.u_c, h_prev, &p.b_c)?
            .as_slice()
            .iter()
            .map(|v| v.tanh())
            .collect(),
    );
    let mut c = Vector::zeros(hidden);
    let mut tanh_c = Vector::zeros(hidden);
    let mut h = Vector::zeros(hidden);
    for j in 0..hidden {
        c[j] = f[j] * c_prev[j] + i[j] * ccand[j];
        tanh_c[j] = c[j].tanh();
        h[j] = o[j] * tanh_c[j];
    }
    Ok((
        CellState {
            h: h.clone(),
            c: Some(c.clone()),
        },
        StepCache::Lstm {
            x: x_t.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            o,
            ccand,
            c,
            tanh_c,
        },
    ))
}

pub fn step_cached(p: &CellParams, x_t: &Vector, state: &CellState) -> Result<(CellState, StepCache)> {
    match p {
        CellParams::Vanilla(p) => {
            let (h, cache) = vanilla_step_cached(p, x_t, &state.h)?;
            Ok((CellState { h, c: None }, cache))
        }
        CellParams::Gru(p) => {
            let (h, cache) = gru_step_cached(p, x_t, &state.h)?;
            Ok((CellState { h, c: None }, cache))
        }
        CellParams::Lstm(p) => lstm_step_cached(p, x_t, state),
    }
}

/// Gradient flowing backwards into a timestep's output state.
#[derive(Debug, Clone)]
pub struct StateGrad {
    pub dh: Vector,
    pub dc: Option<Vector>,
}

impl StateGrad {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        StateGrad {
            dh: Vector::zeros(hidden),
            dc: match kind {
                CellKind::Lstm => Some(Vector::zeros(hidden)),
                _ => None,
            },
        }
    }
}

/// One BPTT step: consumes the gradient arriving at (h_t, c_t), accumulates
/// parameter gradients into `grads`, optionally writes the gradient w.r.t.
/// the step input into `dx`, and returns the gradient for (h_{t-1}, c_{t-1}).
pub fn step_backward(
    p: &CellParams,
    cache: &StepCache,
    upstream: &StateGrad,
    grads: &mut CellParams,
    mut dx: Option<&mut Vector>,
) -> StateGrad {
    match (p, grads, cache) {
        (CellParams::Vanilla(p), CellParams::Vanilla(g), StepCache::Vanilla { x, h_prev, h }) => {
            let hidden = h.dim();
            // da = dh * (1 - h^2)
            let mut da = Vector::zeros(hidden);
            for j in 0..hidden {
                da[j] = upstream.dh[j] * (1.0 - h[j] * h[j]);
            }
            g.w.add_outer(da.as_slice(), x.as_slice());
            g.u.add_outer(da.as_slice(), h_prev.as_slice());
            for j in 0..hidden {
                g.b[j] += da[j];
            }
            let mut dh_prev = Vector::zeros(hidden);
            p.u.transpose_matvec_into(da.as_slice(), dh_prev.as_mut_slice());
            if let Some(dx) = dx.as_deref_mut() {
                p.w.transpose_matvec_into(da.as_slice(), dx.as_mut_slice());
            }
            StateGrad { dh: dh_prev, dc: None }
        }
        (
            CellParams::Gru(p),
            CellParams::Gru(g),
            StepCache::Gru {
                x,
                h_prev,
                z,
                r,
                rh,
                hcand,
            },
        ) => {
            let hidden = z.dim();
            let dh = &upstream.dh;
            let mut da_z = Vector::zeros(hidden);
            let mut da_h = Vector::zeros(hidden);
            let mut dh_prev = Vector::zeros(hidden);
            for j in 0..hidden {
                // h = (1-z) h_prev + z hcand
                let dz = dh[j] * (hcand[j] - h_prev[j]);
                da_z[j] = dz * z[j] * (1.0 - z[j]);
                let dhcand = dh[j] * z[j];
                da_h[j] = dhcand * (1.0 - hcand[j] * hcand[j]);
                dh_prev[j] = dh[j] * (1.0 - z[j]);
            }
            // through hcand = tanh(W_h x + U_h (r ⊙ h_prev) + b_h)
            let mut drh = Vector::zeros(hidden);
            p.u_h.transpose_matvec_into(da_h.as_slice(), drh.as_mut_slice());
            let mut da_r = Vector::zeros(hidden);
            for j in 0..hidden {
                let dr = drh[j] * h_prev[j];
                da_r[j] = dr * r[j] * (1.0 - r[j]);
                dh_prev[j] += drh[j] * r[j];
            }
            p.u_z.transpose_matvec_into(da_z.as_slice(), dh_prev.as_mut_slice());
            p.u_r.transpose_matvec_into(da_r.as_slice(), dh_prev.as_mut_slice());
            g.w_z.add_outer(da_z.as_slice(), x.as_slice());
            g.u_z.add_outer(da_z.as_slice(), h_prev.as_slice());
            g.w_r.add_outer(da_r.as_slice(), x.as_slice());
            g.u_r.add_outer(da_r.as_slice(), h_prev.as_slice());
            g.w_h.add_outer(da_h.as_slice(), x.as_slice());
            g.u_h.add_outer(da_h.as_slice(), rh.as_slice());
            for j in 0..hidden {
                g.b_z[j] += da_z[j];
                g.b_r[j] += da_r[j];
                g.b_h[j] += da_h[j];
            }
            if let Some(dx) = dx.as_deref_mut() {
                p.w_z.transpose_matvec_into(da_z.as_slice(), dx.as_mut_slice());
                p.w_r.transpose_matvec_into(da_r.as_slice(), dx.as_mut_slice());
                p.w_h.transpose_matvec_into(da_h.as_slice(), dx.as_mut_slice());
            }
            StateGrad { dh: dh_prev, dc: None }
        }
        (
            CellParams::Lstm(p),
            CellParams::Lstm(g),
            StepCache::Lstm {
                x,
                h_prev,
                c_prev,
                i,
                f,
                o,
                ccand,
                tanh_c,
                ..
            },
        ) => {
            let hidden = i.dim();
            let dh = &upstream.dh;
            let zero = Vector::zeros(hidden);
            let dc_up = upstream.dc.as_ref().unwrap_or(&zero);
            let mut da_i = Vector::zeros(hidden);
            let mut da_f = Vector::zeros(hidden);
            let mut da_o = Vector::zeros(hidden);
            let mut da_c = Vector::zeros(hidden);
            let mut dc_prev = Vector::zeros(hidden);
            for j in 0..hidden {
                // h = o ⊙ tanh(c); c = f ⊙ c_prev + i ⊙ ccand
                let d_o = dh[j] * tanh_c[j];
                let dc = dc_up[j] + dh[j] * o[j] * (1.0 - tanh_c[j] * tanh_c[j]);
                let d_f = dc * c_prev[j];
                let d_i = dc * ccand[j];
                let d_ccand = dc * i[j];
                da_o[j] = d_o * o[j] * (1.0 - o[j]);
                da_f[j] = d_f * f[j] * (1.0 - f[j]);
                da_i[j] = d_i * i[j] * (1.0 - i[j]);
                da_c[j] = d_ccand * (1.0 - ccand[j] * ccand[j]);
                dc_prev[j] = dc * f[j];
            }
            let mut dh_prev = Vector::zeros(hidden);
            for (u, da) in [
                (&p.u_i, &da_i),
                (&p.u_f, &da_f),
                (&p.u_o, &da_o),
                (&p.u_c, &da_c),
            ] {
                u.transpose_matvec_into(da.as_slice(), dh_prev.as_mut_slice());
            }
            g.w_i.add_outer(da_i.as_slice(), x.as_slice());
            g.u_i.add_outer(da_i.as_slice(), h_prev.as_slice());
            g.w_f.add_outer(da_f.as_slice(), x.as_slice());
            g.u_f.add_outer(da_f.as_slice(), h_prev.as_slice());
            g.w_o.add_outer(da_o.as_slice(), x.as_slice());
            g.u_o.add_outer(da_o.as_slice(), h_prev.as_slice());
            g.w_c.add_outer(da_c.as_slice(), x.as_slice());
            g.u_c.add_outer(da_c.as_slice(), h_prev.as_slice());
            for j in 0..hidden {
                g.b_i[j] += da_i[j];
                g.b_f[j] += da_f[j];
                g.b_o[j] += da_o[j];
                g.b_c[j] += da_c[j];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for (w, da) in [
                    (&p.w_i, &da_i),
                    (&p.w_f, &da_f),
                    (&p.w_o, &da_o),
                    (&p.w_c, &da_c),
                ] {
                    w.transpose_matvec_into(da.as_slice(), dx.as_mut_slice());
                }
            }
            StateGrad {
                dh: dh_prev,
                dc: Some(dc_prev),
            }
        }
        _ => unreachable!("cell params, grads, and cache kinds must agree"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::linalg::Matrix;

    fn scalar_mat(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v])
    }

    fn scalar_vec(v: f64) -> Vector {
        Vector::from_vec(vec![v])
    }

    #[test]
    fn rnn_step_zero_weights() {
        let w = Matrix::zeros(2, 3);
        let u = Matrix::zeros(2, 2);
        let b = Vector::zeros(2);
        let h = rnn_step(&w, &u, &b, &Vector::from_vec(vec![1.0, -2.0, 0.5]), &Vector::from_vec(vec![0.3, 0.7])).unwrap();
        assert_eq!(h.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rnn_step_scalar_reference() {
        let h = rnn_step(
            &scalar_mat(1.0),
            &scalar_mat(1.0),
            &scalar_vec(0.0),
            &scalar_vec(0.5),
            &scalar_vec(0.25),
        )
        .unwrap();
        assert_abs_diff_eq!(h[0], 0.75_f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], 0.6351489523872873, epsilon = 1e-10);
    }

    fn zero_gru(hidden: usize, input: usize) -> GruParams {
        match init_params(CellKind::Gru, input, hidden, 0).unwrap().zeros_like() {
            CellParams::Gru(p) => p,
            _ => unreachable!(),
        }
    }

    fn zero_lstm(hidden: usize, input: usize) -> LstmParams {
        match init_params(CellKind::Lstm, input, hidden, 0).unwrap().zeros_like() {
            CellParams::Lstm(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn gru_zero_params_closed_form() {
        let p = zero_gru(3, 2);
        let h_prev = Vector::from_vec(vec![0.4, -0.6, 0.2]);
        let h = gru_step(&p, &Vector::zeros(2), &h_prev).unwrap();
        for j in 0..3 {
            assert_eq!(h[j], 0.5 * h_prev[j]);
        }
        let h0 = gru_step(&p, &Vector::zeros(2), &Vector::zeros(3)).unwrap();
        assert_eq!(h0.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_scalar_reference() {
        let mut p = zero_gru(1, 1);
        for m in [&mut p.w_z, &mut p.u_z, &mut p.w_r, &mut p.u_r, &mut p.w_h, &mut p.u_h] {
            m.set(0, 0, 1.0);
        }
        let h = gru_step(&p, &scalar_vec(1.0), &scalar_vec(0.0)).unwrap();
        let expect = sigmoid(1.0) * 1.0_f64.tanh();
        assert_abs_diff_eq!(h[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], 0.55677, epsilon = 1e-5);
    }

    #[test]
    fn lstm_zero_params_closed_form() {
        let p = zero_lstm(2, 3);
        let c_prev = Vector::from_vec(vec![0.8, -0.4]);
        let state = CellState {
            h: Vector::from_vec(vec![0.1, 0.2]),
            c: Some(c_prev.clone()),
        };
        let out = lstm_step(&p, &Vector::zeros(3), &state).unwrap();
        let c = out.c.unwrap();
        for j in 0..2 {
            assert_eq!(c[j], 0.5 * c_prev[j]);
            assert_eq!(out.h[j], 0.5 * (0.5 * c_prev[j]).tanh());
        }
        let zero_state = CellState::zeros(CellKind::Lstm, 2);
        let out0 = lstm_step(&p, &Vector::zeros(3), &zero_state).unwrap();
        assert_eq!(out0.h.as_slice(), &[0.0, 0.0]);
        assert_eq!(out0.c.unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_scalar_reference() {
        let mut p = zero_lstm(1, 1);
        for m in [
            &mut p.w_i, &mut p.u_i, &mut p.w_f, &mut p.u_f, &mut p.w_o, &mut p.u_o, &mut p.w_c,
            &mut p.u_c,
        ] {
            m.set(0, 0, 1.0);
        }
        let state = CellState::zeros(CellKind::Lstm, 1);
        let out = lstm_step(&p, &scalar_vec(1.0), &state).unwrap();
        let s1 = sigmoid(1.0);
        let c = s1 * 1.0_f64.tanh();
        assert_abs_diff_eq!(out.c.unwrap()[0], c, epsilon = 1e-15);
        assert_abs_diff_eq!(out.h[0], s1 * c.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.h[0], 0.36961, epsilon = 1e-5);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_params(CellKind::Gru, 10, 50, 42).unwrap();
        match &p {
            CellParams::Gru(g) => {
                assert_eq!((g.w_z.rows(), g.w_z.cols()), (50, 10));
                assert_eq!((g.u_z.rows(), g.u_z.cols()), (50, 50));
                assert_eq!(g.b_z.dim(), 50);
            }
            _ => unreachable!(),
        }
        let q = init_params(CellKind::Gru, 10, 50, 42).unwrap();
        assert_eq!(p, q);
        assert!(init_params(CellKind::Gru, 0, 5, 1).is_err());
    }

    #[test]
    fn init_respects_uniform_bound() {
        // recompute the bound per matrix and scan every entry
        let p = init_params(CellKind::Lstm, 7, 13, 3).unwrap();
        match &p {
            CellParams::Lstm(l) => {
                for (m, fan_in, fan_out) in [
                    (&l.w_i, 7usize, 13usize),
                    (&l.u_i, 13, 13),
                    (&l.w_c, 7, 13),
                    (&l.u_c, 13, 13),
                ] {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    assert!(m.as_slice().iter().all(|v| v.abs() <= bound));
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn gru_is_leaky_integrator_with_constant_gate() {
        // force z to a constant k by setting its bias to logit(k) and
        // zeroing its weights
        let mut p = match init_params(CellKind::Gru, 2, 3, 9).unwrap() {
            CellParams::Gru(g) => g,
            _ => unreachable!(),
        };
        let k: f64 = 0.3;
        p.w_z = Matrix::zeros(3, 2);
        p.u_z = Matrix::zeros(3, 3);
        let logit = (k / (1.0 - k)).ln();
        for j in 0..3 {
            p.b_z[j] = logit;
        }
        let x = Vector::from_vec(vec![0.7, -0.2]);
        let h_prev = Vector::from_vec(vec![0.1, 0.5, -0.3]);
        let (h, cache) = gru_step_cached(&p, &x, &h_prev).unwrap();
        if let StepCache::Gru { hcand, .. } = cache {
            for j in 0..3 {
                assert_abs_diff_eq!(h[j], (1.0 - k) * h_prev[j] + k * hcand[j], epsilon = 1e-12);
            }
        } else {
            unreachable!();
        }
    }

    #[test]
    fn bounded_hidden_state() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let p = init_params(kind, 4, 6, rng.gen()).unwrap();
            let mut state = CellState::zeros(kind, 6);
            for _ in 0..50 {
                let x = Vector::from_vec((0..4).map(|_| rng.gen_range(-10.0..10.0)).collect());
                let (next, _) = step_cached(&p, &x, &state).unwrap();
                state = next;
                assert!(state.h.as_slice().iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}
