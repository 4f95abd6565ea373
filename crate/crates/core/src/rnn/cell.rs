//! Single time steps of the three cell kinds, with the activation records
//! needed to differentiate them.

use nalgebra::DVector;

use super::{CellKind, LayerWeights, RnnError};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations of one step. For the LSTM family `gates` holds `[i, f, o, k]`
/// after their nonlinearities; for the GRU `[z, r, ĥ]`.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: DVector<f64>,
    pub h_prev: DVector<f64>,
    pub c_prev: DVector<f64>,
    pub gates: Vec<DVector<f64>>,
    /// mLSTM factors `(w_ma · h_prev, w_my · x)`.
    pub mult: Option<(DVector<f64>, DVector<f64>)>,
    /// Recurrent input of the gate affines: `h_prev`, `m` (mLSTM) or `r ⊙ h_prev` for the GRU candidate.
    pub rec: DVector<f64>,
    pub tanh_c: DVector<f64>,
    pub h: DVector<f64>,
    pub c: DVector<f64>,
}

fn affine(w: &LayerWeights, g: usize, x: &DVector<f64>, rec: &DVector<f64>) -> DVector<f64> {
    let gate = &w.gates[g];
    let mut out = gate.bias.clone();
    out.gemv(1.0, &gate.w_in, x, 1.0);
    out.gemv(1.0, &gate.w_rec, rec, 1.0);
    out
}

pub(crate) fn step(w: &LayerWeights, h_prev: &DVector<f64>, c_prev: &DVector<f64>, x: &DVector<f64>) -> StepCache {
    match w.kind {
        CellKind::Lstm | CellKind::Mlstm => {
            let (rec, mult) = match &w.mult {
                Some(m) => {
                    let a = &m.w_ma * h_prev;
                    let b = &m.w_my * x;
                    (a.component_mul(&b), Some((a, b)))
                }
                None => (h_prev.clone(), None),
            };
            let i = affine(w, 0, x, &rec).map(sigmoid);
            let f = affine(w, 1, x, &rec).map(sigmoid);
            let o = affine(w, 2, x, &rec).map(sigmoid);
            let k = affine(w, 3, x, &rec).map(f64::tanh);
            let c = f.component_mul(c_prev) + i.component_mul(&k);
            let tanh_c = c.map(f64::tanh);
            let h = o.component_mul(&tanh_c);
            StepCache {
                x: x.clone(),
                h_prev: h_prev.clone(),
                c_prev: c_prev.clone(),
                gates: vec![i, f, o, k],
                mult,
                rec,
                tanh_c,
                h,
                c,
            }
        }
        CellKind::Gru => {
            let z = affine(w, 0, x, h_prev).map(sigmoid);
            let r = affine(w, 1, x, h_prev).map(sigmoid);
            let rh = r.component_mul(h_prev);
            let hh = affine(w, 2, x, &rh).map(f64::tanh);
            let h = h_prev + z.component_mul(&(&hh - h_prev));
            StepCache {
                x: x.clone(),
                h_prev: h_prev.clone(),
                c_prev: DVector::zeros(0),
                gates: vec![z, r, hh],
                mult: None,
                rec: rh,
                tanh_c: DVector::zeros(0),
                h,
                c: DVector::zeros(0),
            }
        }
    }
}

/// Gradients flowing out of one step.
pub(crate) struct StepGrad {
    pub dx: DVector<f64>,
    pub dh_prev: DVector<f64>,
    pub dc_prev: DVector<f64>,
}

/// Reverse of [`step`]: accumulates parameter gradients into `grad` and
/// returns gradients with respect to the step inputs.
pub(crate) fn step_backward(
    w: &LayerWeights,
    cache: &StepCache,
    dh: &DVector<f64>,
    dc: &DVector<f64>,
    grad: &mut LayerWeights,
) -> StepGrad {
    let mut dx = DVector::zeros(w.input_dim);
    match w.kind {
        CellKind::Lstm | CellKind::Mlstm => {
            let [i, f, o, k] = [&cache.gates[0], &cache.gates[1], &cache.gates[2], &cache.gates[3]];
            let d_o = dh.component_mul(&cache.tanh_c);
            let dc = dc + dh.component_mul(o).component_mul(&cache.tanh_c.map(|t| 1.0 - t * t));
            let d_i = dc.component_mul(k);
            let d_f = dc.component_mul(&cache.c_prev);
            let d_k = dc.component_mul(i);
            let dc_prev = dc.component_mul(f);
            let pre = [
                d_i.component_mul(&i.map(|v| v * (1.0 - v))),
                d_f.component_mul(&f.map(|v| v * (1.0 - v))),
                d_o.component_mul(&o.map(|v| v * (1.0 - v))),
                d_k.component_mul(&k.map(|v| 1.0 - v * v)),
            ];
            let mut drec = DVector::zeros(w.size);
            for (g, da) in pre.iter().enumerate() {
                let gw = &w.gates[g];
                let gg = &mut grad.gates[g];
                gg.w_in.ger(1.0, da, &cache.x, 1.0);
                gg.w_rec.ger(1.0, da, &cache.rec, 1.0);
                gg.bias += da;
                dx.gemv_tr(1.0, &gw.w_in, da, 1.0);
                drec.gemv_tr(1.0, &gw.w_rec, da, 1.0);
            }
            let dh_prev = match (&w.mult, &cache.mult) {
                (Some(m), Some((a, b))) => {
                    let gm = grad.mult.as_mut().expect("mLSTM gradient has factor matrices");
                    let da = drec.component_mul(b);
                    let db = drec.component_mul(a);
                    gm.w_ma.ger(1.0, &da, &cache.h_prev, 1.0);
                    gm.w_my.ger(1.0, &db, &cache.x, 1.0);
                    dx.gemv_tr(1.0, &m.w_my, &db, 1.0);
                    m.w_ma.tr_mul(&da)
                }
                _ => drec,
            };
            StepGrad { dx, dh_prev, dc_prev }
        }
        CellKind::Gru => {
            let [z, r, hh] = [&cache.gates[0], &cache.gates[1], &cache.gates[2]];
            let h_prev = &cache.h_prev;
            let dz = dh.component_mul(&(hh - h_prev));
            let dhh = dh.component_mul(z);
            let mut dh_prev = dh - dh.component_mul(z);

            let da_h = dhh.component_mul(&hh.map(|v| 1.0 - v * v));
            let gh = &w.gates[2];
            grad.gates[2].w_in.ger(1.0, &da_h, &cache.x, 1.0);
            grad.gates[2].w_rec.ger(1.0, &da_h, &cache.rec, 1.0);
            grad.gates[2].bias += &da_h;
            dx.gemv_tr(1.0, &gh.w_in, &da_h, 1.0);
            let drh = gh.w_rec.tr_mul(&da_h);
            let dr = drh.component_mul(h_prev);
            dh_prev += drh.component_mul(r);

            let da_z = dz.component_mul(&z.map(|v| v * (1.0 - v)));
            let da_r = dr.component_mul(&r.map(|v| v * (1.0 - v)));
            for (g, da) in [(0usize, &da_z), (1usize, &da_r)] {
                let gw = &w.gates[g];
                let gg = &mut grad.gates[g];
                gg.w_in.ger(1.0, da, &cache.x, 1.0);
                gg.w_rec.ger(1.0, da, h_prev, 1.0);
                gg.bias += da;
                dx.gemv_tr(1.0, &gw.w_in, da, 1.0);
                dh_prev.gemv_tr(1.0, &gw.w_rec, da, 1.0);
            }
            StepGrad { dx, dh_prev, dc_prev: DVector::zeros(0) }
        }
    }
}

fn check_inputs(w: &LayerWeights, kind: &[CellKind], vecs: &[(&str, &DVector<f64>, usize)]) -> Result<(), RnnError> {
    if !kind.contains(&w.kind) {
        return Err(RnnError::Shape(format!("weights are for a {} cell", w.kind)));
    }
    for (name, v, dim) in vecs {
        if v.len() != *dim {
            return Err(RnnError::Shape(format!("{name} has length {}, expected {dim}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RnnError::NonFinite(name.to_string()));
        }
    }
    Ok(())
}

/// One LSTM step; returns `(h_t, C_t)`.
pub fn lstm_step(
    weights: &LayerWeights,
    h_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    y_t: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), RnnError> {
    let s = weights.size;
    check_inputs(weights, &[CellKind::Lstm], &[("h_prev", h_prev, s), ("C_prev", c_prev, s), ("y_t", y_t, weights.input_dim)])?;
    let c = step(weights, h_prev, c_prev, y_t);
    Ok((c.h, c.c))
}

/// One multiplicative-LSTM step; returns `(h_t, C_t)`.
pub fn mlstm_step(
    weights: &LayerWeights,
    h_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    y_t: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), RnnError> {
    let s = weights.size;
    check_inputs(weights, &[CellKind::Mlstm], &[("h_prev", h_prev, s), ("C_prev", c_prev, s), ("y_t", y_t, weights.input_dim)])?;
    let c = step(weights, h_prev, c_prev, y_t);
    Ok((c.h, c.c))
}

/// One GRU step; returns `h_t`.
pub fn gru_step(weights: &LayerWeights, h_prev: &DVector<f64>, y_t: &DVector<f64>) -> Result<DVector<f64>, RnnError> {
    check_inputs(weights, &[CellKind::Gru], &[("h_prev", h_prev, weights.size), ("y_t", y_t, weights.input_dim)])?;
    Ok(step(weights, h_prev, &DVector::zeros(0), y_t).h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_weights(kind: CellKind, input_dim: usize, size: usize, seed: u64) -> LayerWeights {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = LayerWeights::random(kind, input_dim, size, &mut rng);
        for g in &mut w.gates {
            g.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        w
    }

    fn vec_of(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    // Scalar-loop re-implementations used as oracles.
    fn dot_row(m: &nalgebra::DMatrix<f64>, row: usize, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..v.len() {
            s += m[(row, j)] * v[j];
        }
        s
    }

    fn scalar_lstm(w: &LayerWeights, h: &[f64], c: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = w.size;
        let rec: Vec<f64> = match &w.mult {
            Some(m) => (0..s).map(|r| dot_row(&m.w_ma, r, h) * dot_row(&m.w_my, r, y)).collect(),
            None => h.to_vec(),
        };
        let mut h_out = vec![0.0; s];
        let mut c_out = vec![0.0; s];
        for r in 0..s {
            let pre = |g: usize| dot_row(&w.gates[g].w_rec, r, &rec) + dot_row(&w.gates[g].w_in, r, y) + w.gates[g].bias[r];
            let i = sig(pre(0));
            let f = sig(pre(1));
            let o = sig(pre(2));
            let k = pre(3).tanh();
            c_out[r] = f * c[r] + i * k;
            h_out[r] = o * c_out[r].tanh();
        }
        (h_out, c_out)
    }

    fn scalar_gru(w: &LayerWeights, h: &[f64], y: &[f64]) -> Vec<f64> {
        let s = w.size;
        let mut z = vec![0.0; s];
        let mut rh = vec![0.0; s];
        for r in 0..s {
            z[r] = sig(dot_row(&w.gates[0].w_in, r, y) + dot_row(&w.gates[0].w_rec, r, h) + w.gates[0].bias[r]);
            let rr = sig(dot_row(&w.gates[1].w_in, r, y) + dot_row(&w.gates[1].w_rec, r, h) + w.gates[1].bias[r]);
            rh[r] = rr * h[r];
        }
        (0..s)
            .map(|r| {
                let hh = (dot_row(&w.gates[2].w_in, r, y) + dot_row(&w.gates[2].w_rec, r, &rh) + w.gates[2].bias[r]).tanh();
                (1.0 - z[r]) * h[r] + z[r] * hh
            })
            .collect()
    }

    #[test]
    fn zero_lstm_forces_half_gates() {
        let w = LayerWeights::zeros(CellKind::Lstm, 3, 2);
        let y = vec_of(&[5.0, -1.0, 2.0]);
        let (h, c) = lstm_step(&w, &DVector::zeros(2), &DVector::zeros(2), &y).unwrap();
        assert!(h.iter().chain(c.iter()).all(|v| *v == 0.0));
        let cache = step(&w, &DVector::zeros(2), &DVector::zeros(2), &y);
        for g in &cache.gates[..3] {
            assert!(g.iter().all(|v| *v == 0.5));
        }
        let cp = vec_of(&[1.2, -3.0]);
        let (h, c) = lstm_step(&w, &DVector::zeros(2), &cp, &y).unwrap();
        for r in 0..2 {
            assert_eq!(c[r], 0.5 * cp[r]);
            assert_eq!(h[r], 0.5 * (0.5 * cp[r]).tanh());
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let w = LayerWeights::zeros(CellKind::Gru, 2, 3);
        let hp = vec_of(&[0.4, -0.2, 1.0]);
        let h = gru_step(&w, &hp, &vec_of(&[1.0, 2.0])).unwrap();
        assert_eq!(h, hp * 0.5);
        let h0 = gru_step(&w, &DVector::zeros(3), &vec_of(&[1.0, 2.0])).unwrap();
        assert!(h0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mlstm_zero_factor_reduces_to_bias_affines() {
        let mut w = random_weights(CellKind::Mlstm, 3, 4, 11);
        w.mult.as_mut().unwrap().w_ma.fill(0.0);
        let hp = vec_of(&[0.3, -0.1, 0.2, 0.5]);
        let y = vec_of(&[1.0, 2.0, -1.0]);
        let cache = step(&w, &hp, &DVector::zeros(4), &y);
        assert!(cache.rec.iter().all(|v| *v == 0.0));
        // gates only see the input affine and bias
        let expect_i = (&w.gates[0].w_in * &y + &w.gates[0].bias).map(sig);
        assert!((cache.gates[0].clone() - expect_i).amax() < 1e-15);

        let z = LayerWeights::zeros(CellKind::Mlstm, 3, 2);
        let zl = LayerWeights::zeros(CellKind::Lstm, 3, 2);
        let cp = vec_of(&[0.7, -0.4]);
        assert_eq!(
            mlstm_step(&z, &DVector::zeros(2), &cp, &y).unwrap(),
            lstm_step(&zl, &DVector::zeros(2), &cp, &y).unwrap()
        );
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        for kind in [CellKind::Lstm, CellKind::Mlstm] {
            let w = random_weights(kind, 3, 5, 3);
            let h = [0.1, -0.3, 0.25, 0.0, 0.6];
            let c = [0.5, -1.2, 0.3, 2.0, -0.1];
            let y = [0.8, -1.5, 0.4];
            let f = if kind == CellKind::Lstm { lstm_step } else { mlstm_step };
            let (hv, cv) = f(&w, &vec_of(&h), &vec_of(&c), &vec_of(&y)).unwrap();
            let (ho, co) = scalar_lstm(&w, &h, &c, &y);
            for r in 0..5 {
                assert!((hv[r] - ho[r]).abs() < 1e-12);
                assert!((cv[r] - co[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let w = random_weights(CellKind::Gru, 2, 4, 5);
        let h = [0.2, -0.7, 0.1, 0.9];
        let y = [1.3, -0.2];
        let hv = gru_step(&w, &vec_of(&h), &vec_of(&y)).unwrap();
        let ho = scalar_gru(&w, &h, &y);
        for r in 0..4 {
            assert!((hv[r] - ho[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_errors() {
        let w = LayerWeights::zeros(CellKind::Lstm, 3, 2);
        assert!(matches!(
            lstm_step(&w, &DVector::zeros(3), &DVector::zeros(2), &DVector::zeros(3)),
            Err(RnnError::Shape(_))
        ));
        assert!(matches!(
            lstm_step(&w, &DVector::zeros(2), &DVector::zeros(2), &vec_of(&[f64::NAN, 0.0, 0.0])),
            Err(RnnError::NonFinite(_))
        ));
        assert!(gru_step(&w, &DVector::zeros(2), &DVector::zeros(3)).is_err());
    }

    #[test]
    fn activations_stay_in_range() {
        for kind in CellKind::ALL {
            let w = random_weights(kind, 3, 6, 9);
            let mut h = DVector::zeros(6);
            let mut c = DVector::zeros(6);
            for t in 0..20 {
                let y = vec_of(&[(t as f64).sin() * 50.0, -30.0, 12.0]);
                let cache = step(&w, &h, &c, &y);
                let n_sig = if kind == CellKind::Gru { 2 } else { 3 };
                for g in &cache.gates[..n_sig] {
                    assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                assert!(cache.gates[n_sig].iter().all(|v| v.abs() <= 1.0));
                assert!(cache.h.iter().all(|v| v.abs() <= 1.0));
                h = cache.h;
                c = cache.c;
            }
        }
    }
}
