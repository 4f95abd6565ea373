use nalgebra::{DMatrix, DVector};

use super::cell::{step, step_backward, StepCache};
use super::{LayerWeights, NetParams, RecurrentNet, RnnError};

/// Activation record of one window, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Per layer: forward-direction steps in time order.
    forward: Vec<Vec<StepCache>>,
    /// Per layer: reverse-direction steps in processing order (newest first).
    backward: Vec<Option<Vec<StepCache>>>,
    features: DVector<f64>,
    pub prediction: DVector<f64>,
}

fn run_direction(w: &LayerWeights, inputs: &[DVector<f64>], reverse: bool) -> Vec<StepCache> {
    let mut h = DVector::zeros(w.size);
    let mut c = DVector::zeros(w.size);
    let order: Box<dyn Iterator<Item = usize>> =
        if reverse { Box::new((0..inputs.len()).rev()) } else { Box::new(0..inputs.len()) };
    let mut caches = Vec::with_capacity(inputs.len());
    for t in order {
        let cache = step(w, &h, &c, &inputs[t]);
        h = cache.h.clone();
        c = cache.c.clone();
        caches.push(cache);
    }
    caches
}

/// Runs the network on an `n × p` window (columns oldest → newest, zero
/// initial states) and applies the readout to the final hidden state.
pub fn forward_window(net: &RecurrentNet, window: &DMatrix<f64>) -> Result<(DVector<f64>, Tape), RnnError> {
    let arch = &net.arch;
    if window.nrows() != arch.input_dim || window.ncols() != arch.lag {
        return Err(RnnError::Shape(format!(
            "window is {}×{}, network expects {}×{}",
            window.nrows(),
            window.ncols(),
            arch.input_dim,
            arch.lag
        )));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(RnnError::NonFinite("input window".into()));
    }
    let p = arch.lag;
    let mut inputs: Vec<DVector<f64>> = (0..p).map(|t| window.column(t).into_owned()).collect();
    let mut fwd_tapes = Vec::with_capacity(arch.layers);
    let mut bwd_tapes = Vec::with_capacity(arch.layers);
    for layer in &net.params.layers {
        let fwd = run_direction(&layer.forward, &inputs, false);
        let bwd = layer.backward.as_ref().map(|w| run_direction(w, &inputs, true));
        inputs = (0..p)
            .map(|t| match &bwd {
                Some(b) => {
                    let mut v = DVector::zeros(2 * arch.size);
                    v.rows_mut(0, arch.size).copy_from(&fwd[t].h);
                    v.rows_mut(arch.size, arch.size).copy_from(&b[p - 1 - t].h);
                    v
                }
                None => fwd[t].h.clone(),
            })
            .collect();
        fwd_tapes.push(fwd);
        bwd_tapes.push(bwd);
    }
    // Final states: forward run ends at t = p-1, reverse run ends at t = 0.
    let last_fwd = &fwd_tapes.last().expect("at least one layer")[p - 1].h;
    let features = match bwd_tapes.last().expect("at least one layer") {
        Some(b) => {
            let mut v = DVector::zeros(2 * arch.size);
            v.rows_mut(0, arch.size).copy_from(last_fwd);
            v.rows_mut(arch.size, arch.size).copy_from(&b[p - 1].h);
            v
        }
        None => last_fwd.clone(),
    };
    let mut prediction = net.params.readout_bias.clone();
    prediction.gemv(1.0, &net.params.readout, &features, 1.0);
    let tape = Tape { forward: fwd_tapes, backward: bwd_tapes, features, prediction: prediction.clone() };
    Ok((prediction, tape))
}

/// Penalized objective: `(1/(count·n)) Σ‖y_i − ŷ_i‖² + λ‖W‖²`.
pub fn loss_j(
    predictions: &[DVector<f64>],
    targets: &[DVector<f64>],
    params: &NetParams,
    lambda: f64,
) -> Result<f64, RnnError> {
    if predictions.is_empty() {
        return Err(RnnError::Contract("loss over an empty sequence".into()));
    }
    if predictions.len() != targets.len() {
        return Err(RnnError::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = targets[0].len();
    let mut sse = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(RnnError::Shape("prediction and target lengths differ".into()));
        }
        sse += (y - p).norm_squared();
    }
    let penalty = if lambda == 0.0 { 0.0 } else { lambda * params.weight_sq_norm() };
    Ok(sse / (predictions.len() * n) as f64 + penalty)
}

fn direction_backward(
    w: &LayerWeights,
    caches: &[StepCache],
    d_out: &[DVector<f64>],
    reverse: bool,
    offset: usize,
    grad: &mut LayerWeights,
    d_in: &mut [DVector<f64>],
) {
    let p = caches.len();
    let s = w.size;
    let mut dh_next = DVector::zeros(s);
    let mut dc_next = DVector::zeros(s);
    for k in (0..p).rev() {
        let t = if reverse { p - 1 - k } else { k };
        let dh = &dh_next + d_out[t].rows(offset, s);
        let g = step_backward(w, &caches[k], &dh, &dc_next, grad);
        d_in[t] += &g.dx;
        dh_next = g.dh_prev;
        dc_next = if g.dc_prev.is_empty() { DVector::zeros(s) } else { g.dc_prev };
    }
}

/// Exact gradient of [`loss_j`] over a batch of tapes with respect to every
/// parameter, by reverse accumulation through time and layers.
pub fn backward(
    net: &RecurrentNet,
    tapes: &[Tape],
    targets: &[DVector<f64>],
    lambda: f64,
) -> Result<NetParams, RnnError> {
    if tapes.is_empty() || tapes.len() != targets.len() {
        return Err(RnnError::Contract(format!("{} tapes for {} targets", tapes.len(), targets.len())));
    }
    let arch = &net.arch;
    let params = &net.params;
    let mut grad = params.zeros_like();
    let scale = 2.0 / (tapes.len() * arch.input_dim) as f64;
    let p = arch.lag;
    let s = arch.size;
    let feat = arch.feature_dim();
    for (tape, y) in tapes.iter().zip(targets) {
        if y.len() != arch.input_dim || tape.forward.len() != arch.layers {
            return Err(RnnError::Contract("tape does not match target or network".into()));
        }
        let dy = (&tape.prediction - y) * scale;
        grad.readout.ger(1.0, &dy, &tape.features, 1.0);
        grad.readout_bias += &dy;
        let dfeat = params.readout.tr_mul(&dy);

        // Gradient with respect to the top layer's output sequence.
        let mut d_out: Vec<DVector<f64>> = vec![DVector::zeros(feat); p];
        d_out[p - 1].rows_mut(0, s).copy_from(&dfeat.rows(0, s));
        if arch.bidirectional {
            d_out[0].rows_mut(s, s).copy_from(&dfeat.rows(s, s));
        }
        for l in (0..arch.layers).rev() {
            let layer = &params.layers[l];
            let mut d_in: Vec<DVector<f64>> = vec![DVector::zeros(layer.forward.input_dim); p];
            direction_backward(&layer.forward, &tape.forward[l], &d_out, false, 0, &mut grad.layers[l].forward, &mut d_in);
            if let (Some(w), Some(caches)) = (&layer.backward, &tape.backward[l]) {
                let g = grad.layers[l].backward.as_mut().expect("gradient mirrors network");
                direction_backward(w, caches, &d_out, true, s, g, &mut d_in);
            }
            d_out = d_in;
        }
    }
    if lambda != 0.0 {
        let mut weights = Vec::new();
        params.visit(&mut |_, d, pen| {
            if pen {
                weights.push(d.to_vec());
            }
        });
        let mut it = weights.into_iter();
        grad.visit_mut(&mut |_, g, pen| {
            if pen {
                let w = it.next().expect("same tensor order");
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi += 2.0 * lambda * wi;
                }
            }
        });
    }
    Ok(grad)
}

/// Largest relative gap between [`backward`] and central finite differences
/// of [`loss_j`] with step `h`, over every parameter. The relative error of a
/// component is `|a − f| / max(|a|, |f|, floor)`; the floor keeps components
/// that are zero up to rounding from dividing by nothing.
pub fn gradient_check(
    net: &RecurrentNet,
    windows: &[DMatrix<f64>],
    targets: &[DVector<f64>],
    lambda: f64,
    h: f64,
    floor: f64,
) -> Result<f64, RnnError> {
    let tapes = windows.iter().map(|w| forward_window(net, w).map(|(_, t)| t)).collect::<Result<Vec<_>, _>>()?;
    let analytic = backward(net, &tapes, targets, lambda)?.flatten();
    let base = net.params.flatten();
    let mut probe = net.clone();
    let mut objective = |flat: &[f64]| -> Result<f64, RnnError> {
        probe.params.load_flat(flat)?;
        let preds = windows.iter().map(|w| forward_window(&probe, w).map(|(p, _)| p)).collect::<Result<Vec<_>, _>>()?;
        loss_j(&preds, targets, &probe.params, lambda)
    };
    let mut worst = 0.0f64;
    let mut x = base.clone();
    for k in 0..base.len() {
        x[k] = base[k] + h;
        let up = objective(&x)?;
        x[k] = base[k] - h;
        let down = objective(&x)?;
        x[k] = base[k];
        let fd = (up - down) / (2.0 * h);
        let a = analytic[k];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::{Architecture, CellKind};

    fn arch(cell: CellKind, layers: usize, bidirectional: bool, lag: usize) -> Architecture {
        Architecture { cell, input_dim: 3, lag, layers, size: 4, bidirectional }
    }

    fn window(p: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_fn(3, p, |i, t| ((i * 7 + t * 3) as f64 + seed as f64).sin() * 1.5)
    }

    #[test]
    fn zero_net_predicts_readout_bias() {
        for cell in CellKind::ALL {
            let mut net = RecurrentNet::zeros(arch(cell, 2, true, 3)).unwrap();
            net.params.readout_bias = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
            let (pred, _) = forward_window(&net, &window(3, 1)).unwrap();
            assert_eq!(pred, net.params.readout_bias);
        }
    }

    #[test]
    fn lag_one_is_single_step_plus_readout() {
        let net = RecurrentNet::random(arch(CellKind::Lstm, 1, false, 1), 3).unwrap();
        let w = window(1, 2);
        let (pred, _) = forward_window(&net, &w).unwrap();
        let (h, _) = crate::rnn::lstm_step(
            &net.params.layers[0].forward,
            &DVector::zeros(4),
            &DVector::zeros(4),
            &w.column(0).into_owned(),
        )
        .unwrap();
        let expect = &net.params.readout * h + &net.params.readout_bias;
        assert!((pred - expect).amax() < 1e-15);
    }

    #[test]
    fn two_layers_compose_single_layer_runs() {
        for cell in CellKind::ALL {
            let a = arch(cell, 2, false, 4);
            let net = RecurrentNet::random(a, 5).unwrap();
            let w = window(4, 3);
            let (pred, _) = forward_window(&net, &w).unwrap();
            // Oracle: layer-1 hidden sequence fed step by step into layer 2.
            let run = |lw: &LayerWeights, xs: &[DVector<f64>]| {
                let mut h = DVector::zeros(4);
                let mut c = DVector::zeros(4);
                let mut out = Vec::new();
                for x in xs {
                    match cell {
                        CellKind::Gru => h = crate::rnn::gru_step(lw, &h, x).unwrap(),
                        CellKind::Lstm => (h, c) = crate::rnn::lstm_step(lw, &h, &c, x).unwrap(),
                        CellKind::Mlstm => (h, c) = crate::rnn::mlstm_step(lw, &h, &c, x).unwrap(),
                    }
                    out.push(h.clone());
                }
                out
            };
            let xs: Vec<_> = (0..4).map(|t| w.column(t).into_owned()).collect();
            let h1 = run(&net.params.layers[0].forward, &xs);
            let h2 = run(&net.params.layers[1].forward, &h1);
            let expect = &net.params.readout * &h2[3] + &net.params.readout_bias;
            assert!((pred - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = RecurrentNet::random(arch(CellKind::Mlstm, 2, true, 3), 8).unwrap();
        let w = window(3, 4);
        let (a, _) = forward_window(&net, &w).unwrap();
        let (b, _) = forward_window(&net, &w).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn lag_mismatch_is_shape_error() {
        let net = RecurrentNet::zeros(arch(CellKind::Gru, 1, false, 3)).unwrap();
        assert!(matches!(forward_window(&net, &window(2, 0)), Err(RnnError::Shape(_))));
    }

    #[test]
    fn loss_values() {
        let params = NetParams::zeros(&arch(CellKind::Lstm, 1, false, 1));
        let y = vec![DVector::from_column_slice(&[1.0, 2.0])];
        assert_eq!(loss_j(&y, &y, &params, 0.0).unwrap(), 0.0);
        let yhat = vec![DVector::from_column_slice(&[-2.0, -2.0])];
        assert_eq!(loss_j(&yhat, &y, &params, 0.0).unwrap(), 12.5);
        // zero weights carry no penalty
        assert_eq!(loss_j(&y, &y, &params, 0.01).unwrap(), 0.0);
        assert!(matches!(loss_j(&[], &[], &params, 0.0), Err(RnnError::Contract(_))));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = RecurrentNet::random(arch(CellKind::Gru, 2, true, 3), 2).unwrap();
        let (pred, tape) = forward_window(&net, &window(3, 1)).unwrap();
        let g = backward(&net, &[tape], &[pred], 0.0).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn penalty_gradient_is_two_lambda_w() {
        let net = RecurrentNet::random(arch(CellKind::Mlstm, 1, false, 2), 2).unwrap();
        let (pred, tape) = forward_window(&net, &window(2, 1)).unwrap();
        let lambda = 0.01;
        let g = backward(&net, &[tape], &[pred], lambda).unwrap();
        let w = net.params.flatten();
        let mask = net.params.penalty_mask();
        for ((gi, wi), m) in g.flatten().iter().zip(&w).zip(&mask) {
            let expect = if *m { 2.0 * lambda * wi } else { 0.0 };
            assert!((gi - expect).abs() < 1e-15);
        }
    }
}
