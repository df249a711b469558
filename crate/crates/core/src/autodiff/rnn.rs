//! LSTM cell and masked bidirectional LSTM, composed from tape primitives.

use super::tape::{Tape, TensorId};
use super::Scalar;
use crate::error::{Error, Result};

/// Tape handles of one direction's packed LSTM parameters: gate weights
/// `[input_dim + hidden, 4*hidden]` and bias `[4*hidden]`, gate order
/// (i, f, g, o).
#[derive(Debug, Clone, Copy)]
pub struct LstmParamIds {
    pub weights: TensorId,
    pub bias: TensorId,
}

/// One LSTM step: `c_t = σ(f)⊙c_prev + σ(i)⊙tanh(g)`,
/// `h_t = σ(o)⊙tanh(c_t)`.
pub fn lstm_cell<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
    params: LstmParamIds,
) -> Result<(TensorId, TensorId)> {
    let hidden = tape.value(h_prev).last_dim();
    let w = tape.value(params.weights);
    if w.rank() != 2 || w.shape()[1] != 4 * hidden {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "weights {:?} incompatible with hidden dim {hidden}",
                w.shape()
            ),
        ));
    }
    let z = tape.concat_last(x, h_prev)?;
    let gates = tape.matmul(z, params.weights)?;
    let gates = tape.add_bias(gates, params.bias)?;
    let i_gate = tape.narrow_last(gates, 0, hidden)?;
    let f_gate = tape.narrow_last(gates, hidden, hidden)?;
    let g_gate = tape.narrow_last(gates, 2 * hidden, hidden)?;
    let o_gate = tape.narrow_last(gates, 3 * hidden, hidden)?;
    let i_act = tape.sigmoid(i_gate)?;
    let f_act = tape.sigmoid(f_gate)?;
    let g_act = tape.tanh(g_gate)?;
    let o_act = tape.sigmoid(o_gate)?;
    let keep = tape.mul(f_act, c_prev)?;
    let write = tape.mul(i_act, g_act)?;
    let c_t = tape.add(keep, write)?;
    let c_tanh = tape.tanh(c_t)?;
    let h_t = tape.mul(o_act, c_tanh)?;
    Ok((h_t, c_t))
}

/// Outputs of [`bilstm`].
pub struct BiLstmOutput {
    /// `[batch, time, 2*hidden]`; forward and backward states concatenated,
    /// zero at padded positions.
    pub sequence: TensorId,
    /// Forward state at each row's last valid position, `[batch, hidden]`.
    pub final_forward: TensorId,
    /// Backward state at position 0, `[batch, hidden]`.
    pub final_backward: TensorId,
}

/// Runs one LSTM direction over the time axis. States update only at valid
/// positions (`mask` is 1) and carry through padding unchanged, so the state
/// after the sweep is the state at the direction's last valid position.
fn run_direction<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    mask: &[S],
    params: LstmParamIds,
    hidden: usize,
    reverse: bool,
) -> Result<(Vec<TensorId>, TensorId)> {
    let (batch, time) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
    let zeros = super::Tensor::zeros(vec![batch, hidden]);
    let mut h = tape.leaf(zeros.clone());
    let mut c = tape.leaf(zeros);
    let mut outputs: Vec<Option<TensorId>> = vec![None; time];

    let order: Vec<usize> = if reverse {
        (0..time).rev().collect()
    } else {
        (0..time).collect()
    };
    for t in order {
        let x_t = tape.select_time(x, t)?;
        let (h_cand, c_cand) = lstm_cell(tape, x_t, h, c, params)?;
        let m: Vec<S> = (0..batch).map(|b| mask[b * time + t]).collect();
        let inv: Vec<S> = m.iter().map(|&v| S::one() - v).collect();
        let h_masked = tape.scale_rows(h_cand, m.clone())?;
        let h_carry = tape.scale_rows(h, inv.clone())?;
        h = tape.add(h_masked, h_carry)?;
        let c_masked = tape.scale_rows(c_cand, m.clone())?;
        let c_carry = tape.scale_rows(c, inv)?;
        c = tape.add(c_masked, c_carry)?;
        outputs[t] = Some(tape.scale_rows(h, m)?);
    }
    Ok((outputs.into_iter().map(|o| o.unwrap()).collect(), h))
}

/// Bidirectional LSTM over `x: [batch, time, dim]` with a 0/1 validity
/// `mask` of length `batch*time` (valid positions form a prefix of each
/// row). Outputs at padded positions are zero and contribute nothing to any
/// downstream loss.
pub fn bilstm<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    mask: &[S],
    forward: LstmParamIds,
    backward: LstmParamIds,
) -> Result<BiLstmOutput> {
    let xv = tape.value(x);
    if xv.rank() != 3 {
        return Err(Error::shape(
            "bilstm",
            format!("expected [batch, time, dim], got {:?}", xv.shape()),
        ));
    }
    let (batch, time, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    if mask.len() != batch * time {
        return Err(Error::shape(
            "bilstm",
            format!("mask of {} for {:?}", mask.len(), xv.shape()),
        ));
    }
    let w = tape.value(forward.weights);
    if w.rank() != 2 || !w.shape()[1].is_multiple_of(4) || w.shape()[0] != dim + w.shape()[1] / 4 {
        return Err(Error::shape(
            "bilstm",
            format!("forward weights {:?} for input dim {dim}", w.shape()),
        ));
    }
    let hidden = w.shape()[1] / 4;

    let (fwd_out, final_forward) = run_direction(tape, x, mask, forward, hidden, false)?;
    let (bwd_out, final_backward) = run_direction(tape, x, mask, backward, hidden, true)?;

    let mut steps = Vec::with_capacity(time);
    for t in 0..time {
        steps.push(tape.concat_last(fwd_out[t], bwd_out[t])?);
    }
    let sequence = tape.stack_time(&steps)?;
    Ok(BiLstmOutput {
        sequence,
        final_forward,
        final_backward,
    })
}
