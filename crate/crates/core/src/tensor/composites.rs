//! Differentiable building blocks composed from tape primitives: the LSTM
//! cell gate equations and multi-head scaled dot-product attention. Their
//! backward passes come for free from the recorded primitive ops.

use rand::Rng;

use super::{Id, Mode, Scalar, Tape, Tensor, TensorError};

/// One LSTM cell step with the standard gate set. Inputs are `x` [B, In],
/// states `h`, `c` [B, H]; weights follow the fused layout `w_ih` [In, 4H],
/// `w_hh` [H, 4H], `bias` [4H] with gate order (input, forget, cell
/// modulation, output). Returns (h', c').
pub fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    x: Id,
    h: Id,
    c: Id,
    w_ih: Id,
    w_hh: Id,
    bias: Id,
) -> Result<(Id, Id), TensorError> {
    let (_, four_h) = tape.value(w_ih).dims2("lstm_cell")?;
    if four_h % 4 != 0 {
        return Err(TensorError::Dimension {
            op: "lstm_cell",
            details: format!("fused gate width {four_h} not divisible by 4"),
        });
    }
    let hidden = four_h / 4;
    let (_, ch) = tape.value(c).dims2("lstm_cell")?;
    if ch != hidden {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.value(c).shape().to_vec(),
            right: vec![tape.value(c).shape()[0], hidden],
        });
    }
    let from_x = tape.linear(x, w_ih, Some(bias))?;
    let from_h = tape.linear(h, w_hh, None)?;
    let gates = tape.add(from_x, from_h)?;
    let i_lin = tape.slice_cols(gates, 0, hidden)?;
    let f_lin = tape.slice_cols(gates, hidden, hidden)?;
    let g_lin = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let o_lin = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_lin);
    let f = tape.sigmoid(f_lin);
    let g = tape.tanh(g_lin);
    let o = tape.sigmoid(o_lin);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// Projection weights of one attention block, already inserted on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights {
    pub wq: Id,
    pub bq: Id,
    pub wk: Id,
    pub bk: Id,
    pub wv: Id,
    pub bv: Id,
    pub wo: Id,
    pub bo: Id,
}

/// Attention-weight dropout settings.
pub struct MhaDropout<'a, R: Rng> {
    pub p: f64,
    pub mode: Mode,
    pub rng: &'a mut R,
}

/// Multi-head scaled dot-product attention over [B, L, D] tensors. With
/// `causal` set, position i attends only to keys at positions <= i.
/// Dropout, when configured, is applied to the attention weights in training
/// mode.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    q: Id,
    k: Id,
    v: Id,
    weights: &MhaWeights,
    n_heads: usize,
    causal: bool,
    dropout: Option<MhaDropout<'_, R>>,
) -> Result<Id, TensorError> {
    let (b, lq, d) = tape.value(q).dims3("multi_head_attention")?;
    let (_, lk, dk) = tape.value(k).dims3("multi_head_attention")?;
    if d != dk || tape.value(v).dims3("multi_head_attention")?.2 != d {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            left: tape.value(q).shape().to_vec(),
            right: tape.value(k).shape().to_vec(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;

    let qp = tape.linear(q, weights.wq, Some(weights.bq))?;
    let kp = tape.linear(k, weights.wk, Some(weights.bk))?;
    let vp = tape.linear(v, weights.wv, Some(weights.bv))?;

    let split = |tape: &mut Tape<T>, x: Id, l: usize| -> Result<Id, TensorError> {
        let r = tape.reshape(x, &[b, l, n_heads, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * n_heads, l, dh])
    };
    let qh = split(tape, qp, lq)?;
    let kh = split(tape, kp, lk)?;
    let vh = split(tape, vp, lk)?;

    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scores = tape.bmm(qh, kt)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let masked = if causal {
        let mut mask = Tensor::zeros(&[b * n_heads, lq, lk]);
        for bh in 0..b * n_heads {
            for i in 0..lq {
                for j in 0..lk {
                    if j > i {
                        mask.data_mut()[(bh * lq + i) * lk + j] = T::from_f64(-1e30);
                    }
                }
            }
        }
        let mask = tape.constant(mask);
        tape.add(scaled, mask)?
    } else {
        scaled
    };
    let mut attn = tape.softmax(masked)?;
    if let Some(cfg) = dropout {
        attn = tape.dropout(attn, cfg.p, cfg.mode, cfg.rng)?;
    }
    let ctx = tape.bmm(attn, vh)?;
    let merged = tape.reshape(ctx, &[b, n_heads, lq, dh])?;
    let back = tape.permute(merged, &[0, 2, 1, 3])?;
    let joined = tape.reshape(back, &[b, lq, d])?;
    tape.linear(joined, weights.wo, Some(weights.bo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 0.8, &mut rng)
    }

    fn no_drop() -> Option<MhaDropout<'static, ChaCha8Rng>> {
        None
    }

    #[test]
    fn lstm_zero_weights_zero_cell_gives_zero_state() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[2, 5], 1), false);
        let h = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let c = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let w_ih = tape.leaf(Tensor::zeros(&[5, 12]), false);
        let w_hh = tape.leaf(Tensor::zeros(&[3, 12]), false);
        let bias = tape.leaf(Tensor::zeros(&[12]), false);
        let (h2, c2) = lstm_cell(&mut tape, x, h, c, w_ih, w_hh, bias).unwrap();
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_zero_weights_halves_cell_state() {
        // sigma(0) = 1/2, tanh(0) = 0: c' = c/2, h' = tanh(c/2)/2.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[2, 5], 2), false);
        let h = tape.leaf(randn(&[2, 3], 3), false);
        let c_val = randn(&[2, 3], 4);
        let c = tape.leaf(c_val.clone(), false);
        let w_ih = tape.leaf(Tensor::zeros(&[5, 12]), false);
        let w_hh = tape.leaf(Tensor::zeros(&[3, 12]), false);
        let bias = tape.leaf(Tensor::zeros(&[12]), false);
        let (_, c2) = lstm_cell(&mut tape, x, h, c, w_ih, w_hh, bias).unwrap();
        for (got, want) in tape.value(c2).data().iter().zip(c_val.data()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_matches_scalar_gate_oracle() {
        let (batch, input, hidden) = (3usize, 4usize, 2usize);
        let x = randn(&[batch, input], 10);
        let h = randn(&[batch, hidden], 11);
        let c = randn(&[batch, hidden], 12);
        let w_ih = randn(&[input, 4 * hidden], 13);
        let w_hh = randn(&[hidden, 4 * hidden], 14);
        let bias = randn(&[4 * hidden], 15);

        let mut tape = Tape::<f64>::new();
        let ids: Vec<Id> = [&x, &h, &c, &w_ih, &w_hh, &bias]
            .iter()
            .map(|t| tape.leaf((*t).clone(), false))
            .collect();
        let (h2, c2) = lstm_cell(&mut tape, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]).unwrap();

        // Independent scalar-loop oracle over the gate equations.
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for n in 0..batch {
            for j in 0..hidden {
                let mut pre = [0.0f64; 4];
                for (g, p) in pre.iter_mut().enumerate() {
                    let col = g * hidden + j;
                    *p = bias.data()[col];
                    for i in 0..input {
                        *p += x.data()[n * input + i] * w_ih.data()[i * 4 * hidden + col];
                    }
                    for i in 0..hidden {
                        *p += h.data()[n * hidden + i] * w_hh.data()[i * 4 * hidden + col];
                    }
                }
                let (ig, fg, gg, og) =
                    (sigmoid(pre[0]), sigmoid(pre[1]), pre[2].tanh(), sigmoid(pre[3]));
                let c_new = fg * c.data()[n * hidden + j] + ig * gg;
                let h_new = og * c_new.tanh();
                assert!((tape.value(c2).data()[n * hidden + j] - c_new).abs() < 1e-6);
                assert!((tape.value(h2).data()[n * hidden + j] - h_new).abs() < 1e-6);
            }
        }
    }

    fn mha_weights(tape: &mut Tape<f64>, d: usize, seed: u64) -> MhaWeights {
        let mut s = seed;
        let mut mk = |shape: &[usize]| {
            s += 1;
            tape.leaf(randn(shape, s), false)
        };
        MhaWeights {
            wq: mk(&[d, d]),
            bq: mk(&[d]),
            wk: mk(&[d, d]),
            bk: mk(&[d]),
            wv: mk(&[d, d]),
            bv: mk(&[d]),
            wo: mk(&[d, d]),
            bo: mk(&[d]),
        }
    }

    #[test]
    fn attention_length_one_reduces_to_projections() {
        let d = 8;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[1, 1, d], 30), false);
        let w = mha_weights(&mut tape, d, 40);
        let out = multi_head_attention(&mut tape, x, x, x, &w, 4, false, no_drop()).unwrap();
        // Softmax over a single key is 1, so out = Wo(Wv x + bv) + bo.
        let vp = tape.linear(x, w.wv, Some(w.bv)).unwrap();
        let expect = tape.linear(vp, w.wo, Some(w.bo)).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_per_head_loop_oracle() {
        let (b, l, d, heads) = (1usize, 4usize, 6usize, 2usize);
        let dh = d / heads;
        let x = randn(&[b, l, d], 50);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), false);
        let w = mha_weights(&mut tape, d, 60);
        let out = multi_head_attention(&mut tape, xid, xid, xid, &w, heads, false, no_drop())
            .unwrap();

        // Independent loop oracle.
        let get = |id: Id, tape: &Tape<f64>| tape.value(id).data().to_vec();
        let (wq, bq) = (get(w.wq, &tape), get(w.bq, &tape));
        let (wk, bk) = (get(w.wk, &tape), get(w.bk, &tape));
        let (wv, bv) = (get(w.wv, &tape), get(w.bv, &tape));
        let (wo, bo) = (get(w.wo, &tape), get(w.bo, &tape));
        let proj = |wm: &[f64], bm: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; l * d];
            for i in 0..l {
                for o in 0..d {
                    let mut acc = bm[o];
                    for k in 0..d {
                        acc += x.data()[i * d + k] * wm[k * d + o];
                    }
                    out[i * d + o] = acc;
                }
            }
            out
        };
        let (qp, kp, vp) = (proj(&wq, &bq), proj(&wk, &bk), proj(&wv, &bv));
        let mut concat = vec![0.0; l * d];
        for h in 0..heads {
            for i in 0..l {
                // Scores against every key for this head.
                let mut scores = vec![0.0; l];
                for j in 0..l {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += qp[i * d + h * dh + c] * kp[j * d + h * dh + c];
                    }
                    scores[j] = acc / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += exps[j] / denom * vp[j * d + h * dh + c];
                    }
                    concat[i * d + h * dh + c] = acc;
                }
            }
        }
        for i in 0..l {
            for o in 0..d {
                let mut acc = bo[o];
                for k in 0..d {
                    acc += concat[i * d + k] * wo[k * d + o];
                }
                let got = tape.value(out).data()[i * d + o];
                assert!((got - acc).abs() < 1e-5, "mismatch at {i},{o}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[1, 2, 6], 70), false);
        let w = mha_weights(&mut tape, 6, 80);
        assert!(matches!(
            multi_head_attention(&mut tape, x, x, x, &w, 4, false, no_drop()),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn causal_mask_blocks_future_keys() {
        let d = 4;
        let mut tape = Tape::<f64>::new();
        let x = randn(&[1, 3, d], 90);
        let xid = tape.leaf(x.clone(), false);
        let w = mha_weights(&mut tape, d, 91);
        let out = multi_head_attention(&mut tape, xid, xid, xid, &w, 2, true, no_drop()).unwrap();
        let base = tape.value(out).data().to_vec();

        // Perturb the last token; earlier outputs must not move.
        let mut x2 = x.clone();
        for k in 0..d {
            x2.data_mut()[2 * d + k] += 10.0;
        }
        let mut tape2 = Tape::<f64>::new();
        let xid2 = tape2.leaf(x2, false);
        let w2 = MhaWeights {
            wq: tape2.leaf(tape.value(w.wq).clone(), false),
            bq: tape2.leaf(tape.value(w.bq).clone(), false),
            wk: tape2.leaf(tape.value(w.wk).clone(), false),
            bk: tape2.leaf(tape.value(w.bk).clone(), false),
            wv: tape2.leaf(tape.value(w.wv).clone(), false),
            bv: tape2.leaf(tape.value(w.bv).clone(), false),
            wo: tape2.leaf(tape.value(w.wo).clone(), false),
            bo: tape2.leaf(tape.value(w.bo).clone(), false),
        };
        let out2 =
            multi_head_attention(&mut tape2, xid2, xid2, xid2, &w2, 2, true, no_drop()).unwrap();
        let moved = tape2.value(out2).data();
        for k in 0..2 * d {
            assert!((base[k] - moved[k]).abs() < 1e-12, "leaked at {k}");
        }
        // The perturbed position itself does move.
        assert!((base[2 * d] - moved[2 * d]).abs() > 1e-6);
    }
}
