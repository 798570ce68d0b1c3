//! Building blocks of the forward pass, each recorded on a [`Tape`].

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

/// Attention pooling over the rows of `x` (`n x d`).
///
/// `u_t = tanh(W x_t + b)`, `alpha = softmax_t(u_t . u)`, output `sum_t alpha_t x_t`.
/// Returns the pooled `1 x d` row and the `n x 1` weights.
pub fn attention_pool(tape: &mut Tape, x: Var, w: Var, b: Var, u: Var) -> Result<(Var, Var)> {
    let proj = tape.matmul(x, w)?;
    let proj = tape.add_row(proj, b)?;
    let hidden = tape.tanh(proj);
    let scores = tape.matmul(hidden, u)?;
    let alpha = tape.softmax(scores, 0)?;
    let alpha_t = tape.transpose(alpha)?;
    let pooled = tape.matmul(alpha_t, x)?;
    Ok((pooled, alpha))
}

/// Token-level attention over one sentence `z` (`n x d_e`).
pub fn token_attention(tape: &mut Tape, z: Var, w: Var, b: Var, u: Var) -> Result<(Var, Var)> {
    let (_, d) = tape.value(z).rows_cols();
    if tape.value(w).rows() != d {
        return Err(Error::dim(
            "token_attention",
            format!("tokens {:?} vs W {:?}", tape.shape(z), tape.shape(w)),
        ));
    }
    attention_pool(tape, z, w, b, u)
}

/// Pooling of the sentence states `h` (`m x 2*d_gru`) for one article.
pub fn article_attention(tape: &mut Tape, h: Var, w: Var, b: Var, u: Var) -> Result<(Var, Var)> {
    let (_, d) = tape.value(h).rows_cols();
    if tape.value(w).rows() != d {
        return Err(Error::dim(
            "article_attention",
            format!("states {:?} vs W {:?}", tape.shape(h), tape.shape(w)),
        ));
    }
    attention_pool(tape, h, w, b, u)
}

/// GRU parameters for one direction, gates packed `[update | reset | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

fn gru_direction(tape: &mut Tape, f: Var, p: GruVars, order: &[usize]) -> Result<Vec<Var>> {
    let hidden = tape.value(p.w_h).rows();
    let xw = tape.matmul(f, p.w_x)?;
    let xw = tape.add_row(xw, p.b)?;
    let mut h = tape.constant(crate::diff::Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; order.len()];
    let gate = |g: usize| (g * hidden, (g + 1) * hidden);
    for &t in order {
        let hw = tape.matmul(h, p.w_h)?;
        let xz = tape.slice(xw, (t, t + 1), gate(0))?;
        let hz = tape.slice(hw, (0, 1), gate(0))?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let xr = tape.slice(xw, (t, t + 1), gate(1))?;
        let hr = tape.slice(hw, (0, 1), gate(1))?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let xn = tape.slice(xw, (t, t + 1), gate(2))?;
        let hn = tape.slice(hw, (0, 1), gate(2))?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n);
        // h' = (1 - z) h + z n = h + z (n - h)
        let delta = tape.sub(n, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional GRU over sentence vectors `f` (`m x d_e`); row `t` of the
/// result is `[forward_t, backward_t]`.
pub fn sentence_encoder(tape: &mut Tape, f: Var, forward: GruVars, backward: GruVars) -> Result<Var> {
    let (m, d) = tape.value(f).rows_cols();
    for p in [forward, backward] {
        let hidden = tape.value(p.w_h).rows();
        if tape.value(p.w_x).rows() != d || tape.value(p.w_x).cols() != 3 * hidden {
            return Err(Error::dim(
                "sentence_encoder",
                format!("inputs {:?} vs W_x {:?}", tape.shape(f), tape.shape(p.w_x)),
            ));
        }
    }
    let fwd_order: Vec<usize> = (0..m).collect();
    let bwd_order: Vec<usize> = (0..m).rev().collect();
    let fwd = gru_direction(tape, f, forward, &fwd_order)?;
    let bwd = gru_direction(tape, f, backward, &bwd_order)?;
    let fwd = tape.concat(&fwd, 0)?;
    let bwd = tape.concat(&bwd, 0)?;
    tape.concat(&[fwd, bwd], 1)
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Output of [`interaction`]: the updated rows and each head's `k x k` weights.
pub struct InteractionOut {
    pub rows: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention across the `k` article rows of
/// `c` with a residual connection: `c + concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h) W_o`.
pub fn interaction(tape: &mut Tape, c: Var, p: SelfAttentionVars, heads: usize) -> Result<InteractionOut> {
    let inner = tape.value(p.q).cols();
    if heads == 0 || inner % heads != 0 {
        return Err(Error::Config(format!(
            "self-attention width {inner} not divisible by {heads} heads"
        )));
    }
    if tape.value(p.q).rows() != tape.value(c).cols() {
        return Err(Error::dim(
            "interaction",
            format!("rows {:?} vs W_q {:?}", tape.shape(c), tape.shape(p.q)),
        ));
    }
    let rows = tape.value(c).rows();
    let dh = inner / heads;
    let q = tape.matmul(c, p.q)?;
    let k = tape.matmul(c, p.k)?;
    let v = tape.matmul(c, p.v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, (0, rows), cols)?;
        let kh = tape.slice(k, (0, rows), cols)?;
        let vh = tape.slice(v, (0, rows), cols)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let projected = tape.matmul(joined, p.o)?;
    let rows = tape.add(c, projected)?;
    Ok(InteractionOut { rows, weights })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Per-article two-layer heads: `o_i = tanh(row_i W1_i + b1_i) W2_i + b2_i`, as a `1 x k` logit row.
pub fn classify(tape: &mut Tape, rows: Var, heads: &[HeadVars]) -> Result<Var> {
    let (k, w) = tape.value(rows).rows_cols();
    if heads.len() != k {
        return Err(Error::dim("classify", format!("{k} rows for {} heads", heads.len())));
    }
    let mut logits = Vec::with_capacity(k);
    for (i, h) in heads.iter().enumerate() {
        if tape.value(h.w1).rows() != w {
            return Err(Error::dim(
                "classify",
                format!("row width {w} vs head {i} W1 {:?}", tape.shape(h.w1)),
            ));
        }
        let row = tape.row(rows, i)?;
        let hidden = tape.matmul(row, h.w1)?;
        let hidden = tape.add_row(hidden, h.b1)?;
        let hidden = tape.tanh(hidden);
        let out = tape.matmul(hidden, h.w2)?;
        logits.push(tape.add_row(out, h.b2)?);
    }
    tape.concat(&logits, 1)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attn_params(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, a: usize) -> (Var, Var, Var) {
        (
            tape.constant(rand_tensor(rng, &[d, a])),
            tape.constant(rand_tensor(rng, &[a])),
            tape.constant(rand_tensor(rng, &[a, 1])),
        )
    }

    #[test]
    fn single_token_pools_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let z = tape.constant(rand_tensor(&mut rng, &[1, 5]));
        let (w, b, u) = attn_params(&mut tape, &mut rng, 5, 3);
        let (f, alpha) = token_attention(&mut tape, z, w, b, u).unwrap();
        assert_eq!(tape.value(alpha).values(), &[1.0]);
        assert!(tape.value(f).max_abs_diff(tape.value(z)) < 1e-15);
    }

    #[test]
    fn identical_tokens_pool_to_that_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = rand_tensor(&mut rng, &[1, 4]);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| row.values().to_vec()).collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (w, b, u) = attn_params(&mut tape, &mut rng, 4, 6);
        let (f, _) = token_attention(&mut tape, z, w, b, u).unwrap();
        assert!(tape.value(f).reshaped(vec![4]).unwrap().max_abs_diff(&row.reshaped(vec![4]).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_context_vector_gives_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zt = rand_tensor(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let z = tape.constant(zt.clone());
        let (w, b, _) = attn_params(&mut tape, &mut rng, 3, 5);
        let u = tape.constant(Tensor::zeros(&[5, 1]));
        let (f, alpha) = token_attention(&mut tape, z, w, b, u).unwrap();
        assert!(tape.value(alpha).values().iter().all(|a| (a - 0.25).abs() < 1e-15));
        for j in 0..3 {
            let mean = (0..4).map(|i| zt.get(i, j)).sum::<f64>() / 4.0;
            assert!((tape.value(f).values()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn token_attention_width_mismatch() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let u = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(token_attention(&mut tape, z, w, b, u), Err(Error::Dimension { .. })));
    }

    fn gru_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, h: usize) -> GruVars {
        GruVars {
            w_x: tape.constant(rand_tensor(rng, &[d, 3 * h])),
            w_h: tape.constant(rand_tensor(rng, &[h, 3 * h])),
            b: tape.constant(rand_tensor(rng, &[3 * h])),
        }
    }

    #[test]
    fn gru_zero_weights_stay_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let zero = GruVars {
            w_x: tape.constant(Tensor::zeros(&[4, 6])),
            w_h: tape.constant(Tensor::zeros(&[2, 6])),
            b: tape.constant(Tensor::zeros(&[6])),
        };
        let h = sentence_encoder(&mut tape, f, zero, zero).unwrap();
        assert_eq!(tape.value(h).shape(), &[3, 4]);
        assert!(tape.value(h).values().iter().all(|&v| v == 0.0));
    }

    fn gru_step_by_hand(x: &[f64], p: (&Tensor, &Tensor, &Tensor)) -> Vec<f64> {
        // Zero initial state: h W_h = 0, so only x W_x + b contributes.
        let (w_x, _, b) = p;
        let h = w_x.cols() / 3;
        let pre: Vec<f64> = (0..3 * h)
            .map(|j| (0..x.len()).map(|i| x[i] * w_x.get(i, j)).sum::<f64>() + b.values()[j])
            .collect();
        (0..h)
            .map(|j| {
                let z = 1.0 / (1.0 + (-pre[j]).exp());
                let n = pre[2 * h + j].tanh();
                z * n
            })
            .collect()
    }

    #[test]
    fn single_sentence_is_one_step_each_way() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 3]);
        let tensors: Vec<Tensor> = [[3, 6].as_slice(), &[2, 6], &[6], &[3, 6], &[2, 6], &[6]]
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect();
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let v: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let fwd = GruVars { w_x: v[0], w_h: v[1], b: v[2] };
        let bwd = GruVars { w_x: v[3], w_h: v[4], b: v[5] };
        let h = sentence_encoder(&mut tape, f, fwd, bwd).unwrap();
        let mut expected = gru_step_by_hand(x.values(), (&tensors[0], &tensors[1], &tensors[2]));
        expected.extend(gru_step_by_hand(x.values(), (&tensors[3], &tensors[4], &tensors[5])));
        for (a, b) in tape.value(h).values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reversing_input_and_swapping_directions_reverses_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let rev_rows: Vec<Vec<f64>> = (0..4).rev().map(|i| x.row(i).to_vec()).collect();
        let x_rev = Tensor::from_rows(&rev_rows).unwrap();
        let mut tape = Tape::new();
        let a = gru_vars(&mut tape, &mut rng, 3, 2);
        let b = gru_vars(&mut tape, &mut rng, 3, 2);
        let f = tape.constant(x);
        let fr = tape.constant(x_rev);
        let h = sentence_encoder(&mut tape, f, a, b).unwrap();
        let hr = sentence_encoder(&mut tape, fr, b, a).unwrap();
        let (h, hr) = (tape.value(h).clone(), tape.value(hr).clone());
        for t in 0..4 {
            let row = h.row(t);
            let mirrored = hr.row(3 - t);
            // forward half of one equals backward half of the other
            for j in 0..2 {
                assert!((row[j] - mirrored[2 + j]).abs() < 1e-14);
                assert!((row[2 + j] - mirrored[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn article_attention_identical_states_and_distinct_articles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = rand_tensor(&mut rng, &[1, 4]);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| state.values().to_vec()).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (w, b, u) = attn_params(&mut tape, &mut rng, 4, 3);
        let (c, _) = article_attention(&mut tape, h, w, b, u).unwrap();
        assert!(tape.value(c).max_abs_diff(&state) < 1e-12);

        let h2 = tape.constant(rand_tensor(&mut rng, &[5, 4]));
        let p1 = attn_params(&mut tape, &mut rng, 4, 3);
        let p2 = attn_params(&mut tape, &mut rng, 4, 3);
        let (c1, _) = article_attention(&mut tape, h2, p1.0, p1.1, p1.2).unwrap();
        let (c2, _) = article_attention(&mut tape, h2, p2.0, p2.1, p2.2).unwrap();
        assert!(tape.value(c1).max_abs_diff(tape.value(c2)) > 1e-6);
    }

    fn sa_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, w: usize, inner: usize) -> SelfAttentionVars {
        SelfAttentionVars {
            q: tape.constant(rand_tensor(rng, &[w, inner])),
            k: tape.constant(rand_tensor(rng, &[w, inner])),
            v: tape.constant(rand_tensor(rng, &[w, inner])),
            o: tape.constant(rand_tensor(rng, &[inner, w])),
        }
    }

    #[test]
    fn zero_value_projection_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let c = tape.constant(rand_tensor(&mut rng, &[3, 6]));
        let mut p = sa_vars(&mut tape, &mut rng, 6, 4);
        p.v = tape.constant(Tensor::zeros(&[6, 4]));
        let out = interaction(&mut tape, c, p, 2).unwrap();
        assert_eq!(tape.value(out.rows), tape.value(c));
    }

    #[test]
    fn attention_rows_sum_to_one_and_single_row_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let c = tape.constant(rand_tensor(&mut rng, &[4, 6]));
        let p = sa_vars(&mut tape, &mut rng, 6, 6);
        let out = interaction(&mut tape, c, p, 3).unwrap();
        for a in &out.weights {
            let t = tape.value(*a);
            for r in 0..4 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(t.row(r).iter().all(|&x| x >= 0.0));
            }
        }
        let single = tape.constant(rand_tensor(&mut rng, &[1, 6]));
        let out = interaction(&mut tape, single, p, 3).unwrap();
        for a in &out.weights {
            assert_eq!(tape.value(*a).values(), &[1.0]);
        }
        assert!(matches!(interaction(&mut tape, c, p, 4), Err(Error::Config(_))));
    }

    fn head_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, w: usize, hdim: usize) -> HeadVars {
        HeadVars {
            w1: tape.constant(rand_tensor(rng, &[w, hdim])),
            b1: tape.constant(rand_tensor(rng, &[hdim])),
            w2: tape.constant(rand_tensor(rng, &[hdim, 1])),
            b2: tape.constant(rand_tensor(rng, &[1])),
        }
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let rows = tape.constant(rand_tensor(&mut rng, &[3, 5]));
        let zero = HeadVars {
            w1: tape.constant(Tensor::zeros(&[5, 2])),
            b1: tape.constant(Tensor::zeros(&[2])),
            w2: tape.constant(Tensor::zeros(&[2, 1])),
            b2: tape.constant(Tensor::zeros(&[1])),
        };
        let o = classify(&mut tape, rows, &[zero; 3]).unwrap();
        assert_eq!(tape.value(o).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn heads_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let rows = tape.constant(rand_tensor(&mut rng, &[3, 5]));
        let mut heads: Vec<HeadVars> = (0..3).map(|_| head_vars(&mut tape, &mut rng, 5, 4)).collect();
        let before = classify(&mut tape, rows, &heads).unwrap();
        heads[1] = head_vars(&mut tape, &mut rng, 5, 4);
        let after = classify(&mut tape, rows, &heads).unwrap();
        let (b, a) = (tape.value(before).values().to_vec(), tape.value(after).values().to_vec());
        assert_eq!(b[0], a[0]);
        assert_eq!(b[2], a[2]);
        assert_ne!(b[1], a[1]);
    }
}
