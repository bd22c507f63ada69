//! Layers built from graph ops.

use crate::{Graph, Result, TensorError, Var};

/// `y = x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

/// Projection weights of single-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `[d_in, d_k]`
    pub query: Var,
    /// `[d_in, d_k]`
    pub key: Var,
    /// `[d_in, d_v]`
    pub value: Var,
    /// `[d_v, d_out]`
    pub output: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[rows, d_out]`
    pub output: Var,
    /// `[rows, rows]`, each row a distribution over keys.
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V W_o` with `Q = X W_q`, `K = X W_k`, `V = X W_v`.
pub fn self_attention(g: &mut Graph, x: Var, p: &AttentionParams) -> Result<AttentionOutput> {
    let q = g.matmul(x, p.query)?;
    let k = g.matmul(x, p.key)?;
    let v = g.matmul(x, p.value)?;
    let d_k = g.shape(k)[1];
    if g.shape(q)[1] != d_k {
        return Err(TensorError::ShapeMismatch {
            op: "self_attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    let mixed = g.matmul(weights, v)?;
    let output = g.matmul(mixed, p.output)?;
    Ok(AttentionOutput { output, weights })
}

/// Fused LSTM parameters. Gate blocks along the output axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[input + hidden, 4 * hidden]`
    pub weight: Var,
    /// `[4 * hidden]`
    pub bias: Var,
}

/// One LSTM step on row vectors `x: [1, input]`, `h, c: [1, hidden]`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    if g.shape(c) != g.shape(h) || g.shape(p.weight)[1] != 4 * hidden {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(p.weight).to_vec(),
        });
    }
    let xh = g.concat(&[x, h], 1)?;
    let z = g.matmul(xh, p.weight)?;
    let z = g.add_row(z, p.bias)?;
    let zi = g.slice(z, 1, 0, hidden)?;
    let zf = g.slice(z, 1, hidden, hidden)?;
    let zg = g.slice(z, 1, 2 * hidden, hidden)?;
    let zo = g.slice(z, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attn_params(g: &mut Graph, rng: &mut ChaCha8Rng, d_in: usize, d: usize) -> AttentionParams {
        AttentionParams {
            query: g.param(rand_tensor(rng, &[d_in, d])),
            key: g.param(rand_tensor(rng, &[d_in, d])),
            value: g.param(rand_tensor(rng, &[d_in, d])),
            output: g.param(rand_tensor(rng, &[d, d])),
        }
    }

    #[test]
    fn single_row_attention_is_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = attn_params(&mut g, &mut rng, 5, 4);
        let x = g.constant(rand_tensor(&mut rng, &[1, 5]));
        let out = self_attention(&mut g, x, &p).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
        // With A = [1] the output is x W_v W_o.
        let v = g.matmul(x, p.value).unwrap();
        let expected = g.matmul(v, p.output).unwrap();
        assert_eq!(g.value(out.output), g.value(expected));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = attn_params(&mut g, &mut rng, 5, 3);
        let x = g.constant(rand_tensor(&mut rng, &[4, 5]));
        let out = self_attention(&mut g, x, &p).unwrap();
        for row in g.value(out.weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let p = attn_params(&mut g, &mut rng, 5, 4);
        let x0 = rand_tensor(&mut rng, &[6, 5]);
        let perm = [3, 0, 5, 1, 4, 2];
        let x = g.constant(x0.clone());
        let px = g.constant(x0.permute_rows(&perm));
        let a = self_attention(&mut g, x, &p).unwrap();
        let b = self_attention(&mut g, px, &p).unwrap();
        let pa = g.value(a.output).permute_rows(&perm);
        assert!(pa.max_abs_diff(g.value(b.output)) < 1e-10);
    }

    #[test]
    fn lstm_zero_weights_halves_cell() {
        let (input, hidden) = (3, 4);
        let mut g = Graph::new();
        let p = LstmParams {
            weight: g.param(Tensor::zeros(&[input + hidden, 4 * hidden])),
            bias: g.param(Tensor::zeros(&[4 * hidden])),
        };
        let c0 = vec![1.0, -2.0, 0.5, 3.0];
        let x = g.constant(Tensor::row(vec![0.3, -0.1, 0.7]));
        let h = g.constant(Tensor::row(vec![0.2; hidden]));
        let c = g.constant(Tensor::row(c0.clone()));
        let (h1, c1) = lstm_cell(&mut g, x, h, c, &p).unwrap();
        for (i, &cv) in c0.iter().enumerate() {
            assert_eq!(g.value(c1).data()[i], 0.5 * cv);
            assert_eq!(g.value(h1).data()[i], 0.5 * (0.5 * cv).tanh());
        }
    }

    #[test]
    fn lstm_zero_input_depends_only_on_bias() {
        let (input, hidden) = (3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let bias = rand_tensor(&mut rng, &[4 * hidden]);
        let p = LstmParams {
            weight: g.param(rand_tensor(&mut rng, &[input + hidden, 4 * hidden])),
            bias: g.param(bias.clone()),
        };
        let x = g.constant(Tensor::row(vec![0.0; input]));
        let h = g.constant(Tensor::row(vec![0.0; hidden]));
        let c = g.constant(Tensor::row(vec![0.0; hidden]));
        let (h1, c1) = lstm_cell(&mut g, x, h, c, &p).unwrap();
        let b = bias.data();
        for j in 0..hidden {
            let i = sigmoid(b[j]);
            let cand = b[2 * hidden + j].tanh();
            let o = sigmoid(b[3 * hidden + j]);
            let c_expected = i * cand;
            assert!((g.value(c1).data()[j] - c_expected).abs() < 1e-15);
            assert!((g.value(h1).data()[j] - o * c_expected.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_hidden_mismatch_is_error() {
        let mut g = Graph::new();
        let p = LstmParams {
            weight: g.param(Tensor::zeros(&[5, 8])),
            bias: g.param(Tensor::zeros(&[8])),
        };
        let x = g.constant(Tensor::row(vec![0.0; 3]));
        let h = g.constant(Tensor::row(vec![0.0; 2]));
        let c = g.constant(Tensor::row(vec![0.0; 3]));
        assert!(lstm_cell(&mut g, x, h, c, &p).is_err());
    }
}
