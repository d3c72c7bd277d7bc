use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weights of one LSTM direction. Gate blocks along the `4u` axis are
/// ordered input, forget, output, cell candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d × 4u`
    pub input_weights: Tensor,
    /// `u × 4u`
    pub recurrent_weights: Tensor,
    /// `4u`
    pub biases: Tensor,
    pub hidden_size: usize,
}

pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized buffer")
}

impl LstmParams {
    /// Glorot-uniform weights, zero biases except the forget gate at 1.0.
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden_size: usize) -> Self {
        let u = hidden_size;
        let mut biases = Tensor::zeros(&[4 * u]);
        biases.data_mut()[u..2 * u].fill(1.0);
        LstmParams {
            input_weights: glorot(rng, input_dim, 4 * u),
            recurrent_weights: glorot(rng, u, 4 * u),
            biases,
            hidden_size,
        }
    }

    pub fn zeros(input_dim: usize, hidden_size: usize) -> Self {
        let u = hidden_size;
        LstmParams {
            input_weights: Tensor::zeros(&[input_dim, 4 * u]),
            recurrent_weights: Tensor::zeros(&[u, 4 * u]),
            biases: Tensor::zeros(&[4 * u]),
            hidden_size,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.hidden_size;
        let d = self.input_dim();
        if self.input_weights.shape() != [d, 4 * u]
            || self.recurrent_weights.shape() != [u, 4 * u]
            || self.biases.shape() != [4 * u]
        {
            return Err(Error::Dimension(format!(
                "inconsistent LSTM shapes {:?} / {:?} / {:?} for hidden size {u}",
                self.input_weights.shape(),
                self.recurrent_weights.shape(),
                self.biases.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&Tensor; 3] {
        [&self.input_weights, &self.recurrent_weights, &self.biases]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [
            &mut self.input_weights,
            &mut self.recurrent_weights,
            &mut self.biases,
        ]
    }

    /// One cell update on plain values.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = LstmVars::insert(&mut g, self, false);
        let (x, h, c) = (
            g.constant(x.clone()),
            g.constant(h.clone()),
            g.constant(c.clone()),
        );
        let (h, c) = lstm_step(&mut g, &vars, x, h, c)?;
        Ok((g.value(h).clone(), g.value(c).clone()))
    }
}

/// LSTM weights recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input_weights: Var,
    pub recurrent_weights: Var,
    pub biases: Var,
    pub hidden_size: usize,
}

impl LstmVars {
    pub fn insert(g: &mut Graph, p: &LstmParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LstmVars {
            input_weights: leaf(&p.input_weights),
            recurrent_weights: leaf(&p.recurrent_weights),
            biases: leaf(&p.biases),
            hidden_size: p.hidden_size,
        }
    }

    pub fn vars(&self) -> [Var; 3] {
        [self.input_weights, self.recurrent_weights, self.biases]
    }
}

/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')` with sigmoid gates and a tanh
/// candidate.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let u = p.hidden_size;
    let (b, _) = g.value(x).dims2()?;
    let hs = g.value(h).dims2()?;
    if hs != (b, u) || g.value(c).dims2()? != (b, u) {
        return Err(Error::Dimension(format!(
            "LSTM state must be {:?}, got h {:?} and c {:?}",
            [b, u],
            g.value(h).shape(),
            g.value(c).shape()
        )));
    }
    let zx = g.matmul(x, p.input_weights)?;
    let zh = g.matmul(h, p.recurrent_weights)?;
    let z = g.add(zx, zh)?;
    let z = g.add_row(z, p.biases)?;
    let i = g.slice_cols(z, 0, u)?;
    let i = g.sigmoid(i)?;
    let f = g.slice_cols(z, u, u)?;
    let f = g.sigmoid(f)?;
    let o = g.slice_cols(z, 2 * u, u)?;
    let o = g.sigmoid(o)?;
    let cand = g.slice_cols(z, 3 * u, u)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs `fwd` over steps `0..t` and `bwd` over `t..0`, concatenating the two
/// hidden states per step. State is zeroed wherever the mask is zero, so
/// padded steps yield zero outputs and do not leak into the reverse pass.
pub fn bidirectional(
    g: &mut Graph,
    fwd: &LstmVars,
    bwd: &LstmVars,
    xs: &[Var],
    masks: &[Vec<f32>],
) -> Result<Vec<Var>> {
    let t = xs.len();
    if masks.len() != t {
        return Err(Error::Dimension(format!(
            "{} masks for {t} steps",
            masks.len()
        )));
    }
    let Some(&first) = xs.first() else {
        return Ok(Vec::new());
    };
    let b = g.value(first).dims2()?.0;
    let run = |g: &mut Graph,
               p: &LstmVars,
               order: &mut dyn Iterator<Item = usize>|
     -> Result<Vec<Option<Var>>> {
        let mut out = vec![None; t];
        let mut h = g.constant(Tensor::zeros(&[b, p.hidden_size]));
        let mut c = g.constant(Tensor::zeros(&[b, p.hidden_size]));
        for s in order {
            let (hn, cn) = lstm_step(g, p, xs[s], h, c)?;
            h = g.row_scale(hn, &masks[s])?;
            c = g.row_scale(cn, &masks[s])?;
            out[s] = Some(h);
        }
        Ok(out)
    };
    let forward = run(g, fwd, &mut (0..t))?;
    let backward = run(g, bwd, &mut (0..t).rev())?;
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, r)| g.concat_cols(&[f.expect("visited"), r.expect("visited")]))
        .collect()
}

/// Bidirectional contextual LSTM over one modality of a padded batch:
/// `features` is `n × t × d`, the result `n × t × 2u`.
pub fn bidirectional_contextual_lstm(
    fwd: &LstmParams,
    bwd: &LstmParams,
    features: &Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    let (n, t, d) = features.dims3()?;
    if mask.len() != n * t {
        return Err(Error::Dimension(format!(
            "mask of {} entries for {n}x{t} conversations",
            mask.len()
        )));
    }
    if fwd.input_dim() != d || bwd.input_dim() != d {
        return Err(Error::Dimension(format!(
            "LSTM input width {} / {} for {d}-d features",
            fwd.input_dim(),
            bwd.input_dim()
        )));
    }
    check_no_empty_conversation(mask, n, t)?;
    let mut g = Graph::new();
    let fv = LstmVars::insert(&mut g, fwd, false);
    let bv = LstmVars::insert(&mut g, bwd, false);
    let mut xs = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for s in 0..t {
        let mut rows = Vec::with_capacity(n * d);
        for v in 0..n {
            let slot = v * t + s;
            rows.extend_from_slice(&features.data()[slot * d..(slot + 1) * d]);
        }
        xs.push(g.constant(Tensor::new(vec![n, d], rows)?));
        masks.push(
            (0..n)
                .map(|v| if mask[v * t + s] { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    let outs = bidirectional(&mut g, &fv, &bv, &xs, &masks)?;
    Ok(stack_steps(&g, &outs, n))
}

pub(crate) fn check_no_empty_conversation(mask: &[bool], n: usize, t: usize) -> Result<()> {
    for v in 0..n {
        if !mask[v * t..(v + 1) * t].iter().any(|&m| m) {
            return Err(Error::Validation(format!(
                "conversation {v} has no valid utterances"
            )));
        }
    }
    Ok(())
}

/// Interleaves per-step `b × f` values into a `b × t × f` tensor.
pub(crate) fn stack_steps(g: &Graph, steps: &[Var], b: usize) -> Tensor {
    let t = steps.len();
    let f = steps.first().map_or(0, |&s| g.value(s).shape()[1]);
    let mut data = vec![0.0f32; b * t * f];
    for (s, &var) in steps.iter().enumerate() {
        let vals = g.value(var).data();
        for v in 0..b {
            data[(v * t + s) * f..(v * t + s + 1) * f].copy_from_slice(&vals[v * f..(v + 1) * f]);
        }
    }
    Tensor::new(vec![b, t, f], data).expect("sized buffer")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Fully connected layer `y = act(x W + b)` with `W` shaped `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Dense {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn apply(&self, g: &mut Graph, w: Var, b: Var, x: Var) -> Result<Var> {
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        match self.activation {
            Activation::Tanh => g.tanh(z),
            Activation::Linear => Ok(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_state() {
        let p = LstmParams::zeros(3, 4);
        let x = Tensor::full(&[2, 3], 0.7);
        let (h, c) = p
            .step(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4]))
            .unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LstmParams::init(&mut rng, 3, 4);
        p.biases.data_mut()[4..8].fill(40.0);
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.4]).unwrap();
        let h0 = Tensor::new(vec![1, 4], vec![0.1, 0.2, -0.3, 0.0]).unwrap();
        let c0 = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.3]).unwrap();
        let (_, c) = p.step(&x, &h0, &c0).unwrap();

        // c ≈ c_prev + i ⊙ g computed by hand
        let z = x.matmul(&p.input_weights).unwrap();
        let zh = h0.matmul(&p.recurrent_weights).unwrap();
        for j in 0..4 {
            let pre = |k: usize| z.data()[k] + zh.data()[k] + p.biases.data()[k];
            let i = 1.0 / (1.0 + (-pre(j)).exp());
            let g = pre(12 + j).tanh();
            let expected = c0.data()[j] + i * g;
            assert!((c.data()[j] - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn step_shape_mismatch() {
        let p = LstmParams::zeros(3, 4);
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            p.step(&x, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[2, 4])),
            Err(Error::Dimension(_))
        ));
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> Tensor {
        let data = (0..n * t * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(vec![n, t, d], data).unwrap()
    }

    #[test]
    fn single_utterance_is_concat_of_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fwd = LstmParams::init(&mut rng, 3, 2);
        let bwd = LstmParams::init(&mut rng, 3, 2);
        let x = random_features(&mut rng, 1, 1, 3);
        let out = bidirectional_contextual_lstm(&fwd, &bwd, &x, &[true]).unwrap();
        let x2 = x.clone().reshape(vec![1, 3]).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let (hf, _) = fwd.step(&x2, &zero, &zero).unwrap();
        let (hb, _) = bwd.step(&x2, &zero, &zero).unwrap();
        let expected: Vec<f32> = hf.data().iter().chain(hb.data()).copied().collect();
        assert_eq!(out.data(), &expected[..]);
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fwd = LstmParams::init(&mut rng, 3, 2);
        let bwd = LstmParams::init(&mut rng, 3, 2);
        let x = random_features(&mut rng, 1, 4, 3);
        let mut rev = x.clone();
        for s in 0..4 {
            rev.data_mut()[s * 3..s * 3 + 3]
                .copy_from_slice(&x.data()[(3 - s) * 3..(3 - s) * 3 + 3]);
        }
        let mask = [true; 4];
        let a = bidirectional_contextual_lstm(&fwd, &bwd, &x, &mask).unwrap();
        // Swapping parameter roles on the reversed input mirrors the output.
        let b = bidirectional_contextual_lstm(&bwd, &fwd, &rev, &mask).unwrap();
        for s in 0..4 {
            let ra = &a.data()[s * 4..s * 4 + 4];
            let rb = &b.data()[(3 - s) * 4..(3 - s) * 4 + 4];
            assert_eq!(&ra[..2], &rb[2..]);
            assert_eq!(&ra[2..], &rb[..2]);
        }
        // Symmetric parameters: the forward half of the reversed input is the
        // reversed backward half of the original.
        let c = bidirectional_contextual_lstm(&fwd, &fwd, &x, &mask).unwrap();
        let d = bidirectional_contextual_lstm(&fwd, &fwd, &rev, &mask).unwrap();
        for s in 0..4 {
            assert_eq!(
                &d.data()[s * 4..s * 4 + 2],
                &c.data()[(3 - s) * 4 + 2..(3 - s) * 4 + 4]
            );
        }
    }

    #[test]
    fn padding_outputs_zero_and_valid_rows_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = LstmParams::init(&mut rng, 3, 2);
        let bwd = LstmParams::init(&mut rng, 3, 2);
        let x = random_features(&mut rng, 1, 3, 3);
        let mut padded = Tensor::zeros(&[1, 5, 3]);
        padded.data_mut()[..9].copy_from_slice(x.data());
        let a = bidirectional_contextual_lstm(&fwd, &bwd, &x, &[true; 3]).unwrap();
        let b =
            bidirectional_contextual_lstm(&fwd, &bwd, &padded, &[true, true, true, false, false])
                .unwrap();
        assert_eq!(&b.data()[..12], a.data());
        assert!(b.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_conversation_rejected() {
        let p = LstmParams::zeros(2, 2);
        let x = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            bidirectional_contextual_lstm(&p, &p, &x, &[true, false, false, false]),
            Err(Error::Validation(_))
        ));
    }
}
