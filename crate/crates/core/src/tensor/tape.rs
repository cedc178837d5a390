use super::ops::{self, Conv2dGeometry};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Custom gradient: upstream gradient times the saved window values.
    Windowed {
        x: Var,
        window: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Windowed { .. } => "custom_grad",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Entry {
    value: Tensor,
    op: Op,
}

/// Linear record of a forward computation, replayed backwards by
/// [`Tape::backward`].
///
/// Every recorded value is `Real64`. Entries are appended in execution order,
/// so every input precedes its consumer.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Gradients of a scalar with respect to every recorded value that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn values(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.values(var)?;
        Tensor::from_f64(self.shapes[var.0].clone(), g.to_vec()).ok()
    }

    /// Gradient or zeros when the value does not influence the loss.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names of the recorded operations in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    fn vals(&self, v: Var) -> &[f64] {
        // Every recorded value is Real64 by construction.
        self.entries[v.0].value.as_f64().expect("tape values are real64")
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = value.to_f64();
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_f64(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.vals(a).iter().map(|x| x * factor).collect();
        let t = Tensor::from_f64(self.shape(a).to_vec(), out).expect("same length");
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Affine map on `[B, n]` input with `[m, n]` weight and optional `[m]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let mismatch = || TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        let ([batch, inputs], [outputs, w_in]) = (xs, ws) else {
            return Err(mismatch());
        };
        let (batch, inputs, outputs) = (*batch, *inputs, *outputs);
        if *w_in != inputs {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [outputs] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws.to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = ops::linear_forward(batch, inputs, outputs, self.vals(x), self.vals(w), b.map(|b| self.vals(b)));
        let t = Tensor::from_f64(vec![batch, outputs], out)?;
        Ok(self.push(t, Op::Linear { x, w, b, batch, inputs, outputs }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let geom = Conv2dGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = ops::conv2d_forward(&geom, self.vals(x), self.vals(w), b.map(|b| self.vals(b)));
        let t = Tensor::from_f64(geom.output_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        if shape.len() != 4 || k == 0 || shape[2] < k || shape[3] < k {
            return Err(TensorError::Invalid(format!("max_pool2d: window {k} does not fit shape {shape:?}")));
        }
        let (out_shape, out, argmax) = ops::max_pool2d_forward(shape, self.vals(x), k);
        let t = Tensor::from_f64(out_shape, out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Applies `forward` elementwise; backward multiplies the upstream
    /// gradient by `window(x)` and ignores `forward`'s own derivative.
    pub fn custom_grad_apply(&mut self, x: Var, forward: impl Fn(f64) -> f64, window: impl Fn(f64) -> f64) -> Var {
        let xs = self.vals(x);
        let out: Vec<f64> = xs.iter().map(|&v| forward(v)).collect();
        let window: Vec<f64> = xs.iter().map(|&v| window(v)).collect();
        let t = Tensor::from_f64(self.shape(x).to_vec(), out).expect("same length");
        self.push(t, Op::Windowed { x, window })
    }

    /// Normalizes with batch statistics. Returns the output together with the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (mean, var) = ops::channel_stats(&shape, self.vals(x));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let neg_shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xhat = ops::channel_affine(&shape, self.vals(x), &inv_std, &neg_shift);
        let out = ops::channel_affine(&shape, &xhat, self.vals(gamma), self.vals(beta));
        let t = Tensor::from_f64(shape, out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((v, mean, var))
    }

    /// Fixed per-channel `x * scale + shift`; gradient flows to `x` only.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || scale.len() != shape[1] || shift.len() != shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_affine",
                lhs: shape,
                rhs: vec![scale.len()],
            });
        }
        let out = ops::channel_affine(&shape, self.vals(x), &scale, &shift);
        let t = Tensor::from_f64(shape, out)?;
        Ok(self.push(t, Op::ChannelAffine { x, scale }))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(logits);
        let [batch, classes] = *shape else {
            return Err(TensorError::Invalid(format!("cross-entropy expects [B, K] logits, got {shape:?}")));
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
            return Err(TensorError::Invalid(format!(
                "cross-entropy: {} labels for batch {batch} with {classes} classes",
                labels.len()
            )));
        }
        let z = self.vals(logits);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..classes {
                probs[b * classes + k] = (row[k] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[b]];
        }
        let loss = loss / batch.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, visiting entries in exact reverse
    /// recording order. Gradients of values used several times (for example a
    /// weight shared across timesteps) are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_val = &self.entries[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            match &entry.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|x| -x).collect());
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.vals(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.vals(*a)).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|x| x * c).collect()),
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; self.value(*a).numel()]),
                Op::Reshape(a) => acc(&mut grads, *a, g.clone()),
                Op::Linear { x, w, b, batch, inputs, outputs } => {
                    let (gx, gw, gb) = ops::linear_backward(*batch, *inputs, *outputs, self.vals(*x), self.vals(*w), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw, gb) = ops::conv2d_backward(geom, self.vals(*x), self.vals(*w), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (go, &src) in g.iter().zip(argmax) {
                        gx[src] += go;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Windowed { x, window } => {
                    acc(&mut grads, *x, g.iter().zip(window).map(|(a, w)| a * w).collect());
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (gx, gg, gb) = ops::batch_norm_backward(self.shape(*x), xhat, self.vals(*gamma), inv_std, &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::ChannelAffine { x, scale } => {
                    let shape = self.shape(*x);
                    let spatial: usize = shape[2..].iter().product();
                    let channels = shape[1];
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * scale[(i / spatial) % channels])
                        .collect();
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let classes = self.shape(*logits)[1];
                    let scale = g[0] / labels.len().max(1) as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &l) in labels.iter().enumerate() {
                        gl[b * classes + l] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.entries.iter().map(|e| e.value.shape().to_vec()).collect();
        grads.resize(self.entries.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.7));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(w, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.values(w).unwrap(), &[3.0]);
    }

    #[test]
    fn shared_weight_sums_over_timesteps() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1, 1], &[0.25]));
        let o1 = tape.leaf(t(&[1, 1], &[2.0]));
        let o2 = tape.leaf(t(&[1, 1], &[3.0]));
        let y1 = tape.linear(o1, w, None).unwrap();
        let y2 = tape.linear(o2, w, None).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.values(w).unwrap(), &[5.0]);
    }

    #[test]
    fn custom_gradient_uses_window_only() {
        let window = |v: f64| if (0.0..=4.0).contains(&v) { 1.0 } else { 0.0 };
        for (x0, fwd, grad) in [(2.3, 2.0, 1.0), (-0.5, -1.0, 0.0), (5.0, 5.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(x0));
            let y = tape.custom_grad_apply(x, f64::round, window);
            assert_eq!(tape.value(y).as_f64().unwrap(), &[fwd]);
            let g = tape.backward(y).unwrap();
            assert_eq!(g.values(x).unwrap(), &[grad]);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 4], &[0.1, 0.9, 0.3, 0.2, 0.5, 0.4, 0.8, 0.7]));
        let p = tape.max_pool2d(x, 2).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.values(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn entries_are_recorded_in_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        let w = tape.leaf(Tensor::zeros(&[3, 2]));
        let y = tape.linear(x, w, None).unwrap();
        let _ = tape.sum(y);
        assert_eq!(tape.op_names(), vec!["leaf", "leaf", "linear", "sum"]);
    }

    /// Central differences on a composite of the smooth ops.
    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x0 = r(2 * 2 * 4 * 4);
        let cw0 = r(3 * 2 * 3 * 3);
        let cb0 = r(3);
        let gamma0 = r(3);
        let beta0 = r(3);
        let lw0 = r(4 * 48);
        let labels = [1usize, 3];

        let eval = |params: &[Vec<f64>], tape: &mut Tape| -> (Vec<Var>, Var) {
            let x = tape.leaf(t(&[2, 2, 4, 4], &params[0]));
            let cw = tape.leaf(t(&[3, 2, 3, 3], &params[1]));
            let cb = tape.leaf(t(&[3], &params[2]));
            let gamma = tape.leaf(t(&[3], &params[3]));
            let beta = tape.leaf(t(&[3], &params[4]));
            let lw = tape.leaf(t(&[4, 48], &params[5]));
            let c = tape.conv2d(x, cw, Some(cb), 1, 1).unwrap();
            let (bn, _, _) = tape.batch_norm_train(c, gamma, beta, 1e-5).unwrap();
            let sq = tape.mul(bn, bn).unwrap();
            let f = tape.reshape(sq, &[2, 48]).unwrap();
            let logits = tape.linear(f, lw, None).unwrap();
            let s = tape.scale(logits, 0.5);
            let loss = tape.softmax_cross_entropy(s, &labels).unwrap();
            (vec![x, cw, cb, gamma, beta, lw], loss)
        };
        let params = vec![x0, cw0, cb0, gamma0, beta0, lw0];
        let mut tape = Tape::new();
        let (vars, loss) = eval(&params, &mut tape);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-3;
        for (p, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var).into_f64_vec();
            for i in 0..params[p].len() {
                let mut plus = params.clone();
                plus[p][i] += h;
                let mut minus = params.clone();
                minus[p][i] -= h;
                let mut tp = Tape::new();
                let (_, lp) = eval(&plus, &mut tp);
                let mut tm = Tape::new();
                let (_, lm) = eval(&minus, &mut tm);
                let numeric = (tp.value(lp).as_f64().unwrap()[0] - tm.value(lm).as_f64().unwrap()[0]) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1e-2);
                assert!(
                    (numeric - analytic[i]).abs() / denom <= 1e-4,
                    "param {p}[{i}]: numeric {numeric} analytic {}",
                    analytic[i]
                );
            }
        }
    }
}
