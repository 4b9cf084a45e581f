//! Sine-activated MLP with a forward-mode tangent channel.
//!
//! Batch rows are laid out as `[values; tangents]` when the tangent channel is
//! active, so one GEMM per layer serves both. For a sine layer
//! `h = sin(ω(Wa + b))` the tangent propagates as `ḣ = cos(ω(Wa + b))·ωWȧ`.

use rand::Rng;

use super::{matmul_nn, matmul_nt, matmul_tn, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }
}

/// SIREN: sine hidden layers with frequency `omega0`, linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct SirenMlp<T> {
    pub omega0: f64,
    pub layers: Vec<Dense<T>>,
}

/// Activations retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct SirenTape<T> {
    pub batch: usize,
    pub rows: usize,
    input: Vec<T>,
    // per sine layer: [h; ḣ] (rows × width)
    acts: Vec<Vec<T>>,
    // per sine layer: cos(u) on value rows (batch × width)
    cos: Vec<Vec<T>>,
    // per sine layer: u̇ on tangent rows (batch × width), empty without tangent
    udot: Vec<Vec<T>>,
    /// `[y; ẏ]` (rows × out)
    pub output: Vec<T>,
}

impl<T: Real> SirenTape<T> {
    pub fn has_tangent(&self) -> bool {
        self.rows == 2 * self.batch
    }

    pub fn values(&self) -> &[T] {
        let out = self.output.len() / self.rows;
        &self.output[..self.batch * out]
    }

    pub fn tangents(&self) -> &[T] {
        assert!(self.has_tangent(), "forward pass ran without a tangent channel");
        let out = self.output.len() / self.rows;
        &self.output[self.batch * out..]
    }
}

impl<T: Real> SirenMlp<T> {
    /// `widths = [in, hidden…, out]`.
    pub fn new<R: Rng>(widths: &[usize], omega0: f64, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need at least input and output width");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w_lim = if l == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega0
            };
            let b_lim = if l == 0 {
                1.0 / (fan_in as f64).sqrt()
            } else {
                w_lim
            };
            let weight = (0..fan_in * fan_out)
                .map(|_| T::of(rng.random_range(-w_lim..w_lim)))
                .collect();
            let bias = (0..fan_out)
                .map(|_| T::of(rng.random_range(-b_lim..b_lim)))
                .collect();
            layers.push(Dense {
                weight: Tensor::from_vec(&[fan_out, fan_in], weight),
                bias: Tensor::from_vec(&[fan_out], bias),
            });
        }
        Self { omega0, layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Batched forward pass. `tangent`, when given, is the input tangent
    /// (batch × in) and the returned tape carries output derivatives.
    pub fn forward(&self, input: &[T], batch: usize, tangent: Option<&[T]>) -> SirenTape<T> {
        let in_dim = self.in_dim();
        assert_eq!(input.len(), batch * in_dim, "input size");
        let rows = if tangent.is_some() { 2 * batch } else { batch };
        let mut a = Vec::with_capacity(rows * in_dim);
        a.extend_from_slice(input);
        if let Some(t) = tangent {
            assert_eq!(t.len(), batch * in_dim, "tangent size");
            a.extend_from_slice(t);
        }
        let omega = T::of(self.omega0);
        let n_sine = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(n_sine);
        let mut coss = Vec::with_capacity(n_sine);
        let mut udots = Vec::with_capacity(n_sine);

        let mut prev: &[T] = &a;
        for layer in &self.layers[..n_sine] {
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            let mut z = vec![T::zero(); rows * dout];
            matmul_nt(prev, &layer.weight.data, &mut z, rows, din, dout, T::zero());
            let mut cos = vec![T::zero(); batch * dout];
            let mut udot = if tangent.is_some() {
                vec![T::zero(); batch * dout]
            } else {
                Vec::new()
            };
            let (val, tan) = z.split_at_mut(batch * dout);
            for i in 0..batch {
                for j in 0..dout {
                    let k = i * dout + j;
                    let u = omega * (val[k] + layer.bias.data[j]);
                    let (s, c) = u.sin_cos();
                    val[k] = s;
                    cos[k] = c;
                    if !tan.is_empty() {
                        let ud = omega * tan[k];
                        udot[k] = ud;
                        tan[k] = c * ud;
                    }
                }
            }
            acts.push(z);
            coss.push(cos);
            udots.push(udot);
            prev = acts.last().unwrap();
        }

        let head = self.layers.last().unwrap();
        let (din, dout) = (head.in_dim(), head.out_dim());
        let mut output = vec![T::zero(); rows * dout];
        matmul_nt(prev, &head.weight.data, &mut output, rows, din, dout, T::zero());
        for i in 0..batch {
            for j in 0..dout {
                output[i * dout + j] += head.bias.data[j];
            }
        }
        debug_assert!(output.iter().all(|v| v.is_finite()), "non-finite network output");

        SirenTape {
            batch,
            rows,
            input: a,
            acts,
            cos: coss,
            udot: udots,
            output,
        }
    }

    /// Accumulate parameter gradients for the upstream gradient `g_out`
    /// (rows × out, covering tangent rows when present) and return the
    /// gradient with respect to the stacked input.
    pub fn backward(&mut self, tape: &SirenTape<T>, g_out: &[T]) -> Vec<T> {
        let rows = tape.rows;
        let batch = tape.batch;
        let omega = T::of(self.omega0);
        let n_sine = self.layers.len() - 1;
        assert_eq!(g_out.len(), rows * self.out_dim(), "upstream gradient size");

        let layer_input = |l: usize| -> &[T] {
            if l == 0 {
                &tape.input
            } else {
                &tape.acts[l - 1]
            }
        };

        // linear head
        let head = &mut self.layers[n_sine];
        let (din, dout) = (head.in_dim(), head.out_dim());
        matmul_tn(g_out, layer_input(n_sine), &mut head.weight.grad, dout, rows, din, T::one(), T::one());
        for i in 0..batch {
            for j in 0..dout {
                head.bias.grad[j] += g_out[i * dout + j];
            }
        }
        let mut g_act = vec![T::zero(); rows * din];
        matmul_nn(g_out, &head.weight.data, &mut g_act, rows, dout, din, T::one(), T::zero());

        for l in (0..n_sine).rev() {
            let layer = &mut self.layers[l];
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            let h = &tape.acts[l];
            let cos = &tape.cos[l];
            let udot = &tape.udot[l];
            // g_act becomes ω·∂L/∂z in place
            let (gv, gt) = g_act.split_at_mut(batch * dout);
            for k in 0..batch * dout {
                let mut gu = gv[k] * cos[k];
                if !gt.is_empty() {
                    gu -= gt[k] * h[k] * udot[k];
                    gt[k] = omega * gt[k] * cos[k];
                }
                gv[k] = omega * gu;
            }
            matmul_tn(&g_act, layer_input(l), &mut layer.weight.grad, dout, rows, din, T::one(), T::one());
            for i in 0..batch {
                for j in 0..dout {
                    layer.bias.grad[j] += g_act[i * dout + j];
                }
            }
            let mut g_prev = vec![T::zero(); rows * din];
            matmul_nn(&g_act, &layer.weight.data, &mut g_prev, rows, dout, din, T::one(), T::zero());
            g_act = g_prev;
        }
        g_act
    }

    /// Values and exact derivatives with respect to input coordinate 0.
    pub fn forward_with_time_derivative(&self, input: &[T], batch: usize) -> SirenTape<T> {
        let in_dim = self.in_dim();
        let mut tangent = vec![T::zero(); batch * in_dim];
        for i in 0..batch {
            tangent[i * in_dim] = T::one();
        }
        self.forward(input, batch, Some(&tangent))
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> SirenMlp<U> {
        SirenMlp {
            omega0: self.omega0,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_linear(net: &mut SirenMlp<f64>, w: f64, b: f64) {
        net.layers[0].weight.data[0] = w;
        net.layers[0].bias.data[0] = b;
    }

    #[test]
    fn linear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SirenMlp::<f64>::new(&[1, 1], 15.0, &mut rng);
        set_linear(&mut net, 2.0, 3.0);
        let tape = net.forward_with_time_derivative(&[0.5, -1.0], 2);
        assert_eq!(tape.values(), &[4.0, 1.0]);
        assert_eq!(tape.tangents(), &[2.0, 2.0]);
    }

    #[test]
    fn single_sine_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SirenMlp::<f64>::new(&[1, 1, 1], 15.0, &mut rng);
        net.layers[0].weight.data[0] = 0.1;
        net.layers[0].bias.data[0] = 0.0;
        net.layers[1].weight.data[0] = 1.0;
        net.layers[1].bias.data[0] = 0.0;
        let tape = net.forward_with_time_derivative(&[0.0], 1);
        assert!(tape.values()[0].abs() < 1e-15);
        assert!((tape.tangents()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SirenMlp::<f64>::new(&[3, 16, 16, 16, 1], 15.0, &mut rng);
        let n = 100;
        let input: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = net.forward_with_time_derivative(&input, n);
        let h = 2e-3 / 60.0; // 1 ms on a 60 s window mapped to [-1, 1]
        let shifted = |d: f64| {
            let mut x = input.clone();
            for i in 0..n {
                x[i * 3] += d;
            }
            net.forward(&x, n, None).output
        };
        let (up, down) = (shifted(h), shifted(-h));
        for i in 0..n {
            let fd = (up[i] - down[i]) / (2.0 * h);
            let exact = tape.tangents()[i];
            assert!(
                (fd - exact).abs() <= 1e-4 * exact.abs().max(1.0),
                "point {i}: fd {fd} exact {exact}"
            );
        }
    }

    #[test]
    fn parameter_gradients_through_tangent_channel() {
        // L = Σ y + 0.5 Σ ẏ² on a tiny net, checked against central differences
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = SirenMlp::<f64>::new(&[2, 4, 4, 1], 15.0, &mut rng);
        let n = 5;
        let input: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |net: &SirenMlp<f64>| {
            let t = net.forward_with_time_derivative(&input, n);
            t.values().iter().sum::<f64>() + 0.5 * t.tangents().iter().map(|d| d * d).sum::<f64>()
        };
        let tape = net.forward_with_time_derivative(&input, n);
        let mut g = vec![1.0; 2 * n];
        g[n..].copy_from_slice(tape.tangents());
        net.zero_grad();
        net.backward(&tape, &g);
        let h = 1e-6;
        for li in 0..net.layers.len() {
            for which in 0..2 {
                let len = if which == 0 { net.layers[li].weight.len() } else { net.layers[li].bias.len() };
                for k in 0..len {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    let (p, m) = if which == 0 {
                        (&mut plus.layers[li].weight.data[k], &mut minus.layers[li].weight.data[k])
                    } else {
                        (&mut plus.layers[li].bias.data[k], &mut minus.layers[li].bias.data[k])
                    };
                    *p += h;
                    *m -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = if which == 0 { net.layers[li].weight.grad[k] } else { net.layers[li].bias.grad[k] };
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "layer {li} p{which}[{k}]: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn init_keeps_preactivation_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let width = 64;
        let net = SirenMlp::<f64>::new(&[1, width, width, width, 1], 15.0, &mut rng);
        let n = 10_000;
        let input: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // pre-activation of the third sine layer = ω(W h2 + b)
        let partial = SirenMlp {
            omega0: net.omega0,
            layers: net.layers[..3].to_vec(),
        };
        let tape = partial.forward(&input, n, None);
        let pre: Vec<f64> = tape.output.iter().map(|v| net.omega0 * v).collect();
        let mean = pre.iter().sum::<f64>() / pre.len() as f64;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pre.len() as f64;
        assert!((0.5..=2.0).contains(&var), "variance {var}");
    }
}
