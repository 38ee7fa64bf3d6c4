//! Hand-differentiated building blocks: affine maps, two-layer MLPs and
//! layer normalization.
//!
//! Each block exposes a traced forward pass and a backward pass that
//! accumulates parameter gradients into a same-shaped gradient block and
//! returns the gradient w.r.t. the block input.

use rand::Rng;

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Borrowed view of a named parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

/// Mutable view of a named parameter tensor.
#[derive(Debug)]
pub struct NamedTensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Enumerates parameter tensors in a fixed order.
pub trait ParamTensors {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);
    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = W x + b`, with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform weights in `±1/√in_dim`, zero bias.
    pub fn init_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.in_dim, self.out_dim)
    }
}

impl ParamTensors for Linear {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            rows: self.out_dim,
            cols: self.in_dim,
            data: &self.weight,
        });
        out.push(NamedTensor {
            name: join(prefix, "bias"),
            rows: 1,
            cols: self.out_dim,
            data: &self.bias,
        });
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        out.push(NamedTensorMut {
            name: join(prefix, "weight"),
            data: &mut self.weight,
        });
        out.push(NamedTensorMut {
            name: join(prefix, "bias"),
            data: &mut self.bias,
        });
    }
}

/// affine → tanh → affine
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Activations kept from an [`Mlp`] forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn new(fc1: Linear, fc2: Linear) -> Self {
        debug_assert_eq!(fc1.out_dim, fc2.in_dim);
        Mlp { fc1, fc2 }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        let hidden: Vec<f64> = self.fc1.forward(x).into_iter().map(f64::tanh).collect();
        let y = self.fc2.forward(&hidden);
        (
            y,
            MlpTrace {
                input: x.to_vec(),
                hidden,
            },
        )
    }

    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let dh = self.fc2.backward(&trace.hidden, dy, &mut grad.fc2);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&trace.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        self.fc1.backward(&trace.input, &dpre, &mut grad.fc1)
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }
}

impl ParamTensors for Mlp {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.fc1.named_tensors(&join(prefix, "fc1"), out);
        self.fc2.named_tensors(&join(prefix, "fc2"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.fc1.named_tensors_mut(&join(prefix, "fc1"), out);
        self.fc2.named_tensors_mut(&join(prefix, "fc2"), out);
    }
}

/// Layer normalization over the feature dimension, with gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormTrace {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    /// Gain 1, bias 0.
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, LayerNormTrace) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        (y, LayerNormTrace { xhat, inv_std })
    }

    pub fn backward(&self, trace: &LayerNormTrace, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = vec![0.0; dy.len()];
        for i in 0..dy.len() {
            grad.gain[i] += dy[i] * trace.xhat[i];
            grad.bias[i] += dy[i];
            dxhat[i] = dy[i] * self.gain[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat
            .iter()
            .zip(&trace.xhat)
            .map(|(d, h)| d * h)
            .sum::<f64>()
            / n;
        dxhat
            .iter()
            .zip(&trace.xhat)
            .map(|(d, h)| trace.inv_std * (d - mean_d - h * mean_dx))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: vec![0.0; self.gain.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

impl ParamTensors for LayerNorm {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "gain"),
            rows: 1,
            cols: self.gain.len(),
            data: &self.gain,
        });
        out.push(NamedTensor {
            name: join(prefix, "bias"),
            rows: 1,
            cols: self.bias.len(),
            data: &self.bias,
        });
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        out.push(NamedTensorMut {
            name: join(prefix, "gain"),
            data: &mut self.gain,
        });
        out.push(NamedTensorMut {
            name: join(prefix, "bias"),
            data: &mut self.bias,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()),
                "component {i}: numeric {num} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn mlp_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(
            Linear::init_uniform(3, 4, &mut rng),
            Linear::init_uniform(4, 2, &mut rng),
        );
        let w = [0.7, -1.3];
        let x = [0.2, -0.5, 0.9];
        let (_, trace) = mlp.forward_traced(&x);
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&trace, &w, &mut grad);
        fd_check(
            |x| mlp.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum(),
            &x,
            &dx,
        );
    }

    #[test]
    fn layer_norm_input_gradient() {
        let ln = LayerNorm {
            gain: vec![1.5, 0.5, -0.7, 1.0],
            bias: vec![0.1, 0.0, 0.2, -0.3],
        };
        let w = [0.3, -0.2, 1.1, 0.4];
        let x = [0.4, -1.0, 2.0, 0.3];
        let (_, trace) = ln.forward_traced(&x);
        let mut grad = ln.zeros_like();
        let dx = ln.backward(&trace, &w, &mut grad);
        fd_check(
            |x| ln.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum(),
            &x,
            &dx,
        );
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let y = LayerNorm::identity(2).forward(&[1.0, 1.0]);
        assert_eq!(y, vec![0.0, 0.0]);
    }
}
