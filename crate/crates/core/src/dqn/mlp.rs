//! Fully connected network with rectifier hidden layers and a linear output.

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("input has {got} features, network expects {expected}")]
pub struct DimError {
    pub expected: usize,
    pub got: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub w: Vec<F>,
    pub b: Vec<F>,
}

impl<F: Float> Layer<F> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            w: vec![F::zero(); inputs * outputs],
            b: vec![F::zero(); outputs],
        }
    }

    fn affine(&self, x: &[F], y: &mut Vec<F>) {
        y.clear();
        for (row, &bias) in self.w.chunks_exact(self.inputs).zip(&self.b) {
            let mut acc = bias;
            for (&wi, &xi) in row.iter().zip(x) {
                acc = acc + wi * xi;
            }
            y.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Float> Mlp<F> {
    /// All-zero network with the given layer widths, input first.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need input and output widths");
        Mlp {
            layers: dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        for l in &mut net.layers {
            let bound = (6.0 / l.inputs.max(1) as f64).sqrt();
            for w in &mut l.w {
                *w = F::from(rng.gen_range(-bound..bound)).expect("finite");
            }
        }
        net
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("nonempty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &F> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, DimError> {
        Ok(self.forward_cached(x)?.pop().expect("output"))
    }

    /// Activations of every layer, input first, output last.
    fn forward_cached(&self, x: &[F]) -> Result<Vec<Vec<F>>, DimError> {
        if x.len() != self.input_len() {
            return Err(DimError {
                expected: self.input_len(),
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(l.outputs);
            l.affine(acts.last().expect("input"), &mut y);
            if i < last {
                for v in &mut y {
                    *v = v.max(F::zero());
                }
            }
            acts.push(y);
        }
        Ok(acts)
    }

    /// Add `d loss / d params` to `grads` given `d loss / d output`.
    fn backward(&self, acts: &[Vec<F>], mut delta: Vec<F>, grads: &mut Mlp<F>) {
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let g = &mut grads.layers[i];
            let x = &acts[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == F::zero() {
                    continue;
                }
                g.b[o] = g.b[o] + d;
                let row = &mut g.w[o * l.inputs..(o + 1) * l.inputs];
                for (gw, &xi) in row.iter_mut().zip(x) {
                    *gw = *gw + d * xi;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![F::zero(); l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == F::zero() {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&l.w[o * l.inputs..(o + 1) * l.inputs]) {
                    *p = *p + d * w;
                }
            }
            // Rectifier derivative, from the post-activation values.
            for (p, &a) in prev.iter_mut().zip(x) {
                if a <= F::zero() {
                    *p = F::zero();
                }
            }
            delta = prev;
        }
    }

    /// Importance-weighted mean Huber loss of `Q(x_i, a_i)` against `target_i`.
    ///
    /// Returns the loss, its gradient with respect to every parameter, and the
    /// TD errors `Q(x_i, a_i) - target_i`.
    pub fn td_loss(
        &self,
        inputs: &[&[F]],
        actions: &[usize],
        targets: &[F],
        weights: &[F],
    ) -> Result<(F, Mlp<F>, Vec<F>), DimError> {
        let n = F::from(inputs.len().max(1)).expect("count");
        let mut grads = Mlp::zeros(&self.dims());
        let mut loss = F::zero();
        let mut errors = Vec::with_capacity(inputs.len());
        for (((x, &a), &t), &w) in inputs.iter().zip(actions).zip(targets).zip(weights) {
            let acts = self.forward_cached(x)?;
            let q = acts.last().expect("output")[a];
            let e = q - t;
            errors.push(e);
            loss = loss + w * huber(e) / n;
            let mut delta = vec![F::zero(); self.output_len()];
            delta[a] = w * huber_grad(e) / n;
            self.backward(&acts, delta, &mut grads);
        }
        Ok((loss, grads, errors))
    }
}

/// Huber loss with threshold 1.
pub fn huber<F: Float>(e: F) -> F {
    let half = F::from(0.5).expect("const");
    if e.abs() <= F::one() {
        half * e * e
    } else {
        e.abs() - half
    }
}

pub fn huber_grad<F: Float>(e: F) -> F {
    e.max(-F::one()).min(F::one())
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Mlp<F>,
    v: Mlp<F>,
    t: i32,
}

impl<F: Float> Adam<F> {
    pub fn new(net: &Mlp<F>, lr: F) -> Self {
        let c = |x: f64| F::from(x).expect("const");
        Adam {
            lr,
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            m: Mlp::zeros(&net.dims()),
            v: Mlp::zeros(&net.dims()),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp<F>, grads: &Mlp<F>) {
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        let params = net.params_mut();
        let state = self.m.params_mut().zip(self.v.params_mut());
        for ((p, g), (m, v)) in params.zip(grads.params()).zip(state) {
            *m = self.beta1 * *m + (F::one() - self.beta1) * *g;
            *v = self.beta2 * *v + (F::one() - self.beta2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p - self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
