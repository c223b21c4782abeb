//! Small dense networks with hand-written backprop and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialisation, or `±bound` when given.
    pub fn new(fan_in: usize, fan_out: usize, bound: Option<f64>, rng: &mut impl Rng) -> Self {
        let k = bound.unwrap_or(1.0 / (fan_in as f64).sqrt());
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-k..=k));
        let b = Array1::from_shape_fn(fan_out, |_| rng.gen_range(-k..=k));
        Linear { w, b }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Feed-forward net: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations kept for one backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads { layers: net.layers.iter().map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim()))).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|x| x.is_finite()))
    }
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`; the output layer uses `out_bound`.
    pub fn new(sizes: &[usize], out_bound: Option<f64>, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(sizes[i], sizes[i + 1], if i + 1 == n { out_bound } else { None }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&h);
            inputs.push(h);
            h = next;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        (h, MlpCache { inputs })
    }

    /// Gradients of `sum(dout * out)` w.r.t. parameters and input.
    pub fn backward(&self, cache: &MlpCache, dout: &Array2<f64>) -> (Grads, Array2<f64>) {
        let n = self.layers.len();
        let mut grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); n];
        let mut d = dout.clone();
        for i in (0..n).rev() {
            let x = &cache.inputs[i];
            grads[i] = (x.t().dot(&d), d.sum_axis(Axis(0)));
            let mut dx = d.dot(&self.layers[i].w.t());
            if i > 0 {
                // ReLU mask: the layer input is the previous activation.
                ndarray::Zip::from(&mut dx).and(x).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = dx;
        }
        (Grads { layers: grads }, d)
    }

    /// Polyak averaging toward `src`.
    pub fn soft_update(&mut self, src: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&src.layers) {
            t.w.zip_mut_with(&s.w, |a, &b| *a = (1.0 - tau) * *a + tau * b);
            t.b.zip_mut_with(&s.b, |a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let z = Grads::zeros_like(net).layers;
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: z.clone(), v: z }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in
            net.layers.iter_mut().zip(&grads.layers).zip(&mut self.m).zip(&mut self.v)
        {
            ndarray::Zip::from(&mut layer.w).and(gw).and(mw).and(vw).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
            ndarray::Zip::from(&mut layer.b).and(gb).and(mb).and(vb).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Adam on a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub lr: f64,
    t: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam { lr, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t as i32));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t as i32));
        *p -= self.lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        (net.forward(x) * c).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 5, 4, 2], None, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(&x);
        let (g, dx) = net.backward(&cache, &c);
        let h = 1e-6;
        for li in 0..net.layers.len() {
            for idx in 0..net.layers[li].w.len() {
                let (r, col) = (idx / net.layers[li].w.ncols(), idx % net.layers[li].w.ncols());
                let mut p = net.clone();
                p.layers[li].w[(r, col)] += h;
                let mut m = net.clone();
                m.layers[li].w[(r, col)] -= h;
                let fd = (loss(&p, &x, &c) - loss(&m, &x, &c)) / (2.0 * h);
                let an = g.layers[li].0[(r, col)];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "layer {li} w[{r},{col}]: {fd} vs {an}");
            }
        }
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (loss(&net, &xp, &c) - loss(&net, &xm, &c)) / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn adam_fits_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 16, 1], None, &mut rng);
        let mut opt = Adam::new(&net, 1e-2);
        let x = Array2::from_shape_fn((32, 2), |_| rng.gen_range(-1.0..1.0));
        let y = x.map_axis(Axis(1), |r| 2.0 * r[0] - r[1]).insert_axis(Axis(1));
        let mse = |n: &Mlp| (n.forward(&x) - &y).mapv(|v| v * v).mean().unwrap();
        let before = mse(&net);
        for _ in 0..500 {
            let (out, cache) = net.forward_cached(&x);
            let d = (out - &y) * (2.0 / 32.0);
            let (g, _) = net.backward(&cache, &d);
            opt.step(&mut net, &g);
        }
        assert!(mse(&net) < before * 0.01);
    }

    #[test]
    fn soft_update_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::new(&[2, 3, 1], None, &mut rng);
        let b = Mlp::new(&[2, 3, 1], None, &mut rng);
        let mut t = a.clone();
        t.soft_update(&b, 0.0);
        assert_eq!(t, a);
        t.soft_update(&b, 1.0);
        assert_eq!(t, b);
    }
}
