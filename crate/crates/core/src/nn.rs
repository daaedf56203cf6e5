//! Dense layers with hand-written backward passes. Rows are batch items.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::Scalar;

/// Named tensor with its gradient. Non-trainable tensors (batch-norm running
/// statistics) are saved with the model but skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Array2<T>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { name: name.into(), value, grad, trainable: true }
    }

    fn buffer(name: impl Into<String>, value: Array2<T>) -> Self {
        Self { trainable: false, ..Self::new(name, value) }
    }
}

/// Forward-pass mode and randomness.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// in x out
    pub w: Param<T>,
    /// 1 x out
    pub b: Param<T>,
    x: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn new(name: &str, n_in: usize, n_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain * (6.0 / n_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array2::from_shape_simple_fn((n_in, n_out), || T::lit(dist.sample(rng)));
        Self { w: Param::new(format!("{name}.w"), w), b: Param::new(format!("{name}.b"), Array2::zeros((1, n_out))), x: None }
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        self.x = Some(x.clone());
        x.dot(&self.w.value) + &self.b.value
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.x.as_ref().expect("forward before backward");
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        dy * self.mask.as_ref().expect("forward before backward")
    }
}

/// Inverted dropout; identity outside training.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward(&mut self, x: &Array2<T>, ctx: &mut Ctx) -> Array2<T> {
        if !ctx.train || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
            if ctx.rng.random::<f64>() < self.p { T::zero() } else { keep }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        match &self.mask {
            Some(m) => dy * m,
            None => dy.clone(),
        }
    }
}

/// Batch normalization over the batch axis. Eval mode uses running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array2<T>, Array1<T>, bool)>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, n: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Array2::ones((1, n))),
            beta: Param::new(format!("{name}.beta"), Array2::zeros((1, n))),
            running_mean: Param::buffer(format!("{name}.running_mean"), Array2::zeros((1, n))),
            running_var: Param::buffer(format!("{name}.running_var"), Array2::ones((1, n))),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, ctx: &mut Ctx) -> Array2<T> {
        let eps = T::lit(self.eps);
        let (mean, var) = if ctx.train {
            let b = T::of_usize(x.nrows());
            let mean = x.sum_axis(Axis(0)) / b;
            let centered = x - &mean;
            let var = (&centered * &centered).sum_axis(Axis(0)) / b;
            let m = T::lit(self.momentum);
            let unbiased = if x.nrows() > 1 { b / (b - T::one()) } else { T::one() };
            Zip::from(self.running_mean.value.row_mut(0)).and(&mean).for_each(|r, &v| *r = (T::one() - m) * *r + m * v);
            Zip::from(self.running_var.value.row_mut(0))
                .and(&var)
                .for_each(|r, &v| *r = (T::one() - m) * *r + m * v * unbiased);
            (mean, var)
        } else {
            (self.running_mean.value.row(0).to_owned(), self.running_var.value.row(0).to_owned())
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &self.gamma.value + &self.beta.value;
        self.cache = Some((xhat, inv_std, ctx.train));
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let (xhat, inv_std, train) = self.cache.as_ref().expect("forward before backward");
        self.gamma.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        if !train {
            return dxhat * inv_std;
        }
        let b = T::of_usize(dy.nrows());
        let s1 = dxhat.sum_axis(Axis(0));
        let s2 = (&dxhat * xhat).sum_axis(Axis(0));
        ((dxhat * b - &s1) - &(xhat * &s2)) * inv_std / b
    }
}

/// `x + L2(drop(relu(L1(x))))`
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub l1: Linear<T>,
    relu: Relu<T>,
    drop: Dropout<T>,
    pub l2: Linear<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(name: &str, n: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(&format!("{name}.l1"), n, n, 1.0, rng),
            relu: Relu::default(),
            drop: Dropout::new(dropout),
            // small second layer: blocks start close to the identity
            l2: Linear::new(&format!("{name}.l2"), n, n, 0.1, rng),
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, ctx: &mut Ctx) -> Array2<T> {
        let h = self.l1.forward(x);
        let h = self.relu.forward(&h);
        let h = self.drop.forward(&h, ctx);
        x + &self.l2.forward(&h)
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let g = self.l2.backward(dy);
        let g = self.drop.backward(&g);
        let g = self.relu.backward(&g);
        dy + &self.l1.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
    BatchNorm(BatchNorm<T>),
    Res(ResBlock<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Array2<T>, ctx: &mut Ctx) -> Array2<T> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x, ctx),
            Layer::BatchNorm(l) => l.forward(x, ctx),
            Layer::Res(l) => l.forward(x, ctx),
        }
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        match self {
            Layer::Linear(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Res(l) => l.backward(dy),
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Linear(l) => {
                f(&mut l.w);
                f(&mut l.b);
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
                f(&mut l.running_mean);
                f(&mut l.running_var);
            }
            Layer::Res(l) => {
                f(&mut l.l1.w);
                f(&mut l.l1.b);
                f(&mut l.l2.w);
                f(&mut l.l2.b);
            }
            Layer::Relu(_) | Layer::Dropout(_) => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Linear layers through `sizes` with ReLU between them (not after the last).
    pub fn mlp(name: &str, sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            layers.push(Layer::Linear(Linear::new(&format!("{name}.{i}"), w[0], w[1], 1.0, rng)));
            if i + 2 < sizes.len() {
                layers.push(Layer::Relu(Relu::default()));
            }
        }
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    pub fn forward(&mut self, x: &Array2<T>, ctx: &mut Ctx) -> Array2<T> {
        let mut h = x.clone();
        for l in self.layers.iter_mut() {
            h = l.forward(&h, ctx);
        }
        h
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in self.layers.iter_mut() {
            l.visit(f);
        }
    }
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn l2_normalize<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let tiny = T::lit(1e-12);
    let norms = x.map_axis(Axis(1), |r| r.iter().map(|v| *v * *v).sum::<T>().sqrt().max(tiny));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

/// Backward of [`l2_normalize`] given its outputs.
pub fn l2_normalize_backward<T: Scalar>(y: &Array2<T>, norms: &Array1<T>, dy: &Array2<T>) -> Array2<T> {
    let dots = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    (dy - &(y * &dots)) / &norms.view().insert_axis(Axis(1))
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean Smooth-L1 (transition 1) and its gradient with respect to `pred`.
pub fn smooth_l1<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> (T, Array2<T>) {
    let n = T::of_usize(pred.len().max(1));
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        if d.abs() < T::one() {
            loss += half * d * d;
            *g = d / n;
        } else {
            loss += d.abs() - half;
            *g = d.signum() / n;
        }
    });
    (loss / n, grad)
}
