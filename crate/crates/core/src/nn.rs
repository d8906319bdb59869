//! Parameterized layers. Each layer owns ids into a [`ParamStore`] and tags the
//! nodes it records with its name.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{AutogradError, ShapeError};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::seed::rng_for;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type R<'t, T> = Result<Var<'t, T>, AutogradError>;

/// He-uniform weights: U(-b, b) with b = sqrt(6 / fan_in). Values are drawn in
/// `f32` and widened, so f32 and f64 builds from one seed hold equal weights.
pub fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let bound = (6.0f32 / fan_in as f32).sqrt();
    let mut rng = rng_for(seed, &format!("init/{name}"), 0);
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound) as f64))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    /// Stride 1, padding (k-1)/2; `k` must be odd.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        assert!(k % 2 == 1, "conv kernel must be odd, got {k}");
        let wname = format!("{name}.weight");
        let w = he_uniform(&[c_out, c_in, k, k], c_in * k * k, seed, &wname);
        let weight = store.insert(&wname, ParamKind::Weight, w);
        let bias = bias.then(|| store.insert(&format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out])));
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            k,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + if self.bias.is_some() { self.c_out } else { 0 }
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> R<'t, T> {
        let _l = tape.label(&self.name);
        let w = store.var(tape, self.weight)?;
        let y = x.conv2d(&w)?;
        match self.bias {
            Some(b) => y.add_bias(&store.var(tape, b)?, 1),
            None => Ok(y),
        }
    }
}

/// Kernel-2 stride-2 transposed convolution (doubles H and W).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2d {
    /// Each output element sees exactly `c_in` inputs, which is the fan-in used.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let w = he_uniform(&[c_in, c_out, 2, 2], c_in, seed, &wname);
        let weight = store.insert(&wname, ParamKind::Weight, w);
        let bias = store.insert(&format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out]));
        ConvTranspose2d {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out * 4 + self.c_out
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> R<'t, T> {
        let _l = tape.label(&self.name);
        let w = store.var(tape, self.weight)?;
        x.conv_transpose2x2(&w)?.add_bias(&store.var(tape, self.bias)?, 1)
    }
}

/// `y = x·Wᵀ + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let w = he_uniform(&[c_out, c_in], c_in, seed, &wname);
        let weight = store.insert(&wname, ParamKind::Weight, w);
        let bias = store.insert(&format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out]));
        Linear {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> R<'t, T> {
        let _l = tape.label(&self.name);
        let shape = x.shape();
        let last = *shape.last().ok_or(ShapeError::Empty)?;
        if last != self.c_in {
            return Err(ShapeError::Channels {
                expected: self.c_in,
                found: last,
            }
            .into());
        }
        let wt = store.var(tape, self.weight)?.transpose(0, 1)?;
        let y = x.matmul(&wt)?;
        y.add_bias(&store.var(tape, self.bias)?, shape.len() - 1)
    }
}

/// Per-position standardization over one channel axis, then affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub axis: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, axis: usize) -> Self {
        let gamma = store.insert(&format!("{name}.gamma"), ParamKind::Gamma, Tensor::ones(&[c]));
        let beta = store.insert(&format!("{name}.beta"), ParamKind::Beta, Tensor::zeros(&[c]));
        LayerNorm {
            name: name.to_string(),
            gamma,
            beta,
            c,
            axis,
            eps: NORM_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> R<'t, T> {
        let _l = tape.label(&self.name);
        let g = store.var(tape, self.gamma)?;
        let b = store.var(tape, self.beta)?;
        x.layer_norm(&g, &b, self.axis, T::from_f64(self.eps))
    }
}

/// Per-channel normalization over every axis except `axis`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
    pub axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, axis: usize) -> Self {
        let gamma = store.insert(&format!("{name}.gamma"), ParamKind::Gamma, Tensor::ones(&[c]));
        let beta = store.insert(&format!("{name}.beta"), ParamKind::Beta, Tensor::zeros(&[c]));
        let running_mean = store.insert(&format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[c]));
        let running_var = store.insert(&format!("{name}.running_var"), ParamKind::RunningVar, Tensor::ones(&[c]));
        BatchNorm {
            name: name.to_string(),
            gamma,
            beta,
            running_mean,
            running_var,
            c,
            axis,
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (`r <- (1-m)·r + m·batch`, unbiased variance).
    /// Eval mode uses the running estimates only.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> R<'t, T> {
        let _l = tape.label(&self.name);
        let g = store.var(tape, self.gamma)?;
        let b = store.var(tape, self.beta)?;
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Eval => x.batch_norm_eval(
                &g,
                &b,
                self.axis,
                eps,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
            ),
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&g, &b, self.axis, eps)?;
                let shape = x.shape();
                let n = shape.iter().product::<usize>() / shape[self.axis];
                let unbias = if n > 1 {
                    T::from_usize(n) / T::from_usize(n - 1)
                } else {
                    T::one()
                };
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                for (r, &v) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * v;
                }
                for (r, &v) in store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * v * unbias;
                }
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scaling_identity_and_padding_cases() {
        let mut store = ParamStore::<f32>::new();
        let c1 = Conv2d::new(&mut store, "c1", 1, 1, 1, true, 0);
        store.get_mut(c1.weight).value = tensor(&[1, 1, 1, 1], &[2.0]);
        let tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        assert_eq!(c1.forward(&tape, &store, x).unwrap().value().data(), &[2.0; 4]);

        let c3 = Conv2d::new(&mut store, "c3", 1, 1, 3, true, 0);
        let mut ident = vec![0.0; 9];
        ident[4] = 1.0;
        store.get_mut(c3.weight).value = tensor(&[1, 1, 3, 3], &ident);
        let xin = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let x = tape.input(xin.clone()).unwrap();
        assert_eq!(*c3.forward(&tape, &store, x).unwrap().value(), xin);

        store.get_mut(c3.weight).value = Tensor::ones(&[1, 1, 3, 3]);
        let x = tape.input(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = c3.forward(&tape, &store, x).unwrap().value();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);

        let bad = tape.input(Tensor::ones(&[1, 2, 3, 3])).unwrap();
        assert!(matches!(
            c3.forward(&tape, &store, bad),
            Err(AutogradError::Shape(ShapeError::Channels { expected: 1, found: 2 }))
        ));
    }

    #[test]
    fn param_counts_and_init_rules() {
        let mut store = ParamStore::<f32>::new();
        let c = Conv2d::new(&mut store, "stem", 3, 8, 3, true, 7);
        assert_eq!(c.param_count(), 224);
        assert_eq!(store.count_learnable(), 224);
        assert!(store.value(c.bias.unwrap()).data().iter().all(|&b| b == 0.0));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(store.value(c.weight).data().iter().all(|w| w.abs() <= bound));
        let one = Conv2d::new(&mut ParamStore::<f32>::new(), "x", 8, 16, 1, true, 0);
        assert_eq!(one.param_count(), 144);
        let l = Linear::new(&mut store, "fc", 8, 8, 7);
        assert_eq!(l.param_count(), 72);

        let mut again = ParamStore::<f32>::new();
        let c2 = Conv2d::new(&mut again, "stem", 3, 8, 3, true, 7);
        assert_eq!(again.value(c2.weight), store.value(c.weight));
        let mut other = ParamStore::<f32>::new();
        let c3 = Conv2d::new(&mut other, "stem", 3, 8, 3, true, 8);
        assert_ne!(other.value(c3.weight), store.value(c.weight));
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "fc", 2, 2, 0);
        store.get_mut(l.weight).value = tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let tape = Tape::new();
        let x = tape.input(tensor(&[1, 1, 2], &[1.0, 2.0])).unwrap();
        assert_eq!(l.forward(&tape, &store, x).unwrap().value().data(), &[1.0, 2.0]);
        store.get_mut(l.weight).value = tensor(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(l.forward(&tape, &store, x).unwrap().value().data(), &[2.0, 1.0]);
        let wide = tape.input(Tensor::ones(&[1, 1, 3])).unwrap();
        assert!(l.forward(&tape, &store, wide).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 2, 1);
        let tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let y = ln.forward(&tape, &store, x).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);

        store.get_mut(ln.beta).value = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let c = tape.input(Tensor::full(&[3, 2], 7.0)).unwrap();
        let y = ln.forward(&tape, &store, c).unwrap().value();
        for r in 0..3 {
            assert_eq!(y.data()[2 * r], 0.25);
            assert_eq!(y.data()[2 * r + 1], -0.5);
        }
    }

    #[test]
    fn batch_norm_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, 2);
        let tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 4, 1], |i| 7.0 + 2.0 * i as f64)).unwrap();
        // channel mean is 10
        bn.forward(&tape, &mut store, x, Mode::Train).unwrap();
        assert!((store.value(bn.running_mean).item() - 1.0).abs() < 1e-12);

        let mut fresh = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut fresh, "bn", 3, 2);
        let xin = Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 1.3).cos());
        let x = tape.input(xin.clone()).unwrap();
        let y = bn.forward(&tape, &mut fresh, x, Mode::Eval).unwrap().value();
        assert!(y.max_abs_diff(&xin) < 1e-4);
        assert_eq!(fresh.value(bn.running_mean).data(), &[0.0; 3]);
    }

    #[test]
    fn layer_gradients_pass_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, true, 1);
        let w = store.value(conv.weight).clone();
        let x = Tensor::from_fn(&[1, 2, 4, 3], |i| (i as f64 * 0.61).sin());
        let b = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
        let r = check_gradients(
            &[x, w, b],
            |_, v| v[0].conv2d(&v[1])?.add_bias(&v[2], 1),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
