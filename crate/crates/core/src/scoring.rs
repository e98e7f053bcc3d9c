//! Bottleneck adapter on the global image feature and the image-level score.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locmap::{softmax_pair, AnomalyMap};
use crate::params::{join, ParamSet};
use crate::prompts::{outer, TextFeatureBank};
use crate::seeding::{uniform_matrix, uniform_vec};

pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// `A = SiLU(W2 ReLU(W1 G + b1) + b2)` with a half-width hidden layer and no
/// residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values of [`Adapter::forward_cached`].
#[derive(Debug, Clone)]
pub struct AdapterForward {
    pub output: Array1<f64>,
    input: Array1<f64>,
    hidden: Array1<f64>,
    pre_out: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Adapter {
    /// Uniform weights and biases in `+-1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Result<Self> {
        if width < 2 {
            return Err(Error::Config(format!("adapter width {width} too small")));
        }
        let hidden = width / 2;
        let b_in = (width as f64).sqrt().recip();
        let b_hid = (hidden as f64).sqrt().recip();
        Ok(Self {
            w1: uniform_matrix(rng, hidden, width, b_in),
            b1: uniform_vec(rng, hidden, b_in),
            w2: uniform_matrix(rng, width, hidden, b_hid),
            b2: uniform_vec(rng, width, b_hid),
        })
    }

    pub fn zeros(width: usize) -> Self {
        let hidden = width / 2;
        Self {
            w1: Array2::zeros((hidden, width)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((width, hidden)),
            b2: Array1::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.dim().1
    }

    pub fn forward(&self, g: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(g)?.output)
    }

    pub fn forward_cached(&self, g: ArrayView1<'_, f64>) -> Result<AdapterForward> {
        if g.len() != self.width() {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.width(),
                g.len()
            )));
        }
        let hidden = (self.w1.dot(&g) + &self.b1).mapv(|v| v.max(0.0));
        let pre_out = self.w2.dot(&hidden) + &self.b2;
        Ok(AdapterForward {
            output: pre_out.mapv(silu),
            input: g.to_owned(),
            hidden,
            pre_out,
        })
    }

    pub fn backward(&self, fwd: &AdapterForward, grad_out: &Array1<f64>) -> Adapter {
        let g_pre = grad_out * &fwd.pre_out.mapv(silu_grad);
        let g_hidden = self.w2.t().dot(&g_pre);
        let g_h_pre = &g_hidden * &fwd.hidden.mapv(|h| if h > 0.0 { 1.0 } else { 0.0 });
        Adapter {
            w1: outer(&g_h_pre, &fwd.input.view()),
            b1: g_h_pre.clone(),
            w2: outer(&g_pre, &fwd.hidden.view()),
            b2: g_pre,
        }
    }
}

impl ParamSet for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        f(join(prefix, "w1"), self.w1.view().into_dyn());
        f(join(prefix, "b1"), self.b1.view().into_dyn());
        f(join(prefix, "w2"), self.w2.view().into_dyn());
        f(join(prefix, "b2"), self.b2.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(join(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(join(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(join(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(join(prefix, "b2"), self.b2.view_mut().into_dyn());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub s_global: f64,
    pub text_term: f64,
    pub map_term: f64,
}

/// Abnormal probability of the two-class softmax over
/// `(tau A . F_n, tau A . F_a)`.
pub fn text_term(a: ArrayView1<'_, f64>, text: &TextFeatureBank, temperature: f64) -> Result<f64> {
    if a.len() != text.width() || text.abnormal.len() != text.width() {
        return Err(Error::Shape(format!(
            "adapted feature width {} != text width {}",
            a.len(),
            text.width()
        )));
    }
    let (_, abnormal) = softmax_pair(temperature * a.dot(&text.normal), temperature * a.dot(&text.abnormal));
    Ok(abnormal)
}

/// Gradients of [`text_term`] with respect to `A`, `F_n` and `F_a`, scaled
/// by `grad`.
pub fn text_term_backward(
    a: ArrayView1<'_, f64>,
    text: &TextFeatureBank,
    temperature: f64,
    grad: f64,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let (_, t) = softmax_pair(temperature * a.dot(&text.normal), temperature * a.dot(&text.abnormal));
    let d = grad * temperature * t * (1.0 - t);
    let g_a = (&text.abnormal - &text.normal) * d;
    let g_fa = a.to_owned() * d;
    let g_fn = -&g_fa;
    (g_a, g_fn, g_fa)
}

/// `text_term + max(M)`, in `[0, 2]`.
pub fn global_score(
    a: ArrayView1<'_, f64>,
    text: &TextFeatureBank,
    map: &AnomalyMap,
    temperature: f64,
) -> Result<ImageScore> {
    let text_term = text_term(a, text, temperature)?;
    let map_term = if map.values.is_empty() { 0.0 } else { map.max() };
    Ok(ImageScore {
        s_global: text_term + map_term,
        text_term,
        map_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locmap::MapKind;
    use crate::seeding::rng_for;
    use ndarray::array;

    #[test]
    fn zero_adapter_outputs_zero() {
        let a = Adapter::zeros(8);
        let out = a.forward(Array1::from_elem(8, 3.0).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_slices_give_silu_of_truncation() {
        let mut a = Adapter::zeros(4);
        a.w1 = Array2::from_shape_fn((2, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        a.w2 = Array2::from_shape_fn((4, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let g = array![0.5, 2.0, 1.0, 3.0];
        let out = a.forward(g.view()).unwrap();
        let expect = [silu(0.5), silu(2.0), 0.0, 0.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_gradient_matches_differences() {
        let mut rng = rng_for(1, "adapter-grad");
        let a = Adapter::init(&mut rng, 6).unwrap();
        let g = uniform_vec(&mut rng, 6, 1.0);
        let up = uniform_vec(&mut rng, 6, 1.0);
        let fwd = a.forward_cached(g.view()).unwrap();
        let grads = a.backward(&fwd, &up);
        let h = 1e-6;
        let loss = |p: &Adapter| p.forward(g.view()).unwrap().dot(&up);
        for (i, j) in [(0, 0), (1, 3), (2, 5)] {
            let mut p = a.clone();
            p.w1[[i, j]] += h;
            let mut m = a.clone();
            m.w1[[i, j]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.w1[[i, j]]).abs() <= 1e-6 + 1e-3 * fd.abs());
        }
    }

    #[test]
    fn text_term_examples() {
        let t = TextFeatureBank {
            normal: array![1.0, 0.0],
            abnormal: array![1.0, 0.0],
        };
        assert_eq!(text_term(array![4.0, -2.0].view(), &t, 100.0).unwrap(), 0.5);
        let t = TextFeatureBank {
            normal: array![1.0, 0.0],
            abnormal: array![0.0, 1.0],
        };
        let a = array![0.0, 3f64.ln()];
        assert!((text_term(a.view(), &t, 1.0).unwrap() - 0.75).abs() < 1e-12);
        let zero = AnomalyMap::new(MapKind::Final, Array2::zeros((3, 3)));
        let s = global_score(array![0.0, 0.0].view(), &t, &zero, 100.0).unwrap();
        assert_eq!(s.s_global, 0.5);
    }

    #[test]
    fn text_term_backward_matches_differences() {
        let t = TextFeatureBank {
            normal: array![0.6, 0.8, 0.0],
            abnormal: array![0.0, 0.6, 0.8],
        };
        let a = array![0.01, -0.02, 0.015];
        let (ga, _, gfa) = text_term_backward(a.view(), &t, 100.0, 1.0);
        let h = 1e-7;
        for i in 0..3 {
            let mut p = a.clone();
            p[i] += h;
            let mut m = a.clone();
            m[i] -= h;
            let fd = (text_term(p.view(), &t, 100.0).unwrap() - text_term(m.view(), &t, 100.0).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-6);
            let mut tp = t.clone();
            tp.abnormal[i] += h;
            let mut tm = t.clone();
            tm.abnormal[i] -= h;
            let fd = (text_term(a.view(), &tp, 100.0).unwrap() - text_term(a.view(), &tm, 100.0).unwrap()) / (2.0 * h);
            assert!((fd - gfa[i]).abs() < 1e-6);
        }
    }
}
