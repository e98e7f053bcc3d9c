//! Named-parameter traversal shared by the optimizer, gradient buffers and
//! checkpoints. Gradient buffers reuse the parameter types themselves, so a
//! `PromptLearner` full of zeros is the gradient of a `PromptLearner`.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::tensor_io::{DType, TensorContainer};

pub trait ParamSet: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, mut a| a.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, a| s += a.iter().map(|x| x * x).sum::<f64>());
        s
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, a| ok &= a.iter().all(|x| x.is_finite()));
        ok
    }

    /// `self += other`, matched by traversal order.
    fn add_assign(&mut self, other: &Self) {
        let mut others = Vec::new();
        other.visit("", &mut |_, a| others.push(a.to_owned()));
        let mut it = others.into_iter();
        self.visit_mut("", &mut |_, mut a| {
            let o = it.next().expect("parameter layouts differ");
            a += &o;
        });
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut others = Vec::new();
        other.visit("", &mut |_, a| others.push(a.to_owned()));
        let mut it = others.into_iter();
        let mut worst = 0.0f64;
        self.visit("", &mut |_, a| {
            let o = it.next().expect("parameter layouts differ");
            for (x, y) in a.iter().zip(o.iter()) {
                worst = worst.max((x - y).abs());
            }
        });
        worst
    }

    fn write_into(&self, prefix: &str, container: &mut TensorContainer) {
        self.visit(prefix, &mut |name, a| {
            container.insert(name, DType::F64, a.to_owned());
        });
    }

    fn read_from(&mut self, prefix: &str, container: &TensorContainer) -> Result<()> {
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, mut a| {
            if failure.is_some() {
                return;
            }
            match container.get(&name) {
                Ok(t) if t.shape() == a.shape() => a.assign(t),
                Ok(t) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        a.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
