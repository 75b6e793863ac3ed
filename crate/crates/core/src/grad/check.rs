//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use super::{GradError, Graph, Tensor};

/// Per-parameter worst-case relative error between analytic and central
/// finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`, maximized over
/// entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares `backward` against central differences `(f(x+h) - f(x-h)) / 2h`
/// entrywise for every variable binding.
pub fn grad_check(
    graph: &Graph,
    bindings: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradError> {
    let analytic = graph.backward(bindings)?;
    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;

    for (name, grad) in &analytic {
        let base = bindings
            .get(name)
            .ok_or_else(|| GradError::UnboundVariable(name.clone()))?;
        let mut numeric = Tensor::zeros(base.shape());
        let mut perturbed = bindings.clone();
        for i in 0..base.len() {
            let orig = base.data()[i];
            let t = perturbed.get_mut(name).expect("binding present");
            t.data_mut()[i] = orig + h;
            let f_plus = graph.forward(&perturbed)?.scalar_value();
            let t = perturbed.get_mut(name).expect("binding present");
            t.data_mut()[i] = orig - h;
            let f_minus = graph.forward(&perturbed)?.scalar_value();
            let t = perturbed.get_mut(name).expect("binding present");
            t.data_mut()[i] = orig;
            numeric.data_mut()[i] = (f_plus - f_minus) / (2.0 * h);
        }
        let err = max_relative_error(grad, &numeric);
        max_rel_err = max_rel_err.max(err);
        per_param.insert(name.clone(), err);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Nonlinearity, ScaleFactor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = 0.5 * ||x||^2, df/dx = x
        let mut g = Graph::new();
        let x = g.var("x", &[4]);
        let sq = g.nonlin(x, Nonlinearity::Square);
        let s = g.sum(sq);
        g.scale(s, ScaleFactor::Uniform(0.5)).unwrap();
        let b = bind(&[("x", Tensor::vector(vec![1.0, -0.5, 2.0, 0.25]))]);
        let grads = g.backward(&b).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, -0.5, 2.0, 0.25]);
        let report = grad_check(&g, &b, 1e-5, 1e-7).unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_passes_at_1e4() {
        // loss = -sum(target * log softmax(x))
        let mut g = Graph::new();
        let x = g.var("x", &[2, 3]);
        let sm = g.softmax(x).unwrap();
        let lg = g.log(sm);
        let target = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        let weighted = g.scale(lg, ScaleFactor::PerElement(target)).unwrap();
        let s = g.sum(weighted);
        g.scale(s, ScaleFactor::Uniform(-1.0)).unwrap();
        let b = bind(&[(
            "x",
            Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap(),
        )]);
        let report = grad_check(&g, &b, 1e-5, 1e-4).unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let mut g = Graph::new();
        let x = g.var("x", &[3]);
        let sq = g.nonlin(x, Nonlinearity::Square);
        g.sum(sq);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let mut analytic = g.backward(&b).unwrap();
        let good = analytic["x"].clone();
        analytic.get_mut("x").unwrap().data_mut()[1] *= 2.0;
        let err_good = max_relative_error(&good, &good);
        let err_bad = max_relative_error(&analytic["x"], &good);
        assert!(err_good < 1e-12);
        assert!(err_bad > 1e-4, "corruption must be detected, err {err_bad}");
    }

    #[test]
    fn every_primitive_passes_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_t = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        };

        // One composite graph touching every differentiable primitive.
        let mut g = Graph::new();
        let a = g.var("a", &[3, 4]);
        let w = g.var("w", &[4, 3]);
        let bias = g.var("bias", &[3]);
        let mm = g.matmul(a, w).unwrap();
        let biased = g.add(mm, bias).unwrap();
        let sp = g.nonlin(biased, Nonlinearity::Softplus);
        let sm = g.softmax(sp).unwrap();
        let lg = g.log(sm);
        let sc = g.scale(lg, ScaleFactor::Uniform(0.5)).unwrap();
        let clamped = g.nonlin(sc, Nonlinearity::Clamp { lo: -4.0, hi: 4.0 });
        let picked = g.gather_rows(clamped, vec![0, 2]).unwrap();
        let m = g.var("m", &[2, 3]);
        let lv = g.var("lv", &[2, 3]);
        let eps = rand_t(&[2, 3]);
        let z = g.reparameterize(m, lv, eps).unwrap();
        let zsum = g.add(picked, z).unwrap();
        let e = g.exp(zsum);
        let lse = g.logsumexp(e).unwrap();
        let mn = g.mean(lse);
        let sq = g.nonlin(mn, Nonlinearity::Square);
        g.sum(sq);

        let b = bind(&[
            ("a", rand_t(&[3, 4])),
            ("w", rand_t(&[4, 3])),
            ("bias", rand_t(&[3])),
            ("m", rand_t(&[2, 3])),
            ("lv", rand_t(&[2, 3])),
        ]);
        let report = grad_check(&g, &b, 1e-5, 1e-4).unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);

        // Masked logsumexp checked separately over a vector input.
        let mut g2 = Graph::new();
        let x = g2.var("x", &[4]);
        let mask = Tensor::matrix(
            4,
            4,
            vec![
                1.0, 1.0, 1.0, 1.0, //
                0.0, 1.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let lse = g2.logsumexp_masked(x, mask).unwrap();
        g2.sum(lse);
        let b2 = bind(&[("x", rand_t(&[4]))]);
        let report2 = grad_check(&g2, &b2, 1e-5, 1e-4).unwrap();
        assert!(report2.passes(), "max rel err {}", report2.max_rel_err);
    }
}
