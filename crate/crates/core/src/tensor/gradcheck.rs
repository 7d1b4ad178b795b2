use std::collections::BTreeMap;
use std::fmt;

use super::{Graph, NodeId, OpKind, Rng};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Maximum accepted `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub tolerance: f64,
    /// Elements checked per parameter; larger tensors are subsampled.
    pub samples_per_parameter: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            samples_per_parameter: 100,
            seed: 0,
        }
    }
}

/// One checked parameter element.
#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Ops reading this parameter on the checked tape.
    pub consumers: Vec<OpKind>,
    pub elements: Vec<ElementCheck>,
    /// Elements passed over because `theta +- h` changes a branch
    /// (see [`Graph::branch_signature`]); a finite difference across a kink
    /// is no oracle for the derivative.
    pub skipped_kinks: usize,
}

impl ParamCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.elements.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(ParamCheck::max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked_elements(&self) -> usize {
        self.params.iter().map(|p| p.elements.len()).sum()
    }

    pub fn skipped_kinks(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }

    /// Maximum relative error grouped by the op kind consuming each parameter.
    pub fn max_error_by_op(&self) -> BTreeMap<OpKind, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            for &k in &p.consumers {
                let e = out.entry(k).or_insert(0.0f64);
                *e = e.max(p.max_rel_error());
            }
        }
        out
    }

    /// Elements above tolerance, worst first.
    pub fn worst_offenders(&self, limit: usize) -> Vec<(&str, &ElementCheck)> {
        let mut bad: Vec<(&str, &ElementCheck)> = self
            .params
            .iter()
            .flat_map(|p| p.elements.iter().map(move |e| (p.name.as_str(), e)))
            .filter(|(_, e)| e.rel_error > self.tolerance)
            .collect();
        bad.sort_by(|a, b| b.1.rel_error.total_cmp(&a.1.rel_error));
        bad.truncate(limit);
        bad
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck: {} ({} elements over {} parameters, {} skipped at kinks, max rel error {:.3e}, tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked_elements(),
            self.params.len(),
            self.skipped_kinks(),
            self.max_rel_error(),
            self.tolerance
        )?;
        for (kind, err) in self.max_error_by_op() {
            writeln!(f, "  {kind:<20} max rel error {err:.3e}")?;
        }
        for (name, e) in self.worst_offenders(10) {
            writeln!(
                f,
                "  offender {name}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.index, e.analytic, e.numeric, e.rel_error
            )?;
        }
        Ok(())
    }
}

/// Central finite-difference check of every parameter gradient.
///
/// `build` must rebuild the whole forward pass on a cleared graph and return
/// the scalar loss node. Any stochastic op must be deterministic across calls
/// (inference mode or frozen noise). Step size is `1e-5 * max(1, |theta|)`.
/// Up to `samples_per_parameter` elements are checked per parameter, drawn
/// in seeded random order; elements whose perturbation crosses a branch of a
/// piecewise op are replaced by the next candidate.
pub fn gradcheck<F>(graph: &mut Graph<f64>, mut build: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>) -> Result<NodeId>,
{
    graph.clear();
    let loss = build(graph)?;
    let signature = graph.branch_signature();
    let consumers = graph.parameter_consumers();
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = graph
        .parameters()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut rng = Rng::new(opts.seed);
    let mut params = Vec::with_capacity(analytic.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut candidates: Vec<usize> = (0..grad.len()).collect();
        if grad.len() > opts.samples_per_parameter {
            rng.shuffle(&mut candidates);
        }
        let mut elements = Vec::with_capacity(opts.samples_per_parameter.min(grad.len()));
        let mut skipped_kinks = 0;
        for idx in candidates {
            if elements.len() == opts.samples_per_parameter {
                break;
            }
            let theta = graph.parameters()[pi].value.data()[idx];
            let h = 1e-5 * theta.abs().max(1.0);
            let (plus, sig_plus) = eval_at(graph, &mut build, pi, idx, theta + h)?;
            let (minus, sig_minus) = eval_at(graph, &mut build, pi, idx, theta - h)?;
            graph.parameters_mut()[pi].value.data_mut()[idx] = theta;
            if sig_plus != signature || sig_minus != signature {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[idx];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            elements.push(ElementCheck {
                index: idx,
                analytic: a,
                numeric,
                rel_error,
            });
        }
        elements.sort_by_key(|e| e.index);
        params.push(ParamCheck {
            name: graph.parameters()[pi].name.clone(),
            consumers: consumers[pi].clone(),
            elements,
            skipped_kinks,
        });
    }
    graph.clear();
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        params,
    })
}

fn eval_at<F>(graph: &mut Graph<f64>, build: &mut F, param: usize, idx: usize, value: f64) -> Result<(f64, u64)>
where
    F: FnMut(&mut Graph<f64>) -> Result<NodeId>,
{
    graph.parameters_mut()[param].value.data_mut()[idx] = value;
    graph.clear();
    let loss = build(graph)?;
    Ok((graph.value(loss)?.data()[0], graph.branch_signature()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, Tensor};

    fn small_net(g: &mut Graph<f64>, rng: &mut Rng) -> Vec<crate::tensor::ParamId> {
        let mut ids = Vec::new();
        for (name, shape) in [
            ("w1", vec![3, 1, 3, 3]),
            ("b1", vec![3]),
            ("w2", vec![2, 3, 3, 3]),
            ("b2", vec![2]),
            ("w3", vec![2, 2, 1, 1]),
            ("b3", vec![2]),
        ] {
            ids.push(g.add_parameter(name, Tensor::from_fn(&shape, |_| 0.5 * rng.normal())));
        }
        ids
    }

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.normal());
        let w = g.add_parameter("w", Tensor::from_fn(&[3, 2, 3, 3], |_| rng.normal()));
        let b = g.add_parameter("b", Tensor::from_fn(&[3], |_| rng.normal()));
        let report = gradcheck(
            &mut g,
            |g| {
                let xi = g.input(x.clone());
                let (wn, bn) = (g.param(w), g.param(b));
                let y = g.conv2d(xi, wn, bn, 1)?;
                g.sum(y)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report}");
    }

    #[test]
    fn three_layer_net_passes_and_fault_fails() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(2);
        let ids = small_net(&mut g, &mut rng);
        let x = Tensor::from_fn(&[2, 1, 6, 6], |_| rng.normal());
        let build = |g: &mut Graph<f64>| {
            let mut h = g.input(x.clone());
            for (layer, stride) in [(0usize, 1usize), (2, 2)] {
                let (w, b) = (g.param(ids[layer]), g.param(ids[layer + 1]));
                h = g.conv2d(h, w, b, stride)?;
                h = g.activation(h, Activation::Elu)?;
            }
            let (w, b) = (g.param(ids[4]), g.param(ids[5]));
            h = g.conv2d(h, w, b, 1)?;
            let p = g.activation(h, Activation::Sigmoid)?;
            g.sum(p)
        };
        let report = gradcheck(&mut g, build, &GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");

        g.inject_backward_fault(Some(OpKind::Elu));
        let report = gradcheck(&mut g, build, &GradcheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert!(!report.worst_offenders(5).is_empty());
    }

    #[test]
    fn pooling_near_tie_is_skipped() {
        let mut g = Graph::<f64>::new();
        let a = g.add_parameter("a", Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0 + 1e-6, 0.2, 0.3]).unwrap());
        let build = |g: &mut Graph<f64>| {
            let x = g.param(a);
            let y = g.maxpool2d(x, 2)?;
            g.sum(y)
        };
        let report = gradcheck(&mut g, build, &GradcheckOptions::default()).unwrap();
        // both tied elements straddle the switch; the other two have gradient 0
        assert_eq!(report.skipped_kinks(), 2);
        assert_eq!(report.checked_elements(), 2);
        assert!(report.passed(), "{report}");
    }
}
