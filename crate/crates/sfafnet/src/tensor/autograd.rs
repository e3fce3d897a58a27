//! Reverse-mode differentiation driver: topological ordering of recorded
//! ops and the backward sweep, plus a finite-difference gradient checker.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Scalar, Tensor};

/// The recorded computation reachable from one root, in topological order
/// (inputs before consumers). Backward walks it once, in reverse.
pub struct Graph<T: Scalar> {
    ordered: Vec<Tensor<T>>,
}

impl<T: Scalar> Graph<T> {
    /// Collect every op output reachable from `root` via input edges.
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut ordered = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; recursion depth would track network depth.
        enum Step<T: Scalar> {
            Enter(Tensor<T>),
            Exit(Tensor<T>),
        }
        let mut stack = vec![Step::Enter(root.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    if let Some(node) = t.node() {
                        let inputs = node.inputs.clone();
                        stack.push(Step::Exit(t));
                        for inp in inputs {
                            if inp.node().is_some() && !visited.contains(&inp.id()) {
                                stack.push(Step::Enter(inp));
                            }
                        }
                    }
                }
                Step::Exit(t) => ordered.push(t),
            }
        }
        Graph { ordered }
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    /// Op names in topological order, for inspection.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ordered
            .iter()
            .filter_map(|t| t.node().map(|n| n.name))
            .collect()
    }

    /// Propagate gradients from the (already seeded) root back to leaves.
    fn run_backward(&self) {
        for t in self.ordered.iter().rev() {
            let node = match t.node() {
                Some(n) => n,
                None => continue,
            };
            let grad_out = t.grad_or_zeros();
            let out_data = t.data();
            let grads_in = (node.backward)(&node.inputs, &out_data, &grad_out);
            debug_assert_eq!(grads_in.len(), node.inputs.len());
            for (inp, g) in node.inputs.iter().zip(grads_in) {
                if let Some(g) = g {
                    if inp.connected() {
                        debug_assert_eq!(g.len(), inp.numel());
                        inp.accumulate_grad(&g);
                    }
                }
            }
        }
    }
}

/// Populate `grad` on every requires-grad leaf reachable from `loss`.
/// Repeated calls accumulate into existing leaf gradients.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    loss.seed_grad_ones();
    Graph::trace(loss).run_backward();
    Ok(())
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (input idx, coord, analytic, numeric)
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `f` against central finite differences
/// (step `h`) at the given inputs, sampling up to `max_coords` coordinates
/// per input. Only f64 gives finite differences enough headroom.
pub fn gradcheck(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad_or_zeros()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut set = HashSet::new();
            while set.len() < max_coords {
                set.insert(rng.gen_range(0..n));
            }
            let mut v: Vec<usize> = set.into_iter().collect();
            v.sort_unstable();
            v
        };
        for &ci in &coords {
            let orig = t.with_data(|d| d[ci]);
            t.update_data(|d| d[ci] = orig + h);
            let up = no_grad(|| f(inputs))?.item();
            t.update_data(|d| d[ci] = orig - h);
            let down = no_grad(|| f(inputs))?.item();
            t.update_data(|d| d[ci] = orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }
    Ok(report)
}
