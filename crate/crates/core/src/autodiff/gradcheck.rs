//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamId;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// A component is treated as sitting on a kink (and skipped) when its one-sided
/// difference quotients disagree by more than this fraction of their magnitude.
const KINK_TOL: f64 = 1e-3;
const KINK_FLOOR: f64 = 1e-7;
/// Multiple of the central-difference rounding noise `ε·max(1, |f|)/h` below
/// which both gradients are treated as zero.
const NOISE_MULTIPLE: f64 = 1e4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Components whose analytic and numeric values both sit below the
    /// rounding-noise level of the difference quotient.
    pub vanishing: usize,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-8_f64.max(analytic.abs() + numeric.abs())
}

fn evaluate<F>(store: &ParamStore<f64>, train: bool, f: &F) -> Result<f64>
where
    F: for<'s> Fn(&mut Graph<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(train);
    let out = f(&mut g, store)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Divergence(format!("grad_check: f evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of `f` with respect to every trainable,
/// unfrozen parameter of `store` against central differences.
///
/// Returns the maximum over components of `|a − n| / max(1e-8, |a| + |n|)`.
/// Components at a non-differentiable point (one-sided quotients disagree)
/// are excluded and counted in `skipped`. Components where both gradients
/// are below the rounding noise of the quotient are counted in `vanishing`.
pub fn grad_check<F>(store: &ParamStore<f64>, train: bool, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(train);
        let out = f(&mut g, store)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::Divergence("grad_check: non-finite output".into()));
        }
        let grads = g.backward(out)?;
        store
            .trainable()
            .into_iter()
            .map(|id| {
                let n = store.get(id).len();
                (id, grads.param(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
            })
            .collect::<Vec<_>>()
    };
    let f0 = evaluate(store, train, &f)?;
    let noise = NOISE_MULTIPLE * f64::EPSILON * f0.abs().max(1.0) / eps;

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        for (j, &a) in grad.iter().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let fp = evaluate(&work, train, &f)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let fm = evaluate(&work, train, &f)?;
            work.get_mut(id).data_mut()[j] = orig;

            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            if (fwd - bwd).abs() > KINK_TOL * (fwd.abs() + bwd.abs()) + KINK_FLOOR {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            if a.abs().max(numeric.abs()) < noise {
                report.vanishing += 1;
                continue;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

/// Relative-error tolerance every primitive must meet in 64-bit mode.
pub const PRIMITIVE_TOL: f64 = 1e-4;

type Builder = for<'s> fn(&mut Graph<'s, f64>, &'s ParamStore<f64>, &[ParamId]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: &'static [[usize; 2]],
    train: bool,
    build: Builder,
}

fn vars<'s>(g: &mut Graph<'s, f64>, s: &'s ParamStore<f64>, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| g.param(s, id)).collect()
}

const CASES: &[Case] = &[
    Case {
        name: "matmul",
        inputs: &[[3, 4], [4, 2]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.matmul(v[0], v[1])
        },
    },
    Case {
        name: "matmul_transposed",
        inputs: &[[4, 3], [2, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.matmul_t(v[0], v[1], true, true)
        },
    },
    Case {
        name: "add",
        inputs: &[[3, 2], [3, 2]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.add(v[0], v[1])
        },
    },
    Case {
        name: "sub",
        inputs: &[[3, 2], [3, 2]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.sub(v[0], v[1])
        },
    },
    Case {
        name: "add_bias",
        inputs: &[[3, 4], [1, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.add_bias(v[0], v[1])
        },
    },
    Case {
        name: "hadamard",
        inputs: &[[3, 3], [3, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.hadamard(v[0], v[1])
        },
    },
    Case {
        name: "scale",
        inputs: &[[2, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            Ok(g.scale(v[0], -1.7))
        },
    },
    Case {
        name: "relu",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            Ok(g.relu(v[0]))
        },
    },
    Case {
        name: "sigmoid",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            Ok(g.sigmoid(v[0]))
        },
    },
    Case {
        name: "softmax_axis1",
        inputs: &[[3, 5]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.softmax(v[0], 1)
        },
    },
    Case {
        name: "softmax_axis0",
        inputs: &[[3, 5]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.softmax(v[0], 0)
        },
    },
    Case {
        name: "transpose",
        inputs: &[[2, 5]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            Ok(g.transpose(v[0]))
        },
    },
    Case {
        name: "concat_axis0",
        inputs: &[[2, 3], [4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.concat(&v, 0)
        },
    },
    Case {
        name: "concat_axis1",
        inputs: &[[3, 2], [3, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.concat(&v, 1)
        },
    },
    Case {
        name: "sum_axis0",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.sum(v[0], 0)
        },
    },
    Case {
        name: "sum_axis1",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.sum(v[0], 1)
        },
    },
    Case {
        name: "mean_axis0",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.mean(v[0], 0)
        },
    },
    Case {
        name: "mean_axis1",
        inputs: &[[4, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.mean(v[0], 1)
        },
    },
    Case {
        name: "batch_norm_train",
        inputs: &[[5, 3], [1, 3], [1, 3]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            let (m, var) = buffers(s);
            g.batch_norm(v[0], v[1], v[2], s, m, var)
        },
    },
    Case {
        name: "batch_norm_eval",
        inputs: &[[5, 3], [1, 3], [1, 3]],
        train: false,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            let (m, var) = buffers(s);
            g.batch_norm(v[0], v[1], v[2], s, m, var)
        },
    },
    Case {
        name: "layer_norm",
        inputs: &[[3, 5], [1, 5], [1, 5]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.layer_norm(v[0], v[1], v[2])
        },
    },
    Case {
        name: "dropout",
        inputs: &[[4, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
            g.dropout(v[0], 0.3, &mut rng)
        },
    },
    Case {
        name: "gather_rows",
        inputs: &[[3, 2], [2, 2]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.gather_rows(&v, &[(0, 2), (1, 0), (0, 2), (1, 1), (0, 0)])
        },
    },
    Case {
        name: "reshape",
        inputs: &[[2, 6]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.reshape(v[0], 4, 3)
        },
    },
    Case {
        name: "slice_cols",
        inputs: &[[3, 6]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.slice_cols(v[0], 1, 4)
        },
    },
    Case {
        name: "row_normalize",
        inputs: &[[3, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            Ok(g.row_normalize(v[0]))
        },
    },
    Case {
        name: "attention",
        inputs: &[[6, 4], [6, 4], [6, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            g.attention(v[0], v[1], v[2], 2, 3)
        },
    },
    Case {
        name: "masked_xent",
        inputs: &[[3, 4]],
        train: true,
        build: |g, s, ids| {
            let v = vars(g, s, ids);
            let mask = [
                true, false, true, true, //
                true, true, true, true, //
                false, true, true, false,
            ];
            g.masked_xent(v[0], &[2, 0, 1], Some(&mask))
        },
    },
];

fn buffers(s: &ParamStore<f64>) -> (ParamId, ParamId) {
    (
        s.id("running_mean").expect("buffer"),
        s.id("running_var").expect("buffer"),
    )
}

/// Names of the primitives covered by [`check_primitive`].
pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Gradient-checks one primitive on random inputs drawn from `seed`.
///
/// The primitive's output is contracted with a fixed random weight matrix
/// so that no output component has a structurally zero gradient.
pub fn check_primitive(name: &str, seed: u64) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let case = CASES
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown primitive `{name}`")))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut ids = Vec::new();
    for (i, &[r, c]) in case.inputs.iter().enumerate() {
        let t = Tensor::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5));
        ids.push(store.add(&format!("in{i}"), t)?);
    }
    let f0 = case.inputs[0][1];
    store.add_buffer(
        "running_mean",
        Tensor::from_fn(1, f0, |_, _| rng.random_range(-0.5..0.5)),
    )?;
    store.add_buffer("running_var", Tensor::from_fn(1, f0, |_, _| rng.random_range(0.5..2.0)))?;

    // Output shape, then a projection weight of that shape.
    let shape = {
        let mut g = Graph::new(case.train);
        let out = (case.build)(&mut g, &store, &ids)?;
        g.shape(out)
    };
    let weight = Tensor::from_fn(shape[0], shape[1], |_, _| rng.random_range(-1.0..1.0));
    let build = case.build;
    grad_check(&store, case.train, DEFAULT_EPS, move |g, s| {
        let ids: Vec<ParamId> = s.ids().filter(|&id| !s.is_frozen(id)).collect();
        let out = build(g, s, &ids)?;
        let w = g.constant(weight.clone());
        let p = g.hadamard(out, w)?;
        Ok(g.sum_all(p))
    })
}
