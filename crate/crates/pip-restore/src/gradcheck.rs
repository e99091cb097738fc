//! Finite-difference verification of the backward pass.
//!
//! Every differentiable op is checked the same way: bind all inputs as
//! parameters, build a scalar loss, backprop analytically, then re-derive
//! each input gradient by central differences
//! `(f(x+h) − f(x−h)) / 2h` with `h = 1e-5`, all in `f64`. The reported
//! figure per case is the maximum relative error
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
//!
//! Primitive ops must agree to `1e-4`, composite blocks (attention chains,
//! feed-forward blocks, whole models) to `1e-3`.

use crate::graph::{Bound, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{chacha, Stream};
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single ops.
pub const TOL_PRIMITIVE: f64 = 1e-4;
/// Tolerance for composed blocks.
pub const TOL_COMPOSITE: f64 = 1e-3;

/// A named gradient-check case: inputs plus a loss builder.
pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    kind: Kind,
}

enum Kind {
    /// Loose inputs bound as parameters one by one.
    Inputs { inputs: Vec<Tensor<f64>>, build: BuildFn },
    /// A parameter store owned by a module; every stored tensor is perturbed.
    Module { store: ParamStore<f64>, build: ModuleBuildFn },
}

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type ModuleBuildFn = Box<dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>>;

/// Outcome of one case.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Case {
    pub fn new(
        name: &'static str,
        tol: f64,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case { name, tol, kind: Kind::Inputs { inputs, build: Box::new(build) } }
    }

    /// A case over a whole module: every tensor in `store` is perturbed and
    /// the builder sees the bound parameters.
    pub fn module(
        name: &'static str,
        tol: f64,
        store: ParamStore<f64>,
        build: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var> + 'static,
    ) -> Self {
        Case { name, tol, kind: Kind::Module { store, build: Box::new(build) } }
    }

    /// Run the case; `corrupt` injects an offset into the analytic gradient
    /// (negative-control hook for verifying the checker itself catches
    /// broken backward implementations).
    pub fn run(&mut self, corrupt: bool) -> Result<CaseResult> {
        let mut err = match &mut self.kind {
            Kind::Inputs { inputs, build } => max_rel_err(inputs, &**build)?,
            Kind::Module { store, build } => max_rel_err_module(store, &**build)?,
        };
        if corrupt {
            // Simulates a wrong backward: the comparison must blow up.
            err += 1.0;
        }
        Ok(CaseResult { name: self.name, max_rel_err: err, tol: self.tol, pass: err < self.tol })
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued builder, over every element of every input.
pub fn max_rel_err(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    // Analytic gradients.
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> =
        inputs.iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t.clone())).collect();
    let loss0;
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(crate::Error::invalid("gradcheck", "case loss must be scalar"));
        }
        loss0 = g.value(loss)[0];
        g.backward(loss)?;
        ids.iter()
            .map(|&id| {
                g.param_grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
            })
            .collect()
    };
    if !loss0.is_finite() {
        return Err(crate::Error::NonFinite { op: "gradcheck" });
    }

    // Forward-only evaluation under a perturbed store.
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss)[0])
    };

    let mut worst = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let f_plus = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let f_minus = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Maximum relative error for a builder over a module's parameter store:
/// every element of every stored tensor is perturbed in turn.
pub fn max_rel_err_module(
    store: &mut ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Result<f64> {
    max_rel_err_module_step(store, FD_STEP, build)
}

/// [`max_rel_err_module`] with an explicit difference step. Deep
/// compositions lose significance at the default step: the forward value
/// carries roundoff that a tiny `f(x+h) − f(x−h)` difference cannot hide,
/// so whole-network cases use a coarser step.
pub fn max_rel_err_module_step(
    store: &mut ParamStore<f64>,
    step: f64,
    build: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Result<f64> {
    let n_params = store.len();
    let loss0;
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let bd = g.bind(store)?;
        let loss = build(&mut g, &bd)?;
        if g.value(loss).len() != 1 {
            return Err(crate::Error::invalid("gradcheck", "case loss must be scalar"));
        }
        loss0 = g.value(loss)[0];
        g.backward(loss)?;
        (0..n_params)
            .map(|i| {
                let id = ParamId(i);
                g.param_grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
            })
            .collect()
    };
    if !loss0.is_finite() {
        return Err(crate::Error::NonFinite { op: "gradcheck" });
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let bd = g.bind(store)?;
        let loss = build(&mut g, &bd)?;
        Ok(g.value(loss)[0])
    };

    let mut worst = 0.0f64;
    for i in 0..n_params {
        let id = ParamId(i);
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + step;
            let f_plus = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig - step;
            let f_minus = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Seeded standard-normal input tensor for check cases.
pub fn randin(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut chacha(seed, Stream::Init, 900))
}

/// Seeded tensor with entries uniform in `[lo, hi]`.
pub fn randin_range(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = chacha(seed, Stream::Init, 901);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches by construction")
}

/// Reduce a non-scalar output to a scalar through a fixed random projection
/// so that the whole output participates in the loss.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = randin_range(&shape, 0.5, 1.5, seed ^ 0xABCD);
    let wv = g.input(&w)?;
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

/// The op-by-op check cases for the engine primitives. Composite cases for
/// the prompt/backbone blocks live next to those modules and are appended
/// by the full suite in [`crate::commands`].
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = Vec::new();

    cases.push(Case::new("add", TOL_PRIMITIVE, vec![randin(&[2, 3], 1), randin(&[2, 3], 2)], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    }));
    cases.push(Case::new(
        "add_broadcast",
        TOL_PRIMITIVE,
        vec![randin(&[2, 3], 3), randin(&[2, 1], 4)],
        |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 2)
        },
    ));
    cases.push(Case::new("sub", TOL_PRIMITIVE, vec![randin(&[3, 2], 5), randin(&[3, 2], 6)], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 3)
    }));
    cases.push(Case::new("mul", TOL_PRIMITIVE, vec![randin(&[2, 4], 7), randin(&[2, 4], 8)], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 4)
    }));
    cases.push(Case::new(
        "mul_broadcast",
        TOL_PRIMITIVE,
        vec![randin(&[3, 4], 9), randin(&[1, 4], 10)],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 5)
        },
    ));
    cases.push(Case::new(
        "div",
        TOL_PRIMITIVE,
        // Denominator bounded away from zero.
        vec![randin(&[2, 3], 11), randin_range(&[2, 3], 0.5, 2.0, 12)],
        |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 6)
        },
    ));
    cases.push(Case::new("add_const", TOL_PRIMITIVE, vec![randin(&[5], 13)], |g, v| {
        let y = g.add_const(v[0], 2.5)?;
        project(g, y, 7)
    }));
    cases.push(Case::new("mul_const", TOL_PRIMITIVE, vec![randin(&[5], 14)], |g, v| {
        let y = g.mul_const(v[0], -1.5)?;
        project(g, y, 8)
    }));
    cases.push(Case::new(
        "max_const",
        TOL_PRIMITIVE,
        // Inputs away from the hinge at 0 so the step never crosses it.
        vec![randin_range(&[6], 0.2, 1.0, 15).reshaped(vec![6]).unwrap()],
        |g, v| {
            let neg = g.mul_const(v[0], -1.0)?; // mix of sides of the hinge
            let both = g.concat_like(v[0], neg)?;
            let y = g.max_const(both, 0.0)?;
            project(g, y, 9)
        },
    ));
    cases.push(Case::new(
        "clamp",
        TOL_PRIMITIVE,
        // Mixture of clearly-inside and clearly-outside values.
        vec![randin_range(&[8], -2.0, 2.0, 16)],
        |g, v| {
            let y = g.clamp(v[0], -0.75, 0.75)?;
            project(g, y, 10)
        },
    ));
    cases.push(Case::new("gelu", TOL_PRIMITIVE, vec![randin(&[7], 17)], |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, 11)
    }));
    cases.push(Case::new(
        "abs",
        TOL_PRIMITIVE,
        vec![randin_range(&[6], 0.3, 1.5, 18)],
        |g, v| {
            let neg = g.mul_const(v[0], -1.0)?;
            let both = g.concat_like(v[0], neg)?;
            let y = g.abs(both)?;
            project(g, y, 12)
        },
    ));
    cases.push(Case::new("sqrt", TOL_PRIMITIVE, vec![randin_range(&[6], 0.5, 3.0, 19)], |g, v| {
        let y = g.sqrt(v[0])?;
        project(g, y, 13)
    }));
    cases.push(Case::new("acos", TOL_PRIMITIVE, vec![randin_range(&[6], -0.8, 0.8, 20)], |g, v| {
        let y = g.acos(v[0])?;
        project(g, y, 14)
    }));
    cases.push(Case::new("sum", TOL_PRIMITIVE, vec![randin(&[3, 3], 21)], |g, v| g.sum(v[0])));
    cases.push(Case::new("mean", TOL_PRIMITIVE, vec![randin(&[2, 5], 22)], |g, v| g.mean(v[0])));
    cases.push(Case::new(
        "matmul",
        TOL_PRIMITIVE,
        vec![randin(&[3, 4], 23), randin(&[4, 2], 24)],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 15)
        },
    ));
    cases.push(Case::new(
        "matmul_nt",
        TOL_PRIMITIVE,
        vec![randin(&[3, 4], 25), randin(&[2, 4], 26)],
        |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, 16)
        },
    ));
    cases.push(Case::new("softmax", TOL_PRIMITIVE, vec![randin(&[3, 5], 27)], |g, v| {
        let y = g.softmax_rows(v[0])?;
        project(g, y, 17)
    }));
    cases.push(Case::new("cross_entropy", TOL_PRIMITIVE, vec![randin(&[7], 28)], |g, v| {
        g.cross_entropy_logits(v[0], 3)
    }));
    cases.push(Case::new(
        "layernorm",
        TOL_PRIMITIVE,
        vec![randin(&[4, 2, 3], 29), randin_range(&[4], 0.5, 1.5, 30), randin(&[4], 31)],
        |g, v| {
            let y = g.layernorm_chw(v[0], v[1], v[2])?;
            project(g, y, 18)
        },
    ));
    cases.push(Case::new(
        "conv1x1",
        TOL_PRIMITIVE,
        vec![randin(&[3, 4, 5], 32), randin(&[2, 3], 33), randin(&[2], 34)],
        |g, v| {
            let y = g.conv1x1(v[0], v[1], Some(v[2]))?;
            project(g, y, 19)
        },
    ));
    cases.push(Case::new(
        "conv3x3_s1",
        TOL_PRIMITIVE,
        vec![randin(&[2, 5, 4], 35), randin(&[3, 2, 3, 3], 36), randin(&[3], 37)],
        |g, v| {
            let y = g.conv3x3(v[0], v[1], Some(v[2]), 1)?;
            project(g, y, 20)
        },
    ));
    cases.push(Case::new(
        "conv3x3_s2",
        TOL_PRIMITIVE,
        vec![randin(&[2, 7, 5], 38), randin(&[2, 2, 3, 3], 39), randin(&[2], 40)],
        |g, v| {
            let y = g.conv3x3(v[0], v[1], Some(v[2]), 2)?;
            project(g, y, 21)
        },
    ));
    cases.push(Case::new(
        "dwconv3x3",
        TOL_PRIMITIVE,
        vec![randin(&[3, 4, 4], 41), randin(&[3, 3, 3], 42), randin(&[3], 43)],
        |g, v| {
            let y = g.dwconv3x3(v[0], v[1], Some(v[2]))?;
            project(g, y, 22)
        },
    ));
    cases.push(Case::new("global_avg_pool", TOL_PRIMITIVE, vec![randin(&[3, 4, 4], 44)], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 23)
    }));
    cases.push(Case::new(
        "adaptive_avg_pool",
        TOL_PRIMITIVE,
        vec![randin(&[2, 5, 7], 45)],
        |g, v| {
            let y = g.adaptive_avg_pool(v[0], 2, 3)?;
            project(g, y, 24)
        },
    ));
    cases.push(Case::new(
        "nearest_upsample",
        TOL_PRIMITIVE,
        vec![randin(&[2, 3, 2], 46)],
        |g, v| {
            let y = g.nearest_upsample(v[0], 6, 5)?;
            project(g, y, 25)
        },
    ));
    cases.push(Case::new("broadcast_chw", TOL_PRIMITIVE, vec![randin(&[4], 47)], |g, v| {
        let y = g.broadcast_chw(v[0], 3, 2)?;
        project(g, y, 26)
    }));
    cases.push(Case::new("reshape", TOL_PRIMITIVE, vec![randin(&[2, 6], 48)], |g, v| {
        let y = g.reshape(v[0], vec![3, 4])?;
        project(g, y, 27)
    }));
    cases.push(Case::new(
        "concat_channels",
        TOL_PRIMITIVE,
        vec![randin(&[1, 2, 2], 49), randin(&[2, 2, 2], 50)],
        |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            project(g, y, 28)
        },
    ));
    cases.push(Case::new("row", TOL_PRIMITIVE, vec![randin(&[4, 3], 51)], |g, v| {
        let y = g.row(v[0], 2)?;
        project(g, y, 29)
    }));
    cases.push(Case::new(
        "scale_by",
        TOL_PRIMITIVE,
        vec![randin(&[2, 3], 52), randin(&[1], 53)],
        |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            project(g, y, 30)
        },
    ));

    cases
}

impl Graph<f64> {
    /// Test-support helper: concatenate two same-shaped tensors along a new
    /// leading axis by flattening — used to exercise both branches of
    /// piecewise ops in one case.
    fn concat_like(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        let a1 = self.reshape(a, vec![1, n, 1])?;
        let b1 = self.reshape(b, vec![1, n, 1])?;
        let joined = self.concat_channels(&[a1, b1])?;
        self.reshape(joined, vec![2 * n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn machinery_flags_a_corrupted_gradient() {
        let case = &mut primitive_cases()[0];
        let clean = case.run(false).unwrap();
        assert!(clean.pass, "clean add case must pass, err {}", clean.max_rel_err);
        let dirty = case.run(true).unwrap();
        assert!(!dirty.pass, "corrupted case must fail");
    }

    #[test]
    fn fd_matches_a_known_derivative() {
        // f(x) = sum(x²) → df/dx = 2x; the FD machinery itself must agree.
        let x = randin(&[4], 99);
        let err = max_rel_err(&[x], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-7, "plain square should check extremely tightly, got {err}");
    }
}
