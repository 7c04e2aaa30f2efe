//! Finite-difference verification of every differentiable primitive and of
//! the end-to-end pretraining loss on a micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, Graph, Tensor, Var};
use crate::error::Result;
use crate::model::ModeModel;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const SEEDS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let verdict = if r.max_rel_error < self.tolerance { "PASS" } else { "FAIL" };
            s.push_str(&format!("{verdict} {:<20} max_rel_error={:.3e}\n", r.name, r.max_rel_error));
        }
        s.push_str(&format!(
            "{} of {} checks below {:.0e}\n",
            self.results.iter().filter(|r| r.max_rel_error < self.tolerance).count(),
            self.results.len(),
            self.tolerance
        ));
        s
    }
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()
}

/// Slices a flat `[n, 1]` input into consecutive tensors of the given shapes.
fn split(g: &mut Graph, x: Var, shapes: &[(usize, usize)]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(r, c) in shapes {
        let s = g.slice_rows(x, off, off + r * c)?;
        out.push(g.reshape(s, r, c)?);
        off += r * c;
    }
    Ok(out)
}

/// Contracts an output with fixed random weights so every entry matters.
fn weigh(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(Tensor::new(r, c, uniform(&mut rng, r * c))?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Primitive name, input shapes and forward builder.
fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1])),
        ("matmul_bt", vec![(3, 4), (5, 4)], |g, v| g.matmul_bt(v[0], v[1])),
        ("transpose", vec![(3, 4)], |g, v| Ok(g.transpose(v[0]))),
        ("add", vec![(3, 4), (3, 4)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], |g, v| g.mul(v[0], v[1])),
        ("div", vec![(3, 4), (3, 4)], |g, v| {
            let d = g.add_scalar(v[1], 3.0);
            g.div(v[0], d)
        }),
        ("add_row", vec![(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1])),
        ("mul_row", vec![(3, 4), (1, 4)], |g, v| g.mul_row(v[0], v[1])),
        ("scale", vec![(3, 4)], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![(3, 4)], |g, v| Ok(g.add_scalar(v[0], 0.4))),
        ("maximum", vec![(3, 4), (3, 4)], |g, v| g.maximum(v[0], v[1])),
        ("minimum", vec![(3, 4), (3, 4)], |g, v| g.minimum(v[0], v[1])),
        ("relu", vec![(3, 4)], |g, v| Ok(g.relu(v[0]))),
        ("gelu", vec![(3, 4)], |g, v| Ok(g.gelu(v[0]))),
        ("softplus", vec![(3, 4)], |g, v| Ok(g.softplus(v[0]))),
        ("softmax", vec![(3, 5)], |g, v| Ok(g.softmax(v[0]))),
        ("layer_norm", vec![(3, 6)], |g, v| Ok(g.layer_norm(v[0]))),
        ("concat_rows", vec![(2, 3), (4, 3)], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![(3, 2), (3, 4)], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("slice_rows", vec![(5, 3)], |g, v| g.slice_rows(v[0], 1, 4)),
        ("slice_cols", vec![(3, 5)], |g, v| g.slice_cols(v[0], 1, 4)),
        ("gather_rows", vec![(4, 3)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ("group_max", vec![(6, 3)], |g, v| g.group_max(v[0], 3)),
        ("mean_rows", vec![(4, 3)], |g, v| g.mean_rows(v[0])),
        ("sum", vec![(3, 4)], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![(3, 4)], |g, v| g.mean(v[0])),
        ("reshape", vec![(3, 4)], |g, v| g.reshape(v[0], 2, 6)),
        ("chamfer", vec![(8, 3)], |g, v| {
            let target = Tensor::new(8, 3, (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect())?;
            g.chamfer(v[0], &target, 4)
        }),
        ("cross_entropy", vec![(3, 4)], |g, v| g.cross_entropy(v[0], &[1, 3, 0])),
        ("attention", vec![(4, 6), (6, 6), (6, 6), (6, 6)], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let val = g.matmul(v[0], v[3])?;
            let s = g.matmul_bt(q, k)?;
            let s = g.scale(s, 1.0 / 6f64.sqrt());
            let a = g.softmax(s);
            g.matmul(a, val)
        }),
    ]
}

fn check_primitives(fault: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shapes, build) in primitive_cases() {
        let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let mut worst = 0.0_f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(n, 1, uniform(&mut rng, n))?;
            let shapes = shapes.clone();
            let err = grad_check_with(
                move |g, x| {
                    let parts = split(g, x, &shapes)?;
                    let y = build(g, &parts)?;
                    weigh(g, y, seed)
                },
                &x,
                STEP,
                fault,
            )?;
            worst = worst.max(err);
        }
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// Checks every primitive over [`SEEDS`] random inputs.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    check_primitives(None)
}

/// Central-difference check of `loss` with respect to every parameter scalar of `model`.
pub fn grad_check_params<F>(model: &ModeModel, loss: F, step: f64) -> Result<f64>
where
    F: Fn(&ModeModel, &mut Graph) -> Result<Var>,
{
    grad_check_params_with(model, loss, step, None)
}

fn grad_check_params_with<F>(model: &ModeModel, loss: F, step: f64, fault: Option<&'static str>) -> Result<f64>
where
    F: Fn(&ModeModel, &mut Graph) -> Result<Var>,
{
    let mut g = match fault {
        Some(op) => Graph::with_fault(op),
        None => Graph::new(),
    };
    let l = loss(model, &mut g)?;
    g.check_finite()?;
    let grads = g.backward(l)?;
    let analytic = g.param_grads(&grads, &model.params);
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for id in model.params.ids() {
        for j in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = orig + step;
            let mut gp = Graph::new();
            let lp = loss(&probe, &mut gp)?;
            let up = gp.value(lp).item();
            probe.params.get_mut(id).data_mut()[j] = orig - step;
            let mut gm = Graph::new();
            let lm = loss(&probe, &mut gm)?;
            let down = gm.value(lm).item();
            probe.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.0].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Full suite: every primitive plus the end-to-end joint loss on the micro model.
/// `fault` corrupts the named backward rule, for demonstrating failure detection.
pub fn run_suite(fault: Option<&'static str>) -> Result<GradCheckReport> {
    let mut results = check_primitives(fault)?;
    let (model, scene, cfg) = crate::pretrain::micro_setup(0)?;
    let err = grad_check_params_with(
        &model,
        |m, g| {
            let terms = crate::pretrain::forward_losses(m, g, std::slice::from_ref(&scene), &cfg, 0)?;
            Ok(terms.total)
        },
        STEP,
        fault,
    )?;
    results.push(CheckResult {
        name: "joint_loss".to_string(),
        max_rel_error: err,
    });
    Ok(GradCheckReport {
        results,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let res = primitive_suite().unwrap();
        for r in &res {
            assert!(r.max_rel_error < TOLERANCE, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn full_suite_passes() {
        let rep = run_suite(None).unwrap();
        assert!(rep.passed(), "{}", rep.render());
        assert_eq!(rep.results.last().unwrap().name, "joint_loss");
    }

    #[test]
    fn fault_is_detected() {
        let res = check_primitives(Some("gelu")).unwrap();
        let gelu = res.iter().find(|r| r.name == "gelu").unwrap();
        assert!(gelu.max_rel_error > TOLERANCE);
    }
}
