//! Central finite-difference verification of every differentiable graph
//! operation.
//!
//! Each case reduces its output to a scalar with a fixed random projection,
//! so every output element contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn scalarize(g: &mut Graph, y: Var, proj: &Option<Tensor>) -> Result<Var> {
    match proj {
        None => Ok(y),
        Some(r) => {
            let r = g.constant(r.clone());
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        }
    }
}

fn eval(inst: &Instance, inputs: &[Tensor], proj: &Option<Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = (inst.forward)(&mut g, &vars)?;
    let l = scalarize(&mut g, y, proj)?;
    Ok(g.value(l).item())
}

/// Largest relative error between analytic and central-difference
/// gradients over every input element.
pub fn check_instance(inst: &Instance, h: f64, proj_seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let y = (inst.forward)(&mut g, &vars)?;
    let proj = if g.value(y).numel() == 1 && g.shape(y).is_empty() {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
        let shape = g.shape(y).to_vec();
        let data = (0..g.value(y).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Some(Tensor::new(shape, data)?)
    };
    let l = scalarize(&mut g, y, &proj)?;
    g.backward(l)?;
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inst.inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inst.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inst.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(inst, &plus, &proj)? - eval(inst, &minus, &proj)?) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks at the origin are never within
/// one finite-difference step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Distinct values spaced at least 0.01 apart, in random order.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
    t
}

type Builder = fn(&mut ChaCha8Rng) -> Instance;

fn inst(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        forward: Box::new(f),
    }
}

/// Named instance generators, one per differentiable operation plus a
/// three-layer network and both training losses.
pub fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r| inst(vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, v| g.add(v[0], v[1]))),
        ("sub", |r| inst(vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, v| g.sub(v[0], v[1]))),
        ("mul", |r| inst(vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, v| g.mul(v[0], v[1]))),
        ("scale", |r| {
            let c = r.gen_range(-2.0..2.0);
            inst(vec![rand_tensor(r, &[4])], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("sum", |r| inst(vec![rand_tensor(r, &[3, 2])], |g, v| Ok(g.sum(v[0])))),
        ("mean", |r| inst(vec![rand_tensor(r, &[3, 2])], |g, v| Ok(g.mean(v[0])))),
        ("relu", |r| inst(vec![rand_away_from_zero(r, &[2, 5])], |g, v| Ok(g.relu(v[0])))),
        ("sigmoid", |r| inst(vec![rand_tensor(r, &[2, 5])], |g, v| Ok(g.sigmoid(v[0])))),
        ("tanh", |r| inst(vec![rand_tensor(r, &[2, 5])], |g, v| Ok(g.tanh(v[0])))),
        ("reshape", |r| inst(vec![rand_tensor(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]))),
        ("prelu", |r| {
            inst(vec![rand_away_from_zero(r, &[2, 3, 4]), rand_tensor(r, &[3])], |g, v| g.prelu(v[0], v[1], 1))
        }),
        ("conv1d", |r| {
            let k = r.gen_range(1..=3usize);
            let stride = r.gen_range(1..=2usize);
            let pad = r.gen_range(0..=1usize);
            inst(
                vec![rand_tensor(r, &[2, 2, 7]), rand_tensor(r, &[3, 2, k]), rand_tensor(r, &[3])],
                move |g, v| g.conv1d(v[0], v[1], v[2], stride, pad),
            )
        }),
        ("maxpool1d_ceil", |r| {
            let w = r.gen_range(2..=5usize);
            inst(vec![rand_distinct(r, &[2, 2, 9])], move |g, v| g.maxpool1d_ceil(v[0], w))
        }),
        ("batchnorm1d_train", |r| {
            inst(
                vec![rand_tensor(r, &[3, 2, 4]), positive(r, &[2]), rand_tensor(r, &[2])],
                |g, v| Ok(g.batchnorm1d_train(v[0], v[1], v[2], 1e-5)?.0),
            )
        }),
        ("batchnorm1d_eval", |r| {
            let mean = rand_tensor(r, &[2]).into_data();
            let var = positive(r, &[2]).into_data();
            inst(
                vec![rand_tensor(r, &[3, 2, 4]), positive(r, &[2]), rand_tensor(r, &[2])],
                move |g, v| g.batchnorm1d_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
            )
        }),
        ("linear", |r| {
            inst(
                vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4, 5]), rand_tensor(r, &[5])],
                |g, v| g.linear(v[0], v[1], Some(v[2])),
            )
        }),
        ("softmax", |r| {
            let axis = r.gen_range(0..3usize);
            inst(vec![rand_tensor(r, &[2, 3, 4])], move |g, v| g.softmax(v[0], axis))
        }),
        ("layer_norm", |r| {
            inst(
                vec![rand_tensor(r, &[3, 5]), positive(r, &[5]), rand_tensor(r, &[5])],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            )
        }),
        ("swap_last2", |r| inst(vec![rand_tensor(r, &[2, 3, 4])], |g, v| g.swap_last2(v[0]))),
        ("mean_axis", |r| {
            let axis = r.gen_range(0..3usize);
            inst(vec![rand_tensor(r, &[2, 3, 4])], move |g, v| g.mean_axis(v[0], axis))
        }),
        ("scale_channels", |r| {
            inst(vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 3])], |g, v| g.scale_channels(v[0], v[1]))
        }),
        ("attention", |r| {
            let heads = if r.gen_bool(0.5) { 1 } else { 2 };
            inst(
                vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 3, 4])],
                move |g, v| g.attention(v[0], v[1], v[2], heads),
            )
        }),
        // longer than one query tile of the kernel
        ("attention_tiled", |r| {
            inst(
                vec![rand_tensor(r, &[1, 70, 2]), rand_tensor(r, &[1, 70, 2]), rand_tensor(r, &[1, 70, 2])],
                |g, v| g.attention(v[0], v[1], v[2], 1),
            )
        }),
        ("weighted_time_sum", |r| {
            inst(vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3, 4])], |g, v| g.weighted_time_sum(v[0], v[1]))
        }),
        ("l2_normalize", |r| inst(vec![rand_away_from_zero(r, &[3, 4])], |g, v| g.l2_normalize(v[0]))),
        ("dropout", |r| {
            let mask: Vec<f64> = (0..8).map(|_| if r.gen_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            inst(vec![rand_tensor(r, &[2, 4])], move |g, v| g.dropout_with_mask(v[0], mask.clone()))
        }),
        ("supcon_loss", |r| {
            let labels: Vec<usize> = (0..8).map(|_| r.gen_range(0..3)).collect();
            inst(vec![rand_away_from_zero(r, &[8, 4])], move |g, v| {
                let z = g.l2_normalize(v[0])?;
                Ok(g.supcon_loss(z, &labels, 0.5)?.0)
            })
        }),
        ("cross_entropy", |r| {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            inst(vec![rand_tensor(r, &[4, 5])], move |g, v| g.cross_entropy(v[0], &labels))
        }),
        ("level_summed_cross_entropy", |r| {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let levels = (0..3).map(|_| rand_tensor(r, &[4, 5])).collect();
            inst(levels, move |g, v| {
                let mut total = g.cross_entropy(v[0], &labels)?;
                for &o in &v[1..] {
                    let ce = g.cross_entropy(o, &labels)?;
                    total = g.add(total, ce)?;
                }
                Ok(total)
            })
        }),
        ("three_layer_network", |r| {
            let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..3)).collect();
            inst(
                vec![
                    rand_tensor(r, &[3, 4]),
                    rand_tensor(r, &[4, 5]),
                    rand_tensor(r, &[5]),
                    rand_tensor(r, &[5, 5]),
                    rand_tensor(r, &[5]),
                    rand_tensor(r, &[5, 3]),
                    rand_tensor(r, &[3]),
                ],
                move |g, v| {
                    let h1 = g.linear(v[0], v[1], Some(v[2]))?;
                    let h1 = g.tanh(h1);
                    let h2 = g.linear(h1, v[3], Some(v[4]))?;
                    let h2 = g.sigmoid(h2);
                    let o = g.linear(h2, v[5], Some(v[6]))?;
                    g.cross_entropy(o, &labels)
                },
            )
        }),
    ]
}

/// Runs `instances` random instances of every case and reports the worst
/// relative error per operation against `tolerance`.
pub fn run_suite(seed: u64, instances: usize, h: f64, tolerance: f64) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (ci, (name, build)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let mut worst = 0.0f64;
        for i in 0..instances {
            let inst = build(&mut rng);
            let e = check_instance(&inst, h, seed ^ ((ci as u64) << 32) ^ i as u64)?;
            worst = worst.max(e);
        }
        out.push(OpReport {
            op: name.to_string(),
            instances,
            max_relative_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(out)
}
