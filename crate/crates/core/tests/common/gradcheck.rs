use pcdc::error::Result;
use pcdc::numerics::{Graph, Tensor, Var};
use rand::Rng;

pub const ABS_TOL: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

pub type Apply = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized instance of an op: its inputs and how to apply it.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub apply: Apply,
}

pub type Maker = fn(&mut dyn rand::RngCore) -> Case;

fn dim(rng: &mut dyn rand::RngCore, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks at 0 are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut dyn rand::RngCore) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn any_shape(rng: &mut dyn rand::RngCore) -> Vec<usize> {
    let rank = dim(rng, 1, 4);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn unary(inputs: Vec<Tensor>, f: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case {
        inputs,
        apply: Box::new(move |g, v| f(g, v[0])),
    }
}

fn binary(inputs: Vec<Tensor>, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case {
        inputs,
        apply: Box::new(move |g, v| f(g, v[0], v[1])),
    }
}

fn random_mask(len: usize, k: usize, rng: &mut dyn rand::RngCore) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
    for r in 0..len / k {
        let j = rng.random_range(0..k);
        m[r * k + j] = true;
    }
    m
}

pub fn ops() -> Vec<(&'static str, Maker)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            binary(
                vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)],
                Graph::matmul,
            )
        }),
        ("add", |rng| {
            let s = any_shape(rng);
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)],
                Graph::add,
            )
        }),
        ("add_broadcast", |rng| {
            let s = any_shape(rng);
            let cut = rng.random_range(0..s.len());
            let b = s[cut..].to_vec();
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&b, -1.0, 1.0, rng)],
                Graph::add_broadcast,
            )
        }),
        ("add_channel", |rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3)];
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s[..2], -1.0, 1.0, rng)],
                Graph::add_channel,
            )
        }),
        ("mul_channel", |rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3)];
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s[..2], -1.5, 1.5, rng)],
                Graph::mul_channel,
            )
        }),
        ("sub", |rng| {
            let s = any_shape(rng);
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)],
                Graph::sub,
            )
        }),
        ("mul", |rng| {
            let s = any_shape(rng);
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)],
                Graph::mul,
            )
        }),
        ("scale", |rng| {
            let c = rng.random_range(-3.0..3.0);
            let s = any_shape(rng);
            Case {
                inputs: vec![uniform(&s, -1.0, 1.0, rng)],
                apply: Box::new(move |g, v| g.scale(v[0], c)),
            }
        }),
        ("add_scalar", |rng| {
            let c = rng.random_range(-3.0..3.0);
            let s = any_shape(rng);
            Case {
                inputs: vec![uniform(&s, -1.0, 1.0, rng)],
                apply: Box::new(move |g, v| g.add_scalar(v[0], c)),
            }
        }),
        ("relu", |rng| {
            unary(vec![away_from_zero(&any_shape(rng), rng)], Graph::relu)
        }),
        ("silu", |rng| {
            unary(vec![uniform(&any_shape(rng), -3.0, 3.0, rng)], Graph::silu)
        }),
        ("sigmoid", |rng| {
            unary(vec![uniform(&any_shape(rng), -3.0, 3.0, rng)], Graph::sigmoid)
        }),
        ("exp", |rng| {
            unary(vec![uniform(&any_shape(rng), -2.0, 2.0, rng)], Graph::exp)
        }),
        ("log", |rng| {
            unary(vec![uniform(&any_shape(rng), 0.2, 3.0, rng)], Graph::log)
        }),
        ("softmax", |rng| {
            unary(vec![uniform(&any_shape(rng), -2.0, 2.0, rng)], Graph::softmax)
        }),
        ("masked_softmax", |rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let mask = random_mask(s[0] * s[1], s[1], rng);
            Case {
                inputs: vec![uniform(&s, -2.0, 2.0, rng)],
                apply: Box::new(move |g, v| g.masked_softmax(v[0], &mask)),
            }
        }),
        ("masked_log_softmax", |rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let mask = random_mask(s[0] * s[1], s[1], rng);
            Case {
                inputs: vec![uniform(&s, -2.0, 2.0, rng)],
                apply: Box::new(move |g, v| g.masked_log_softmax(v[0], &mask)),
            }
        }),
        ("sum", |rng| {
            unary(vec![uniform(&any_shape(rng), -1.0, 1.0, rng)], Graph::sum)
        }),
        ("mean", |rng| {
            unary(vec![uniform(&any_shape(rng), -1.0, 1.0, rng)], Graph::mean)
        }),
        ("gather", |rng| {
            let s = [dim(rng, 1, 5), dim(rng, 1, 5)];
            let idx: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
            Case {
                inputs: vec![uniform(&s, -1.0, 1.0, rng)],
                apply: Box::new(move |g, v| g.gather(v[0], &idx)),
            }
        }),
        ("conv2d", |rng| {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = [1, 3][rng.random_range(0..2)];
            let stride = dim(rng, 1, 2);
            let padding = rng.random_range(0..=k / 2);
            let side = dim(rng, k.max(2), 6);
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![
                uniform(&[n, c, side, side], -1.0, 1.0, rng),
                uniform(&[o, c, k, k], -1.0, 1.0, rng),
            ];
            if bias {
                inputs.push(uniform(&[o], -1.0, 1.0, rng));
            }
            Case {
                inputs,
                apply: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)),
            }
        }),
        ("conv_transpose2d", |rng| {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (k, stride, padding) = [(2, 2, 0), (4, 2, 1), (3, 1, 1), (3, 2, 0)][rng.random_range(0..4)];
            let side = dim(rng, 1, 4);
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![
                uniform(&[n, c, side, side], -1.0, 1.0, rng),
                uniform(&[c, o, k, k], -1.0, 1.0, rng),
            ];
            if bias {
                inputs.push(uniform(&[o], -1.0, 1.0, rng));
            }
            Case {
                inputs,
                apply: Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], v.get(2).copied(), stride, padding)),
            }
        }),
        ("concat", |rng| {
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let parts = dim(rng, 1, 3);
            let inputs = (0..parts)
                .map(|_| uniform(&[n, dim(rng, 1, 3), h, w], -1.0, 1.0, rng))
                .collect();
            Case {
                inputs,
                apply: Box::new(|g, v| g.concat(v)),
            }
        }),
        ("upsample_nearest", |rng| {
            let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let f = dim(rng, 1, 3);
            Case {
                inputs: vec![uniform(&s, -1.0, 1.0, rng)],
                apply: Box::new(move |g, v| g.upsample_nearest(v[0], f)),
            }
        }),
        ("mse", |rng| {
            let s = any_shape(rng);
            binary(
                vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)],
                Graph::mse,
            )
        }),
        ("clamp", |rng| {
            let s = any_shape(rng);
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| match rng.random_range(0..3) {
                    0 => -0.5 - rng.random_range(0.05..0.5),
                    1 => rng.random_range(-0.45..0.45),
                    _ => 0.5 + rng.random_range(0.05..0.5),
                })
                .collect();
            Case {
                inputs: vec![Tensor::new(&s, data).unwrap()],
                apply: Box::new(|g, v| g.clamp(v[0], -0.5, 0.5)),
            }
        }),
        ("minimum", |rng| {
            let s = any_shape(rng);
            let a = uniform(&s, -1.0, 1.0, rng);
            let gap = away_from_zero(&s, rng);
            let b = Tensor::new(&s, a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).unwrap();
            binary(vec![a, b], Graph::minimum)
        }),
        ("reshape", |rng| {
            let s = any_shape(rng);
            let n: usize = s.iter().product();
            Case {
                inputs: vec![uniform(&s, -1.0, 1.0, rng)],
                apply: Box::new(move |g, v| g.reshape(v[0], &[n])),
            }
        }),
    ]
}

fn loss_of(case: &Case, inputs: &[Tensor], weights: &Tensor) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.apply)(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Largest violation `(abs err, reference)` of a central-difference check; `Ok(None)` when all pass.
pub fn check(case: &Case, rng: &mut dyn rand::RngCore) -> Result<Option<(f64, f64)>> {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.apply)(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = uniform(&shape, -1.0, 1.0, rng);
    let (g, vars, loss) = loss_of(case, &case.inputs, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst = None;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        for j in 0..case.inputs[i].len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                inputs[i].data_mut()[j] += delta;
                let (g, _, loss) = loss_of(case, &inputs, &weights)?;
                Ok(g.value(loss).item())
            };
            let numeric = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
            let err = (analytic[j] - numeric).abs();
            if err > ABS_TOL && err > REL_TOL * numeric.abs() {
                worst = Some((err, numeric));
            }
        }
    }
    Ok(worst)
}
