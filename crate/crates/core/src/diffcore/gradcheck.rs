use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DiffError, Graph, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub evaluated: usize,
}

/// Denominator floor for the relative error so that near-zero gradients are
/// judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Checks `d build(inputs) / d inputs` against central differences. `build`
/// must produce a scalar and be a pure function of the leaf values (a
/// training graph is recreated with the same `graph_seed` on every call, so
/// dropout masks are fixed).
pub fn check_fn<B>(inputs: &[Tensor<f64>], eps: f64, graph_seed: Option<u64>, mut build: B) -> Result<GradCheck, DiffError>
where
    B: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    if eps <= 0.0 {
        return Err(DiffError::Contract(format!("eps must be positive, got {eps}")));
    }
    let new_graph = || match graph_seed {
        Some(s) => Graph::training(s),
        None => Graph::new(),
    };
    let mut eval = |vals: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>), DiffError> {
        let mut g = new_graph();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect::<Result<_, _>>()?;
        let out = build(&mut g, &vars)?;
        let loss = g.value(out).data()[0];
        if !want_grads {
            return Ok((loss, Vec::new()));
        }
        let grads = g.backward(out)?;
        let gs = vars.iter().zip(vals).map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        Ok((loss, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut vals: Vec<Tensor<f64>> = inputs.to_vec();
    let mut result = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, evaluated: 0 };
    for i in 0..vals.len() {
        for j in 0..vals[i].len() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&vals, false)?;
            vals[i].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&vals, false)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            result.max_rel_err = result.max_rel_err.max(rel_err(a, numeric));
            result.max_abs_err = result.max_abs_err.max((a - numeric).abs());
            result.evaluated += 1;
        }
    }
    Ok(result)
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn dims_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, shape.iter().product()),
    }
}

/// Central-difference check of a single named op on random inputs. The op's
/// output is contracted against a fixed random tensor so every output
/// element contributes to the scalar.
pub fn finite_diff_check(op_name: &str, shapes: &[Vec<usize>], eps: f64, seed: u64) -> Result<f64, DiffError> {
    if !super::op_set().contains(&op_name) {
        return Err(DiffError::UnknownOp(op_name.to_string()));
    }
    let first = shapes.first().cloned().ok_or_else(|| DiffError::Contract(format!("{op_name}: at least one input shape required")))?;
    let (r, c) = dims_of(&first);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inputs: Vec<Tensor<f64>> = match op_name {
        "log" => vec![positive_tensor(&mut rng, &first)],
        "matmul" => {
            let second = shapes.get(1).cloned().unwrap_or_else(|| vec![c, r]);
            vec![random_tensor(&mut rng, &first), random_tensor(&mut rng, &second)]
        }
        "add" | "sub" | "mul" => {
            let second = shapes.get(1).cloned().unwrap_or_else(|| first.clone());
            vec![random_tensor(&mut rng, &first), random_tensor(&mut rng, &second)]
        }
        "concat" => shapes.iter().map(|s| random_tensor(&mut rng, s)).collect(),
        "layer_norm" => vec![random_tensor(&mut rng, &first), positive_tensor(&mut rng, &[1, c]), random_tensor(&mut rng, &[1, c])],
        "attention" => (0..3).map(|_| random_tensor(&mut rng, &first)).collect(),
        _ => vec![random_tensor(&mut rng, &first)],
    };
    if op_name == "l1_norm" {
        // keep inputs away from the kink at zero
        for v in inputs[0].data_mut() {
            if v.abs() < 10.0 * eps {
                *v += 0.1;
            }
        }
    }

    let mut weights: Option<Tensor<f64>> = None;
    let name = op_name.to_string();
    let graph_seed = matches!(op_name, "dropout" | "attention").then_some(seed ^ 0x5eed);
    let mut wrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let check = check_fn(&inputs, eps, graph_seed, |g, v| {
        let out = match name.as_str() {
            "matmul" => g.matmul(v[0], v[1])?,
            "add" => g.add(v[0], v[1])?,
            "sub" => g.sub(v[0], v[1])?,
            "mul" => g.mul(v[0], v[1])?,
            "scale" => g.scale(v[0], -1.75)?,
            "sum" => g.sum(v[0])?,
            "mean" => {
                let a = g.mean(v[0], 0)?;
                let b = g.mean(v[0], 1)?;
                let sa = g.sum(a)?;
                let sb = g.mean(b, 0)?;
                g.mul(sa, sb)?
            }
            "mean_groups" => {
                let group = if r % 2 == 0 { 2 } else { 1 };
                g.mean_groups(v[0], group)?
            }
            "concat" => {
                let axis = if v.iter().all(|&x| g.value(x).cols() == g.value(v[0]).cols()) { 0 } else { 1 };
                g.concat(v, axis)?
            }
            "slice" => {
                let start = c / 3;
                let len = (c - start).max(1).min(c - start);
                g.slice(v[0], 1, start, len)?
            }
            "transpose" => g.transpose(v[0])?,
            "softmax" => g.softmax(v[0])?,
            "log_softmax" => g.log_softmax(v[0])?,
            "log" => g.log(v[0])?,
            "exp" => g.exp(v[0])?,
            "layer_norm" => g.layer_norm(v[0], v[1], v[2])?,
            "gelu" => g.gelu(v[0])?,
            "attention" => {
                let groups = if r % 2 == 0 { 2 } else { 1 };
                let heads = if c % 2 == 0 { 2 } else { 1 };
                g.attention(v[0], v[1], v[2], groups, heads, 0.1)?
            }
            "gather_rows" => {
                let index: Vec<usize> = (0..r + 2).map(|i| (i * 7 + 3) % r).collect();
                g.gather_rows(v[0], &index)?
            }
            "l1_norm" => g.l1_norm(v[0])?,
            "dropout" => g.dropout(v[0], 0.3)?,
            other => return Err(DiffError::UnknownOp(other.to_string())),
        };
        let shape = g.value(out).shape().to_vec();
        let w = weights.get_or_insert_with(|| random_tensor(&mut wrng, &shape)).clone();
        let wv = g.input(w)?;
        let prod = g.mul(out, wv)?;
        g.sum(prod)
    })?;
    Ok(check.max_rel_err)
}

/// Op name and input shapes covering every op, including each broadcast form.
pub fn standard_cases() -> Vec<(&'static str, Vec<Vec<usize>>)> {
    vec![
        ("matmul", vec![vec![4, 5], vec![5, 3]]),
        ("add", vec![vec![3, 4], vec![1, 4]]),
        ("add", vec![vec![3, 4], vec![3, 1]]),
        ("sub", vec![vec![3, 4], vec![1, 1]]),
        ("mul", vec![vec![3, 4], vec![3, 4]]),
        ("mul", vec![vec![3, 4], vec![1, 4]]),
        ("scale", vec![vec![2, 3]]),
        ("sum", vec![vec![2, 3]]),
        ("mean", vec![vec![3, 5]]),
        ("mean_groups", vec![vec![6, 3]]),
        ("concat", vec![vec![2, 3], vec![4, 3]]),
        ("concat", vec![vec![2, 3], vec![2, 1]]),
        ("slice", vec![vec![3, 6]]),
        ("transpose", vec![vec![3, 4]]),
        ("softmax", vec![vec![8]]),
        ("log_softmax", vec![vec![3, 5]]),
        ("log", vec![vec![2, 4]]),
        ("exp", vec![vec![2, 4]]),
        ("layer_norm", vec![vec![16]]),
        ("layer_norm", vec![vec![3, 8]]),
        ("gelu", vec![vec![3, 4]]),
        ("attention", vec![vec![6, 4]]),
        ("gather_rows", vec![vec![4, 3]]),
        ("l1_norm", vec![vec![3, 3]]),
        ("dropout", vec![vec![4, 4]]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        for (op, shapes) in standard_cases() {
            let err = finite_diff_check(op, &shapes, 1e-5, 7).unwrap();
            assert!(err < 1e-4, "{op} {shapes:?}: max rel err {err}");
        }
    }

    #[test]
    fn every_declared_op_has_a_case() {
        let covered: Vec<&str> = standard_cases().iter().map(|c| c.0).collect();
        for op in super::super::op_set() {
            assert!(covered.contains(op), "{op} has no gradcheck case");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(finite_diff_check("conv2d", &[vec![2, 2]], 1e-5, 0), Err(DiffError::UnknownOp(_))));
    }

    #[test]
    fn check_is_deterministic_per_seed() {
        let a = finite_diff_check("softmax", &[vec![8]], 1e-5, 3).unwrap();
        let b = finite_diff_check("softmax", &[vec![8]], 1e-5, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
