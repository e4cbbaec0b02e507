//! One gradient-check case per kernel. Each case reduces the kernel output
//! with a fixed random weighting so every output coordinate contributes a
//! generic, non-cancelling amount to the scalar under test.

use std::sync::Arc;

use rand::Rng as _;

use super::{Array, Axis, Graph, Var};
use crate::error::Result;
use crate::seed::{self, Rng};

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;
type Sample = Box<dyn Fn(&mut Rng) -> Vec<Array> + Send + Sync>;

pub struct KernelCase {
    pub name: &'static str,
    pub sample: Sample,
    pub build: Build,
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).expect("shape")
}

/// Values in `lo..hi` with random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let mut a = uniform(rng, shape, lo, hi);
    for v in a.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    a
}

/// `sum(w * y)` with `w` drawn from a stream keyed by the case and shape.
fn weighted(g: &mut Graph, y: Var, key: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = seed::rng(key, &[shape.iter().product::<usize>() as u64]);
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn case(
    name: &'static str,
    sample: impl Fn(&mut Rng) -> Vec<Array> + Send + Sync + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> KernelCase {
    KernelCase {
        name,
        sample: Box::new(sample),
        build: Box::new(build),
    }
}

pub fn kernel_cases() -> Vec<KernelCase> {
    let mask = Array::vector(vec![0.0, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY]);
    let data = {
        let mut rng = seed::rng(77, &[]);
        Arc::new(uniform(&mut rng, &[7, 3], -1.0, 1.0))
    };
    let weights = crate::gmm::fixed_weights(2).expect("weights");
    vec![
        case(
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y, 1)
            },
        ),
        case(
            "transpose",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |g, v| {
                let y = g.transpose(v[0])?;
                weighted(g, y, 2)
            },
        ),
        case(
            "add",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, 3)
            },
        ),
        case(
            "sub",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, 4)
            },
        ),
        case(
            "mul",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, 5)
            },
        ),
        case(
            "add_row",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, v| {
                let y = g.add_row(v[0], v[1])?;
                weighted(g, y, 6)
            },
        ),
        case(
            "broadcast_rows",
            |r| vec![uniform(r, &[4], -1.0, 1.0)],
            |g, v| {
                let y = g.broadcast_rows(v[0], 3)?;
                weighted(g, y, 7)
            },
        ),
        case(
            "scale",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted(g, y, 8)
            },
        ),
        case(
            "add_scalar",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.add_scalar(v[0], 0.3)?;
                weighted(g, y, 9)
            },
        ),
        case(
            "exp",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.exp(v[0])?;
                weighted(g, y, 10)
            },
        ),
        case(
            "ln",
            |r| vec![uniform(r, &[2, 3], 0.5, 2.0)],
            |g, v| {
                let y = g.ln(v[0])?;
                weighted(g, y, 11)
            },
        ),
        case(
            "sqrt",
            |r| vec![uniform(r, &[2, 3], 0.5, 2.0)],
            |g, v| {
                let y = g.sqrt(v[0])?;
                weighted(g, y, 12)
            },
        ),
        case(
            "softmax_masked",
            |r| vec![uniform(r, &[3, 5], -2.0, 2.0)],
            move |g, v| {
                let y = g.softmax_masked(v[0], Some(&mask))?;
                weighted(g, y, 13)
            },
        ),
        case(
            "rms_norm",
            |r| vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5], 0.5, 1.5)],
            |g, v| {
                let y = g.rms_norm(v[0], v[1])?;
                weighted(g, y, 14)
            },
        ),
        case(
            "gelu",
            |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            |g, v| {
                let y = g.gelu(v[0])?;
                weighted(g, y, 15)
            },
        ),
        case(
            "embedding",
            |r| vec![uniform(r, &[6, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.embedding(v[0], &[4, 0, 4, 2])?;
                weighted(g, y, 16)
            },
        ),
        case(
            "concat_rows",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.concat(&[v[0], v[1], v[0]], Axis::Rows)?;
                weighted(g, y, 17)
            },
        ),
        case(
            "concat_cols",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], Axis::Cols)?;
                weighted(g, y, 18)
            },
        ),
        case(
            "slice_rows",
            |r| vec![uniform(r, &[5, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.slice(v[0], Axis::Rows, 1, 3)?;
                weighted(g, y, 19)
            },
        ),
        case(
            "slice_cols",
            |r| vec![uniform(r, &[3, 5], -1.0, 1.0)],
            |g, v| {
                let y = g.slice(v[0], Axis::Cols, 2, 2)?;
                weighted(g, y, 20)
            },
        ),
        case(
            "sum",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
        ),
        case(
            "mean",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            },
        ),
        case(
            "clamp_min",
            |r| vec![away_from_zero(r, &[3, 4], 0.05, 1.0)],
            |g, v| {
                let y = g.clamp_min(v[0], 0.0)?;
                weighted(g, y, 23)
            },
        ),
        case(
            "gmm_nll",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], 0.4, 1.5)],
            move |g, v| g.gmm_nll(v[0], v[1], data.clone(), &weights),
        ),
    ]
}
