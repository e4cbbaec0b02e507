use super::{Array, Graph, Var};
use crate::error::{ensure, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// Input index and flat coordinate where it occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// How the numeric derivative of each coordinate is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x + eps) - f(x - eps)) / 2eps`.
    Central { eps: f64 },
    /// Ridders' polynomial extrapolation of central differences, shrinking
    /// the step by 1.4 per level and keeping the entry with the smallest
    /// estimated error. Run from both `h` and `3h`; the run with the smaller
    /// error estimate wins. Needed when some gradient coordinates are tiny
    /// relative to the function value, where a single central difference
    /// drowns in rounding noise.
    Ridders { h: f64 },
}

fn eval<F>(f: &F, point: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(g.value(out).is_scalar(), Shape, "checked function must return a scalar");
    Ok(g.value(out).data()[0])
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences on every coordinate of every input.
pub fn finite_diff_check<F>(f: F, point: &[Array], eps: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, point, Stencil::Central { eps })
}

pub fn finite_diff_check_with<F>(f: F, point: &[Array], stencil: Stencil) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let step = match stencil {
        Stencil::Central { eps } => eps,
        Stencil::Ridders { h } => h,
    };
    ensure!(step > 0.0, InvalidArgument, "step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Array> = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|a| a.data().to_vec());
        for c in 0..point[i].len() {
            let x0 = point[i].data()[c];
            let mut central = |h: f64| -> Result<f64> {
                probe[i].data_mut()[c] = x0 + h;
                let up = eval(&f, &probe);
                probe[i].data_mut()[c] = x0 - h;
                let down = eval(&f, &probe);
                probe[i].data_mut()[c] = x0;
                Ok((up? - down?) / (2.0 * h))
            };
            let numeric = match stencil {
                Stencil::Central { eps } => central(eps)?,
                Stencil::Ridders { h } => {
                    let (a, ea) = ridders(&mut central, h)?;
                    let (b, eb) = ridders(&mut central, 3.0 * h)?;
                    if eb < ea {
                        b
                    } else {
                        a
                    }
                }
            };
            let a = analytic.as_ref().map_or(0.0, |v| v[c]);
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (i, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const LEVELS: usize = 10;
    let mut tab = [[0.0f64; LEVELS]; LEVELS];
    let mut h = h0;
    tab[0][0] = central(h)?;
    let mut best = tab[0][0];
    let mut err = f64::INFINITY;
    for i in 1..LEVELS {
        h /= CON;
        tab[0][i] = central(h)?;
        let mut fac = CON2;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (tab[j][i] - tab[j - 1][i])
                .abs()
                .max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}
