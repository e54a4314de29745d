use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Errors below this magnitude are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Which perturbations the checker evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Every scalar coordinate of every parameter.
    Coordinates,
    /// `count` random unit directions over all parameters jointly.
    Directions { count: usize, seed: u64 },
    /// `count` random unit directions confined to each named tensor.
    PerTensor { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Description of the probe with the largest error.
    pub worst: String,
    pub probes: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` receives a fresh graph with every entry of `params` registered as a
/// parameter and must return the scalar loss. Both routes run in `f64`.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    mode: ProbeMode,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-4, 1e-2]"
        )));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        g.register(store)?;
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    g.register(params)?;
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    let analytic = |name: &str| -> Tensor<f64> {
        grads
            .by_name(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(name).map(|t| t.shape()).unwrap_or(&[1])))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
    };
    let mut record = |label: String, a: f64, n: f64| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = format!("{label}: analytic {a:.6e}, numeric {n:.6e}");
        }
    };

    match mode {
        ProbeMode::Coordinates => {
            for name in params.names() {
                let ga = analytic(name);
                for i in 0..ga.numel() {
                    let mut plus = params.clone();
                    plus.get_mut(name)?.data_mut()[i] += eps;
                    let mut minus = params.clone();
                    minus.get_mut(name)?.data_mut()[i] -= eps;
                    let n = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
                    record(format!("{name}[{i}]"), ga.data()[i], n);
                }
            }
        }
        ProbeMode::Directions { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let names: Vec<String> = params.names().cloned().collect();
            for p in 0..count {
                let dir = random_direction(params, &names, &mut rng)?;
                let a = directional(&dir, &analytic);
                let n = (eval(&shift(params, &dir, eps)?)? - eval(&shift(params, &dir, -eps)?)?) / (2.0 * eps);
                record(format!("direction {p}"), a, n);
            }
        }
        ProbeMode::PerTensor { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let names: Vec<String> = params.names().cloned().collect();
            for name in &names {
                for p in 0..count {
                    let dir = random_direction(params, std::slice::from_ref(name), &mut rng)?;
                    let a = directional(&dir, &analytic);
                    let n = (eval(&shift(params, &dir, eps)?)? - eval(&shift(params, &dir, -eps)?)?) / (2.0 * eps);
                    record(format!("{name} direction {p}"), a, n);
                }
            }
        }
    }
    Ok(report)
}

/// Unit-norm Gaussian direction supported on `names`.
fn random_direction(
    params: &ParamStore<f64>,
    names: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore<f64>> {
    let mut dir = ParamStore::new();
    let mut norm = 0.0;
    for name in names {
        let t = params.get(name)?;
        let data: Vec<f64> = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
        norm += data.iter().map(|v| v * v).sum::<f64>();
        dir.insert(name.clone(), Tensor::from_vec(t.shape().to_vec(), data)?);
    }
    let inv = 1.0 / norm.sqrt();
    for (_, t) in dir.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(dir)
}

fn directional(dir: &ParamStore<f64>, analytic: &impl Fn(&str) -> Tensor<f64>) -> f64 {
    dir.iter()
        .map(|(name, d)| {
            let g = analytic(name);
            g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

fn shift(params: &ParamStore<f64>, dir: &ParamStore<f64>, step: f64) -> Result<ParamStore<f64>> {
    let mut out = params.clone();
    for (name, d) in dir.iter() {
        let t = out.get_mut(name)?;
        for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
            *v += step * dv;
        }
    }
    Ok(out)
}
