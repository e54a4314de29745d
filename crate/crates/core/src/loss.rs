//! Position-selectable distillation loss over visible and masked predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Guard added to the product of norms in the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Which prediction positions receive loss. At least one is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFlags", into = "RawFlags")]
pub struct SupervisionFlags {
    delta_v: u8,
    delta_m: u8,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct RawFlags {
    delta_v: u8,
    delta_m: u8,
}

impl TryFrom<RawFlags> for SupervisionFlags {
    type Error = Error;

    fn try_from(r: RawFlags) -> Result<Self> {
        Self::new(r.delta_v, r.delta_m)
    }
}

impl From<SupervisionFlags> for RawFlags {
    fn from(f: SupervisionFlags) -> Self {
        RawFlags {
            delta_v: f.delta_v,
            delta_m: f.delta_m,
        }
    }
}

impl SupervisionFlags {
    pub const VISIBLE: Self = Self { delta_v: 1, delta_m: 0 };
    pub const MASKED: Self = Self { delta_v: 0, delta_m: 1 };
    pub const BOTH: Self = Self { delta_v: 1, delta_m: 1 };
    pub const ALL: [Self; 3] = [Self::VISIBLE, Self::MASKED, Self::BOTH];

    pub fn new(delta_v: u8, delta_m: u8) -> Result<Self> {
        match (delta_v, delta_m) {
            (0, 0) => Err(Error::InvalidArgument(
                "supervision flags: at least one of delta_v, delta_m must be 1".into(),
            )),
            (0 | 1, 0 | 1) => Ok(Self { delta_v, delta_m }),
            _ => Err(Error::InvalidArgument(format!(
                "supervision flags must be 0 or 1, got ({delta_v}, {delta_m})"
            ))),
        }
    }

    pub fn delta_v(self) -> u8 {
        self.delta_v
    }

    pub fn delta_m(self) -> u8 {
        self.delta_m
    }

    pub fn visible(self) -> bool {
        self.delta_v == 1
    }

    pub fn masked(self) -> bool {
        self.delta_m == 1
    }

    /// `δ_v·|v| + δ_m·|m|`
    pub fn denominator(self, visible: usize, masked: usize) -> usize {
        self.delta_v as usize * visible + self.delta_m as usize * masked
    }
}

impl Default for SupervisionFlags {
    fn default() -> Self {
        Self::BOTH
    }
}

impl fmt::Display for SupervisionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.delta_v, self.delta_m)
    }
}

impl FromStr for SupervisionFlags {
    type Err = Error;

    /// Accepts `v`, `m`, `vm`/`both`, or `1,0` style pairs.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v" | "visible" => Ok(Self::VISIBLE),
            "m" | "masked" => Ok(Self::MASKED),
            "vm" | "both" => Ok(Self::BOTH),
            other => {
                let parts: Vec<&str> = other.split(',').map(str::trim).collect();
                let parse = |p: &str| {
                    p.parse::<u8>()
                        .map_err(|_| Error::InvalidArgument(format!("bad supervision flags `{s}`")))
                };
                match parts.as_slice() {
                    [v, m] => Self::new(parse(v)?, parse(m)?),
                    _ => Err(Error::InvalidArgument(format!("bad supervision flags `{s}`"))),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Cosine,
    Mse,
    SmoothL1,
}

impl LossKind {
    pub const ALL: [Self; 3] = [LossKind::Cosine, LossKind::Mse, LossKind::SmoothL1];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            LossKind::Cosine => "cosine",
            LossKind::Mse => "mse",
            LossKind::SmoothL1 => "smooth_l1",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine" | "cos" => Ok(LossKind::Cosine),
            "mse" => Ok(LossKind::Mse),
            "smooth_l1" | "smoothl1" => Ok(LossKind::SmoothL1),
            _ => Err(Error::InvalidArgument(format!("unknown loss kind `{s}`"))),
        }
    }
}

/// Loss between one predicted patch vector and its target.
pub fn per_patch_loss<T: Scalar>(y: &[T], t: &[T], kind: LossKind) -> Result<T> {
    if y.len() != t.len() || y.is_empty() {
        return Err(Error::shape(
            "per_patch_loss",
            format!("widths {} and {}", y.len(), t.len()),
        ));
    }
    let n = T::from_f64(y.len() as f64);
    Ok(match kind {
        LossKind::Cosine => {
            let (mut dot, mut yy, mut tt) = (T::zero(), T::zero(), T::zero());
            for (&a, &b) in y.iter().zip(t) {
                dot = dot + a * b;
                yy = yy + a * a;
                tt = tt + b * b;
            }
            T::one() - dot / (yy.sqrt() * tt.sqrt() + T::from_f64(COSINE_EPS))
        }
        LossKind::Mse => {
            y.iter().zip(t).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b)) / n
        }
        LossKind::SmoothL1 => {
            let beta = T::from_f64(SMOOTH_L1_BETA);
            let half = T::from_f64(0.5);
            y.iter()
                .zip(t)
                .fold(T::zero(), |acc, (&a, &b)| {
                    let d = (a - b).abs();
                    acc + if d < beta { half * d * d / beta } else { d - half * beta }
                })
                / n
        }
    })
}

/// Per-row losses of `[n, D]` predictions against targets, recorded on `g`.
pub fn row_losses<T: Scalar>(g: &mut Graph<T>, y: Var, t: Var, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Cosine => g.cosine_distance_rows(y, t, COSINE_EPS),
        LossKind::Mse => g.mse_rows(y, t),
        LossKind::SmoothL1 => g.smooth_l1_rows(y, t, SMOOTH_L1_BETA),
    }
}

/// Supervision loss for one sample on the graph: the flag-selected per-patch losses
/// summed and divided by the number of supervised patches.
///
/// Pairs are `(prediction, target)`; a pair may be absent only when its
/// flag is off or its patch set is empty.
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    visible: Option<(Var, Var)>,
    masked: Option<(Var, Var)>,
    flags: SupervisionFlags,
    kind: LossKind,
) -> Result<Var> {
    let mut terms = Vec::new();
    let mut count = 0usize;
    for (active, pair) in [(flags.visible(), visible), (flags.masked(), masked)] {
        if !active {
            continue;
        }
        let Some((y, t)) = pair else { continue };
        if g.shape(y) != g.shape(t) {
            return Err(Error::shape(
                "sample_loss",
                format!("prediction {:?} vs target {:?}", g.shape(y), g.shape(t)),
            ));
        }
        count += g.shape(y)[0];
        let rows = row_losses(g, y, t, kind)?;
        terms.push(g.sum(rows)?);
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "no supervised patches: the active prediction sets are empty or missing".into(),
        ));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / count as f64)
}

/// Supervision loss on batched tensors `[B, n, D]`, averaged over the batch.
///
/// Evaluated with plain loops in patch order, independent of the graph.
pub fn total_loss<T: Scalar>(
    y_v: Option<&Tensor<T>>,
    t_v: Option<&Tensor<T>>,
    y_m: Option<&Tensor<T>>,
    t_m: Option<&Tensor<T>>,
    flags: SupervisionFlags,
    kind: LossKind,
) -> Result<T> {
    let pair = |active: bool, y: Option<&Tensor<T>>, t: Option<&Tensor<T>>, what: &str| -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        if !active {
            return Ok(None);
        }
        match (y, t) {
            (Some(y), Some(t)) => {
                if y.shape() != t.shape() || y.ndim() != 3 {
                    return Err(Error::shape(
                        "total_loss",
                        format!("{what}: prediction {:?} vs target {:?}", y.shape(), t.shape()),
                    ));
                }
                Ok(Some((y.clone(), t.clone())))
            }
            _ => Err(Error::InvalidArgument(format!("total_loss: missing {what} operand"))),
        }
    };
    let v = pair(flags.visible(), y_v, t_v, "visible")?;
    let m = pair(flags.masked(), y_m, t_m, "masked")?;
    let batch = v.as_ref().or(m.as_ref()).map(|(y, _)| y.shape()[0]).unwrap_or(0);
    if let (Some((a, _)), Some((b, _))) = (&v, &m) {
        if a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] {
            return Err(Error::shape(
                "total_loss",
                format!("visible {:?} vs masked {:?}", a.shape(), b.shape()),
            ));
        }
    }
    let mut acc = T::zero();
    for b in 0..batch {
        let mut sum = T::zero();
        let mut count = 0usize;
        for (y, t) in [&v, &m].into_iter().flatten() {
            let (n, d) = (y.shape()[1], y.shape()[2]);
            let (yd, td) = (y.data(), t.data());
            for i in 0..n {
                let off = (b * n + i) * d;
                sum = sum + per_patch_loss(&yd[off..off + d], &td[off..off + d], kind)?;
            }
            count += n;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no supervised patches".into()));
        }
        acc = acc + sum / T::from_f64(count as f64);
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("total_loss: empty batch".into()));
    }
    Ok(acc / T::from_f64(batch as f64))
}
