use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GEM_INIT_P: f64 = 3.0;
pub const GEM_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    /// Generalized mean with a learnable exponent.
    Gem,
}

impl FromStr for PoolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            "gem" => Ok(PoolKind::Gem),
            other => Err(format!("unknown pooling `{other}` (avg|max|gem)")),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
            PoolKind::Gem => "gem",
        })
    }
}

/// Global spatial pooling of `[N,C,H,W]` to `[N,C]`.
///
/// `gem_p` must be a one-element variable when `kind` is [`PoolKind::Gem`]; it is
/// clamped to `p >= 1`.
pub fn pool<'t, T: Scalar>(x: Var<'t, T>, kind: PoolKind, gem_p: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[2] * shape[3] == 0 {
        return Err(Error::Shape(format!("pool expects non-empty [N,C,H,W], got {shape:?}")));
    }
    match kind {
        PoolKind::Avg => x.mean(&[2, 3], false),
        PoolKind::Max => x.max(&[2, 3], false),
        PoolKind::Gem => {
            let p = gem_p
                .ok_or_else(|| Error::Contract("gem pooling needs an exponent".into()))?
                .clamp_min(1.0);
            // ((1/HW) * sum x^p)^(1/p), with x^p = exp(p ln x)
            let powered = x.clamp_min(GEM_CLAMP).log()?.mul(p)?.exp();
            Ok(powered.mean(&[2, 3], false)?.log()?.div(p)?.exp())
        }
    }
}
