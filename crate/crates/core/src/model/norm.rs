//! Pre-norm site functions: LayerNorm, RMSNorm, DyT and HardTanh.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::config::NormKind;
use crate::tensor::Scalar;

/// Graph handles for the learnable pieces of one norm site. `alpha` is the
/// DyT pre-tanh scale of shape `[1]`; `gamma`/`beta` are `[d_model]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormParams {
    pub alpha: Option<NodeId>,
    pub gamma: Option<NodeId>,
    pub beta: Option<NodeId>,
}

/// Parameter names a site of `kind` owns, as suffixes of the site prefix.
pub fn param_suffixes(kind: NormKind) -> &'static [&'static str] {
    match kind {
        NormKind::LayerNorm | NormKind::HardTanh => &["weight", "bias"],
        NormKind::RmsNorm => &["weight"],
        NormKind::Dyt => &["alpha", "weight", "bias"],
    }
}

pub fn norm_apply<T: Scalar>(
    g: &mut Graph<T>,
    kind: NormKind,
    x: NodeId,
    p: &NormParams,
    eps: f64,
) -> Result<NodeId> {
    let mismatch = |what: &str| {
        Err(Error::Config(format!(
            "{kind} norm site {what}"
        )))
    };
    let (gamma, beta) = match (kind, p.gamma, p.beta) {
        (_, None, _) => return mismatch("is missing its gain"),
        (NormKind::RmsNorm, Some(gm), None) => (gm, None),
        (NormKind::RmsNorm, Some(_), Some(_)) => return mismatch("has no bias"),
        (_, Some(_), None) => return mismatch("is missing its bias"),
        (_, Some(gm), Some(b)) => (gm, Some(b)),
    };
    if (kind == NormKind::Dyt) != p.alpha.is_some() {
        return mismatch(if kind == NormKind::Dyt {
            "is missing alpha"
        } else {
            "has no alpha"
        });
    }

    let core = match kind {
        NormKind::LayerNorm => g.layer_norm(x, eps)?,
        NormKind::RmsNorm => g.rms_norm(x, eps)?,
        NormKind::Dyt => {
            let ax = g.mul(x, p.alpha.unwrap())?;
            g.tanh(ax)?
        }
        NormKind::HardTanh => g.hardtanh(x)?,
    };
    let scaled = g.mul(core, gamma)?;
    match beta {
        Some(b) => g.add(scaled, b),
        None => Ok(scaled),
    }
}
