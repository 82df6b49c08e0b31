//! Parallel composition of several adapters over one frozen base.
//!
//! Each adapter contributes a residual at every site; residuals are scaled
//! by per-adapter weights and summed around a single base evaluation. The
//! model-level form is [`crate::model::Attachment::Composed`]; the helpers
//! here are the array-level operations.

use ndarray::{Array, Dimension};

use crate::adapter::Miva;
use crate::adapter::{cfa, CfaWeights, LAMBDA_SA};
use crate::attention::{self_attention, AttentionParams};
use crate::error::{dim_err, MivaError, Result};
use crate::model::AdapterUse;
use crate::tensor::Mat;

/// One weight per adapter; order is stacking order (later = on top).
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionWeights {
    w: Vec<f64>,
}

impl CompositionWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(MivaError::InvalidArgument(
                "at least one adapter weight required".into(),
            ));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(MivaError::NonFinite("composition weights"));
        }
        Ok(Self { w })
    }

    /// `1/n` each.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn uses<'a>(&self, adapters: &[&'a Miva]) -> Result<Vec<AdapterUse<'a>>> {
        if adapters.len() != self.w.len() {
            return Err(MivaError::InvalidArgument(format!(
                "{} weights for {} adapters",
                self.w.len(),
                adapters.len()
            )));
        }
        Ok(adapters
            .iter()
            .zip(&self.w)
            .map(|(m, &w)| AdapterUse::new(m, w))
            .collect())
    }
}

/// The CFA pair and mixing weights of one adapter at an SA slot.
pub struct CfaSlot<'a> {
    pub first: &'a CfaWeights,
    pub prev: &'a CfaWeights,
    pub lambda: (f64, f64),
}

/// `SA(f_i) + sum_j w_j (lambda_2 CFA_{i,1} + lambda_3 CFA_{i,i-1})`.
pub fn compose_sa(
    f_i: &Mat,
    f_1: &Mat,
    f_prev: &Mat,
    base: &AttentionParams,
    adapters: &[CfaSlot<'_>],
    w: &CompositionWeights,
) -> Result<Mat> {
    if adapters.len() != w.len() {
        return Err(MivaError::InvalidArgument(format!(
            "{} weights for {} adapters",
            w.len(),
            adapters.len()
        )));
    }
    let mut out = self_attention(f_i, base)? * LAMBDA_SA;
    for (a, &wj) in adapters.iter().zip(w.as_slice()) {
        let c1 = cfa(f_i, f_1, base, a.first)?;
        let c2 = cfa(f_i, f_prev, base, a.prev)?;
        out = out + (c1 * a.lambda.0 + c2 * a.lambda.1) * wj;
    }
    Ok(out)
}

/// `base + sum_j w_j (adapted_j - base)`.
pub fn compose_residuals<D: Dimension>(
    base_output: &Array<f64, D>,
    adapter_outputs: &[Array<f64, D>],
    w: &CompositionWeights,
) -> Result<Array<f64, D>> {
    if adapter_outputs.len() != w.len() {
        return Err(MivaError::InvalidArgument(format!(
            "{} weights for {} outputs",
            w.len(),
            adapter_outputs.len()
        )));
    }
    let mut resid = Array::<f64, D>::zeros(base_output.raw_dim());
    for (o, &wj) in adapter_outputs.iter().zip(w.as_slice()) {
        if o.shape() != base_output.shape() {
            return Err(dim_err(
                "compose_residuals",
                format!("{:?} vs {:?}", o.shape(), base_output.shape()),
            ));
        }
        resid.zip_mut_with(&(o - base_output), |a, r| *a += wj * r);
    }
    Ok(resid + base_output)
}
