//! Ablation axes: branch toggles, the prior toggle, the head count, and the
//! single-node coefficient variant. Assembly validates a configuration and
//! binds parameters to a prior matrix.

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::prior::CooccurrenceMatrix;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationConfig {
    pub use_object_branch: bool,
    pub use_relation_branch: bool,
    /// Off routes a zero vector into the message update instead of the
    /// co-occurrence context, leaving the matrix unread.
    pub use_prior: bool,
    /// Number of contextual coefficient heads.
    pub num_heads: usize,
    /// Compute the coefficient inner features from the subject alone,
    /// `CA(CA(x_i, x_i), u_ij)`, instead of the default subject-object
    /// pairing. Kept as an ablation of the coefficient input pairing.
    pub single_node_coefficients: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_object_branch: true,
            use_relation_branch: true,
            use_prior: true,
            num_heads: 4,
            single_node_coefficients: false,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_object_branch && !self.use_relation_branch {
            return Err(Error::Config(
                "at least one branch must stay enabled".into(),
            ));
        }
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable one-line summary recorded in run manifests.
    pub fn describe(&self) -> String {
        format!(
            "object_branch={} relation_branch={} prior={} heads={} single_node_coefficients={}",
            self.use_object_branch,
            self.use_relation_branch,
            self.use_prior,
            self.num_heads,
            self.single_node_coefficients
        )
    }
}

/// Bind parameters, an ablation configuration, and a prior into a runnable
/// model.
pub fn assemble(
    params: ModelParams,
    ablation: AblationConfig,
    prior: CooccurrenceMatrix,
) -> Result<Model> {
    ablation.validate()?;
    if params.object.num_heads != ablation.num_heads {
        return Err(Error::Config(format!(
            "parameters were built for {} heads, ablation asks for {}",
            params.object.num_heads, ablation.num_heads
        )));
    }
    if prior.size() != params.config.num_predicates {
        return Err(Error::Data(format!(
            "prior matrix is {}x{0} but the model has {} predicate classes",
            prior.size(),
            params.config.num_predicates
        )));
    }
    Ok(Model {
        params,
        ablation,
        prior,
    })
}
