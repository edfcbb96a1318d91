//! Blending policies turning the gate output into adapter weights. They
//! apply the same way during training and at inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::DomainDistribution;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Use the gate distribution as is.
    #[default]
    Proposed,
    /// One-hot at the gate's argmax.
    Top1,
    /// One-hot at the known domain label.
    Oracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Proposed, PolicyKind::Top1, PolicyKind::Oracle];

    pub fn as_u8(self) -> u8 {
        match self {
            PolicyKind::Proposed => 0,
            PolicyKind::Top1 => 1,
            PolicyKind::Oracle => 2,
        }
    }

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::Top1 => "top1",
            PolicyKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(PolicyKind::Proposed),
            "top1" => Ok(PolicyKind::Top1),
            "oracle" => Ok(PolicyKind::Oracle),
            other => Err(Error::Config(format!("unknown blend policy {other:?} (proposed|top1|oracle)"))),
        }
    }
}

pub fn apply_policy(v: &DomainDistribution, label: Option<usize>, kind: PolicyKind) -> Result<DomainDistribution> {
    match kind {
        PolicyKind::Proposed => Ok(v.clone()),
        PolicyKind::Top1 => DomainDistribution::one_hot(v.len(), v.argmax()),
        PolicyKind::Oracle => {
            let label = label.ok_or_else(|| Error::Config("oracle blending needs a domain label".into()))?;
            DomainDistribution::one_hot(v.len(), label)
        }
    }
}

/// Graph form of [`apply_policy`] over a `[N, K+1]` batch. The one-hot
/// policies produce constants, so no gradient passes through the selection.
pub fn policy_weights<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    labels: Option<&[usize]>,
    kind: PolicyKind,
) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Codec(format!("expected [N, K+1] weights, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let pick: Vec<usize> = match kind {
        PolicyKind::Proposed => return Ok(v),
        PolicyKind::Top1 => g
            .value(v)
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
        PolicyKind::Oracle => {
            let labels = labels.ok_or_else(|| Error::Config("oracle blending needs domain labels".into()))?;
            if labels.len() != n || labels.iter().any(|&l| l >= c) {
                return Err(Error::Config(format!("oracle labels {labels:?} do not fit [{n}, {c}]")));
            }
            labels.to_vec()
        }
    };
    let mut data = vec![T::zero(); n * c];
    for (i, &k) in pick.iter().enumerate() {
        data[i * c + k] = T::one();
    }
    Ok(g.input(Tensor::new(&[n, c], data)?))
}
