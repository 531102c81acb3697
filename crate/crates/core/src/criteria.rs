//! Scalar criteria over per-position next-token distributions.
//!
//! Each criterion reports its per-position values, their mean, and the
//! gradient of that mean with respect to the logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logits_f64, Model, TokenId};
use crate::numerics::{
    ce_grad_logits, cross_entropy_nats, entropy_bits, entropy_grad_logits, kl_divergence_nats,
    kl_grad_logits, softmax_stable, Matrix, Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CriterionKind {
    /// Entropy of the next-token distribution, in bits. Label-free.
    #[serde(rename = "ie")]
    InformationEntropy,
    /// One-hot cross entropy against the next token, in nats.
    #[serde(rename = "ce")]
    CrossEntropy,
    /// `KL(teacher ∥ student)` in nats, teacher held fixed.
    #[serde(rename = "sd")]
    SelfDistillation,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 3] = [
        CriterionKind::InformationEntropy,
        CriterionKind::CrossEntropy,
        CriterionKind::SelfDistillation,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CriterionKind::InformationEntropy => "ie",
            CriterionKind::CrossEntropy => "ce",
            CriterionKind::SelfDistillation => "sd",
        }
    }

    /// Whether the criterion needs ground-truth next tokens.
    pub fn requires_labels(self) -> bool {
        matches!(self, CriterionKind::CrossEntropy)
    }

    pub fn requires_teacher(self) -> bool {
        matches!(self, CriterionKind::SelfDistillation)
    }
}

pub fn requires_labels(kind: CriterionKind) -> bool {
    kind.requires_labels()
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ie" => Ok(CriterionKind::InformationEntropy),
            "ce" => Ok(CriterionKind::CrossEntropy),
            "sd" => Ok(CriterionKind::SelfDistillation),
            other => Err(Error::InvalidArgument(format!(
                "unknown criterion '{other}' (expected ie, ce or sd)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceCriterion {
    pub kind: CriterionKind,
    pub per_position_values: Vec<f64>,
    /// Mean of `per_position_values`.
    pub value: f64,
    /// Gradient of `value` with respect to each logits row, `T × V`.
    pub grad_logits: Matrix<f64>,
}

/// Evaluates `kind` on a `T × V` logits matrix.
///
/// `targets[t]` is the token that should follow position `t`; callers shift
/// the sequence. `teacher_logits` must have the same shape as `logits`.
pub fn evaluate<T: Scalar>(
    kind: CriterionKind,
    logits: &Matrix<T>,
    targets: Option<&[TokenId]>,
    teacher_logits: Option<&Matrix<T>>,
) -> Result<SequenceCriterion> {
    let (t_len, vocab) = logits.shape();
    if t_len == 0 {
        return Err(Error::InvalidArgument("criterion over zero positions".into()));
    }
    match kind {
        CriterionKind::CrossEntropy => {
            let targets = targets.ok_or_else(|| {
                Error::InvalidArgument("cross-entropy criterion needs next-token targets".into())
            })?;
            if targets.len() != t_len {
                return Err(Error::Shape(format!(
                    "{} targets for {t_len} positions",
                    targets.len()
                )));
            }
        }
        CriterionKind::SelfDistillation => {
            let teacher = teacher_logits.ok_or_else(|| {
                Error::InvalidArgument("self-distillation criterion needs teacher logits".into())
            })?;
            if teacher.shape() != logits.shape() {
                return Err(Error::Shape(format!(
                    "teacher logits {:?} vs student {:?}",
                    teacher.shape(),
                    logits.shape()
                )));
            }
        }
        CriterionKind::InformationEntropy => {}
    }

    let inv_t = 1.0 / t_len as f64;
    let mut values = Vec::with_capacity(t_len);
    let mut grad = Matrix::zeros(t_len, vocab);
    for t in 0..t_len {
        let p = softmax_stable(logits.row(t))?;
        let (value, g) = match kind {
            CriterionKind::InformationEntropy => (entropy_bits(&p), entropy_grad_logits(&p)),
            CriterionKind::CrossEntropy => {
                let target = targets.expect("checked above")[t] as usize;
                (cross_entropy_nats(&p, target)?, ce_grad_logits(&p, target)?)
            }
            CriterionKind::SelfDistillation => {
                let teacher = softmax_stable(teacher_logits.expect("checked above").row(t))?;
                (kl_divergence_nats(&teacher, &p)?, kl_grad_logits(&teacher, &p)?)
            }
        };
        values.push(value);
        for (dst, gv) in grad.row_mut(t).iter_mut().zip(g) {
            *dst = gv * inv_t;
        }
    }
    let value = values.iter().sum::<f64>() * inv_t;
    Ok(SequenceCriterion {
        kind,
        per_position_values: values,
        value,
        grad_logits: grad,
    })
}

/// A criterion bound to one token sequence: the next-token targets for the
/// cross-entropy criterion and the fixed teacher logits for self-distillation.
///
/// Cross entropy is evaluated on positions `0..T-1` only (the last position
/// has no successor); its gradient row for the last position is zero.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: CriterionKind,
    targets: Option<Vec<TokenId>>,
    teacher_logits: Option<Matrix<f64>>,
}

impl Objective {
    pub fn new(
        kind: CriterionKind,
        tokens: &[TokenId],
        teacher_logits: Option<Matrix<f64>>,
    ) -> Result<Self> {
        let targets = if kind.requires_labels() {
            if tokens.len() < 2 {
                return Err(Error::InvalidArgument(
                    "cross-entropy criterion needs at least two tokens".into(),
                ));
            }
            Some(tokens[1..].to_vec())
        } else {
            None
        };
        if kind.requires_teacher() {
            match &teacher_logits {
                Some(t) if t.rows() == tokens.len() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "teacher logits have {} rows for {} tokens",
                        t.rows(),
                        tokens.len()
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(
                        "self-distillation criterion needs teacher logits".into(),
                    ))
                }
            }
        }
        Ok(Objective {
            kind,
            targets,
            teacher_logits: teacher_logits.filter(|_| kind.requires_teacher()),
        })
    }

    /// Binds `kind` to `tokens`, taking teacher logits from `teacher` when
    /// the criterion needs them. Passing the scored model itself as teacher
    /// is the self-distillation setting.
    pub fn with_teacher(kind: CriterionKind, teacher: &Model, tokens: &[TokenId]) -> Result<Self> {
        let teacher_logits = if kind.requires_teacher() {
            Some(logits_f64(teacher, tokens)?)
        } else {
            None
        };
        Objective::new(kind, tokens, teacher_logits)
    }

    pub fn kind(&self) -> CriterionKind {
        self.kind
    }

    /// Evaluates on full-sequence logits; the gradient has one row per
    /// position of `logits`.
    pub fn evaluate(&self, logits: &Matrix<f64>) -> Result<SequenceCriterion> {
        match &self.targets {
            Some(targets) => {
                let rows: Vec<usize> = (0..targets.len()).collect();
                let mut c = evaluate(self.kind, &logits.select_rows(&rows), Some(targets), None)?;
                let mut grad = Matrix::zeros(logits.rows(), logits.cols());
                grad.data_mut()[..c.grad_logits.data().len()].copy_from_slice(c.grad_logits.data());
                c.grad_logits = grad;
                Ok(c)
            }
            None => evaluate(self.kind, logits, None, self.teacher_logits.as_ref()),
        }
    }
}
