//! Relevant and irrelevant question-image pairs drawn from one mini-batch.
//!
//! Every instance yields one relevant pair (its own image) and one
//! irrelevant pair (its question with the image of another batch member).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};

/// Resampling budget in strict mode before falling back to any other image.
pub const STRICT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// Any other image in the batch, uniformly.
    Faithful,
    /// Like faithful, but redraws images that would still answer the
    /// question the same way. Needs the generator's ground truth.
    Strict,
}

impl FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "faithful" => Ok(PairMode::Faithful),
            "strict" => Ok(PairMode::Strict),
            _ => Err(format!("unknown pair mode `{s}` (expected faithful or strict)")),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Faithful => "faithful",
            PairMode::Strict => "strict",
        })
    }
}

/// Question of batch member `question` shown with the image of `image`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub question: usize,
    pub image: usize,
    /// 1 for relevant, 0 for irrelevant.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedBatch {
    pub relevant: Vec<Pair>,
    pub irrelevant: Vec<Pair>,
    /// `(question instance id, image instance id)` per irrelevant pair.
    pub provenance: Vec<(u64, u64)>,
    /// Strict-mode pairs that exhausted the resampling budget.
    pub fallbacks: usize,
}

/// Ground-truth check: would `image`'s scene answer `question` as annotated?
pub type AlikeFn<'a> = dyn Fn(&Instance, &Instance) -> bool + 'a;

fn other_index<R: Rng + ?Sized>(rng: &mut R, i: usize, n: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= i {
        k + 1
    } else {
        k
    }
}

/// Builds balanced pairs; `alike` is required in strict mode.
pub fn build<R: Rng + ?Sized>(
    batch: &[&Instance],
    rng: &mut R,
    mode: PairMode,
    alike: Option<&AlikeFn>,
) -> Result<PairedBatch> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid(
            "pair sampler",
            format!("cannot sample irrelevant image from a batch of {n}"),
        ));
    }
    let alike = match (mode, alike) {
        (PairMode::Faithful, _) => None,
        (PairMode::Strict, Some(f)) => Some(f),
        (PairMode::Strict, None) => {
            return Err(Error::invalid(
                "pair sampler",
                "strict mode needs generator ground truth",
            ))
        }
    };
    let mut out = PairedBatch {
        relevant: Vec::with_capacity(n),
        irrelevant: Vec::with_capacity(n),
        provenance: Vec::with_capacity(n),
        fallbacks: 0,
    };
    for i in 0..n {
        out.relevant.push(Pair {
            question: i,
            image: i,
            label: 1,
        });
        let mut j = other_index(rng, i, n);
        if let Some(alike) = alike {
            let mut attempts = 1;
            while alike(batch[i], batch[j]) {
                if attempts == STRICT_ATTEMPTS {
                    out.fallbacks += 1;
                    j = other_index(rng, i, n);
                    break;
                }
                j = other_index(rng, i, n);
                attempts += 1;
            }
        }
        debug_assert_ne!(i, j);
        out.irrelevant.push(Pair {
            question: i,
            image: j,
            label: 0,
        });
        out.provenance.push((batch[i].id, batch[j].id));
    }
    Ok(out)
}
