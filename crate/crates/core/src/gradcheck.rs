//! End-to-end gradient checks of each loss term through a tiny model.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::augment::{sample_mask, DropMask};
use crate::consensus::{total_loss, CodingMode, ConsensusWeights, LossOptions};
use crate::error::{HcnError, Result};
use crate::model::{forward_all, Architecture, HcnModel};
use crate::nn::{grad_check, Activation, GradCheckConfig, GradCheckReport, Parameterized};
use crate::numerics::DenseMatrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Rec,
    Cls,
    Code,
    CrossViewCode,
    Glb,
    RawGlb,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Rec,
        LossTerm::Cls,
        LossTerm::Code,
        LossTerm::CrossViewCode,
        LossTerm::Glb,
        LossTerm::RawGlb,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Rec => "rec",
            LossTerm::Cls => "cls",
            LossTerm::Code => "code",
            LossTerm::CrossViewCode => "code-cross-view",
            LossTerm::Glb => "glb",
            LossTerm::RawGlb => "glb-raw",
            LossTerm::Total => "total",
        }
    }

    /// Weights and switches under which the total objective reduces to this term.
    fn objective(self) -> (ConsensusWeights, LossOptions) {
        let zero = ConsensusWeights::zero();
        let only = |reconstruction, coding_mode, normalize_global| LossOptions {
            normalize_global,
            coding_mode,
            reconstruction,
        };
        let w2s = CodingMode::WeakToStrong;
        match self {
            LossTerm::Rec => (zero, only(true, w2s, true)),
            LossTerm::Cls => (
                ConsensusWeights {
                    alpha: 3.0,
                    beta: 3.6,
                    gamma: 9.5,
                    ..zero
                },
                only(false, w2s, true),
            ),
            LossTerm::Code => (ConsensusWeights { lambda1: 1.0, ..zero }, only(false, w2s, true)),
            LossTerm::CrossViewCode => (
                ConsensusWeights { lambda1: 1.0, ..zero },
                only(false, CodingMode::CrossView, true),
            ),
            LossTerm::Glb => (ConsensusWeights { lambda2: 1.0, ..zero }, only(false, w2s, true)),
            LossTerm::RawGlb => (ConsensusWeights { lambda2: 1.0, ..zero }, only(false, w2s, false)),
            LossTerm::Total => (
                ConsensusWeights {
                    alpha: 3.0,
                    beta: 3.6,
                    gamma: 9.5,
                    lambda1: 0.3,
                    lambda2: 0.5,
                },
                only(true, w2s, true),
            ),
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = HcnError;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let known: Vec<&str> = LossTerm::ALL.iter().map(|t| t.name()).collect();
            HcnError::InvalidArgument(format!("unknown loss term {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

/// Shape of the throwaway model and batch.
#[derive(Debug, Clone)]
pub struct TinySetup {
    pub view_dims: Vec<usize>,
    pub batch: usize,
    pub width: usize,
    pub d_out: usize,
    pub rho: f64,
}

impl Default for TinySetup {
    fn default() -> Self {
        TinySetup {
            view_dims: vec![5, 7],
            batch: 16,
            width: 8,
            d_out: 8,
            rho: 0.3,
        }
    }
}

/// Keeps ReLU inputs away from the kink so central differences stay on one side.
const KINK_MARGIN: f64 = 1e-4;
/// Keeps the top two class probabilities apart so pseudolabels do not flip.
const ARGMAX_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: u64 = 10_000;

/// Smallest |pre-activation| and smallest top-two probability gap over the batch.
fn margins(model: &HcnModel, batch: &[DenseMatrix], masks: &[DropMask]) -> Result<(f64, f64)> {
    let bundle = forward_all(model, batch, masks)?;
    let mut kink = f64::INFINITY;
    for (ae, (x, pass)) in model.views().iter().zip(batch.iter().zip(&bundle.views)) {
        for input in [x, &pass.x_aug] {
            let enc = ae.encoder.forward(input)?;
            let dec = ae.decoder.forward(enc.output())?;
            for m in enc.pre_activations().iter().chain(dec.pre_activations()) {
                kink = m.as_slice().iter().fold(kink, |a, v| a.min(v.abs()));
            }
        }
    }
    let mut gap = f64::INFINITY;
    for y in bundle.y() {
        for row in y.row_iter() {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            gap = gap.min(first - second);
        }
    }
    Ok((kink, gap))
}

/// Checks the analytic parameter gradient of one term against central differences.
///
/// With `flip_sign` the analytic gradient is negated before comparison, which
/// must make the check fail.
pub fn check_term(term: LossTerm, setup: &TinySetup, seed: u64, flip_sign: bool) -> Result<GradCheckReport> {
    let arch = Architecture {
        hidden: vec![setup.width, setup.width],
        d_out: setup.d_out,
        activation: Activation::Relu,
    };
    let mut data_rng = stream_rng(seed, Stream::GradCheck, 1);
    let batch: Vec<DenseMatrix> = setup
        .view_dims
        .iter()
        .map(|&d| {
            let data = (0..setup.batch * d).map(|_| data_rng.random_range(0.0..1.0)).collect();
            DenseMatrix::from_vec(setup.batch, d, data)
        })
        .collect::<Result<_>>()?;
    let mut found = None;
    for attempt in 0..MAX_ATTEMPTS {
        let masks = setup
            .view_dims
            .iter()
            .map(|&d| sample_mask(d, setup.rho, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let m = HcnModel::new(&setup.view_dims, &arch, seed.wrapping_add(attempt))?;
        let (kink, gap) = margins(&m, &batch, &masks)?;
        if kink > KINK_MARGIN && gap > ARGMAX_MARGIN {
            found = Some((m, masks));
            break;
        }
    }
    let (model, masks) = found.ok_or_else(|| {
        HcnError::InvalidArgument(format!(
            "no model within {MAX_ATTEMPTS} draws keeps clear of activation kinks and pseudolabel ties"
        ))
    })?;

    let (weights, opts) = term.objective();
    let mut work = model.clone();
    let mut failure = None;
    let report = grad_check(
        |params| {
            work.set_flat_params(params).expect("parameter count is fixed");
            let outcome = forward_all(&work, &batch, &masks)
                .and_then(|bundle| total_loss(&bundle, &batch, &weights, &opts).map(|r| (bundle, r)))
                .and_then(|(bundle, (loss, grads))| {
                    work.zero_grad();
                    work.backward(&bundle, &grads)?;
                    Ok(loss.total)
                });
            match outcome {
                Ok(total) => {
                    let mut g = work.flat_grads();
                    if flip_sign {
                        g.iter_mut().for_each(|x| *x = -*x);
                    }
                    (total, g)
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, vec![f64::NAN; params.len()])
                }
            }
        },
        &model.flat_params(),
        &GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        },
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes_on_two_and_three_views() {
        for view_dims in [vec![5, 7], vec![4, 6, 5]] {
            let setup = TinySetup {
                view_dims,
                ..TinySetup::default()
            };
            for term in LossTerm::ALL {
                let r = check_term(term, &setup, 3, false).unwrap();
                assert!(r.passed(), "{term}: {:?}", &r.failures[..r.failures.len().min(5)]);
            }
        }
    }

    #[test]
    fn flipped_gradient_fails() {
        let r = check_term(LossTerm::Total, &TinySetup::default(), 3, true).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn term_names_parse() {
        for t in LossTerm::ALL {
            assert_eq!(t.name().parse::<LossTerm>().unwrap(), t);
        }
        assert!("nope".parse::<LossTerm>().is_err());
    }
}
