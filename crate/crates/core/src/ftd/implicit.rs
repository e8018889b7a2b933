//! The implicit filtered decomposition: one sample factor G must satisfy
//! every requested derivative filter at once.

use crate::cpd::estimate_rank;
use crate::error::Result;
use crate::filters::FilterKind;
use crate::jacobian::OperatingPoints;
use crate::tensor::Tensor3;

use super::{best_restart, single_run, FtdOptions, FtdResult, Problem, Variant};

/// Multi-filter implicit decomposition of `t` into `{W, V, G}`.
///
/// When `opts.kinds` is `None` the filters default to {Left3, Right3} and
/// escalate to {Left3, Right3, Central3} if `opts.r` exceeds a numerical
/// rank estimate of the tensor (an under-determined factorization needs the
/// extra filter to stay meaningful).
pub fn ftd_implicit(t: &Tensor3, pts: &OperatingPoints, opts: &FtdOptions) -> Result<FtdResult> {
    opts.validate(true)?;
    let problem = Problem::new(t, pts, opts.r)?;

    let (kinds, rank_estimate) = match &opts.kinds {
        Some(kinds) => (kinds.clone(), None),
        None => {
            let rank = estimate_rank(t)?;
            let kinds = if opts.r > rank {
                vec![FilterKind::Left3, FilterKind::Right3, FilterKind::Central3]
            } else {
                vec![FilterKind::Left3, FilterKind::Right3]
            };
            (kinds, Some(rank))
        }
    };

    let variant = Variant::Implicit { kinds: &kinds };
    let best =
        best_restart(opts.restarts, opts.seed, |seed| single_run(&problem, &variant, opts, seed))?;
    let mut result = super::varpro_polish(&problem, &variant, opts, best)?;
    result.rank_estimate = rank_estimate;
    Ok(result)
}
