use decouple_core::filters::FilterKind;
use decouple_core::fit::{estimate_constants, fit_branches, mean_error, relative_error};
use decouple_core::ftd::{ftd_implicit, FtdOptions};
use decouple_core::jacobian::{build_tensor, sample_uniform};
use decouple_core::lm::LmOptions;
use decouple_core::model::random_decoupled;
use std::time::Instant;

fn main() {
    let target = random_decoupled(1, 5, 1, 3, 5).unwrap();
    let pts = sample_uniform(1 ^ 0x706f6c79, 200, 5, -1.5, 1.5).unwrap();
    let t = build_tensor(&target, &pts).unwrap();
    for (seed, sweeps, lm_iters) in [(1u64, 400usize, 40usize), (1, 200, 100), (6, 400, 40), (6, 200, 100)] {
        let start = Instant::now();
        let opts = FtdOptions {
            r: 3,
            kinds: Some(vec![FilterKind::Left3, FilterKind::Right3]),
            seed,
            restarts: 1,
            max_sweeps: sweeps,
            lm: LmOptions { max_iters: lm_iters, ..Default::default() },
            ..Default::default()
        };
        let res = ftd_implicit(&t, &pts, &opts).unwrap();
        let (fitted, _) = fit_branches(&res, 5).unwrap();
        let fitted = estimate_constants(&fitted, &target, &pts).unwrap();
        let err = mean_error(&relative_error(&target, &fitted, &pts).unwrap()).unwrap();
        println!(
            "seed {seed} sweeps {sweeps} lm {lm_iters}: e={err:.3}% residual={:.2e} used={} in {:?}",
            res.reconstruction_residual(&t, &pts).unwrap(),
            res.sweeps,
            start.elapsed()
        );
    }
}
