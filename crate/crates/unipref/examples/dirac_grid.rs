//! Imitation as a limiting case of reward maximization: over a grid of
//! single-token policies, the maximizers of the expected Dirac reward at a
//! target response coincide exactly with the minimizers of its negative
//! log-likelihood.
//!
//! Run with: cargo run -p unipref --example dirac_grid

use unipref::loss::dirac_equivalence_check;
use unipref::vocab::{Sequence, Vocabulary};

fn main() -> unipref::Result<()> {
    let vocab = Vocabulary::new(vec!["a".into(), "<eos>".into()], 1)?;
    let target = Sequence::new(vec![0]);
    let report = dirac_equivalence_check(&vocab, &target, 1, 50, -3.0, 3.0)?;

    println!("grid points            : {}", report.grid_points);
    println!(
        "argmax(expected reward): {:?}",
        report.argmax_expected_reward
    );
    println!("argmin(nll)            : {:?}", report.argmin_nll);
    println!("maximizer sets equal   : {}", report.maximizer_sets_equal);
    println!("max |E[reward]-pi(y*)| : {:e}", report.max_pointwise_gap);

    // A coarse slice of the reward/nll landscape along the grid diagonal.
    println!("\n  E[reward]      nll      exp(-nll)");
    let res = 50usize;
    for i in (0..res).step_by(7) {
        let idx = i * res + (res - 1 - i); // varying target logit against its complement
        println!(
            "   {:8.5}  {:8.5}   {:8.5}",
            report.expected_reward[idx],
            report.nll[idx],
            (-report.nll[idx]).exp()
        );
    }
    Ok(())
}
