//! Central finite differences against the analytic gradients of each loss,
//! printing the worst relative error per objective.
//!
//! Run with: cargo run -p unipref --example gradient_check

use unipref::data::{BinaryLabel, BinaryLabelRecord, PreferenceRecord};
use unipref::loss::{dpo_loss, group_advantages, grpo_loss, kto_loss, sft_loss, GroupRollout};
use unipref::policy::{GradTable, PolicyParams, PolicySnapshot};
use unipref::rng::seeded_rng;
use unipref::vocab::{Sequence, Vocabulary};

fn vocab(n: usize) -> Vocabulary {
    let symbols: Vec<String> = (0..n - 1)
        .map(|i| format!("w{i}"))
        .chain(std::iter::once("<eos>".to_string()))
        .collect();
    Vocabulary::new(symbols, n - 1).unwrap()
}

fn finite_diff<F: Fn(&PolicyParams) -> f64>(params: &PolicyParams, f: F, h: f64) -> GradTable {
    let mut out = GradTable::zeros_like(params);
    for state in 0..params.n_states() {
        for t in 0..params.vocab().size() {
            let mut plus = params.clone();
            plus.add_logit(state, t, h);
            let mut minus = params.clone();
            minus.add_logit(state, t, -h);
            out.add_at(state, t, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}

fn main() -> unipref::Result<()> {
    let h = 1e-5;
    let mut rng = seeded_rng(1, "gradcheck");
    let params = PolicyParams::random(vocab(3), 1, 1.5, &mut rng)?;
    let reference = PolicyParams::random(vocab(3), 1, 1.5, &mut rng)?;
    let prompt = Sequence::new(vec![0]);

    let r1 = params.sample_response(&prompt, 4, &mut rng);
    let r2 = params.sample_response(&prompt, 4, &mut rng);
    let batch = vec![(&prompt, &r1), (&prompt, &r2)];
    let lv = sft_loss(&params, &batch)?;
    let fd = finite_diff(&params, |q| sft_loss(q, &batch).unwrap().scalar, h);
    println!(
        "sft : max abs diff {:.3e} (grad norm {:.3})",
        lv.gradient.max_abs_diff(&fd),
        lv.gradient.l2_norm()
    );

    let old = PolicySnapshot::new(reference.clone());
    let responses: Vec<Sequence> = (0..4)
        .map(|_| old.params().sample_response(&prompt, 4, &mut rng))
        .collect();
    let rewards: Vec<f64> = responses.iter().map(|r| (r.len() % 2) as f64).collect();
    let advantages = group_advantages(&rewards, 1e-8);
    let old_logprobs: Vec<Vec<f64>> = responses
        .iter()
        .map(|r| {
            let mut lps = Vec::new();
            old.params().visit_response(&prompt, r, |s, t, _| {
                lps.push(old.params().token_logprob(s, t));
            });
            lps
        })
        .collect();
    let rollout = GroupRollout {
        prompt: prompt.clone(),
        responses,
        rewards,
        advantages,
        old_logprobs,
        coefs: None,
    };
    let rollouts = std::slice::from_ref(&rollout);
    let lv = grpo_loss(&params, &old, &reference, rollouts, 0.2, 0.05)?;
    let fd = finite_diff(
        &params,
        |q| {
            grpo_loss(q, &old, &reference, rollouts, 0.2, 0.05)
                .unwrap()
                .scalar
        },
        h,
    );
    println!(
        "grpo: max abs diff {:.3e} (grad norm {:.3})",
        lv.gradient.max_abs_diff(&fd),
        lv.gradient.l2_norm()
    );

    let prefs = vec![PreferenceRecord {
        prompt: prompt.clone(),
        winner: Sequence::new(vec![1, 2]),
        loser: Sequence::new(vec![0, 0, 2]),
    }];
    let lv = dpo_loss(&params, &reference, &prefs, 0.7)?;
    let fd = finite_diff(
        &params,
        |q| dpo_loss(q, &reference, &prefs, 0.7).unwrap().scalar,
        h,
    );
    println!(
        "dpo : max abs diff {:.3e} (grad norm {:.3})",
        lv.gradient.max_abs_diff(&fd),
        lv.gradient.l2_norm()
    );

    let labeled = vec![
        BinaryLabelRecord {
            prompt: prompt.clone(),
            response: Sequence::new(vec![1, 2]),
            label: BinaryLabel::Desirable,
        },
        BinaryLabelRecord {
            prompt,
            response: Sequence::new(vec![0, 2]),
            label: BinaryLabel::Undesirable,
        },
    ];
    let lv = kto_loss(&params, &reference, &labeled, 0.8, 1.5)?;
    let fd = finite_diff(
        &params,
        |q| kto_loss(q, &reference, &labeled, 0.8, 1.5).unwrap().scalar,
        h,
    );
    println!(
        "kto : max abs diff {:.3e} (grad norm {:.3})",
        lv.gradient.max_abs_diff(&fd),
        lv.gradient.l2_norm()
    );
    Ok(())
}
