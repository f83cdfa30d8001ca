//! Diagnostic: how often generations started from domain-B prompts drift
//! into domain-A symbols. Manual tool.

use dswm_core::experiments::{ExperimentConfig, ExperimentSetup};
use dswm_core::watermark::generate_batch;
use dswm_core::Result;

#[test]
#[ignore]
fn domain_switch_rate() -> Result<()> {
    let xcfg = ExperimentConfig::default();
    let setup = ExperimentSetup::build(xcfg.clone())?;
    // domain-A symbol ids: everything that appears in train_a but not train_b
    let mut in_a = vec![false; setup.vocab.size()];
    let mut in_b = vec![false; setup.vocab.size()];
    for s in &setup.train_a.sequences {
        for &id in s {
            in_a[id] = true;
        }
    }
    for s in &setup.train_b.sequences {
        for &id in s {
            in_b[id] = true;
        }
    }
    let prompts = setup.sample_prompts(1, 500, xcfg.prompt_tokens, 777);
    let responses = generate_batch(&setup.teacher, &prompts, 200, None, 1.0, 778)?;
    let mut a_only_tokens = 0usize;
    let mut total = 0usize;
    let mut texts_with_drift = 0usize;
    for r in &responses {
        let drift = r.iter().filter(|&&id| in_a[id] && !in_b[id]).count();
        a_only_tokens += drift;
        total += r.len();
        if drift > 10 {
            texts_with_drift += 1;
        }
    }
    println!(
        "[switch] base on B prompts: A-only token rate={:.4}, texts with >10 A tokens: {}/500",
        a_only_tokens as f64 / total as f64,
        texts_with_drift
    );
    Ok(())
}
