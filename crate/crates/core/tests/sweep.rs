//! Capacity sweep: raw green emission rate of the distilled student for
//! several model sizes. Manual tool:
//! `cargo test -p dswm-core --test sweep -- --ignored --nocapture`

use std::time::Instant;

use dswm_core::corpus::TokenSequence;
use dswm_core::distill::{distill, DistillConfig};
use dswm_core::experiments::{sub_seed, ExperimentConfig, ExperimentSetup};
use dswm_core::watermark::{context_seed, generate_batch, is_green};
use dswm_core::Result;

fn raw_green_fraction(
    model: &dswm_core::lm::ModelParams,
    prompts: &[TokenSequence],
    wcfg: &dswm_core::watermark::WatermarkConfig,
    n_tokens: usize,
    seed: u64,
) -> Result<f64> {
    let responses = generate_batch(model, prompts, n_tokens, None, 1.0, seed)?;
    let mut green = 0usize;
    let mut total = 0usize;
    for (p, r) in prompts.iter().zip(&responses) {
        let mut stream = p.clone();
        stream.extend_from_slice(r);
        for t in p.len()..stream.len() {
            let ctx = &stream[t - wcfg.h..t];
            if is_green(context_seed(wcfg, ctx), stream[t], wcfg.gamma) {
                green += 1;
            }
            total += 1;
        }
    }
    Ok(green as f64 / total as f64)
}

#[test]
#[ignore]
fn capacity_sweep() -> Result<()> {
    // (embed_dim, hidden_dim, distill_steps)
    let grid = [
        (28usize, 112usize, 1000usize),
        (32, 128, 1000),
        (32, 128, 1500),
    ];
    for (d, m, steps) in grid {
        let mut xcfg = ExperimentConfig::default();
        xcfg.embed_dim = d;
        xcfg.hidden_dim = m;
        let t0 = Instant::now();
        let setup = ExperimentSetup::build(xcfg.clone())?;
        let t_teacher = t0.elapsed().as_secs_f64();
        let dcfg = DistillConfig {
            steps,
            ..xcfg.distill_config(sub_seed(xcfg.master_seed, &[2]))
        };
        let t1 = Instant::now();
        let (student, log) = distill(
            &setup.teacher,
            &setup.train_a,
            &setup.train_b,
            &dcfg,
            &xcfg.watermark,
        )?;
        let t_distill = t1.elapsed().as_secs_f64();
        let prompts = setup.sample_prompts(0, 100, xcfg.prompt_tokens, 777);
        let gf = raw_green_fraction(&student, &prompts, &xcfg.watermark, 100, 778)?;
        let l_first = log.first().unwrap().l_target;
        let l_mid = log[log.len() / 2].l_target;
        let l_last = log.last().unwrap().l_target;
        println!(
            "[sweep] d={d} m={m} steps={steps}: raw_green={gf:.3} kl {l_first:.3}->{l_mid:.3}->{l_last:.3} teacher {t_teacher:.0}s distill {t_distill:.0}s"
        );
    }
    Ok(())
}
