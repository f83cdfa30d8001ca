//! Deterministic experiment harness: synthetic two-domain corpora, a model
//! zoo (base teacher, distilled students, finetuned variants), and the
//! reliability / harmlessness / persistence / robustness / ablation /
//! trigger-token / multi-key / leakage protocols, all emitting CSV (and SVG
//! via [`emit_plot`]).
//!
//! Every run is a pure function of its config: trial and grid seeds derive
//! from the master seed with tagged SplitMix64 folds, so CSVs reproduce
//! byte-for-byte.

mod plot;
mod synth;

pub use plot::{emit_plot, render_svg, PlotKind};
pub use synth::{make_synthetic_domains, SyntheticCorpora};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, Split, TokenId, TokenSequence, TokenizeMode, Vocabulary};
use crate::detector::{
    self, fingerprint_detect, ln_p_value, roc_curve, score_responses, tpr_at_fpr, PValueMethod,
    QuerySet,
};
use crate::distill::{self, DistillConfig};
use crate::lm::{self, LrSchedule, ModelConfig, ModelParams, TrainConfig};
use crate::par;
use crate::rng::{seq_seed, splitmix64, Stream};
use crate::watermark::{generate, generate_batch, WatermarkConfig};
use crate::{Error, Result};

// seed tags folded into the master seed per experiment stage
const TAG_BASE: u64 = 1;
const TAG_STUDENT: u64 = 2;
const TAG_REL: u64 = 3;
const TAG_HARM: u64 = 4;
const TAG_PERS: u64 = 5;
const TAG_ROB: u64 = 6;
const TAG_ABL: u64 = 7;
const TAG_TRIG: u64 = 8;
const TAG_KEY: u64 = 9;
const TAG_LEAK: u64 = 10;

/// Tagged sub-seed derivation: folds each tag into the master seed.
pub fn sub_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |s, &t| {
        splitmix64(s ^ t.wrapping_mul(crate::rng::GOLDEN))
    })
}

/// Full harness configuration. The first block holds the experiment protocol
/// knobs; the rest sizes the toy models and training runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub trials: usize,
    pub query_grid: Vec<usize>,
    pub alpha: f64,
    pub response_tokens: usize,
    pub domains: Vec<String>,
    pub leakage_grid: Vec<f64>,
    /// (h, delta) pairs for the hyperparameter ablation.
    pub hyper_grid: Vec<(usize, f64)>,
    pub watermark: WatermarkConfig,

    // model + training knobs
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_cap: usize,
    pub base_steps: usize,
    pub base_lr: f64,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub prompt_tokens: usize,
    pub eval_texts: usize,
    pub temperature: f64,

    // trigger-token family: the trigger must stay inside the model window
    // for the whole response, so these runs use short pieces and a dedicated
    // (wider) context length with seq_len == context
    pub trigger_context: usize,
    pub trigger_piece: usize,
    pub trigger_prompt: usize,
    pub trigger_eval_texts: usize,
    pub trigger_base_steps: usize,
    pub trigger_distill_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0xD05EED,
            trials: 10,
            query_grid: vec![1, 10, 100],
            alpha: 1e-5,
            response_tokens: 200,
            domains: vec!["alpha".into(), "beta".into()],
            leakage_grid: vec![0.0, 0.1, 0.5, 1.0],
            hyper_grid: vec![(1, 2.0), (1, 4.0), (2, 2.0), (2, 4.0), (3, 4.0)],
            watermark: WatermarkConfig {
                key: 0xA11CE,
                gamma: 0.25,
                delta: 4.0,
                h: 1,
            },
            context: 8,
            embed_dim: 40,
            hidden_dim: 160,
            vocab_cap: 256,
            base_steps: 800,
            base_lr: 1e-3,
            distill_steps: 1500,
            distill_lr: 1e-3,
            lambda: 2.5,
            batch_size: 16,
            seq_len: 40,
            finetune_steps: 1000,
            finetune_lr: 3e-4,
            prompt_tokens: 16,
            eval_texts: 500,
            temperature: 1.0,
            trigger_context: 16,
            trigger_piece: 15,
            trigger_prompt: 6,
            trigger_eval_texts: 1000,
            trigger_base_steps: 300,
            trigger_distill_steps: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.query_grid.is_empty() || self.leakage_grid.is_empty() || self.hyper_grid.is_empty()
        {
            return Err(Error::InvalidConfig("grids must be non-empty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha outside (0,1)".into()));
        }
        if self.domains.len() != 2 {
            return Err(Error::InvalidConfig(
                "exactly two domain names are required".into(),
            ));
        }
        if self.response_tokens == 0 || self.eval_texts == 0 || self.prompt_tokens == 0 {
            return Err(Error::InvalidConfig(
                "response_tokens, eval_texts, prompt_tokens must be >= 1".into(),
            ));
        }
        if self.trigger_prompt >= self.trigger_context || self.trigger_prompt < 2 {
            return Err(Error::InvalidConfig(
                "trigger_prompt must be in [2, trigger_context)".into(),
            ));
        }
        self.watermark.validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context: self.context,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.base_steps,
            lr: self.base_lr,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            lr: self.distill_lr,
            steps: self.distill_steps,
            lambda: self.lambda,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed,
            kgwd_mode: false,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Shared fixtures: corpora, vocabulary, datasets, and the base teacher
/// trained on both domains.
pub struct ExperimentSetup {
    pub xcfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub train_a: DomainDataset,
    pub heldout_a: DomainDataset,
    pub train_b: DomainDataset,
    pub heldout_b: DomainDataset,
    pub teacher: ModelParams,
}

fn split_datasets(
    name: &str,
    vocab: &Vocabulary,
    text: &str,
) -> Result<(DomainDataset, DomainDataset)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let ids = vocab.encode(line);
        if i % 10 == 9 {
            held.push(ids);
        } else {
            train.push(ids);
        }
    }
    Ok((
        DomainDataset::new(name, train, Split::Train)?,
        DomainDataset::new(name, held, Split::Heldout)?,
    ))
}

impl ExperimentSetup {
    pub fn build(xcfg: ExperimentConfig) -> Result<Self> {
        xcfg.validate()?;
        let corpora = make_synthetic_domains(xcfg.master_seed);
        let vocab_text = format!("{}{}", corpora.text_a, corpora.text_b).replace('\n', "");
        let vocab = Vocabulary::build(&vocab_text, TokenizeMode::Char, xcfg.vocab_cap)?;
        let (train_a, heldout_a) = split_datasets(&xcfg.domains[0], &vocab, &corpora.text_a)?;
        let (train_b, heldout_b) = split_datasets(&xcfg.domains[1], &vocab, &corpora.text_b)?;
        let both = train_a.union(&train_b, "base");
        let teacher = lm::train_base(
            xcfg.model_config(vocab.size()),
            &both,
            &xcfg.train_config(sub_seed(xcfg.master_seed, &[TAG_BASE])),
        )?;
        Ok(ExperimentSetup {
            xcfg,
            vocab,
            train_a,
            heldout_a,
            train_b,
            heldout_b,
            teacher,
        })
    }

    /// Distills the in-domain (first-domain) student with the configured
    /// watermark.
    pub fn distill_student(&self) -> Result<ModelParams> {
        let dcfg = self
            .xcfg
            .distill_config(sub_seed(self.xcfg.master_seed, &[TAG_STUDENT]));
        let (student, _) = distill::distill(
            &self.teacher,
            &self.train_a,
            &self.train_b,
            &dcfg,
            &self.xcfg.watermark,
        )?;
        Ok(student)
    }

    /// Joint full-watermark baseline (target = both domains, no penalty).
    pub fn distill_kgwd(&self) -> Result<ModelParams> {
        let mut dcfg = self
            .xcfg
            .distill_config(sub_seed(self.xcfg.master_seed, &[TAG_STUDENT, 0xFF]));
        dcfg.kgwd_mode = true;
        let (student, _) = distill::distill(
            &self.teacher,
            &self.train_a,
            &self.train_b,
            &dcfg,
            &self.xcfg.watermark,
        )?;
        Ok(student)
    }

    fn heldout(&self, domain: usize) -> &DomainDataset {
        if domain == 0 {
            &self.heldout_a
        } else {
            &self.heldout_b
        }
    }

    /// Draws `count` held-out prompts of `len` tokens from a domain, without
    /// replacement while the pool lasts.
    pub fn sample_prompts(
        &self,
        domain: usize,
        count: usize,
        len: usize,
        seed: u64,
    ) -> Vec<TokenSequence> {
        sample_prompt_pool(&self.heldout(domain).sequences, count, len, seed)
    }
}

fn sample_prompt_pool(
    seqs: &[TokenSequence],
    count: usize,
    len: usize,
    seed: u64,
) -> Vec<TokenSequence> {
    let mut rng = Stream::new(seed);
    let picks: Vec<usize> = if count <= seqs.len() {
        let mut idx: Vec<usize> = (0..seqs.len()).collect();
        for i in 0..count {
            let j = i + rng.next_index(seqs.len() - i);
            idx.swap(i, j);
        }
        idx[..count].to_vec()
    } else {
        (0..count).map(|_| rng.next_index(seqs.len())).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let s = &seqs[i];
            s[..len.min(s.len())].to_vec()
        })
        .collect()
}

/// Plain-sampling oracle over a local model: the per-query seed derives from
/// the prompt ids, so concurrent dispatch stays deterministic.
pub fn model_oracle<'a>(
    model: &'a ModelParams,
    n_tokens: usize,
    temperature: f64,
    master_seed: u64,
) -> impl Fn(&[TokenId]) -> Result<TokenSequence> + Sync + 'a {
    move |prompt| {
        generate(
            model,
            prompt,
            n_tokens,
            None,
            temperature,
            seq_seed(master_seed, prompt),
        )
    }
}

// --- reliability -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReliabilityRow {
    pub model: String,
    pub domain: String,
    /// Prefix id (robustness) or finetune-set name (persistence).
    pub variant: Option<String>,
    pub queries: usize,
    pub trial: usize,
    pub p_value: f64,
    pub ln_p: f64,
    /// Whether the verdict was correct for this model (flagged iff
    /// watermarked). The pair accuracy is the mean over both rows of a trial.
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct ReliabilityOutcome {
    pub rows: Vec<ReliabilityRow>,
}

impl ReliabilityOutcome {
    /// Declared schema: model,domain,queries,trial,p_value,accuracy
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,domain,queries,trial,p_value,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model,
                r.domain,
                r.queries,
                r.trial,
                r.p_value,
                if r.correct { 1.0 } else { 0.0 }
            ));
        }
        out
    }

    /// Same schema with a trailing prefix column.
    pub fn to_csv_with_prefix(&self) -> String {
        let mut out = String::from("model,domain,queries,trial,p_value,accuracy,prefix\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model,
                r.domain,
                r.queries,
                r.trial,
                r.p_value,
                if r.correct { 1.0 } else { 0.0 },
                r.variant.as_deref().unwrap_or("-")
            ));
        }
        out
    }

    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.model) {
                names.push(r.model.clone());
            }
        }
        names
    }

    fn mean<F: Fn(&ReliabilityRow) -> bool>(&self, value: impl Fn(&ReliabilityRow) -> f64, keep: F) -> f64 {
        let vals: Vec<f64> = self.rows.iter().filter(|r| keep(r)).map(value).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_p(&self, model: &str) -> f64 {
        self.mean(|r| r.p_value, |r| r.model == model)
    }

    pub fn mean_log10_p(&self, model: &str, queries: usize) -> f64 {
        self.mean(
            |r| r.ln_p / std::f64::consts::LN_10,
            |r| r.model == model && r.queries == queries,
        )
    }

    /// Mean correctness over every row at this query count: the
    /// {watermarked, base} pair accuracy averaged over trials.
    pub fn pair_accuracy(&self, queries: usize) -> f64 {
        self.mean(
            |r| if r.correct { 1.0 } else { 0.0 },
            |r| r.queries == queries,
        )
    }

    /// Plot-ready CSV: model,queries,mean_log10_p
    pub fn logp_plot_csv(&self, query_grid: &[usize]) -> String {
        let mut out = String::from("model,queries,mean_log10_p\n");
        for m in self.models() {
            for &q in query_grid {
                out.push_str(&format!("{m},{q},{}\n", self.mean_log10_p(&m, q)));
            }
        }
        out
    }

    /// Plot-ready CSV: model,queries,accuracy (per-model correctness rate)
    pub fn accuracy_plot_csv(&self, query_grid: &[usize]) -> String {
        let mut out = String::from("model,queries,accuracy\n");
        for m in self.models() {
            for &q in query_grid {
                let acc = self.mean(
                    |r| if r.correct { 1.0 } else { 0.0 },
                    |r| r.model == m && r.queries == q,
                );
                out.push_str(&format!("{m},{q},{acc}\n"));
            }
        }
        out
    }
}

struct PairRun<'a> {
    wm_name: &'a str,
    wm_model: &'a ModelParams,
    base_model: &'a ModelParams,
    prefix: Option<(&'a str, &'a [TokenId])>,
    temperature: f64,
    prompt_len: usize,
    tag: u64,
}

/// Runs fingerprint detection for a {watermarked, base} pair over the query
/// grid and trial count. Prompts are shared within a trial so the comparison
/// is paired.
fn pair_reliability(setup: &ExperimentSetup, run: &PairRun) -> Result<Vec<ReliabilityRow>> {
    let x = &setup.xcfg;
    let mut rows = Vec::new();
    for &q in &x.query_grid {
        for trial in 0..x.trials {
            let prompt_seed = sub_seed(x.master_seed, &[run.tag, 1, q as u64, trial as u64]);
            let mut prompts = setup.sample_prompts(0, q, run.prompt_len, prompt_seed);
            if let Some((_, prefix_ids)) = run.prefix {
                for p in prompts.iter_mut() {
                    let mut full = prefix_ids.to_vec();
                    full.extend_from_slice(p);
                    *p = full;
                }
            }
            let queries = QuerySet::with_trim(prompts, x.response_tokens)?;
            for (mi, (name, model)) in
                [(run.wm_name, run.wm_model), ("base", run.base_model)]
                    .into_iter()
                    .enumerate()
            {
                let oracle_seed = sub_seed(
                    x.master_seed,
                    &[run.tag, 2, q as u64, trial as u64, mi as u64],
                );
                let verdict = fingerprint_detect(
                    model_oracle(model, x.response_tokens, run.temperature, oracle_seed),
                    &queries,
                    &x.watermark,
                    x.alpha,
                    PValueMethod::ExactBinomial,
                )?;
                let watermarked = mi == 0;
                rows.push(ReliabilityRow {
                    model: name.to_string(),
                    domain: x.domains[0].clone(),
                    variant: run.prefix.map(|(id, _)| id.to_string()),
                    queries: q,
                    trial,
                    p_value: verdict.p_value,
                    ln_p: verdict.detection.ln_p,
                    correct: verdict.is_fingerprinted == watermarked,
                });
            }
        }
    }
    Ok(rows)
}

/// Fingerprint accuracy and p-values vs query count for the student against
/// the base model, on in-domain prompts.
pub fn reliability_experiment(
    student: &ModelParams,
    base: &ModelParams,
    setup: &ExperimentSetup,
) -> Result<ReliabilityOutcome> {
    let rows = pair_reliability(
        setup,
        &PairRun {
            wm_name: "student",
            wm_model: student,
            base_model: base,
            prefix: None,
            temperature: setup.xcfg.temperature,
            prompt_len: setup.xcfg.prompt_tokens,
            tag: TAG_REL,
        },
    )?;
    Ok(ReliabilityOutcome { rows })
}

// --- harmlessness ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HarmlessnessRow {
    pub model: String,
    pub domain: String,
    pub tpr_at_1: f64,
    pub teacher_nll: f64,
}

pub fn harmlessness_csv(rows: &[HarmlessnessRow]) -> String {
    let mut out = String::from("model,domain,tpr_at_1,teacher_nll\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.domain, r.tpr_at_1, r.teacher_nll
        ));
    }
    out
}

/// Per-text watermark strength (TPR at the 1% analytic threshold) and mean
/// per-token NLL of generations under the frozen teacher, per
/// (model, domain).
pub fn harmlessness_experiment(
    models: &[(&str, &ModelParams)],
    setup: &ExperimentSetup,
) -> Result<Vec<HarmlessnessRow>> {
    let x = &setup.xcfg;
    let mut rows = Vec::new();
    for (mi, (name, model)) in models.iter().enumerate() {
        for domain in 0..2 {
            let prompts = setup.sample_prompts(
                domain,
                x.eval_texts,
                x.prompt_tokens,
                sub_seed(x.master_seed, &[TAG_HARM, 1, mi as u64, domain as u64]),
            );
            let responses = generate_batch(
                model,
                &prompts,
                x.response_tokens,
                None,
                x.temperature,
                sub_seed(x.master_seed, &[TAG_HARM, 2, mi as u64, domain as u64]),
            )?;
            let counts: Vec<(usize, usize)> = par::map_indexed(prompts.len(), |i| {
                score_responses(&[(prompts[i].clone(), responses[i].clone())], &x.watermark)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let tpr = tpr_at_fpr(&counts, x.watermark.gamma, 0.01)?;

            let nlls: Vec<f64> = par::map_indexed(prompts.len(), |i| {
                lm::response_nll(&setup.teacher, &prompts[i], &responses[i])
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let teacher_nll = nlls.iter().sum::<f64>() / nlls.len() as f64;

            rows.push(HarmlessnessRow {
                model: name.to_string(),
                domain: x.domains[domain].clone(),
                tpr_at_1: tpr,
                teacher_nll,
            });
        }
    }
    Ok(rows)
}

// --- persistence -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PersistenceOutcome {
    /// Raw reliability rows; `variant` carries the finetune-set name.
    pub rows: Vec<ReliabilityRow>,
    pub finetune_sets: Vec<String>,
}

impl PersistenceOutcome {
    /// Declared schema: model,finetune_set,queries,accuracy (pair accuracy
    /// aggregated over trials).
    pub fn to_csv(&self, query_grid: &[usize]) -> String {
        let mut out = String::from("model,finetune_set,queries,accuracy\n");
        for set in &self.finetune_sets {
            for &q in query_grid {
                out.push_str(&format!(
                    "student-ft,{set},{q},{}\n",
                    self.pair_accuracy(set, q)
                ));
            }
        }
        out
    }

    pub fn mean_log10_p(&self, set: &str, queries: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.variant.as_deref() == Some(set)
                    && r.queries == queries
                    && r.model != "base"
            })
            .map(|r| r.ln_p / std::f64::consts::LN_10)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_p(&self, set: &str, queries: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.variant.as_deref() == Some(set)
                    && r.queries == queries
                    && r.model != "base"
            })
            .map(|r| r.p_value)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn pair_accuracy(&self, set: &str, queries: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant.as_deref() == Some(set) && r.queries == queries)
            .map(|r| if r.correct { 1.0 } else { 0.0 })
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Finetunes the student on each dataset (in-domain and off-domain), then
/// reruns the reliability protocol per finetuned model.
pub fn persistence_experiment(
    student: &ModelParams,
    setup: &ExperimentSetup,
) -> Result<PersistenceOutcome> {
    let x = &setup.xcfg;
    let sets: [(&String, &DomainDataset); 2] = [
        (&x.domains[0], &setup.train_a),
        (&x.domains[1], &setup.train_b),
    ];
    let mut rows = Vec::new();
    let mut set_names = Vec::new();
    for (si, (set_name, ds)) in sets.into_iter().enumerate() {
        let tcfg = TrainConfig {
            steps: x.finetune_steps,
            lr: x.finetune_lr,
            batch_size: x.batch_size,
            seq_len: x.seq_len,
            seed: sub_seed(x.master_seed, &[TAG_PERS, si as u64]),
            schedule: LrSchedule::Constant,
        };
        let finetuned = distill::finetune(student, ds, &tcfg)?;
        let mut set_rows = pair_reliability(
            setup,
            &PairRun {
                wm_name: "student-ft",
                wm_model: &finetuned,
                base_model: &setup.teacher,
                prefix: None,
                temperature: x.temperature,
                prompt_len: x.prompt_tokens,
                tag: sub_seed(x.master_seed, &[TAG_PERS, 0x100, si as u64]),
            },
        )?;
        for r in set_rows.iter_mut() {
            r.variant = Some(set_name.clone());
        }
        rows.extend(set_rows);
        set_names.push(set_name.clone());
    }
    Ok(PersistenceOutcome {
        rows,
        finetune_sets: set_names,
    })
}

// --- robustness ---------------------------------------------------------------

/// Reruns reliability with fixed distractor prefixes prepended to every
/// query, plus a greedy (temperature 0) variant per prefix. Prompts are kept
/// short enough that the prefix overlaps the model window.
pub fn robustness_experiment(
    student: &ModelParams,
    setup: &ExperimentSetup,
) -> Result<ReliabilityOutcome> {
    let x = &setup.xcfg;
    let prefix_len = 6;
    let prompt_len = 10;
    let prefixes: Vec<TokenSequence> = (0..3usize)
        .map(|i| {
            setup.sample_prompts(
                0,
                1,
                prefix_len,
                sub_seed(x.master_seed, &[TAG_ROB, 0xF0, i as u64]),
            )[0]
            .clone()
        })
        .collect();
    let mut rows = Vec::new();
    for (pi, prefix) in prefixes.iter().enumerate() {
        for greedy in [false, true] {
            let label = if greedy {
                format!("p{pi}:greedy")
            } else {
                format!("p{pi}")
            };
            let run_rows = pair_reliability(
                setup,
                &PairRun {
                    wm_name: "student",
                    wm_model: student,
                    base_model: &setup.teacher,
                    prefix: Some((&label, prefix)),
                    temperature: if greedy { 0.0 } else { x.temperature },
                    prompt_len,
                    tag: sub_seed(x.master_seed, &[TAG_ROB, pi as u64, greedy as u64]),
                },
            )?;
            rows.extend(run_rows);
        }
    }
    Ok(ReliabilityOutcome { rows })
}

// --- ablation -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub h: usize,
    pub delta: f64,
    pub domain: String,
    pub tpr_at_1: f64,
    pub tpr_out: f64,
    pub teacher_nll: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("h,delta,domain,tpr_at_1,tpr_out,teacher_nll\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.h, r.delta, r.domain, r.tpr_at_1, r.tpr_out, r.teacher_nll
        ));
    }
    out
}

/// Distills one student per (h, delta) pair on the same domain and reports
/// in/out-of-domain watermark strength plus the in-domain teacher-NLL
/// quality proxy.
pub fn ablation_experiment(setup: &ExperimentSetup) -> Result<Vec<AblationRow>> {
    let x = &setup.xcfg;
    let mut rows = Vec::new();
    for (gi, &(h, delta)) in x.hyper_grid.iter().enumerate() {
        let wcfg = WatermarkConfig {
            h,
            delta,
            ..x.watermark
        };
        let dcfg = x.distill_config(sub_seed(x.master_seed, &[TAG_ABL, gi as u64]));
        let (student, _) =
            distill::distill(&setup.teacher, &setup.train_a, &setup.train_b, &dcfg, &wcfg)?;

        let mut tprs = [0.0f64; 2];
        let mut nll_in = 0.0;
        for domain in 0..2 {
            let prompts = setup.sample_prompts(
                domain,
                x.eval_texts,
                x.prompt_tokens,
                sub_seed(x.master_seed, &[TAG_ABL, 1, gi as u64, domain as u64]),
            );
            let responses = generate_batch(
                &student,
                &prompts,
                x.response_tokens,
                None,
                x.temperature,
                sub_seed(x.master_seed, &[TAG_ABL, 2, gi as u64, domain as u64]),
            )?;
            let counts: Vec<(usize, usize)> = par::map_indexed(prompts.len(), |i| {
                score_responses(&[(prompts[i].clone(), responses[i].clone())], &wcfg)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            tprs[domain] = tpr_at_fpr(&counts, wcfg.gamma, 0.01)?;
            if domain == 0 {
                let nlls: Vec<f64> = par::map_indexed(prompts.len(), |i| {
                    lm::response_nll(&setup.teacher, &prompts[i], &responses[i])
                })
                .into_iter()
                .collect::<Result<_>>()?;
                nll_in = nlls.iter().sum::<f64>() / nlls.len() as f64;
            }
        }
        rows.push(AblationRow {
            h,
            delta,
            domain: x.domains[0].clone(),
            tpr_at_1: tprs[0],
            tpr_out: tprs[1],
            teacher_nll: nll_in,
        });
    }
    Ok(rows)
}

// --- trigger-token family ---------------------------------------------------

/// Fixtures for the watermark-trigger experiments: short text pieces so a
/// leading trigger token stays inside the model window for the whole
/// response, plus a dedicated teacher with the wider trigger context.
pub struct TriggerSetup {
    pub xcfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub plain_train: DomainDataset,
    pub held_pieces: Vec<TokenSequence>,
    pub teacher: ModelParams,
}

impl TriggerSetup {
    pub fn build(xcfg: ExperimentConfig, trigger_count: usize) -> Result<Self> {
        xcfg.validate()?;
        let corpora = make_synthetic_domains(xcfg.master_seed);
        let vocab_text = corpora.text_a.replace('\n', "");
        let vocab = Vocabulary::build(&vocab_text, TokenizeMode::Char, xcfg.vocab_cap)?
            .with_trigger_tokens(trigger_count)?;
        let all_ids = vocab.encode(&vocab_text);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, chunk) in all_ids.chunks_exact(xcfg.trigger_piece).enumerate() {
            if i % 10 == 9 {
                held.push(chunk.to_vec());
            } else {
                train.push(chunk.to_vec());
            }
        }
        let plain_train = DomainDataset::new("plain", train, Split::Train)?;
        let teacher = lm::train_base(
            ModelConfig {
                vocab_size: vocab.size(),
                context: xcfg.trigger_context,
                embed_dim: xcfg.embed_dim,
                hidden_dim: xcfg.hidden_dim,
            },
            &plain_train,
            &TrainConfig {
                steps: xcfg.trigger_base_steps,
                lr: xcfg.base_lr,
                batch_size: xcfg.batch_size,
                seq_len: xcfg.trigger_context,
                seed: sub_seed(xcfg.master_seed, &[TAG_TRIG, TAG_BASE]),
                schedule: LrSchedule::Constant,
            },
        )?;
        Ok(TriggerSetup {
            xcfg,
            vocab,
            plain_train,
            held_pieces: held,
            teacher,
        })
    }

    /// Training pieces with `trigger` prepended to a seeded fraction of the
    /// sequences (frac = 1.0 marks them all).
    pub fn triggered_dataset(&self, trigger: TokenId, frac: f64, seed: u64) -> DomainDataset {
        let n = self.plain_train.sequences.len();
        let take = (frac * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = Stream::new(seed);
        for i in 0..n.saturating_sub(1) {
            let j = i + rng.next_index(n - i);
            idx.swap(i, j);
        }
        let mark: std::collections::HashSet<usize> = idx[..take.min(n)].iter().cloned().collect();
        let seqs: Vec<TokenSequence> = self
            .plain_train
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if mark.contains(&i) {
                    let mut t = Vec::with_capacity(s.len() + 1);
                    t.push(trigger);
                    t.extend_from_slice(s);
                    t
                } else {
                    s.clone()
                }
            })
            .collect();
        DomainDataset {
            name: format!("triggered-{frac}"),
            sequences: seqs,
            split: Split::Train,
        }
    }

    pub fn distill_config(&self, seed: u64, steps: usize) -> DistillConfig {
        DistillConfig {
            lr: self.xcfg.distill_lr,
            steps,
            lambda: self.xcfg.lambda,
            batch_size: self.xcfg.batch_size,
            seq_len: self.xcfg.trigger_context,
            seed,
            kgwd_mode: false,
            schedule: LrSchedule::Constant,
        }
    }

    /// Per-text (green, scored) counts for generations prompted with or
    /// without the trigger; prompt + response together fill exactly one
    /// model window.
    pub fn eval_counts(
        &self,
        model: &ModelParams,
        trigger: Option<TokenId>,
        wcfg: &WatermarkConfig,
        texts: usize,
        seed: u64,
    ) -> Result<Vec<(usize, usize)>> {
        let x = &self.xcfg;
        let body = x.trigger_prompt - usize::from(trigger.is_some());
        let response_tokens = x.trigger_context - x.trigger_prompt;
        let mut rng = Stream::new(seed);
        let prompts: Vec<TokenSequence> = (0..texts)
            .map(|_| {
                let piece = &self.held_pieces[rng.next_index(self.held_pieces.len())];
                let mut p = Vec::with_capacity(x.trigger_prompt);
                if let Some(t) = trigger {
                    p.push(t);
                }
                p.extend_from_slice(&piece[..body]);
                p
            })
            .collect();
        let responses = generate_batch(
            model,
            &prompts,
            response_tokens,
            None,
            x.temperature,
            splitmix64(seed ^ 0x5EED),
        )?;
        par::map_indexed(prompts.len(), |i| {
            score_responses(&[(prompts[i].clone(), responses[i].clone())], wcfg)
        })
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TriggerOutcome {
    pub tpr_with: f64,
    pub tpr_without: f64,
    pub auc: f64,
    pub pooled_z_with: f64,
    pub pooled_z_without: f64,
    pub roc: Vec<(f64, f64)>,
}

impl TriggerOutcome {
    pub fn to_csv(&self) -> String {
        format!(
            "condition,tpr_at_1,pooled_z\nwith_trigger,{},{}\nwithout_trigger,{},{}\n",
            self.tpr_with, self.pooled_z_with, self.tpr_without, self.pooled_z_without
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.roc {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

fn per_text_p_values(counts: &[(usize, usize)], gamma: f64) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&(g, n)| {
            Ok(ln_p_value(g, n, gamma, PValueMethod::Normal)?
                .exp()
                .max(f64::MIN_POSITIVE))
        })
        .collect()
}

fn pooled_z(counts: &[(usize, usize)], gamma: f64) -> Result<f64> {
    let g: usize = counts.iter().map(|c| c.0).sum();
    let n: usize = counts.iter().map(|c| c.1).sum();
    detector::z_statistic(g, n, gamma)
}

/// Distills a watermark gated on a single trigger token and compares
/// generations with vs without it (per-text TPR, ROC, pooled Z).
pub fn trigger_token_experiment(setup: &TriggerSetup) -> Result<TriggerOutcome> {
    let x = &setup.xcfg;
    let trigger = *setup.vocab.trigger_ids.first().expect("trigger token");
    let target = setup.triggered_dataset(trigger, 1.0, 0);
    let dcfg = setup.distill_config(
        sub_seed(x.master_seed, &[TAG_TRIG, TAG_STUDENT]),
        x.trigger_distill_steps,
    );
    let (student, _) = distill::distill(
        &setup.teacher,
        &target,
        &setup.plain_train,
        &dcfg,
        &x.watermark,
    )?;

    // identical held-out pieces in both conditions: the comparison is paired
    let eval_seed = sub_seed(x.master_seed, &[TAG_TRIG, 1]);
    let with = setup.eval_counts(
        &student,
        Some(trigger),
        &x.watermark,
        x.trigger_eval_texts,
        eval_seed,
    )?;
    let without =
        setup.eval_counts(&student, None, &x.watermark, x.trigger_eval_texts, eval_seed)?;

    let gamma = x.watermark.gamma;
    let roc = roc_curve(
        &per_text_p_values(&with, gamma)?,
        &per_text_p_values(&without, gamma)?,
    );
    Ok(TriggerOutcome {
        tpr_with: tpr_at_fpr(&with, gamma, 0.01)?,
        tpr_without: tpr_at_fpr(&without, gamma, 0.01)?,
        auc: detector::auc(&roc),
        pooled_z_with: pooled_z(&with, gamma)?,
        pooled_z_without: pooled_z(&without, gamma)?,
        roc,
    })
}

// --- multi-key -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiKeyOutcome {
    /// tpr[i][j]: generations triggered by token i, scored with key j.
    pub tpr: Vec<Vec<f64>>,
    pub keys: Vec<u64>,
}

impl MultiKeyOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gen_key,detect_key,tpr_at_1\n");
        for (i, row) in self.tpr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{i},{j},{v}\n"));
            }
        }
        out
    }
}

/// Distills `key_count` trigger tokens, each bound to a distinct key, and
/// evaluates every (generation trigger, detector key) combination.
pub fn multi_key_experiment(setup: &TriggerSetup, key_count: usize) -> Result<MultiKeyOutcome> {
    let x = &setup.xcfg;
    if key_count == 0 || key_count > setup.vocab.trigger_ids.len() {
        return Err(Error::InvalidConfig(format!(
            "key_count {key_count} exceeds available trigger tokens"
        )));
    }
    let keys: Vec<u64> = (0..key_count)
        .map(|i| sub_seed(x.master_seed, &[TAG_KEY, i as u64]))
        .collect();
    let targets: Vec<(DomainDataset, WatermarkConfig)> = (0..key_count)
        .map(|i| {
            (
                setup.triggered_dataset(setup.vocab.trigger_ids[i], 1.0, 0),
                WatermarkConfig {
                    key: keys[i],
                    ..x.watermark
                },
            )
        })
        .collect();
    // round-robin over keys: scale steps so each key sees the usual budget
    let dcfg = setup.distill_config(
        sub_seed(x.master_seed, &[TAG_KEY, TAG_STUDENT]),
        x.trigger_distill_steps * key_count,
    );
    let (student, _) = distill::distill_multi(&setup.teacher, &targets, &setup.plain_train, &dcfg)?;

    let mut tpr = vec![vec![0.0; key_count]; key_count];
    for i in 0..key_count {
        let counts_per_key: Vec<Vec<(usize, usize)>> = (0..key_count)
            .map(|j| {
                setup.eval_counts(
                    &student,
                    Some(setup.vocab.trigger_ids[i]),
                    &targets[j].1,
                    x.trigger_eval_texts / 2,
                    sub_seed(x.master_seed, &[TAG_KEY, 7, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        for (j, counts) in counts_per_key.iter().enumerate() {
            tpr[i][j] = tpr_at_fpr(counts, x.watermark.gamma, 0.01)?;
        }
    }
    Ok(MultiKeyOutcome { tpr, keys })
}

// --- leakage ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LeakageRow {
    pub k: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn leakage_csv(rows: &[LeakageRow]) -> String {
    let mut out = String::from("k,fpr,tpr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, r.fpr, r.tpr));
    }
    out
}

/// Contaminates a fraction k of the regularization pieces with the trigger,
/// distills, and measures FPR (no trigger in prompt) and TPR (trigger in
/// prompt) at the 1% threshold, per k.
pub fn leakage_experiment(setup: &TriggerSetup) -> Result<Vec<LeakageRow>> {
    let x = &setup.xcfg;
    let trigger = *setup.vocab.trigger_ids.first().expect("trigger token");
    let target = setup.triggered_dataset(trigger, 1.0, 0);
    let mut rows = Vec::new();
    for (ki, &k) in x.leakage_grid.iter().enumerate() {
        let reg =
            setup.triggered_dataset(trigger, k, sub_seed(x.master_seed, &[TAG_LEAK, ki as u64]));
        let dcfg = setup.distill_config(
            sub_seed(x.master_seed, &[TAG_LEAK, TAG_STUDENT, ki as u64]),
            x.trigger_distill_steps,
        );
        let (student, _) = distill::distill(&setup.teacher, &target, &reg, &dcfg, &x.watermark)?;
        let with = setup.eval_counts(
            &student,
            Some(trigger),
            &x.watermark,
            x.trigger_eval_texts / 2,
            sub_seed(x.master_seed, &[TAG_LEAK, 1, ki as u64]),
        )?;
        let without = setup.eval_counts(
            &student,
            None,
            &x.watermark,
            x.trigger_eval_texts / 2,
            sub_seed(x.master_seed, &[TAG_LEAK, 2, ki as u64]),
        )?;
        rows.push(LeakageRow {
            k,
            fpr: tpr_at_fpr(&without, x.watermark.gamma, 0.01)?,
            tpr: tpr_at_fpr(&with, x.watermark.gamma, 0.01)?,
        });
    }
    Ok(rows)
}

// --- named dispatch ------------------------------------------------------------

pub const EXPERIMENT_NAMES: &[&str] = &[
    "reliability",
    "harmlessness",
    "persistence",
    "robustness",
    "ablation",
    "trigger",
    "multikey",
    "leakage",
];

/// Runs a named experiment end to end and writes its CSV/SVG bundle into
/// `out_dir`. Returns the written paths.
pub fn run_experiment(name: &str, xcfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !EXPERIMENT_NAMES.contains(&name) {
        return Err(Error::InvalidConfig(format!(
            "unknown experiment '{name}'; valid names: {}",
            EXPERIMENT_NAMES.join(", ")
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let write = |file: &str, contents: &str| -> Result<PathBuf> {
        let path = out_dir.join(file);
        std::fs::write(&path, contents)?;
        Ok(path)
    };
    let mut written = Vec::new();

    match name {
        "reliability" => {
            let setup = ExperimentSetup::build(xcfg.clone())?;
            let student = setup.distill_student()?;
            let outcome = reliability_experiment(&student, &setup.teacher, &setup)?;
            written.push(write("reliability.csv", &outcome.to_csv())?);
            let logp = outcome.logp_plot_csv(&xcfg.query_grid);
            let acc = outcome.accuracy_plot_csv(&xcfg.query_grid);
            written.push(write("reliability_logp_plot.csv", &logp)?);
            written.push(write("reliability_acc_plot.csv", &acc)?);
            let p1 = out_dir.join("reliability_logp.svg");
            emit_plot(
                &logp,
                PlotKind::Lines {
                    log_x: true,
                    log_y: false,
                },
                &p1,
            )?;
            written.push(p1);
            let p2 = out_dir.join("reliability_acc.svg");
            emit_plot(
                &acc,
                PlotKind::Lines {
                    log_x: true,
                    log_y: false,
                },
                &p2,
            )?;
            written.push(p2);
        }
        "harmlessness" => {
            let setup = ExperimentSetup::build(xcfg.clone())?;
            let student = setup.distill_student()?;
            let kgwd = setup.distill_kgwd()?;
            let rows = harmlessness_experiment(
                &[
                    ("base", &setup.teacher),
                    ("student", &student),
                    ("kgwd", &kgwd),
                ],
                &setup,
            )?;
            written.push(write("harmlessness.csv", &harmlessness_csv(&rows))?);
        }
        "persistence" => {
            let setup = ExperimentSetup::build(xcfg.clone())?;
            let student = setup.distill_student()?;
            let outcome = persistence_experiment(&student, &setup)?;
            written.push(write("persistence.csv", &outcome.to_csv(&xcfg.query_grid))?);
        }
        "robustness" => {
            let setup = ExperimentSetup::build(xcfg.clone())?;
            let student = setup.distill_student()?;
            let outcome = robustness_experiment(&student, &setup)?;
            written.push(write("robustness.csv", &outcome.to_csv_with_prefix())?);
        }
        "ablation" => {
            let setup = ExperimentSetup::build(xcfg.clone())?;
            let rows = ablation_experiment(&setup)?;
            written.push(write("ablation.csv", &ablation_csv(&rows))?);
        }
        "trigger" => {
            let setup = TriggerSetup::build(xcfg.clone(), 1)?;
            let outcome = trigger_token_experiment(&setup)?;
            written.push(write("trigger.csv", &outcome.to_csv())?);
            let roc = outcome.roc_csv();
            written.push(write("trigger_roc.csv", &roc)?);
            let svg = out_dir.join("trigger_roc.svg");
            emit_plot(&roc, PlotKind::Roc, &svg)?;
            written.push(svg);
        }
        "multikey" => {
            let setup = TriggerSetup::build(xcfg.clone(), 2)?;
            let outcome = multi_key_experiment(&setup, 2)?;
            written.push(write("multikey.csv", &outcome.to_csv())?);
        }
        "leakage" => {
            let setup = TriggerSetup::build(xcfg.clone(), 1)?;
            let rows = leakage_experiment(&setup)?;
            written.push(write("leakage.csv", &leakage_csv(&rows))?);
        }
        _ => unreachable!(),
    }
    Ok(written)
}
