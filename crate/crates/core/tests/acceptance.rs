//! Acceptance gate. Prints one PASS/FAIL line per criterion followed by a
//! summary. Exits nonzero on any failure only when `ACCEPTANCE_STRICT=1`.

use std::collections::HashSet;
use std::time::Instant;

use polyglot_core::corpus::sampler::RawPair;
use polyglot_core::corpus::{sample_corpus, SamplerConfig, TrainingInstance};
use polyglot_core::decode::{beam_search, translate_beam, translate_greedy, BeamConfig, LengthCap};
use polyglot_core::eval::{bleu_corpus, bleu_tokens, pearson, plot_data, Tokenizer};
use polyglot_core::experiment::{pretrain, DeskConfig, Finetuned, Pretrained};
use polyglot_core::model::{DeltaAccounting, Model, ModelConfig};
use polyglot_core::robt::{backtranslate_batch, sample_intermediate, Robt, RobtConfig};
use polyglot_core::trainer::{TrainConfig, Trainer};
use polyglot_core::vocab::EOS;
use polyglot_core::LangId;
use polyglot_tensor::suite::run_gradient_suite;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

mod common;
use common::{brute_bleu, exhaustive, random_dist, random_model, random_source, textbook_pearson, TreeSession, V};

type Outcome = Result<(bool, String), String>;

#[derive(Default)]
struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn record(&mut self, name: &str, outcome: Outcome) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }

    fn failed(&self) -> Vec<&str> {
        self.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect()
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = run_gradient_suite(20, 1e-4, 2024).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| format!("{} [{}]", c.op, c.config))
        .collect();
    let worst = cases
        .iter()
        .filter_map(|c| c.report.worst.as_ref().map(|w| w.rel_error))
        .fold(0.0, f64::max);
    Ok((
        failed.is_empty() && cases.len() >= 20 && secs <= 60.0,
        format!(
            "{} configurations, {} failed, worst rel error {worst:.2e}, {secs:.1}s {failed:?}",
            cases.len(),
            failed.len()
        ),
    ))
}

fn reduction_cfg(laln: bool, lalt: bool) -> ModelConfig {
    ModelConfig {
        d: 12,
        d_ff: 20,
        heads: 3,
        layers: 2,
        vocab_size: 30,
        languages: 4,
        use_laln: laln,
        use_lalt: lalt,
        merged_attention: false,
        dropout_residual: 0.1,
        dropout_attention: 0.1,
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> TrainingInstance {
    let source = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(8..30)).collect();
    let mut target: Vec<u32> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(8..30)).collect();
    target.push(EOS);
    TrainingInstance {
        source,
        target,
        lang: LangId(rng.gen_range(0..4)),
    }
}

fn is_language_param(name: &str) -> bool {
    name == "bridge.weight" || name.contains(".norm")
}

/// Baseline with perturbed weights and initial norms, against LALN and LALT
/// variants sharing every weight but keeping unit gains, zero biases and
/// identity bridges.
fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut base = Model::<f64>::new(reduction_cfg(false, false), 0.3, 5).map_err(err)?;
    for (spec, p) in base.specs().to_vec().iter().zip(base.params_mut()) {
        if !is_language_param(&spec.name) {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let mut mismatches = 0;
    let mut compared = 0;
    for (laln, lalt) in [(true, false), (false, true), (true, true)] {
        let mut m = Model::<f64>::new(reduction_cfg(laln, lalt), 0.3, 9).map_err(err)?;
        for spec in m.specs().to_vec() {
            if is_language_param(&spec.name) {
                continue;
            }
            let src = base.param(&spec.name).ok_or("missing parameter")?.data().to_vec();
            m.param_mut(&spec.name).ok_or("missing parameter")?.data_mut().copy_from_slice(&src);
        }
        let mut inputs = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..50 {
            let inst = random_instance(&mut inputs);
            let a = base.teacher_forced_logits(&inst).map_err(err)?;
            let b = m.teacher_forced_logits(&inst).map_err(err)?;
            compared += 1;
            if a.data() != b.data() {
                mismatches += 1;
            }
        }
    }
    Ok((
        mismatches == 0,
        format!("{compared} logit comparisons (LALN, LALT, both x 50 inputs), {mismatches} not bitwise equal"),
    ))
}

fn lalt_count() -> Outcome {
    let base = ModelConfig::base(64_000, 100);
    let lalt = ModelConfig {
        use_lalt: true,
        ..base.clone()
    };
    let laln = ModelConfig {
        use_laln: true,
        ..base.clone()
    };
    let step = DeltaAccounting::new(&base, &lalt, 99, 126);
    let norms = DeltaAccounting::new(&base, &laln, 99, 102);
    println!("--- 99M -> 126M (adds LALT)\n{}", step.render());
    println!("--- 99M -> 102M (adds LALN)\n{}", norms.render());
    Ok((
        step.exact == 26_214_400 && step.to.lalt == 26_214_400 && step.explained,
        format!(
            "LALT delta {} (residual {} inside the rounding band: {}); LALN delta {} (residual {})",
            step.exact, step.residual, step.explained, norms.exact, norms.residual
        ),
    ))
}

fn robt_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_ff: 24,
        heads: 2,
        layers: 1,
        vocab_size: 24,
        languages: 4,
        use_laln: true,
        use_lalt: true,
        merged_attention: false,
        dropout_residual: 0.1,
        dropout_attention: 0.1,
    }
}

fn robt_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data: Vec<TrainingInstance> = (0..60)
        .map(|_| {
            let mut i = random_instance(&mut rng);
            i.source.iter_mut().chain(i.target.iter_mut()).for_each(|t| {
                if *t != EOS {
                    *t = *t % 16 + 8
                }
            });
            i
        })
        .collect();
    let model = Model::new(robt_cfg(), 0.5, 3).map_err(err)?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            warmup: 10,
            ..TrainConfig::default()
        },
    )
    .map_err(err)?;
    let langs: Vec<LangId> = (0..4).map(LangId).collect();
    let b = 8;
    let mut run = Robt::new(
        &data,
        RobtConfig {
            batch_size: b,
            ..RobtConfig::new(langs.clone())
        },
    )
    .map_err(err)?;
    let mut composition_ok = true;
    for _ in 0..10 {
        let s = run.step(&mut trainer).map_err(err)?;
        let tokens: usize = s.originals.iter().map(|&i| 2 * data[i].target.len()).sum();
        composition_ok &= s.originals.len() == b && s.augmented.len() == b && s.stats.tokens == tokens;
        for (&i, a) in s.originals.iter().zip(&s.augmented) {
            composition_ok &= a.target == data[i].target && a.lang == data[i].lang && a.intermediate != a.lang;
        }
    }

    let set: Vec<LangId> = (0..5).map(LangId).collect();
    let mut counts = [0usize; 5];
    let mut draws = ChaCha8Rng::seed_from_u64(32);
    let n = 100_000;
    for _ in 0..n {
        counts[sample_intermediate(LangId(1), &set, &mut draws).map_err(err)?.0] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != 1)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(3.0).map_err(err)?.cdf(chi2);

    let targets: Vec<(&[u32], LangId)> = data
        .iter()
        .map(|i| (i.target.as_slice(), LangId(draws.gen_range(0..4))))
        .collect();
    let cap = LengthCap::default();
    let batch = backtranslate_batch(&trainer.model, &targets, cap).map_err(err)?;
    let mut greedy_ok = true;
    for ((y, l), x) in targets.iter().zip(&batch) {
        let single = translate_greedy(&trainer.model, &[(&y[..y.len() - 1], *l)], cap).map_err(err)?;
        greedy_ok &= &single[0] == x;
    }
    Ok((
        composition_ok && counts[1] == 0 && p > 0.01 && greedy_ok,
        format!(
            "2B composition {composition_ok}; chi2 {chi2:.3} p {p:.3} over {n} draws {counts:?}; batched greedy == per-sentence on {} targets: {greedy_ok}",
            targets.len()
        ),
    ))
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..rng.gen_range(0..=10)).map(|_| format!("w{}", rng.gen_range(0..6))).collect()
}

fn bleu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..10);
        let refs: Vec<Vec<String>> = (0..n).map(|_| random_tokens(&mut rng)).collect();
        let hyps: Vec<Vec<String>> = refs
            .iter()
            .map(|r| {
                if rng.gen_bool(0.5) && !r.is_empty() {
                    let mut h = r.clone();
                    let i = rng.gen_range(0..h.len());
                    h[i] = format!("w{}", rng.gen_range(0..6));
                    h
                } else {
                    random_tokens(&mut rng)
                }
            })
            .collect();
        let got = bleu_tokens(&hyps, &refs).map_err(err)?;
        worst = worst.max((got - brute_bleu(&hyps, &refs)).abs());
    }
    let hand = bleu_corpus(&["a b c d"], &["a b c d e"], Tokenizer::Whitespace).map_err(err)?;
    Ok((
        worst < 1e-6 && (hand - 77.88).abs() < 1e-4,
        format!("max deviation from brute force {worst:.2e} over 100 corpora; brevity case {hand:.6}"),
    ))
}

fn sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    // A small shared pool makes many sentences recur within and across pairs.
    let pool: Vec<String> = (0..150).map(|i| format!("english sentence {i}")).collect();
    let raw: Vec<RawPair> = ["de", "fr", "hi", "ja"]
        .iter()
        .map(|code| {
            let english: Vec<String> = (0..120).map(|_| pool.choose(&mut rng).unwrap().clone()).collect();
            let foreign_lines = english.iter().map(|e| format!("{code} {e}")).collect();
            RawPair {
                foreign: code.to_string(),
                english,
                foreign_lines,
            }
        })
        .collect();
    let cfg = SamplerConfig {
        cap_train: 40,
        n_valid: 8,
        n_test: 8,
        seed: 5,
    };
    let (corpus, _) = sample_corpus(&raw, &cfg).map_err(err)?;
    let (again, _) = sample_corpus(&raw, &cfg).map_err(err)?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut caps_ok = true;
    for p in &corpus.pairs {
        caps_ok &= p.train.len() <= 40 && p.valid.len() <= 8 && p.test.len() <= 8;
        train.extend(p.train.english.iter().chain(&p.train.foreign).cloned());
        eval.extend(
            p.valid
                .english
                .iter()
                .chain(&p.valid.foreign)
                .chain(&p.test.english)
                .chain(&p.test.foreign)
                .cloned(),
        );
    }
    let overlap = train.iter().filter(|s| eval.iter().any(|e| e == *s)).count();
    let distinct: HashSet<&String> = train.iter().collect();
    Ok((
        overlap == 0 && caps_ok && again == corpus,
        format!(
            "{} train / {} eval sentences, {overlap} overlapping, caps respected {caps_ok}, deterministic {}, {} distinct train sentences",
            train.len(),
            eval.len(),
            again == corpus,
            distinct.len()
        ),
    ))
}

fn decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cap = LengthCap { ratio: 2, extra: 3 };
    let mut beam_one = 0;
    for _ in 0..100 {
        let m = random_model(&mut rng);
        let x = random_source(&mut rng, m.config().vocab_size);
        let lang = LangId(rng.gen_range(0..3));
        let g = translate_greedy(&m, &[(&x, lang)], cap).map_err(err)?;
        let cfg = BeamConfig {
            beam_size: 1,
            alpha: rng.gen_range(0.0..1.5),
            cap,
        };
        if translate_beam(&m, &x, lang, &cfg).map_err(err)? == g[0] {
            beam_one += 1;
        }
    }
    let allowed = [0, 1, 2, EOS];
    let mut optimal = 0;
    for seed in 0..200 {
        let alpha = (seed % 5) as f64 * 0.3;
        let (score, tokens) = exhaustive(&random_dist(seed, &allowed), 2, alpha);
        let mut s = TreeSession::new(V, random_dist(seed, &allowed));
        let cfg = BeamConfig {
            beam_size: 4,
            alpha,
            cap: LengthCap::default(),
        };
        let h = beam_search(&mut s, &cfg, 2).map_err(err)?;
        if h.tokens == tokens && (h.score - score).abs() < 1e-12 {
            optimal += 1;
        }
    }
    Ok((
        beam_one == 100 && optimal == 200,
        format!("beam-1 == greedy on {beam_one}/100 random models; beam-4 optimal on {optimal}/200 toy trees"),
    ))
}

fn pearson_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 50.0 * v + rng.gen_range(-20.0..20.0)).collect();
        worst = worst.max((pearson(&x, &y).map_err(err)? - textbook_pearson(&x, &y)).abs());
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e} over 200 samples")))
}

fn desk(pre: &Pretrained, ft: &Finetuned) -> Vec<(&'static str, Outcome)> {
    let before = &pre.report;
    let after = &ft.report;
    let supervised: Vec<_> = before.directions.iter().filter(|d| !d.zero_shot).collect();
    let worst_acc = supervised.iter().map(|d| d.accuracy).fold(1.0, f64::min);
    let worst_bleu = supervised.iter().map(|d| d.bleu).fold(100.0, f64::min);
    let total = pre.seconds + ft.seconds;
    let gap = 1.0 - before.acc_zero;
    let mut out = vec![(
        "5 desk pretraining",
        Ok((
            worst_acc >= 0.95 && worst_bleu >= 60.0 && pre.vocab.len() <= 512,
            format!(
                "supervised directions: min accuracy {:.2}%, min BLEU {worst_bleu:.2} (mean {:.2}); vocab {}; {:.0}s",
                100.0 * worst_acc,
                before.bleu_all,
                pre.vocab.len(),
                pre.seconds
            ),
        )),
    )];
    out.push((
        "5a zero-shot accuracy gap",
        Ok((
            after.acc_zero - before.acc_zero >= 0.5 * gap,
            format!(
                "ACC_zero {:.2}% -> {:.2}% (closes {:.1}% of the gap)",
                100.0 * before.acc_zero,
                100.0 * after.acc_zero,
                if gap > 0.0 { 100.0 * (after.acc_zero - before.acc_zero) / gap } else { 100.0 }
            ),
        )),
    ));
    out.push((
        "5b zero-shot BLEU gain",
        Ok((
            after.bleu_zero - before.bleu_zero >= 5.0,
            format!(
                "BLEU_zero {:.2} -> {:.2} (gain {:.2}, need 5)",
                before.bleu_zero,
                after.bleu_zero,
                after.bleu_zero - before.bleu_zero
            ),
        )),
    ));
    out.push((
        "5c convergence plateau",
        Ok((
            ft.plateau_step.is_some_and(|s| s <= 2000),
            format!("plateau at {:?} after {} steps", ft.plateau_step, ft.steps),
        )),
    ));
    out.push((
        "5d pivot vs direct",
        Ok((
            pre.pivot_report.bleu_zero >= before.bleu_zero,
            format!(
                "pivot BLEU_zero {:.2} vs direct {:.2}",
                pre.pivot_report.bleu_zero, before.bleu_zero
            ),
        )),
    ));
    out.push((
        "5 desk runtime",
        Ok((total <= 1800.0, format!("{total:.0}s (pretrain {:.0}s, ROBT {:.0}s)", pre.seconds, ft.seconds))),
    ));
    out
}

fn main() {
    let mut gate = Gate::default();
    gate.record("1 gradient suite", gradient_suite());
    gate.record("2 reduction laws", reductions());
    gate.record("3 LALT count", lalt_count());
    gate.record("4 ROBT mechanics", robt_mechanics());
    gate.record("7 BLEU oracle", bleu_oracle());
    gate.record("8 sampler", sampler());
    gate.record("9 decoding", decoding());
    gate.record("10 Pearson formula", pearson_formula());

    eprintln!("desk experiment: pretraining");
    let cfg = DeskConfig::default();
    match pretrain(&cfg) {
        Err(e) => {
            for name in ["5 desk experiment", "6 restricted-T", "10 desk report r"] {
                gate.record(name, Err(format!("pretraining failed: {e}")));
            }
        }
        Ok(pre) => {
            println!("--- pretrained model, direct\n{}", pre.report.to_table());
            println!("--- pretrained model, pivot\n{}", pre.pivot_report.to_table());
            let seeds = [1u64, 2, 3];
            let mut full = Vec::new();
            let mut restricted = Vec::new();
            for &seed in &seeds {
                eprintln!("desk experiment: ROBT, full language set, seed {seed}");
                full.push(pre.finetune(pre.all_languages(), seed));
            }
            match &full[0] {
                Ok(ft) => {
                    println!("--- after ROBT (seed 1)\n{}", ft.report.to_table());
                    println!("--- ROBT dev curve\n{}", plot_data(&ft.curve));
                    for (name, outcome) in desk(&pre, ft) {
                        gate.record(name, outcome);
                    }
                }
                Err(e) => gate.record("5 desk experiment", Err(format!("finetuning failed: {e}"))),
            }
            for &seed in &seeds {
                eprintln!("desk experiment: ROBT, restricted language set, seed {seed}");
                restricted.push(pre.finetune(pre.zero_shot_languages(), seed));
            }
            let comparison: Outcome = (|| {
                let mut ok = true;
                let mut parts = Vec::new();
                for ((seed, f), r) in seeds.iter().zip(&full).zip(&restricted) {
                    let (f, r) = (f.as_ref().map_err(err)?, r.as_ref().map_err(err)?);
                    ok &= r.report.bleu_zero >= f.report.bleu_zero - 0.5;
                    parts.push(format!(
                        "seed {seed}: restricted {:.2} vs full {:.2}",
                        r.report.bleu_zero, f.report.bleu_zero
                    ));
                }
                Ok((ok, parts.join("; ")))
            })();
            gate.record("6 restricted-T", comparison);
            let r = pre.report.pearson;
            let records = pre.report.to_records();
            gate.record(
                "10 desk report r",
                Ok((
                    r.is_some() && records.contains("pearson r="),
                    format!("pre-ROBT zero-shot accuracy/BLEU r = {r:?}"),
                )),
            );
        }
    }

    let failed = gate.failed();
    println!(
        "acceptance: {} of {} criteria passed; failed: {failed:?}",
        gate.results.len() - failed.len(),
        gate.results.len()
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
