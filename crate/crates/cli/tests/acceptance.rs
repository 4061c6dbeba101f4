//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process exits non-zero if any criterion fails.
//!
//! The toy-task training criteria (6–8) dominate the runtime (~25 minutes
//! on one core).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use ocfsl_autodiff::{Graph, Tensor};
use ocfsl_cli::{eval_run, generate, train_run, Scorer, Split};
use ocfsl_core::config::ExperimentConfig;
use ocfsl_core::context::EncoderConfig;
use ocfsl_core::evaluation::{average_precision, mean_se, ApIntegral, MetricsReport, PredictionRecord};
use ocfsl_core::experiment::{context_ablation, train_and_evaluate, AblationTable};
use ocfsl_core::learners::{rollout, Ablations, Learner, LearnerConfig, LearnerKind};
use ocfsl_core::memory::{Dissimilarity, MemoryVars, PrototypeMemory, WriteRule};
use ocfsl_core::rng::stream_rng;
use ocfsl_core::sequences::{
    crp_new_probability, crp_sample_class, generate_sequence, label_probability, run_length_stats,
    sample_environment_schedule, CrpDraw, SamplerConfig, Sequence,
};
use ocfsl_core::training::check_gradients;
use rand::Rng;

type Verdict = anyhow::Result<(bool, String)>;

fn small_sampler(length: usize, semi: bool) -> SamplerConfig {
    SamplerConfig {
        sequence_length: length,
        feature_dim: 6,
        cue_dim: 2,
        semi_supervised: semi,
        max_classes: 12,
        ..Default::default()
    }
}

fn small_learner(kind: LearnerKind, s: &SamplerConfig, seed: u64) -> Learner {
    let config = LearnerConfig {
        kind,
        encoder: EncoderConfig {
            hidden: Vec::new(),
            output_dim: Some(8),
        },
        hidden: 8,
        ..Default::default()
    };
    Learner::new(config, s.input_dim(), s.max_classes, seed).unwrap()
}

fn jitter(learner: &mut Learner, seed: u64) {
    let mut rng = stream_rng(seed, "jitter", 0);
    let names: Vec<String> = learner.params.names().map(String::from).collect();
    for n in names {
        for v in learner.params.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn gradient_correctness() -> Verdict {
    let mut worst: (f64, String) = (0.0, String::new());
    for (semi, gated) in [(false, false), (true, true)] {
        let s = small_sampler(10, semi);
        let seq = generate_sequence(&s, 3, 0);
        let mut l = small_learner(LearnerKind::Cpm, &s, 1);
        if gated {
            l = Learner::new(
                LearnerConfig {
                    dissimilarity: Dissimilarity::Cosine,
                    write_rule: WriteRule::Gated,
                    ..l.config.clone()
                },
                s.input_dim(),
                s.max_classes,
                1,
            )?;
        }
        jitter(&mut l, 1);
        let r = check_gradients(&l, &seq, 1.0, false, |t| t % 2 == 0, 1e-5)?;
        if r.worst_relative_error >= worst.0 {
            worst = (r.worst_relative_error, format!("{}[{}]", r.worst_parameter, r.worst_index));
        }
    }
    Ok((
        worst.0 < 1e-4,
        format!("worst relative error {:.2e} at {} (tol 1e-4)", worst.0, worst.1),
    ))
}

fn prototype_equivalence() -> Verdict {
    let s = SamplerConfig {
        semi_supervised: false,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let seq = generate_sequence(&s, 17, i);
        let mut g = Graph::new();
        let b = ocfsl_autodiff::ParamStore::new().bind(&mut g);
        let v = MemoryVars::bind(&b, Dissimilarity::Euclidean, WriteRule::Average);
        let mut mem = PrototypeMemory::new(seq.num_classes(), WriteRule::Average);
        let mut sums: HashMap<u32, (Vec<f64>, f64)> = HashMap::new();
        for step in &seq.steps {
            let h = g.constant(Tensor::vector(step.x.clone())?);
            mem.write_labeled(&mut g, h, step.y, &v)?;
            let e = sums.entry(step.y).or_insert((vec![0.0; step.x.len()], 0.0));
            e.0.iter_mut().zip(&step.x).for_each(|(a, x)| *a += x);
            e.1 += 1.0;
        }
        let protos = g.value(mem.prototypes().unwrap()).clone();
        let d = s.input_dim();
        for (slot, class) in mem.classes().iter().enumerate() {
            let (sum, n) = &sums[class];
            for j in 0..d {
                worst = worst.max((protos.data()[slot * d + j] - sum[j] / n).abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("max |prototype − class mean| {worst:.2e} over 100 sequences")))
}

fn record(i: usize, knownness: f64, novel: bool, correct: bool) -> PredictionRecord {
    PredictionRecord {
        sequence: 0,
        step: i,
        knownness,
        predicted: Some(if correct { 0 } else { 1 }),
        truth: 0,
        novel,
        labeled: true,
        shots: 1,
        since_label: Some(1),
        env: 0,
    }
}

/// Precision at every cut-off, integrated over recall increments.
fn brute_force_ap(records: &[PredictionRecord]) -> f64 {
    let k = records.iter().filter(|r| !r.novel).count() as f64;
    let above = |a: &PredictionRecord, b: &PredictionRecord| {
        a.knownness > b.knownness || (a.knownness == b.knownness && a.step <= b.step)
    };
    let mut points: Vec<(f64, f64)> = records
        .iter()
        .map(|cut| {
            let sel: Vec<_> = records.iter().filter(|r| above(r, cut)).collect();
            let hits = sel.iter().filter(|r| r.is_hit()).count() as f64;
            (hits / k, hits / sel.len() as f64)
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let (mut ap, mut prev) = (0.0, 0.0);
    for (recall, precision) in points {
        if recall > prev {
            ap += precision * (recall - prev);
            prev = recall;
        }
    }
    ap
}

fn ap_oracle() -> Verdict {
    let hand = [
        record(0, 0.9, false, true),
        record(1, 0.8, true, false),
        record(2, 0.7, false, true),
        record(3, 0.6, false, false),
    ];
    let hand_ap = average_precision(&hand, ApIntegral::RightRiemann)?;
    let mut worst: f64 = (hand_ap - brute_force_ap(&hand)).abs();
    let mut rng = stream_rng(5, "ap", 0);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(1..=20);
        // coarse scores so ties are common
        let rs: Vec<_> = (0..n)
            .map(|i| {
                record(
                    i,
                    rng.random_range(0..6) as f64 / 5.0,
                    rng.random_bool(0.3),
                    rng.random_bool(0.7),
                )
            })
            .collect();
        if rs.iter().all(|r| r.novel) {
            continue;
        }
        worst = worst.max((average_precision(&rs, ApIntegral::RightRiemann)? - brute_force_ap(&rs)).abs());
        done += 1;
    }
    Ok((
        worst <= 1e-12 && (hand_ap - 0.5556).abs() < 5e-5,
        format!("hand case {hand_ap:.4}; max deviation from enumeration {worst:.1e} over 1000 instances"),
    ))
}

fn sampler_statistics() -> Verdict {
    // (a) CRP NEW rate at k = 3 classes, m = 10 draws.
    let cfg = SamplerConfig::default();
    let p = crp_new_probability(3, 10, cfg.crp_alpha, cfg.crp_theta);
    let mut rng = stream_rng(1, "crp", 0);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| crp_sample_class(&[4, 3, 3], true, &cfg, &mut rng) == CrpDraw::New)
        .count();
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let za = (hits as f64 / n as f64 - p) / sigma;

    // (b) Markov run length.
    let schedules: Vec<Vec<u32>> = (0..10_000)
        .map(|i| sample_environment_schedule(&cfg, &mut stream_rng(2, "env", i)))
        .collect();
    let rl = run_length_stats(schedules.iter().map(Vec::as_slice));
    let zb = (rl.mean - 5.0) / rl.se;

    // (c) Masking; the appearance cap is raised so that m_k ≥ 8 occurs.
    let cfg = SamplerConfig {
        semi_supervised: true,
        max_appearances: 20,
        ..Default::default()
    };
    let (mut covered, mut labeled, mut total) = (0, 0usize, 0usize);
    let (mut expected_flip, mut expected_bare) = (0.0, 0.0);
    for i in 0..10_000 {
        let seq = generate_sequence(&cfg, 3, i);
        let mut m: BTreeMap<u32, usize> = BTreeMap::new();
        for s in &seq.steps {
            *m.entry(s.y).or_default() += 1;
        }
        covered += m
            .keys()
            .all(|c| seq.steps.iter().any(|s| s.y == *c && s.label.is_some())) as usize;
        for s in seq.steps.iter().filter(|s| m[&s.y] >= 8) {
            let mk = m[&s.y];
            let a = label_probability(mk, cfg.label_ratio);
            total += 1;
            expected_bare += a;
            // a class whose draws all came up empty gets one label back
            expected_flip += a + (1.0 - a).powi(mk as i32) / mk as f64;
            labeled += s.label.is_some() as usize;
        }
    }
    let rate = labeled as f64 / total as f64;
    let z = |e: f64| {
        let p = e / total as f64;
        (rate - p) / (p * (1.0 - p) / total as f64).sqrt()
    };
    let (zc, zc_bare) = (z(expected_flip), z(expected_bare));
    let pass = za.abs() < 3.0 && zb.abs() < 3.0 && covered == 10_000 && zc.abs() < 3.0;
    Ok((
        pass,
        format!(
            "(a) {za:+.2}σ; (b) mean run {:.3} = {zb:+.2} SE; (c) coverage {covered}/10000, label rate {rate:.4} at {:+.2}σ (bare α_k: {zc_bare:+.2}σ) over {total} steps",
            rl.mean,
            zc
        ),
    ))
}

fn values(learner: &Learner, seq: &Sequence, write: bool) -> anyhow::Result<Vec<(Option<Vec<f64>>, Vec<Option<u32>>, Option<f64>)>> {
    let mut g = Graph::new();
    let preds = rollout(learner, &mut g, seq, |_| write)?;
    Ok(preds
        .iter()
        .map(|p| {
            (
                p.log_probs.map(|v| g.value(v).data().to_vec()),
                p.classes.clone(),
                p.novelty_logit.map(|v| g.scalar_value(v)),
            )
        })
        .collect())
}

fn degeneracy() -> Verdict {
    let s = small_sampler(60, false);
    let pn = small_learner(LearnerKind::ProtoNet, &s, 42);
    let cpm = Learner::new(
        LearnerConfig {
            ablate: Ablations::all(),
            ..small_learner(LearnerKind::Cpm, &s, 42).config.clone()
        },
        s.input_dim(),
        s.max_classes,
        42,
    )?;
    let mut mismatched = 0;
    for i in 0..50 {
        let seq = generate_sequence(&s, 1, i);
        mismatched += (values(&cpm, &seq, false)? != values(&pn, &seq, false)?) as usize;
    }
    Ok((mismatched == 0, format!("{mismatched}/50 sequences differ")))
}

fn protocol_purity() -> Verdict {
    let mut checked = 0;
    let mut violations = Vec::new();
    for semi in [false, true] {
        let s = small_sampler(25, semi);
        let mut learners: Vec<Learner> = [
            LearnerKind::Cpm,
            LearnerKind::ProtoNet,
            LearnerKind::MatchingNet,
            LearnerKind::Imp,
            LearnerKind::Lstm,
        ]
        .into_iter()
        .map(|k| small_learner(k, &s, 7))
        .collect();
        learners.push(Learner::new(
            LearnerConfig {
                dissimilarity: Dissimilarity::Cosine,
                write_rule: WriteRule::Gated,
                ..learners[0].config.clone()
            },
            s.input_dim(),
            s.max_classes,
            8,
        )?);
        for learner in &learners {
            for i in 0..20 {
                let seq = generate_sequence(&s, 3, i);
                let full = values(learner, &seq, true)?;
                for t in 0..seq.len() {
                    let mut prefix = seq.clone();
                    prefix.steps.truncate(t + 1);
                    if values(learner, &prefix, true)?[t] != full[t] {
                        violations.push(format!("{} seq {i} step {t}", learner.kind().name()));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok((
        violations.is_empty(),
        format!("{checked} truncated replays, {} differ {:?}", violations.len(), violations.first()),
    ))
}

/// The toy-task training profile shared by criteria 6–8.
fn profile(kind: LearnerKind, semi: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.learner.kind = kind;
    c.sampler.semi_supervised = semi;
    c.train.steps = 400;
    c.train.batch_size = 8;
    c.train.milestones = Vec::new();
    c.train.val_every = 100;
    c.train.val_sequences = 20;
    c.train.ramp.every = 133;
    c.eval.sequences = 100;
    c
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn diff_se(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, (a.1 * a.1 + b.1 * b.1).sqrt())
}

struct ToyRuns {
    /// (learner, semi) → per-seed reports.
    reports: BTreeMap<(&'static str, bool), Vec<MetricsReport>>,
    seconds: BTreeMap<&'static str, f64>,
}

fn toy_runs() -> anyhow::Result<ToyRuns> {
    let mut reports = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for semi in [false, true] {
        for kind in [LearnerKind::Cpm, LearnerKind::ProtoNet, LearnerKind::MatchingNet, LearnerKind::Imp] {
            let config = profile(kind, semi);
            let mut rs = Vec::new();
            for seed in SEEDS {
                let start = Instant::now();
                let out = train_and_evaluate(&config, seed)?;
                let secs = start.elapsed().as_secs_f64();
                let slot = seconds.entry(kind.name()).or_insert(0.0_f64);
                *slot = slot.max(secs);
                eprintln!(
                    "  {} {} seed {seed}: ap {:.4} ({secs:.0}s)",
                    kind.name(),
                    if semi { "semi" } else { "supervised" },
                    out.report.ap
                );
                rs.push(out.report);
            }
            reports.insert((kind.name(), semi), rs);
        }
    }
    Ok(ToyRuns { reports, seconds })
}

fn toy_relative_order(runs: &ToyRuns) -> Verdict {
    let ap = |k: &str, semi: bool| mean_se(&runs.reports[&(k, semi)].iter().map(|r| r.ap).collect::<Vec<_>>());
    let mut pass = true;
    let mut detail = Vec::new();
    for semi in [false, true] {
        let (gap, se) = diff_se(ap("cpm", semi), ap("protonet", semi));
        pass &= gap > 2.0 * se;
        detail.push(format!(
            "{}: cpm {:.4} protonet {:.4} matchingnet {:.4} imp {:.4}, gap {gap:+.4} ({:.1} SE)",
            if semi { "semi" } else { "sup" },
            ap("cpm", semi).0,
            ap("protonet", semi).0,
            ap("matchingnet", semi).0,
            ap("imp", semi).0,
            gap / se
        ));
    }
    let slowest = runs.seconds.values().cloned().fold(0.0, f64::max);
    pass &= slowest <= 1800.0;
    detail.push(format!("slowest run {slowest:.0}s"));
    Ok((pass, detail.join("; ")))
}

fn context_ablation_pattern(table: &AblationTable) -> Verdict {
    let cell = |cue, shuffled, k| {
        let c = table.cell(cue, shuffled, k).expect("cell");
        (c.mean, c.se)
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for cue in [false, true] {
        let (cg, cse) = diff_se(cell(cue, false, LearnerKind::Cpm), cell(cue, true, LearnerKind::Cpm));
        let (pg, pse) = diff_se(
            cell(cue, false, LearnerKind::ProtoNet),
            cell(cue, true, LearnerKind::ProtoNet),
        );
        pass &= cg > 2.0 * cse && pg.abs() <= 2.0 * pse;
        detail.push(format!(
            "cue {}: temporal gain cpm {cg:+.4} ({:.1} SE), protonet {pg:+.4} ({:.1} SE)",
            if cue { "on" } else { "off" },
            cg / cse,
            pg / pse
        ));
    }
    // informational: with neither context available the two should tie
    let (g, se) = diff_se(cell(false, true, LearnerKind::Cpm), cell(false, true, LearnerKind::ProtoNet));
    detail.push(format!("no-context cpm − protonet {g:+.4} ({:.1} SE)", g / se));
    for k in [LearnerKind::Cpm, LearnerKind::ProtoNet] {
        for shuffled in [false, true] {
            let (g, se) = diff_se(cell(true, shuffled, k), cell(false, shuffled, k));
            pass &= g > 2.0 * se;
            detail.push(format!(
                "cue gain {} {}: {g:+.4} ({:.1} SE)",
                k.name(),
                if shuffled { "shuffled" } else { "ordered" },
                g / se
            ));
        }
    }
    Ok((pass, detail.join("; ")))
}

/// Mean and across-seed SE of the 1-shot accuracy in each forgetting bin.
fn one_shot_bins(reports: &[MetricsReport]) -> Vec<Option<(f64, f64)>> {
    (0..5)
        .map(|b| {
            let accs: Option<Vec<f64>> = reports
                .iter()
                .map(|r| r.forgetting.cells[0][b].map(|c| c.accuracy))
                .collect();
            accs.map(|a| mean_se(&a))
        })
        .collect()
}

fn forgetting_monotonicity(runs: &ToyRuns) -> Verdict {
    let cpm = one_shot_bins(&runs.reports[&("cpm", false)]);
    let pn = one_shot_bins(&runs.reports[&("protonet", false)]);
    let Some(bins) = cpm.iter().copied().collect::<Option<Vec<_>>>() else {
        return Ok((false, format!("empty forgetting bins: {cpm:?}")));
    };
    let mut inversions = 0;
    let mut tolerable = true;
    for w in bins.windows(2) {
        let (rise, se) = diff_se(w[1], w[0]);
        if rise > 0.0 {
            inversions += 1;
            tolerable &= rise <= se;
        }
    }
    let monotone = inversions == 0 || (inversions == 1 && tolerable);
    let Some(pn0) = pn[0] else {
        return Ok((false, "protonet has no 1–2 bin".into()));
    };
    let (gap, se) = diff_se(bins[0], pn0);
    let shown: Vec<String> = bins.iter().map(|(m, s)| format!("{m:.3}±{s:.3}")).collect();
    Ok((
        monotone && gap > 2.0 * se,
        format!(
            "cpm 1-shot by bin [{}], {inversions} inversion(s); bin 1–2 vs protonet {:.3}: {gap:+.3} ({:.1} SE)",
            shown.join(", "),
            pn0.0,
            gap / se
        ),
    ))
}

fn reproducibility() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.sampler.sequence_length = 60;
    c.sampler.semi_supervised = true;
    c.train.steps = 30;
    c.train.val_every = 10;
    c.train.val_sequences = 5;
    c.train.milestones = vec![20];
    c.eval.sequences = 10;
    let run = |dir: &Path| -> anyhow::Result<()> {
        generate(&c, dir, Split::Eval, None)?;
        train_run(&c, dir, false, |_| {})?;
        let data = dir.join("eval.jsonl");
        eval_run(&c, dir, &Scorer::Checkpoint(dir.join("best.ckpt")), Some(&data))?;
        Ok(())
    };
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    pool.install(|| run(a.path()))?;
    pool.install(|| run(b.path()))?;
    let files = [
        "eval.jsonl",
        "eval.stats.json",
        "train_log.csv",
        "best.ckpt",
        "last.ckpt",
        "report.csv",
        "report.json",
        "records.jsonl",
        "curve.svg",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .collect();
    Ok((
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    ))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, start: Instant, verdict: Verdict| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        failures += !pass as usize;
        println!(
            "[{}] {id:>2} {name}: {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
    };
    let t = Instant::now();
    let v = gradient_correctness().map(|(p, d)| (p && t.elapsed().as_secs() < 60, d));
    report(1, "gradient correctness", t, v);
    let t = Instant::now();
    report(2, "prototype equivalence", t, prototype_equivalence());
    let t = Instant::now();
    report(3, "AP oracle", t, ap_oracle());
    let t = Instant::now();
    let v = sampler_statistics().map(|(p, d)| (p && t.elapsed().as_secs() < 60, d));
    report(4, "sampler statistics", t, v);
    let t = Instant::now();
    report(5, "degeneracy to online ProtoNet", t, degeneracy());

    let t = Instant::now();
    let runs = toy_runs();
    match &runs {
        Ok(runs) => report(6, "toy-task relative order", t, toy_relative_order(runs)),
        Err(e) => report(6, "toy-task relative order", t, Err(anyhow::anyhow!("{e:#}"))),
    }
    let t = Instant::now();
    let table = context_ablation(&profile(LearnerKind::Cpm, false), &SEEDS, |c, seed, ap| {
        eprintln!(
            "  ablation cue={} shuffled={} {} seed {seed}: ap {ap:.4}",
            c.spatial_cue,
            c.shuffled,
            c.learner.name()
        )
    });
    report(
        7,
        "context ablation",
        t,
        table.map_err(Into::into).and_then(|t| context_ablation_pattern(&t)),
    );
    let t = Instant::now();
    let v = match &runs {
        Ok(runs) => forgetting_monotonicity(runs),
        Err(_) => Err(anyhow::anyhow!("training failed")),
    };
    report(8, "forgetting monotonicity", t, v);

    let t = Instant::now();
    report(9, "protocol purity", t, protocol_purity());
    let t = Instant::now();
    report(10, "reproducibility", t, reproducibility());

    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
}
