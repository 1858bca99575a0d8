//! Acceptance run. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. The live check runs only with
//! `PROTOCHECK_LIVE=1`.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::oracles::{brute_force_weighted_accuracy, cosine, trigram_embed, Scored};
use common::{pack, repair_corpus, Reply, StubServer};
use protocheck::cli::{dispatch, load_sessions, read_predictions, Cli, Command, RunConfig};
use protocheck::context::{
    cosine_similarity, semantic_refine, temporal_extract, CachedEmbedder, ContextConfig, ContextMode,
    EmbeddingVector, HashingEmbedder,
};
use protocheck::corpus::{ChecklistItem, EventWindow, Speaker, Transcript, VisibilityCondition};
use protocheck::evaluate::{
    normalize_priorities, run_ablation, weighted_accuracy, ablation::AblationInputs, EvaluationRecord,
    NormalizationMode,
};
use protocheck::llm_client::{Backend, BackendConfig, BackendError, BackendKind, HttpBackend};
use protocheck::pipeline::{ItemStatus, PipelineOptions};
use protocheck::prompting::TemplateSet;
use protocheck::schema_parse::Grounding;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

// 1. weighted accuracy against brute force

fn record(scenario: &str, i: usize, q: u8, predicted: bool, truth: bool) -> EvaluationRecord {
    EvaluationRecord {
        session_id: "s".into(),
        scenario_id: scenario.into(),
        item_id: format!("i{i}"),
        model: "m".into(),
        predicted,
        truth,
        raw_priority: q,
        norm_priority: 0.0,
        status: ItemStatus::Judged,
        grounded: Grounding::NotApplicable,
        repair_applied: vec![],
        fallback_used: false,
        strict_parse: Some(true),
        context_size: 1,
    }
}

fn score(items: &[(u8, bool, bool)]) -> Result<f64, String> {
    let mut records: Vec<_> = items
        .iter()
        .enumerate()
        .map(|(i, &(q, p, t))| record("sc", i, q, p, t))
        .collect();
    normalize_priorities(&mut records, NormalizationMode::ScaledToCount).map_err(|e| e.to_string())?;
    weighted_accuracy(&records).map_err(|e| e.to_string())
}

fn metric_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let mut worst = 0.0f64;
    for set in 0..1000 {
        let n = rng.gen_range(3..=12);
        let items: Vec<(u8, bool, bool)> = (0..n)
            .map(|_| (rng.gen_range(1..=4), rng.gen(), rng.gen()))
            .collect();
        let scored: Vec<Scored> = items
            .iter()
            .map(|&(q, p, t)| Scored { group: "sc".into(), priority: q, correct: p == t })
            .collect();
        let got = score(&items)?;
        let want = brute_force_weighted_accuracy(&scored);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("set {set}: {got} vs {want}"))?;

        let perfect: Vec<_> = items.iter().map(|&(q, _, t)| (q, t, t)).collect();
        ensure(score(&perfect)? == 1.0, || format!("set {set}: perfect predictions did not score 1.0"))?;
        let wrong: Vec<_> = items.iter().map(|&(q, _, t)| (q, !t, t)).collect();
        ensure(score(&wrong)? == 0.0, || format!("set {set}: all-wrong predictions did not score 0.0"))?;
    }
    let took = within(started, Duration::from_secs(5))?;
    Ok(format!("1000 sets, max |diff| {worst:.1e}, {took:.2?}"))
}

// 2. context selection against a naive predicate filter

const WORDS: &[&str] = &[
    "port", "control", "engine", "room", "anchor", "standby", "vessel", "helmsman", "storm", "lookout",
    "position", "heading", "tug", "bridge", "failure", "report", "nearby", "update", "the", "to",
];

fn phrase(rng: &mut StdRng) -> String {
    let n = rng.gen_range(1..9);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn context_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let embedder = CachedEmbedder::new(Box::new(HashingEmbedder::new(256)));
    let taus = [0.0, 0.3, 0.5, 0.7, 0.9];
    let (mut compared, mut ties) = (0usize, 0usize);
    for case in 0..500 {
        let n = rng.gen_range(1..=200);
        let mut t = 0.0;
        let mut idx = 0u64;
        let rows: Vec<_> = (0..n)
            .map(|_| {
                // whole seconds so window edges are hit exactly now and then
                t += f64::from(rng.gen_range(0u32..20));
                idx += rng.gen_range(1..4);
                (idx, t, Speaker::Participant, phrase(&mut rng))
            })
            .collect();
        let transcript = Transcript::new("s", rows).map_err(|e| e.to_string())?;
        let start = f64::from(rng.gen_range(0u32..(t as u32 + 10)));
        let window = EventWindow::new("ev", start, start + f64::from(rng.gen_range(1u32..300)))
            .map_err(|e| e.to_string())?;
        let item = ChecklistItem {
            item_id: "i".into(),
            event_id: "ev".into(),
            text: phrase(&mut rng),
            priority: 2,
            visibility_condition: VisibilityCondition::Any,
        };
        let base = ContextConfig {
            delta_pre_s: f64::from(rng.gen_range(0u32..60)),
            delta_post_s: f64::from(rng.gen_range(0u32..90)),
            ..Default::default()
        };

        let temporal = temporal_extract(&transcript, &window, &base);
        let naive: Vec<usize> = transcript
            .utterances()
            .iter()
            .filter(|u| {
                u.timestamp_s > window.start_s - base.delta_pre_s && u.timestamp_s < window.end_s + base.delta_post_s
            })
            .map(|u| u.ordinal)
            .collect();
        let got: Vec<usize> = temporal.iter().map(|u| u.ordinal).collect();
        ensure(got == naive, || format!("case {case}: temporal {got:?} vs {naive:?}"))?;

        let anchor = trigram_embed(&item.text, 256);
        let mut previous: Option<Vec<usize>> = None;
        for tau in taus {
            let cfg = ContextConfig { tau, ..base.clone() };
            let refined: Vec<usize> = semantic_refine(&temporal, &item, &cfg, &embedder)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|s| s.utterance.ordinal)
                .collect();
            // near-ties could go either way under different rounding; a
            // zero cosine comes from disjoint trigram bins and is exact
            for u in &temporal {
                let c = cosine(&trigram_embed(&u.text, 256), &anchor);
                if c != 0.0 && (c - tau).abs() < 1e-9 {
                    ties += 1;
                    continue;
                }
                compared += 1;
                let kept = refined.contains(&u.ordinal);
                ensure(kept == (c > tau), || {
                    format!("case {case} tau {tau}: utterance {} (cos {c}) kept={kept}", u.ordinal)
                })?;
            }
            if let Some(prev) = &previous {
                ensure(refined.iter().all(|o| prev.contains(o)), || {
                    format!("case {case}: tau {tau} kept an utterance a lower tau dropped")
                })?;
            }
            previous = Some(refined);
        }
    }
    let took = within(started, Duration::from_secs(30))?;
    Ok(format!("500 transcripts, {compared} utterance decisions, {ties} near-ties skipped, {took:.2?}"))
}

// 3. cosine against the closed form

fn cosine_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let mut worst = 0.0f64;
    for pair in 0..10_000 {
        let dim = rng.gen_range(2..=512);
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (a, b) = (draw(), draw());
        let got = cosine_similarity(&EmbeddingVector::new(a.clone()), &EmbeddingVector::new(b.clone()))
            .map_err(|e| e.to_string())?;
        let want = cosine(&a, &b);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("pair {pair} (dim {dim}): {got} vs {want}"))?;
    }
    let cos = |a: Vec<f64>, b: Vec<f64>| cosine_similarity(&EmbeddingVector::new(a), &EmbeddingVector::new(b)).unwrap();
    let diag = cos(vec![1.0, 0.0], vec![1.0, 1.0]);
    ensure((diag - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-9, || format!("1/sqrt2 case gave {diag}"))?;
    let v = vec![0.3, -1.2, 4.0, 0.5];
    ensure((cos(v.clone(), v) - 1.0).abs() <= 1e-9, || "identity case".into())?;
    ensure(cos(vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]).abs() <= 1e-9, || "orthogonal case".into())?;
    Ok(format!("10000 pairs, max |diff| {worst:.1e}"))
}

// 4. repair ladder corpus

fn repair_regression() -> Outcome {
    let started = Instant::now();
    let n = repair_corpus::check_all()?;
    ensure(n == 40, || format!("corpus has {n} cases, expected 40"))?;
    let took = within(started, Duration::from_secs(1))?;
    Ok(format!("{n} cases, {took:.2?}"))
}

// 5. end-to-end fixture

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["protocheck"];
    argv.extend_from_slice(args);
    dispatch(&Cli::try_parse_from(argv).expect("valid command line"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = pack().join("config.json");
    let expected = fs::read(pack().join("expected_predictions.jsonl")).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let code = run_cli(&["run", "--config", s(&config), "--out", s(&out)]);
        // the fixture scripts one unparseable answer, so the run is partial
        ensure(code == 2, || format!("{name} run exited {code}, expected 2"))?;
        outputs.push(fs::read(out.join("predictions.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == expected, || "predictions differ from the frozen file".into())?;
    ensure(outputs[0] == outputs[1], || "two runs produced different bytes".into())?;

    let report_dir = tmp.path().join("report");
    let code = run_cli(&[
        "score",
        "--predictions",
        s(&tmp.path().join("first/predictions.jsonl")),
        "--manifest",
        s(&pack().join("s01_day.session.json")),
        "--manifest",
        s(&pack().join("s02_night.session.json")),
        "--out",
        s(&report_dir),
    ]);
    ensure(code == 0, || format!("score exited {code}"))?;
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let model = &report["models"][0];
    let overall = model["overall"]["weighted_accuracy"].as_f64().ok_or("no overall accuracy")?;
    ensure((overall - 5027.0 / 5510.0).abs() < 1e-12, || format!("weighted accuracy {overall}, oracle 5027/5510"))?;
    let want = [("collision", 1.0), ("engine_failure", 123.0 / 130.0), ("storm", 31.0 / 38.0)];
    for (scenario, value) in want {
        let row = model["scenarios"]
            .as_array()
            .and_then(|rows| rows.iter().find(|r| r["scenario_id"] == scenario))
            .ok_or_else(|| format!("no row for {scenario}"))?;
        let got = row["weighted_accuracy"].as_f64().unwrap_or(f64::NAN);
        ensure((got - value).abs() < 1e-12, || format!("{scenario}: {got} vs {value}"))?;
    }
    let took = within(started, Duration::from_secs(10))?;
    Ok(format!("byte-identical, weighted accuracy {overall:.6}, {took:.2?}"))
}

// 6. ablation ordering

fn ablation_order() -> Outcome {
    let started = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = Cli::try_parse_from(["protocheck", "ablate", "--config", s(&pack().join("config.json")), "--out", s(out.path())])
        .map_err(|e| e.to_string())?;
    let Command::Ablate(args) = cli.command else {
        return Err("not an ablate command".into());
    };
    let cfg = RunConfig::build(&args.common, None)?;
    let sessions = load_sessions(&cfg.manifests)?;
    let templates = TemplateSet::load(&cfg.templates).map_err(|e| e.to_string())?;
    let embedder = cfg.make_embedder()?;
    let inputs = AblationInputs {
        sessions: &sessions,
        base: PipelineOptions {
            context: &cfg.context,
            mode: cfg.condition,
            templates: &templates,
            embedder: &embedder,
            fuzzy_threshold: cfg.fuzzy_threshold,
            workers: cfg.backend.max_in_flight,
        },
        normalization: cfg.normalization,
        ratings: None,
    };
    let table = run_ablation(&inputs, &ContextMode::ALL, &|| cfg.make_backend());
    let row = |m: ContextMode| table.row(m).filter(|r| r.ok).ok_or_else(|| format!("{} failed", m.as_str()));
    let ts = row(ContextMode::TemporalThenSemantic)?;
    let t = row(ContextMode::TemporalOnly)?;
    let sem = row(ContextMode::SemanticOnly)?;
    let none = row(ContextMode::None)?;
    let sizes = [ts.mean_context_size, t.mean_context_size, sem.mean_context_size, none.mean_context_size];
    ensure(sizes.windows(2).all(|w| w[0] < w[1]), || format!("sizes not strictly increasing: {sizes:?}"))?;
    let oracle = [91.0 / 29.0, 226.0 / 29.0, 328.0 / 29.0, 40.0];
    for (got, want) in sizes.iter().zip(oracle) {
        ensure((got - want).abs() < 1e-12, || format!("mean context {got} vs oracle {want}"))?;
    }
    let acc = |r: &protocheck::evaluate::AblationRow| r.weighted_accuracy.unwrap_or(f64::NAN);
    ensure(acc(ts) >= acc(none), || format!("accuracy {} < {} under none", acc(ts), acc(none)))?;
    let took = within(started, Duration::from_secs(20))?;
    Ok(format!(
        "context {:.2} < {:.2} < {:.2} < {:.2}, accuracy {:.3} >= {:.3}, {took:.2?}",
        sizes[0],
        sizes[1],
        sizes[2],
        sizes[3],
        acc(ts),
        acc(none)
    ))
}

// 7. transport contract

const ANSWER: &str = r#"{"is_completed": false}"#;

fn http(server: &StubServer, f: impl FnOnce(&mut BackendConfig)) -> Result<HttpBackend, String> {
    let mut cfg = BackendConfig {
        kind: BackendKind::Http,
        base_url: Some(server.url()),
        model_id: "stub-model".into(),
        request_timeout_s: 2.0,
        max_retries: 3,
        max_in_flight: 2,
        backoff_base_ms: 40,
        ..Default::default()
    };
    f(&mut cfg);
    HttpBackend::new(cfg).map_err(|e| e.to_string())
}

fn transport() -> Outcome {
    let started = Instant::now();

    let server = StubServer::openai(&["stub-model"], |n, _| if n == 0 { Reply::status(500) } else { Reply::chat(ANSWER) });
    let out = http(&server, |_| {})?.complete_text("s", "a", "p").map_err(|e| e.to_string())?;
    ensure(out.attempt == 2 && out.text == ANSWER, || format!("500 then 200 gave {out:?}"))?;

    let server = StubServer::openai(&["stub-model"], |_, _| Reply::status(503));
    match http(&server, |_| {})?.complete_text("s", "a", "p") {
        Err(BackendError::RetriesExhausted { attempts: 4, .. }) => {}
        other => return Err(format!("persistent 503 gave {other:?}")),
    }
    let reqs = server.requests_to("/chat/completions");
    ensure(reqs.len() == 4, || format!("{} attempts, expected 4", reqs.len()))?;
    for (i, w) in reqs.windows(2).enumerate() {
        let gap = w[1].received - w[0].received;
        ensure(gap >= Duration::from_millis(40 << i), || format!("retry {} after {gap:?}", i + 1))?;
    }

    let server = StubServer::openai(&["stub-model"], |_, _| Reply::status(400));
    let res = http(&server, |_| {})?.complete_text("s", "a", "p");
    ensure(res == Err(BackendError::HttpStatus(400)) && server.requests().len() == 1, || {
        "client error was retried".into()
    })?;

    let mut peaks = Vec::new();
    for limit in [1usize, 3] {
        let server = StubServer::openai(&["stub-model"], |_, _| Reply::chat(ANSWER).after(Duration::from_millis(50)));
        let backend = http(&server, |c| c.max_in_flight = limit)?;
        thread::scope(|sc| {
            for i in 0..9 {
                let backend = &backend;
                sc.spawn(move || backend.complete_text("s", &format!("i{i}"), "p"));
            }
        });
        let peak = server.peak_concurrency();
        ensure(peak <= limit, || format!("limit {limit}, peak {peak}"))?;
        peaks.push(peak);
    }

    let server = StubServer::openai(&["stub-model"], |_, _| Reply::chat(ANSWER));
    let report = http(&server, |_| {})?.healthcheck();
    ensure(report.healthy && report.models == ["stub-model"], || format!("healthcheck {report:?}"))?;
    let report = http(&server, |c| c.model_id = "absent".into())?.healthcheck();
    ensure(!report.healthy, || "healthcheck accepted a model that is not listed".into())?;

    let took = within(started, Duration::from_secs(10))?;
    Ok(format!("retry, backoff, in-flight peaks {peaks:?}, healthcheck, {took:.2?}"))
}

// 8. live model

fn live() -> Verdict {
    if std::env::var("PROTOCHECK_LIVE").as_deref() != Ok("1") {
        return Verdict::Skip("set PROTOCHECK_LIVE=1, PROTOCHECK_BASE_URL and PROTOCHECK_LIVE_MODEL".into());
    }
    let attempt = || -> Outcome {
        let base = std::env::var("PROTOCHECK_BASE_URL").map_err(|_| "PROTOCHECK_BASE_URL is not set")?;
        let model = std::env::var("PROTOCHECK_LIVE_MODEL").map_err(|_| "PROTOCHECK_LIVE_MODEL is not set")?;
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let code = run_cli(&[
            "run",
            "--config",
            s(&pack().join("config.json")),
            "--backend",
            "http",
            "--base-url",
            &base,
            "--model",
            &model,
            "--out",
            s(out.path()),
        ]);
        ensure(code != 1, || "run failed before judging (see run_log.jsonl)".into())?;
        let preds = read_predictions(&out.path().join("predictions.jsonl"))?;
        let asked: Vec<_> = preds.iter().filter(|p| p.status != ItemStatus::NoContext).collect();
        let parsed = asked.iter().filter(|p| p.status == ItemStatus::Judged).count();
        let rate = parsed as f64 / asked.len().max(1) as f64;
        ensure(rate >= 0.8, || format!("parse rate {rate:.2} ({parsed}/{})", asked.len()))?;
        Ok(format!("{model}: parse rate {rate:.2} ({parsed}/{})", asked.len()))
    };
    match attempt() {
        Ok(m) => Verdict::Pass(m),
        Err(e) => Verdict::Fail(e),
    }
}

fn guarded(f: fn() -> Outcome) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(m)) => Verdict::Pass(m),
        Ok(Err(e)) => Verdict::Fail(e),
        Err(p) => Verdict::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("weighted accuracy oracle", Box::new(|| guarded(metric_oracle))),
        ("context selection oracle", Box::new(|| guarded(context_oracle))),
        ("cosine correctness", Box::new(|| guarded(cosine_oracle))),
        ("repair ladder corpus", Box::new(|| guarded(repair_regression))),
        ("end-to-end fixture", Box::new(|| guarded(end_to_end))),
        ("ablation ordering", Box::new(|| guarded(ablation_order))),
        ("transport contract", Box::new(|| guarded(transport))),
        ("live model smoke test", Box::new(live)),
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Verdict::Pass(m) => format!("PASS {} {name}: {m}", i + 1),
            Verdict::Skip(m) => format!("SKIP {} {name}: {m}", i + 1),
            Verdict::Fail(m) => {
                failed += 1;
                format!("FAIL {} {name}: {m}", i + 1)
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for line in &lines {
        println!("  {line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
