use std::hint::black_box;
use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use propvis_bench::{box_pairs, fixture, program, scripted20, COMPLETION};
use propvis_core::extract::extract_function;
use propvis_core::gateway::{Cassette, Gateway};
use propvis_core::metrics::{iou, soft_accuracy};
use propvis_core::report::build_report;
use propvis_core::runlog::{RunLog, RunManifest};
use propvis_core::sandbox::{ClassificationTable, ErrorReply, ScriptedGuest};
use propvis_core::{ErrorPhase, Mode, RunConfig, TaskKind};

fn metrics(c: &mut Criterion) {
    let pairs = box_pairs(1024);
    let mut g = c.benchmark_group("metrics");
    g.throughput(Throughput::Elements(pairs.len() as u64));
    g.bench_function("iou_1024", |b| {
        b.iter(|| pairs.iter().map(|(x, y)| iou(black_box(x), black_box(y))).sum::<f64>())
    });
    let anns: Vec<String> = ["red", "Red ", "dark red", "red", "maroon", "red", "crimson", "RED", "red", "pink"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    g.throughput(Throughput::Elements(1));
    g.bench_function("soft_accuracy", |b| b.iter(|| soft_accuracy(black_box(" red"), &anns)));
    g.finish();
}

fn extraction(c: &mut Criterion) {
    c.bench_function("extract_function", |b| {
        b.iter(|| extract_function(black_box(COMPLETION), "execute_command").unwrap())
    });
}

fn guest(c: &mut Criterion) {
    let guest = ScriptedGuest::default();
    let fixture = fixture();
    let program = program();
    let table = ClassificationTable::builtin();
    let reply = ErrorReply {
        phase: ErrorPhase::Test,
        exception_name: "AssertionError".into(),
        message: String::new(),
        traceback: String::new(),
        timed_out: false,
        result: None,
    };
    c.bench_function("double_evaluate", |b| {
        b.iter(|| guest.evaluate(black_box(&program), TaskKind::Vqa, &fixture, Duration::from_secs(180)))
    });
    c.bench_function("classify", |b| b.iter(|| table.classify(black_box(&reply))));
}

fn cassette(c: &mut Criterion) {
    let path = scripted20().join("cassette.jsonl");
    let cassette = Arc::new(Cassette::open_read_only(&path).unwrap());
    let gateway = Gateway::replay(cassette.clone());
    let text = std::fs::read_to_string(&path).unwrap();
    let entry: propvis_core::gateway::CassetteEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let request = entry.request_digest_inputs;
    c.bench_function("request_key", |b| b.iter(|| black_box(&request).key()));
    c.bench_function("replay_lookup", |b| b.iter(|| gateway.complete(black_box(&request)).unwrap()));
    c.bench_function("cassette_open", |b| b.iter(|| Cassette::open_read_only(black_box(&path)).unwrap()));
}

fn pipeline_and_report(c: &mut Criterion) {
    use propvis_core::fallback::FixtureFallback;
    use propvis_core::sandbox::Supervisor;
    use propvis_core::{load_suite, Pipeline};

    let manifest = load_suite(&scripted20().join("suite.jsonl")).unwrap();
    let cassette = Arc::new(Cassette::open_read_only(&scripted20().join("cassette.jsonl")).unwrap());
    let run = |mode: Mode| {
        let config = RunConfig {
            mode,
            ..RunConfig::default()
        };
        let supervisor = Supervisor::new(Arc::new(ScriptedGuest::default()), ClassificationTable::builtin());
        let pipeline = Pipeline::new(
            config.clone(),
            manifest.header.profile,
            Arc::new(Gateway::replay(cassette.clone())),
            supervisor,
            Arc::new(FixtureFallback::default()),
        )
        .unwrap();
        let outcomes = pipeline.run_suite(&manifest, |_, _| Ok(())).unwrap();
        RunLog {
            manifest: RunManifest {
                suite_name: manifest.header.name.clone(),
                task_count: outcomes.len(),
                config,
                ..RunManifest::default()
            },
            outcomes,
        }
    };
    let mut g = c.benchmark_group("suite");
    g.sample_size(20);
    g.bench_function("run_scripted20_proptest", |b| b.iter(|| run(Mode::Proptest)));
    let logs: Vec<RunLog> = Mode::ALL.into_iter().map(run).collect();
    g.bench_function("build_report_4_runs", |b| {
        b.iter_batched(|| logs.clone(), |l| build_report(&l), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, metrics, extraction, guest, cassette, pipeline_and_report);
criterion_main!(benches);
