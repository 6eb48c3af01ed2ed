//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use locbench::convo::{build_mix, sample_frames, sample_indices, write_conversations, MixConfig, NamePool, Naming};
use locbench::evalengine::{aggregate, run, FailureClass, GroupKeys, Metric, RunMeta, RunOptions};
use locbench::geometry::{context_iou, iou};
use locbench::inference::{BackoffPolicy, ChatClient, EndpointConfig, Responder, ShotChoice, SimModel};
use locbench::ingest::{load_segmentation_benchmark, split_category_set, SegFormat, Source};
use locbench::prompts::{PromptTemplate, TemplateId};
use locbench::respparse::{parse_bbox, ParseTag};
use locbench::{BBox, Space};
use rand::{Rng, RngCore};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use common::Reply;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. geometry against exact pixel sets

/// Row bitmaps of the half-open pixel set covered by an integer box.
fn raster(b: [u32; 4]) -> [u64; 64] {
    let mut rows = [0u64; 64];
    let below = |n: u32| if n >= 64 { u64::MAX } else { (1u64 << n) - 1 };
    let cols = below(b[2]) & !below(b[0]);
    for row in rows.iter_mut().take(b[3] as usize).skip(b[1] as usize) {
        *row = cols;
    }
    rows
}

fn count(a: &[u64; 64]) -> u64 {
    a.iter().map(|r| r.count_ones() as u64).sum()
}

fn and(a: &[u64; 64], b: &[u64; 64]) -> [u64; 64] {
    std::array::from_fn(|i| a[i] & b[i])
}

fn random_int_box(rng: &mut impl Rng) -> [u32; 4] {
    let (a, b) = (rng.random_range(0..=64u32), rng.random_range(0..=64u32));
    let (c, d) = (rng.random_range(0..=64u32), rng.random_range(0..=64u32));
    [a.min(b), c.min(d), a.max(b), c.max(d)]
}

fn geometry_oracle() -> Outcome {
    let started = Instant::now();
    let space = Space::pixel(64, 64).unwrap();
    let mut rng = common::rng(1);
    let mut n = 0;
    while n < 1000 {
        let (p, q, s) = (random_int_box(&mut rng), random_int_box(&mut rng), random_int_box(&mut rng));
        let mk = |b: [u32; 4]| BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64, space).unwrap();
        let (pb, qb, sb) = (mk(p), mk(q), mk(s));
        let (pr, qr, sr) = (raster(p), raster(q), raster(s));

        let inter = count(&and(&pr, &qr));
        let union = count(&pr) + count(&qr) - inter;
        let want_iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };

        let copied = count(&and(&pr, &sr));
        let kept = inter.saturating_sub(copied);
        let denom = count(&qr) as i64 - count(&and(&qr, &sr)) as i64 + count(&pr) as i64 - kept as i64;
        let want_ctx = if denom <= 0 { 0.0 } else { (kept as f64 / denom as f64).clamp(0.0, 1.0) };

        let got_iou = iou(&pb, &qb).unwrap();
        let got_ctx = context_iou(&pb, &qb, &[sb]).unwrap();
        ensure!(got_iou == want_iou, "iou {p:?} {q:?}: {got_iou} != {want_iou}");
        ensure!(got_ctx == want_ctx, "context_iou {p:?} {q:?} {s:?}: {got_ctx} != {want_ctx}");
        n += 1;
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 triples exact, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. copy-metric fixed points

fn copy_metric_fixed_points() -> Outcome {
    let b = |a, c, d, e| BBox::per_mille(a, c, d, e).unwrap();
    let q = b(100.0, 100.0, 300.0, 300.0);
    let v = context_iou(&q, &q, &[b(600.0, 600.0, 800.0, 800.0)]).unwrap();
    ensure!(v == 1.0, "pred=query, disjoint shot: {v}");
    let v = context_iou(&b(150.0, 150.0, 250.0, 250.0), &q, &[b(120.0, 120.0, 280.0, 280.0)]).unwrap();
    ensure!(v == 0.0, "pred inside shot: {v}");
    let v = context_iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0), &[b(0.0, 0.0, 5.0, 5.0)]).unwrap();
    ensure!(v == 0.75, "worked case: {v}");
    Ok("1.0 / 0.0 / 0.75".into())
}

// ---------------------------------------------------------------------------
// 3. metric discrimination through the evaluation engine

fn means(rt: &tokio::runtime::Runtime, convs: &[locbench::convo::Conversation], model: SimModel) -> (String, String) {
    let tpl = PromptTemplate::builtin(&TemplateId::Original).unwrap();
    let recs = rt.block_on(run(convs, Arc::new(model), &tpl, &RunOptions::default())).unwrap();
    let meta = RunMeta { model_name: model.to_string(), template_id: "original".into(), seed: None, timestamp: "-".into() };
    let all = GroupKeys { dataset: false, n_shots: false, naming: false };
    let rep = aggregate(&recs, all, meta).unwrap();
    let get = |m| format!("{:.2}", rep.cells.iter().find(|c| c.metric == m).unwrap().mean);
    (get(Metric::Iou), get(Metric::ContextIou))
}

fn metric_discrimination(rt: &tokio::runtime::Runtime) -> Outcome {
    let started = Instant::now();
    let same = common::last_shot_is_target(200, 3);
    for c in &same {
        ensure!(c.shots.last().unwrap().bbox == c.target_box, "{}: fixture broken", c.conv_id);
    }
    let copier = means(rt, &same, SimModel::Copier(ShotChoice::Last));
    ensure!(copier == ("100.00".into(), "0.00".into()), "copier:last {copier:?}");

    let apart = common::shots_disjoint_from_target(200, 4);
    let oracle = means(rt, &apart, SimModel::Oracle);
    ensure!(oracle == ("100.00".into(), "100.00".into()), "oracle {oracle:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("copier:last {}/{}, oracle {}/{}, {elapsed:.2?}", copier.0, copier.1, oracle.0, oracle.1))
}

// ---------------------------------------------------------------------------
// 4. parser corpus and fuzz

#[derive(Deserialize)]
struct CorpusEntry {
    source: String,
    raw_text: String,
    expected_kind: ParseTag,
    expected_box: Option<[f64; 4]>,
}

fn parser_corpus() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/appendix_responses.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let entries: Vec<CorpusEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for needle in ["[444, 186, 506, 244]", "[0, 0, 0, 0]", "group of bears"] {
        ensure!(entries.iter().any(|e| e.raw_text.contains(needle)), "corpus lacks {needle:?}");
    }
    for e in &entries {
        let got = parse_bbox(&e.raw_text, Space::PerMille);
        ensure!(got.kind.tag() == e.expected_kind, "{} {:?}: got {:?}", e.source, e.raw_text, got.kind.tag());
        if let Some(want) = e.expected_box {
            let have = got.kind.bbox().map(|b| b.corners());
            ensure!(have == Some(want), "{} {:?}: box {have:?}", e.source, e.raw_text);
        }
    }

    let mut rng = common::rng(4);
    let alphabet = b"0123456789,.[]()- \nabcxyz<>/-e+";
    for i in 0..100_000 {
        let len = rng.random_range(0..80);
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..len).map(|_| rng.random::<u8>()).collect()
        } else {
            (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let s = String::from_utf8_lossy(&bytes);
        let r = catch_unwind(|| parse_bbox(&s, Space::PerMille)).map_err(|_| format!("panic on {bytes:?}"))?;
        if let Some(b) = r.kind.bbox() {
            let c = b.corners();
            ensure!(c.iter().all(|v| (0.0..=1000.0).contains(v)) && c[0] <= c[2] && c[1] <= c[3], "bad box {c:?}");
        }
    }
    Ok(format!("{} corpus strings, 100000 fuzz inputs", entries.len()))
}

// ---------------------------------------------------------------------------
// 5. prompt fidelity

fn prompt_fidelity() -> Outcome {
    let want = [
        (TemplateId::Original, "<ref>balloon</ref>"),
        (
            TemplateId::P1,
            "Please provide the bounding box of the element balloon, return the bounding box in the following format: [x0, y0, x1, y1]",
        ),
        (
            TemplateId::P2,
            "Task: Locate the balloon in the image. Provide its bounding box coordinates in the format [x_min, y_min, x_max, y_max]",
        ),
        (
            TemplateId::P3,
            "Please analyze this image and locate the exact balloon. Return the precise bounding box coordinates using this format: [x_min, y_min, x_max, y_max] The coordinates should tightly bound only the balloon, nothing more. Take your time to carefully examine the image and provide the most accurate bounding box possible.",
        ),
        (TemplateId::Gpt1, "Please provide the bounding box of the element balloon"),
        (
            TemplateId::Gpt2,
            "Please provide the bounding box of the element balloon, return the bounding box coordinates the following format: [x_min, y_min, x_max, y_max]. Do not output anything else besides the coordinate",
        ),
    ];
    for (id, text) in want {
        let got = PromptTemplate::builtin(&id).map_err(|e| e.to_string())?.render("balloon").unwrap();
        ensure!(got.as_bytes() == text.as_bytes(), "{id}: {got:?}");
    }
    Ok("6 templates byte-identical".into())
}

// ---------------------------------------------------------------------------
// 6. maximum-interval sampling

fn min_gap(idx: &[usize]) -> usize {
    idx.windows(2).map(|w| w[1] - w[0]).min().unwrap()
}

/// Best achievable minimum gap over every k-subset of 0..t, by exhaustive
/// search with branch-and-bound.
fn brute_best(t: usize, k: usize) -> usize {
    fn go(t: usize, k: usize, last: usize, picked: usize, gap: usize, best: &mut usize) {
        if gap <= *best {
            return;
        }
        if picked == k {
            *best = gap;
            return;
        }
        for next in last + 1..t {
            if t - next < k - picked {
                break;
            }
            go(t, k, next, picked + 1, gap.min(next - last), best);
        }
    }
    let mut best = 0;
    for first in 0..t {
        go(t, k, first, 1, usize::MAX, &mut best);
    }
    best
}

fn sampling_property() -> Outcome {
    let mut checked = 0;
    for t in 2..=200usize {
        for k in 2..=t.min(9) {
            let idx = sample_indices(t, k).map_err(|e| e.to_string())?;
            ensure!(idx.len() == k, "T={t} k={k}: {idx:?}");
            ensure!(idx[0] == 0 && idx[k - 1] == t - 1, "T={t} k={k}: endpoints {idx:?}");
            ensure!(idx.windows(2).all(|w| w[0] < w[1]), "T={t} k={k}: order {idx:?}");
            if t <= 30 {
                let best = brute_best(t, k);
                ensure!(min_gap(&idx) == best, "T={t} k={k}: gap {} < {best}", min_gap(&idx));
            }
            checked += 1;
        }
    }
    let mut rng = common::rng(6);
    let tr = common::random_track(&mut rng, Source::Lasot, "owl", "s-0", 57);
    let frames = sample_frames(&tr, 9).unwrap();
    let want: Vec<u64> = sample_indices(57, 9).unwrap().into_iter().map(|i| i as u64).collect();
    ensure!(frames.iter().map(|f| f.frame_index).collect::<Vec<_>>() == want, "sample_frames disagrees");
    Ok(format!("{checked} (T, k) pairs"))
}

// ---------------------------------------------------------------------------
// 7. mix determinism and composition

const MIX_CATS: [&str; 12] = [
    "zebra", "violin", "tractor", "pelican", "umbrella", "kayak", "giraffe", "lantern", "walrus", "hammock",
    "saxophone", "tortoise",
];

fn mix_bytes(manifests: &[locbench::ingest::DatasetManifest], cfg: MixConfig, train: &BTreeSet<String>) -> Vec<u8> {
    let cats: BTreeSet<String> = manifests.iter().flat_map(|m| m.categories().iter().cloned()).collect();
    let pool = NamePool::builtin().excluding(&cats).unwrap();
    let convs: Vec<_> = build_mix(manifests, cfg, train, &pool).unwrap().map(Result::unwrap).collect();
    let mut out = Vec::new();
    write_conversations(&convs, &mut out).unwrap();
    out
}

fn mix_composition() -> Outcome {
    let manifests = vec![
        common::manifest("lasot", Source::Lasot, &MIX_CATS[..4], 5, (12, 30), 71),
        common::manifest("got", Source::Got, &MIX_CATS[4..8], 5, (12, 30), 72),
        common::manifest("tao", Source::Tao, &MIX_CATS[8..], 5, (12, 30), 73),
    ];
    let train: BTreeSet<String> = MIX_CATS.iter().map(|s| s.to_string()).collect();
    let cfg = MixConfig { shot_range: (1, 8), pseudo_fraction: 0.5, count: 10_000, seed: 7 };
    let a = mix_bytes(&manifests, cfg, &train);
    let b = mix_bytes(&manifests, cfg, &train);
    ensure!(a == b, "two runs with seed 7 differ");

    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 10_000, "{} conversations", lines.len());
    let mut shots: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pseudo = 0usize;
    let mut sources = BTreeSet::new();
    for line in &lines {
        let c = locbench::convo::Conversation::from_json_line(line, 0).map_err(|e| e.to_string())?;
        *shots.entry(c.shots.len()).or_default() += 1;
        sources.insert(c.meta.source);
        if c.meta.naming == Naming::Pseudo {
            pseudo += 1;
            let lower = line.to_lowercase();
            for cat in MIX_CATS {
                ensure!(!lower.contains(cat), "{} leaks {cat}", c.conv_id);
            }
        }
    }
    ensure!(sources.len() == 3, "sources {sources:?}");
    ensure!(shots.len() == 8, "shot counts {shots:?}");
    for (n, k) in &shots {
        let f = *k as f64 / 10_000.0;
        ensure!((f - 0.125).abs() <= 0.05 * 0.125, "{n}-shot frequency {f}");
    }
    let pf = pseudo as f64 / 10_000.0;
    ensure!((pf - 0.5).abs() <= 0.05 * 0.5, "pseudo frequency {pf}");
    let worst = shots.values().map(|k| (*k as f64 / 10_000.0 - 0.125).abs() / 0.125).fold(0.0, f64::max);
    Ok(format!("identical bytes, worst shot deviation {:.1}%, pseudo {:.3}, no leaks", worst * 100.0, pf))
}

// ---------------------------------------------------------------------------
// 8. manifest statistics and splits

fn manifest_statistics() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let perseg_root = dir.path().join("perseg");
    let counts: Vec<usize> = (0..20).map(|i| if i < 14 { 8 } else { 7 }).collect();
    common::write_perseg(&perseg_root, &counts);
    let m = load_segmentation_benchmark(&perseg_root, SegFormat::Perseg).map_err(|e| e.to_string())?;
    let s = m.stats();
    ensure!(
        (s.category_count, s.record_count, s.mean_objects_per_image) == (20, 154, 1.0),
        "perseg stats {s:?}"
    );

    let pdm_root = dir.path().join("pdm");
    common::write_pdm(&pdm_root, 106, &[4, 4, 4, 4, 5]);
    let m = load_segmentation_benchmark(&pdm_root, SegFormat::Pdm).map_err(|e| e.to_string())?;
    let s = m.stats();
    ensure!(
        (s.category_count, s.record_count, s.mean_objects_per_image) == (106, 106 * 21, 4.2),
        "pdm stats {s:?}"
    );

    let cats: BTreeSet<String> = (0..36).map(|i| format!("cat{i:02}")).collect();
    let (train, test) = split_category_set(&cats, 0.5, 11).map_err(|e| e.to_string())?;
    ensure!(train.len() == 18 && test.len() == 18, "{} / {}", train.len(), test.len());
    ensure!(train.is_disjoint(&test), "split overlaps");
    ensure!(train.union(&test).cloned().collect::<BTreeSet<_>>() == cats, "split loses categories");
    Ok("PerSeg 20/154/1.0, PDM 106/2226/4.2, split 18/18".into())
}

// ---------------------------------------------------------------------------
// 9. re-scoring reproduces reports

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["locbench"];
    argv.extend_from_slice(args);
    locbench::cli::main_with_args(argv)
}

fn same_reports(a: &Path, b: &Path) -> Result<(), String> {
    for f in ["report.jsonl", "report.txt", "records.jsonl"] {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between {} and {}", a.display(), b.display());
    }
    Ok(())
}

fn endpoint_answer(body: &serde_json::Value) -> Reply {
    let h = Sha256::digest(common::query_image(body).as_bytes());
    let v = |i: usize| (h[i] as f64) * 3.0;
    Reply::Text(match h[0] % 5 {
        0 => "[0, 0, 0, 0]".into(),
        1 => "The picture shows a small lamp on a wooden desk next to a stack of books.".into(),
        2 => "unsure".into(),
        3 => format!("{}, {}, {}, {}]", v(1), v(2), v(1) + 100.0, v(2) + 80.0),
        _ => format!("The box is [{}, {}, {}, {}].", v(3), v(4), v(3) + 150.0, v(4) + 220.0),
    })
}

fn rescoring(rt: &tokio::runtime::Runtime) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let convs_path = dir.path().join("convs.jsonl");
    let convs = common::mixed_conversations(150, 9);
    let mut buf = Vec::new();
    write_conversations(&convs, &mut buf).unwrap();
    std::fs::write(&convs_path, buf).unwrap();
    let convs_arg = convs_path.to_str().unwrap();

    let sim_out = dir.path().join("sim");
    let code = cli(&["eval", "--conversations", convs_arg, "--sim", "random:3", "--out", sim_out.to_str().unwrap()]);
    ensure!(code == 0, "eval --sim exit {code}");
    let re = dir.path().join("sim-rescored");
    let code = cli(&[
        "score",
        "--conversations",
        convs_arg,
        "--responses",
        sim_out.join("records.jsonl").to_str().unwrap(),
        "--out",
        re.to_str().unwrap(),
    ]);
    ensure!(code == 0, "score exit {code}");
    same_reports(&sim_out, &re)?;

    let server = rt.block_on(common::spawn_fake(Duration::from_millis(1), |_, body| endpoint_answer(body)));
    let ep_out = dir.path().join("endpoint");
    let code = cli(&[
        "eval",
        "--conversations",
        convs_arg,
        "--endpoint",
        &server.url,
        "--model",
        "fake-vlm",
        "--template",
        "p2",
        "--out",
        ep_out.to_str().unwrap(),
    ]);
    ensure!(code == 0, "eval --endpoint exit {code}");
    let re = dir.path().join("endpoint-rescored");
    let code = cli(&[
        "score",
        "--conversations",
        convs_arg,
        "--responses",
        ep_out.join("records.jsonl").to_str().unwrap(),
        "--out",
        re.to_str().unwrap(),
    ]);
    ensure!(code == 0, "score exit {code}");
    same_reports(&ep_out, &re)?;
    let report = std::fs::read_to_string(ep_out.join("report.jsonl")).unwrap();
    ensure!(report.contains("\"refusal\"") && report.contains("\"degenerate\""), "fixture lacks failures");
    Ok("sim and endpoint runs re-scored byte-for-byte".into())
}

// ---------------------------------------------------------------------------
// 10. transport robustness

fn transport_robustness(rt: &tokio::runtime::Runtime) -> Outcome {
    const PARALLELISM: usize = 8;
    let faults = Arc::new(std::sync::Mutex::new(common::rng(10)));
    let server = rt.block_on(common::spawn_fake_with(Duration::from_millis(3), Duration::from_millis(200), move |_, body| {
        let roll = faults.lock().unwrap().next_u32() % 100;
        match roll {
            0..20 => Reply::Status(500),
            20..25 => Reply::Hang,
            _ => endpoint_answer_box(body),
        }
    }));
    let mut cfg = EndpointConfig::new(server.url.clone(), "fake-vlm");
    cfg.timeout = Duration::from_millis(300);
    cfg.max_retries = 1;
    cfg.backoff = BackoffPolicy { base: Duration::from_millis(5), factor: 2.0, cap: Duration::from_millis(20), jitter: true };
    cfg.parallelism = PARALLELISM;
    let client: Arc<dyn Responder> = Arc::new(ChatClient::new(cfg).map_err(|e| e.to_string())?);

    let convs = common::mixed_conversations(500, 10);
    let tpl = PromptTemplate::builtin(&TemplateId::P1).unwrap();
    let opts = RunOptions { parallelism: PARALLELISM, ..Default::default() };
    let recs = rt.block_on(run(&convs, client, &tpl, &opts)).map_err(|e| e.to_string())?;

    ensure!(recs.len() == 500, "{} records", recs.len());
    let want: BTreeSet<&str> = convs.iter().map(|c| c.conv_id.as_str()).collect();
    let have: BTreeSet<&str> = recs.iter().map(|r| r.conv_id.as_str()).collect();
    ensure!(want == have, "conv_ids differ");
    let mut by_class: BTreeMap<FailureClass, usize> = BTreeMap::new();
    for r in &recs {
        *by_class.entry(r.failure_class).or_default() += 1;
    }
    let failures: usize = by_class.iter().filter(|(k, _)| **k != FailureClass::None).map(|(_, v)| v).sum();
    ensure!(
        failures == by_class.get(&FailureClass::Transport).copied().unwrap_or(0),
        "non-transport failures {by_class:?}"
    );
    ensure!(failures > 0, "no fault reached the records; injection ineffective");
    let peak = server.stats.peak.load(std::sync::atomic::Ordering::SeqCst);
    ensure!(peak <= PARALLELISM, "peak in-flight {peak} > {PARALLELISM}");
    Ok(format!(
        "500/500 records, {failures} transport failures, {} requests, peak in-flight {peak}/{PARALLELISM}",
        server.stats.requests.load(std::sync::atomic::Ordering::SeqCst)
    ))
}

fn endpoint_answer_box(body: &serde_json::Value) -> Reply {
    let h = Sha256::digest(common::query_image(body).as_bytes());
    let x = h[1] as f64 * 3.0;
    let y = h[2] as f64 * 3.0;
    Reply::Text(format!("[{x}, {y}, {}, {}]", x + 120.0, y + 90.0))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("geometry oracle equivalence", Box::new(geometry_oracle)),
        ("copy-metric fixed points", Box::new(copy_metric_fixed_points)),
        ("metric discrimination end-to-end", Box::new(|| metric_discrimination(&rt))),
        ("parser corpus and fuzz", Box::new(parser_corpus)),
        ("prompt fidelity", Box::new(prompt_fidelity)),
        ("maximum-interval sampling", Box::new(sampling_property)),
        ("mix determinism and composition", Box::new(mix_composition)),
        ("manifest statistics and splits", Box::new(manifest_statistics)),
        ("re-scoring determinism", Box::new(|| rescoring(&rt))),
        ("transport robustness", Box::new(|| transport_robustness(&rt))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
