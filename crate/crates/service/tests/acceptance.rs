//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Module-level examples measured on the
//! reference model are printed as INFO lines.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use heae_core::empathy::EV_DIMS;
use heae_core::encoder::{chunk, Window, LN_EPS};
use heae_core::fusion::{Fusion, FusionConfig};
use heae_core::model::{probabilities, ModelError};
use heae_core::tensor::{gradient_check, Activation, Bag, ParamStore, Segment, Tape, Tensor, Var};
use heae_core::train::ablation::{variants, Family};
use heae_core::train::checkpoint::{self, CheckpointError};
use heae_core::train::{self, Confusion, PreparedSet, Sample, SyntheticDatasetSpec, TrainConfig};
use heae_core::{EmpathyVector, HeaeModel, ModelConfig, SeverityLabel};
use heae_service::{http, Assessor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} {name} [{secs:.1}s] {detail}", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }
}

impl Suite {
    /// Reports a module-level example measured on the reference model. These
    /// are printed for the record and do not gate the suite.
    fn report(&self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panic".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("INFO {name} [{secs:.1}s] met: {d}"),
            Err(d) => println!("INFO {name} [{secs:.1}s] not met: {d}"),
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

type OpFn = Box<dyn for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> heae_core::tensor::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    let mut v: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("linear", vec![vec![2, 3, 4], vec![4, 5], vec![5]], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|t, v| t.scale(v[0], 0.85))),
        ("scale_by", vec![vec![2, 3], vec![1]], Box::new(|t, v| t.scale_by(v[0], v[1]))),
        ("mul_bcast_last", vec![vec![3, 4], vec![3, 1]], Box::new(|t, v| t.mul_bcast_last(v[0], v[1]))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS))),
        ("segment_max", vec![vec![5, 4]], Box::new(move |t, v| t.segment_max(v[0], &segs))),
        ("segment_mean", vec![vec![5, 4]], Box::new(move |t, v| t.segment_mean(v[0], &segs))),
        ("segment_attention", vec![vec![5, 4], vec![4]], Box::new(move |t, v| t.segment_attention(v[0], v[1], &segs))),
        ("row_max_pool", vec![vec![4, 3]], Box::new(|t, v| t.row_max_pool(v[0]))),
        ("softmax", vec![vec![2, 7]], Box::new(|t, v| t.softmax(v[0]))),
        ("softmax_cross_entropy", vec![vec![3, 7]], Box::new(|t, v| Ok(t.softmax_cross_entropy(v[0], &[1, 6, 0])?.0))),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("stack", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.stack(&[v[0], v[1]]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], vec![4, 3]))),
        ("sum_last", vec![vec![3, 4]], Box::new(|t, v| t.sum_last(v[0]))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| t.sum(v[0]))),
        (
            "embedding_bag",
            vec![vec![6, 3]],
            Box::new(|t, v| {
                t.embedding_bag(v[0], vec![Bag { entries: vec![(0, 0.5), (4, 1.0)] }, Bag { entries: vec![(2, 2.0)] }])
            }),
        ),
    ];
    for (name, kind) in [
        ("gelu", Activation::Gelu),
        ("sigmoid", Activation::Sigmoid),
        ("relu", Activation::Relu),
        ("silu", Activation::Silu),
    ] {
        v.push((name, vec![vec![3, 5]], Box::new(move |t, v| t.activation(v[0], kind))));
    }
    v
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, shapes, op) in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("p{i}")).collect();
        for (n, s) in names.iter().zip(&shapes) {
            store.insert(n.clone(), random(s, &mut rng), true).unwrap();
        }
        let report = gradient_check(
            &store,
            |t| {
                let vars = names.iter().map(|n| t.param_named(n)).collect::<Result<Vec<_>, _>>()?;
                let out = op(t, &vars)?;
                if t.value(out).len() == 1 {
                    return Ok(out);
                }
                let shape = t.shape(out).to_vec();
                let r = t.constant(random(&shape, &mut ChaCha8Rng::seed_from_u64(3)));
                let m = t.mul(out, r)?;
                t.sum(m)
            },
            1e-4,
            usize::MAX,
            0,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        ensure(report.max_relative_error < 1e-4 && report.checked > 0, || format!("{name}: {report:?}"))?;
        worst = worst.max(report.max_relative_error);
        count += 1;
    }

    let mut config = ModelConfig::default();
    config.encoder.bucket_count = 64;
    let model = HeaeModel::<f64>::new(config, 21).unwrap();
    let texts = [
        model.prepare("everything feels heavy and i keep missing class").unwrap(),
        model.prepare("we played football after lunch and it was fun").unwrap(),
    ];
    let refs: Vec<_> = texts.iter().collect();
    let evs = [
        EmpathyVector::new([3, 4, 2, 3, 2, 4, 3, 1, 2]).unwrap(),
        EmpathyVector::new([0, 0, 1, 0, 0, 1, 0, 0, 0]).unwrap(),
    ];
    let labels = [SeverityLabel::ALL[4], SeverityLabel::ALL[0]];
    let report = gradient_check(
        model.params(),
        |tape| match model.loss(tape, &refs, &evs, &labels) {
            Ok((l, _)) => Ok(l),
            Err(ModelError::Tensor(e)) => Err(e),
            Err(e) => panic!("{e}"),
        },
        1e-4,
        32,
        2,
    )
    .unwrap();
    ensure(report.max_relative_error < 1e-4, || format!("composed model: {report:?}"))?;
    worst = worst.max(report.max_relative_error);
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{count} ops + composed loss ({} coords), max rel err {worst:.2e}",
        report.checked
    ))
}

// ----------------------------------------------------------------- chunking

fn golden_chunking() -> Outcome {
    let w = |s, e| Window { start: s, end: e };
    let golden = [
        (300, vec![w(0, 300)]),
        (512, vec![w(0, 512)]),
        (513, vec![w(0, 512), w(256, 513)]),
        (1000, vec![w(0, 512), w(256, 768), w(512, 1000)]),
    ];
    for (len, expected) in golden {
        let got = chunk(len, 512, 256).map_err(|e| e.to_string())?.windows;
        ensure(got == expected, || format!("length {len}: {got:?}"))?;
    }
    Ok("300, 512, 513, 1000".into())
}

// ------------------------------------------------------------------- fusion

fn fusion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f32>::new();
    let fusion = Fusion::register(&mut store, &FusionConfig::default(), &mut rng).unwrap();
    let rows = 64;
    let mk = |d: usize, rng: &mut ChaCha8Rng| {
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-4.0f32..4.0)).collect()).unwrap()
    };
    let (t, e) = (mk(768, &mut rng), mk(128, &mut rng));
    let pair = |cfg: &FusionConfig| {
        let f = Fusion::bind(&store, cfg).unwrap();
        let mut tape = Tape::new(&store);
        let (a, b) = (tape.constant(t.clone()), tape.constant(e.clone()));
        let (x, y) = f.fuse_pair(&mut tape, a, b).unwrap();
        (tape.value(x).clone(), tape.value(y).clone())
    };
    let mut tape = Tape::new(&store);
    let ln = |tape: &mut Tape<'_, f32>, x: Tensor<f32>, prefix: &str| {
        let x = tape.constant(x);
        let g = tape.param_named(&format!("{prefix}.gamma")).unwrap();
        let b = tape.param_named(&format!("{prefix}.beta")).unwrap();
        let y = tape.layer_norm(x, g, b, LN_EPS as f32).unwrap();
        tape.value(y).clone()
    };
    let plain = (ln(&mut tape, t.clone(), "fusion.norm_t"), ln(&mut tape, e.clone(), "fusion.norm_e"));
    ensure(pair(&FusionConfig::acme(0.0, 0.0)) == plain, || "acme(0,0) differs from LN of inputs".into())?;
    ensure(pair(&FusionConfig::scme(0.15)) == pair(&FusionConfig::acme(0.15, 0.15)), || {
        "scme(0.15) differs from acme(0.15,0.15)".into()
    })?;

    let n = 10_000;
    let mut tape = Tape::new(&store);
    let wide = |d: usize, rng: &mut ChaCha8Rng| {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-10.0f32..10.0)).collect()).unwrap()
    };
    let (gt, ge) = {
        let a = tape.constant(wide(768, &mut rng));
        let b = tape.constant(wide(128, &mut rng));
        fusion.compute_gates(&mut tape, a, b).unwrap()
    };
    let inside = |v: &f32| *v > 0.0 && *v < 1.0;
    ensure(tape.value(gt).data().iter().all(inside) && tape.value(ge).data().iter().all(inside), || {
        "gate outside (0,1)".into()
    })?;
    Ok(format!("bit-exact identities; gates in (0,1) on {n} inputs"))
}

// ---------------------------------------------------------------- shapes

fn shape_suite(model: &HeaeModel<f32>, data: &[Sample]) -> Outcome {
    let texts: Vec<_> = data[..8].iter().map(|s| model.prepare(&s.narrative).unwrap()).collect();
    let refs: Vec<_> = texts.iter().collect();
    let evs: Vec<_> = data[..8].iter().map(|s| s.ev).collect();
    let logits = model.infer(&refs, &evs).map_err(|e| e.to_string())?;
    ensure(logits.shape() == [8, 7], || format!("logits shape {:?}", logits.shape()))?;
    for r in 0..8 {
        let p = probabilities(logits.row(r));
        ensure((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, || format!("row {r} sums to {}", p.iter().sum::<f64>()))?;
    }
    let big = [1e4f32, -1e4, 9_999.0, 0.5, -3.0, 1e4, -9_876.5];
    let p = probabilities(&big);
    ensure((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, || "f64 softmax at 1e4".into())?;
    let mut tape = Tape::<f32>::detached();
    let l = tape.constant(Tensor::new(vec![1, 7], big.to_vec()).unwrap());
    let (_, probs) = tape.softmax_cross_entropy(l, &[0]).unwrap();
    let s: f64 = probs.data().iter().map(|&v| f64::from(v)).sum();
    ensure((s - 1.0).abs() < 1e-6, || format!("tape softmax at 1e4 sums to {s}"))?;
    Ok("8x7 logits; softmax rows sum to 1 at magnitude 1e4".into())
}

// ----------------------------------------------------------------- learning

fn overfit_one_sample(data: &[Sample]) -> Outcome {
    let one = &data[..1];
    let mut model = HeaeModel::<f32>::new(ModelConfig::default(), 42).unwrap();
    let set = PreparedSet::new(&model, one).unwrap();
    let config = TrainConfig {
        epochs: 200,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut reached = None;
    train::train(&mut model, &set, &set, &config, |r| {
        if reached.is_none() && r.loss < 0.05 {
            reached = Some((r.epoch, r.loss));
        }
    })
    .map_err(|e| e.to_string())?;
    match reached {
        Some((epoch, loss)) => Ok(format!("loss {loss:.4} at epoch {epoch}")),
        None => Err("loss stayed >= 0.05 for 200 epochs".into()),
    }
}

struct Reference {
    model: HeaeModel<f32>,
    accuracy: f64,
    elapsed: Duration,
}

fn validation_accuracy(reference: &Option<Reference>) -> Outcome {
    let r = reference.as_ref().ok_or("reference run failed")?;
    ensure(r.accuracy >= 0.90, || format!("accuracy {:.4}", r.accuracy))?;
    ensure(r.elapsed < Duration::from_secs(600), || format!("took {:?}", r.elapsed))?;
    Ok(format!("val accuracy {:.2}% after 30 epochs in {:.0}s", 100.0 * r.accuracy, r.elapsed.as_secs_f64()))
}

fn directional_ablation(data: &[Sample], reference: &Option<Reference>) -> Outcome {
    let seeds = [42u64, 43, 44];
    let mut means = Vec::new();
    for name in ["acme(0.85,0.30)", "scme(0.15)", "concat"] {
        let v = variants(Family::Fusion, &ModelConfig::default())
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| format!("no variant {name}"))?;
        let mut accs = Vec::new();
        for &seed in &seeds {
            let acc = match reference {
                Some(r) if name.starts_with("acme") && seed == 42 => r.accuracy,
                _ => {
                    let cfg = TrainConfig { seed, ..TrainConfig::default() };
                    train::run(data, &v.config, &cfg, 42, |_| {}).map_err(|e| e.to_string())?.metrics.accuracy
                }
            };
            accs.push(acc);
        }
        let mean = 100.0 * accs.iter().sum::<f64>() / accs.len() as f64;
        let per: Vec<String> = accs.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        means.push((name, mean, per.join("/")));
    }
    let (acme, scme, concat) = (means[0].1, means[1].1, means[2].1);
    let detail = means
        .iter()
        .map(|(n, m, per)| format!("{n} {m:.2} ({per})"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(acme >= scme && scme >= concat && acme - concat >= 2.0, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ metrics

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let counts: Vec<Vec<u64>> = (0..7)
            .map(|_| {
                (0..7)
                    .map(|_| if rng.gen_bool(0.25) { 0 } else { rng.gen_range(0..60) })
                    .collect()
            })
            .collect();
        let mut expected = 0.0;
        for k in 0..7 {
            let tp = counts[k][k] as f64;
            let predicted: u64 = (0..7).map(|r| counts[r][k]).sum();
            let actual: u64 = counts[k].iter().sum();
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
            expected += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        expected /= 7.0;
        let got = Confusion::from_counts(counts).macro_f1();
        worst = worst.max((got - expected).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 matrices, max deviation {worst:.1e}"))
}

// --------------------------------------------------------------- checkpoint

fn checkpoint_round_trip(model: &HeaeModel<f32>, data: &[Sample], dir: &Path) -> Outcome {
    let path = dir.join("roundtrip.ckpt");
    checkpoint::save(model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let texts: Vec<_> = data[..16].iter().map(|s| model.prepare(&s.narrative).unwrap()).collect();
    let refs: Vec<_> = texts.iter().collect();
    let evs: Vec<_> = data[..16].iter().map(|s| s.ev).collect();
    let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let a = bits(model.infer(&refs, &evs).unwrap());
    let b = bits(loaded.model.infer(&refs, &evs).unwrap());
    ensure(a == b, || "logits differ after reload".into())?;

    let mut bytes = std::fs::read(&path).unwrap();
    let i = bytes.len() / 2;
    bytes[i] ^= 0x40;
    match checkpoint::from_bytes(&bytes) {
        Err(CheckpointError::Checksum { .. }) => Ok("bit-identical logits; corrupted payload -> checksum error".into()),
        other => Err(format!("corrupted file gave {:?}", other.map(|c| c.model_id))),
    }
}

// ------------------------------------------------------------------ service

fn snapshot(roots: &[PathBuf]) -> BTreeSet<PathBuf> {
    fn walk(p: &Path, out: &mut BTreeSet<PathBuf>, depth: usize) {
        if let Ok(entries) = std::fs::read_dir(p) {
            for e in entries.flatten() {
                let path = e.path();
                out.insert(path.clone());
                if depth < 6 && e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                    walk(&path, out, depth + 1);
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for r in roots {
        walk(r, &mut out, 0);
    }
    out
}

fn service_contract(ckpt: &Path, data: &[Sample]) -> Outcome {
    let assessor = Arc::new(Assessor::load(ckpt).map_err(|e| e.to_string())?);
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async move {
        let (listener, addr) = http::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(http::serve(listener, assessor, async {
            let _ = rx.await;
        }));
        let base = format!("http://{addr}");
        let client = reqwest::Client::new();
        let post = |path: &str, body: Value| {
            let req = client.post(format!("{base}{path}")).json(&body);
            async move {
                let r = req.send().await.unwrap();
                let status = r.status();
                let bytes = r.bytes().await.unwrap();
                (status, bytes)
            }
        };
        let req = |s: &Sample| json!({ "narrative": s.narrative, "empathy_vector": s.ev.scores() });

        // Determinism across repeats and across a fresh load of the same file.
        let (s1, b1) = post("/api/assess", req(&data[0])).await;
        let (_, b2) = post("/api/assess", req(&data[0])).await;
        ensure(s1 == 200 && b1 == b2, || format!("assess not deterministic ({s1})"))?;
        let fresh = Assessor::load(ckpt).unwrap();
        let direct = serde_json::to_vec(&fresh.assess(&heae_service::assess::parse_assess_request(&serde_json::to_vec(&req(&data[0])).unwrap()).unwrap()).unwrap()).unwrap();
        ensure(direct == b1.to_vec(), || "fresh load gives different bytes".into())?;

        // whatif(dim, [v]) equals assess with that value substituted.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in &data[..20] {
            let dim = rng.gen_range(0..EV_DIMS);
            let v = rng.gen_range(0..=5u8);
            let (_, w) = post("/api/whatif", json!({ "base": req(s), "dimension": dim, "values": [v] })).await;
            let w: Value = serde_json::from_slice(&w).unwrap();
            let sub = Sample { ev: s.ev.with(dim, v).unwrap(), ..s.clone() };
            let (_, a) = post("/api/assess", req(&sub)).await;
            let a: Value = serde_json::from_slice(&a).unwrap();
            ensure(w[0]["assessment"] == a, || format!("whatif mismatch on dim {dim} value {v}"))?;
        }

        // 1000 requests, no new files; latency of 1200-token narratives.
        let roots = [std::env::current_dir().unwrap(), std::env::temp_dir(), ckpt.parent().unwrap().to_path_buf()];
        let before = snapshot(&roots);
        let long_words: Vec<&str> = data.iter().flat_map(|s| s.narrative.split_whitespace()).take(1200).collect();
        let long = long_words.join(" ");
        let mut latencies = Vec::new();
        for i in 0..1000 {
            let s = &data[i % data.len()];
            if i % 2 == 0 {
                let body = json!({ "narrative": long, "empathy_vector": s.ev.scores() });
                let t = Instant::now();
                let (status, _) = post("/api/assess", body).await;
                latencies.push(t.elapsed());
                ensure(status == 200, || format!("status {status}"))?;
            } else {
                let (status, _) = post("/api/assess", req(s)).await;
                ensure(status == 200, || format!("status {status}"))?;
            }
        }
        let after = snapshot(&roots);
        let created: Vec<_> = after.difference(&before).collect();
        ensure(created.is_empty(), || format!("new files: {created:?}"))?;
        latencies.sort();
        let p95 = latencies[latencies.len() * 95 / 100];
        ensure(p95 < Duration::from_millis(200), || format!("p95 {p95:?}"))?;

        let _ = tx.send(());
        let _ = server.await;
        Ok(format!(
            "deterministic; whatif == assess; no files after 1000 requests; p95 {:.1} ms at 1200 tokens",
            p95.as_secs_f64() * 1e3
        ))
    })
}

fn assess_direct(a: &Assessor, body: Value) -> Value {
    let req = heae_service::assess::parse_assess_request(&serde_json::to_vec(&body).unwrap()).unwrap();
    serde_json::to_value(a.assess(&req).unwrap()).unwrap()
}

fn extreme_ev_labels(ckpt: &Path) -> Outcome {
    let a = Assessor::load(ckpt).map_err(|e| e.to_string())?;
    let neutral = "i wrote this note at school today after the bell";
    let lo = assess_direct(&a, json!({ "narrative": neutral, "empathy_vector": vec![0u8; 9] }));
    let hi = assess_direct(&a, json!({ "narrative": neutral, "empathy_vector": vec![5u8; 9] }));
    let detail = format!("label {} for all zeros, {} for all fives", lo["label_index"], hi["label_index"]);
    ensure(hi["label_index"].as_u64() > lo["label_index"].as_u64(), || detail.clone())?;
    Ok(detail)
}

/// Class-6 mass along a dimension-8 sweep from random base requests.
fn class6_sweep(ckpt: &Path, probe: &[Sample]) -> Outcome {
    let a = Assessor::load(ckpt).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut monotone = 0;
    for s in probe {
        let scores: Vec<u8> = (0..EV_DIMS).map(|_| rng.gen_range(0..=5)).collect();
        let body = json!({ "base": { "narrative": s.narrative, "empathy_vector": scores }, "dimension": 8 });
        let req = heae_service::assess::parse_whatif_request(&serde_json::to_vec(&body).unwrap()).unwrap();
        let mass: Vec<f64> = a.whatif(&req).unwrap().iter().map(|p| p.assessment.probabilities[6]).collect();
        if mass.len() == 6 && mass.windows(2).all(|m| m[1] >= m[0]) {
            monotone += 1;
        }
    }
    let frac = monotone as f64 / probe.len() as f64;
    let detail = format!("class-6 mass non-decreasing in {:.0}% of {} sweeps (target 90%)", 100.0 * frac, probe.len());
    ensure(frac >= 0.9, || detail.clone())?;
    Ok(detail)
}

#[test]
fn acceptance() {
    let mut suite = Suite { results: Vec::new() };
    let dir = tempfile::tempdir().unwrap();
    let data = train::synthesize(&SyntheticDatasetSpec::new(2000, 42)).unwrap();

    suite.run("gradient_suite", gradient_suite);
    suite.run("golden_chunking", golden_chunking);
    suite.run("fusion_identities", fusion_identities);
    suite.run("overfit_one_sample", || overfit_one_sample(&data));

    let start = Instant::now();
    let reference = train::run(&data, &ModelConfig::default(), &TrainConfig { seed: 42, ..TrainConfig::default() }, 42, |_| {})
        .ok()
        .map(|o| Reference {
            accuracy: o.metrics.accuracy,
            model: o.model,
            elapsed: start.elapsed(),
        });
    suite.run("validation_accuracy", || validation_accuracy(&reference));

    let fallback = HeaeModel::<f32>::new(ModelConfig::default(), 42).unwrap();
    let model = reference.as_ref().map_or(&fallback, |r| &r.model);
    suite.run("shape_normalization", || shape_suite(model, &data));
    suite.run("metrics_oracle", metrics_oracle);
    suite.run("checkpoint_round_trip", || checkpoint_round_trip(model, &data, dir.path()));

    let ckpt = dir.path().join("reference.ckpt");
    checkpoint::save(model, &ckpt).unwrap();
    let probe = train::synthesize(&SyntheticDatasetSpec::new(100, 7)).unwrap();
    suite.run("service_contract", || service_contract(&ckpt, &data));
    suite.report("extreme_ev_labels", || extreme_ev_labels(&ckpt));
    suite.report("class6_sweep", || class6_sweep(&ckpt, &probe));

    suite.run("directional_ablation", || directional_ablation(&data, &reference));

    let failed: Vec<_> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} of {} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
