//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use debclust::checkpoint::{decode_tensors, encode_tensors};
use debclust::clustering::{kl_loss, kmeans, soft_assign, target_distribution, ClusterState, SoftAssignment};
use debclust::contrastive::oracle::loss_oracle_scalar;
use debclust::contrastive::{batch_loss, ContrastiveConfig, ViewBatch};
use debclust::data::{gen_blobs, line_means, parse_cifar10, serialize_cifar10, CifarRaw};
use debclust::encoder::{EncoderConfig, MixerConfig};
use debclust::evaluation::adjusted_rand_index;
use debclust::gradsuite;
use debclust::lambda::{
    lambda_grad, lambda_hess, lambda_loss, limit_orthogonal_negatives, second_difference_resolvable, LambdaScene,
};
use debclust::Tensor;
use debclust_cli::config::{DataConfig, ExperimentConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng) -> ViewBatch {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=16);
    ViewBatch::new(normal(rng, &[n, d]), normal(rng, &[n, d])).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = gradsuite::run_all(100, 2024).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    let mut resampled = 0;
    for c in &checks {
        resampled += c.resampled;
        ensure(c.instances == 100, || format!("{} ran {} instances", c.name, c.instances))?;
        ensure(c.passed(1e-5), || format!("{} max rel error {:.3e}", c.name, c.max_rel_error))?;
        worst = worst.max(c.max_rel_error);
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} suites x 100 instances ({resampled} unresolvable redrawn), worst rel error {worst:.2e}, {elapsed:.1?}",
        checks.len()
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = random_batch(&mut rng);
        let cfg = ContrastiveConfig::new(
            rng.random_range(0.1..1.0),
            rng.random_range(0.0..0.3),
            rng.random_range(0.0..5.0),
        )
        .unwrap();
        let a = batch_loss(&b, &cfg).map_err(|e| e.to_string())?;
        let o = loss_oracle_scalar(&b, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((a - o).abs());
    }
    ensure(worst < 1e-10, || format!("max |vectorized - oracle| = {worst:.3e}"))?;
    Ok(format!("50 batches, max abs difference {worst:.2e}"))
}

fn random_scene(rng: &mut ChaCha8Rng) -> LambdaScene {
    let n = rng.random_range(2..=8);
    let negs = (0..2 * n - 2).map(|_| rng.random_range(-1.0..=1.0)).collect();
    LambdaScene::new(
        rng.random_range(-1.0..=1.0),
        negs,
        rng.random_range(0.1..1.0),
        rng.random_range(0.0..5.0),
    )
    .unwrap()
}

fn lambda_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h1, h2) = (1e-5, 1e-3);
    let (mut worst1, mut worst2, mut resampled) = (0.0f64, 0.0f64, 0usize);
    let mut tested = 0;
    while tested < 50 {
        let s = random_scene(&mut rng);
        if s.lambda < h2 || !second_difference_resolvable(&s, h2, 1e-4) {
            resampled += 1;
            continue;
        }
        tested += 1;
        let f = |l: f64| lambda_loss(&s.with_lambda(l));
        let l = s.lambda;
        let (g, hs) = (lambda_grad(&s), lambda_hess(&s));
        ensure(hs > 0.0, || format!("L'' = {hs} at {s:?}"))?;
        let fd1 = (f(l + h1) - f(l - h1)) / (2.0 * h1);
        let fd2 = (f(l + h2) - 2.0 * f(l) + f(l - h2)) / (h2 * h2);
        worst1 = worst1.max((fd1 - g).abs() / g.abs());
        worst2 = worst2.max((fd2 - hs).abs() / hs.abs());
    }
    ensure(worst1 < 1e-6, || format!("L' rel error {worst1:.3e}"))?;
    ensure(worst2 < 1e-4, || format!("L'' rel error {worst2:.3e}"))?;
    let lim = limit_orthogonal_negatives(2, 1.0, 0.5, 1.0).map_err(|e| e.to_string())?;
    ensure((lim - 0.24790).abs() < 1e-4, || format!("orthogonal limit {lim}"))?;
    Ok(format!(
        "50 scenes ({resampled} unresolvable resampled), L' {worst1:.1e}, L'' {worst2:.1e}, limit {lim:.5}"
    ))
}

fn lambda_monotone_convex() -> Outcome {
    let grid = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for b in 0..20 {
        let batch = random_batch(&mut rng);
        let losses: Vec<f64> = grid
            .iter()
            .map(|&l| batch_loss(&batch, &ContrastiveConfig { lambda: l, ..Default::default() }).unwrap())
            .collect();
        let slopes: Vec<f64> = (0..grid.len() - 1)
            .map(|i| (losses[i + 1] - losses[i]) / (grid[i + 1] - grid[i]))
            .collect();
        ensure(slopes.iter().all(|&s| s > 0.0), || format!("batch {b}: not increasing {losses:?}"))?;
        ensure(slopes.windows(2).all(|w| w[1] > w[0]), || format!("batch {b}: not convex, slopes {slopes:?}"))?;
    }
    Ok("20 batches strictly increasing and convex over the grid".into())
}

fn row_sum_error(t: &Tensor) -> f64 {
    t.rows().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn clustering_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_sum = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let k = rng.random_range(2..=6);
        let scale = [1e-3, 1.0, 30.0][case % 3];
        let z = normal(&mut rng, &[n, d]).map(|v| v * scale);
        let mu = normal(&mut rng, &[k, d]).map(|v| v * scale);
        let state = ClusterState::new(mu, 1.0).map_err(|e| e.to_string())?;
        let q = soft_assign(&z, &state).map_err(|e| e.to_string())?;
        let p = target_distribution(&q).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max(row_sum_error(&q.0)).max(row_sum_error(&p.0));
        let kl = kl_loss(&p, &q).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("case {case}: KL = {kl}"))?;
        let self_kl = kl_loss(&debclust::clustering::TargetDistribution(q.0.clone()), &q).map_err(|e| e.to_string())?;
        ensure(self_kl.abs() < 1e-12, || format!("case {case}: KL(Q||Q) = {self_kl}"))?;
        if p.0.max_abs_diff(&q.0) > 1e-9 {
            ensure(kl > 0.0, || format!("case {case}: P != Q but KL = {kl}"))?;
        }
    }
    ensure(worst_sum < 1e-9, || format!("row sums off by {worst_sum:.3e}"))?;

    let row = [0.5, 0.3, 0.2];
    let q = SoftAssignment(Tensor::from_rows(&[row, row, row, row]).unwrap());
    let p = target_distribution(&q).map_err(|e| e.to_string())?;
    let diff = p.0.max_abs_diff(&q.0);
    ensure(diff < 1e-12, || format!("identical rows: |P - Q| = {diff:.3e}"))?;
    Ok(format!("200 fuzz cases, row sums within {worst_sum:.1e}, identical-rows |P-Q| {diff:.1e}"))
}

fn kmeans_recovery() -> Outcome {
    let start = Instant::now();
    let means = line_means(3, 2, 10.0).map_err(|e| e.to_string())?;
    let mut worst = 1.0f64;
    for seed in 0..5 {
        let ds = gen_blobs(&means, 0.1, &[100, 100, 100], 1000 + seed).map_err(|e| e.to_string())?;
        let km = kmeans(ds.samples(), 3, seed).map_err(|e| e.to_string())?;
        let ari = adjusted_rand_index(&km.labels, ds.labels()).map_err(|e| e.to_string())?;
        ensure(ari > 0.99, || format!("seed {seed}: ARI {ari}"))?;
        worst = worst.min(ari);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("5 seeds, min ARI {worst:.4}, {elapsed:.1?}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_debclust"))
        .args(args)
        .env_remove("DEBCLUST_OUTPUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "debclust {args:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn read_metrics(path: &Path) -> Result<(f64, f64), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let row: Vec<&str> = text.lines().nth(1).ok_or("empty metrics file")?.split(',').collect();
    Ok((row[3].parse().map_err(|_| "bad top1")?, row[4].parse().map_err(|_| "bad f1")?))
}

fn end_to_end() -> Outcome {
    let cfg = ExperimentConfig::default();
    let DataConfig::Blobs(b) = &cfg.data else { return Err("default data is not blobs".into()) };
    ensure(b.long_tail.class_count == 2 && b.long_tail.imbalance_ratio == 20.0, || format!("{b:?}"))?;
    ensure(matches!(cfg.encoder, EncoderConfig::Mlp(_)), || "default encoder is not the MLP".into())?;
    ensure(
        cfg.train.contrastive.lambda == 2.0 && cfg.train.gamma == 5.0 && cfg.train.epochs == 30 && cfg.probe.k == 20,
        || "defaults differ from lambda 2, gamma 5, 30 epochs, k 20".into(),
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = format!("output_dir={}", dir.path().display());
    let start = Instant::now();
    run_cli(&["pretrain", "--set", &out])?;
    run_cli(&["knn-eval", "--set", &out])?;
    let elapsed = start.elapsed();
    let (top1, f1) = read_metrics(&dir.path().join("eval-knn/metrics.csv"))?;
    let summary = format!("top1 {top1:.4}, minority F1 {f1:.4}, {elapsed:.1?}");
    ensure(top1 >= 0.9 && f1 >= 0.6, || summary.clone())?;
    ensure(elapsed < Duration::from_secs(300), || summary.clone())?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = format!("output_dir={}", d.path().display());
        run_cli(&["pretrain", "--set", &out])?;
        run_cli(&["knn-eval", "--set", &out])?;
    }
    let files = ["pretrain/checkpoint.bin", "pretrain/losses.csv", "eval-knn/metrics.csv"];
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let records = 64;
    let mut bytes = Vec::with_capacity(records * 3073);
    for _ in 0..records {
        bytes.push(rng.random_range(0..10u8));
        bytes.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    let ds = parse_cifar10(&bytes).map_err(|e| e.to_string())?;
    let back = serialize_cifar10(&ds).map_err(|e| e.to_string())?;
    ensure(back == bytes, || "CIFAR bytes changed in round trip".into())?;
    let raw = CifarRaw::parse(&bytes).map_err(|e| e.to_string())?;
    ensure(raw.to_bytes() == bytes, || "raw CIFAR records changed".into())?;

    let special = Tensor::vector(vec![0.0, -0.0, f64::MIN_POSITIVE / 3.0, f64::MAX, f64::INFINITY, f64::NAN, 1.0 / 3.0]);
    let mut items = vec![("special".to_string(), special), ("scalar".to_string(), Tensor::scalar(-2.5))];
    for i in 0..8 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
        items.push((format!("t{i}"), normal(&mut rng, &shape)));
    }
    let encoded = encode_tensors(items.iter().map(|(n, t)| (n.as_str(), t)));
    let decoded = decode_tensors(&encoded).map_err(|e| e.to_string())?;
    ensure(decoded.len() == items.len(), || "tensor count changed".into())?;
    for ((na, ta), (nb, tb)) in items.iter().zip(&decoded) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb), || format!("{na} not bit-exact"))?;
    }
    ensure(encode_tensors(decoded.iter().map(|(n, t)| (n.as_str(), t))) == encoded, || "re-encoding differs".into())?;
    Ok(format!("{records} CIFAR records and {} tensors round-trip exactly", items.len()))
}

fn defaults_audit() -> Outcome {
    let cfg = ExperimentConfig::resolve(None, &[], None).map_err(|e| e.to_string())?;
    let c = &cfg.train.contrastive;
    let o = &cfg.train.optimizer;
    let mixer = MixerConfig::default();
    let checks = [
        ("tau", c.tau, 0.5),
        ("tau_plus", c.tau_plus, 0.1),
        ("lambda", c.lambda, 2.0),
        ("gamma", cfg.train.gamma, 5.0),
        ("lr", o.lr, 1e-3),
        ("beta1", o.beta1, 0.9),
        ("beta2", o.beta2, 0.999),
        ("weight_decay", o.weight_decay, 1e-6),
        ("dropout", mixer.dropout_rate, 0.04),
        ("knn k", cfg.probe.k as f64, 20.0),
        ("probe epochs", cfg.probe.epochs as f64, 100.0),
    ];
    for (name, got, want) in checks {
        ensure(got == want, || format!("{name} = {got}, expected {want}"))?;
    }
    let mixer_via_config = ExperimentConfig::resolve(
        None,
        &["data.source=cifar".into(), "data.train_path=x".into(), "data.test_path=y".into(), "encoder.kind=mixer".into()],
        None,
    )
    .map_err(|e| e.to_string())?;
    ensure(mixer_via_config.encoder == EncoderConfig::Mixer(mixer), || "resolved mixer differs from default".into())?;
    Ok(format!("{} defaults match", checks.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("lambda closed forms", lambda_closed_forms),
        ("lambda monotone and convex", lambda_monotone_convex),
        ("clustering invariants", clustering_invariants),
        ("k-means recovery", kmeans_recovery),
        ("end-to-end long-tail smoke", end_to_end),
        ("determinism", determinism),
        ("format round trips", format_round_trips),
        ("defaults audit", defaults_audit),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
