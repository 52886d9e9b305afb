//! Subcommand implementations. Each writes its artifacts and the resolved
//! config into its own directory under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use debclust::data::{self, gen_blobs, line_means, long_tail_counts, Dataset};
use debclust::evaluation::{knn_probe, linear_probe, Metrics};
use debclust::gradsuite;
use debclust::lambda::{sweep, sweep_csv, LambdaScene};
use debclust::training::{derive_seed, fit, FitArtifacts, Model, TrainConfig, CHECKPOINT_FILE};
use debclust::{Error, Result};

use crate::config::{DataConfig, ExperimentConfig};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// A verification step found a violated property.
    VerificationFailed,
}

pub const METRICS_HEADER: &str = "protocol,dataset,seed,top1,f1";
pub const SEMI_LABEL_FRACTION: f64 = 0.1;

fn prepare_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn dataset_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.data {
        DataConfig::Blobs(_) => "blobs",
        DataConfig::Cifar(_) => "cifar10",
    }
}

/// Training and test splits described by the config.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Blobs(b) => {
            let c = b.long_tail.class_count;
            let means = line_means(c, b.dim, b.spacing)?;
            let counts = long_tail_counts(&b.long_tail)?;
            let train = gen_blobs(&means, b.sigma, &counts, derive_seed(&[cfg.seed, 10]))?;
            let test = gen_blobs(&means, b.sigma, &vec![b.test_per_class; c], derive_seed(&[cfg.seed, 11]))?;
            Ok((train, test))
        }
        DataConfig::Cifar(c) => {
            let mut train = data::parse_cifar10(&std::fs::read(&c.train_path)?)?;
            if let Some(spec) = &c.long_tail {
                let counts = long_tail_counts(spec)?;
                let mut taken = vec![0usize; train.class_count()];
                let mut keep = Vec::new();
                for (i, &l) in train.labels().iter().enumerate() {
                    if l < counts.len() && taken[l] < counts[l] {
                        taken[l] += 1;
                        keep.push(i);
                    }
                }
                train = train.subset(&keep)?;
            }
            let mut test = data::parse_cifar10(&std::fs::read(&c.test_path)?)?;
            if c.max_test > 0 && test.len() > c.max_test {
                test = test.subset(&(0..c.max_test).collect::<Vec<_>>())?;
            }
            let norm = train.norm().expect("parsed images carry a norm").clone();
            Ok((train, test.renormalized(&norm)?))
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_dir(cfg, "data")?;
    let (train, test) = build_datasets(cfg)?;
    train.export(&dir.join("train"))?;
    test.export(&dir.join("test"))?;
    println!(
        "wrote {} training and {} test samples to {} (class counts {:?})",
        train.len(),
        test.len(),
        dir.display(),
        train.class_counts()
    );
    Ok(Outcome::Ok)
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_dir(cfg, "pretrain")?;
    let (train, _) = build_datasets(cfg)?;
    let out = fit(
        &train,
        cfg.encoder.clone(),
        &cfg.train_config(),
        Some(FitArtifacts {
            dir: &dir,
            config_hash: cfg.model_hash(),
        }),
    )?;
    match out.history.last() {
        Some(r) => println!(
            "epoch {}: contrastive {:.6} clustering {:.6} total {:.6}",
            r.epoch, r.contrastive, r.clustering, r.total
        ),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    println!("checkpoint written to {}", dir.join(CHECKPOINT_FILE).display());
    Ok(Outcome::Ok)
}

fn load_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("pretrain").join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    let (model, hash) = Model::load(&path, cfg.encoder.clone(), cfg.train.optimizer)?;
    if hash != cfg.model_hash() {
        return Err(Error::Config {
            path: path.display().to_string(),
            msg: "checkpoint was trained with a different data/encoder/train config".into(),
        });
    }
    Ok(model)
}

fn metrics_row(protocol: &str, dataset: &str, seed: u64, m: &Metrics) -> String {
    format!("{protocol},{dataset},{seed},{},{}\n", m.top1, m.f1)
}

fn write_metrics(cfg: &ExperimentConfig, protocol: &str, m: &Metrics) -> Result<()> {
    let dir = prepare_dir(cfg, &format!("eval-{protocol}"))?;
    let csv = format!("{METRICS_HEADER}\n{}", metrics_row(protocol, dataset_name(cfg), cfg.seed, m));
    std::fs::write(dir.join("metrics.csv"), csv)?;
    println!("{protocol}: top1 {:.4} f1 {:.4}", m.top1, m.f1);
    Ok(())
}

fn embeddings(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Dataset, Dataset, debclust::Tensor, debclust::Tensor)> {
    let model = load_model(cfg, checkpoint)?;
    let (train, test) = build_datasets(cfg)?;
    let etr = model.embed_dataset(&train)?;
    let ete = model.embed_dataset(&test)?;
    Ok((train, test, etr, ete))
}

pub fn knn_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
    let (train, test, etr, ete) = embeddings(cfg, checkpoint)?;
    let m = knn_probe(&etr, train.labels(), &ete, test.labels(), train.class_count(), cfg.probe.k)?;
    write_metrics(cfg, "knn", &m)?;
    Ok(Outcome::Ok)
}

pub fn linear_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, semi: bool) -> Result<Outcome> {
    let (train, test, etr, ete) = embeddings(cfg, checkpoint)?;
    let mut probe = cfg.probe_config();
    if semi {
        probe.label_fraction = SEMI_LABEL_FRACTION;
    }
    let m = linear_probe(&etr, train.labels(), &ete, test.labels(), train.class_count(), &probe)?;
    write_metrics(cfg, if semi { "semi" } else { "linear" }, &m)?;
    Ok(Outcome::Ok)
}

pub fn grad_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_dir(cfg, "grad-check")?;
    let tol = cfg.grad_check.tolerance;
    let mut report = String::from("suite,max_rel_error,instances,status\n");
    let mut ok = true;
    for check in gradsuite::run_all(cfg.grad_check.instances, cfg.seed)? {
        let pass = check.passed(tol);
        ok &= pass;
        let status = if pass { "pass" } else { "FAIL" };
        println!("{:<48} max rel err {:.3e} over {} instances  {status}", check.name, check.max_rel_error, check.instances);
        writeln!(report, "{},{:e},{},{status}", check.name.replace(',', ";"), check.max_rel_error, check.instances).expect("string write");
    }
    std::fs::write(dir.join("report.csv"), report)?;
    Ok(if ok { Outcome::Ok } else { Outcome::VerificationFailed })
}

pub fn lambda_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_dir(cfg, "lambda-sweep")?;
    let s = &cfg.sweep;
    let scene = LambdaScene::new(s.sim_pos, s.sim_negs.clone(), s.tau, 0.0).map_err(|e| Error::Config {
        path: "sweep".into(),
        msg: e.to_string(),
    })?;
    let rows = sweep(&scene, &s.lambdas)?;
    std::fs::write(dir.join("lambda_sweep.csv"), sweep_csv(&rows))?;
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let increasing = sorted.windows(2).all(|w| w[1].loss > w[0].loss || w[1].lambda == w[0].lambda);
    let convex = rows.iter().all(|r| r.grad > 0.0 && r.hess > 0.0);
    for r in &rows {
        println!("lambda {:>5}: L {:.6}  dL {:.6}  d2L {:.6}", r.lambda, r.loss, r.grad, r.hess);
    }
    Ok(if increasing && convex {
        Outcome::Ok
    } else {
        println!("loss is not strictly increasing and convex over the grid");
        Outcome::VerificationFailed
    })
}

fn train_and_probe(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, tc: &TrainConfig) -> Result<Metrics> {
    let out = fit(train, cfg.encoder.clone(), tc, None)?;
    let etr = out.model.embed_dataset(train)?;
    let ete = out.model.embed_dataset(test)?;
    knn_probe(&etr, train.labels(), &ete, test.labels(), train.class_count(), cfg.probe.k)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_dir(cfg, "ablate")?;
    let (train, test) = build_datasets(cfg)?;
    let a = &cfg.ablate;

    let mut grid = String::from("lambda,gamma,seed,top1,f1\n");
    println!("{:>7} {:>7} {:>8} {:>8}", "lambda", "gamma", "top1", "f1");
    for &lambda in &a.lambdas {
        for &gamma in &a.gammas {
            let mut tc = cfg.train_config();
            tc.contrastive.lambda = lambda;
            tc.gamma = gamma;
            let m = train_and_probe(cfg, &train, &test, &tc)?;
            println!("{lambda:>7} {gamma:>7} {:>8.4} {:>8.4}", m.top1, m.f1);
            writeln!(grid, "{lambda},{gamma},{},{},{}", cfg.seed, m.top1, m.f1).expect("string write");
        }
    }
    std::fs::write(dir.join("grid.csv"), grid)?;

    let mut compare = String::from("lambda,seed,top1,f1\n");
    let mut summary = String::from("lambda,seeds,top1_mean,top1_std,f1_mean,f1_std\n");
    println!("\n{:>7} {:>16} {:>16}", "lambda", "top1", "f1");
    for &lambda in &a.compare_lambdas {
        let (mut tops, mut f1s) = (Vec::new(), Vec::new());
        for k in 0..a.compare_seeds as u64 {
            let mut tc = cfg.train_config();
            tc.contrastive.lambda = lambda;
            tc.seed = cfg.seed + k;
            let m = train_and_probe(cfg, &train, &test, &tc)?;
            writeln!(compare, "{lambda},{},{},{}", tc.seed, m.top1, m.f1).expect("string write");
            tops.push(m.top1);
            f1s.push(m.f1);
        }
        let (tm, ts) = mean_std(&tops);
        let (fm, fs) = mean_std(&f1s);
        println!("{lambda:>7} {tm:>8.4} ± {ts:<5.3} {fm:>8.4} ± {fs:<5.3}");
        writeln!(summary, "{lambda},{},{tm},{ts},{fm},{fs}", a.compare_seeds).expect("string write");
    }
    std::fs::write(dir.join("compare.csv"), compare)?;
    std::fs::write(dir.join("compare_summary.csv"), summary)?;
    Ok(Outcome::Ok)
}
