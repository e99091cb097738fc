//! Command implementations. Each returns `Ok(())` on success; `main`
//! maps errors to the stable exit codes (1 check failure, 2 usage or
//! format problem, 3 numeric abort).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use pip_restore::controller::{Classifier, ClassifierConfig};
use pip_restore::degrade::{DegradationKind, TaskSet};
use pip_restore::gradcheck;
use pip_restore::io::pnm;
use pip_restore::metrics::{psnr, ssim};
use pip_restore::trainer::{
    evaluate, evaluate_composite, restore_image, OmegaPolicy, Trainer,
};
use pip_restore::{Error, Result};

use crate::config::RunConfig;

// ── train ──

pub fn cmd_train(config_path: &Path, seed_flag: Option<u64>) -> Result<()> {
    let doc = RunConfig::from_file(config_path)?;
    let cfg = doc.resolve(seed_flag)?;
    let echo = doc.resolved_echo(seed_flag)?;

    std::fs::create_dir_all(&doc.paths.log_dir)?;
    std::fs::create_dir_all(&doc.paths.checkpoint_dir)?;
    let echo_text = serde_json::to_string_pretty(&echo)
        .map_err(|e| Error::Config(format!("config echo: {e}")))?;
    std::fs::write(doc.paths.log_dir.join("run.json"), echo_text)?;

    let mut metrics = std::fs::File::create(doc.paths.log_dir.join("metrics.log"))?;
    let mut trainer = Trainer::new(cfg)?;
    let mut sink_err = None;
    trainer.train(Some(&doc.paths.checkpoint_dir), &mut |r| {
        let line = r.line();
        println!("{line}");
        if let Err(e) = writeln!(metrics, "{line}") {
            sink_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e.into());
    }

    let angles = render_angles(&trainer)?;
    std::fs::write(doc.paths.log_dir.join("angles.txt"), &angles)?;
    println!("checkpoint {}", doc.paths.checkpoint_dir.join("latest.ckpt").display());
    Ok(())
}

// ── restore ──

pub struct RestoreArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub omega: &'a str,
    pub out: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub classifier: Option<&'a Path>,
}

pub fn cmd_restore(args: &RestoreArgs) -> Result<()> {
    let trainer = Trainer::open(args.checkpoint)?;
    let img = pnm::read_ppm(args.input)?;
    check_divisible(&img, trainer.cfg.levels)?;

    let omega = resolve_omega(args.omega, &trainer.cfg.tasks, args.classifier, Some(&img))?;
    println!("omega {}", format_vec(&omega));

    let restored = restore_image(&trainer.model, &trainer.store, &img, &omega)?;
    let out = args
        .out
        .map(PathBuf::from)
        .unwrap_or_else(|| args.input.with_extension("restored.ppm"));
    pnm::write_ppm(&out, &restored)?;
    println!("restored {}", out.display());

    if let Some(reference) = args.reference {
        let reference = pnm::read_ppm(reference)?;
        println!(
            "restored psnr_db {:.4} ssim {:.4}",
            psnr(&restored, &reference, 1.0)?,
            ssim(&restored, &reference)?
        );
        println!(
            "input    psnr_db {:.4} ssim {:.4}",
            psnr(&img, &reference, 1.0)?,
            ssim(&img, &reference)?
        );
    }
    Ok(())
}

fn check_divisible(img: &pip_restore::tensor::Tensor<f32>, levels: usize) -> Result<()> {
    let stride = 1usize << (levels - 1);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h % stride != 0 || w % stride != 0 {
        let up = |n: usize| n.div_ceil(stride) * stride;
        return Err(Error::invalid(
            "restore",
            format!(
                "image is {h}x{w} but the model needs sides divisible by {stride}; pad to {}x{}",
                up(h),
                up(w)
            ),
        ));
    }
    Ok(())
}

/// Parse an ω spec: a task name, an explicit comma-separated vector, or
/// `auto` (classifier argmax as a one-hot, so a correct prediction gives
/// bit-identical output to naming the task).
fn resolve_omega(
    spec: &str,
    tasks: &TaskSet,
    classifier: Option<&Path>,
    img: Option<&pip_restore::tensor::Tensor<f32>>,
) -> Result<Vec<f32>> {
    if spec == "auto" {
        let path = classifier.ok_or_else(|| {
            Error::Config("omega \"auto\" needs --classifier <checkpoint>".into())
        })?;
        let img = img.ok_or_else(|| Error::Config("omega \"auto\" needs an input image".into()))?;
        let cls = Classifier::open(path)?;
        if cls.cfg.tasks.kinds() != tasks.kinds() {
            return Err(Error::Config(format!(
                "classifier tasks [{}] do not match the restorer tasks [{}]",
                names(&cls.cfg.tasks),
                names(tasks)
            )));
        }
        let picked = cls.classify(img)?.argmax;
        let mut w = vec![0.0f32; tasks.len()];
        w[picked] = 1.0;
        println!("classified {}", tasks.kinds()[picked].name());
        return Ok(w);
    }
    if let Ok(kind) = DegradationKind::from_name(spec) {
        return tasks.omega(kind);
    }
    let parts: Vec<&str> = spec.split(',').collect();
    let mut w = Vec::with_capacity(parts.len());
    for p in &parts {
        w.push(p.trim().parse::<f32>().map_err(|_| {
            Error::Config(format!(
                "omega {spec:?} is neither a task name, a comma-separated vector, nor \"auto\""
            ))
        })?);
    }
    if w.len() != tasks.len() {
        return Err(Error::Config(format!(
            "omega vector has {} entries, the model has {} tasks",
            w.len(),
            tasks.len()
        )));
    }
    Ok(w)
}

fn names(tasks: &TaskSet) -> String {
    tasks.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

fn format_vec(v: &[f32]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

// ── eval ──

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub tasks: Option<&'a str>,
    pub omega: &'a str,
    pub ablation: Option<char>,
    pub composite: bool,
    pub n_per_task: usize,
    pub classifier: Option<&'a Path>,
    pub log: Option<&'a Path>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if let Some(letter) = args.ablation {
        if !('a'..='e').contains(&letter) {
            return Err(Error::Config(format!("ablation must be one of a-e, got '{letter}'")));
        }
    }
    let trainer = Trainer::open(args.checkpoint)?;
    if let Some(letter) = args.ablation {
        if letter != trainer.cfg.ablation {
            return Err(Error::Config(format!(
                "checkpoint was trained as ablation '{}', not '{letter}'",
                trainer.cfg.ablation
            )));
        }
    }
    let tasks = trainer.cfg.tasks.clone();
    if let Some(spec) = args.tasks {
        let requested = TaskSet::parse(spec)?;
        if requested.kinds() != tasks.kinds() {
            return Err(Error::Config(format!(
                "evaluation tasks [{}] must match the trained tasks [{}]",
                names(&requested),
                names(&tasks)
            )));
        }
    }

    let cls;
    let cls_policy;
    let custom;
    let policy = match args.omega {
        "oracle" => OmegaPolicy::Oracle,
        "wrong" => OmegaPolicy::WrongCyclic,
        "auto" => {
            let path = args.classifier.ok_or_else(|| {
                Error::Config("omega \"auto\" needs --classifier <checkpoint>".into())
            })?;
            cls = Classifier::open(path)?;
            if cls.cfg.tasks.kinds() != tasks.kinds() {
                return Err(Error::Config(format!(
                    "classifier tasks [{}] do not match the restorer tasks [{}]",
                    names(&cls.cfg.tasks),
                    names(&tasks)
                )));
            }
            cls_policy = move |img: &pip_restore::tensor::Tensor<f32>| -> Result<Vec<f32>> {
                let picked = cls.classify(img)?.argmax;
                let mut w = vec![0.0f32; cls.cfg.tasks.len()];
                w[picked] = 1.0;
                Ok(w)
            };
            OmegaPolicy::Classifier(&cls_policy)
        }
        spec => {
            custom = resolve_omega(spec, &tasks, None, None)?;
            OmegaPolicy::Custom(custom)
        }
    };

    let outcome = evaluate(
        &trainer.model,
        &trainer.store,
        &tasks,
        &policy,
        args.n_per_task,
        trainer.cfg.image_size,
        trainer.cfg.seed,
    )?;

    let mut table = outcome.restored.format_table();
    table.push_str(&format!(
        "{:<15} {:>7.2}   {:.4}   {:>4}\n",
        "Average",
        outcome.average_psnr,
        outcome.average_ssim,
        outcome.per_image.len()
    ));

    if args.composite {
        let bases: Vec<DegradationKind> = [DegradationKind::Rain, DegradationKind::Haze]
            .into_iter()
            .filter(|k| tasks.index_of(*k).is_some())
            .collect();
        if bases.is_empty() {
            return Err(Error::Config(
                "composite evaluation needs rain or haze among the trained tasks".into(),
            ));
        }
        let report = evaluate_composite(
            &trainer.model,
            &trainer.store,
            &tasks,
            &bases,
            args.n_per_task,
            trainer.cfg.image_size,
            trainer.cfg.seed,
        )?;
        for row in report.rows() {
            table.push_str(&format!(
                "{:<15} {:>7.2}   {:.4}   {:>4}\n",
                row.task, row.psnr_db, row.ssim, row.count
            ));
        }
    }

    print!("{table}");
    println!();
    println!("input baseline");
    print!("{}", outcome.degraded.format_table());

    let log_path = args
        .log
        .map(PathBuf::from)
        .unwrap_or_else(|| args.checkpoint.with_extension("eval.log"));
    std::fs::write(&log_path, &table)?;
    println!("log {}", log_path.display());
    Ok(())
}

// ── inspect prompts ──

pub fn cmd_inspect_prompts(checkpoint: &Path) -> Result<()> {
    let trainer = Trainer::open(checkpoint)?;
    if trainer.model.pips.is_empty() {
        return Err(Error::invalid("inspect", "checkpoint contains no prompt tensors"));
    }
    print!("{}", render_angles(&trainer)?);
    Ok(())
}

/// Per-instance pairwise angle matrices in degrees plus a global
/// min-angle summary. Matrix rows are plain whitespace-separated numbers.
fn render_angles(trainer: &Trainer) -> Result<String> {
    let mut out = String::new();
    let mut min_angle = f64::INFINITY;
    for (name, pairs) in trainer.angle_tables()? {
        let t = trainer.cfg.tasks.len();
        let mut matrix = vec![vec![0.0f64; t]; t];
        for (i, j, deg) in pairs {
            matrix[i][j] = deg;
            matrix[j][i] = deg;
            min_angle = min_angle.min(deg);
        }
        out.push_str(&name);
        out.push('\n');
        for row in &matrix {
            let cells: Vec<String> = row.iter().map(|d| format!("{d:9.3}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out.push_str(&format!("min_angle_deg {min_angle:.3}\n"));
    Ok(out)
}

// ── gradcheck ──

pub fn cmd_gradcheck(corrupt_dwconv: bool) -> Result<()> {
    let mut suites = vec![
        ("primitive", gradcheck::primitive_cases()),
        ("prompt", pip_restore::pip::composite_check_cases()),
        ("network", pip_restore::backbone::composite_check_cases()),
    ];
    let mut failures = Vec::new();
    for (suite, cases) in &mut suites {
        for case in cases.iter_mut() {
            let corrupt = corrupt_dwconv && case.name == "dwconv3x3";
            let r = case.run(corrupt)?;
            println!(
                "{suite:<10} {:<28} max_rel_err {:.3e}  tol {:.0e}  {}",
                r.name,
                r.max_rel_err,
                r.tol,
                if r.pass { "ok" } else { "FAIL" }
            );
            if !r.pass {
                failures.push(r.name);
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Check(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )));
    }
    println!("all gradients match");
    Ok(())
}

// ── classifier commands ──

pub struct TrainClassifierArgs<'a> {
    pub tasks: &'a str,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub image_size: Option<usize>,
    pub out: &'a Path,
    pub holdout_per_task: usize,
}

pub fn cmd_train_classifier(args: &TrainClassifierArgs) -> Result<()> {
    let mut cfg = ClassifierConfig::desk(TaskSet::parse(args.tasks)?);
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.image_size {
        cfg.image_size = s;
    }
    let mut cls = Classifier::new(cfg)?;
    cls.train(&mut |step, loss| println!("step {step} loss {loss:.6}"))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    cls.save(args.out)?;

    println!("task        correct  total  accuracy");
    let table = cls.accuracy_table(args.holdout_per_task)?;
    for row in &table {
        println!("{:<11} {:>7}  {:>5}  {:.4}", row.task, row.correct, row.total, row.fraction());
    }
    let correct: usize = table.iter().map(|r| r.correct).sum();
    let total: usize = table.iter().map(|r| r.total).sum();
    println!("overall {:.4}", correct as f64 / total.max(1) as f64);
    println!("checkpoint {}", args.out.display());
    Ok(())
}

pub fn cmd_classify(classifier: &Path, image: &Path) -> Result<()> {
    let cls = Classifier::open(classifier)?;
    let img = pnm::read_ppm(image)?;
    let c = cls.classify(&img)?;
    println!("omega {}", format_vec(&c.omega));
    println!("task {}", cls.cfg.tasks.kinds()[c.argmax].name());
    Ok(())
}
