use std::path::{Path, PathBuf};
use std::process::Command as Process;

use fmatune_core::augment::{compose, AugmentationSet, SetName};
use fmatune_core::calibration::{calibrate, eval_accuracy, CalibrationTask};
use fmatune_core::losses::StDistance;
use fmatune_core::report::{
    curves_csv, curves_svg, evaluate_column, run_grid, write_samples, Condition, MetricGrid,
};
use fmatune_core::trainer::{
    finetune_with, grid_search_gamma, train_baseline_with, EpochRecord, RunManifest, TrainConfig,
};
use fmatune_core::{
    AugmentationKind, AugmentationSpec, Image, LabeledDataset, LossConfig, Method, ModelSnapshot,
    PresetManifest, RandomStream, Strategy, StrategyConfig,
};

use crate::args::{
    AugmentArgs, CalibrateArgs, Cli, Command, EvalArgs, FinetuneArgs, GammaArgs, GlobalArgs,
    MethodArgs, ReportArgs, RunGridArgs, StDistanceArg, TrainBaselineArgs,
};
use crate::inputs::{self, Layout};
use crate::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::TrainBaseline(a) => train_baseline_cmd(g, a),
        Command::Calibrate(a) => calibrate_cmd(g, a),
        Command::Finetune(a) => finetune_cmd(g, a),
        Command::GridSearchGamma(a) => gamma_cmd(g, a),
        Command::Eval(a) => eval_cmd(g, a),
        Command::RunGrid(a) => run_grid_cmd(g, a),
        Command::Report(a) => report_cmd(g, a),
        Command::Augment(a) => augment_cmd(g, a),
    }
}

fn progress(tag: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        eprintln!(
            "[{tag}] epoch {:>3}  rate {:.0e}  loss {:.4}  clean {:.2}%{}",
            r.epoch + 1,
            r.rate,
            r.loss_total,
            100.0 * r.clean_accuracy,
            r.set
                .as_deref()
                .map(|s| format!("  set {s}"))
                .unwrap_or_default()
        )
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::data(e.to_string()))
}

// ---------------------------------------------------------------------------

fn train_baseline_cmd(g: &GlobalArgs, a: &TrainBaselineArgs) -> Result<(), CliError> {
    let (train, val) = inputs::datasets(g)?;
    let dir = Layout::new(g).baseline_dir();
    std::fs::remove_file(dir.join("metrics.csv")).ok();
    let mut cfg = TrainConfig::baseline(inputs::parse_schedule(&a.schedule)?, g.seed);
    cfg.batch_size = a.batch_size;
    cfg.momentum = a.momentum;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.eval_seed = g.eval_seed;
    cfg.out_dir = Some(dir.clone());
    let init = ModelSnapshot::init(inputs::architecture(a.arch), g.seed)?;
    eprintln!(
        "training baseline: {} parameters, {} train / {} val images",
        init.parameter_count(),
        train.len(),
        val.len()
    );
    let (model, manifest) =
        train_baseline_with(&init, &train, &val, &cfg, &mut progress("baseline"))?;
    let path = inputs::baseline_path(g);
    model.save(&path)?;
    manifest.save(&dir.join("manifest.json"))?;
    let best = manifest
        .selected_epoch
        .map(|e| manifest.epochs[e].clean_accuracy)
        .unwrap_or(0.0);
    println!("baseline {} (clean {:.2}%)", path.display(), 100.0 * best);
    Ok(())
}

fn calibrate_cmd(g: &GlobalArgs, a: &CalibrateArgs) -> Result<(), CliError> {
    let model = inputs::load_baseline(g)?;
    let (_, val) = inputs::datasets(g)?;
    let kinds: Vec<AugmentationKind> = match &a.kinds {
        Some(list) => list
            .split(',')
            .map(|k| k.parse().map_err(CliError::from))
            .collect::<Result<_, _>>()?,
        None => AugmentationKind::ALL.to_vec(),
    };
    let path = inputs::presets_path(g);
    let mut manifest = if path.exists() {
        PresetManifest::load(&path)?
    } else {
        PresetManifest::default()
    };
    let mut outcomes = Vec::new();
    for kind in kinds {
        let mut task = CalibrationTask::new(kind);
        task.target_drop = a.target_drop;
        task.tolerance = a.tolerance;
        task.max_iter = a.max_iter;
        task.eval_seed = g.eval_seed;
        let out = calibrate(&model, &val, &task)?;
        println!(
            "{:<17} {} = {:<10.5} drop {:.2}%{}",
            kind.key(),
            out.spec.knob_name(),
            out.spec.knob(),
            100.0 * out.measured_drop,
            if out.saturated {
                "  (saturated at bound)"
            } else {
                ""
            }
        );
        manifest.insert(&g.preset_dataset, out.spec);
        outcomes.push(out);
    }
    let dir = Layout::new(g).calibration_dir();
    inputs::write(&path, manifest.to_toml().as_bytes())?;
    inputs::write(&dir.join("outcomes.json"), &json(&outcomes)?)?;
    println!("presets {}", path.display());
    Ok(())
}

fn st_distance(d: StDistanceArg) -> StDistance {
    match d {
        StDistanceArg::Kl => StDistance::Kl,
        StDistanceArg::L2 => StDistance::L2,
    }
}

fn ia_kind(m: &MethodArgs) -> Result<AugmentationKind, CliError> {
    let set = m
        .set
        .as_deref()
        .ok_or_else(|| CliError::usage("--strategy ia needs --set KIND"))?;
    Ok(set.parse()?)
}

pub fn slug(method: Method, m: &MethodArgs) -> Result<String, CliError> {
    let base = format!("{}_{}", method.label(), m.strategy).to_ascii_lowercase();
    Ok(match m.strategy {
        Strategy::Ca => base,
        Strategy::Ia => format!("{base}_{}", ia_kind(m)?.key()),
    })
}

fn column_label(method: Method, m: &MethodArgs) -> Result<String, CliError> {
    Ok(match m.strategy {
        Strategy::Ca => format!("{}/CA", method.label()),
        Strategy::Ia => format!("{}/IA {}", method.label(), ia_kind(m)?.short()),
    })
}

fn finetune_config(
    g: &GlobalArgs,
    method: Method,
    m: &MethodArgs,
    specs: &[AugmentationSpec],
    epochs: usize,
) -> Result<TrainConfig, CliError> {
    let strategy = match m.strategy {
        Strategy::Ca => StrategyConfig::ca_from_specs(specs)?,
        Strategy::Ia => {
            let kind = ia_kind(m)?;
            StrategyConfig::individual(
                *specs
                    .iter()
                    .find(|s| s.kind() == kind)
                    .expect("all kinds present"),
            )
        }
    };
    let mut loss = LossConfig::new(method);
    match method {
        Method::Fma => loss.gamma = m.gamma,
        Method::St => loss.st_weight = m.gamma,
        Method::At => {}
    }
    loss.st_distance = st_distance(m.st_distance);
    let mut cfg = TrainConfig::finetune(loss, strategy, specs.to_vec(), g.seed)
        .with_constant_rate(m.rate, epochs);
    cfg.batch_size = m.batch_size;
    cfg.momentum = m.momentum;
    cfg.eval_seed = g.eval_seed;
    cfg.validate()?;
    Ok(cfg)
}

fn save_run(dir: &Path, model: &ModelSnapshot, manifest: &RunManifest) -> Result<(), CliError> {
    model.save(&dir.join("model.snap"))?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(())
}

fn finetune_cmd(g: &GlobalArgs, a: &FinetuneArgs) -> Result<(), CliError> {
    let baseline = inputs::load_baseline(g)?;
    let specs = inputs::specs(g)?;
    let (train, val) = inputs::datasets(g)?;
    let method = a.method.method;
    let mut cfg = finetune_config(g, method, &a.method, &specs, a.epochs)?;
    let slug = match &a.label {
        Some(l) => l.clone(),
        None => slug(method, &a.method)?,
    };
    let dir = Layout::new(g).run_dir(&slug);
    std::fs::remove_file(dir.join("metrics.csv")).ok();
    cfg.out_dir = Some(dir.clone());
    cfg.checkpoint_every = a.checkpoint_every;
    let (model, manifest) = finetune_with(&baseline, &train, &val, &cfg, &mut progress(&slug))?;
    save_run(&dir, &model, &manifest)?;
    println!("run {}", dir.display());
    Ok(())
}

fn gamma_cmd(g: &GlobalArgs, a: &GammaArgs) -> Result<(), CliError> {
    let baseline = inputs::load_baseline(g)?;
    let specs = inputs::specs(g)?;
    let (train, val) = inputs::datasets(g)?;
    let method = a.method.method;
    if method == Method::At {
        return Err(CliError::usage("AT has no regularizer weight to search"));
    }
    let grid = inputs::parse_floats(&a.grid, "grid")?;
    let mut cfg = finetune_config(g, method, &a.method, &specs, a.epochs)?;
    if a.method.strategy == Strategy::Ia {
        let kind = ia_kind(&a.method)?;
        cfg.eval_specs.retain(|s| s.kind() == kind);
    }
    let clean = eval_accuracy(&baseline, &val, None, g.eval_seed)?;
    let search = grid_search_gamma(&baseline, &train, &val, &grid, &cfg, clean)?;
    println!("weight,clean,mean_augmented,feasible");
    for r in &search.table {
        println!(
            "{},{:.2},{:.2},{}",
            r.gamma,
            100.0 * r.clean_accuracy,
            100.0 * r.mean_augmented_accuracy,
            r.feasible
        );
    }
    if search.constraint_violated {
        eprintln!(
            "warning: no weight kept clean accuracy within 1% of the baseline ({:.2}%)",
            100.0 * clean
        );
    }
    println!("best {}", search.best);
    let path = Layout::new(g)
        .root
        .join("gamma")
        .join(format!("{}.json", slug(method, &a.method)?));
    inputs::write(&path, &json(&search)?)
}

fn column_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_grid(dir: &Path, grid: &MetricGrid) -> Result<(), CliError> {
    inputs::write(&dir.join("grid.csv"), grid.to_csv().as_bytes())?;
    inputs::write(&dir.join("grid.json"), grid.to_json()?.as_bytes())
}

fn eval_cmd(g: &GlobalArgs, a: &EvalArgs) -> Result<(), CliError> {
    let specs = inputs::specs(g)?;
    let mut paths = a.models.clone();
    if paths.is_empty() {
        paths.push(inputs::baseline_path(g));
    }
    let models: Vec<(PathBuf, ModelSnapshot)> = paths
        .iter()
        .map(|p| Ok((p.clone(), inputs::load_snapshot(p, "snapshot not found")?)))
        .collect::<Result<_, CliError>>()?;
    let (_, val) = inputs::datasets(g)?;
    let columns = models
        .iter()
        .map(|(p, m)| {
            Ok((
                column_name(p),
                evaluate_column(m, &val, &specs, g.eval_seed)?,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let grid = MetricGrid::from_columns(columns)?;
    write_grid(&Layout::new(g).root.join("eval"), &grid)?;
    print!("{}", grid.to_csv());
    Ok(())
}

// ---------------------------------------------------------------------------

fn ensure_inputs(g: &GlobalArgs, a: &RunGridArgs) -> Result<(), CliError> {
    if !inputs::baseline_path(g).exists() {
        if !a.auto {
            inputs::load_baseline(g)?;
        }
        train_baseline_cmd(
            g,
            &TrainBaselineArgs {
                schedule: a.schedule.clone(),
                batch_size: a.method.batch_size,
                momentum: a.method.momentum,
                arch: a.arch,
                checkpoint_every: 0,
            },
        )?;
    }
    if !g.builtin_presets && !inputs::presets_path(g).exists() {
        if !a.auto {
            inputs::specs(g)?;
        }
        calibrate_cmd(
            g,
            &CalibrateArgs {
                target_drop: fmatune_core::calibration::DEFAULT_TARGET_DROP,
                tolerance: fmatune_core::calibration::DEFAULT_TOLERANCE,
                max_iter: fmatune_core::calibration::DEFAULT_MAX_ITER,
                kinds: None,
            },
        )?;
    }
    Ok(())
}

fn run_grid_cmd(g: &GlobalArgs, a: &RunGridArgs) -> Result<(), CliError> {
    let methods: Vec<Method> = a
        .methods
        .split(',')
        .map(|m| m.parse().map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::usage("--methods is empty"));
    }
    ensure_inputs(g, a)?;
    let baseline = inputs::load_baseline(g)?;
    let specs = inputs::specs(g)?;
    let (train, val) = inputs::datasets(g)?;
    let layout = Layout::new(g);
    let mut runs = Vec::new();
    for &m in &methods {
        let slug = slug(m, &a.method)?;
        let mut cfg = finetune_config(g, m, &a.method, &specs, a.epochs)?;
        let dir = layout.run_dir(&slug);
        std::fs::remove_file(dir.join("metrics.csv")).ok();
        cfg.out_dir = Some(dir);
        runs.push((slug, column_label(m, &a.method)?, cfg));
    }

    let grid = if a.parallel {
        spawn_finetunes(g, a, &methods)?;
        let mut columns = vec![(
            "Baseline".to_string(),
            evaluate_column(&baseline, &val, &specs, g.eval_seed)?,
        )];
        for (slug, label, _) in &runs {
            let dir = layout.run_dir(slug);
            let model = inputs::load_snapshot(
                &dir.join("model.snap"),
                "child finetune did not produce it",
            )?;
            let mut manifest = RunManifest::load(&dir.join("manifest.json"))?;
            let col = evaluate_column(&model, &val, &specs, g.eval_seed)?;
            manifest.final_grid = Condition::all()
                .into_iter()
                .map(Condition::label)
                .zip(col.iter().copied())
                .collect();
            manifest.save(&dir.join("manifest.json"))?;
            columns.push((label.clone(), col));
        }
        MetricGrid::from_columns(columns)?
    } else {
        let configs: Vec<(String, TrainConfig)> = runs
            .iter()
            .map(|(_, l, c)| (l.clone(), c.clone()))
            .collect();
        let (grid, done) = run_grid(&baseline, &train, &val, &specs, &configs, g.eval_seed)?;
        for ((slug, _, _), run) in runs.iter().zip(&done) {
            save_run(&layout.run_dir(slug), &run.snapshot, &run.manifest)?;
        }
        grid
    };
    write_grid(&layout.grid_dir(), &grid)?;
    print!("{}", grid.to_csv());
    Ok(())
}

fn spawn_finetunes(g: &GlobalArgs, a: &RunGridArgs, methods: &[Method]) -> Result<(), CliError> {
    let exe = std::env::current_exe()
        .map_err(|e| CliError::usage(format!("cannot locate own executable: {e}")))?;
    let mut shared: Vec<String> = vec![
        "--seed".into(),
        g.seed.to_string(),
        "--eval-seed".into(),
        g.eval_seed.to_string(),
        "--out-dir".into(),
        g.out_dir.display().to_string(),
        "--baseline".into(),
        inputs::baseline_path(g).display().to_string(),
        "--preset-dataset".into(),
        g.preset_dataset.clone(),
    ];
    if g.builtin_presets {
        shared.push("--builtin-presets".into());
    } else {
        shared.extend([
            "--presets".into(),
            inputs::presets_path(g).display().to_string(),
        ]);
    }
    if let Some(n) = g.synthetic {
        shared.extend(["--synthetic".into(), n.to_string()]);
    }
    if let Some(d) = &g.data_dir {
        shared.extend(["--data-dir".into(), d.display().to_string()]);
    }
    if let Some(n) = g.train_per_class {
        shared.extend(["--train-per-class".into(), n.to_string()]);
    }
    if let Some(n) = g.val_per_class {
        shared.extend(["--val-per-class".into(), n.to_string()]);
    }
    let m = &a.method;
    let mut children = Vec::new();
    for method in methods {
        let mut args = vec!["finetune".to_string()];
        args.extend(shared.iter().cloned());
        args.extend([
            "--method".into(),
            method.label().to_ascii_lowercase(),
            "--strategy".into(),
            m.strategy.to_string().to_ascii_lowercase(),
            "--gamma".into(),
            m.gamma.to_string(),
            "--st-distance".into(),
            match m.st_distance {
                StDistanceArg::Kl => "kl".into(),
                StDistanceArg::L2 => "l2".into(),
            },
            "--rate".into(),
            m.rate.to_string(),
            "--batch-size".into(),
            m.batch_size.to_string(),
            "--momentum".into(),
            m.momentum.to_string(),
            "--epochs".into(),
            a.epochs.to_string(),
        ]);
        if let Some(set) = &m.set {
            args.extend(["--set".into(), set.clone()]);
        }
        let child = Process::new(&exe)
            .args(&args)
            .spawn()
            .map_err(|e| CliError::usage(format!("cannot start finetune for {method}: {e}")))?;
        children.push((*method, child));
    }
    let mut failure = None;
    for (method, mut child) in children {
        let status = child
            .wait()
            .map_err(|e| CliError::usage(format!("finetune for {method}: {e}")))?;
        if !status.success() && failure.is_none() {
            let code = status
                .code()
                .and_then(|c| u8::try_from(c).ok())
                .unwrap_or(crate::EXIT_NUMERIC);
            failure = Some(CliError {
                code,
                message: format!("finetune for {method} exited with {status}"),
            });
        }
    }
    failure.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------

fn run_dirs(g: &GlobalArgs, a: &ReportArgs) -> Result<Vec<PathBuf>, CliError> {
    if !a.runs.is_empty() {
        return Ok(a
            .runs
            .iter()
            .map(|r| {
                if r.exists() {
                    r.clone()
                } else {
                    Layout::new(g).run_dir(&r.to_string_lossy())
                }
            })
            .collect());
    }
    let root = Layout::new(g).runs_dir();
    inputs::require(
        &root,
        "no finetuning runs yet; run `fmatune finetune` or `fmatune run-grid`",
    )?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| CliError::data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::data(format!(
            "missing {}: no run manifests found",
            root.join("*/manifest.json").display()
        )));
    }
    Ok(dirs)
}

fn sample_image(g: &GlobalArgs, a: &ReportArgs) -> Result<Image, CliError> {
    if let Some(p) = &a.sample_image {
        inputs::require(p, "sample image not found")?;
        return Ok(Image::read_png(p)?);
    }
    if inputs::has_data(g) {
        let (_, val) = inputs::datasets(g)?;
        return val.images().get(a.sample_index).cloned().ok_or_else(|| {
            CliError::usage(format!(
                "--sample-index {} beyond {} validation images",
                a.sample_index,
                val.len()
            ))
        });
    }
    let ds: LabeledDataset = fmatune_core::data::synth_dataset(1, 10, g.seed)?;
    Ok(ds.images()[0].clone())
}

fn report_cmd(g: &GlobalArgs, a: &ReportArgs) -> Result<(), CliError> {
    let dirs = run_dirs(g, a)?;
    let out = Layout::new(g).report_dir();
    for dir in &dirs {
        let path = dir.join("manifest.json");
        inputs::require(&path, "run manifest not found")?;
        let manifest = RunManifest::load(&path)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let target = out.join(&name);
        inputs::write(
            &target.join("curves.csv"),
            curves_csv(&manifest)?.as_bytes(),
        )?;
        inputs::write(
            &target.join("curves.svg"),
            curves_svg(&manifest, &name)?.as_bytes(),
        )?;
        println!("curves {}", target.display());
    }
    let specs = inputs::specs_or_builtin(g)?;
    let img = sample_image(g, a)?;
    let written = write_samples(&img, &specs, g.seed, a.scale, &out.join("samples"))?;
    println!(
        "samples {} ({} images)",
        out.join("samples").display(),
        written.len()
    );
    Ok(())
}

fn augment_cmd(g: &GlobalArgs, a: &AugmentArgs) -> Result<(), CliError> {
    inputs::require(&a.input, "input image not found")?;
    let img = Image::read_png(&a.input)?;
    let specs = inputs::specs_or_builtin(g)?;
    let name = match a.kind.trim().to_ascii_lowercase().as_str() {
        "combined+" => "combined_plus".to_string(),
        "combined-" => "combined_minus".to_string(),
        other => other.replace('-', "_"),
    };
    let set = match name.as_str() {
        "combined_plus" => AugmentationSet::select(SetName::CombinedPlus, &specs)?,
        "combined_minus" => AugmentationSet::select(SetName::CombinedMinus, &specs)?,
        _ => {
            let kind: AugmentationKind = a.kind.parse()?;
            let spec = *specs
                .iter()
                .find(|s| s.kind() == kind)
                .expect("all kinds present");
            AugmentationSet::single(match a.knob {
                Some(k) => spec.with_knob(k)?,
                None => spec,
            })
        }
    };
    if a.knob.is_some() && !matches!(set.name(), SetName::Single(_)) {
        return Err(CliError::usage(
            "--knob applies to a single corruption, not a combined set",
        ));
    }
    let out = compose(&img, &set, &RandomStream::new(g.seed))?;
    let path = a.output.clone().unwrap_or_else(|| {
        Layout::new(g)
            .root
            .join("augment")
            .join(format!("{name}.png"))
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    out.write_png(&path)?;
    println!("{}", path.display());
    Ok(())
}
