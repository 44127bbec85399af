use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use paddyspec::calibration::{apply_calibration, BandCalibration};
use paddyspec::config::{PipelineConfig, CACHE_ENV};
use paddyspec::dataset::{build_manifest, class_weights, stratified_kfold, FoldAssignment, Manifest, LABELS};
use paddyspec::imaging::{load_image, RGB, RGNIR};
use paddyspec::pipeline::{
    calibrate_session, load_calibrations, load_fused_set, ndvi_all, register_all, register_report, session_files,
};
use paddyspec::registration::register_pair;
use paddyspec::spectral::{fuse_resized, ndvi_image};
use paddyspec::synth::{write_fixtures, FixtureParams, PairGeometry};
use paddyspec::training::{
    cross_validate, evaluate, load_checkpoint, predict, save_checkpoint, train_fold, Evaluation, InputMode, SampleSet,
};
use paddyspec::{Error, Result};
use paddyspec_nn::gradcheck;

use crate::{Cli, Command, ConfigCmd, DatasetCmd, GlobalArgs, SynthCmd};

struct Ctx {
    /// As written (relative paths kept), with flag overrides applied; echoed
    /// next to outputs.
    echo: PipelineConfig,
    cfg: PipelineConfig,
    jobs: usize,
    dry_run: bool,
}

impl Ctx {
    fn new(g: &GlobalArgs) -> Result<Ctx> {
        let (mut echo, base) = match &g.config {
            Some(p) => {
                let base = p.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
                (PipelineConfig::load(p)?, base.to_path_buf())
            }
            None => (PipelineConfig::default(), PathBuf::from(".")),
        };
        if let Some(seed) = g.seed {
            echo.seed = seed;
        }
        if let Some(mode) = g.input_mode {
            echo.train.input_mode = mode;
        }
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            echo.paths.cache_dir = cache.into();
        }
        if g.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        echo.validate()?;
        let cfg = echo.resolve(&base, None);
        Ok(Ctx {
            echo,
            cfg,
            jobs: g.jobs,
            dry_run: g.dry_run,
        })
    }

    fn out(&self, stage: &str) -> PathBuf {
        self.cfg.paths.output_dir.join(stage)
    }

    fn fused_dir(&self) -> PathBuf {
        self.cfg.paths.cache_dir.join("fused")
    }

    /// Creates the stage directory and writes the config echo into it.
    fn start(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write(&dir.join("config.toml"), self.echo.to_toml().as_bytes())?;
        Ok(dir)
    }

    fn records(&self, pairs: &Option<PathBuf>) -> Result<Manifest> {
        match pairs {
            Some(p) => Manifest::read_csv(p, &self.cfg.paths.data_root),
            None => build_manifest(&self.cfg.paths.data_root),
        }
    }

    fn manifest_and_folds(&self) -> Result<(Manifest, FoldAssignment)> {
        let dir = self.out("dataset");
        let mpath = dir.join("manifest.csv");
        let fpath = dir.join("folds.csv");
        for p in [&mpath, &fpath] {
            if !p.exists() {
                return Err(Error::Dataset(format!(
                    "{} is missing; run `dataset build` and `dataset split` first",
                    p.display()
                )));
            }
        }
        let manifest = Manifest::read_csv(&mpath, &self.cfg.paths.data_root)?;
        let folds = FoldAssignment::read_csv(&manifest, &fpath, self.cfg.seed)?;
        Ok((manifest, folds))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn status(failures: usize) -> ExitCode {
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Config {
            action: ConfigCmd::PrintDefaults,
        } => {
            print!("{}", PipelineConfig::defaults_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { action } => synth(cli, action),
        Command::Gradcheck { trials, skip_network } => gradcheck_cmd(&Ctx::new(&cli.global)?, *trials, *skip_network),
        Command::Register { pairs } => register(&Ctx::new(&cli.global)?, pairs),
        Command::Calibrate => calibrate(&Ctx::new(&cli.global)?),
        Command::Ndvi { pairs } => ndvi(&Ctx::new(&cli.global)?, pairs),
        Command::Dataset { action } => {
            let ctx = Ctx::new(&cli.global)?;
            match action {
                DatasetCmd::Build => dataset_build(&ctx),
                DatasetCmd::Split { k } => dataset_split(&ctx, k.unwrap_or(ctx.cfg.dataset.k)),
            }
        }
        Command::Train { fold, cv } => train(&Ctx::new(&cli.global)?, *fold, *cv),
        Command::Eval { checkpoint, fold } => eval(&Ctx::new(&cli.global)?, checkpoint, *fold),
        Command::Predict {
            rgb,
            rgnir,
            checkpoint,
            calibration,
        } => predict_cmd(&Ctx::new(&cli.global)?, rgb, rgnir, checkpoint, calibration),
    }
}

fn synth(cli: &Cli, action: &SynthCmd) -> Result<ExitCode> {
    let SynthCmd::Fixtures {
        out,
        per_class,
        size,
        sessions,
    } = action;
    if per_class.len() != 3 {
        return Err(Error::Config(format!("--per-class needs 3 counts, got {}", per_class.len())));
    }
    if *size < 48 {
        return Err(Error::Config(format!("--size must be at least 48, got {size}")));
    }
    let params = FixtureParams {
        per_class: [per_class[0], per_class[1], per_class[2]],
        sessions: *sessions,
        geometry: PairGeometry {
            rgnir_size: (*size, *size),
            rgb_size: (*size, *size),
            ..Default::default()
        },
        seed: cli.global.seed.unwrap_or(0),
    };
    if cli.global.dry_run {
        println!("would write {} sample pairs and {sessions} sessions to {}", per_class.iter().sum::<usize>(), out.display());
        return Ok(ExitCode::SUCCESS);
    }
    let n = write_fixtures(out, &params)?;
    println!("wrote {n} sample pairs and {sessions} sessions to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(ctx: &Ctx, trials: usize, skip_network: bool) -> Result<ExitCode> {
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let mut failed = 0;
    let mut reports = gradcheck::op_suite(trials, ctx.cfg.seed)?;
    if !skip_network {
        reports.push(gradcheck::resnet_check(trials, ctx.cfg.seed, 2, 32)?);
    }
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{} {:<32} trials={:<3} comparisons={:<6} max_rel={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.comparisons,
            r.max_rel_error
        );
    }
    println!("{} of {} checks within {:e}", reports.len() - failed, reports.len(), gradcheck::REL_TOL);
    Ok(status(failed))
}

fn register(ctx: &Ctx, pairs: &Option<PathBuf>) -> Result<ExitCode> {
    let manifest = ctx.records(pairs)?;
    let dir = ctx.out("register");
    if ctx.dry_run {
        let outcomes = register_all(&manifest.records, &ctx.cfg.registration, &dir, ctx.jobs, true)?;
        let bad: Vec<_> = outcomes.iter().filter_map(|o| o.result.as_ref().err().map(|e| (&o.id, e))).collect();
        for (id, e) in &bad {
            eprintln!("{id}: {e}");
        }
        println!("dry run: {} pairs readable, {} not; nothing written", outcomes.len() - bad.len(), bad.len());
        return Ok(status(bad.len()));
    }
    let dir = ctx.start("register")?;
    let outcomes = register_all(&manifest.records, &ctx.cfg.registration, &dir, ctx.jobs, false)?;
    write(&dir.join("report.csv"), register_report(&outcomes)?.as_bytes())?;
    let mut failed = 0;
    for o in &outcomes {
        if let Err(e) = &o.result {
            failed += 1;
            eprintln!("{}: {e}", o.id);
        }
    }
    println!("registered {}/{} pairs; report at {}", outcomes.len() - failed, outcomes.len(), dir.join("report.csv").display());
    Ok(status(failed))
}

fn calibrate(ctx: &Ctx) -> Result<ExitCode> {
    let files = session_files(&ctx.cfg.calibration.sessions_dir)?;
    if files.is_empty() {
        return Err(Error::Calibration(format!(
            "no session files in {}",
            ctx.cfg.calibration.sessions_dir.display()
        )));
    }
    let results: Vec<_> = files.iter().map(|p| (p, calibrate_session(p))).collect();
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    for (p, r) in &results {
        if let Err(e) = r {
            eprintln!("{}: {e}", p.display());
        }
    }
    if ctx.dry_run {
        println!("dry run: {} of {} sessions fit; nothing written", results.len() - failed, results.len());
        return Ok(status(failed));
    }
    let dir = ctx.start("calibrate")?;
    let calib_dir = dir.join("sessions");
    fs::create_dir_all(&calib_dir).map_err(|e| Error::Io {
        path: calib_dir.clone(),
        source: e,
    })?;
    let mut report = String::from("session,band,gain,offset,residual\n");
    for (_, r) in &results {
        if let Ok((id, calib)) = r {
            calib.save(&calib_dir.join(format!("{id}.toml")))?;
            for (b, f) in calib.bands.iter().zip(&calib.fits) {
                report.push_str(&format!("{id},{b},{:.9},{:.9},{:.3e}\n", f.gain, f.offset, f.residual));
            }
        }
    }
    write(&dir.join("report.csv"), report.as_bytes())?;
    println!("calibrated {}/{} sessions", results.len() - failed, results.len());
    Ok(status(failed))
}

fn ndvi(ctx: &Ctx, pairs: &Option<PathBuf>) -> Result<ExitCode> {
    let manifest = ctx.records(pairs)?;
    let calibrations = load_calibrations(&ctx.out("calibrate").join("sessions"))?;
    if ctx.dry_run {
        let missing: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| !calibrations.contains_key(&r.session_id))
            .map(|r| r.id.as_str())
            .collect();
        for id in &missing {
            eprintln!("{id}: no calibration for its session");
        }
        println!("dry run: {} samples, {} without calibration; nothing written", manifest.len(), missing.len());
        return Ok(status(missing.len()));
    }
    let dir = ctx.start("ndvi")?;
    let outcomes = ndvi_all(
        &manifest.records,
        &calibrations,
        &ctx.out("register"),
        &dir,
        &ctx.fused_dir(),
        ctx.cfg.train.image_size,
        ctx.jobs,
    )?;
    let mut report = String::from("id,status,clamp_rate,message\n");
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(rate) => report.push_str(&format!("{},ok,{rate:.6},\n", o.id)),
            Err(e) => {
                failed += 1;
                eprintln!("{e}");
                report.push_str(&format!("{},failed,,\"{}\"\n", o.id, e.to_string().replace('"', "'")));
            }
        }
    }
    write(&dir.join("report.csv"), report.as_bytes())?;
    println!(
        "fused {}/{} samples at {}x{} into {}",
        outcomes.len() - failed,
        outcomes.len(),
        ctx.cfg.train.image_size,
        ctx.cfg.train.image_size,
        ctx.fused_dir().display()
    );
    Ok(status(failed))
}

fn dataset_build(ctx: &Ctx) -> Result<ExitCode> {
    let root = &ctx.cfg.paths.data_root;
    let m = build_manifest(root)?;
    let counts = m.counts();
    let mut summary = String::new();
    for (l, c) in LABELS.iter().zip(&counts) {
        summary.push_str(&format!("{l}: {c}\n"));
    }
    summary.push_str(&format!("total: {}\n", m.len()));
    if let Ok(w) = class_weights(&m) {
        summary.push_str(&format!("class_weights: {:.4} {:.4} {:.4}\n", w[0], w[1], w[2]));
    }
    summary.push_str(&format!("sha256: {}\n", m.checksum(root)?));
    print!("{summary}");
    if ctx.dry_run {
        return Ok(ExitCode::SUCCESS);
    }
    let dir = ctx.start("dataset")?;
    m.write_csv(&dir.join("manifest.csv"), root)?;
    write(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn dataset_split(ctx: &Ctx, k: usize) -> Result<ExitCode> {
    let path = ctx.out("dataset").join("manifest.csv");
    if !path.exists() {
        return Err(Error::Dataset(format!("{} is missing; run `dataset build` first", path.display())));
    }
    let m = Manifest::read_csv(&path, &ctx.cfg.paths.data_root)?;
    let folds = stratified_kfold(&m, k, ctx.cfg.seed)?;
    for f in 0..k {
        let c = m.subset(&folds.indices(f)).counts();
        println!("fold {f}: {} {} {}", c[0], c[1], c[2]);
    }
    if ctx.dry_run {
        return Ok(ExitCode::SUCCESS);
    }
    let dir = ctx.start("dataset")?;
    folds.write_csv(&m, &dir.join("folds.csv"))?;
    Ok(ExitCode::SUCCESS)
}

fn evaluation_text(e: &Evaluation) -> String {
    let mut s = format!("{}\n", e.confusion);
    for (l, f) in LABELS.iter().zip(&e.f1) {
        s.push_str(&format!("f1_{l}: {f:.6}\n"));
    }
    s.push_str(&format!("macro_f1: {:.6}\n", e.macro_f1));
    s
}

fn load_set(ctx: &Ctx, manifest: &Manifest, mode: InputMode) -> Result<SampleSet> {
    load_fused_set(manifest, &ctx.fused_dir(), mode)
}

fn train(ctx: &Ctx, fold: usize, cv: bool) -> Result<ExitCode> {
    let (manifest, folds) = ctx.manifest_and_folds()?;
    let cfg = &ctx.cfg.train;
    let data = load_set(ctx, &manifest, InputMode::RgbNdvi)?;
    if ctx.dry_run {
        println!(
            "dry run: {} samples of {}x{} in {} folds; would train {}",
            data.len(),
            data.size,
            data.size,
            folds.k,
            if cv { "every fold in both modes".to_string() } else { format!("fold {fold} ({})", cfg.input_mode) }
        );
        return Ok(ExitCode::SUCCESS);
    }
    if cv {
        let report = cross_validate::<f32>(cfg, &data, &folds, &[InputMode::Rgb, InputMode::RgbNdvi])?;
        let dir = ctx.start("train")?;
        write(&dir.join("cv_report.txt"), format!("{report}\n").as_bytes())?;
        println!("{report}");
        return Ok(ExitCode::SUCCESS);
    }
    let data = match cfg.input_mode {
        InputMode::Rgb => data.rgb_only(),
        InputMode::RgbNdvi => data,
    };
    let result = train_fold::<f32>(cfg, &data, &folds, fold)?;
    let dir = ctx.start("train")?.join(format!("fold{fold}"));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    save_checkpoint(
        &result.model,
        cfg,
        &[("fold", fold.to_string()), ("seed", ctx.cfg.seed.to_string()), ("val_macro_f1", format!("{:.6}", result.evaluation.macro_f1))],
        &dir.join("checkpoint.psck"),
    )?;
    result.history.write_csv(&dir.join("history.csv"))?;
    print!("{}", evaluation_text(&result.evaluation));
    Ok(ExitCode::SUCCESS)
}

fn eval(ctx: &Ctx, checkpoint: &Option<PathBuf>, fold: usize) -> Result<ExitCode> {
    let ckpt = checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out("train").join(format!("fold{fold}")).join("checkpoint.psck"));
    let loaded = load_checkpoint(&ckpt)?;
    let (manifest, folds) = ctx.manifest_and_folds()?;
    if fold >= folds.k {
        return Err(Error::Config(format!("fold {fold} out of range for k = {}", folds.k)));
    }
    let held_out = manifest.subset(&folds.indices(fold));
    let set = load_set(ctx, &held_out, loaded.input_mode)?;
    let e = evaluate(&loaded.model, &set)?;
    let text = format!("checkpoint input mode: {}\nfold: {fold}\nsamples: {}\n{}", loaded.input_mode, set.len(), evaluation_text(&e));
    print!("{text}");
    if !ctx.dry_run {
        let dir = ctx.start("eval")?;
        write(&dir.join(format!("fold{fold}_report.txt")), text.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn predict_cmd(ctx: &Ctx, rgb: &Path, rgnir: &Path, checkpoint: &Path, calibration: &Option<PathBuf>) -> Result<ExitCode> {
    let loaded = load_checkpoint(checkpoint)?;
    let rgb_img = load_image(rgb, &RGB)?;
    let dn = load_image(rgnir, &RGNIR)?;
    let calib = match calibration {
        Some(p) => BandCalibration::load(p)?,
        None => {
            log::warn!("no --calibration given; treating R-G-NIR values as reflectance");
            BandCalibration::identity()
        }
    };
    let reg = register_pair(&rgb_img, &dn, &ctx.cfg.registration)?;
    let (refl, _) = apply_calibration(&dn, &calib)?;
    let ndvi = ndvi_image(&refl)?;
    let size = loaded.image_size.unwrap_or(ctx.cfg.train.image_size);
    let fused = fuse_resized(&reg.image, &ndvi, &reg.mask, size)?;
    let set = SampleSet::from_fused(&[("input".to_string(), 0, fused)], loaded.input_mode)?;
    let (pred, probs) = predict(&loaded.model, &set)?;
    for (l, p) in LABELS.iter().zip(&probs[0]) {
        println!("{l}: {p:.6}");
    }
    println!("prediction: {}", LABELS[pred[0]]);
    Ok(ExitCode::SUCCESS)
}
