use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use syq_core::inference::{format_cost_table, CostReport, Metrics};
use syq_core::training::{
    fit, generate_synthetic, load_idx_dataset, mnist_paths, Checkpoint, EpochSummary, FitObserver, FitSummary, LogLine,
    Split, TrainConfig, LOG_HEADER,
};
use syq_core::{
    complexity_report, sub_op_counts, Dataset, LayerShape, Network, QuantizedModel, ScalingMethod, SyqError, TrainState,
};

use crate::config::{set_conv_granularity, DataConfig, RunConfig};
use crate::error::CliError;
use crate::{CostArgs, DataArgs, EvalArgs, ExportArgs, TrainArgs};

pub const RUN_DIR_ENV: &str = "SYQ_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

fn load_run_config(path: &Path) -> Result<(RunConfig, String), CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage("--config", format!("cannot read {}: {e}", path.display())))?;
    let cfg =
        serde_json::from_str(&raw).map_err(|e| CliError::usage("--config", format!("{}: {e}", path.display())))?;
    Ok((cfg, raw))
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if a.data.synthetic {
        cfg.data.synthetic = true;
    }
    if let Some(d) = &a.data.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.train.warmup_epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.lr_decay {
        cfg.train.lr_decay = v;
    }
    if let Some(v) = a.lr_step {
        cfg.train.lr_step = v;
    }
    if let Some(v) = a.log_every {
        cfg.train.log_every = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(g) = a.granularity {
        cfg.granularity = g;
        if let Some(m) = cfg.model.as_mut() {
            set_conv_granularity(&mut m.layers, g);
        }
    }
    if let Some(v) = a.wbits {
        cfg.wbits = v;
    }
    if let Some(v) = a.abits {
        cfg.abits = v;
    }
    if let Some(v) = a.fbits {
        cfg.fbits = Some(v);
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = a.train_limit {
        cfg.data.train_limit = Some(v);
    }
    if let Some(v) = a.target_top1 {
        cfg.target_top1 = Some(v);
    }
}

fn limit(data: Dataset, n: Option<usize>) -> Result<Dataset, CliError> {
    match n {
        Some(0) => Err(CliError::usage("limit", "must be positive")),
        Some(n) if n < data.len() => Ok(data.slice(0, n)?),
        _ => Ok(data),
    }
}

fn data_dir(dir: &Path) -> Result<&Path, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(
            "--data-dir",
            format!("{} is not a directory", dir.display()),
        ));
    }
    Ok(dir)
}

fn load_split(data: &DataConfig, split: Split, classes: usize) -> Result<Dataset, CliError> {
    if data.synthetic {
        let (seed, count) = match split {
            Split::Train => (data.synthetic_seed, data.synthetic_train),
            Split::Validation => (data.synthetic_seed.wrapping_add(1), data.synthetic_validation),
        };
        return Ok(generate_synthetic(seed, classes, count)?.with_split(split));
    }
    let dir = data
        .dir
        .as_deref()
        .ok_or_else(|| CliError::usage("--data-dir", "required unless --synthetic is given"))?;
    let (images, labels) = mnist_paths(data_dir(dir)?, split);
    Ok(load_idx_dataset(&images, &labels, split)?)
}

fn run_dir(out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    let root = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from);
    match out {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => root.join(format!(
            "{}-{}-w{}a{}-seed{}",
            if cfg.data.synthetic { "synthetic" } else { "mnist" },
            cfg.granularity,
            cfg.wbits,
            cfg.abits,
            cfg.seed
        )),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(SyqError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

struct RunObserver<'a> {
    log: BufWriter<File>,
    log_path: PathBuf,
    checkpoints: PathBuf,
    network: &'a Network,
    cfg: &'a RunConfig,
    /// Set during the full-precision warmup.
    warmup: bool,
}

impl RunObserver<'_> {
    fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint {
            model: self.network.config().clone(),
            train: self.cfg.train.clone(),
            state: state.clone(),
        }
    }
}

impl FitObserver for RunObserver<'_> {
    fn on_log(&mut self, line: &LogLine) -> syq_core::Result<()> {
        println!("{line}");
        writeln!(self.log, "{line}").map_err(|e| SyqError::Io {
            path: self.log_path.clone(),
            source: e,
        })
    }

    fn on_epoch(&mut self, s: &EpochSummary, state: &TrainState) -> syq_core::Result<bool> {
        let label = if self.warmup { "warmup" } else { "epoch" };
        eprintln!(
            "{label} {}: train loss {:.4} top1 {:.4} | validation loss {:.4} top1 {:.4}",
            s.epoch, s.train_loss, s.train_top1, s.validation.loss, s.validation.top1
        );
        self.checkpoint(state)
            .save(&self.checkpoints.join(format!("{label}-{:03}.syqc", s.epoch)))?;
        Ok(self.warmup || self.cfg.target_top1.is_none_or(|t| s.validation.top1 < t))
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let (mut cfg, raw) = match &a.config {
        Some(p) => {
            let (c, raw) = load_run_config(p)?;
            (c, Some(raw))
        }
        None => (RunConfig::default(), None),
    };
    apply_overrides(&mut cfg, &a);
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let network = Network::new(model_cfg.clone()).map_err(CliError::from_config)?;

    let classes = model_cfg.classes;
    let train_set = limit(load_split(&cfg.data, Split::Train, classes)?, cfg.data.train_limit)?;
    let validation = limit(
        load_split(&cfg.data, Split::Validation, classes)?,
        cfg.data.validation_limit,
    )?;
    if train_set.item_dims() != model_cfg.input {
        return Err(CliError::usage(
            "model.input",
            format!(
                "model expects {:?} images, dataset has {:?}",
                model_cfg.input,
                train_set.item_dims()
            ),
        ));
    }

    let dir = run_dir(cfg.out.as_deref(), &cfg);
    let checkpoints = dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoints).map_err(io_err(&checkpoints))?;
    let echo = serde_json::to_string_pretty(&cfg).expect("run config serializes");
    write_file(&dir.join("config.json"), format!("{echo}\n").as_bytes())?;
    if let Some(raw) = raw {
        write_file(&dir.join("config.input.json"), raw.as_bytes())?;
    }

    let log_path = dir.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "# syq {}", env!("CARGO_PKG_VERSION")).map_err(io_err(&log_path))?;
    writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;

    eprintln!(
        "training {} samples, validating on {}, run directory {}",
        train_set.len(),
        validation.len(),
        dir.display()
    );
    let mut log = Some(log);
    let mut state = if cfg.train.warmup_epochs > 0 {
        let fp_network = Network::new(model_cfg.full_precision()).map_err(CliError::from_config)?;
        let fp_train = TrainConfig {
            epochs: cfg.train.warmup_epochs,
            ..cfg.train.clone()
        };
        let mut fp_state = fp_network
            .init_state(cfg.train.learning_rate)
            .map_err(CliError::from_config)?;
        let mut observer = RunObserver {
            log: log.take().expect("log is open"),
            log_path: log_path.clone(),
            checkpoints: checkpoints.clone(),
            network: &fp_network,
            cfg: &cfg,
            warmup: true,
        };
        let result = fit(
            &fp_network,
            &fp_train,
            &mut fp_state,
            &train_set,
            &validation,
            &mut observer,
        );
        finish_phase(result, &mut observer, &fp_state)?;
        log = Some(observer.log);
        network.init_state_from(&fp_state, cfg.train.learning_rate)?
    } else {
        network
            .init_state(cfg.train.learning_rate)
            .map_err(CliError::from_config)?
    };
    let mut observer = RunObserver {
        log: log.take().expect("log is open"),
        log_path: log_path.clone(),
        checkpoints: checkpoints.clone(),
        network: &network,
        cfg: &cfg,
        warmup: false,
    };
    let result = fit(&network, &cfg.train, &mut state, &train_set, &validation, &mut observer);
    let summary = finish_phase(result, &mut observer, &state)?;

    let last = observer.checkpoint(&state);
    last.save(&checkpoints.join("last.syqc"))?;
    QuantizedModel::from_state(&network, &state)?.save(&dir.join("model.syq1"))?;
    let metrics = serde_json::json!({
        "final_top1": summary.final_top1,
        "best_top1": summary.best_top1,
        "steps": summary.steps,
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_file(&dir.join("metrics.json"), format!("{text}\n").as_bytes())?;
    println!("final_top1\t{:.6}", summary.final_top1);
    println!("best_top1\t{:.6}", summary.best_top1);
    println!("steps\t{}", summary.steps);
    println!("run_dir\t{}", dir.display());
    Ok(())
}

fn finish_phase(
    result: syq_core::Result<FitSummary>,
    observer: &mut RunObserver<'_>,
    state: &TrainState,
) -> Result<FitSummary, CliError> {
    observer.log.flush().map_err(io_err(&observer.log_path))?;
    match result {
        Ok(s) => Ok(s),
        Err(e @ SyqError::Divergence { .. }) => {
            let snapshot = observer.checkpoints.join("diverged.syqc");
            observer.checkpoint(state).save(&snapshot)?;
            eprintln!("state before the failing step saved to {}", snapshot.display());
            Err(e.into())
        }
        Err(e) => Err(CliError::from_config(e)),
    }
}

fn load_model(path: &Path) -> Result<QuantizedModel, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::usage("--model", format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(syq_core::training::CHECKPOINT_MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let network = Network::new(ckpt.model.clone()).map_err(CliError::from_config)?;
        Ok(QuantizedModel::from_state(&network, &ckpt.state)?)
    } else {
        Ok(QuantizedModel::from_bytes(&bytes)?)
    }
}

fn eval_data(data: &DataArgs, classes: usize, n: Option<usize>) -> Result<Dataset, CliError> {
    let cfg = DataConfig {
        synthetic: data.synthetic,
        dir: data.data_dir.clone(),
        ..DataConfig::default()
    };
    if !cfg.synthetic && cfg.dir.is_none() {
        return Err(CliError::usage("--data-dir", "required unless --synthetic is given"));
    }
    limit(load_split(&cfg, Split::Validation, classes)?, n)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let data = eval_data(&a.data, model.classes(), a.limit)?;
    let m: Metrics = model.evaluate(&data).map_err(|e| match e {
        SyqError::Shape { .. } => CliError::usage("--model", format!("model does not fit the dataset: {e}")),
        other => other.into(),
    })?;
    println!("top1\t{:.6}", m.top1);
    println!("loss\t{:.6}", m.loss);
    println!("samples\t{}", m.count);
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.checkpoint)
        .map_err(|e| CliError::usage("--checkpoint", format!("cannot read {}: {e}", a.checkpoint.display())))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let network = Network::new(ckpt.model.clone()).map_err(CliError::from_config)?;
    let model = QuantizedModel::from_state(&network, &ckpt.state)?;
    let out = model.to_bytes()?;
    write_file(&a.out, &out)?;
    println!("wrote {} ({} bytes)", a.out.display(), out.len());
    Ok(())
}

pub fn cost(a: CostArgs) -> Result<(), CliError> {
    let shape = LayerShape::conv(a.k, a.i, a.n, a.f).map_err(|e| CliError::usage("-K/-I/-N/-F", e.to_string()))?;
    let methods: Vec<ScalingMethod> = if a.method.eq_ignore_ascii_case("all") {
        ScalingMethod::ALL.to_vec()
    } else {
        vec![a
            .method
            .parse()
            .map_err(|e: SyqError| CliError::usage("--method", e.to_string()))?]
    };
    let all = methods.len() > 1;
    let mut reports: Vec<CostReport> = Vec::new();
    for m in methods {
        match complexity_report(&shape, m) {
            Ok(r) => reports.push(r),
            Err(e) if all => eprintln!("skipping {m}: {e}"),
            Err(e) => return Err(CliError::usage("--method", e.to_string())),
        }
    }
    print!("{}", format_cost_table(&shape, &reports));
    let ops = sub_op_counts(&shape)?;
    println!(
        "pixel sub-dot per output: L_v={} mul={} ({} low-precision + {} full) add={}",
        ops.lv, ops.mul, ops.mul_low, ops.mul_full, ops.add
    );
    Ok(())
}
