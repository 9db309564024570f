//! Command-line driver: synthetic data generation, contrastive pretraining,
//! probing, fine-tuning, evaluation and multi-seed sweeps.
//!
//! Every subcommand reads the same flat `key = value` settings. Values come
//! from built-in defaults, then an optional `--config` file, then flags, and
//! the effective set is written to `<command>_manifest.txt` in the output
//! directory. Passing that manifest back through `--config` reproduces the
//! run bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Arg, ArgAction, ArgMatches, Command};
use punce_core::data::{
    load_csv_dataset, load_pu_csv, make_pnu, make_pu, synth_gaussians, write_csv, write_pnu_csv,
    write_pu_csv, AugmentConfig,
};
use punce_core::losses::ContrastiveLoss;
use punce_core::model::{load_checkpoint, save_checkpoint};
use punce_core::pu_risk::RiskKind;
use punce_core::train::{
    accuracy_table, cells_csv, evaluate, finetune, lp_ft_table, pretrain, probe, sweep, RunMetrics, SweepConfig,
    TrainConfig, TrainData,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PUNCE_OUT_DIR";

/// A recognised setting with its default. An empty default means the value
/// is optional or derived from the output directory.
struct Key {
    name: &'static str,
    default: &'static str,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

const GEN_KEYS: &[Key] = &[
    key("n", "2000", "training samples"),
    key("test_n", "2000", "test samples"),
    key("d", "10", "feature dimension"),
    key("sep", "6", "distance between the class means"),
    key("pi", "0.5", "fraction of positives"),
    key("seed", "0", "seed for the training set"),
    key("test_seed", "", "seed for the test set (default: seed + 1)"),
];

const MODEL_KEYS: &[Key] = &[
    key("seed", "0", "seed for labeling, initialisation and shuffling"),
    key("batch_size", "64", "batch size b"),
    key("momentum", "0.9", "SGD momentum"),
    key("pi", "", "class prior override (default: stored prior of the data)"),
    key("encoder_dims", "64,64,32", "encoder widths after the input"),
    key("projector_dims", "16", "projector widths after the representation"),
];

const PRETRAIN_KEYS: &[Key] = &[
    key("train", "", "labelled training CSV (default: <out>/train.csv)"),
    key("loss", "punce", "infonce | scl | punce | scl_pu | pnu_punce"),
    key("n_labeled", "50", "labeled positives n_P (labeled samples for pnu_punce)"),
    key("tau", "0.5", "temperature"),
    key("epochs", "100", "pretraining epochs"),
    key("lr0", "0.01", "initial learning rate"),
    key("lr_min", "0", "final learning rate of the cosine schedule"),
    key("joint_lambda", "", "weight of the CE term in λ·CE + (1 − λ)·CL"),
    key("normalize", "true", "L2-normalise projector outputs"),
    key("noise_sigma", "0.1", "augmentation jitter std"),
    key("scale_min", "0.9", "augmentation scale lower bound"),
    key("scale_max", "1.1", "augmentation scale upper bound"),
    key("mask_prob", "0.05", "augmentation feature-mask probability"),
];

const TRANSFER_KEYS: &[Key] = &[
    key("data", "", "PU CSV with an s column (default: <out>/pu_train.csv)"),
    key("checkpoint", "", "starting checkpoint (default: <out>/pretrained.ckpt)"),
    key("test", "", "test CSV evaluated every epoch (default: <out>/test.csv if present)"),
    key("risk", "nnpu", "pn | pvu | upu | nnpu"),
    key("probe_epochs", "50", "transfer epochs"),
    key("probe_lr", "0.03", "transfer learning rate"),
];

const EVAL_KEYS: &[Key] = &[
    key("checkpoint", "", "checkpoint (default: <out>/probed.ckpt)"),
    key("test", "", "test CSV (default: <out>/test.csv)"),
];

const SWEEP_KEYS: &[Key] = &[
    key("test", "", "test CSV (default: <out>/test.csv)"),
    key("losses", "infonce,scl_pu,punce", "contrastive losses to compare"),
    key("seeds", "5", "number of seeds (0..seeds)"),
    key("compare_finetune", "false", "also fine-tune every checkpoint"),
    key("risk", "nnpu", "probe risk"),
    key("probe_epochs", "50", "probe epochs"),
    key("probe_lr", "0.03", "probe learning rate"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cmd {
    GenData,
    Pretrain,
    Probe,
    Finetune,
    Eval,
    Sweep,
}

impl Cmd {
    const ALL: [Cmd; 6] = [Cmd::GenData, Cmd::Pretrain, Cmd::Probe, Cmd::Finetune, Cmd::Eval, Cmd::Sweep];

    fn name(self) -> &'static str {
        match self {
            Cmd::GenData => "gen-data",
            Cmd::Pretrain => "pretrain",
            Cmd::Probe => "probe",
            Cmd::Finetune => "finetune",
            Cmd::Eval => "eval",
            Cmd::Sweep => "sweep",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Cmd::GenData => "Write a synthetic two-Gaussian train.csv and test.csv",
            Cmd::Pretrain => "Simulate a PU split and pretrain encoder + projector contrastively",
            Cmd::Probe => "Train the linear head on frozen features with a PU risk",
            Cmd::Finetune => "Train every parameter with a PU risk",
            Cmd::Eval => "Print the test accuracy of a checkpoint",
            Cmd::Sweep => "Pretrain and probe over losses × n_P × seeds and tabulate",
        }
    }

    /// Keys in manifest order. Later tables override same-named earlier keys.
    fn keys(self) -> Vec<&'static Key> {
        let tables: &[&[Key]] = match self {
            Cmd::GenData => &[GEN_KEYS],
            Cmd::Pretrain => &[MODEL_KEYS, PRETRAIN_KEYS],
            Cmd::Probe | Cmd::Finetune => &[MODEL_KEYS, TRANSFER_KEYS],
            Cmd::Eval => &[EVAL_KEYS],
            Cmd::Sweep => &[MODEL_KEYS, PRETRAIN_KEYS, SWEEP_KEYS],
        };
        let mut out: Vec<&'static Key> = Vec::new();
        for t in tables {
            for k in t.iter() {
                match out.iter_mut().find(|o| o.name == k.name) {
                    Some(slot) => *slot = k,
                    None => out.push(k),
                }
            }
        }
        if self == Cmd::Sweep {
            // The sweep takes lists of losses and labeled-set sizes instead.
            out.retain(|k| k.name != "loss");
            let n = out.iter_mut().find(|k| k.name == "n_labeled").unwrap();
            *n = &SWEEP_N_LABELED;
        }
        out
    }
}

static SWEEP_N_LABELED: Key = key("n_labeled", "50,200,800", "labeled-set sizes n_P");

/// Errors split by exit status: usage problems exit 2, run failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<punce_core::Error> for CliError {
    fn from(e: punce_core::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// The clap command tree; flags are generated from the key tables.
pub fn command() -> Command {
    let mut root = Command::new("punce")
        .about("Contrastive pretraining and linear probing for positive-unlabeled learning")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Cmd::ALL {
        let mut sub = Command::new(cmd.name())
            .about(cmd.about())
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key = value settings file; flags take precedence"),
            )
            .arg(
                Arg::new("out_dir")
                    .long("out-dir")
                    .value_name("DIR")
                    .env(OUT_DIR_ENV)
                    .help("output directory (default: current directory)"),
            );
        for k in cmd.keys() {
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            sub = sub.arg(
                Arg::new(k.name)
                    .long(flag_name(k.name))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("config line {}: expected `key = value`, got `{line}`", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return usage(format!("config line {}: unknown key `{k}`", i + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return usage(format!("config line {}: duplicate key `{k}`", i + 1));
        }
    }
    Ok(out)
}

/// Effective settings of one invocation.
pub struct Settings {
    cmd: Cmd,
    values: BTreeMap<String, String>,
    out_dir: PathBuf,
}

impl Settings {
    fn raw(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(k);
        v.parse().map_err(|e| CliError::Usage(format!("invalid value `{v}` for `{k}`: {e}")))
    }

    fn optional<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        if self.raw(k).is_empty() {
            Ok(None)
        } else {
            self.parse(k).map(Some)
        }
    }

    fn list<T: std::str::FromStr>(&self, k: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(k);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| CliError::Usage(format!("invalid entry `{p}` in `{k}`: {e}")))
            })
            .collect()
    }

    /// A path setting, falling back to `<out>/<default_name>`.
    fn path(&self, k: &str, default_name: &str) -> PathBuf {
        match self.raw(k) {
            "" => self.out_dir.join(default_name),
            p => PathBuf::from(p),
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// `key = value` lines for every key of the command, in table order.
    pub fn manifest(&self) -> String {
        let mut s = format!("# punce {} manifest\n", self.cmd.name());
        for k in self.cmd.keys() {
            s.push_str(&format!("{} = {}\n", k.name, self.raw(k.name)));
        }
        s
    }

    fn train_config(&self) -> Result<TrainConfig, CliError> {
        let defaults = TrainConfig::default();
        let has = |k: &str| self.cmd.keys().iter().any(|x| x.name == k);
        let loss: ContrastiveLoss = if has("loss") { self.parse("loss")? } else { defaults.loss };
        let risk: RiskKind = if has("risk") { self.parse("risk")? } else { defaults.risk };
        let get = |k: &str, d: f64| -> Result<f64, CliError> { if has(k) { self.parse(k) } else { Ok(d) } };
        let getn = |k: &str, d: usize| -> Result<usize, CliError> { if has(k) { self.parse(k) } else { Ok(d) } };
        let augment = if has("noise_sigma") {
            AugmentConfig {
                noise_sigma: self.parse("noise_sigma")?,
                scale_range: (self.parse("scale_min")?, self.parse("scale_max")?),
                mask_prob: self.parse("mask_prob")?,
            }
        } else {
            defaults.augment
        };
        let cfg = TrainConfig {
            loss,
            risk,
            tau: get("tau", defaults.tau)?,
            pi_override: self.optional("pi")?,
            batch_size: self.parse("batch_size")?,
            epochs: getn("epochs", defaults.epochs)?,
            lr0: get("lr0", defaults.lr0)?,
            lr_min: get("lr_min", defaults.lr_min)?,
            momentum: self.parse("momentum")?,
            seed: self.parse("seed")?,
            joint_lambda: if has("joint_lambda") { self.optional("joint_lambda")? } else { None },
            augment,
            normalize: if has("normalize") { self.parse("normalize")? } else { defaults.normalize },
            encoder_dims: self.list("encoder_dims")?,
            projector_dims: self.list("projector_dims")?,
            probe_epochs: getn("probe_epochs", defaults.probe_epochs)?,
            probe_lr: get("probe_lr", defaults.probe_lr)?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn resolve(cmd: Cmd, m: &ArgMatches) -> Result<Settings, CliError> {
    let keys = cmd.keys();
    let allowed: Vec<&str> = keys.iter().map(|k| k.name).collect();
    let mut values: BTreeMap<String, String> = keys
        .iter()
        .map(|k| (k.name.to_string(), k.default.to_string()))
        .collect();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config `{path}`: {e}")))?;
        values.extend(parse_config(&text, &allowed)?);
    }
    for k in &keys {
        if let Some(v) = m.get_one::<String>(k.name) {
            values.insert(k.name.to_string(), v.clone());
        }
    }
    if cmd == Cmd::GenData && values["test_seed"].is_empty() {
        let seed: u64 = values["seed"]
            .parse()
            .map_err(|e| CliError::Usage(format!("invalid value for `seed`: {e}")))?;
        values.insert("test_seed".into(), (seed + 1).to_string());
    }
    let out_dir = PathBuf::from(m.get_one::<String>("out_dir").map(String::as_str).unwrap_or("."));
    let mut settings = Settings { cmd, values, out_dir };
    // Record resolved input paths so the manifest does not depend on where
    // it is replayed from.
    let derived: &[(&str, &str)] = match cmd {
        Cmd::Pretrain => &[("train", "train.csv")],
        Cmd::Probe | Cmd::Finetune => &[("data", "pu_train.csv"), ("checkpoint", "pretrained.ckpt")],
        Cmd::Eval => &[("checkpoint", "probed.ckpt"), ("test", "test.csv")],
        Cmd::Sweep => &[("train", "train.csv"), ("test", "test.csv")],
        Cmd::GenData => &[],
    };
    for (k, name) in derived {
        let p = settings.path(k, name);
        settings.values.insert(k.to_string(), p.display().to_string());
    }
    if matches!(cmd, Cmd::Probe | Cmd::Finetune) && settings.raw("test").is_empty() {
        let p = settings.out("test.csv");
        if p.exists() {
            settings.values.insert("test".into(), p.display().to_string());
        }
    }
    Ok(settings)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Runs the command line `args` (including the program name), printing
/// results to stdout.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                // A closed pipe (`punce --help | head`) is not an error.
                let _ = write!(std::io::stdout(), "{e}");
                return Ok(());
            }
            let msg = e.render().to_string();
            return usage(msg.trim_start_matches("error: ").trim_end());
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = Cmd::ALL.into_iter().find(|c| c.name() == name).expect("known subcommand");
    let s = resolve(cmd, sub)?;
    std::fs::create_dir_all(&s.out_dir)
        .with_context(|| format!("creating output directory {}", s.out_dir.display()))?;
    match cmd {
        Cmd::GenData => gen_data(&s)?,
        Cmd::Pretrain => run_pretrain(&s)?,
        Cmd::Probe | Cmd::Finetune => run_transfer(&s)?,
        Cmd::Eval => run_eval(&s)?,
        Cmd::Sweep => run_sweep(&s)?,
    }
    write(&s.out(&format!("{}_manifest.txt", cmd.name().replace('-', "_"))), &s.manifest())?;
    Ok(())
}

fn gen_data(s: &Settings) -> Result<(), CliError> {
    let (n, d, sep, pi) = (s.parse("n")?, s.parse("d")?, s.parse("sep")?, s.parse("pi")?);
    let train = synth_gaussians(n, d, sep, pi, s.parse("seed")?)?;
    let test = synth_gaussians(s.parse("test_n")?, d, sep, pi, s.parse("test_seed")?)?;
    write_csv(s.out("train.csv"), &train)?;
    write_csv(s.out("test.csv"), &test)?;
    println!("wrote {} and {}", s.out("train.csv").display(), s.out("test.csv").display());
    Ok(())
}

fn run_pretrain(s: &Settings) -> Result<(), CliError> {
    let cfg = s.train_config()?;
    let n_labeled: usize = s.parse("n_labeled")?;
    let train_path = s.path("train", "train.csv");
    let train = load_csv_dataset(&train_path).with_context(|| format!("loading {}", train_path.display()))?;
    // The probe always sees the PU view; SCL and PNU-puNCE pretrain on a PNU view.
    let pu = make_pu(&train, n_labeled, cfg.seed)?;
    write_pu_csv(s.out("pu_train.csv"), &pu)?;
    let pnu = match cfg.loss {
        ContrastiveLoss::Scl => Some(make_pnu(&train, train.len(), cfg.seed)?),
        ContrastiveLoss::PnuPunce => Some(make_pnu(&train, n_labeled, cfg.seed)?),
        _ => None,
    };
    let data = match &pnu {
        Some(p) => {
            write_pnu_csv(s.out("pnu_train.csv"), p)?;
            TrainData::Pnu(p)
        }
        None => TrainData::Pu(&pu),
    };
    let (params, metrics) = pretrain(&cfg, data, cfg.init_params(train.dim())?)?;
    save_checkpoint(s.out("pretrained.ckpt"), &params)?;
    metrics.write_csv(s.out("pretrain_metrics.csv"))?;
    if let Some(l) = metrics.last("train", "loss") {
        println!("final {} loss {l:.6}", cfg.loss);
    }
    Ok(())
}

fn run_transfer(s: &Settings) -> Result<(), CliError> {
    let cfg = s.train_config()?;
    let data_path = s.path("data", "pu_train.csv");
    let data = load_pu_csv(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let params = load_checkpoint(s.path("checkpoint", "pretrained.ckpt"))?;
    let test = match s.raw("test") {
        "" => None,
        p => Some(load_csv_dataset(p).with_context(|| format!("loading {p}"))?),
    };
    let (params, metrics, stem) = if s.cmd == Cmd::Probe {
        let (p, m) = probe(&cfg, params, &data, test.as_ref())?;
        (p, m, "probe")
    } else {
        let (p, m) = finetune(&cfg, params, &data, test.as_ref())?;
        (p, m, "finetune")
    };
    let ckpt = if stem == "probe" { "probed.ckpt" } else { "finetuned.ckpt" };
    save_checkpoint(s.out(ckpt), &params)?;
    metrics.write_csv(s.out(&format!("{stem}_metrics.csv")))?;
    if let Some(r) = metrics.last(stem, "risk") {
        println!("final {} risk {r:.6}", cfg.risk);
    }
    if let Some(a) = metrics.last(&format!("{stem}_test"), "accuracy") {
        println!("test accuracy {a:.4}");
    }
    Ok(())
}

fn run_eval(s: &Settings) -> Result<(), CliError> {
    let params = load_checkpoint(s.path("checkpoint", "probed.ckpt"))?;
    let test_path = s.path("test", "test.csv");
    let test = load_csv_dataset(&test_path).with_context(|| format!("loading {}", test_path.display()))?;
    let e = evaluate(&params, &test)?;
    let mut m = RunMetrics::new();
    e.log(&mut m, 0, "eval", 0)?;
    m.write_csv(s.out("eval_metrics.csv"))?;
    println!(
        "accuracy {:.4} (tp {} tn {} fp {} fn {})",
        e.accuracy, e.true_pos, e.true_neg, e.false_pos, e.false_neg
    );
    Ok(())
}

fn run_sweep(s: &Settings) -> Result<(), CliError> {
    let base = s.train_config()?;
    let seeds: u64 = s.parse("seeds")?;
    let cfg = SweepConfig {
        base,
        losses: s.list("losses")?,
        n_labeled: s.list("n_labeled")?,
        seeds: (0..seeds).collect(),
        compare_finetune: s.parse("compare_finetune")?,
    };
    if cfg.losses.is_empty() || cfg.n_labeled.is_empty() || seeds == 0 {
        return usage("sweep needs at least one loss, one n_labeled and one seed");
    }
    let train = load_csv_dataset(s.path("train", "train.csv")).context("loading training set")?;
    let test = load_csv_dataset(s.path("test", "test.csv")).context("loading test set")?;
    let results = sweep(&cfg, &train, &test)?;
    let table = accuracy_table(&results)?;
    write(&s.out("sweep_table.csv"), &table)?;
    write(&s.out("sweep_cells.csv"), &cells_csv(&results))?;
    if cfg.compare_finetune {
        write(&s.out("sweep_lp_ft.csv"), &lp_ft_table(&results)?)?;
    }
    print!("{table}");
    Ok(())
}

/// Setting names accepted by each subcommand, in manifest order.
pub fn all_keys() -> Vec<(&'static str, Vec<&'static str>)> {
    Cmd::ALL
        .iter()
        .map(|c| (c.name(), c.keys().iter().map(|k| k.name).collect()))
        .collect()
}
