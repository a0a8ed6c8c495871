use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bcaf::data::{load_manifest, make_synthetic_dataset, write_dataset, Dataset, Split, SynthConfig};
use bcaf::train::{self, gradcheck, RunTable, TrainConfig};
use bcaf::{Error, Exec, ParamStore, Result, RngState};

#[derive(Parser)]
#[command(name = "bcaf", version, about = "Bimodal connection attention fusion for audio/text emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<TrainConfig> {
        let mut cfg = match self.config.as_deref().or(fallback) {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys given in the config file or as overrides.
    fn explicit_keys(&self) -> Result<Vec<String>> {
        let mut keys: Vec<String> = self
            .overrides
            .iter()
            .filter_map(|o| o.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            keys.extend(
                text.lines()
                    .filter_map(|l| l.split('#').next()?.split_once('=').map(|(k, _)| k.trim().to_string())),
            );
        }
        Ok(keys)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest; writes params.bcfp, config.txt, metrics.json and confusion.csv
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Do not print per-epoch progress
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate saved parameters on one split
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to config.txt next to the parameter file
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for metrics.json and confusion.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model, each removal, and each attention variant
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for ablation.json and ablation.csv
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run configurations one after another
        #[arg(long)]
        sequential: bool,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value = "d=8,dl=4,T=3,B=2,C=4")]
        dims: gradcheck::GradDims,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long)]
        sequential: bool,
    },
    /// Write a synthetic bimodal dataset (feature files plus manifest.jsonl)
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        convs: usize,
        /// Mean conversation length
        #[arg(long, default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Norm of the class centers
        #[arg(long, default_value_t = 10.0)]
        sep: f64,
        /// Fraction of classes whose text center belongs to another class
        #[arg(long, default_value_t = 0.0)]
        conflict: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over the loss weights alpha, beta and mu
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,1")]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1")]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        mu: Vec<f64>,
        /// Directory for sweep.json and sweep.csv
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fill `d_model`, `d_latent`, `d_ff` and `num_classes` from the data unless
/// the user set them.
fn with_dataset_shape(mut cfg: TrainConfig, data: &Dataset, args: &ConfigArgs) -> Result<TrainConfig> {
    let keys = args.explicit_keys()?;
    let set = |k: &str| keys.iter().any(|s| s == k);
    if let Some(d) = data.dim() {
        if !set("d_model") {
            cfg.model.d_model = d;
            if !set("d_latent") {
                cfg.model.d_latent = (d / 2).max(1);
            }
            if !set("d_ff") {
                cfg.model.d_ff = 4 * d;
            }
        }
    }
    if !set("num_classes") {
        cfg.model.num_classes = data.num_classes().max(2);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_table(table: &RunTable, out: Option<&Path>, stem: &str) -> Result<()> {
    print!("{}", table.to_csv());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join(format!("{stem}.json")), &table.to_json()?)?;
        write(&dir.join(format!("{stem}.csv")), &table.to_csv())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, manifest, out, quiet } => {
            let data = load_manifest(&manifest)?;
            let cfg = with_dataset_shape(config.resolve(None)?, &data, &config)?;
            let outcome = train::train_with_progress(&data, &cfg, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  loss {:.5}  (L_c {:.5}  L_a {:.5}  L_l {:.5}  L_m {:.5})  val wF1 {:.4}",
                        r.epoch, r.train.total, r.train.connection, r.train.audio, r.train.text, r.train.bimodal, r.validation_weighted_f1
                    );
                }
            })?;
            create_dir(&out)?;
            outcome.params.save(out.join("params.bcfp"))?;
            cfg.save(out.join("config.txt"))?;
            let report = outcome.report;
            write(&out.join("metrics.json"), &report.to_json()?)?;
            write(&out.join("confusion.csv"), &report.confusion_csv())?;
            println!(
                "best epoch {:?} of {}; validation weighted F1 {:.4}, accuracy {:.4}",
                report.best_epoch, report.epochs, report.weighted_f1, report.accuracy
            );
            Ok(true)
        }
        Command::Eval { params, manifest, split, config, out } => {
            let sibling = params.with_file_name("config.txt");
            let fallback = sibling.exists().then_some(sibling.as_path());
            if config.config.is_none() && fallback.is_none() {
                return Err(Error::Config(format!(
                    "no config given and {} does not exist",
                    sibling.display()
                )));
            }
            let cfg = config.resolve(fallback)?;
            let store = ParamStore::load(&params)?;
            let data = load_manifest(&manifest)?;
            let convs = data.split(split);
            let report = train::evaluate(&convs, &store, &cfg)?;
            println!("{}", report.to_json()?);
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("metrics.json"), &report.to_json()?)?;
                write(&dir.join("confusion.csv"), &report.confusion_csv())?;
            }
            Ok(true)
        }
        Command::Ablate { config, manifest, out, sequential } => {
            let data = load_manifest(&manifest)?;
            let cfg = with_dataset_shape(config.resolve(None)?, &data, &config)?;
            let table = train::ablation_run(&data, &cfg, exec(sequential))?;
            save_table(&table, out.as_deref(), "ablation")?;
            Ok(true)
        }
        Command::Gradcheck { dims, seed, step, sequential } => {
            let tol = gradcheck::Tolerance {
                step,
                ..Default::default()
            };
            let reports = gradcheck::gradient_suite(dims, seed, tol, exec(sequential))?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{} {:<22} {:>6} elements  max abs {:.2e}  max rel beyond abs tol {:.2e}  refined {}  unresolved {}{}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.elements,
                    r.max_abs_err,
                    r.max_rel_err,
                    r.refined,
                    r.unresolved,
                    r.worst.as_ref().map(|w| format!("  worst {w}")).unwrap_or_default()
                );
            }
            Ok(ok)
        }
        Command::Synth { classes, convs, len, dim, sep, conflict, seed, out } => {
            let cfg = SynthConfig {
                num_classes: classes,
                conversations: convs,
                mean_len: len,
                d_model: dim,
                separation: sep,
                conflict_fraction: conflict,
                ..SynthConfig::default()
            };
            let data = make_synthetic_dataset(&mut RngState::new(seed), &cfg);
            let manifest = write_dataset(&out, &data)?;
            let (tr, va, te) = cfg.split_sizes();
            println!("wrote {} ({tr} train / {va} validation / {te} test conversations)", manifest.display());
            Ok(true)
        }
        Command::Sweep { config, manifest, alpha, beta, mu, out, sequential } => {
            let data = load_manifest(&manifest)?;
            let cfg = with_dataset_shape(config.resolve(None)?, &data, &config)?;
            let table = train::sweep(&data, &cfg, &alpha, &beta, &mu, exec(sequential))?;
            save_table(&table, out.as_deref(), "sweep")?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
