//! Command-line front end. [`run`] is the whole program minus process exit,
//! so tests can drive it in-process.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 criterion not
//! met, 4 numeric failure, 5 invariant violation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::Error;
use crate::ffn::FfnWeights;
use crate::flops::{self, FlopsScenario, Preset};
use crate::fusion::{build_cross_mask, parse_seq_spec, MaskMode};
use crate::model::{load_checkpoint, loss_probe, save_checkpoint, train_smoke, SmokeTask};
use crate::moe::{upcycle, MoeConfig};
use crate::numerics::{init, Tensor};
use crate::params::ParamStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNMET: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;

/// Environment variable that overrides the configured root seed.
pub const SEED_ENV: &str = "EVLM_SEED";

/// Largest deviation `upcycle-check` tolerates.
pub const UPCYCLE_TOL: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(
    name = "gated-vlm",
    version,
    about = "Gated cross-attention VLM toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Record,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Training-cost report comparing full attention with cross-attention.
    Cost {
        #[arg(long, conflicts_with_all = ["scenario", "config"])]
        preset: Option<String>,
        /// `key=value` pairs: B s_img s_txt h_llm d_img r_xc r_xf [media_len]
        #[arg(long, num_args = 1.., conflicts_with = "config")]
        scenario: Vec<String>,
        /// Run config whose [flops] section holds the scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Dump the cross-attention mask for a sequence like `I T T I T`.
    Mask {
        #[arg(long, default_value = "image")]
        mode: String,
        #[arg(long)]
        seq: String,
        #[arg(long, default_value_t = 4)]
        s_img: usize,
        #[arg(long, default_value_t = 1)]
        pad: usize,
        /// Media slots per image.
        #[arg(long, default_value_t = 1)]
        media_len: usize,
    },
    /// Train the toy model on the synthetic captioning task.
    TrainSmoke {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Checkpoint destination.
        #[arg(long, default_value = "smoke.ckpt")]
        out: PathBuf,
    },
    /// Classify a synthetic image by the lowest-loss caption.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class whose prototype generates the image.
        #[arg(long)]
        image: usize,
        /// Comma-separated candidate class ids; every trained class if omitted.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        candidates: Vec<usize>,
        /// Seed of the image noise draw.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Verify the upcycling identities on random inputs.
    UpcycleCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command, reading
/// `EVLM_SEED` from the process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(args, env_seed.as_deref(), out, err)
}

pub fn run_with_env<I, T>(
    args: I,
    env_seed: Option<&str>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let env_seed = match env_seed.map(str::parse::<u64>).transpose() {
        Ok(s) => s,
        Err(_) => {
            let _ = writeln!(err, "error: {SEED_ENV} must be an unsigned integer");
            return EXIT_USAGE;
        }
    };
    let result = match cli.cmd {
        Command::Cost {
            preset,
            scenario,
            config,
            format,
        } => cmd_cost(preset, scenario, config, format, out),
        Command::Mask {
            mode,
            seq,
            s_img,
            pad,
            media_len,
        } => cmd_mask(&mode, &seq, s_img, pad, media_len, out),
        Command::TrainSmoke {
            config,
            steps,
            seed,
            lr,
            out: path,
        } => cmd_train_smoke(config, steps, seed.or(env_seed), lr, path, out),
        Command::Probe {
            checkpoint,
            image,
            candidates,
            sample_seed,
        } => cmd_probe(checkpoint, image, &candidates, sample_seed, out),
        Command::UpcycleCheck { config, seed } => cmd_upcycle_check(config, seed.or(env_seed), out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

type CmdResult = crate::Result<i32>;

fn load_config(path: Option<PathBuf>) -> crate::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(&p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_cost(
    preset: Option<String>,
    scenario: Vec<String>,
    config: Option<PathBuf>,
    format: Format,
    out: &mut dyn Write,
) -> CmdResult {
    let (sc, which): (FlopsScenario, Option<Preset>) = match (preset, config) {
        (Some(name), _) => {
            let p = Preset::parse(&name)?;
            (p.scenario(), Some(p))
        }
        (None, Some(path)) => {
            let sc = RunConfig::load(&path)?
                .flops
                .ok_or_else(|| Error::config("config has no [flops] section"))?;
            (sc, None)
        }
        (None, None) if !scenario.is_empty() => (
            FlopsScenario::from_pairs(scenario.iter().map(String::as_str))?,
            None,
        ),
        (None, None) => return Err(Error::config("cost needs --preset, --scenario or --config")),
    };
    let report = flops::ratio(&sc)?;
    let text = match format {
        Format::Table => report.to_table(which),
        Format::Record => report.to_record(which),
    };
    out.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_mask(
    mode: &str,
    seq: &str,
    s_img: usize,
    pad: usize,
    media_len: usize,
    out: &mut dyn Write,
) -> CmdResult {
    let mode: MaskMode = mode.parse()?;
    let seq = parse_seq_spec(seq, media_len)?;
    let mask = build_cross_mask(&seq, s_img, pad, mode)?;
    out.write_all(mask.dump().as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_train_smoke(
    config: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    path: PathBuf,
    out: &mut dyn Write,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.run.steps = s;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(l) = lr {
        cfg.run.lr = l;
    }
    cfg.validate()?;
    let opts = cfg.train_options()?;
    let outcome = train_smoke(&cfg.model_config(), &opts)?;
    for (i, l) in outcome.curve.iter().enumerate() {
        writeln!(out, "step={i} loss={l:?}")?;
    }
    let (initial, last) = (outcome.initial(), outcome.last());
    let converged = opts.steps > 0 && last < 0.5 * initial;
    writeln!(out, "initial={initial:?}")?;
    writeln!(out, "final={last:?}")?;
    writeln!(out, "converged={converged}")?;

    let meta: BTreeMap<String, String> = [
        ("task_seed", opts.seed.to_string()),
        ("classes", opts.classes.to_string()),
        ("noise", format!("{:?}", opts.noise)),
        ("steps", opts.steps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    save_checkpoint(&outcome.model, &meta, &path)?;
    writeln!(out, "checkpoint={}", path.display())?;
    Ok(if converged { EXIT_OK } else { EXIT_UNMET })
}

fn meta_value<T: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
) -> crate::Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks meta.{key}")))
}

fn cmd_probe(
    path: PathBuf,
    image: usize,
    candidates: &[usize],
    sample_seed: u64,
    out: &mut dyn Write,
) -> CmdResult {
    let ck = load_checkpoint(&path)?;
    let task_seed: u64 = meta_value(&ck.meta, "task_seed")?;
    let classes: usize = meta_value(&ck.meta, "classes")?;
    let noise: f64 = meta_value(&ck.meta, "noise")?;
    if image >= classes {
        return Err(Error::config(format!(
            "--image {image} outside the {classes} trained classes"
        )));
    }
    let all: Vec<usize> = (0..classes).collect();
    let candidates = if candidates.is_empty() {
        &all[..]
    } else {
        candidates
    };
    if let Some(&c) = candidates.iter().find(|&&c| c >= ck.model.config().vocab) {
        return Err(Error::config(format!(
            "candidate {c} outside the vocabulary"
        )));
    }
    let task = SmokeTask::new(ck.model.config(), classes, noise, task_seed)?;
    let mut rng = init::rng(init::derive_seed(sample_seed, "probe.image"));
    let img = task.image(image, &mut rng);
    let captions: Vec<Vec<usize>> = candidates.iter().map(|&c| SmokeTask::caption(c)).collect();
    let r = loss_probe(&ck.model, &img, &captions)?;
    for (i, (c, l)) in candidates.iter().zip(&r.losses).enumerate() {
        writeln!(out, "candidate={i} class={c} loss={l:?}")?;
    }
    writeln!(out, "argmin={}", r.argmin)?;
    writeln!(out, "predicted_class={}", candidates[r.argmin])?;
    Ok(EXIT_OK)
}

/// Largest deviation from the replica slice-sum and world-expert identities
/// over `inputs` random rows.
pub fn upcycle_deviation(
    h: usize,
    hidden: usize,
    moe: &MoeConfig,
    seed: u64,
    inputs: usize,
) -> crate::Result<f64> {
    moe.validate(hidden)?;
    let dense = FfnWeights::new(
        init::normal(&[h, hidden], 1.0, init::derive_seed(seed, "check.w_in")),
        init::normal(&[hidden, h], 1.0, init::derive_seed(seed, "check.w_out")),
    )?;
    let mut store = ParamStore::new(seed);
    let bank = upcycle(&dense, moe, &mut store, "check")?;
    let x: Tensor = init::normal(&[inputs, h], 1.0, init::derive_seed(seed, "check.inputs"));
    let want = dense.apply(&x)?;
    let mut worst = 0.0f64;
    for r in 0..moe.n_replicas {
        let mut sum = Tensor::zeros(want.shape());
        for m in 0..moe.segments {
            sum = sum.add(&bank.expert(r, m).weights(&store).apply(&x)?)?;
        }
        worst = worst.max(sum.max_abs_diff(&want));
    }
    if moe.use_world_expert {
        worst = worst.max(bank.world().weights(&store).apply(&x)?.max_abs_diff(&want));
    }
    Ok(worst)
}

fn cmd_upcycle_check(config: Option<PathBuf>, seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(config)?;
    let moe = cfg.moe.clone().unwrap_or_default();
    let model = cfg.model_config();
    let hidden = model.xattn_dims().ffn_width();
    let seed = seed.unwrap_or(cfg.run.seed);
    let dev = upcycle_deviation(model.h_llm, hidden, &moe, seed, 100)?;
    writeln!(out, "n_replicas={}", moe.n_replicas)?;
    writeln!(out, "segments={}", moe.segments)?;
    writeln!(out, "top_k={}", moe.top_k)?;
    writeln!(out, "ffn_hidden={hidden}")?;
    writeln!(out, "inputs=100")?;
    writeln!(out, "max_deviation={dev:?}")?;
    let ok = dev < UPCYCLE_TOL;
    writeln!(out, "identity_holds={ok}")?;
    Ok(if ok { EXIT_OK } else { EXIT_INVARIANT })
}
