//! Command-line front end.
//!
//! Every output starts with `#` lines carrying the crate version and the
//! fully resolved configuration. Failures print one JSON line on stderr,
//! `{"error": KIND, "exit_code": CODE, "message": TEXT}`, and exit with
//! 2 (configuration), 3 (numeric failure) or 4 (unsupported measure).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ewens::{distribution_csv, ewens_distribution};
use crate::experiments::{
    martingale_diagnostic, run_experiment, theorem_check, ExperimentSpec, MeasureInput,
    TheoremCheck,
};
use crate::measures::{
    merger_rates, validate_measure, CoalescentMeasure, MeasureDescription, PsiEvaluator,
    PsiVariant,
};
use crate::simulator::{simulate, MarkedGenealogy, StopRule};
use crate::speed::{comes_down_check, SpeedSolver};
use crate::statistics::{
    family_decomposition, partition_csv, sites_csv, spectrum_csv, trajectories, trajectories_csv,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "xigen", version, about = "Marked genealogies of exchangeable coalescents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// Write the output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// TOML file with default values for the flags of this subcommand
    /// (for `experiment`: the experiment spec).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct MeasureArgs {
    /// Shorthand: kingman, bs, beta:ALPHA, lambda-atom:X.
    #[arg(long)]
    measure: Option<String>,
    /// Measure description file (TOML or JSON).
    #[arg(long)]
    measure_file: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct SimArgs {
    #[command(flatten)]
    measure: MeasureArgs,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// tau, tau-star, time=T or blocks=B.
    #[arg(long)]
    stop: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate ψ or ψ̄ at one or more q.
    Psi {
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, value_delimiter = ',')]
        q: Vec<f64>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Tables of v^n(t), ℓ_t(n) and ℓ(n).
    Speed {
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, value_delimiter = ',')]
        n: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        t: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one genealogy; json exports the event log, csv the trajectories.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Also write the genealogy document to this path.
        #[arg(long)]
        export: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sites families, allele partition and spectra of a genealogy.
    Families {
        /// Genealogy document written by `simulate`.
        #[arg(long)]
        import: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Exact Ewens distribution of allele configurations.
    Ewens {
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment spec, a theorem check, or the M̄ diagnostic.
    Experiment {
        /// T1, P2, T3, T4 or C7.
        #[arg(long)]
        check: Option<String>,
        #[arg(long)]
        replicates: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-replicate CSV here.
        #[arg(long)]
        per_replicate: Option<PathBuf>,
        /// Run the M̄ diagnostic up to this time instead of a spec.
        #[arg(long)]
        martingale: Option<f64>,
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long)]
        n: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Validate a measure and report its regularity, CDI class and rates.
    Check {
        #[command(flatten)]
        measure: MeasureArgs,
        /// Also list the merger rates with this many blocks.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Standard,
    Bar,
}

/// Defaults read from `--config` for every subcommand except `experiment`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    measure: Option<MeasureInput>,
    measure_file: Option<PathBuf>,
    n: Option<NList>,
    gamma: Option<f64>,
    seed: Option<u64>,
    replicates: Option<u64>,
    stop: Option<String>,
    q: Option<Vec<f64>>,
    t: Option<Vec<f64>>,
    variant: Option<PsiVariant>,
    import: Option<PathBuf>,
    export: Option<PathBuf>,
    out: Option<PathBuf>,
    format: Option<Format>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NList {
    One(u64),
    Many(Vec<u64>),
}

impl NList {
    fn values(&self) -> Vec<u64> {
        match self {
            NList::One(n) => vec![*n],
            NList::Many(v) => v.clone(),
        }
    }

    fn single(&self) -> Result<u64> {
        match self.values().as_slice() {
            [n] => Ok(*n),
            _ => Err(Error::Config("`n` must be a single integer here".into())),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Drop `#` comment lines so headed outputs can be read back.
fn strip_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.message().to_string())),
    }
}

fn resolve_measure(args: &MeasureArgs, cfg: &RunConfig) -> Result<(CoalescentMeasure, MeasureDescription)> {
    let desc = if let Some(s) = &args.measure {
        MeasureDescription::from_shorthand(s)?
    } else if let Some(p) = &args.measure_file {
        MeasureDescription::parse(&strip_comments(&read_text(p)?))?
    } else if let Some(m) = &cfg.measure {
        match m {
            MeasureInput::Shorthand(s) => MeasureDescription::from_shorthand(s)?,
            MeasureInput::Description(d) => d.clone(),
        }
    } else if let Some(p) = &cfg.measure_file {
        MeasureDescription::parse(&strip_comments(&read_text(p)?))?
    } else {
        return Err(Error::Config("missing required field `measure`".into()));
    };
    let m = validate_measure(&desc)?;
    let resolved = m.to_description();
    Ok((m, resolved))
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required field `{name}`")))
}

/// Format a float the way `{:?}` does, which always keeps a decimal point.
fn num(x: f64) -> String {
    format!("{x:?}")
}

struct Output {
    body: String,
    config: Value,
    out: Option<PathBuf>,
}

fn header(config: &Value) -> String {
    format!("# xigen {VERSION}\n# config: {config}\n")
}

fn emit(o: Output, stdout: &mut dyn Write) -> Result<()> {
    let text = format!("{}{}", header(&o.config), o.body);
    match o.out {
        Some(p) => fs::write(&p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => stdout.write_all(text.as_bytes()).map_err(Error::from),
    }
}

fn sim_settings(sim: &SimArgs, cfg: &RunConfig) -> Result<(CoalescentMeasure, MeasureDescription, u32, f64, u64, StopRule)> {
    let (m, desc) = resolve_measure(&sim.measure, cfg)?;
    let n = match sim.n {
        Some(n) => n,
        None => required(cfg.n.as_ref(), "n")?.single()? as u32,
    };
    let gamma = sim.gamma.or(cfg.gamma).unwrap_or(0.0);
    let seed = sim.seed.or(cfg.seed).unwrap_or(0);
    let stop: StopRule = sim
        .stop
        .clone()
        .or(cfg.stop.clone())
        .unwrap_or_else(|| "tau".into())
        .parse()?;
    Ok((m, desc, n, gamma, seed, stop))
}

fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Psi {
            measure,
            q,
            variant,
            common,
        } => {
            let cfg = load_config(&common)?;
            let (m, desc) = resolve_measure(&measure, &cfg)?;
            let qs = if q.is_empty() { required(cfg.q.clone(), "q")? } else { q };
            let variant = match variant {
                Some(VariantArg::Standard) => PsiVariant::Standard,
                Some(VariantArg::Bar) => PsiVariant::Bar,
                None => cfg.variant.unwrap_or(PsiVariant::Standard),
            };
            let ev = PsiEvaluator::new(m);
            let values = qs
                .iter()
                .map(|&q| ev.psi(q, variant))
                .collect::<Result<Vec<_>>>()?;
            let format = common.format.or(cfg.format).unwrap_or(Format::Csv);
            let body = match format {
                Format::Csv => {
                    let mut s = String::from("q,psi\n");
                    for (q, v) in qs.iter().zip(&values) {
                        let _ = writeln!(s, "{},{}", num(*q), num(*v));
                    }
                    s
                }
                Format::Json => format!(
                    "{}\n",
                    json!({"q": qs, "psi": values})
                ),
            };
            emit(
                Output {
                    body,
                    config: json!({"command": "psi", "measure": desc, "q": qs, "variant": variant, "format": format}),
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
        Command::Speed {
            measure,
            n,
            t,
            common,
        } => {
            let cfg = load_config(&common)?;
            let (m, desc) = resolve_measure(&measure, &cfg)?;
            let ns = if n.is_empty() { required(cfg.n.as_ref(), "n")?.values() } else { n };
            let ts = if t.is_empty() { cfg.t.clone().unwrap_or_default() } else { t };
            let psi = Arc::new(PsiEvaluator::new(m));
            let mut rows_t = Vec::new();
            let mut rows_n = Vec::new();
            for &n in &ns {
                let solver = SpeedSolver::new(psi.clone(), n)?;
                rows_n.push((n, solver.ell(None)?, solver.horizon()?));
                for &t in &ts {
                    rows_t.push((n, t, solver.v_of_t(t)?, solver.ell(Some(t))?));
                }
            }
            let format = common.format.or(cfg.format).unwrap_or(Format::Csv);
            let body = match format {
                Format::Csv => {
                    let mut s = String::from("n,ell,horizon\n");
                    for (n, e, h) in &rows_n {
                        let _ = writeln!(s, "{n},{},{}", num(*e), num(*h));
                    }
                    if !rows_t.is_empty() {
                        s.push_str("\nn,t,v,ell_t\n");
                        for (n, t, v, e) in &rows_t {
                            let _ = writeln!(s, "{n},{},{},{}", num(*t), num(*v), num(*e));
                        }
                    }
                    s
                }
                Format::Json => format!(
                    "{}\n",
                    json!({
                        "ell": rows_n.iter().map(|(n, e, h)| json!({"n": n, "ell": e, "horizon": h})).collect::<Vec<_>>(),
                        "v": rows_t.iter().map(|(n, t, v, e)| json!({"n": n, "t": t, "v": v, "ell_t": e})).collect::<Vec<_>>(),
                    })
                ),
            };
            emit(
                Output {
                    body,
                    config: json!({"command": "speed", "measure": desc, "n": ns, "t": ts, "format": format}),
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
        Command::Simulate { sim, export, common } => {
            let cfg = load_config(&common)?;
            let (m, desc, n, gamma, seed, stop) = sim_settings(&sim, &cfg)?;
            let g = simulate(&m, n, gamma, seed, stop)?;
            let format = common.format.or(cfg.format).unwrap_or(Format::Json);
            let export = export.or(cfg.export);
            let config = json!({
                "command": "simulate", "measure": desc, "n": n, "gamma": gamma,
                "seed": seed, "stop": stop, "format": format, "export": export,
            });
            if let Some(p) = &export {
                fs::write(p, format!("{}{}\n", header(&config), g.to_json()))
                    .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            }
            let body = match format {
                Format::Json => format!("{}\n", g.to_json()),
                Format::Csv => trajectories_csv(&trajectories(&g)),
            };
            emit(
                Output {
                    body,
                    config,
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
        Command::Families { import, sim, common } => {
            let cfg = load_config(&common)?;
            let import = import.or(cfg.import.clone());
            let (g, config) = match &import {
                Some(p) => {
                    let g = MarkedGenealogy::from_json(&strip_comments(&read_text(p)?))?;
                    (g, json!({"command": "families", "import": p}))
                }
                None => {
                    let (m, desc, n, gamma, seed, stop) = sim_settings(&sim, &cfg)?;
                    let g = simulate(&m, n, gamma, seed, stop)?;
                    let config = json!({
                        "command": "families", "measure": desc, "n": n, "gamma": gamma,
                        "seed": seed, "stop": stop,
                    });
                    (g, config)
                }
            };
            let format = common.format.or(cfg.format).unwrap_or(Format::Csv);
            let mut config = config;
            config["format"] = json!(format);
            let fam = family_decomposition(&g);
            let body = match format {
                Format::Csv => format!(
                    "{}\n{}\n{}",
                    spectrum_csv(&fam.spectrum),
                    partition_csv(&fam.alleles_partition),
                    sites_csv(&fam.sites_families)
                ),
                Format::Json => format!(
                    "{}\n",
                    serde_json::to_string_pretty(&fam).expect("families serialize")
                ),
            };
            emit(
                Output {
                    body,
                    config,
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
        Command::Ewens { n, gamma, common } => {
            let cfg = load_config(&common)?;
            let n = match n {
                Some(n) => n as u64,
                None => required(cfg.n.as_ref(), "n")?.single()?,
            };
            let gamma = required(gamma.or(cfg.gamma), "gamma")?;
            let d = ewens_distribution(n as usize, gamma)?;
            let format = common.format.or(cfg.format).unwrap_or(Format::Csv);
            let body = match format {
                Format::Csv => distribution_csv(&d),
                Format::Json => format!("{}\n", serde_json::to_string_pretty(&d).expect("serializes")),
            };
            emit(
                Output {
                    body,
                    config: json!({"command": "ewens", "n": n, "gamma": gamma, "theta": 2.0 * gamma, "format": format}),
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
        Command::Experiment {
            check,
            replicates,
            seed,
            per_replicate,
            martingale,
            measure,
            n,
            common,
        } => {
            if let Some(t) = martingale {
                let cfg = load_config(&common)?;
                let (m, desc) = resolve_measure(&measure, &cfg)?;
                let n = match n {
                    Some(n) => n,
                    None => required(cfg.n.as_ref(), "n")?.single()? as u32,
                };
                let reps = required(replicates.or(cfg.replicates), "replicates")?;
                let seed = seed.or(cfg.seed).unwrap_or(0);
                let est = martingale_diagnostic(&m, n, t, reps, seed)?;
                let body = format!(
                    "n,t,mean,stderr,replicates\n{n},{},{},{},{reps}\n",
                    num(t),
                    num(est.mean),
                    num(est.stderr)
                );
                return emit(
                    Output {
                        body,
                        config: json!({"command": "experiment", "martingale": t, "measure": desc, "n": n, "replicates": reps, "seed": seed}),
                        out: common.out.or(cfg.out),
                    },
                    stdout,
                );
            }
            let path = required(common.config.as_ref(), "config")?;
            let mut spec = ExperimentSpec::parse(&read_text(path)?)?;
            if let Some(r) = replicates {
                spec.replicates = r;
            }
            if let Some(s) = seed {
                spec.master_seed = s;
            }
            spec.validate()?;
            let mut resolved = serde_json::to_value(&spec).expect("spec serializes");
            resolved["measure"] = json!(spec.measure.resolve()?.to_description());
            let mut config = json!({"command": "experiment", "spec": resolved});
            let (result, verdict) = match &check {
                Some(c) => {
                    let which: TheoremCheck = c.parse()?;
                    config["check"] = json!(which);
                    let v = theorem_check(&spec, which)?;
                    (v.result.clone(), Some(v))
                }
                None => (run_experiment(&spec)?, None),
            };
            if let Some(p) = &per_replicate {
                fs::write(p, format!("{}{}", header(&config), result.replicates_csv()))
                    .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            }
            let mut body = result.summary_csv();
            if let Some(v) = &verdict {
                body.push('\n');
                body.push_str(&v.report());
            }
            emit(
                Output {
                    body,
                    config,
                    out: common.out,
                },
                stdout,
            )
        }
        Command::Check { measure, n, common } => {
            let cfg = load_config(&common)?;
            let (m, desc) = resolve_measure(&measure, &cfg)?;
            let reg = m.regularity_integral();
            let cdi = comes_down_check(&m)?;
            let b = match n {
                Some(b) => Some(b),
                None => cfg.n.as_ref().map(|n| n.single()).transpose()?.map(|b| b as usize),
            };
            let rates = match b {
                Some(b) if m.is_lambda() => Some(merger_rates(&m, b)?),
                _ => None,
            };
            let format = common.format.or(cfg.format).unwrap_or(Format::Csv);
            let body = match format {
                Format::Csv => {
                    let mut s = String::from("key,value\n");
                    let _ = writeln!(s, "valid,true");
                    let _ = writeln!(s, "kingman_mass,{}", num(m.kingman_mass()));
                    let _ = writeln!(s, "lambda_type,{}", m.is_lambda());
                    let _ = writeln!(
                        s,
                        "regularity_integral,{}",
                        if reg.infinite { "inf".to_string() } else { num(reg.value) }
                    );
                    let _ = writeln!(s, "comes_down,{}", json!(cdi.cdi).as_str().unwrap_or(""));
                    let _ = writeln!(s, "comes_down_basis,{}", json!(cdi.basis).as_str().unwrap_or(""));
                    if let Some(r) = &rates {
                        let _ = writeln!(s, "\nb,k,lambda_bk");
                        for (i, l) in r.by_k.iter().enumerate() {
                            let _ = writeln!(s, "{},{},{}", r.b, i + 2, num(*l));
                        }
                        let _ = writeln!(s, "{},total,{}", r.b, num(r.total));
                    }
                    s
                }
                Format::Json => format!(
                    "{}\n",
                    json!({
                        "valid": true,
                        "measure": desc,
                        "regularity_integral": reg,
                        "comes_down": cdi,
                        "merger_rates": rates,
                    })
                ),
            };
            emit(
                Output {
                    body,
                    config: json!({"command": "check", "measure": desc, "n": b, "format": format}),
                    out: common.out.or(cfg.out),
                },
                stdout,
            )
        }
    }
}

/// One machine-parsable line describing `e`.
pub fn error_line(e: &Error) -> String {
    json!({"error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string()}).to_string()
}

/// Run with explicit streams; returns the process exit code.
pub fn run_cli_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let err = Error::Config(first);
            let _ = writeln!(stderr, "{}", error_line(&err));
            return err.exit_code();
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(&e));
            e.exit_code()
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
