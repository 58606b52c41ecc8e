use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use coalesce::census::{self, ExperimentSpec, RunOptions};
use coalesce::continuation::{trace_loop, write_trace_csv, ContinuationConfig, ContinuationError};
use coalesce::detect::{
    decode_signature, refine_box, sweep_grid, GridSpec, RefineOptions, RetryPolicy,
};
use coalesce::pencil::{sgplus_generate, LoopSpec, PencilError, PencilSpec, Rect};

/// Conical intersection detection for two-parameter symmetric definite pencils.
#[derive(Debug, Parser, Serialize)]
#[command(name = "coalesce", version)]
struct Cli {
    /// Master seed. Overrides seeds in pencil and census specs when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Write the descriptor of one random realization.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        b: usize,
        #[arg(long)]
        delta: f64,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "realization.json")]
        out: String,
    },
    /// Trace one closed loop and report its sign pattern.
    Trace {
        /// Pencil spec: inline JSON or a JSON/TOML file.
        #[arg(long)]
        pencil: String,
        /// Loop spec: inline JSON or a JSON/TOML file.
        #[arg(long = "loop")]
        loop_spec: String,
        #[command(flatten)]
        step: StepArgs,
    },
    /// Sweep a box grid and report flagged boxes.
    Sweep {
        #[arg(long)]
        pencil: String,
        /// x_lo,x_hi,y_lo,y_hi
        #[arg(long, allow_hyphen_values = true)]
        domain: String,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        /// Also localize every flagged box by recursive subdivision to this depth.
        #[arg(long)]
        refine: Option<u32>,
        #[command(flatten)]
        step: StepArgs,
    },
    /// Run or resume an ensemble experiment.
    Census {
        /// Experiment spec (JSON or TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Compute at most this many new realizations, then stop.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fit count = c * n^p per bandwidth to a CSV of counts.
    Fit {
        /// CSV with columns bandwidth, n, count (or mean_count), optional delta.
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
struct StepArgs {
    /// Initial stepsize in loop-parameter units.
    #[arg(long, default_value_t = 1.0 / 64.0)]
    h0: f64,
    /// Relative gap that switches a pair into subspace mode.
    #[arg(long)]
    toldist: Option<f64>,
}

impl StepArgs {
    fn config(&self) -> Result<ContinuationConfig, Failure> {
        if !(self.h0 > 0.0 && self.h0 <= 1.0) {
            return Err(Failure::usage(anyhow!("--h0 must lie in (0, 1]")));
        }
        let mut cfg = ContinuationConfig {
            h0: self.h0,
            ..Default::default()
        };
        if let Some(t) = self.toldist {
            cfg.toldist = t;
        }
        Ok(cfg)
    }
}

/// An error with its exit status: 1 for usage or validation, 2 for numerical failure.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 1,
            err: err.into(),
        }
    }

    fn numerical(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            err: err.into(),
        }
    }

    fn pencil(err: PencilError) -> Self {
        match err {
            PencilError::Linalg(_) => Failure::numerical(err),
            other => Failure::usage(other),
        }
    }

    fn io(err: impl Into<anyhow::Error>) -> Self {
        Failure::usage(err)
    }
}

fn read_spec<T: DeserializeOwned>(arg: &str, what: &str) -> Result<T, Failure> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed)
            .with_context(|| format!("parsing inline {what} spec"))
            .map_err(Failure::usage);
    }
    read_spec_file(Path::new(arg), what)
}

fn read_spec_file<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} spec {}", path.display()))
        .map_err(Failure::usage)?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(anyhow::Error::from)
    } else {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed
        .with_context(|| format!("parsing {what} spec {}", path.display()))
        .map_err(Failure::usage)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::io)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn with_seed(spec: PencilSpec, seed: Option<u64>) -> PencilSpec {
    match (spec, seed) {
        (PencilSpec::Sgplus { n, b, delta, .. }, Some(s)) => PencilSpec::Sgplus {
            n,
            b,
            delta,
            seed: s,
        },
        (other, _) => other,
    }
}

fn validate_loop(spec: &LoopSpec) -> Result<(), Failure> {
    let ok = match *spec {
        LoopSpec::Box { side_x, side_y, .. } => side_x > 0.0 && side_y > 0.0,
        LoopSpec::Circle { radius, .. } => radius > 0.0,
        LoopSpec::Ellipse { rx, ry, .. } => rx > 0.0 && ry > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(Failure::usage(anyhow!("loop extents must be positive")))
    }
}

fn parse_domain(text: &str) -> Result<Rect, Failure> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(anyhow!("--domain {text:?}: {e}")))?;
    match v[..] {
        [x_lo, x_hi, y_lo, y_hi] if x_lo < x_hi && y_lo < y_hi => {
            Ok(Rect::new(x_lo, x_hi, y_lo, y_hi))
        }
        _ => Err(Failure::usage(anyhow!(
            "--domain expects x_lo,x_hi,y_lo,y_hi with x_lo < x_hi and y_lo < y_hi"
        ))),
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Failure> {
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))
        .map_err(Failure::io)?;
    let out = cli.out_dir.as_path();

    match &cli.command {
        Command::Generate {
            n,
            b,
            delta,
            out: name,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let r = sgplus_generate(*n, *b, *delta, seed).map_err(Failure::pencil)?;
            let desc = r.descriptor();
            write_json(&out.join(name), &desc)?;
            log::info!("wrote {}", out.join(name).display());
            Ok(serde_json::to_value(desc).expect("descriptor serializes"))
        }

        Command::Trace {
            pencil,
            loop_spec,
            step,
        } => {
            let pspec = with_seed(read_spec::<PencilSpec>(pencil, "pencil")?, cli.seed);
            let lspec: LoopSpec = read_spec(loop_spec, "loop")?;
            validate_loop(&lspec)?;
            let cfg = step.config()?;
            let p = pspec.build().map_err(Failure::pencil)?;
            let path = lspec.build();
            let result = trace_loop(p.as_ref(), &path, &cfg);
            let res = match result {
                Ok(r) => r,
                Err(e @ ContinuationError::LoopUnresolvable(_))
                | Err(e @ ContinuationError::Linalg(_)) => {
                    write_json(
                        &out.join("signature.json"),
                        &json!({ "status": "unresolvable", "error": e.to_string() }),
                    )?;
                    return Err(Failure::numerical(e));
                }
                Err(e) => return Err(Failure::numerical(e)),
            };
            let csv = out.join("trace.csv");
            let mut buf = Vec::new();
            write_trace_csv(&res.trace.records, p.dim(), &mut buf).map_err(Failure::io)?;
            fs::write(&csv, buf).map_err(Failure::io)?;
            let flags = decode_signature(&res.d).map_err(Failure::numerical)?;
            let sig = json!({
                "status": "ok",
                "d": res.d,
                "d_raw": res.d_raw,
                "pair_flags": flags,
                "accepted_steps": res.trace.stats.accepted,
                "rejected_steps": res.trace.stats.rejected,
                "h_min": res.trace.stats.h_min,
                "h_max": res.trace.stats.h_max,
                "veering_events": res.trace.veering_events,
            });
            write_json(&out.join("signature.json"), &sig)?;
            log::info!("D = {:?}", res.d);
            Ok(json!({ "pencil": pspec, "loop": lspec, "continuation": cfg }))
        }

        Command::Sweep {
            pencil,
            domain,
            rows,
            cols,
            max_retries,
            refine,
            step,
        } => {
            let pspec = with_seed(read_spec::<PencilSpec>(pencil, "pencil")?, cli.seed);
            let cfg = step.config()?;
            let rect = parse_domain(domain)?;
            let grid = GridSpec::new(rect, *rows, *cols);
            grid.validate().map_err(Failure::usage)?;
            let retry = RetryPolicy {
                max_retries: *max_retries,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let p = pspec.build().map_err(Failure::pencil)?;
            let swept = sweep_grid(p.as_ref(), &grid, &cfg, &retry).map_err(Failure::usage)?;
            let mut buf = Vec::new();
            swept.write_csv(&mut buf).map_err(Failure::io)?;
            fs::write(out.join("sweep.csv"), buf).map_err(Failure::io)?;
            write_json(&out.join("sweep.json"), &swept.summary())?;
            log::info!(
                "{} flagged pair(s), {} failed box(es)",
                swept.total(),
                swept.failure_count()
            );
            if let Some(depth) = refine {
                let opts = RefineOptions {
                    depth_max: *depth,
                    retry,
                    ..Default::default()
                };
                let mut estimates = Vec::new();
                for b in swept
                    .boxes
                    .iter()
                    .filter(|b| b.signature().is_some_and(|s| !s.is_trivial()))
                {
                    match refine_box(p.as_ref(), &b.rect, &cfg, &opts) {
                        Ok(e) => estimates.extend(e),
                        Err(e) => {
                            log::warn!("refinement of box ({}, {}) failed: {e}", b.row, b.col)
                        }
                    }
                }
                write_json(&out.join("refine.json"), &estimates)?;
            }
            Ok(json!({ "pencil": pspec, "grid": grid, "retry": retry, "continuation": cfg }))
        }

        Command::Census { spec, stop_after } => {
            let mut spec: ExperimentSpec = read_spec_file(spec, "census")?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            spec.validate().map_err(Failure::usage)?;
            let report = census::run_census(
                &spec,
                out,
                &RunOptions {
                    stop_after: *stop_after,
                },
            )
            .map_err(Failure::numerical)?;
            if report.complete {
                for e in &report.exponents {
                    log::info!("bandwidth {}: mean p = {:.4}", e.bandwidth, e.mean_p);
                }
            } else {
                log::info!(
                    "stopped after {} of {} jobs",
                    report.jobs_done,
                    report.jobs_total
                );
            }
            Ok(serde_json::to_value(&spec).expect("spec serializes"))
        }

        Command::Fit { data } => {
            let file = fs::File::open(data)
                .with_context(|| format!("opening {}", data.display()))
                .map_err(Failure::usage)?;
            let rows =
                census::read_count_table(std::io::BufReader::new(file)).map_err(Failure::usage)?;
            let fits = census::fit_table(&rows);
            let mut csv = String::from("bandwidth,delta,p,c,rmsd\n");
            for (b, delta, fit) in &fits {
                let d = delta.map(|d| format!("{d:.16e}")).unwrap_or_default();
                match fit {
                    Ok(f) => {
                        csv += &format!("{b},{d},{:.16e},{:.16e},{:.16e}\n", f.p, f.c, f.rmsd);
                        println!(
                            "bandwidth {b:>4}: p = {:.4}, c = {:.4}, rmsd = {:.3e}",
                            f.p, f.c, f.rmsd
                        );
                    }
                    Err(e) => {
                        csv += &format!("{b},{d},,,\n");
                        log::warn!("bandwidth {b}: {e}");
                    }
                }
            }
            fs::write(out.join("fit.csv"), csv).map_err(Failure::io)?;
            Ok(json!({ "data": data }))
        }
    }
}

fn manifest(cli: &Cli, resolved: &serde_json::Value) -> serde_json::Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "cli": cli,
        "resolved": resolved,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = cli.log_level.parse().unwrap_or(log::LevelFilter::Info);
    env_logger::Builder::new().filter_level(level).init();

    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    match run(&cli) {
        Ok(resolved) => {
            if let Err(f) = write_json(
                &cli.out_dir.join("manifest.json"),
                &manifest(&cli, &resolved),
            ) {
                eprintln!("error: {:#}", f.err);
                return ExitCode::from(f.code);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            let _ = write_json(
                &cli.out_dir.join("manifest.json"),
                &manifest(
                    &cli,
                    &json!({ "error": format!("{:#}", f.err), "exit_code": f.code }),
                ),
            );
            ExitCode::from(f.code)
        }
    }
}
