//! `zmred`: Zwanzig-Mori reductions of gene-regulatory and chemical networks from the
//! command line. Every subcommand writes CSV (to `--out`, or standard output) and a
//! `<out>.manifest` sidecar listing the resolved inputs.

mod output;
mod parse;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zmred::analysis::{
    basin_map, hopf_scan, integrate_method, linspace, memory_amplitude_map, BasinOptions,
    CompareOptions, GridAxes, SystemKind,
};
use zmred::channels::{decompose_zms, rank_channels, ranked_csv, ChannelKey};
use zmred::dsl::ModelSource;
use zmred::memory::{fmt_f64, memory_zmn_series, Method, ZmnOptions};
use zmred::qss::{solve_qss, QssOptions};
use zmred::variants::{
    amplitude_csv, linear_amplitude_sweep, linearize_memory, memory_gouasmi, memory_gqss,
};
use zmred::{Error, SystemSpec};

use output::{fingerprint, Manifest, Outputs};
use parse::Usage;

#[derive(Parser, Debug)]
#[command(
    name = "zmred",
    version,
    about = "Zwanzig-Mori model reduction for reaction networks"
)]
struct Cli {
    /// Worker threads for grid sweeps (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Zoo id (see `list-models`) or path to a model file.
    #[arg(long)]
    model: String,
    /// Neural tube position; shorthand for `--param p=<value>`.
    #[arg(long)]
    position: Option<f64>,
    /// Parameter overrides, `name=value,...`.
    #[arg(long, default_value = "")]
    param: String,
    /// Subnetwork species, `name,...`; the rest form the bulk.
    #[arg(long)]
    subnetwork: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one method from an initial condition.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "full")]
        method: String,
        /// Initial subnetwork values, `name=value,...`; others start at the model default.
        #[arg(long, default_value = "")]
        ic: String,
        #[arg(long)]
        t_end: f64,
        /// Channels kept by zms-star, `receiver:incoming:outgoing:sender,...`.
        #[arg(long)]
        keep_channels: Option<String>,
        /// Fixed ZMn step (defaults to t_end/2000).
        #[arg(long)]
        zmn_step: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attractor labels on a grid of initial conditions.
    Basins {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "full")]
        method: String,
        /// The two subnetwork species spanning the grid.
        #[arg(long)]
        axes: Option<String>,
        /// `name=lo:hi,...`; defaults to the model box.
        #[arg(long)]
        range: Option<String>,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 200.0)]
        t_max: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hopf curve over the `(a, n)` plane.
    Hopf {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "full")]
        method: String,
        #[arg(long, default_value = "1:20")]
        a_range: String,
        #[arg(long, default_value = "1:4")]
        n_range: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-lag memory amplitude on a grid.
    MemoryMap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        axes: Option<String>,
        #[arg(long)]
        range: Option<String>,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        /// Single receiver; the sum over receivers otherwise.
        #[arg(long)]
        receiver: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel memory contributions along a ZMs trajectory.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "")]
        ic: String,
        #[arg(long)]
        t_end: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Channels ranked by integrated magnitude.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Memory kernel against the lag.
    Kernel {
        #[command(flatten)]
        model: ModelArgs,
        /// Subnetwork state (a fixed point for `linear`).
        #[arg(long)]
        state: Option<String>,
        #[arg(long, default_value_t = 5.0)]
        tau_max: f64,
        #[arg(long, default_value_t = 100)]
        tau_steps: usize,
        #[arg(long, default_value = "zmn")]
        variant: String,
        /// Neural tube positions for the linearized amplitude sweep (with `linear`).
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in models.
    ListModels,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownModel(_)
            | Error::UnknownParameter { .. }
            | Error::UnknownSpecies(_)
            | Error::InvalidPartition(_)
            | Error::EmptyBulk
            | Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(1)
        }
    }
}

struct Loaded {
    source: ModelSource,
    sub: Option<Vec<String>>,
    overrides: Vec<(String, f64)>,
    spec: SystemSpec,
    hash: String,
}

impl Loaded {
    fn build(&self, extra: &[(&str, f64)]) -> zmred::Result<SystemSpec> {
        build_spec(&self.source, self.sub.as_deref(), &self.overrides, extra)
    }
}

fn build_spec(
    source: &ModelSource,
    sub: Option<&[String]>,
    overrides: &[(String, f64)],
    extra: &[(&str, f64)],
) -> zmred::Result<SystemSpec> {
    let mut ov: Vec<(&str, f64)> = overrides.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    for (k, v) in extra {
        match ov.iter_mut().find(|(n, _)| n == k) {
            Some(slot) => slot.1 = *v,
            None => ov.push((k, *v)),
        }
    }
    let sub: Option<Vec<&str>> = sub.map(|s| s.iter().map(String::as_str).collect());
    source.build(sub.as_deref(), &ov)
}

fn load(args: &ModelArgs) -> Run<Loaded> {
    let source = ModelSource::resolve(&args.model)?;
    let hash = match &source {
        ModelSource::Zoo(id) => fingerprint(id.as_bytes()),
        ModelSource::Dsl { .. } => {
            fingerprint(&std::fs::read(&args.model).map_err(|e| Failure::Usage(e.to_string()))?)
        }
    };
    let mut overrides = parse::assignments(&args.param, "--param")?;
    if let Some(p) = args.position {
        if overrides.iter().any(|(k, _)| k == "p") {
            return Err(Failure::Usage(
                "--position and --param p=... both given".into(),
            ));
        }
        overrides.push(("p".into(), p));
    }
    let sub = args.subnetwork.as_deref().map(parse::names);
    let spec = build_spec(&source, sub.as_deref(), &overrides, &[])?;
    Ok(Loaded {
        source,
        sub,
        overrides,
        spec,
        hash,
    })
}

fn manifest(subcommand: &str, m: &Loaded) -> Manifest {
    let mut man = Manifest::default();
    man.set("subcommand", subcommand);
    man.set("tool_version", env!("CARGO_PKG_VERSION"));
    man.set("model", m.source.id());
    man.set(
        "model_source",
        match m.source {
            ModelSource::Zoo(_) => "zoo",
            ModelSource::Dsl { .. } => "file",
        },
    );
    man.set("model_hash", &m.hash);
    let params: Vec<String> = m
        .spec
        .params()
        .iter()
        .map(|(k, v)| format!("{k}={v:?}"))
        .collect();
    man.set("params", params.join(","));
    man.set("subnetwork", m.spec.sub_names().join(","));
    man.set("bulk", m.spec.bulk_names().join(","));
    man.set("seed", format!("{:#x}", QssOptions::default().seed));
    man
}

fn fmt_state(x: &[f64]) -> String {
    x.iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn positive(v: f64, what: &str) -> Run<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Failure::Usage(format!(
            "{what} must be a positive number, got {v}"
        )))
    }
}

fn run(command: Command) -> Run<()> {
    let mut outputs = Outputs::default();
    let man = match command {
        Command::ListModels => {
            let mut text = String::new();
            for e in zmred::zoo::entries() {
                text.push_str(&format!(
                    "{}\t{}\tsub={}\tbulk={}\n",
                    e.id,
                    e.description,
                    e.default_sub.join(","),
                    e.default_bulk.join(",")
                ));
            }
            print!("{text}");
            return Ok(());
        }
        Command::Simulate {
            model,
            method,
            ic,
            t_end,
            keep_channels,
            zmn_step,
            out,
        } => {
            let m = load(&model)?;
            let method: Method = method.parse()?;
            let t_end = positive(t_end, "--t-end")?;
            let x0 = parse::initial_state(&m.spec, &ic)?;
            let keep = match (&keep_channels, method) {
                (Some(list), Method::ZmsStar) => Some(
                    parse::names(list)
                        .iter()
                        .map(|l| ChannelKey::parse(&m.spec, l))
                        .collect::<zmred::Result<BTreeSet<_>>>()?,
                ),
                (None, Method::ZmsStar) => {
                    return Err(Failure::Usage("zms-star needs --keep-channels".into()))
                }
                (Some(_), _) => {
                    return Err(Failure::Usage(
                        "--keep-channels only applies to zms-star".into(),
                    ))
                }
                (None, _) => None,
            };
            if let Some(h) = zmn_step {
                positive(h, "--zmn-step")?;
            }
            let opts = CompareOptions {
                keep: keep.clone(),
                zmn: ZmnOptions {
                    step: zmn_step,
                    richardson_tol: None,
                },
                ..Default::default()
            };
            let tr = integrate_method(&m.spec, method, &x0, t_end, &opts)?;
            outputs.primary(out.as_deref(), tr.to_csv(&m.spec));
            let mut man = manifest("simulate", &m);
            man.set("method", method);
            man.set("ic", fmt_state(&x0));
            man.set("t_end", format!("{t_end:?}"));
            if let Some(keep) = keep {
                let labels: Vec<String> = keep.iter().map(|k| k.label(&m.spec)).collect();
                man.set("keep_channels", labels.join(","));
            }
            if method == Method::Zmn {
                man.set(
                    "zmn_step",
                    format!("{:?}", zmn_step.unwrap_or(t_end / 2000.0)),
                );
            }
            man
        }
        Command::Basins {
            model,
            method,
            axes,
            range,
            grid,
            t_max,
            out,
        } => {
            let m = load(&model)?;
            let kind: SystemKind = method.parse()?;
            let grid_axes = grid_axes(&m.spec, axes.as_deref(), range.as_deref(), grid)?;
            let opts = BasinOptions {
                t_max: positive(t_max, "--t-max")?,
                ..Default::default()
            };
            let map = basin_map(&m.spec, kind, &grid_axes, &opts)?;
            outputs.primary(out.as_deref(), map.to_csv());
            let mut man = manifest("basins", &m);
            man.set("method", kind.as_str());
            describe_axes(&mut man, &m.spec, &grid_axes);
            man.set("t_max", format!("{t_max:?}"));
            man.set("attractors", map.attractors.len());
            man.set("timeouts", map.timeouts());
            man
        }
        Command::Hopf {
            model,
            method,
            a_range,
            n_range,
            steps,
            out,
        } => {
            let m = load(&model)?;
            let kind: SystemKind = method.parse()?;
            let a_range = parse::range(&a_range, "--a-range")?;
            let n_range = parse::range(&n_range, "--n-range")?;
            for p in ["a", "n"] {
                if m.spec.param(p).is_none() {
                    return Err(Failure::Usage(format!(
                        "model `{}` has no parameter `{p}`",
                        m.spec.id()
                    )));
                }
            }
            let build = |a: f64, n: f64| m.build(&[("a", a), ("n", n)]);
            let curve = hopf_scan(&build, kind, a_range, n_range, steps)?;
            outputs.primary(out.as_deref(), curve.to_csv());
            let mut man = manifest("hopf", &m);
            man.set("method", kind.as_str());
            man.set("a_range", format!("{:?}:{:?}", a_range.0, a_range.1));
            man.set("n_range", format!("{:?}:{:?}", n_range.0, n_range.1));
            man.set("steps", steps);
            man
        }
        Command::MemoryMap {
            model,
            axes,
            range,
            grid,
            receiver,
            out,
        } => {
            let m = load(&model)?;
            let grid_axes = grid_axes(&m.spec, axes.as_deref(), range.as_deref(), grid)?;
            let receiver = match &receiver {
                Some(name) => Some(
                    m.spec
                        .sub_names()
                        .iter()
                        .position(|s| s == name)
                        .ok_or_else(|| {
                            Failure::Usage(format!(
                                "--receiver: `{name}` is not a subnetwork species"
                            ))
                        })?,
                ),
                None => None,
            };
            let map = memory_amplitude_map(&m.spec, &grid_axes, receiver)?;
            outputs.primary(out.as_deref(), map.to_csv());
            let mut man = manifest("memory-map", &m);
            describe_axes(&mut man, &m.spec, &grid_axes);
            man.set(
                "receiver",
                receiver.map_or("sum".to_string(), |r| m.spec.sub_names()[r].to_string()),
            );
            man.set("holes", map.holes());
            man
        }
        Command::Decompose {
            model,
            ic,
            t_end,
            out,
            summary,
        } => {
            let m = load(&model)?;
            let t_end = positive(t_end, "--t-end")?;
            let x0 = parse::initial_state(&m.spec, &ic)?;
            let d = decompose_zms(&m.spec, &x0, t_end)?;
            outputs.primary(out.as_deref(), d.to_csv(&m.spec));
            if let Some(path) = &summary {
                outputs.extra(
                    path,
                    ranked_csv(&m.spec, &rank_channels(d.channels.clone())),
                );
            }
            let mut man = manifest("decompose", &m);
            man.set("ic", fmt_state(&x0));
            man.set("t_end", format!("{t_end:?}"));
            man.set("channels", d.channels.len());
            man.set("max_relative_gap", fmt_f64(d.max_relative_gap()));
            man
        }
        Command::Kernel {
            model,
            state,
            tau_max,
            tau_steps,
            variant,
            sweep,
            out,
        } => {
            let m = load(&model)?;
            let mut man = manifest("kernel", &m);
            man.set("variant", &variant);
            let text = match (variant.as_str(), sweep) {
                ("linear", Some(list)) => {
                    if m.spec.id() != "neuraltube" {
                        return Err(Failure::Usage(
                            "--sweep is only defined for the neuraltube model".into(),
                        ));
                    }
                    let positions = parse::numbers(&list, "--sweep")?;
                    let ov: Vec<(&str, f64)> = m
                        .overrides
                        .iter()
                        .filter(|(k, _)| k != "p")
                        .map(|(k, v)| (k.as_str(), *v))
                        .collect();
                    man.set("sweep", fmt_state(&positions));
                    amplitude_csv(&linear_amplitude_sweep(&positions, &ov)?)
                }
                (_, Some(_)) => {
                    return Err(Failure::Usage("--sweep needs --variant linear".into()))
                }
                (v, None) => {
                    let state =
                        state.ok_or_else(|| Failure::Usage("--state is required".into()))?;
                    let x = parse::numbers(&state, "--state")?;
                    if x.len() != m.spec.n_sub() {
                        return Err(Failure::Usage(format!(
                            "--state: expected {} subnetwork values, got {}",
                            m.spec.n_sub(),
                            x.len()
                        )));
                    }
                    let tau_max = positive(tau_max, "--tau-max")?;
                    if tau_steps == 0 {
                        return Err(Failure::Usage("--tau-steps must be at least 1".into()));
                    }
                    let taus = linspace((0.0, tau_max), tau_steps + 1);
                    man.set("state", fmt_state(&x));
                    man.set("tau_max", format!("{tau_max:?}"));
                    man.set("tau_steps", tau_steps);
                    kernel_csv(&m.spec, v, &x, &taus)?
                }
            };
            outputs.primary(out.as_deref(), text);
            man
        }
    };
    outputs
        .commit(man)
        .map_err(|e| Failure::Numerical(format!("writing outputs: {e}")))
}

fn grid_axes(
    spec: &SystemSpec,
    axes: Option<&str>,
    range: Option<&str>,
    grid: usize,
) -> Run<GridAxes> {
    let (x, y) = parse::axes(spec, axes)?;
    let (xr, yr) = parse::axis_ranges(spec, (x, y), range)?;
    if grid < 2 {
        return Err(Failure::Usage("--grid must be at least 2".into()));
    }
    Ok(GridAxes {
        x_species: x,
        y_species: y,
        x_range: xr,
        y_range: yr,
        resolution: grid,
    })
}

fn describe_axes(man: &mut Manifest, spec: &SystemSpec, g: &GridAxes) {
    let names = spec.sub_names();
    man.set(
        "axes",
        format!("{},{}", names[g.x_species], names[g.y_species]),
    );
    man.set(
        "range",
        format!(
            "{}={:?}:{:?},{}={:?}:{:?}",
            names[g.x_species],
            g.x_range.0,
            g.x_range.1,
            names[g.y_species],
            g.y_range.0,
            g.y_range.1
        ),
    );
    man.set("grid", g.resolution);
}

fn kernel_csv(spec: &SystemSpec, variant: &str, x: &[f64], taus: &[f64]) -> Run<String> {
    let sub = spec.sub_names();
    let mut out = String::from("tau");
    let rows: Vec<Vec<f64>> = match variant {
        "zmn" => memory_zmn_series(spec, x, taus)?,
        "gqss" => taus
            .iter()
            .map(|&t| memory_gqss(spec, x, t))
            .collect::<zmred::Result<_>>()?,
        "gouasmi" => taus
            .iter()
            .map(|&t| memory_gouasmi(spec, x, t))
            .collect::<zmred::Result<_>>()?,
        "linear" => {
            let q = solve_qss(spec, x, None)?;
            let kernel = linearize_memory(spec, &q.full_state)?;
            for r in &sub {
                for s in &sub {
                    out.push_str(&format!(",K_{r}_{s}"));
                }
            }
            out.push('\n');
            for &t in taus {
                out.push_str(&fmt_f64(t));
                let k = kernel.kernel(t);
                for r in 0..sub.len() {
                    for s in 0..sub.len() {
                        out.push(',');
                        out.push_str(&fmt_f64(k[(r, s)]));
                    }
                }
                out.push('\n');
            }
            return Ok(out);
        }
        other => {
            return Err(Failure::Usage(format!(
                "unknown variant `{other}` (expected zmn, gqss, gouasmi or linear)"
            )))
        }
    };
    for s in &sub {
        out.push_str(&format!(",M_{s}"));
    }
    out.push('\n');
    for (t, row) in taus.iter().zip(rows) {
        out.push_str(&fmt_f64(*t));
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    Ok(out)
}
