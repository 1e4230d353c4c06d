use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use turbmoment::channel::{self, DerivedScales};
use turbmoment::moments::{self, EngineConfig, Mode, MomentEngine};
use turbmoment::output::{self, PlotOptions};
use turbmoment::run;
use turbmoment::scenario::{PlotAxes, Scenario, PRESETS};
use turbmoment::Error;

#[derive(Parser)]
#[command(name = "turbmoment", version, about = "Aperture-averaged scintillation of laser beams in turbulence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file, or the name of a preset.
    config: String,
    /// Comma-separated modes: full, frozen, asymptotic.
    #[arg(long)]
    mode: Option<String>,
    /// Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write an SVG plot with the given axes (linear or log-log).
    #[arg(long, num_args = 0..=1, default_missing_value = "log-log")]
    svg: Option<String>,
    /// Use the literal, dimensionally inconsistent R_b^2 expression instead of the closed form.
    #[arg(long)]
    strict_verbatim: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Derived scales and the regime report.
    Scales(Common),
    /// Fourth moment at one pair of points.
    Gamma4 {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "X,Y", allow_hyphen_values = true)]
        r: String,
        #[arg(long, value_name = "X,Y", allow_hyphen_values = true)]
        rp: String,
    },
    /// sigma_eta^2 against aperture radius.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Cross-check every point against Monte Carlo.
        #[arg(long)]
        validate: bool,
    },
    /// sigma_eta^2 against the Rytov label at fixed radii.
    RytovSweep(Common),
    /// Kernel-table cache management.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Build(Common),
    Clear(Common),
}

enum Failure {
    Config(String),
    Numerical(String),
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidParameter(_) | Error::Io { .. } => Failure::Config(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let path = Path::new(&common.config);
    let mut s = if !path.exists() && PRESETS.contains(&common.config.as_str()) {
        Scenario::preset(&common.config).expect("listed preset")
    } else {
        Scenario::load(path)?
    };
    if let Some(m) = &common.mode {
        s.modes = m
            .split(',')
            .map(str::trim)
            .map(|t| Mode::parse(t).ok_or_else(|| Failure::Config(format!("--mode: unknown mode `{t}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(seed) = common.seed {
        s.mc.seed = seed;
    }
    if let Some(d) = &common.out_dir {
        s.out_dir = d.clone();
    }
    if let Some(a) = &common.svg {
        s.svg = Some(PlotAxes::parse(a).ok_or_else(|| Failure::Config(format!("--svg: unknown axes `{a}`")))?);
    }
    if common.strict_verbatim {
        s.scale_options.strict_verbatim = true;
    }
    if s.engine.cache_dir.is_none() {
        s.engine.cache_dir = Some(s.out_dir.join("kernel-cache"));
    }
    s.validate()?;
    Ok(s)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))
}

fn scales_report(s: &Scenario, scales: &DerivedScales) -> String {
    let reg = channel::regime_report(&s.beam, &s.channel);
    let mut out = String::new();
    writeln!(out, "scenario            {}", s.name).unwrap();
    writeln!(out, "alpha_turb          {:.6e}", scales.alpha_turb).unwrap();
    writeln!(out, "rb2                 {:.6e} m^2", scales.rb2).unwrap();
    writeln!(out, "q2t                 {:.6e} m^-2 (rms {:.4} m^-1)", scales.q2t, scales.q2t.sqrt()).unwrap();
    writeln!(out, "free_space2         {:.6e} m^2", scales.free_space2).unwrap();
    writeln!(out, "waist               {:.6e} m ({})", scales.waist(), s.scale_options.waist.name()).unwrap();
    writeln!(out, "rytov2              {:.6e} (plane-wave label)", scales.rytov2).unwrap();
    for c in reg.criteria() {
        writeln!(out, "{:<19} {:.4e} {}", c.name, c.value, c.flag).unwrap();
    }
    writeln!(out, "q2t*rb2 estimate    {:.4e} (ratio {:.3})", reg.uncertainty_estimate, reg.estimate_ratio()).unwrap();
    writeln!(
        out,
        "paraxial q0*r0      {:.4e}{}",
        reg.paraxial_product,
        if reg.paraxial_ok { "" } else { " (warn)" }
    )
    .unwrap();
    writeln!(out, "regime              {}", reg.worst()).unwrap();
    out
}

fn point(arg: &str, name: &str) -> Result<[f64; 2], Failure> {
    let v: Vec<f64> = arg
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Config(format!("--{name}: expected `x,y`, got `{arg}`")))?;
    match v[..] {
        [x, y] if x.is_finite() && y.is_finite() => Ok([x, y]),
        _ => Err(Failure::Config(format!("--{name}: expected two finite numbers, got `{arg}`"))),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Scales(c) => {
            let s = load(&c)?;
            let scales = channel::derive_scales_with(&s.beam, &s.channel, &s.scale_options);
            print!("{}", scales_report(&s, &scales));
        }
        Command::Gamma4 { common, r, rp } => {
            let s = load(&common)?;
            let (r, rp) = (point(&r, "r")?, point(&rp, "rp")?);
            let scales = channel::derive_scales_with(&s.beam, &s.channel, &s.scale_options);
            let sep = (r[0] - rp[0]).hypot(r[1] - rp[1]);
            let engine = if s.modes.contains(&Mode::Full) {
                MomentEngine::build(&s.beam, &s.channel, &scales, sep, &s.engine)?
            } else {
                MomentEngine::frozen(&s.beam, &s.channel, &scales, &EngineConfig::default())?
            };
            println!("mode,region_i,region_ii,total");
            for &m in &s.modes {
                let g = moments::gamma4_total(&engine, r, rp, m)?;
                println!("{},{:.16e},{:.16e},{:.16e}", m.name(), g.region_i, g.region_ii, g.total());
            }
        }
        Command::Sweep { common, validate } => {
            let mut s = load(&common)?;
            s.validate_mc |= validate;
            let rep = run::run_sweep(&s)?;
            let csv = output::render_csv(&rep.results, &rep.metadata)?;
            let csv_path = s.out_dir.join(format!("{}-sweep.csv", s.name));
            write_file(&csv_path, &csv)?;
            eprintln!("wrote {}", csv_path.display());
            if let Some(axes) = s.svg {
                let svg = output::render_svg(&rep.results, &PlotOptions { axes, ..Default::default() })?;
                let p = s.out_dir.join(format!("{}-sweep.svg", s.name));
                write_file(&p, &svg)?;
                eprintln!("wrote {}", p.display());
            }
            if rep.partial() {
                let n: usize = rep.results.iter().map(|r| r.failures.len()).sum();
                return Err(Failure::Partial(format!("{n} sweep point(s) failed; see the CSV metadata")));
            }
        }
        Command::RytovSweep(c) => {
            let s = load(&c)?;
            let (res, meta) = run::run_rytov_sweep(&s)?;
            let csv = output::render_rytov_csv(&res, &meta)?;
            let p = s.out_dir.join(format!("{}-rytov.csv", s.name));
            write_file(&p, &csv)?;
            eprintln!("wrote {}", p.display());
            if let Some(axes) = s.svg {
                let svg = output::render_rytov_svg(&res, &PlotOptions { axes, ..Default::default() })?;
                let p = s.out_dir.join(format!("{}-rytov.svg", s.name));
                write_file(&p, &svg)?;
                eprintln!("wrote {}", p.display());
            }
            let n: usize = res.iter().map(|r| r.failures.len()).sum();
            if n > 0 {
                return Err(Failure::Partial(format!("{n} Rytov point(s) failed; see the CSV metadata")));
            }
        }
        Command::Cache { action } => match action {
            CacheAction::Build(c) => {
                let s = load(&c)?;
                let e = run::build_engine(&s)?;
                let t = e.table().expect("full-mode engine has a table");
                let dir = s.engine.cache_dir.as_deref().unwrap_or(Path::new("."));
                println!(
                    "{} table {}x{} fingerprint {} in {}",
                    if e.cache_hit { "cached" } else { "built" },
                    t.dims().0,
                    t.dims().1,
                    &t.fingerprint()[..16],
                    dir.display()
                );
            }
            CacheAction::Clear(c) => {
                let s = load(&c)?;
                let dir = s.engine.cache_dir.clone().expect("set by load");
                let mut removed = 0;
                if let Ok(entries) = std::fs::read_dir(&dir) {
                    for e in entries.flatten() {
                        let name = e.file_name();
                        let name = name.to_string_lossy();
                        if name.starts_with("kernels-") && name.ends_with(".txt") {
                            std::fs::remove_file(e.path()).map_err(|err| Failure::Numerical(format!("{}: {err}", e.path().display())))?;
                            removed += 1;
                        }
                    }
                }
                println!("removed {removed} table(s) from {}", dir.display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Partial(m)) => {
            eprintln!("warning: {m}");
            ExitCode::from(4)
        }
    }
}
