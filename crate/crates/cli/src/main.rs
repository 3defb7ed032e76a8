//! `fpp`: evaluate, check and simulate forward performance expansions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSub};
use fpp_core::cli_harness::{
    output_dir, render_plot, PlotSection, run_subcommand, write_report, Format, Overrides, Resolved, RunConfig, Subcommand,
};
use fpp_core::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fpp", version, about = "Forward performance processes under slow and fast factors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// built-in preset (cir-power, ou-linear); a --config file overlays it
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads; results do not depend on this
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// quadrature tolerance
    #[arg(long, global = true)]
    tol_quad: Option<f64>,
    #[arg(long, global = true, conflicts_with = "json")]
    csv: bool,
    #[arg(long, global = true)]
    json: bool,
    /// suppress the table summary on stdout
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(ClapSub, Debug)]
enum Cmd {
    /// Value surface and its terms on the grid
    Eval,
    /// Error decay against the closed form
    Converge,
    /// Approximate optimal exposures on the grid
    Portfolio,
    /// Drift of the forward process along the expansion
    Drift,
    /// Monte Carlo of wealth and factors under a policy
    Simulate,
    /// Corrector residuals for the fast factor
    Poisson,
    /// SVG chart of a CSV result file
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// CSV written by another subcommand
    input: Option<String>,
    #[arg(long)]
    x: Option<String>,
    /// repeatable; defaults to every other numeric column
    #[arg(long)]
    y: Vec<String>,
    #[arg(long)]
    group: Option<String>,
    /// output file name inside --out-dir
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    log_x: bool,
    #[arg(long)]
    log_y: bool,
    #[arg(long)]
    title: Option<String>,
}

impl Cmd {
    fn kind(&self) -> Subcommand {
        match self {
            Cmd::Eval => Subcommand::Eval,
            Cmd::Converge => Subcommand::Converge,
            Cmd::Portfolio => Subcommand::Portfolio,
            Cmd::Drift => Subcommand::Drift,
            Cmd::Simulate => Subcommand::Simulate,
            Cmd::Poisson => Subcommand::Poisson,
            Cmd::Plot(_) => Subcommand::Plot,
        }
    }
}

fn load(g: &Global) -> Result<Option<RunConfig>> {
    let cfg = match (&g.config, &g.preset) {
        (Some(path), None) => RunConfig::from_path(path)?,
        (Some(path), Some(name)) => {
            let mut c = RunConfig::from_path(path)?;
            if c.preset.as_deref().is_some_and(|p| p != name) {
                return Err(Error::Validation(format!(
                    "--preset {name} disagrees with preset = \"{}\" in {}",
                    c.preset.as_deref().unwrap_or(""),
                    path.display()
                )));
            }
            if c.preset.is_none() {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
                c = RunConfig::from_toml(&format!("preset = \"{name}\"\n{text}"))?;
            }
            c
        }
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Ok(None),
    };
    Ok(Some(cfg))
}

fn overrides(g: &Global) -> Overrides {
    Overrides {
        seed: g.seed,
        tol_quad: g.tol_quad,
        format: if g.json {
            Some(Format::Json)
        } else if g.csv {
            Some(Format::Csv)
        } else {
            None
        },
        out_dir: g.out_dir.clone(),
    }
}

fn apply_plot(pc: &mut PlotSection, p: &PlotArgs) {
    if let Some(i) = &p.input {
        pc.input = Some(i.clone());
    }
    if let Some(x) = &p.x {
        pc.x = x.clone();
    }
    if !p.y.is_empty() {
        pc.y = p.y.clone();
    }
    if let Some(g) = &p.group {
        pc.group = Some(g.clone());
    }
    if let Some(o) = &p.output {
        pc.output = o.clone();
    }
    if let Some(t) = &p.title {
        pc.title = Some(t.clone());
    }
    pc.log_x |= p.log_x;
    pc.log_y |= p.log_y;
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("cannot start thread pool: {e}")))?;
    }
    let cmd = cli.cmd.kind();
    let loaded = load(&cli.global)?;

    // plot reads a result file and needs no model
    if let Cmd::Plot(p) = &cli.cmd {
        let (mut pc, cfg_dir) = loaded.map(|c| (c.plot, c.output.dir)).unwrap_or_default();
        apply_plot(&mut pc, p);
        let dir = PathBuf::from(cli.global.out_dir.clone().or(cfg_dir).unwrap_or_else(|| "out".into()));
        let (name, svg) = render_plot(&pc)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        return Ok(());
    }

    let mut cfg = loaded.ok_or_else(|| Error::Validation("give --config or --preset".into()))?;
    cfg.apply(&overrides(&cli.global))?;
    let resolved = Resolved::new(cfg)?;
    let report = run_subcommand(&resolved, cmd)?;
    let dir = output_dir(&resolved);
    let files = write_report(&resolved, cmd, &report, &dir)?;
    if !cli.global.quiet {
        for t in &report.tables {
            if t.len() <= 40 {
                println!("{}", t.render_text());
            } else {
                println!("[{}] {} rows\n", t.name, t.len());
            }
        }
    }
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    println!("config_sha256 {}", resolved.hash());
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let c = Cli::try_parse_from(["fpp", "drift", "--preset", "cir-power", "--seed", "9", "--json"]).unwrap();
        assert_eq!(c.cmd.kind(), Subcommand::Drift);
        let o = overrides(&c.global);
        assert_eq!((o.seed, o.format), (Some(9), Some(Format::Json)));
        assert!(Cli::try_parse_from(["fpp", "eval", "--csv", "--json"]).is_err());
    }
}
