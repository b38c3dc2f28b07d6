use clap::{Args, Parser, Subcommand};
use glut_core::Rgb;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "glut", version, about = "Fit, apply, edit and serve Gaussian color LUTs")]
pub struct Cli {
    /// Key-value file supplying defaults for any flag; flags given on the
    /// command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a single model to a grid LUT or to an image pair.
    Fit(FitArgs),
    /// Jointly fit a conditional model to several grid LUTs.
    FitCglut(FitCglutArgs),
    /// Apply a model to a PNG image.
    Apply(ApplyArgs),
    /// Sample a model onto a grid and write a .cube file.
    Bake(BakeArgs),
    /// Apply one local color edit to a model.
    Edit(EditArgs),
    /// Measure fidelity against a reference LUT or image pair.
    Eval(EvalArgs),
    /// Time image application at standard resolutions.
    Bench(BenchArgs),
    /// Run the interactive editing service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Number of passes over the training lattice.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: Option<u64>,
    /// Base learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_hc: Option<f64>,
    #[arg(long)]
    pub lambda_sparse: Option<f64>,
    /// Disable hard-sample mining.
    #[arg(long)]
    pub no_mining: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train lattice codes per axis; the remaining codes form the held-out set.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(2..=128))]
    pub lattice: u64,
    /// Cap on held-out samples used for per-epoch metrics.
    #[arg(long, default_value_t = 65536, value_parser = clap::value_parser!(u64).range(1..))]
    pub holdout_max: u64,
    /// Per-epoch metrics log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// Print only the final summary.
    #[arg(long)]
    pub quiet: bool,
    /// Print the final summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Grid LUT to fit.
    #[arg(long, value_name = "PATH", required_unless_present = "pairs", conflicts_with = "pairs")]
    pub cube: Option<PathBuf>,
    /// Input and graded PNG of identical size.
    #[arg(long, num_args = 2, value_names = ["IN", "OUT"])]
    pub pairs: Option<Vec<PathBuf>>,
    /// Every k-th pixel pair is held out when fitting image pairs.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub holdout_every: u64,
    /// Number of Gaussian primitives.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..=65536))]
    pub gaussians: u64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCglutArgs {
    /// Grid LUTs, one per style, in style-index order.
    #[arg(long = "cube", value_name = "PATH", required = true)]
    pub cubes: Vec<PathBuf>,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..=65536))]
    pub gaussians: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub embed_dim: u64,
    /// Generator hidden width (64 small, 128 large).
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub hidden: u64,
    /// Share means and covariances across styles.
    #[arg(long)]
    pub shared_geometry: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
}

/// Picks one model out of a conditional file.
#[derive(Debug, Args, Clone)]
pub struct StyleArgs {
    /// Style index of a conditional model.
    #[arg(long, conflicts_with = "blend")]
    pub style: Option<usize>,
    /// Blend two styles of a conditional model; requires `--alpha`.
    #[arg(long, num_args = 2, value_names = ["L1", "L2"], requires = "alpha")]
    pub blend: Option<Vec<usize>>,
    /// Blend weight toward the second style, in [0, 1].
    #[arg(long, requires = "blend")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    /// Evaluate only the nearest fraction of primitives per pixel.
    #[arg(long, value_parser = parse_fraction)]
    pub keep_fraction: Option<f64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    /// Grid points per axis.
    #[arg(long, default_value_t = 33, value_parser = clap::value_parser!(u64).range(2..=256))]
    pub size: u64,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    /// Source color, `#rrggbb` or `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_color)]
    pub cin: Rgb,
    /// Desired output color for the source color.
    #[arg(long, value_parser = parse_color)]
    pub cout: Rgb,
    /// Number of most influential primitives to adjust.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0, value_parser = parse_fraction_closed)]
    pub strength: f64,
    /// Append the edit record to this journal (JSON lines).
    #[arg(long, value_name = "PATH")]
    pub journal: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    /// Reference grid LUT.
    #[arg(long, value_name = "PATH", required_unless_present = "pairs", conflicts_with = "pairs")]
    pub cube: Option<PathBuf>,
    /// Reference input and graded PNG.
    #[arg(long, num_args = 2, value_names = ["IN", "OUT"])]
    pub pairs: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub holdout_every: u64,
    /// Train lattice whose held-out codes are evaluated.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(2..=128))]
    pub lattice: u64,
    #[arg(long, default_value_t = 65536, value_parser = clap::value_parser!(u64).range(1..))]
    pub holdout_max: u64,
    #[arg(long, value_parser = parse_fraction)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    /// Resolutions to time: 512x512, HD, 4K or WxH. Defaults to the first three.
    #[arg(long = "resolution", value_parser = parse_resolution)]
    pub resolutions: Vec<(String, usize, usize)>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Timed passes per resolution (at least 20).
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, value_parser = parse_fraction)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Upload size cap in MiB.
    #[arg(long, default_value_t = 64)]
    pub max_upload_mb: usize,
    /// Mirror each session's edit journal into this directory.
    #[arg(long, value_name = "DIR")]
    pub journal_dir: Option<PathBuf>,
    /// Restrict CORS to one origin.
    #[arg(long)]
    pub allow_origin: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// `#rrggbb` (hex divided by 255) or `r,g,b` floats in `[0,1]`.
pub fn parse_color(s: &str) -> Result<Rgb, String> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix('#') {
        if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(format!("invalid hex color {s:?}"));
        }
        let ch = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).unwrap() as f64 / 255.0;
        return Ok(Rgb::new(ch(0), ch(2), ch(4)));
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid color {s:?}; use #rrggbb or r,g,b"))?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|v| (0.0..=1.0).contains(v)) => Ok(Rgb::new(r, g, b)),
        [_, _, _] => Err(format!("color components must lie in [0, 1]: {s:?}")),
        _ => Err(format!("invalid color {s:?}; use #rrggbb or r,g,b")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} outside (0, 1]"))
    }
}

fn parse_fraction_closed(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

fn parse_resolution(s: &str) -> Result<(String, usize, usize), String> {
    if let Some(&(name, w, h)) = glut_core::eval::RESOLUTIONS.iter().find(|r| r.0.eq_ignore_ascii_case(s)) {
        return Ok((name.to_string(), w, h));
    }
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("invalid resolution {s:?}"))?;
    let (w, h): (usize, usize) = (
        w.parse().map_err(|_| format!("invalid width in {s:?}"))?,
        h.parse().map_err(|_| format!("invalid height in {s:?}"))?,
    );
    if w == 0 || h == 0 {
        return Err("resolution must be nonzero".into());
    }
    Ok((format!("{w}x{h}"), w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn colors() {
        assert_eq!(parse_color("#ff0080").unwrap(), Rgb::new(1.0, 0.0, 128.0 / 255.0));
        assert_eq!(parse_color("0.1, 0.2,0.3").unwrap(), Rgb::new(0.1, 0.2, 0.3));
        assert!(parse_color("#ff00").is_err());
        assert!(parse_color("#gg0000").is_err());
        assert!(parse_color("0.1,0.2").is_err());
        assert!(parse_color("0.1,0.2,1.5").is_err());
    }

    #[test]
    fn resolutions() {
        assert_eq!(parse_resolution("hd").unwrap(), ("HD".to_string(), 1280, 720));
        assert_eq!(parse_resolution("64x32").unwrap(), ("64x32".to_string(), 64, 32));
        assert!(parse_resolution("0x3").is_err());
    }

    #[test]
    fn command_is_well_formed() {
        Cli::command().debug_assert();
    }
}
