use crate::cli::*;
use glut_core::cglut::{fit_cglut, CglutError};
use glut_core::editing::{apply_edit, residual};
use glut_core::eval::{bench_table, eval_on_split, eval_table, evaluate_pairs, throughput_bench, RESOLUTIONS};
use glut_core::glut::{apply_prepared, bake_to_cube};
use glut_core::lut_io::{parse_cube, read_image, write_cube, write_image, ImageError};
use glut_core::train::{fit_glut, MiningSchedule};
use glut_core::{
    CglutConfig, ColorPairSet, CubeLut, EditConstraint, EditError, EditJournal, FitData, FormatError, GenerationMode,
    GlutModel, ModelFile, TrainConfig, TrainError,
};
use serde_json::json;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Parse(String),
    Io(String),
    Divergence(String),
    Model(String),
    Degenerate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Io(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Model(_) => 6,
            CliError::Degenerate(_) => 7,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Parse(m)
            | CliError::Io(m)
            | CliError::Divergence(m)
            | CliError::Model(m)
            | CliError::Degenerate(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn format_err(path: &Path, e: FormatError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        FormatError::Io(_) => CliError::Io(msg),
        FormatError::WrongKind { .. } => CliError::Model(msg),
        _ => CliError::Parse(msg),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Divergence { .. } | TrainError::NonFiniteGradient { .. } => CliError::Divergence(e.to_string()),
        TrainError::EmptyData | TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
    }
}

fn cglut_err(e: CglutError) -> CliError {
    match e {
        CglutError::Train(t) => train_err(t),
        CglutError::BlendWeight(_) | CglutError::TooFewStyles(_) => CliError::Usage(e.to_string()),
        other => CliError::Model(other.to_string()),
    }
}

fn read_cube(path: &Path) -> Result<CubeLut> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_cube(&bytes).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(glut_core::Image, glut_core::lut_io::BitDepth)> {
    read_image(path).map_err(|e| match e {
        ImageError::Io(io) => io_err(path, io),
        ImageError::Unsupported(m) => CliError::Parse(format!("{}: {m}", path.display())),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn load_file(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).map_err(|e| format_err(path, e))
}

/// Loads a single model, materializing a conditional one per `--style`
/// or `--blend`.
pub fn load_model(path: &Path, sel: &StyleArgs) -> Result<GlutModel> {
    let wants_style = sel.style.is_some() || sel.blend.is_some();
    match load_file(path)? {
        ModelFile::Glut(m) if !wants_style => Ok(m),
        ModelFile::Glut(_) => Err(CliError::Model(format!(
            "{}: --style and --blend need a conditional model",
            path.display()
        ))),
        ModelFile::Cglut(c) => match (sel.style, &sel.blend, sel.alpha) {
            (Some(l), _, _) => c.materialize(l).map_err(cglut_err),
            (None, Some(b), Some(a)) => c.blend(b[0], b[1], a).map_err(cglut_err),
            _ => Err(CliError::Model(format!(
                "{}: conditional model with {} styles; pick one with --style or --blend",
                path.display(),
                c.styles()
            ))),
        },
    }
}

fn threads(t: Option<usize>) -> usize {
    t.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn train_config(t: &TrainArgs, epochs: usize, batch: usize) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: t.epochs.map_or(epochs, |v| v as usize),
        batch_size: t.batch.map_or(batch, |v| v as usize),
        base_lr: t.lr.unwrap_or(d.base_lr),
        lambda_hc: t.lambda_hc.unwrap_or(d.lambda_hc),
        lambda_sparse: t.lambda_sparse.unwrap_or(d.lambda_sparse),
        mining: if t.no_mining { MiningSchedule::DISABLED } else { d.mining },
        seed: t.seed,
    }
}

struct LogWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl LogWriter {
    fn create(out: &Path, explicit: Option<&PathBuf>) -> Result<Self> {
        let path = explicit.cloned().unwrap_or_else(|| {
            let mut p = out.as_os_str().to_owned();
            p.push(".log.jsonl");
            PathBuf::from(p)
        });
        let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(LogWriter { path, file })
    }

    fn line(&mut self, v: &impl serde::Serialize) -> Result<()> {
        let s = serde_json::to_string(v).expect("log entries serialize");
        writeln!(self.file, "{s}").map_err(|e| io_err(&self.path, e))
    }
}

fn pair_set(paths: &[PathBuf]) -> Result<ColorPairSet> {
    let (a, _) = read_png(&paths[0])?;
    let (b, _) = read_png(&paths[1])?;
    if (a.width, a.height) != (b.width, b.height) {
        return Err(CliError::Usage(format!(
            "image pair sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(ColorPairSet::new(a.pixels, b.pixels))
}

pub fn fit(a: FitArgs) -> Result<()> {
    let t = &a.train;
    let data = match (&a.cube, &a.pairs) {
        (Some(c), _) => FitData::from_cube(&read_cube(c)?, t.lattice as usize, t.holdout_max as usize),
        (None, Some(p)) => FitData::from_pairs(&pair_set(p)?, a.holdout_every as usize),
        (None, None) => return Err(CliError::Usage("give --cube or --pairs".into())),
    };
    let cfg = train_config(t, 20, 1024);
    let mut log = LogWriter::create(&a.out, t.log.as_ref())?;
    let mut log_err = None;
    let outcome = fit_glut(&data, a.gaussians as usize, &cfg, |e| {
        if !t.quiet && !t.json {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.6}  PSNR {:.3} dB  dE76 {:.4}  dE00 {:.4}  {} ms",
                e.epoch, e.lr, e.train_loss, e.holdout_psnr, e.holdout_de76, e.holdout_de00, e.wall_ms
            );
        }
        if let Err(err) = log.line(e) {
            log_err.get_or_insert(err);
        }
    })
    .map_err(train_err)?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let file = ModelFile::Glut(outcome.model);
    let bytes = file.to_bytes();
    write_bytes(&a.out, &bytes)?;
    let last = outcome.log.last().expect("at least one epoch");
    let ModelFile::Glut(model) = &file else { unreachable!() };
    if t.json {
        println!(
            "{}",
            json!({
                "model": a.out,
                "primitives": model.len(),
                "parameters": model.param_count(),
                "bytes": bytes.len(),
                "final": last,
            })
        );
    } else {
        println!(
            "wrote {} ({} primitives, {} parameters, {} bytes); held-out PSNR {:.3} dB, dE76 {:.4}, dE00 {:.4}",
            a.out.display(),
            model.len(),
            model.param_count(),
            bytes.len(),
            last.holdout_psnr,
            last.holdout_de76,
            last.holdout_de00
        );
    }
    Ok(())
}

pub fn fit_cglut_cmd(a: FitCglutArgs) -> Result<()> {
    let t = &a.train;
    if a.cubes.len() < 2 {
        return Err(CliError::Usage("need at least two --cube styles".into()));
    }
    let styles = a
        .cubes
        .iter()
        .map(|p| Ok(FitData::from_cube(&read_cube(p)?, t.lattice as usize, t.holdout_max as usize)))
        .collect::<Result<Vec<_>>>()?;
    let d = CglutConfig::default();
    let tc = train_config(t, d.epochs, d.batch_size);
    let cfg = CglutConfig {
        primitives: a.gaussians as usize,
        embed_dim: a.embed_dim as usize,
        hidden: a.hidden as usize,
        mode: if a.shared_geometry { GenerationMode::SharedGeometry } else { GenerationMode::FullGeneration },
        epochs: tc.epochs,
        batch_size: tc.batch_size,
        base_lr: tc.base_lr,
        lambda_hc: tc.lambda_hc,
        lambda_sparse: tc.lambda_sparse,
        mining: tc.mining,
        seed: tc.seed,
        ..d
    };
    let mut log = LogWriter::create(&a.out, t.log.as_ref())?;
    let mut log_err = None;
    let outcome = fit_cglut(&styles, &cfg, |e| {
        if !t.quiet && !t.json {
            let psnr: Vec<String> = e.holdout.iter().map(|r| format!("{:.2}", r.psnr)).collect();
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.6}  PSNR [{}] dB  {} ms",
                e.epoch,
                e.lr,
                e.train_loss,
                psnr.join(", "),
                e.wall_ms
            );
        }
        if let Err(err) = log.line(e) {
            log_err.get_or_insert(err);
        }
    })
    .map_err(cglut_err)?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let params = outcome.model.param_count();
    let bytes = ModelFile::Cglut(outcome.model).to_bytes();
    write_bytes(&a.out, &bytes)?;
    let last = outcome.log.last().expect("at least one epoch");
    if t.json {
        println!(
            "{}",
            json!({ "model": a.out, "styles": a.cubes.len(), "parameters": params, "bytes": bytes.len(), "final": last })
        );
    } else {
        let rows: Vec<(String, glut_core::EvalReport)> =
            last.holdout.iter().enumerate().map(|(i, r)| (format!("style {i}"), *r)).collect();
        println!("wrote {} ({} parameters, {} bytes)", a.out.display(), params, bytes.len());
        print!("{}", eval_table(&rows));
    }
    Ok(())
}

pub fn apply(a: ApplyArgs) -> Result<()> {
    let model = load_model(&a.model, &a.style)?;
    let (img, depth) = read_png(&a.input)?;
    let out = apply_prepared(&model.prepare(), &img, threads(a.threads), a.keep_fraction);
    write_image(&a.output, &out, depth).map_err(|e| match e {
        ImageError::Io(io) => io_err(&a.output, io),
        ImageError::Unsupported(m) => CliError::Usage(m),
    })
}

pub fn bake(a: BakeArgs) -> Result<()> {
    let model = load_model(&a.model, &a.style)?;
    write_bytes(&a.output, &write_cube(&bake_to_cube(&model, a.size as usize)))
}

pub fn edit(a: EditArgs) -> Result<()> {
    let mut model = load_model(&a.model, &a.style)?;
    let c = EditConstraint::new(a.cin, a.cout, a.k, a.strength);
    let before = residual(&model, c.c_in, c.c_out);
    let edit_err = |e: EditError| match e {
        EditError::Degenerate { .. } => CliError::Degenerate(e.to_string()),
        other => CliError::Usage(other.to_string()),
    };
    // Zero strength reports the edit without touching the model.
    let record = if c.strength == 0.0 {
        apply_edit(&mut model.clone(), &c).map_err(edit_err)?
    } else {
        apply_edit(&mut model, &c).map_err(edit_err)?
    };
    let after = residual(&model, c.c_in, c.c_out);
    write_bytes(&a.out, &ModelFile::Glut(model).to_bytes())?;
    if let Some(path) = &a.journal {
        let line = EditJournal {
            records: vec![record.clone()],
        }
        .to_jsonl();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    }
    if a.json {
        println!(
            "{}",
            json!({
                "residual_before": before,
                "residual_after": after,
                "m": record.movement,
                "touched": record.touched,
            })
        );
    } else {
        let fmt = |v: [f64; 3]| format!("[{:+.6}, {:+.6}, {:+.6}]", v[0], v[1], v[2]);
        println!("residual before  {}", fmt(before));
        println!("residual after   {}", fmt(after));
        println!("m                {:.6}", record.movement);
        println!("touched          {:?}", record.touched);
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model, &a.style)?;
    let prep = model.prepare();
    let keep = a.keep_fraction.unwrap_or(1.0);
    let map = |c| if keep < 1.0 { prep.evaluate_sparse(c, keep) } else { prep.evaluate(c) };
    let report = match (&a.cube, &a.pairs) {
        (Some(c), _) => eval_on_split(&map, &read_cube(c)?, a.lattice as usize, a.holdout_max as usize),
        (None, Some(p)) => {
            let held = FitData::from_pairs(&pair_set(p)?, a.holdout_every as usize).holdout;
            if held.is_empty() {
                return Err(CliError::Usage("image pair too small to hold out any pixels".into()));
            }
            let start = std::time::Instant::now();
            let pred: Vec<_> = held.inputs.iter().map(|&c| map(c)).collect();
            let mut r = evaluate_pairs(&pred, &held.targets);
            r.wall_ms = start.elapsed().as_millis() as u64;
            r
        }
        (None, None) => return Err(CliError::Usage("give --cube or --pairs".into())),
    };
    if a.json {
        println!(
            "{}",
            json!({ "model": a.model, "primitives": model.len(), "keep_fraction": a.keep_fraction, "report": report })
        );
    } else {
        print!("{}", eval_table(&[(a.model.display().to_string(), report)]));
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model, &a.style)?;
    let res: Vec<(String, usize, usize)> = if a.resolutions.is_empty() {
        RESOLUTIONS.iter().map(|&(n, w, h)| (n.to_string(), w, h)).collect()
    } else {
        a.resolutions.clone()
    };
    let t = threads(a.threads);
    let rows: Vec<_> = res
        .iter()
        .map(|(name, w, h)| throughput_bench(&model, name, *w, *h, t, a.keep_fraction, a.runs))
        .collect();
    if a.json {
        println!("{}", serde_json::to_string(&rows).expect("bench rows serialize"));
    } else {
        print!("{}", bench_table(&rows));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let cfg = glut_service::ServiceConfig {
        max_upload_bytes: a.max_upload_mb << 20,
        threads: threads(a.threads),
        journal_dir: a.journal_dir,
        allow_origin: a.allow_origin,
        ..Default::default()
    };
    if let Some(dir) = &cfg.journal_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(glut_service::serve(addr, cfg))
        .map_err(|e| CliError::Io(format!("{addr}: {e}")))
}
