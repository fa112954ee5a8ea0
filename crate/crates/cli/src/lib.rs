//! Command-line front end: flag parsing, config assembly and exit codes.
//!
//! Exit codes: 0 on success, 1 for configuration and I/O problems (the
//! message names the offending flag where there is one), 2 when the
//! optimisation hits a non-finite loss.

use std::ffi::OsString;
use std::path::PathBuf;

use blend_core::losses::GradVariant;
use blend_core::pipeline::{run, Engine, Init, NetworkChoice, RunConfig};
use blend_core::poisson::{GuidanceMode, SolverSettings};
use blend_core::Error;
use clap::{Parser, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "blend", version, about = "Gradient-domain image blending")]
struct Args {
    /// Source image containing the object to paste (.ppm or .png)
    #[arg(long)]
    source: Option<PathBuf>,
    /// Mask over the source; pixels with mean value >= 0.5 are blended
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Background image
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output image; traces and the manifest are written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Position of the source's top-left corner on the target, as X,Y
    #[arg(long, value_parser = parse_offset, allow_hyphen_values = true)]
    offset: Option<(i64, i64)>,
    /// Square working resolution; 0 keeps the target's size [default: 512]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Feature network: vgg:PATH (BLW1 weights) or testnet:SEED
    #[arg(long)]
    network: Option<String>,
    /// Gradient loss form: whole-frame comparison against source plus
    /// target Laplacians, or source Laplacian inside the mask only
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Guidance field for the poisson engine
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    /// Linear solver for the poisson engine
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Stage-one iteration budget
    #[arg(long)]
    iters1: Option<usize>,
    /// Stage-two iteration budget
    #[arg(long)]
    iters2: Option<usize>,
    /// Gradient loss weight, VALUE or VALUE:1
    #[arg(long, value_name = "VALUE[:STAGE]")]
    lambda_grad: Vec<String>,
    /// Content loss weight, VALUE (both stages) or VALUE:1 / VALUE:2
    #[arg(long, value_name = "VALUE[:STAGE]")]
    lambda_cont: Vec<String>,
    /// Style loss weight, VALUE (both stages) or VALUE:1 / VALUE:2
    #[arg(long, value_name = "VALUE[:STAGE]")]
    lambda_style: Vec<String>,
    /// Histogram loss weight, VALUE (both stages) or VALUE:1 / VALUE:2
    #[arg(long, value_name = "VALUE[:STAGE]")]
    lambda_hist: Vec<String>,
    /// Total variation weight, VALUE (both stages) or VALUE:1 / VALUE:2
    #[arg(long, value_name = "VALUE[:STAGE]")]
    lambda_tv: Vec<String>,
    /// Stage-one initialisation
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Seed for the noise initialisation
    #[arg(long)]
    seed: Option<u64>,
    /// Dump a frame every N iterations into <out>_frames/
    #[arg(long, value_name = "N")]
    save_every: Option<usize>,
    /// Base path for trace CSVs (default: next to --out)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Start from a run manifest; other flags override its values
    #[arg(long, value_name = "PATH")]
    from_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EngineArg {
    TwoStage,
    Stage1,
    Poisson,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "eq6")]
    Literal,
    Cropout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GuidanceArg {
    Source,
    Mixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Gs,
    Cg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Noise,
    Copypaste,
}

fn parse_offset(s: &str) -> Result<(i64, i64), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let num = |v: &str| v.trim().parse::<i64>().map_err(|_| format!("{v:?} is not an integer"));
    Ok((num(x)?, num(y)?))
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFinite { .. }) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Copy)]
enum Term {
    Grad,
    Cont,
    Style,
    Hist,
    Tv,
}

fn apply_lambda(cfg: &mut RunConfig, flag: &str, term: Term, values: &[String]) -> Result<(), Failure> {
    for raw in values {
        let (value, stages): (&str, &[u8]) = match raw.rsplit_once(':') {
            Some((v, "1")) => (v, &[1]),
            Some((v, "2")) => (v, &[2]),
            Some((_, s)) => return Err(config_error(format!("{flag}: unknown stage {s:?} (use :1 or :2)"))),
            None => (raw, &[1, 2]),
        };
        let value: f64 = value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| config_error(format!("{flag}: {value:?} is not a finite non-negative number")))?;
        if matches!(term, Term::Grad) && stages == [2] {
            return Err(config_error(format!("{flag}: stage two has no gradient term")));
        }
        for &stage in stages {
            let w = if stage == 1 { &mut cfg.stage1.weights } else { &mut cfg.stage2.weights };
            match term {
                Term::Grad if stage == 1 => w.lambda_grad = value,
                Term::Grad => {}
                Term::Cont => w.lambda_cont = value,
                Term::Style => w.lambda_style = value,
                Term::Hist => w.lambda_hist = value,
                Term::Tv => w.lambda_tv = value,
            }
        }
    }
    Ok(())
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| config_error(format!("missing required flag {flag}")))
}

fn build_config(args: Args) -> Result<RunConfig, Failure> {
    let engine = args.engine.map(|e| match e {
        EngineArg::TwoStage => Engine::TwoStage,
        EngineArg::Stage1 => Engine::StageOneOnly,
        EngineArg::Poisson => Engine::Poisson,
    });
    let network = args
        .network
        .as_deref()
        .map(|n| n.parse::<NetworkChoice>().map_err(|e| config_error(format!("--network: {e}"))))
        .transpose()?;

    let mut cfg = match &args.from_manifest {
        Some(path) => RunConfig::load_manifest(path).map_err(|e| config_error(format!("--from-manifest: {e}")))?,
        None => {
            let source = required(args.source.clone(), "--source")?;
            let mask = required(args.mask.clone(), "--mask")?;
            let target = required(args.target.clone(), "--target")?;
            let out = required(args.out.clone(), "--out")?;
            let deep = engine.unwrap_or_default() != Engine::Poisson;
            let network = match (&network, deep) {
                (Some(n), _) => n.clone(),
                (None, false) => NetworkChoice::TestNet(0),
                (None, true) => {
                    return Err(config_error(
                        "missing required flag --network (vgg:PATH or testnet:SEED) for the optimisation engines",
                    ))
                }
            };
            let mut cfg = RunConfig::new(source, mask, target, out, network);
            cfg.solver = SolverSettings::conjugate_gradient();
            cfg
        }
    };

    if let Some(network) = network {
        if network.spec().tap_names().ne(cfg.network.spec().tap_names()) {
            let spec = network.spec();
            cfg.stage1.weights.reset_layers(&spec);
            cfg.stage2.weights.reset_layers(&spec);
        }
        cfg.network = network;
    }
    if let Some(v) = args.source {
        cfg.source = v;
    }
    if let Some(v) = args.mask {
        cfg.mask = v;
    }
    if let Some(v) = args.target {
        cfg.target = v;
    }
    if let Some(v) = args.out {
        cfg.output = v;
    }
    if let Some(v) = args.offset {
        cfg.offset = v;
    }
    if let Some(n) = args.size {
        cfg.size = (n > 0).then_some(n);
    }
    if let Some(e) = engine {
        cfg.engine = e;
    }
    if let Some(v) = args.variant {
        cfg.variant = match v {
            VariantArg::Literal => GradVariant::Literal,
            VariantArg::Cropout => GradVariant::CropOut,
        };
    }
    if let Some(g) = args.guidance {
        cfg.guidance = match g {
            GuidanceArg::Source => GuidanceMode::SourceOnly,
            GuidanceArg::Mixed => GuidanceMode::MixedSum,
        };
    }
    if let Some(s) = args.solver {
        cfg.solver = match s {
            SolverArg::Gs => SolverSettings::gauss_seidel(),
            SolverArg::Cg => SolverSettings::conjugate_gradient(),
        };
    }
    for (flag, value, stage) in [("--iters1", args.iters1, &mut cfg.stage1), ("--iters2", args.iters2, &mut cfg.stage2)] {
        if let Some(n) = value {
            if n == 0 {
                return Err(config_error(format!("{flag}: must be at least 1")));
            }
            stage.max_iter = n;
        }
    }
    apply_lambda(&mut cfg, "--lambda-grad", Term::Grad, &args.lambda_grad)?;
    apply_lambda(&mut cfg, "--lambda-cont", Term::Cont, &args.lambda_cont)?;
    apply_lambda(&mut cfg, "--lambda-style", Term::Style, &args.lambda_style)?;
    apply_lambda(&mut cfg, "--lambda-hist", Term::Hist, &args.lambda_hist)?;
    apply_lambda(&mut cfg, "--lambda-tv", Term::Tv, &args.lambda_tv)?;
    if let Some(i) = args.init {
        cfg.stage1.init = match i {
            InitArg::Noise => Init::RandomNoise,
            InitArg::Copypaste => Init::CopyPaste,
        };
    }
    if let Some(seed) = args.seed {
        cfg.stage1.seed = seed;
        cfg.stage2.seed = seed;
    }
    if let Some(n) = args.save_every {
        cfg.stage1.save_every = n;
        cfg.stage2.save_every = n;
    }
    if args.trace.is_some() {
        cfg.trace = args.trace;
    }
    Ok(cfg)
}

/// Checks input paths up front so errors can name the flag.
fn check_inputs(cfg: &RunConfig) -> Result<(), Failure> {
    for (flag, path) in [("--source", &cfg.source), ("--mask", &cfg.mask), ("--target", &cfg.target)] {
        if let Err(e) = std::fs::metadata(path) {
            return Err(config_error(format!("{flag}: cannot read {}: {e}", path.display())));
        }
    }
    if let NetworkChoice::Vgg(path) = &cfg.network {
        if cfg.engine != Engine::Poisson && std::fs::metadata(path).is_err() {
            return Err(config_error(format!("--network: cannot read weights {}", path.display())));
        }
    }
    let flag_for = |e: &Error| match e {
        Error::PlacementOutOfBounds { .. } => "--offset: ",
        Error::MaskTouchesFrame { .. } | Error::EmptyRegion => "--mask: ",
        _ => "",
    };
    blend_core::pipeline::load_instance(cfg)
        .and_then(|i| i.validate())
        .map_err(|e| config_error(format!("{}{e}", flag_for(&e))))
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("BLEND_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("BLEND_THREADS: {raw:?} is not a positive integer")))?;
    // a second call in one process finds the pool already built; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the selected engine and returns
/// the list of written files.
pub fn execute<I, T>(argv: I) -> Result<Vec<PathBuf>, Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Failure {
            code: 0,
            message: e.to_string(),
        },
        _ => config_error(e.to_string()),
    })?;
    configure_threads()?;
    let cfg = build_config(args)?;
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    check_inputs(&cfg)?;
    let out = run(&cfg)?;
    Ok(out.written)
}

/// Entry point used by the binary: prints results or the error and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match execute(argv) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            0
        }
        Err(f) if f.code == 0 => {
            print!("{}", f.message);
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message.trim_end());
            f.code
        }
    }
}
