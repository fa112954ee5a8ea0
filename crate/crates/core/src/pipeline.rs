//! The two-stage blending pipeline and its run configuration.
//!
//! Stage one optimises the pixels under the mask so the composite blends
//! seamlessly into the target. Stage two starts from that composite and
//! refines every pixel towards the target's style. Both stages are plain
//! L-BFGS over unconstrained pixel values; results are clamped to `[0, 1]`
//! only when a stage finishes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, save_image};
use crate::losses::{GradVariant, LossReport, LossWeights, StageOneLoss, StageTwoLoss, STAGE_ONE_TERMS, STAGE_TWO_TERMS};
use crate::net::{Network, NetworkSpec, WeightStore};
use crate::optim::{minimize_with, Evaluation, LbfgsConfig, Objective, OptTrace, Termination};
use crate::poisson::{poisson_blend, GuidanceMode, SolverSettings};
use crate::raster::{align, composite, resize_bilinear, resize_mask, BlendInstance, ImageTensor, Mask};
use crate::rng::UniformStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    RandomNoise,
    CopyPaste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub weights: LossWeights,
    pub max_iter: usize,
    pub init: Init,
    pub seed: u64,
    /// Dump a frame every this many iterations; 0 disables dumps.
    pub save_every: usize,
}

impl StageConfig {
    pub const DEFAULT_MAX_ITER: usize = 1000;

    pub fn stage_one(spec: &NetworkSpec) -> Self {
        Self {
            weights: LossWeights::stage_one(spec),
            max_iter: Self::DEFAULT_MAX_ITER,
            init: Init::RandomNoise,
            seed: 0,
            save_every: 0,
        }
    }

    pub fn stage_two(spec: &NetworkSpec) -> Self {
        Self {
            weights: LossWeights::stage_two(spec),
            init: Init::CopyPaste,
            ..Self::stage_one(spec)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("stage max_iter must be at least 1".into()));
        }
        self.weights.validate()
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            ..LbfgsConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    #[default]
    TwoStage,
    #[serde(rename = "stage1")]
    StageOneOnly,
    Poisson,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-stage" => Ok(Self::TwoStage),
            "stage1" => Ok(Self::StageOneOnly),
            "poisson" => Ok(Self::Poisson),
            _ => Err(Error::InvalidArgument(format!(
                "unknown engine {s:?} (expected two-stage, stage1 or poisson)"
            ))),
        }
    }
}

/// Which feature network to run: pretrained VGG-16 weights from a BLW1 file,
/// or the small seeded test network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NetworkChoice {
    Vgg(PathBuf),
    TestNet(u64),
}

impl NetworkChoice {
    pub fn spec(&self) -> NetworkSpec {
        match self {
            Self::Vgg(_) => NetworkSpec::vgg16(),
            Self::TestNet(_) => NetworkSpec::test_network(),
        }
    }

    pub fn load(&self) -> Result<Network> {
        match self {
            Self::Vgg(path) => Network::vgg16(&WeightStore::load(path)?),
            Self::TestNet(seed) => Ok(Network::test_network(*seed)),
        }
    }
}

impl FromStr for NetworkChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("vgg:") {
            if path.is_empty() {
                return Err(Error::InvalidArgument("vgg: needs a weight file path".into()));
            }
            return Ok(Self::Vgg(PathBuf::from(path)));
        }
        if let Some(seed) = s.strip_prefix("testnet:") {
            return seed
                .parse()
                .map(Self::TestNet)
                .map_err(|_| Error::InvalidArgument(format!("bad test network seed {seed:?}")));
        }
        Err(Error::InvalidArgument(format!(
            "unknown network {s:?} (expected vgg:PATH or testnet:SEED)"
        )))
    }
}

impl fmt::Display for NetworkChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Vgg(p) => write!(f, "vgg:{}", p.display()),
            Self::TestNet(seed) => write!(f, "testnet:{seed}"),
        }
    }
}

impl TryFrom<String> for NetworkChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NetworkChoice> for String {
    fn from(n: NetworkChoice) -> String {
        n.to_string()
    }
}

/// Everything needed to reproduce one run. Serialised as the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source: PathBuf,
    pub mask: PathBuf,
    pub target: PathBuf,
    pub output: PathBuf,
    /// Placement of the source's top-left corner in original target pixels.
    pub offset: (i64, i64),
    /// Square working resolution; `None` keeps the target's own size.
    pub size: Option<usize>,
    pub engine: Engine,
    pub network: NetworkChoice,
    pub variant: GradVariant,
    pub guidance: GuidanceMode,
    pub solver: SolverSettings,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Base path for trace CSVs; defaults to the output path.
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    pub const DEFAULT_SIZE: usize = 512;

    /// Defaults for every setting other than the file paths.
    pub fn new(source: PathBuf, mask: PathBuf, target: PathBuf, output: PathBuf, network: NetworkChoice) -> Self {
        let spec = network.spec();
        Self {
            source,
            mask,
            target,
            output,
            offset: (0, 0),
            size: Some(Self::DEFAULT_SIZE),
            engine: Engine::TwoStage,
            network,
            variant: GradVariant::Literal,
            guidance: GuidanceMode::SourceOnly,
            solver: SolverSettings::default(),
            stage1: StageConfig::stage_one(&spec),
            stage2: StageConfig::stage_two(&spec),
            trace: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == Some(0) {
            return Err(Error::InvalidArgument("size must be positive".into()));
        }
        if self.engine != Engine::Poisson {
            self.stage1.validate()?;
        }
        if self.engine == Engine::TwoStage {
            self.stage2.validate()?;
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        sibling(&self.output, "manifest.json")
    }

    pub fn trace_path(&self, stage: &str) -> PathBuf {
        sibling(self.trace.as_ref().unwrap_or(&self.output), &format!("{stage}.csv"))
    }

    pub fn frames_dir(&self) -> PathBuf {
        let stem = self.output.file_stem().unwrap_or_default().to_string_lossy();
        self.output.with_file_name(format!("{stem}_frames"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json()?)
    }
}

/// `dir/stem.ext` for a file `dir/stem.*`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{ext}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Clamped result of the stage (the composite `I_B` for stage one).
    pub image: ImageTensor,
    /// Raw optimised pixels before compositing and clamping.
    pub raw: ImageTensor,
    pub trace: OptTrace,
    pub reason: Termination,
}

impl StageOutput {
    pub fn initial_loss(&self) -> f64 {
        self.trace.records.first().map_or(f64::NAN, |r| r.objective)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.records.last().map_or(f64::NAN, |r| r.objective)
    }
}

struct PixelObjective<F> {
    shape: (usize, usize, usize),
    names: &'static [&'static str],
    loss: F,
}

impl<F: FnMut(&ImageTensor) -> Result<LossReport>> Objective for PixelObjective<F> {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        let img = to_tensor(x, self.shape);
        let report = (self.loss)(&img)?;
        Ok(Evaluation {
            value: report.total,
            gradient: report.gradient.into_data(),
            terms: report.terms.values().copied().collect(),
        })
    }

    fn term_names(&self) -> Vec<String> {
        self.names.iter().map(|s| s.to_string()).collect()
    }
}

fn to_tensor(x: &[f64], (h, w, c): (usize, usize, usize)) -> ImageTensor {
    let mut img = ImageTensor::zeros(h, w, c);
    img.data_mut().copy_from_slice(x);
    img
}

/// Uniform `[0, 1)` noise in planar order from `splitmix64(seed)`.
pub fn noise_image(height: usize, width: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = UniformStream::new(seed);
    ImageTensor::from_fn(height, width, channels, |_, _, _| rng.next_unit())
}

/// Runs L-BFGS on `loss` from `init`, dumping `render(x)` to
/// `frames/{label}_iter{N}.png` every `save_every` iterations.
fn optimise(
    init: &ImageTensor,
    loss: impl FnMut(&ImageTensor) -> Result<LossReport>,
    names: &'static [&'static str],
    cfg: &StageConfig,
    label: &str,
    frames: Option<&Path>,
    render: impl Fn(&ImageTensor) -> Result<ImageTensor>,
) -> Result<(ImageTensor, OptTrace, Termination)> {
    let shape = (init.height(), init.width(), init.channels());
    let mut objective = PixelObjective { shape, names, loss };
    let mut dump_error = None;
    let observe = |rec: &crate::optim::IterationRecord, x: &[f64]| {
        let terms: Vec<String> = names.iter().zip(&rec.terms).map(|(n, v)| format!("{n}={v:.4e}")).collect();
        log::info!(
            "{label} iter {:>4}  total {:.6e}  |g| {:.3e}  step {:.3e}  {}",
            rec.iteration,
            rec.objective,
            rec.grad_norm,
            rec.step,
            terms.join(" ")
        );
        let Some(dir) = frames else { return };
        if cfg.save_every == 0 || rec.iteration % cfg.save_every != 0 || dump_error.is_some() {
            return;
        }
        let path = dir.join(format!("{label}_iter{}.png", rec.iteration));
        if let Err(e) = render(&to_tensor(x, shape)).and_then(|img| save_image(&img.clamped(), &path)) {
            dump_error = Some(e);
        }
    };
    let m = minimize_with(&mut objective, init.data().to_vec(), &cfg.lbfgs(), observe)?;
    if let Some(e) = dump_error {
        return Err(e);
    }
    log::info!("{label} finished after {} iterations: {:?}", m.iterations, m.reason);
    Ok((to_tensor(&m.x, shape), m.trace, m.reason))
}

/// Stage one: optimise `I_Z` so that `composite(I_Z, I_T, M)` blends in.
/// The source is cropped by the mask before any loss sees it.
pub fn stage_one(
    net: &Network,
    instance: &BlendInstance,
    variant: GradVariant,
    cfg: &StageConfig,
    frames: Option<&Path>,
) -> Result<StageOutput> {
    cfg.validate()?;
    let (source, mask) = align(instance)?;
    let target = &instance.target;
    let cropped = source.masked(&mask)?;
    let init = match cfg.init {
        Init::RandomNoise => noise_image(target.height(), target.width(), target.channels(), cfg.seed),
        Init::CopyPaste => source.clone(),
    };
    let loss = StageOneLoss::new(net, &cropped, target, &mask, variant, &cfg.weights)?;
    let (z, trace, reason) = optimise(
        &init,
        |z| loss.evaluate(z),
        &STAGE_ONE_TERMS,
        cfg,
        "stage1",
        frames,
        |z| composite(z, target, &mask),
    )?;
    Ok(StageOutput {
        image: composite(&z, target, &mask)?.clamped(),
        raw: z,
        trace,
        reason,
    })
}

/// Stage two: refine every pixel of `blend` towards the style of `target`.
pub fn stage_two(
    net: &Network,
    blend: &ImageTensor,
    target: &ImageTensor,
    cfg: &StageConfig,
    frames: Option<&Path>,
) -> Result<StageOutput> {
    cfg.validate()?;
    let loss = StageTwoLoss::new(net, blend, target, &cfg.weights)?;
    let (x, trace, reason) = optimise(
        blend,
        |x| loss.evaluate(x),
        &STAGE_TWO_TERMS,
        cfg,
        "stage2",
        frames,
        |x| Ok(x.clone()),
    )?;
    Ok(StageOutput {
        image: x.clamped(),
        raw: x,
        trace,
        reason,
    })
}

/// Loads the three input images and rescales them so the target becomes
/// `size × size`; source, mask and offset follow the same scale factors.
pub fn load_instance(config: &RunConfig) -> Result<BlendInstance> {
    let source = load_image(&config.source)?;
    let mask = Mask::from_image(&load_image(&config.mask)?);
    let target = load_image(&config.target)?;
    let (ox, oy) = config.offset;
    let Some(n) = config.size else {
        return Ok(BlendInstance {
            source,
            mask,
            target,
            offset_x: ox,
            offset_y: oy,
        });
    };
    let sx = n as f64 / target.width() as f64;
    let sy = n as f64 / target.height() as f64;
    let offset_x = (ox as f64 * sx).round() as i64;
    let offset_y = (oy as f64 * sy).round() as i64;
    let scaled = |len: usize, s: f64| ((len as f64 * s).round() as usize).max(1);
    let (w, h) = (scaled(source.width(), sx), scaled(source.height(), sy));
    Ok(BlendInstance {
        source: resize_bilinear(&source, h, w)?,
        mask: resize_mask(&mask, h, w)?,
        target: resize_bilinear(&target, n, n)?,
        offset_x,
        offset_y,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: ImageTensor,
    pub stage1: Option<StageOutput>,
    pub stage2: Option<StageOutput>,
    /// Every file the run wrote, output image first.
    pub written: Vec<PathBuf>,
}

/// Executes `config` end to end and writes the output image, trace CSVs and
/// manifest.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let instance = load_instance(config)?;
    let mut written = vec![config.output.clone()];
    let frames = {
        let any = match config.engine {
            Engine::Poisson => false,
            Engine::StageOneOnly => config.stage1.save_every > 0,
            Engine::TwoStage => config.stage1.save_every > 0 || config.stage2.save_every > 0,
        };
        any.then(|| config.frames_dir())
    };
    if let Some(dir) = &frames {
        std::fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
            path: dir.clone(),
            source,
        })?;
    }

    let mut out = RunOutput {
        image: instance.target.clone(),
        stage1: None,
        stage2: None,
        written: Vec::new(),
    };
    match config.engine {
        Engine::Poisson => {
            let (image, solution) = poisson_blend(&instance, config.guidance, &config.solver)?;
            let path = config.trace_path("poisson");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["channel", "iterations", "residual", "converged"])?;
            for (c, s) in solution.stats.iter().enumerate() {
                w.write_record([c.to_string(), s.iterations.to_string(), format!("{:e}", s.residual), s.converged.to_string()])?;
            }
            w.flush().map_err(|e| Error::Csv(e.into()))?;
            written.push(path);
            out.image = image;
        }
        Engine::StageOneOnly | Engine::TwoStage => {
            let net = config.network.load()?;
            let s1 = stage_one(&net, &instance, config.variant, &config.stage1, frames.as_deref())?;
            let path = config.trace_path("stage1");
            s1.trace.save_csv(&path)?;
            written.push(path);
            out.image = s1.image.clone();
            if config.engine == Engine::TwoStage {
                let s2 = stage_two(&net, &s1.image, &instance.target, &config.stage2, frames.as_deref())?;
                let path = config.trace_path("stage2");
                s2.trace.save_csv(&path)?;
                written.push(path);
                let path = sibling(&config.output, "stage1.png");
                save_image(&s1.image, &path)?;
                written.push(path);
                out.image = s2.image.clone();
                out.stage2 = Some(s2);
            }
            out.stage1 = Some(s1);
        }
    }
    save_image(&out.image, &config.output)?;
    let manifest = config.manifest_path();
    config.save_manifest(&manifest)?;
    written.push(manifest);
    out.written = written;
    Ok(out)
}
