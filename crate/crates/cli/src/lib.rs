//! The `synreg` command line: synthetic data generation, training,
//! registration and evaluation, with every artifact stored as SMVF
//! (voxel data), SMWT (network weights) or CSV/JSON.
//!
//! All randomness of a command comes from `--seed`. Sub-streams are taken
//! with [`RngStream::split`]: label maps use stream 0, pair deformations
//! stream 1, the moving and fixed images streams 2 and 3, the second
//! source map of `gen-pair --mode two-maps` stream 4 and a shared
//! intensity model (`--same-contrast`) stream 5. `synth-image` draws the
//! image from stream 0 and its lookup table from stream 1. `train` uses
//! stream 0 for initialization and stream `1 + i` for pair `i`.

pub mod error;
pub mod smvf;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use synreg_core::deform::{folding_fraction, jacobian_det, DisplacementField};
use synreg_core::grid::{warp_linear, warp_nearest};
use synreg_core::imagesynth::{
    lut_augment, sample_gmm, synthesize_image, synthesize_image_with_gmm,
};
use synreg_core::metrics::MetricReport;
use synreg_core::sampling::default_params;
use synreg_core::shapegen::{
    generate_shape_labels, pair_from_single_map, pair_from_two_maps, supervised_pair, FILL_LABEL,
};
use synreg_core::{GenParams, LabelMap, RngStream, ScalarField};
use synreg_net::train::{write_trace, TrainOptions};
use synreg_net::{predict_warp, LossKind, NetState, TrainSettings, UNetConfig};

pub use error::{CliError, Result};
pub use smvf::Smvf;

#[derive(Debug, Parser)]
#[command(
    name = "synreg",
    version,
    about = "Registration learned from synthetic label maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    /// Grid size, e.g. `64,64`; overrides the params file.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Label count J; overrides the params file.
    #[arg(long = "labels")]
    pub labels: Option<usize>,
    /// Hyperparameter JSON; omitted keys take their defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairMode {
    /// One source map, multi-resolution warps on both sides.
    Shapes,
    /// Fixed map derived from the moving one, so the net warp is known.
    Supervised,
    /// Two independent source maps, single-resolution warps.
    TwoMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Dice,
    SupSvf,
    SupDef,
    ImageMse,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Dice => LossKind::Dice,
            LossArg::SupSvf => LossKind::SupSvf,
            LossArg::SupDef => LossKind::SupDef,
            LossArg::ImageMse => LossKind::ImageMse,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random shape label map.
    GenLabels {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Moving/fixed label maps, images and the velocities behind them.
    GenPair {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, value_enum, default_value = "shapes")]
        mode: PairMode,
        /// Draw both images from one intensity model.
        #[arg(long)]
        same_contrast: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Gray-scale image of arbitrary contrast from a label map.
    SynthImage {
        #[arg(long)]
        seed: u64,
        #[arg(long = "label-map")]
        label_map: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Additionally remap intensities through a random smoothed lookup
        /// table with this SD (in table entries).
        #[arg(long)]
        lut_sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on freshly synthesized pairs.
    Train {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        iterations: u64,
        #[arg(long, value_enum, default_value = "dice")]
        loss: LossArg,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = synreg_net::state::DEFAULT_LR)]
        lr: f64,
        /// Regularization weight; overrides the params file.
        #[arg(long)]
        lambda: Option<f64>,
        /// Synthesize the next pair on a second thread.
        #[arg(long)]
        prefetch: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Predict the moving-to-fixed displacement with a trained network.
    Register {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the moving image resampled onto the fixed grid.
        #[arg(long)]
        moved: Option<PathBuf>,
        /// Moving label map to carry along; requires --moved-labels.
        #[arg(long, requires = "moved_labels")]
        moving_labels: Option<PathBuf>,
        #[arg(long, requires = "moving_labels")]
        moved_labels: Option<PathBuf>,
    },
    /// Dice and surface distance between two label maps.
    Evaluate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Labels to score; defaults to every nonzero label in either map.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<u32>>,
        /// Displacement whose folding fraction is added to the report.
        #[arg(long)]
        warp: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Jacobian determinant of a displacement field.
    Jacobian {
        #[arg(long)]
        warp: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 8-bit grayscale PNG of one channel and slice, min-max windowed.
    ExportPng {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Index along the first axis of a 3D grid; defaults to the middle.
        #[arg(long)]
        slice: Option<usize>,
    },
}

fn load_params(path: Option<&Path>) -> Result<GenParams> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(GenParams::from_json(&text)?)
        }
        None => Ok(default_params(&[64, 64])),
    }
}

fn gen_params(g: &GenArgs) -> Result<GenParams> {
    let mut p = load_params(g.params.as_deref())?;
    if let Some(d) = &g.dims {
        p.dims = d.clone();
    }
    if let Some(j) = g.labels {
        p.j = j;
    }
    p.validate()?;
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn save_weights(state: &NetState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    state.write_weights(std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<NetState> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(NetState::read_weights(std::io::BufReader::new(file))?)
}

fn histogram(s: &LabelMap) -> String {
    let mut out = String::from("label,count\n");
    for (l, n) in s.histogram() {
        let _ = writeln!(out, "{l},{n}");
    }
    out
}

fn gray_png(field: &ScalarField, channel: usize, slice: Option<usize>) -> Result<image::GrayImage> {
    if channel >= field.channels() {
        return Err(CliError::Usage(format!(
            "channel {channel} of {}",
            field.channels()
        )));
    }
    let dims = field.dims();
    let (rows, cols) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let offset = if dims.len() == 3 {
        let k = slice.unwrap_or(dims[0] / 2);
        if k >= dims[0] {
            return Err(CliError::Usage(format!("slice {k} of {}", dims[0])));
        }
        k * rows * cols
    } else {
        0
    };
    let values: Vec<f64> = (0..rows * cols)
        .map(|v| field.get(offset + v, channel) as f64)
        .collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(image::GrayImage::from_raw(cols as u32, rows as u32, pixels).expect("buffer matches size"))
}

/// Runs one command; human-readable results go to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenLabels { gen, out } => {
            let p = gen_params(&gen)?;
            let s = generate_shape_labels(&mut RngStream::from_seed(gen.seed).split(0), &p)?;
            Smvf::from_labels(&s)?.save(&out)?;
            stdout.write_all(histogram(&s).as_bytes())?;
        }
        Command::GenPair {
            gen,
            mode,
            same_contrast,
            out_dir,
        } => {
            let p = gen_params(&gen)?;
            let root = RngStream::from_seed(gen.seed);
            let s = generate_shape_labels(&mut root.split(0), &p)?;
            let pair = match mode {
                PairMode::Shapes => pair_from_single_map(&mut root.split(1), &s, &p)?,
                PairMode::Supervised => supervised_pair(&mut root.split(1), &s, &p)?,
                PairMode::TwoMaps => {
                    let s2 = generate_shape_labels(&mut root.split(4), &p)?;
                    pair_from_two_maps(&mut root.split(1), &s, &s2, &p)?
                }
            };
            let (m, f) = if same_contrast {
                let mut labels = pair.s_m.label_set().to_vec();
                labels.extend_from_slice(pair.s_f.label_set());
                labels.sort_unstable();
                labels.dedup();
                let gmm = sample_gmm(&mut root.split(5), &labels, &p)?;
                (
                    synthesize_image_with_gmm(&mut root.split(2), &pair.s_m, &p, gmm.clone())?,
                    synthesize_image_with_gmm(&mut root.split(3), &pair.s_f, &p, gmm)?,
                )
            } else {
                (
                    synthesize_image(&mut root.split(2), &pair.s_m, &p)?,
                    synthesize_image(&mut root.split(3), &pair.s_f, &p)?,
                )
            };
            create_dir(&out_dir)?;
            Smvf::from_labels(&pair.s_m)?.save(&out_dir.join("s_m.smvf"))?;
            Smvf::from_labels(&pair.s_f)?.save(&out_dir.join("s_f.smvf"))?;
            Smvf::from_scalar(&m.image).save(&out_dir.join("m.smvf"))?;
            Smvf::from_scalar(&f.image).save(&out_dir.join("f.smvf"))?;
            Smvf::from_vector(pair.truth_v_m.field()).save(&out_dir.join("v_m.smvf"))?;
            Smvf::from_vector(pair.truth_v_f.field()).save(&out_dir.join("v_f.smvf"))?;
            if let Some(u) = &pair.truth_u_net {
                Smvf::from_vector(u.field()).save(&out_dir.join("u_net.smvf"))?;
            }
            writeln!(stdout, "wrote pair to {}", out_dir.display())?;
        }
        Command::SynthImage {
            seed,
            label_map,
            params,
            lut_sigma,
            out,
        } => {
            let s = Smvf::load(&label_map)?.to_labels()?;
            let mut p = load_params(params.as_deref())?;
            p.dims = s.dims().to_vec();
            p.validate()?;
            let root = RngStream::from_seed(seed);
            let mut img = synthesize_image(&mut root.split(0), &s, &p)?.image;
            if let Some(sigma) = lut_sigma {
                img = lut_augment(&mut root.split(1), &img, sigma)?;
            }
            Smvf::from_scalar(&img).save(&out)?;
        }
        Command::Train {
            gen,
            iterations,
            loss,
            width,
            levels,
            lr,
            lambda,
            prefetch,
            out,
            trace,
        } => {
            let mut p = gen_params(&gen)?;
            if let Some(l) = lambda {
                p.lambda_reg = l;
            }
            p.validate()?;
            if !(lr.is_finite() && lr > 0.0) {
                return Err(CliError::Usage(format!("learning rate {lr}")));
            }
            let config = UNetConfig {
                ndim: p.dims.len(),
                final_channels: p.dims.len(),
                levels,
                width,
                ..UNetConfig::desk()
            };
            let opts = TrainOptions {
                iterations,
                kind: loss.into(),
                settings: TrainSettings {
                    lr,
                    ..TrainSettings::default()
                },
                prefetch,
            };
            let result = synreg_net::train(&RngStream::from_seed(gen.seed), &p, config, &opts)?;
            save_weights(&result.state, &out)?;
            let file = std::fs::File::create(&trace).map_err(|e| CliError::io(&trace, e))?;
            write_trace(&result.trace, std::io::BufWriter::new(file))?;
            if let Some(last) = result.trace.last() {
                writeln!(
                    stdout,
                    "iteration {} total {} lr {}",
                    last.iteration, last.total, last.lr
                )?;
            }
        }
        Command::Register {
            weights,
            moving,
            fixed,
            out,
            moved,
            moving_labels,
            moved_labels,
        } => {
            let state = load_weights(&weights)?;
            let m = Smvf::load(&moving)?.to_scalar()?;
            let f = Smvf::load(&fixed)?.to_scalar()?;
            if m.meta() != f.meta() {
                return Err(CliError::Usage("moving and fixed grids differ".into()));
            }
            let u = predict_warp(&state, &m, &f)?;
            Smvf::from_vector(u.field()).save(&out)?;
            if let Some(path) = moved {
                Smvf::from_scalar(&warp_linear(&m, u.field(), 0.0)?).save(&path)?;
            }
            if let (Some(src), Some(dst)) = (moving_labels, moved_labels) {
                let s = Smvf::load(&src)?.to_labels()?;
                Smvf::from_labels(&warp_nearest(&s, u.field(), FILL_LABEL)?)?.save(&dst)?;
            }
        }
        Command::Evaluate {
            a,
            b,
            labels,
            warp,
            csv,
            json,
        } => {
            let sa = Smvf::load(&a)?.to_labels()?;
            let sb = Smvf::load(&b)?.to_labels()?;
            let labels = labels.unwrap_or_else(|| {
                let mut l: Vec<u32> = sa
                    .label_set()
                    .iter()
                    .chain(sb.label_set())
                    .copied()
                    .filter(|&l| l != 0)
                    .collect();
                l.sort_unstable();
                l.dedup();
                l
            });
            let u = warp
                .map(|w| Ok::<_, CliError>(DisplacementField(Smvf::load(&w)?.to_vector()?)))
                .transpose()?;
            let report =
                MetricReport::evaluate(&sa, &sb, &labels, sa.meta().spacing(), u.as_ref())?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| CliError::io(&path, e))?;
            }
            if let Some(path) = json {
                std::fs::write(&path, report.to_json()).map_err(|e| CliError::io(&path, e))?;
            }
            writeln!(stdout, "mean_dice {}", report.mean_dice)?;
        }
        Command::Jacobian { warp, out } => {
            let u = DisplacementField(Smvf::load(&warp)?.to_vector()?);
            let det = jacobian_det(&u);
            if let Some(path) = out {
                Smvf::from_scalar(&det).save(&path)?;
            }
            writeln!(stdout, "folding_fraction {}", folding_fraction(&u))?;
            writeln!(stdout, "mean_det {}", det.mean())?;
        }
        Command::ExportPng {
            input,
            out,
            channel,
            slice,
        } => {
            let file = Smvf::load(&input)?;
            let meta = file.meta()?;
            let values = file.values().into_iter().map(|v| v as f32).collect();
            let field = ScalarField::new(meta, file.header.channels, values)?;
            gray_png(&field, channel, slice)?
                .save_with_format(&out, image::ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => CliError::io(&out, io),
                    other => CliError::Format(other.to_string()),
                })?;
        }
    }
    Ok(())
}
