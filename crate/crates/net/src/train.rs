//! Inference helpers, the per-pair loss graph and the training loop.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};
use synreg_core::deform::{integrate_svf, DisplacementField, Svf};
use synreg_core::grid::{one_hot, resample_linear, GridMeta, ScalarField, VectorField};
use synreg_core::imagesynth::{sample_gmm, synthesize_image, synthesize_image_with_gmm};
use synreg_core::loss::{total_loss, LossReport};
use synreg_core::shapegen::{
    generate_shape_labels, pair_from_single_map, supervised_pair, ShapePair,
};
use synreg_core::{GenParams, RngStream};

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::state::{NetState, TrainSettings};
use crate::unet::{self, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice between warped moving and fixed one-hot labels.
    Dice,
    /// MSE between predicted and synthesized velocity.
    SupSvf,
    /// MSE between predicted and synthesized displacement.
    SupDef,
    /// Intensity MSE between warped moving and fixed image.
    ImageMse,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Dice,
        LossKind::SupSvf,
        LossKind::SupDef,
        LossKind::ImageMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::SupSvf => "sup_svf",
            LossKind::SupDef => "sup_def",
            LossKind::ImageMse => "image_mse",
        }
    }

    fn supervised(self) -> bool {
        matches!(self, LossKind::SupSvf | LossKind::SupDef)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NetError::Config(format!("unknown loss {s:?}")))
    }
}

/// One training pair: label maps with their synthesized images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub pair: ShapePair,
    pub m: ScalarField,
    pub f: ScalarField,
    /// Labels entering the Dice loss, `1..=J`.
    pub labels: Vec<u32>,
}

/// Draws a label map, a pair from it and one image per side. Supervised
/// losses use pairs with a known moving-to-fixed warp. For `ImageMse`
/// both images share one intensity model, since an intensity loss needs
/// matching contrasts.
pub fn synth_sample(
    rng: &mut RngStream,
    params: &GenParams,
    kind: LossKind,
) -> Result<TrainSample> {
    let s = generate_shape_labels(&mut rng.fork(), params)?;
    let pair = if kind.supervised() {
        supervised_pair(&mut rng.fork(), &s, params)?
    } else {
        pair_from_single_map(&mut rng.fork(), &s, params)?
    };
    let (mut rm, mut rf) = (rng.fork(), rng.fork());
    let (m, f) = if kind == LossKind::ImageMse {
        let mut labels: Vec<u32> = pair.s_m.label_set().to_vec();
        labels.extend_from_slice(pair.s_f.label_set());
        labels.sort_unstable();
        labels.dedup();
        let gmm = sample_gmm(&mut rng.fork(), &labels, params)?;
        (
            synthesize_image_with_gmm(&mut rm, &pair.s_m, params, gmm.clone())?.image,
            synthesize_image_with_gmm(&mut rf, &pair.s_f, params, gmm)?.image,
        )
    } else {
        (
            synthesize_image(&mut rm, &pair.s_m, params)?.image,
            synthesize_image(&mut rf, &pair.s_f, params)?.image,
        )
    };
    Ok(TrainSample {
        pair,
        m,
        f,
        labels: (1..=params.j as u32).collect(),
    })
}

/// Channel-last field data to channel-first.
pub fn channels_first<T: Real>(f: &ScalarField) -> Vec<T> {
    let (c, n) = (f.channels(), f.meta().num_voxels());
    let mut out = vec![T::zero(); c * n];
    for (v, chunk) in f.data().chunks_exact(c).enumerate() {
        for (ch, &x) in chunk.iter().enumerate() {
            out[ch * n + v] = T::of(x as f64);
        }
    }
    out
}

/// Channel-first tensor `[C, spatial..]` back to a channel-last field.
pub fn channels_last<T: Real>(data: &[T], shape: &[usize]) -> Result<ScalarField> {
    let meta = GridMeta::new(&shape[1..])?;
    let (c, n) = (shape[0], meta.num_voxels());
    let mut out = vec![0f32; c * n];
    for ch in 0..c {
        for v in 0..n {
            out[v * c + ch] = data[ch * n + v].as_f64() as f32;
        }
    }
    Ok(ScalarField::new(meta, c, out)?)
}

fn check_images(cfg: &UNetConfig, m: &ScalarField, f: &ScalarField) -> Result<()> {
    if m.dims() != f.dims() || m.channels() != 1 || f.channels() != 1 {
        return Err(NetError::Shape(format!(
            "images {:?}x{} and {:?}x{}",
            m.dims(),
            m.channels(),
            f.dims(),
            f.channels()
        )));
    }
    cfg.check_dims(m.dims())
}

/// Graph holding the network applied to one image pair.
struct NetGraph<T: Real> {
    g: Graph<T>,
    params: Vec<Var>,
    built: unet::Built,
}

fn net_graph<T: Real>(state: &NetState, m: &ScalarField, f: &ScalarField) -> Result<NetGraph<T>> {
    net_graph_with(state, &weights_as::<T>(state), m, f)
}

fn weights_as<T: Real>(state: &NetState) -> Vec<Vec<T>> {
    state
        .weights
        .iter()
        .map(|t| t.data.iter().map(|&v| T::of(v as f64)).collect())
        .collect()
}

fn net_graph_with<T: Real>(
    state: &NetState,
    weights: &[Vec<T>],
    m: &ScalarField,
    f: &ScalarField,
) -> Result<NetGraph<T>> {
    check_images(&state.config, m, f)?;
    let mut g = Graph::new();
    let params = state
        .weights
        .iter()
        .zip(weights)
        .map(|(t, w)| g.leaf(w.clone(), &t.shape))
        .collect::<Result<Vec<_>>>()?;
    let mut input: Vec<T> = channels_first(m);
    input.extend(channels_first::<T>(f));
    let mut shape = vec![2];
    shape.extend_from_slice(m.dims());
    let x = g.leaf(input, &shape)?;
    let built = unet::build(&mut g, &state.config, &params, x)?;
    Ok(NetGraph { g, params, built })
}

/// The network's SVF at half the input resolution.
pub fn forward(state: &NetState, m: &ScalarField, f: &ScalarField) -> Result<Svf> {
    let ng = net_graph::<f32>(state, m, f)?;
    let field = channels_last(ng.g.value(ng.built.svf), ng.g.shape(ng.built.svf))?;
    Ok(Svf(VectorField::from_scalar(field)?))
}

/// Upsamples a half-resolution displacement to `dims`, doubling vectors
/// so they stay in voxels of the finer grid.
pub fn upsample_displacement(u: &DisplacementField, dims: &[usize]) -> Result<DisplacementField> {
    let up = resample_linear(u.field().as_scalar(), dims)?;
    Ok(DisplacementField(VectorField::from_scalar(up)?.scale(2.0)?))
}

/// Full-resolution moving-to-fixed displacement.
pub fn predict_warp(
    state: &NetState,
    m: &ScalarField,
    f: &ScalarField,
) -> Result<DisplacementField> {
    let v = forward(state, m, f)?;
    let u = integrate_svf(&v, state.train.int_steps)?;
    upsample_displacement(&u, m.dims())
}

/// Activation of every layer, encoder first, ending with the SVF.
pub fn layer_activations(
    state: &NetState,
    m: &ScalarField,
    f: &ScalarField,
) -> Result<Vec<(String, ScalarField)>> {
    let ng = net_graph::<f32>(state, m, f)?;
    ng.built
        .activations
        .iter()
        .map(|(name, v)| Ok((name.clone(), channels_last(ng.g.value(*v), ng.g.shape(*v))?)))
        .collect()
}

/// Scaling and squaring inside the graph.
pub fn integrate_in_graph<T: Real>(g: &mut Graph<T>, v: Var, steps: usize) -> Result<Var> {
    let mut u = g.scale(v, 0.5f64.powi(steps as i32));
    for _ in 0..steps {
        let w = g.warp(u, u)?;
        u = g.add(u, w)?;
    }
    Ok(u)
}

pub(crate) struct LossGraph<T: Real> {
    pub g: Graph<T>,
    pub params: Vec<Var>,
    pub data: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

fn target_svf<T: Real>(v: &Svf, half: &[usize]) -> Result<Vec<T>> {
    // velocities in half-resolution voxels
    let low = resample_linear(v.field().as_scalar(), half)?.map(|x| 0.5 * x)?;
    Ok(channels_first(&low))
}

pub(crate) fn loss_graph<T: Real>(
    state: &NetState,
    weights: &[Vec<T>],
    sample: &TrainSample,
    kind: LossKind,
) -> Result<LossGraph<T>> {
    let NetGraph {
        mut g,
        params,
        built,
    } = net_graph_with(state, weights, &sample.m, &sample.f)?;
    let svf = built.svf;
    let full = sample.m.dims().to_vec();
    let supervised_truth = || {
        sample
            .pair
            .truth_u_net
            .as_ref()
            .ok_or_else(|| NetError::Config(format!("{kind} needs a pair with a known warp")))
    };
    if kind == LossKind::SupSvf {
        supervised_truth()?;
        let half = g.shape(svf)[1..].to_vec();
        let data = g.mse(svf, target_svf(&sample.pair.truth_v_f, &half)?)?;
        return Ok(LossGraph {
            g,
            params,
            data,
            reg: None,
            total: data,
        });
    }
    let u_half = integrate_in_graph(&mut g, svf, state.train.int_steps)?;
    let up = g.resize(u_half, &full)?;
    let u = g.scale(up, 2.0);
    let (data, reg) = match kind {
        LossKind::SupDef => {
            let truth = supervised_truth()?;
            (g.mse(u, channels_first(truth.field().as_scalar()))?, None)
        }
        LossKind::Dice => {
            let om = one_hot(&sample.pair.s_m, &sample.labels)?;
            let of = one_hot(&sample.pair.s_f, &sample.labels)?;
            let mut shape = vec![sample.labels.len()];
            shape.extend_from_slice(&full);
            let src = g.leaf(channels_first(&om), &shape)?;
            let moved = g.warp(src, u)?;
            (
                g.soft_dice(moved, channels_first(&of))?,
                Some(g.smoothness(u)?),
            )
        }
        LossKind::ImageMse => {
            let mut shape = vec![1];
            shape.extend_from_slice(&full);
            let src = g.leaf(channels_first(&sample.m), &shape)?;
            let moved = g.warp(src, u)?;
            (
                g.mse(moved, channels_first(&sample.f))?,
                Some(g.smoothness(u)?),
            )
        }
        LossKind::SupSvf => unreachable!(),
    };
    let total = match reg {
        Some(r) => g.weighted(data, r, 1.0, state.train.lambda_reg)?,
        None => data,
    };
    Ok(LossGraph {
        g,
        params,
        data,
        reg,
        total,
    })
}

fn report<T: Real>(lg: &LossGraph<T>, lambda_reg: f64) -> LossReport {
    let data = lg.g.scalar(lg.data).as_f64();
    let reg = lg.reg.map_or(0.0, |r| lg.g.scalar(r).as_f64());
    let lambda = if lg.reg.is_some() { lambda_reg } else { 0.0 };
    LossReport {
        total: lg.g.scalar(lg.total).as_f64(),
        ..total_loss(data, reg, lambda)
    }
}

/// Loss of the current weights on one sample, without updating.
pub fn evaluate_loss(state: &NetState, sample: &TrainSample, kind: LossKind) -> Result<LossReport> {
    let lg = loss_graph::<f32>(state, &weights_as(state), sample, kind)?;
    Ok(report(&lg, state.train.lambda_reg))
}

/// Forward, backward and one Adam update. A non-finite loss is reported
/// as divergence without touching the weights; a non-finite update drops
/// the learning rate (see [`NetState::adam_update`]).
pub fn train_step(
    state: &mut NetState,
    sample: &TrainSample,
    kind: LossKind,
) -> Result<LossReport> {
    let lg = loss_graph::<f32>(state, &weights_as(state), sample, kind)?;
    let rep = report(&lg, state.train.lambda_reg);
    let diverged = |reason: String| NetError::Divergence {
        iteration: state.train.iteration,
        reason,
    };
    if !rep.total.is_finite() {
        return Err(diverged(format!("loss {}", rep.total)));
    }
    let grads = lg.g.backward(lg.total);
    let grads: Vec<Vec<f32>> = lg
        .params
        .iter()
        .zip(&state.weights)
        .map(|(&p, t)| {
            grads
                .get(p)
                .map_or_else(|| vec![0.0; t.data.len()], <[f32]>::to_vec)
        })
        .collect();
    state.adam_update(&grads)?;
    state.train.iteration += 1;
    Ok(rep)
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub dice_term: f64,
    pub reg_term: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_trace<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| NetError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| NetError::Format(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub iterations: u64,
    pub kind: LossKind,
    pub settings: TrainSettings,
    /// Synthesize the next pair on a second thread while training.
    pub prefetch: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: NetState,
    pub trace: Vec<TraceRow>,
}

/// Stream of the weight initialization under the root seed.
pub const INIT_STREAM: u64 = 0;

/// Stream of training pair `i`; independent of iteration order, so a
/// prefetching producer draws exactly the same pairs.
pub fn sample_stream(root: &RngStream, i: u64) -> RngStream {
    root.split(1 + i)
}

/// Trains a fresh network on synthetic pairs drawn from `root`.
pub fn train(
    root: &RngStream,
    params: &GenParams,
    config: UNetConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    train_with(root, params, config, opts, |_, _| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    root: &RngStream,
    params: &GenParams,
    config: UNetConfig,
    opts: &TrainOptions,
    mut observe: impl FnMut(&NetState, &TraceRow),
) -> Result<TrainOutput> {
    params.validate()?;
    config.validate()?;
    config.check_dims(&params.dims)?;
    let settings = TrainSettings {
        lambda_reg: params.lambda_reg,
        int_steps: params.int_steps,
        ..opts.settings.clone()
    };
    let mut state = NetState::init(config, settings, &mut root.split(INIT_STREAM))?;
    let mut trace = Vec::with_capacity(opts.iterations as usize);
    let mut step = |state: &mut NetState, sample: Result<TrainSample>| -> Result<()> {
        let sample = sample?;
        let iteration = state.train.iteration;
        let rep = train_step(state, &sample, opts.kind)?;
        let row = TraceRow {
            iteration,
            dice_term: rep.dice_term,
            reg_term: rep.reg_term,
            total: rep.total,
            lr: state.train.lr,
        };
        observe(state, &row);
        trace.push(row);
        Ok(())
    };
    let draw = |i: u64| synth_sample(&mut sample_stream(root, i), params, opts.kind);
    if opts.prefetch {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<TrainSample>>(1);
            scope.spawn(move || {
                for i in 0..opts.iterations {
                    let s = draw(i);
                    let failed = s.is_err();
                    if tx.send(s).is_err() || failed {
                        break;
                    }
                }
            });
            for _ in 0..opts.iterations {
                let sample = rx
                    .recv()
                    .map_err(|_| NetError::Config("sample producer stopped".into()))?;
                step(&mut state, sample)?;
            }
            Ok(())
        })?;
    } else {
        for i in 0..opts.iterations {
            step(&mut state, draw(i))?;
        }
    }
    Ok(TrainOutput { state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use synreg_core::sampling::default_params;

    fn tiny() -> UNetConfig {
        UNetConfig {
            levels: 2,
            width: 4,
            ..UNetConfig::desk()
        }
    }

    fn images(dims: &[usize], seed: u64) -> (ScalarField, ScalarField) {
        let meta = GridMeta::new(dims).unwrap();
        let mut r = RngStream::from_seed(seed);
        let n = meta.num_voxels();
        let mut img = || {
            ScalarField::new(
                meta.clone(),
                1,
                (0..n).map(|_| r.next_f64() as f32).collect(),
            )
            .unwrap()
        };
        (img(), img())
    }

    #[test]
    fn zero_net_gives_zero_svf_and_warp() {
        let s = NetState::zeros(tiny(), TrainSettings::default()).unwrap();
        let (m, f) = images(&[16, 16], 1);
        let v = forward(&s, &m, &f).unwrap();
        assert_eq!(v.field().dims(), &[8, 8]);
        assert!(v.field().data().iter().all(|&x| x == 0.0));
        let u = predict_warp(&s, &m, &f).unwrap();
        assert_eq!(u.field().dims(), &[16, 16]);
        assert!(u.field().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn swapping_inputs_changes_output() {
        let s = NetState::init(
            tiny(),
            TrainSettings::default(),
            &mut RngStream::from_seed(2),
        )
        .unwrap();
        let (m, f) = images(&[16, 16], 3);
        assert_ne!(forward(&s, &m, &f).unwrap(), forward(&s, &f, &m).unwrap());
        assert!(forward(
            &s,
            &m,
            &ScalarField::zeros(GridMeta::new(&[16, 8]).unwrap(), 1)
        )
        .is_err());
        let (a, b) = images(&[10, 10], 3);
        assert!(matches!(forward(&s, &a, &b), Err(NetError::Shape(_))));
    }

    #[test]
    fn zero_steps_use_raw_svf() {
        let mut s = NetState::init(
            tiny(),
            TrainSettings::default(),
            &mut RngStream::from_seed(4),
        )
        .unwrap();
        s.train.int_steps = 0;
        let (m, f) = images(&[16, 16], 5);
        let v = forward(&s, &m, &f).unwrap();
        let want = upsample_displacement(&DisplacementField(v.0), &[16, 16]).unwrap();
        assert_eq!(predict_warp(&s, &m, &f).unwrap(), want);
    }

    #[test]
    fn activations_follow_topology() {
        let s = NetState::init(
            UNetConfig {
                width: 4,
                ..UNetConfig::desk()
            },
            TrainSettings::default(),
            &mut RngStream::from_seed(6),
        )
        .unwrap();
        let (m, f) = images(&[32, 32], 7);
        let acts = layer_activations(&s, &m, &f).unwrap();
        assert_eq!(acts.len(), 4 + 3 + 3 + 1);
        assert_eq!(acts.last().unwrap().1.channels(), 2);
        assert_eq!(acts[0].1.dims(), &[16, 16]);
        assert_eq!(acts[3].1.dims(), &[2, 2]);
        assert_eq!(acts, layer_activations(&s, &m, &f).unwrap());
    }

    #[test]
    fn graph_warp_agrees_with_inference_path() {
        let s = NetState::init(
            tiny(),
            TrainSettings::default(),
            &mut RngStream::from_seed(8),
        )
        .unwrap();
        let mut s = s;
        // enlarge the output layer so the warp is not trivially small
        for v in s.weights.iter_mut().rev().nth(1).unwrap().data.iter_mut() {
            *v *= 300.0;
        }
        let p = GenParams {
            j: 4,
            ..default_params(&[16, 16])
        };
        let sample = synth_sample(&mut RngStream::from_seed(9), &p, LossKind::SupDef).unwrap();
        let lg = loss_graph::<f64>(&s, &weights_as(&s), &sample, LossKind::SupDef).unwrap();
        let u = predict_warp(&s, &sample.m, &sample.f).unwrap();
        let truth = sample.pair.truth_u_net.as_ref().unwrap();
        let core = synreg_core::loss::mse_field_loss(u.field(), truth.field()).unwrap();
        assert!(u.field().data().iter().any(|x| x.abs() > 0.1));
        assert!((lg.g.scalar(lg.total) - core).abs() < 1e-4 * core.max(1e-3));
    }

    #[test]
    fn dice_loss_matches_core_at_identity() {
        let s = NetState::zeros(tiny(), TrainSettings::default()).unwrap();
        let p = GenParams {
            j: 4,
            ..default_params(&[16, 16])
        };
        let sample = synth_sample(&mut RngStream::from_seed(10), &p, LossKind::Dice).unwrap();
        let rep = evaluate_loss(&s, &sample, LossKind::Dice).unwrap();
        let om = one_hot(&sample.pair.s_m, &sample.labels).unwrap();
        let of = one_hot(&sample.pair.s_f, &sample.labels).unwrap();
        let want = synreg_core::loss::soft_dice_loss(&om, &of).unwrap();
        assert!((rep.dice_term - want).abs() < 1e-6);
        assert_eq!(rep.reg_term, 0.0);
        assert!(rep.dice_term >= -1.0);
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("ncc".parse::<LossKind>().is_err());
    }

    #[test]
    fn supervised_losses_need_known_warp() {
        let s = NetState::zeros(tiny(), TrainSettings::default()).unwrap();
        let p = GenParams {
            j: 3,
            ..default_params(&[16, 16])
        };
        let sample = synth_sample(&mut RngStream::from_seed(11), &p, LossKind::Dice).unwrap();
        assert!(evaluate_loss(&s, &sample, LossKind::SupSvf).is_err());
        assert!(evaluate_loss(&s, &sample, LossKind::SupDef).is_err());
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let mut s = NetState::init(
            tiny(),
            TrainSettings::default(),
            &mut RngStream::from_seed(12),
        )
        .unwrap();
        let p = GenParams {
            j: 3,
            ..default_params(&[16, 16])
        };
        let sample = synth_sample(&mut RngStream::from_seed(13), &p, LossKind::ImageMse).unwrap();
        s.weights[0].data[0] = f32::INFINITY;
        let before = s.clone();
        assert!(matches!(
            train_step(&mut s, &sample, LossKind::ImageMse),
            Err(NetError::Divergence { .. })
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            TraceRow {
                iteration: 0,
                dice_term: -0.25,
                reg_term: 0.125,
                total: -0.125,
                lr: 1e-4,
            },
            TraceRow {
                iteration: 1,
                dice_term: -0.3,
                reg_term: 0.1,
                total: -0.2,
                lr: 1e-5,
            },
        ];
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iteration,dice_term,reg_term,total,lr\n"));
        assert_eq!(read_trace(&buf[..]).unwrap(), rows);
    }
}
