//! Central finite-difference checks of analytic gradients.
//!
//! Non-scalar outputs are reduced to a scalar with a fixed random
//! projection, `L = Σ r ⊙ f(x)`, so every output element contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{
    batchnorm, conv3d, maxpool2, upsample_trilinear2, BatchNormSettings, Bottleneck, Ctx, DenseNetBlock, Mode,
    ParamStore, ResNetBlock, RunningStats,
};
use crate::tensor::{add, concat_channels, mul, relu, softmax_channels, sum, Tape, Tensor, Var};
use crate::train::{bce_loss, dice_loss, total_loss};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this count as this in the relative-error denominator,
/// so gradients that are zero up to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst agreement over the checked entries of one input or parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GroupResult {
    fn new(name: impl Into<String>) -> Self {
        GroupResult {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || !e.is_finite() {
            self.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOLERANCE
    }
}

pub fn max_error(groups: &[GroupResult]) -> f64 {
    groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Scalar objective `Σ r ⊙ f(inputs)` for a differentiable function.
pub type OpFn = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

fn projected(tape: &Tape, f: &OpFn, inputs: &[Var], proj: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> Result<Var> {
    let y = f(tape, inputs)?;
    let shape = tape.shape(y)?;
    if shape.iter().product::<usize>() == 1 {
        return Ok(y);
    }
    let r = proj.get_or_insert_with(|| normal_tensor(&shape, rng)).clone();
    let r = tape.constant(r);
    sum(tape, mul(tape, y, r)?)
}

/// Checks every entry of every input of `f` at `inputs`.
pub fn check_function(names: &[&str], inputs: &[Tensor], f: &OpFn, seed: u64) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = None;

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = projected(&tape, f, &vars, &mut proj, &mut rng)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor], proj: &mut Option<Tensor>, rng: &mut ChaCha8Rng| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = projected(&tape, f, &vars, proj, rng)?;
        tape.value(l)?.item()
    };

    let mut out = Vec::new();
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(*var).ok_or_else(|| Error::contract("missing gradient"))?.clone();
        let mut group = GroupResult::new(names.get(k).copied().unwrap_or("input"));
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&xs, &mut proj, &mut rng)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&xs, &mut proj, &mut rng)?;
            xs[k].data_mut()[i] = orig;
            group.record(g.data()[i], (plus - minus) / (2.0 * FD_STEP));
        }
        out.push(group);
    }
    Ok(out)
}

/// A randomly generated gradient-check case for one operation.
pub struct OpCase {
    pub names: Vec<&'static str>,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

type CaseBuilder = fn(&mut ChaCha8Rng) -> OpCase;

fn dims(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(1..=max))
}

fn even_dims(rng: &mut ChaCha8Rng, max_half: usize) -> [usize; 3] {
    [0; 3].map(|_| 2 * rng.random_range(1..=max_half))
}

/// Values whose magnitude is at least `gap`, keeping kinks out of reach of
/// the finite-difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } + *v;
        }
    }
    t
}

/// Distinct values at least `gap` apart in random order.
fn distinct(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn probabilities(n: usize, s: [usize; 3], rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let vol = s.iter().product::<usize>();
    let mut q = Vec::with_capacity(2 * n * vol);
    let lesion: Vec<f64> = (0..n * vol).map(|_| rng.random_range(0.01..0.99)).collect();
    for b in 0..n {
        q.extend(lesion[b * vol..(b + 1) * vol].iter().map(|p| 1.0 - p));
        q.extend_from_slice(&lesion[b * vol..(b + 1) * vol]);
    }
    let target = (0..n * vol).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    (
        Tensor::new(vec![n, 2, s[0], s[1], s[2]], q).expect("shape"),
        Tensor::new(vec![n, 1, s[0], s[1], s[2]], target).expect("shape"),
    )
}

/// Two-channel probabilities strictly inside (0, 1) with a random binary target.
fn loss_case(rng: &mut ChaCha8Rng, loss: fn(&Tape, Var, &Tensor) -> Result<Var>) -> OpCase {
    let s = dims(rng, 3);
    let n = rng.random_range(1..=2);
    let (q, target) = probabilities(n, s, rng);
    OpCase {
        names: vec!["q"],
        inputs: vec![q],
        f: Box::new(move |t, v| loss(t, v[0], &target)),
    }
}

fn store_case(
    rng: &mut ChaCha8Rng,
    x_shape: [usize; 5],
    mode: Mode,
    build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>>,
) -> OpCase {
    let mut store = ParamStore::new();
    let layer = build(&mut store, rng);
    for p in &mut store.params {
        p.value = normal_tensor(p.value.shape(), rng);
    }
    for (_, s) in &mut store.stats {
        for (m, v) in s.mean.iter_mut().zip(&mut s.var) {
            *m = rng.random_range(-0.5..0.5);
            *v = rng.random_range(0.5..2.0);
        }
    }
    let mut names = vec!["x"];
    let mut inputs = vec![away_from_zero(&x_shape, 1e-2, rng)];
    for p in &store.params {
        names.push(Box::leak(p.name.clone().into_boxed_str()));
        inputs.push(p.value.clone());
    }
    let f: OpFn = Box::new(move |tape, v| {
        let mut s = store.clone();
        let mut ctx = Ctx::with_vars(tape, &mut s, v[1..].to_vec(), mode, BatchNormSettings::default())?;
        layer(&mut ctx, v[0])
    });
    OpCase { names, inputs, f }
}

/// Every differentiable operation with a generator of random cases.
pub fn op_suite() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("add", |rng| {
            let s = [2, 3].map(|_| rng.random_range(1..=4));
            OpCase {
                names: vec!["a", "b"],
                inputs: vec![normal_tensor(&s, rng), normal_tensor(&s, rng)],
                f: Box::new(|t, v| add(t, v[0], v[1])),
            }
        }),
        ("mul", |rng| {
            let s = [rng.random_range(1..=6)];
            OpCase {
                names: vec!["a", "b"],
                inputs: vec![normal_tensor(&s, rng), normal_tensor(&s, rng)],
                f: Box::new(|t, v| mul(t, v[0], v[1])),
            }
        }),
        ("sum", |rng| {
            let s = [rng.random_range(1..=3), rng.random_range(1..=3)];
            OpCase {
                names: vec!["x"],
                inputs: vec![normal_tensor(&s, rng)],
                f: Box::new(|t, v| sum(t, v[0])),
            }
        }),
        ("relu", |rng| {
            let s = [rng.random_range(1..=10)];
            OpCase {
                names: vec!["x"],
                inputs: vec![away_from_zero(&s, 1e-3, rng)],
                f: Box::new(|t, v| relu(t, v[0])),
            }
        }),
        ("concat_channels", |rng| {
            let s = dims(rng, 2);
            let (ca, cb) = (rng.random_range(1..=3), rng.random_range(0..=3));
            let n = rng.random_range(1..=2);
            OpCase {
                names: vec!["a", "b"],
                inputs: vec![
                    normal_tensor(&[n, ca, s[0], s[1], s[2]], rng),
                    normal_tensor(&[n, cb, s[0], s[1], s[2]], rng),
                ],
                f: Box::new(|t, v| concat_channels(t, v[0], v[1])),
            }
        }),
        ("softmax_channels", |rng| {
            let s = dims(rng, 2);
            let c = rng.random_range(2..=3);
            OpCase {
                names: vec!["z"],
                inputs: vec![normal_tensor(&[1, c, s[0], s[1], s[2]], rng)],
                f: Box::new(|t, v| softmax_channels(t, v[0])),
            }
        }),
        ("conv3d_k3", |rng| {
            let s = dims(rng, 3);
            let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3));
            OpCase {
                names: vec!["x", "weight", "bias"],
                inputs: vec![
                    normal_tensor(&[1, ci, s[0], s[1], s[2]], rng),
                    normal_tensor(&[co, ci, 3, 3, 3], rng),
                    normal_tensor(&[co], rng),
                ],
                f: Box::new(|t, v| conv3d(t, v[0], v[1], Some(v[2]))),
            }
        }),
        ("conv3d_k1", |rng| {
            let s = dims(rng, 3);
            let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=4));
            OpCase {
                names: vec!["x", "weight"],
                inputs: vec![
                    normal_tensor(&[2, ci, s[0], s[1], s[2]], rng),
                    normal_tensor(&[co, ci, 1, 1, 1], rng),
                ],
                f: Box::new(|t, v| conv3d(t, v[0], v[1], None)),
            }
        }),
        ("batchnorm_train", |rng| {
            let c = rng.random_range(1..=3);
            let s = [rng.random_range(2..=3), 2, rng.random_range(2..=3)];
            bn_case(rng, c, s, Mode::Train)
        }),
        ("batchnorm_eval", |rng| {
            let c = rng.random_range(1..=3);
            let s = dims(rng, 3);
            bn_case(rng, c, s, Mode::Eval)
        }),
        ("maxpool2", |rng| {
            let s = even_dims(rng, 2);
            let c = rng.random_range(1..=2);
            OpCase {
                names: vec!["x"],
                inputs: vec![distinct(&[1, c, s[0], s[1], s[2]], 1e-2, rng)],
                f: Box::new(|t, v| maxpool2(t, v[0])),
            }
        }),
        ("upsample_trilinear2", |rng| {
            let s = dims(rng, 3);
            OpCase {
                names: vec!["x"],
                inputs: vec![normal_tensor(&[1, rng.random_range(1..=2), s[0], s[1], s[2]], rng)],
                f: Box::new(|t, v| upsample_trilinear2(t, v[0])),
            }
        }),
        ("bce_loss", |rng| loss_case(rng, bce_loss)),
        ("dice_loss", |rng| loss_case(rng, dice_loss)),
        ("total_loss", |rng| loss_case(rng, total_loss)),
        ("bottleneck", |rng| {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let s = even_dims(rng, 2);
            store_case(rng, [1, ci, s[0], s[1], s[2]], Mode::Train, |st, r| {
                let b = Bottleneck::new(st, "b", ci, co, r);
                Box::new(move |ctx, x| b.forward(ctx, x))
            })
        }),
        ("resnet_block", |rng| {
            let c = rng.random_range(1..=2);
            let s = even_dims(rng, 2);
            store_case(rng, [1, c, s[0], s[1], s[2]], Mode::Train, |st, r| {
                let b = ResNetBlock::new(st, "r", c, r);
                Box::new(move |ctx, x| b.forward(ctx, x))
            })
        }),
        ("densenet_block", |rng| {
            let (c, g) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let s = even_dims(rng, 2);
            store_case(rng, [1, c, s[0], s[1], s[2]], Mode::Train, |st, r| {
                let b = DenseNetBlock::new(st, "d", c, g, r);
                Box::new(move |ctx, x| b.forward(ctx, x))
            })
        }),
    ]
}

fn bn_case(rng: &mut ChaCha8Rng, c: usize, s: [usize; 3], mode: Mode) -> OpCase {
    let mut stats = RunningStats::new(c);
    for (m, v) in stats.mean.iter_mut().zip(&mut stats.var) {
        *m = rng.random_range(-0.5..0.5);
        *v = rng.random_range(0.5..2.0);
    }
    OpCase {
        names: vec!["x", "gamma", "beta"],
        inputs: vec![
            normal_tensor(&[1, c, s[0], s[1], s[2]], rng),
            normal_tensor(&[c], rng),
            normal_tensor(&[c], rng),
        ],
        f: Box::new(move |t, v| {
            let mut st = stats.clone();
            batchnorm(t, v[0], v[1], v[2], &mut st, BatchNormSettings::default(), mode)
        }),
    }
}

/// Result of [`check_ops`] for one operation.
#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// `trials` random cases of every operation in [`op_suite`].
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    op_suite()
        .into_iter()
        .enumerate()
        .map(|(k, (op, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let case = build(&mut rng);
                let groups = check_function(&case.names, &case.inputs, &case.f, seed.wrapping_add(trial as u64))?;
                worst = worst.max(max_error(&groups));
            }
            Ok(OpReport {
                op,
                trials,
                max_rel_err: worst,
            })
        })
        .collect()
}

/// Options for [`check_model`].
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub input_side: usize,
    /// Entries checked per parameter array; `None` checks every entry.
    pub entries_per_param: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub step: f64,
    /// Only parameters whose name starts with this prefix.
    pub prefix: Option<String>,
    /// Also check one random direction over all entries of each array.
    pub directional: bool,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck {
            input_side: 8,
            entries_per_param: Some(8),
            seed: 0,
            mode: Mode::Train,
            step: FD_STEP,
            prefix: None,
            directional: false,
        }
    }
}

/// Moves a freshly initialized store off the zero biases and unit scales.
///
/// With zero biases and shifts, pre-activation stages map every input
/// voxel that an earlier ReLU zeroed to exactly zero, which puts the next
/// ReLU on its kink and makes the finite difference meaningless there.
fn generic_point(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in &mut store.params {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v += 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        } else if p.name.ends_with(".gamma") {
            for v in p.value.data_mut() {
                *v *= 1.0 + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        }
    }
    for (_, s) in &mut store.stats {
        for (m, v) in s.mean.iter_mut().zip(&mut s.var) {
            *m = rng.random_range(-0.5..0.5);
            *v = rng.random_range(0.5..2.0);
        }
    }
}

/// Checks the gradient of the training loss with respect to every parameter
/// array of a freshly built model, moved to a generic parameter point, on a
/// random `(1, 1, s, s, s)` input. With `directional`, every array is also
/// checked along one random direction covering all of its entries.
pub fn check_model(cfg: &ModelConfig, opts: &ModelCheck) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = Model::build(cfg, opts.seed)?;
    model.set_mode(opts.mode);
    generic_point(model.params_mut(), &mut rng);
    let s = opts.input_side;
    let x = normal_tensor(&[1, cfg.input_channels, s, s, s], &mut rng);
    let target = Tensor::new(
        vec![1, 1, s, s, s],
        (0..s * s * s).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
    )?;

    let loss_of = |m: &mut Model| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (q, _) = m.forward(&tape, xv)?;
        tape.value(total_loss(&tape, q, &target)?)?.item()
    };

    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (q, vars) = model.forward(&tape, xv)?;
    let loss = total_loss(&tape, q, &target)?;
    let mut grads = tape.backward(loss)?;
    model.params_mut().set_grads(&vars, &mut grads)?;

    let mut probe = model.clone();
    let mut out = Vec::new();
    for pi in 0..model.params().params.len() {
        let p = &model.params().params[pi];
        if opts.prefix.as_ref().is_some_and(|pre| !p.name.starts_with(pre.as_str())) {
            continue;
        }
        let g = p.grad.clone().expect("set above");
        let n = p.value.len();
        let mut group = GroupResult::new(p.name.clone());
        let picks: Vec<usize> = match opts.entries_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = p.value.data()[i];
            probe.params_mut().params[pi].value.data_mut()[i] = orig + opts.step;
            let plus = loss_of(&mut probe)?;
            probe.params_mut().params[pi].value.data_mut()[i] = orig - opts.step;
            let minus = loss_of(&mut probe)?;
            probe.params_mut().params[pi].value.data_mut()[i] = orig;
            group.record(g.data()[i], (plus - minus) / (2.0 * opts.step));
        }
        if !opts.directional {
            out.push(group);
            continue;
        }
        let dir = normal_tensor(p.value.shape(), &mut rng);
        let analytic: f64 = dir.data().iter().zip(g.data()).map(|(d, g)| d * g).sum();
        let shifted = |sign: f64, probe: &mut Model| {
            let dst = probe.params_mut().params[pi].value.data_mut();
            for ((w, o), d) in dst.iter_mut().zip(p.value.data()).zip(dir.data()) {
                *w = o + sign * opts.step * d;
            }
        };
        shifted(1.0, &mut probe);
        let plus = loss_of(&mut probe)?;
        shifted(-1.0, &mut probe);
        let minus = loss_of(&mut probe)?;
        probe.params_mut().params[pi].value = p.value.clone();
        group.record(analytic, (plus - minus) / (2.0 * opts.step));
        out.push(group);
    }
    Ok(out)
}
