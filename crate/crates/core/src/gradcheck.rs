//! Central finite differences, used to cross-check the reverse pass, and the
//! per-op gradient suite built on them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{self, EncodingBlock, FusionVariant, FusionWeightBlock, Projection};
use crate::graph::{Graph, Var};
use crate::network::{DualBranchSegNet, ModelConfig};
use crate::param::ParamStore;
use crate::phantom::{self, CountRange, PhantomSpec};
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Relative tolerance used by the gradient suites.
pub const GRAD_RTOL: f64 = 1e-3;
/// Absolute floor below which a discrepancy is always accepted.
pub const GRAD_ATOL: f64 = 1e-6;
/// Step used for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Step used by the gradient suite where kinks are unavoidable.
pub const KINKED_FD_STEP: f64 = 1e-6;

/// `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every element of parameter
/// `name`. Works on a private copy of `params`; grad buffers are untouched.
pub fn finite_diff_grad<T, F>(
    mut f: F,
    params: &ParamStore<T>,
    name: &str,
    h: f64,
) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let shape = work.get(name)?.value.shape().to_vec();
    let len = work.get(name)?.value.len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let orig = work.get(name)?.value.data()[i];
        work.get_mut(name)?.value.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let plus = f(&work)?.as_f64();
        work.get_mut(name)?.value.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let minus = f(&work)?.as_f64();
        work.get_mut(name)?.value.data_mut()[i] = orig;
        out.push(T::from_f64((plus - minus) / (2.0 * h)));
    }
    Tensor::new(shape, out)
}

/// Central difference for selected flat indices only.
pub fn finite_diff_at<T, F>(
    mut f: F,
    params: &ParamStore<T>,
    name: &str,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = work.get(name)?.value.data()[i];
        work.get_mut(name)?.value.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let plus = f(&work)?.as_f64();
        work.get_mut(name)?.value.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let minus = f(&work)?.as_f64();
        work.get_mut(name)?.value.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Discrepancy between an analytic and a numeric derivative, scaled so that
/// a value `<= GRAD_RTOL` means "within relative tolerance, or within the
/// absolute floor".
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_ATOL / GRAD_RTOL);
    (analytic - numeric).abs() / scale
}

/// Worst gradient discrepancy seen for one op.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    /// Derivative entries compared.
    pub entries: usize,
    /// Largest [`scaled_error`] over all entries.
    pub max_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_RTOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    /// Spatial edge of the per-op inputs; must be even. The network case
    /// always runs at 8³.
    pub size: usize,
    pub trials: usize,
    /// Entries compared per parameter tensor per trial.
    pub entries_per_param: usize,
    pub step: f64,
    /// Step for cases with many ReLU and max-pool kinks inside (the residual
    /// block and the network). A step of 1e-3 crosses some kink on most
    /// trials; 1e-5 still does on a few.
    pub kinked_step: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            size: 6,
            trials: 100,
            entries_per_param: 3,
            step: FD_STEP,
            kinked_step: KINKED_FD_STEP,
            seed: 0,
        }
    }
}

/// Ops covered by [`run_suite`], in report order.
pub const SUITE_OPS: [&str; 18] = [
    "conv3d",
    "conv3d_strided",
    "conv1x1x1",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "instance_norm",
    "down2",
    "up2",
    "concat",
    "softmax",
    "dice_loss",
    "residual_plain",
    "fuse_direct",
    "fuse_weighted",
    "network",
];

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    store: ParamStore<f64>,
    loss: LossFn,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Normal values pushed at least 0.05 away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v.signum() * (0.05 + v.abs())
    })
}

/// Distinct values spaced 0.01 apart in random order, so that no
/// finite-difference step can change a max-pool winner.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for (name, value) in entries {
        store.insert(name, value, true)?;
    }
    Ok(store)
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.input(r.clone())?;
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// A case applying `f` to the named parameters and projecting the output.
fn projected(
    rng: &mut ChaCha8Rng,
    store: ParamStore<f64>,
    out_shape: &[usize],
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'static,
) -> Case {
    let r = normal(rng, out_shape, 1.0);
    Case {
        store,
        loss: Box::new(move |g, p| {
            let out = f(g, p)?;
            project(g, out, &r)
        }),
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    make: impl FnOnce(&mut ChaCha8Rng) -> Tensor<f64>,
    out_shape: &[usize],
    f: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<Case> {
    let store = store_of(vec![("x", make(rng))])?;
    Ok(projected(rng, store, out_shape, move |g, p| {
        let x = g.param(p, "x")?;
        f(g, x)
    }))
}

/// Small phantom for the network case; falls back to random labels if
/// placement fails at this size.
fn tiny_phantom(seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<u8>) {
    let spec = PhantomSpec {
        size: [8, 8, 8],
        lesion_count: CountRange::new(1, 1),
        cyst_count: CountRange::new(0, 0),
        gland_count: CountRange::new(0, 1),
        radius_range: [1.2, 1.8],
        axis_ratio_range: [0.8, 1.2],
        ..PhantomSpec::default()
    };
    match phantom::generate(&spec, seed) {
        Ok(s) => {
            let shape = [1, 1, 8, 8, 8];
            (
                s.pre.cast::<f64>().reshape(shape).expect("512 voxels"),
                s.post.cast::<f64>().reshape(shape).expect("512 voxels"),
                s.labels.lesion_target(),
            )
        }
        Err(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pre = normal(&mut rng, &[1, 1, 8, 8, 8], 1.0);
            let post = normal(&mut rng, &[1, 1, 8, 8, 8], 1.0);
            let t = (0..512).map(|_| rng.random_range(0..2)).collect();
            (pre, post, t)
        }
    }
}

fn build_case(op: &str, rng: &mut ChaCha8Rng, s: usize, trial: usize) -> Result<Case> {
    let vol = [s, s, s];
    let sh = |n: usize, c: usize| vec![n, c, vol[0], vol[1], vol[2]];
    Ok(match op {
        "conv3d" | "conv3d_strided" => {
            let stride = if op == "conv3d" { 1 } else { 2 };
            let o = (s + 2 - 3) / stride + 1;
            let store = store_of(vec![
                ("x", normal(rng, &sh(2, 2), 1.0)),
                ("w", normal(rng, &[3, 2, 3, 3, 3], 0.3)),
                ("b", normal(rng, &[3], 1.0)),
            ])?;
            projected(rng, store, &[2, 3, o, o, o], move |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                g.conv3d(x, w, Some(b), stride, 1)
            })
        }
        "conv1x1x1" => {
            let store = store_of(vec![
                ("x", normal(rng, &sh(2, 4), 1.0)),
                ("w", normal(rng, &[3, 4, 1, 1, 1], 0.5)),
                ("b", normal(rng, &[3], 1.0)),
            ])?;
            projected(rng, store, &sh(2, 3), |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                g.conv1x1x1(x, w, b)
            })
        }
        "relu" => unary(
            rng,
            |r| off_kink(r, &sh(1, 2)),
            &sh(1, 2),
            |g, x| Ok(g.relu(x)),
        )?,
        "sigmoid" => unary(
            rng,
            |r| normal(r, &sh(1, 2), 2.0),
            &sh(1, 2),
            |g, x| Ok(g.sigmoid(x)),
        )?,
        "scale" => unary(
            rng,
            |r| normal(r, &sh(1, 2), 1.0),
            &sh(1, 2),
            |g, x| g.scale(x, 1.7),
        )?,
        "add" | "mul" | "concat" => {
            let cy = if op == "concat" { 3 } else { 2 };
            let store = store_of(vec![
                ("x", normal(rng, &sh(1, 2), 1.0)),
                ("y", normal(rng, &sh(1, cy), 1.0)),
            ])?;
            let out = if op == "concat" { sh(1, 5) } else { sh(1, 2) };
            let op = op.to_owned();
            projected(rng, store, &out, move |g, p| {
                let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
                match op.as_str() {
                    "add" => g.add(x, y),
                    "mul" => g.mul(x, y),
                    _ => g.concat_channels(x, y),
                }
            })
        }
        "instance_norm" => {
            let store = store_of(vec![
                ("x", normal(rng, &sh(2, 3), 1.5)),
                ("gamma", normal(rng, &[3], 1.0)),
                ("beta", normal(rng, &[3], 1.0)),
            ])?;
            projected(rng, store, &sh(2, 3), |g, p| {
                let (x, gm, bt) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
                g.instance_norm(x, gm, bt, fusion::NORM_EPS)
            })
        }
        "down2" => {
            let h = s / 2;
            unary(
                rng,
                |r| separated(r, &sh(1, 2)),
                &[1, 2, h, h, h],
                |g, x| g.down2(x),
            )?
        }
        "up2" => {
            let h = s / 2;
            unary(
                rng,
                |r| normal(r, &[1, 2, h, h, h], 1.0),
                &sh(1, 2),
                |g, x| g.up2(x),
            )?
        }
        "softmax" => unary(
            rng,
            |r| normal(r, &sh(1, 3), 2.0),
            &sh(1, 3),
            |g, x| g.channel_softmax(x),
        )?,
        "dice_loss" => {
            let store = store_of(vec![("x", normal(rng, &sh(2, 3), 2.0))])?;
            let targets: Vec<u8> = (0..2 * s * s * s).map(|_| rng.random_range(0..3)).collect();
            Case {
                store,
                loss: Box::new(move |g, p| {
                    let x = g.param(p, "x")?;
                    g.dice_loss(x, &targets, 1e-5)
                }),
            }
        }
        "residual_plain" => {
            let block = EncodingBlock::new("blk", 2, 3);
            let proj = Projection::new("proj", 2, 3);
            let mut store = store_of(vec![("x", normal(rng, &sh(1, 2), 1.0))])?;
            block.init(&mut store, rng)?;
            proj.init(&mut store, rng, true)?;
            perturb(&mut store, rng, 0.2);
            projected(rng, store, &sh(1, 3), move |g, p| {
                let x = g.param(p, "x")?;
                fusion::residual_plain(g, p, x, &block, Some(&proj))
            })
        }
        "fuse_direct" => {
            let store = store_of(vec![
                ("main", normal(rng, &sh(1, 3), 1.0)),
                ("aux", normal(rng, &sh(1, 3), 1.0)),
            ])?;
            projected(rng, store, &sh(1, 3), |g, p| {
                let (m, a) = (g.param(p, "main")?, g.param(p, "aux")?);
                fusion::fuse_direct(g, m, a)
            })
        }
        "fuse_weighted" => {
            let fw = FusionWeightBlock::new("fw", 3);
            let store = store_of(vec![
                ("main", normal(rng, &sh(1, 3), 1.0)),
                ("aux", normal(rng, &sh(1, 3), 1.0)),
                ("fw.weight", normal(rng, &[3, 3, 1, 1, 1], 0.7)),
                ("fw.bias", normal(rng, &[3], 1.0)),
            ])?;
            projected(rng, store, &sh(1, 3), move |g, p| {
                let (m, a) = (g.param(p, "main")?, g.param(p, "aux")?);
                fusion::fuse_weighted(g, p, m, a, &fw)
            })
        }
        "network" => {
            let variant = [
                FusionVariant::PlainResidual,
                FusionVariant::DirectAdd,
                FusionVariant::WeightedAdd,
            ][trial % 3];
            let net = DualBranchSegNet::<f64>::build(ModelConfig {
                levels: 2,
                base_channels: 2,
                variant,
                seed: rng.random(),
                ..ModelConfig::default()
            })?;
            let mut store = net.params.clone();
            perturb(&mut store, rng, 0.1);
            let (pre, post, targets) = tiny_phantom(rng.random());
            Case {
                store,
                loss: Box::new(move |g, p| {
                    let pre = g.input(pre.clone())?;
                    let post = g.input(post.clone())?;
                    let logits = net.forward_graph(g, p, pre, post)?;
                    g.dice_loss(logits, &targets, 1e-5)
                }),
            }
        }
        other => return Err(Error::arg("gradcheck", format!("unknown op `{other}`"))),
    })
}

/// Adds `N(0, std²)` noise to every trainable parameter so that zero or
/// identity initializations do not hide gradient paths.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Compares reverse-mode and central-difference derivatives on sampled
/// entries of every trainable parameter; returns (entries, max error).
fn check_case(
    case: Case,
    rng: &mut ChaCha8Rng,
    entries_per_param: usize,
    step: f64,
) -> Result<(usize, f64)> {
    let Case { store, loss } = case;
    let mut analytic = store.clone();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic)?;
    g.backward(l, &mut analytic)?;
    drop(g);
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };
    let mut entries = 0;
    let mut worst = 0.0f64;
    for p in analytic.iter().filter(|p| p.trainable) {
        let len = p.value.len();
        let all: Vec<usize> = (0..len).collect();
        let picked: Vec<usize> = all
            .choose_multiple(rng, entries_per_param.min(len))
            .copied()
            .collect();
        let numeric = finite_diff_at(eval, &store, &p.name, &picked, step)?;
        let grad = p.value.grad();
        for (&i, n) in picked.iter().zip(numeric) {
            let a = grad.map_or(0.0, |g| g[i]);
            worst = worst.max(scaled_error(a, n));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn op_index(op: &str) -> Result<usize> {
    SUITE_OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::arg("gradcheck", format!("unknown op `{op}`")))
}

/// Cases with ReLU or max-pool kinks inside that random inputs cannot avoid.
fn is_kinked(op: &str) -> bool {
    matches!(op, "residual_plain" | "network")
}

/// One trial of one op; returns (entries compared, max error).
pub fn check_trial(op: &str, cfg: &SuiteConfig, trial: usize) -> Result<(usize, f64)> {
    let index = op_index(op)?;
    if cfg.size < 2 || !cfg.size.is_multiple_of(2) {
        return Err(Error::arg(
            "gradcheck",
            format!("size must be even and at least 2, got {}", cfg.size),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
        seed::derive(cfg.seed, index as u64),
        trial as u64,
    ));
    let case = build_case(op, &mut rng, cfg.size, trial)?;
    let step = if is_kinked(op) {
        cfg.kinked_step
    } else {
        cfg.step
    };
    check_case(case, &mut rng, cfg.entries_per_param, step)
}

/// All trials of one op.
pub fn check_op(op: &str, cfg: &SuiteConfig) -> Result<OpCheck> {
    let mut check = OpCheck {
        op: SUITE_OPS[op_index(op)?],
        trials: cfg.trials,
        entries: 0,
        max_error: 0.0,
    };
    for trial in 0..cfg.trials {
        let (n, worst) = check_trial(op, cfg, trial)?;
        check.entries += n;
        check.max_error = check.max_error.max(worst);
    }
    Ok(check)
}

/// Runs every op in [`SUITE_OPS`].
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    SUITE_OPS.iter().map(|op| check_op(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "theta",
            Tensor::new(vec![values.len()], values).unwrap(),
            true,
        )
        .unwrap();
        s
    }

    #[test]
    fn sum_of_squares() {
        let s = store(vec![1.0, 2.0]);
        let g = finite_diff_grad(
            |p| Ok(p.get("theta")?.value.data().iter().map(|v| v * v).sum()),
            &s,
            "theta",
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let s = store(vec![0.3, -0.7, 5.0]);
        let g = finite_diff_grad(|_| Ok(4.2), &s, "theta", 1e-3).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn leaves_grad_buffers_alone() {
        let mut s = store(vec![1.0]);
        s.get_mut("theta").unwrap().value.accumulate_grad(&[9.0]);
        let before = s.clone();
        finite_diff_grad(|p| Ok(p.get("theta")?.value.data()[0]), &s, "theta", 1e-3).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn every_op_passes_a_few_trials() {
        let cfg = SuiteConfig {
            size: 4,
            trials: 3,
            ..SuiteConfig::default()
        };
        for check in run_suite(&cfg).unwrap() {
            assert!(check.passed(), "{check:?}");
            assert!(check.entries > 0);
        }
    }

    #[test]
    fn scaled_error_floor() {
        assert!(scaled_error(1e-8, 5e-7) <= GRAD_RTOL);
        assert!(scaled_error(1.0, 1.0005) <= GRAD_RTOL);
        assert!(scaled_error(1.0, 1.002) > GRAD_RTOL);
    }
}
