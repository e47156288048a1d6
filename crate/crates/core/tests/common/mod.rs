//! Brute-force reference implementations, written without the library's
//! kernels, plus random instance generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use resfuse::fusion::{
    fuse_direct, fuse_weighted, EncodingBlock, FusionVariant, FusionWeightBlock,
};
use resfuse::graph::Graph;
use resfuse::kernels;
use resfuse::network::{DualBranchSegNet, ModelConfig};
use resfuse::param::ParamStore;
use resfuse::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-5;

pub fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap()
}

pub fn max_abs_diff(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

fn idx(shape: &[usize; 5], n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
    (((n * shape[1] + c) * shape[2] + d) * shape[3] + h) * shape[4] + w
}

/// Nested-loop cross-correlation with zero padding.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let out_len = |s: usize, k: usize| (s + 2 * pad - k) / stride + 1;
    let os = [
        xs[0],
        ws[0],
        out_len(xs[2], ws[2]),
        out_len(xs[3], ws[3]),
        out_len(xs[4], ws[4]),
    ];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..os[0] {
        for o in 0..os[1] {
            for od in 0..os[2] {
                for oh in 0..os[3] {
                    for ow in 0..os[4] {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for c in 0..xs[1] {
                            for kd in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let d = (od * stride + kd) as isize - pad as isize;
                                        let h = (oh * stride + kh) as isize - pad as isize;
                                        let ww = (ow * stride + kw) as isize - pad as isize;
                                        if d < 0
                                            || h < 0
                                            || ww < 0
                                            || d >= xs[2] as isize
                                            || h >= xs[3] as isize
                                            || ww >= xs[4] as isize
                                        {
                                            continue;
                                        }
                                        let xv =
                                            x[idx(&xs, n, c, d as usize, h as usize, ww as usize)];
                                        acc += xv * w[idx(&ws, o, c, kd, kh, kw)];
                                    }
                                }
                            }
                        }
                        out[idx(&os, n, o, od, oh, ow)] = acc;
                    }
                }
            }
        }
    }
    (out, os)
}

/// `out[n,o,v] = sum_c w[o][c] x[n,c,v] + b[o]`, one voxel at a time.
pub fn channel_matvec(x: &[f64], xs: [usize; 5], w: &[f64], cout: usize, b: &[f64]) -> Vec<f64> {
    let vol = xs[2] * xs[3] * xs[4];
    let cin = xs[1];
    let mut out = vec![0.0; xs[0] * cout * vol];
    for n in 0..xs[0] {
        for v in 0..vol {
            let column: Vec<f64> = (0..cin).map(|c| x[(n * cin + c) * vol + v]).collect();
            for o in 0..cout {
                let dot: f64 = (0..cin).map(|c| w[o * cin + c] * column[c]).sum();
                out[(n * cout + o) * vol + v] = dot + b[o];
            }
        }
    }
    out
}

/// Mean first, then variance from the centered values.
pub fn instance_norm(x: &[f64], xs: [usize; 5], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let vol = xs[2] * xs[3] * xs[4];
    let mut out = vec![0.0; x.len()];
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            let base = (n * xs[1] + c) * vol;
            let slice = &x[base..base + vol];
            let mean = slice.iter().sum::<f64>() / vol as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vol as f64;
            let denom = (var + eps).sqrt();
            for (i, v) in slice.iter().enumerate() {
                out[base + i] = gamma[c] * (v - mean) / denom + beta[c];
            }
        }
    }
    out
}

pub fn max_pool2(x: &[f64], xs: [usize; 5]) -> (Vec<f64>, [usize; 5]) {
    let os = [xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2];
    let mut out = vec![f64::NEG_INFINITY; os.iter().product()];
    for n in 0..os[0] {
        for c in 0..os[1] {
            for d in 0..xs[2] {
                for h in 0..xs[3] {
                    for w in 0..xs[4] {
                        let o = idx(&os, n, c, d / 2, h / 2, w / 2);
                        out[o] = out[o].max(x[idx(&xs, n, c, d, h, w)]);
                    }
                }
            }
        }
    }
    (out, os)
}

pub fn nearest_up2(x: &[f64], xs: [usize; 5]) -> (Vec<f64>, [usize; 5]) {
    let os = [xs[0], xs[1], xs[2] * 2, xs[3] * 2, xs[4] * 2];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..os[0] {
        for c in 0..os[1] {
            for d in 0..os[2] {
                for h in 0..os[3] {
                    for w in 0..os[4] {
                        out[idx(&os, n, c, d, h, w)] = x[idx(&xs, n, c, d / 2, h / 2, w / 2)];
                    }
                }
            }
        }
    }
    (out, os)
}

/// `1 - mean_{k>=1} (2 I_k + s) / (P_k + G_k + s)` with softmax probabilities.
pub fn dice_loss(logits: &[f64], xs: [usize; 5], targets: &[u8], smooth: f64) -> f64 {
    let k = xs[1];
    let vol = xs[2] * xs[3] * xs[4];
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for n in 0..xs[0] {
        for v in 0..vol {
            let z: Vec<f64> = (0..k).map(|c| logits[(n * k + c) * vol + v]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|zi| (zi - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let t = targets[n * vol + v] as usize;
            for c in 0..k {
                let p = e[c] / total;
                psum[c] += p;
                if c == t {
                    inter[c] += p;
                    gsum[c] += 1.0;
                }
            }
        }
    }
    let score: f64 = (1..k)
        .map(|c| (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth))
        .sum();
    1.0 - score / (k - 1) as f64
}

fn dims(rng: &mut ChaCha8Rng, max_n: usize, max_c: usize, lo: usize, hi: usize) -> [usize; 5] {
    [
        rng.random_range(1..=max_n),
        rng.random_range(1..=max_c),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

fn even_dims(rng: &mut ChaCha8Rng) -> [usize; 5] {
    let mut s = dims(rng, 2, 3, 1, 3);
    for d in &mut s[2..] {
        *d *= 2;
    }
    s
}

/// Library result versus oracle on one random instance of `op`; returns
/// the max absolute difference.
pub fn oracle_trial(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    match op {
        "conv3d" => {
            let k: usize = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2 + 1);
            let xs = dims(rng, 2, 3, k.saturating_sub(2 * pad).max(1), 7);
            let ws = [rng.random_range(1..=3), xs[1], k, k, k];
            let (x, w, b) = (
                uniform(rng, xs.iter().product()),
                uniform(rng, ws.iter().product()),
                uniform(rng, ws[0]),
            );
            let bias = rng.random_bool(0.5).then_some(&b[..]);
            let (want, os) = conv3d(&x, xs, &w, ws, bias, stride, pad);
            let bt = bias.map(|b| tensor(&[ws[0]], b));
            let got = kernels::conv3d(&tensor(&xs, &x), &tensor(&ws, &w), bt.as_ref(), stride, pad)
                .unwrap();
            assert_eq!(got.shape(), &os[..]);
            max_abs_diff(got.data(), &want)
        }
        "conv1x1x1" => {
            let xs = dims(rng, 2, 5, 1, 5);
            let cout = rng.random_range(1..=5);
            let (x, w, b) = (
                uniform(rng, xs.iter().product()),
                uniform(rng, cout * xs[1]),
                uniform(rng, cout),
            );
            let want = channel_matvec(&x, xs, &w, cout, &b);
            let got = kernels::conv1x1x1(
                &tensor(&xs, &x),
                &tensor(&[cout, xs[1], 1, 1, 1], &w),
                &tensor(&[cout], &b),
            )
            .unwrap();
            max_abs_diff(got.data(), &want)
        }
        "instance_norm" => {
            let mut xs = dims(rng, 2, 3, 1, 5);
            xs[4] = xs[4].max(2);
            let x: Vec<f64> = uniform(rng, xs.iter().product())
                .iter()
                .map(|v| 3.0 * v + 0.5)
                .collect();
            let (gamma, beta) = (uniform(rng, xs[1]), uniform(rng, xs[1]));
            let want = instance_norm(&x, xs, &gamma, &beta, 1e-5);
            let (got, _) = kernels::instance_norm(
                &tensor(&xs, &x),
                &tensor(&[xs[1]], &gamma),
                &tensor(&[xs[1]], &beta),
                1e-5,
            )
            .unwrap();
            max_abs_diff(got.data(), &want)
        }
        "down2" => {
            let xs = even_dims(rng);
            let x = uniform(rng, xs.iter().product());
            let (want, os) = max_pool2(&x, xs);
            let (got, _) = kernels::max_pool2(&tensor(&xs, &x)).unwrap();
            assert_eq!(got.shape(), &os[..]);
            max_abs_diff(got.data(), &want)
        }
        "up2" => {
            let xs = dims(rng, 2, 3, 1, 4);
            let x = uniform(rng, xs.iter().product());
            let (want, os) = nearest_up2(&x, xs);
            let got = kernels::upsample2(&tensor(&xs, &x)).unwrap();
            assert_eq!(got.shape(), &os[..]);
            max_abs_diff(got.data(), &want)
        }
        "fuse_direct" => {
            let xs = dims(rng, 2, 4, 1, 5);
            let len = xs.iter().product();
            let (a, b) = (uniform(rng, len), uniform(rng, len));
            let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let mut g = Graph::<f32>::new();
            let va = g.variable(tensor(&xs, &a)).unwrap();
            let vb = g.variable(tensor(&xs, &b)).unwrap();
            let out = fuse_direct(&mut g, va, vb).unwrap();
            max_abs_diff(g.value(out).data(), &want)
        }
        "fuse_weighted" => {
            let xs = dims(rng, 2, 4, 1, 5);
            let c = xs[1];
            let len = xs.iter().product();
            let (a, x, w, b) = (
                uniform(rng, len),
                uniform(rng, len),
                uniform(rng, c * c),
                uniform(rng, c),
            );
            let mixed = channel_matvec(&x, xs, &w, c, &b);
            let want: Vec<f64> = a.iter().zip(&mixed).map(|(p, q)| p + q).collect();
            let fw = FusionWeightBlock::new("fw", c);
            let mut store = ParamStore::new();
            store
                .insert(fw.weight_name(), tensor(&[c, c, 1, 1, 1], &w), true)
                .unwrap();
            store
                .insert(fw.bias_name(), tensor(&[c], &b), true)
                .unwrap();
            let mut g = Graph::<f32>::new();
            let va = g.variable(tensor(&xs, &a)).unwrap();
            let vx = g.variable(tensor(&xs, &x)).unwrap();
            let out = fuse_weighted(&mut g, &store, va, vx, &fw).unwrap();
            max_abs_diff(g.value(out).data(), &want)
        }
        "dice_loss" => {
            let mut xs = dims(rng, 2, 4, 1, 4);
            xs[1] = xs[1].max(2);
            let vol: usize = xs[2..].iter().product();
            let logits: Vec<f64> = uniform(rng, xs.iter().product())
                .iter()
                .map(|v| 4.0 * v)
                .collect();
            let targets: Vec<u8> = (0..xs[0] * vol)
                .map(|_| rng.random_range(0..xs[1]) as u8)
                .collect();
            let want = dice_loss(&logits, xs, &targets, 1e-5);
            let mut g = Graph::<f32>::new();
            let z = g.variable(tensor(&xs, &logits)).unwrap();
            let loss = g.dice_loss(z, &targets, 1e-5).unwrap();
            max_abs_diff(g.value(loss).data(), &[want])
        }
        other => panic!("no oracle for {other}"),
    }
}

pub const ORACLE_OPS: [&str; 8] = [
    "conv3d",
    "conv1x1x1",
    "instance_norm",
    "down2",
    "up2",
    "fuse_direct",
    "fuse_weighted",
    "dice_loss",
];

/// A randomly initialized block with random norm affines.
pub fn random_block(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<f32>,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> EncodingBlock {
    let block = EncodingBlock::new(prefix, cin, cout);
    block.init(store, rng).unwrap();
    for leaf in ["norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta"] {
        let p = store.get_mut(&format!("{prefix}.{leaf}")).unwrap();
        let v = uniform(rng, cout);
        p.value = tensor(&[cout], &v);
    }
    block
}

pub fn set_param(store: &mut ParamStore<f32>, name: &str, value: Tensor<f32>) {
    store.get_mut(name).unwrap().value = value;
}

pub fn channel_identity(c: usize) -> Tensor<f32> {
    Tensor::from_fn(
        vec![c, c, 1, 1, 1],
        |i| if i / c == i % c { 1.0 } else { 0.0 },
    )
}

pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Worst-case outcome of the reduction-chain checks over `trials` random
/// fusion instances and plain networks.
pub struct ReductionChain {
    /// Max |fuse_weighted(W = I, b = 0) - fuse_direct|.
    pub identity_vs_direct: f64,
    /// fuse_weighted with zero weights returned e_main bit-exactly.
    pub zero_is_main: bool,
    /// PlainResidual logits ignored the auxiliary input bit-exactly.
    pub plain_ignores_aux: bool,
}

pub fn reduction_chain(rng: &mut ChaCha8Rng, trials: usize) -> ReductionChain {
    let mut out = ReductionChain {
        identity_vs_direct: 0.0,
        zero_is_main: true,
        plain_ignores_aux: true,
    };
    for _ in 0..trials {
        let xs = dims(rng, 2, 4, 1, 5);
        let c = xs[1];
        let len: usize = xs.iter().product();
        let (e, a) = (
            tensor(&xs, &uniform(rng, len)),
            tensor(&xs, &uniform(rng, len)),
        );
        let fw = FusionWeightBlock::new("fw", c);
        let mut store = ParamStore::new();
        fw.init(&mut store, resfuse::fusion::FusionInit::Identity)
            .unwrap();
        let mut g = Graph::<f32>::new();
        let (ve, va) = (
            g.variable(e.clone()).unwrap(),
            g.variable(a.clone()).unwrap(),
        );
        let weighted = fuse_weighted(&mut g, &store, ve, va, &fw).unwrap();
        let direct = fuse_direct(&mut g, ve, va).unwrap();
        out.identity_vs_direct = out
            .identity_vs_direct
            .max(g.value(weighted).max_abs_diff(g.value(direct)));

        let mut zero = ParamStore::new();
        fw.init(&mut zero, resfuse::fusion::FusionInit::Zero)
            .unwrap();
        // A fresh graph, since parameter nodes are cached by name.
        let mut g = Graph::<f32>::new();
        let (ve, va) = (g.variable(e.clone()).unwrap(), g.variable(a).unwrap());
        let silenced = fuse_weighted(&mut g, &zero, ve, va, &fw).unwrap();
        out.zero_is_main &= bits(g.value(silenced)) == bits(&e);
    }

    for t in 0..trials.div_ceil(10) {
        let net = DualBranchSegNet::<f32>::build(ModelConfig {
            levels: 2,
            base_channels: 2,
            variant: FusionVariant::PlainResidual,
            seed: t as u64,
            ..ModelConfig::default()
        })
        .unwrap();
        let shape = [1, 1, 4, 4, 4];
        let post = tensor(&shape, &uniform(rng, 64));
        let a = tensor(&shape, &uniform(rng, 64));
        let b = tensor(
            &shape,
            &uniform(rng, 64)
                .iter()
                .map(|v| 50.0 * v)
                .collect::<Vec<_>>(),
        );
        let la = net.forward(&a, &post).unwrap();
        let lb = net.forward(&b, &post).unwrap();
        out.plain_ignores_aux &= bits(&la) == bits(&lb);
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    let density = rng.random_range(0.0..1.0);
    (0..len).map(|_| rng.random_bool(density)).collect()
}

/// Number of violated metric identities over `trials` random mask pairs and
/// label maps (0 means every property held).
pub fn metric_violations(rng: &mut ChaCha8Rng, trials: usize) -> Vec<(&'static str, usize)> {
    use resfuse::metrics::{compose_regions, dice_coefficient, pixel_recall};
    let mut fails = [
        ("dice symmetric", 0),
        ("dice in [0,1]", 0),
        ("recall in [0,1]", 0),
        ("dice 0 iff disjoint", 0),
        ("identical masks", 0),
        ("half overlap", 0),
        ("empty conventions", 0),
        ("superset recall", 0),
        ("EN ⊆ TC ⊆ WT", 0),
    ];
    let mut fail = |i: usize, ok: bool| fails[i].1 += usize::from(!ok);
    for _ in 0..trials {
        let len = rng.random_range(1..300);
        let (p, g) = (random_mask(rng, len), random_mask(rng, len));
        let d = dice_coefficient(&p, &g).unwrap();
        let r = pixel_recall(&p, &g).unwrap();
        fail(0, d == dice_coefficient(&g, &p).unwrap());
        fail(1, (0.0..=1.0).contains(&d));
        fail(2, (0.0..=1.0).contains(&r));
        let meet = p.iter().zip(&g).any(|(a, b)| *a && *b);
        let union = p.iter().chain(&g).any(|v| *v);
        if union {
            fail(3, (d == 0.0) == !meet);
        }
        if g.iter().any(|v| *v) {
            fail(4, dice_coefficient(&g, &g).unwrap() == 1.0);
        }

        // |P| = |G| = 2m sharing m voxels.
        let m = rng.random_range(1..50);
        let mut pp = vec![false; 3 * m];
        let mut gg = vec![false; 3 * m];
        pp[..2 * m].fill(true);
        gg[m..].fill(true);
        fail(
            5,
            dice_coefficient(&pp, &gg).unwrap() == 0.5 && pixel_recall(&pp, &gg).unwrap() == 0.5,
        );

        let none = vec![false; len];
        let empty_ok = dice_coefficient(&none, &none).unwrap() == 1.0
            && pixel_recall(&p, &none).unwrap() == 1.0
            && (!g.iter().any(|v| *v) || pixel_recall(&none, &g).unwrap() == 0.0);
        fail(6, empty_ok);
        let sup: Vec<bool> = p.iter().zip(&g).map(|(a, b)| *a || *b).collect();
        fail(7, pixel_recall(&sup, &g).unwrap() == 1.0);

        let labels: Vec<u8> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let reg = compose_regions(&labels).unwrap();
        let chain = (0..len).all(|i| (!reg.en[i] || reg.tc[i]) && (!reg.tc[i] || reg.wt[i]));
        fail(8, chain);
    }
    fails.to_vec()
}

pub fn tiny_spec() -> resfuse::phantom::PhantomSpec {
    use resfuse::phantom::{CountRange, PhantomSpec};
    PhantomSpec {
        size: [12, 12, 12],
        lesion_count: CountRange::new(1, 1),
        cyst_count: CountRange::new(0, 1),
        gland_count: CountRange::new(0, 1),
        radius_range: [1.5, 2.5],
        axis_ratio_range: [0.8, 1.2],
        ..PhantomSpec::default()
    }
}

pub fn tiny_train_config(
    data: &std::path::Path,
    out: std::path::PathBuf,
) -> resfuse::train::TrainConfig {
    resfuse::train::TrainConfig {
        data: data.to_path_buf(),
        out,
        epochs: 3,
        lr: 3e-3,
        seed: 5,
        levels: 2,
        base_channels: 2,
        ..resfuse::train::TrainConfig::default()
    }
}

/// Outcome of the determinism and persistence checks.
pub struct Determinism {
    pub same_seed_identical: bool,
    pub thread_count_irrelevant: bool,
    pub save_load_save_identical: bool,
    pub resume_matches: bool,
}

/// Runs every check on a tiny dataset under `dir`; `split` epochs are
/// trained, then `split` more after a reload, against `2 * split` at once.
pub fn determinism(dir: &std::path::Path, split: usize) -> Determinism {
    use resfuse::checkpoint::Checkpoint;
    use resfuse::dataset::Dataset;
    use resfuse::train::train;

    let data = dir.join("data");
    Dataset::generate(&data, &tiny_spec(), 6, 3).unwrap();
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();

    let run = |name: &str, epochs: usize, resume: Option<std::path::PathBuf>| {
        let mut cfg = tiny_train_config(&data, dir.join(name));
        cfg.epochs = epochs;
        cfg.resume = resume;
        train(&cfg).unwrap();
        cfg.out
    };
    let a = run("a.rfck", split, None);
    let b = run("b.rfck", split, None);
    let same_seed_identical = bytes(&a) == bytes(&b);

    let pool = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let one = pool(1).install(|| run("t1.rfck", split, None));
    let four = pool(4).install(|| run("t4.rfck", split, None));
    let thread_count_irrelevant = bytes(&one) == bytes(&four) && bytes(&one) == bytes(&a);

    let again = dir.join("again.rfck");
    Checkpoint::load(&a).unwrap().save(&again).unwrap();
    let save_load_save_identical = bytes(&a) == bytes(&again);

    let full = run("full.rfck", 2 * split, None);
    let resumed = run("resumed.rfck", split, Some(a.clone()));
    let resume_matches = bytes(&full) == bytes(&resumed);

    Determinism {
        same_seed_identical,
        thread_count_irrelevant,
        save_load_save_identical,
        resume_matches,
    }
}
