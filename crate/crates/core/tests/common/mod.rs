//! Independent f64 reference implementation used as a test oracle.
//!
//! Written with plain nested loops straight from the layer definitions so it
//! shares no code path with the batched GEMM kernels it checks.

#![allow(dead_code)]

use mutattack_core::nn::{LayerSpec, Network};

#[derive(Clone)]
pub struct RefLayer {
    pub spec: LayerSpec,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone)]
pub struct RefNet {
    pub input_shape: Vec<usize>,
    pub layers: Vec<RefLayer>,
    pub temperature: f64,
}

/// Activation pattern: ReLU on/off bits and pool argmax choices.
pub type Pattern = Vec<usize>;

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        Self {
            input_shape: net.input_shape().to_vec(),
            layers: net
                .layers()
                .iter()
                .map(|l| RefLayer {
                    spec: l.spec().clone(),
                    w: l.weights().data().iter().map(|&v| f64::from(v)).collect(),
                    b: l.bias().data().iter().map(|&v| f64::from(v)).collect(),
                })
                .collect(),
            temperature: f64::from(net.temperature()),
        }
    }

    /// Logits, last-hidden activations and the activation pattern.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Pattern) {
        let mut shape = self.input_shape.clone();
        let mut a = x.to_vec();
        let mut pattern = Vec::new();
        let last_trainable = self
            .layers
            .iter()
            .rposition(|l| l.spec.is_trainable())
            .unwrap();
        let mut hidden = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if li == last_trainable {
                hidden = a.clone();
            }
            match layer.spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let mut y = vec![0.0; outputs];
                    for o in 0..outputs {
                        let mut s = layer.b[o];
                        for i in 0..inputs {
                            s += layer.w[o * inputs + i] * a[i];
                        }
                        y[o] = s;
                    }
                    a = y;
                    shape = vec![outputs];
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = (shape[1] as isize, shape[2] as isize);
                    let ho = ((h + 2 * padding as isize - kernel as isize) / stride as isize + 1)
                        as usize;
                    let wo = ((w + 2 * padding as isize - kernel as isize) / stride as isize + 1)
                        as usize;
                    let mut y = vec![0.0; out_channels * ho * wo];
                    for co in 0..out_channels {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let mut s = layer.b[co];
                                for ci in 0..in_channels {
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            let ih = (oh * stride + ki) as isize - padding as isize;
                                            let iw = (ow * stride + kj) as isize - padding as isize;
                                            if ih < 0 || iw < 0 || ih >= h || iw >= w {
                                                continue;
                                            }
                                            let xv = a[(ci * h as usize + ih as usize)
                                                * w as usize
                                                + iw as usize];
                                            let wv = layer.w[((co * in_channels + ci) * kernel
                                                + ki)
                                                * kernel
                                                + kj];
                                            s += xv * wv;
                                        }
                                    }
                                }
                                y[(co * ho + oh) * wo + ow] = s;
                            }
                        }
                    }
                    a = y;
                    shape = vec![out_channels, ho, wo];
                }
                LayerSpec::MaxPool2d { size, stride } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let ho = (h - size) / stride + 1;
                    let wo = (w - size) / stride + 1;
                    let mut y = vec![0.0; c * ho * wo];
                    for ch in 0..c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for di in 0..size {
                                    for dj in 0..size {
                                        let v =
                                            a[(ch * h + oh * stride + di) * w + ow * stride + dj];
                                        if v > best {
                                            best = v;
                                            arg = di * size + dj;
                                        }
                                    }
                                }
                                y[(ch * ho + oh) * wo + ow] = best;
                                pattern.push(arg);
                            }
                        }
                    }
                    a = y;
                    shape = vec![c, ho, wo];
                }
                LayerSpec::Relu => {
                    for v in a.iter_mut() {
                        pattern.push(usize::from(*v > 0.0));
                        *v = v.max(0.0);
                    }
                }
                LayerSpec::Flatten => {
                    shape = vec![a.len()];
                }
            }
        }
        (a, hidden, pattern)
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let (z, _, _) = self.forward(x);
        softmax(&z, self.temperature)
    }
}

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy)]
pub enum RefLoss {
    CrossEntropy,
    CarliniWagner,
}

/// Loss and an extended pattern that also captures loss-level kinks.
pub fn loss(net: &RefNet, x: &[f64], y: usize, kind: RefLoss) -> (f64, Pattern) {
    let (z, _, mut pattern) = net.forward(x);
    match kind {
        RefLoss::CrossEntropy => {
            let p = softmax(&z, net.temperature);
            (-p[y].ln(), pattern)
        }
        RefLoss::CarliniWagner => {
            let (j, other) = z.iter().enumerate().filter(|(i, _)| *i != y).fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc },
            );
            let margin = z[y] - other;
            pattern.push(j);
            pattern.push(usize::from(margin > 0.0));
            (margin.max(0.0), pattern)
        }
    }
}

/// Central-difference gradient with respect to the input. Coordinates whose
/// +h/-h evaluations straddle a kink are reported as `None`.
pub fn fd_input_gradient(
    net: &RefNet,
    x: &[f64],
    y: usize,
    kind: RefLoss,
    h: f64,
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let (lp, pp) = loss(net, &xp, y, kind);
        xp[i] = x[i] - h;
        let (lm, pm) = loss(net, &xp, y, kind);
        xp[i] = x[i];
        out.push((pp == pm).then(|| (lp - lm) / (2.0 * h)));
    }
    out
}

/// Central-difference gradient of the batch-mean cross-entropy for every
/// parameter, laid out per layer as (weights, bias).
pub fn fd_weight_gradient(
    net: &RefNet,
    xs: &[Vec<f64>],
    ys: &[usize],
    h: f64,
) -> Vec<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let batch_loss = |n: &RefNet| {
        let mut total = 0.0;
        let mut patterns = Vec::new();
        for (x, &y) in xs.iter().zip(ys) {
            let (l, p) = loss(n, x, y, RefLoss::CrossEntropy);
            total += l;
            patterns.push(p);
        }
        (total / xs.len() as f64, patterns)
    };
    let mut work = net.clone();
    let mut out = Vec::new();
    for li in 0..net.layers.len() {
        let mut per = (Vec::new(), Vec::new());
        for which in 0..2 {
            let len = if which == 0 {
                net.layers[li].w.len()
            } else {
                net.layers[li].b.len()
            };
            for j in 0..len {
                let orig = if which == 0 {
                    net.layers[li].w[j]
                } else {
                    net.layers[li].b[j]
                };
                let set = |n: &mut RefNet, v: f64| {
                    if which == 0 {
                        n.layers[li].w[j] = v
                    } else {
                        n.layers[li].b[j] = v
                    }
                };
                set(&mut work, orig + h);
                let (lp, pp) = batch_loss(&work);
                set(&mut work, orig - h);
                let (lm, pm) = batch_loss(&work);
                set(&mut work, orig);
                let g = (pp == pm).then(|| (lp - lm) / (2.0 * h));
                if which == 0 {
                    per.0.push(g);
                } else {
                    per.1.push(g);
                }
            }
        }
        out.push(per);
    }
    out
}

/// Relative error with a small absolute floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Kernel-form CKA straight from the HSIC definition:
/// `HSIC(K, L) = Σ_ij (HKH)_ij (HLH)_ij / (m-1)²` with `K = XXᵀ`, `L = YYᵀ`
/// and the centering matrix `H = I - 11ᵀ/m`, each entry by explicit sums.
pub fn kernel_cka(x: &[f64], px: usize, y: &[f64], py: usize, m: usize) -> f64 {
    let gram = |a: &[f64], p: usize| {
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                k[i * m + j] = (0..p).map(|c| a[i * p + c] * a[j * p + c]).sum();
            }
        }
        k
    };
    let center = |k: &[f64]| {
        let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / m as f64;
        let mut hk = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                hk[i * m + j] = (0..m).map(|t| h(i, t) * k[t * m + j]).sum();
            }
        }
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = (0..m).map(|t| hk[i * m + t] * h(t, j)).sum();
            }
        }
        out
    };
    let kc = center(&gram(x, px));
    let lc = center(&gram(y, py));
    let hsic = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / ((m - 1) * (m - 1)) as f64
    };
    hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
}

/// Stationary vector of the damped walk, solved directly from
/// `(I - d·P) r = (1 - d)/k · 1` with an LU factorization.
pub fn dense_pagerank(sim: &[f64], k: usize, damping: f64) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let mut p = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let total: f64 = (0..k).filter(|&i| i != j).map(|i| sim[i * k + j]).sum();
        for i in 0..k {
            p[(i, j)] = if total > 0.0 {
                if i == j {
                    0.0
                } else {
                    sim[i * k + j] / total
                }
            } else {
                1.0 / k as f64
            };
        }
    }
    let a = DMatrix::<f64>::identity(k, k) - p * damping;
    let b = DVector::<f64>::from_element(k, (1.0 - damping) / k as f64);
    a.lu()
        .solve(&b)
        .expect("nonsingular")
        .iter()
        .copied()
        .collect()
}

/// Expected number of targets for a layer of `count` elements at `percent`%.
pub fn expected_targets(count: usize, percent: u32) -> usize {
    let exact = count as u128 * percent as u128;
    ((exact + 99) / 100) as usize
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Checks a mutant against its parent by direct comparison of every weight:
/// exact target counts per layer and confinement of all changes to the
/// selected targets' incoming (or, for NEB, outgoing) vectors.
pub fn verify_mutation(
    parent: &Network,
    child: &Network,
    op: mutattack_core::mutation::MutationOperator,
    percent: u32,
) -> Result<(), String> {
    use mutattack_core::mutation::MutationOperator as Op;
    let trainable: Vec<usize> = (0..parent.layers().len())
        .filter(|&i| parent.layers()[i].is_trainable())
        .collect();
    let hidden = &trainable[..trainable.len() - 1];
    let mut touched_layers: Vec<usize> = Vec::new();
    match op {
        Op::GF => {
            for &li in &trainable {
                let (a, b) = (&parent.layers()[li], &child.layers()[li]);
                let changed = bits(a.weights().data())
                    .iter()
                    .zip(bits(b.weights().data()))
                    .filter(|(x, y)| *x != y)
                    .count();
                let want = expected_targets(a.weights().len(), percent);
                if changed != want {
                    return Err(format!(
                        "GF layer {li}: {changed} weights changed, expected {want}"
                    ));
                }
                if bits(a.bias().data()) != bits(b.bias().data()) {
                    return Err(format!("GF layer {li}: bias changed"));
                }
                touched_layers.push(li);
            }
        }
        Op::WS | Op::NAI | Op::NS => {
            for &li in hidden {
                let (a, b) = (&parent.layers()[li], &child.layers()[li]);
                let n = a.neurons();
                let fan = a.incoming_len();
                let pw = a.weights().data();
                let cw = b.weights().data();
                let row = |w: &[f32], i: usize| bits(&w[i * fan..(i + 1) * fan]);
                let changed: Vec<usize> = (0..n)
                    .filter(|&i| {
                        row(pw, i) != row(cw, i)
                            || a.bias().data()[i].to_bits() != b.bias().data()[i].to_bits()
                    })
                    .collect();
                let k = expected_targets(n, percent);
                let want = match op {
                    Op::NS if n < 2 => 0,
                    Op::WS if fan < 2 => 0,
                    Op::NS => (k + k % 2).min(n - n % 2),
                    _ => k,
                };
                if changed.len() != want {
                    return Err(format!(
                        "{op:?} layer {li}: {} neurons changed, expected {want}",
                        changed.len()
                    ));
                }
                for &i in &changed {
                    let (pb, cb) = (a.bias().data()[i], b.bias().data()[i]);
                    match op {
                        Op::WS => {
                            let mut x = row(pw, i);
                            let mut y = row(cw, i);
                            x.sort_unstable();
                            y.sort_unstable();
                            if x != y || pb.to_bits() != cb.to_bits() {
                                return Err(format!("WS layer {li} neuron {i}: not a permutation"));
                            }
                        }
                        Op::NAI => {
                            let neg: Vec<u32> =
                                row(pw, i).iter().map(|v| v ^ 0x8000_0000).collect();
                            if neg != row(cw, i) || (-pb).to_bits() != cb.to_bits() {
                                return Err(format!("NAI layer {li} neuron {i}: not negated"));
                            }
                        }
                        _ => {
                            let partner = changed.iter().copied().find(|&j| {
                                j != i
                                    && row(pw, j) == row(cw, i)
                                    && a.bias().data()[j].to_bits() == cb.to_bits()
                            });
                            match partner {
                                Some(j) if row(pw, i) == row(cw, j) => {}
                                _ => {
                                    return Err(format!(
                                        "NS layer {li} neuron {i}: no swap partner"
                                    ))
                                }
                            }
                        }
                    }
                }
                touched_layers.push(li);
            }
        }
        Op::NEB => {
            for (pos, &li) in hidden.iter().enumerate() {
                let next = trainable[pos + 1];
                let n = parent.layers()[li].neurons();
                let (a, b) = (&parent.layers()[next], &child.layers()[next]);
                let total = a.weights().len();
                // Which outgoing entries belong to neuron `c` of layer `li`.
                let owner = |idx: usize| -> usize {
                    match *a.spec() {
                        LayerSpec::Dense { inputs, .. } => (idx % inputs) / (inputs / n),
                        LayerSpec::Conv2d {
                            in_channels,
                            kernel,
                            ..
                        } => (idx / (kernel * kernel)) % in_channels,
                        _ => unreachable!(),
                    }
                };
                let mut blocked = vec![true; n];
                let mut any_change = vec![false; n];
                for idx in 0..total {
                    let (p, c) = (a.weights().data()[idx], b.weights().data()[idx]);
                    let o = owner(idx);
                    if c.to_bits() != 0 {
                        blocked[o] = false;
                    }
                    if p.to_bits() != c.to_bits() {
                        any_change[o] = true;
                        if c.to_bits() != 0 {
                            return Err(format!(
                                "NEB layer {next}: entry {idx} changed to nonzero"
                            ));
                        }
                    }
                }
                let count = blocked.iter().filter(|&&b| b).count();
                let want = expected_targets(n, percent);
                if count != want {
                    return Err(format!(
                        "NEB layer {li}: {count} neurons blocked, expected {want}"
                    ));
                }
                if any_change.iter().zip(&blocked).any(|(c, b)| *c && !b) {
                    return Err(format!("NEB layer {li}: partial block"));
                }
                if bits(a.bias().data()) != bits(b.bias().data()) {
                    return Err(format!("NEB layer {next}: bias changed"));
                }
                touched_layers.push(next);
            }
        }
    }
    for li in 0..parent.layers().len() {
        if touched_layers.contains(&li) {
            continue;
        }
        let (a, b) = (&parent.layers()[li], &child.layers()[li]);
        if bits(a.weights().data()) != bits(b.weights().data())
            || bits(a.bias().data()) != bits(b.bias().data())
        {
            return Err(format!("{op:?}: untouched layer {li} changed"));
        }
    }
    Ok(())
}

/// Same architecture and weights, with every bias redrawn uniformly in ±0.5.
pub fn with_random_biases(net: &Network, seed: u64) -> Network {
    use mutattack_core::nn::Layer;
    use mutattack_core::Tensor;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            if !l.is_trainable() {
                return Layer::zeros(l.spec().clone());
            }
            let b: Vec<f32> = (0..l.bias().len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            Layer::with_params(
                l.spec().clone(),
                l.weights().clone(),
                Tensor::new(l.bias().shape().to_vec(), b).unwrap(),
            )
            .unwrap()
        })
        .collect();
    Network::new(net.input_shape().to_vec(), layers).unwrap()
}

/// Runs `invocations` randomized FGSM/BIM/PGD attacks on random small nets
/// and counts results that leave the ε-ball or the pixel box.
pub fn containment_violations(invocations: usize, seed: u64) -> usize {
    use mutattack_core::attacks::{bim, fgsm, pgd, AttackConfig};
    use mutattack_core::Tensor;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nets: Vec<Network> = (0..16)
        .map(|s| match s % 3 {
            0 => Network::mlp(12, &[10], 3, s).unwrap(),
            1 => Network::mlp(12, &[16, 8], 5, s).unwrap(),
            _ => Network::random(
                vec![1, 4, 3],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        out_channels: 3,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: 36,
                        outputs: 4,
                    },
                ],
                s,
            )
            .unwrap(),
        })
        .collect();
    let mut violations = 0;
    for i in 0..invocations {
        let net = &nets[rng.random_range(0..nets.len())];
        // Mix interior, boundary and saturated pixels.
        let x: Vec<f32> = (0..net.input_len())
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let x = Tensor::new(net.input_shape().to_vec(), x).unwrap();
        let y = rng.random_range(0..net.num_classes());
        let eps: f32 = if rng.random_bool(0.05) {
            0.0
        } else {
            rng.random_range(0.0..0.6)
        };
        let iters = rng.random_range(1..=12);
        let r = match i % 3 {
            0 => fgsm(net, &x, y, &AttackConfig::fgsm(eps)),
            1 => bim(net, &x, y, &AttackConfig::bim(eps, iters)),
            _ => pgd(net, &x, y, &AttackConfig::pgd(eps, iters), rng.random()),
        }
        .unwrap();
        let bad = r
            .adversarial
            .data()
            .iter()
            .zip(x.data())
            .any(|(a, o)| !(0.0..=1.0).contains(a) || (a - o).abs() > eps + 1e-6)
            || r.linf_dist > eps + 1e-6;
        violations += usize::from(bad);
    }
    violations
}

pub fn small_cnn(seed: u64) -> Network {
    Network::random(
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 18,
                outputs: 5,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 5,
                outputs: 3,
            },
        ],
        seed,
    )
    .unwrap()
}

pub fn strided_cnn(seed: u64) -> Network {
    Network::random(
        vec![2, 7, 7],
        vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 27,
                outputs: 4,
            },
        ],
        seed,
    )
    .unwrap()
}

/// One of four small architectures (conv, strided conv, shallow and deep MLP).
pub fn random_net(seed: u64) -> Network {
    match seed % 4 {
        0 => small_cnn(seed),
        1 => strided_cnn(seed),
        2 => Network::mlp(8, &[10, 6], 4, seed).unwrap(),
        _ => Network::mlp(12, &[16, 12, 8, 6], 5, seed).unwrap(),
    }
}
