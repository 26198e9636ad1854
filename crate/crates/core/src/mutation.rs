//! Post-training model mutation.
//!
//! Five operators act on a trained [`Network`] without retraining:
//!
//! | op  | targets        | effect                                                   |
//! |-----|----------------|----------------------------------------------------------|
//! | GF  | weights        | add N(0, (0.5·std of the layer's weights)²) noise        |
//! | WS  | hidden neurons | shuffle the neuron's incoming weight vector              |
//! | NEB | hidden neurons | zero every outgoing connection into the next layer       |
//! | NAI | hidden neurons | negate incoming weights and bias (flips pre-activation)  |
//! | NS  | hidden neurons | swap incoming weights and biases of neuron pairs         |
//!
//! Per layer, `⌈ratio × count⌉` targets are drawn uniformly without
//! replacement. A conv layer's neurons are its output channels. Neuron-level
//! operators skip the output layer, whose neurons are the class scores.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MutationOperator {
    /// Gaussian fuzzing.
    GF,
    /// Weight shuffling.
    WS,
    /// Neuron effect blocking.
    NEB,
    /// Neuron activation inverse.
    NAI,
    /// Neuron switch.
    NS,
}

pub const OPERATORS: [MutationOperator; 5] = [
    MutationOperator::GF,
    MutationOperator::WS,
    MutationOperator::NEB,
    MutationOperator::NAI,
    MutationOperator::NS,
];

/// Allowed mutation ratios, in percent.
pub const RATIO_PERCENTS: [u32; 4] = [1, 2, 3, 4];

impl fmt::Display for MutationOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for MutationOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OPERATORS
            .into_iter()
            .find(|op| op.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mutation operator '{s}'")))
    }
}

/// Operator, ratio and seed; together with the parent they fix the mutant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MutationSpec {
    pub operator: MutationOperator,
    ratio_percent: u32,
    pub seed: u64,
}

impl MutationSpec {
    /// `ratio` must be one of 0.01, 0.02, 0.03, 0.04.
    pub fn new(operator: MutationOperator, ratio: f64, seed: u64) -> Result<Self> {
        let percent = (ratio * 100.0).round();
        let valid = (ratio * 100.0 - percent).abs() < 1e-9
            && RATIO_PERCENTS.contains(&(percent as u32))
            && percent >= 1.0;
        if !valid {
            return Err(Error::Config(format!(
                "mutation ratio {ratio} not in {{0.01, 0.02, 0.03, 0.04}}"
            )));
        }
        Ok(Self {
            operator,
            ratio_percent: percent as u32,
            seed,
        })
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.ratio_percent) / 100.0
    }

    /// `⌈ratio × count⌉`, computed exactly.
    pub fn select_count(&self, count: usize) -> usize {
        (count * self.ratio_percent as usize).div_ceil(100)
    }
}

/// A mutated copy of a parent network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutant {
    pub network: Network,
    pub spec: MutationSpec,
    pub parent_hash: String,
    /// Accuracy on the probe set, once measured by [`AccuracyFilter`].
    pub probe_accuracy: Option<f32>,
}

struct Selector {
    rng: ChaCha8Rng,
}

impl Selector {
    fn pick(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }
}

/// Index ranges of each neuron's outgoing weights in the next trainable layer.
fn outgoing_indices(net: &Network, layer: usize, next: usize, neuron: usize) -> Vec<usize> {
    let neurons = net.layers()[layer].neurons();
    match *net.layers()[next].spec() {
        LayerSpec::Dense { inputs, outputs } => {
            let block = inputs / neurons;
            (0..outputs)
                .flat_map(|o| (neuron * block..(neuron + 1) * block).map(move |i| o * inputs + i))
                .collect()
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let kk = kernel * kernel;
            (0..out_channels)
                .flat_map(|co| {
                    let start = (co * in_channels + neuron) * kk;
                    start..start + kk
                })
                .collect()
        }
        _ => unreachable!("next trainable layer is dense or conv"),
    }
}

fn check_channel_mapping(net: &Network, layer: usize, next: usize) -> Result<()> {
    let neurons = net.layers()[layer].neurons();
    let ok = match *net.layers()[next].spec() {
        LayerSpec::Dense { inputs, .. } => inputs % neurons == 0,
        LayerSpec::Conv2d { in_channels, .. } => in_channels == neurons,
        _ => false,
    } && net.layers()[layer + 1..next].iter().all(|l| {
        matches!(
            l.spec(),
            LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten
        )
    });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidNetwork(format!(
            "cannot map neurons of layer {layer} onto inputs of layer {next}"
        )))
    }
}

fn population_std(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    (values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Applies `spec` to a copy of `net`.
pub fn mutate(net: &Network, spec: MutationSpec) -> Result<Mutant> {
    let trainable = net.trainable_indices();
    let mut child = net.clone();
    let mut sel = Selector {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut selected = 0usize;

    match spec.operator {
        MutationOperator::GF => {
            for &li in &trainable {
                let layer = &mut child.layers_mut()[li];
                let count = layer.weights().len();
                let sigma = 0.5 * population_std(layer.weights().data());
                if count == 0 || !(sigma > 0.0 && sigma.is_finite()) {
                    continue;
                }
                let noise = Normal::new(0.0, sigma).expect("finite positive sigma");
                let picks = sel.pick(count, spec.select_count(count));
                let w = layer.weights_mut().data_mut();
                for i in picks {
                    let old = w[i];
                    loop {
                        let new = (f64::from(old) + noise.sample(&mut sel.rng)) as f32;
                        if new != old && new.is_finite() {
                            w[i] = new;
                            break;
                        }
                    }
                    selected += 1;
                }
            }
        }
        MutationOperator::WS
        | MutationOperator::NAI
        | MutationOperator::NS
        | MutationOperator::NEB => {
            let hidden = &trainable[..trainable.len() - 1];
            for (pos, &li) in hidden.iter().enumerate() {
                let neurons = child.layers()[li].neurons();
                let fan_in = child.layers()[li].incoming_len();
                let k = spec.select_count(neurons);
                match spec.operator {
                    MutationOperator::WS => {
                        if fan_in < 2 {
                            continue;
                        }
                        let picks = sel.pick(neurons, k);
                        let w = child.layers_mut()[li].weights_mut().data_mut();
                        for n in picks {
                            let row = &mut w[n * fan_in..(n + 1) * fan_in];
                            let before = row.to_vec();
                            // A few reshuffles cover the rare identity draw;
                            // a constant row cannot change at all.
                            for _ in 0..8 {
                                row.shuffle(&mut sel.rng);
                                if row != before.as_slice() {
                                    break;
                                }
                            }
                            selected += 1;
                        }
                    }
                    MutationOperator::NAI => {
                        let picks = sel.pick(neurons, k);
                        let layer = &mut child.layers_mut()[li];
                        for n in picks {
                            for v in
                                &mut layer.weights_mut().data_mut()[n * fan_in..(n + 1) * fan_in]
                            {
                                *v = -*v;
                            }
                            let b = &mut layer.bias_mut().data_mut()[n];
                            *b = -*b;
                            selected += 1;
                        }
                    }
                    MutationOperator::NS => {
                        if neurons < 2 {
                            continue;
                        }
                        let even = (k + k % 2).min(neurons - neurons % 2);
                        let picks = sel.pick(neurons, even);
                        let layer = &mut child.layers_mut()[li];
                        for pair in picks.chunks_exact(2) {
                            let (a, b) = (pair[0], pair[1]);
                            let w = layer.weights_mut().data_mut();
                            for j in 0..fan_in {
                                w.swap(a * fan_in + j, b * fan_in + j);
                            }
                            layer.bias_mut().data_mut().swap(a, b);
                            selected += 2;
                        }
                    }
                    MutationOperator::NEB => {
                        let next = trainable[pos + 1];
                        check_channel_mapping(net, li, next)?;
                        let picks = sel.pick(neurons, k);
                        for n in picks {
                            let targets = outgoing_indices(net, li, next, n);
                            let w = child.layers_mut()[next].weights_mut().data_mut();
                            for i in targets {
                                w[i] = 0.0;
                            }
                            selected += 1;
                        }
                    }
                    MutationOperator::GF => unreachable!(),
                }
            }
        }
    }

    if selected == 0 {
        return Err(Error::DegenerateMutation {
            operator: spec.operator.to_string(),
            ratio: spec.ratio(),
        });
    }
    let parent_hash = net.weight_digest();
    child.metadata_mut().insert(
        "mutation".into(),
        json!({
            "operator": spec.operator,
            "ratio": spec.ratio(),
            "seed": spec.seed,
            "parent_hash": parent_hash,
        }),
    );
    Ok(Mutant {
        network: child,
        spec,
        parent_hash,
        probe_accuracy: None,
    })
}

/// Acceptance threshold relative to the parent's probe accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep mutants with at least 90% of the parent's accuracy.
    DiverseDefault,
    /// Keep mutants with at least 95% of the parent's accuracy.
    Similar,
}

impl FilterMode {
    pub fn retention(self) -> f32 {
        match self {
            FilterMode::DiverseDefault => 0.90,
            FilterMode::Similar => 0.95,
        }
    }
}

/// Accuracy-retention check against a fixed labeled probe set.
#[derive(Debug, Clone)]
pub struct AccuracyFilter {
    probe: Dataset,
    parent_accuracy: f32,
    mode: FilterMode,
}

impl AccuracyFilter {
    pub fn new(parent: &Network, probe: Dataset, mode: FilterMode) -> Result<Self> {
        if probe.is_empty() {
            return Err(Error::Empty("probe set".into()));
        }
        let parent_accuracy = parent.accuracy(probe.images(), probe.labels());
        Ok(Self {
            probe,
            parent_accuracy,
            mode,
        })
    }

    pub fn parent_accuracy(&self) -> f32 {
        self.parent_accuracy
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    /// Measures the mutant, records `probe_accuracy`, and returns acceptance.
    pub fn check(&self, mutant: &mut Mutant) -> bool {
        let acc = mutant
            .network
            .accuracy(self.probe.images(), self.probe.labels());
        mutant.probe_accuracy = Some(acc);
        accepts(acc, self.parent_accuracy, self.mode)
    }
}

pub fn accepts(mutant_accuracy: f32, parent_accuracy: f32, mode: FilterMode) -> bool {
    mutant_accuracy >= mode.retention() * parent_accuracy
}
