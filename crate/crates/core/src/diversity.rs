//! Mutant similarity and diverse mutant selection.
//!
//! Similarity between two models is linear CKA on their last-hidden-layer
//! activations over a shared probe set. Centrality in the CKA-weighted graph
//! is measured with PageRank; a low score marks a mutant unlike its peers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, ModelIoError, Result};
use crate::mutation::{
    mutate, AccuracyFilter, FilterMode, Mutant, MutationSpec, OPERATORS, RATIO_PERCENTS,
};
use crate::nn::Network;

/// Activations of one model on a probe set, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::Config(format!(
                "feature matrix needs at least 2 rows, got {rows}"
            )));
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "feature matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn centered(&self) -> Vec<f64> {
        let mut out = self.data.clone();
        for c in 0..self.cols {
            let mean = (0..self.rows).map(|r| self.get(r, c)).sum::<f64>() / self.rows as f64;
            for r in 0..self.rows {
                out[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

/// Last-hidden-layer activations of `model` on every probe sample.
pub fn extract_features(model: &Network, probe: &Dataset) -> Result<FeatureMatrix> {
    if probe.len() < 2 {
        return Err(Error::Config(format!(
            "probe set needs at least 2 samples, got {}",
            probe.len()
        )));
    }
    if probe.sample_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            got: probe.sample_shape().to_vec(),
        });
    }
    let n = model.input_len();
    let mut data = Vec::with_capacity(probe.len() * model.hidden_width());
    for chunk in probe.images().chunks(256 * n) {
        let out = model.forward_flat(chunk, chunk.len() / n);
        data.extend(out.last_hidden.iter().map(|&v| f64::from(v)));
    }
    FeatureMatrix::new(probe.len(), model.hidden_width(), data)
}

/// `AᵀB` for row-major `a` (m×p) and `b` (m×q), giving p×q.
fn cross(a: &[f64], p: usize, b: &[f64], q: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for r in 0..m {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Linear CKA: `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on column-centered features.
pub fn linear_cka(h1: &FeatureMatrix, h2: &FeatureMatrix) -> Result<f64> {
    if h1.rows != h2.rows {
        return Err(Error::ShapeMismatch {
            expected: vec![h1.rows],
            got: vec![h2.rows],
        });
    }
    let m = h1.rows;
    let x = h1.centered();
    let y = h2.centered();
    let xx = frobenius(&cross(&x, h1.cols, &x, h1.cols, m));
    let yy = frobenius(&cross(&y, h2.cols, &y, h2.cols, m));
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "feature matrix has zero variance".into(),
        ));
    }
    let yx = frobenius(&cross(&y, h2.cols, &x, h1.cols, m));
    Ok((yx * yx / (xx * yy)).min(1.0))
}

/// Symmetric matrix of pairwise CKA values with model labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Validates symmetry, unit diagonal and the `[0, 1]` range (all to 1e-6).
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let k = ids.len();
        if values.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: vec![k, k],
                got: vec![values.len()],
            });
        }
        for i in 0..k {
            if (values[i * k + i] - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSimilarity(format!(
                    "diagonal entry {i} is {}",
                    values[i * k + i]
                )));
            }
            for j in 0..k {
                let v = values[i * k + j];
                if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(Error::InvalidSimilarity(format!(
                        "entry ({i},{j}) = {v} outside [0,1]"
                    )));
                }
                if (v - values[j * k + i]).abs() > 1e-6 {
                    return Err(Error::InvalidSimilarity(format!(
                        "entry ({i},{j}) is not symmetric"
                    )));
                }
            }
        }
        Ok(Self { ids, values })
    }

    /// Pairwise CKA over a list of feature matrices.
    pub fn from_features(ids: Vec<String>, features: &[FeatureMatrix]) -> Result<Self> {
        let k = features.len();
        if ids.len() != k {
            return Err(Error::Config("one id per feature matrix required".into()));
        }
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            values[i * k + i] = 1.0;
            for j in i + 1..k {
                let s = linear_cka(&features[i], &features[j])?;
                values[i * k + j] = s;
                values[j * k + i] = s;
            }
        }
        Self::new(ids, values)
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Restriction to the given rows/columns, in that order.
    pub fn submatrix(&self, indices: &[usize]) -> SimilarityMatrix {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let values = indices
            .iter()
            .flat_map(|&i| indices.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        SimilarityMatrix { ids, values }
    }

    /// Mean of the entries above the diagonal; `None` for fewer than two models.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let k = self.size();
        if k < 2 {
            return None;
        }
        let sum: f64 = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        Some(sum / (k * (k - 1) / 2) as f64)
    }

    /// CSV with a header row of model ids; each row starts with its id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.size() {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| ModelIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        Self {
            damping: 0.85,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// PageRank scores; a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub scores: Vec<f64>,
    pub iterations: usize,
}

impl RankVector {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s < self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Column-stochastic transition matrix: column `j` spreads node `j`'s rank
/// over the other nodes in proportion to similarity. Nodes with no
/// similarity to anyone spread uniformly over all nodes.
pub fn transition_matrix(sim: &SimilarityMatrix) -> Vec<f64> {
    let k = sim.size();
    let mut p = vec![0.0; k * k];
    for j in 0..k {
        let total: f64 = (0..k)
            .filter(|&i| i != j)
            .map(|i| sim.get(i, j).max(0.0))
            .sum();
        for i in 0..k {
            p[i * k + j] = if total > 0.0 {
                if i == j {
                    0.0
                } else {
                    sim.get(i, j).max(0.0) / total
                }
            } else {
                1.0 / k as f64
            };
        }
    }
    p
}

/// Power iteration `r ← d·P·r + (1-d)/k` until the ∞-norm change drops below `tol`.
pub fn pagerank(sim: &SimilarityMatrix, cfg: PageRankConfig) -> Result<RankVector> {
    let k = sim.size();
    if k == 0 {
        return Err(Error::Empty("pagerank over an empty graph".into()));
    }
    if !(0.0..1.0).contains(&cfg.damping) || cfg.tol <= 0.0 {
        return Err(Error::Config(
            "pagerank needs damping in [0,1) and tol > 0".into(),
        ));
    }
    let p = transition_matrix(sim);
    let teleport = (1.0 - cfg.damping) / k as f64;
    let mut r = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    for it in 1..=cfg.max_iter {
        for (i, n) in next.iter_mut().enumerate() {
            *n = teleport + cfg.damping * (0..k).map(|j| p[i * k + j] * r[j]).sum::<f64>();
        }
        let change = r
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut r, &mut next);
        if change < cfg.tol {
            let sum: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= sum);
            return Ok(RankVector {
                scores: r,
                iterations: it,
            });
        }
    }
    Err(Error::Config(format!(
        "pagerank did not converge in {} iterations",
        cfg.max_iter
    )))
}

/// How the greedy loop treats a full mutant set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Evict the highest-ranked (most central) candidate.
    Diverse,
    /// Keep the first `n` accepted mutants.
    Random,
    /// Evict the lowest-ranked candidate and filter at 95% retention.
    Similar,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diverse" => Ok(Self::Diverse),
            "random" => Ok(Self::Random),
            "similar" => Ok(Self::Similar),
            other => Err(Error::Config(format!("unknown mutant mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Diverse => "diverse",
            Self::Random => "random",
            Self::Similar => "similar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyConfig {
    pub n: usize,
    /// Generation budget; `None` means `4 n`.
    pub ite: Option<usize>,
    pub mode: SelectionMode,
    /// Accuracy filter for diverse/random modes. Similar mode always
    /// filters at 95% retention.
    pub filter: Option<FilterMode>,
    pub pagerank: PageRankConfig,
}

impl GreedyConfig {
    pub fn new(n: usize, mode: SelectionMode) -> Self {
        Self {
            n,
            ite: None,
            mode,
            filter: Some(FilterMode::DiverseDefault),
            pagerank: PageRankConfig::default(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.ite.unwrap_or(4 * self.n)
    }

    pub fn effective_filter(&self) -> Option<FilterMode> {
        match self.mode {
            SelectionMode::Similar => Some(FilterMode::Similar),
            _ => self.filter,
        }
    }
}

/// One step of the greedy loop, for inspection and logging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyEvent {
    pub iteration: usize,
    pub spec: MutationSpec,
    pub probe_accuracy: f32,
    pub accepted: bool,
    /// Id of the candidate removed at this step, if an eviction happened.
    pub evicted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GreedyOutcome {
    pub mutants: Vec<Mutant>,
    /// CKA over the returned mutants, in order.
    pub similarity: SimilarityMatrix,
    /// `false` when fewer than `n` mutants were accepted within the budget.
    pub complete: bool,
    pub events: Vec<GreedyEvent>,
}

/// Operator/ratio/seed for every iteration, fixed up front from `seed`.
pub fn iteration_specs(seed: u64, ite: usize) -> Vec<MutationSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    (0..ite)
        .map(|_| {
            let op = OPERATORS[rng.random_range(0..OPERATORS.len())];
            let pct = RATIO_PERCENTS[rng.random_range(0..RATIO_PERCENTS.len())];
            let mut s: u64 = rng.random();
            while !seen.insert(s) {
                s = rng.random();
            }
            MutationSpec::new(op, f64::from(pct) / 100.0, s).expect("ratio from allowed set")
        })
        .collect()
}

fn mutant_id(iteration: usize, spec: &MutationSpec) -> String {
    format!("m{iteration}-{}-{:.2}", spec.operator, spec.ratio())
}

/// Greedy generation of `n` mutants of `parent`.
///
/// Each iteration draws an (operator, ratio) pair and a seed, mutates the
/// parent and, if the mutant passes the accuracy filter, adds it to the
/// candidate set. Once the set holds `n` mutants each newcomer triggers a
/// PageRank over the `n + 1` candidates and one eviction chosen by `mode`.
pub fn greedy_generate(
    parent: &Network,
    cfg: GreedyConfig,
    probe: &Dataset,
    seed: u64,
) -> Result<GreedyOutcome> {
    let ite = cfg.iterations();
    if cfg.n == 0 || ite < cfg.n {
        return Err(Error::Config(format!(
            "greedy generation needs ite >= n >= 1 (n = {}, ite = {ite})",
            cfg.n
        )));
    }
    let filter = match cfg.effective_filter() {
        Some(mode) => Some(AccuracyFilter::new(parent, probe.clone(), mode)?),
        None => None,
    };

    let mut members: Vec<(String, Mutant, FeatureMatrix)> = Vec::with_capacity(cfg.n + 1);
    // Similarities among `members`, row-major over the current member order.
    let mut sims: Vec<Vec<f64>> = Vec::new();
    let mut events = Vec::with_capacity(ite);

    for (iteration, mut spec) in iteration_specs(seed, ite).into_iter().enumerate() {
        if cfg.mode == SelectionMode::Random && members.len() == cfg.n {
            break;
        }
        let mut redraw = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut mutant = loop {
            match mutate(parent, spec) {
                Ok(m) => break m,
                Err(Error::DegenerateMutation { .. }) => {
                    spec = MutationSpec::new(spec.operator, spec.ratio(), redraw.random())?;
                }
                Err(e) => return Err(e),
            }
        };
        let accepted = match &filter {
            Some(f) => f.check(&mut mutant),
            None => {
                mutant.probe_accuracy =
                    Some(mutant.network.accuracy(probe.images(), probe.labels()));
                true
            }
        };
        let mut event = GreedyEvent {
            iteration,
            spec,
            probe_accuracy: mutant.probe_accuracy.unwrap_or(0.0),
            accepted,
            evicted: None,
        };
        if !accepted {
            events.push(event);
            continue;
        }

        let features = extract_features(&mutant.network, probe)?;
        let row: Vec<f64> = members
            .iter()
            .map(|(_, _, f)| linear_cka(&features, f))
            .collect::<Result<_>>()?;
        for (existing, &s) in sims.iter_mut().zip(&row) {
            existing.push(s);
        }
        let mut own = row;
        own.push(1.0);
        sims.push(own);
        members.push((mutant_id(iteration, &spec), mutant, features));

        if members.len() > cfg.n {
            let k = members.len();
            let ids = members.iter().map(|(id, _, _)| id.clone()).collect();
            let values = sims.iter().flatten().copied().collect();
            let matrix = SimilarityMatrix::new(ids, values)?;
            let rank = pagerank(&matrix, cfg.pagerank)?;
            let victim = match cfg.mode {
                SelectionMode::Similar => rank.argmin(),
                _ => rank.argmax(),
            };
            if cfg.mode != SelectionMode::Similar {
                assert!(
                    rank.scores.iter().all(|&s| s <= rank.scores[victim]),
                    "evicted candidate must hold the maximal score"
                );
            }
            event.evicted = Some(members[victim].0.clone());
            members.remove(victim);
            sims.remove(victim);
            for r in &mut sims {
                r.remove(victim);
            }
            debug_assert_eq!(members.len(), k - 1);
        }
        events.push(event);
    }

    let complete = members.len() == cfg.n;
    let ids: Vec<String> = members.iter().map(|(id, _, _)| id.clone()).collect();
    let values: Vec<f64> = sims.iter().flatten().copied().collect();
    let similarity = SimilarityMatrix::new(ids, values)?;
    Ok(GreedyOutcome {
        mutants: members.into_iter().map(|(_, m, _)| m).collect(),
        similarity,
        complete,
        events,
    })
}
