//! Attack sweeps over a victim, its mutant ensembles and repeated runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use mutattack_core::attacks::{
    attack_batch, sample_seed, AttackConfig, AttackFamily, GradientProvider,
};
use mutattack_core::diversity::{greedy_generate, GreedyConfig, SelectionMode};
use mutattack_core::ensemble::EnsembleModel;
use mutattack_core::nn::{self, Network};
use mutattack_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, HarnessError, Result};
use crate::idx::{load_dataset, Split};

pub const CSV_HEADER: [&str; 8] = [
    "attack",
    "param",
    "mutant_count",
    "mode",
    "repeat",
    "success_rate",
    "mean_time_s",
    "baseline",
];

/// Fixed ε for the mutant-count sweep (MNIST stand-in for 8/255).
pub const SWEEP_EPSILON: f32 = 0.2;
/// Fixed C&W constant for the mutant-count sweep (MNIST stand-in for c = 0.3).
pub const SWEEP_C: f32 = 10.0;

const TAG_BUDGET: usize = 1;
const TAG_PROBE: usize = 2;
const TAG_GENERATION: usize = 3;
const TAG_ATTACK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutantMode {
    /// Attack the victim alone.
    None,
    Diverse,
    Random,
    Similar,
}

impl MutantMode {
    pub const ENSEMBLE_MODES: [MutantMode; 3] = [Self::Diverse, Self::Random, Self::Similar];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Diverse => "diverse",
            Self::Random => "random",
            Self::Similar => "similar",
        }
    }

    pub fn selection(self) -> Option<SelectionMode> {
        match self {
            Self::None => None,
            Self::Diverse => Some(SelectionMode::Diverse),
            Self::Random => Some(SelectionMode::Random),
            Self::Similar => Some(SelectionMode::Similar),
        }
    }
}

impl fmt::Display for MutantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MutantMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Diverse, Self::Random, Self::Similar]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Plan(format!("unknown mutant mode '{s}'")))
    }
}

/// One attack family with the parameter values to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGrid {
    pub family: AttackFamily,
    pub params: Vec<f32>,
}

impl AttackGrid {
    pub fn new(family: AttackFamily, params: Vec<f32>) -> Self {
        Self { family, params }
    }

    pub fn default_for(family: AttackFamily) -> Self {
        Self::new(family, family.default_grid())
    }
}

/// The seven-point grids for all four attack families.
pub fn default_grid() -> Vec<AttackGrid> {
    AttackFamily::ALL
        .into_iter()
        .map(AttackGrid::default_for)
        .collect()
}

/// Single-point grids used by the mutant-count sweep.
pub fn sweep_grid(families: &[AttackFamily]) -> Vec<AttackGrid> {
    families
        .iter()
        .map(|&f| {
            AttackGrid::new(
                f,
                vec![if f == AttackFamily::Cw {
                    SWEEP_C
                } else {
                    SWEEP_EPSILON
                }],
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub grid: Vec<AttackGrid>,
    pub mutant_count: usize,
    pub mode: MutantMode,
    pub repeats: usize,
    /// Test inputs drawn per grid point before dropping misclassified ones.
    pub sample_budget: usize,
    pub seed: u64,
    /// Test inputs used for mutant accuracy filtering and CKA features.
    pub probe_size: usize,
    /// Greedy loop budget; `None` means four times the mutant count.
    pub iterations: Option<usize>,
    /// Samples per attack batch.
    pub chunk_size: usize,
}

impl ExperimentPlan {
    pub fn new(dataset: impl Into<PathBuf>, model: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            grid: default_grid(),
            mutant_count: 5,
            mode: MutantMode::Diverse,
            repeats: 5,
            sample_budget: 500,
            seed: 0,
            probe_size: 512,
            iterations: None,
            chunk_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Plan(m));
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if self.sample_budget == 0 {
            return fail("sample budget must be positive".into());
        }
        if self.probe_size < 2 {
            return fail("probe set needs at least 2 samples".into());
        }
        if self.chunk_size == 0 {
            return fail("chunk size must be positive".into());
        }
        if self.grid.is_empty() || self.grid.iter().any(|g| g.params.is_empty()) {
            return fail("attack grid is empty".into());
        }
        for g in &self.grid {
            for &p in &g.params {
                AttackConfig::for_family(g.family, p).validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRateRecord {
    pub attack: AttackFamily,
    pub param: f32,
    pub mutant_count: usize,
    pub mode: MutantMode,
    /// Repeat index; `None` marks the across-repeat mean.
    pub repeat: Option<usize>,
    pub success_rate: f64,
    pub mean_time_s: f64,
    pub baseline: bool,
}

impl SuccessRateRecord {
    fn sort_key(&self) -> (AttackFamily, u32, MutantMode, usize, usize) {
        (
            self.attack,
            self.param.to_bits(),
            self.mode,
            self.mutant_count,
            self.repeat.unwrap_or(usize::MAX),
        )
    }

    fn csv_fields(&self) -> [String; 8] {
        [
            self.attack.to_string(),
            self.param.to_string(),
            self.mutant_count.to_string(),
            self.mode.to_string(),
            self.repeat
                .map_or_else(|| "mean".to_string(), |r| r.to_string()),
            format!("{:.6}", self.success_rate),
            format!("{:.6e}", self.mean_time_s),
            self.baseline.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberProvenance {
    pub id: String,
    pub operator: String,
    pub ratio: f64,
    pub seed: u64,
    pub probe_accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub repeat: usize,
    pub mode: MutantMode,
    pub mutant_count: usize,
    pub generation_seed: u64,
    pub members: Vec<MemberProvenance>,
    /// Mean pairwise CKA among the mutants; absent for fewer than two.
    pub mean_cka: Option<f64>,
    /// False when the greedy loop ran out of iterations before reaching the count.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProvenance {
    pub attack: AttackFamily,
    pub param: f32,
    pub config: AttackConfig,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub repeat: usize,
    pub generation_seed: u64,
    pub attack_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub victim_digest: String,
    pub sample_budget: usize,
    /// Success-rate denominator: budget inputs the victim classifies correctly.
    pub correctly_classified: usize,
    pub probe_size: usize,
    pub repeats: Vec<RepeatSeeds>,
    pub grid: Vec<GridProvenance>,
    pub ensembles: Vec<EnsembleProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    /// One row per repeat.
    pub records: Vec<SuccessRateRecord>,
    /// Across-repeat means, one per grid point and ensemble setting.
    pub means: Vec<SuccessRateRecord>,
    pub provenance: Provenance,
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in self.records.iter().chain(&self.means) {
            w.write_record(r.csv_fields())?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the CSV to `path` and the provenance JSON next to it.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        fs::write(path, self.to_csv()?).map_err(io_error(path))?;
        let side = provenance_path(path);
        let json = serde_json::to_string_pretty(&self.provenance)?;
        fs::write(&side, json).map_err(io_error(&side))?;
        Ok(side)
    }

    pub fn mean(
        &self,
        attack: AttackFamily,
        param: f32,
        mode: MutantMode,
        count: usize,
    ) -> Option<&SuccessRateRecord> {
        self.means.iter().find(|r| {
            r.attack == attack && r.param == param && r.mode == mode && r.mutant_count == count
        })
    }

    pub fn repeat_rows(
        &self,
        attack: AttackFamily,
        param: f32,
        mode: MutantMode,
        count: usize,
    ) -> Vec<&SuccessRateRecord> {
        self.records
            .iter()
            .filter(|r| {
                r.attack == attack && r.param == param && r.mode == mode && r.mutant_count == count
            })
            .collect()
    }
}

/// `results.csv` → `results.provenance.json`.
pub fn provenance_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("provenance.json")
}

fn derive_seed(seed: u64, tag: usize) -> u64 {
    sample_seed(seed, tag)
}

fn grid_note(family: AttackFamily, param: f32) -> Option<String> {
    match family {
        AttackFamily::Cw if param == SWEEP_C => Some("MNIST analog of c = 0.3".into()),
        AttackFamily::Cw => None,
        _ if param == SWEEP_EPSILON => Some("MNIST analog of eps = 8/255".into()),
        _ => None,
    }
}

/// A loaded victim and test split with the attack and probe subsets fixed by the plan.
#[derive(Debug, Clone)]
pub struct Experiment {
    victim: Network,
    plan: ExperimentPlan,
    attack_set: Dataset,
    probe: Dataset,
}

impl Experiment {
    pub fn load(plan: ExperimentPlan) -> Result<Self> {
        let victim = nn::load(&plan.model)?;
        let test = load_dataset(&plan.dataset, Split::Test)?;
        Self::new(victim, &test, plan)
    }

    pub fn new(victim: Network, test: &Dataset, plan: ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let budget = test.sample_subset(plan.sample_budget, derive_seed(plan.seed, TAG_BUDGET));
        let predicted = victim.target_labels(budget.images())?;
        let correct: Vec<usize> = (0..budget.len())
            .filter(|&i| predicted[i] == budget.label(i))
            .collect();
        if correct.is_empty() {
            return Err(HarnessError::Plan(
                "the victim misclassifies every budget input".into(),
            ));
        }
        let attack_set = budget.subset(&correct);
        let probe = test.sample_subset(plan.probe_size, derive_seed(plan.seed, TAG_PROBE));
        Ok(Self {
            victim,
            plan,
            attack_set,
            probe,
        })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    pub fn victim(&self) -> &Network {
        &self.victim
    }

    /// Correctly classified budget inputs; the success-rate denominator.
    pub fn attack_set(&self) -> &Dataset {
        &self.attack_set
    }

    pub fn probe(&self) -> &Dataset {
        &self.probe
    }

    pub fn repeat_seeds(&self, repeat: usize) -> RepeatSeeds {
        RepeatSeeds {
            repeat,
            generation_seed: sample_seed(derive_seed(self.plan.seed, TAG_GENERATION), repeat),
            attack_seed: sample_seed(derive_seed(self.plan.seed, TAG_ATTACK), repeat),
        }
    }

    /// Victim plus `count` mutants selected by `mode` for one repeat.
    pub fn build_ensemble(
        &self,
        mode: MutantMode,
        count: usize,
        repeat: usize,
    ) -> Result<(EnsembleModel, EnsembleProvenance)> {
        let seeds = self.repeat_seeds(repeat);
        let mut prov = EnsembleProvenance {
            repeat,
            mode,
            mutant_count: count,
            generation_seed: seeds.generation_seed,
            members: Vec::new(),
            mean_cka: None,
            complete: true,
        };
        let selection = match mode.selection() {
            Some(s) if count > 0 => s,
            _ => return Ok((EnsembleModel::new(self.victim.clone(), vec![])?, prov)),
        };
        let mut cfg = GreedyConfig::new(count, selection);
        cfg.ite = self.plan.iterations;
        let outcome = greedy_generate(&self.victim, cfg, &self.probe, seeds.generation_seed)?;
        prov.members = outcome
            .similarity
            .ids()
            .iter()
            .zip(&outcome.mutants)
            .map(|(id, m)| MemberProvenance {
                id: id.clone(),
                operator: m.spec.operator.to_string(),
                ratio: m.spec.ratio(),
                seed: m.spec.seed,
                probe_accuracy: m.probe_accuracy,
            })
            .collect();
        prov.mean_cka = outcome.similarity.mean_off_diagonal();
        prov.complete = outcome.complete;
        let members = outcome.mutants.into_iter().map(|m| m.network).collect();
        Ok((EnsembleModel::new(self.victim.clone(), members)?, prov))
    }

    /// Success rate over the attack set and mean wall time per sample.
    pub fn attack_rate(
        &self,
        provider: &dyn GradientProvider,
        cfg: &AttackConfig,
        repeat: usize,
    ) -> Result<(f64, f64)> {
        let attack_seed = self.repeat_seeds(repeat).attack_seed;
        let n = self.attack_set.sample_len();
        let total = self.attack_set.len();
        let mut successes = 0usize;
        let start = Instant::now();
        for lo in (0..total).step_by(self.plan.chunk_size) {
            let hi = (lo + self.plan.chunk_size).min(total);
            let xs = &self.attack_set.images()[lo * n..hi * n];
            let ys = &self.attack_set.labels()[lo..hi];
            let seeds: Vec<u64> = (lo..hi).map(|i| sample_seed(attack_seed, i)).collect();
            let results = attack_batch(provider, xs, ys, cfg, &seeds)?;
            successes += results.iter().filter(|r| r.success).count();
        }
        let elapsed = start.elapsed().as_secs_f64();
        Ok((successes as f64 / total as f64, elapsed / total as f64))
    }

    fn execute(&self, settings: &[(MutantMode, usize)]) -> Result<ExperimentOutput> {
        let mut unique: Vec<(MutantMode, usize)> = Vec::new();
        for &(mode, count) in settings {
            let s = if mode == MutantMode::None || count == 0 {
                (MutantMode::None, 0)
            } else {
                (mode, count)
            };
            if !unique.contains(&s) {
                unique.push(s);
            }
        }

        let mut records = Vec::new();
        let mut ensembles = Vec::new();
        let mut repeats = Vec::new();
        for repeat in 0..self.plan.repeats {
            repeats.push(self.repeat_seeds(repeat));
            for &(mode, count) in &unique {
                let (ensemble, prov) = self.build_ensemble(mode, count, repeat)?;
                let provider: &dyn GradientProvider =
                    if count == 0 { &self.victim } else { &ensemble };
                for grid in &self.plan.grid {
                    for &param in &grid.params {
                        let cfg = AttackConfig::for_family(grid.family, param);
                        let (success_rate, mean_time_s) =
                            self.attack_rate(provider, &cfg, repeat)?;
                        records.push(SuccessRateRecord {
                            attack: grid.family,
                            param,
                            mutant_count: count,
                            mode,
                            repeat: Some(repeat),
                            success_rate,
                            mean_time_s,
                            baseline: count == 0,
                        });
                    }
                }
                if count > 0 {
                    ensembles.push(prov);
                }
            }
        }
        records.sort_by_key(SuccessRateRecord::sort_key);

        let mut groups: BTreeMap<_, Vec<&SuccessRateRecord>> = BTreeMap::new();
        for r in &records {
            groups
                .entry((r.attack, r.param.to_bits(), r.mode, r.mutant_count))
                .or_default()
                .push(r);
        }
        let means = groups
            .values()
            .map(|rows| {
                let k = rows.len() as f64;
                SuccessRateRecord {
                    repeat: None,
                    success_rate: rows.iter().map(|r| r.success_rate).sum::<f64>() / k,
                    mean_time_s: rows.iter().map(|r| r.mean_time_s).sum::<f64>() / k,
                    ..rows[0].clone()
                }
            })
            .collect();

        let grid = self
            .plan
            .grid
            .iter()
            .flat_map(|g| {
                g.params.iter().map(move |&param| GridProvenance {
                    attack: g.family,
                    param,
                    config: AttackConfig::for_family(g.family, param),
                    note: grid_note(g.family, param),
                })
            })
            .collect();
        Ok(ExperimentOutput {
            records,
            means,
            provenance: Provenance {
                master_seed: self.plan.seed,
                victim_digest: self.victim.weight_digest(),
                sample_budget: self.plan.sample_budget,
                correctly_classified: self.attack_set.len(),
                probe_size: self.probe.len(),
                repeats,
                grid,
                ensembles,
            },
        })
    }

    /// Baseline rows plus, unless the plan's mode is `none`, rows for the plan's ensemble.
    pub fn run(&self) -> Result<ExperimentOutput> {
        self.execute(&[
            (MutantMode::None, 0),
            (self.plan.mode, self.plan.mutant_count),
        ])
    }

    /// Rows for each mutant count under the plan's mode; count 0 is the baseline.
    pub fn sweep_mutant_count(&self, counts: &[usize]) -> Result<ExperimentOutput> {
        if self.plan.mode == MutantMode::None {
            return Err(HarnessError::Plan(
                "a mutant-count sweep needs an ensemble mode".into(),
            ));
        }
        if counts.is_empty() {
            return Err(HarnessError::Plan("no mutant counts given".into()));
        }
        let settings: Vec<_> = counts.iter().map(|&c| (self.plan.mode, c)).collect();
        self.execute(&settings)
    }

    /// Baseline rows plus one ensemble of the plan's size per mode.
    pub fn compare_mutant_modes(&self, modes: &[MutantMode]) -> Result<ExperimentOutput> {
        if self.plan.mutant_count == 0 {
            return Err(HarnessError::Plan(
                "mode comparison needs a positive mutant count".into(),
            ));
        }
        let mut settings = vec![(MutantMode::None, 0)];
        settings.extend(modes.iter().map(|&m| (m, self.plan.mutant_count)));
        self.execute(&settings)
    }
}

pub fn run_experiment(plan: ExperimentPlan) -> Result<ExperimentOutput> {
    Experiment::load(plan)?.run()
}
