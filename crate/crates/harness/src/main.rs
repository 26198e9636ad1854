use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mutattack_core::attacks::{AttackConfig, AttackFamily, GradientProvider};
use mutattack_core::diversity::{
    extract_features, greedy_generate, GreedyConfig, SimilarityMatrix,
};
use mutattack_core::ensemble::{load_ensemble, EnsembleManifest, EnsembleModel};
use mutattack_core::mutation::{mutate, MutationOperator, MutationSpec};
use mutattack_core::nn::{self, Network};
use mutattack_harness::error::{HarnessError, Result};
use mutattack_harness::experiment::{
    sweep_grid, AttackGrid, Experiment, ExperimentPlan, MutantMode,
};
use mutattack_harness::gradmap::dump_gradient_map;
use mutattack_harness::idx::{load_dataset, Split};
use mutattack_harness::victim::{train_victim, VictimSpec};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(
    name = "mutattack",
    about = "Mutant-ensemble gradient attacks on MNIST models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a Lenet victim on MNIST.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Training temperature (100 yields a gradient-masking model).
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one mutation operator to a model.
    Mutate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        operator: MutationOperator,
        #[arg(long, default_value_t = 0.01)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a mutant set with the greedy PageRank loop and save it as an ensemble.
    Diversify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        mutants: usize,
        #[arg(long, default_value = "diverse")]
        mode: MutantMode,
        #[arg(long, default_value_t = 512)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for mutants, manifest and similarity matrix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an ensemble manifest from a victim and mutant files.
    Ensemble {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "member", num_args = 1..)]
        members: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a model or ensemble manifest at one grid point.
    Attack {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        attack: AttackFamily,
        #[arg(long)]
        eps: Option<f32>,
        #[arg(long)]
        c: Option<f32>,
        #[arg(long, default_value_t = 500)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline and ensemble attacks over the parameter grids with repeats.
    Experiment(PlanArgs),
    /// Success rate against mutant counts 0..=N at the fixed sweep parameters.
    SweepMutants(PlanArgs),
    /// Diverse, random and similar ensembles of the same size.
    CompareModes(PlanArgs),
    /// Pairwise CKA among the mutants of an ensemble manifest.
    CkaMatrix {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 512)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel gradient magnitude for one test image.
    GradMap {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long)]
    dataset: PathBuf,
    /// Model file, or an ensemble manifest ending in `.json`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Attack families to run (default: all).
    #[arg(long, value_delimiter = ',')]
    attack: Vec<AttackFamily>,
    /// ε values for FGSM/BIM/PGD (default: the seven-point grid).
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f32>,
    /// C&W constants (default: 7..=13).
    #[arg(long, value_delimiter = ',')]
    c: Vec<f32>,
    #[arg(long, default_value_t = 5)]
    mutants: usize,
    #[arg(long, default_value = "diverse")]
    mode: MutantMode,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    budget: usize,
    #[arg(long)]
    out: PathBuf,
}

impl PlanArgs {
    fn families(&self) -> Vec<AttackFamily> {
        if self.attack.is_empty() {
            AttackFamily::ALL.to_vec()
        } else {
            self.attack.clone()
        }
    }

    fn grid(&self) -> Vec<AttackGrid> {
        self.families()
            .into_iter()
            .map(|f| match f {
                AttackFamily::Cw if !self.c.is_empty() => AttackGrid::new(f, self.c.clone()),
                AttackFamily::Cw => AttackGrid::default_for(f),
                _ if !self.eps.is_empty() => AttackGrid::new(f, self.eps.clone()),
                _ => AttackGrid::default_for(f),
            })
            .collect()
    }

    fn plan(&self, grid: Vec<AttackGrid>) -> ExperimentPlan {
        ExperimentPlan {
            grid,
            mutant_count: self.mutants,
            mode: self.mode,
            repeats: self.repeats,
            sample_budget: self.budget,
            seed: self.seed,
            ..ExperimentPlan::new(&self.dataset, &self.model)
        }
    }
}

enum Loaded {
    Single(Network),
    Ensemble(EnsembleModel),
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Ok(Self::Ensemble(load_ensemble(path)?))
        } else {
            Ok(Self::Single(nn::load(path)?))
        }
    }

    fn provider(&self) -> &dyn GradientProvider {
        match self {
            Self::Single(n) => n,
            Self::Ensemble(e) => e,
        }
    }

    fn victim(&self) -> &Network {
        match self {
            Self::Single(n) => n,
            Self::Ensemble(e) => e.original(),
        }
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn attack_param(family: AttackFamily, eps: Option<f32>, c: Option<f32>) -> Result<f32> {
    let (value, flag) = if family == AttackFamily::Cw {
        (c, "--c")
    } else {
        (eps, "--eps")
    };
    value.ok_or_else(|| HarnessError::Plan(format!("{family} needs {flag}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            dataset,
            temperature,
            epochs,
            seed,
            init_seed,
            out,
        } => {
            let spec = VictimSpec {
                temperature,
                epochs,
                init_seed,
                train_seed: seed,
            };
            let model = train_victim(&dataset, &spec)?;
            let test = load_dataset(&dataset, Split::Test)?;
            nn::save(&model, &out)?;
            emit(
                json!({ "model": out, "test_accuracy": model.accuracy(test.images(), test.labels()) }),
            );
        }
        Command::Mutate {
            model,
            operator,
            ratio,
            seed,
            out,
        } => {
            let parent = nn::load(&model)?;
            let mutant = mutate(&parent, MutationSpec::new(operator, ratio, seed)?)?;
            nn::save(&mutant.network, &out)?;
            emit(json!({ "mutant": out, "parent_hash": mutant.parent_hash }));
        }
        Command::Diversify {
            dataset,
            model,
            mutants,
            mode,
            probe,
            seed,
            out,
        } => {
            let selection = mode
                .selection()
                .ok_or_else(|| HarnessError::Plan("diversify needs an ensemble mode".into()))?;
            let parent = nn::load(&model)?;
            let test = load_dataset(&dataset, Split::Test)?;
            let probe = test.sample_subset(probe, seed);
            let outcome =
                greedy_generate(&parent, GreedyConfig::new(mutants, selection), &probe, seed)?;
            fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            let victim_copy = out.join("victim.mutn");
            nn::save(&parent, &victim_copy)?;
            let mut members = vec![PathBuf::from("victim.mutn")];
            for (id, m) in outcome.similarity.ids().iter().zip(&outcome.mutants) {
                let name = PathBuf::from(format!("{id}.mutn"));
                nn::save(&m.network, out.join(&name))?;
                members.push(name);
            }
            EnsembleManifest::new(members).save(out.join("ensemble.json"))?;
            outcome.similarity.write_csv(out.join("cka.csv"))?;
            emit(json!({
                "manifest": out.join("ensemble.json"),
                "mutants": outcome.mutants.len(),
                "complete": outcome.complete,
                "mean_cka": outcome.similarity.mean_off_diagonal(),
            }));
        }
        Command::Ensemble {
            model,
            members,
            out,
        } => {
            let mut all = vec![model];
            all.extend(members);
            let manifest = EnsembleManifest::new(all);
            let base = out.parent().unwrap_or(Path::new(""));
            manifest.build(base)?;
            manifest.save(&out)?;
            emit(json!({ "manifest": out, "members": manifest.members.len() }));
        }
        Command::Attack {
            target,
            attack,
            eps,
            c,
            budget,
            seed,
            out,
        } => {
            let param = attack_param(attack, eps, c)?;
            let loaded = Loaded::open(&target.model)?;
            let test = load_dataset(&target.dataset, Split::Test)?;
            let plan = ExperimentPlan {
                grid: vec![AttackGrid::new(attack, vec![param])],
                repeats: 1,
                sample_budget: budget,
                seed,
                ..ExperimentPlan::new(&target.dataset, &target.model)
            };
            let exp = Experiment::new(loaded.victim().clone(), &test, plan)?;
            let (rate, time) = exp.attack_rate(
                loaded.provider(),
                &AttackConfig::for_family(attack, param),
                0,
            )?;
            let line = json!({
                "attack": attack,
                "param": param,
                "models": loaded.provider().model_count(),
                "samples": exp.attack_set().len(),
                "success_rate": rate,
                "mean_time_s": time,
            });
            if let Some(out) = out {
                fs::write(&out, format!("{line}\n"))
                    .map_err(|source| HarnessError::Io { path: out, source })?;
            }
            emit(line);
        }
        Command::Experiment(args) => {
            let exp = Experiment::load(args.plan(args.grid()))?;
            let output = exp.run()?;
            let side = output.save(&args.out)?;
            emit(json!({ "csv": args.out, "provenance": side, "rows": output.records.len() }));
        }
        Command::SweepMutants(args) => {
            let grid = if args.eps.is_empty() && args.c.is_empty() {
                sweep_grid(&args.families())
            } else {
                args.grid()
            };
            let exp = Experiment::load(args.plan(grid))?;
            let counts: Vec<usize> = (0..=args.mutants).collect();
            let output = exp.sweep_mutant_count(&counts)?;
            let side = output.save(&args.out)?;
            emit(json!({ "csv": args.out, "provenance": side, "rows": output.records.len() }));
        }
        Command::CompareModes(args) => {
            let exp = Experiment::load(args.plan(args.grid()))?;
            let output = exp.compare_mutant_modes(&MutantMode::ENSEMBLE_MODES)?;
            let side = output.save(&args.out)?;
            emit(json!({ "csv": args.out, "provenance": side, "rows": output.records.len() }));
        }
        Command::CkaMatrix {
            target,
            probe,
            seed,
            out,
        } => {
            let ensemble = load_ensemble(&target.model)?;
            let test = load_dataset(&target.dataset, Split::Test)?;
            let probe = test.sample_subset(probe, seed);
            let features = ensemble
                .members()
                .iter()
                .map(|m| extract_features(m, &probe))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let ids = (0..features.len())
                .map(|i| {
                    if i == 0 {
                        "victim".to_string()
                    } else {
                        format!("member{i}")
                    }
                })
                .collect();
            let sim = SimilarityMatrix::from_features(ids, &features)?;
            sim.write_csv(&out)?;
            emit(json!({ "csv": out, "mean_cka": sim.mean_off_diagonal() }));
        }
        Command::GradMap { target, index, out } => {
            let loaded = Loaded::open(&target.model)?;
            let test = load_dataset(&target.dataset, Split::Test)?;
            if index >= test.len() {
                return Err(HarnessError::Plan(format!(
                    "index {index} outside the test split"
                )));
            }
            let map = dump_gradient_map(
                loaded.provider(),
                &test.sample(index),
                test.label(index),
                &out,
            )?;
            emit(
                json!({ "csv": out, "rows": map.rows, "cols": map.cols, "max_abs_gradient": map.max() }),
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": message.trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
