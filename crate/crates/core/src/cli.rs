//! Command-line front end: JSON model configs, subcommands and exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{run_experiment, ExperimentError, ExperimentOptions};
use crate::feasible::{build_constraints, extremal_correlation, Direction, FeasibleError, Method, SolveStatus, SolverOptions};
use crate::gaussian::{mildly_covariance, rho13_interval, tree_dependent_law, GaussError, SecondMoments, ThreeLeaf};
use crate::margins::{CopulaSpec, MarginalSpec, SpecError};
use crate::model::AggregationTreeModel;
use crate::mra::{run_mra, MraError, DEFAULT_BUDGET};
use crate::output::{fmt_f64, write_csv_fields, write_csv_header};
use crate::reordering::{run_reordering, ReorderError};
use crate::rng::SeedStream;
use crate::tree::{NodeId, RootedTree, TreeShape};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Invalid(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<MraError> for CliError {
    fn from(e: MraError) -> Self {
        match e {
            MraError::BudgetExceeded { .. } | MraError::SupportCap { .. } => CliError::Budget(e.to_string()),
            MraError::Model(_) | MraError::Spec(_) | MraError::TooFewSamples(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ReorderError> for CliError {
    fn from(e: ReorderError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<GaussError> for CliError {
    fn from(e: GaussError) -> Self {
        match e {
            GaussError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<FeasibleError> for CliError {
    fn from(e: FeasibleError) -> Self {
        match e {
            FeasibleError::StartNotFeasible(_) | FeasibleError::Inconsistent(..) => CliError::Infeasible(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::UnknownPreset(_) => CliError::Invalid(e.to_string()),
            ExperimentError::Io(io) => CliError::Io(io),
            _ => CliError::Other(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum MarginalConfig {
    Normal { mean: f64, var: f64 },
    Discrete { support: Vec<f64>, probs: Vec<f64> },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CopulaConfig {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correlation: Option<Vec<Vec<f64>>>,
    },
    Independence {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
}

/// JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tree: TreeShape,
    pub marginals: BTreeMap<NodeId, MarginalConfig>,
    pub copulas: BTreeMap<NodeId, CopulaConfig>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl ModelConfig {
    /// Parses JSON, reporting the field path and line of the first error.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Parse(format!(
                "config error at line {}, column {} (field `{}`): {}",
                inner.line(),
                inner.column(),
                path,
                inner
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_model(&self) -> Result<AggregationTreeModel, CliError> {
        let tree = RootedTree::from_shape(&self.tree);
        let spec = |id: &NodeId, e: SpecError| CliError::Invalid(format!("node {id}: {e}"));
        let mut marginals = BTreeMap::new();
        for (id, m) in &self.marginals {
            let spec_m = match m {
                MarginalConfig::Normal { mean, var } => MarginalSpec::normal(*mean, *var),
                MarginalConfig::Discrete { support, probs } => MarginalSpec::discrete(support.clone(), probs.clone()),
                MarginalConfig::Bernoulli { p } => MarginalSpec::bernoulli(*p),
            }
            .map_err(|e| spec(id, e))?;
            marginals.insert(id.clone(), spec_m);
        }
        let mut copulas = BTreeMap::new();
        for (id, c) in &self.copulas {
            let kids = tree.num_children(id).unwrap_or(0);
            let spec_c = match c {
                CopulaConfig::Gaussian { rho: Some(r), correlation: None } => {
                    if kids > 2 {
                        let d = kids;
                        CopulaSpec::gaussian(DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { *r }))
                    } else {
                        CopulaSpec::bivariate(*r)
                    }
                }
                CopulaConfig::Gaussian { rho: None, correlation: Some(rows) } => {
                    let d = rows.len();
                    if rows.iter().any(|r| r.len() != d) {
                        return Err(CliError::Invalid(format!("node {id}: correlation matrix is not square")));
                    }
                    CopulaSpec::gaussian(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
                }
                CopulaConfig::Gaussian { .. } => {
                    return Err(CliError::Invalid(format!(
                        "node {id}: a gaussian copula needs exactly one of `rho` or `correlation`"
                    )))
                }
                CopulaConfig::Independence { dim } => Ok(CopulaSpec::independence(dim.unwrap_or(kids))),
            }
            .map_err(|e| spec(id, e))?;
            copulas.insert(id.clone(), spec_c);
        }
        AggregationTreeModel::new(tree, marginals, copulas).map_err(|e| CliError::Invalid(e.to_string()))
    }

    /// Config describing `model`. Re-parsing it gives back the same model.
    pub fn from_model(model: &AggregationTreeModel, seed: u64, n: Option<usize>) -> Self {
        let marginals = model
            .marginals
            .iter()
            .map(|(k, m)| {
                let c = match m {
                    MarginalSpec::Normal { mean, var } => MarginalConfig::Normal { mean: *mean, var: *var },
                    MarginalSpec::Discrete { support, probs } => MarginalConfig::Discrete {
                        support: support.clone(),
                        probs: probs.clone(),
                    },
                };
                (k.clone(), c)
            })
            .collect();
        let copulas = model
            .copulas
            .iter()
            .map(|(k, c)| {
                let cfg = match c {
                    CopulaSpec::Independence { dim } => CopulaConfig::Independence { dim: Some(*dim) },
                    CopulaSpec::Gaussian { correlation } => {
                        let d = correlation.nrows();
                        if d == 2 {
                            CopulaConfig::Gaussian {
                                rho: Some(correlation[(0, 1)]),
                                correlation: None,
                            }
                        } else {
                            CopulaConfig::Gaussian {
                                rho: None,
                                correlation: Some((0..d).map(|i| correlation.row(i).iter().copied().collect()).collect()),
                            }
                        }
                    }
                };
                (k.clone(), cfg)
            })
            .collect();
        Self {
            tree: model.tree.to_shape(),
            marginals,
            copulas,
            seed,
            n,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "treeagg", version, about = "Copula-based hierarchical risk aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Reorder,
    Mra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Barrier,
    Bisection,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model config.
    Validate {
        config: PathBuf,
        /// Print the normalized config instead of a summary.
        #[arg(long)]
        echo: bool,
    },
    /// Draw joint leaf realizations.
    Sample {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "reorder")]
        algorithm: Algorithm,
        /// Sample size; overrides the config.
        #[arg(long)]
        n: Option<usize>,
        /// Cap on random draws for the modified algorithm.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tree-dependent mean and covariance of a Gaussian model.
    Treedep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feasible range of the free correlation in a three-leaf tree.
    Bounds3 {
        /// Standard deviations `s1,s2,s3`.
        #[arg(long, value_delimiter = ',', required = true)]
        sd: Vec<f64>,
        #[arg(long, allow_hyphen_values = true)]
        rho12: f64,
        #[arg(long, allow_hyphen_values = true)]
        rho_root: f64,
        /// Emit the covariance for this value of the free correlation.
        #[arg(long, allow_hyphen_values = true)]
        rho13: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extremal correlation of two leaves over all covariances compatible
    /// with the tree.
    Extremal {
        config: PathBuf,
        /// Two leaf ids, e.g. `1.1,2.2`.
        #[arg(long, value_delimiter = ',', required = true)]
        pair: Vec<NodeId>,
        #[arg(long, value_enum, default_value = "max")]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value = "barrier")]
        method: MethodArg,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset experiment.
    Experiment {
        preset: String,
        /// Directory for the CSV tables.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelConfig, AggregationTreeModel), CliError> {
    let cfg = ModelConfig::load(path)?;
    let model = cfg.to_model()?;
    Ok((cfg, model))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config, echo } => {
            let (cfg, model) = load_model(&config)?;
            if echo {
                let echoed = ModelConfig::from_model(&model, cfg.seed, cfg.n);
                let mut s = serde_json::to_string_pretty(&echoed).map_err(|e| CliError::Other(e.to_string()))?;
                s.push('\n');
                emit(&None, s.as_bytes())
            } else {
                let msg = format!(
                    "valid: {} leaves, {} branching nodes, height {}\n",
                    model.tree.leaves().len(),
                    model.tree.branching().len(),
                    model.tree.height()
                );
                emit(&None, msg.as_bytes())
            }
        }
        Command::Sample { config, algorithm, n, budget, out } => {
            let (cfg, model) = load_model(&config)?;
            let n = n.or(cfg.n).ok_or_else(|| CliError::Invalid("sample size missing: set `n` in the config or pass --n".into()))?;
            let stream = SeedStream::new(cfg.seed);
            let block = match algorithm {
                Algorithm::Reorder => run_reordering(&model, n, &stream, true)?
                    .root()
                    .sample_block()
                    .expect("composition tracked"),
                Algorithm::Mra => run_mra(&model, n, &stream, budget)?.sample_block(),
            };
            let mut buf = Vec::new();
            block.write_csv(&mut buf)?;
            emit(&out, &buf)
        }
        Command::Treedep { config, out } => {
            let (_, model) = load_model(&config)?;
            let law = tree_dependent_law(&model)?;
            let mut buf = Vec::new();
            law.write_csv(&mut buf)?;
            emit(&out, &buf)
        }
        Command::Bounds3 { sd, rho12, rho_root, rho13, out } => {
            let [s1, s2, s3] = sd[..] else {
                return Err(CliError::Invalid(format!("--sd needs 3 values, got {}", sd.len())));
            };
            let p = ThreeLeaf::new([s1, s2, s3], rho12, rho_root)?;
            let mut buf = Vec::new();
            match rho13 {
                None => {
                    let iv = rho13_interval(&p);
                    write_csv_header(&mut buf, &["min", "mid", "half_length", "max", "tree_dep", "degenerate"])?;
                    let mut f: Vec<String> = [iv.min, iv.mid, iv.half_length, iv.max, iv.tree_dep].iter().map(|&v| fmt_f64(v)).collect();
                    f.push(iv.degenerate.to_string());
                    write_csv_fields(&mut buf, &f)?;
                }
                Some(r) => {
                    let c = mildly_covariance(&p, r)?;
                    write_csv_header(&mut buf, &["row", "1", "2", "3"])?;
                    for i in 0..3 {
                        let mut f = vec![(i + 1).to_string()];
                        f.extend(c.row(i).iter().map(|&v| fmt_f64(v)));
                        write_csv_fields(&mut buf, &f)?;
                    }
                }
            }
            emit(&out, &buf)
        }
        Command::Extremal { config, pair, direction, method, max_steps, out } => {
            let (_, model) = load_model(&config)?;
            if pair.len() != 2 {
                return Err(CliError::Invalid(format!("--pair needs 2 leaf ids, got {}", pair.len())));
            }
            let idx = |id: &NodeId| {
                model
                    .tree
                    .leaf_index(id)
                    .ok_or_else(|| CliError::Invalid(format!("{id} is not a leaf")))
            };
            let (i, j) = (idx(&pair[0])?, idx(&pair[1])?);
            let set = build_constraints(&SecondMoments::from_model(&model))?.with_objective(i, j)?;
            let mut opts = SolverOptions {
                method: match method {
                    MethodArg::Barrier => Method::Barrier,
                    MethodArg::Bisection => Method::Bisection,
                },
                ..SolverOptions::default()
            };
            if let Some(m) = max_steps {
                opts.max_steps = m;
            }
            let dir = match direction {
                DirectionArg::Max => Direction::Max,
                DirectionArg::Min => Direction::Min,
            };
            let r = extremal_correlation(&set, dir, &opts)?;
            let mut buf = Vec::new();
            write_csv_header(&mut buf, &["pair", "direction", "value", "bracket_lo", "bracket_hi", "status", "method", "steps"])?;
            write_csv_fields(
                &mut buf,
                &[
                    format!("{}-{}", pair[0], pair[1]),
                    format!("{direction:?}").to_lowercase(),
                    fmt_f64(r.value),
                    fmt_f64(r.bracket.0.min(r.bracket.1)),
                    fmt_f64(r.bracket.0.max(r.bracket.1)),
                    format!("{:?}", r.status),
                    format!("{:?}", r.method).to_lowercase(),
                    r.steps.to_string(),
                ],
            )?;
            emit(&out, &buf)?;
            if r.status == SolveStatus::BudgetExhausted {
                return Err(CliError::Budget(format!("step budget exhausted; {}", r.stall_rule)));
            }
            Ok(())
        }
        Command::Experiment { preset, out_dir, n, seed } => {
            let report = run_experiment(&preset, ExperimentOptions { n, seed })?;
            let mut text = String::new();
            for (k, v) in &report.lines {
                text.push_str(&format!("{} {k} = {v}\n", report.id));
            }
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                for (name, bytes) in &report.files {
                    let p = dir.join(name);
                    fs::write(&p, bytes)?;
                    text.push_str(&format!("{} wrote {}\n", report.id, p.display()));
                }
            }
            emit(&None, text.as_bytes())
        }
    }
}
