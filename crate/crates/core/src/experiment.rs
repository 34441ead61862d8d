//! End-to-end runs: data construction, the round loop for every
//! (method, seed) cell, and output files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::client::Method;
use crate::config::{load_config, ExperimentConfig, ShiftRegime};
use crate::data::{
    apply_covariate_shift, concept_shift_step, load_table, partition_prior_shift, ClientDataset,
    GaussianMixture, LabelMap, ShiftConfig,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    read_metrics_csv, summarize, write_metrics_csv, write_summary_csv, RunHistory, SummaryTable,
};
use crate::nn::norm_layer_mask;
use crate::seed;
use crate::server::{
    run_round, ClientId, ClientPool, DataProvider, PoolMode, RoundConfig, ServerState,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn metrics_file_name(method: Method, seed: u64) -> String {
    format!("metrics_{}_seed{}.csv", method.name(), seed)
}

/// Client shards and validation data for one run seed. Shards are rebuilt on
/// demand from `(seed, client id)`, so a returning cross-silo client always
/// sees the same examples.
#[derive(Debug, Clone)]
pub struct SimulationData {
    regime: ShiftRegime,
    shift: ShiftConfig,
    balanced: ShiftConfig,
    num_domains: usize,
    train: Dataset,
    base_validation: Dataset,
    validation: Dataset,
    label_map: LabelMap,
    forced_rounds: Vec<usize>,
    seed: u64,
}

impl SimulationData {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (train, val) = match (&cfg.data_path, &cfg.val_path) {
            (Some(tp), Some(vp)) => {
                let train = load_table(tp, cfg.classes)?;
                let val = load_table(vp, cfg.classes)?;
                for d in [&train, &val] {
                    if d.dim() != cfg.dim {
                        return Err(Error::DimensionMismatch {
                            context: "data table features",
                            expected: cfg.dim,
                            got: d.dim(),
                        });
                    }
                }
                (train, val)
            }
            _ => {
                let s = seed::derive(&[cfg.data_seed, seed]);
                let mix = GaussianMixture::new(cfg.classes, cfg.dim, s)?;
                (
                    mix.sample(cfg.samples_per_class, s),
                    mix.sample(
                        cfg.val_samples_per_class,
                        seed::derive(&[seed::tag::VALIDATION, s]),
                    ),
                )
            }
        };
        Self::new(cfg, train, val, seed)
    }

    pub fn new(
        cfg: &ExperimentConfig,
        train: Dataset,
        validation: Dataset,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training data"));
        }
        if validation.is_empty() {
            return Err(Error::EmptyDataset("validation data"));
        }
        let shift = cfg.shift_config();
        let balanced = ShiftConfig {
            imbalance_ratio: 1.0,
            ..shift
        };
        let base_validation = match cfg.shift {
            ShiftRegime::Covariate => {
                let parts: Vec<Dataset> = (0..cfg.num_domains as u64)
                    .map(|d| apply_covariate_shift(&validation, d, &shift).data)
                    .collect();
                Dataset::concat(&parts)?
            }
            _ => validation,
        };
        Ok(Self {
            regime: cfg.shift,
            label_map: LabelMap::identity(train.num_classes()),
            shift,
            balanced,
            num_domains: cfg.num_domains,
            train,
            validation: base_validation.clone(),
            base_validation,
            forced_rounds: cfg.concept_shift_rounds.clone(),
            seed,
        })
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }
}

impl DataProvider for SimulationData {
    fn begin_round(&mut self, round: usize) -> u64 {
        let forced = self.forced_rounds.contains(&round);
        if self.shift.concept_shift_prob > 0.0 || forced {
            let mut rng = seed::rng(&[seed::tag::CONCEPT, self.seed, round as u64]);
            let next = concept_shift_step(
                &self.label_map,
                round,
                self.shift.concept_shift_prob,
                self.shift.concept_shift_mode,
                forced,
                &mut rng,
            );
            if next.version() != self.label_map.version() {
                self.label_map = next;
                let map = &self.label_map;
                self.validation = self.base_validation.map_labels(|l| map.apply(l));
            }
        }
        self.label_map.version()
    }

    fn client_data(&self, client: ClientId, _round: usize) -> Result<ClientDataset> {
        let client_seed = seed::derive(&[self.seed, client]);
        let mut shard = match self.regime {
            ShiftRegime::Prior => partition_prior_shift(&self.train, client_seed, &self.shift)?,
            ShiftRegime::None => partition_prior_shift(&self.train, client_seed, &self.balanced)?,
            ShiftRegime::Covariate => {
                let base = partition_prior_shift(&self.train, client_seed, &self.balanced)?;
                apply_covariate_shift(&base.data, client % self.num_domains as u64, &self.shift)
            }
        };
        if self.label_map.version() > 0 {
            let map = &self.label_map;
            shard.data = shard.data.map_labels(|l| map.apply(l));
        }
        shard.meta.client_id = Some(client);
        shard.meta.label_map_version = self.label_map.version();
        Ok(shard)
    }

    fn validation(&self) -> &Dataset {
        &self.validation
    }
}

/// Runs one (method, seed) cell and returns its history together with the
/// final server state.
pub fn run_single_detailed(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
) -> Result<(RunHistory, ServerState)> {
    let wrap = |round: usize| {
        move |e: Error| Error::Run {
            method: method.name().to_string(),
            seed,
            round,
            source: Box::new(e),
        }
    };
    let spec = cfg.model_spec().map_err(wrap(0))?;
    let mut data = SimulationData::from_config(cfg, seed).map_err(wrap(0))?;
    let round_cfg = RoundConfig {
        method,
        hp: cfg.hyper_params().map_err(wrap(0))?,
        local_mask: cfg.fedbn.then(|| norm_layer_mask(&spec)),
        spec,
        seed,
        weighted_aggregation: cfg.weighted_aggregation,
    };
    // Initialization and sampling depend only on the seed, never the method.
    let mut state = ServerState::new(&round_cfg.spec, method, seed);
    let mut pool = match cfg.pool {
        PoolMode::CrossDevice => ClientPool::cross_device(seed),
        PoolMode::CrossSilo => ClientPool::cross_silo(cfg.pool_size, seed),
    };
    let mut history = RunHistory::new(method, seed, cfg.digest());
    for t in 1..=cfg.rounds {
        let rec = run_round(&mut state, &mut pool, &round_cfg, &mut data).map_err(wrap(t))?;
        history.push(rec).map_err(wrap(t))?;
    }
    Ok((history, state))
}

pub fn run_single(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunHistory> {
    run_single_detailed(cfg, method, seed).map(|(h, _)| h)
}

/// Every history of a finished experiment plus its summary.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub histories: Vec<RunHistory>,
    pub summary: SummaryTable,
    pub files: Vec<PathBuf>,
}

/// Runs the methods x seeds matrix without touching the filesystem.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Vec<RunHistory>> {
    cfg.validate()?;
    let cells: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunHistory>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, s)| run_single(cfg, m, s))
            .collect()
    });
    results.into_iter().collect()
}

/// Runs every cell and writes one metrics CSV per run, the canonical config
/// and `summary.csv` into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let histories = run_matrix(cfg)?;

    let mut files = Vec::new();
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.canonical().to_toml()?)
        .map_err(|e| Error::io(&config_path, e))?;
    files.push(config_path);
    for h in &histories {
        let p = dir.join(metrics_file_name(h.method, h.seed));
        write_metrics_csv(h, &p)?;
        files.push(p);
    }
    let summary = summarize(&histories, cfg.epochs, cfg.acc_target)?;
    let p = dir.join(SUMMARY_FILE);
    write_summary_csv(&summary, &p)?;
    files.push(p);
    Ok(ExperimentOutput {
        histories,
        summary,
        files,
    })
}

/// Rebuilds `summary.csv` from the metrics files in `dir`. Files whose digest
/// differs from the stored config are rejected.
pub fn summarize_dir(dir: &Path) -> Result<SummaryTable> {
    let cfg = load_config(&dir.join(CONFIG_FILE), &[])?;
    let digest = cfg.digest();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    let mut histories = Vec::with_capacity(paths.len());
    for p in &paths {
        let h = read_metrics_csv(p)?;
        if h.digest != digest {
            return Err(Error::MixedDigest(digest, h.digest));
        }
        histories.push(h);
    }
    let summary = summarize(&histories, cfg.epochs, cfg.acc_target)?;
    write_summary_csv(&summary, &dir.join(SUMMARY_FILE))?;
    Ok(summary)
}
