//! Server loop: sampling, broadcast construction, aggregation, state store
//! and communication metering.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{
    client_update, BroadcastPayload, ClientOutput, ClientState, HyperParams, Method,
};
use crate::data::ClientDataset;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ledger::CommLedger;
use crate::nn::{evaluate, init_model, ModelSpec, ParamMask, ParamVector};
use crate::seed;

pub type ClientId = u64;

/// A client's output and shard size; `None` when its shard was empty.
type ClientResult = Result<(ClientId, Option<(ClientOutput, usize)>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Effectively unbounded population; each client is seen at most once.
    #[default]
    CrossDevice,
    /// Small fixed roster; clients return round after round.
    CrossSilo,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::CrossDevice => "cross-device",
            PoolMode::CrossSilo => "cross-silo",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientPool {
    mode: PoolMode,
    roster_size: usize,
    seed: u64,
    next_fresh: ClientId,
}

impl ClientPool {
    pub fn cross_device(seed: u64) -> Self {
        Self {
            mode: PoolMode::CrossDevice,
            roster_size: 0,
            seed,
            next_fresh: 0,
        }
    }

    pub fn cross_silo(roster_size: usize, seed: u64) -> Self {
        Self {
            mode: PoolMode::CrossSilo,
            roster_size,
            seed,
            next_fresh: 0,
        }
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn roster_size(&self) -> usize {
        self.roster_size
    }

    /// `k` distinct ids. Cross-silo draws uniformly without replacement from
    /// the roster; cross-device hands out never-before-seen ids.
    pub fn sample_clients(&mut self, k: usize, round: usize) -> Result<Vec<ClientId>> {
        match self.mode {
            PoolMode::CrossDevice => {
                let start = self.next_fresh;
                self.next_fresh += k as u64;
                Ok((start..self.next_fresh).collect())
            }
            PoolMode::CrossSilo => {
                if k > self.roster_size {
                    return Err(Error::RosterTooSmall {
                        requested: k,
                        available: self.roster_size,
                    });
                }
                let mut rng = seed::rng(&[seed::tag::SAMPLER, self.seed, round as u64]);
                let mut ids: Vec<ClientId> =
                    rand::seq::index::sample(&mut rng, self.roster_size, k)
                        .into_iter()
                        .map(|i| i as ClientId)
                        .collect();
                ids.sort_unstable();
                Ok(ids)
            }
        }
    }
}

/// Per-client records kept across rounds. Every read and write is counted so
/// stateless runs can prove they never touched it.
#[derive(Debug, Clone, Default)]
pub struct StateStore {
    states: BTreeMap<ClientId, ClientState>,
    accesses: u64,
}

impl StateStore {
    pub fn get(&mut self, id: ClientId) -> Option<ClientState> {
        self.accesses += 1;
        self.states.get(&id).cloned()
    }

    pub fn insert(&mut self, id: ClientId, state: ClientState) {
        self.accesses += 1;
        self.states.insert(id, state);
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Last round's FedCurv uploads: `(I_j, I_j * W_j)` per client.
#[derive(Debug, Clone, Default)]
pub struct FisherBook {
    contributions: BTreeMap<ClientId, (ParamVector, ParamVector)>,
}

impl FisherBook {
    /// Sums over every contributor except `exclude`.
    pub fn sums_excluding(&self, exclude: ClientId, d: usize) -> (ParamVector, ParamVector) {
        let mut f = ParamVector::zeros(d);
        let mut g = ParamVector::zeros(d);
        for (id, (fi, gi)) in &self.contributions {
            if *id == exclude {
                continue;
            }
            f.iter_mut().zip(fi.iter()).for_each(|(a, b)| *a += b);
            g.iter_mut().zip(gi.iter()).for_each(|(a, b)| *a += b);
        }
        (f, g)
    }

    pub fn len(&self) -> usize {
        self.contributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contributions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Rounds completed so far.
    pub round: usize,
    /// `W^{t-1}` for the next round.
    pub current: ParamVector,
    /// `W^{t-2}` for the next round; absent before the first round completes.
    pub previous: Option<ParamVector>,
    /// SCAFFOLD global control variate `c`.
    pub control_variate: Option<ParamVector>,
    pub fisher_book: Option<FisherBook>,
    pub store: StateStore,
    pub ledger: CommLedger,
    /// Mean of the clients' norm-layer parameters, for reporting only.
    pub norm_mean: Option<ParamVector>,
}

impl ServerState {
    pub fn new(spec: &ModelSpec, method: Method, init_seed: u64) -> Self {
        let d = spec.num_params();
        Self {
            round: 0,
            current: init_model(spec, init_seed),
            previous: None,
            control_variate: (method == Method::Scaffold).then(|| ParamVector::zeros(d)),
            fisher_book: None,
            store: StateStore::default(),
            ledger: CommLedger::new(d),
            norm_mean: None,
        }
    }
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub method: Method,
    pub hp: HyperParams,
    pub spec: ModelSpec,
    /// Keys per-client shuffling streams.
    pub seed: u64,
    /// FedBN: coordinates kept local instead of averaged.
    pub local_mask: Option<ParamMask>,
    /// Weight client models by shard size instead of `1/K`.
    pub weighted_aggregation: bool,
}

pub trait DataProvider: Sync {
    /// Called once at the start of every round; returns the label-map version
    /// in force for that round.
    fn begin_round(&mut self, round: usize) -> u64;

    fn client_data(&self, client: ClientId, round: usize) -> Result<ClientDataset>;

    fn validation(&self) -> &Dataset;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub val_acc: f64,
    pub s2c_floats: u64,
    pub c2s_floats: u64,
    pub participants: Vec<ClientId>,
    /// Sampled clients that produced no update (empty shard).
    pub dropped: Vec<ClientId>,
    pub labelmap_version: u64,
}

fn diff_scaled(a: &ParamVector, b: &ParamVector, scale: f64) -> ParamVector {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) / scale)
        .collect::<Vec<_>>()
        .into()
}

/// What `client` receives this round. Components whose history does not exist
/// yet are omitted and the payload is flagged as first-round.
pub fn build_broadcast(
    method: Method,
    state: &ServerState,
    client: ClientId,
    mode: PoolMode,
    eta: f64,
) -> BroadcastPayload {
    let mut payload = BroadcastPayload::model_only(method, state.current.clone());
    match method {
        Method::FedAvg | Method::FedProx | Method::FedPd => {}
        Method::FedFor => match (&state.previous, mode) {
            (None, _) => payload.first_round = true,
            (Some(prev), PoolMode::CrossDevice) => payload.prev_global = Some(prev.clone()),
            (Some(prev), PoolMode::CrossSilo) => {
                payload.global_grad = Some(diff_scaled(prev, &state.current, eta))
            }
        },
        Method::Scaffold => {
            payload.global_grad = Some(
                state
                    .control_variate
                    .clone()
                    .unwrap_or_else(|| ParamVector::zeros(state.current.len())),
            );
        }
        Method::FedCurv => match &state.fisher_book {
            Some(book) if !book.is_empty() => {
                let (f, g) = book.sums_excluding(client, state.current.len());
                payload.fedcurv_fisher_sum = Some(f);
                payload.fedcurv_fisher_weighted_sum = Some(g);
            }
            _ => payload.first_round = true,
        },
    }
    payload
}

/// Swaps in the client's own values on masked-out coordinates.
fn personalize(payload: &mut BroadcastPayload, mask: &ParamMask, local: &ParamVector) {
    for (i, &keep) in mask.included().iter().enumerate() {
        if keep {
            continue;
        }
        payload.current_global[i] = local[i];
        if let Some(prev) = payload.prev_global.as_mut() {
            prev[i] = local[i];
        }
        if payload.method == Method::FedFor {
            if let Some(dir) = payload.global_grad.as_mut() {
                dir[i] = 0.0;
            }
        }
    }
}

fn check_models(models: &[ParamVector]) -> Result<usize> {
    let first = models
        .first()
        .ok_or(Error::EmptyDataset("no models to aggregate"))?;
    let d = first.len();
    for m in models {
        m.check_len(d, "aggregate")?;
    }
    Ok(d)
}

/// Unweighted coordinate mean. Computed as a running mean, so averaging `K`
/// copies of one model returns it bit for bit.
pub fn aggregate(
    models: &[ParamVector],
    mask: Option<(&ParamMask, &ParamVector)>,
) -> Result<ParamVector> {
    aggregate_weighted(models, None, mask)
}

/// Weighted running mean; `weights` of `None` means uniform. Masked-out
/// coordinates keep the server's previous value.
pub fn aggregate_weighted(
    models: &[ParamVector],
    weights: Option<&[f64]>,
    mask: Option<(&ParamMask, &ParamVector)>,
) -> Result<ParamVector> {
    let d = check_models(models)?;
    if let Some(w) = weights {
        if w.len() != models.len() {
            return Err(Error::DimensionMismatch {
                context: "aggregation weights",
                expected: models.len(),
                got: w.len(),
            });
        }
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid(
                "weights",
                "aggregation weights must be positive",
            ));
        }
    }
    let mut mean = models[0].clone();
    let mut total = weights.map_or(1.0, |w| w[0]);
    for (k, m) in models.iter().enumerate().skip(1) {
        let wk = weights.map_or(1.0, |w| w[k]);
        total += wk;
        let frac = wk / total;
        for (a, b) in mean.iter_mut().zip(m.iter()) {
            *a += frac * (b - *a);
        }
    }
    if let Some((mask, previous)) = mask {
        mask.included()
            .len()
            .eq(&d)
            .then_some(())
            .ok_or(Error::DimensionMismatch {
                context: "aggregation mask",
                expected: d,
                got: mask.len(),
            })?;
        previous.check_len(d, "aggregation previous model")?;
        for ((a, &keep), &p) in mean.iter_mut().zip(mask.included()).zip(previous.iter()) {
            if !keep {
                *a = p;
            }
        }
    }
    Ok(mean)
}

/// One global iteration. Mutates `state` in place and returns the round's record.
pub fn run_round(
    state: &mut ServerState,
    pool: &mut ClientPool,
    cfg: &RoundConfig,
    provider: &mut dyn DataProvider,
) -> Result<RoundRecord> {
    let t = state.round + 1;
    let d = cfg.spec.num_params();
    let version = provider.begin_round(t);
    let mode = pool.mode();
    let ids = pool.sample_clients(cfg.hp.clients_per_round, t)?;
    state.ledger.begin_round(t);

    let jobs: Vec<(ClientId, BroadcastPayload, Option<ClientState>)> = ids
        .iter()
        .map(|&id| {
            let stored = match mode {
                PoolMode::CrossSilo => state.store.get(id),
                PoolMode::CrossDevice => None,
            };
            let mut payload = build_broadcast(cfg.method, state, id, mode, cfg.hp.eta);
            if let (Some(mask), Some(local)) = (
                &cfg.local_mask,
                stored.as_ref().and_then(|s| s.last_local_model.as_ref()),
            ) {
                personalize(&mut payload, mask, local);
            }
            (id, payload, stored)
        })
        .collect();

    let provider: &dyn DataProvider = provider;
    let results: Vec<ClientResult> = jobs
        .par_iter()
        .map(|(id, payload, stored)| {
            let shard = provider.client_data(*id, t)?;
            if shard.is_empty() {
                return Ok((*id, None));
            }
            let client_seed = seed::derive(&[cfg.seed, *id, t as u64]);
            let out = client_update(
                payload,
                &shard.data,
                &cfg.hp,
                &cfg.spec,
                client_seed,
                stored.as_ref(),
            )?;
            Ok((*id, Some((out, shard.data.len()))))
        })
        .collect();

    let mut outputs: Vec<(ClientId, ClientOutput, usize)> = Vec::with_capacity(ids.len());
    let mut dropped = Vec::new();
    for r in results {
        match r? {
            (id, Some((out, n))) => outputs.push((id, out, n)),
            (id, None) => dropped.push(id),
        }
    }
    outputs.sort_by_key(|(id, _, _)| *id);
    dropped.sort_unstable();

    for (_, payload, _) in &jobs {
        state.ledger.send(&payload.items());
    }
    for (_, out, _) in &outputs {
        state.ledger.receive(&out.upload_items());
    }
    if outputs.is_empty() {
        return Err(Error::NoUpdates { round: t });
    }

    let models: Vec<ParamVector> = outputs.iter().map(|(_, o, _)| o.model.clone()).collect();
    let weights: Option<Vec<f64>> = cfg
        .weighted_aggregation
        .then(|| outputs.iter().map(|(_, _, n)| *n as f64).collect());
    let mask = cfg.local_mask.as_ref().map(|m| (m, &state.current));
    let next = aggregate_weighted(&models, weights.as_deref(), mask)?;

    if let Some(mask) = &cfg.local_mask {
        let plain = aggregate(&models, None)?;
        let mut report = ParamVector::zeros(d);
        for (i, &keep) in mask.included().iter().enumerate() {
            if !keep {
                report[i] = plain[i];
            }
        }
        state.norm_mean = Some(report);
    }

    match cfg.method {
        Method::Scaffold => {
            let cvs: Vec<ParamVector> = outputs
                .iter()
                .filter_map(|(_, o, _)| o.control_variate.clone())
                .collect();
            state.control_variate = Some(aggregate(&cvs, None)?);
        }
        Method::FedCurv => {
            let mut book = FisherBook::default();
            for (id, out, _) in &outputs {
                if let Some(fisher) = &out.fisher {
                    let weighted: ParamVector = fisher
                        .iter()
                        .zip(out.model.iter())
                        .map(|(f, w)| f * w)
                        .collect::<Vec<_>>()
                        .into();
                    book.contributions.insert(*id, (fisher.clone(), weighted));
                }
            }
            state.fisher_book = Some(book);
        }
        _ => {}
    }

    if mode == PoolMode::CrossSilo && (cfg.method.is_stateful() || cfg.local_mask.is_some()) {
        for (id, out, _) in &outputs {
            let mut st = out.state.clone();
            if cfg.local_mask.is_some() && st.last_local_model.is_none() {
                st.last_local_model = Some(out.model.clone());
            }
            state.store.insert(*id, st);
        }
    }

    state.previous = Some(std::mem::replace(&mut state.current, next));
    state.round = t;

    let val_acc = evaluate(&state.current, provider.validation(), &cfg.spec)?;
    let traffic = state.ledger.round(t).expect("round opened above");
    Ok(RoundRecord {
        round: t,
        val_acc,
        s2c_floats: traffic.s2c.total(),
        c2s_floats: traffic.c2s.total(),
        participants: outputs.iter().map(|(id, _, _)| *id).collect(),
        dropped,
        labelmap_version: version,
    })
}
