//! Local update rules run on a client for one round.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ledger::PayloadItem;
use crate::nn::{loss_and_grad, Batch, ModelSpec, ParamVector};
use crate::regularizer::{FirstOrder, FisherPenalty, Linear, Proximal, Regularizer};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedAvg,
    FedProx,
    FedCurv,
    /// FedPD / FedDyn local objective.
    #[serde(alias = "feddyn")]
    FedPd,
    Scaffold,
    FedFor,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedAvg,
        Method::FedProx,
        Method::FedCurv,
        Method::FedPd,
        Method::Scaffold,
        Method::FedFor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedCurv => "fedcurv",
            Method::FedPd => "fedpd",
            Method::Scaffold => "scaffold",
            Method::FedFor => "fedfor",
        }
    }

    /// Whether the method keeps per-client statistics across rounds.
    pub fn is_stateful(self) -> bool {
        matches!(self, Method::FedPd | Method::Scaffold)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Method::FedAvg),
            "fedprox" => Ok(Method::FedProx),
            "fedcurv" => Ok(Method::FedCurv),
            "fedpd" | "feddyn" => Ok(Method::FedPd),
            "scaffold" => Ok(Method::Scaffold),
            "fedfor" => Ok(Method::FedFor),
            other => Err(Error::invalid(
                "methods",
                format!("unknown method `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub eta: f64,
    pub alpha: f64,
    /// FedCurv penalty weight; tuned independently of `alpha`.
    pub fedcurv_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clients_per_round: usize,
    /// Keep only the non-negative part of the first-order penalty.
    pub rectify: bool,
}

impl HyperParams {
    pub fn new(
        eta: f64,
        alpha: f64,
        epochs: usize,
        batch_size: usize,
        clients_per_round: usize,
    ) -> Result<Self> {
        let hp = Self {
            eta,
            alpha,
            fedcurv_alpha: alpha,
            epochs,
            batch_size,
            clients_per_round,
            rectify: true,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_fedcurv_alpha(mut self, alpha: f64) -> Result<Self> {
        self.fedcurv_alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn unrectified(mut self) -> Self {
        self.rectify = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(
                "eta",
                "learning rate must be finite and > 0",
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be finite and >= 0"));
        }
        if !(self.fedcurv_alpha.is_finite() && self.fedcurv_alpha >= 0.0) {
            return Err(Error::invalid("fedcurv_alpha", "must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.clients_per_round == 0 {
            return Err(Error::invalid("clients_per_round", "must be >= 1"));
        }
        Ok(())
    }
}

/// What the server sends to one client.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastPayload {
    pub method: Method,
    /// `W^{t-1}`.
    pub current_global: ParamVector,
    /// `W^{t-2}` (FedFOR, cross-device).
    pub prev_global: Option<ParamVector>,
    /// FedFOR cross-silo: `(W^{t-2} - W^{t-1}) / eta`. SCAFFOLD: `c`.
    pub global_grad: Option<ParamVector>,
    pub fedcurv_fisher_sum: Option<ParamVector>,
    pub fedcurv_fisher_weighted_sum: Option<ParamVector>,
    /// Set when the method wanted history that does not exist yet.
    pub first_round: bool,
}

impl BroadcastPayload {
    pub fn model_only(method: Method, current_global: ParamVector) -> Self {
        Self {
            method,
            current_global,
            prev_global: None,
            global_grad: None,
            fedcurv_fisher_sum: None,
            fedcurv_fisher_weighted_sum: None,
            first_round: false,
        }
    }

    /// Components actually on the wire.
    pub fn items(&self) -> Vec<PayloadItem> {
        let mut items = vec![PayloadItem::GlobalModel];
        if self.prev_global.is_some() {
            items.push(PayloadItem::PrevGlobalModel);
        }
        if self.global_grad.is_some() {
            items.push(match self.method {
                Method::Scaffold => PayloadItem::GlobalControlVariate,
                _ => PayloadItem::GlobalDirection,
            });
        }
        if self.fedcurv_fisher_sum.is_some() {
            items.push(PayloadItem::FisherSum);
        }
        if self.fedcurv_fisher_weighted_sum.is_some() {
            items.push(PayloadItem::FisherWeightedSum);
        }
        items
    }

    /// Checks that exactly the fields the method uses are present, at length `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        let method = self.method.name();
        let check = |v: &Option<ParamVector>, name: &'static str| -> Result<()> {
            match v {
                Some(p) => p.check_len(d, name),
                None => Ok(()),
            }
        };
        self.current_global.check_len(d, "current_global")?;
        check(&self.prev_global, "prev_global")?;
        check(&self.global_grad, "global_grad")?;
        check(&self.fedcurv_fisher_sum, "fedcurv_fisher_sum")?;
        check(
            &self.fedcurv_fisher_weighted_sum,
            "fedcurv_fisher_weighted_sum",
        )?;

        let unexpected = |present: bool, name: &'static str| -> Result<()> {
            if present {
                Err(Error::invalid(
                    "payload",
                    format!("{method} payload must not carry {name}"),
                ))
            } else {
                Ok(())
            }
        };
        let fisher =
            self.fedcurv_fisher_sum.is_some() || self.fedcurv_fisher_weighted_sum.is_some();
        match self.method {
            Method::FedAvg | Method::FedProx | Method::FedPd => {
                unexpected(self.prev_global.is_some(), "prev_global")?;
                unexpected(self.global_grad.is_some(), "global_grad")?;
                unexpected(fisher, "fisher sums")?;
            }
            Method::FedFor => {
                unexpected(fisher, "fisher sums")?;
                if self.prev_global.is_some() && self.global_grad.is_some() {
                    return Err(Error::invalid(
                        "payload",
                        "fedfor payload carries both W^{t-2} and a global direction",
                    ));
                }
                if !self.first_round && self.prev_global.is_none() && self.global_grad.is_none() {
                    return Err(Error::MissingPayload {
                        method,
                        component: "W^{t-2} or global direction",
                    });
                }
            }
            Method::Scaffold => {
                unexpected(self.prev_global.is_some(), "prev_global")?;
                unexpected(fisher, "fisher sums")?;
                if self.global_grad.is_none() {
                    return Err(Error::MissingPayload {
                        method,
                        component: "global control variate",
                    });
                }
            }
            Method::FedCurv => {
                unexpected(self.prev_global.is_some(), "prev_global")?;
                unexpected(self.global_grad.is_some(), "global_grad")?;
                if self.fedcurv_fisher_sum.is_some() != self.fedcurv_fisher_weighted_sum.is_some() {
                    return Err(Error::MissingPayload {
                        method,
                        component: "both fisher sums",
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-client statistics carried between rounds by stateful methods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientState {
    /// `grad L_k` at the client's last local model (FedPD/FedDyn).
    pub prev_local_grad: Option<ParamVector>,
    /// `c_k` (SCAFFOLD).
    pub control_variate: Option<ParamVector>,
    /// `I_k` (FedCurv).
    pub fisher_diag: Option<ParamVector>,
    pub last_local_model: Option<ParamVector>,
}

/// Everything a client produces in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutput {
    pub model: ParamVector,
    /// Sent upstream alongside the model (SCAFFOLD).
    pub control_variate: Option<ParamVector>,
    /// Sent upstream alongside the model (FedCurv).
    pub fisher: Option<ParamVector>,
    /// Kept on the client; only persisted in cross-silo pools.
    pub state: ClientState,
}

impl ClientOutput {
    pub fn upload_items(&self) -> Vec<PayloadItem> {
        let mut items = vec![PayloadItem::LocalModel];
        if self.control_variate.is_some() {
            items.push(PayloadItem::LocalControlVariate);
        }
        if self.fisher.is_some() {
            items.push(PayloadItem::LocalFisher);
        }
        items
    }
}

/// Minibatch SGD over `epochs` shuffled passes, adding `regs` to every step.
pub fn local_sgd(
    start: &ParamVector,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
    regs: &[&dyn Regularizer],
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("client shard"));
    }
    start.check_len(spec.num_params(), "local start model")?;
    let mut w = start.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hp.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(&[seed::tag::SHUFFLE, seed, epoch as u64]));
        for chunk in order.chunks(hp.batch_size) {
            let batch_data = data.select(chunk);
            let (_, mut grad) = loss_and_grad(&w, &Batch::new(&batch_data)?, spec)?;
            for reg in regs {
                reg.add_gradient(&w, &mut grad);
            }
            for (wi, gi) in w.iter_mut().zip(grad.iter()) {
                *wi -= hp.eta * gi;
            }
        }
    }
    Ok(w)
}

fn full_gradient(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<ParamVector> {
    Ok(loss_and_grad(params, &Batch::new(data)?, spec)?.1)
}

pub fn local_update_fedavg(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    local_sgd(&payload.current_global, data, hp, spec, seed, &[])
}

pub fn local_update_fedfor(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    let w1 = &payload.current_global;
    if hp.alpha == 0.0 {
        return local_sgd(w1, data, hp, spec, seed, &[]);
    }
    if let Some(w2) = &payload.prev_global {
        let direction: Vec<f64> = w2.iter().zip(w1.iter()).map(|(a, b)| a - b).collect();
        let term = FirstOrder {
            center: w1,
            direction: &direction,
            scale: hp.alpha / hp.eta,
            rectified: hp.rectify,
        };
        local_sgd(w1, data, hp, spec, seed, &[&term])
    } else if let Some(direction) = &payload.global_grad {
        let term = FirstOrder {
            center: w1,
            direction,
            scale: hp.alpha,
            rectified: hp.rectify,
        };
        local_sgd(w1, data, hp, spec, seed, &[&term])
    } else {
        local_sgd(w1, data, hp, spec, seed, &[])
    }
}

pub fn local_update_fedprox(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    let w1 = &payload.current_global;
    if hp.alpha == 0.0 {
        return local_sgd(w1, data, hp, spec, seed, &[]);
    }
    let prox = Proximal {
        center: w1,
        alpha: hp.alpha,
    };
    local_sgd(w1, data, hp, spec, seed, &[&prox])
}

/// Mean over samples of the squared per-sample loss gradient.
pub fn compute_fisher_diag(
    params: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("fisher data"));
    }
    let mut fisher = ParamVector::zeros(spec.num_params());
    for i in 0..data.len() {
        let one = data.select(&[i]);
        let g = full_gradient(params, &one, spec)?;
        for (f, gi) in fisher.iter_mut().zip(g.iter()) {
            *f += gi * gi;
        }
    }
    let n = data.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Returns the trained model and this client's Fisher at that model.
pub fn local_update_fedcurv(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
) -> Result<(ParamVector, ParamVector)> {
    let w1 = &payload.current_global;
    let model = match (
        &payload.fedcurv_fisher_sum,
        &payload.fedcurv_fisher_weighted_sum,
    ) {
        (Some(fisher_sum), Some(weighted_sum)) if hp.fedcurv_alpha != 0.0 => {
            let term = FisherPenalty {
                fisher_sum,
                weighted_sum,
                alpha: hp.fedcurv_alpha,
            };
            local_sgd(w1, data, hp, spec, seed, &[&term])?
        }
        _ => local_sgd(w1, data, hp, spec, seed, &[])?,
    };
    let fisher = compute_fisher_diag(&model, data, spec)?;
    Ok((model, fisher))
}

/// FedPD/FedDyn. Without a stored gradient this is exactly FedProx.
pub fn local_update_fedpd(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
    state: Option<&ClientState>,
) -> Result<(ParamVector, ClientState)> {
    let w1 = &payload.current_global;
    let stored = state.and_then(|s| s.prev_local_grad.as_ref());
    if let Some(g) = stored {
        g.check_len(spec.num_params(), "stored local gradient")?;
    }
    let linear = stored.map(|g| Linear { coef: g });
    let prox = Proximal {
        center: w1,
        alpha: hp.alpha,
    };
    let mut regs: Vec<&dyn Regularizer> = Vec::with_capacity(2);
    if let Some(l) = &linear {
        regs.push(l);
    }
    if hp.alpha != 0.0 {
        regs.push(&prox);
    }
    let model = local_sgd(w1, data, hp, spec, seed, &regs)?;
    let grad = full_gradient(&model, data, spec)?;
    let state = ClientState {
        prev_local_grad: Some(grad),
        last_local_model: Some(model.clone()),
        ..Default::default()
    };
    Ok((model, state))
}

/// SCAFFOLD. Every step uses `grad - c_k + c`. The refreshed `c_k` is the
/// full local gradient at the received global model.
pub fn local_update_scaffold(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
    state: Option<&ClientState>,
) -> Result<(ParamVector, ClientState)> {
    let d = spec.num_params();
    let w1 = &payload.current_global;
    let global_cv = payload.global_grad.as_ref().ok_or(Error::MissingPayload {
        method: "scaffold",
        component: "global control variate",
    })?;
    global_cv.check_len(d, "global control variate")?;
    let local_cv = state.and_then(|s| s.control_variate.as_ref());
    let correction: Vec<f64> = match local_cv {
        Some(ck) => {
            ck.check_len(d, "client control variate")?;
            global_cv
                .iter()
                .zip(ck.iter())
                .map(|(c, k)| c - k)
                .collect()
        }
        None => global_cv.to_vec(),
    };
    let model = if correction.iter().all(|&v| v == 0.0) {
        local_sgd(w1, data, hp, spec, seed, &[])?
    } else {
        let term = Linear { coef: &correction };
        local_sgd(w1, data, hp, spec, seed, &[&term])?
    };
    let refreshed = full_gradient(w1, data, spec)?;
    let state = ClientState {
        control_variate: Some(refreshed),
        last_local_model: Some(model.clone()),
        ..Default::default()
    };
    Ok((model, state))
}

/// Dispatches to the update rule named by the payload.
pub fn client_update(
    payload: &BroadcastPayload,
    data: &Dataset,
    hp: &HyperParams,
    spec: &ModelSpec,
    seed: u64,
    state: Option<&ClientState>,
) -> Result<ClientOutput> {
    payload.validate(spec.num_params())?;
    let plain = |model| ClientOutput {
        model,
        control_variate: None,
        fisher: None,
        state: ClientState::default(),
    };
    Ok(match payload.method {
        Method::FedAvg => plain(local_update_fedavg(payload, data, hp, spec, seed)?),
        Method::FedProx => plain(local_update_fedprox(payload, data, hp, spec, seed)?),
        Method::FedFor => plain(local_update_fedfor(payload, data, hp, spec, seed)?),
        Method::FedCurv => {
            let (model, fisher) = local_update_fedcurv(payload, data, hp, spec, seed)?;
            ClientOutput {
                model,
                control_variate: None,
                fisher: Some(fisher.clone()),
                state: ClientState {
                    fisher_diag: Some(fisher),
                    ..Default::default()
                },
            }
        }
        Method::FedPd => {
            let (model, state) = local_update_fedpd(payload, data, hp, spec, seed, state)?;
            ClientOutput {
                model,
                control_variate: None,
                fisher: None,
                state,
            }
        }
        Method::Scaffold => {
            let (model, state) = local_update_scaffold(payload, data, hp, spec, seed, state)?;
            ClientOutput {
                model,
                control_variate: state.control_variate.clone(),
                fisher: None,
                state,
            }
        }
    })
}
