use flip_core::accountant::{
    accounted_steps, calibrate_sigma, integer_orders, AccountantError, Adjacency, PrivacyTarget,
    SubsamplingScheme,
};
use flip_core::federation::AccountantKind;
use flip_core::practitioner::{REMEDY_EXPAND_PARTITION, REMEDY_RELAX_EPSILON};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Poisson,
    Fixed,
}

impl SchemeName {
    pub fn accountant(self) -> AccountantKind {
        match self {
            SchemeName::Poisson => AccountantKind::PoissonRdp,
            SchemeName::Fixed => AccountantKind::FixedSizeRdp,
        }
    }
}

/// One target or a list of targets to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilons {
    One(f64),
    Many(Vec<f64>),
}

impl Epsilons {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Epsilons::One(e) => vec![*e],
            Epsilons::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateRequest {
    pub epsilon: Epsilons,
    pub delta: f64,
    pub scheme: SchemeName,
    pub batch: u64,
    pub dataset_size: u64,
    pub rounds: u64,
    #[serde(default = "one")]
    pub epochs: u64,
    /// Defaults to add/remove for Poisson and replace-one for fixed-size.
    #[serde(default)]
    pub adjacency: Option<Adjacency>,
    /// Inclusive integer order range.
    #[serde(default)]
    pub orders: Option<(u32, u32)>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub epsilon: f64,
    pub sigma: f64,
    pub order: f64,
    pub achieved_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateResponse {
    pub scheme: SchemeName,
    pub accountant: AccountantKind,
    pub adjacency: Adjacency,
    pub batch: u64,
    pub dataset_size: u64,
    pub delta: f64,
    pub steps: u64,
    pub sampling_rate: f64,
    pub results: Vec<CalibrationPoint>,
}

pub const DEFAULT_ORDERS: (u32, u32) = (2, 256);

pub fn calibrate(req: &CalibrateRequest) -> Result<CalibrateResponse, ServiceError> {
    let bad = |m: String| Err(ServiceError::BadRequest(m));
    let epsilons = req.epsilon.values();
    if epsilons.is_empty() {
        return bad("at least one epsilon is required".into());
    }
    if req.batch == 0 || req.dataset_size == 0 || req.rounds == 0 || req.epochs == 0 {
        return bad("batch, dataset_size, rounds and epochs must be positive".into());
    }
    if req.batch > req.dataset_size {
        return bad(format!(
            "batch {} exceeds dataset size {}",
            req.batch, req.dataset_size
        ));
    }
    let (lo, hi) = req.orders.unwrap_or(DEFAULT_ORDERS);
    if lo < 2 || hi < lo {
        return bad(format!("order range {lo}..{hi} must satisfy 2 <= lo <= hi"));
    }
    let accountant = req.scheme.accountant();
    let adjacency = req.adjacency.unwrap_or_else(|| accountant.default_adjacency());
    let scheme = match req.scheme {
        SchemeName::Poisson => {
            SubsamplingScheme::poisson(req.batch as f64 / req.dataset_size as f64, adjacency)
        }
        SchemeName::Fixed => SubsamplingScheme::fixed_size(req.batch, req.dataset_size, adjacency),
    }
    .map_err(accountant_error)?;
    let steps = accounted_steps(req.rounds * req.epochs, req.dataset_size, req.batch);
    let orders = integer_orders(lo, hi);
    let results = epsilons
        .iter()
        .map(|&epsilon| {
            let target = PrivacyTarget::new(epsilon, req.delta).map_err(accountant_error)?;
            let cal = calibrate_sigma(&target, &scheme, steps, &orders).map_err(accountant_error)?;
            Ok(CalibrationPoint {
                epsilon,
                sigma: cal.sigma.get(),
                order: cal.order,
                achieved_epsilon: cal.epsilon,
            })
        })
        .collect::<Result<Vec<_>, ServiceError>>()?;
    Ok(CalibrateResponse {
        scheme: req.scheme,
        accountant,
        adjacency,
        batch: req.batch,
        dataset_size: req.dataset_size,
        delta: req.delta,
        steps,
        sampling_rate: scheme.rate(),
        results,
    })
}

pub fn accountant_error(e: AccountantError) -> ServiceError {
    match e {
        AccountantError::InvalidArgument(m) => ServiceError::BadRequest(m),
        AccountantError::CalibrationFailure { .. } => ServiceError::Unsatisfiable {
            message: e.to_string(),
            remedies: vec![REMEDY_RELAX_EPSILON.to_string(), REMEDY_EXPAND_PARTITION.to_string()],
        },
        AccountantError::NumericalFailure(m) => ServiceError::Internal(m),
    }
}
