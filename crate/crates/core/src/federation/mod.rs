//! Federated rounds: broadcast, local DP training, FedAvg aggregation and
//! evaluation, with a per-client privacy ledger driven by the accountant.

mod config;
mod record;

use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    AccountantKind, FederationConfig, ModelSpec, NoiseSpec, PrivacyConfig, SimulationConfig,
};
pub use record::{ClientRoundStats, ClientSetup, RoundMetrics, RunRecord};

use crate::accountant::{
    accounted_steps, calibrate_sigma, compose, integer_orders, rdp_to_dp, AccountantError,
    NoiseMultiplier, PrivacyTarget, RdpCurve, SubsamplingScheme,
};
use crate::dpsgd::{self, Dataset, DpsgdError, LocalConfig, Model, StreamKey};
use crate::partition::{self, PartitionError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("privacy setup for client {client}: {source}")]
    Accountant {
        client: usize,
        #[source]
        source: AccountantError,
    },
    #[error("client {client} failed in round {round}: {source}")]
    ClientFailure {
        client: usize,
        round: u32,
        #[source]
        source: DpsgdError,
    },
    #[error("run already finished after {0} rounds")]
    Finished(u32),
}

/// `Σ pᵢ wᵢ` with `pᵢ = |Dᵢ| / Σ|Dⱼ|`, reduced in client order.
pub fn fed_avg(client_params: &[Vec<f64>], client_sizes: &[u64]) -> Result<Vec<f64>, FederationError> {
    if client_params.is_empty() || client_params.len() != client_sizes.len() {
        return Err(FederationError::InvalidArgument(format!(
            "{} parameter vectors for {} client sizes",
            client_params.len(),
            client_sizes.len()
        )));
    }
    let dim = client_params[0].len();
    if client_params.iter().any(|p| p.len() != dim) {
        return Err(FederationError::InvalidArgument(
            "client parameter vectors differ in length".into(),
        ));
    }
    if client_sizes.iter().any(|&s| s == 0) {
        return Err(FederationError::InvalidArgument(
            "client sizes must be positive".into(),
        ));
    }
    let weights = aggregation_weights(client_sizes);
    let mut out = vec![0.0; dim];
    for (params, w) in client_params.iter().zip(&weights) {
        for (o, p) in out.iter_mut().zip(params) {
            *o += w * p;
        }
    }
    Ok(out)
}

pub fn aggregation_weights(client_sizes: &[u64]) -> Vec<f64> {
    let total: u64 = client_sizes.iter().sum();
    client_sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Fraction of correct argmax predictions.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64, FederationError> {
    if test.is_empty() {
        return Err(FederationError::InvalidArgument("empty test set".into()));
    }
    let correct = (0..test.len())
        .filter(|&i| model.predict(test.row(i)) == test.label(i))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn mean_loss(model: &Model, test: &Dataset) -> f64 {
    if test.is_empty() {
        return f64::NAN;
    }
    (0..test.len()).map(|i| model.loss(test.row(i), test.label(i))).sum::<f64>() / test.len() as f64
}

/// Decides which clients train in a round. Returned ids must be sorted.
pub trait ClientSelector: Send + Sync {
    fn select(&self, round: u32, clients: usize) -> Vec<usize>;
}

/// Full participation.
#[derive(Debug, Clone, Copy, Default)]
pub struct AllClients;

impl ClientSelector for AllClients {
    fn select(&self, _round: u32, clients: usize) -> Vec<usize> {
        (0..clients).collect()
    }
}

struct ClientState {
    data: Dataset,
    test: Dataset,
    setup: ClientSetup,
    per_step: Option<RdpCurve>,
    steps_taken: u64,
}

/// A run in progress; drive it with [`Federation::run_round`].
pub struct Federation {
    config: FederationConfig,
    test: Dataset,
    clients: Vec<ClientState>,
    global: Model,
    record: RunRecord,
    selector: Box<dyn ClientSelector>,
}

impl Federation {
    pub fn new(config: FederationConfig, train: &Dataset, test: &Dataset) -> Result<Self, FederationError> {
        config.validate()?;
        if train.dim() != test.dim() || train.classes() != test.classes() {
            return Err(FederationError::InvalidArgument(
                "train and test sets disagree in shape".into(),
            ));
        }
        let plan = partition::plan(train.len(), config.clients, config.policy, config.seed)?;
        // Per-client test shards follow the same policy; tiny test sets fall
        // back to the global split.
        let test_plan = partition::plan(test.len(), config.clients, config.policy, config.seed ^ 0x7e57).ok();
        let privacy = &config.privacy;
        let orders = integer_orders(privacy.orders.0, privacy.orders.1);
        let local = local_config(&config, 0.0);

        let setups = plan
            .assignments
            .par_iter()
            .enumerate()
            .map(|(i, idx)| {
                let n_i = idx.len();
                if n_i < config.batch_size {
                    return Err(FederationError::InvalidConfig(format!(
                        "client {} holds {n_i} records, fewer than the batch size {}",
                        i + 1,
                        config.batch_size
                    )));
                }
                let steps_per_round = local.steps_per_round(n_i);
                let acct = |source| FederationError::Accountant { client: i + 1, source };
                let scheme = match privacy.accountant {
                    AccountantKind::PoissonRdp => SubsamplingScheme::poisson(
                        config.batch_size as f64 / n_i as f64,
                        privacy.adjacency(),
                    ),
                    AccountantKind::FixedSizeRdp => SubsamplingScheme::fixed_size(
                        config.batch_size as u64,
                        n_i as u64,
                        privacy.adjacency(),
                    ),
                }
                .map_err(acct)?;
                let total_steps = steps_per_round * u64::from(config.rounds);
                let default_delta = 1.0 / n_i as f64;
                let (sigma, delta) = match &privacy.noise {
                    NoiseSpec::None => (0.0, None),
                    NoiseSpec::Target { epsilon, delta } => {
                        let delta = delta.unwrap_or(default_delta);
                        let target = PrivacyTarget::new(*epsilon, delta).map_err(acct)?;
                        let cal = calibrate_sigma(&target, &scheme, total_steps, &orders).map_err(acct)?;
                        (cal.sigma.get(), Some(delta))
                    }
                    NoiseSpec::Sigmas { sigmas, delta } => {
                        let s = if sigmas.len() == 1 { sigmas[0] } else { sigmas[i] };
                        (s, Some(delta.unwrap_or(default_delta)))
                    }
                };
                let per_step = if sigma > 0.0 {
                    Some(scheme.per_step_rdp(NoiseMultiplier::new(sigma).map_err(acct)?, &orders).map_err(acct)?)
                } else {
                    None
                };
                Ok((
                    ClientSetup {
                        client: i + 1,
                        partition_size: n_i as u64,
                        sigma,
                        delta,
                        steps_per_round,
                        scheme: (sigma > 0.0).then_some(scheme),
                    },
                    per_step,
                ))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let clients: Vec<ClientState> = setups
            .into_iter()
            .zip(&plan.assignments)
            .enumerate()
            .map(|(i, ((setup, per_step), idx))| ClientState {
                data: train.subset(idx),
                test: test_plan
                    .as_ref()
                    .map(|p| test.subset(&p.assignments[i]))
                    .unwrap_or_else(|| test.clone()),
                setup,
                per_step,
                steps_taken: 0,
            })
            .collect();

        let architecture = config.model.architecture(train.dim(), train.classes());
        let global = Model::init(architecture, config.seed);
        let mut notes = vec![format!(
            "accounted steps per client = rounds x local_epochs x ceil(partition / {})",
            config.batch_size
        )];
        if privacy.noise != NoiseSpec::None {
            notes.push(match privacy.injection {
                dpsgd::NoiseInjectionMode::PerStep => {
                    "noise: per-step DP-SGD, std sigma*C on the clipped gradient sum".to_string()
                }
                dpsgd::NoiseInjectionMode::PerRound => format!(
                    "noise: per-round, std sigma*C/L on the client round {:?}",
                    privacy.round_noise_target
                )
                .to_lowercase(),
            });
        }
        let record = RunRecord {
            config: config.clone(),
            clients: clients.iter().map(|c| c.setup.clone()).collect(),
            rounds: Vec::new(),
            aborted: None,
            notes,
        };
        Ok(Self {
            config,
            test: test.clone(),
            clients,
            global,
            record,
            selector: Box::new(AllClients),
        })
    }

    pub fn with_selector(mut self, selector: Box<dyn ClientSelector>) -> Self {
        self.selector = selector;
        self
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn global_model(&self) -> &Model {
        &self.global
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn into_record(self) -> RunRecord {
        self.record
    }

    pub fn rounds_done(&self) -> u32 {
        self.record.rounds.len() as u32
    }

    pub fn is_finished(&self) -> bool {
        self.record.aborted.is_some() || self.rounds_done() >= self.config.rounds
    }

    /// Cumulative ε of `client` (0-based) after `steps` accounted steps.
    fn ledger_epsilon(&self, client: usize, steps: u64) -> Result<Option<f64>, FederationError> {
        let state = &self.clients[client];
        match (&state.per_step, state.setup.delta) {
            (Some(curve), Some(delta)) if steps > 0 => {
                let acct = |source| FederationError::Accountant { client: client + 1, source };
                let (eps, _) = rdp_to_dp(&compose(curve, steps).map_err(acct)?, delta).map_err(acct)?;
                Ok(Some(eps))
            }
            (Some(_), Some(_)) => Ok(Some(0.0)),
            _ => Ok(None),
        }
    }

    /// Runs one round. A client failure aborts the run and is recorded.
    pub fn run_round(&mut self) -> Result<&RoundMetrics, FederationError> {
        if self.is_finished() {
            return Err(FederationError::Finished(self.rounds_done()));
        }
        match self.try_round() {
            Ok(metrics) => {
                self.record.rounds.push(metrics);
                Ok(self.record.rounds.last().expect("just pushed"))
            }
            Err(e) => {
                self.record.aborted = Some(e.to_string());
                Err(e)
            }
        }
    }

    fn try_round(&mut self) -> Result<RoundMetrics, FederationError> {
        let round = self.rounds_done() + 1;
        let selected = self.selector.select(round, self.clients.len());
        let global = &self.global;
        let outcomes = selected
            .par_iter()
            .map(|&i| {
                let state = &self.clients[i];
                let local = local_config(&self.config, state.setup.sigma);
                let key = StreamKey {
                    master_seed: self.config.seed,
                    client: i as u32,
                    round,
                };
                dpsgd::train_local(global, &state.data, &local, key)
                    .map(|o| (i, o))
                    .map_err(|source| FederationError::ClientFailure {
                        client: i + 1,
                        round,
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;

        if !outcomes.is_empty() {
            let params: Vec<Vec<f64>> = outcomes.iter().map(|(_, o)| o.model.parameters.clone()).collect();
            let sizes: Vec<u64> = outcomes.iter().map(|(i, _)| self.clients[*i].setup.partition_size).collect();
            self.global.parameters = fed_avg(&params, &sizes)?;
        }
        for (i, o) in &outcomes {
            self.clients[*i].steps_taken += o.steps;
        }

        let mut clients = Vec::with_capacity(self.clients.len());
        for i in 0..self.clients.len() {
            let outcome = outcomes.iter().find(|(j, _)| *j == i).map(|(_, o)| o);
            let epsilon = self.ledger_epsilon(i, self.clients[i].steps_taken)?;
            let test_accuracy = evaluate(&self.global, &self.clients[i].test)?;
            clients.push(match outcome {
                Some(o) => ClientRoundStats {
                    client: i + 1,
                    participated: true,
                    steps: o.steps,
                    skipped_steps: o.skipped_steps,
                    batch_mean: o.profile.mean_batch(),
                    batch_min: o.profile.min_batch(),
                    batch_max: o.profile.max_batch(),
                    memory_peak: o.profile.peak_units,
                    memory_profile: o.profile.per_step_batch_sizes.clone(),
                    epsilon,
                    test_accuracy,
                },
                None => ClientRoundStats {
                    client: i + 1,
                    participated: false,
                    steps: 0,
                    skipped_steps: 0,
                    batch_mean: 0.0,
                    batch_min: 0,
                    batch_max: 0,
                    memory_peak: 0,
                    memory_profile: Vec::new(),
                    epsilon,
                    test_accuracy,
                },
            });
        }
        Ok(RoundMetrics {
            round,
            accuracy: evaluate(&self.global, &self.test)?,
            loss: mean_loss(&self.global, &self.test),
            clients,
        })
    }
}

fn local_config(config: &FederationConfig, sigma: f64) -> LocalConfig {
    LocalConfig {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        clip: config.privacy.clip,
        sigma,
        injection: config.privacy.injection,
        round_noise_target: config.privacy.round_noise_target,
        sampler: config.privacy.accountant.sampler(),
    }
}

/// Runs every round. Setup errors are returned; a failure mid-run is
/// recorded in [`RunRecord::aborted`] and the partial record is returned.
pub fn run_federation(
    config: FederationConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunRecord, FederationError> {
    let mut fed = Federation::new(config, train, test)?;
    while !fed.is_finished() {
        if fed.run_round().is_err() {
            break;
        }
    }
    Ok(fed.into_record())
}

/// Per-client `T = rounds · local_epochs · ceil(nᵢ / L)`.
pub fn total_accounted_steps(config: &FederationConfig, partition_size: u64) -> u64 {
    u64::from(config.local_epochs) * accounted_steps(u64::from(config.rounds), partition_size, config.batch_size as u64)
}
