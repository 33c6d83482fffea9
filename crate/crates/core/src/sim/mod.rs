//! Round orchestration.
//!
//! A round, in order:
//! 1. the server trains the current global model on its labeled set and adds
//!    the change to its own historical sum, the reference used for scoring;
//! 2. `ceil(q * m)` clients are sampled without replacement and receive the
//!    server-trained model;
//! 3. every participant trains on pseudo labels and uploads its delta;
//!    malicious participants corrupt their pseudo labels or replace the
//!    upload;
//! 4. uploads are optionally quantized, sent through the wire format and
//!    dequantized;
//! 5. the server folds uploads into each client's historical sum, scores and
//!    admits clients, and adds the aggregate of the admitted updates to the
//!    server-trained model;
//! 6. the result is evaluated on the held-out test set.

mod config;
mod metrics;

use std::time::Instant;

use rand::seq::index;
use rand::Rng;

pub use config::{AlphaMode, DatasetSource, SimConfig};
pub use metrics::{
    csv_string, emit_csv, read_csv, selection_path, ClientRecord, CsvRow, CsvSink, RoundMetrics,
    CSV_HEADER, SELECTION_CSV_HEADER,
};

use crate::aggregate::{self, AggregationRule};
use crate::attack::{self, AttackKind, DirectionVector};
use crate::data::{self, BlobSpec, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{self, ParamVector};
use crate::quant::{self, QuantizedUpdate};
use crate::rng::{self, tag};
use crate::selection::{self, Candidate, ClientState};
use crate::sstrain::{self, TrainParams};

/// Top-1 accuracy on a labeled set.
pub fn evaluate(omega: &ParamVector, test_set: &[Sample]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let mut correct = 0usize;
    for s in test_set {
        let label = s
            .label
            .ok_or_else(|| Error::config(format!("test sample {} is unlabeled", s.id)))?;
        if model::argmax(&model::forward(omega, &s.features)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// `k` distinct client ids in increasing order.
pub fn sample_participants(clients: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids = index::sample(rng, clients, k.min(clients)).into_vec();
    ids.sort_unstable();
    ids
}

/// Loads or generates the data and returns `(partitioned train set, test set)`.
pub fn prepare_data(config: &SimConfig) -> Result<(Dataset, Vec<Sample>)> {
    let (train, test) = match &config.dataset {
        DatasetSource::Synthetic {
            classes,
            per_class,
            features,
            separation,
        } => {
            let ds = data::generate_blobs(&BlobSpec {
                num_classes: *classes,
                per_class: *per_class,
                feature_dim: *features,
                separation: *separation,
                seed: config.seed,
            })?;
            data::holdout(ds, config.test_fraction, config.seed)?
        }
        DatasetSource::Mnist {
            images,
            labels,
            test,
        } => {
            let ds = data::load_idx(images, labels)?;
            match test {
                Some((ti, tl)) => {
                    let t = data::load_idx(ti, tl)?;
                    (ds, t.server_set)
                }
                None => data::holdout(ds, config.test_fraction, config.seed)?,
            }
        }
    };
    if test.is_empty() {
        return Err(Error::config("test-fraction leaves no test samples"));
    }
    let train = data::partition(
        train,
        config.clients,
        config.server_samples,
        config.distribution,
        config.seed,
    )?;
    Ok((train, test))
}

struct Upload {
    client: usize,
    malicious: bool,
    update: ParamVector,
}

/// A running simulation that can be advanced one round at a time.
pub struct Simulation {
    config: SimConfig,
    data: Dataset,
    test_set: Vec<Sample>,
    states: Vec<ClientState>,
    omega: ParamVector,
    server_sum: ParamVector,
    direction: DirectionVector,
    round: usize,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let (data, test_set) = prepare_data(&config)?;
        Simulation::with_data(config, data, test_set)
    }

    /// Uses a pre-partitioned dataset instead of the configured source.
    pub fn with_data(config: SimConfig, data: Dataset, test_set: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if data.shards.len() != config.clients {
            return Err(Error::config(format!(
                "clients: dataset has {} shards, config asks for {}",
                data.shards.len(),
                config.clients
            )));
        }
        config.attack.validate(config.clients, data.num_classes)?;
        let layers = model::default_layers(data.feature_dim, data.num_classes);
        let omega = ParamVector::init(&layers, &mut rng::stream(config.seed, &[tag::INIT]));
        let malicious = if config.attack.kind == AttackKind::None {
            0
        } else {
            config.attack.malicious
        };
        let states = (0..config.clients)
            .map(|id| ClientState::new(id, id < malicious, &omega))
            .collect();
        Ok(Simulation {
            direction: DirectionVector::all_positive(omega.len()),
            server_sum: omega.zeros_like(),
            config,
            data,
            test_set,
            states,
            omega,
            round: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &ParamVector {
        &self.omega
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn test_set(&self) -> &[Sample] {
        &self.test_set
    }

    /// Running sum of the server's own training updates.
    pub fn server_sum(&self) -> &ParamVector {
        &self.server_sum
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.states
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    fn server_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            learning_rate: self.config.learning_rate,
            momentum: self.config.momentum,
        }
    }

    fn client_params(&self, shard_len: usize) -> TrainParams {
        match self.config.aggregation {
            AggregationRule::FedSgd => TrainParams {
                epochs: 1,
                batch_size: shard_len.max(1),
                ..self.server_params()
            },
            _ => self.server_params(),
        }
    }

    fn train_client(&self, client: usize, broadcast: &ParamVector) -> Result<Upload> {
        let t = self.round as u64;
        let shard = &self.data.shards[client];
        let malicious = self.states[client].malicious;
        let mut rng = rng::stream(self.config.seed, &[tag::CLIENT, t, client as u64]);
        let params = self.client_params(shard.len());
        let local = match (malicious, self.config.attack.kind) {
            (true, AttackKind::LabelFlip { from, to }) => sstrain::client_train_with(
                broadcast,
                &shard.samples,
                &params,
                self.config.lambda,
                self.data.layout,
                &mut rng,
                |b| attack::flip_pseudo_labels(b, from, to),
            )?,
            _ => sstrain::client_train(
                broadcast,
                &shard.samples,
                &params,
                self.config.lambda,
                self.data.layout,
                &mut rng,
            )?,
        };
        Ok(Upload {
            client,
            malicious,
            update: local.update,
        })
    }

    fn train_clients(&self, participants: &[usize], broadcast: &ParamVector) -> Result<Vec<Upload>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            participants
                .par_iter()
                .map(|&c| self.train_client(c, broadcast))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            participants
                .iter()
                .map(|&c| self.train_client(c, broadcast))
                .collect()
        }
    }

    /// Sends an update through quantization and the wire format. Returns the
    /// received update, its byte count and the clip threshold used.
    fn transmit(&self, upload: &Upload) -> Result<(ParamVector, u64, Option<f64>)> {
        let d = upload.update.len();
        let Some(bits) = self.config.quant_bits else {
            return Ok((upload.update.clone(), quant::bytes_for(d, 32) as u64, None));
        };
        let alpha = match self.config.alpha {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Auto => {
                let mut rng = rng::stream(
                    self.config.seed,
                    &[tag::QUANT, self.round as u64, upload.client as u64],
                );
                quant::auto_alpha(upload.update.as_slice(), bits, &mut rng)?
            }
        };
        let wire = quant::quantize(upload.update.as_slice(), bits, alpha)?.to_bytes();
        let received = QuantizedUpdate::from_bytes(&wire)?;
        let values = quant::dequantize(&received);
        Ok((
            upload.update.with_values(values)?,
            wire.len() as u64,
            Some(received.alpha()),
        ))
    }

    /// Runs one round and returns its metrics.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        self.round += 1;
        let t = self.round as u64;
        let seed = self.config.seed;
        let d = self.omega.len();

        // 1. server
        let server_params = self.server_params();
        let trained = sstrain::server_train(
            &self.omega,
            &self.data.server_set,
            &server_params,
            self.data.layout,
            &mut rng::stream(seed, &[tag::SERVER, t]),
        )?;
        self.server_sum.axpy(1.0, &trained.sub(&self.omega)?)?;

        // 2. sampling
        let participants = sample_participants(
            self.config.clients,
            self.config.participants_per_round(),
            &mut rng::stream(seed, &[tag::SAMPLING, t]),
        );

        // 3. local training and attacks
        let mut uploads = self.train_clients(&participants, &trained)?;
        if let AttackKind::Gaussian { variance } = self.config.attack.kind {
            if uploads.iter().any(|u| u.malicious) {
                let mut honest: Vec<ParamVector> = uploads
                    .iter()
                    .filter(|u| !u.malicious)
                    .map(|u| u.update.clone())
                    .collect();
                if honest.is_empty() {
                    honest.push(trained.zeros_like());
                }
                let mut collude = rng::stream(seed, &[tag::COLLUDE, t]);
                for u in uploads.iter_mut().filter(|u| u.malicious) {
                    u.update = attack::gaussian_update(&honest, variance, &mut collude)?;
                }
            }
        }

        // 4. transmission
        let mut received = Vec::with_capacity(uploads.len());
        let mut alphas = Vec::with_capacity(uploads.len());
        let mut bytes_up = 0u64;
        for u in &uploads {
            let (update, bytes, alpha) = self.transmit(u)?;
            bytes_up += bytes;
            received.push(update);
            alphas.push(alpha);
        }
        let bytes_down = (participants.len() * quant::bytes_for(d, 32)) as u64;

        // 5. selection and aggregation
        for (u, r) in uploads.iter().zip(&received) {
            self.states[u.client].record(r)?;
        }
        let candidates: Vec<Candidate<'_>> = uploads
            .iter()
            .map(|u| Candidate {
                client: u.client,
                historical_sum: &self.states[u.client].historical_sum,
            })
            .collect();
        let scores = selection::select_clients(
            &self.server_sum,
            &candidates,
            self.config.delta,
            self.config.wasserstein_cap,
            self.config.selection,
        )?;
        let admitted: Vec<ParamVector> = scores
            .iter()
            .zip(&received)
            .filter(|(s, _)| s.admitted)
            .map(|(_, r)| r.clone())
            .collect();
        let aggregated = self.config.aggregation.apply(&trained, &admitted)?;

        let honest_received: Vec<ParamVector> = uploads
            .iter()
            .zip(&received)
            .filter(|(u, _)| !u.malicious)
            .map(|(_, r)| r.clone())
            .collect();
        let honest_model = if honest_received.is_empty() {
            trained.clone()
        } else {
            aggregate::fedavg(&trained, &honest_received)?
        };
        let objective = attack::attack_objective(&self.direction, &honest_model, &aggregated)?;
        self.direction = attack::direction_vector(&aggregated, &self.omega)?;
        self.omega = aggregated;

        // 6. evaluation
        let accuracy = evaluate(&self.omega, &self.test_set)?;

        let clients: Vec<ClientRecord> = scores
            .iter()
            .zip(&uploads)
            .zip(&alphas)
            .map(|((s, u), &alpha)| ClientRecord {
                client: s.client,
                cosine: s.cosine,
                wasserstein: s.wasserstein,
                admitted: s.admitted,
                malicious: u.malicious,
                alpha,
            })
            .collect();
        let selected: Vec<usize> = clients.iter().filter(|c| c.admitted).map(|c| c.client).collect();
        let n_malicious_selected = clients.iter().filter(|c| c.admitted && c.malicious).count();
        Ok(RoundMetrics {
            round: self.round,
            accuracy,
            participants,
            selected,
            clients,
            n_malicious_selected,
            bytes_up,
            bytes_down,
            attack_objective: objective,
            wall_ms: if self.config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Runs the remaining rounds, handing each round's metrics to `observe`.
    pub fn run_with(&mut self, mut observe: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.config.rounds.saturating_sub(self.round));
        while !self.is_finished() {
            let m = self.step()?;
            observe(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Runs a full simulation.
pub fn run(config: SimConfig) -> Result<Vec<RoundMetrics>> {
    Simulation::new(config)?.run_with(|_| Ok(()))
}
