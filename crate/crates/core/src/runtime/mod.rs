//! Round orchestration: the server, the selected clients and the key
//! distributor exchange framed messages over a [`Transport`].
//!
//! One round runs as follows:
//!
//! 1. the key distributor starts a fresh round and hands each selected
//!    client the public key;
//! 2. the server draws the request matrix and sends each client its row;
//! 3. clients train locally, encrypt the requested matrices and upload them
//!    together with `t` and an echo of the public key;
//! 4. the server checks every update, aggregates homomorphically and tells
//!    the key distributor it is done;
//! 5. the key distributor releases the private key, the server sends the
//!    encrypted global model, and clients decrypt and install it.
//!
//! With encryption off steps 1 and 5's key release are skipped and the
//! matrices travel as plaintext containers.

mod config;
pub mod transport;
pub mod wire;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, DatasetConfig, FederationConfig, FheMode, FheSettings, TransportConfig};
use transport::{InProcess, NodeId, SocketTransport, Transport, TransportError};
use wire::{decode_items, decode_message, encode_items, encode_message, ClientUpdate, Item, MessageKind, WireError, WireMessage};

use crate::fhe::codec::{deserialize_public_key, deserialize_secret_key, serialize_public_key, serialize_secret_key};
use crate::fhe::{Backend, FheError, PublicKey, RoundId, SecretKey};
use crate::kd::{EventKind, KdError, KeyDistributor, Party, RoundEvent};
use crate::model::{ModelError, ModelParams, ParamMatrix};
use crate::segmentation::{aggregate_encrypted, aggregate_plain, ClientResponse, RequestMatrix, SegmentationError};
use crate::training::{self, Dataset, MlpSpec, TrainingError};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Kd(#[from] KdError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Fhe(#[from] FheError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    /// A protocol invariant check failed.
    #[error("protocol check failed: {0}")]
    Hook(String),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_CLIENT: u64 = 5;
const STREAM_KD: u64 = 6;

/// Independent generator for `(purpose, a, b)` under the experiment seed.
fn substream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut h = purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 29;
    }
    rng.set_stream(h);
    rng
}

/// One frame that crossed the transport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameRecord {
    pub kind: MessageKind,
    pub from: NodeId,
    pub to: NodeId,
    pub frame_bytes: usize,
    /// Bytes of matrix containers inside the payload.
    pub matrix_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `ClientUpdate` frames sent by a client.
    Upload,
    /// Every frame addressed to a client.
    Download,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ByteTally {
    pub frame_bytes: u64,
    pub matrix_bytes: u64,
}

/// Per-client byte totals in one direction, keyed by client id.
pub fn account_bytes(frames: &[FrameRecord], direction: Direction) -> BTreeMap<u32, ByteTally> {
    let mut out: BTreeMap<u32, ByteTally> = BTreeMap::new();
    for f in frames {
        let client = match (direction, f.from, f.to) {
            (Direction::Upload, NodeId::Client(i), _) if f.kind == MessageKind::ClientUpdate => i,
            (Direction::Download, _, NodeId::Client(i)) => i,
            _ => continue,
        };
        let tally = out.entry(client).or_default();
        tally.frame_bytes += f.frame_bytes as u64;
        tally.matrix_bytes += f.matrix_bytes as u64;
    }
    out
}

/// Builds the upload a client sends for its selected matrices.
pub fn client_update_message(round: RoundId, client: u32, update: &ClientUpdate) -> WireMessage {
    WireMessage::new(MessageKind::ClientUpdate, round, client, update.encode())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// Client ids selected this round, ascending.
    pub selected: Vec<u32>,
    /// Upload frame bytes per selected client, aligned with `selected`.
    pub bytes_up: Vec<u64>,
    /// Matrix container bytes inside those uploads.
    pub matrix_bytes_up: Vec<u64>,
    /// Bytes of all frames delivered to each selected client.
    pub bytes_down: Vec<u64>,
    pub agg_time_ms: f64,
    /// Mean per-client encryption time.
    pub enc_time_ms: f64,
    /// Mean per-client decryption time.
    pub dec_time_ms: f64,
    /// Global-model accuracy on every client's held-out data, by client id.
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample-weighted global-model loss over all training partitions.
    pub train_loss: f64,
    pub frames: Vec<FrameRecord>,
}

fn mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<u64>() as f64 / values.len() as f64
    }
}

impl RoundMetrics {
    pub fn bytes_up_mean(&self) -> f64 {
        mean(&self.bytes_up)
    }

    pub fn bytes_up_max(&self) -> u64 {
        self.bytes_up.iter().copied().max().unwrap_or(0)
    }

    pub fn bytes_down_mean(&self) -> f64 {
        mean(&self.bytes_down)
    }

    pub fn csv_row(&self) -> MetricsRow {
        MetricsRow {
            round: self.round,
            mean_accuracy: self.mean_accuracy,
            agg_time_ms: self.agg_time_ms,
            enc_time_ms: self.enc_time_ms,
            dec_time_ms: self.dec_time_ms,
            bytes_up_mean: self.bytes_up_mean(),
            bytes_up_max: self.bytes_up_max(),
            bytes_down_mean: self.bytes_down_mean(),
        }
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub mean_accuracy: f64,
    pub agg_time_ms: f64,
    pub enc_time_ms: f64,
    pub dec_time_ms: f64,
    pub bytes_up_mean: f64,
    pub bytes_up_max: u64,
    pub bytes_down_mean: f64,
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "round",
    "mean_accuracy",
    "agg_time_ms",
    "enc_time_ms",
    "dec_time_ms",
    "bytes_up_mean",
    "bytes_up_max",
    "bytes_down_mean",
];

/// Streams metrics rows to CSV, flushing after each one.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(METRICS_COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, m: &RoundMetrics) -> csv::Result<()> {
        self.inner.serialize(m.csv_row())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> std::io::Result<W> {
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> csv::Result<String> {
    let mut w = MetricsWriter::new(Vec::new())?;
    for m in metrics {
        w.push(m)?;
    }
    Ok(String::from_utf8(w.into_inner()?).expect("csv output is utf-8"))
}

/// What the last round selected and requested.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: RoundId,
    pub selected: Vec<u32>,
    pub request: RequestMatrix,
}

/// State of one simulated federation.
pub struct Federation {
    config: FederationConfig,
    spec: MlpSpec,
    backend: Option<Backend>,
    kd: Option<KeyDistributor>,
    train: Vec<Dataset>,
    test: Vec<Dataset>,
    global: ModelParams,
    round: u64,
    transport: std::sync::Mutex<Box<dyn Transport>>,
    last: Option<RoundTrace>,
}

impl std::fmt::Debug for Federation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Federation")
            .field("round", &self.round)
            .field("clients", &self.train.len())
            .finish_non_exhaustive()
    }
}

/// Loads or generates the configured dataset.
pub fn load_dataset(config: &FederationConfig) -> Result<Dataset> {
    let mut rng = substream(config.seed, STREAM_DATA, 0, 0);
    Ok(match &config.dataset {
        DatasetConfig::Blobs {
            samples,
            classes,
            features,
            spread,
        } => training::gaussian_blobs(*samples, *classes, *features, *spread, &mut rng)?,
        DatasetConfig::Digits { samples, noise } => training::synthetic_digits(*samples, *noise, &mut rng)?,
        DatasetConfig::Idx { images, labels, limit } => training::load_idx(images, labels, *limit)?,
    })
}

impl Federation {
    pub fn new(config: FederationConfig) -> Result<Self> {
        config.validate()?;
        let data = load_dataset(&config)?;
        let parts = training::partition(&data, config.clients, &mut substream(config.seed, STREAM_PARTITION, 0, 0))?;
        let (train, test) = parts.iter().map(|p| p.split(config.test_fraction)).unzip();
        let widths = [vec![data.dim()], config.hidden.clone(), vec![data.classes()]].concat();
        let spec = MlpSpec::new(widths, config.activation)?;
        let global = spec.init(&mut substream(config.seed, STREAM_INIT, 0, 0));
        let (backend, kd) = match config.fhe_params() {
            Some(params) => {
                let kd_seed = rand::Rng::random(&mut substream(config.seed, STREAM_KD, 0, 0));
                (
                    Some(Backend::new(params.clone())?),
                    Some(KeyDistributor::new(params, config.selected, kd_seed)?),
                )
            }
            None => (None, None),
        };
        let transport: Box<dyn Transport> = match &config.transport {
            TransportConfig::InProcess => Box::new(InProcess::new()),
            TransportConfig::Socket { address } => {
                let nodes: Vec<NodeId> = [NodeId::Server, NodeId::Kd]
                    .into_iter()
                    .chain((1..=config.clients as u32).map(NodeId::Client))
                    .collect();
                Box::new(SocketTransport::connect(
                    address.as_str(),
                    &nodes,
                    config.frame_cap,
                    config.timeout_ms.map(Duration::from_millis),
                )?)
            }
        };
        Ok(Self {
            config,
            spec,
            backend,
            kd,
            train,
            test,
            global,
            round: 0,
            transport: std::sync::Mutex::new(transport),
            last: None,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn rounds_completed(&self) -> u64 {
        self.round
    }

    pub fn last_round(&self) -> Option<&RoundTrace> {
        self.last.as_ref()
    }

    pub fn train_partition(&self, client: u32) -> &Dataset {
        &self.train[client as usize - 1]
    }

    pub fn test_partition(&self, client: u32) -> &Dataset {
        &self.test[client as usize - 1]
    }

    /// Clients picked for `round`: the first `c` of a seeded shuffle,
    /// returned in ascending order.
    pub fn selection(&self, round: u64) -> Vec<u32> {
        let mut ids: Vec<u32> = (1..=self.config.clients as u32).collect();
        ids.shuffle(&mut substream(self.config.seed, STREAM_SELECT, round, 0));
        let mut chosen = ids[..self.config.selected].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// The model `client` would produce by training on its partition from
    /// the current global model during `round`.
    pub fn local_update(&self, client: u32, round: u64) -> Result<(ModelParams, u64)> {
        let mut rng = substream(self.config.seed, STREAM_CLIENT, round, client as u64);
        Ok(training::local_train(
            &self.spec,
            &self.global,
            self.train_partition(client),
            &self.config.sgd(),
            &mut rng,
        )?)
    }

    fn request_matrix(&self, round: u64) -> Result<RequestMatrix> {
        let m = self.spec.matrix_count();
        let c = self.config.selected;
        Ok(if self.config.segmentation {
            let mut rng = substream(self.config.seed, STREAM_SELECT, round, 1);
            RequestMatrix::generate(m, c, self.config.effective_coverage(), &mut rng)?
        } else {
            RequestMatrix::all_ones(c, m)?
        })
    }

    fn send(&mut self, log: &mut Vec<FrameRecord>, from: NodeId, to: NodeId, msg: WireMessage, matrix_bytes: usize) -> Result<()> {
        let frame = encode_message(&msg, self.config.frame_cap)?;
        log.push(FrameRecord {
            kind: msg.kind,
            from,
            to,
            frame_bytes: frame.len(),
            matrix_bytes,
        });
        self.transport.get_mut().expect("transport lock").send(to, frame)?;
        Ok(())
    }

    fn recv(&mut self, at: NodeId, kind: MessageKind, round: RoundId) -> Result<WireMessage> {
        let frame = self.transport.get_mut().expect("transport lock").recv(at)?;
        let msg = decode_message(&frame, self.config.frame_cap)?;
        msg.expect(kind, round)?;
        Ok(msg)
    }

    /// Runs one full protocol round and installs the new global model.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round_no = self.round + 1;
        let round = RoundId(round_no);
        let selected = self.selection(round_no);
        let mut log = Vec::new();
        let encrypted = self.backend.is_some();

        // Key distributor opens the round.
        let mut public_key = None;
        if self.kd.is_some() {
            let (kd_round, _) = self.kd.as_mut().unwrap().fresh_round()?;
            if kd_round != round {
                return Err(RuntimeError::Hook(format!("key distributor is in round {kd_round}, runtime in {round}")));
            }
            for (slot, &id) in selected.iter().enumerate() {
                let pk = self.kd.as_mut().unwrap().deliver_public_key(slot + 1)?;
                let msg = WireMessage::new(MessageKind::PublicKey, round, NodeId::Kd.wire_id(), serialize_public_key(&pk));
                self.send(&mut log, NodeId::Kd, NodeId::Client(id), msg, 0)?;
                public_key = Some(pk);
            }
        }

        // Server requests segments.
        let request = self.request_matrix(round_no)?;
        for (slot, &id) in selected.iter().enumerate() {
            let payload = RequestMatrix::encode_row(request.row(slot + 1));
            let msg = WireMessage::new(MessageKind::RequestRow, round, NodeId::Server.wire_id(), payload);
            self.send(&mut log, NodeId::Server, NodeId::Client(id), msg, 0)?;
        }

        // Clients receive their key and row.
        let mut inboxes = Vec::with_capacity(selected.len());
        for &id in &selected {
            let pk_bytes = if encrypted {
                self.recv(NodeId::Client(id), MessageKind::PublicKey, round)?.payload
            } else {
                Vec::new()
            };
            let pk = if encrypted { Some(deserialize_public_key(&pk_bytes)?) } else { None };
            let row_msg = self.recv(NodeId::Client(id), MessageKind::RequestRow, round)?;
            let row = RequestMatrix::decode_row(&row_msg.payload)
                .ok_or_else(|| WireError::Malformed("request row".into()))?;
            inboxes.push((id, pk, pk_bytes, row));
        }

        // Clients train, select and encrypt in parallel.
        let uploads = inboxes
            .par_iter()
            .map(|(id, pk, pk_bytes, row)| self.client_upload(*id, round_no, pk.as_ref(), pk_bytes, row))
            .collect::<Vec<_>>();
        let mut enc_ms = Vec::with_capacity(uploads.len());
        for ((id, ..), upload) in inboxes.iter().zip(uploads) {
            let (update, ms) = upload?;
            enc_ms.push(ms);
            let matrix_bytes = update.matrix_bytes();
            let msg = client_update_message(round, *id, &update);
            self.send(&mut log, NodeId::Client(*id), NodeId::Server, msg, matrix_bytes)?;
        }

        // Server collects all c updates before aggregating.
        let mut plain_responses = Vec::new();
        let mut enc_responses = Vec::new();
        for (slot, &id) in selected.iter().enumerate() {
            let msg = self.recv(NodeId::Server, MessageKind::ClientUpdate, round)?;
            if msg.sender != id {
                return Err(RuntimeError::Hook(format!("expected the update of client {id}, got {}", msg.sender)));
            }
            let update = ClientUpdate::decode(&msg.payload)?;
            check_update(&update, request.row(slot + 1), encrypted, id)?;
            if let Some(pk) = &public_key {
                if deserialize_public_key(&update.public_key)? != *pk {
                    return Err(RuntimeError::Hook(format!("client {id} echoed a different public key")));
                }
                self.kd
                    .as_mut()
                    .unwrap()
                    .handle_event(RoundEvent::new(round, EventKind::UpdateSubmitted(slot + 1)))?;
            }
            let client = slot + 1;
            if encrypted {
                let selected = update
                    .items
                    .into_iter()
                    .map(|item| match item {
                        Item::Encrypted(em) => (em.index, em),
                        Item::Plain(_) => unreachable!("checked by check_update"),
                    })
                    .collect();
                enc_responses.push(ClientResponse {
                    client,
                    selected,
                    t: update.t,
                });
            } else {
                let selected = update
                    .items
                    .into_iter()
                    .map(|item| match item {
                        Item::Plain(m) => (m.index(), m),
                        Item::Encrypted(_) => unreachable!("checked by check_update"),
                    })
                    .collect();
                plain_responses.push(ClientResponse {
                    client,
                    selected,
                    t: update.t,
                });
            }
        }

        let started = Instant::now();
        let global_items: Vec<Item> = match (&self.backend, &public_key) {
            (Some(backend), Some(pk)) => aggregate_encrypted(&enc_responses, &request, pk, backend)?
                .into_iter()
                .map(Item::Encrypted)
                .collect(),
            _ => aggregate_plain(&plain_responses, &request)?
                .into_matrices()
                .into_iter()
                .map(Item::Plain)
                .collect(),
        };
        let agg_ms = started.elapsed().as_secs_f64() * 1e3;

        // Completion signal, key release and model distribution.
        if encrypted {
            let msg = WireMessage::new(MessageKind::AggregationComplete, round, NodeId::Server.wire_id(), Vec::new());
            self.send(&mut log, NodeId::Server, NodeId::Kd, msg, 0)?;
            let signal = self.recv(NodeId::Kd, MessageKind::AggregationComplete, round)?;
            let party = match NodeId::from_wire(signal.sender) {
                NodeId::Server => Party::Server,
                NodeId::Client(i) => Party::Client(i as usize),
                NodeId::Kd => return Err(RuntimeError::Hook("completion signal from the key distributor".into())),
            };
            self.kd
                .as_mut()
                .unwrap()
                .handle_event(RoundEvent::new(round, EventKind::AggregationComplete(party)))?;
            for (slot, &id) in selected.iter().enumerate() {
                let sk = self.kd.as_mut().unwrap().deliver_private_key(slot + 1)?;
                let msg = WireMessage::new(MessageKind::PrivateKey, round, NodeId::Kd.wire_id(), serialize_secret_key(&sk));
                self.send(&mut log, NodeId::Kd, NodeId::Client(id), msg, 0)?;
            }
        }
        let matrix_bytes: usize = global_items.iter().map(Item::body_len).sum();
        let mut payload = Vec::new();
        encode_items(&global_items, &mut payload);
        for &id in &selected {
            let msg = WireMessage::new(MessageKind::GlobalModel, round, NodeId::Server.wire_id(), payload.clone());
            self.send(&mut log, NodeId::Server, NodeId::Client(id), msg, matrix_bytes)?;
        }
        if let Some(kd) = self.kd.as_mut() {
            kd.handle_event(RoundEvent::new(round, EventKind::ModelDistributed))?;
        }

        // Clients decrypt and install.
        let mut deliveries = Vec::with_capacity(selected.len());
        for &id in &selected {
            let sk = if encrypted {
                Some(deserialize_secret_key(
                    &self.recv(NodeId::Client(id), MessageKind::PrivateKey, round)?.payload,
                )?)
            } else {
                None
            };
            let items = decode_items(&self.recv(NodeId::Client(id), MessageKind::GlobalModel, round)?.payload)?;
            deliveries.push((sk, items));
        }
        let installed = deliveries
            .par_iter()
            .map(|(sk, items)| self.install(sk.as_ref(), items))
            .collect::<Result<Vec<_>>>()?;
        let dec_ms: Vec<f64> = installed.iter().map(|(_, ms)| *ms).collect();
        let (global, _) = installed.into_iter().next().expect("c >= 2");
        self.global = global;
        self.round = round_no;

        let accuracy = self
            .test
            .par_iter()
            .map(|t| training::evaluate(&self.spec, &self.global, t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mean_accuracy = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
        let train_loss = self.train_loss()?;

        let up = account_bytes(&log, Direction::Upload);
        let down = account_bytes(&log, Direction::Download);
        let zero_time = |ms: f64| if self.config.deterministic { 0.0 } else { ms };
        let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let metrics = RoundMetrics {
            round: round_no,
            bytes_up: selected.iter().map(|id| up.get(id).map_or(0, |t| t.frame_bytes)).collect(),
            matrix_bytes_up: selected.iter().map(|id| up.get(id).map_or(0, |t| t.matrix_bytes)).collect(),
            bytes_down: selected.iter().map(|id| down.get(id).map_or(0, |t| t.frame_bytes)).collect(),
            selected: selected.clone(),
            agg_time_ms: zero_time(agg_ms),
            enc_time_ms: zero_time(avg(&enc_ms)),
            dec_time_ms: zero_time(avg(&dec_ms)),
            accuracy,
            mean_accuracy,
            train_loss,
            frames: log,
        };
        self.last = Some(RoundTrace {
            round,
            selected,
            request,
        });
        log::debug!(
            "round {round_no}: accuracy {:.4}, loss {:.4}, agg {:.2} ms",
            metrics.mean_accuracy,
            metrics.train_loss,
            metrics.agg_time_ms
        );
        Ok(metrics)
    }

    /// Sample-weighted loss of the global model over every training
    /// partition.
    pub fn train_loss(&self) -> Result<f64> {
        let parts = self
            .train
            .par_iter()
            .map(|d| Ok((training::loss(&self.spec, &self.global, d)? * d.len() as f64, d.len())))
            .collect::<Result<Vec<_>>>()?;
        let (sum, n) = parts.into_iter().fold((0.0, 0), |(s, n), (l, k)| (s + l, n + k));
        Ok(sum / n as f64)
    }

    fn client_upload(
        &self,
        id: u32,
        round: u64,
        pk: Option<&PublicKey>,
        pk_bytes: &[u8],
        row: &[bool],
    ) -> Result<(ClientUpdate, f64)> {
        let (model, t) = self.local_update(id, round)?;
        let response = crate::segmentation::build_response(id as usize, &model, row, t)?;
        let started = Instant::now();
        let items = match (&self.backend, pk) {
            (Some(backend), Some(pk)) => {
                let mut rng = substream(self.config.seed, STREAM_CLIENT, round, (1 << 32) | id as u64);
                response
                    .selected
                    .iter()
                    .map(|(_, m)| Ok(Item::Encrypted(backend.encrypt_matrix(pk, m, &mut rng)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => response.selected.into_iter().map(|(_, m)| Item::Plain(m)).collect(),
        };
        let ms = started.elapsed().as_secs_f64() * 1e3;
        Ok((
            ClientUpdate {
                t,
                public_key: pk_bytes.to_vec(),
                items,
            },
            ms,
        ))
    }

    fn install(&self, sk: Option<&SecretKey>, items: &[Item]) -> Result<(ModelParams, f64)> {
        let started = Instant::now();
        let matrices = items
            .iter()
            .map(|item| match (item, &self.backend, sk) {
                (Item::Plain(m), None, _) => Ok(m.clone()),
                (Item::Encrypted(em), Some(backend), Some(sk)) => Ok(backend.decrypt_matrix(sk, em)?),
                _ => Err(RuntimeError::Hook("global model encoding does not match the encryption mode".into())),
            })
            .collect::<Result<Vec<ParamMatrix>>>()?;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let model = ModelParams::new(matrices)?;
        self.spec.check(&model)?;
        Ok((model, ms))
    }
}

/// Server-side checks on an incoming update: matrices must be ciphertexts
/// when encryption is on, and only requested indices may appear, once each.
fn check_update(update: &ClientUpdate, row: &[bool], encrypted: bool, client: u32) -> Result<()> {
    let mut seen = vec![false; row.len()];
    for item in &update.items {
        if encrypted && !item.is_encrypted() {
            return Err(RuntimeError::Hook(format!("client {client} sent a plaintext matrix to the server")));
        }
        if !encrypted && item.is_encrypted() {
            return Err(RuntimeError::Hook(format!("client {client} sent a ciphertext in plaintext mode")));
        }
        let j = item.index();
        if j == 0 || j > row.len() || !row[j - 1] {
            return Err(RuntimeError::Hook(format!("client {client} sent unrequested matrix {j}")));
        }
        if std::mem::replace(&mut seen[j - 1], true) {
            return Err(RuntimeError::Hook(format!("client {client} sent matrix {j} twice")));
        }
    }
    Ok(())
}

/// An experiment that stopped early, with the rounds that finished.
#[derive(Debug)]
pub struct RunFailure {
    pub completed: Vec<RoundMetrics>,
    pub error: RuntimeError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "failed after {} rounds: {}", self.completed.len(), self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs every configured round, handing each round's metrics to `sink` as
/// soon as it finishes.
pub fn run_experiment_with<F>(config: FederationConfig, mut sink: F) -> std::result::Result<Vec<RoundMetrics>, RunFailure>
where
    F: FnMut(&RoundMetrics),
{
    let mut completed = Vec::new();
    let mut fed = match Federation::new(config) {
        Ok(f) => f,
        Err(error) => return Err(RunFailure { completed, error }),
    };
    for _ in 0..fed.config().rounds {
        match fed.run_round() {
            Ok(m) => {
                sink(&m);
                completed.push(m);
            }
            Err(error) => return Err(RunFailure { completed, error }),
        }
    }
    Ok(completed)
}

pub fn run_experiment(config: FederationConfig) -> std::result::Result<Vec<RoundMetrics>, RunFailure> {
    run_experiment_with(config, |_| {})
}
