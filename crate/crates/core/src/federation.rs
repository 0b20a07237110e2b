//! Federated pretraining: local contrastive epochs per silo and FedAvg on the
//! server. Only flat parameter vectors cross the client/server boundary.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::math::{Matrix, Purpose, RngStream, StreamKey};
use crate::model::{init_params, Activation, Encoder, MlpParams, ModelShape, OptState, OptimizerKind};
use crate::silo::SiloView;
use crate::wire::{self, FramedHeader};

/// Parameters sent from a client to the server (or broadcast back).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMessage {
    pub silo_id: usize,
    pub round: usize,
    pub params: Vec<f64>,
    pub weight: f64,
}

#[derive(Serialize, Deserialize)]
struct MessageHeader {
    silo_id: usize,
    round: usize,
    count: usize,
    #[serde(default = "unit_weight")]
    weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl FramedHeader for MessageHeader {
    fn count(&self) -> usize {
        self.count
    }
}

impl ParamMessage {
    pub fn count(&self) -> usize {
        self.params.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = MessageHeader {
            silo_id: self.silo_id,
            round: self.round,
            count: self.params.len(),
            weight: self.weight,
        };
        wire::encode(&header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamMessage> {
        let (h, params): (MessageHeader, Vec<f64>) = wire::decode(bytes)?;
        Ok(ParamMessage {
            silo_id: h.silo_id,
            round: h.round,
            params,
            weight: h.weight,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub local_epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub activation: Activation,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub weighted_aggregation: bool,
    /// Caps minibatches per local epoch; `None` runs full passes.
    pub max_batches_per_epoch: Option<usize>,
    /// Worker threads for client updates; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            local_epochs_per_round: 1,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            hidden: vec![256],
            embed: 256,
            activation: Activation::LeakyRelu,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            weighted_aggregation: false,
            max_batches_per_epoch: None,
            threads: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "batch_size must be >= 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.local_epochs_per_round == 0 {
            return Err(Error::InvalidParameter("local_epochs_per_round must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("threads must be >= 1".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn model_shape(&self, d_in: usize) -> ModelShape {
        ModelShape {
            d_in,
            hidden: self.hidden.clone(),
            embed: self.embed,
            activation: self.activation,
        }
    }

    /// Number of aggregation rounds; the last round may run fewer local epochs.
    pub fn rounds(&self) -> usize {
        self.epochs.div_ceil(self.local_epochs_per_round)
    }
}

/// Per-silo training state. `stream_id` keys the RNG streams and defaults to
/// the silo id; clients sharing a stream id and data train identically.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub silo_id: usize,
    pub stream_id: usize,
    pub features: Matrix,
    pub params: MlpParams,
    pub opt: OptState,
}

impl ClientState {
    pub fn new(view: &SiloView, params: MlpParams, cfg: &TrainConfig) -> Self {
        let opt = OptState::new(cfg.optimizer, params.param_count(), cfg.learning_rate);
        Self {
            silo_id: view.silo_id,
            stream_id: view.silo_id,
            features: view.features.clone(),
            params,
            opt,
        }
    }
}

/// Mean per-batch losses of one client over one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub silo: usize,
    pub l_total: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub seconds: f64,
}

fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    // A trailing single row has no in-batch negative; fold it into the previous batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Runs `epochs` local epochs from the broadcast `global` parameters.
/// `first_epoch` is the absolute index of the first epoch, used to key RNG
/// streams so that the shuffle differs per epoch.
pub fn client_update(
    state: &mut ClientState,
    global: &[f64],
    round: usize,
    first_epoch: usize,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(ParamMessage, RoundLog)> {
    let start = Instant::now();
    state.params.load_flat(global)?;
    let n = state.features.rows();
    if n < 2 && epochs > 0 {
        return Err(Error::InsufficientData(format!(
            "silo {} has {n} rows; at least 2 are needed",
            state.silo_id
        )));
    }
    let mut sums = [0.0f64; 4];
    let mut count = 0usize;
    for e in first_epoch..first_epoch + epochs {
        let key = |p| StreamKey::new(state.stream_id as u32, e as u32, p);
        let mut shuffle = RngStream::new(cfg.seed, key(Purpose::Shuffle));
        let mut aug = RngStream::new(cfg.seed, key(Purpose::Augment));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle);
        let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        for idx in batches(&order, cfg.batch_size).into_iter().take(limit) {
            let b = state.features.select_rows(idx);
            let (v1, v2) = make_views(&b, &cfg.augment, &mut aug)?;
            let trace = state.params.forward(&[&v1, &v2])?;
            let (t1, t2) = (&trace.views[0], &trace.views[1]);
            let lb = total_loss(
                &t1.embedding,
                &t2.embedding,
                &t1.reconstruction,
                &t2.reconstruction,
                &b,
                &cfg.loss,
            )
            .map_err(|err| match err {
                Error::Divergence(msg) => Error::Divergence(format!(
                    "silo {} round {round} epoch {e}: {msg}",
                    state.silo_id
                )),
                other => other,
            })?;
            let grads = state.params.backward(&trace, &lb.view_grads())?;
            state.opt.step(&mut state.params, &grads).map_err(|err| match err {
                Error::Divergence(msg) => {
                    Error::Divergence(format!("silo {} round {round}: {msg}", state.silo_id))
                }
                other => other,
            })?;
            for (s, v) in sums
                .iter_mut()
                .zip([lb.l_total, lb.l_recon, lb.l_contrastive, lb.l_distance])
            {
                *s += v;
            }
            count += 1;
        }
    }
    let mean = |v: f64| if count == 0 { 0.0 } else { v / count as f64 };
    let log = RoundLog {
        round,
        silo: state.silo_id,
        l_total: mean(sums[0]),
        l_r: mean(sums[1]),
        l_c: mean(sums[2]),
        l_d: mean(sums[3]),
        seconds: start.elapsed().as_secs_f64(),
    };
    let weight = if cfg.weighted_aggregation { n as f64 } else { 1.0 };
    let msg = ParamMessage {
        silo_id: state.silo_id,
        round,
        params: state.params.flatten(),
        weight,
    };
    Ok((msg, log))
}

/// Coordinatewise (optionally weighted) mean. Each coordinate is summed in
/// sorted order, so the result does not depend on message order.
pub fn server_aggregate(messages: &[ParamMessage], weighted: bool) -> Result<Vec<f64>> {
    let first = messages
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot aggregate zero messages".into()))?;
    let len = first.params.len();
    if let Some(bad) = messages.iter().find(|m| m.params.len() != len) {
        return Err(Error::Wire(format!(
            "silo {} sent {} parameters, expected {len}",
            bad.silo_id,
            bad.params.len()
        )));
    }
    let weights: Vec<f64> = if weighted {
        messages.iter().map(|m| m.weight).collect()
    } else {
        vec![1.0; messages.len()]
    };
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidParameter(format!("aggregation weights must be positive: {weights:?}")));
    }
    let mut sorted_w = weights.clone();
    sorted_w.sort_by(f64::total_cmp);
    let total_w: f64 = sorted_w.iter().sum();
    let mut terms = vec![0.0; messages.len()];
    let out = (0..len)
        .map(|i| {
            for ((t, m), w) in terms.iter_mut().zip(messages).zip(&weights) {
                *t = if weighted { w * m.params[i] } else { m.params[i] };
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum::<f64>() / total_w
        })
        .collect();
    Ok(out)
}

/// Payload audit: every exchanged message must carry exactly the model's
/// parameter count, whatever the silo's row count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAudit {
    pub expected_count: usize,
    pub messages_checked: usize,
    pub payload_bytes: Vec<usize>,
    pub failures: Vec<String>,
}

impl PrivacyAudit {
    pub fn new(expected_count: usize) -> Self {
        Self {
            expected_count,
            ..Self::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn record(&mut self, messages: &[ParamMessage]) {
        for m in messages {
            self.messages_checked += 1;
            if m.count() != self.expected_count {
                self.failures.push(format!(
                    "silo {} round {}: payload has {} values, model has {}",
                    m.silo_id,
                    m.round,
                    m.count(),
                    self.expected_count
                ));
            }
            match m.to_bytes() {
                Ok(b) => {
                    if !self.payload_bytes.contains(&b.len()) {
                        self.payload_bytes.push(b.len());
                    }
                }
                Err(e) => self.failures.push(format!("silo {}: {e}", m.silo_id)),
            }
        }
    }
}

pub fn privacy_audit(messages: &[ParamMessage], expected_count: usize) -> PrivacyAudit {
    let mut audit = PrivacyAudit::new(expected_count);
    audit.record(messages);
    audit
}

/// Trains one batch on each silo and on the same silo with every row
/// duplicated, and checks the resulting messages have identical byte length.
pub fn row_doubling_audit(views: &[SiloView], cfg: &TrainConfig) -> Result<PrivacyAudit> {
    let d = check_homogeneous(views)?;
    let shape = cfg.model_shape(d);
    let init = init_params(&shape, &mut RngStream::new(cfg.seed, StreamKey::global(Purpose::Init)))?;
    let global = init.flatten();
    let probe_cfg = TrainConfig {
        max_batches_per_epoch: Some(1),
        ..cfg.clone()
    };
    let mut audit = PrivacyAudit::new(init.param_count());
    for v in views {
        let mut doubled = v.clone();
        doubled.features = v.features.vstack(&v.features)?;
        let mut a = ClientState::new(v, init.clone(), &probe_cfg);
        let mut b = ClientState::new(&doubled, init.clone(), &probe_cfg);
        let (ma, _) = client_update(&mut a, &global, 0, 0, 1, &probe_cfg)?;
        let (mb, _) = client_update(&mut b, &global, 0, 0, 1, &probe_cfg)?;
        let (la, lb) = (ma.to_bytes()?.len(), mb.to_bytes()?.len());
        if la != lb {
            audit.failures.push(format!(
                "silo {}: payload {la} bytes with {} rows but {lb} bytes with {} rows",
                v.silo_id,
                v.n_rows(),
                doubled.n_rows()
            ));
        }
        audit.record(&[ma, mb]);
    }
    Ok(audit)
}

fn check_homogeneous(views: &[SiloView]) -> Result<usize> {
    let d = views
        .first()
        .ok_or_else(|| Error::InvalidParameter("federation needs at least one silo".into()))?
        .n_features();
    if let Some(v) = views.iter().find(|v| v.n_features() != d) {
        return Err(Error::Config(format!(
            "silo {} has {} features but silo {} has {d}; averaging needs equal shapes",
            v.silo_id,
            v.n_features(),
            views[0].silo_id
        )));
    }
    Ok(d)
}

/// Result of federated pretraining.
#[derive(Clone, Debug)]
pub struct CflRun {
    /// Final global parameters, decoder included.
    pub global: MlpParams,
    pub logs: Vec<RoundLog>,
    pub audit: PrivacyAudit,
}

impl CflRun {
    /// The global encoder; the decoder is dropped.
    pub fn encoder(&self) -> Encoder {
        self.global.encoder()
    }
}

pub fn run_cfl(views: &[SiloView], cfg: &TrainConfig) -> Result<CflRun> {
    cfg.validate()?;
    let d = check_homogeneous(views)?;
    let shape = cfg.model_shape(d);
    let init = init_params(&shape, &mut RngStream::new(cfg.seed, StreamKey::global(Purpose::Init)))?;
    let mut clients: Vec<ClientState> = views
        .iter()
        .map(|v| ClientState::new(v, init.clone(), cfg))
        .collect();
    run_cfl_clients(&mut clients, init, cfg)
}

/// The federated loop over prepared clients, starting from `init`.
pub fn run_cfl_clients(clients: &mut [ClientState], init: MlpParams, cfg: &TrainConfig) -> Result<CflRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidParameter("federation needs at least one client".into()));
    }
    let body = |clients: &mut [ClientState]| -> Result<CflRun> {
        let mut global = init.clone();
        let mut flat = global.flatten();
        let mut logs = Vec::new();
        let mut audit = PrivacyAudit::new(global.param_count());
        for round in 0..cfg.rounds() {
            let first_epoch = round * cfg.local_epochs_per_round;
            let epochs = cfg.local_epochs_per_round.min(cfg.epochs - first_epoch);
            let results: Vec<Result<(ParamMessage, RoundLog)>> = clients
                .par_iter_mut()
                .map(|c| client_update(c, &flat, round, first_epoch, epochs, cfg))
                .collect();
            let mut messages = Vec::with_capacity(results.len());
            for r in results {
                let (m, l) = r?;
                debug!("round {round} silo {} loss {:.5}", l.silo, l.l_total);
                messages.push(m);
                logs.push(l);
            }
            audit.record(&messages);
            flat = server_aggregate(&messages, cfg.weighted_aggregation)?;
            let mean: f64 = logs[logs.len() - messages.len()..]
                .iter()
                .map(|l| l.l_total)
                .sum::<f64>()
                / messages.len() as f64;
            info!("round {}/{}: mean client loss {mean:.5}", round + 1, cfg.rounds());
        }
        global.load_flat(&flat)?;
        Ok(CflRun { global, logs, audit })
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| body(clients)),
        None => body(clients),
    }
}

pub fn write_round_logs(path: &std::path::Path, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for l in logs {
        w.serialize(l).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_table;
    use crate::silo::vertical_partition;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            hidden: vec![12],
            embed: 6,
            ..TrainConfig::default()
        }
    }

    fn synth_views(n_silos: usize, seed: u64) -> Vec<SiloView> {
        let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Synth));
        let t = synth_table(60, 4 * n_silos, 2, &mut rng).unwrap();
        vertical_partition(&t, n_silos, 4).unwrap()
    }

    fn msg(silo: usize, params: Vec<f64>) -> ParamMessage {
        ParamMessage {
            silo_id: silo,
            round: 0,
            params,
            weight: 1.0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let out = server_aggregate(&[msg(1, vec![1.0, 3.0]), msg(2, vec![3.0, 5.0])], false).unwrap();
        assert_eq!(out, vec![2.0, 4.0]);
        let single = vec![0.1, -7.25, 3.0e-12];
        assert_eq!(server_aggregate(&[msg(1, single.clone())], false).unwrap(), single);
        assert!(server_aggregate(&[], false).is_err());
        assert!(server_aggregate(&[msg(1, vec![1.0]), msg(2, vec![1.0, 2.0])], false).is_err());
    }

    #[test]
    fn weighted_aggregate() {
        let mut a = msg(1, vec![0.0]);
        a.weight = 3.0;
        let b = msg(2, vec![4.0]);
        assert_eq!(server_aggregate(&[a.clone(), b.clone()], true).unwrap(), vec![1.0]);
        assert_eq!(server_aggregate(&[a, b], false).unwrap(), vec![2.0]);
    }

    proptest! {
        #[test]
        fn aggregate_is_mean_and_order_free(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 7), 1..9),
            rot in 0usize..8,
        ) {
            let msgs: Vec<ParamMessage> = rows.iter().enumerate().map(|(i, r)| msg(i, r.clone())).collect();
            let out = server_aggregate(&msgs, false).unwrap();
            for (c, v) in out.iter().enumerate() {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                prop_assert!((v - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            }
            let mut shuffled = msgs.clone();
            shuffled.rotate_left(rot % msgs.len());
            shuffled.reverse();
            let out2 = server_aggregate(&shuffled, false).unwrap();
            prop_assert!(out.iter().zip(&out2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn message_wire_round_trip() {
        let m = ParamMessage {
            silo_id: 3,
            round: 7,
            params: vec![1.5, -0.25, f64::MIN_POSITIVE],
            weight: 1.0,
        };
        let bytes = m.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["silo_id"], 3);
        assert_eq!(header["round"], 7);
        assert_eq!(header["count"], 3);
        assert_eq!(bytes.len(), 8 + hlen + 24);
        assert_eq!(ParamMessage::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn zero_epochs_echo_broadcast() {
        let views = synth_views(1, 1);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let shape = cfg.model_shape(4);
        let init = init_params(&shape, &mut RngStream::new(0, StreamKey::global(Purpose::Init))).unwrap();
        let mut c = ClientState::new(&views[0], init.clone(), &cfg);
        let (m, _) = client_update(&mut c, &init.flatten(), 0, 0, 0, &cfg).unwrap();
        assert_eq!(m.params, init.flatten());
        let run = run_cfl(&views, &cfg).unwrap();
        assert_eq!(run.global, init);
        assert!(run.logs.is_empty());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
    }

    #[test]
    fn loss_decreases_on_synth() {
        for seed in 0..3 {
            let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Synth));
            let t = synth_table(256, 8, 2, &mut rng).unwrap();
            let views = vertical_partition(&t, 1, 8).unwrap();
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 32,
                hidden: vec![32],
                embed: 16,
                seed,
                ..TrainConfig::default()
            };
            let run = run_cfl(&views, &cfg).unwrap();
            let first = run.logs[0].l_total;
            let fifth = run.logs[4].l_total;
            assert!(fifth < first, "seed {seed}: {first} -> {fifth}");
        }
    }

    #[test]
    fn identical_clients_match_single_client() {
        let views = synth_views(1, 2);
        let cfg = TrainConfig { epochs: 3, ..small_cfg() };
        let single = run_cfl(&views, &cfg).unwrap();
        let shape = cfg.model_shape(4);
        let init = init_params(&shape, &mut RngStream::new(cfg.seed, StreamKey::global(Purpose::Init))).unwrap();
        let mut clients: Vec<ClientState> = (0..3)
            .map(|i| {
                let mut c = ClientState::new(&views[0], init.clone(), &cfg);
                c.silo_id = i;
                c
            })
            .collect();
        let multi = run_cfl_clients(&mut clients, init, &cfg).unwrap();
        let drift = single
            .global
            .flatten()
            .iter()
            .zip(multi.global.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-9, "{drift}");
    }

    #[test]
    fn serial_and_parallel_agree() {
        let views = synth_views(3, 3);
        let serial = run_cfl(&views, &TrainConfig { threads: Some(1), ..small_cfg() }).unwrap();
        let parallel = run_cfl(&views, &TrainConfig { threads: Some(4), ..small_cfg() }).unwrap();
        assert_eq!(serial.global, parallel.global);
        assert_eq!(
            serial.logs.iter().map(|l| l.l_total.to_bits()).collect::<Vec<_>>(),
            parallel.logs.iter().map(|l| l.l_total.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn heterogeneous_silos_rejected() {
        let mut views = synth_views(2, 4);
        views[1].features = views[1].features.select_cols(&[0, 1, 2]);
        assert!(matches!(run_cfl(&views, &small_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn rounds_respect_local_epochs() {
        let views = synth_views(2, 5);
        let cfg = TrainConfig {
            epochs: 5,
            local_epochs_per_round: 2,
            ..small_cfg()
        };
        assert_eq!(cfg.rounds(), 3);
        let run = run_cfl(&views, &cfg).unwrap();
        assert_eq!(run.logs.len(), 6);
        assert_eq!(run.audit.messages_checked, 6);
    }

    #[test]
    fn audit_passes_and_catches_tampering() {
        let views = synth_views(2, 6);
        let run = run_cfl(&views, &small_cfg()).unwrap();
        assert!(run.audit.passed());
        assert_eq!(run.audit.payload_bytes.len(), 1);
        let doubled = row_doubling_audit(&views, &small_cfg()).unwrap();
        assert!(doubled.passed(), "{:?}", doubled.failures);

        let n = run.global.param_count();
        let mut bad = msg(1, run.global.flatten());
        bad.params.push(0.5);
        let audit = privacy_audit(&[msg(0, run.global.flatten()), bad], n);
        assert!(!audit.passed());
        assert_eq!(audit.failures.len(), 1);
    }

    #[test]
    fn divergence_surfaces() {
        let mut views = synth_views(1, 7);
        let mut rng = RngStream::new(1, StreamKey::global(Purpose::Synth));
        for v in views[0].features.data_mut() {
            *v = rng.random_range(-1.0..1.0) * 1e200;
        }
        let err = run_cfl(&views, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err:?}");
    }
}
