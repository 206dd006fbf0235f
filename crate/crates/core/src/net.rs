//! Wire protocol and transports for running rounds over a network.
//!
//! Every message is one *frame*: a 4-byte big-endian length prefix followed
//! by that many bytes of JSON. The length is checked against
//! [`MAX_FRAME_BYTES`] before any payload allocation, floats travel in
//! shortest round-trip decimal form (decoding restores them bit-for-bit),
//! and malformed, truncated, or oversized frames are protocol errors.
//!
//! Two transports implement the same [`RoundTransport`] interface the server
//! loop drives: an in-process one that calls clients directly but still
//! pushes every message through the frame codec, and a TCP one with one
//! reader thread per connection. Because round secrets and batch choices
//! derive from per-round seeded streams rather than from message timing, an
//! in-process run and a TCP run of the same configuration produce
//! bit-identical models.

use std::collections::VecDeque;
use std::io::{Cursor, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{ClientUpdate, PlainUpdate};
use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::perturb::MaskedModel;
use crate::server::{
    mask_rng, LocalClient, MaskedRoundState, PlainRoundState, RoundMode, RoundRecord, RunOutcome,
    TrainOptions,
};

/// Protocol revision; peers with a different value refuse to talk.
pub const PROTO_VERSION: u32 = 1;

/// Hard cap on a single frame body, checked before allocation.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

/// What the server pushes down at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BroadcastPayload {
    Plain { model: MlpParams },
    Masked { model: MaskedModel },
}

/// What a client sends back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdatePayload {
    Plain { update: PlainUpdate },
    Masked { update: ClientUpdate },
}

/// Every message that can cross the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// Client handshake, first frame on every connection.
    Hello { client_id: u64, proto_version: u32 },
    /// Server round kickoff.
    Broadcast { round_id: u64, payload: BroadcastPayload },
    /// Client answer to a broadcast.
    Update { payload: UpdatePayload },
    /// Server signal that training completed normally.
    Finished { rounds: u64 },
    /// Fatal error; the sender closes after this.
    Abort { reason: String },
}

/// Serialize a message into a length-prefixed frame.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)
        .map_err(|e| Error::Protocol(format!("failed to encode message: {e}")))?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!(
            "outgoing frame of {} bytes exceeds the {MAX_FRAME_BYTES}-byte cap",
            body.len()
        )));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Write one framed message.
pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    let frame = encode_frame(msg)?;
    w.write_all(&frame).map_err(map_io_write)?;
    w.flush().map_err(map_io_write)?;
    Ok(())
}

/// Read one framed message. The declared length is validated against
/// [`MAX_FRAME_BYTES`] before the body buffer is allocated.
pub fn read_frame(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header).map_err(map_io_read)?;
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(Error::Protocol("empty frame".into()));
    }
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!(
            "peer announced a frame of {len} bytes, over the {MAX_FRAME_BYTES}-byte cap"
        )));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("truncated frame".into()),
        _ => map_io_read(e),
    })?;
    serde_json::from_slice(&body)
        .map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
}

fn map_io_read(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            Error::Timeout("timed out waiting for a frame".into())
        }
        std::io::ErrorKind::UnexpectedEof
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::ConnectionAborted => {
            Error::Protocol("connection closed mid-protocol".into())
        }
        _ => Error::Io(e),
    }
}

fn map_io_write(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::BrokenPipe
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::ConnectionAborted => {
            Error::Protocol("peer disconnected".into())
        }
        _ => Error::Io(e),
    }
}

/// Compute the update a client owes for one broadcast.
fn answer_broadcast(
    client: &LocalClient,
    round_id: u64,
    payload: &BroadcastPayload,
) -> Result<UpdatePayload> {
    match payload {
        BroadcastPayload::Masked { model } => Ok(UpdatePayload::Masked {
            update: client.update_masked(round_id, model)?,
        }),
        BroadcastPayload::Plain { model } => Ok(UpdatePayload::Plain {
            update: client.update_plain(round_id, model)?,
        }),
    }
}

/// Server-side view of a set of connected clients for the duration of a run.
pub trait RoundTransport {
    fn client_ids(&self) -> Vec<u64>;
    fn broadcast(&mut self, msg: &Message) -> Result<()>;
    /// Next update-bearing message from any client.
    fn next_update(&mut self) -> Result<Message>;
    /// Best-effort fatal-error notification; never fails.
    fn abort_all(&mut self, reason: &str);
}

/// In-process transport: clients are called directly, but every broadcast
/// and update still passes through [`encode_frame`]/[`read_frame`], so the
/// codec sits on the exact same path it does over TCP.
pub struct InProcTransport {
    clients: Vec<LocalClient>,
    pending: VecDeque<Vec<u8>>,
}

impl InProcTransport {
    pub fn new(mut clients: Vec<LocalClient>) -> Result<InProcTransport> {
        clients.sort_by_key(|c| c.id);
        if clients.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Usage("duplicate client ids".into()));
        }
        if clients.is_empty() {
            return Err(Error::Usage("transport needs at least one client".into()));
        }
        Ok(InProcTransport { clients, pending: VecDeque::new() })
    }
}

impl RoundTransport for InProcTransport {
    fn client_ids(&self) -> Vec<u64> {
        self.clients.iter().map(|c| c.id).collect()
    }

    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        let frame = encode_frame(msg)?;
        for client in &self.clients {
            let delivered = read_frame(&mut Cursor::new(&frame))?;
            if let Message::Broadcast { round_id, payload } = delivered {
                let answer = Message::Update {
                    payload: answer_broadcast(client, round_id, &payload)?,
                };
                self.pending.push_back(encode_frame(&answer)?);
            }
        }
        Ok(())
    }

    fn next_update(&mut self) -> Result<Message> {
        let frame = self
            .pending
            .pop_front()
            .ok_or_else(|| Error::Protocol("server waited for an update none was owed".into()))?;
        read_frame(&mut Cursor::new(&frame))
    }

    fn abort_all(&mut self, _reason: &str) {}
}

/// Timeouts for the TCP transport.
#[derive(Debug, Clone, Copy)]
pub struct TcpConfig {
    /// Budget for all clients to connect and complete their handshake.
    pub handshake_timeout: Duration,
    /// Budget per awaited update once a round is running.
    pub round_timeout: Duration,
}

impl Default for TcpConfig {
    fn default() -> TcpConfig {
        TcpConfig {
            handshake_timeout: Duration::from_secs(10),
            round_timeout: Duration::from_secs(120),
        }
    }
}

/// TCP transport: one write-side stream per client plus a reader thread per
/// connection feeding a single channel.
#[derive(Debug)]
pub struct TcpTransport {
    streams: Vec<(u64, TcpStream)>,
    rx: mpsc::Receiver<(u64, Result<Message>)>,
    round_timeout: Duration,
    _readers: Vec<JoinHandle<()>>,
}

/// Accept exactly `expected` clients and validate their handshakes: protocol
/// version must match and client ids must be distinct values in
/// `0..expected` (they double as shard indices). Offenders get an `Abort`
/// frame before the error is returned.
pub fn accept_clients(
    listener: &TcpListener,
    expected: usize,
    cfg: &TcpConfig,
) -> Result<TcpTransport> {
    if expected == 0 {
        return Err(Error::Usage("cannot serve zero clients".into()));
    }
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + cfg.handshake_timeout;
    let mut streams: Vec<(u64, TcpStream)> = Vec::with_capacity(expected);
    while streams.len() < expected {
        match listener.accept() {
            Ok((mut stream, peer)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(cfg.handshake_timeout))?;
                let hello = read_frame(&mut stream)?;
                let (client_id, proto_version) = match hello {
                    Message::Hello { client_id, proto_version } => (client_id, proto_version),
                    other => {
                        let reason = format!("expected hello, got {other:?}");
                        let _ = write_frame(&mut stream, &Message::Abort { reason: reason.clone() });
                        return Err(Error::Protocol(format!("{peer}: {reason}")));
                    }
                };
                if proto_version != PROTO_VERSION {
                    let reason = format!(
                        "protocol version {proto_version} does not match server version {PROTO_VERSION}"
                    );
                    let _ = write_frame(&mut stream, &Message::Abort { reason: reason.clone() });
                    return Err(Error::Protocol(format!("client {client_id}: {reason}")));
                }
                if client_id >= expected as u64 {
                    let reason =
                        format!("client id {client_id} outside the roster 0..{expected}");
                    let _ = write_frame(&mut stream, &Message::Abort { reason: reason.clone() });
                    return Err(Error::Protocol(reason));
                }
                if streams.iter().any(|(id, _)| *id == client_id) {
                    let reason = format!("client id {client_id} connected twice");
                    let _ = write_frame(&mut stream, &Message::Abort { reason: reason.clone() });
                    return Err(Error::Protocol(reason));
                }
                streams.push((client_id, stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "only {}/{expected} clients connected within {:?}",
                        streams.len(),
                        cfg.handshake_timeout
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(Error::Io(e)),
        }
    }
    listener.set_nonblocking(false)?;
    streams.sort_by_key(|(id, _)| *id);

    let (tx, rx) = mpsc::channel();
    let mut readers = Vec::with_capacity(streams.len());
    for (id, stream) in &streams {
        stream.set_read_timeout(None)?;
        let mut reader = stream.try_clone()?;
        let tx = tx.clone();
        let id = *id;
        readers.push(std::thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(msg) => {
                    if tx.send((id, Ok(msg))).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send((id, Err(e)));
                    break;
                }
            }
        }));
    }
    Ok(TcpTransport { streams, rx, round_timeout: cfg.round_timeout, _readers: readers })
}

impl RoundTransport for TcpTransport {
    fn client_ids(&self) -> Vec<u64> {
        self.streams.iter().map(|(id, _)| *id).collect()
    }

    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        for (_, stream) in &mut self.streams {
            write_frame(stream, msg)?;
        }
        Ok(())
    }

    fn next_update(&mut self) -> Result<Message> {
        match self.rx.recv_timeout(self.round_timeout) {
            Ok((_, Ok(msg))) => Ok(msg),
            Ok((id, Err(e))) => Err(match e {
                Error::Protocol(p) => Error::Protocol(format!("client {id}: {p}")),
                other => other,
            }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(Error::Timeout(format!(
                "no update within {:?}",
                self.round_timeout
            ))),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol("all reader threads terminated".into()))
            }
        }
    }

    fn abort_all(&mut self, reason: &str) {
        let msg = Message::Abort { reason: reason.into() };
        for (_, stream) in &mut self.streams {
            let _ = write_frame(stream, &msg);
        }
    }
}

/// Drive a full training run over any transport. On success every client is
/// sent `Finished`; on failure they get a best-effort `Abort` carrying the
/// error text.
pub fn run_server_rounds(
    initial: &MlpParams,
    opts: &TrainOptions,
    transport: &mut dyn RoundTransport,
) -> Result<RunOutcome> {
    let result = drive_rounds(initial, opts, transport);
    match &result {
        Ok(_) => transport.broadcast(&Message::Finished { rounds: opts.rounds })?,
        Err(e) => transport.abort_all(&e.to_string()),
    }
    result
}

fn drive_rounds(
    initial: &MlpParams,
    opts: &TrainOptions,
    transport: &mut dyn RoundTransport,
) -> Result<RunOutcome> {
    let ids = transport.client_ids();
    if !(opts.learning_rate.is_finite() && opts.learning_rate > 0.0) {
        return Err(Error::Usage(format!("learning rate {} must be positive", opts.learning_rate)));
    }
    let mut model = initial.clone();
    let mut records = Vec::with_capacity(opts.rounds as usize);
    let mut round_gradients = Vec::with_capacity(opts.rounds as usize);
    for round in 0..opts.rounds {
        let start = Instant::now();
        let result = match opts.mode {
            RoundMode::Masked => {
                let mut rng = mask_rng(opts.run_seed, round);
                let mut state = MaskedRoundState::begin(
                    round,
                    &model,
                    &opts.noise,
                    opts.partition_groups,
                    &ids,
                    &mut rng,
                )?;
                transport.broadcast(&Message::Broadcast {
                    round_id: round,
                    payload: BroadcastPayload::Masked { model: state.masked_model().clone() },
                })?;
                while !state.ready() {
                    match transport.next_update()? {
                        Message::Update { payload: UpdatePayload::Masked { update } } => {
                            state.accept(update)?;
                        }
                        Message::Abort { reason } => {
                            return Err(Error::Protocol(format!("client aborted: {reason}")));
                        }
                        other => {
                            return Err(Error::Protocol(format!(
                                "expected a masked update, got {}",
                                message_name(&other)
                            )));
                        }
                    }
                }
                state.recover()?
            }
            RoundMode::Plain => {
                let mut state = PlainRoundState::begin(round, &model, &ids)?;
                transport.broadcast(&Message::Broadcast {
                    round_id: round,
                    payload: BroadcastPayload::Plain { model: model.clone() },
                })?;
                while !state.ready() {
                    match transport.next_update()? {
                        Message::Update { payload: UpdatePayload::Plain { update } } => {
                            state.accept(update)?;
                        }
                        Message::Abort { reason } => {
                            return Err(Error::Protocol(format!("client aborted: {reason}")));
                        }
                        other => {
                            return Err(Error::Protocol(format!(
                                "expected a plain update, got {}",
                                message_name(&other)
                            )));
                        }
                    }
                }
                state.finish()?
            }
        };
        model = model.apply_gradient(&result.grad, opts.learning_rate)?;
        records.push(RoundRecord {
            round,
            mode: opts.mode,
            train_loss: result.train_loss,
            grad_norms: result.grad.layer_norms(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        round_gradients.push(result.grad);
    }
    Ok(RunOutcome { params: model, records, round_gradients })
}

fn message_name(msg: &Message) -> &'static str {
    match msg {
        Message::Hello { .. } => "hello",
        Message::Broadcast { .. } => "broadcast",
        Message::Update { payload: UpdatePayload::Plain { .. } } => "plain update",
        Message::Update { payload: UpdatePayload::Masked { .. } } => "masked update",
        Message::Finished { .. } => "finished",
        Message::Abort { .. } => "abort",
    }
}

/// Client main loop over an established connection: handshake, then answer
/// every broadcast until the server says it is finished. Returns the number
/// of rounds served.
pub fn run_client<S: Read + Write>(channel: &mut S, client: &LocalClient) -> Result<u64> {
    write_frame(
        channel,
        &Message::Hello { client_id: client.id, proto_version: PROTO_VERSION },
    )?;
    let mut rounds = 0;
    loop {
        match read_frame(channel)? {
            Message::Broadcast { round_id, payload } => {
                let answer = Message::Update {
                    payload: answer_broadcast(client, round_id, &payload)?,
                };
                write_frame(channel, &answer)?;
                rounds += 1;
            }
            Message::Finished { .. } => return Ok(rounds),
            Message::Abort { reason } => {
                return Err(Error::Protocol(format!("server aborted: {reason}")));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected {} from server",
                    message_name(&other)
                )));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shard, synth_classification, SynthClassConfig};
    use crate::model::LayerDims;
    use crate::perturb::NoiseConfig;
    use crate::server::{data_rng, init_rng, run_training, BatchPolicy};

    fn fixture_clients(k: usize, run_seed: u64) -> Vec<LocalClient> {
        let mut rng = data_rng(run_seed);
        let ds = synth_classification(
            &SynthClassConfig {
                n_samples: 40,
                n_features: 4,
                n_classes: 3,
                separation: 2.0,
                cluster_std: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        let plan = shard(ds.len(), k, &mut rng).unwrap();
        (0..k)
            .map(|c| {
                LocalClient::new(
                    c as u64,
                    plan.shard(&ds, c),
                    BatchPolicy::Fixed { size: 6 },
                    run_seed,
                )
            })
            .collect()
    }

    fn fixture_opts(mode: RoundMode, rounds: u64, run_seed: u64) -> TrainOptions {
        TrainOptions {
            mode,
            rounds,
            learning_rate: 0.1,
            noise: NoiseConfig::default(),
            partition_groups: 3,
            run_seed,
        }
    }

    fn fixture_model(run_seed: u64) -> MlpParams {
        MlpParams::init_normal(
            LayerDims::new(vec![4, 8, 5, 3]).unwrap(),
            &mut init_rng(run_seed),
        )
    }

    fn params_bits(p: &MlpParams) -> Vec<u64> {
        p.weights()
            .iter()
            .flat_map(|w| w.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn every_message_survives_the_codec_bit_for_bit() {
        let model = fixture_model(1);
        let clients = fixture_clients(2, 1);
        let update = clients[0]
            .update_plain(0, &model)
            .map(|update| Message::Update { payload: UpdatePayload::Plain { update } })
            .unwrap();
        let messages = vec![
            Message::Hello { client_id: 3, proto_version: PROTO_VERSION },
            Message::Broadcast {
                round_id: 9,
                payload: BroadcastPayload::Plain { model: model.clone() },
            },
            update,
            Message::Finished { rounds: 17 },
            Message::Abort { reason: "because".into() },
        ];
        for msg in &messages {
            let frame = encode_frame(msg).unwrap();
            let back = read_frame(&mut Cursor::new(&frame)).unwrap();
            assert_eq!(&back, msg);
        }
        // Awkward floats survive exactly.
        let awkward = MlpParams::from_weights(
            LayerDims::new(vec![1, 1, 1]).unwrap(),
            vec![
                crate::tensor::Matrix::from_rows(&[vec![0.1 + 0.2]]).unwrap(),
                crate::tensor::Matrix::from_rows(&[vec![-1e-300]]).unwrap(),
            ],
        )
        .unwrap();
        let msg = Message::Broadcast {
            round_id: 0,
            payload: BroadcastPayload::Plain { model: awkward.clone() },
        };
        let back = read_frame(&mut Cursor::new(&encode_frame(&msg).unwrap())).unwrap();
        if let Message::Broadcast { payload: BroadcastPayload::Plain { model }, .. } = back {
            assert_eq!(params_bits(&model), params_bits(&awkward));
        } else {
            panic!("wrong message shape after round trip");
        }
    }

    #[test]
    fn oversized_frame_is_rejected_before_allocation() {
        // Header alone announces 4 GiB-ish; no body follows. If the length
        // were trusted we would fail on allocation or EOF instead of the cap.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(u32::MAX).to_be_bytes());
        let err = read_frame(&mut Cursor::new(&bytes)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        assert!(err.to_string().contains("cap"), "{err}");
    }

    #[test]
    fn truncated_and_malformed_frames_are_protocol_errors() {
        let mut truncated = Vec::new();
        truncated.extend_from_slice(&100u32.to_be_bytes());
        truncated.extend_from_slice(b"short");
        let err = read_frame(&mut Cursor::new(&truncated)).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut garbage = Vec::new();
        garbage.extend_from_slice(&7u32.to_be_bytes());
        garbage.extend_from_slice(b"not {} ");
        let err = read_frame(&mut Cursor::new(&garbage)).unwrap_err();
        assert!(err.to_string().contains("malformed"), "{err}");

        let mut empty = Vec::new();
        empty.extend_from_slice(&0u32.to_be_bytes());
        let err = read_frame(&mut Cursor::new(&empty)).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn inproc_transport_matches_direct_training_bit_for_bit() {
        for mode in [RoundMode::Masked, RoundMode::Plain] {
            let clients = fixture_clients(2, 21);
            let model = fixture_model(21);
            let opts = fixture_opts(mode, 6, 21);
            let direct = run_training(&model, &clients, &opts).unwrap();
            let mut transport = InProcTransport::new(clients).unwrap();
            let framed = run_server_rounds(&model, &opts, &mut transport).unwrap();
            assert_eq!(params_bits(&direct.params), params_bits(&framed.params));
            for (a, b) in direct.records.iter().zip(&framed.records) {
                assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            }
        }
    }

    #[test]
    fn tcp_run_is_bit_identical_to_inproc_run() {
        let run_seed = 33;
        let clients = fixture_clients(2, run_seed);
        let model = fixture_model(run_seed);
        let opts = fixture_opts(RoundMode::Masked, 5, run_seed);

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut handles = Vec::new();
        for client in clients.clone() {
            handles.push(std::thread::spawn(move || {
                let mut stream = TcpStream::connect(addr).unwrap();
                run_client(&mut stream, &client).unwrap()
            }));
        }
        let cfg = TcpConfig {
            handshake_timeout: Duration::from_secs(5),
            round_timeout: Duration::from_secs(30),
        };
        let mut transport = accept_clients(&listener, 2, &cfg).unwrap();
        let over_tcp = run_server_rounds(&model, &opts, &mut transport).unwrap();
        for h in handles {
            assert_eq!(h.join().unwrap(), 5);
        }

        let mut inproc = InProcTransport::new(clients).unwrap();
        let local = run_server_rounds(&model, &opts, &mut inproc).unwrap();
        assert_eq!(params_bits(&over_tcp.params), params_bits(&local.params));
        for (a, b) in over_tcp.records.iter().zip(&local.records) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.grad_norms, b.grad_norms);
        }
    }

    #[test]
    fn version_mismatch_aborts_the_handshake() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut stream = TcpStream::connect(addr).unwrap();
            write_frame(
                &mut stream,
                &Message::Hello { client_id: 0, proto_version: PROTO_VERSION + 1 },
            )
            .unwrap();
            read_frame(&mut stream)
        });
        let err = accept_clients(&listener, 1, &TcpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        assert!(err.to_string().contains("version"), "{err}");
        match client.join().unwrap() {
            Ok(Message::Abort { reason }) => assert!(reason.contains("version")),
            other => panic!("client expected an abort, got {other:?}"),
        }
    }

    #[test]
    fn out_of_roster_and_duplicate_ids_are_refused() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut stream = TcpStream::connect(addr).unwrap();
            write_frame(
                &mut stream,
                &Message::Hello { client_id: 7, proto_version: PROTO_VERSION },
            )
            .unwrap();
            read_frame(&mut stream)
        });
        let err = accept_clients(&listener, 2, &TcpConfig::default()).unwrap_err();
        assert!(err.to_string().contains("roster"), "{err}");
        assert!(matches!(client.join().unwrap(), Ok(Message::Abort { .. })));
    }

    #[test]
    fn silent_client_times_out_the_round() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut stream = TcpStream::connect(addr).unwrap();
            write_frame(
                &mut stream,
                &Message::Hello { client_id: 0, proto_version: PROTO_VERSION },
            )
            .unwrap();
            // Swallow the broadcast, never answer, hold the socket open
            // until the server gives up.
            let _ = read_frame(&mut stream);
            std::thread::sleep(Duration::from_millis(1500));
        });
        let cfg = TcpConfig {
            handshake_timeout: Duration::from_secs(5),
            round_timeout: Duration::from_millis(300),
        };
        let mut transport = accept_clients(&listener, 1, &cfg).unwrap();
        let model = fixture_model(2);
        let opts = fixture_opts(RoundMode::Masked, 1, 2);
        let err = run_server_rounds(&model, &opts, &mut transport).unwrap_err();
        assert!(matches!(err, Error::Timeout(_)), "{err}");
        client.join().unwrap();
    }

    #[test]
    fn mid_round_disconnect_is_a_protocol_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut stream = TcpStream::connect(addr).unwrap();
            write_frame(
                &mut stream,
                &Message::Hello { client_id: 0, proto_version: PROTO_VERSION },
            )
            .unwrap();
            let _ = read_frame(&mut stream);
            // Dropping the stream here closes the connection mid-round.
        });
        let cfg = TcpConfig {
            handshake_timeout: Duration::from_secs(5),
            round_timeout: Duration::from_secs(10),
        };
        let mut transport = accept_clients(&listener, 1, &cfg).unwrap();
        let model = fixture_model(2);
        let opts = fixture_opts(RoundMode::Masked, 1, 2);
        let err = run_server_rounds(&model, &opts, &mut transport).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        client.join().unwrap();
    }

    #[test]
    fn no_secret_material_in_broadcast_frames() {
        let clients = fixture_clients(1, 40);
        let model = fixture_model(40);
        let mut rng = mask_rng(40, 0);
        let state = MaskedRoundState::begin(
            0,
            &model,
            &NoiseConfig::default(),
            2,
            &[0],
            &mut rng,
        )
        .unwrap();
        let frame = encode_frame(&Message::Broadcast {
            round_id: 0,
            payload: BroadcastPayload::Masked { model: state.masked_model().clone() },
        })
        .unwrap();
        let text = String::from_utf8_lossy(&frame[4..]);
        for forbidden in ["scale", "coeff", "secret", "energy"] {
            assert!(
                !text.contains(forbidden),
                "broadcast leaks a field named like {forbidden:?}"
            );
        }
        drop(clients);
    }
}
