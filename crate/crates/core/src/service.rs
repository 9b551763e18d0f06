//! Line-delimited JSON endpoint over TCP.
//!
//! Requests look like `{"type": "get_state", "id": 7, "payload": {...}}` and
//! are answered by `{"type": "get_state_reply", "id": 7, "payload": {...}}` or
//! `{"type": "error", "id": 7, "payload": {"message": "..."}}`.
//!
//! A single bus-owner thread holds the simulated bus and any live recording;
//! connection threads talk to it through a job queue, so bus transactions
//! from different clients never interleave. Training runs on its own thread,
//! one job at a time, and is polled with `train_status`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde_json::{json, Value};

use crate::action::{denormalize, ActionSequence, CommandKind, CommandVocabulary, Dataset};
use crate::bus::{BusFrame, SimBus, BROADCAST_ID};
use crate::mtrnn::{fit, network_for, ContextSource, MtrnnConfig, MtrnnNetwork, Optimizer, TrainConfig};
use crate::recorder::{annotate, LiveRecording, PuppetPose, TimedCommand};
use crate::robot::{RobotModel, JOINT_COUNT};

/// Largest simulated step taken while the bus idles.
const IDLE_STEP: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model: RobotModel,
    pub vocabulary: CommandVocabulary,
    pub rate_hz: f64,
    pub seed: u64,
    /// Actions available at startup.
    pub actions: Vec<ActionSequence>,
    /// Network available to `generate` before any training.
    pub network: Option<MtrnnNetwork>,
    /// Finished recordings are also written here as `<name>.json`.
    pub action_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(model: RobotModel) -> Self {
        Self {
            model,
            vocabulary: CommandVocabulary::default(),
            rate_hz: 50.0,
            seed: 0,
            actions: Vec::new(),
            network: None,
            action_dir: None,
        }
    }
}

type Job = Box<dyn FnOnce(&mut BusOwner) + Send>;

struct BusOwner {
    bus: SimBus,
    model: RobotModel,
    recording: Option<LiveRecording>,
    pending_tags: Vec<TimedCommand>,
}

#[derive(Debug, Clone, Default)]
struct TrainStatus {
    state: &'static str,
    epoch: usize,
    epochs: usize,
    loss: Option<f64>,
    curve: Vec<(usize, f64)>,
    message: Option<String>,
}

struct Shared {
    model: RobotModel,
    vocabulary: CommandVocabulary,
    rate_hz: f64,
    seed: u64,
    action_dir: Option<PathBuf>,
    jobs: Mutex<Sender<Job>>,
    actions: Mutex<BTreeMap<String, ActionSequence>>,
    network: Mutex<Option<Arc<MtrnnNetwork>>>,
    train: Mutex<TrainStatus>,
    last_cs: Mutex<Option<Vec<f64>>>,
    stopping: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Shared {
    /// Runs `f` on the bus-owner thread and waits for its result.
    fn on_bus<R: Send + 'static>(&self, f: impl FnOnce(&mut BusOwner) -> R + Send + 'static) -> Result<R, String> {
        let (tx, rx) = mpsc::channel();
        let job: Job = Box::new(move |owner| {
            let _ = tx.send(f(owner));
        });
        lock(&self.jobs).send(job).map_err(|_| "bus thread has stopped".to_string())?;
        rx.recv().map_err(|_| "bus thread has stopped".to_string())
    }
}

fn run_bus(mut owner: BusOwner, jobs: Receiver<Job>) {
    let mut last = Instant::now();
    loop {
        match jobs.recv_timeout(Duration::from_secs_f64(IDLE_STEP)) {
            Ok(job) => job(&mut owner),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
        // Outside a recording the simulation follows the wall clock. A live
        // recording advances time through its own bus traffic instead.
        let now = Instant::now();
        let mut elapsed = (now - last).as_secs_f64().min(0.25);
        last = now;
        if owner.recording.is_none() {
            while elapsed > 0.0 {
                let dt = elapsed.min(IDLE_STEP);
                owner.bus.tick(dt);
                elapsed -= dt;
            }
        }
    }
}

/// A running endpoint.
pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, cfg: ServiceConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel::<Job>();
        let owner = BusOwner {
            bus: SimBus::new(&cfg.model),
            model: cfg.model.clone(),
            recording: None,
            pending_tags: Vec::new(),
        };
        thread::Builder::new()
            .name("bus-owner".into())
            .spawn(move || run_bus(owner, rx))?;
        let actions = cfg.actions.into_iter().map(|a| (a.name.clone(), a)).collect();
        let shared = Arc::new(Shared {
            model: cfg.model,
            vocabulary: cfg.vocabulary,
            rate_hz: cfg.rate_hz,
            seed: cfg.seed,
            action_dir: cfg.action_dir,
            jobs: Mutex::new(tx),
            actions: Mutex::new(actions),
            network: Mutex::new(cfg.network.map(Arc::new)),
            train: Mutex::new(TrainStatus {
                state: "idle",
                ..TrainStatus::default()
            }),
            last_cs: Mutex::new(None),
            stopping: AtomicBool::new(false),
        });
        let accept_shared = Arc::clone(&shared);
        let accept = thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, accept_shared))?;
        info!("listening on {addr}");
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stopping.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let shared = Arc::clone(&shared);
                let _ = thread::Builder::new()
                    .name("connection".into())
                    .spawn(move || handle_connection(stream, shared));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, message: &Value) -> bool {
    let mut line = message.to_string();
    line.push('\n');
    lock(writer).write_all(line.as_bytes()).is_ok()
}

struct Subscription {
    stop: Arc<AtomicBool>,
    pushes: Arc<AtomicUsize>,
    thread: JoinHandle<()>,
}

struct Connection {
    shared: Arc<Shared>,
    writer: Writer,
    subscriptions: HashMap<i64, Subscription>,
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(e) => {
            warn!("{peer}: {e}");
            return;
        }
    };
    let mut conn = Connection {
        shared,
        writer: Arc::new(Mutex::new(stream)),
        subscriptions: HashMap::new(),
    };
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = conn.dispatch(&line);
        if !send(&conn.writer, &reply) {
            break;
        }
    }
    for (_, sub) in conn.subscriptions.drain() {
        sub.stop.store(true, Ordering::SeqCst);
        let _ = sub.thread.join();
    }
}

fn error(id: Value, message: impl Into<String>) -> Value {
    json!({"type": "error", "id": id, "payload": {"message": message.into()}})
}

type Handled = Result<Value, String>;

impl Connection {
    fn dispatch(&mut self, line: &str) -> Value {
        let request: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return error(Value::Null, format!("malformed message: {e}")),
        };
        let id = request.get("id").cloned().unwrap_or(Value::Null);
        let Some(id_num) = id.as_i64() else {
            return error(id, "malformed message: `id` must be an integer");
        };
        let Some(kind) = request.get("type").and_then(Value::as_str) else {
            return error(id, "malformed message: `type` must be a string");
        };
        let empty = json!({});
        let payload = request.get("payload").unwrap_or(&empty);
        if !payload.is_object() {
            return error(id, "malformed message: `payload` must be an object");
        }
        let result = match kind {
            "get_state" => self.get_state(),
            "set_goals" => self.set_goals(payload),
            "set_torque" => self.set_torque(payload),
            "start_record" => self.start_record(payload),
            "puppet_frame" => self.puppet_frame(payload),
            "stop_record" => self.stop_record(),
            "tag_event" => self.tag_event(payload),
            "list_actions" => Ok(self.list_actions()),
            "start_train" => self.start_train(payload),
            "train_status" => Ok(self.train_status()),
            "generate" => self.generate(payload),
            "subscribe_state" => self.subscribe(id_num, payload),
            "unsubscribe_state" => self.unsubscribe(payload),
            other => Err(format!("unknown message type `{other}`")),
        };
        match result {
            Ok(payload) => json!({"type": format!("{kind}_reply"), "id": id, "payload": payload}),
            Err(message) => error(id, message),
        }
    }

    fn get_state(&self) -> Handled {
        let snapshot = self.shared.on_bus(state_snapshot)?;
        Ok(snapshot)
    }

    fn set_goals(&self, payload: &Value) -> Handled {
        let pose = parse_pose(&self.shared.model, payload.get("goals"))?;
        self.shared.on_bus(move |owner| {
            let goals: Vec<(u8, f64)> = owner
                .model
                .joints()
                .iter()
                .zip(&pose)
                .filter_map(|(j, q)| q.map(|q| (j.id, q)))
                .collect();
            if !goals.is_empty() {
                owner.bus.transact(&BusFrame::sync_write(&goals), 0.0);
            }
            json!({"count": goals.len()})
        })
    }

    fn set_torque(&self, payload: &Value) -> Handled {
        let enabled = payload
            .get("enabled")
            .and_then(Value::as_bool)
            .ok_or("`enabled` must be a boolean")?;
        let ids: Option<Vec<u8>> = match payload.get("joints") {
            None | Some(Value::Null) => None,
            Some(Value::Array(names)) => Some(
                names
                    .iter()
                    .map(|n| {
                        let name = n.as_str().ok_or("joint names must be strings")?;
                        self.shared
                            .model
                            .joint_index(name)
                            .map(|i| self.shared.model.joints()[i].id)
                            .ok_or_else(|| format!("unknown joint `{name}`"))
                    })
                    .collect::<Result<_, String>>()?,
            ),
            Some(_) => return Err("`joints` must be an array of names".into()),
        };
        self.shared.on_bus(move |owner| {
            if owner.recording.is_some() {
                return Err("torque is managed by the active recording".to_string());
            }
            match &ids {
                None => {
                    owner.bus.transact(&BusFrame::torque(BROADCAST_ID, enabled), 0.0);
                }
                Some(ids) => {
                    for &id in ids {
                        owner.bus.transact(&BusFrame::torque(id, enabled), 0.0);
                    }
                }
            }
            Ok(json!({"enabled": enabled}))
        })?
    }

    fn start_record(&self, payload: &Value) -> Handled {
        let name = payload
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.is_empty())
            .ok_or("`name` must be a non-empty string")?
            .to_string();
        let rate_hz = match payload.get("rate_hz") {
            None => self.shared.rate_hz,
            Some(v) => v.as_f64().ok_or("`rate_hz` must be a number")?,
        };
        self.shared.on_bus(move |owner| {
            if let Some(r) = &owner.recording {
                return Err(format!("recording `{}` is already running", r.name()));
            }
            let rec = LiveRecording::start(&mut owner.bus, &owner.model, name.clone(), rate_hz).map_err(|e| e.to_string())?;
            owner.recording = Some(rec);
            owner.pending_tags.clear();
            Ok(json!({"name": name, "rate_hz": rate_hz}))
        })?
    }

    fn puppet_frame(&self, payload: &Value) -> Handled {
        let pose = parse_pose(&self.shared.model, payload.get("positions"))?;
        self.shared.on_bus(move |owner| {
            let BusOwner {
                bus, model, recording, ..
            } = owner;
            let rec = recording.as_mut().ok_or("no recording is running")?;
            let frame = rec.push(bus, model, &pose).map_err(|e| e.to_string())?;
            Ok(json!({"frame": frame}))
        })?
    }

    fn stop_record(&self) -> Handled {
        let (seq, tags) = self.shared.on_bus(|owner| {
            let rec = owner.recording.take().ok_or("no recording is running")?;
            let seq = rec.finish(&mut owner.bus, &owner.model);
            Ok::<_, String>((seq, std::mem::take(&mut owner.pending_tags)))
        })??;
        if seq.is_empty() {
            return Err("recording has no frames".into());
        }
        // Cues past the end land on the last frame.
        let last = (seq.len() - 1) as f64 / seq.rate_hz;
        let tags: Vec<TimedCommand> = tags
            .into_iter()
            .map(|t| TimedCommand {
                time: t.time.min(last),
                ..t
            })
            .collect();
        let seq = annotate(&seq, &tags, &self.shared.vocabulary).map_err(|e| e.to_string())?;
        self.store(seq)
    }

    fn store(&self, seq: ActionSequence) -> Handled {
        if let Some(dir) = &self.shared.action_dir {
            seq.save(dir.join(format!("{}.json", seq.name))).map_err(|e| e.to_string())?;
        }
        let summary = action_summary(&seq);
        lock(&self.shared.actions).insert(seq.name.clone(), seq);
        Ok(summary)
    }

    fn tag_event(&self, payload: &Value) -> Handled {
        let kind: CommandKind = payload
            .get("kind")
            .and_then(Value::as_str)
            .ok_or("`kind` must be `facial` or `audio`")?
            .parse()?;
        let command = payload.get("command").and_then(Value::as_str).ok_or("`command` must be a string")?;
        let time = payload.get("time").and_then(Value::as_f64).ok_or("`time` must be a number")?;
        self.shared.vocabulary.index_of(kind, command).map_err(|e| e.to_string())?;
        let tag = TimedCommand::new(time, kind, command);
        match payload.get("action").and_then(Value::as_str) {
            Some(name) => {
                let seq = lock(&self.shared.actions)
                    .get(name)
                    .cloned()
                    .ok_or_else(|| format!("unknown action `{name}`"))?;
                let seq = annotate(&seq, &[tag], &self.shared.vocabulary).map_err(|e| e.to_string())?;
                self.store(seq)
            }
            None => self.shared.on_bus(move |owner| {
                if owner.recording.is_none() {
                    return Err("no recording is running; name an `action` to tag".to_string());
                }
                if !(time >= 0.0) {
                    return Err(format!("event time {time} is negative"));
                }
                owner.pending_tags.push(tag);
                Ok(json!({"queued": owner.pending_tags.len()}))
            })?,
        }
    }

    fn list_actions(&self) -> Value {
        let actions: Vec<Value> = lock(&self.shared.actions).values().map(action_summary).collect();
        let network = lock(&self.shared.network)
            .as_ref()
            .map(|n| n.metadata.sequences.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
        json!({"actions": actions, "network_sequences": network})
    }

    fn start_train(&self, payload: &Value) -> Handled {
        let defaults = TrainConfig {
            seed: self.shared.seed,
            ..TrainConfig::default()
        };
        let number = |key: &str, default: f64| -> Result<f64, String> {
            match payload.get(key) {
                None => Ok(default),
                Some(v) => v.as_f64().ok_or_else(|| format!("`{key}` must be a number")),
            }
        };
        let optimizer = match payload.get("optimizer").and_then(Value::as_str) {
            None => defaults.optimizer,
            Some("momentum") => Optimizer::Momentum,
            Some("adam") => Optimizer::adam(),
            Some("amsgrad") => Optimizer::amsgrad(),
            Some(other) => return Err(format!("unknown optimizer `{other}`")),
        };
        let cfg = TrainConfig {
            epochs: number("epochs", defaults.epochs as f64)? as usize,
            learning_rate: number("learning_rate", defaults.learning_rate)?,
            momentum: number("momentum", defaults.momentum)?,
            seed: number("seed", defaults.seed as f64)? as u64,
            feedback: number("feedback", defaults.feedback)?,
            optimizer,
            ..defaults
        };
        let actions = {
            let stored = lock(&self.shared.actions);
            match payload.get("actions") {
                None => stored.values().cloned().collect::<Vec<_>>(),
                Some(Value::Array(names)) => names
                    .iter()
                    .map(|n| {
                        let name = n.as_str().ok_or("action names must be strings")?;
                        stored.get(name).cloned().ok_or_else(|| format!("unknown action `{name}`"))
                    })
                    .collect::<Result<_, String>>()?,
                Some(_) => return Err("`actions` must be an array of names".into()),
            }
        };
        if actions.is_empty() {
            return Err("no actions to train on".into());
        }
        let dataset =
            Dataset::from_actions(&actions, &self.shared.model, &self.shared.vocabulary).map_err(|e| e.to_string())?;
        let posture_init = match payload.get("posture_init") {
            None => false,
            Some(v) => v.as_bool().ok_or("`posture_init` must be a boolean")?,
        };
        let config = MtrnnConfig {
            posture_init,
            ..MtrnnConfig::with_io(dataset.dim())
        };
        let mut net = network_for(&dataset, Some(config), &cfg).map_err(|e| e.to_string())?;
        {
            let mut status = lock(&self.shared.train);
            if status.state == "running" {
                return Err("a training job is already running".into());
            }
            *status = TrainStatus {
                state: "running",
                epochs: cfg.epochs,
                ..TrainStatus::default()
            };
        }
        let names: Vec<String> = dataset.sequences.iter().map(|s| s.name.clone()).collect();
        let shared = Arc::clone(&self.shared);
        let report = cfg.report_interval.max(1);
        let epochs = cfg.epochs;
        thread::Builder::new()
            .name("train".into())
            .spawn(move || {
                let result = fit(&mut net, &dataset.sequences, &cfg, |epoch, loss| {
                    let mut status = lock(&shared.train);
                    status.epoch = epoch;
                    status.loss = Some(loss);
                    if epoch == 1 || epoch % report == 0 || epoch == epochs {
                        status.curve.push((epoch, loss));
                    }
                    if shared.stopping.load(Ordering::SeqCst) {
                        ControlFlow::Break(())
                    } else {
                        ControlFlow::Continue(())
                    }
                });
                let mut status = lock(&shared.train);
                match result {
                    Ok(_) => {
                        net.metadata.model_id = dataset.model_id.clone();
                        net.metadata.vocabulary = Some(dataset.vocabulary.clone());
                        *lock(&shared.network) = Some(Arc::new(net));
                        status.state = "done";
                    }
                    Err(e) => {
                        status.state = "failed";
                        status.message = Some(e.to_string());
                    }
                }
            })
            .map_err(|e| e.to_string())?;
        Ok(json!({"sequences": names, "epochs": epochs}))
    }

    fn train_status(&self) -> Value {
        let s = lock(&self.shared.train).clone();
        json!({
            "state": s.state,
            "epoch": s.epoch,
            "epochs": s.epochs,
            "loss": s.loss,
            "curve": s.curve.iter().map(|&(epoch, loss)| json!({"epoch": epoch, "loss": loss})).collect::<Vec<_>>(),
            "message": s.message,
        })
    }

    fn generate(&self, payload: &Value) -> Handled {
        let net = lock(&self.shared.network).clone().ok_or("no trained network is loaded")?;
        let infos = &net.metadata.sequences;
        let index = match payload.get("sequence") {
            Some(Value::Number(n)) => n.as_u64().ok_or("`sequence` must be a non-negative index")? as usize,
            Some(Value::String(name)) => infos
                .iter()
                .position(|s| &s.name == name)
                .ok_or_else(|| format!("unknown sequence `{name}`"))?,
            _ => return Err("`sequence` must be an index or a name".into()),
        };
        let info = infos
            .get(index)
            .ok_or_else(|| format!("unknown sequence id {index} (network knows {})", infos.len()))?;
        let length = match payload.get("length") {
            None => info.length,
            Some(v) => v.as_u64().ok_or("`length` must be a positive integer")? as usize,
        };
        let context = ContextSource::Sequence(index);
        let generated = net
            .generate_sequence(&context, &info.initial_posture, length, info.name.clone(), info.rate_hz)
            .map_err(|e| e.to_string())?;
        let cs = net.rollout_states(&context, &generated).map_err(|e| e.to_string())?;
        let vocab = net.metadata.vocabulary.as_ref().unwrap_or(&self.shared.vocabulary);
        let action = denormalize(&generated, &self.shared.model, vocab).map_err(|e| e.to_string())?;
        *lock(&self.shared.last_cs) = cs.row_iter().last().map(|r| r.iter().copied().collect());
        Ok(json!({
            "sequence": index,
            "action": action,
            "cs": cs.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        }))
    }

    fn subscribe(&mut self, id: i64, payload: &Value) -> Handled {
        let rate_hz = match payload.get("rate_hz") {
            None => 20.0,
            Some(v) => v.as_f64().ok_or("`rate_hz` must be a number")?,
        };
        if !(rate_hz > 0.0 && rate_hz <= 1000.0) {
            return Err(format!("rate_hz {rate_hz} must be in (0, 1000]"));
        }
        let limit = match payload.get("duration_s") {
            None => None,
            Some(v) => Some((v.as_f64().ok_or("`duration_s` must be a number")? * rate_hz).round() as usize),
        };
        if self.subscriptions.contains_key(&id) {
            return Err(format!("subscription {id} already exists"));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let pushes = Arc::new(AtomicUsize::new(0));
        let thread = {
            let (stop, pushes) = (Arc::clone(&stop), Arc::clone(&pushes));
            let shared = Arc::clone(&self.shared);
            let writer = Arc::clone(&self.writer);
            thread::Builder::new()
                .name("subscription".into())
                .spawn(move || push_states(id, rate_hz, limit, shared, writer, stop, pushes))
                .map_err(|e| e.to_string())?
        };
        self.subscriptions.insert(id, Subscription { stop, pushes, thread });
        Ok(json!({"subscription": id, "rate_hz": rate_hz}))
    }

    fn unsubscribe(&mut self, payload: &Value) -> Handled {
        let id = payload
            .get("subscription")
            .and_then(Value::as_i64)
            .ok_or("`subscription` must be the id of the subscribe request")?;
        let sub = self.subscriptions.remove(&id).ok_or_else(|| format!("no subscription {id}"))?;
        sub.stop.store(true, Ordering::SeqCst);
        let _ = sub.thread.join();
        Ok(json!({"subscription": id, "pushes": sub.pushes.load(Ordering::SeqCst)}))
    }
}

fn push_states(
    id: i64,
    rate_hz: f64,
    limit: Option<usize>,
    shared: Arc<Shared>,
    writer: Writer,
    stop: Arc<AtomicBool>,
    pushes: Arc<AtomicUsize>,
) {
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let start = Instant::now();
    let mut k = 0u32;
    loop {
        if limit.is_some_and(|n| k as usize >= n) {
            break;
        }
        k += 1;
        let due = start + period * k;
        // Sleep in short slices so unsubscribe is prompt.
        while !stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            if now >= due {
                break;
            }
            thread::sleep((due - now).min(Duration::from_millis(5)));
        }
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut state) = shared.on_bus(state_snapshot) else { break };
        state["cs"] = json!(*lock(&shared.last_cs));
        if !send(&writer, &json!({"type": "state", "id": id, "payload": state})) {
            return;
        }
        pushes.fetch_add(1, Ordering::SeqCst);
    }
    let count = pushes.load(Ordering::SeqCst);
    send(&writer, &json!({"type": "subscribe_state_end", "id": id, "payload": {"pushes": count}}));
}

fn state_snapshot(owner: &mut BusOwner) -> Value {
    let joints = owner.model.joints();
    let positions: Vec<f64> = joints
        .iter()
        .map(|j| owner.bus.state(j.id).map_or(f64::NAN, |s| s.position))
        .collect();
    let torque: Vec<bool> = joints.iter().map(|j| owner.bus.torque_enabled(j.id).unwrap_or(false)).collect();
    json!({
        "time": owner.bus.time(),
        "names": owner.model.joint_names(),
        "positions": positions,
        "torque": torque,
        "recording": owner.recording.as_ref().map(|r| json!({"name": r.name(), "frames": r.len()})),
    })
}

fn action_summary(seq: &ActionSequence) -> Value {
    json!({
        "name": seq.name,
        "frames": seq.len(),
        "rate_hz": seq.rate_hz,
        "facial_events": seq.facial_events,
        "audio_events": seq.audio_events,
    })
}

/// Accepts `{"joint_name": radians, ...}` or an array of 17 numbers/nulls.
fn parse_pose(model: &RobotModel, value: Option<&Value>) -> Result<PuppetPose, String> {
    let mut pose: PuppetPose = [None; JOINT_COUNT];
    match value {
        Some(Value::Object(map)) => {
            for (name, v) in map {
                let i = model.joint_index(name).ok_or_else(|| format!("unknown joint `{name}`"))?;
                pose[i] = Some(v.as_f64().ok_or_else(|| format!("position for `{name}` must be a number"))?);
            }
        }
        Some(Value::Array(items)) if items.len() == JOINT_COUNT => {
            for (slot, v) in pose.iter_mut().zip(items) {
                *slot = match v {
                    Value::Null => None,
                    v => Some(v.as_f64().ok_or("positions must be numbers or null")?),
                };
            }
        }
        Some(Value::Array(items)) => {
            return Err(format!("expected {JOINT_COUNT} positions, got {}", items.len()));
        }
        _ => return Err("positions must be an object of joint names or an array".into()),
    }
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::default_model;

    #[test]
    fn pose_parsing() {
        let model = default_model();
        let p = parse_pose(&model, Some(&json!({"neck_yaw": 0.3}))).unwrap();
        assert_eq!(p[model.joint_index("neck_yaw").unwrap()], Some(0.3));
        assert_eq!(p.iter().filter(|q| q.is_some()).count(), 1);
        let mut arr = vec![Value::Null; JOINT_COUNT];
        arr[2] = json!(-0.1);
        assert_eq!(parse_pose(&model, Some(&Value::Array(arr))).unwrap()[2], Some(-0.1));
        assert!(parse_pose(&model, Some(&json!({"tail": 1.0}))).is_err());
        assert!(parse_pose(&model, Some(&json!([1.0, 2.0]))).is_err());
        assert!(parse_pose(&model, None).is_err());
    }
}
