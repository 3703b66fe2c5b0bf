//! Line-delimited JSON protocol for out-of-process trainers.
//!
//! The harness writes one request object per line to the trainer's stdin and reads exactly one
//! response line from its stdout before sending the next request.
//!
//! | request | success payload |
//! |---|---|
//! | `{"cmd":"init","checkpoint":s,"lr":x,"batch_size":n,"seed":n,"data":path}` | `{"protocol":1}` |
//! | `{"cmd":"train","epochs":n}` | `{"metric":x}` (eval macro-F1) |
//! | `{"cmd":"eval_test"}` | `{"predictions":[label, ...]}` in data-manifest test order |
//! | `{"cmd":"pause"}` | `{"token":s}` |
//! | `{"cmd":"resume","token":s}` | `{}` |
//! | `{"cmd":"shutdown"}` | `{}` |
//!
//! Every response carries `"ok"`. Failures are `{"ok":false,"error":s}`; an unknown checkpoint
//! yields `"checkpoint_unavailable"` and a malformed or unknown request yields `"bad_request"`.
//!
//! `data` names a [`DataManifest`]: train / eval / test lists of serialized
//! [`ModelInput`](crate::preprocess::ModelInput) files with their labels.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::baseline::DEFAULT_POOL_FACTOR;
use super::session::{BaselineTrainer, FeatureStore};
use super::{CheckpointToken, TrainConfig, TrainerFactory, TrainerHandle, TrialData};
use crate::datakit::DatasetIndex;
use crate::heightfield::{PATCH_HEIGHT, PATCH_WIDTH};
use crate::metrics::{confusion, evaluate, EvalReport};
use crate::preprocess::{pad_offsets, GrayPatch8, ModelInput};
use crate::{DefectLabel, Error, Result};

pub const PROTOCOL_VERSION: u64 = 1;
/// Flag appended to every trainer command line.
pub const PROTOCOL_FLAG: &str = "--protocol=1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

pub const ERR_CHECKPOINT_UNAVAILABLE: &str = "checkpoint_unavailable";
pub const ERR_BAD_REQUEST: &str = "bad_request";
pub const ERR_NOT_INITIALIZED: &str = "not_initialized";

/// Checkpoint id served by [`serve_reference`].
pub const REFERENCE_CHECKPOINT: &str = "smalldata/softmax-baseline";

/// A Table 1 backbone: short name, hub checkpoint, binary size and tuned hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZooEntry {
    pub short_name: &'static str,
    pub checkpoint: &'static str,
    pub size_mb: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
}

const fn zoo(short_name: &'static str, checkpoint: &'static str, size_mb: u32, batch_size: usize, learning_rate: f64) -> ZooEntry {
    ZooEntry {
        short_name,
        checkpoint,
        size_mb,
        batch_size,
        learning_rate,
    }
}

pub const MODEL_ZOO: [ZooEntry; 12] = [
    zoo("beit-base", "microsoft/beit-base-patch16-224", 350, 32, 3.80e-6),
    zoo("beit-large", "microsoft/beit-large-patch16-224", 1259, 64, 3.72e-5),
    zoo("deit-tiny", "facebook/deit-tiny-patch16-224", 23, 16, 3.63e-5),
    zoo("deit-base", "facebook/deit-base-patch16-224", 346, 16, 4.14e-5),
    zoo("dinov2-small", "facebook/dinov2-small", 88, 16, 5.61e-6),
    zoo("focalnet-tiny", "microsoft/focalnet-tiny", 114, 16, 5.61e-6),
    zoo("focalnet-base", "microsoft/focalnet-base", 353, 32, 8.41e-5),
    zoo("resnet-18", "microsoft/resnet-18", 46, 16, 3.63e-5),
    zoo("resnet-50", "microsoft/resnet-50", 103, 16, 9.26e-5),
    zoo("resnet-101", "microsoft/resnet-101", 167, 16, 9.26e-5),
    zoo("vit-base", "google/vit-base-patch16-224-in21k", 1198, 32, 1.15e-5),
    zoo("vit-large", "google/vit-large-patch16-224-in21k", 1249, 64, 2.78e-5),
];

pub fn zoo_entry(name_or_checkpoint: &str) -> Option<&'static ZooEntry> {
    MODEL_ZOO
        .iter()
        .find(|z| z.short_name == name_or_checkpoint || z.checkpoint == name_or_checkpoint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Init {
        checkpoint: String,
        lr: f64,
        batch_size: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<PathBuf>,
    },
    Train {
        epochs: u32,
    },
    EvalTest,
    Pause,
    Resume {
        token: String,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub item_id: String,
    pub path: PathBuf,
    pub label: DefectLabel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataManifest {
    pub train: Vec<DataItem>,
    pub eval: Vec<DataItem>,
    pub test: Vec<DataItem>,
}

/// File name of an item's serialized model input.
pub fn model_input_file(item_id: &str) -> String {
    format!("{item_id}.bin")
}

impl DataManifest {
    /// Points every item at `<input_dir>/<item_id>.bin`.
    pub fn for_trial(data: &TrialData, input_dir: &Path) -> Self {
        let items = |idx: &DatasetIndex| {
            idx.entries()
                .iter()
                .map(|e| DataItem {
                    item_id: e.item_id.clone(),
                    path: input_dir.join(model_input_file(&e.item_id)),
                    label: e.label,
                })
                .collect()
        };
        DataManifest {
            train: items(&data.train),
            eval: items(&data.eval),
            test: items(&data.test),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One request/response channel to a trainer.
pub struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    timeout: Duration,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("pid", &self.child.as_ref().map(Child::id))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl Connection {
    /// Launches `argv` plus [`PROTOCOL_FLAG`] with piped stdio.
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Protocol("empty trainer command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .arg(PROTOCOL_FLAG)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::from_streams(stdout, stdin, timeout);
        conn.child = Some(child);
        Ok(conn)
    }

    /// Wraps an arbitrary byte stream pair, e.g. pipes to an in-process server.
    pub fn from_streams(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Connection {
            writer: Box::new(writer),
            lines: rx,
            child: None,
            timeout,
        }
    }

    /// Sends one raw line and returns the parsed response object.
    pub fn exchange_raw(&mut self, line: &str) -> Result<Value> {
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Protocol(format!("trainer stdin closed: {e}")))?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(Error::Protocol(format!("reading trainer output: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Protocol(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Protocol("trainer closed its output".into())),
        };
        let value: Value = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("response is not JSON ({e}): {reply}")))?;
        match value.get("ok") {
            Some(Value::Bool(_)) => Ok(value),
            _ => Err(Error::Protocol(format!("response lacks a boolean `ok`: {reply}"))),
        }
    }

    pub fn exchange(&mut self, request: &Request) -> Result<Value> {
        let line = serde_json::to_string(request)?;
        self.exchange_raw(&line)
    }

    /// Like [`exchange`](Self::exchange) but turns `ok:false` into an error.
    pub fn call(&mut self, request: &Request) -> Result<Value> {
        let v = self.exchange(request)?;
        if v["ok"] == Value::Bool(true) {
            Ok(v)
        } else {
            let msg = v.get("error").and_then(Value::as_str).unwrap_or("unspecified error");
            Err(Error::Protocol(msg.to_string()))
        }
    }

    /// Waits for a spawned trainer to exit, killing it after the timeout.
    pub fn close(mut self) -> Result<()> {
        self.reap()
    }

    fn reap(&mut self) -> Result<()> {
        if let Some(mut child) = self.child.take() {
            let deadline = std::time::Instant::now() + self.timeout.min(Duration::from_secs(10));
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => return Ok(()),
                    Ok(None) if std::time::Instant::now() < deadline => std::thread::sleep(Duration::from_millis(5)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::Protocol("trainer did not exit after shutdown".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::Protocol(format!("response lacks `{key}`: {v}")))
}

fn metric_of(v: &Value) -> Result<f64> {
    field(v, "metric")?
        .as_f64()
        .filter(|m| (0.0..=1.0).contains(m))
        .ok_or_else(|| Error::Protocol(format!("metric must be a number in [0, 1]: {v}")))
}

fn predictions_of(v: &Value) -> Result<Vec<DefectLabel>> {
    serde_json::from_value(field(v, "predictions")?.clone())
        .map_err(|e| Error::Protocol(format!("bad predictions: {e}")))
}

/// A [`TrainerHandle`] backed by one trainer process.
#[derive(Debug)]
pub struct ExternalTrainer {
    argv: Vec<String>,
    checkpoint: String,
    data_path: PathBuf,
    test_truths: Vec<DefectLabel>,
    timeout: Duration,
    conn: Option<Connection>,
}

impl ExternalTrainer {
    pub fn new(argv: Vec<String>, checkpoint: String, data_path: PathBuf, test_truths: Vec<DefectLabel>, timeout: Duration) -> Self {
        ExternalTrainer {
            argv,
            checkpoint,
            data_path,
            test_truths,
            timeout,
            conn: None,
        }
    }

    fn conn(&mut self) -> Result<&mut Connection> {
        self.conn
            .as_mut()
            .ok_or_else(|| Error::Protocol("trainer used before init".into()))
    }
}

impl TrainerHandle for ExternalTrainer {
    fn init(&mut self, config: &TrainConfig) -> Result<()> {
        config.validate()?;
        if self.conn.is_none() {
            self.conn = Some(Connection::spawn(&self.argv, self.timeout)?);
        }
        let request = Request::Init {
            checkpoint: self.checkpoint.clone(),
            lr: config.learning_rate,
            batch_size: config.batch_size,
            seed: config.seed,
            data: Some(self.data_path.clone()),
        };
        let v = self.conn()?.call(&request)?;
        match v.get("protocol").and_then(Value::as_u64) {
            Some(PROTOCOL_VERSION) => Ok(()),
            other => Err(Error::Protocol(format!("unsupported protocol version {other:?}"))),
        }
    }

    fn train(&mut self, epochs: u32) -> Result<f64> {
        let v = self.conn()?.call(&Request::Train { epochs })?;
        metric_of(&v)
    }

    fn evaluate_test(&mut self) -> Result<EvalReport> {
        let v = self.conn()?.call(&Request::EvalTest)?;
        let preds = predictions_of(&v)?;
        if preds.len() != self.test_truths.len() {
            return Err(Error::Protocol(format!(
                "{} predictions for {} test items",
                preds.len(),
                self.test_truths.len()
            )));
        }
        Ok(evaluate(&confusion(&self.test_truths, &preds)?))
    }

    fn pause(&mut self) -> Result<CheckpointToken> {
        let v = self.conn()?.call(&Request::Pause)?;
        field(&v, "token")?
            .as_str()
            .map(|t| CheckpointToken(t.to_string()))
            .ok_or_else(|| Error::Protocol("token must be a string".into()))
    }

    fn resume(&mut self, token: &CheckpointToken) -> Result<()> {
        self.conn()?.call(&Request::Resume { token: token.0.clone() })?;
        Ok(())
    }

    fn shutdown(&mut self) -> Result<()> {
        match self.conn.take() {
            Some(mut conn) => {
                conn.call(&Request::Shutdown)?;
                conn.close()
            }
            None => Ok(()),
        }
    }
}

/// Creates [`ExternalTrainer`]s, writing one data manifest per trial data assignment.
#[derive(Debug)]
pub struct ExternalFactory {
    pub argv: Vec<String>,
    pub checkpoint: String,
    /// Directory of `<item_id>.bin` model inputs.
    pub input_dir: PathBuf,
    /// Where data manifests are written.
    pub work_dir: PathBuf,
    pub timeout: Duration,
    counter: AtomicU64,
}

impl ExternalFactory {
    pub fn new(argv: Vec<String>, checkpoint: String, input_dir: PathBuf, work_dir: PathBuf) -> Self {
        ExternalFactory {
            argv,
            checkpoint,
            input_dir,
            work_dir,
            timeout: DEFAULT_TIMEOUT,
            counter: AtomicU64::new(0),
        }
    }

    /// Splits a shell-style command line.
    pub fn parse_command(command: &str) -> Result<Vec<String>> {
        match shlex::split(command) {
            Some(argv) if !argv.is_empty() => Ok(argv),
            _ => Err(Error::Config(format!("cannot parse trainer command `{command}`"))),
        }
    }
}

impl TrainerFactory for ExternalFactory {
    fn create(&self, data: &TrialData) -> Result<Box<dyn TrainerHandle>> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self.work_dir.join(format!("data-{n:05}.json"));
        DataManifest::for_trial(data, &self.input_dir).write(&path)?;
        Ok(Box::new(ExternalTrainer::new(
            self.argv.clone(),
            self.checkpoint.clone(),
            path,
            data.test.entries().iter().map(|e| e.label).collect(),
            self.timeout,
        )))
    }
}

/// Recovers the unpadded first channel of a model input.
pub fn unpad(input: &ModelInput, width: usize, height: usize) -> Result<GrayPatch8> {
    let (left, top) = pad_offsets(width, height);
    let mut px = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            px.push(input.at(top + r, left + c, 0));
        }
    }
    GrayPatch8::new(width, height, px)
}

struct ServerState {
    trainer: BaselineTrainer,
}

/// Where [`serve_reference`] stores paused state; `SMALLDATA_TRAINER_STATE` or the temp dir.
pub fn reference_state_dir() -> PathBuf {
    std::env::var_os("SMALLDATA_TRAINER_STATE")
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

fn load_split(items: &[DataItem]) -> Result<(Vec<(String, GrayPatch8)>, DatasetIndex)> {
    let mut patches = Vec::with_capacity(items.len());
    for it in items {
        let bytes = std::fs::read(&it.path).map_err(|e| Error::io(&it.path, e))?;
        let input = ModelInput::from_bytes(&bytes)?;
        patches.push((it.item_id.clone(), unpad(&input, PATCH_WIDTH, PATCH_HEIGHT)?));
    }
    let index = DatasetIndex::from_pairs(items.iter().map(|it| (it.item_id.as_str(), it.label)))?;
    Ok((patches, index))
}

fn reference_init(lr: f64, batch_size: usize, seed: u64, data: Option<&Path>) -> Result<ServerState> {
    let manifest = DataManifest::read(data.ok_or_else(|| Error::Protocol(ERR_BAD_REQUEST.into()))?)?;
    let mut gray = Vec::new();
    let mut parts = Vec::new();
    for items in [&manifest.train, &manifest.eval, &manifest.test] {
        let (patches, index) = load_split(items)?;
        gray.extend(patches);
        parts.push(index);
    }
    gray.sort_by(|a, b| a.0.cmp(&b.0));
    gray.dedup_by(|a, b| a.0 == b.0);
    let store = FeatureStore::from_gray(gray.iter().map(|(id, g)| (id.as_str(), g)), DEFAULT_POOL_FACTOR)?;
    let test = parts.pop().expect("three parts");
    let eval = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    let mut trainer = BaselineTrainer::new(Arc::new(store), &TrialData::new(train, eval, test))?;
    trainer.init(&TrainConfig {
        learning_rate: lr,
        batch_size,
        seed,
    })?;
    Ok(ServerState { trainer })
}

static TOKEN_COUNTER: AtomicU64 = AtomicU64::new(0);

fn handle(state: &mut Option<ServerState>, request: Request, state_dir: &Path) -> std::result::Result<Value, String> {
    let err = |e: Error| e.to_string();
    if let Request::Init {
        checkpoint,
        lr,
        batch_size,
        seed,
        data,
    } = &request
    {
        if checkpoint != REFERENCE_CHECKPOINT {
            return Err(ERR_CHECKPOINT_UNAVAILABLE.into());
        }
        *state = Some(reference_init(*lr, *batch_size, *seed, data.as_deref()).map_err(err)?);
        return Ok(json!({"protocol": PROTOCOL_VERSION}));
    }
    if request == Request::Shutdown {
        *state = None;
        return Ok(json!({}));
    }
    let s = state.as_mut().ok_or_else(|| ERR_NOT_INITIALIZED.to_string())?;
    match request {
        Request::Train { epochs } => Ok(json!({"metric": s.trainer.train(epochs).map_err(err)?})),
        Request::EvalTest => {
            let preds = s.trainer.test_predictions().map_err(err)?;
            Ok(json!({"predictions": preds}))
        }
        Request::Pause => {
            let token = s.trainer.pause().map_err(err)?;
            let n = TOKEN_COUNTER.fetch_add(1, Ordering::Relaxed);
            let path = state_dir.join(format!("reference-{}-{n}.json", std::process::id()));
            std::fs::write(&path, token.0).map_err(|e| err(Error::io(&path, e)))?;
            Ok(json!({"token": path}))
        }
        Request::Resume { token } => {
            let text = std::fs::read_to_string(&token).map_err(|e| err(Error::io(&token, e)))?;
            s.trainer.resume(&CheckpointToken(text)).map_err(err)?;
            Ok(json!({}))
        }
        Request::Init { .. } | Request::Shutdown => unreachable!("handled above"),
    }
}

/// Serves the protocol over `input` / `output` with the built-in baseline as the model.
///
/// Paused sessions are written to `state_dir` and the token is the file path. Returns after a
/// `shutdown` request or at end of input.
pub fn serve_reference(input: impl BufRead, mut output: impl Write, state_dir: &Path) -> Result<()> {
    let mut state = None;
    for line in input.lines() {
        let line = line.map_err(|e| Error::Protocol(format!("reading requests: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, done) = match serde_json::from_str::<Request>(&line) {
            Err(_) => (json!({"ok": false, "error": ERR_BAD_REQUEST}), false),
            Ok(req) => {
                let done = req == Request::Shutdown;
                match handle(&mut state, req, state_dir) {
                    Ok(mut v) => {
                        v["ok"] = Value::Bool(true);
                        (v, done)
                    }
                    Err(e) => (json!({"ok": false, "error": e}), false),
                }
            }
        };
        writeln!(output, "{reply}")
            .and_then(|_| output.flush())
            .map_err(|e| Error::Protocol(format!("writing response: {e}")))?;
        if done {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<()>) -> ConformanceCheck {
    match outcome {
        Ok(()) => ConformanceCheck {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(e) => ConformanceCheck {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn expect_error(v: &Value, code: &str) -> Result<()> {
    if v["ok"] == Value::Bool(false) && v["error"] == Value::String(code.into()) {
        Ok(())
    } else {
        Err(Error::Protocol(format!("expected error `{code}`, got {v}")))
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Protocol(msg.into()))
    }
}

/// Scripted client exercising every request against fresh trainer connections.
///
/// `connect` opens a new connection; `data` is a data manifest with a non-empty test list.
pub fn conformance_suite(connect: &dyn Fn() -> Result<Connection>, checkpoint: &str, data: &Path) -> Vec<ConformanceCheck> {
    let init = |checkpoint: &str| Request::Init {
        checkpoint: checkpoint.into(),
        lr: 0.05,
        batch_size: 16,
        seed: 7,
        data: Some(data.to_path_buf()),
    };
    let mut checks = Vec::new();

    checks.push(check(
        "malformed_and_unknown_requests",
        (|| {
            let mut c = connect()?;
            expect_error(&c.exchange_raw("this is not json")?, ERR_BAD_REQUEST)?;
            expect_error(&c.exchange_raw(r#"{"cmd":"dance"}"#)?, ERR_BAD_REQUEST)?;
            expect_error(&c.exchange_raw(r#"{"cmd":"train"}"#)?, ERR_BAD_REQUEST)?;
            c.call(&Request::Shutdown)?;
            c.close()
        })(),
    ));

    checks.push(check(
        "unknown_checkpoint",
        (|| {
            let mut c = connect()?;
            expect_error(&c.exchange(&init("no-such/checkpoint"))?, ERR_CHECKPOINT_UNAVAILABLE)?;
            c.call(&Request::Shutdown)?;
            c.close()
        })(),
    ));

    let mut paused: Option<(String, f64)> = None;
    checks.push(check(
        "session_lifecycle",
        (|| {
            let mut c = connect()?;
            let v = c.call(&init(checkpoint))?;
            ensure(v["protocol"] == json!(PROTOCOL_VERSION), format!("init reply {v}"))?;
            let m1 = metric_of(&c.call(&Request::Train { epochs: 1 })?)?;
            let m0 = metric_of(&c.call(&Request::Train { epochs: 0 })?)?;
            ensure(m0 == m1, format!("train(0) changed the metric: {m1} then {m0}"))?;
            let manifest = DataManifest::read(data)?;
            let preds = predictions_of(&c.call(&Request::EvalTest)?)?;
            ensure(
                preds.len() == manifest.test.len(),
                format!("{} predictions for {} test items", preds.len(), manifest.test.len()),
            )?;
            let token = c.call(&Request::Pause)?;
            let token = field(&token, "token")?
                .as_str()
                .ok_or_else(|| Error::Protocol("token must be a string".into()))?
                .to_string();
            let next = metric_of(&c.call(&Request::Train { epochs: 1 })?)?;
            paused = Some((token, next));
            c.call(&Request::Shutdown)?;
            c.close()
        })(),
    ));

    checks.push(check(
        "resume_continues_trajectory",
        (|| {
            let (token, expected) = paused
                .clone()
                .ok_or_else(|| Error::Protocol("lifecycle check did not produce a token".into()))?;
            let mut c = connect()?;
            c.call(&init(checkpoint))?;
            c.call(&Request::Resume { token })?;
            let got = metric_of(&c.call(&Request::Train { epochs: 1 })?)?;
            ensure(got == expected, format!("resumed metric {got}, uninterrupted {expected}"))?;
            c.call(&Request::Shutdown)?;
            c.close()
        })(),
    ));

    checks.push(check(
        "requests_before_init",
        (|| {
            let mut c = connect()?;
            let v = c.exchange(&Request::Train { epochs: 1 })?;
            ensure(v["ok"] == Value::Bool(false), format!("train before init succeeded: {v}"))?;
            c.call(&Request::Shutdown)?;
            c.close()
        })(),
    ));

    checks
}
