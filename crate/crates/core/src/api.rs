//! Live-session service and its line-delimited JSON transport.
//!
//! Each session persists under `<root>/sessions/<id>/`:
//!
//! | file | contents |
//! |------|----------|
//! | `config.json` | `{"corpus": name, "config": SessionConfig}` |
//! | `answers.jsonl` | one `{"query_id", "answer", "timestamp"}` per accepted answer, fsynced before acknowledgment |
//! | `pending.json` | the current pending queries |
//! | `query_log.jsonl` | the session's query log |
//! | `metrics.tsv` | per-iteration metrics |
//! | `rules.jsonl` | accepted then rejected rules |
//! | `state.json` | the latest state snapshot |
//! | `model.txt` | the latest student model (written by `export_artifacts`) |
//!
//! A restarted service rebuilds a session by re-running the engine from its
//! config and replaying `answers.jsonl`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::Error;
use crate::features::FeatureIndex;
use crate::rules::{rules_to_records, Rule};
use crate::session::{metrics_tsv, Answer, AnswerAck, Engine, PendingQuery, SessionConfig, SessionSnapshot};

/// Machine-readable error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownQuery(_) => "unknown_query",
            Error::AlreadyAnswered(_) => "already_answered",
            Error::AnswerMismatch { .. } => "type_mismatch",
            Error::Terminated(_) => "session_terminated",
            Error::InvalidParameter(_) => "invalid_config",
            Error::Io { .. } => "io",
            _ => "internal",
        };
        ApiError::new(code, e.to_string())
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// A corpus sessions can be created against.
pub struct CorpusEntry {
    pub corpus: Arc<Corpus>,
    pub index: Arc<FeatureIndex>,
    pub rules: Vec<Rule>,
}

struct SessionHandle {
    corpus: String,
    dir: PathBuf,
    engine: Engine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    corpus: String,
    config: SessionConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredAnswer {
    query_id: String,
    answer: Answer,
    timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub status: String,
    pub terminated: bool,
    pub class_names: Vec<String>,
    pub queries: Vec<PendingQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleListing {
    pub accepted: Vec<Rule>,
    pub rejected: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportListing {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

pub struct Service {
    root: PathBuf,
    corpora: RwLock<HashMap<String, Arc<CorpusEntry>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionHandle>>>>,
}

fn io_err(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::from(Error::io(path, e))
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write_file(path: &Path, contents: &str) -> ApiResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Service {
    pub fn new(root: impl Into<PathBuf>) -> ApiResult<Self> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(|e| io_err(&sessions, e))?;
        Ok(Service {
            root,
            corpora: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn register_corpus(&self, name: &str, entry: CorpusEntry) {
        self.corpora
            .write()
            .expect("corpus registry lock")
            .insert(name.to_string(), Arc::new(entry));
    }

    fn corpus(&self, name: &str) -> ApiResult<Arc<CorpusEntry>> {
        self.corpora
            .read()
            .expect("corpus registry lock")
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::new("unknown_corpus", format!("no corpus registered as {name:?}")))
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    /// Ids of sessions present on disk.
    pub fn list_sessions(&self) -> ApiResult<Vec<String>> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("config.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Creates and persists a session. The same idempotency key always maps
    /// to the same session id.
    pub fn create_session(&self, corpus: &str, config: Value, idempotency_key: Option<&str>) -> ApiResult<String> {
        let config: SessionConfig =
            serde_json::from_value(config).map_err(|e| ApiError::new("invalid_config", e.to_string()))?;
        config.validate().map_err(|e| ApiError::new("invalid_config", e.to_string()))?;
        let entry = self.corpus(corpus)?;
        let id = match idempotency_key {
            Some(key) => {
                let digest = Sha256::digest(key.as_bytes());
                format!("s-{}", hex::encode(&digest[..8]))
            }
            None => format!("s-{}", uuid::Uuid::new_v4().simple()),
        };
        let mut sessions = self.sessions.lock().expect("session table lock");
        if sessions.contains_key(&id) || self.session_dir(&id).join("config.json").exists() {
            return Ok(id);
        }
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let engine = Engine::new(entry.corpus.clone(), entry.index.clone(), &entry.rules, config.clone())?;
        let stored = StoredConfig {
            corpus: corpus.to_string(),
            config,
        };
        let answers = dir.join("answers.jsonl");
        File::create(&answers).map_err(|e| io_err(&answers, e))?;
        write_file(
            &dir.join("config.json"),
            &serde_json::to_string_pretty(&stored).expect("config serializes"),
        )?;
        let handle = SessionHandle {
            corpus: corpus.to_string(),
            dir,
            engine,
        };
        write_artifacts(&handle)?;
        sessions.insert(id.clone(), Arc::new(Mutex::new(handle)));
        log::info!("created session {id} on corpus {corpus}");
        Ok(id)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<SessionHandle>>> {
        if !valid_session_id(id) {
            return Err(ApiError::new("unknown_session", format!("no session {id:?}")));
        }
        let mut sessions = self.sessions.lock().expect("session table lock");
        if let Some(h) = sessions.get(id) {
            return Ok(h.clone());
        }
        let dir = self.session_dir(id);
        let config_path = dir.join("config.json");
        if !config_path.exists() {
            return Err(ApiError::new("unknown_session", format!("no session {id:?}")));
        }
        let handle = self.restore(&dir)?;
        let handle = Arc::new(Mutex::new(handle));
        sessions.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    fn restore(&self, dir: &Path) -> ApiResult<SessionHandle> {
        let config_path = dir.join("config.json");
        let text = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
        let stored: StoredConfig = serde_json::from_str(&text).map_err(|e| ApiError::new("corrupt_session", e.to_string()))?;
        let entry = self.corpus(&stored.corpus)?;
        let mut engine = Engine::new(entry.corpus.clone(), entry.index.clone(), &entry.rules, stored.config)?;
        let answers_path = dir.join("answers.jsonl");
        for a in read_answers(&answers_path)? {
            engine.answer(&a.query_id, a.answer, a.timestamp)?;
        }
        log::info!("restored session from {} ({} answers)", dir.display(), engine.log().len());
        let handle = SessionHandle {
            corpus: stored.corpus,
            dir: dir.to_path_buf(),
            engine,
        };
        write_artifacts(&handle)?;
        Ok(handle)
    }

    pub fn next_queries(&self, id: &str) -> ApiResult<QueryBatch> {
        let handle = self.session(id)?;
        let h = handle.lock().expect("session lock");
        Ok(QueryBatch {
            status: h.engine.status().to_string(),
            terminated: h.engine.is_terminated(),
            class_names: h.engine.corpus().class_names().to_vec(),
            queries: h.engine.pending(),
        })
    }

    /// Validates, durably records, then applies an answer.
    pub fn submit_answer(&self, id: &str, query_id: &str, answer: Answer) -> ApiResult<AnswerAck> {
        let handle = self.session(id)?;
        let mut h = handle.lock().expect("session lock");
        if h.engine.check_answer(query_id, answer)? {
            return Ok(h.engine.answer(query_id, answer, 0)?);
        }
        let record = StoredAnswer {
            query_id: query_id.to_string(),
            answer,
            timestamp: now_millis(),
        };
        let path = h.dir.join("answers.jsonl");
        let mut file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let line = serde_json::to_string(&record).expect("answer serializes") + "\n";
        file.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
        file.sync_all().map_err(|e| io_err(&path, e))?;
        let ack = h.engine.answer(query_id, answer, record.timestamp)?;
        write_artifacts(&h)?;
        Ok(ack)
    }

    pub fn session_state(&self, id: &str) -> ApiResult<SessionSnapshot> {
        let handle = self.session(id)?;
        let h = handle.lock().expect("session lock");
        Ok(h.engine.snapshot())
    }

    pub fn list_rules(&self, id: &str) -> ApiResult<RuleListing> {
        let handle = self.session(id)?;
        let h = handle.lock().expect("session lock");
        let digest = h.engine.digest();
        Ok(RuleListing {
            accepted: digest.accepted,
            rejected: digest.rejected,
        })
    }

    /// Rewrites every artifact, including the current student model.
    pub fn export_artifacts(&self, id: &str) -> ApiResult<ExportListing> {
        let handle = self.session(id)?;
        let h = handle.lock().expect("session lock");
        write_artifacts(&h)?;
        if let Some(student) = h.engine.student() {
            student.save(h.dir.join("model.txt"))?;
        }
        let mut files: Vec<String> = fs::read_dir(&h.dir)
            .map_err(|e| io_err(&h.dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        files.sort();
        Ok(ExportListing {
            dir: h.dir.clone(),
            files,
        })
    }

    /// Persists every loaded session.
    pub fn flush(&self) -> ApiResult<()> {
        let sessions = self.sessions.lock().expect("session table lock");
        for handle in sessions.values() {
            write_artifacts(&handle.lock().expect("session lock"))?;
        }
        Ok(())
    }
}

/// Reads the answer log. A torn trailing record (a crash mid-append) is cut
/// off so later appends start on a clean line.
fn read_answers(path: &Path) -> ApiResult<Vec<StoredAnswer>> {
    let raw = match fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut answers = Vec::new();
    let mut good = 0;
    for line in raw.split_inclusive('\n') {
        if !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            good += line.len();
            continue;
        }
        match serde_json::from_str::<StoredAnswer>(line) {
            Ok(a) => {
                answers.push(a);
                good += line.len();
            }
            Err(_) => break,
        }
    }
    if good < raw.len() {
        log::warn!("{}: dropping {} bytes of incomplete answer data", path.display(), raw.len() - good);
        let file = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
        file.set_len(good as u64).map_err(|e| io_err(path, e))?;
        file.sync_all().map_err(|e| io_err(path, e))?;
    }
    Ok(answers)
}

fn write_artifacts(h: &SessionHandle) -> ApiResult<()> {
    let e = &h.engine;
    write_file(
        &h.dir.join("pending.json"),
        &serde_json::to_string_pretty(&e.pending()).expect("pending serializes"),
    )?;
    let mut log = String::new();
    for entry in e.log() {
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    }
    write_file(&h.dir.join("query_log.jsonl"), &log)?;
    write_file(&h.dir.join("metrics.tsv"), &metrics_tsv(e.metrics()))?;
    let digest = e.digest();
    let mut rules = digest.accepted;
    rules.extend(digest.rejected);
    write_file(&h.dir.join("rules.jsonl"), &rules_to_records(&rules))?;
    let state = json!({ "corpus": h.corpus, "snapshot": e.snapshot() });
    write_file(&h.dir.join("state.json"), &serde_json::to_string_pretty(&state).expect("state serializes"))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    CreateSession {
        #[serde(default = "default_corpus")]
        corpus: String,
        #[serde(default)]
        config: Value,
        idempotency_key: Option<String>,
    },
    NextQueries {
        session: String,
    },
    SubmitAnswer {
        session: String,
        query_id: String,
        answer: Answer,
    },
    SessionState {
        session: String,
    },
    ListRules {
        session: String,
    },
    ExportArtifacts {
        session: String,
    },
    ListSessions,
    Shutdown,
}

fn default_corpus() -> String {
    "default".to_string()
}

fn respond<T: Serialize>(r: ApiResult<T>) -> Value {
    match r {
        Ok(v) => json!({ "ok": true, "result": v }),
        Err(e) => json!({ "ok": false, "error": e }),
    }
}

/// Handles one request line. Returns the response and whether the server
/// should stop.
pub fn handle_line(service: &Service, line: &str) -> (Value, bool) {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return (respond::<()>(Err(ApiError::new("bad_request", e.to_string()))), false),
    };
    let response = match request {
        Request::CreateSession {
            corpus,
            config,
            idempotency_key,
        } => {
            let config = if config.is_null() { json!({}) } else { config };
            respond(
                service
                    .create_session(&corpus, config, idempotency_key.as_deref())
                    .map(|id| json!({ "session": id })),
            )
        }
        Request::NextQueries { session } => respond(service.next_queries(&session)),
        Request::SubmitAnswer {
            session,
            query_id,
            answer,
        } => respond(service.submit_answer(&session, &query_id, answer)),
        Request::SessionState { session } => respond(service.session_state(&session)),
        Request::ListRules { session } => respond(service.list_rules(&session)),
        Request::ExportArtifacts { session } => respond(service.export_artifacts(&session)),
        Request::ListSessions => respond(service.list_sessions()),
        Request::Shutdown => return (respond(service.flush().map(|_| json!({ "stopping": true }))), true),
    };
    (response, false)
}

/// Line-delimited JSON server: one request object per line, one response
/// object per line, a thread per connection.
pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, service: Arc<Service>) -> std::io::Result<Self> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            service,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until a `shutdown` request arrives, then flushes every session.
    pub fn run(self) -> std::io::Result<()> {
        let addr = self.listener.local_addr()?;
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let service = self.service.clone();
            let stop = self.stop.clone();
            thread::spawn(move || {
                if let Err(e) = serve_connection(stream, &service, &stop, addr) {
                    log::warn!("connection error: {e}");
                }
            });
        }
        if let Err(e) = self.service.flush() {
            log::error!("flush on shutdown failed: {e}");
        }
        Ok(())
    }
}

fn serve_connection(stream: TcpStream, service: &Service, stop: &AtomicBool, addr: SocketAddr) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, shutdown) = handle_line(service, &line);
        writer.write_all(response.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if shutdown {
            stop.store(true, Ordering::SeqCst);
            // Wake the accept loop so it observes the flag.
            let _ = TcpStream::connect(addr);
            break;
        }
    }
    Ok(())
}

/// Minimal blocking client for the line protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Client {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    /// Sends one request and returns the `result` payload or the error.
    pub fn call(&mut self, request: &Value) -> std::io::Result<ApiResult<Value>> {
        self.writer.write_all(request.to_string().as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut line = String::new();
        self.reader.read_line(&mut line)?;
        let response: Value = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if response["ok"].as_bool() == Some(true) {
            Ok(Ok(response["result"].clone()))
        } else {
            let err: ApiError = serde_json::from_value(response["error"].clone())
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            Ok(Err(err))
        }
    }
}
