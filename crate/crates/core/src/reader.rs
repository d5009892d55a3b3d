//! Reader-study session logic: blinded task assembly, idempotent response
//! capture and CSV export. Transport-agnostic; the HTTP layer lives in the
//! command-line crate.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::GenerationMeta;
use crate::manifest::{manifest_root, DatasetManifest, Split};

pub const POOL_FILE: &str = "pool.json";
pub const DISCRIMINATION_ITEMS: usize = 15;
pub const DISCRIMINATION_SYNTHETIC: usize = 10;
pub const DEFAULT_TRIPLETS: usize = 10;
pub const MAX_REALISM_SCORE: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Task 1: real or synthetic, one image at a time.
    Discrimination,
    /// Task 2: pick the real post-contrast image of a pair.
    Comparative,
    /// Task 3: score realism and mark regions on a labeled triplet.
    Annotation,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrimination" | "1" => Ok(Task::Discrimination),
            "comparative" | "2" => Ok(Task::Comparative),
            "annotation" | "3" => Ok(Task::Annotation),
            other => Err(Error::InvalidValue(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Discrimination => "discrimination",
            Task::Comparative => "comparative",
            Task::Annotation => "annotation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticImage {
    pub variant: String,
    pub path: PathBuf,
}

/// One test slice with its real images and any synthetic counterparts.
/// Paths are relative to the pool directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub case_id: String,
    pub pre: PathBuf,
    pub real_post: PathBuf,
    pub synthetic: Vec<SyntheticImage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePool {
    pub entries: Vec<PoolEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl ImagePool {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(POOL_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut pool: Self = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
        pool.root = dir.to_path_buf();
        Ok(pool)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(POOL_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(&self.entries).expect("pool serializes"),
        ))
    }

    /// Copies the test-split images of `manifest_path` and every generated
    /// directory into `out_dir/images` and writes `pool.json`.
    pub fn build(manifest_path: &Path, generated_dirs: &[PathBuf], out_dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_root(manifest_path);
        let images = out_dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let copy = |src: &Path, name: String| -> Result<PathBuf> {
            let rel = PathBuf::from("images").join(name);
            let dst = out_dir.join(&rel);
            fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
            Ok(rel)
        };
        let mut variants = Vec::new();
        for dir in generated_dirs {
            let name = GenerationMeta::load(dir)?.map(|m| m.variant).unwrap_or_else(|| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            variants.push((name, dir));
        }
        let mut entries = Vec::new();
        for r in manifest.records_in(Split::Test) {
            let key = r.key();
            let mut synthetic = Vec::new();
            for (i, (name, dir)) in variants.iter().enumerate() {
                let src = dir.join(format!("{key}.png"));
                if src.exists() {
                    synthetic.push(SyntheticImage {
                        variant: name.clone(),
                        path: copy(&src, format!("{key}_syn{i}.png"))?,
                    });
                }
            }
            entries.push(PoolEntry {
                case_id: key.clone(),
                pre: copy(&root.join(&r.relative_path_pre), format!("{key}_pre.png"))?,
                real_post: copy(&root.join(&r.relative_path_post), format!("{key}_post.png"))?,
                synthetic,
            });
        }
        let pool = Self {
            entries,
            root: out_dir.to_path_buf(),
        };
        pool.save(out_dir)?;
        Ok(pool)
    }

    fn synthetic_refs(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .flat_map(|(e, entry)| (0..entry.synthetic.len()).map(move |s| (e, s)))
            .collect()
    }
}

/// Image shown to the reader, addressed only by an opaque token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub label: String,
    pub url: String,
}

/// What the UI receives for one item. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPayload {
    pub item_id: String,
    pub task: Task,
    pub index: usize,
    pub total: usize,
    pub images: Vec<ImageRef>,
    /// Recorded answer when the item was already submitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted: Option<Response>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item(ItemPayload),
    Complete { answered: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Truth {
    /// Task 1: whether the single image is real, and its source.
    Single { real: bool, source: String },
    /// Task 2: side holding the real image.
    Pair { real_side: String, variant: String },
    /// Task 3: the variant of the synthetic image.
    Triplet { variant: String },
}

impl Truth {
    fn label(&self) -> String {
        match self {
            Truth::Single { real: true, .. } => "real".into(),
            Truth::Single { real: false, .. } => "synthetic".into(),
            Truth::Pair { real_side, .. } => real_side.clone(),
            Truth::Triplet { .. } => String::new(),
        }
    }

    fn source(&self) -> String {
        match self {
            Truth::Single { source, .. } => source.clone(),
            Truth::Pair { variant, .. } | Truth::Triplet { variant } => variant.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct SessionItem {
    item_id: String,
    images: Vec<(String, PathBuf)>,
    truth: Truth,
}

/// Rectangle in image pixel coordinates with an optional remark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub remark: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub item_id: String,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub realism_score: Option<u8>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub remark: Option<String>,
}

/// A recorded answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub answer: Option<String>,
    pub realism_score: Option<u8>,
    pub annotations: Vec<Annotation>,
    pub remark: Option<String>,
    pub sequence: usize,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub item_id: String,
    pub sequence: usize,
    pub timestamp_ms: u64,
    /// Only present for sessions created with feedback enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub reader_id: String,
    pub task: Task,
    pub seed: u64,
    /// Triplets for Tasks 2 and 3; Task 1 is always 15 items.
    #[serde(default)]
    pub n_items: Option<usize>,
    /// Reveal per-item correctness in acknowledgements.
    #[serde(default)]
    pub feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub reader_id: String,
    pub task: Task,
    pub total_items: usize,
    pub feedback: bool,
}

#[derive(Debug, Clone)]
struct Session {
    info: SessionInfo,
    items: Vec<SessionItem>,
    responses: Vec<Response>,
    acks: HashMap<String, Ack>,
}

/// Builds the ordered, truth-annotated item list for a session. The order
/// depends only on the pool contents, the task and the seed.
fn assemble(pool: &ImagePool, req: &SessionRequest) -> Result<Vec<SessionItem>> {
    let mut h = Sha256::new();
    h.update(pool.hash().as_bytes());
    h.update(req.task.to_string().as_bytes());
    h.update(req.seed.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let root = &pool.root;
    let synthetic = pool.synthetic_refs();
    let mut items = Vec::new();
    match req.task {
        Task::Discrimination => {
            let n_real = DISCRIMINATION_ITEMS - DISCRIMINATION_SYNTHETIC;
            if synthetic.len() < DISCRIMINATION_SYNTHETIC || pool.entries.len() < n_real {
                return Err(Error::InvalidValue(format!(
                    "discrimination needs {DISCRIMINATION_SYNTHETIC} synthetic and {n_real} real images; pool has {} and {}",
                    synthetic.len(),
                    pool.entries.len()
                )));
            }
            for &(e, s) in synthetic.choose_multiple(&mut rng, DISCRIMINATION_SYNTHETIC) {
                let img = &pool.entries[e].synthetic[s];
                items.push((
                    vec![("image".to_string(), root.join(&img.path))],
                    Truth::Single {
                        real: false,
                        source: format!("{}:{}", img.variant, pool.entries[e].case_id),
                    },
                ));
            }
            for entry in pool.entries.choose_multiple(&mut rng, n_real) {
                items.push((
                    vec![("image".to_string(), root.join(&entry.real_post))],
                    Truth::Single {
                        real: true,
                        source: format!("real:{}", entry.case_id),
                    },
                ));
            }
        }
        Task::Comparative | Task::Annotation => {
            let n = req.n_items.unwrap_or(DEFAULT_TRIPLETS);
            if n == 0 || synthetic.len() < n {
                return Err(Error::InvalidValue(format!(
                    "{} needs {n} triplets; pool has {} synthetic images",
                    req.task,
                    synthetic.len()
                )));
            }
            for &(e, s) in synthetic.choose_multiple(&mut rng, n) {
                let entry = &pool.entries[e];
                let syn = &entry.synthetic[s];
                let pre = ("pre".to_string(), root.join(&entry.pre));
                if req.task == Task::Comparative {
                    let real_left = rng.random_bool(0.5);
                    let (left, right) = if real_left {
                        (&entry.real_post, &syn.path)
                    } else {
                        (&syn.path, &entry.real_post)
                    };
                    items.push((
                        vec![
                            pre,
                            ("left".into(), root.join(left)),
                            ("right".into(), root.join(right)),
                        ],
                        Truth::Pair {
                            real_side: if real_left { "left" } else { "right" }.into(),
                            variant: syn.variant.clone(),
                        },
                    ));
                } else {
                    items.push((
                        vec![
                            pre,
                            ("real post".into(), root.join(&entry.real_post)),
                            ("synthetic post".into(), root.join(&syn.path)),
                        ],
                        Truth::Triplet {
                            variant: syn.variant.clone(),
                        },
                    ));
                }
            }
        }
    }
    items.shuffle(&mut rng);
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, (images, truth))| SessionItem {
            item_id: format!("item-{:02}", i + 1),
            images,
            truth,
        })
        .collect())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Seeds the token generator from std's per-process random hasher keys, so
/// the crate needs no OS entropy dependency of its own.
fn token_rng() -> ChaCha8Rng {
    use std::hash::{BuildHasher, Hasher};
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        let mut h = std::collections::hash_map::RandomState::new().build_hasher();
        h.write_u128(now_nanos());
        chunk.copy_from_slice(&h.finish().to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

fn now_nanos() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

/// In-memory session registry with an optional append-only response log.
pub struct ReaderService {
    pool: ImagePool,
    sessions: HashMap<String, Session>,
    tokens: HashMap<String, PathBuf>,
    log: Option<PathBuf>,
    rng: ChaCha8Rng,
}

impl ReaderService {
    pub fn new(pool: ImagePool) -> Self {
        Self {
            pool,
            sessions: HashMap::new(),
            tokens: HashMap::new(),
            log: None,
            rng: token_rng(),
        }
    }

    /// Appends every accepted response as a JSON line to `path`.
    pub fn with_log(mut self, path: PathBuf) -> Self {
        self.log = Some(path);
        self
    }

    fn opaque_token(&mut self) -> String {
        format!("{:032x}", self.rng.random::<u128>())
    }

    pub fn pool(&self) -> &ImagePool {
        &self.pool
    }

    pub fn create_session(&mut self, req: &SessionRequest) -> Result<SessionInfo> {
        if req.reader_id.trim().is_empty() {
            return Err(Error::InvalidValue("reader_id must not be empty".into()));
        }
        let items = assemble(&self.pool, req)?;
        let info = SessionInfo {
            session_id: self.opaque_token(),
            reader_id: req.reader_id.clone(),
            task: req.task,
            total_items: items.len(),
            feedback: req.feedback,
        };
        self.sessions.insert(
            info.session_id.clone(),
            Session {
                info: info.clone(),
                items,
                responses: Vec::new(),
                acks: HashMap::new(),
            },
        );
        Ok(info)
    }

    fn session(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn payload(&mut self, session_id: &str, index: usize) -> Result<ItemPayload> {
        let s = self.session(session_id)?;
        let item = &s.items[index];
        let submitted = s.responses.iter().find(|r| r.item_id == item.item_id).cloned();
        let (task, total, item_id) = (s.info.task, s.items.len(), item.item_id.clone());
        let images: Vec<(String, PathBuf)> = item.images.clone();
        let refs = images
            .into_iter()
            .map(|(label, path)| {
                let token = self.opaque_token();
                self.tokens.insert(token.clone(), path);
                ImageRef {
                    label,
                    url: format!("/images/{token}"),
                }
            })
            .collect();
        Ok(ItemPayload {
            item_id,
            task,
            index,
            total,
            images: refs,
            submitted,
        })
    }

    /// First unanswered item, or completion status.
    pub fn next_item(&mut self, session_id: &str) -> Result<NextItem> {
        let s = self.session(session_id)?;
        let next = s.items.iter().position(|it| !s.acks.contains_key(&it.item_id));
        match next {
            Some(i) => Ok(NextItem::Item(self.payload(session_id, i)?)),
            None => Ok(NextItem::Complete {
                answered: s.responses.len(),
                total: s.items.len(),
            }),
        }
    }

    /// Any item by id, including answered ones (shown read-only by the UI).
    pub fn item(&mut self, session_id: &str, item_id: &str) -> Result<ItemPayload> {
        let s = self.session(session_id)?;
        let i = s
            .items
            .iter()
            .position(|it| it.item_id == item_id)
            .ok_or_else(|| Error::NotFound(format!("item {item_id} in session {session_id}")))?;
        self.payload(session_id, i)
    }

    /// Records a response. Re-submitting an item returns the original
    /// acknowledgement and leaves the log untouched.
    pub fn submit(&mut self, session_id: &str, sub: &Submission) -> Result<Ack> {
        let log = self.log.clone();
        let s = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let item = s
            .items
            .iter()
            .find(|it| it.item_id == sub.item_id)
            .ok_or_else(|| Error::NotFound(format!("item {} in session {session_id}", sub.item_id)))?;
        if let Some(ack) = s.acks.get(&sub.item_id) {
            return Ok(ack.clone());
        }
        validate_submission(s.info.task, sub)?;
        let response = Response {
            item_id: sub.item_id.clone(),
            answer: sub.answer.clone(),
            realism_score: sub.realism_score,
            annotations: sub.annotations.clone(),
            remark: sub.remark.clone(),
            sequence: s.responses.len(),
            timestamp_ms: now_ms(),
        };
        let correct = is_correct(&item.truth, &response);
        let ack = Ack {
            session_id: session_id.to_string(),
            item_id: sub.item_id.clone(),
            sequence: response.sequence,
            timestamp_ms: response.timestamp_ms,
            correct: if s.info.feedback { correct } else { None },
        };
        if let Some(path) = log {
            let line = serde_json::json!({ "session_id": session_id, "response": response });
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        s.responses.push(response);
        s.acks.insert(sub.item_id.clone(), ack.clone());
        Ok(ack)
    }

    /// Resolves an image token to its file.
    pub fn image_path(&self, token: &str) -> Result<&Path> {
        self.tokens
            .get(token)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::NotFound(format!("image {token}")))
    }

    pub fn export_csv(&self, session_id: &str) -> Result<String> {
        let s = self.session(session_id)?;
        let rows: Vec<ExportRow> = s
            .responses
            .iter()
            .map(|r| {
                let item = s
                    .items
                    .iter()
                    .find(|it| it.item_id == r.item_id)
                    .expect("responses reference items");
                ExportRow {
                    session_id: s.info.session_id.clone(),
                    reader_id: s.info.reader_id.clone(),
                    task: s.info.task,
                    item_id: r.item_id.clone(),
                    answer: r.answer.clone().unwrap_or_default(),
                    realism_score: r.realism_score,
                    annotations: serde_json::to_string(&r.annotations).expect("annotations serialize"),
                    remark: r.remark.clone().unwrap_or_default(),
                    sequence: r.sequence,
                    timestamp_ms: r.timestamp_ms,
                    truth: item.truth.label(),
                    source: item.truth.source(),
                    correct: is_correct(&item.truth, r),
                }
            })
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &rows {
            w.serialize(row).map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
        let mut out = String::from_utf8(bytes).expect("csv is utf-8");
        let summary = summarize(&s.info, &rows);
        for (k, v) in summary {
            out.push_str(&format!("# {k}={v}\n"));
        }
        Ok(out)
    }

    /// Response set of a session, as stored.
    pub fn responses(&self, session_id: &str) -> Result<Vec<Response>> {
        Ok(self.session(session_id)?.responses.clone())
    }
}

fn validate_submission(task: Task, sub: &Submission) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidValue(m));
    match task {
        Task::Discrimination => match sub.answer.as_deref() {
            Some("real" | "synthetic") => Ok(()),
            other => bad(format!(
                "discrimination answer must be \"real\" or \"synthetic\", got {other:?}"
            )),
        },
        Task::Comparative => match sub.answer.as_deref() {
            Some("left" | "right") => Ok(()),
            other => bad(format!(
                "comparative answer must be \"left\" or \"right\", got {other:?}"
            )),
        },
        Task::Annotation => match sub.realism_score {
            Some(s) if s <= MAX_REALISM_SCORE => Ok(()),
            Some(s) => bad(format!("realism score {s} outside 0..={MAX_REALISM_SCORE}")),
            None => bad("annotation responses need a realism_score".into()),
        },
    }
}

fn is_correct(truth: &Truth, r: &Response) -> Option<bool> {
    match truth {
        Truth::Triplet { .. } => None,
        _ => r.answer.as_ref().map(|a| *a == truth.label()),
    }
}

/// One CSV line of an export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub session_id: String,
    pub reader_id: String,
    pub task: Task,
    pub item_id: String,
    pub answer: String,
    pub realism_score: Option<u8>,
    /// JSON array of [`Annotation`]s.
    pub annotations: String,
    pub remark: String,
    pub sequence: usize,
    pub timestamp_ms: u64,
    pub truth: String,
    pub source: String,
    pub correct: Option<bool>,
}

impl ExportRow {
    pub fn to_response(&self) -> Result<Response> {
        Ok(Response {
            item_id: self.item_id.clone(),
            answer: (!self.answer.is_empty()).then(|| self.answer.clone()),
            realism_score: self.realism_score,
            annotations: serde_json::from_str(&self.annotations)?,
            remark: (!self.remark.is_empty()).then(|| self.remark.clone()),
            sequence: self.sequence,
            timestamp_ms: self.timestamp_ms,
        })
    }
}

fn summarize(info: &SessionInfo, rows: &[ExportRow]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("reader_id".into(), info.reader_id.clone());
    out.insert("task".into(), info.task.to_string());
    out.insert("answered".into(), format!("{}/{}", rows.len(), info.total_items));
    match info.task {
        Task::Discrimination | Task::Comparative => {
            let correct = rows.iter().filter(|r| r.correct == Some(true)).count();
            out.insert("accuracy".into(), format!("{correct}/{}", info.total_items));
        }
        Task::Annotation => {
            let scores: Vec<f64> = rows.iter().filter_map(|r| r.realism_score.map(f64::from)).collect();
            let mean = if scores.is_empty() {
                "nan".to_string()
            } else {
                format!("{:.3}", scores.iter().sum::<f64>() / scores.len() as f64)
            };
            out.insert("realism_score_mean".into(), mean);
        }
    }
    out
}

/// Parses an export back into rows and its `# key=value` summary lines.
pub fn import_csv(text: &str) -> Result<(Vec<ExportRow>, BTreeMap<String, String>)> {
    let summary = text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<ExportRow>, _>>()
        .map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
    Ok((rows, summary))
}
