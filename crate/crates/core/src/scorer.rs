//! Boundary to masked language models.
//!
//! A [`Scorer`] answers two questions: the final-layer hidden states of a sentence,
//! and the log-probability of a target word at a masked position. Debiasing
//! projections are registered once and referred to by handle; backends apply them
//! to every final-layer position before the output head.
//!
//! Backends:
//! - [`FixtureScorer`]: offline lookup table, no model.
//! - [`RemoteScorer`]: newline-delimited JSON over a child process's stdio or TCP,
//!   served by [`serve`] or by an external model adapter.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::read_to_string;
use crate::linalg::{fmt_f64, write_matrix, BiasSubspace, EmbeddingMatrix, Projector};
use crate::{Error, Result};

/// Token substituted at the masked position when keying masked sentences.
pub const MASK_TOKEN: &str = "[mask]";

/// Opaque reference to a projection registered with a scorer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectionHandle {
    pub id: String,
    pub dim: usize,
    pub technique: String,
}

impl ProjectionHandle {
    /// Content-derived handle: equal matrices give equal ids, so fixture keys that
    /// mention a projection stay valid across runs.
    pub fn for_projector(p: &Projector, technique: &str) -> Self {
        let digest = crate::checksum(write_matrix(p.matrix()).as_bytes());
        Self { id: format!("p{}", &digest[..16]), dim: p.dim(), technique: technique.to_string() }
    }
}

/// What to register: an explicit matrix (validated as a projector) or a bias
/// subspace, registered as its removal projector `I − BᵀB`.
#[derive(Debug, Clone, Copy)]
pub enum ProjectionSpec<'a> {
    Matrix(&'a DMatrix<f64>),
    Projector(&'a Projector),
    Subspace(&'a BiasSubspace),
}

impl ProjectionSpec<'_> {
    pub fn to_projector(self) -> Result<Projector> {
        match self {
            ProjectionSpec::Matrix(m) => Projector::new(m.clone()),
            ProjectionSpec::Projector(p) => Ok(p.clone()),
            ProjectionSpec::Subspace(s) => Ok(s.removal_projector()),
        }
    }
}

/// A masked-token log-probability query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRequest {
    tokens: Vec<String>,
    mask_position: usize,
    target: String,
    projection: Option<String>,
}

impl ScoreRequest {
    /// Tokens and target are lowercased (backends are uncased).
    pub fn new<S: AsRef<str>>(
        tokens: &[S],
        mask_position: usize,
        target: &str,
        projection: Option<&ProjectionHandle>,
    ) -> Result<Self> {
        if mask_position >= tokens.len() {
            return Err(Error::Protocol(format!(
                "mask position {mask_position} out of range for {} tokens",
                tokens.len()
            )));
        }
        if target.is_empty() {
            return Err(Error::Protocol("empty target".into()));
        }
        Ok(Self {
            tokens: tokens.iter().map(|t| t.as_ref().to_lowercase()).collect(),
            mask_position,
            target: target.to_lowercase(),
            projection: projection.map(|h| h.id.clone()),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_position(&self) -> usize {
        self.mask_position
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn projection(&self) -> Option<&str> {
        self.projection.as_deref()
    }

    pub fn canonical_key(&self) -> String {
        canonical_key(&self.tokens, self.mask_position, &self.target, self.projection.as_deref())
    }

    /// Tokens with the masked position replaced by [`MASK_TOKEN`].
    pub fn masked_tokens(&self) -> Vec<String> {
        let mut t = self.tokens.clone();
        t[self.mask_position] = MASK_TOKEN.to_string();
        t
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '%' => out.push_str("%25"),
            '#' => out.push_str("%23"),
            ' ' => out.push_str("%20"),
            c => out.push(c),
        }
    }
    out
}

/// Lowercased, space-joined tokens; `%`, `#` and spaces inside tokens are
/// percent-escaped so the key stays injective.
pub fn sentence_key<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(|t| escape(&t.as_ref().to_lowercase())).collect::<Vec<_>>().join(" ")
}

/// `tokens#mask#target#projection` with `none` for no projection.
pub fn canonical_key<S: AsRef<str>>(tokens: &[S], mask: usize, target: &str, projection: Option<&str>) -> String {
    format!(
        "{}#{}#{}#{}",
        sentence_key(tokens),
        mask,
        escape(&target.to_lowercase()),
        projection.map(escape).unwrap_or_else(|| "none".to_string())
    )
}

/// Final-layer hidden states. `word_ids[r]` names the word that row `r` belongs
/// to when the backend works below word level; `None` means one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub matrix: EmbeddingMatrix,
    pub word_ids: Option<Vec<usize>>,
}

impl HiddenStates {
    /// Row representing word `pos` (its first piece).
    pub fn word_row(&self, pos: usize) -> Option<DVector<f64>> {
        let row = match &self.word_ids {
            None => (pos < self.matrix.rows()).then_some(pos),
            Some(ids) => ids.iter().position(|&w| w == pos),
        }?;
        Some(self.matrix.row(row))
    }
}

pub trait Scorer: Send {
    /// Makes `projector` available under `handle.id`.
    fn register(&mut self, handle: &ProjectionHandle, projector: &Projector) -> Result<()>;

    fn masked_logprob(&mut self, req: &ScoreRequest) -> Result<f64>;

    /// Several requests; remote backends keep them in flight together.
    fn masked_logprobs(&mut self, reqs: &[ScoreRequest]) -> Result<Vec<f64>> {
        reqs.iter().map(|r| self.masked_logprob(r)).collect()
    }

    fn hidden_states(&mut self, tokens: &[String], projection: Option<&ProjectionHandle>) -> Result<HiddenStates>;
}

/// Validates `spec`, registers it and returns its handle.
pub fn register_projection(scorer: &mut dyn Scorer, spec: ProjectionSpec<'_>, technique: &str) -> Result<ProjectionHandle> {
    let p = spec.to_projector()?;
    let handle = ProjectionHandle::for_projector(&p, technique);
    scorer.register(&handle, &p)?;
    Ok(handle)
}

// ---------------------------------------------------------------------------
// number encoding: decimal text, 17 significant digits

mod num {
    use super::fmt_f64;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Text(String),
        Num(f64),
    }

    fn parse<'de, D: Deserializer<'de>>(r: Raw) -> Result<f64, D::Error> {
        match r {
            Raw::Num(x) => Ok(x),
            Raw::Text(s) => s.trim().parse().map_err(|e| D::Error::custom(format!("{s:?}: {e}"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_f64(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        parse::<D>(Raw::deserialize(d)?)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match x {
                Some(v) => s.serialize_some(&fmt_f64(*v)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Raw>::deserialize(d)?.map(parse::<D>).transpose()
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| fmt_f64(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Raw>::deserialize(d)?.into_iter().map(parse::<D>).collect()
        }
    }

    pub mod mat {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(m.iter().map(|r| r.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>()))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
            Vec::<Vec<Raw>>::deserialize(d)?
                .into_iter()
                .map(|r| r.into_iter().map(parse::<D>).collect())
                .collect()
        }
    }

    pub mod opt_mat {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Vec<Vec<f64>>>, s: S) -> Result<S::Ok, S::Error> {
            match m {
                Some(m) => {
                    let rows: Vec<Vec<String>> =
                        m.iter().map(|r| r.iter().map(|x| fmt_f64(*x)).collect()).collect();
                    s.serialize_some(&rows)
                }
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<f64>>>, D::Error> {
            Option::<Vec<Vec<Raw>>>::deserialize(d)?
                .map(|m| m.into_iter().map(|r| r.into_iter().map(parse::<D>).collect()).collect())
                .transpose()
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], dim_hint: usize) -> Result<DMatrix<f64>> {
    let cols = rows.first().map(Vec::len).unwrap_or(dim_hint);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Protocol("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// wire protocol

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    RegisterProjection {
        id: String,
        d: usize,
        #[serde(with = "num::mat")]
        rows: Vec<Vec<f64>>,
    },
    Logprob {
        req_id: String,
        tokens: Vec<String>,
        mask: usize,
        target: String,
        #[serde(default)]
        projection: Option<String>,
    },
    Hidden {
        req_id: String,
        tokens: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        projection: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Ok {
        req_id: String,
        #[serde(default, with = "num::opt", skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        #[serde(default, with = "num::opt_mat", skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        word_ids: Option<Vec<usize>>,
    },
    Err {
        req_id: String,
        code: String,
        detail: String,
    },
}

impl Response {
    fn req_id(&self) -> &str {
        match self {
            Response::Ok { req_id, .. } | Response::Err { req_id, .. } => req_id,
        }
    }

    fn ok(req_id: String) -> Self {
        Response::Ok { req_id, value: None, matrix: None, word_ids: None }
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::FixtureMiss { .. } => "miss",
        Error::UnknownHandle(_) => "unknown_handle",
        Error::DimensionMismatch { .. } => "dim_mismatch",
        Error::NotProjector(_) | Error::NonFinite { .. } => "bad_projection",
        Error::Protocol(_) | Error::Json(_) => "bad_request",
        _ => "internal",
    }
}

fn handle_request(backend: &mut dyn Scorer, handles: &mut HashMap<String, ProjectionHandle>, req: Request) -> Response {
    match req {
        Request::RegisterProjection { id, d, rows } => {
            let result = rows_matrix(&rows, d).and_then(|m| {
                if m.nrows() != d || m.ncols() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: m.nrows() });
                }
                let p = Projector::new(m)?;
                let handle = ProjectionHandle { id: id.clone(), dim: d, technique: String::new() };
                backend.register(&handle, &p)?;
                handles.insert(id.clone(), handle);
                Ok(())
            });
            match result {
                Ok(()) => Response::ok(id),
                Err(e) => Response::Err { req_id: id, code: error_code(&e).into(), detail: e.to_string() },
            }
        }
        Request::Logprob { req_id, tokens, mask, target, projection } => {
            let result = (|| {
                let handle = match &projection {
                    Some(id) => Some(handles.get(id).cloned().ok_or_else(|| Error::UnknownHandle(id.clone()))?),
                    None => None,
                };
                let req = ScoreRequest::new(&tokens, mask, &target, handle.as_ref())?;
                backend.masked_logprob(&req)
            })();
            match result {
                Ok(v) => Response::Ok { req_id, value: Some(v), matrix: None, word_ids: None },
                Err(e) => Response::Err { req_id, code: error_code(&e).into(), detail: e.to_string() },
            }
        }
        Request::Hidden { req_id, tokens, projection } => {
            let result = (|| {
                let handle = match &projection {
                    Some(id) => Some(handles.get(id).cloned().ok_or_else(|| Error::UnknownHandle(id.clone()))?),
                    None => None,
                };
                backend.hidden_states(&tokens, handle.as_ref())
            })();
            match result {
                Ok(h) => Response::Ok {
                    req_id,
                    value: None,
                    matrix: Some(matrix_rows(h.matrix.as_matrix())),
                    word_ids: h.word_ids,
                },
                Err(e) => Response::Err { req_id, code: error_code(&e).into(), detail: e.to_string() },
            }
        }
    }
}

/// Serves `backend` over the line protocol until `input` is exhausted. Malformed
/// lines get a `bad_request` error and the session continues.
pub fn serve<R: BufRead, W: Write>(backend: &mut dyn Scorer, input: R, mut output: W) -> Result<()> {
    let mut handles = HashMap::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle_request(backend, &mut handles, req),
            Err(e) => {
                let req_id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("req_id").or_else(|| v.get("id")).and_then(|x| x.as_str()).map(String::from))
                    .unwrap_or_default();
                Response::Err { req_id, code: "bad_request".into(), detail: e.to_string() }
            }
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fixture backend

/// One record of a fixture file (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixtureRecord {
    /// Canonical request key → log-probability.
    Logprob {
        key: String,
        #[serde(with = "num")]
        value: f64,
    },
    /// Sentence key → word-level hidden states.
    Hidden {
        key: String,
        #[serde(with = "num::mat")]
        matrix: Vec<Vec<f64>>,
    },
    /// Output-head embedding of a vocabulary word.
    Vocab {
        word: String,
        #[serde(with = "num::vec")]
        vector: Vec<f64>,
    },
}

/// Output head used when a log-prob key is absent: `log_softmax(E · P·h_mask)`.
#[derive(Debug, Clone, PartialEq, Default)]
struct OutputHead {
    words: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Vec<DVector<f64>>,
}

/// Immutable lookup tables behind [`FixtureScorer`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixtureTable {
    logprobs: HashMap<String, f64>,
    hidden: HashMap<String, EmbeddingMatrix>,
    head: OutputHead,
    dim: Option<usize>,
}

impl FixtureTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_dim(&mut self, d: usize) -> Result<()> {
        match self.dim {
            Some(prev) if prev != d => Err(Error::DimensionMismatch { expected: prev, got: d }),
            _ => {
                self.dim = Some(d);
                Ok(())
            }
        }
    }

    pub fn insert_logprob(&mut self, key: String, value: f64) -> Result<()> {
        if !(value <= 0.0) {
            return Err(Error::Parse(format!("log-prob {value} for {key:?} is not ≤ 0")));
        }
        self.logprobs.insert(key, value);
        Ok(())
    }

    pub fn insert_request(&mut self, req: &ScoreRequest, value: f64) -> Result<()> {
        self.insert_logprob(req.canonical_key(), value)
    }

    pub fn insert_hidden<S: AsRef<str>>(&mut self, tokens: &[S], matrix: EmbeddingMatrix) -> Result<()> {
        if matrix.rows() != tokens.len() {
            return Err(Error::DimensionMismatch { expected: tokens.len(), got: matrix.rows() });
        }
        self.check_dim(matrix.dim())?;
        self.hidden.insert(sentence_key(tokens), matrix);
        Ok(())
    }

    pub fn insert_vocab(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        self.check_dim(vector.len())?;
        let word = word.to_lowercase();
        let v = DVector::from_vec(vector);
        match self.head.index.get(&word) {
            Some(&i) => self.head.embeddings[i] = v,
            None => {
                self.head.index.insert(word.clone(), self.head.words.len());
                self.head.words.push(word);
                self.head.embeddings.push(v);
            }
        }
        Ok(())
    }

    pub fn insert_record(&mut self, rec: FixtureRecord) -> Result<()> {
        match rec {
            FixtureRecord::Logprob { key, value } => self.insert_logprob(key, value),
            FixtureRecord::Hidden { key, matrix } => {
                let dim = matrix.first().map(Vec::len).unwrap_or(0);
                let m = EmbeddingMatrix::from_rows_with_dim(&matrix, dim)?;
                self.check_dim(m.dim())?;
                self.hidden.insert(key, m);
                Ok(())
            }
            FixtureRecord::Vocab { word, vector } => self.insert_vocab(&word, vector),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: FixtureRecord =
                serde_json::from_str(line).map_err(|e| Error::Parse(format!("fixture line {}: {e}", n + 1)))?;
            t.insert_record(rec)?;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    /// Records in a deterministic order: vocab, hidden, logprob, each sorted by key.
    pub fn records(&self) -> Vec<FixtureRecord> {
        let mut out = Vec::new();
        for (w, v) in self.head.words.iter().zip(&self.head.embeddings) {
            out.push(FixtureRecord::Vocab { word: w.clone(), vector: v.iter().copied().collect() });
        }
        let mut hidden: Vec<_> = self.hidden.iter().collect();
        hidden.sort_by(|a, b| a.0.cmp(b.0));
        for (k, m) in hidden {
            out.push(FixtureRecord::Hidden { key: k.clone(), matrix: matrix_rows(m.as_matrix()) });
        }
        let mut lp: Vec<_> = self.logprobs.iter().collect();
        lp.sort_by(|a, b| a.0.cmp(b.0));
        for (k, v) in lp {
            out.push(FixtureRecord::Logprob { key: k.clone(), value: *v });
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("fixture records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.logprobs.len() + self.hidden.len() + self.head.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offline scorer over a [`FixtureTable`].
///
/// Log-probs are exact lookups on the canonical key. A projection that is the
/// identity resolves to the `none` key. When the key is absent and the table has
/// an output head plus hidden states for the masked sentence, the value is
/// computed as `log_softmax(E · P·h)[target]` at the masked row.
#[derive(Debug, Clone)]
pub struct FixtureScorer {
    table: Arc<FixtureTable>,
    projections: HashMap<String, Projector>,
}

const IDENTITY_TOL: f64 = 1e-12;

impl FixtureScorer {
    pub fn new(table: Arc<FixtureTable>) -> Self {
        Self { table, projections: HashMap::new() }
    }

    pub fn table(&self) -> &FixtureTable {
        &self.table
    }

    fn projector(&self, id: &str) -> Result<&Projector> {
        self.projections.get(id).ok_or_else(|| Error::UnknownHandle(id.to_string()))
    }

    /// `None` when no projection applies (absent or identity).
    fn effective<'a>(&'a self, id: Option<&'a str>) -> Result<Option<(&'a str, &'a Projector)>> {
        match id {
            None => Ok(None),
            Some(id) => {
                let p = self.projector(id)?;
                Ok((!p.is_identity(IDENTITY_TOL)).then_some((id, p)))
            }
        }
    }

    fn head_logprob(&self, req: &ScoreRequest, p: Option<&Projector>) -> Option<Result<f64>> {
        let head = &self.table.head;
        if head.words.is_empty() {
            return None;
        }
        let states = self.table.hidden.get(&sentence_key(&req.masked_tokens()))?;
        let target = *head.index.get(req.target())?;
        let mut h = states.row(req.mask_position());
        if let Some(p) = p {
            h = match p.apply(&h) {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
        }
        let logits: Vec<f64> = head.embeddings.iter().map(|e| e.dot(&h)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Some(Ok(logits[target] - lse))
    }
}

impl Scorer for FixtureScorer {
    fn register(&mut self, handle: &ProjectionHandle, projector: &Projector) -> Result<()> {
        if let Some(d) = self.table.dim {
            if d != projector.dim() {
                return Err(Error::DimensionMismatch { expected: d, got: projector.dim() });
            }
        }
        if handle.dim != projector.dim() {
            return Err(Error::DimensionMismatch { expected: handle.dim, got: projector.dim() });
        }
        self.projections.insert(handle.id.clone(), projector.clone());
        Ok(())
    }

    fn masked_logprob(&mut self, req: &ScoreRequest) -> Result<f64> {
        let eff = self.effective(req.projection())?;
        let key = canonical_key(req.tokens(), req.mask_position(), req.target(), eff.map(|(id, _)| id));
        if let Some(&v) = self.table.logprobs.get(&key) {
            return Ok(v);
        }
        match self.head_logprob(req, eff.map(|(_, p)| p)) {
            Some(r) => r,
            None => Err(Error::FixtureMiss { key }),
        }
    }

    fn hidden_states(&mut self, tokens: &[String], projection: Option<&ProjectionHandle>) -> Result<HiddenStates> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let key = sentence_key(tokens);
        let m = self.table.hidden.get(&key).ok_or(Error::FixtureMiss { key })?;
        let matrix = match self.effective(projection.map(|h| h.id.as_str()))? {
            Some((_, p)) => m.project(p)?,
            None => m.clone(),
        };
        Ok(HiddenStates { matrix, word_ids: None })
    }
}

// ---------------------------------------------------------------------------
// remote backend

/// Number of requests kept in flight per window.
const PIPELINE_WINDOW: usize = 64;

/// Client side of the line protocol.
pub struct RemoteScorer {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    child: Option<Child>,
    endpoint: String,
}

impl RemoteScorer {
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static, endpoint: &str) -> Self {
        Self { reader: Box::new(reader), writer: Box::new(writer), next_id: 0, child: None, endpoint: endpoint.into() }
    }

    /// Spawns `sh -c command` and speaks the protocol over its stdin/stdout.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(PathBuf::from(command), e))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut s = Self::from_streams(BufReader::new(stdout), BufWriter::new(stdin), &format!("exec:{command}"));
        s.child = Some(child);
        Ok(s)
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::io(PathBuf::from(addr), e))?;
        let read_half = stream.try_clone()?;
        Ok(Self::from_streams(BufReader::new(read_half), BufWriter::new(stream), &format!("tcp:{addr}")))
    }

    fn fresh_id(&mut self) -> String {
        self.next_id += 1;
        format!("r{}", self.next_id)
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        serde_json::to_writer(&mut self.writer, req)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Response> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.reader.read_line(&mut line)? == 0 {
                return Err(Error::Protocol(format!("{} closed the connection", self.endpoint)));
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad response {:?}: {e}", line.trim())))
    }

    /// Sends all requests, then collects responses matched by request id.
    fn round_trip(&mut self, reqs: Vec<Request>) -> Result<Vec<Response>> {
        let ids: Vec<String> = reqs
            .iter()
            .map(|r| match r {
                Request::RegisterProjection { id, .. } => id.clone(),
                Request::Logprob { req_id, .. } | Request::Hidden { req_id, .. } => req_id.clone(),
            })
            .collect();
        for r in &reqs {
            self.send(r)?;
        }
        self.writer.flush()?;
        let mut by_id: HashMap<String, Response> = HashMap::with_capacity(ids.len());
        while by_id.len() < ids.len() {
            let resp = self.recv()?;
            let id = resp.req_id().to_string();
            if !ids.contains(&id) {
                return Err(Error::Protocol(format!("unexpected response id {id:?}")));
            }
            by_id.insert(id, resp);
        }
        Ok(ids.iter().map(|id| by_id.remove(id).expect("collected")).collect())
    }

    fn expect_value(resp: Response) -> Result<f64> {
        match resp {
            Response::Ok { value: Some(v), .. } => Ok(v),
            Response::Ok { req_id, .. } => Err(Error::Protocol(format!("response {req_id} has no value"))),
            Response::Err { req_id, code, detail } => Err(Error::Scorer { req_id, code, detail }),
        }
    }
}

impl Drop for RemoteScorer {
    fn drop(&mut self) {
        let _ = self.writer.flush();
        // closing stdin ends the child's serve loop
        self.writer = Box::new(std::io::sink());
        if let Some(child) = self.child.as_mut() {
            let _ = child.wait();
        }
    }
}

impl Scorer for RemoteScorer {
    fn register(&mut self, handle: &ProjectionHandle, projector: &Projector) -> Result<()> {
        let req = Request::RegisterProjection {
            id: handle.id.clone(),
            d: projector.dim(),
            rows: matrix_rows(projector.matrix()),
        };
        match self.round_trip(vec![req])?.pop().expect("one response") {
            Response::Ok { .. } => Ok(()),
            Response::Err { req_id, code, detail } => Err(Error::Scorer { req_id, code, detail }),
        }
    }

    fn masked_logprob(&mut self, req: &ScoreRequest) -> Result<f64> {
        Ok(self.masked_logprobs(std::slice::from_ref(req))?[0])
    }

    fn masked_logprobs(&mut self, reqs: &[ScoreRequest]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(reqs.len());
        for window in reqs.chunks(PIPELINE_WINDOW) {
            let wire: Vec<Request> = window
                .iter()
                .map(|r| Request::Logprob {
                    req_id: self.fresh_id(),
                    tokens: r.tokens().to_vec(),
                    mask: r.mask_position(),
                    target: r.target().to_string(),
                    projection: r.projection().map(String::from),
                })
                .collect();
            for resp in self.round_trip(wire)? {
                out.push(Self::expect_value(resp)?);
            }
        }
        Ok(out)
    }

    fn hidden_states(&mut self, tokens: &[String], projection: Option<&ProjectionHandle>) -> Result<HiddenStates> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let req = Request::Hidden {
            req_id: self.fresh_id(),
            tokens: tokens.to_vec(),
            projection: projection.map(|h| h.id.clone()),
        };
        match self.round_trip(vec![req])?.pop().expect("one response") {
            Response::Ok { matrix: Some(rows), word_ids, .. } => {
                let m = rows_matrix(&rows, 0)?;
                Ok(HiddenStates { matrix: EmbeddingMatrix::new(m)?, word_ids })
            }
            Response::Ok { req_id, .. } => Err(Error::Protocol(format!("response {req_id} has no matrix"))),
            Response::Err { req_id, code, detail } => Err(Error::Scorer { req_id, code, detail }),
        }
    }
}

/// Where a scorer lives: `fixture:<path>`, `exec:<command>` or `tcp:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScorerSpec {
    Fixture(PathBuf),
    Exec(String),
    Tcp(String),
}

impl std::str::FromStr for ScorerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("scorer spec {s:?} lacks a kind prefix")))?;
        if rest.is_empty() {
            return Err(Error::Config(format!("scorer spec {s:?} is empty")));
        }
        match kind {
            "fixture" => Ok(ScorerSpec::Fixture(PathBuf::from(rest))),
            "exec" => Ok(ScorerSpec::Exec(rest.to_string())),
            "tcp" => Ok(ScorerSpec::Tcp(rest.to_string())),
            other => Err(Error::Config(format!("unknown scorer kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerSpec::Fixture(p) => write!(f, "fixture:{}", p.display()),
            ScorerSpec::Exec(c) => write!(f, "exec:{c}"),
            ScorerSpec::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

impl ScorerSpec {
    /// Opens a fresh connection; fixture tables are parsed on every call.
    pub fn connect(&self) -> Result<Box<dyn Scorer>> {
        match self {
            ScorerSpec::Fixture(p) => Ok(Box::new(FixtureScorer::new(Arc::new(FixtureTable::load(p)?)))),
            ScorerSpec::Exec(c) => Ok(Box::new(RemoteScorer::spawn(c)?)),
            ScorerSpec::Tcp(a) => Ok(Box::new(RemoteScorer::connect(a)?)),
        }
    }

    /// Provenance checksum: fixture file contents, otherwise the spec text.
    pub fn provenance(&self) -> Result<String> {
        match self {
            ScorerSpec::Fixture(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(crate::checksum(&bytes))
            }
            other => Ok(crate::checksum(other.to_string().as_bytes())),
        }
    }
}
