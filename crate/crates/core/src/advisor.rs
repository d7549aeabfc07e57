//! Prompt construction and the HTTP client for an external
//! vision-language advisor.
//!
//! The prompt is a fixed preamble, up to three optional blocks (metrics,
//! step-by-step instruction, worked example) in that order, and a closing
//! answer-format line. The advisor's answer is the last bracketed list of
//! integers in its reply.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{CandidateSet, LabeledImage};
use crate::select::Task;

#[derive(Debug, Error)]
pub enum AdvisorError {
    #[error("advisor configuration: {0}")]
    Config(String),
    #[error("advisor request timed out")]
    Timeout,
    #[error("advisor transport: {0}")]
    Transport(String),
    #[error("advisor returned HTTP {0}")]
    Status(u16),
    #[error("advisor reply has no label list: {0}")]
    Parse(String),
    #[error("advisor labels rejected: {0}")]
    Validation(String),
    #[error("template {path}: {source}")]
    Template {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// A: evaluation metrics.
    Metrics,
    /// B: step-by-step instruction.
    Cot,
    /// C: worked output example.
    Example,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Metrics, BlockKind::Cot, BlockKind::Example];

    pub fn heading(self) -> &'static str {
        match self {
            BlockKind::Metrics => "Evaluation metrics",
            BlockKind::Cot => "Reasoning",
            BlockKind::Example => "Output example",
        }
    }
}

/// The five ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    WithoutAbc,
    WithoutBc,
    WithoutB,
    WithoutC,
    Full,
}

impl AblationArm {
    pub const ALL: [AblationArm; 5] = [
        AblationArm::WithoutAbc,
        AblationArm::WithoutBc,
        AblationArm::WithoutB,
        AblationArm::WithoutC,
        AblationArm::Full,
    ];

    pub fn blocks(self) -> Vec<BlockKind> {
        use BlockKind::*;
        match self {
            AblationArm::WithoutAbc => vec![],
            AblationArm::WithoutBc => vec![Metrics],
            AblationArm::WithoutB => vec![Metrics, Example],
            AblationArm::WithoutC => vec![Metrics, Cot],
            AblationArm::Full => vec![Metrics, Cot, Example],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::WithoutAbc => "w/o ABC",
            AblationArm::WithoutBc => "w/o BC",
            AblationArm::WithoutB => "w/o B",
            AblationArm::WithoutC => "w/o C",
            AblationArm::Full => "full",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationArm::WithoutAbc => "without-abc",
            AblationArm::WithoutBc => "without-bc",
            AblationArm::WithoutB => "without-b",
            AblationArm::WithoutC => "without-c",
            AblationArm::Full => "full",
        }
    }
}

/// Template texts. Placeholders `{object}`, `{k}`, `{m}` and `{task}` are
/// substituted when the prompt is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub preamble: String,
    pub metrics: String,
    pub cot: String,
    pub example: String,
    pub answer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            preamble: include_str!("../templates/preamble.txt").into(),
            metrics: include_str!("../templates/metrics.txt").into(),
            cot: include_str!("../templates/cot.txt").into(),
            example: include_str!("../templates/example.txt").into(),
            answer: include_str!("../templates/answer.txt").into(),
        }
    }
}

impl PromptTemplates {
    pub const FILES: [&'static str; 5] = [
        "preamble.txt",
        "metrics.txt",
        "cot.txt",
        "example.txt",
        "answer.txt",
    ];

    /// Reads the five template files from `dir`; missing files keep the
    /// built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, AdvisorError> {
        let mut t = Self::default();
        for name in Self::FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|source| AdvisorError::Template { path, source })?;
            *t.slot(name) = text;
        }
        Ok(t)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), AdvisorError> {
        let mut t = self.clone();
        for name in Self::FILES {
            let path = dir.join(name);
            std::fs::write(&path, t.slot(name).as_bytes())
                .map_err(|source| AdvisorError::Template { path, source })?;
        }
        Ok(())
    }

    fn slot(&mut self, file: &str) -> &mut String {
        match file {
            "preamble.txt" => &mut self.preamble,
            "metrics.txt" => &mut self.metrics,
            "cot.txt" => &mut self.cot,
            "example.txt" => &mut self.example,
            _ => &mut self.answer,
        }
    }

    pub fn block(&self, kind: BlockKind) -> &str {
        match kind {
            BlockKind::Metrics => &self.metrics,
            BlockKind::Cot => &self.cot,
            BlockKind::Example => &self.example,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub templates: PromptTemplates,
    /// Blocks to include; always emitted in A, B, C order.
    pub blocks: Vec<BlockKind>,
    pub object_name: String,
}

impl PromptConfig {
    pub fn arm(arm: AblationArm, object_name: &str) -> Self {
        Self {
            templates: PromptTemplates::default(),
            blocks: arm.blocks(),
            object_name: object_name.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBlock {
    pub kind: BlockKind,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: Option<String>,
    pub view: u32,
    pub width: u32,
    pub height: u32,
    /// (label, u, v) pixel positions of the drawn numbers.
    pub labels: Vec<(u32, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub preamble: String,
    pub blocks: Vec<PromptBlock>,
    pub answer: String,
    pub image: ImageRef,
}

impl PromptDocument {
    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    /// Plain-text prompt as sent to the advisor.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.preamble.trim_end());
        out.push_str("\n\n");
        for b in &self.blocks {
            out.push_str("## ");
            out.push_str(b.kind.heading());
            out.push('\n');
            out.push_str(b.text.trim_end());
            out.push_str("\n\n");
        }
        out.push_str(self.answer.trim_end());
        out.push('\n');
        out
    }
}

fn fill(template: &str, object: &str, k: usize, m: usize, task: &str) -> String {
    template
        .replace("{object}", object)
        .replace("{k}", &k.to_string())
        .replace("{m}", &m.to_string())
        .replace("{task}", task)
}

/// Plain-language task line for the preamble.
pub fn describe_task(task: &Task) -> String {
    let d = task.p_end.translation - task.p_init.translation;
    let mut s = format!(
        "The goal is {:.2} m away (dx {:.2}, dy {:.2}, dz {:.2}).",
        d.norm(),
        d.x,
        d.y,
        d.z
    );
    for c in &task.constraints {
        match c {
            crate::select::MotionConstraint::AxisAlignment { tolerance, .. } => s.push_str(
                &format!(" Keep the object upright within {:.2} rad.", tolerance),
            ),
            crate::select::MotionConstraint::HeightBand { min, max } => {
                s.push_str(&format!(" Keep it between {min:.2} m and {max:.2} m high."))
            }
            crate::select::MotionConstraint::WorkspaceBox { .. } => {
                s.push_str(" Stay inside the workspace.")
            }
        }
    }
    s
}

pub fn build_advisor_prompt(
    cands: &CandidateSet,
    task: &Task,
    m: usize,
    image: &LabeledImage,
    image_path: Option<&Path>,
    config: &PromptConfig,
) -> PromptDocument {
    let k = cands.k();
    let t = &config.templates;
    let obj = &config.object_name;
    let task_line = describe_task(task);
    let blocks = BlockKind::ALL
        .into_iter()
        .filter(|b| config.blocks.contains(b))
        .map(|kind| PromptBlock {
            kind,
            text: fill(t.block(kind), obj, k, m, &task_line),
        })
        .collect();
    PromptDocument {
        preamble: fill(&t.preamble, obj, k, m, &task_line),
        blocks,
        answer: fill(&t.answer, obj, k, m, &task_line),
        image: ImageRef {
            path: image_path.map(|p| p.display().to_string()),
            view: image.view,
            width: image.width,
            height: image.height,
            labels: image.labels.clone(),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvisorConfig {
    pub url: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub model: Option<String>,
    /// Send the image inline instead of by path.
    #[serde(default = "default_inline")]
    pub inline_image: bool,
}

pub const DEFAULT_TOKEN_ENV: &str = "COLLAB_ADVISOR_TOKEN";

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.into()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_inline() -> bool {
    true
}

impl AdvisorConfig {
    pub fn new(url: &str) -> Self {
        Self {
            url: url.into(),
            token_env: default_token_env(),
            timeout_secs: default_timeout(),
            model: None,
            inline_image: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvisorAnswer {
    pub labels: Vec<u32>,
    pub rationale: String,
}

/// The last `[a, b, ...]` list of non-negative integers in `text`.
pub fn parse_label_list(text: &str) -> Result<Vec<u32>, AdvisorError> {
    let mut end = text.len();
    while let Some(close) = text[..end].rfind(']') {
        let Some(open) = text[..close].rfind('[') else {
            break;
        };
        let inner = &text[open + 1..close];
        let items: Vec<&str> = inner
            .split([',', ' ', '\n', '\t'])
            .filter(|s| !s.is_empty())
            .collect();
        if !items.is_empty() {
            if let Ok(v) = items
                .iter()
                .map(|s| s.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
            {
                return Ok(v);
            }
        }
        end = open;
    }
    let snippet: String = text.chars().take(80).collect();
    Err(AdvisorError::Parse(format!(
        "no bracketed integer list in {snippet:?}"
    )))
}

#[derive(Serialize)]
struct Request<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_path: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_base64: Option<String>,
}

/// Extracts the reply text: a JSON object's `text`, `output`, `content` or
/// `response` string, else the body itself.
fn reply_text(body: &str) -> String {
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(body) {
        for key in ["text", "output", "content", "response"] {
            if let Some(serde_json::Value::String(s)) = map.get(key) {
                return s.clone();
            }
        }
    }
    body.to_string()
}

pub fn query_advisor(
    config: &AdvisorConfig,
    doc: &PromptDocument,
) -> Result<AdvisorAnswer, AdvisorError> {
    let token = std::env::var(&config.token_env).ok();
    if !(config.timeout_secs > 0.0) {
        return Err(AdvisorError::Config("timeout must be positive".into()));
    }
    let image_base64 = match (&doc.image.path, config.inline_image) {
        (Some(p), true) => {
            let bytes =
                std::fs::read(p).map_err(|e| AdvisorError::Config(format!("image {p}: {e}")))?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        }
        _ => None,
    };
    let body = Request {
        model: config.model.as_deref(),
        prompt: doc.render(),
        image_path: if image_base64.is_none() {
            doc.image.path.as_deref()
        } else {
            None
        },
        image_base64,
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(config.timeout_secs))
        .build()
        .map_err(|e| AdvisorError::Config(e.to_string()))?;
    let mut req = client.post(&config.url).json(&body);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            AdvisorError::Timeout
        } else {
            AdvisorError::Transport(e.to_string())
        }
    })?;
    let status = resp.status();
    if !status.is_success() {
        return Err(AdvisorError::Status(status.as_u16()));
    }
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            AdvisorError::Timeout
        } else {
            AdvisorError::Transport(e.to_string())
        }
    })?;
    let rationale = reply_text(&text);
    let labels = parse_label_list(&rationale)?;
    Ok(AdvisorAnswer { labels, rationale })
}
