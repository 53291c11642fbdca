//! Role-reversal self-refinement: generate a structured explanation, then
//! repeatedly ask the model, speaking as the meme's author, to review and
//! correct it until successive versions agree or the iteration cap is hit.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MemeRecord;
use crate::explanation::{parse_explanation, render_canonical, similarity, ExplanationDoc, Field};
use crate::vlm::{VlmClient, VlmError, VlmRequest};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("image for meme `{id}` not found at {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("initial explanation for `{id}` could not be parsed after a re-ask: {reason}")]
    InitialGenerationUnparseable { id: String, reason: String },
    #[error("endpoint failure for `{id}`: {source}")]
    Endpoint {
        id: String,
        #[source]
        source: VlmError,
    },
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub max_iterations: u32,
    pub convergence_threshold: f64,
    /// Attach the meme image to role-reversal rounds as well as the initial
    /// generation.
    pub resend_image: bool,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iterations: 5,
            convergence_threshold: 0.95,
            resend_image: true,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.max_iterations < 1 {
            return Err(RefineError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_threshold > 0.0 && self.convergence_threshold <= 1.0) {
            return Err(RefineError::InvalidConfig(format!(
                "convergence_threshold {} not in (0, 1]",
                self.convergence_threshold
            )));
        }
        Ok(())
    }
}

const FORMAT_INSTRUCTIONS: &str = "Answer with exactly six labeled sections, each starting on its own line \
with the label followed by a colon, in this order: Meme Summary:, Implied Joke:, Narrative Structure:, \
Emotional Effect:, Dark Attributes:, Target:. Do not add any other sections.";

const INITIAL_SYSTEM: &str = "You analyze internet memes, including memes built on dark or taboo humor, \
for a content-understanding research dataset. Be factual and specific.";

const REASK_SUFFIX: &str = "\n\nYour previous reply did not follow the required format. Reply again using \
exactly the six labeled sections: Meme Summary:, Implied Joke:, Narrative Structure:, Emotional Effect:, \
Dark Attributes:, Target:.";

/// The author-persona review prompt; the current explanation is appended
/// after the final paragraph.
pub const ROLE_REVERSAL_TEMPLATE: &str = "You are the author and creator of the given dark humor meme. \
Someone else has provided a detailed explanation of your meme\u{2019}s meaning, humor, and components, \
including the Meme Summary, Implied Joke, Narrative Structure, Emotional Effect, Dark Attributes, and Target.\n\n\
Your task is to review their explanation from your perspective as the original author. Analyze how well \
their reasoning aligns with your intended humor, message, tone, and overall context. For each component, \
identify any inaccuracies, missing details, or misunderstandings. Then, provide a thorough, corrected \
explanation that fully reflects your original intent, ensuring clarity, accuracy, and completeness.\n\n\
Please present your revised explanation below.\n\n";

fn image_path(record: &MemeRecord, image_root: &Path) -> Result<PathBuf, RefineError> {
    let path = image_root.join(&record.image_file);
    if record.image_file.is_empty() || !path.is_file() {
        return Err(RefineError::MissingImage {
            id: record.id.clone(),
            path,
        });
    }
    Ok(path)
}

fn request(record: &MemeRecord, suffix: &str, system: String, user: String, config: &RefineConfig) -> VlmRequest {
    let mut req = VlmRequest::new(format!("{}:{suffix}", record.id), system, user);
    req.temperature = config.temperature;
    req.max_tokens = config.max_tokens;
    req
}

pub fn build_initial_prompt(
    record: &MemeRecord,
    image_root: &Path,
    config: &RefineConfig,
) -> Result<VlmRequest, RefineError> {
    let image = image_path(record, image_root)?;
    let mut user = String::from(
        "Explain the attached meme. Its embedded text, as transcribed by OCR, is:\n\n\"\"\"\n",
    );
    user.push_str(&record.ocr_text);
    user.push_str("\n\"\"\"\n\nDescribe it using these six sections:\n");
    let hints = [
        "what the image shows and what the text says",
        "the joke the meme is making, stated plainly",
        "the rhetorical device it relies on (sarcasm, irony, absurdism, ...)",
        "the reaction it is built to provoke",
        "any taboo, offensive or socially sensitive themes it draws on",
        "the person, group or idea being referenced or mocked",
    ];
    for (field, hint) in Field::ALL.iter().zip(hints) {
        user.push_str(&format!("- {}: {hint}\n", field.label()));
    }
    let system = format!("{INITIAL_SYSTEM} {FORMAT_INSTRUCTIONS}");
    let mut req = request(record, "initial", system, user, config);
    req.image = Some(image);
    Ok(req)
}

pub fn build_role_reversal_prompt(
    record: &MemeRecord,
    doc: &ExplanationDoc,
    image: Option<PathBuf>,
    round: u32,
    config: &RefineConfig,
) -> VlmRequest {
    let user = format!("{ROLE_REVERSAL_TEMPLATE}{}", render_canonical(doc));
    let mut req = request(record, &format!("rr{round}"), FORMAT_INSTRUCTIONS.to_string(), user, config);
    req.image = image;
    req
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub system_prompt: String,
    pub user_prompt: String,
    pub image: Option<PathBuf>,
    pub response: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    /// 0 is the initial generation; 1.. are role-reversal rounds.
    pub round: u32,
    /// The request/response pair, followed by the re-ask if the first reply
    /// did not parse.
    pub exchanges: Vec<Exchange>,
    pub doc: Option<ExplanationDoc>,
    pub similarity_to_previous: Option<f64>,
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub meme_id: String,
    pub iterations: Vec<Iteration>,
    pub converged: bool,
    #[serde(rename = "final")]
    pub final_doc: ExplanationDoc,
}

impl RefinementTrace {
    /// Text handed to the reasoning encoder.
    pub fn refined_text(&self) -> String {
        render_canonical(&self.final_doc)
    }
}

/// Sends `req`, parses the reply, and re-asks once if parsing fails.
fn ask(
    client: &VlmClient,
    record: &MemeRecord,
    req: VlmRequest,
) -> Result<(Vec<Exchange>, Result<ExplanationDoc, String>), RefineError> {
    let endpoint = |source| RefineError::Endpoint {
        id: record.id.clone(),
        source,
    };
    let mut exchanges = Vec::with_capacity(2);
    let mut current = req;
    for attempt in 0..2 {
        let resp = client.complete(&current).map_err(endpoint)?;
        let parsed = parse_explanation(&resp.text);
        exchanges.push(Exchange {
            system_prompt: current.system_prompt.clone(),
            user_prompt: current.user_prompt.clone(),
            image: current.image.clone(),
            response: resp.text,
            attempt_count: resp.attempt_count,
        });
        match parsed {
            Ok(doc) => return Ok((exchanges, Ok(doc))),
            Err(e) if attempt == 1 => return Ok((exchanges, Err(e.to_string()))),
            Err(_) => {
                current.user_prompt.push_str(REASK_SUFFIX);
                current.request_id.push_str(":reask");
            }
        }
    }
    unreachable!("loop returns on the second attempt")
}

pub fn refine(
    record: &MemeRecord,
    client: &VlmClient,
    config: &RefineConfig,
    image_root: &Path,
) -> Result<RefinementTrace, RefineError> {
    config.validate()?;
    let initial = build_initial_prompt(record, image_root, config)?;
    let image = initial.image.clone();
    let (exchanges, parsed) = ask(client, record, initial)?;
    let mut current = parsed.map_err(|reason| RefineError::InitialGenerationUnparseable {
        id: record.id.clone(),
        reason,
    })?;
    let mut iterations = vec![Iteration {
        round: 0,
        exchanges,
        doc: Some(current.clone()),
        similarity_to_previous: None,
        parse_error: None,
    }];
    let mut converged = false;
    for round in 1..=config.max_iterations {
        let img = config.resend_image.then(|| image.clone()).flatten();
        let req = build_role_reversal_prompt(record, &current, img, round, config);
        let (exchanges, parsed) = ask(client, record, req)?;
        match parsed {
            Ok(doc) => {
                let sim = similarity(&current, &doc).value();
                converged = sim >= config.convergence_threshold;
                iterations.push(Iteration {
                    round,
                    exchanges,
                    doc: Some(doc.clone()),
                    similarity_to_previous: Some(sim),
                    parse_error: None,
                });
                current = doc;
            }
            Err(reason) => {
                converged = false;
                iterations.push(Iteration {
                    round,
                    exchanges,
                    doc: None,
                    similarity_to_previous: None,
                    parse_error: Some(reason),
                });
            }
        }
        if converged {
            break;
        }
    }
    Ok(RefinementTrace {
        meme_id: record.id.clone(),
        iterations,
        converged,
        final_doc: current,
    })
}

/// One line of the refined-explanations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedExplanation {
    pub id: String,
    /// Canonical six-line rendering of the final explanation.
    pub explanation: String,
    pub converged: bool,
    pub rounds: u32,
}

#[derive(Debug, Default)]
pub struct CorpusSummary {
    pub processed: usize,
    pub converged: usize,
    pub failures: Vec<(String, String)>,
}

/// Refines every record with parallelism bounded by the client's in-flight
/// limit. Each finished trace is appended as one JSON line to `trace_path`;
/// `explanations_path` is written at the end in manifest order.
pub fn run_corpus(
    records: &[MemeRecord],
    client: &VlmClient,
    config: &RefineConfig,
    image_root: &Path,
    trace_path: &Path,
    explanations_path: &Path,
) -> Result<CorpusSummary, RefineError> {
    config.validate()?;
    let trace_file = OpenOptions::new().create(true).append(true).open(trace_path)?;
    let trace_out = Mutex::new(BufWriter::new(trace_file));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(client.config().max_in_flight)
        .build()
        .map_err(|e| RefineError::InvalidConfig(e.to_string()))?;

    let results: Vec<Result<RefinementTrace, RefineError>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let trace = refine(r, client, config, image_root)?;
                let line = serde_json::to_string(&trace).map_err(|e| RefineError::Io(e.into()))?;
                let mut out = trace_out.lock().unwrap_or_else(|e| e.into_inner());
                writeln!(out, "{line}")?;
                Ok(trace)
            })
            .collect()
    });
    trace_out.into_inner().unwrap_or_else(|e| e.into_inner()).flush()?;

    let mut summary = CorpusSummary::default();
    let mut out = BufWriter::new(File::create(explanations_path)?);
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(trace) => {
                summary.processed += 1;
                summary.converged += usize::from(trace.converged);
                let line = RefinedExplanation {
                    id: trace.meme_id.clone(),
                    explanation: trace.refined_text(),
                    converged: trace.converged,
                    rounds: trace.iterations.len() as u32 - 1,
                };
                let json = serde_json::to_string(&line).map_err(|e| RefineError::Io(e.into()))?;
                writeln!(out, "{json}")?;
            }
            Err(e) => summary.failures.push((record.id.clone(), e.to_string())),
        }
    }
    out.flush()?;
    Ok(summary)
}

/// Reads a refined-explanations file into `(id, explanation)` pairs.
pub fn load_refined_explanations(path: &Path) -> Result<Vec<RefinedExplanation>, RefineError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| RefineError::Io(e.into())))
        .collect()
}
