//! Resumable batch stages over files in one output directory.
//!
//! Each stage reads the files written by earlier stages and writes its own.
//! Stages that call models append one line per finished work item and skip
//! items already present when re-run, so a killed run resumes where it
//! stopped. Completed model calls are also kept in a transcript store and
//! are never sent twice.

mod config;
mod layout;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{CorpusConfig, EvaluationConfig, ModelsConfig, RunConfig};
pub use layout::Layout;

use crate::dataset::{
    compute_funnel, load_corpus, render_funnel_table, stratified_sample, write_dataset, CorpusError, FunnelCounts,
    TaxonomyKind, TaxonomyLabel, VerifiedRecord,
};
use crate::digest::derive_seed;
use crate::eval::{evaluate, render_report, EvalError};
use crate::figure::{build_figure_contexts, ExtractConfig, FigureContext, FigureDiscard, FigureKey};
use crate::gateway::{
    Endpoint, GatewayError, HttpBackend, MockBackend, MockScript, ModelBackend, ModelEndpointConfig, ModelRole,
    PromptSet, TranscriptStore,
};
use crate::generation::{extract_claims, generate_qa, ClaimQa, ClaimStatus, DeclineReason, FigureClaims, QaOutcome};
use crate::jsonl::{read_records, read_records_repairing, write_atomic, write_records, Appender, JsonlError};
use crate::latex::{prepare_paper, CleanPaper, FigureCaptionPair, PrepConfig, RawPaper};
use crate::verification::{index_verdicts, CascadeOutcome, FilterKind, VerdictLog, Verifier, VerifyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Extract,
    Generate,
    Verify,
    Annotate,
    Evaluate,
    Stats,
    /// Prepare through annotate, then stats.
    All,
    /// Re-derives the retained set from the verdict log and compares.
    Replay,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Extract => "extract",
            Stage::Generate => "generate",
            Stage::Verify => "verify",
            Stage::Annotate => "annotate",
            Stage::Evaluate => "evaluate",
            Stage::Stats => "stats",
            Stage::All => "all",
            Stage::Replay => "replay",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Stage::Prepare,
            Stage::Extract,
            Stage::Generate,
            Stage::Verify,
            Stage::Annotate,
            Stage::Evaluate,
            Stage::Stats,
            Stage::All,
            Stage::Replay,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("{count} records could not be evaluated (allowed: {allowed})")]
    Unevaluated { count: usize, allowed: usize },
    #[error("replay found {0} inconsistencies")]
    ReplayMismatch(usize),
    #[error("{0}")]
    Fatal(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Input(_) => 3,
            PipelineError::Auth(_) => 4,
            _ => 1,
        }
    }
}

impl From<JsonlError> for PipelineError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Schema { .. } => PipelineError::Input(e.to_string()),
            JsonlError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::Input(e.to_string())
            }
            other => PipelineError::Fatal(other.to_string()),
        }
    }
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::AuthError(m) => PipelineError::Auth(m),
            GatewayError::ImageUnreadable(m) => PipelineError::Input(format!("image unreadable: {m}")),
            other => PipelineError::Fatal(other.to_string()),
        }
    }
}

impl From<VerifyError> for PipelineError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Gateway(g) => g.into(),
            VerifyError::Log(l) => l.into(),
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

/// Summary a stage leaves next to its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config_digest: String,
    pub prompt_digest: String,
    pub seed: u64,
    /// Highest batch index included, when the stage works per batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_limit: Option<usize>,
    pub counts: BTreeMap<String, u64>,
}

/// A cleaned paper with its corpus figures and batch assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedPaper {
    pub batch: usize,
    pub arxiv_id: String,
    pub primary_category: String,
    pub figures: Vec<FigureCaptionPair>,
    /// `None` when cleaning failed.
    pub clean: Option<CleanPaper>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Where model calls go.
pub enum BackendChoice {
    Http,
    Mock(Arc<MockBackend>),
    Custom(Arc<dyn ModelBackend>),
}

pub struct Pipeline {
    config: RunConfig,
    prompts: PromptSet,
    layout: Layout,
    backend: Arc<dyn ModelBackend>,
    mock: Option<Arc<MockBackend>>,
    store: Arc<TranscriptStore>,
    pool: rayon::ThreadPool,
}

fn count<T: TryInto<u64>>(n: T) -> u64 {
    n.try_into().unwrap_or(u64::MAX)
}

impl Pipeline {
    pub fn new(config: RunConfig, backend: BackendChoice) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::load_dir(dir).map_err(|e| PipelineError::Config(format!("prompts: {e}")))?,
            None => PromptSet::builtin(),
        };
        let layout = Layout::new(&config.output_dir);
        std::fs::create_dir_all(layout.root())
            .map_err(|e| PipelineError::Fatal(format!("{}: {e}", layout.root().display())))?;
        let store = Arc::new(TranscriptStore::open(&layout.transcripts())?);
        let (backend, mock): (Arc<dyn ModelBackend>, _) = match backend {
            BackendChoice::Http => (Arc::new(HttpBackend::new()), None),
            BackendChoice::Mock(m) => (m.clone(), Some(m)),
            BackendChoice::Custom(b) => (b, None),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| PipelineError::Fatal(e.to_string()))?;
        Ok(Self {
            config,
            prompts,
            layout,
            backend,
            mock,
            store,
            pool,
        })
    }

    /// Pipeline whose model calls are answered by a script; every call is
    /// also appended to the mock ledger in the output directory.
    pub fn with_mock_script(config: RunConfig, script: &Path) -> Result<Self, PipelineError> {
        let script = MockScript::load(script).map_err(|e| PipelineError::Config(format!("{}: {e}", script.display())))?;
        std::fs::create_dir_all(&config.output_dir)
            .map_err(|e| PipelineError::Fatal(format!("{}: {e}", config.output_dir.display())))?;
        let ledger = Layout::new(&config.output_dir).mock_ledger();
        let mock = MockBackend::new(script)
            .with_ledger_file(&ledger)
            .map_err(|e| PipelineError::Fatal(format!("{}: {e}", ledger.display())))?;
        Self::new(config, BackendChoice::Mock(Arc::new(mock)))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mock(&self) -> Option<&Arc<MockBackend>> {
        self.mock.as_ref()
    }

    fn endpoint(&self, slot: Option<&ModelEndpointConfig>, role: ModelRole, name: &str, temperature: f64) -> Result<Endpoint, PipelineError> {
        let cfg = match slot {
            Some(c) => c.clone(),
            None if self.mock.is_some() => ModelEndpointConfig::new(role, format!("mock-{name}"))
                .with_temperature(temperature)
                .with_backoff_ms(0),
            None => return Err(PipelineError::Config(format!("models.{name} is not configured"))),
        };
        Ok(Endpoint::new(cfg, self.backend.clone())
            .with_image_root(self.config.image_root())
            .with_store(self.store.clone()))
    }

    fn text_model(&self) -> Result<Endpoint, PipelineError> {
        self.endpoint(self.config.models.text.as_ref(), ModelRole::Text, "text", 1.0)
    }

    fn vision_model(&self) -> Result<Endpoint, PipelineError> {
        self.endpoint(self.config.models.vision.as_ref(), ModelRole::Vision, "vision", 1.0)
    }

    fn manifest(&self, stage: Stage, batch_limit: Option<usize>, counts: BTreeMap<String, u64>) -> Result<StageManifest, PipelineError> {
        let m = StageManifest {
            stage,
            config_digest: self.config.digest(),
            prompt_digest: self.prompts.digest(),
            seed: self.config.seed,
            batch_limit,
            counts,
        };
        let bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        write_atomic(&self.layout.manifest(stage), &bytes)?;
        log::info!("{} done: {:?}", stage.as_str(), m.counts);
        Ok(m)
    }

    fn read_manifest(&self, stage: Stage) -> Result<StageManifest, PipelineError> {
        let path = self.layout.manifest(stage);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError::Input(format!("{}: {e} (run the {} stage first)", path.display(), stage.as_str())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
    }

    pub fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::Prepare => self.prepare().map(drop),
            Stage::Extract => self.extract().map(drop),
            Stage::Generate => self.generate(None).map(drop),
            Stage::Verify => self.verify(None).map(drop),
            Stage::Annotate => self.annotate().map(drop),
            Stage::Evaluate => self.evaluate().map(drop),
            Stage::Stats => self.stats().map(drop),
            Stage::All => self.run_all(),
            Stage::Replay => {
                let report = crate::replay::replay_run(self.layout.root())?;
                print!("{report}");
                if report.violations.is_empty() {
                    Ok(())
                } else {
                    Err(PipelineError::ReplayMismatch(report.violations.len()))
                }
            }
        }
    }

    /// Prepare and extract, then generate and verify batch by batch until
    /// the retained target (if any) is reached, then annotate and stats.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        let prepared = self.prepare()?;
        self.extract()?;
        let batches = prepared.counts.get("batches").copied().unwrap_or(0) as usize;
        for b in 0..batches {
            self.generate(Some(b))?;
            let verified = self.verify(Some(b))?;
            let retained = verified.counts.get("retained").copied().unwrap_or(0) as usize;
            if self.config.target_retained.is_some_and(|t| retained >= t) {
                log::info!("retained target reached after batch {b}");
                break;
            }
        }
        self.annotate()?;
        self.stats()?;
        Ok(())
    }

    /// Cleans every corpus paper and assigns batches after a seeded
    /// shuffle.
    pub fn prepare(&self) -> Result<StageManifest, PipelineError> {
        let mut papers = load_corpus(&self.config.corpus.records, &self.config.corpus.latex_dir)?;
        papers.sort_by(|a, b| a.arxiv_id.cmp(&b.arxiv_id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "papers", ""));
        papers.shuffle(&mut rng);
        let prep = PrepConfig::default();
        let batch_size = self.config.batch_size;
        let prepared: Vec<PreparedPaper> = self.pool.install(|| {
            papers
                .par_iter()
                .enumerate()
                .map(|(i, raw)| {
                    let (clean, error) = match prepare_paper(raw, &prep) {
                        Ok(c) => (Some(c), None),
                        Err(e) => {
                            log::warn!("{}: {e}", raw.arxiv_id);
                            (None, Some(e.to_string()))
                        }
                    };
                    PreparedPaper {
                        batch: i / batch_size,
                        arxiv_id: raw.arxiv_id.clone(),
                        primary_category: raw.primary_category.clone(),
                        figures: raw.figure_caption_pairs.clone(),
                        clean,
                        error,
                    }
                })
                .collect()
        });
        write_records(&self.layout.prepared(), &prepared)?;
        let mut counts = BTreeMap::new();
        counts.insert("papers".into(), count(prepared.len()));
        counts.insert("figures".into(), count(prepared.iter().map(|p| p.figures.len()).sum::<usize>()));
        counts.insert("failed".into(), count(prepared.iter().filter(|p| p.clean.is_none()).count()));
        counts.insert("batches".into(), count(prepared.len().div_ceil(batch_size)));
        self.manifest(Stage::Prepare, None, counts)
    }

    fn load_prepared(&self) -> Result<Vec<PreparedPaper>, PipelineError> {
        read_records(&self.layout.prepared()).map_err(PipelineError::from)
    }

    /// Matches corpus figures to LaTeX figures and collects their citing
    /// paragraphs. Every corpus figure ends up as a context or a discard.
    pub fn extract(&self) -> Result<StageManifest, PipelineError> {
        let prepared = self.load_prepared()?;
        let cfg = ExtractConfig {
            threshold: self.config.threshold,
            ..ExtractConfig::default()
        };
        let results: Vec<(Vec<FigureContext>, Vec<FigureDiscard>)> = self.pool.install(|| {
            prepared
                .par_iter()
                .map(|p| match &p.clean {
                    Some(clean) => {
                        let raw = RawPaper {
                            arxiv_id: p.arxiv_id.clone(),
                            primary_category: p.primary_category.clone(),
                            latex_source: String::new(),
                            figure_caption_pairs: p.figures.clone(),
                        };
                        let ex = build_figure_contexts(&raw, clean, &cfg);
                        (ex.contexts, ex.discards)
                    }
                    // Papers that failed cleaning were reported by prepare.
                    None => (Vec::new(), Vec::new()),
                })
                .collect()
        });
        let mut contexts = Vec::new();
        let mut discards = Vec::new();
        for (c, d) in results {
            contexts.extend(c);
            discards.extend(d);
        }
        write_records(&self.layout.contexts(), &contexts)?;
        write_records(&self.layout.discards(), &discards)?;
        let mut counts = BTreeMap::new();
        counts.insert("figures".into(), count(contexts.len() + discards.len()));
        counts.insert(
            "skipped_figures".into(),
            count(prepared.iter().filter(|p| p.clean.is_none()).map(|p| p.figures.len()).sum::<usize>()),
        );
        counts.insert("contexts".into(), count(contexts.len()));
        counts.insert("discards".into(), count(discards.len()));
        for d in &discards {
            *counts.entry(format!("discard.{:?}", d.reason.kind)).or_insert(0) += 1;
        }
        self.manifest(Stage::Extract, None, counts)
    }

    /// Papers of batches `0..=limit` (all when `None`), and the limit with
    /// `None` standing for "every batch".
    fn batch_filter(&self, limit: Option<usize>) -> Result<(HashSet<String>, Option<usize>), PipelineError> {
        let prepared = self.load_prepared()?;
        let last = prepared.iter().map(|p| p.batch).max();
        let limit = limit.filter(|l| last.is_some_and(|last| *l < last));
        let ids = prepared
            .iter()
            .filter(|p| limit.is_none_or(|l| p.batch <= l))
            .map(|p| p.arxiv_id.clone())
            .collect();
        Ok((ids, limit))
    }

    fn load_contexts(&self, papers: &HashSet<String>) -> Result<Vec<FigureContext>, PipelineError> {
        let all: Vec<FigureContext> = read_records(&self.layout.contexts())?;
        Ok(all.into_iter().filter(|c| papers.contains(&c.arxiv_id)).collect())
    }

    /// Extracts claims for each figure, then one question per claim.
    pub fn generate(&self, batch_limit: Option<usize>) -> Result<StageManifest, PipelineError> {
        let (papers, batch_limit) = self.batch_filter(batch_limit)?;
        let paper_count = papers.len();
        let contexts = self.load_contexts(&papers)?;
        let text = self.text_model()?;

        let prior_claims: Vec<FigureClaims> = read_records_repairing(&self.layout.claims())?;
        let prior_qas: Vec<ClaimQa> = read_records_repairing(&self.layout.candidates())?;
        let done_claims: HashMap<FigureKey, FigureClaims> =
            prior_claims.into_iter().map(|c| (c.figure_key.clone(), c)).collect();
        let done_qas: HashSet<String> = prior_qas.into_iter().map(|q| q.claim_key).collect();
        let claims_out = Appender::open(&self.layout.claims())?;
        let qas_out = Appender::open(&self.layout.candidates())?;
        let deferred = AtomicUsize::new(0);
        let seed = self.config.seed;

        self.pool.install(|| {
            contexts.par_iter().try_for_each(|ctx| -> Result<(), PipelineError> {
                let key = ctx.key();
                let figure_claims = match done_claims.get(&key) {
                    Some(c) => c.clone(),
                    None => match extract_claims(&text, &self.prompts, ctx) {
                        Ok(c) => {
                            claims_out.append(&c)?;
                            c
                        }
                        Err(e) if e.is_deferrable() => {
                            log::warn!("{key}: claim extraction deferred: {e}");
                            deferred.fetch_add(1, Ordering::Relaxed);
                            return Ok(());
                        }
                        Err(e) => return Err(e.into()),
                    },
                };
                for claim in &figure_claims.claims {
                    let claim_key = claim.key();
                    if done_qas.contains(&claim_key) {
                        continue;
                    }
                    match generate_qa(&text, &self.prompts, claim, &ctx.caption, &ctx.context, seed) {
                        Ok(outcome) => qas_out.append(&ClaimQa {
                            claim_key,
                            figure_key: key.clone(),
                            claim: claim.text.clone(),
                            outcome,
                        })?,
                        Err(e) if e.is_deferrable() => {
                            log::warn!("{claim_key}: generation deferred: {e}");
                            deferred.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Ok(())
            })
        })?;

        drop((claims_out, qas_out));
        compact(&self.layout.claims(), |c: &FigureClaims| c.figure_key.clone())?;
        compact(&self.layout.candidates(), |q: &ClaimQa| q.claim_key.clone())?;
        let claims = self.load_claims(&papers)?;
        let qas = self.load_qas(&papers)?;
        let mut counts = BTreeMap::new();
        counts.insert("papers".into(), count(paper_count));
        counts.insert("figures".into(), count(contexts.len()));
        counts.insert("claims".into(), count(claims.iter().map(|c| c.claims.len()).sum::<usize>()));
        counts.insert("duplicate_claims".into(), count(claims.iter().map(FigureClaims::duplicate_count).sum::<usize>()));
        counts.insert("rejected_claim_lines".into(), count(claims.iter().map(|c| c.rejected_lines).sum::<usize>()));
        counts.insert("figures_none".into(), count(claims.iter().filter(|c| c.status == ClaimStatus::NoneSignal).count()));
        counts.insert("figures_malformed".into(), count(claims.iter().filter(|c| c.status == ClaimStatus::Malformed).count()));
        let generated = qas.iter().filter(|q| matches!(q.outcome, QaOutcome::Generated { .. })).count();
        let model_declined = qas
            .iter()
            .filter(|q| matches!(q.outcome, QaOutcome::Declined { reason: DeclineReason::ModelDeclined }))
            .count();
        counts.insert("qa_generated".into(), count(generated));
        counts.insert("qa_declined_model".into(), count(model_declined));
        counts.insert("qa_declined_malformed".into(), count(qas.len() - generated - model_declined));
        counts.insert("deferred".into(), count(deferred.into_inner()));
        self.manifest(Stage::Generate, batch_limit, counts)
    }

    fn load_claims(&self, papers: &HashSet<String>) -> Result<Vec<FigureClaims>, PipelineError> {
        let all: Vec<FigureClaims> = read_records_repairing(&self.layout.claims())?;
        Ok(all.into_iter().filter(|c| papers.contains(&c.figure_key.arxiv_id)).collect())
    }

    fn load_qas(&self, papers: &HashSet<String>) -> Result<Vec<ClaimQa>, PipelineError> {
        let all: Vec<ClaimQa> = read_records_repairing(&self.layout.candidates())?;
        Ok(all.into_iter().filter(|q| papers.contains(&q.figure_key.arxiv_id)).collect())
    }

    /// Runs the filter cascade over every generated question and rewrites
    /// the retained set from the verdict log.
    pub fn verify(&self, batch_limit: Option<usize>) -> Result<StageManifest, PipelineError> {
        let (papers, batch_limit) = self.batch_filter(batch_limit)?;
        let contexts: HashMap<FigureKey, FigureContext> =
            self.load_contexts(&papers)?.into_iter().map(|c| (c.key(), c)).collect();
        let mut candidates: Vec<(ClaimQa, crate::generation::QaCandidate)> = self
            .load_qas(&papers)?
            .into_iter()
            .filter_map(|q| match &q.outcome {
                QaOutcome::Generated { candidate } => {
                    let c = candidate.clone();
                    Some((q, c))
                }
                QaOutcome::Declined { .. } => None,
            })
            .collect();
        candidates.sort_by(|a, b| a.1.key.cmp(&b.1.key));

        let (log, prior) = VerdictLog::open(&self.layout.verdicts())?;
        let (prior, duplicates) = index_verdicts(prior);
        if duplicates > 0 {
            log::warn!("verdict log has {duplicates} duplicate entries; the first of each is used");
        }
        let text = self.text_model()?;
        let vision = self.vision_model()?;
        let verifier = Verifier {
            text_model: &text,
            vision_model: &vision,
            prompts: &self.prompts,
            vote_rule: self.config.vote_rule,
        };
        let no_prior = Vec::new();
        let results: Vec<_> = self.pool.install(|| {
            candidates
                .par_iter()
                .map(|(_, q)| {
                    let ctx = contexts
                        .get(&q.figure_key)
                        .ok_or_else(|| PipelineError::Input(format!("{}: figure context missing", q.key)))?;
                    let prior = prior.get(&q.key).unwrap_or(&no_prior);
                    verifier
                        .run_cascade(q, ctx, prior, &mut |v| log.append(v))
                        .map_err(PipelineError::from)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        drop(log);
        compact(&self.layout.verdicts(), |v: &crate::verification::FilterVerdict| {
            (v.candidate_key.clone(), v.filter)
        })?;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut retained = Vec::new();
        let mut after_text = 0usize;
        for ((qa, q), res) in candidates.iter().zip(&results) {
            let text_passed = res
                .verdicts
                .iter()
                .any(|v| v.filter == FilterKind::VisualDependenceVision && v.passed);
            after_text += usize::from(text_passed);
            match &res.outcome {
                CascadeOutcome::Retained(voting) => {
                    let ctx = &contexts[&q.figure_key];
                    let record = VerifiedRecord::assemble(q, ctx, &qa.claim, voting, &res.verdicts)
                        .map_err(PipelineError::Fatal)?;
                    retained.push(record);
                }
                CascadeOutcome::Rejected(filter) => {
                    *counts.entry(format!("rejected.{filter}")).or_insert(0) += 1;
                }
                CascadeOutcome::Deferred { .. } => *counts.entry("deferred".into()).or_insert(0) += 1,
            }
        }
        retained.sort_by(|a, b| a.key.cmp(&b.key));
        log::info!("{} new verdicts logged", results.iter().map(|r| r.new_verdicts).sum::<usize>());
        write_dataset(&retained, &self.layout.retained()).map_err(|e| PipelineError::Fatal(e.to_string()))?;
        counts.insert("candidates".into(), count(candidates.len()));
        counts.insert("after_text_filtering".into(), count(after_text));
        counts.insert("retained".into(), count(retained.len()));
        self.manifest(Stage::Verify, batch_limit, counts)
    }

    /// Adds figure-type and question-type labels to the retained records.
    pub fn annotate(&self) -> Result<StageManifest, PipelineError> {
        let records: Vec<VerifiedRecord> = read_records(&self.layout.retained())?;
        let figure_model = self.endpoint(
            self.config.models.annotate_vision.as_ref().or(self.config.models.vision.as_ref()),
            ModelRole::Vision,
            "vision",
            1.0,
        )?;
        let question_model = self.endpoint(
            self.config.models.annotate_text.as_ref().or(self.config.models.text.as_ref()),
            ModelRole::Text,
            "text",
            1.0,
        )?;
        let prior: Vec<TaxonomyLabel> = read_records_repairing(&self.layout.annotations())?;
        let done: HashSet<(String, TaxonomyKind)> = prior.iter().map(|l| (l.record_key.clone(), l.kind)).collect();
        let out = Appender::open(&self.layout.annotations())?;
        let deferred = AtomicUsize::new(0);
        let work: Vec<(&VerifiedRecord, TaxonomyKind)> = records
            .iter()
            .flat_map(|r| [(r, TaxonomyKind::FigureType), (r, TaxonomyKind::QuestionType)])
            .filter(|(r, k)| !done.contains(&(r.key.clone(), *k)))
            .collect();
        self.pool.install(|| {
            work.par_iter().try_for_each(|(r, kind)| -> Result<(), PipelineError> {
                let model = match kind {
                    TaxonomyKind::FigureType => &figure_model,
                    TaxonomyKind::QuestionType => &question_model,
                };
                match crate::dataset::annotate_taxonomy(model, &self.prompts, r, *kind) {
                    Ok(label) => Ok(out.append(&label)?),
                    Err(e) if e.is_deferrable() => {
                        log::warn!("{}: annotation deferred: {e}", r.key);
                        deferred.fetch_add(1, Ordering::Relaxed);
                        Ok(())
                    }
                    Err(e) => Err(e.into()),
                }
            })
        })?;

        drop(out);
        let labels = compact(&self.layout.annotations(), |l: &TaxonomyLabel| (l.record_key.clone(), l.kind))?;
        let mut by_key: HashMap<(String, TaxonomyKind), TaxonomyLabel> = HashMap::new();
        for l in labels {
            by_key.entry((l.record_key.clone(), l.kind)).or_insert(l);
        }
        let mut dataset = records;
        for r in &mut dataset {
            for kind in [TaxonomyKind::FigureType, TaxonomyKind::QuestionType] {
                if let Some(l) = by_key.get(&(r.key.clone(), kind)) {
                    l.apply(r);
                }
            }
        }
        write_dataset(&dataset, &self.layout.dataset()).map_err(|e| PipelineError::Fatal(e.to_string()))?;
        let mut counts = BTreeMap::new();
        counts.insert("records".into(), count(dataset.len()));
        counts.insert("figure_type_labeled".into(), count(dataset.iter().filter(|r| r.figure_type.is_some()).count()));
        counts.insert("question_type_labeled".into(), count(dataset.iter().filter(|r| r.question_type.is_some()).count()));
        counts.insert("deferred".into(), count(deferred.into_inner()));
        self.manifest(Stage::Annotate, None, counts)
    }

    /// Zero-shot evaluation of the configured eval model on the annotated
    /// dataset, or on a stratified sample of it.
    pub fn evaluate(&self) -> Result<StageManifest, PipelineError> {
        let records = crate::dataset::read_dataset(&self.layout.dataset()).map_err(|e| PipelineError::Input(e.to_string()))?;
        let ev = &self.config.evaluation;
        let sample = match ev.sample_size {
            Some(n) if n < records.len() => {
                let out = stratified_sample(&records, n, &ev.strata, self.config.seed)
                    .map_err(|e| PipelineError::Input(e.to_string()))?;
                out.records
            }
            _ => records,
        };
        write_dataset(&sample, &self.layout.eval_sample()).map_err(|e| PipelineError::Fatal(e.to_string()))?;
        let model = self.endpoint(self.config.models.eval.as_ref(), ModelRole::Vision, "eval", 0.0)?;
        let result = self.pool.install(|| evaluate(&model, &self.prompts, &sample)).map_err(|e| match e {
            EvalError::NonZeroTemperature(_) => PipelineError::Config(e.to_string()),
            EvalError::Gateway(g) => g.into(),
        })?;
        let json = serde_json::to_vec_pretty(&result).expect("result serializes");
        write_atomic(&self.layout.eval_result(), &json)?;
        write_atomic(&self.layout.eval_report(), render_report(&result).as_bytes())?;
        let mut counts = BTreeMap::new();
        counts.insert("records".into(), count(sample.len()));
        counts.insert("correct".into(), count(result.overall.correct));
        counts.insert("evaluated".into(), count(result.overall.total));
        counts.insert("unevaluated".into(), count(result.unevaluated.len()));
        let manifest = self.manifest(Stage::Evaluate, None, counts)?;
        if result.unevaluated.len() > ev.max_unevaluated {
            return Err(PipelineError::Unevaluated {
                count: result.unevaluated.len(),
                allowed: ev.max_unevaluated,
            });
        }
        Ok(manifest)
    }

    /// Funnel table from the stage manifests, plus a combined run manifest.
    pub fn stats(&self) -> Result<StageManifest, PipelineError> {
        let extract = self.read_manifest(Stage::Extract)?;
        let generate = self.read_manifest(Stage::Generate)?;
        let verify = self.read_manifest(Stage::Verify)?;
        let get = |m: &StageManifest, k: &str| m.counts.get(k).copied().unwrap_or(0);
        let funnel_counts = FunnelCounts {
            papers: get(&generate, "papers"),
            claims: get(&generate, "claims"),
            qa_generated: get(&generate, "qa_generated"),
            after_text_filtering: get(&verify, "after_text_filtering"),
            after_vision_filtering: get(&verify, "retained"),
        };
        let funnel = compute_funnel(funnel_counts).map_err(|e| PipelineError::Input(e.to_string()))?;
        write_atomic(&self.layout.funnel_txt(), render_funnel_table(&funnel).as_bytes())?;
        let mut stages = BTreeMap::new();
        for stage in [Stage::Prepare, Stage::Extract, Stage::Generate, Stage::Verify, Stage::Annotate, Stage::Evaluate] {
            if let Ok(m) = self.read_manifest(stage) {
                stages.insert(stage.as_str(), m);
            }
        }
        let run = serde_json::json!({
            "config_digest": self.config.digest(),
            "prompt_digest": self.prompts.digest(),
            "seed": self.config.seed,
            "funnel": funnel,
            "discards": extract.counts.iter().filter(|(k, _)| k.starts_with("discard.")).collect::<BTreeMap<_, _>>(),
            "stages": stages,
        });
        write_atomic(&self.layout.run_manifest(), &serde_json::to_vec_pretty(&run).expect("json"))?;
        print!("{}", render_funnel_table(&funnel));
        let counts = funnel_counts_map(&funnel_counts);
        self.manifest(Stage::Stats, None, counts)
    }
}

/// Rewrites an append-only log in key order so a finished stage leaves the
/// same bytes however its work was scheduled. Entries with equal keys keep
/// their log order.
fn compact<T, K, F>(path: &Path, key: F) -> Result<Vec<T>, PipelineError>
where
    T: Serialize + serde::de::DeserializeOwned,
    K: Ord,
    F: Fn(&T) -> K,
{
    let mut records: Vec<T> = read_records_repairing(path)?;
    records.sort_by_key(|r| key(r));
    write_records(path, &records)?;
    Ok(records)
}

fn funnel_counts_map(c: &FunnelCounts) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("papers".into(), c.papers);
    m.insert("claims".into(), c.claims);
    m.insert("qa_generated".into(), c.qa_generated);
    m.insert("after_text_filtering".into(), c.after_text_filtering);
    m.insert("after_vision_filtering".into(), c.after_vision_filtering);
    m
}

/// Keys of figures per paper, for conservation checks.
pub fn figures_by_paper(contexts: &[FigureContext], discards: &[FigureDiscard]) -> BTreeMap<String, BTreeSet<usize>> {
    let mut out: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for c in contexts {
        out.entry(c.arxiv_id.clone()).or_default().insert(c.figure_index);
    }
    for d in discards {
        out.entry(d.arxiv_id.clone()).or_default().insert(d.figure_index);
    }
    out
}
