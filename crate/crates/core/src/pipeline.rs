//! Configured end-to-end run: tokenize → co-occurrence → GloVe (or pooled
//! hidden states) → align → evaluate → remap → plan.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, and records them in `manifest.json` with SHA-256 digests. A
//! stage whose settings and input digests match the previous manifest, and
//! whose recorded outputs are still intact, is not re-run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::align::{self, ExtractConfig, SelfLearnConfig, Similarity};
use crate::cooccur::{self, DEFAULT_WINDOW};
use crate::corpus::{self, GreedyTokenizer, TokenStream};
use crate::embeddings::Embeddings;
use crate::error::{Error, Result};
use crate::glove::{self, GloveConfig};
use crate::hidden::{self, PoolMode};
use crate::lexicon::{AlignmentLexicon, Direction};
use crate::metrics;
use crate::plan::{self, DistillOverrides};
use crate::remap::{self, InitKind, InitStrategy};
use crate::tensor;
use crate::vocab::{self, SharedTokenSet, Vocab};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[default]
    Glove,
    Hidden,
}

/// Inputs for one vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideConfig {
    pub vocab: PathBuf,
    /// Raw text (one document per line) tokenized with the greedy tokenizer.
    pub corpus: Option<PathBuf>,
    /// Pre-tokenized `TITS` stream; takes precedence over `corpus`.
    pub tokens: Option<PathBuf>,
    /// `THSR` hidden states for the `hidden` representation.
    pub hidden_states: Option<PathBuf>,
    /// Model parameters to transplant (source side only).
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CooccurSettings {
    pub window: u32,
    pub distance_weighting: bool,
}

impl Default for CooccurSettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            distance_weighting: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenSettings {
    pub pool: PoolMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSettings {
    #[serde(flatten)]
    pub self_learning: SelfLearnConfig,
    pub similarity: Similarity,
    pub top_n: usize,
    /// Seed the dictionary with byte-identical shared tokens.
    pub use_shared_seed: bool,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            self_learning: SelfLearnConfig::default(),
            similarity: Similarity::Csls,
            top_n: 3,
            use_shared_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub enabled: bool,
    /// JSON array: true source ID of every target token.
    pub gold_t2s: Option<PathBuf>,
    /// Only target tokens at least this frequent count toward accuracy.
    pub gold_min_frequency: u64,
    /// Interleaved sentence embeddings (converted, original) per document.
    pub semantic_t2s: Option<PathBuf>,
    pub semantic_s2t: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            gold_t2s: None,
            gold_min_frequency: 0,
            semantic_t2s: None,
            semantic_s2t: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemapSettings {
    pub strategy: InitKind,
}

impl Default for RemapSettings {
    fn default() -> Self {
        Self {
            strategy: InitKind::TokAlign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    pub teacher: String,
    pub student: String,
    #[serde(flatten)]
    pub overrides: DistillOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSettings {
    pub total_steps: u64,
    pub embed_frac: f64,
    pub learning_rate: f64,
    pub batch_tokens: u64,
    pub distill: Option<DistillSettings>,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            total_steps: plan::DEFAULT_TOTAL_STEPS,
            embed_frac: plan::DEFAULT_EMBED_FRAC,
            learning_rate: plan::DEFAULT_LEARNING_RATE,
            batch_tokens: plan::DEFAULT_BATCH_TOKENS,
            distill: None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Pipeline configuration, normally read from TOML. Relative paths are
/// resolved against the configuration file's directory. Stage seeds in
/// sub-sections are ignored: all randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub representation: Representation,
    /// Text corpus tokenized by both sides when they give none of their own.
    pub corpus: Option<PathBuf>,
    pub source: SideConfig,
    pub target: SideConfig,
    #[serde(default)]
    pub cooccur: CooccurSettings,
    #[serde(default)]
    pub glove: GloveConfig,
    #[serde(default)]
    pub hidden: HiddenSettings,
    #[serde(default)]
    pub align: AlignSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub remap: RemapSettings,
    #[serde(default)]
    pub plan: PlanSettings,
    /// Reuse stage outputs recorded in an existing manifest.
    #[serde(default = "default_true")]
    pub cache: bool,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.output_dir);
        fix_opt(&mut self.corpus);
        for side in [&mut self.source, &mut self.target] {
            fix(&mut side.vocab);
            fix_opt(&mut side.corpus);
            fix_opt(&mut side.tokens);
            fix_opt(&mut side.hidden_states);
            fix_opt(&mut side.bundle);
        }
        fix_opt(&mut self.eval.gold_t2s);
        fix_opt(&mut self.eval.semantic_t2s);
        fix_opt(&mut self.eval.semantic_s2t);
    }

    fn side_has_stream(&self, side: &SideConfig) -> bool {
        side.tokens.is_some() || side.corpus.is_some() || self.corpus.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let mut files: Vec<(&str, &Path)> = vec![("source.vocab", &self.source.vocab), ("target.vocab", &self.target.vocab)];
        let optional: [(&str, &Option<PathBuf>); 11] = [
            ("corpus", &self.corpus),
            ("source.corpus", &self.source.corpus),
            ("source.tokens", &self.source.tokens),
            ("source.hidden_states", &self.source.hidden_states),
            ("source.bundle", &self.source.bundle),
            ("target.corpus", &self.target.corpus),
            ("target.tokens", &self.target.tokens),
            ("target.hidden_states", &self.target.hidden_states),
            ("eval.gold_t2s", &self.eval.gold_t2s),
            ("eval.semantic_t2s", &self.eval.semantic_t2s),
            ("eval.semantic_s2t", &self.eval.semantic_s2t),
        ];
        files.extend(optional.iter().filter_map(|(n, p)| p.as_deref().map(|p| (*n, p))));
        for (name, p) in files {
            if !p.is_file() {
                return Err(Error::Config(format!("{name}: file {} does not exist", p.display())));
            }
        }
        if self.target.bundle.is_some() {
            return Err(Error::Config("target.bundle is not used; parameters come from source.bundle".into()));
        }
        let streams = self.side_has_stream(&self.source) && self.side_has_stream(&self.target);
        match self.representation {
            Representation::Glove if !streams => {
                return Err(Error::Config("glove representation needs a corpus or tokens for both sides".into()))
            }
            Representation::Hidden if self.source.hidden_states.is_none() || self.target.hidden_states.is_none() => {
                return Err(Error::Config("hidden representation needs hidden_states for both sides".into()))
            }
            _ => {}
        }
        if self.eval.enabled && !streams {
            return Err(Error::Config("evaluation needs token streams for both sides".into()));
        }
        if self.eval.gold_min_frequency > 0 && !self.side_has_stream(&self.target) {
            return Err(Error::Config("gold_min_frequency needs a target token stream".into()));
        }
        if self.cooccur.window == 0 || self.cooccur.window > cooccur::MAX_WINDOW {
            return Err(Error::Config(format!("cooccur.window must be in 1..={}", cooccur::MAX_WINDOW)));
        }
        self.glove.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.align.top_n == 0 {
            return Err(Error::Config("align.top_n must be at least 1".into()));
        }
        plan::emit_two_stage_plan(self.plan.total_steps, self.plan.embed_frac, self.plan.learning_rate, self.plan.batch_tokens)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Deterministic per-stage seed derived from the top-level seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Digest of the stage's settings and input digests.
    pub key: String,
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Tits,
    Tcoc,
    Tal,
    Lexicon,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: ArtifactKind,
    pub sha256: String,
    pub bytes: u64,
    /// Set when the run that produced this artifact did not complete.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub complete: bool,
    pub stages: Vec<StageRecord>,
    /// Keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub metrics: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn metric_f64(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(Value::as_f64)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Re-reads every artifact with its format reader and checks its digest.
pub fn verify_artifacts(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    for (name, rec) in &manifest.artifacts {
        let path = out_dir.join(name);
        let digest = sha256_file(&path)?;
        if digest != rec.sha256 {
            return Err(Error::format(format!("{name}: digest mismatch")));
        }
        match rec.kind {
            ArtifactKind::Tits => drop(corpus::read_token_stream(&path)?),
            ArtifactKind::Tcoc => drop(cooccur::read_cooccur(&path)?),
            ArtifactKind::Tal => drop(tensor::read_bundle(&path)?),
            ArtifactKind::Lexicon => drop(AlignmentLexicon::load(&path)?),
            ArtifactKind::Json => {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::format(format!("{name}: {e}")))?;
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct StageOutput {
    artifacts: Vec<(String, ArtifactKind)>,
    metrics: BTreeMap<String, Value>,
}

impl StageOutput {
    fn artifact(mut self, name: &str, kind: ArtifactKind) -> Self {
        self.artifacts.push((name.to_owned(), kind));
        self
    }

    fn metric(mut self, name: &str, v: impl Into<Value>) -> Self {
        self.metrics.insert(name.to_owned(), v.into());
        self
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    previous: Option<Manifest>,
    manifest: Manifest,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input_digest(&self, p: &Path) -> Result<String> {
        if let Ok(rel) = p.strip_prefix(&self.out) {
            if let Some(a) = self.manifest.artifacts.get(&rel.to_string_lossy().into_owned()) {
                return Ok(a.sha256.clone());
            }
        }
        sha256_file(p)
    }

    fn cached(&self, name: &str, key: &str) -> Option<(StageRecord, Vec<(String, ArtifactRecord)>)> {
        let prev = self.previous.as_ref()?;
        let rec = prev.stage(name)?;
        if rec.key != key || !matches!(rec.status, StageStatus::Ran | StageStatus::Cached) {
            return None;
        }
        let mut arts = Vec::new();
        for o in &rec.outputs {
            let a = prev.artifacts.get(o)?;
            if sha256_file(&self.path(o)).ok()? != a.sha256 {
                return None;
            }
            arts.push((o.clone(), ArtifactRecord { partial: false, ..a.clone() }));
        }
        Some((rec.clone(), arts))
    }

    fn stage(
        &mut self,
        name: &str,
        settings: Value,
        inputs: &[&Path],
        run: impl FnOnce(&Self) -> Result<StageOutput>,
    ) -> Result<()> {
        let digests = inputs.iter().map(|p| self.input_digest(p)).collect::<Result<Vec<_>>>();
        let digests = digests.map_err(|e| self.fail(name, e))?;
        let key = hex::encode(Sha256::digest(
            json!({"stage": name, "settings": settings, "inputs": digests}).to_string().as_bytes(),
        ));
        if self.cfg.cache {
            if let Some((mut rec, arts)) = self.cached(name, &key) {
                info!("stage {name}: cached");
                rec.status = StageStatus::Cached;
                self.manifest.metrics.extend(rec.metrics.clone());
                self.manifest.artifacts.extend(arts);
                self.manifest.stages.push(rec);
                return Ok(());
            }
        }
        info!("stage {name}: running");
        let out = run(self).map_err(|e| self.fail(name, e))?;
        let mut outputs = Vec::new();
        for (art, kind) in &out.artifacts {
            let p = self.path(art);
            let bytes = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            let sha256 = sha256_file(&p)?;
            self.manifest.artifacts.insert(
                art.clone(),
                ArtifactRecord {
                    kind: *kind,
                    sha256,
                    bytes,
                    partial: false,
                },
            );
            outputs.push(art.clone());
        }
        self.manifest.metrics.extend(out.metrics.clone());
        self.manifest.stages.push(StageRecord {
            name: name.to_owned(),
            status: StageStatus::Ran,
            key,
            outputs,
            metrics: out.metrics,
            error: None,
        });
        Ok(())
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.manifest.stages.push(StageRecord {
            name: name.to_owned(),
            status: StageStatus::Skipped,
            key: String::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            error: Some(why.to_owned()),
        });
    }

    /// Wraps a stage error; `run_pipeline` records it in the failure manifest.
    fn fail(&self, name: &str, e: Error) -> Error {
        Error::Stage {
            stage: name.to_owned(),
            source: Box::new(e),
        }
    }
}

fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::format(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn load_stream_for(side: &SideConfig, shared_corpus: Option<&Path>, vocab: &Vocab) -> Result<(TokenStream, Option<f64>)> {
    if let Some(t) = &side.tokens {
        let s = corpus::read_token_stream(t)?;
        if s.vocab_size() as usize != vocab.len() {
            return Err(Error::Vocab(format!(
                "{} declares vocab size {} but the vocabulary has {}",
                t.display(),
                s.vocab_size(),
                vocab.len()
            )));
        }
        return Ok((s, None));
    }
    let text = side.corpus.as_deref().or(shared_corpus).expect("validated");
    let docs = corpus::read_text_corpus(text)?;
    let stream = GreedyTokenizer::new(vocab).tokenize_corpus(&docs, vocab.len() as u32)?;
    let rate = vocab::compression_rate(&docs, &stream).ok().map(|r| r.rate);
    Ok((stream, rate))
}

fn low_frequency_mask(counts: &[u64], min: u64) -> Vec<bool> {
    counts.iter().map(|&c| c >= min).collect()
}

/// Runs every stage and writes `manifest.json` into the output directory.
/// On failure the manifest still records completed stages, the failing
/// stage's error, and flags all artifacts as partial.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST_NAME);
    let previous = if cfg.cache { Manifest::load(&manifest_path).ok() } else { None };
    let mut runner = Runner {
        cfg,
        out: out.clone(),
        previous,
        manifest: Manifest {
            seed: cfg.seed,
            complete: false,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
        },
    };
    let result = run_stages(&mut runner);
    let mut manifest = runner.manifest;
    match result {
        Ok(()) => {
            manifest.complete = true;
            fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
            Ok(manifest)
        }
        Err(e) => {
            if let Error::Stage { stage, source } = &e {
                manifest.stages.push(StageRecord {
                    name: stage.clone(),
                    status: StageStatus::Failed,
                    key: String::new(),
                    outputs: Vec::new(),
                    metrics: BTreeMap::new(),
                    error: Some(source.to_string()),
                });
            }
            manifest.artifacts.values_mut().for_each(|a| a.partial = true);
            fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
            Err(e)
        }
    }
}

fn run_stages(r: &mut Runner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let seed = cfg.seed;
    let has_streams = cfg.side_has_stream(&cfg.source) && cfg.side_has_stream(&cfg.target);

    // 1. token streams
    let sides = [("src", &cfg.source), ("tgt", &cfg.target)];
    if has_streams {
        for (tag, side) in sides {
            let mut inputs: Vec<&Path> = vec![&side.vocab];
            let text = side.tokens.as_deref().or(side.corpus.as_deref()).or(cfg.corpus.as_deref());
            inputs.extend(text);
            let art = format!("{tag}.tits");
            r.stage(&format!("tokenize_{tag}"), json!({}), &inputs, |r| {
                let vocab = vocab::load_vocab(&side.vocab)?;
                let (stream, rate) = load_stream_for(side, cfg.corpus.as_deref(), &vocab)?;
                corpus::write_token_stream(&stream, r.path(&art))?;
                let mut o = StageOutput::default()
                    .artifact(&art, ArtifactKind::Tits)
                    .metric(&format!("{tag}_tokens"), stream.total_tokens());
                if let Some(rate) = rate {
                    o = o.metric(&format!("{tag}_compression_rate"), rate);
                }
                Ok(o)
            })?;
        }
    }

    // 2. token representations
    for (tag, side) in sides {
        let emb_art = format!("{tag}_emb.tal");
        match cfg.representation {
            Representation::Glove => {
                let tits = r.path(&format!("{tag}.tits"));
                let tcoc_art = format!("{tag}.tcoc");
                r.stage(&format!("cooccur_{tag}"), serde_json::to_value(&cfg.cooccur).expect("json"), &[&tits], |r| {
                    let stream = corpus::read_token_stream(&tits)?;
                    let m = cooccur::accumulate(&stream, cfg.cooccur.window, cfg.cooccur.distance_weighting)?;
                    cooccur::write_cooccur(&m, r.path(&tcoc_art))?;
                    Ok(StageOutput::default()
                        .artifact(&tcoc_art, ArtifactKind::Tcoc)
                        .metric(&format!("{tag}_cooccur_nnz"), m.nnz_upper() as u64))
                })?;
                let name = format!("glove_{tag}");
                let gcfg = GloveConfig {
                    seed: stage_seed(seed, &name),
                    ..cfg.glove.clone()
                };
                let tcoc = r.path(&tcoc_art);
                r.stage(&name, serde_json::to_value(&gcfg).expect("json"), &[&tcoc, &tits], |r| {
                    let m = cooccur::read_cooccur(&tcoc)?;
                    let run = glove::train_from(&m, &gcfg, None)?;
                    let mut emb = run.embeddings;
                    emb.trained_token_count = corpus::read_token_stream(&tits)?.total_tokens();
                    emb.save(r.path(&emb_art))?;
                    Ok(StageOutput::default()
                        .artifact(&emb_art, ArtifactKind::Tal)
                        .metric(&format!("{tag}_coverage"), emb.coverage())
                        .metric(&format!("{tag}_glove_final_loss"), run.epoch_losses.last().copied().unwrap_or(f64::NAN)))
                })?;
            }
            Representation::Hidden => {
                let states = side.hidden_states.as_deref().expect("validated");
                r.stage(&format!("hidden_{tag}"), serde_json::to_value(&cfg.hidden).expect("json"), &[states, &side.vocab], |r| {
                    let vocab = vocab::load_vocab(&side.vocab)?;
                    let records = hidden::read_hidden_states(states)?;
                    let emb = hidden::build_embeddings(&records, vocab.len(), cfg.hidden.pool)?;
                    emb.save(r.path(&emb_art))?;
                    Ok(StageOutput::default()
                        .artifact(&emb_art, ArtifactKind::Tal)
                        .metric(&format!("{tag}_coverage"), emb.coverage()))
                })?;
            }
        }
    }

    // 3. alignment
    let align_cfg = SelfLearnConfig {
        seed: stage_seed(seed, "align"),
        ..cfg.align.self_learning.clone()
    };
    let src_emb_path = r.path("src_emb.tal");
    let tgt_emb_path = r.path("tgt_emb.tal");
    let tgt_tits = r.path("tgt.tits");
    let mut align_inputs: Vec<&Path> = vec![&src_emb_path, &tgt_emb_path, &cfg.source.vocab, &cfg.target.vocab];
    if let Some(g) = &cfg.eval.gold_t2s {
        align_inputs.push(g);
        if cfg.eval.gold_min_frequency > 0 {
            align_inputs.push(&tgt_tits);
        }
    }
    let align_settings = json!({
        "self_learning": align_cfg,
        "similarity": cfg.align.similarity,
        "top_n": cfg.align.top_n,
        "use_shared_seed": cfg.align.use_shared_seed,
        "gold_min_frequency": cfg.eval.gold_min_frequency,
    });
    r.stage("align", align_settings, &align_inputs, |r| {
        let src_vocab = vocab::load_vocab(&cfg.source.vocab)?;
        let tgt_vocab = vocab::load_vocab(&cfg.target.vocab)?;
        let src = Embeddings::load(&src_emb_path)?;
        let tgt = Embeddings::load(&tgt_emb_path)?;
        for (emb, v, which) in [(&src, &src_vocab, "source"), (&tgt, &tgt_vocab, "target")] {
            if emb.rows() != v.len() {
                return Err(Error::Dimension(format!(
                    "{which} embeddings have {} rows for a vocabulary of {}",
                    emb.rows(),
                    v.len()
                )));
            }
        }
        let shared = vocab::shared_tokens(&src_vocab, &tgt_vocab);
        let src_n = align::normalize(&src)?;
        let tgt_n = align::normalize(&tgt)?;
        let seed_pairs = if cfg.align.use_shared_seed { shared.clone() } else { SharedTokenSet::empty() };
        let mapping = align::self_learn_align(&src_n, &tgt_n, &seed_pairs, &align_cfg)?;
        tensor::write_bundle(&mapping.to_bundle()?, r.path("mapping.tal"))?;
        let extract = |direction| ExtractConfig {
            direction,
            top_n: cfg.align.top_n,
            similarity: cfg.align.similarity,
            csls_k: align_cfg.csls_k,
        };
        let t2s = align::extract_lexicon(&src_n, &tgt_n, &mapping, &shared, &extract(Direction::TgtToSrc))?;
        let s2t = align::extract_lexicon(&src_n, &tgt_n, &mapping, &shared, &extract(Direction::SrcToTgt))?;
        t2s.save(r.path("lexicon_t2s.tsv"))?;
        s2t.save(r.path("lexicon_s2t.tsv"))?;
        let mut o = StageOutput::default()
            .artifact("mapping.tal", ArtifactKind::Tal)
            .artifact("lexicon_t2s.tsv", ArtifactKind::Lexicon)
            .artifact("lexicon_s2t.tsv", ArtifactKind::Lexicon)
            .metric("shared_tokens", shared.len() as u64)
            .metric("overlap_ratio_src", shared.overlap_ratio_src)
            .metric("overlap_ratio_tgt", shared.overlap_ratio_tgt)
            .metric("alignment_objective", mapping.objective)
            .metric("alignment_iterations", mapping.iterations as u64)
            .metric("alignment_converged", mapping.converged)
            .metric("low_confidence_t2s", t2s.low_confidence_count() as u64);
        if let Some(g) = &cfg.eval.gold_t2s {
            let text = fs::read_to_string(g).map_err(|e| Error::io(g, e))?;
            let truth: Vec<u32> = serde_json::from_str(&text).map_err(|e| Error::format(format!("gold lexicon: {e}")))?;
            let mask = (cfg.eval.gold_min_frequency > 0)
                .then(|| corpus::read_token_stream(&tgt_tits).map(|s| low_frequency_mask(&s.token_counts(), cfg.eval.gold_min_frequency)))
                .transpose()?;
            o = o.metric("top1_accuracy", metrics::top1_accuracy(&t2s, &truth, mask.as_deref())?);
        }
        Ok(o)
    })?;

    // 4. evaluation
    let lex_t2s = r.path("lexicon_t2s.tsv");
    let lex_s2t = r.path("lexicon_s2t.tsv");
    if cfg.eval.enabled {
        let src_tits = r.path("src.tits");
        let mut inputs: Vec<&Path> = vec![&src_tits, &tgt_tits, &lex_t2s, &lex_s2t];
        inputs.extend(cfg.eval.semantic_t2s.as_deref());
        inputs.extend(cfg.eval.semantic_s2t.as_deref());
        r.stage("eval", json!({}), &inputs, |r| {
            let src = corpus::read_token_stream(&src_tits)?;
            let tgt = corpus::read_token_stream(&tgt_tits)?;
            let a = AlignmentLexicon::load(&lex_t2s)?;
            let b = AlignmentLexicon::load(&lex_s2t)?;
            let sem_a = cfg.eval.semantic_t2s.as_ref().map(metrics::read_sentence_pairs).transpose()?;
            let sem_b = cfg.eval.semantic_s2t.as_ref().map(metrics::read_sentence_pairs).transpose()?;
            let (rt2s, rs2t) = metrics::evaluate_bidirectional(
                &src,
                &tgt,
                &a,
                &b,
                [
                    sem_a.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())),
                    sem_b.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())),
                ],
            )?;
            save_json(&r.path("eval_report.json"), &json!({"t2s": rt2s, "s2t": rs2t}))?;
            let mut o = StageOutput::default()
                .artifact("eval_report.json", ArtifactKind::Json)
                .metric("bleu1_t2s", rt2s.bleu1)
                .metric("bleu1_s2t", rs2t.bleu1);
            if let Some(s) = rt2s.semantic_score {
                o = o.metric("semantic_t2s", s);
            }
            if let Some(s) = rs2t.semantic_score {
                o = o.metric("semantic_s2t", s);
            }
            Ok(o)
        })?;
    } else {
        r.skip("eval", "disabled in configuration");
    }

    // 5. parameter remap
    if let Some(bundle) = &cfg.source.bundle {
        let strategy = InitStrategy {
            kind: cfg.remap.strategy,
            seed: Some(stage_seed(seed, "remap")),
        };
        r.stage("remap", serde_json::to_value(strategy).expect("json"), &[bundle, &lex_t2s, &cfg.target.vocab], |r| {
            let src = tensor::read_bundle(bundle)?;
            let lex = AlignmentLexicon::load(&lex_t2s)?;
            let tgt_size = vocab::load_vocab(&cfg.target.vocab)?.len();
            let out = remap::remap_parameters(&src, &lex, &strategy, tgt_size)?;
            tensor::write_bundle(&out, r.path("init.tal"))?;
            Ok(StageOutput::default()
                .artifact("init.tal", ArtifactKind::Tal)
                .metric("remap_direct_rows", lex.direct_count() as u64)
                .metric("remap_bitwise_identical", out == src))
        })?;
    } else {
        r.skip("remap", "no source.bundle configured");
    }

    // 6. training plans
    r.stage("plan", serde_json::to_value(&cfg.plan).expect("json"), &[], |r| {
        let p = &cfg.plan;
        plan::emit_two_stage_plan(p.total_steps, p.embed_frac, p.learning_rate, p.batch_tokens)?.save(r.path("plan.json"))?;
        let mut o = StageOutput::default().artifact("plan.json", ArtifactKind::Json);
        if let Some(d) = &p.distill {
            plan::emit_distill_config(&d.teacher, &d.student, d.overrides)?.save(r.path("distill.json"))?;
            o = o.artifact("distill.json", ArtifactKind::Json);
        }
        Ok(o)
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::DictionaryMode;

    #[test]
    fn stage_seeds_differ_per_stage_and_are_stable() {
        assert_eq!(stage_seed(7, "align"), stage_seed(7, "align"));
        assert_ne!(stage_seed(7, "align"), stage_seed(7, "remap"));
        assert_ne!(stage_seed(7, "align"), stage_seed(8, "align"));
    }

    #[test]
    fn config_paths_resolve_against_base() {
        let text = r#"
            output_dir = "out"
            [source]
            vocab = "a.json"
            [target]
            vocab = "/abs/b.json"
            [align]
            csls_k = 5
            dictionary = "union"
        "#;
        let cfg = PipelineConfig::from_toml_str(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.source.vocab, Path::new("/base/a.json"));
        assert_eq!(cfg.target.vocab, Path::new("/abs/b.json"));
        assert_eq!(cfg.align.self_learning.csls_k, 5);
        assert_eq!(cfg.align.self_learning.dictionary, DictionaryMode::Union);
        assert!(cfg.cache);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = PipelineConfig::from_toml_str("output_dir = \"o\"\nbogus = 1\n[source]\nvocab=\"a\"\n[target]\nvocab=\"b\"\n", Path::new(".")).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn missing_files_fail_validation() {
        let cfg = PipelineConfig::from_toml_str(
            "output_dir = \"o\"\n[source]\nvocab=\"nope.json\"\n[target]\nvocab=\"nope2.json\"\n",
            Path::new("/nonexistent"),
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
