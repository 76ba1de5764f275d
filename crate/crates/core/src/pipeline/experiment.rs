//! End-to-end runs: annotate training programs, train, link, decode,
//! execute and score, under the four ablation modes.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{annotate_with_search, build_questions, encode_questions, Dialog, QuestionConfig};
use super::metrics::{evaluate, linking_counts, span_counts, Counts, MetricsReport};
use crate::bfs::{SearchConfig, SuccessReport};
use crate::error::{Error, Result};
use crate::executor::Value;
use crate::inference::{BeamConfig, Parser, Response};
use crate::kb::KnowledgeBase;
use crate::linker::InvertedIndex;
use crate::nn::{train, LossWeights, Model, ModelConfig, ModelState, Question, TrainConfig, TrainLog, Vocab};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    NoTypeFilter,
    SeparateLearning,
    NoBoth,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoTypeFilter, Mode::SeparateLearning, Mode::NoBoth];

    pub fn switches(self) -> Switches {
        match self {
            Mode::Full => Switches::default(),
            Mode::NoTypeFilter => Switches {
                type_filter: false,
                ..Default::default()
            },
            Mode::SeparateLearning => Switches {
                joint: false,
                ..Default::default()
            },
            Mode::NoBoth => Mode::NoTypeFilter.switches().and(Mode::SeparateLearning.switches()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoTypeFilter => "no-type-filter",
            Mode::SeparateLearning => "separate-learning",
            Mode::NoBoth => "no-both",
        }
    }

    /// Same training setup with linking left unfiltered. A model trained
    /// in one mode can be evaluated in the other, since the filter only
    /// acts at inference.
    pub fn without_type_filter(self) -> Mode {
        match self {
            Mode::Full | Mode::NoTypeFilter => Mode::NoTypeFilter,
            Mode::SeparateLearning | Mode::NoBoth => Mode::NoBoth,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Pipeline features a mode keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Restrict linking candidates to the detected type.
    pub type_filter: bool,
    /// Train detection inside the parser rather than as its own model.
    pub joint: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            type_filter: true,
            joint: true,
        }
    }
}

impl Switches {
    /// Features kept by both.
    pub fn and(self, o: Switches) -> Switches {
        Switches {
            type_filter: self.type_filter && o.type_filter,
            joint: self.joint && o.joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub search: SearchConfig,
    pub questions: QuestionConfig,
    /// Maximum edit distance for index keys.
    pub index_threshold: usize,
    pub min_count: u64,
    /// Recover every training program by search, ignoring annotated forms.
    pub search_all: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            search: SearchConfig::default(),
            questions: QuestionConfig::default(),
            index_threshold: 3,
            min_count: 1,
            search_all: false,
            seed: 1,
        }
    }
}

/// Settings a trained system needs at answer time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub mode: Mode,
    pub beam: BeamConfig,
    pub questions: QuestionConfig,
    pub index_threshold: usize,
}

#[derive(Clone, Debug)]
pub struct System<T> {
    pub vocab: Vocab,
    pub parser: Model<T>,
    pub detector: Option<Model<T>>,
    pub settings: Settings,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    vocab: Vocab,
    parser: ModelState,
    detector: Option<ModelState>,
    settings: Settings,
}

impl<T: Scalar> System<T> {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let c = Checkpoint {
            vocab: self.vocab.clone(),
            parser: ModelState::capture(&self.parser),
            detector: self.detector.as_ref().map(ModelState::capture),
            settings: self.settings.clone(),
        };
        serde_json::to_writer(w, &c)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(r)?;
        if c.parser.config.vocab_size != c.vocab.len() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary has {} tokens, parser expects {}",
                c.vocab.len(),
                c.parser.config.vocab_size
            )));
        }
        Ok(System {
            vocab: c.vocab,
            parser: c.parser.restore()?,
            detector: c.detector.map(|d| d.restore()).transpose()?,
            settings: c.settings,
        })
    }

    pub fn type_filter(&self) -> bool {
        self.settings.mode.switches().type_filter
    }

    pub fn answerer<'a>(&'a self, kb: &'a KnowledgeBase, index: &'a InvertedIndex) -> Parser<'a, T> {
        Parser {
            parser: &self.parser,
            detector: self.detector.as_ref(),
            kb,
            index,
            type_filter: self.type_filter(),
            beam: self.settings.beam,
        }
    }
}

/// Training questions with programs and tags, plus the search outcome for
/// the ones that needed it.
pub fn prepare_training(
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    cfg: &ExperimentConfig,
) -> Result<(Vec<Question>, SuccessReport)> {
    let mut qs = build_questions(dialogs, kb, &cfg.questions)?;
    if cfg.search_all {
        for q in &mut qs {
            q.program = None;
        }
    }
    let report = annotate_with_search(&mut qs, kb, &cfg.search);
    let before = qs.len();
    qs.retain(|q| q.program.is_some() && q.labels.is_some());
    if qs.len() < before {
        log::warn!(
            "{} training questions dropped for lack of a program or tags",
            before - qs.len()
        );
    }
    if qs.is_empty() {
        return Err(Error::data("training set", "no usable questions"));
    }
    Ok((qs, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub search: SuccessReport,
    pub parser: TrainLog,
    pub detector: Option<TrainLog>,
    pub questions: usize,
}

pub fn train_system<T: Scalar>(
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    cfg: &ExperimentConfig,
) -> Result<(System<T>, TrainReport)> {
    let (mut qs, search) = prepare_training(dialogs, kb, cfg)?;
    let vocab = Vocab::build(qs.iter().map(|q| q.tokens.as_slice()), cfg.min_count);
    encode_questions(&mut qs, &vocab);
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        num_predicates: kb.num_predicates(),
        num_types: kb.num_types(),
        max_input_len: cfg.model.max_input_len.max(cfg.questions.max_input_len),
        ..cfg.model.clone()
    };
    let sw = cfg.mode.switches();
    let mut parser = Model::<T>::new(model_cfg.clone(), cfg.seed)?;
    let mut parser_cfg = cfg.train.clone();
    if !sw.joint {
        parser_cfg.weights.detection = 0.0;
    }
    let parser_log = train(&mut parser, &qs, &vocab, &parser_cfg)?;
    let (detector, detector_log) = if sw.joint {
        (None, None)
    } else {
        let mut det = Model::<T>::new(model_cfg, cfg.seed.wrapping_add(1))?;
        let det_cfg = TrainConfig {
            weights: LossWeights {
                alpha: 0.0,
                detection: cfg.train.weights.detection,
            },
            ..cfg.train.clone()
        };
        let log = train(&mut det, &qs, &vocab, &det_cfg)?;
        (Some(det), Some(log))
    };
    let system = System {
        vocab,
        parser,
        detector,
        settings: Settings {
            mode: cfg.mode,
            beam: cfg.beam,
            questions: cfg.questions,
            index_threshold: cfg.index_threshold,
        },
    };
    let report = TrainReport {
        search,
        parser: parser_log,
        detector: detector_log,
        questions: qs.len(),
    };
    Ok((system, report))
}

/// One answered question.
#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub id: String,
    pub question_type: String,
    pub question: String,
    pub gold: Option<Value>,
    pub response: Response,
    #[serde(skip)]
    pub detection: Option<Counts>,
    #[serde(skip)]
    pub linking: Counts,
}

impl Prediction {
    pub fn top_score(&self) -> Option<f64> {
        self.response.provenance.hypotheses.first().map(|h| h.score)
    }
}

/// Answers every question in `dialogs` in parallel.
pub fn predict<T: Scalar>(
    system: &System<T>,
    kb: &KnowledgeBase,
    index: &InvertedIndex,
    dialogs: &[Dialog],
) -> Result<Vec<Prediction>> {
    let mut qs = build_questions(dialogs, kb, &system.settings.questions)?;
    encode_questions(&mut qs, &system.vocab);
    let answerer = system.answerer(kb, index);
    Ok(qs
        .par_iter()
        .map(|q| {
            let response = answerer.answer(q);
            let detection = q.labels.as_ref().and_then(|gold| {
                let enc = system.parser.encode(&q.ids).ok()?;
                let pred = answerer.detect(q, &enc).ok()?;
                Some(span_counts(gold, &pred))
            });
            let gold_entities: BTreeSet<_> = q.mentions.iter().map(|m| m.entity).collect();
            let linking = linking_counts(&gold_entities, &response.provenance.links);
            Prediction {
                id: q.id.clone(),
                question_type: q.question_type.clone(),
                question: q.content().join(" "),
                gold: q.answer.clone(),
                response,
                detection,
                linking,
            }
        })
        .collect())
}

/// Scores predictions; questions without a gold answer are skipped.
pub fn score_predictions(preds: &[Prediction]) -> MetricsReport {
    let values: Vec<Option<Value>> = preds
        .iter()
        .map(|p| p.response.answer.as_ref().map(|a| a.value.clone()))
        .collect();
    let mut report = evaluate(
        preds
            .iter()
            .zip(&values)
            .filter_map(|(p, v)| Some((p.question_type.as_str(), v.as_ref(), p.gold.as_ref()?))),
    );
    let mut det = Counts::default();
    let mut any_det = false;
    let mut link = Counts::default();
    let mut mentions = 0usize;
    let mut candidates = 0usize;
    for p in preds {
        if let Some(d) = p.detection {
            det.add(d);
            any_det = true;
        }
        link.add(p.linking);
        for l in &p.response.provenance.links {
            mentions += 1;
            candidates += l.candidates.len();
        }
    }
    report.detection = any_det.then_some(det);
    report.linking = Some(link);
    report.avg_candidates = (mentions > 0).then(|| candidates as f64 / mentions as f64);
    if !preds.is_empty() {
        let executed = preds.iter().filter(|p| p.response.provenance.chosen.is_some()).count();
        report.non_empty_lf_ratio = Some(executed as f64 / preds.len() as f64);
    }
    report
}

#[derive(Debug, Serialize)]
pub struct ExperimentOutcome {
    pub mode: Mode,
    pub train: TrainReport,
    pub metrics: MetricsReport,
}

/// Train on `train`, evaluate on `test`.
pub fn run_experiment<T: Scalar>(
    kb: &KnowledgeBase,
    train_set: &[Dialog],
    test_set: &[Dialog],
    cfg: &ExperimentConfig,
) -> Result<(ExperimentOutcome, System<T>, Vec<Prediction>)> {
    let (system, train_report) = train_system::<T>(train_set, kb, cfg)?;
    let index = InvertedIndex::build(kb, cfg.index_threshold);
    let preds = predict(&system, kb, &index, test_set)?;
    let mut metrics = score_predictions(&preds);
    metrics.bfs_success_ratio = Some(train_report.search.overall.ratio());
    Ok((
        ExperimentOutcome {
            mode: cfg.mode,
            train: train_report,
            metrics,
        },
        system,
        preds,
    ))
}
