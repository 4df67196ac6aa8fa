//! Samples, the synthetic sarcasm corpus, and feature export / ingestion.
//!
//! Synthetic samples follow a fixed generative rule: a sample is sarcastic
//! exactly when its text contains the marker token. Every text also carries
//! one topic token, and the explanation instantiates a class-specific
//! template with that topic in the slot, so the explanation is informative
//! about the label. Visual and acoustic features are a per-class prototype
//! plus Gaussian noise; prototypes come from a fixed stream so corpora drawn
//! with different seeds share them.
//!
//! Exported feature directories contain `manifest.csv` with the header
//! `id,label,expl_tokens,path_T,path_V,path_A`. `expl_tokens` is a
//! space-separated id list, `label` may be empty for unlabeled data, and the
//! paths are relative to the directory and point at matrix files (see
//! [`crate::features`]). Text is exported as a one-hot `n x vocab_size`
//! matrix.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::explain::ExplanationSequence;
use crate::features::{read_matrix, write_matrix, MatrixFormat};
use crate::rng::{derived_rng, seeded_rng, standard_normal};
use crate::vocab::{Vocab, BOS, EOS, FIRST_ORDINARY};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,label,expl_tokens,path_T,path_V,path_A";

const PROTOTYPE_SEED: u64 = 0x5eed_0f_c1a55;

#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    /// Pre-extracted per-token features, `n x d_in_t`.
    Features(Array2<f64>),
}

impl TextInput {
    pub fn len(&self) -> usize {
        match self {
            TextInput::Tokens(t) => t.len(),
            TextInput::Features(f) => f.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One dialogue instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub text: TextInput,
    /// `frames x d_in_v`
    pub visual: Array2<f64>,
    /// `1 x d_in_a`
    pub acoustic: Array2<f64>,
    pub label: Option<usize>,
    pub explanation: Option<ExplanationSequence>,
}

impl MultimodalSample {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("sample {}: {msg}", self.id)));
        if self.text.is_empty() {
            return bad("empty text".into());
        }
        if self.text.len() > cfg.max_text_len {
            return bad(format!("text length {} > max_text_len {}", self.text.len(), cfg.max_text_len));
        }
        if let TextInput::Tokens(toks) = &self.text {
            if let Some(t) = toks.iter().find(|&&t| t >= cfg.vocab_size) {
                return bad(format!("token id {t} >= vocab_size {}", cfg.vocab_size));
            }
        }
        if self.visual.nrows() == 0 || self.visual.nrows() > cfg.max_frames || self.visual.ncols() != cfg.d_in_v {
            return bad(format!("visual shape {:?}, expected 1..={} x {}", self.visual.dim(), cfg.max_frames, cfg.d_in_v));
        }
        if self.acoustic.dim() != (1, cfg.d_in_a) {
            return bad(format!("acoustic shape {:?}, expected 1 x {}", self.acoustic.dim(), cfg.d_in_a));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return bad(format!("label {l} is not binary"));
            }
        }
        if let Some(e) = &self.explanation {
            if e.through_eos().len() > cfg.max_expl_len + 1 {
                return bad(format!("explanation longer than max_expl_len {}", cfg.max_expl_len));
            }
        }
        if self.visual.iter().chain(self.acoustic.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite modality features".into());
        }
        Ok(())
    }

    pub fn label(&self) -> Result<usize> {
        self.label.ok_or_else(|| Error::Invalid(format!("sample {} has no label", self.id)))
    }

    pub fn explanation(&self) -> Result<&ExplanationSequence> {
        self.explanation.as_ref().ok_or(Error::MissingGroundTruth("this sample"))
    }
}

/// Template fragments; `{topic}` marks the slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub num_samples: usize,
    pub sarcasm_rate: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub min_text_len: usize,
    pub sarcastic_templates: Vec<String>,
    pub literal_templates: Vec<String>,
    pub topics: Vec<String>,
}

pub const MARKER: &str = "<sarc>";

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_samples: 64,
            sarcasm_rate: 0.5,
            noise_scale: 1.0,
            seed: 0,
            min_text_len: 6,
            sarcastic_templates: vec![
                "speaker mocks {topic} with an ironic tone".into(),
                "speaker pretends to love {topic}".into(),
            ],
            literal_templates: vec![
                "speaker sincerely likes {topic}".into(),
                "speaker genuinely talks about {topic}".into(),
            ],
            topics: ["coffee", "mondays", "traffic", "homework", "rain", "meetings", "diets", "exams"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.sarcasm_rate > 0.0 && self.sarcasm_rate < 1.0) {
            errs.push(format!("sarcasm_rate {} must lie in (0, 1)", self.sarcasm_rate));
        }
        if self.sarcastic_templates.is_empty() || self.literal_templates.is_empty() {
            errs.push("templates must be non-empty for both classes".into());
        }
        if self.topics.is_empty() {
            errs.push("at least one topic is required".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push("noise_scale must be finite and non-negative".into());
        }
        if self.min_text_len < 3 {
            errs.push("min_text_len must leave room for marker and topic".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn template_words(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for t in self.sarcastic_templates.iter().chain(&self.literal_templates) {
            for w in t.split_whitespace().filter(|w| *w != "{topic}") {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        words
    }

    /// Marker, topics, template words, then `w0, w1, ...` filler words up to
    /// `vocab_size`.
    pub fn vocab(&self, vocab_size: usize) -> Result<Vocab> {
        let mut ordinary = vec![MARKER.to_string()];
        ordinary.extend(self.topics.iter().cloned());
        ordinary.extend(self.template_words());
        let reserved = FIRST_ORDINARY + ordinary.len();
        if vocab_size < reserved + 4 {
            return Err(Error::Config(vec![format!(
                "vocab_size {vocab_size} too small for the synthetic corpus (needs at least {})",
                reserved + 4
            )]));
        }
        ordinary.extend((0..vocab_size - reserved).map(|i| format!("w{i}")));
        Ok(Vocab::new(ordinary))
    }
}

fn prototypes(classes: usize, width: usize, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = derived_rng(PROTOTYPE_SEED, stream);
    (0..classes).map(|_| standard_normal(&mut rng, width)).collect()
}

/// Draws a labelled synthetic corpus and returns it with its vocabulary.
pub fn generate_synthetic_dataset(spec: &SyntheticCorpusSpec, cfg: &ModelConfig) -> Result<(Vec<MultimodalSample>, Vocab)> {
    spec.validate()?;
    let vocab = spec.vocab(cfg.vocab_size)?;
    let marker = vocab.id(MARKER);
    let topic_ids: Vec<usize> = spec.topics.iter().map(|t| vocab.id(t)).collect();
    let fillers: Vec<usize> = (0..vocab.len()).filter(|&i| vocab.token(i).starts_with('w') && vocab.token(i)[1..].parse::<usize>().is_ok()).collect();
    let compile = |templates: &[String]| -> Vec<Vec<Option<usize>>> {
        templates
            .iter()
            .map(|t| t.split_whitespace().map(|w| if w == "{topic}" { None } else { Some(vocab.id(w)) }).collect())
            .collect()
    };
    let templates = [compile(&spec.literal_templates), compile(&spec.sarcastic_templates)];
    let longest = templates.iter().flatten().map(Vec::len).max().unwrap_or(0);
    if longest + 1 > cfg.max_expl_len {
        return Err(Error::Config(vec![format!(
            "max_expl_len {} cannot hold a {longest}-word template plus EOS",
            cfg.max_expl_len
        )]));
    }
    if spec.min_text_len > cfg.max_text_len {
        return Err(Error::Config(vec!["min_text_len exceeds max_text_len".into()]));
    }
    let visual_proto = prototypes(2, cfg.d_in_v, 0);
    let acoustic_proto = prototypes(2, cfg.d_in_a, 1);

    let mut rng = seeded_rng(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let label = usize::from(rng.random::<f64>() < spec.sarcasm_rate);
        let len = rng.random_range(spec.min_text_len..=cfg.max_text_len);
        let topic_idx = rng.random_range(0..topic_ids.len());
        let mut text: Vec<usize> = (0..len).map(|_| *fillers.choose(&mut rng).expect("fillers")).collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        text[positions[0]] = topic_ids[topic_idx];
        if label == 1 {
            text[positions[1]] = marker;
        }
        let class_templates = &templates[label];
        let template = &class_templates[topic_idx % class_templates.len()];
        let mut expl = vec![BOS];
        expl.extend(template.iter().map(|w| w.unwrap_or(topic_ids[topic_idx])));
        expl.push(EOS);

        let frames = cfg.max_frames;
        let mut noisy = |proto: &[f64], rows: usize| {
            let noise = standard_normal(&mut rng, rows * proto.len());
            Array2::from_shape_fn((rows, proto.len()), |(r, c)| proto[c] + spec.noise_scale * noise[r * proto.len() + c])
        };
        let visual = noisy(&visual_proto[label], frames);
        let acoustic = noisy(&acoustic_proto[label], 1);
        let sample = MultimodalSample {
            id: format!("s{:05}", i),
            text: TextInput::Tokens(text),
            visual,
            acoustic,
            label: Some(label),
            explanation: Some(ExplanationSequence::ground_truth(expl, cfg.vocab_size)?),
        };
        sample.validate(cfg)?;
        samples.push(sample);
    }
    Ok((samples, vocab))
}

fn one_hot(tokens: &[usize], vocab_size: usize) -> Array2<f64> {
    Array2::from_shape_fn((tokens.len(), vocab_size), |(r, c)| if tokens[r] == c { 1.0 } else { 0.0 })
}

/// Writes `samples` as a feature directory readable by [`ingest_features`].
pub fn export_features(samples: &[MultimodalSample], vocab_size: usize, dir: &Path) -> Result<()> {
    export_features_as(samples, vocab_size, dir, MatrixFormat::Csv)
}

pub fn export_features_as(samples: &[MultimodalSample], vocab_size: usize, dir: &Path, format: MatrixFormat) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        let text = match &s.text {
            TextInput::Tokens(t) => one_hot(t, vocab_size),
            TextInput::Features(f) => f.clone(),
        };
        let ext = format.extension();
        let names = [format!("{}_T.{ext}", s.id), format!("{}_V.{ext}", s.id), format!("{}_A.{ext}", s.id)];
        write_matrix(&dir.join(&names[0]), &text, format)?;
        write_matrix(&dir.join(&names[1]), &s.visual, format)?;
        write_matrix(&dir.join(&names[2]), &s.acoustic, format)?;
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        let expl = s
            .explanation
            .as_ref()
            .map(|e| e.tokens().iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        manifest.push_str(&format!("{},{label},{expl},{},{},{}\n", s.id, names[0], names[1], names[2]));
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Loads a feature directory. Problems are collected per file and reported
/// together.
pub fn ingest_features(dir: &Path, cfg: &ModelConfig) -> Result<Vec<MultimodalSample>> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Format {
                path: manifest_path,
                msg: format!("expected header `{MANIFEST_HEADER}`, found {other:?}"),
            })
        }
    }
    let text_widths = if cfg.d_in_t > 0 { vec![cfg.vocab_size, cfg.d_in_t] } else { vec![cfg.vocab_size] };
    let mut errors = Vec::new();
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let row = lineno + 2;
        if fields.len() != 6 {
            errors.push(format!("{MANIFEST} line {row}: expected 6 fields, found {}", fields.len()));
            continue;
        }
        let id = fields[0].to_string();
        let errs_before = errors.len();
        let label = match fields[1] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                errors.push(format!("{MANIFEST} line {row}: label `{other}` is not 0/1"));
                None
            }
        };
        let explanation = if fields[2].is_empty() {
            None
        } else {
            match fields[2].split_whitespace().map(str::parse::<usize>).collect::<std::result::Result<Vec<_>, _>>() {
                Ok(toks) => match ExplanationSequence::ground_truth(toks, cfg.vocab_size) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        errors.push(format!("{MANIFEST} line {row}: {e}"));
                        None
                    }
                },
                Err(e) => {
                    errors.push(format!("{MANIFEST} line {row}: explanation tokens: {e}"));
                    None
                }
            }
        };
        let mut load = |rel: &str, widths: &[usize], what: &str| -> Option<Array2<f64>> {
            let path = dir.join(rel);
            match read_matrix(&path) {
                Ok(m) if widths.contains(&m.ncols()) => Some(m),
                Ok(m) => {
                    errors.push(format!("{}: {what} width {} does not match declared {:?}", path.display(), m.ncols(), widths));
                    None
                }
                Err(e) => {
                    errors.push(format!("{}: {e}", path.display()));
                    None
                }
            }
        };
        let t = load(fields[3], &text_widths, "text");
        let v = load(fields[4], &[cfg.d_in_v], "visual");
        let a = load(fields[5], &[cfg.d_in_a], "acoustic");
        if errors.len() > errs_before {
            continue;
        }
        let (t, v, a) = (t.expect("checked"), v.expect("checked"), a.expect("checked"));
        let sample = MultimodalSample { id, text: TextInput::Features(t), visual: v, acoustic: a, label, explanation };
        match sample.validate(cfg) {
            Ok(()) => samples.push(sample),
            Err(e) => errors.push(e.to_string()),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Ingest(errors));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn label_follows_marker_rule() {
        let spec = SyntheticCorpusSpec { num_samples: 200, ..Default::default() };
        let (data, vocab) = generate_synthetic_dataset(&spec, &cfg()).unwrap();
        let marker = vocab.id(MARKER);
        for s in &data {
            let TextInput::Tokens(t) = &s.text else { panic!() };
            assert_eq!(t.contains(&marker), s.label == Some(1));
        }
    }

    #[test]
    fn label_balance_within_three_sigma() {
        let spec = SyntheticCorpusSpec { num_samples: 1000, sarcasm_rate: 0.5, ..Default::default() };
        let (data, _) = generate_synthetic_dataset(&spec, &cfg()).unwrap();
        let pos = data.iter().filter(|s| s.label == Some(1)).count();
        assert!((450..=550).contains(&pos), "{pos}");
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticCorpusSpec::default();
        let a = generate_synthetic_dataset(&spec, &cfg()).unwrap().0;
        let b = generate_synthetic_dataset(&spec, &cfg()).unwrap().0;
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&SyntheticCorpusSpec { seed: 1, ..spec }, &cfg()).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn explanations_use_class_templates() {
        let spec = SyntheticCorpusSpec::default();
        let (data, vocab): (_, Vocab) = generate_synthetic_dataset(&spec, &cfg()).unwrap();
        for s in &data {
            let words = vocab.decode(s.explanation.as_ref().unwrap().content());
            let sarcastic = words.contains("mocks") || words.contains("pretends");
            assert_eq!(sarcastic, s.label == Some(1), "{words}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticCorpusSpec { sarcasm_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(SyntheticCorpusSpec { literal_templates: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn ingest_reports_each_bad_file() {
        let c = cfg();
        let spec = SyntheticCorpusSpec { num_samples: 3, ..Default::default() };
        let (data, _) = generate_synthetic_dataset(&spec, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_features(&data, c.vocab_size, dir.path()).unwrap();
        let back = ingest_features(dir.path(), &c).unwrap();
        assert_eq!(back.len(), 3);

        let wrong = ModelConfig { d_in_v: c.d_in_v + 1, d_in_a: c.d_in_a + 2, ..c };
        let Err(Error::Ingest(errs)) = ingest_features(dir.path(), &wrong) else { panic!("expected ingest error") };
        assert_eq!(errs.len(), 6, "{errs:#?}");
        assert!(errs.iter().all(|e| e.contains("width")));
    }

    #[test]
    fn ingest_requires_manifest_header() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), "id,label\n").unwrap();
        assert!(ingest_features(dir.path(), &cfg()).is_err());
    }
}
