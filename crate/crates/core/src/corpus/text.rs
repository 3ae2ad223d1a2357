//! Transcript splitting, terminology correction, label projection and the clip manifest.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

const SENTENCE_END: &[char] = &['.', '?', '!'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptWord {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Sentence-final punctuation follows this word.
    #[serde(default)]
    pub punct: bool,
}

impl TranscriptWord {
    fn ends_sentence(&self) -> bool {
        self.punct || self.text.ends_with(SENTENCE_END)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// Sentences of a transcript as clip spans; spans shorter than `min_s` are dropped.
pub fn split_clips(words: &[TranscriptWord], min_s: f64) -> Result<Vec<ClipSpan>> {
    for (i, w) in words.iter().enumerate() {
        if w.end_s < w.start_s || (i > 0 && w.start_s < words[i - 1].start_s) {
            bail!(Input, "transcript word {i} ({:?}) is out of order", w.text);
        }
    }
    let mut out = Vec::new();
    let mut start = 0;
    for (i, w) in words.iter().enumerate() {
        if w.ends_sentence() || i + 1 == words.len() {
            let sentence = &words[start..=i];
            let span = ClipSpan {
                start_s: sentence[0].start_s,
                end_s: w.end_s,
                text: sentence.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" "),
            };
            if span.end_s - span.start_s >= min_s {
                out.push(span);
            }
            start = i + 1;
        }
    }
    Ok(out)
}

/// Lowercase phrase → replacement entries, matched longest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LookupTable {
    entries: Vec<(Vec<String>, String)>,
}

impl LookupTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut entries: Vec<(Vec<String>, String)> = pairs
            .into_iter()
            .map(|(k, v)| (k.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>(), v))
            .filter(|(k, _)| !k.is_empty())
            .collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        LookupTable { entries }
    }

    /// Two tab-separated columns per line; blank lines and `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('\t') else {
                bail!(Format, "lookup line {} has no tab separator", i + 1);
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self::new(pairs))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn bare(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Whole-word, case-insensitive replacement; the longest matching phrase wins.
/// Words are re-joined with single spaces; punctuation trailing the last matched word is kept.
pub fn correct_terms(text: &str, table: &LookupTable) -> String {
    if table.is_empty() {
        return text.to_string();
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let keys: Vec<String> = words.iter().map(|w| bare(w)).collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    'scan: while i < words.len() {
        for (phrase, repl) in &table.entries {
            let n = phrase.len();
            if i + n <= words.len() && keys[i..i + n].iter().zip(phrase).all(|(a, b)| a == b) {
                let last = words[i + n - 1];
                let tail_start = last.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
                out.push(format!("{repl}{}", &last[tail_start..]));
                i += n;
                continue 'scan;
            }
        }
        out.push(words[i].to_string());
        i += 1;
    }
    out.join(" ")
}

/// Sentence templates for label projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Tool and phase; falls back to [`Template::Phase`] when no tool is given.
    PhaseTool,
    /// Tool, verb and target.
    Triplet,
    /// Phase only; also the zero-shot prototype form.
    Phase,
}

impl std::str::FromStr for Template {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase_tool" => Ok(Template::PhaseTool),
            "triplet" => Ok(Template::Triplet),
            "phase" => Ok(Template::Phase),
            _ => bail!(Config, "unknown template {s:?} (phase_tool, triplet, phase)"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelRecord {
    pub phase: Option<String>,
    pub tools: Vec<String>,
    pub verb: Option<String>,
    pub target: Option<String>,
}

fn slot<'a>(v: &'a Option<String>, name: &str) -> Result<&'a str> {
    match v.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => bail!(Input, "record has no {name} for the template"),
    }
}

/// Fill a template from a label record; several tools are joined with "and".
pub fn project_labels(record: &LabelRecord, template: Template) -> Result<String> {
    let tools: Vec<&str> = record.tools.iter().map(|t| t.trim()).filter(|t| !t.is_empty()).collect();
    let tool = tools.join(" and ");
    match template {
        Template::PhaseTool if tools.is_empty() => project_labels(record, Template::Phase),
        Template::PhaseTool => Ok(format!("The surgeon is using a {tool} during the {} phase of cataract surgery.", slot(&record.phase, "phase")?)),
        Template::Triplet => {
            if tools.is_empty() {
                bail!(Input, "record has no tool for the template");
            }
            Ok(format!("The surgeon is using a {tool} to {} the {}.", slot(&record.verb, "verb")?, slot(&record.target, "target")?))
        }
        Template::Phase => Ok(format!("This is the {} phase of cataract surgery.", slot(&record.phase, "phase")?)),
    }
}

/// Zero-shot prototype sentence of a class.
pub fn prototype(phase: &str) -> String {
    project_labels(&LabelRecord { phase: Some(phase.to_string()), ..LabelRecord::default() }, Template::Phase).expect("phase slot is filled")
}

/// One clip of the training manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video: String,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub phase: String,
    #[serde(default)]
    pub tools: Vec<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| crate::Error::Format(format!("manifest line {}: {e}", i + 1))))
        .collect()
}
