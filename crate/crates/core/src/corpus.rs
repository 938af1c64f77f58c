//! Datasets: instances, splits, feature atoms and the on-disk record formats.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"id":"a","text":"win a prize","split":"unlabeled","gold_label":2,"embedding":[0.1,0.2],"features":[{"kind":"NER","value":"CARDINAL"}]}
//! ```
//!
//! `gold_label` and `features` are optional. Sidecar files carry extra atoms
//! for existing instances (`{"id":"a","features":[...]}`), and a template
//! file declares the prompt templates that `PMT` atoms may reference.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class index in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    /// Label for a zero-based class position.
    pub fn from_index(index: usize) -> Self {
        Label(index as u32 + 1)
    }

    /// Zero-based position of this class.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn in_range(self, num_classes: usize) -> bool {
        self.0 >= 1 && self.0 as usize <= num_classes
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Labeled,
        Split::Unlabeled,
        Split::Validation,
        Split::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    #[serde(rename = "NGRAM")]
    Ngram,
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "PMT")]
    Prompt,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Ngram => "NGRAM",
            FeatureKind::Pos => "POS",
            FeatureKind::Ner => "NER",
            FeatureKind::Prompt => "PMT",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NGRAM" => Ok(FeatureKind::Ngram),
            "POS" => Ok(FeatureKind::Pos),
            "NER" => Ok(FeatureKind::Ner),
            "PMT" => Ok(FeatureKind::Prompt),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// A typed predicate primitive: "this n-gram occurs", "this entity type
/// occurs", "this token is a top filler for that prompt template".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "AtomRecord", try_from = "AtomRecord")]
pub struct FeatureAtom {
    pub kind: FeatureKind,
    pub value: String,
}

impl FeatureAtom {
    /// Builds an atom in canonical form. N-gram values are case-folded; other
    /// kinds are kept verbatim.
    pub fn new(kind: FeatureKind, value: impl Into<String>) -> Self {
        let value = value.into();
        let value = match kind {
            FeatureKind::Ngram => value.to_lowercase(),
            _ => value,
        };
        FeatureAtom { kind, value }
    }

    pub fn ngram(value: impl Into<String>) -> Self {
        Self::new(FeatureKind::Ngram, value)
    }

    pub fn prompt(template: &str, token: &str) -> Self {
        Self::new(FeatureKind::Prompt, format!("{template}={token}"))
    }

    /// Template name of a `PMT` atom.
    pub fn template_name(&self) -> Option<&str> {
        match self.kind {
            FeatureKind::Prompt => self.value.split_once('=').map(|(name, _)| name),
            _ => None,
        }
    }

    pub(crate) fn from_record(record: &AtomRecord) -> Result<Self> {
        let kind: FeatureKind = record.kind.parse()?;
        Ok(FeatureAtom::new(kind, record.value.clone()))
    }

    pub(crate) fn to_record(&self) -> AtomRecord {
        AtomRecord {
            kind: self.kind.as_str().to_string(),
            value: self.value.clone(),
        }
    }
}

impl From<FeatureAtom> for AtomRecord {
    fn from(atom: FeatureAtom) -> Self {
        atom.to_record()
    }
}

impl TryFrom<AtomRecord> for FeatureAtom {
    type Error = Error;

    fn try_from(record: AtomRecord) -> Result<Self> {
        FeatureAtom::from_record(&record)
    }
}

impl fmt::Display for FeatureAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.kind.as_str(), self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct AtomRecord {
    pub kind: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub template: String,
}

pub const MASK_TOKEN: &str = "[MASK]";

/// Declared prompt templates; `PMT` atoms must name one of these.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &templates {
            if t.name.is_empty() || t.name.contains('=') {
                return Err(Error::InvalidTemplate {
                    name: t.name.clone(),
                    message: "name must be non-empty and must not contain '='".into(),
                });
            }
            if t.template.matches(MASK_TOKEN).count() != 1 {
                return Err(Error::InvalidTemplate {
                    name: t.name.clone(),
                    message: format!("expected exactly one {MASK_TOKEN} placeholder"),
                });
            }
            if !seen.insert(t.name.clone()) {
                return Err(Error::InvalidTemplate {
                    name: t.name.clone(),
                    message: "declared twice".into(),
                });
            }
        }
        Ok(TemplateSet { templates })
    }

    /// Reads a JSON array of `{"name", "template"}` objects.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let templates: Vec<Template> =
            serde_json::from_str(&raw).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(templates)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.templates.iter().any(|t| t.name == name)
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f64>,
    pub gold_label: Option<Label>,
    pub split: Split,
    pub features: BTreeSet<FeatureAtom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    text: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_label: Option<i64>,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    features: Vec<AtomRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarRecord {
    id: String,
    features: Vec<AtomRecord>,
}

impl Instance {
    /// Canonical single-line record for this instance.
    pub fn to_record_line(&self) -> String {
        let record = InstanceRecord {
            id: self.id.clone(),
            text: self.text.clone(),
            split: self.split,
            gold_label: self.gold_label.map(|l| l.0 as i64),
            embedding: self.embedding.clone(),
            features: self.features.iter().map(FeatureAtom::to_record).collect(),
        };
        serde_json::to_string(&record).expect("instance record serializes")
    }
}

/// A validated, split-partitioned dataset.
#[derive(Debug, Clone)]
pub struct Corpus {
    instances: Vec<Instance>,
    num_classes: usize,
    class_names: Vec<String>,
    embedding_dim: usize,
    templates: TemplateSet,
    by_id: HashMap<String, usize>,
    splits: [Vec<usize>; 4],
}

impl Corpus {
    /// Validates and assembles a corpus. Class names default to `class_1..class_K`.
    pub fn new(instances: Vec<Instance>, num_classes: usize, templates: TemplateSet) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let Some(first) = instances.first() else {
            return Err(Error::NoInstances(Path::new("<memory>").to_path_buf()));
        };
        let embedding_dim = first.embedding.len();
        if embedding_dim == 0 {
            return Err(Error::DimensionMismatch {
                id: first.id.clone(),
                expected: 1,
                found: 0,
            });
        }
        let mut by_id = HashMap::with_capacity(instances.len());
        let mut splits: [Vec<usize>; 4] = Default::default();
        for (idx, inst) in instances.iter().enumerate() {
            if by_id.insert(inst.id.clone(), idx).is_some() {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
            if inst.embedding.len() != embedding_dim {
                return Err(Error::DimensionMismatch {
                    id: inst.id.clone(),
                    expected: embedding_dim,
                    found: inst.embedding.len(),
                });
            }
            match inst.gold_label {
                Some(label) if !label.in_range(num_classes) => {
                    return Err(Error::LabelOutOfRange {
                        id: inst.id.clone(),
                        label: label.0 as i64,
                        num_classes,
                    })
                }
                None if inst.split != Split::Unlabeled => {
                    return Err(Error::MissingGoldLabel {
                        id: inst.id.clone(),
                        split: inst.split.to_string(),
                    })
                }
                _ => {}
            }
            for atom in &inst.features {
                check_atom(atom, &templates)?;
            }
            splits[split_slot(inst.split)].push(idx);
        }
        let class_names = (1..=num_classes).map(|k| format!("class_{k}")).collect();
        Ok(Corpus {
            instances,
            num_classes,
            class_names,
            embedding_dim,
            templates,
            by_id,
            splits,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: self.num_classes,
            });
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, idx: usize) -> &Instance {
        &self.instances[idx]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Instance positions of a split, in corpus order.
    pub fn split(&self, split: Split) -> &[usize] {
        &self.splits[split_slot(split)]
    }

    /// Declares prompt templates; existing `PMT` atoms must reference them.
    pub fn set_templates(&mut self, templates: TemplateSet) -> Result<()> {
        for inst in &self.instances {
            for atom in &inst.features {
                check_atom(atom, &templates)?;
            }
        }
        self.templates = templates;
        Ok(())
    }

    /// Adds n-gram atoms (orders `1..=n_max`) extracted from each instance's text.
    pub fn add_ngram_features(&mut self, n_max: usize) {
        for inst in &mut self.instances {
            let grams = crate::features::extract_ngrams(&inst.text, n_max);
            inst.features.extend(grams);
        }
    }

    /// Unions sidecar atoms into instance feature sets and returns how many
    /// atoms were new. The whole file is validated before anything changes.
    pub fn ingest_sidecar(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let mut staged: Vec<(usize, FeatureAtom)> = Vec::new();
        for (line_no, line) in read_lines(path)? {
            let record: SidecarRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            let idx = self
                .index_of(&record.id)
                .ok_or_else(|| Error::UnknownId(record.id.clone()))?;
            for atom in &record.features {
                let atom = FeatureAtom::from_record(atom)?;
                check_atom(&atom, &self.templates)?;
                staged.push((idx, atom));
            }
        }
        let mut added = 0;
        for (idx, atom) in staged {
            if self.instances[idx].features.insert(atom) {
                added += 1;
            }
        }
        Ok(added)
    }

    /// Canonical serialization: one record per line, trailing newline.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&inst.to_record_line());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_records()).map_err(|e| Error::io(path, e))
    }
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Labeled => 0,
        Split::Unlabeled => 1,
        Split::Validation => 2,
        Split::Test => 3,
    }
}

fn check_atom(atom: &FeatureAtom, templates: &TemplateSet) -> Result<()> {
    if atom.kind == FeatureKind::Prompt {
        match atom.template_name() {
            Some(name) if templates.contains(name) => {}
            _ => return Err(Error::UndeclaredTemplate(atom.value.clone())),
        }
    }
    Ok(())
}

/// Non-blank lines with their 1-based line numbers.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Loads and validates a corpus file with no prompt templates declared.
pub fn load_corpus(path: impl AsRef<Path>, num_classes: usize) -> Result<Corpus> {
    load_corpus_with_templates(path, num_classes, TemplateSet::default())
}

pub fn load_corpus_with_templates(
    path: impl AsRef<Path>,
    num_classes: usize,
    templates: TemplateSet,
) -> Result<Corpus> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(Error::NoInstances(path.to_path_buf()));
    }
    let mut instances = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let malformed = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let gold_label = match record.gold_label {
            None => None,
            Some(v) if v >= 1 && v as usize <= num_classes => Some(Label(v as u32)),
            Some(v) => {
                return Err(Error::LabelOutOfRange {
                    id: record.id,
                    label: v,
                    num_classes,
                })
            }
        };
        if record.embedding.iter().any(|x| !x.is_finite()) {
            return Err(malformed(format!("non-finite embedding value for {:?}", record.id)));
        }
        let features = record
            .features
            .iter()
            .map(FeatureAtom::from_record)
            .collect::<Result<BTreeSet<_>>>()?;
        instances.push(Instance {
            id: record.id,
            text: record.text,
            embedding: record.embedding,
            gold_label,
            split: record.split,
            features,
        });
    }
    Corpus::new(instances, num_classes, templates)
}

/// Largest gold label in a corpus file, used when the class count is not given.
pub fn infer_num_classes(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut max_label = 0i64;
    for (line_no, line) in read_lines(path)? {
        let record: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        max_label = max_label.max(record.gold_label.unwrap_or(0));
    }
    Ok((max_label.max(2)) as usize)
}
