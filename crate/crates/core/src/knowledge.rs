//! Declarative activity/context knowledge and the consistency reasoner.
//!
//! A [`KnowledgeModel`] lists, for each activity, a set of necessary
//! conditions ([`Requirement`]s) over context predicates. The reasoner
//! returns the activities whose every requirement holds in the observed
//! [`ContextState`].
//!
//! Evaluation is open-world: a literal over a dimension that has no
//! observation in the state is satisfied. Only an observed, different value
//! of an exclusive dimension falsifies a literal. Requirements contain no
//! negation, so adding observations can only shrink the consistent set.
//!
//! # Rule file grammar
//!
//! ```text
//! file        := section*
//! section     := "[activities]" NL (name NL)*
//!              | "[contexts]"   NL (dimension NL)*
//!              | "[rules]"      NL (rule NL)*
//! dimension   := ident ("exclusive" | "multi") ":" ident ("," ident)*
//! rule        := ident ":" expr
//! expr        := term ("OR" term)*
//! term        := factor ("AND" factor)*
//! factor      := literal | "(" expr ")"
//! literal     := ident "=" ident
//! ident       := [A-Za-z0-9_.-]+
//! ```
//!
//! `#` starts a comment that runs to the end of the line. Several rule lines
//! for the same activity are independent requirements, all of which must
//! hold. `AND` binds tighter than `OR`; keywords are case-sensitive.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: unknown symbol `{symbol}`")]
    UnknownSymbol {
        line: usize,
        column: usize,
        symbol: String,
    },
    #[error("line {line}: duplicate activity `{name}`")]
    DuplicateActivity { line: usize, name: String },
    #[error("line {line}: duplicate context dimension `{name}`")]
    DuplicateDimension { line: usize, name: String },
    #[error("malformed predicate `{0}` (expected dimension=value)")]
    MalformedPredicate(String),
    #[error("unknown context predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("exclusive dimension `{dimension}` observed with several values")]
    ExclusivityViolated { dimension: String },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// One entry of the activity vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub id: usize,
    pub name: String,
}

/// Dense, uniquely named list of activities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ActivityVocabulary {
    activities: Vec<Activity>,
    by_name: HashMap<String, usize>,
}

impl ActivityVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self, KnowledgeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut activities = Vec::new();
        let mut by_name = HashMap::new();
        for (id, name) in names.into_iter().enumerate() {
            let name = name.into();
            if by_name.insert(name.clone(), id).is_some() {
                return Err(KnowledgeError::DuplicateActivity { line: 0, name });
            }
            activities.push(Activity { id, name });
        }
        Ok(ActivityVocabulary {
            activities,
            by_name,
        })
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.activities[id].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Activity> {
        self.activities.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.activities.iter().map(|a| a.name.clone()).collect()
    }
}

impl TryFrom<Vec<String>> for ActivityVocabulary {
    type Error = KnowledgeError;
    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        ActivityVocabulary::new(names)
    }
}

impl From<ActivityVocabulary> for Vec<String> {
    fn from(v: ActivityVocabulary) -> Self {
        v.names()
    }
}

/// A context dimension and the values it may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    /// At most one value may be observed per window.
    pub exclusive: bool,
    pub values: Vec<String>,
}

/// Index of a predicate in the flattened context vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredicateId(pub usize);

/// A `dimension=value` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextPredicate {
    pub dimension: String,
    pub value: String,
}

impl ContextPredicate {
    pub fn new(dimension: impl Into<String>, value: impl Into<String>) -> Self {
        ContextPredicate {
            dimension: dimension.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for ContextPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.dimension, self.value)
    }
}

impl std::str::FromStr for ContextPredicate {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let mut parts = s.splitn(2, '=');
        let dim = parts.next().unwrap_or("").trim();
        let value = parts.next().map(str::trim).unwrap_or("");
        if dim.is_empty() || value.is_empty() || !dim.chars().all(is_ident_char) || !value.chars().all(is_ident_char) {
            return Err(KnowledgeError::MalformedPredicate(s.to_string()));
        }
        Ok(ContextPredicate::new(dim, value))
    }
}

/// The declared context dimensions, flattened into predicate indices.
///
/// Predicates are numbered dimension by dimension in declaration order; this
/// numbering is also the layout of the multi-hot context encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dimension>", into = "Vec<Dimension>")]
pub struct ContextVocabulary {
    dimensions: Vec<Dimension>,
    predicates: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    index: HashMap<(String, String), PredicateId>,
}

impl ContextVocabulary {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, KnowledgeError> {
        let mut predicates = Vec::new();
        let mut offsets = Vec::with_capacity(dimensions.len());
        let mut index = HashMap::new();
        let mut seen = BTreeSet::new();
        for (d, dim) in dimensions.iter().enumerate() {
            if !seen.insert(dim.name.clone()) {
                return Err(KnowledgeError::DuplicateDimension {
                    line: 0,
                    name: dim.name.clone(),
                });
            }
            offsets.push(predicates.len());
            for (v, value) in dim.values.iter().enumerate() {
                let id = PredicateId(predicates.len());
                if index.insert((dim.name.clone(), value.clone()), id).is_some() {
                    return Err(KnowledgeError::Parse {
                        line: 0,
                        column: 0,
                        message: format!("duplicate value `{value}` in dimension `{}`", dim.name),
                    });
                }
                predicates.push((d, v));
            }
        }
        Ok(ContextVocabulary {
            dimensions,
            predicates,
            offsets,
            index,
        })
    }

    /// Number of predicates (width of the multi-hot encoding).
    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn dimension(&self, name: &str) -> Option<(usize, &Dimension)> {
        self.dimensions.iter().enumerate().find(|(_, d)| d.name == name)
    }

    pub fn lookup(&self, dimension: &str, value: &str) -> Option<PredicateId> {
        self.index
            .get(&(dimension.to_string(), value.to_string()))
            .copied()
    }

    pub fn id_of(&self, predicate: &ContextPredicate) -> Result<PredicateId, KnowledgeError> {
        self.lookup(&predicate.dimension, &predicate.value)
            .ok_or_else(|| KnowledgeError::UnknownPredicate(predicate.to_string()))
    }

    /// Dimension index of a predicate.
    pub fn dimension_of(&self, id: PredicateId) -> usize {
        self.predicates[id.0].0
    }

    pub fn predicate(&self, id: PredicateId) -> ContextPredicate {
        let (d, v) = self.predicates[id.0];
        let dim = &self.dimensions[d];
        ContextPredicate::new(dim.name.clone(), dim.values[v].clone())
    }

    /// Predicate ids belonging to dimension `d`.
    pub fn predicates_of(&self, d: usize) -> impl Iterator<Item = PredicateId> {
        let start = self.offsets[d];
        (start..start + self.dimensions[d].values.len()).map(PredicateId)
    }

    /// Parses an inline `dim=value,dim=value` list into a validated state.
    pub fn parse_state(&self, text: &str) -> Result<ContextState, KnowledgeError> {
        let mut state = ContextState::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let pred: ContextPredicate = item.parse()?;
            state.insert(self.id_of(&pred)?);
        }
        state.validate(self)?;
        Ok(state)
    }
}

impl TryFrom<Vec<Dimension>> for ContextVocabulary {
    type Error = KnowledgeError;
    fn try_from(dims: Vec<Dimension>) -> Result<Self, Self::Error> {
        ContextVocabulary::new(dims)
    }
}

impl From<ContextVocabulary> for Vec<Dimension> {
    fn from(v: ContextVocabulary) -> Self {
        v.dimensions
    }
}

/// The context predicates observed in one window.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextState {
    observed: BTreeSet<PredicateId>,
}

impl ContextState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = PredicateId>) -> Self {
        ContextState {
            observed: ids.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, id: PredicateId) -> bool {
        self.observed.insert(id)
    }

    pub fn contains(&self, id: PredicateId) -> bool {
        self.observed.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = PredicateId> + '_ {
        self.observed.iter().copied()
    }

    pub fn is_subset(&self, other: &ContextState) -> bool {
        self.observed.is_subset(&other.observed)
    }

    /// Whether any value of dimension `d` is observed.
    pub fn observes_dimension(&self, vocab: &ContextVocabulary, d: usize) -> bool {
        self.observed.iter().any(|&p| vocab.dimension_of(p) == d)
    }

    pub fn validate(&self, vocab: &ContextVocabulary) -> Result<(), KnowledgeError> {
        let mut counts = vec![0usize; vocab.dimensions().len()];
        for &p in &self.observed {
            if p.0 >= vocab.len() {
                return Err(KnowledgeError::UnknownPredicate(format!("#{}", p.0)));
            }
            counts[vocab.dimension_of(p)] += 1;
        }
        for (d, &n) in counts.iter().enumerate() {
            let dim = &vocab.dimensions()[d];
            if dim.exclusive && n > 1 {
                return Err(KnowledgeError::ExclusivityViolated {
                    dimension: dim.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn describe(&self, vocab: &ContextVocabulary) -> Vec<ContextPredicate> {
        self.observed.iter().map(|&p| vocab.predicate(p)).collect()
    }
}

/// Open-world literal evaluation.
pub fn literal_satisfied(vocab: &ContextVocabulary, state: &ContextState, literal: PredicateId) -> bool {
    if state.contains(literal) {
        return true;
    }
    let d = vocab.dimension_of(literal);
    if !state.observes_dimension(vocab, d) {
        return true;
    }
    !vocab.dimensions()[d].exclusive
}

/// A positive AND/OR expression over context literals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Requirement {
    Literal(PredicateId),
    And(Vec<Requirement>),
    Or(Vec<Requirement>),
}

impl Requirement {
    pub fn evaluate(&self, vocab: &ContextVocabulary, state: &ContextState) -> bool {
        match self {
            Requirement::Literal(p) => literal_satisfied(vocab, state, *p),
            Requirement::And(terms) => terms.iter().all(|t| t.evaluate(vocab, state)),
            Requirement::Or(terms) => terms.iter().any(|t| t.evaluate(vocab, state)),
        }
    }

    pub fn literals(&self) -> Vec<PredicateId> {
        let mut out = Vec::new();
        self.collect_literals(&mut out);
        out
    }

    fn collect_literals(&self, out: &mut Vec<PredicateId>) {
        match self {
            Requirement::Literal(p) => out.push(*p),
            Requirement::And(ts) | Requirement::Or(ts) => ts.iter().for_each(|t| t.collect_literals(out)),
        }
    }

    pub fn display(&self, vocab: &ContextVocabulary) -> String {
        match self {
            Requirement::Literal(p) => vocab.predicate(*p).to_string(),
            Requirement::And(ts) => ts
                .iter()
                .map(|t| match t {
                    Requirement::Or(_) => format!("({})", t.display(vocab)),
                    _ => t.display(vocab),
                })
                .collect::<Vec<_>>()
                .join(" AND "),
            Requirement::Or(ts) => ts.iter().map(|t| t.display(vocab)).collect::<Vec<_>>().join(" OR "),
        }
    }
}

/// A subset of the activity vocabulary, stored as a membership mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivitySet {
    members: Vec<bool>,
}

impl ActivitySet {
    pub fn empty(k: usize) -> Self {
        ActivitySet {
            members: vec![false; k],
        }
    }

    pub fn full(k: usize) -> Self {
        ActivitySet {
            members: vec![true; k],
        }
    }

    pub fn from_mask(members: Vec<bool>) -> Self {
        ActivitySet { members }
    }

    pub fn from_indices(k: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::empty(k);
        for i in indices {
            set.members[i] = true;
        }
        set
    }

    /// Size of the underlying vocabulary.
    pub fn universe(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.get(i).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, i: usize) {
        self.members[i] = true;
    }

    pub fn remove(&mut self, i: usize) {
        self.members[i] = false;
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn is_subset(&self, other: &ActivitySet) -> bool {
        self.members
            .iter()
            .zip(&other.members)
            .all(|(&a, &b)| !a || b)
    }

    /// Binary indicator vector (the symbolic-feature encoding).
    pub fn indicator(&self) -> Vec<f64> {
        self.members.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn mask(&self) -> &[bool] {
        &self.members
    }
}

/// Anything that can answer "which activities are consistent with this
/// context". Implemented by [`KnowledgeModel`]; wrappers can add
/// instrumentation.
pub trait SymbolicReasoner: Sync {
    fn activities(&self) -> &ActivityVocabulary;
    fn contexts(&self) -> &ContextVocabulary;
    fn consistent_activities(&self, state: &ContextState) -> ActivitySet;

    fn consistency_vector(&self, state: &ContextState) -> Vec<f64> {
        self.consistent_activities(state).indicator()
    }
}

/// Activities, contexts and per-activity necessary conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeModel {
    activities: ActivityVocabulary,
    contexts: ContextVocabulary,
    rules: Vec<Vec<Requirement>>,
}

impl KnowledgeModel {
    pub fn new(
        activities: ActivityVocabulary,
        contexts: ContextVocabulary,
        rules: Vec<(usize, Requirement)>,
    ) -> Result<Self, KnowledgeError> {
        let mut per_activity = vec![Vec::new(); activities.len()];
        for (a, req) in rules {
            if a >= activities.len() {
                return Err(KnowledgeError::UnknownActivity(format!("#{a}")));
            }
            if let Some(bad) = req.literals().into_iter().find(|p| p.0 >= contexts.len()) {
                return Err(KnowledgeError::UnknownPredicate(format!("#{}", bad.0)));
            }
            per_activity[a].push(req);
        }
        Ok(KnowledgeModel {
            activities,
            contexts,
            rules: per_activity,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KnowledgeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KnowledgeError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        parser::parse(text)
    }

    pub fn requirements(&self, activity: usize) -> &[Requirement] {
        &self.rules[activity]
    }

    pub fn rule_count(&self) -> usize {
        self.rules.iter().map(Vec::len).sum()
    }

    pub fn consistency_vector(&self, state: &ContextState) -> Vec<f64> {
        SymbolicReasoner::consistency_vector(self, state)
    }

    pub fn consistent_activities(&self, state: &ContextState) -> ActivitySet {
        SymbolicReasoner::consistent_activities(self, state)
    }

    /// Errors unless `other` declares the same activities and contexts.
    pub fn check_vocabularies(
        &self,
        activities: &ActivityVocabulary,
        contexts: &ContextVocabulary,
    ) -> Result<(), KnowledgeError> {
        if &self.activities != activities {
            return Err(KnowledgeError::VocabularyMismatch(
                "activity vocabularies differ".into(),
            ));
        }
        if &self.contexts != contexts {
            return Err(KnowledgeError::VocabularyMismatch(
                "context vocabularies differ".into(),
            ));
        }
        Ok(())
    }
}

impl SymbolicReasoner for KnowledgeModel {
    fn activities(&self) -> &ActivityVocabulary {
        &self.activities
    }

    fn contexts(&self) -> &ContextVocabulary {
        &self.contexts
    }

    fn consistent_activities(&self, state: &ContextState) -> ActivitySet {
        let mask = self
            .rules
            .iter()
            .map(|reqs| reqs.iter().all(|r| r.evaluate(&self.contexts, state)))
            .collect();
        ActivitySet::from_mask(mask)
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

mod parser {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Tok {
        Ident(String),
        Eq,
        Colon,
        Comma,
        LParen,
        RParen,
        And,
        Or,
    }

    #[derive(Debug, Clone)]
    struct Spanned {
        tok: Tok,
        col: usize,
    }

    fn lex(line_no: usize, line: &str) -> Result<Vec<Spanned>, KnowledgeError> {
        let mut out = Vec::new();
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            match c {
                '#' => break,
                c if c.is_whitespace() => i += 1,
                '=' => {
                    out.push(Spanned { tok: Tok::Eq, col });
                    i += 1;
                }
                ':' => {
                    out.push(Spanned { tok: Tok::Colon, col });
                    i += 1;
                }
                ',' => {
                    out.push(Spanned { tok: Tok::Comma, col });
                    i += 1;
                }
                '(' => {
                    out.push(Spanned { tok: Tok::LParen, col });
                    i += 1;
                }
                ')' => {
                    out.push(Spanned { tok: Tok::RParen, col });
                    i += 1;
                }
                c if is_ident_char(c) => {
                    let start = i;
                    while i < chars.len() && is_ident_char(chars[i]) {
                        i += 1;
                    }
                    let word: String = chars[start..i].iter().collect();
                    let tok = match word.as_str() {
                        "AND" => Tok::And,
                        "OR" => Tok::Or,
                        _ => Tok::Ident(word),
                    };
                    out.push(Spanned { tok, col });
                }
                other => {
                    return Err(KnowledgeError::Parse {
                        line: line_no,
                        column: col,
                        message: format!("unexpected character `{other}`"),
                    })
                }
            }
        }
        Ok(out)
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Section {
        None,
        Activities,
        Contexts,
        Rules,
    }

    struct RawRule {
        line: usize,
        activity: (String, usize),
        tokens: Vec<Spanned>,
    }

    pub(super) fn parse(text: &str) -> Result<KnowledgeModel, KnowledgeError> {
        let mut section = Section::None;
        let mut activity_names: Vec<String> = Vec::new();
        let mut activity_lines: HashMap<String, usize> = HashMap::new();
        let mut dimensions: Vec<Dimension> = Vec::new();
        let mut raw_rules: Vec<RawRule> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            if trimmed.starts_with('[') {
                section = match trimmed {
                    "[activities]" => Section::Activities,
                    "[contexts]" => Section::Contexts,
                    "[rules]" => Section::Rules,
                    other => {
                        return Err(KnowledgeError::Parse {
                            line: line_no,
                            column: raw.find('[').unwrap_or(0) + 1,
                            message: format!("unknown section `{other}`"),
                        })
                    }
                };
                continue;
            }
            let tokens = lex(line_no, raw)?;
            match section {
                Section::None => {
                    return Err(KnowledgeError::Parse {
                        line: line_no,
                        column: tokens.first().map_or(1, |t| t.col),
                        message: "content before the first section header".into(),
                    })
                }
                Section::Activities => {
                    for t in tokens {
                        match t.tok {
                            Tok::Ident(name) => {
                                if activity_lines.insert(name.clone(), line_no).is_some() {
                                    return Err(KnowledgeError::DuplicateActivity { line: line_no, name });
                                }
                                activity_names.push(name);
                            }
                            Tok::Comma => {}
                            _ => {
                                return Err(KnowledgeError::Parse {
                                    line: line_no,
                                    column: t.col,
                                    message: "expected an activity name".into(),
                                })
                            }
                        }
                    }
                }
                Section::Contexts => {
                    let dim = parse_dimension(line_no, &tokens)?;
                    if dimensions.iter().any(|d| d.name == dim.name) {
                        return Err(KnowledgeError::DuplicateDimension {
                            line: line_no,
                            name: dim.name,
                        });
                    }
                    dimensions.push(dim);
                }
                Section::Rules => {
                    let (name, col) = match tokens.first() {
                        Some(Spanned { tok: Tok::Ident(n), col }) => (n.clone(), *col),
                        Some(t) => {
                            return Err(KnowledgeError::Parse {
                                line: line_no,
                                column: t.col,
                                message: "expected an activity name".into(),
                            })
                        }
                        None => unreachable!("blank lines are skipped"),
                    };
                    match tokens.get(1) {
                        Some(Spanned { tok: Tok::Colon, .. }) => {}
                        other => {
                            return Err(KnowledgeError::Parse {
                                line: line_no,
                                column: other.map_or(raw.len() + 1, |t| t.col),
                                message: "expected `:` after the activity name".into(),
                            })
                        }
                    }
                    raw_rules.push(RawRule {
                        line: line_no,
                        activity: (name, col),
                        tokens: tokens[2..].to_vec(),
                    });
                }
            }
        }

        let activities = ActivityVocabulary::new(activity_names)?;
        let contexts = ContextVocabulary::new(dimensions)?;
        let mut rules = Vec::new();
        for rule in raw_rules {
            let (name, col) = &rule.activity;
            let a = activities.id(name).ok_or_else(|| KnowledgeError::UnknownSymbol {
                line: rule.line,
                column: *col,
                symbol: name.clone(),
            })?;
            let mut p = ExprParser {
                line: rule.line,
                tokens: &rule.tokens,
                pos: 0,
                contexts: &contexts,
            };
            let req = p.expr()?;
            if let Some(t) = p.tokens.get(p.pos) {
                return Err(KnowledgeError::Parse {
                    line: rule.line,
                    column: t.col,
                    message: "unexpected token after expression".into(),
                });
            }
            rules.push((a, req));
        }
        KnowledgeModel::new(activities, contexts, rules)
    }

    fn parse_dimension(line: usize, tokens: &[Spanned]) -> Result<Dimension, KnowledgeError> {
        let err = |col: usize, message: &str| KnowledgeError::Parse {
            line,
            column: col,
            message: message.to_string(),
        };
        let name = match tokens.first() {
            Some(Spanned { tok: Tok::Ident(n), .. }) => n.clone(),
            Some(t) => return Err(err(t.col, "expected a dimension name")),
            None => return Err(err(1, "expected a dimension name")),
        };
        let exclusive = match tokens.get(1) {
            Some(Spanned { tok: Tok::Ident(k), .. }) if k == "exclusive" => true,
            Some(Spanned { tok: Tok::Ident(k), .. }) if k == "multi" => false,
            Some(t) => return Err(err(t.col, "expected `exclusive` or `multi`")),
            None => return Err(err(tokens[0].col, "expected `exclusive` or `multi`")),
        };
        match tokens.get(2) {
            Some(Spanned { tok: Tok::Colon, .. }) => {}
            Some(t) => return Err(err(t.col, "expected `:`")),
            None => return Err(err(tokens[1].col, "expected `:`")),
        }
        let mut values = Vec::new();
        let mut expect_value = true;
        for t in &tokens[3..] {
            match (&t.tok, expect_value) {
                (Tok::Ident(v), true) => {
                    if values.contains(v) {
                        return Err(err(t.col, &format!("duplicate value `{v}`")));
                    }
                    values.push(v.clone());
                    expect_value = false;
                }
                (Tok::Comma, false) => expect_value = true,
                _ => return Err(err(t.col, "expected a comma-separated value list")),
            }
        }
        if values.is_empty() || expect_value {
            let col = tokens.last().map_or(1, |t| t.col);
            return Err(err(col, "dimension needs at least one value"));
        }
        Ok(Dimension {
            name,
            exclusive,
            values,
        })
    }

    struct ExprParser<'a> {
        line: usize,
        tokens: &'a [Spanned],
        pos: usize,
        contexts: &'a ContextVocabulary,
    }

    impl ExprParser<'_> {
        fn peek(&self) -> Option<&Tok> {
            self.tokens.get(self.pos).map(|t| &t.tok)
        }

        fn col(&self) -> usize {
            self.tokens
                .get(self.pos)
                .or(self.tokens.last())
                .map_or(1, |t| t.col)
        }

        fn fail(&self, message: &str) -> KnowledgeError {
            KnowledgeError::Parse {
                line: self.line,
                column: self.col(),
                message: message.into(),
            }
        }

        fn expr(&mut self) -> Result<Requirement, KnowledgeError> {
            let mut terms = vec![self.term()?];
            while self.peek() == Some(&Tok::Or) {
                self.pos += 1;
                terms.push(self.term()?);
            }
            Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Requirement::Or(terms) })
        }

        fn term(&mut self) -> Result<Requirement, KnowledgeError> {
            let mut factors = vec![self.factor()?];
            while self.peek() == Some(&Tok::And) {
                self.pos += 1;
                factors.push(self.factor()?);
            }
            Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Requirement::And(factors) })
        }

        fn factor(&mut self) -> Result<Requirement, KnowledgeError> {
            match self.peek().cloned() {
                Some(Tok::LParen) => {
                    self.pos += 1;
                    let inner = self.expr()?;
                    if self.peek() != Some(&Tok::RParen) {
                        return Err(self.fail("expected `)`"));
                    }
                    self.pos += 1;
                    Ok(inner)
                }
                Some(Tok::Ident(dim)) => {
                    let col = self.col();
                    self.pos += 1;
                    if self.peek() != Some(&Tok::Eq) {
                        return Err(self.fail("expected `=` in literal"));
                    }
                    self.pos += 1;
                    let value = match self.peek().cloned() {
                        Some(Tok::Ident(v)) => v,
                        _ => return Err(self.fail("expected a value after `=`")),
                    };
                    self.pos += 1;
                    let id = self.contexts.lookup(&dim, &value).ok_or_else(|| {
                        KnowledgeError::UnknownSymbol {
                            line: self.line,
                            column: col,
                            symbol: format!("{dim}={value}"),
                        }
                    })?;
                    Ok(Requirement::Literal(id))
                }
                Some(_) => Err(self.fail("expected a literal or `(`")),
                None => Err(self.fail("unexpected end of expression")),
            }
        }
    }
}
