//! Shared part grammar.
//!
//! Objects are composed of semantic compositional parts (SCPs). Each SCP has a
//! single semantic meaning (head, leg, ...) and may be shared by several
//! objects. The full part label of a pixel is the pair (object, meaning), which
//! is recovered from an (object, SCP) pair whenever that pair is a connection
//! of the grammar.
//!
//! Index 0 is reserved for background in both the object and the SCP label
//! spaces, and the only connection touching background is
//! (background, background).
//!
//! # Document format
//!
//! ```toml
//! objects = ["horse", "cow"]
//! meanings = ["head", "body", "leg", "tail"]
//! connections = [["horse", "head(h)"], ["cow", "head(c)"], ...]
//! scps = [{ name = "head(h)", meaning = "head" }, ...]
//! ```
//!
//! Background is implicit and must not be listed. Unknown keys are rejected.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BACKGROUND: &str = "background";

/// Bundled horse/cow grammar document.
pub const HORSE_COW_TOML: &str = include_str!("../grammars/horse_cow.toml");
/// Bundled five-animal grammar document.
pub const QUADRUPEDS_TOML: &str = include_str!("../grammars/quadrupeds.toml");

/// An (object, SCP) label pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JointLabel {
    pub object: usize,
    pub scp: usize,
}

impl JointLabel {
    pub const BACKGROUND: JointLabel = JointLabel { object: 0, scp: 0 };

    pub fn new(object: usize, scp: usize) -> Self {
        Self { object, scp }
    }
}

impl fmt::Display for JointLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.object, self.scp)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarDoc {
    objects: Vec<String>,
    meanings: Vec<String>,
    scps: Vec<ScpDoc>,
    connections: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScpDoc {
    name: String,
    meaning: String,
}

/// Immutable, validated label grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrammar {
    object_labels: Vec<String>,
    scp_labels: Vec<String>,
    semantic_meanings: Vec<String>,
    // None only for the background SCP.
    meaning_of: Vec<Option<usize>>,
    connections: BTreeSet<JointLabel>,
}

impl LabelGrammar {
    /// Builds a grammar from names. `objects` and `scps` exclude background,
    /// which is added at index 0 of both label spaces.
    pub fn new(
        objects: &[impl AsRef<str>],
        meanings: &[impl AsRef<str>],
        scps: &[(impl AsRef<str>, impl AsRef<str>)],
        connections: &[(impl AsRef<str>, impl AsRef<str>)],
    ) -> Result<Self> {
        let object_labels: Vec<String> = std::iter::once(BACKGROUND.to_string())
            .chain(objects.iter().map(|s| s.as_ref().to_string()))
            .collect();
        let scp_labels: Vec<String> = std::iter::once(BACKGROUND.to_string())
            .chain(scps.iter().map(|(n, _)| n.as_ref().to_string()))
            .collect();
        let semantic_meanings: Vec<String> =
            meanings.iter().map(|s| s.as_ref().to_string()).collect();

        check_unique("object", &object_labels)?;
        check_unique("scp", &scp_labels)?;
        check_unique("meaning", &semantic_meanings)?;
        if semantic_meanings.iter().any(|m| m == BACKGROUND) {
            return Err(Error::Grammar(format!(
                "meaning {BACKGROUND:?} is reserved"
            )));
        }

        let meaning_index: HashMap<&str, usize> = semantic_meanings
            .iter()
            .enumerate()
            .map(|(i, m)| (m.as_str(), i))
            .collect();
        let mut meaning_of = vec![None];
        for (name, meaning) in scps {
            let m = meaning_index.get(meaning.as_ref()).ok_or_else(|| {
                Error::Grammar(format!(
                    "scp {:?} references unknown meaning {:?}",
                    name.as_ref(),
                    meaning.as_ref()
                ))
            })?;
            meaning_of.push(Some(*m));
        }

        let object_index = index_of(&object_labels);
        let scp_index = index_of(&scp_labels);
        let mut set = BTreeSet::new();
        set.insert(JointLabel::BACKGROUND);
        for (o, s) in connections {
            let (o, s) = (o.as_ref(), s.as_ref());
            if o == BACKGROUND || s == BACKGROUND {
                return Err(Error::Grammar(format!(
                    "connection ({o:?}, {s:?}): background connections are implicit"
                )));
            }
            let oi = *object_index.get(o).ok_or_else(|| {
                Error::Grammar(format!(
                    "connection ({o:?}, {s:?}) references unknown object {o:?}"
                ))
            })?;
            let si = *scp_index.get(s).ok_or_else(|| {
                Error::Grammar(format!(
                    "connection ({o:?}, {s:?}) references unknown scp {s:?}"
                ))
            })?;
            if !set.insert(JointLabel::new(oi, si)) {
                return Err(Error::Grammar(format!(
                    "duplicate connection ({o:?}, {s:?})"
                )));
            }
        }

        let grammar = Self {
            object_labels,
            scp_labels,
            semantic_meanings,
            meaning_of,
            connections: set,
        };
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: GrammarDoc = toml::from_str(text)?;
        let scps: Vec<(&str, &str)> = doc
            .scps
            .iter()
            .map(|s| (s.name.as_str(), s.meaning.as_str()))
            .collect();
        Self::new(&doc.objects, &doc.meanings, &scps, &doc.connections)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Two objects, five SCPs, eight connections.
    pub fn horse_cow() -> Self {
        Self::from_toml_str(HORSE_COW_TOML).expect("bundled grammar is valid")
    }

    /// Five quadrupeds over ten SCPs.
    pub fn quadrupeds() -> Self {
        Self::from_toml_str(QUADRUPEDS_TOML).expect("bundled grammar is valid")
    }

    fn validate(&self) -> Result<()> {
        for s in 1..self.scp_labels.len() {
            if !self.connections.iter().any(|c| c.scp == s) {
                return Err(Error::Grammar(format!(
                    "scp {:?} is not connected to any object",
                    self.scp_labels[s]
                )));
            }
        }
        for o in 1..self.object_labels.len() {
            let mut seen: HashMap<usize, usize> = HashMap::new();
            let mut any = false;
            for c in self.connections.iter().filter(|c| c.object == o) {
                any = true;
                let m = self.meaning_of[c.scp].expect("non-background scp has a meaning");
                if let Some(prev) = seen.insert(m, c.scp) {
                    return Err(Error::Grammar(format!(
                        "object {:?} connects to two {:?} scps: {:?} and {:?}",
                        self.object_labels[o],
                        self.semantic_meanings[m],
                        self.scp_labels[prev],
                        self.scp_labels[c.scp]
                    )));
                }
            }
            if !any {
                return Err(Error::Grammar(format!(
                    "object {:?} has no connections",
                    self.object_labels[o]
                )));
            }
        }
        Ok(())
    }

    /// Object label count including background (N_o + 1).
    pub fn num_objects(&self) -> usize {
        self.object_labels.len()
    }

    /// SCP label count including background (N_p + 1).
    pub fn num_scps(&self) -> usize {
        self.scp_labels.len()
    }

    pub fn num_meanings(&self) -> usize {
        self.semantic_meanings.len()
    }

    /// Size of the full part label space: background plus every
    /// (object, meaning) combination.
    pub fn num_parts(&self) -> usize {
        1 + (self.num_objects() - 1) * self.num_meanings()
    }

    pub fn object_labels(&self) -> &[String] {
        &self.object_labels
    }

    pub fn scp_labels(&self) -> &[String] {
        &self.scp_labels
    }

    pub fn semantic_meanings(&self) -> &[String] {
        &self.semantic_meanings
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_labels.iter().position(|n| n == name)
    }

    pub fn scp_index(&self, name: &str) -> Option<usize> {
        self.scp_labels.iter().position(|n| n == name)
    }

    pub fn meaning_index(&self, name: &str) -> Option<usize> {
        self.semantic_meanings.iter().position(|n| n == name)
    }

    /// Meaning of an SCP; `None` for background.
    pub fn meaning_of(&self, scp: usize) -> Result<Option<usize>> {
        self.check_scp(scp)?;
        Ok(self.meaning_of[scp])
    }

    /// All connections, background pair included, in (object, scp) order.
    pub fn connections(&self) -> impl Iterator<Item = JointLabel> + '_ {
        self.connections.iter().copied()
    }

    /// SCPs connected to `object`, ascending.
    pub fn scps_of(&self, object: usize) -> Result<Vec<usize>> {
        self.check_object(object)?;
        Ok(self
            .connections
            .iter()
            .filter(|c| c.object == object)
            .map(|c| c.scp)
            .collect())
    }

    /// The η constraint: true iff (object, scp) is a connection.
    pub fn is_consistent(&self, object: usize, scp: usize) -> Result<bool> {
        self.check_object(object)?;
        self.check_scp(scp)?;
        Ok(self.connections.contains(&JointLabel::new(object, scp)))
    }

    /// Index into the full part label space for a consistent pair.
    pub fn part_index(&self, object: usize, scp: usize) -> Result<usize> {
        if !self.is_consistent(object, scp)? {
            return Err(Error::Inconsistent { object, scp });
        }
        Ok(match self.meaning_of[scp] {
            None => 0,
            Some(m) => 1 + (object - 1) * self.num_meanings() + m,
        })
    }

    /// Name of an entry of the full part label space, e.g. `"horse-leg"`.
    pub fn part_name(&self, part: usize) -> Result<String> {
        if part >= self.num_parts() {
            return Err(Error::IndexOutOfRange {
                what: "part",
                index: part,
                len: self.num_parts(),
            });
        }
        if part == 0 {
            return Ok(BACKGROUND.to_string());
        }
        let object = 1 + (part - 1) / self.num_meanings();
        let meaning = (part - 1) % self.num_meanings();
        Ok(format!(
            "{}-{}",
            self.object_labels[object], self.semantic_meanings[meaning]
        ))
    }

    /// Recovers the full part label name from a consistent (object, scp).
    pub fn recover_part_label(&self, object: usize, scp: usize) -> Result<String> {
        let part = self.part_index(object, scp)?;
        self.part_name(part)
    }

    fn check_object(&self, object: usize) -> Result<()> {
        if object >= self.object_labels.len() {
            return Err(Error::IndexOutOfRange {
                what: "object",
                index: object,
                len: self.object_labels.len(),
            });
        }
        Ok(())
    }

    fn check_scp(&self, scp: usize) -> Result<()> {
        if scp >= self.scp_labels.len() {
            return Err(Error::IndexOutOfRange {
                what: "scp",
                index: scp,
                len: self.scp_labels.len(),
            });
        }
        Ok(())
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Grammar(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

fn index_of(names: &[String]) -> HashMap<&str, usize> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect()
}
