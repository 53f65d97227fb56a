use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::data::Modality;
use crate::error::{Error, Result};

pub const LEVELS: usize = 4;

/// One code and its description chain, broadest first.
#[derive(Clone, Debug, PartialEq)]
pub struct OntologyEntry {
    pub code_id: String,
    pub modality: Modality,
    pub descriptions: [String; LEVELS],
}

/// Four-level code hierarchy.
///
/// Two codes that share a level-k description share every description above
/// it as well, so the descriptions form a forest keyed by text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ontology {
    codes: IndexMap<String, OntologyEntry>,
}

impl Ontology {
    pub fn from_entries(entries: impl IntoIterator<Item = OntologyEntry>) -> Result<Self> {
        Self::build(entries, "<memory>")
    }

    fn build(entries: impl IntoIterator<Item = OntologyEntry>, origin: &str) -> Result<Self> {
        let mut codes = IndexMap::new();
        // (level, description) -> ancestor chain as first seen, plus the code that introduced it
        let mut seen: HashMap<(usize, String), (Vec<String>, String)> = HashMap::new();
        for entry in entries {
            if entry.descriptions.iter().any(|d| d.trim().is_empty()) {
                return Err(Error::format(
                    origin,
                    format!("code {} has an empty description", entry.code_id),
                ));
            }
            for level in 0..LEVELS {
                let key = (level, entry.descriptions[level].clone());
                let chain = entry.descriptions[..level].to_vec();
                match seen.get(&key) {
                    Some((prior, first_code)) if *prior != chain => {
                        return Err(Error::format(
                            origin,
                            format!(
                                "code {} breaks the hierarchy: level-{} description {:?} already \
                                 appears under a different parent chain (first used by {first_code})",
                                entry.code_id,
                                level + 1,
                                entry.descriptions[level]
                            ),
                        ));
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(key, (chain, entry.code_id.clone()));
                    }
                }
            }
            if codes.contains_key(&entry.code_id) {
                return Err(Error::format(origin, format!("duplicate code {}", entry.code_id)));
            }
            codes.insert(entry.code_id.clone(), entry);
        }
        Ok(Self { codes })
    }

    /// Parses `code_id, modality, d1|d2|d3|d4` lines. Blank lines and lines
    /// starting with `#` are ignored. Descriptions may contain commas.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", i + 1));
            let mut fields = line.splitn(3, ',');
            let (Some(code), Some(modality), Some(chain)) =
                (fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected `code_id, modality, d1|d2|d3|d4`".into()));
            };
            let modality = Modality::parse(modality)
                .ok_or_else(|| bad(format!("unknown modality {:?}", modality.trim())))?;
            let levels: Vec<String> = chain.split('|').map(|d| d.trim().to_string()).collect();
            let descriptions: [String; LEVELS] = levels.try_into().map_err(|l: Vec<String>| {
                bad(format!(
                    "code {} has {} levels, expected {LEVELS}",
                    code.trim(),
                    l.len()
                ))
            })?;
            entries.push(OntologyEntry {
                code_id: code.trim().to_string(),
                modality,
                descriptions,
            });
        }
        Self::build(entries, origin)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in self.codes.values() {
            out.push_str(&format!(
                "{}, {}, {}\n",
                e.code_id,
                e.modality,
                e.descriptions.join("|")
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, code: &str) -> Option<&OntologyEntry> {
        self.codes.get(code)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &OntologyEntry> {
        self.codes.values()
    }

    /// Every distinct description, in first-appearance order.
    pub fn descriptions(&self) -> Vec<&str> {
        let mut seen = indexmap::IndexSet::new();
        for e in self.codes.values() {
            for d in &e.descriptions {
                seen.insert(d.as_str());
            }
        }
        seen.into_iter().collect()
    }
}
