//! Visit records, code inventory and JSONL ingestion.
//!
//! One record per line:
//!
//! ```text
//! {"record_id":"v1","sections":{"diagnosis":"Otitis externa"},"codes":["3135009"],"split":"train"}
//! ```
//!
//! `sections` keys are drawn from the six [`Section`] names; an absent key
//! means the section is empty. `split` is optional.

mod clean;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use clean::clean_text;
pub use synthetic::{generate_synthetic, synthetic_codebook, SyntheticCode, SyntheticConfig};

use crate::error::{Error, Result};

/// Medical-summary sections a record may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Diagnosis,
    Assessment,
    PresentingComplaint,
    History,
    PhysicalExam,
    ProceduresTreatments,
}

impl Section {
    pub const ALL: [Section; 6] = [
        Section::Diagnosis,
        Section::Assessment,
        Section::PresentingComplaint,
        Section::History,
        Section::PhysicalExam,
        Section::ProceduresTreatments,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Diagnosis => "diagnosis",
            Section::Assessment => "assessment",
            Section::PresentingComplaint => "presenting_complaint",
            Section::History => "history",
            Section::PhysicalExam => "physical_exam",
            Section::ProceduresTreatments => "procedures_treatments",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Section {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Section::ALL
            .into_iter()
            .find(|section| section.as_str() == s)
            .ok_or_else(|| Error::UnknownSection(s.to_string()))
    }
}

/// Parses a list of section names, e.g. `["diagnosis", "assessment"]`.
pub fn parse_fields<S: AsRef<str>>(names: &[S]) -> Result<Vec<Section>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
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

/// One patient visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalRecord {
    pub record_id: String,
    #[serde(default)]
    pub sections: BTreeMap<Section, String>,
    #[serde(default)]
    pub codes: BTreeSet<String>,
    #[serde(rename = "split", default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<Split>,
}

impl ClinicalRecord {
    pub fn new(record_id: impl Into<String>) -> Self {
        ClinicalRecord {
            record_id: record_id.into(),
            sections: BTreeMap::new(),
            codes: BTreeSet::new(),
            split_tag: None,
        }
    }

    pub fn with_section(mut self, section: Section, text: impl Into<String>) -> Self {
        self.sections.insert(section, text.into());
        self
    }

    pub fn with_codes<I, S>(mut self, codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.codes.extend(codes.into_iter().map(Into::into));
        self
    }

    pub fn section(&self, section: Section) -> &str {
        self.sections.get(&section).map(String::as_str).unwrap_or("")
    }

    fn validate(&self) -> Result<()> {
        if self.record_id.is_empty() {
            return Err(Error::InvalidRecord {
                record_id: String::new(),
                message: "empty record_id".into(),
            });
        }
        if let Some(bad) = self.codes.iter().find(|c| !is_code_identifier(c)) {
            return Err(Error::InvalidRecord {
                record_id: self.record_id.clone(),
                message: format!("code `{bad}` is not a digit string"),
            });
        }
        Ok(())
    }
}

pub fn is_code_identifier(code: &str) -> bool {
    !code.is_empty() && code.bytes().all(|b| b.is_ascii_digit())
}

/// Concatenates the named sections in order and cleans the result.
///
/// Empty or missing sections contribute nothing.
pub fn build_input(record: &ClinicalRecord, fields: &[Section]) -> Result<String> {
    if fields.is_empty() {
        return Err(Error::Config("input field list is empty".into()));
    }
    let joined = fields
        .iter()
        .map(|&f| record.section(f))
        .filter(|text| !text.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(clean_text(&joined))
}

/// Dense, lexicographically ordered code index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Inventory {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Inventory {
    pub fn from_codes<I, S>(codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = codes.into_iter().map(Into::into).collect();
        let codes: Vec<String> = sorted.into_iter().collect();
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Inventory { codes, index }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    /// Maps a code set to inventory indices, failing on codes outside it.
    pub fn indices<'a, I>(&self, codes: I) -> Result<BTreeSet<usize>>
    where
        I: IntoIterator<Item = &'a String>,
    {
        codes
            .into_iter()
            .map(|c| self.index_of(c).ok_or_else(|| Error::UnknownCode(c.clone())))
            .collect()
    }
}

impl Serialize for Inventory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.codes.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Inventory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let codes = Vec::<String>::deserialize(d)?;
        let inventory = Inventory::from_codes(codes.iter().cloned());
        if inventory.codes != codes {
            return Err(serde::de::Error::custom(
                "inventory must be sorted and free of duplicates",
            ));
        }
        Ok(inventory)
    }
}

/// An ordered record collection with its code inventory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<ClinicalRecord>,
    inventory: Inventory,
}

impl Corpus {
    pub fn new(records: Vec<ClinicalRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for record in &records {
            record.validate()?;
            if !seen.insert(record.record_id.as_str()) {
                return Err(Error::DuplicateRecord(record.record_id.clone()));
            }
        }
        let inventory = Inventory::from_codes(records.iter().flat_map(|r| r.codes.iter().cloned()));
        Ok(Corpus { records, inventory })
    }

    pub fn records(&self) -> &[ClinicalRecord] {
        &self.records
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Option<&ClinicalRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Occurrence count of every inventory code across all records.
    pub fn code_frequencies(&self) -> Vec<usize> {
        let mut counts = vec![0; self.inventory.len()];
        for record in &self.records {
            for code in &record.codes {
                counts[self.inventory.index_of(code).expect("inventory covers records")] += 1;
            }
        }
        counts
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ClinicalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            record.validate().map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Corpus::new(records)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for record in &self.records {
            let line = serde_json::to_string(record).expect("records serialize");
            writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.write_jsonl(&mut writer)?;
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads a newline-delimited JSON corpus.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::read_jsonl(BufReader::new(file))
}
