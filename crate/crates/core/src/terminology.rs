//! Concept graph over the diagnosis terminology.
//!
//! Concepts are connected by `is-a` edges (child -> parent) forming a DAG under
//! a single root ("Clinical finding"). Depths are minimum path lengths to the
//! root and are computed once at construction.
//!
//! On-disk layout is four tab-separated UTF-8 files, each with one header line:
//!
//! | file            | columns                       |
//! |-----------------|-------------------------------|
//! | concepts        | `code  term  active`          |
//! | relationships   | `child  parent`               |
//! | inactive map    | `inactive  replacement`       |
//! | categories      | `code  category`              |
//!
//! `active` is one of `1`, `0`, `true`, `false`. Category names are the
//! [`Category`] display names (case-insensitive).

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCode;
use crate::error::{Error, Result};

/// Identifier of the SNOMED-CT "Clinical finding" concept.
pub const CLINICAL_FINDING: &str = "404684003";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub term: String,
    pub active: bool,
}

/// Exclusive disease categories, in priority order (highest first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Neoplasm,
    Inflammatory,
    Injury,
    Degenerative,
    Cardiovascular,
    Metabolic,
    Congenital,
    Poisoning,
    Nutritional,
    Other,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Neoplasm,
        Category::Inflammatory,
        Category::Injury,
        Category::Degenerative,
        Category::Cardiovascular,
        Category::Metabolic,
        Category::Congenital,
        Category::Poisoning,
        Category::Nutritional,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Neoplasm => "Neoplasm and/or hamartoma",
            Category::Inflammatory => "Inflammatory disorder",
            Category::Injury => "Traumatic or non-traumatic injury",
            Category::Degenerative => "Degenerative disorder",
            Category::Cardiovascular => "Disorder of cardiovascular system",
            Category::Metabolic => "Metabolic disease",
            Category::Congenital => "Congenital disease",
            Category::Poisoning => "Poisoning",
            Category::Nutritional => "Nutritional disorder",
            Category::Other => "Other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Terminology(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct ConceptGraph {
    concepts: BTreeMap<String, Concept>,
    parents: BTreeMap<String, Vec<String>>,
    root: String,
    inactive_map: BTreeMap<String, String>,
    category_map: BTreeMap<String, Category>,
    depths: HashMap<String, Option<usize>>,
}

impl ConceptGraph {
    /// Validates and indexes a graph.
    ///
    /// Rejects dangling edge endpoints, a root with parents, cycles, and
    /// inactive-map entries whose key is unknown or active or whose target is
    /// unknown. Mapping chains are allowed; cycles among them surface in
    /// [`ConceptGraph::migrate`].
    pub fn new(
        concepts: BTreeMap<String, Concept>,
        edges: impl IntoIterator<Item = (String, String)>,
        root: impl Into<String>,
        inactive_map: BTreeMap<String, String>,
        category_map: BTreeMap<String, Category>,
    ) -> Result<Self> {
        let root = root.into();
        if !concepts.contains_key(&root) {
            return Err(Error::Terminology(format!("root `{root}` is not a concept")));
        }
        let mut parents: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (child, parent) in edges {
            for end in [&child, &parent] {
                if !concepts.contains_key(end) {
                    return Err(Error::Terminology(format!(
                        "edge {child} -> {parent} references unknown concept `{end}`"
                    )));
                }
            }
            if child == root {
                return Err(Error::Terminology(format!("root `{root}` has a parent")));
            }
            let list = parents.entry(child).or_default();
            if !list.contains(&parent) {
                list.push(parent);
            }
        }
        for list in parents.values_mut() {
            list.sort();
        }
        for (old, new) in &inactive_map {
            match concepts.get(old) {
                None => return Err(Error::Terminology(format!("inactive map key `{old}` unknown"))),
                Some(c) if c.active => {
                    return Err(Error::Terminology(format!("inactive map key `{old}` is active")))
                }
                Some(_) => {}
            }
            if !concepts.contains_key(new) {
                return Err(Error::Terminology(format!("inactive map target `{new}` unknown")));
            }
        }
        for code in category_map.keys() {
            if !concepts.contains_key(code) {
                return Err(Error::Terminology(format!("category map code `{code}` unknown")));
            }
        }

        let depths = min_depths(&concepts, &parents, &root)?;
        Ok(ConceptGraph {
            concepts,
            parents,
            root,
            inactive_map,
            category_map,
            depths,
        })
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concept(&self, code: &str) -> Option<&Concept> {
        self.concepts.get(code)
    }

    pub fn concepts(&self) -> impl Iterator<Item = (&String, &Concept)> {
        self.concepts.iter()
    }

    pub fn parents(&self, code: &str) -> &[String] {
        self.parents.get(code).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edges(&self) -> impl Iterator<Item = (&String, &String)> {
        self.parents
            .iter()
            .flat_map(|(child, ps)| ps.iter().map(move |p| (child, p)))
    }

    pub fn inactive_map(&self) -> &BTreeMap<String, String> {
        &self.inactive_map
    }

    pub fn category_map(&self) -> &BTreeMap<String, Category> {
        &self.category_map
    }

    pub fn term(&self, code: &str) -> Option<&str> {
        self.concepts.get(code).map(|c| c.term.as_str())
    }

    fn require(&self, code: &str) -> Result<()> {
        if self.concepts.contains_key(code) {
            Ok(())
        } else {
            Err(Error::UnknownCode(code.to_string()))
        }
    }

    /// Shortest `is-a` distance to the root; `None` when the root is unreachable.
    pub fn depth(&self, code: &str) -> Result<Option<usize>> {
        self.require(code)?;
        Ok(self.depths[code])
    }

    /// Transitive closure of `is-a`, excluding `code` itself.
    pub fn ancestors(&self, code: &str) -> Result<BTreeSet<String>> {
        self.require(code)?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&str> = self.parents(code).iter().map(String::as_str).collect();
        while let Some(next) = stack.pop() {
            if seen.insert(next.to_string()) {
                stack.extend(self.parents(next).iter().map(String::as_str));
            }
        }
        Ok(seen)
    }

    /// Replaces inactive codes by their active successors, following chains to
    /// a fixed point.
    pub fn migrate<'a, I>(&self, codes: I) -> Result<BTreeSet<String>>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = BTreeSet::new();
        for code in codes {
            let mut path = vec![code.clone()];
            let mut current = code;
            while let Some(next) = self.inactive_map.get(current) {
                if let Some(start) = path.iter().position(|p| p == next) {
                    let mut cycle = path[start..].to_vec();
                    cycle.push(next.clone());
                    return Err(Error::MappingCycle(cycle));
                }
                path.push(next.clone());
                current = next;
            }
            out.insert(current.clone());
        }
        Ok(out)
    }

    /// Highest-priority category among the code and its ancestors, or
    /// [`Category::Other`].
    pub fn categorize(&self, code: &str) -> Result<Category> {
        let mut lineage = self.ancestors(code)?;
        lineage.insert(code.to_string());
        Ok(lineage
            .iter()
            .filter_map(|c| self.category_map.get(c))
            .copied()
            .min()
            .unwrap_or(Category::Other))
    }

    /// Case-insensitive substring search over preferred terms, ranked by
    /// (match position, term length, code).
    pub fn search(&self, query: &str, limit: usize) -> Vec<(String, String)> {
        let query = query.to_lowercase();
        if query.is_empty() || limit == 0 {
            return Vec::new();
        }
        let mut hits: Vec<(usize, usize, &String, &String)> = self
            .concepts
            .iter()
            .filter_map(|(code, concept)| {
                let lowered = concept.term.to_lowercase();
                lowered.find(&query).map(|byte_pos| {
                    let pos = lowered[..byte_pos].chars().count();
                    (pos, concept.term.chars().count(), code, &concept.term)
                })
            })
            .collect();
        hits.sort();
        hits.into_iter()
            .take(limit)
            .map(|(_, _, code, term)| (code.clone(), term.clone()))
            .collect()
    }

    pub fn load(files: &TerminologyFiles, root: &str) -> Result<Self> {
        let mut concepts = BTreeMap::new();
        for (line, cols) in read_tsv(&files.concepts, 3)? {
            let active = match cols[2].as_str() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("{}: bad active flag `{other}`", files.concepts.display()),
                    })
                }
            };
            concepts.insert(
                cols[0].clone(),
                Concept {
                    term: cols[1].clone(),
                    active,
                },
            );
        }
        let edges = read_tsv(&files.relationships, 2)?
            .into_iter()
            .map(|(_, cols)| (cols[0].clone(), cols[1].clone()));
        let mut inactive_map = BTreeMap::new();
        if let Some(path) = &files.inactive_map {
            for (_, cols) in read_tsv(path, 2)? {
                inactive_map.insert(cols[0].clone(), cols[1].clone());
            }
        }
        let mut category_map = BTreeMap::new();
        if let Some(path) = &files.categories {
            for (line, cols) in read_tsv(path, 2)? {
                let category = cols[1].parse().map_err(|e: Error| Error::Parse {
                    line,
                    message: format!("{}: {e}", path.display()),
                })?;
                category_map.insert(cols[0].clone(), category);
            }
        }
        ConceptGraph::new(concepts, edges, root, inactive_map, category_map)
    }

    pub fn save(&self, files: &TerminologyFiles) -> Result<()> {
        let concepts = self
            .concepts
            .iter()
            .map(|(code, c)| vec![code.clone(), c.term.clone(), (c.active as u8).to_string()]);
        write_tsv(&files.concepts, &["code", "term", "active"], concepts)?;
        let edges = self.edges().map(|(c, p)| vec![c.clone(), p.clone()]);
        write_tsv(&files.relationships, &["child", "parent"], edges)?;
        if let Some(path) = &files.inactive_map {
            let rows = self.inactive_map.iter().map(|(a, b)| vec![a.clone(), b.clone()]);
            write_tsv(path, &["inactive", "replacement"], rows)?;
        }
        if let Some(path) = &files.categories {
            let rows = self
                .category_map
                .iter()
                .map(|(code, cat)| vec![code.clone(), cat.name().to_string()]);
            write_tsv(path, &["code", "category"], rows)?;
        }
        Ok(())
    }
}

/// Depth by dynamic programming over a topological order (parents first).
fn min_depths(
    concepts: &BTreeMap<String, Concept>,
    parents: &BTreeMap<String, Vec<String>>,
    root: &str,
) -> Result<HashMap<String, Option<usize>>> {
    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut pending: HashMap<&str, usize> = concepts.keys().map(|c| (c.as_str(), 0)).collect();
    for (child, ps) in parents {
        pending.insert(child, ps.len());
        for p in ps {
            children.entry(p).or_default().push(child);
        }
    }
    let mut ready: VecDeque<&str> = concepts
        .keys()
        .map(String::as_str)
        .filter(|c| pending[c] == 0)
        .collect();
    let mut depths: HashMap<String, Option<usize>> = HashMap::with_capacity(concepts.len());
    while let Some(code) = ready.pop_front() {
        let depth = if code == root {
            Some(0)
        } else {
            parents
                .get(code)
                .into_iter()
                .flatten()
                .filter_map(|p| depths[p.as_str()])
                .min()
                .map(|d| d + 1)
        };
        depths.insert(code.to_string(), depth);
        for &child in children.get(code).into_iter().flatten() {
            let left = pending.get_mut(child).expect("known concept");
            *left -= 1;
            if *left == 0 {
                ready.push_back(child);
            }
        }
    }
    if depths.len() != concepts.len() {
        let stuck: Vec<_> = concepts
            .keys()
            .filter(|c| !depths.contains_key(*c))
            .take(5)
            .cloned()
            .collect();
        return Err(Error::Terminology(format!(
            "is-a relation has a cycle through {}",
            stuck.join(", ")
        )));
    }
    Ok(depths)
}

/// Paths of the tab-separated terminology files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminologyFiles {
    pub concepts: PathBuf,
    pub relationships: PathBuf,
    #[serde(default)]
    pub inactive_map: Option<PathBuf>,
    #[serde(default)]
    pub categories: Option<PathBuf>,
}

impl TerminologyFiles {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        TerminologyFiles {
            concepts: dir.join("concepts.tsv"),
            relationships: dir.join("relationships.tsv"),
            inactive_map: Some(dir.join("inactive_map.tsv")),
            categories: Some(dir.join("categories.tsv")),
        }
    }
}

fn read_tsv(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cols.len() != columns {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "{}: expected {columns} tab-separated columns, found {}",
                    path.display(),
                    cols.len()
                ),
            });
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

fn write_tsv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join("\t")).map_err(io)?;
    for row in rows {
        writeln!(out, "{}", row.join("\t")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Builds a terminology for a synthetic code book: a three-level grouping
/// hierarchy under the root, each code attached to one or two grouping
/// concepts, about 7% of codes retired (inactive, detached from the hierarchy,
/// mapped to an active code), and nine of the first-level groups assigned a
/// disease category.
pub fn synthetic_terminology(book: &[SyntheticCode], seed: u64) -> Result<ConceptGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);

    let mut concepts = BTreeMap::new();
    concepts.insert(
        CLINICAL_FINDING.to_string(),
        Concept {
            term: "Clinical finding".into(),
            active: true,
        },
    );
    let mut edges = Vec::new();
    let mut next_id = 0usize;
    let mut group = |level: usize, concepts: &mut BTreeMap<String, Concept>| {
        let code = format!("{}", 800_000_000 + next_id * 7);
        next_id += 1;
        concepts.insert(
            code.clone(),
            Concept {
                term: format!("grouping concept {next_id} (level {level})"),
                active: true,
            },
        );
        code
    };

    let level1: Vec<String> = (0..12).map(|_| group(1, &mut concepts)).collect();
    for g in &level1 {
        edges.push((g.clone(), CLINICAL_FINDING.to_string()));
    }
    let mut levels = vec![level1.clone()];
    for level in 2..=3 {
        let current: Vec<String> = (0..24).map(|_| group(level, &mut concepts)).collect();
        for g in &current {
            let parent = levels[level - 2].choose(&mut rng).expect("nonempty").clone();
            edges.push((g.clone(), parent));
        }
        levels.push(current);
    }

    let mut category_map = BTreeMap::new();
    for (g, category) in level1.iter().zip(Category::ALL.iter().take(9)) {
        category_map.insert(g.clone(), *category);
    }

    let mut inactive_map = BTreeMap::new();
    let mut active_codes = Vec::new();
    let retired: Vec<bool> = book
        .iter()
        .map(|c| c.rank > 0 && rng.random_bool(0.07))
        .collect();
    for (entry, &is_retired) in book.iter().zip(&retired) {
        concepts.insert(
            entry.code.clone(),
            Concept {
                term: entry.term.clone(),
                active: !is_retired,
            },
        );
        if is_retired {
            continue;
        }
        active_codes.push(entry.code.clone());
        let level = rng.random_range(0..levels.len());
        let parent = levels[level].choose(&mut rng).expect("nonempty").clone();
        edges.push((entry.code.clone(), parent.clone()));
        if rng.random_bool(0.25) {
            let level = rng.random_range(0..levels.len());
            let other = levels[level].choose(&mut rng).expect("nonempty").clone();
            if other != parent {
                edges.push((entry.code.clone(), other));
            }
        }
    }
    for (entry, &is_retired) in book.iter().zip(&retired) {
        if is_retired {
            let target = active_codes.choose(&mut rng).expect("rank 0 is never retired");
            inactive_map.insert(entry.code.clone(), target.clone());
        }
    }

    ConceptGraph::new(concepts, edges, CLINICAL_FINDING, inactive_map, category_map)
}
