//! Class registry: canonical class names, synonyms, co-occurring classes and
//! instances, plus the prompt templates consumed by every stage.

mod templates;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use templates::{
    render_prompt, review_user_template, PromptRole, PromptTemplate, CLASS_PRIOR, INSTANCE_TRAIN, PHOTOREALISM, REVIEW_OUTPUT,
    REVIEW_QUESTIONS, REVIEW_RELAXATION, REVIEW_REMINDER, REVIEW_SYSTEM, REVIEW_TASK, SECTION_SEPARATOR,
};

/// Minimum number of reference images per instance.
pub const MIN_INSTANCE_IMAGES: usize = 3;

/// Which inference prompt subsets a class receives during diversification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terrain {
    #[default]
    General,
    Land,
    Water,
}

impl FromStr for Terrain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general" => Ok(Terrain::General),
            "land" => Ok(Terrain::Land),
            "water" => Ok(Terrain::Water),
            other => Err(Error::InvalidArgument(format!("unknown terrain tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceEntry {
    #[serde(rename = "name")]
    pub instance_name: String,
    #[serde(rename = "images")]
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub co_occurring: Vec<String>,
    #[serde(default)]
    pub diversify: bool,
    #[serde(default, skip_serializing_if = "is_general")]
    pub terrain: Terrain,
    #[serde(default)]
    pub instances: Vec<InstanceEntry>,
}

fn is_general(t: &Terrain) -> bool {
    *t == Terrain::General
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl ClassEntry {
    pub fn new(name: impl Into<String>) -> Self {
        ClassEntry {
            name: name.into(),
            synonyms: Vec::new(),
            co_occurring: Vec::new(),
            diversify: false,
            terrain: Terrain::General,
            instances: Vec::new(),
        }
    }

    pub fn with_synonyms(mut self, syn: &[&str]) -> Self {
        self.synonyms = syn.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_co_occurring(mut self, co: &[&str]) -> Self {
        self.co_occurring = co.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Lowercases and collapses whitespace. Used for every phrase comparison.
pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    version: String,
    #[serde(default, skip_serializing_if = "is_false")]
    shared_synonyms: bool,
    classes: Vec<ClassEntry>,
}

/// Validated, immutable class catalog.
///
/// With `shared_synonyms` unset every synonym belongs to exactly one class and
/// never shadows a class name. Setting it admits catalogs where an alias or a
/// superclass (for example `crane`) is listed under several classes; such
/// phrases are then only decodable through the prompt that elicited them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CatalogFile", into = "CatalogFile")]
pub struct ClassCatalog {
    pub version: String,
    pub shared_synonyms: bool,
    classes: Vec<ClassEntry>,
    by_name: HashMap<String, usize>,
    by_synonym: HashMap<String, Vec<usize>>,
}

impl PartialEq for ClassCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.shared_synonyms == other.shared_synonyms && self.classes == other.classes
    }
}

impl ClassCatalog {
    pub fn new(version: impl Into<String>, classes: Vec<ClassEntry>) -> Result<Self> {
        Self::build(version.into(), false, classes)
    }

    pub fn with_shared_synonyms(version: impl Into<String>, classes: Vec<ClassEntry>) -> Result<Self> {
        Self::build(version.into(), true, classes)
    }

    fn build(version: String, shared_synonyms: bool, classes: Vec<ClassEntry>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let invariant = |entry: &str, reason: String| Error::CatalogInvariant { entry: entry.to_string(), reason };

        let mut by_name = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            let key = normalize_phrase(&c.name);
            if key.is_empty() {
                return Err(invariant(&c.name, "class name is empty".into()));
            }
            if by_name.insert(key, i).is_some() {
                return Err(invariant(&c.name, "duplicate class name".into()));
            }
        }

        let mut by_synonym: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            let own = normalize_phrase(&c.name);
            let mut local = Vec::new();
            for s in &c.synonyms {
                let key = normalize_phrase(s);
                if key.is_empty() {
                    return Err(invariant(&c.name, "empty synonym".into()));
                }
                if key == own {
                    return Err(invariant(&c.name, "class lists itself as a synonym".into()));
                }
                if local.contains(&key) {
                    return Err(invariant(&c.name, format!("duplicate synonym `{s}`")));
                }
                if !shared_synonyms {
                    if let Some(&j) = by_name.get(&key) {
                        return Err(Error::DuplicateSynonym {
                            synonym: s.clone(),
                            first: classes[j].name.clone(),
                            second: c.name.clone(),
                        });
                    }
                    if let Some(owners) = by_synonym.get(&key) {
                        return Err(Error::DuplicateSynonym {
                            synonym: s.clone(),
                            first: classes[owners[0]].name.clone(),
                            second: c.name.clone(),
                        });
                    }
                }
                by_synonym.entry(key.clone()).or_default().push(i);
                local.push(key);
            }
            for co in &c.co_occurring {
                let key = normalize_phrase(co);
                match by_name.get(&key) {
                    None => return Err(invariant(&c.name, format!("co-occurring class `{co}` is not in the catalog"))),
                    Some(&j) if j == i => return Err(invariant(&c.name, "class lists itself as co-occurring".into())),
                    _ => {}
                }
            }
            for inst in &c.instances {
                if inst.instance_name.trim().is_empty() {
                    return Err(invariant(&c.name, "instance with empty name".into()));
                }
                if inst.image_refs.len() < MIN_INSTANCE_IMAGES {
                    return Err(Error::TooFewInstanceImages {
                        instance: inst.instance_name.clone(),
                        count: inst.image_refs.len(),
                    });
                }
            }
        }

        Ok(ClassCatalog { version, shared_synonyms, classes, by_name, by_synonym })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(text).map_err(|e| Error::json("catalog", e))?;
        file.try_into()
    }

    /// Canonical serialization: fixed key order, two-space indentation, trailing newline.
    pub fn to_json(&self) -> String {
        let file = CatalogFile::from(self.clone());
        let mut s = serde_json::to_string_pretty(&file).expect("catalog serializes");
        s.push('\n');
        s
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(&normalize_phrase(name)).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ClassEntry> {
        self.index_of(name).map(|i| &self.classes[i])
    }

    pub fn require(&self, name: &str) -> Result<&ClassEntry> {
        self.get(name).ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Classes that list `phrase` among their synonyms.
    pub fn synonym_owners(&self, phrase: &str) -> Vec<&ClassEntry> {
        self.by_synonym.get(&normalize_phrase(phrase)).map(|v| v.iter().map(|&i| &self.classes[i]).collect()).unwrap_or_default()
    }

    /// Resolves a class name or an unambiguous synonym to its class.
    /// Case-insensitive and whitespace-normalized.
    pub fn lookup(&self, phrase: &str) -> Option<&ClassEntry> {
        if let Some(c) = self.get(phrase) {
            return Some(c);
        }
        match self.by_synonym.get(&normalize_phrase(phrase)) {
            Some(owners) if owners.len() == 1 => Some(&self.classes[owners[0]]),
            _ => None,
        }
    }

    /// Co-occurring classes of `name`, in the order the catalog lists them.
    pub fn co_occurring_of(&self, name: &str) -> Result<Vec<&ClassEntry>> {
        let entry = self.require(name)?;
        let mut idx: Vec<usize> = Vec::new();
        for i in entry.co_occurring.iter().filter_map(|c| self.index_of(c)) {
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        Ok(idx.into_iter().map(|i| &self.classes[i]).collect())
    }
}

impl TryFrom<CatalogFile> for ClassCatalog {
    type Error = Error;

    fn try_from(file: CatalogFile) -> Result<Self> {
        Self::build(file.version, file.shared_synonyms, file.classes)
    }
}

impl From<ClassCatalog> for CatalogFile {
    fn from(c: ClassCatalog) -> Self {
        CatalogFile { version: c.version, shared_synonyms: c.shared_synonyms, classes: c.classes }
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<ClassCatalog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassCatalog::from_json(&text)
}

pub fn save_catalog(catalog: &ClassCatalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, catalog.to_json()).map_err(|e| Error::io(path, e))
}

/// Renders a template with string-keyed bindings.
pub fn render_with(template: &PromptTemplate, pairs: &[(&str, &str)]) -> Result<String> {
    let map: BTreeMap<&str, &str> = pairs.iter().copied().collect();
    template.render(&map)
}

/// Synonym table for the 23 heavy-machinery classes used by the bundled
/// fixtures. Empty synonym lists stand for "no synonyms".
pub const HEAVY_MACHINERY_SYNONYMS: &[(&str, &[&str])] = &[
    ("articulated dump truck", &[]),
    ("bulldozer", &["dozer", "crawler tractor"]),
    ("crawler crane", &["track crane", "crane"]),
    ("crawler excavator", &["track excavator", "excavator"]),
    ("crawler loader", &["track loader"]),
    ("combined piling and drilling rig", &["drilling rig", "piling rig"]),
    ("duty cycle crane", &["dragline", "dragline excavator"]),
    ("gantry crane", &["container crane", "maritime crane"]),
    ("log loader", &["log handling machine"]),
    ("maritime crane", &["harbor crane", "port crane", "crane"]),
    ("material handling machine", &["material handler"]),
    ("mining bulldozer", &[]),
    ("mining excavator", &[]),
    ("mining truck", &[]),
    ("mobile crane", &["crane"]),
    ("pipelayer", &["sideboom"]),
    ("pontoon excavator", &["floating excavator", "amphibious excavator", "excavator"]),
    ("reachstacker", &["container handler", "material handling equipment"]),
    ("telescopic handler", &["lull", "telehandler", "reach forklift", "zoom boom", "material handling equipment"]),
    ("tower crane", &["crane"]),
    ("truck mixer", &["cement mixer truck", "concrete mixer truck"]),
    ("wheel loader", &["front end loader", "bucket loader"]),
    ("wheel excavator", &["mobile excavator", "excavator"]),
];

/// The heavy-machinery catalog: full synonym table, the mining trio as
/// mutually co-occurring classes, and terrain tags for mining and maritime
/// machines. Synonyms are shared across classes, as in the source table.
pub fn heavy_machinery_catalog() -> ClassCatalog {
    const MINING: [&str; 3] = ["mining truck", "mining excavator", "mining bulldozer"];
    let classes = HEAVY_MACHINERY_SYNONYMS
        .iter()
        .map(|(name, syn)| {
            let mut c = ClassEntry::new(*name).with_synonyms(syn);
            if MINING.contains(name) {
                c.co_occurring = MINING.iter().filter(|m| *m != name).map(|m| m.to_string()).collect();
                c.terrain = Terrain::Land;
            }
            if matches!(*name, "maritime crane" | "gantry crane" | "pontoon excavator") {
                c.terrain = Terrain::Water;
            }
            c.diversify = true;
            c
        })
        .collect();
    ClassCatalog::with_shared_synonyms("heavy-machinery-1", classes).expect("built-in catalog is valid")
}
