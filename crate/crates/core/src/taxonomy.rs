//! Semantic label space, thing/stuff partition and prompt-to-class rules.
//!
//! A [`Taxonomy`] is loaded once (from a TOML file or the built-in Occ3D
//! default) and shared read-only by every stage of the pipeline. Prompt rules
//! map open-vocabulary segmentation prompts onto target classes; optional
//! `over`/`under` relations override score priority when two prompts compete
//! for the same pixel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Semantic class identifier.
pub type ClassId = u16;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse taxonomy file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("class ids must be dense 0..{expected}, found {found}")]
    SparseIds { expected: usize, found: ClassId },
    #[error("duplicate class {0}")]
    DuplicateClass(String),
    #[error("free_id and ignore_id must be distinct and outside the voting classes")]
    ReservedIdCollision,
    #[error("num_classes = {declared} does not match the {actual} listed classes")]
    ClassCount { declared: usize, actual: usize },
    #[error("eval_excluded references unknown class {0}")]
    UnknownExcluded(ClassId),
    #[error("rule for prompt {prompt:?} targets unknown class {target}")]
    UnknownTarget { prompt: String, target: ClassId },
    #[error("duplicate prompt {0:?}")]
    DuplicatePrompt(String),
    #[error("precedence of {prompt:?} references unknown prompt {other:?}")]
    UnknownPrompt { prompt: String, other: String },
    #[error("precedence relations form a cycle through prompt {0:?}")]
    PrecedenceCycle(String),
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Thing,
    Stuff,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Over,
    Under,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Precedence {
    pub relation: Relation,
    pub other_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRule {
    pub prompt: String,
    pub target: ClassId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub precedence: Vec<Precedence>,
}

/// Outcome of a pixel conflict between two prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
    /// No relation declared; fall back to the score argmax.
    Score,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    classes: Vec<ClassDef>,
    free_id: ClassId,
    ignore_id: ClassId,
    #[serde(default)]
    eval_excluded: Vec<ClassId>,
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    rules: Vec<PromptRule>,
}

/// Prompt rule set with the transitive closure of its precedence relation.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<PromptRule>,
    by_name: HashMap<String, usize>,
    // dominates[a] contains b iff prompt a wins over prompt b.
    dominates: Vec<BTreeSet<usize>>,
}

impl RuleSet {
    fn build(
        rules: Vec<PromptRule>,
        is_class: impl Fn(ClassId) -> bool,
    ) -> Result<Self, TaxonomyError> {
        let mut by_name = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            if !is_class(r.target) {
                return Err(TaxonomyError::UnknownTarget {
                    prompt: r.prompt.clone(),
                    target: r.target,
                });
            }
            if by_name.insert(r.prompt.clone(), i).is_some() {
                return Err(TaxonomyError::DuplicatePrompt(r.prompt.clone()));
            }
        }
        let n = rules.len();
        let mut edges = vec![BTreeSet::new(); n];
        for (i, r) in rules.iter().enumerate() {
            for p in &r.precedence {
                let j =
                    *by_name
                        .get(&p.other_prompt)
                        .ok_or_else(|| TaxonomyError::UnknownPrompt {
                            prompt: r.prompt.clone(),
                            other: p.other_prompt.clone(),
                        })?;
                if i == j {
                    return Err(TaxonomyError::PrecedenceCycle(r.prompt.clone()));
                }
                match p.relation {
                    Relation::Over => edges[i].insert(j),
                    Relation::Under => edges[j].insert(i),
                };
            }
        }
        // Transitive closure by DFS from every node; a node reaching itself is a cycle.
        let mut dominates = vec![BTreeSet::new(); n];
        for start in 0..n {
            let mut stack: Vec<usize> = edges[start].iter().copied().collect();
            let seen = &mut dominates[start];
            while let Some(v) = stack.pop() {
                if v == start {
                    return Err(TaxonomyError::PrecedenceCycle(rules[start].prompt.clone()));
                }
                if seen.insert(v) {
                    stack.extend(edges[v].iter().copied());
                }
            }
        }
        Ok(Self {
            rules,
            by_name,
            dominates,
        })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[PromptRule] {
        &self.rules
    }

    pub fn prompt_id(&self, prompt: &str) -> Option<usize> {
        self.by_name.get(prompt).copied()
    }

    /// Target class of a prompt. `None` when the prompt id is out of range.
    pub fn resolve_prompt(&self, prompt_id: usize) -> Option<ClassId> {
        self.rules.get(prompt_id).map(|r| r.target)
    }

    /// First prompt mapping onto `class`, if any.
    pub fn prompt_for_class(&self, class: ClassId) -> Option<usize> {
        self.rules.iter().position(|r| r.target == class)
    }

    /// Which of two prompts wins a pixel conflict under the declared relations.
    pub fn precedence_wins(&self, a: usize, b: usize) -> Winner {
        if self.dominates.get(a).is_some_and(|s| s.contains(&b)) {
            Winner::A
        } else if self.dominates.get(b).is_some_and(|s| s.contains(&a)) {
            Winner::B
        } else {
            Winner::Score
        }
    }
}

/// Semantic label space shared by every pipeline stage.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    classes: Vec<ClassDef>,
    free_id: ClassId,
    ignore_id: ClassId,
    eval_excluded: BTreeSet<ClassId>,
    rules: RuleSet,
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(text)?;
        Self::from_file(file)
    }

    fn from_file(file: TaxonomyFile) -> Result<Self, TaxonomyError> {
        let mut classes = file.classes;
        classes.sort_by_key(|c| c.id);
        let mut names = BTreeSet::new();
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(TaxonomyError::SparseIds {
                    expected: classes.len(),
                    found: c.id,
                });
            }
            if !names.insert(c.name.as_str()) {
                return Err(TaxonomyError::DuplicateClass(c.name.clone()));
            }
        }
        let k = classes.len();
        if let Some(declared) = file.num_classes {
            if declared != k {
                return Err(TaxonomyError::ClassCount {
                    declared,
                    actual: k,
                });
            }
        }
        if file.free_id == file.ignore_id
            || (file.free_id as usize) < k
            || (file.ignore_id as usize) < k
        {
            return Err(TaxonomyError::ReservedIdCollision);
        }
        let eval_excluded: BTreeSet<ClassId> = file.eval_excluded.into_iter().collect();
        if let Some(&bad) = eval_excluded.iter().find(|&&c| c as usize >= k) {
            return Err(TaxonomyError::UnknownExcluded(bad));
        }
        let rules = RuleSet::build(file.rules, |c| (c as usize) < k)?;
        Ok(Self {
            classes,
            free_id: file.free_id,
            ignore_id: file.ignore_id,
            eval_excluded,
            rules,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = TaxonomyFile {
            classes: self.classes.clone(),
            free_id: self.free_id,
            ignore_id: self.ignore_id,
            eval_excluded: self.eval_excluded.iter().copied().collect(),
            num_classes: Some(self.classes.len()),
            rules: self.rules.rules.clone(),
        };
        toml::to_string_pretty(&file).expect("taxonomy serializes")
    }

    /// The 17 Occ3D-nuScenes classes plus free, with a 25-prompt default rule set.
    pub fn occ3d_nuscenes() -> Self {
        Self::from_toml_str(OCC3D_NUSCENES).expect("built-in taxonomy is valid")
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    /// Number of semantic classes taking part in voting.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn free_id(&self) -> ClassId {
        self.free_id
    }

    pub fn ignore_id(&self) -> ClassId {
        self.ignore_id
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn is_class(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    /// True for semantic classes (not free, not ignore).
    pub fn is_occupied_label(&self, id: ClassId) -> bool {
        self.is_class(id)
    }

    pub fn kind(&self, id: ClassId) -> Option<ClassKind> {
        self.classes.get(id as usize).map(|c| c.kind)
    }

    pub fn is_thing(&self, id: ClassId) -> bool {
        self.kind(id) == Some(ClassKind::Thing)
    }

    pub fn thing_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes
            .iter()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| c.id)
    }

    pub fn is_eval_excluded(&self, id: ClassId) -> bool {
        self.eval_excluded.contains(&id)
    }

    pub fn eval_excluded(&self) -> &BTreeSet<ClassId> {
        &self.eval_excluded
    }

    /// Classes that enter metric averages.
    pub fn eval_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes
            .iter()
            .map(|c| c.id)
            .filter(|c| !self.eval_excluded.contains(c))
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        if id == self.free_id {
            "free"
        } else if id == self.ignore_id {
            "ignore"
        } else {
            self.classes
                .get(id as usize)
                .map(|c| c.name.as_str())
                .unwrap_or("unknown")
        }
    }

    pub fn class_by_name(&self, name: &str) -> Result<ClassId, TaxonomyError> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.id)
            .ok_or_else(|| TaxonomyError::UnknownClassName(name.to_string()))
    }

    /// Maps a raw raster label into the taxonomy. Anything that is not a voting
    /// class becomes `ignore`; unexpected values are reported once per value.
    pub fn sanitize_labels(&self, labels: &mut [ClassId]) -> BTreeMap<ClassId, usize> {
        let mut unknown = BTreeMap::new();
        for l in labels.iter_mut() {
            if !self.is_class(*l) {
                if *l != self.ignore_id {
                    *unknown.entry(*l).or_insert(0) += 1;
                }
                *l = self.ignore_id;
            }
        }
        for (label, count) in &unknown {
            log::warn!("unknown label {label} in {count} pixels mapped to ignore");
        }
        unknown
    }

    /// Class-level instance id carried by stuff and flat voxels.
    pub fn stuff_instance_id(&self, class: ClassId) -> u32 {
        class as u32 + 1
    }
}

const OCC3D_NUSCENES: &str = r#"
free_id = 17
ignore_id = 255
eval_excluded = [0, 12]
num_classes = 17

classes = [
  { id = 0, name = "others", kind = "stuff" },
  { id = 1, name = "barrier", kind = "thing" },
  { id = 2, name = "bicycle", kind = "thing" },
  { id = 3, name = "bus", kind = "thing" },
  { id = 4, name = "car", kind = "thing" },
  { id = 5, name = "construction_vehicle", kind = "thing" },
  { id = 6, name = "motorcycle", kind = "thing" },
  { id = 7, name = "pedestrian", kind = "thing" },
  { id = 8, name = "traffic_cone", kind = "thing" },
  { id = 9, name = "trailer", kind = "thing" },
  { id = 10, name = "truck", kind = "thing" },
  { id = 11, name = "driveable_surface", kind = "flat" },
  { id = 12, name = "other_flat", kind = "flat" },
  { id = 13, name = "sidewalk", kind = "flat" },
  { id = 14, name = "terrain", kind = "flat" },
  { id = 15, name = "manmade", kind = "stuff" },
  { id = 16, name = "vegetation", kind = "stuff" },
]

rules = [
  { prompt = "barrier", target = 1 },
  { prompt = "concrete barrier", target = 1 },
  { prompt = "bicycle", target = 2 },
  { prompt = "bus", target = 3 },
  { prompt = "car", target = 4 },
  { prompt = "construction vehicle", target = 5 },
  { prompt = "excavator", target = 5 },
  { prompt = "motorcycle", target = 6 },
  { prompt = "pedestrian", target = 7 },
  { prompt = "person", target = 7 },
  { prompt = "traffic cone", target = 8 },
  { prompt = "trailer", target = 9 },
  { prompt = "truck", target = 10 },
  { prompt = "road", target = 11 },
  { prompt = "lane marking", target = 11, precedence = [{ relation = "over", other_prompt = "road" }] },
  { prompt = "sidewalk", target = 13 },
  { prompt = "grass", target = 14 },
  { prompt = "dirt", target = 14 },
  { prompt = "building", target = 15 },
  { prompt = "wall", target = 15 },
  { prompt = "pole", target = 15 },
  { prompt = "fence", target = 15 },
  { prompt = "tree", target = 16 },
  { prompt = "bush", target = 16 },
  { prompt = "hedge", target = 16 },
]
"#;
