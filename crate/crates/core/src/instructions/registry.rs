//! Keypoint description registry.
//!
//! JSON format: `{category: [{name, description}]}`. The crate embeds a
//! default registry for the animal-body category; synthetic datasets write
//! their own registry file next to the annotations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named keypoint with its natural-language description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    description: String,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    categories: BTreeMap<String, Vec<Entry>>,
}

const ANIMAL_BODY_JSON: &str = include_str!("../../assets/animal_body.json");

impl Registry {
    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(ANIMAL_BODY_JSON).expect("embedded registry is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let categories: BTreeMap<String, Vec<Entry>> = serde_json::from_str(json)?;
        let reg = Registry { categories };
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.categories).expect("registry serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for (cat, entries) in &self.categories {
            let mut seen = std::collections::BTreeSet::new();
            for e in entries {
                if !seen.insert(e.name.as_str()) {
                    return Err(Error::Config(format!(
                        "duplicate keypoint {:?} in category {:?}",
                        e.name, cat
                    )));
                }
                if e.description.trim().is_empty() {
                    return Err(Error::Config(format!(
                        "empty description for {:?} in {:?}",
                        e.name, cat
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn add_category(&mut self, category: &str, specs: Vec<(String, String)>) -> Result<()> {
        if self.categories.contains_key(category) {
            return Err(Error::Config(format!("category {category:?} already present")));
        }
        self.categories.insert(
            category.to_string(),
            specs
                .into_iter()
                .map(|(name, description)| Entry { name, description })
                .collect(),
        );
        self.validate()
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(|s| s.as_str())
    }

    /// All keypoints of a category, in registry order.
    pub fn keypoints(&self, category: &str) -> Result<Vec<KeypointSpec>> {
        let entries = self.categories.get(category).ok_or_else(|| {
            Error::UnknownKeypoint {
                name: String::new(),
                category: category.to_string(),
                candidates: self.categories.keys().cloned().collect(),
            }
        })?;
        Ok(entries
            .iter()
            .map(|e| KeypointSpec {
                name: e.name.clone(),
                description: e.description.clone(),
                category: category.to_string(),
            })
            .collect())
    }

    pub fn keypoint_names(&self, category: &str) -> Result<Vec<String>> {
        Ok(self
            .keypoints(category)?
            .into_iter()
            .map(|s| s.name)
            .collect())
    }

    /// Look up one keypoint; unknown names list the candidates.
    pub fn lookup(&self, category: &str, name: &str) -> Result<KeypointSpec> {
        let specs = self.keypoints(category)?;
        specs
            .iter()
            .find(|s| s.name == name)
            .cloned()
            .ok_or_else(|| Error::UnknownKeypoint {
                name: name.to_string(),
                category: category.to_string(),
                candidates: specs.iter().map(|s| s.name.clone()).collect(),
            })
    }
}
