//! Label-set unification.
//!
//! Pooled datasets ship with incompatible label vocabularies ('car', 'van',
//! 'truck', ...). A [`TaxonomyMapping`] folds every dataset-specific label
//! onto a shared super-category ('vehicle') or drops it, so a single flat
//! class list covers the whole pool.
//!
//! The config is TOML:
//!
//! ```toml
//! super_categories = ["vehicle"]
//!
//! [[rules]]
//! dataset = "DETRAC"
//! label = "van"
//! maps_to = "vehicle"
//!
//! [[rules]]
//! dataset = "MS COCO"
//! label = "person"
//! maps_to = "DROP"
//! ```
//!
//! `DROP` is reserved: an annotation mapped to it is discarded at ingestion.
//! Lookups of unregistered `(dataset, label)` pairs are hard errors — a
//! missing rule is a taxonomy mistake, not something to pass through
//! silently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DROP_KEYWORD: &str = "DROP";

/// Outcome of mapping one raw annotation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutcome {
    /// Index into [`TaxonomyMapping::super_categories`].
    Class(usize),
    /// Annotation is discarded.
    Drop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRule {
    dataset: String,
    label: String,
    maps_to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTaxonomy {
    super_categories: Vec<String>,
    #[serde(default)]
    rules: Vec<RawRule>,
}

/// Validated label mapping. Immutable after load; class indices follow the
/// declaration order of `super_categories`.
#[derive(Debug, Clone)]
pub struct TaxonomyMapping {
    super_categories: Vec<String>,
    rules: BTreeMap<(String, String), LabelOutcome>,
    digest: String,
}

impl TaxonomyMapping {
    pub fn super_categories(&self) -> &[String] {
        &self.super_categories
    }

    pub fn num_classes(&self) -> usize {
        self.super_categories.len()
    }

    pub fn class_name(&self, index: usize) -> Option<&str> {
        self.super_categories.get(index).map(String::as_str)
    }

    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    /// Content digest over the canonical rule set, recorded in manifests so a
    /// pool is traceable to the exact taxonomy that produced it.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// Parse and validate a taxonomy config.
pub fn load_taxonomy(config_text: &str) -> Result<TaxonomyMapping> {
    let raw: RawTaxonomy =
        toml::from_str(config_text).map_err(|e| Error::TaxonomyParse(e.to_string()))?;

    if raw.super_categories.is_empty() {
        return Err(Error::EmptyTaxonomy);
    }
    let mut index_of = BTreeMap::new();
    for (i, name) in raw.super_categories.iter().enumerate() {
        if name == DROP_KEYWORD {
            return Err(Error::ReservedSuperCategory(name.clone()));
        }
        if index_of.insert(name.clone(), i).is_some() {
            return Err(Error::DuplicateSuperCategory(name.clone()));
        }
    }

    let mut rules = BTreeMap::new();
    for rule in &raw.rules {
        let outcome = if rule.maps_to == DROP_KEYWORD {
            LabelOutcome::Drop
        } else {
            match index_of.get(&rule.maps_to) {
                Some(&i) => LabelOutcome::Class(i),
                None => {
                    return Err(Error::UndeclaredSuperCategory {
                        dataset: rule.dataset.clone(),
                        label: rule.label.clone(),
                        target: rule.maps_to.clone(),
                    })
                }
            }
        };
        let key = (rule.dataset.clone(), rule.label.clone());
        if rules.insert(key, outcome).is_some() {
            return Err(Error::DuplicateRule {
                dataset: rule.dataset.clone(),
                label: rule.label.clone(),
            });
        }
    }

    // Canonical form: sorted rule triples. Keeps the digest independent of
    // rule order and TOML formatting.
    let mut hasher = Sha256::new();
    for name in &raw.super_categories {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
    }
    hasher.update([1u8]);
    for ((dataset, label), outcome) in &rules {
        hasher.update(dataset.as_bytes());
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
        hasher.update([0u8]);
        match outcome {
            LabelOutcome::Class(i) => hasher.update(i.to_le_bytes()),
            LabelOutcome::Drop => hasher.update(usize::MAX.to_le_bytes()),
        }
    }
    let digest = format!("sha256:{:x}", hasher.finalize());

    Ok(TaxonomyMapping {
        super_categories: raw.super_categories,
        rules,
        digest,
    })
}

/// Resolve one `(dataset, raw label)` pair.
pub fn map_label(
    dataset_id: &str,
    raw_label: &str,
    taxonomy: &TaxonomyMapping,
) -> Result<LabelOutcome> {
    taxonomy
        .rules
        .get(&(dataset_id.to_string(), raw_label.to_string()))
        .copied()
        .ok_or_else(|| Error::UnknownLabel {
            dataset: dataset_id.to_string(),
            label: raw_label.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    const VEHICLE_CFG: &str = r#"
        super_categories = ["vehicle"]

        [[rules]]
        dataset = "DETRAC"
        label = "van"
        maps_to = "vehicle"

        [[rules]]
        dataset = "COCO"
        label = "person"
        maps_to = "DROP"
    "#;

    #[test]
    fn single_super_category_config() {
        let tax = load_taxonomy(VEHICLE_CFG).unwrap();
        assert_eq!(tax.num_classes(), 1);
        assert_eq!(tax.super_categories(), ["vehicle"]);
        assert_eq!(
            map_label("DETRAC", "van", &tax).unwrap(),
            LabelOutcome::Class(0)
        );
    }

    #[test]
    fn drop_rule_resolves_to_drop() {
        let tax = load_taxonomy(VEHICLE_CFG).unwrap();
        assert_eq!(
            map_label("COCO", "person", &tax).unwrap(),
            LabelOutcome::Drop
        );
    }

    #[test]
    fn empty_rule_set_is_valid() {
        let tax = load_taxonomy("super_categories = [\"vehicle\"]").unwrap();
        assert_eq!(tax.num_classes(), 1);
        assert_eq!(tax.num_rules(), 0);
    }

    #[test]
    fn duplicate_rule_rejected() {
        let cfg = r#"
            super_categories = ["vehicle"]
            [[rules]]
            dataset = "COCO"
            label = "car"
            maps_to = "vehicle"
            [[rules]]
            dataset = "COCO"
            label = "car"
            maps_to = "DROP"
        "#;
        assert!(matches!(
            load_taxonomy(cfg),
            Err(Error::DuplicateRule { .. })
        ));
    }

    #[test]
    fn undeclared_target_rejected() {
        let cfg = r#"
            super_categories = ["vehicle"]
            [[rules]]
            dataset = "COCO"
            label = "cat"
            maps_to = "animal"
        "#;
        assert!(matches!(
            load_taxonomy(cfg),
            Err(Error::UndeclaredSuperCategory { .. })
        ));
    }

    #[test]
    fn unknown_pair_is_an_error() {
        let tax = load_taxonomy(VEHICLE_CFG).unwrap();
        assert!(matches!(
            map_label("UAVDT", "bus", &tax),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn identity_mapping_allowed() {
        let cfg = r#"
            super_categories = ["vehicle"]
            [[rules]]
            dataset = "COCO"
            label = "vehicle"
            maps_to = "vehicle"
        "#;
        let tax = load_taxonomy(cfg).unwrap();
        assert_eq!(
            map_label("COCO", "vehicle", &tax).unwrap(),
            LabelOutcome::Class(0)
        );
    }

    #[test]
    fn reserved_and_duplicate_supers_rejected() {
        assert!(matches!(
            load_taxonomy("super_categories = [\"DROP\"]"),
            Err(Error::ReservedSuperCategory(_))
        ));
        assert!(matches!(
            load_taxonomy("super_categories = [\"a\", \"a\"]"),
            Err(Error::DuplicateSuperCategory(_))
        ));
        assert!(matches!(
            load_taxonomy("super_categories = []"),
            Err(Error::EmptyTaxonomy)
        ));
    }

    #[test]
    fn class_index_stable_under_rule_addition() {
        let base = load_taxonomy(
            r#"
            super_categories = ["vehicle", "person"]
            [[rules]]
            dataset = "A"
            label = "car"
            maps_to = "vehicle"
        "#,
        )
        .unwrap();
        let extended = load_taxonomy(
            r#"
            super_categories = ["vehicle", "person"]
            [[rules]]
            dataset = "A"
            label = "car"
            maps_to = "vehicle"
            [[rules]]
            dataset = "B"
            label = "pedestrian"
            maps_to = "person"
        "#,
        )
        .unwrap();
        assert_eq!(
            map_label("A", "car", &base).unwrap(),
            map_label("A", "car", &extended).unwrap()
        );
    }

    #[test]
    fn digest_ignores_rule_order() {
        let a = load_taxonomy(
            r#"
            super_categories = ["vehicle"]
            [[rules]]
            dataset = "A"
            label = "car"
            maps_to = "vehicle"
            [[rules]]
            dataset = "B"
            label = "van"
            maps_to = "vehicle"
        "#,
        )
        .unwrap();
        let b = load_taxonomy(
            r#"
            super_categories = ["vehicle"]
            [[rules]]
            dataset = "B"
            label = "van"
            maps_to = "vehicle"
            [[rules]]
            dataset = "A"
            label = "car"
            maps_to = "vehicle"
        "#,
        )
        .unwrap();
        assert_eq!(a.digest(), b.digest());
        assert!(a.digest().starts_with("sha256:"));
    }
}
