//! Reference documents served over the `omop://` scheme and appended to
//! mapping prompts: table/field reference, vocabulary preferences, and
//! mapping guidance.

use crate::preferences::{PreferenceProfile, DOMAIN_VOCABULARY_DEFAULTS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceDescriptor {
    pub uri: String,
    pub name: String,
    pub mime_type: String,
    pub content: String,
}

/// Domain, CDM table, and the concept-id column mappings target.
pub const TABLE_REFERENCE: &[(&str, &str, &str)] = &[
    ("Condition", "condition_occurrence", "condition_concept_id"),
    ("Drug", "drug_exposure", "drug_concept_id"),
    ("Measurement", "measurement", "measurement_concept_id"),
    ("Procedure", "procedure_occurrence", "procedure_concept_id"),
    ("Observation", "observation", "observation_concept_id"),
    ("Device", "device_exposure", "device_concept_id"),
];

/// Domain whose concepts populate the given CDM table, if known.
pub fn domain_for_table(table: &str) -> Option<&'static str> {
    TABLE_REFERENCE
        .iter()
        .find(|(_, candidate, _)| candidate.eq_ignore_ascii_case(table.trim()))
        .map(|(domain, _, _)| *domain)
}

pub fn register_default_resources() -> Vec<ResourceDescriptor> {
    vec![tables_resource(), vocabulary_preferences_resource(), best_practices_resource()]
}

fn tables_resource() -> ResourceDescriptor {
    let mut content = String::from(
        "OMOP CDM table reference\n\n\
         Clinical events live in domain-specific tables; the mapped concept\n\
         goes into the table's concept-id column.\n\n\
         domain | table | concept column\n",
    );
    for (domain, table, column) in TABLE_REFERENCE {
        content.push_str(&format!("{domain} | {table} | {column}\n"));
    }
    ResourceDescriptor {
        uri: "omop://tables".into(),
        name: "OMOP table reference".into(),
        mime_type: "text/markdown".into(),
        content,
    }
}

fn vocabulary_preferences_resource() -> ResourceDescriptor {
    let mut content = String::from(
        "Vocabulary preferences\n\n\
         Map to standard, valid concepts. Preferred source vocabularies by\n\
         domain:\n",
    );
    for (domain, vocabularies) in DOMAIN_VOCABULARY_DEFAULTS {
        content.push_str(&format!("- {domain}: {}\n", vocabularies.join(", ")));
    }
    content.push_str("\nDefault profile:\n");
    content.push_str(
        &serde_json::to_string_pretty(&PreferenceProfile::default())
            .expect("profile serializes infallibly"),
    );
    content.push('\n');
    ResourceDescriptor {
        uri: "omop://vocabulary-preferences".into(),
        name: "Vocabulary preferences".into(),
        mime_type: "text/markdown".into(),
        content,
    }
}

fn best_practices_resource() -> ResourceDescriptor {
    ResourceDescriptor {
        uri: "omop://best-practices".into(),
        name: "Mapping best practices".into(),
        mime_type: "text/markdown".into(),
        content: "Mapping best practices\n\n\
             - Expand abbreviations using the clinical context before searching.\n\
             - Search with a concise keyword, not the raw source string, when they differ.\n\
             - Select only from retrieved candidates; never answer from memory.\n\
             - Prefer standard (S) concepts over classification or non-standard ones.\n\
             - Prefer valid (V) concepts over deprecated ones.\n\
             - Copy the concept name verbatim; the mapping is rejected if the name\n\
               does not match the concept id.\n\
             - When no candidate fits, say so rather than forcing a poor match.\n"
            .into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn registry_has_three_unique_uris() {
        let resources = register_default_resources();
        assert_eq!(resources.len(), 3);
        let uris: BTreeSet<&str> = resources.iter().map(|r| r.uri.as_str()).collect();
        assert_eq!(uris.len(), 3);
        for resource in &resources {
            assert!(resource.uri.starts_with("omop://"), "bad scheme: {}", resource.uri);
            assert!(!resource.content.is_empty());
            assert!(!resource.name.is_empty());
            assert!(!resource.mime_type.is_empty());
        }
    }

    #[test]
    fn preference_resource_names_the_key_vocabularies() {
        let resources = register_default_resources();
        let preferences =
            resources.iter().find(|r| r.uri == "omop://vocabulary-preferences").unwrap();
        assert!(preferences.content.contains("SNOMED"));
        assert!(preferences.content.contains("LOINC"));
        assert!(preferences.content.contains("RxNorm"));
    }

    #[test]
    fn table_lookup_is_case_insensitive() {
        assert_eq!(domain_for_table("condition_occurrence"), Some("Condition"));
        assert_eq!(domain_for_table("MEASUREMENT"), Some("Measurement"));
        assert_eq!(domain_for_table(" drug_exposure "), Some("Drug"));
        assert_eq!(domain_for_table("not_a_table"), None);
    }
}
