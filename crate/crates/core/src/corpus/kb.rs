use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concepts::{entities, ATTRIBUTES, ENTITY_COUNT, RELATIONS, SLOTS_PER_ENTITY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// `entity attribute value`
    Attribute,
    /// `entity relation entity`
    Relation,
}

impl Template {
    fn tag(self) -> &'static str {
        match self {
            Template::Attribute => "attr",
            Template::Relation => "rel",
        }
    }
}

/// One language-independent fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptStatement {
    pub template: Template,
    /// `[subject, predicate, object]` concept symbols.
    pub slots: [String; 3],
}

impl ConceptStatement {
    pub fn new(template: Template, slots: [String; 3]) -> Self {
        Self { template, slots }
    }

    /// Identifies the statement independently of any language.
    pub fn meaning_key(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.template.tag(),
            self.slots[0],
            self.slots[1],
            self.slots[2]
        )
    }

    /// Identifies the question this statement answers: subject and
    /// predicate without the object.
    pub fn question_key(&self) -> (String, String) {
        (self.slots[0].clone(), self.slots[1].clone())
    }
}

/// Largest knowledge base [`generate_kb`] can produce.
pub const KB_CAPACITY: usize = ENTITY_COUNT * SLOTS_PER_ENTITY;

/// Draws `n` facts, each a distinct (entity, attribute-or-relation) slot,
/// over the first `ceil(n / slots)` entities.
pub fn generate_kb(seed: u64, n: usize) -> Result<Vec<ConceptStatement>> {
    if n == 0 {
        return Err(Error::Capacity("knowledge base needs at least one statement".into()));
    }
    if n > KB_CAPACITY {
        return Err(Error::Capacity(format!(
            "{n} statements requested, templates allow at most {KB_CAPACITY}"
        )));
    }
    let n_entities = n.div_ceil(SLOTS_PER_ENTITY).max(2);
    let names = &entities()[..n_entities];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..n_entities)
        .flat_map(|e| (0..SLOTS_PER_ENTITY).map(move |s| (e, s)))
        .collect();
    cells.shuffle(&mut rng);
    cells.truncate(n);
    Ok(cells
        .into_iter()
        .map(|(e, s)| {
            if s < ATTRIBUTES.len() {
                let (attr, values) = ATTRIBUTES[s];
                let v = values[rng.random_range(0..values.len())];
                ConceptStatement::new(
                    Template::Attribute,
                    [names[e].clone(), attr.to_string(), v.to_string()],
                )
            } else {
                let rel = RELATIONS[s - ATTRIBUTES.len()];
                let mut other = rng.random_range(0..n_entities - 1);
                if other >= e {
                    other += 1;
                }
                ConceptStatement::new(
                    Template::Relation,
                    [names[e].clone(), rel.to_string(), names[other].clone()],
                )
            }
        })
        .collect())
}
