use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::feature_store::ClassId;

/// Bijection between known class ids and dense output indices `0..C`,
/// ordered by ascending class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    classes: Vec<ClassId>,
}

impl ClassMap {
    pub fn new(known: &BTreeSet<ClassId>) -> Self {
        Self {
            classes: known.iter().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn try_index_of(&self, class: ClassId) -> Result<usize> {
        self.index_of(class)
            .ok_or_else(|| Error::Contract(format!("class {class} is not a known class")))
    }

    pub fn class_at(&self, index: usize) -> ClassId {
        self.classes[index]
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }
}
