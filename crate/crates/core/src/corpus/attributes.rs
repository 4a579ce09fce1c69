use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One categorical attribute; each value is named by a set of synonyms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSlot {
    pub name: String,
    pub values: Vec<Vec<String>>,
}

/// The attribute world: slots with synonym sets plus the filler words that
/// carry no image-groundable meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub slots: Vec<AttributeSlot>,
    pub fillers: Vec<String>,
}

fn slot(name: &str, values: &[&[&str]]) -> AttributeSlot {
    AttributeSlot {
        name: name.into(),
        values: values
            .iter()
            .map(|syn| syn.iter().map(|s| s.to_string()).collect())
            .collect(),
    }
}

impl AttributeSpec {
    /// Person-description world: accessory, upper colour, lower garment and
    /// footwear, laid out top to bottom over the patch grid.
    pub fn standard() -> Self {
        let slots = vec![
            slot(
                "accessory",
                &[
                    &["bag", "handbag"],
                    &["backpack", "rucksack"],
                    &["hat", "cap"],
                    &["umbrella", "parasol"],
                    &["glasses", "spectacles"],
                    &["scarf", "shawl"],
                ],
            ),
            slot(
                "upper_color",
                &[
                    &["red", "crimson"],
                    &["blue", "navy"],
                    &["green", "olive"],
                    &["yellow", "golden"],
                    &["white", "ivory"],
                    &["black", "ebony"],
                ],
            ),
            slot(
                "lower_garment",
                &[
                    &["jeans", "denims"],
                    &["skirt", "kilt"],
                    &["shorts", "trunks"],
                    &["trousers", "slacks"],
                    &["leggings", "tights"],
                ],
            ),
            slot(
                "footwear",
                &[
                    &["shoes", "sneakers"],
                    &["boots", "booties"],
                    &["sandals", "flipflops"],
                    &["heels", "pumps"],
                    &["loafers", "moccasins"],
                ],
            ),
        ];
        let fillers = [
            "the", "a", "an", "is", "with", "and", "that", "also", "has", "person", "wearing", "in",
            "of", "on", "carrying", "while", "this", "very", "some", "its", "who", "appears", "to",
            "be",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self { slots, fillers }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Number of distinct attribute tuples.
    pub fn combinations(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    /// Decodes a mixed-radix index into one value per slot.
    pub fn tuple(&self, mut index: usize) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| {
                let v = index % s.values.len();
                index /= s.values.len();
                v
            })
            .collect()
    }

    pub fn meaningful_words(&self) -> Vec<String> {
        self.slots
            .iter()
            .flat_map(|s| s.values.iter().flatten().cloned())
            .collect()
    }

    /// `(slot, value)` a meaningful word names, if any.
    pub fn lookup(&self, word: &str) -> Option<(usize, usize)> {
        self.slots.iter().enumerate().find_map(|(si, s)| {
            s.values
                .iter()
                .position(|syn| syn.iter().any(|w| w == word))
                .map(|vi| (si, vi))
        })
    }

    /// Slot encoded by patch `p` of an `m`-patch grid: contiguous bands.
    pub fn slot_of_patch(&self, p: usize, m: usize) -> usize {
        p * self.num_slots() / m
    }

    pub fn patches_of_slot(&self, slot: usize, m: usize) -> Vec<usize> {
        (0..m).filter(|&p| self.slot_of_patch(p, m) == slot).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.slots {
            if s.values.len() < 2 {
                return Err(Error::Validation(format!("slot {} needs ≥2 values", s.name)));
            }
            for syn in &s.values {
                if syn.is_empty() {
                    return Err(Error::Validation(format!("empty synonym set in {}", s.name)));
                }
            }
        }
        for w in self.meaningful_words().iter().chain(&self.fillers) {
            if !seen.insert(w.clone()) {
                return Err(Error::Validation(format!("word {w:?} appears twice")));
            }
        }
        Ok(())
    }
}
