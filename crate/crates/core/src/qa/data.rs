use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, LemmaTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

impl QaExample {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.choices.len()) {
            return Err(Error::invalid(format!(
                "example {}: {} choices, expected 2 to 5",
                self.id,
                self.choices.len()
            )));
        }
        if self.answer >= self.choices.len() {
            return Err(Error::invalid(format!("example {}: answer {} out of range", self.id, self.answer)));
        }
        if self.question.trim().is_empty() || self.choices.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::invalid(format!("example {}: empty question or choice", self.id)));
        }
        Ok(())
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut w: W, examples: &[QaExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Entities mentioned by the question and by each choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub question: Vec<EntityId>,
    pub choices: Vec<Vec<EntityId>>,
}

/// Question mentions are maximal phrase matches; each choice is treated as
/// a single entity name.
pub fn ground(ex: &QaExample, kg: &KnowledgeGraph, lemmas: Option<&LemmaTable>) -> Grounding {
    let choice_set: Vec<BTreeSet<EntityId>> = ex.choices.iter().map(|c| kg.ground_entities(c, true, lemmas)).collect();
    Grounding {
        question: kg.ground_entities(&ex.question, false, lemmas).into_iter().collect(),
        choices: choice_set.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}
