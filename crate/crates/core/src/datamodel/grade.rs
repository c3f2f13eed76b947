use std::fmt;

use serde::{Deserialize, Serialize};

/// Endoscopic varices grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    /// Mild.
    G1,
    /// Moderate.
    G2,
    /// Severe.
    G3,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::G1, Grade::G2, Grade::G3];

    /// Zero-based ordinal level.
    pub fn level(self) -> usize {
        match self {
            Grade::G1 => 0,
            Grade::G2 => 1,
            Grade::G3 => 2,
        }
    }

    pub fn from_level(level: usize) -> Option<Self> {
        Self::ALL.get(level).copied()
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Cumulative binary encoding: `t1 = [grade >= G2]`, `t2 = [grade == G3]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OrdinalTarget {
    pub t1: bool,
    pub t2: bool,
}

impl OrdinalTarget {
    pub fn bits(self) -> [f64; 2] {
        [self.t1 as u8 as f64, self.t2 as u8 as f64]
    }
}

pub fn ordinal_encode(grade: Grade) -> OrdinalTarget {
    OrdinalTarget {
        t1: grade >= Grade::G2,
        t2: grade == Grade::G3,
    }
}

/// The two binary evaluation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// G2 or worse versus G1.
    #[serde(rename = "ge_g2")]
    AtLeastG2,
    /// G3 versus G1/G2.
    #[serde(rename = "g3")]
    G3,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::AtLeastG2, Task::G3];

    /// Index of the ordinal threshold that scores this task.
    pub fn threshold(self) -> usize {
        match self {
            Task::AtLeastG2 => 0,
            Task::G3 => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Task::AtLeastG2 => "≥G2",
            Task::G3 => "G3",
        }
    }
}

pub fn binarize_grade(grade: Grade, task: Task) -> bool {
    let t = ordinal_encode(grade);
    match task {
        Task::AtLeastG2 => t.t1,
        Task::G3 => t.t2,
    }
}
