//! Labels for recorded loss series and influence matrix axes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Train,
    Query,
}

/// One recorded series: a train example or query observable, optionally
/// narrowed to a single loss component.
///
/// The text form is stable and used in CSV headers and artifact headers:
/// `train:3`, `query:0`, `train:3.c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesLabel {
    pub side: Side,
    pub index: usize,
    pub component: Option<usize>,
}

impl SeriesLabel {
    pub fn train(index: usize) -> Self {
        SeriesLabel { side: Side::Train, index, component: None }
    }

    pub fn query(index: usize) -> Self {
        SeriesLabel { side: Side::Query, index, component: None }
    }

    pub fn with_component(mut self, c: usize) -> Self {
        self.component = Some(c);
        self
    }

    /// Label with the component marker stripped.
    pub fn parent(&self) -> Self {
        SeriesLabel { component: None, ..*self }
    }
}

impl fmt::Display for SeriesLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Train => "train",
            Side::Query => "query",
        };
        match self.component {
            Some(c) => write!(f, "{side}:{}.c{c}", self.index),
            None => write!(f, "{side}:{}", self.index),
        }
    }
}

impl FromStr for SeriesLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::MalformedArtifact {
            path: String::new(),
            reason: format!("unparseable series label {s:?}"),
        };
        let (side, rest) = s.split_once(':').ok_or_else(bad)?;
        let side = match side {
            "train" => Side::Train,
            "query" => Side::Query,
            _ => return Err(bad()),
        };
        let (index, component) = match rest.split_once(".c") {
            Some((i, c)) => (
                i.parse().map_err(|_| bad())?,
                Some(c.parse().map_err(|_| bad())?),
            ),
            None => (rest.parse().map_err(|_| bad())?, None),
        };
        Ok(SeriesLabel { side, index, component })
    }
}
