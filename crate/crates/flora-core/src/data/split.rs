//! Seen/unseen class splits.
//!
//! On disk a split is a JSON document with an integer class count and
//! integer id arrays:
//!
//! ```json
//! { "n_classes": 60, "unseen": [10, 11, 19, 26, 56], "seen": [0, 1, ...] }
//! ```
//!
//! `seen` may be omitted, in which case it is the complement of `unseen`
//! with respect to `n_classes`. Ids are normalized to sorted order;
//! duplicates, overlap, out-of-range ids, and incomplete coverage are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    seen: Vec<u32>,
    unseen: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct SplitDoc {
    n_classes: u32,
    unseen: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seen: Option<Vec<u32>>,
}

fn sorted_unique(mut ids: Vec<u32>, what: &str) -> Result<Vec<u32>> {
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::SplitInvalid(format!("{what} ids contain duplicates")));
    }
    Ok(ids)
}

impl SplitSpec {
    /// Build from explicit id sets. Both sets together must cover
    /// `0..n_classes` exactly, with no overlap and a non-empty unseen set.
    pub fn new(seen: Vec<u32>, unseen: Vec<u32>) -> Result<Self> {
        let seen = sorted_unique(seen, "seen")?;
        let unseen = sorted_unique(unseen, "unseen")?;
        if unseen.is_empty() {
            return Err(Error::SplitInvalid("unseen set is empty".into()));
        }
        let n = (seen.len() + unseen.len()) as u32;
        let mut all: Vec<u32> = seen.iter().chain(unseen.iter()).copied().collect();
        all.sort_unstable();
        for (i, id) in all.iter().enumerate() {
            if *id != i as u32 {
                return Err(Error::SplitInvalid(format!(
                    "seen and unseen ids must partition 0..{n} exactly (saw {id} at position {i})"
                )));
            }
        }
        Ok(Self { seen, unseen })
    }

    /// Unseen ids plus a class count; seen is the complement.
    pub fn from_unseen(n_classes: u32, unseen: Vec<u32>) -> Result<Self> {
        let unseen = sorted_unique(unseen, "unseen")?;
        if let Some(&bad) = unseen.iter().find(|&&u| u >= n_classes) {
            return Err(Error::SplitInvalid(format!(
                "unseen id {bad} out of range for {n_classes} classes"
            )));
        }
        let seen: Vec<u32> = (0..n_classes).filter(|c| !unseen.contains(c)).collect();
        Self::new(seen, unseen)
    }

    pub fn seen(&self) -> &[u32] {
        &self.seen
    }

    pub fn unseen(&self) -> &[u32] {
        &self.unseen
    }

    pub fn n_classes(&self) -> u32 {
        (self.seen.len() + self.unseen.len()) as u32
    }

    pub fn is_seen(&self, class: u32) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    pub fn is_unseen(&self, class: u32) -> bool {
        self.unseen.binary_search(&class).is_ok()
    }

    pub fn to_json(&self) -> String {
        let doc = SplitDoc {
            n_classes: self.n_classes(),
            unseen: self.unseen.clone(),
            seen: Some(self.seen.clone()),
        };
        serde_json::to_string_pretty(&doc).expect("split doc always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SplitDoc =
            serde_json::from_str(text).map_err(|e| Error::SplitParse(e.to_string()))?;
        match doc.seen {
            Some(seen) => {
                let spec = Self::new(seen, doc.unseen)?;
                if spec.n_classes() != doc.n_classes {
                    return Err(Error::SplitInvalid(format!(
                        "declared n_classes {} but ids cover {}",
                        doc.n_classes,
                        spec.n_classes()
                    )));
                }
                Ok(spec)
            }
            None => Self::from_unseen(doc.n_classes, doc.unseen),
        }
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io_at(path, e))
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_fills_seen() {
        let s = SplitSpec::from_unseen(6, vec![4, 1]).unwrap();
        assert_eq!(s.seen(), &[0, 2, 3, 5]);
        assert_eq!(s.unseen(), &[1, 4]);
        assert_eq!(s.n_classes(), 6);
        assert!(s.is_seen(0) && !s.is_seen(1));
        assert!(s.is_unseen(4) && !s.is_unseen(5));
    }

    #[test]
    fn overlap_rejected() {
        let err = SplitSpec::new(vec![0, 1, 2], vec![2, 3]).unwrap_err();
        assert!(matches!(err, Error::SplitInvalid(_)));
    }

    #[test]
    fn duplicates_rejected() {
        let err = SplitSpec::from_unseen(5, vec![1, 1]).unwrap_err();
        assert!(matches!(err, Error::SplitInvalid(_)));
    }

    #[test]
    fn incomplete_coverage_rejected() {
        let err = SplitSpec::new(vec![0, 1], vec![3]).unwrap_err();
        assert!(matches!(err, Error::SplitInvalid(_)));
    }

    #[test]
    fn empty_unseen_rejected() {
        let err = SplitSpec::new(vec![0, 1], vec![]).unwrap_err();
        assert!(matches!(err, Error::SplitInvalid(_)));
    }

    #[test]
    fn json_round_trip() {
        let s = SplitSpec::from_unseen(10, vec![7, 2, 9]).unwrap();
        let again = SplitSpec::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn json_without_seen_uses_complement() {
        let s = SplitSpec::from_json(r#"{"n_classes": 4, "unseen": [3]}"#).unwrap();
        assert_eq!(s.seen(), &[0, 1, 2]);
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            SplitSpec::from_json("{"),
            Err(Error::SplitParse(_))
        ));
        assert!(matches!(
            SplitSpec::from_json(r#"{"n_classes": 4, "unseen": [3], "seen": [0,1]}"#),
            Err(Error::SplitInvalid(_))
        ));
    }
}
