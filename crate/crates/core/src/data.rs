//! Dataset schemas and JSONL loaders.
//!
//! Datasets are JSON Lines, one sample per line, UTF-8. Loaders reject
//! malformed rows with the 1-based line number in the error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::is_marker_token;

/// Linguistic intensity of a negation cue, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Strong,
    Moderate,
    Weak,
    Weakest,
}

impl Strength {
    pub const ALL: [Strength; 4] = [
        Strength::Strong,
        Strength::Moderate,
        Strength::Weak,
        Strength::Weakest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strength::Strong => "strong",
            Strength::Moderate => "moderate",
            Strength::Weak => "weak",
            Strength::Weakest => "weakest",
        }
    }
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Strength::Strong),
            "moderate" => Ok(Strength::Moderate),
            "weak" => Ok(Strength::Weak),
            "weakest" => Ok(Strength::Weakest),
            other => Err(Error::UnknownStrength(other.to_string())),
        }
    }
}

/// Map of strength level to the scale applied to the negation-marker token
/// vector in sequence features.
pub type StrengthScales = BTreeMap<Strength, f64>;

/// One (image, positive caption, negated caption) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSample {
    pub id: String,
    /// Key of the paired image embedding in the fixture container.
    pub image: String,
    pub pos_caption: Vec<String>,
    pub neg_caption: Vec<String>,
    /// The object asserted absent by `neg_caption`.
    pub neg_object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_strength: Option<Strength>,
}

impl TripletSample {
    fn check(&self) -> std::result::Result<(), String> {
        if !self.neg_caption.iter().any(|t| is_marker_token(t)) {
            return Err("neg_caption does not contain the negation marker".into());
        }
        if !self.neg_caption.iter().any(|t| t == &self.neg_object) {
            return Err(format!(
                "neg_object {:?} does not appear in neg_caption",
                self.neg_object
            ));
        }
        Ok(())
    }
}

/// One multiple-choice row: the answer is the index of the caption that is
/// true of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqSample {
    pub id: String,
    pub image: String,
    pub choices: Vec<Vec<String>>,
    pub answer: usize,
}

impl McqSample {
    fn check(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("{} choices, need at least 2", self.choices.len()));
        }
        if self.answer >= self.choices.len() {
            return Err(format!(
                "answer index {} out of range for {} choices",
                self.answer,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

fn load_jsonl<T, C>(path: &Path, check: C) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    C: Fn(&T) -> std::result::Result<(), String>,
{
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: idx + 1,
            message: e.to_string(),
        })?;
        check(&row).map_err(|message| Error::Data {
            line: idx + 1,
            message,
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletSample>> {
    load_jsonl(path, TripletSample::check)
}

pub fn load_mcq(path: &Path) -> Result<Vec<McqSample>> {
    load_jsonl(path, McqSample::check)
}

pub fn save_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that every image reference resolves against the given set of
/// container keys.
pub fn check_image_references<'a, I>(refs: I, known: &std::collections::HashSet<String>) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    for r in refs {
        if !known.contains(r) {
            return Err(Error::DanglingImage(r.to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn sample() -> TripletSample {
        TripletSample {
            id: "t0".into(),
            image: "img-0".into(),
            pos_caption: vec!["a".into(), "photo".into(), "of".into(), "cat".into()],
            neg_caption: vec!["a".into(), "photo".into(), "with".into(), "no".into(), "cat".into()],
            neg_object: "cat".into(),
            neg_strength: Some(Strength::Strong),
        }
    }

    #[test]
    fn round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rows = vec![sample()];
        save_jsonl(&path, &rows).unwrap();
        let back = load_triplets(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn empty_file_is_a_valid_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        File::create(&path).unwrap();
        assert!(load_triplets(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_field_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(
            f,
            "{}",
            serde_json::to_string(&sample()).unwrap()
        )
        .unwrap();
        writeln!(
            f,
            r#"{{"id":"t1","image":"img-1","pos_caption":["cat"],"neg_caption":["no","cat"]}}"#
        )
        .unwrap();
        let err = load_triplets(&path).unwrap_err();
        match err {
            Error::Data { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("neg_object"), "message: {message}");
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn caption_without_marker_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut row = sample();
        row.neg_caption = vec!["a".into(), "cat".into()];
        save_jsonl(&path, &[row]).unwrap();
        let err = load_triplets(&path).unwrap_err();
        assert!(matches!(err, Error::Data { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn mcq_answer_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let row = McqSample {
            id: "m0".into(),
            image: "img-0".into(),
            choices: vec![vec!["cat".into()], vec!["dog".into()]],
            answer: 2,
        };
        save_jsonl(&path, &[row]).unwrap();
        assert!(matches!(load_mcq(&path), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn dangling_reference_is_detected() {
        let known: std::collections::HashSet<String> = ["img-0".to_string()].into_iter().collect();
        assert!(check_image_references(["img-0"], &known).is_ok());
        assert!(matches!(
            check_image_references(["img-1"], &known),
            Err(Error::DanglingImage(_))
        ));
    }
}
