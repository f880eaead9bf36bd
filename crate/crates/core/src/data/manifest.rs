use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::pnm::{read_image, read_mask};
use super::{FundusSample, Split};

/// One manifest record. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub id: String,
    pub participant: Option<String>,
    /// 1-based line number in the source text.
    pub line: usize,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    mask: String,
    split: String,
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    participant: Option<String>,
}

/// Parses JSON-lines manifest text. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            line,
            msg: e.to_string(),
        })?;
        let split = rec.split.parse().map_err(|msg| Error::Manifest { line, msg })?;
        out.push(ManifestEntry {
            image: rec.image.into(),
            mask: rec.mask.into(),
            split,
            id: rec.id,
            participant: rec.participant,
            line,
        });
    }
    Ok(out)
}

/// Serializes entries one JSON object per line.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let rec = Record {
            image: e.image.to_string_lossy().into_owned(),
            mask: e.mask.to_string_lossy().into_owned(),
            split: e.split.to_string(),
            id: e.id.clone(),
            participant: e.participant.clone(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every sample listed in the manifest, in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<FundusSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let image = read_image(&base.join(&e.image))?;
            let mask = read_mask(&base.join(&e.mask))?;
            let (ih, iw) = (image.shape()[1], image.shape()[2]);
            if (ih, iw) != (mask.height, mask.width) {
                return Err(Error::Manifest {
                    line: e.line,
                    msg: format!(
                        "image is {ih}x{iw} but mask is {}x{} for id {:?}",
                        mask.height, mask.width, e.id
                    ),
                });
            }
            FundusSample::new(image, mask, e.id, e.split)
        })
        .collect()
}

/// Fails if any participant appears in both splits.
pub fn lint_participants(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen: HashMap<&str, (Split, usize)> = HashMap::new();
    for e in entries {
        let Some(p) = e.participant.as_deref() else { continue };
        match seen.get(p) {
            Some(&(split, first)) if split != e.split => {
                return Err(Error::Manifest {
                    line: e.line,
                    msg: format!(
                        "participant {p:?} is in {} here but in {split} on line {first}",
                        e.split
                    ),
                });
            }
            Some(_) => {}
            None => {
                seen.insert(p, (e.split, e.line));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_in_order() {
        let text = r#"{"image":"a.ppm","mask":"a.pgm","split":"train","id":"a"}

{"image":"b.ppm","mask":"b.pgm","split":"val","id":"b","participant":"p1"}
"#;
        let e = parse_manifest(text).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].id.as_str(), e[0].split, e[0].line), ("a", Split::Train, 1));
        assert_eq!((e[1].participant.as_deref(), e[1].line), (Some("p1"), 3));
    }

    #[test]
    fn bad_split_names_line() {
        let text = "{\"image\":\"a\",\"mask\":\"b\",\"split\":\"train\",\"id\":\"a\"}\n{\"image\":\"a\",\"mask\":\"b\",\"split\":\"test\",\"id\":\"b\"}";
        let err = parse_manifest(text).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn missing_field() {
        let err = parse_manifest(r#"{"image":"a","split":"val","id":"x"}"#).unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");
    }

    #[test]
    fn participant_lint() {
        let text = r#"{"image":"a","mask":"a","split":"train","id":"1","participant":"p"}
{"image":"a","mask":"a","split":"train","id":"2","participant":"p"}
{"image":"a","mask":"a","split":"val","id":"3","participant":"q"}
{"image":"a","mask":"a","split":"val","id":"4"}"#;
        assert!(lint_participants(&parse_manifest(text).unwrap()).is_ok());
        let bad = format!(
            "{text}\n{}",
            r#"{"image":"a","mask":"a","split":"val","id":"5","participant":"p"}"#
        );
        let err = lint_participants(&parse_manifest(&bad).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 5, .. }));
    }
}
