use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, IntensityLevel, MemeRecord, Split, TargetCategory};

/// On-disk shape of one manifest line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    image_file: String,
    #[serde(default)]
    ocr_text: String,
    dark_humor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensity: Option<u8>,
    split: Split,
}

impl From<&MemeRecord> for ManifestLine {
    fn from(r: &MemeRecord) -> Self {
        ManifestLine {
            id: r.id.clone(),
            image_file: r.image_file.clone(),
            ocr_text: r.ocr_text.clone(),
            dark_humor: if r.dark_humor { "Yes" } else { "No" }.to_string(),
            target: r.target.map(|t| t.as_str().to_string()),
            intensity: r.intensity.map(IntensityLevel::value),
            split: r.split,
        }
    }
}

fn convert(line_no: usize, raw: ManifestLine) -> Result<MemeRecord, DataError> {
    let malformed = |reason: String| DataError::MalformedLine {
        line: line_no,
        reason,
    };
    if raw.id.trim().is_empty() {
        return Err(malformed("empty id".into()));
    }
    let dark_humor = match raw.dark_humor.as_str() {
        "Yes" => true,
        "No" => false,
        other => return Err(malformed(format!("dark_humor must be Yes/No, got `{other}`"))),
    };
    let target = raw
        .target
        .as_deref()
        .map(str::parse::<TargetCategory>)
        .transpose()
        .map_err(malformed)?;
    let intensity = raw
        .intensity
        .map(|v| IntensityLevel::new(v).ok_or_else(|| malformed(format!("intensity {v} not in 1..=3"))))
        .transpose()?;
    let record = MemeRecord {
        id: raw.id,
        image_file: raw.image_file,
        ocr_text: raw.ocr_text,
        dark_humor,
        target,
        intensity,
        split: raw.split,
    };
    record.validate()?;
    Ok(record)
}

/// Parses manifest text (one JSON object per line). Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<MemeRecord>, DataError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let record = convert(line_no, raw)?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<MemeRecord>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    parse_manifest(BufReader::new(file))
}

pub fn write_manifest<W: Write>(mut out: W, records: &[MemeRecord]) -> Result<(), DataError> {
    for r in records {
        let line = serde_json::to_string(&ManifestLine::from(r))
            .map_err(|e| DataError::Io(e.into()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[MemeRecord]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<MemeRecord>, DataError> {
        parse_manifest(text.as_bytes())
    }

    #[test]
    fn empty_input_yields_no_records() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn minimal_non_dark_record() {
        let recs = parse(
            r#"{"id":"m1","image_file":"m1.png","ocr_text":"hi","dark_humor":"No","split":"train"}"#,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].target, None);
        assert_eq!(recs[0].intensity, None);
        assert!(!recs[0].dark_humor);
    }

    #[test]
    fn non_dark_with_target_is_rejected() {
        let err = parse(
            r#"{"id":"m1","image_file":"m1.png","ocr_text":"","dark_humor":"No","target":"Disability","split":"train"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::LabelConstraintViolation(ref id) if id == "m1"));
    }

    #[test]
    fn dark_without_intensity_is_rejected() {
        let err = parse(
            r#"{"id":"m2","image_file":"m2.png","dark_humor":"Yes","target":"Other","split":"test"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::LabelConstraintViolation(ref id) if id == "m2"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"id":"a","image_file":"a.png","dark_humor":"No","split":"train"}"#,
            "\n",
            "{not json\n"
        );
        assert!(matches!(parse(text), Err(DataError::MalformedLine { line: 2, .. })));
    }

    #[test]
    fn bad_enum_values_are_malformed() {
        for line in [
            r#"{"id":"a","image_file":"a.png","dark_humor":"maybe","split":"train"}"#,
            r#"{"id":"a","image_file":"a.png","dark_humor":"Yes","target":"Cats","intensity":1,"split":"train"}"#,
            r#"{"id":"a","image_file":"a.png","dark_humor":"Yes","target":"Other","intensity":4,"split":"train"}"#,
            r#"{"id":"","image_file":"a.png","dark_humor":"No","split":"train"}"#,
            r#"{"id":"a","image_file":"a.png","dark_humor":"No","split":"dev"}"#,
        ] {
            assert!(
                matches!(parse(line), Err(DataError::MalformedLine { line: 1, .. })),
                "{line}"
            );
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let line = r#"{"id":"dup","image_file":"a.png","dark_humor":"No","split":"train"}"#;
        let err = parse(&format!("{line}\n{line}\n")).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(ref id) if id == "dup"));
    }

    #[test]
    fn missing_file() {
        let err = load_manifest("/definitely/not/here.jsonl").unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    fn arb_record() -> impl Strategy<Value = MemeRecord> {
        (
            "[a-z0-9]{1,8}",
            ".{0,40}",
            proptest::option::of((0usize..6, 1u8..=3)),
            any::<bool>(),
        )
            .prop_map(|(id, text, labels, train)| {
                let split = if train { Split::Train } else { Split::Test };
                let mut r = match labels {
                    Some((t, i)) => MemeRecord::dark(
                        id,
                        split,
                        TargetCategory::from_index(t).unwrap(),
                        IntensityLevel::new(i).unwrap(),
                    ),
                    None => MemeRecord::non_dark(id, split),
                };
                r.ocr_text = text;
                r
            })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(records in proptest::collection::vec(arb_record(), 0..20)) {
            let mut seen = HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let mut buf = Vec::new();
            write_manifest(&mut buf, &records).unwrap();
            let back = parse_manifest(buf.as_slice()).unwrap();
            prop_assert_eq!(back, records);
        }
    }
}
