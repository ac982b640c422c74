//! Input normalization: heterogeneous raw inputs become one canonical task
//! record.
//!
//! The categorization rules (extension to file type, input kind to task
//! type) live in a static [`CategorizationTable`] so the mapping is a
//! deterministic lookup rather than a judgement call. [`normalize`] is pure:
//! the same raw input always yields the byte-identical task record.

use chrono::{DateTime, Datelike, FixedOffset};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// How a raw input arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    File,
    Text,
    Event,
}

/// An un-normalized input as received from a source channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInput {
    pub kind: InputKind,
    /// File content, free text, or event name depending on `kind`.
    pub payload: String,
    pub filename: Option<String>,
    /// Source identifier, e.g. "email", "upload", "chat".
    pub channel: String,
    /// ISO-8601 instant at which the input was received.
    pub received_at: String,
    /// Instruction accompanying a file upload, if any.
    pub instruction: Option<String>,
}

impl RawInput {
    /// Checks the structural invariants: files carry a name and non-empty
    /// payload, and the receipt timestamp parses as ISO-8601.
    pub fn well_formed(&self) -> bool {
        let ts_ok = DateTime::parse_from_rfc3339(&self.received_at).is_ok();
        let file_ok = self.kind != InputKind::File
            || (self.filename.as_deref().is_some_and(|f| !f.is_empty()) && !self.payload.is_empty());
        ts_ok && file_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    DocumentParsing,
    UserCommand,
    EventTriggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    File,
    Text,
    FilePlusInstruction,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileType {
    Pdf,
    Png,
    Eml,
    Csv,
    Txt,
    None,
}

/// The canonical normalized task record consumed by every downstream stage.
///
/// Serializes to a single flat JSON object with exactly these eight fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_type: TaskType,
    pub input_format: InputFormat,
    pub file_name: String,
    pub file_type: FileType,
    pub timestamp: String,
    pub origin: String,
    pub instruction: String,
    pub meta: BTreeMap<String, String>,
}

impl TaskRecord {
    pub fn invariants_hold(&self) -> bool {
        (self.file_type == FileType::None) == self.file_name.is_empty()
    }

    /// Day of month of the task timestamp, when it parses.
    pub fn day_of_month(&self) -> Option<u32> {
        DateTime::parse_from_rfc3339(&self.timestamp)
            .ok()
            .map(|t| t.day())
    }

    /// Month-end tasks stage scheduling before report emission.
    pub fn is_month_end(&self) -> bool {
        self.day_of_month() == Some(30)
            || self.meta.get("event").is_some_and(|e| e.contains("month_end"))
    }

    pub fn parsed_timestamp(&self) -> Option<DateTime<FixedOffset>> {
        DateTime::parse_from_rfc3339(&self.timestamp).ok()
    }
}

#[derive(Debug, Error)]
#[error("cannot normalize input: {reason} (payload: {raw_payload:?})")]
pub struct NormalizationError {
    pub reason: String,
    /// Raw content echoed back so escalation paths keep full context.
    pub raw_payload: String,
}

/// Static lookup tables for categorization. Shipped with the engine;
/// overridable for bespoke channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorizationTable {
    pub extensions: BTreeMap<String, FileType>,
    /// channel -> origin label; unlisted channels map to themselves.
    pub origins: BTreeMap<String, String>,
}

impl Default for CategorizationTable {
    fn default() -> Self {
        let extensions = [
            ("pdf", FileType::Pdf),
            ("png", FileType::Png),
            ("eml", FileType::Eml),
            ("csv", FileType::Csv),
            ("txt", FileType::Txt),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CategorizationTable {
            extensions,
            origins: BTreeMap::new(),
        }
    }
}

impl CategorizationTable {
    fn file_type_for(&self, filename: &str) -> Option<FileType> {
        let ext = filename.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase())?;
        self.extensions.get(&ext).copied()
    }

    fn origin_for(&self, channel: &str) -> String {
        self.origins
            .get(channel)
            .cloned()
            .unwrap_or_else(|| channel.to_string())
    }
}

/// Maps a raw input to the canonical task record.
///
/// Categorization is a deterministic function of (kind, filename extension,
/// channel, payload prefix). Unknown file extensions fall back to
/// `file_type=none` with `task_type=document_parsing` when an instruction
/// says what to do with the file; otherwise normalization fails rather than
/// guessing.
pub fn normalize(raw: &RawInput, table: &CategorizationTable) -> Result<TaskRecord, NormalizationError> {
    if !raw.well_formed() {
        return Err(NormalizationError {
            reason: "raw input violates its invariants".into(),
            raw_payload: raw.payload.clone(),
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert("channel".to_string(), raw.channel.clone());

    let record = match raw.kind {
        InputKind::File => {
            let file_name = raw.filename.clone().unwrap_or_default();
            let instruction = raw.instruction.clone().unwrap_or_default();
            let file_type = match table.file_type_for(&file_name) {
                Some(ft) => ft,
                None if !instruction.is_empty() => {
                    // Safe fallback: keep the document task but mark the
                    // type unknown; the instruction carries intent.
                    meta.insert("unrecognized_extension".to_string(), "true".to_string());
                    FileType::None
                }
                None => {
                    return Err(NormalizationError {
                        reason: format!("unrecognized file extension in {file_name:?} and no instruction"),
                        raw_payload: raw.payload.clone(),
                    });
                }
            };
            TaskRecord {
                task_type: TaskType::DocumentParsing,
                input_format: if instruction.is_empty() {
                    InputFormat::File
                } else {
                    InputFormat::FilePlusInstruction
                },
                file_name: if file_type == FileType::None { String::new() } else { file_name },
                file_type,
                timestamp: raw.received_at.clone(),
                origin: table.origin_for(&raw.channel),
                instruction,
                meta,
            }
        }
        InputKind::Text => {
            if raw.payload.trim().is_empty() {
                return Err(NormalizationError {
                    reason: "empty text input has no category".into(),
                    raw_payload: raw.payload.clone(),
                });
            }
            TaskRecord {
                task_type: TaskType::UserCommand,
                input_format: InputFormat::Text,
                file_name: String::new(),
                file_type: FileType::None,
                timestamp: raw.received_at.clone(),
                origin: table.origin_for(&raw.channel),
                instruction: raw.payload.clone(),
                meta,
            }
        }
        InputKind::Event => {
            if raw.payload.trim().is_empty() {
                return Err(NormalizationError {
                    reason: "empty event name".into(),
                    raw_payload: raw.payload.clone(),
                });
            }
            meta.insert("event".to_string(), raw.payload.clone());
            TaskRecord {
                task_type: TaskType::EventTriggered,
                input_format: InputFormat::Event,
                file_name: String::new(),
                file_type: FileType::None,
                timestamp: raw.received_at.clone(),
                origin: table.origin_for(&raw.channel),
                instruction: String::new(),
                meta,
            }
        }
    };
    debug_assert!(record.invariants_hold());
    Ok(record)
}

#[derive(Debug, Error)]
#[error("no complete JSON object in text")]
pub struct ExtractionError {
    /// The full input, preserved for the error payload.
    pub input: String,
}

/// Returns the last syntactically complete top-level JSON object in `text`.
///
/// Balanced-brace scanning with string/escape awareness, so nested objects
/// and braces inside string literals parse correctly.
pub fn extract_last_json(text: &str) -> Result<serde_json::Value, ExtractionError> {
    let bytes = text.as_bytes();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    candidates.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    for (s, e) in candidates.into_iter().rev() {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text[s..e]) {
            if v.is_object() {
                return Ok(v);
            }
        }
    }
    Err(ExtractionError {
        input: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn raw_file(name: &str, channel: &str) -> RawInput {
        RawInput {
            kind: InputKind::File,
            payload: "content".into(),
            filename: Some(name.into()),
            channel: channel.into(),
            received_at: "2026-03-02T09:00:00Z".into(),
            instruction: None,
        }
    }

    #[test]
    fn pdf_upload_is_document_parsing() {
        let rec = normalize(&raw_file("inv_001.pdf", "upload"), &CategorizationTable::default()).unwrap();
        assert_eq!(rec.task_type, TaskType::DocumentParsing);
        assert_eq!(rec.input_format, InputFormat::File);
        assert_eq!(rec.file_type, FileType::Pdf);
        assert_eq!(rec.origin, "upload");
        assert!(rec.invariants_hold());
    }

    #[test]
    fn event_maps_to_event_triggered() {
        let raw = RawInput {
            kind: InputKind::Event,
            payload: "month_end_day30".into(),
            filename: None,
            channel: "scheduler".into(),
            received_at: "2026-03-30T00:00:00Z".into(),
            instruction: None,
        };
        let rec = normalize(&raw, &CategorizationTable::default()).unwrap();
        assert_eq!(rec.task_type, TaskType::EventTriggered);
        assert_eq!(rec.input_format, InputFormat::Event);
        assert_eq!(rec.file_type, FileType::None);
        assert!(rec.is_month_end());
    }

    #[test]
    fn empty_text_is_an_error_with_payload_echo() {
        let raw = RawInput {
            kind: InputKind::Text,
            payload: "".into(),
            filename: None,
            channel: "chat".into(),
            received_at: "2026-03-02T09:00:00Z".into(),
            instruction: None,
        };
        let err = normalize(&raw, &CategorizationTable::default()).unwrap_err();
        assert_eq!(err.raw_payload, "");
    }

    #[test]
    fn unknown_extension_without_instruction_fails() {
        let err = normalize(&raw_file("scan.xyz", "upload"), &CategorizationTable::default()).unwrap_err();
        assert!(err.reason.contains("unrecognized"));
    }

    #[test]
    fn unknown_extension_with_instruction_falls_back() {
        let mut raw = raw_file("scan.xyz", "upload");
        raw.instruction = Some("parse this invoice".into());
        let rec = normalize(&raw, &CategorizationTable::default()).unwrap();
        assert_eq!(rec.task_type, TaskType::DocumentParsing);
        assert_eq!(rec.file_type, FileType::None);
        assert_eq!(rec.input_format, InputFormat::FilePlusInstruction);
        assert!(rec.invariants_hold());
    }

    #[test]
    fn normalize_is_pure() {
        let raw = raw_file("inv_001.pdf", "email");
        let table = CategorizationTable::default();
        let a = serde_json::to_vec(&normalize(&raw, &table).unwrap()).unwrap();
        let b = serde_json::to_vec(&normalize(&raw, &table).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn task_record_serializes_with_eight_snake_case_fields() {
        let rec = normalize(&raw_file("a.pdf", "upload"), &CategorizationTable::default()).unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        let expected = [
            "task_type",
            "input_format",
            "file_name",
            "file_type",
            "timestamp",
            "origin",
            "instruction",
            "meta",
        ];
        // The wire form carries exactly the eight fields in declaration
        // order.
        let mut cursor = 0;
        for key in expected {
            let needle = format!("\"{key}\":");
            let pos = text[cursor..].find(&needle).unwrap_or_else(|| panic!("{key} missing or out of order"));
            cursor += pos + needle.len();
        }
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 8);
    }

    #[test]
    fn extract_last_json_picks_last_object() {
        let v = extract_last_json(r#"noise {"a":1} more {"b":2}"#).unwrap();
        assert_eq!(v, json!({"b": 2}));
    }

    #[test]
    fn extract_last_json_handles_nesting() {
        let s = r#"{"outer":{"inner":3}}"#;
        let v = extract_last_json(s).unwrap();
        // Reference parser on the same string must agree.
        let reference: serde_json::Value = serde_json::from_str(s).unwrap();
        assert_eq!(v, reference);
    }

    #[test]
    fn extract_last_json_errors_without_object() {
        let err = extract_last_json("no braces here").unwrap_err();
        assert_eq!(err.input, "no braces here");
    }

    #[test]
    fn extract_last_json_ignores_braces_in_strings() {
        let v = extract_last_json(r#"{"a":"}{"} tail"#).unwrap();
        assert_eq!(v, json!({"a": "}{"}));
    }

    proptest! {
        #[test]
        fn extract_last_json_recovers_appended_object(
            prefix in "([a-z }]|\\{x\\})*",
            key in "[a-z]{1,8}",
            n in 0i64..1000,
        ) {
            // Prefix may contain stray closing braces or balanced garbage
            // groups, but never an unbalanced trailing `{`.
            let obj = json!({ key: n });
            let text = format!("{prefix}{}", serde_json::to_string(&obj).unwrap());
            let got = extract_last_json(&text).unwrap();
            prop_assert_eq!(got, obj);
        }
    }
}
