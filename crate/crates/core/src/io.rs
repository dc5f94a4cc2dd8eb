//! File formats: atomic writes, line-delimited dataset records, rejection
//! logs and the optimizer-state sidecar of a checkpoint.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{CuratedRecord, CurationDecision, FilterInput};
use crate::encoder::{load_params, save_params};
use crate::error::{Error, Result};
use crate::numbers::NumberWord;
use crate::scene::{CaptionMode, SceneSpec};
use crate::training::{OptimizerState, TrainState};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// First line of every record file.
pub const RECORDS_HEADER: &str = "# countlab records v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// One line of a record file. `mode` and `number` are optional annotations:
/// the generator tags the caption mode, curation tags the verified number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub scene: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<CaptionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<u32>,
}

impl FilterInput for DatasetRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn scene(&self) -> &SceneSpec {
        &self.scene
    }
    fn caption(&self) -> &str {
        &self.caption
    }
}

impl DatasetRecord {
    /// Converts a record carrying a `number` annotation.
    pub fn to_curated(&self) -> Result<CuratedRecord> {
        let number = self
            .number
            .and_then(NumberWord::from_value)
            .ok_or_else(|| Error::data(format!("record {} has no valid number annotation", self.id)))?;
        Ok(CuratedRecord {
            id: self.id.clone(),
            caption: self.caption.clone(),
            number,
            scene: self.scene.clone(),
        })
    }

    pub fn from_curated(r: &CuratedRecord, split: Split) -> Self {
        DatasetRecord {
            id: r.id.clone(),
            split,
            caption: r.caption.clone(),
            scene: r.scene.clone(),
            mode: None,
            number: Some(r.number.value()),
        }
    }
}

/// A parsed record file; `lines[i]` is the 1-based line of `records[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecordFile {
    pub records: Vec<DatasetRecord>,
    pub lines: Vec<usize>,
}

pub fn records_to_string(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::with_capacity(64 + records.len() * 256);
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::data(format!("duplicate record id {}", r.id)));
        }
        let line = serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses record-file text. `path` is only used in error messages.
pub fn parse_records(text: &str, path: &Path) -> Result<RecordFile> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == RECORDS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{RECORDS_HEADER}`"))),
    }
    let mut out = RecordFile::default();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !seen.insert(r.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate record id {}", r.id)));
        }
        out.records.push(r);
        out.lines.push(lineno);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_atomic(path, records_to_string(records)?.as_bytes())
}

pub fn read_records(path: &Path) -> Result<RecordFile> {
    parse_records(&read_to_string(path)?, path)
}

/// Reads a file of curated records (each must carry a number annotation).
pub fn read_curated(path: &Path) -> Result<Vec<CuratedRecord>> {
    let file = read_records(path)?;
    file.records
        .iter()
        .zip(&file.lines)
        .map(|(r, &line)| {
            r.to_curated().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Plain id list: one id per line, `#` comments and blank lines ignored.
pub fn parse_id_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// `line,id,reason` for every rejected record.
pub fn rejection_log_csv(decisions: &[CurationDecision], lines: &[usize]) -> String {
    let mut s = String::from("line,id,reason\n");
    for (d, line) in decisions.iter().zip(lines) {
        if let Some(reason) = d.reject_reason() {
            s.push_str(&format!("{line},{},{}\n", d.record_id, reason.name()));
        }
    }
    s
}

const OPT_MAGIC: &[u8; 8] = b"CNTLABO\0";
const OPT_VERSION: u32 = 1;

/// Optimizer sidecar: magic, u32 version, u64 next step, u64 update count,
/// u64 length, then both moment vectors as little-endian f64.
pub fn optimizer_to_bytes(step: usize, opt: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 16 * opt.first.len());
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&OPT_VERSION.to_le_bytes());
    for v in [step as u64, opt.updates, opt.first.len() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in opt.first.iter().chain(&opt.second) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn optimizer_from_bytes(bytes: &[u8]) -> Result<(usize, OptimizerState)> {
    let short = || Error::data("optimizer state truncated");
    if bytes.len() < 36 || &bytes[..8] != OPT_MAGIC {
        return Err(Error::data("not an optimizer state file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().map_err(|_| short())?);
    if version != OPT_VERSION {
        return Err(Error::data(format!("unsupported optimizer state version {version}")));
    }
    let u = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (step, updates, len) = (u(12) as usize, u(20), u(28) as usize);
    let payload = &bytes[36..];
    if payload.len() != 16 * len {
        return Err(short());
    }
    let xs: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (first, second) = xs.split_at(len);
    Ok((
        step,
        OptimizerState {
            first: first.to_vec(),
            second: second.to_vec(),
            updates,
        },
    ))
}

/// Path of the optimizer sidecar next to a parameter file.
pub fn sidecar_path(params_path: &Path) -> PathBuf {
    let mut s = params_path.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

/// Saves parameters and the optimizer sidecar.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    save_params(&state.params, path)?;
    write_atomic(&sidecar_path(path), &optimizer_to_bytes(state.step, &state.optimizer))
}

/// Loads a checkpoint for resuming; the sidecar must exist.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let params = load_params(path)?;
    let side = sidecar_path(path);
    let mut bytes = Vec::new();
    std::fs::File::open(&side)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&side, e))?;
    let (step, optimizer) =
        optimizer_from_bytes(&bytes).map_err(|e| Error::data(format!("{}: {e}", side.display())))?;
    if optimizer.first.len() != params.theta().len() {
        return Err(Error::data(format!(
            "{}: optimizer state has {} coordinates, parameters have {}",
            side.display(),
            optimizer.first.len(),
            params.theta().len()
        )));
    }
    Ok(TrainState {
        params,
        optimizer,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneSampler;

    fn record(id: &str, split: Split) -> DatasetRecord {
        DatasetRecord {
            id: id.into(),
            split,
            caption: "a photo of three dogs".into(),
            scene: SceneSampler::default().sample(id, 7).unwrap(),
            mode: Some(CaptionMode::TrueCount),
            number: None,
        }
    }

    #[test]
    fn empty_file_is_just_the_header() {
        let s = records_to_string(&[]).unwrap();
        assert_eq!(s, format!("{RECORDS_HEADER}\n"));
        assert!(parse_records(&s, Path::new("x")).unwrap().records.is_empty());
    }

    #[test]
    fn records_round_trip() {
        let rs = vec![record("a", Split::Train), record("b", Split::Holdout)];
        let s = records_to_string(&rs).unwrap();
        let back = parse_records(&s, Path::new("x")).unwrap();
        assert_eq!(back.records, rs);
        assert_eq!(back.lines, vec![2, 3]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = serde_json::to_string(&record("a", Split::Train)).unwrap();
        let text = format!("{RECORDS_HEADER}\n{good}\n{{\"id\": 3}}\n");
        match parse_records(&text, Path::new("pool.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = format!("{RECORDS_HEADER}\n{good}\n{good}\n");
        match parse_records(&dup, Path::new("pool.jsonl")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_records(&good, Path::new("p")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(record("a", Split::Train)).unwrap();
        v["colour"] = "red".into();
        let text = format!("{RECORDS_HEADER}\n{v}\n");
        assert!(parse_records(&text, Path::new("p")).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let opt = OptimizerState {
            first: vec![1.0, -2.5, 3.25],
            second: vec![0.5, 0.0, 1e-300],
            updates: 42,
        };
        let (step, back) = optimizer_from_bytes(&optimizer_to_bytes(17, &opt)).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, opt);
        let bytes = optimizer_to_bytes(1, &opt);
        assert!(optimizer_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn id_list_ignores_comments() {
        let ids = parse_id_list("# dropped\na\n\n  b  \n");
        assert_eq!(ids, ["a", "b"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/file.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
