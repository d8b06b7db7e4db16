use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::TrafficClass;
use crate::error::{Error, Result};
use crate::CLASS_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Review {
    Unreviewed,
    Confirmed,
    Corrected,
}

impl std::str::FromStr for Review {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unreviewed" => Ok(Review::Unreviewed),
            "confirmed" => Ok(Review::Confirmed),
            "corrected" => Ok(Review::Corrected),
            _ => Err(Error::Validation(format!("unknown review status {s:?}"))),
        }
    }
}

/// A reviewer's decision on one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Corrected { label: TrafficClass },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub image_ref: String,
    pub predicted: TrafficClass,
    pub probabilities: [f64; CLASS_COUNT],
    /// Milliseconds since the Unix epoch; 0 when timestamps are disabled.
    pub created_at: u64,
    pub review: Review,
    pub corrected_label: Option<TrafficClass>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        match (self.review, self.corrected_label) {
            (Review::Corrected, Some(label)) if label != self.predicted => {}
            (Review::Corrected, Some(_)) => {
                return Err(Error::Validation("corrected label equals the prediction".into()))
            }
            (Review::Corrected, None) => {
                return Err(Error::Validation("corrected record without a label".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Validation("label present on an uncorrected record".into()))
            }
            (_, None) => {}
        }
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "probabilities {:?} are not a distribution",
                self.probabilities
            )));
        }
        Ok(())
    }

    /// The verdict already applied, if any.
    pub fn verdict(&self) -> Option<Verdict> {
        match (self.review, self.corrected_label) {
            (Review::Confirmed, _) => Some(Verdict::Confirmed),
            (Review::Corrected, Some(label)) => Some(Verdict::Corrected { label }),
            _ => None,
        }
    }

    /// Label to train on: the correction if present, else the prediction.
    pub fn label(&self) -> TrafficClass {
        self.corrected_label.unwrap_or(self.predicted)
    }
}

/// Outcome of [`RecordStore::review`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewOutcome {
    pub record: PredictionRecord,
    /// False when the same verdict had already been applied.
    pub changed: bool,
}

/// Append-only record log.
///
/// Every state change appends the full record; on replay a later line for an
/// id replaces the earlier one. Ids are assigned in increasing order.
#[derive(Debug, Default)]
pub struct RecordStore {
    records: Vec<PredictionRecord>,
    index: HashMap<u64, usize>,
    next_id: u64,
    log: Option<(PathBuf, File)>,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self {
            next_id: 1,
            ..Self::default()
        }
    }

    /// Opens (creating if missing) the log at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self::in_memory();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |reason: String| Error::StateFile {
                    path: path.to_path_buf(),
                    line: n + 1,
                    reason,
                };
                let rec: PredictionRecord =
                    serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                rec.validate().map_err(|e| bad(e.to_string()))?;
                match store.index.get(&rec.id) {
                    Some(&i) => store.records[i] = rec,
                    None if rec.id >= store.next_id => {
                        store.next_id = rec.id + 1;
                        store.index.insert(rec.id, store.records.len());
                        store.records.push(rec);
                    }
                    None => return Err(bad(format!("id {} out of order", rec.id))),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    fn append(&mut self, rec: &PredictionRecord) -> Result<()> {
        if let Some((path, file)) = &mut self.log {
            let mut line = serde_json::to_vec(rec).expect("record serializes");
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(&*path, e))?;
            file.sync_data().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    /// Appends a new unreviewed record and returns it.
    pub fn insert(
        &mut self,
        image_ref: String,
        predicted: TrafficClass,
        probabilities: [f64; CLASS_COUNT],
        created_at: u64,
    ) -> Result<PredictionRecord> {
        let rec = PredictionRecord {
            id: self.next_id,
            image_ref,
            predicted,
            probabilities,
            created_at,
            review: Review::Unreviewed,
            corrected_label: None,
        };
        rec.validate()?;
        self.append(&rec)?;
        self.next_id += 1;
        self.index.insert(rec.id, self.records.len());
        self.records.push(rec.clone());
        Ok(rec)
    }

    /// Id the next inserted record will receive.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn get(&self, id: u64) -> Option<&PredictionRecord> {
        self.index.get(&id).map(|&i| &self.records[i])
    }

    /// All records in creation order.
    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records with the given status (all if `None`), oldest first.
    pub fn list(&self, status: Option<Review>, limit: Option<usize>) -> Vec<PredictionRecord> {
        self.records
            .iter()
            .filter(|r| status.is_none_or(|s| r.review == s))
            .take(limit.unwrap_or(usize::MAX))
            .cloned()
            .collect()
    }

    pub fn count(&self, status: Review) -> usize {
        self.records.iter().filter(|r| r.review == status).count()
    }

    /// Checks that `verdict` may be applied to record `id` without changing anything.
    /// Returns `Ok(true)` when it would be a repeat of the verdict already recorded.
    pub fn check_review(&self, id: u64, verdict: Verdict) -> Result<bool> {
        let rec = self.get(id).ok_or(Error::NotFound(id))?;
        if let Verdict::Corrected { label } = verdict {
            if label == rec.predicted {
                return Err(Error::Validation(format!(
                    "correction label {label} equals the prediction"
                )));
            }
        }
        match rec.verdict() {
            None => Ok(false),
            Some(v) if v == verdict => Ok(true),
            Some(_) => Err(Error::Conflict(format!("record {id} is already reviewed"))),
        }
    }

    /// Moves an unreviewed record to the verdict's status. Repeating the
    /// verdict already applied is accepted without change; any other verdict
    /// on a reviewed record is a conflict.
    pub fn review(&mut self, id: u64, verdict: Verdict) -> Result<ReviewOutcome> {
        if self.check_review(id, verdict)? {
            return Ok(ReviewOutcome {
                record: self.get(id).cloned().expect("checked above"),
                changed: false,
            });
        }
        let i = self.index[&id];
        let mut rec = self.records[i].clone();
        match verdict {
            Verdict::Confirmed => rec.review = Review::Confirmed,
            Verdict::Corrected { label } => {
                rec.review = Review::Corrected;
                rec.corrected_label = Some(label);
            }
        }
        self.append(&rec)?;
        self.records[i] = rec.clone();
        Ok(ReviewOutcome {
            record: rec,
            changed: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

    #[test]
    fn ids_increase_and_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut s = RecordStore::open(&path).unwrap();
        for n in 0..3 {
            let r = s.insert(format!("img{n}"), TrafficClass::Jam, P, 0).unwrap();
            assert_eq!(r.id, n + 1);
        }
        s.review(2, Verdict::Corrected { label: TrafficClass::Heavy }).unwrap();
        s.review(3, Verdict::Confirmed).unwrap();
        drop(s);

        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        let s = RecordStore::open(&path).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(2).unwrap().review, Review::Corrected);
        assert_eq!(s.get(2).unwrap().label(), TrafficClass::Heavy);
        assert_eq!(s.list(Some(Review::Unreviewed), None).len(), 1);
        assert_eq!(s.list(None, Some(2)).len(), 2);
        let mut s = s;
        assert_eq!(s.insert("x".into(), TrafficClass::Empty, P, 0).unwrap().id, 4);
    }

    #[test]
    fn review_transitions() {
        let mut s = RecordStore::in_memory();
        let id = s.insert("a".into(), TrafficClass::Heavy, P, 0).unwrap().id;
        assert!(matches!(s.review(99, Verdict::Confirmed), Err(Error::NotFound(99))));
        assert!(matches!(
            s.review(id, Verdict::Corrected { label: TrafficClass::Heavy }),
            Err(Error::Validation(_))
        ));
        let jam = Verdict::Corrected { label: TrafficClass::Jam };
        assert!(s.review(id, jam).unwrap().changed);
        assert!(!s.review(id, jam).unwrap().changed);
        assert!(matches!(s.review(id, Verdict::Confirmed), Err(Error::Conflict(_))));
        assert!(matches!(
            s.review(id, Verdict::Corrected { label: TrafficClass::Empty }),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn verdict_json() {
        let v: Verdict = serde_json::from_str(r#"{"verdict":"corrected","label":"Jam"}"#).unwrap();
        assert_eq!(v, Verdict::Corrected { label: TrafficClass::Jam });
        let v: Verdict = serde_json::from_str(r#"{"verdict":"confirmed"}"#).unwrap();
        assert_eq!(v, Verdict::Confirmed);
        assert!(serde_json::from_str::<Verdict>(r#"{"verdict":"corrected"}"#).is_err());
    }

    #[test]
    fn corrupt_log_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        fs::write(&path, "{\"id\":1}\n").unwrap();
        assert!(matches!(RecordStore::open(&path), Err(Error::StateFile { line: 1, .. })));
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut s = RecordStore::in_memory();
        assert!(s.insert("a".into(), TrafficClass::Jam, [0.5; 4], 0).is_err());
        assert!(s.is_empty());
    }
}
