//! Append-only annotation log with an in-memory index.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use babyrlhf_core::preference::{
    disagreements, export_pairs, krippendorff_alpha, presentation_order, BwsAnnotation, ChoiceSet, PreferencePair,
    SET_SIZE,
};
use serde::Serialize;

pub const LOG_FILE: &str = "annotations.jsonl";
/// Annotator id recorded on consensus submissions.
pub const CONSENSUS_ANNOTATOR: &str = "consensus";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Validation(String),
    #[error("unknown choice set {0}")]
    NotFound(u64),
    #[error("annotator {annotator} already judged set {set_id}")]
    Conflict { set_id: u64, annotator: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] babyrlhf_core::Error),
}

/// A set as an annotator sees it: stories in presentation order, generators hidden.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresentedSet {
    pub set_id: u64,
    pub prompt: String,
    pub stories: Vec<PresentedStory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresentedStory {
    pub idx: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub per_annotator: BTreeMap<String, usize>,
    pub total_sets: usize,
    pub total_annotations: usize,
    pub consensus: usize,
    pub alpha: Option<f64>,
    pub alpha_undefined: bool,
    pub disagreements: Vec<u64>,
}

pub struct AnnotationStore {
    path: PathBuf,
    file: File,
    sets: BTreeMap<u64, ChoiceSet>,
    records: Vec<BwsAnnotation>,
    seen: HashSet<(u64, String)>,
    seed: u64,
}

impl AnnotationStore {
    /// Opens (or creates) `data_dir/annotations.jsonl` and replays it. A torn
    /// final line, left by a crash before the write was acknowledged, is cut off.
    pub fn open(data_dir: &Path, sets: Vec<ChoiceSet>, seed: u64) -> Result<Self, StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        std::fs::create_dir_all(data_dir).map_err(io(data_dir))?;
        let mut by_id = BTreeMap::new();
        for s in sets {
            s.validate()?;
            let id = s.id;
            if by_id.insert(id, s).is_some() {
                return Err(StoreError::Validation(format!("choice set id {id} appears twice")));
            }
        }
        let path = data_dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io(&path))?;
        let mut store = Self {
            path: path.clone(),
            file: file.try_clone().map_err(io(&path))?,
            sets: by_id,
            records: Vec::new(),
            seen: HashSet::new(),
            seed,
        };
        let mut reader = BufReader::new(&mut file);
        let mut offset = 0u64;
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io(&path))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                offset += n as u64;
                continue;
            }
            match serde_json::from_str::<BwsAnnotation>(line.trim_end()) {
                Ok(a) => {
                    store.index(a)?;
                    offset += n as u64;
                }
                Err(_) if !complete => {
                    log::warn!("{}: dropping torn final line {lineno}", path.display());
                    store.file.set_len(offset).map_err(io(&path))?;
                    break;
                }
                Err(e) => {
                    return Err(StoreError::Validation(format!("{}:{lineno}: {e}", path.display())));
                }
            }
        }
        store.file.seek(SeekFrom::End(0)).map_err(io(&path))?;
        Ok(store)
    }

    fn index(&mut self, a: BwsAnnotation) -> Result<(), StoreError> {
        a.validate()?;
        if !self.sets.contains_key(&a.set_id) {
            return Err(StoreError::NotFound(a.set_id));
        }
        if !a.consensus && !self.seen.insert((a.set_id, a.annotator_id.clone())) {
            return Err(StoreError::Conflict {
                set_id: a.set_id,
                annotator: a.annotator_id,
            });
        }
        self.records.push(a);
        Ok(())
    }

    fn append(&mut self, a: BwsAnnotation) -> Result<BwsAnnotation, StoreError> {
        let mut line = serde_json::to_string(&a).map_err(babyrlhf_core::Error::from)?;
        line.push('\n');
        let path = self.path.clone();
        let io = |source| StoreError::Io { path, source };
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(io)?;
        self.index(a.clone())?;
        Ok(a)
    }

    pub fn sets(&self) -> impl Iterator<Item = &ChoiceSet> {
        self.sets.values()
    }

    pub fn records(&self) -> &[BwsAnnotation] {
        &self.records
    }

    pub fn order(&self, set_id: u64, annotator: &str) -> [usize; SET_SIZE] {
        presentation_order(self.seed, set_id, annotator)
    }

    /// Lowest-id set this annotator has not judged yet.
    pub fn next_set(&self, annotator: &str) -> Option<PresentedSet> {
        let set = self
            .sets
            .values()
            .find(|s| !self.seen.contains(&(s.id, annotator.to_string())))?;
        let order = self.order(set.id, annotator);
        Some(PresentedSet {
            set_id: set.id,
            prompt: set.prompt.text.clone(),
            stories: order
                .iter()
                .enumerate()
                .map(|(idx, &c)| PresentedStory {
                    idx,
                    text: set.stories[c].text.clone(),
                })
                .collect(),
        })
    }

    fn check(&self, set_id: u64, best: usize, worst: usize) -> Result<(), StoreError> {
        if !self.sets.contains_key(&set_id) {
            return Err(StoreError::NotFound(set_id));
        }
        if best >= SET_SIZE || worst >= SET_SIZE {
            return Err(StoreError::Validation(format!(
                "best and worst must be below {SET_SIZE}, got {best} and {worst}"
            )));
        }
        if best == worst {
            return Err(StoreError::Validation("best and worst must differ".into()));
        }
        Ok(())
    }

    /// Records a judgment given in presentation positions; the persisted
    /// record uses canonical story indices.
    pub fn submit(&mut self, set_id: u64, annotator: &str, best: usize, worst: usize) -> Result<BwsAnnotation, StoreError> {
        if annotator.trim().is_empty() {
            return Err(StoreError::Validation("annotator id is empty".into()));
        }
        if annotator == CONSENSUS_ANNOTATOR {
            return Err(StoreError::Validation(format!("`{CONSENSUS_ANNOTATOR}` is reserved")));
        }
        self.check(set_id, best, worst)?;
        if self.seen.contains(&(set_id, annotator.to_string())) {
            return Err(StoreError::Conflict {
                set_id,
                annotator: annotator.to_string(),
            });
        }
        let order = self.order(set_id, annotator);
        self.append(BwsAnnotation {
            set_id,
            annotator_id: annotator.to_string(),
            best: order[best],
            worst: order[worst],
            timestamp: now_ms(),
            consensus: false,
        })
    }

    /// Reconciled judgment in canonical indices. Later consensus records
    /// supersede earlier ones at export.
    pub fn submit_consensus(&mut self, set_id: u64, best: usize, worst: usize) -> Result<BwsAnnotation, StoreError> {
        self.check(set_id, best, worst)?;
        self.append(BwsAnnotation {
            set_id,
            annotator_id: CONSENSUS_ANNOTATOR.to_string(),
            best,
            worst,
            timestamp: now_ms(),
            consensus: true,
        })
    }

    pub fn stats(&self) -> Stats {
        let mut per_annotator = BTreeMap::new();
        for a in self.records.iter().filter(|a| !a.consensus) {
            *per_annotator.entry(a.annotator_id.clone()).or_insert(0) += 1;
        }
        let alpha = krippendorff_alpha(&self.records).ok();
        Stats {
            per_annotator,
            total_sets: self.sets.len(),
            total_annotations: self.records.iter().filter(|a| !a.consensus).count(),
            consensus: self.records.iter().filter(|a| a.consensus).count(),
            alpha,
            alpha_undefined: alpha.is_none(),
            // the index rules out the duplicate records that make this fail
            disagreements: disagreements(&self.records).unwrap_or_default(),
        }
    }

    pub fn export_pairs(&self) -> Result<Vec<PreferencePair>, StoreError> {
        let sets: Vec<ChoiceSet> = self.sets.values().cloned().collect();
        Ok(export_pairs(&self.records, &sets)?)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
