//! Per-sample reward recycling: keep the best-scoring derained output seen so far.
//!
//! A candidate replaces the stored reward only when its score is strictly higher,
//! so among equal scores the earliest candidate wins. Candidates are snapped to
//! the 16-bit grid before scoring; the stored image therefore survives the PNG
//! snapshot bit for bit and its cached score stays equal to `scorer(image)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Pool, SampleId};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scorer::IqaScorer;

pub const REWARDS_DIR: &str = "rewards";
pub const INDEX_FILE: &str = "index.json";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardEntry {
    pub sample_id: SampleId,
    pub image: Arc<ImageTensor>,
    pub score: f64,
    pub updated_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    Inserted { score: f64 },
    Replaced { previous: f64, score: f64 },
    Kept { stored: f64, candidate: f64 },
    /// Scoring failed; the store is unchanged.
    ScoringFailed { error: String },
}

impl UpdateOutcome {
    pub fn changed(&self) -> bool {
        matches!(self, UpdateOutcome::Inserted { .. } | UpdateOutcome::Replaced { .. })
    }
}

/// One accepted update, in acceptance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    pub sample_id: SampleId,
    pub step: u64,
    pub score: f64,
}

/// Where training sends derained outputs and reads rewards back from.
pub trait RewardSink: Send + Sync {
    fn offer(&self, sample_id: &SampleId, candidate: &ImageTensor, step: u64) -> UpdateOutcome;

    fn get(&self, sample_id: &SampleId) -> Option<RewardEntry>;
}

pub struct RewardStore {
    scorer: Arc<dyn IqaScorer>,
    entries: RwLock<BTreeMap<SampleId, RewardEntry>>,
    events: Mutex<Vec<RewardEvent>>,
}

impl std::fmt::Debug for RewardStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardStore")
            .field("scorer", &self.scorer.name())
            .field("entries", &self.len())
            .finish()
    }
}

impl RewardStore {
    pub fn new(scorer: Arc<dyn IqaScorer>) -> Self {
        Self {
            scorer,
            entries: RwLock::new(BTreeMap::new()),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn scorer(&self) -> &Arc<dyn IqaScorer> {
        &self.scorer
    }

    pub fn offer(&self, sample_id: &SampleId, candidate: &ImageTensor, step: u64) -> UpdateOutcome {
        // owned copy: later mutation of the caller's image cannot reach the store
        let image = candidate.quantized_u16();
        let score = match self.scorer.score(&image) {
            Ok(s) if s.is_finite() => s,
            Ok(s) => {
                return UpdateOutcome::ScoringFailed {
                    error: format!("non-finite score {s}"),
                }
            }
            Err(e) => {
                return UpdateOutcome::ScoringFailed {
                    error: e.to_string(),
                }
            }
        };
        let mut entries = self.entries.write().expect("reward store lock poisoned");
        let outcome = match entries.get(sample_id) {
            None => UpdateOutcome::Inserted { score },
            Some(existing) if score > existing.score => UpdateOutcome::Replaced {
                previous: existing.score,
                score,
            },
            Some(existing) => {
                return UpdateOutcome::Kept {
                    stored: existing.score,
                    candidate: score,
                }
            }
        };
        entries.insert(
            sample_id.clone(),
            RewardEntry {
                sample_id: sample_id.clone(),
                image: Arc::new(image),
                score,
                updated_at: step,
            },
        );
        self.events
            .lock()
            .expect("reward event lock poisoned")
            .push(RewardEvent {
                sample_id: sample_id.clone(),
                step,
                score,
            });
        outcome
    }

    pub fn get(&self, sample_id: &SampleId) -> Option<RewardEntry> {
        self.entries
            .read()
            .expect("reward store lock poisoned")
            .get(sample_id)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("reward store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point-in-time copy of all entries, ordered by sample id.
    pub fn entries(&self) -> Vec<RewardEntry> {
        self.entries
            .read()
            .expect("reward store lock poisoned")
            .values()
            .cloned()
            .collect()
    }

    pub fn clear(&self) {
        self.entries.write().expect("reward store lock poisoned").clear();
    }

    /// Accepted updates since construction (not persisted).
    pub fn events(&self) -> Vec<RewardEvent> {
        self.events.lock().expect("reward event lock poisoned").clone()
    }

    pub fn mean_score(&self) -> Option<f64> {
        let entries = self.entries.read().expect("reward store lock poisoned");
        if entries.is_empty() {
            return None;
        }
        Some(entries.values().map(|e| e.score).sum::<f64>() / entries.len() as f64)
    }

    /// Fraction of the pool's sample ids that hold a reward.
    pub fn coverage(&self, pool: &Pool) -> f64 {
        let entries = self.entries.read().expect("reward store lock poisoned");
        let hit = pool.ids().filter(|id| entries.contains_key(*id)).count();
        hit as f64 / pool.len() as f64
    }

    /// Re-scores every entry and returns the ids whose cached score disagrees.
    pub fn verify(&self) -> Result<Vec<(SampleId, f64, f64)>> {
        let mut bad = Vec::new();
        for e in self.entries() {
            let fresh = self.scorer.score(&e.image)?;
            if fresh != e.score {
                bad.push((e.sample_id, e.score, fresh));
            }
        }
        Ok(bad)
    }

    /// Writes `<root>/rewards/` atomically: a staging directory is renamed into place.
    pub fn snapshot(&self, root: &Path) -> Result<()> {
        let entries = self.entries();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let target = root.join(REWARDS_DIR);
        let staging = root.join(format!("{REWARDS_DIR}.staging"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let mut index = RewardIndex {
            version: INDEX_VERSION,
            scorer: self.scorer.name().to_string(),
            entries: Vec::with_capacity(entries.len()),
        };
        for e in &entries {
            let bytes = e.image.encode_png16()?;
            let path = staging.join(sample_file_name(&e.sample_id));
            fs::write(&path, &bytes).map_err(|err| Error::io(&path, err))?;
            index.entries.push(IndexEntry {
                sample_id: e.sample_id.clone(),
                score: e.score,
                step: e.updated_at,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let index_path = staging.join(INDEX_FILE);
        fs::write(&index_path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&index_path, e))?;
        let old = root.join(format!("{REWARDS_DIR}.old"));
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        if target.exists() {
            fs::rename(&target, &old).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(&staging, &target).map_err(|e| Error::io(&staging, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    /// Loads a snapshot written by [`RewardStore::snapshot`]; any bad entry rejects the whole snapshot.
    pub fn restore(root: &Path, scorer: Arc<dyn IqaScorer>) -> Result<Self> {
        let dir = root.join(REWARDS_DIR);
        let index_path = dir.join(INDEX_FILE);
        let raw = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index = RewardIndex::from_json(&raw).map_err(|reason| Error::CorruptSnapshot {
            file: index_path.clone(),
            reason,
        })?;
        let mut map = BTreeMap::new();
        for entry in index.entries {
            let file = dir.join(sample_file_name(&entry.sample_id));
            let corrupt = |reason: String| Error::CorruptSnapshot {
                file: file.clone(),
                reason,
            };
            let bytes = fs::read(&file).map_err(|e| corrupt(e.to_string()))?;
            if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
                return Err(corrupt("sha256 mismatch".into()));
            }
            let image = ImageTensor::decode(&bytes).map_err(|e| corrupt(e.to_string()))?;
            map.insert(
                entry.sample_id.clone(),
                RewardEntry {
                    sample_id: entry.sample_id,
                    image: Arc::new(image),
                    score: entry.score,
                    updated_at: entry.step,
                },
            );
        }
        Ok(Self {
            scorer,
            entries: RwLock::new(map),
            events: Mutex::new(Vec::new()),
        })
    }
}

impl RewardSink for RewardStore {
    fn offer(&self, sample_id: &SampleId, candidate: &ImageTensor, step: u64) -> UpdateOutcome {
        RewardStore::offer(self, sample_id, candidate, step)
    }

    fn get(&self, sample_id: &SampleId) -> Option<RewardEntry> {
        RewardStore::get(self, sample_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: SampleId,
    pub score: f64,
    pub step: u64,
    pub sha256: String,
}

/// Contents of `rewards/index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardIndex {
    pub version: u32,
    pub scorer: String,
    pub entries: Vec<IndexEntry>,
}

impl RewardIndex {
    /// Parses and validates an index; the error string describes the first problem.
    pub fn from_json(bytes: &[u8]) -> std::result::Result<Self, String> {
        let index: RewardIndex = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        if index.version != INDEX_VERSION {
            return Err(format!("unsupported index version {}", index.version));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &index.entries {
            if !e.score.is_finite() {
                return Err(format!("non-finite score for {}", e.sample_id));
            }
            if e.sha256.len() != 64 || !e.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("malformed sha256 for {}", e.sample_id));
            }
            if e.sample_id.0.is_empty() {
                return Err("empty sample id".into());
            }
            if !seen.insert(&e.sample_id) {
                return Err(format!("duplicate sample id {}", e.sample_id));
            }
        }
        Ok(index)
    }
}

/// File name for a sample's reward image; bytes outside `[A-Za-z0-9_.-]` are `%XX`-escaped.
pub fn sample_file_name(id: &SampleId) -> String {
    let mut out = String::with_capacity(id.0.len() + 4);
    for b in id.0.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out.push_str(".png");
    out
}

pub fn rewards_dir(root: &Path) -> PathBuf {
    root.join(REWARDS_DIR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PoolItem, PoolKind};

    /// Scores an image by its first pixel value.
    struct FirstPixel;

    impl IqaScorer for FirstPixel {
        fn name(&self) -> &str {
            "first-pixel"
        }

        fn score(&self, img: &ImageTensor) -> Result<f64> {
            Ok(img.data()[0] as f64)
        }
    }

    struct Failing;

    impl IqaScorer for Failing {
        fn name(&self) -> &str {
            "failing"
        }

        fn score(&self, _: &ImageTensor) -> Result<f64> {
            Err(Error::Scoring {
                message: "backend down".into(),
                raw: "oops".into(),
            })
        }
    }

    fn img(v: f32) -> ImageTensor {
        ImageTensor::filled(8, 8, 3, v).unwrap().quantized_u16()
    }

    fn score_of(v: f32) -> f64 {
        img(v).data()[0] as f64
    }

    fn id(s: &str) -> SampleId {
        SampleId::new(s)
    }

    #[test]
    fn insert_replace_keep() {
        let store = RewardStore::new(Arc::new(FirstPixel));
        assert_eq!(store.get(&id("a")), None);
        assert_eq!(store.offer(&id("a"), &img(0.6), 1), UpdateOutcome::Inserted { score: score_of(0.6) });
        assert!(matches!(store.offer(&id("a"), &img(0.7), 2), UpdateOutcome::Replaced { .. }));
        assert!(matches!(store.offer(&id("a"), &img(0.7), 3), UpdateOutcome::Kept { .. }));
        assert!(matches!(store.offer(&id("a"), &img(0.6), 4), UpdateOutcome::Kept { .. }));
        let e = store.get(&id("a")).unwrap();
        assert_eq!(e.score, score_of(0.7));
        assert_eq!(e.updated_at, 2);
    }

    #[test]
    fn kept_entry_is_bit_identical() {
        let store = RewardStore::new(Arc::new(FirstPixel));
        let first = img(0.5);
        store.offer(&id("x"), &first, 0);
        store.offer(&id("x"), &img(0.2), 1);
        assert_eq!(*store.get(&id("x")).unwrap().image, first);
    }

    #[test]
    fn stored_copy_is_detached_from_caller() {
        let store = RewardStore::new(Arc::new(FirstPixel));
        let mut live = img(0.4);
        store.offer(&id("x"), &live, 0);
        live = img(0.9);
        assert_ne!(*store.get(&id("x")).unwrap().image, live);
        assert_eq!(*store.get(&id("x")).unwrap().image, img(0.4));
    }

    #[test]
    fn scoring_failure_keeps_existing() {
        let store = RewardStore::new(Arc::new(Failing));
        let out = store.offer(&id("x"), &img(0.4), 0);
        assert!(matches!(out, UpdateOutcome::ScoringFailed { .. }));
        assert!(store.get(&id("x")).is_none());
    }

    #[test]
    fn coverage_counts_pool_ids() {
        let store = RewardStore::new(Arc::new(FirstPixel));
        let pool = Pool::new(
            PoolKind::Rainy,
            (0..4)
                .map(|i| PoolItem {
                    id: SampleId::from(i),
                    image: img(0.1),
                })
                .collect(),
        )
        .unwrap();
        store.offer(&SampleId::from(1), &img(0.3), 0);
        store.offer(&id("other"), &img(0.3), 0);
        assert_eq!(store.coverage(&pool), 0.25);
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = RewardStore::new(Arc::new(FirstPixel));
        store.offer(&id("plain"), &img(0.3), 3);
        store.offer(&id("sub/dir name.png"), &img(0.8), 5);
        store.snapshot(dir.path()).unwrap();
        let back = RewardStore::restore(dir.path(), Arc::new(FirstPixel)).unwrap();
        assert_eq!(back.entries(), store.entries());
        assert!(back.verify().unwrap().is_empty());

        // snapshot again over the existing one
        store.offer(&id("plain"), &img(0.9), 6);
        store.snapshot(dir.path()).unwrap();
        assert_eq!(RewardStore::restore(dir.path(), Arc::new(FirstPixel)).unwrap().entries(), store.entries());

        let victim = rewards_dir(dir.path()).join(sample_file_name(&id("plain")));
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        match RewardStore::restore(dir.path(), Arc::new(FirstPixel)) {
            Err(Error::CorruptSnapshot { file, .. }) => assert_eq!(file, victim),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn index_validation() {
        assert!(RewardIndex::from_json(b"{").is_err());
        assert!(RewardIndex::from_json(br#"{"version":2,"scorer":"x","entries":[]}"#).is_err());
        let dup = br#"{"version":1,"scorer":"x","entries":[
            {"sample_id":"a","score":1.0,"step":0,"sha256":"0000000000000000000000000000000000000000000000000000000000000000"},
            {"sample_id":"a","score":1.0,"step":0,"sha256":"0000000000000000000000000000000000000000000000000000000000000000"}]}"#;
        assert!(RewardIndex::from_json(dup).unwrap_err().contains("duplicate"));
    }

    #[test]
    fn file_names_escape_separators() {
        assert_eq!(sample_file_name(&id("12")), "12.png");
        assert_eq!(sample_file_name(&id("a/b c")), "a%2Fb%20c.png");
    }
}
