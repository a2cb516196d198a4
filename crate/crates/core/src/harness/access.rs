//! Subject data access with an audit trail, used to prove that held-out
//! subjects are only read for evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{DatasetManifest, EpochSet, SubjectRecord};
use crate::error::{Result, SslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub phase: Phase,
    pub subject_id: String,
    /// SHA-256 over the subject's samples and labels.
    pub digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub events: Vec<AccessEvent>,
}

impl AccessAudit {
    /// Digests read in `phase`.
    pub fn digests(&self, phase: Phase) -> Vec<&str> {
        self.events.iter().filter(|e| e.phase == phase).map(|e| e.digest.as_str()).collect()
    }

    /// Fails if any of `held_out` was read outside evaluation.
    pub fn check_isolation(&self, held_out: &[String]) -> Result<()> {
        match self.events.iter().find(|e| e.phase != Phase::Evaluate && held_out.contains(&e.subject_id)) {
            Some(e) => Err(SslError::Isolation(format!("held-out subject `{}` read during {:?}", e.subject_id, e.phase))),
            None => Ok(()),
        }
    }
}

pub fn record_digest(r: &SubjectRecord) -> String {
    let mut h = Sha256::new();
    h.update(r.subject_id.as_bytes());
    for v in &r.epochs {
        h.update(v.to_le_bytes());
    }
    h.update(r.labels.iter().map(|s| s.index() as u8).collect::<Vec<_>>());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// All subjects of a dataset held in memory.
#[derive(Debug, Clone)]
pub struct SubjectPool {
    records: BTreeMap<String, (SubjectRecord, String)>,
}

impl SubjectPool {
    pub fn from_records(records: Vec<SubjectRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate()?;
            let d = record_digest(&r);
            if map.insert(r.subject_id.clone(), (r, d)).is_some() {
                return Err(SslError::InvalidArgument("duplicate subject id".into()));
            }
        }
        Ok(Self { records: map })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Self::from_records(
            manifest.subject_ids().iter().map(|id| manifest.load_subject(id)).collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    /// Pools the epochs of `ids` (in the given order), logging each read.
    pub fn take(&self, audit: &mut AccessAudit, phase: Phase, ids: &[String]) -> Result<EpochSet> {
        let mut recs = Vec::with_capacity(ids.len());
        for id in ids {
            let (r, d) = self
                .records
                .get(id)
                .ok_or_else(|| SslError::InvalidArgument(format!("unknown subject `{id}`")))?;
            audit.events.push(AccessEvent { phase, subject_id: id.clone(), digest: d.clone() });
            recs.push(r);
        }
        EpochSet::from_records(recs)
    }
}
