use super::split::{split_by_hash, SplitAssignment};
use super::{Demonstration, NormalizationSpec};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use std::collections::HashMap;

/// Dataset description written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub demos: usize,
    pub agents: usize,
    pub frames: usize,
    pub sample_rate_hz: f64,
    /// Whether the CSV already holds `[-1, 1]` coordinates.
    pub normalized: bool,
    pub normalization: NormalizationSpec,
    /// Explicit split membership by demo id; `None` means hash split.
    pub splits: Option<[Vec<String>; 3]>,
    /// Free-form provenance (scenario, seed, ...), echoed verbatim.
    pub extra: KvFile,
}

impl DatasetManifest {
    pub fn describe(
        demos: &[Demonstration],
        normalized: bool,
        normalization: NormalizationSpec,
    ) -> Self {
        Self {
            demos: demos.len(),
            agents: demos.first().map_or(0, |d| d.num_agents()),
            frames: demos.first().map_or(0, |d| d.len()),
            sample_rate_hz: demos.first().map_or(0.0, |d| d.sample_rate_hz),
            normalized,
            normalization,
            splits: None,
            extra: KvFile::new(),
        }
    }

    pub fn with_splits(mut self, split: &SplitAssignment) -> Self {
        let ids = |v: &[Demonstration]| v.iter().map(|d| d.id.clone()).collect();
        self.splits = Some([ids(&split.train), ids(&split.val), ids(&split.test)]);
        self
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("format", "teamtraj-manifest-1");
        kv.set("demos", self.demos);
        kv.set("agents", self.agents);
        kv.set("frames", self.frames);
        kv.set("sample_rate_hz", self.sample_rate_hz);
        kv.set("normalized", self.normalized);
        let n = &self.normalization;
        kv.set("norm.x_min", n.x_min);
        kv.set("norm.x_max", n.x_max);
        kv.set("norm.y_min", n.y_min);
        kv.set("norm.y_max", n.y_max);
        match &self.splits {
            Some([train, val, test]) => {
                kv.set("split", "explicit");
                kv.set("split.train", train.join(","));
                kv.set("split.val", val.join(","));
                kv.set("split.test", test.join(","));
            }
            None => kv.set("split", "hash"),
        }
        kv.extend(&self.extra);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if kv.get("format") != Some("teamtraj-manifest-1") {
            return Err(Error::Format("not a dataset manifest".into()));
        }
        let normalization = NormalizationSpec::new(
            kv.parse_req("norm.x_min")?,
            kv.parse_req("norm.x_max")?,
            kv.parse_req("norm.y_min")?,
            kv.parse_req("norm.y_max")?,
        )?;
        let list = |key: &str| -> Vec<String> {
            kv.get(key)
                .filter(|s| !s.is_empty())
                .map(|s| s.split(',').map(str::to_string).collect())
                .unwrap_or_default()
        };
        let splits = match kv.get("split") {
            Some("explicit") => Some([list("split.train"), list("split.val"), list("split.test")]),
            _ => None,
        };
        let known = [
            "format", "demos", "agents", "frames", "sample_rate_hz", "normalized",
            "norm.x_min", "norm.x_max", "norm.y_min", "norm.y_max", "split",
            "split.train", "split.val", "split.test",
        ];
        let mut extra = KvFile::new();
        for (k, v) in kv.iter().filter(|(k, _)| !known.contains(k)) {
            extra.set(k, v);
        }
        Ok(Self {
            demos: kv.parse_req("demos")?,
            agents: kv.parse_req("agents")?,
            frames: kv.parse_req("frames")?,
            sample_rate_hz: kv.parse_req("sample_rate_hz")?,
            normalized: kv.parse_req("normalized")?,
            normalization,
            splits,
            extra,
        })
    }

    /// Assigns demos to splits by the recorded ids, or by id hash when the
    /// manifest carries none. Unlisted demos go to train.
    pub fn split(&self, demos: &[Demonstration]) -> SplitAssignment {
        let Some(lists) = &self.splits else {
            return split_by_hash(demos);
        };
        let mut which: HashMap<&str, usize> = HashMap::new();
        for (i, ids) in lists.iter().enumerate() {
            for id in ids {
                which.insert(id.as_str(), i);
            }
        }
        let mut out = SplitAssignment::default();
        for d in demos {
            match which.get(d.id.as_str()).copied().unwrap_or(0) {
                1 => out.val.push(d.clone()),
                2 => out.test.push(d.clone()),
                _ => out.train.push(d.clone()),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_by_index, FrameSnapshot};

    #[test]
    fn round_trip_with_explicit_splits() {
        let demos: Vec<_> = (0..5)
            .map(|i| {
                Demonstration::new(
                    format!("d{i}"),
                    vec![FrameSnapshot::from_xy(&[[0.0, 0.0]]); 3],
                    5.0,
                )
            })
            .collect();
        let split = split_by_index(&demos, 3, 1);
        let mut m = DatasetManifest::describe(&demos, true, NormalizationSpec::basketball())
            .with_splits(&split);
        m.extra.set("scenario", "leader_follower");
        let text = m.to_kv().render();
        let back = DatasetManifest::from_kv(&KvFile::parse(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(&demos), split);
    }
}
