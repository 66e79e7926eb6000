//! Source manifests, the merged global label space and validation splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::LABEL_SPACE_VERSION;

/// Source dataset index, 1-based.
pub type SourceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub image_id: String,
    pub local_class: u32,
    pub camera_id: Option<i64>,
    pub timestamp: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceManifest {
    pub source_id: SourceId,
    pub records: Vec<RawRecord>,
}

impl SourceManifest {
    pub fn new(source_id: SourceId, records: Vec<RawRecord>) -> Result<Self> {
        let manifest = SourceManifest { source_id, records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_id == 0 {
            return Err(Error::config("source ids are 1-based; got 0"));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate image_id {:?} in source {}",
                    r.image_id, self.source_id
                )));
            }
        }
        Ok(())
    }

    /// Distinct local classes in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.local_class)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn read_jsonl(path: impl AsRef<Path>, source_id: SourceId) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: RawRecord = serde_json::from_str(&line).map_err(|e| {
                Error::data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(record);
        }
        Self::new(source_id, records)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Classes of one source inside a merged space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceClasses {
    pub source_id: SourceId,
    /// First global id owned by this source.
    pub offset: u32,
    /// Ascending local class ids; position `i` maps to `offset + i`.
    pub local_classes: Vec<u32>,
}

/// Mapping from `(source, local class)` to a contiguous global class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedLabelSpace {
    pub version: String,
    pub num_classes: u32,
    pub sources: Vec<SourceClasses>,
}

impl MergedLabelSpace {
    pub fn global(&self, source_id: SourceId, local_class: u32) -> Option<u32> {
        let src = self.sources.iter().find(|s| s.source_id == source_id)?;
        let pos = src.local_classes.binary_search(&local_class).ok()?;
        Some(src.offset + pos as u32)
    }

    pub fn decode(&self, global: u32) -> Option<(SourceId, u32)> {
        let src = self
            .sources
            .iter()
            .rev()
            .find(|s| s.offset <= global)?;
        let local = *src.local_classes.get((global - src.offset) as usize)?;
        Some((src.source_id, local))
    }

    pub fn source(&self, source_id: SourceId) -> Option<&SourceClasses> {
        self.sources.iter().find(|s| s.source_id == source_id)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let space: MergedLabelSpace = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if space.version != LABEL_SPACE_VERSION {
            return Err(Error::Format(format!(
                "unsupported label space version {:?}",
                space.version
            )));
        }
        Ok(space)
    }
}

/// Assign contiguous global ids, source by source in ascending `source_id`,
/// then by ascending local class.
pub fn merge_label_spaces(manifests: &[SourceManifest]) -> Result<MergedLabelSpace> {
    if manifests.is_empty() {
        return Err(Error::config("at least one manifest is required"));
    }
    let mut ordered: Vec<&SourceManifest> = manifests.iter().collect();
    ordered.sort_by_key(|m| m.source_id);
    for pair in ordered.windows(2) {
        if pair[0].source_id == pair[1].source_id {
            return Err(Error::config(format!(
                "duplicate source_id {}",
                pair[0].source_id
            )));
        }
    }
    let mut sources = Vec::with_capacity(ordered.len());
    let mut offset = 0u32;
    for m in ordered {
        if m.records.is_empty() {
            return Err(Error::data(format!("manifest of source {} is empty", m.source_id)));
        }
        let local_classes = m.classes();
        let n = local_classes.len() as u32;
        sources.push(SourceClasses {
            source_id: m.source_id,
            offset,
            local_classes,
        });
        offset += n;
    }
    Ok(MergedLabelSpace {
        version: LABEL_SPACE_VERSION.to_string(),
        num_classes: offset,
        sources,
    })
}

/// Restrict a space to one source, re-numbered from 0.
///
/// Returns the new space and the translation table from old global ids.
pub fn remap_for_target(
    space: &MergedLabelSpace,
    target: SourceId,
) -> Result<(MergedLabelSpace, BTreeMap<u32, u32>)> {
    let src = space
        .source(target)
        .ok_or_else(|| Error::config(format!("source {target} is not in the label space")))?;
    let translation = (0..src.local_classes.len() as u32)
        .map(|i| (src.offset + i, i))
        .collect();
    let remapped = MergedLabelSpace {
        version: LABEL_SPACE_VERSION.to_string(),
        num_classes: src.local_classes.len() as u32,
        sources: vec![SourceClasses {
            source_id: target,
            offset: 0,
            local_classes: src.local_classes.clone(),
        }],
    };
    Ok((remapped, translation))
}

/// A sample resolved against a label space.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub global_index: usize,
    pub source_id: SourceId,
    pub image_id: String,
    pub global_class: u32,
    pub camera_id: Option<i64>,
    pub timestamp: Option<i64>,
    pub feature: Option<Vec<f32>>,
}

/// Resolve a manifest's records against `space`.
///
/// `features`, when given, must be row-aligned with `manifest.records`.
/// Global indices start at `first_index`.
pub fn resolve_records(
    manifest: &SourceManifest,
    space: &MergedLabelSpace,
    features: Option<&[Vec<f32>]>,
    first_index: usize,
) -> Result<Vec<SampleRecord>> {
    if let Some(f) = features {
        if f.len() != manifest.records.len() {
            return Err(Error::Dimension {
                expected: manifest.records.len(),
                got: f.len(),
                context: "feature rows vs manifest records",
            });
        }
        check_uniform_dim(f.iter().map(Vec::len))?;
    }
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let global_class = space.global(manifest.source_id, r.local_class).ok_or_else(|| {
                Error::data(format!(
                    "class {} of source {} is not in the label space",
                    r.local_class, manifest.source_id
                ))
            })?;
            Ok(SampleRecord {
                global_index: first_index + i,
                source_id: manifest.source_id,
                image_id: r.image_id.clone(),
                global_class,
                camera_id: r.camera_id,
                timestamp: r.timestamp,
                feature: features.map(|f| f[i].clone()),
            })
        })
        .collect()
}

pub(crate) fn check_uniform_dim(mut dims: impl Iterator<Item = usize>) -> Result<Option<usize>> {
    let Some(first) = dims.next() else {
        return Ok(None);
    };
    for d in dims {
        if d != first {
            return Err(Error::Dimension {
                expected: first,
                got: d,
                context: "feature dimensionality must be uniform",
            });
        }
    }
    Ok(Some(first))
}

/// Train / validation partition of one source's original training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Local classes kept for training.
    pub train_classes: BTreeSet<u32>,
    /// Local classes held out as validation identities.
    pub val_classes: BTreeSet<u32>,
    /// Record positions (into the manifest) used for training.
    pub train: Vec<usize>,
    /// Record positions used as validation queries.
    pub val_query: Vec<usize>,
    /// Record positions of the validation gallery: the whole original
    /// training set.
    pub val_gallery: Vec<usize>,
}

/// Hold out `val_class_count` classes of the manifest's `train` records.
///
/// Validation queries are the first image of each held-out class seen from
/// each distinct camera. Deterministic in `seed`.
pub fn split_train_val(
    manifest: &SourceManifest,
    val_class_count: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let train_positions: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let mut classes: Vec<u32> = train_positions
        .iter()
        .map(|&i| manifest.records[i].local_class)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if val_class_count >= classes.len() {
        return Err(Error::config(format!(
            "val_class_count {val_class_count} must be below the class count {}",
            classes.len()
        )));
    }
    let mut rng = rng::stream(seed, purpose::VAL_SPLIT, manifest.source_id as u64, 0);
    classes.shuffle(&mut rng);
    let val_classes: BTreeSet<u32> = classes[..val_class_count].iter().copied().collect();
    let train_classes: BTreeSet<u32> = classes[val_class_count..].iter().copied().collect();

    let mut seen_views = HashSet::new();
    let mut val_query = Vec::new();
    let mut train = Vec::new();
    for &i in &train_positions {
        let r = &manifest.records[i];
        if val_classes.contains(&r.local_class) {
            if seen_views.insert((r.local_class, r.camera_id)) {
                val_query.push(i);
            }
        } else {
            train.push(i);
        }
    }
    Ok(SplitSpec {
        train_classes,
        val_classes,
        train,
        val_query,
        val_gallery: train_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest(source_id: SourceId, classes: &[u32]) -> SourceManifest {
        let records = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| RawRecord {
                image_id: format!("s{source_id}_{i}"),
                local_class: c,
                camera_id: Some((i % 3) as i64),
                timestamp: None,
                split: Split::Train,
            })
            .collect();
        SourceManifest::new(source_id, records).unwrap()
    }

    #[test]
    fn merge_offsets_second_source() {
        let a = manifest(1, &[0, 1, 1]);
        let b = manifest(2, &[0, 1, 2, 2]);
        let space = merge_label_spaces(&[b, a]).unwrap();
        assert_eq!(space.num_classes, 5);
        assert_eq!(space.global(2, 0), Some(2));
        assert_eq!(space.global(1, 1), Some(1));
        assert_eq!(space.decode(4), Some((2, 2)));
    }

    #[test]
    fn merge_makes_sparse_classes_contiguous() {
        let space = merge_label_spaces(&[manifest(1, &[7, 0, 5])]).unwrap();
        assert_eq!(space.num_classes, 3);
        let ids: Vec<_> = [0, 5, 7].iter().map(|&c| space.global(1, c).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn merge_rejects_duplicates_and_empty() {
        let err = merge_label_spaces(&[manifest(1, &[0]), manifest(1, &[1])]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let empty = SourceManifest::new(3, vec![]).unwrap();
        let err = merge_label_spaces(&[manifest(1, &[0]), empty]).unwrap_err();
        assert!(err.to_string().contains("source 3"));
        assert!(merge_label_spaces(&[]).is_err());
    }

    #[test]
    fn duplicate_image_ids_rejected() {
        let r = RawRecord {
            image_id: "x".into(),
            local_class: 0,
            camera_id: None,
            timestamp: None,
            split: Split::Train,
        };
        assert!(SourceManifest::new(1, vec![r.clone(), r]).is_err());
    }

    #[test]
    fn remap_drops_offsets() {
        let space = merge_label_spaces(&[manifest(1, &[0, 1]), manifest(2, &[0, 1, 2])]).unwrap();
        let (target, table) = remap_for_target(&space, 2).unwrap();
        assert_eq!(target.num_classes, 3);
        assert_eq!(table, BTreeMap::from([(2, 0), (3, 1), (4, 2)]));
        assert_eq!(target.global(2, 2), Some(2));
        assert!(remap_for_target(&space, 9).is_err());
    }

    #[test]
    fn remap_single_source_is_identity() {
        let space = merge_label_spaces(&[manifest(4, &[3, 1, 2])]).unwrap();
        let (target, table) = remap_for_target(&space, 4).unwrap();
        assert_eq!(target, space);
        assert!(table.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn split_is_deterministic() {
        let classes: Vec<u32> = (0..10).flat_map(|c| [c, c, c]).collect();
        let m = manifest(1, &classes);
        let a = split_train_val(&m, 2, 7).unwrap();
        let b = split_train_val(&m, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_classes.len(), 8);
        assert_eq!(a.val_classes.len(), 2);
        assert!(a.train_classes.is_disjoint(&a.val_classes));
        assert_eq!(a.val_gallery.len(), m.records.len());
        for &q in &a.val_query {
            assert!(a.val_classes.contains(&m.records[q].local_class));
        }
        for &t in &a.train {
            assert!(a.train_classes.contains(&m.records[t].local_class));
        }
    }

    #[test]
    fn split_zero_val_keeps_everything() {
        let m = manifest(1, &[0, 1, 2, 2]);
        let s = split_train_val(&m, 0, 1).unwrap();
        assert!(s.val_query.is_empty());
        assert_eq!(s.train.len(), 4);
        assert!(split_train_val(&m, 3, 1).is_err());
    }

    #[test]
    fn split_matches_cityflow_class_counts() {
        let classes: Vec<u32> = (0..333).collect();
        let s = split_train_val(&manifest(1, &classes), 78, 0).unwrap();
        assert_eq!(s.train_classes.len(), 255);
        assert_eq!(s.val_classes.len(), 78);
    }

    #[test]
    fn manifest_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = manifest(2, &[0, 4, 4]);
        m.write_jsonl(&path).unwrap();
        assert_eq!(SourceManifest::read_jsonl(&path, 2).unwrap(), m);
        let space = merge_label_spaces(&[m]).unwrap();
        let p = dir.path().join("space.json");
        space.save_json(&p).unwrap();
        assert_eq!(MergedLabelSpace::load_json(&p).unwrap(), space);
    }

    #[test]
    fn negative_class_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            r#"{"image_id":"a","local_class":-1,"camera_id":null,"timestamp":null,"split":"train"}"#,
        )
        .unwrap();
        assert!(SourceManifest::read_jsonl(&path, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sources() -> impl Strategy<Value = Vec<Vec<u32>>> {
            prop::collection::vec(prop::collection::vec(0u32..40, 1..30), 1..5)
        }

        proptest! {
            #[test]
            fn merge_roundtrips_and_conserves(srcs in sources(), rot in 0usize..30) {
                let manifests: Vec<_> = srcs.iter().enumerate()
                    .map(|(i, c)| manifest(i as u32 + 1, c)).collect();
                let space = merge_label_spaces(&manifests).unwrap();
                let distinct: usize = manifests.iter().map(|m| m.classes().len()).sum();
                prop_assert_eq!(space.num_classes as usize, distinct);

                let mut total = 0;
                let mut seen = BTreeSet::new();
                for m in &manifests {
                    let recs = resolve_records(m, &space, None, total).unwrap();
                    total += recs.len();
                    for (r, raw) in recs.iter().zip(&m.records) {
                        prop_assert_eq!(space.decode(r.global_class), Some((m.source_id, raw.local_class)));
                        seen.insert(r.global_class);
                    }
                }
                prop_assert_eq!(total, srcs.iter().map(Vec::len).sum::<usize>());
                prop_assert_eq!(seen.len(), distinct);
                prop_assert_eq!(seen.iter().next_back().copied(), Some(space.num_classes - 1));

                // order stability under permutation of records within a manifest
                let mut shuffled = manifests.clone();
                let n = shuffled[0].records.len();
                shuffled[0].records.rotate_left(rot % n);
                prop_assert_eq!(merge_label_spaces(&shuffled).unwrap(), space);
            }
        }
    }
}
