use serde::{Deserialize, Serialize};

use super::phash::{hamming, PHash};
use super::ImageRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedImage {
    pub record: ImageRecord,
    pub hash: PHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DupKind {
    Exact,
    Near,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupCluster {
    pub representative: String,
    /// All member ids, representative first.
    pub members: Vec<String>,
    pub kind: DupKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupResult {
    pub retained: Vec<ImageRecord>,
    pub clusters: Vec<DupCluster>,
}

impl DedupResult {
    pub fn near_clusters(&self) -> impl Iterator<Item = &DupCluster> {
        self.clusters.iter().filter(|c| c.kind == DupKind::Near)
    }
}

/// Leader clustering in input order: an image joins the first representative
/// within the threshold, otherwise it becomes a representative itself. Every
/// member is therefore within the threshold of its representative.
fn leader_clusters(hashes: &[PHash], thresh: u32) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, &h) in hashes.iter().enumerate() {
        match clusters.iter_mut().find(|c| hamming(hashes[c[0]], h) <= thresh) {
            Some(c) => c.push(i),
            None => clusters.push(vec![i]),
        }
    }
    clusters
}

/// Collapses exact duplicates to their representative and records near
/// duplicates (kept in full) for the split constraints.
///
/// # Panics
/// When `exact_thresh > near_thresh`.
pub fn dedup(images: &[HashedImage], exact_thresh: u32, near_thresh: u32) -> DedupResult {
    assert!(exact_thresh <= near_thresh, "exact threshold must not exceed near threshold");
    let hashes: Vec<PHash> = images.iter().map(|i| i.hash).collect();
    let mut clusters = Vec::new();

    let exact = leader_clusters(&hashes, exact_thresh);
    let reps: Vec<usize> = exact.iter().map(|c| c[0]).collect();
    for c in exact.iter().filter(|c| c.len() > 1) {
        clusters.push(DupCluster {
            representative: images[c[0]].record.id.clone(),
            members: c.iter().map(|&i| images[i].record.id.clone()).collect(),
            kind: DupKind::Exact,
        });
    }

    let rep_hashes: Vec<PHash> = reps.iter().map(|&i| hashes[i]).collect();
    for c in leader_clusters(&rep_hashes, near_thresh).iter().filter(|c| c.len() > 1) {
        clusters.push(DupCluster {
            representative: images[reps[c[0]]].record.id.clone(),
            members: c.iter().map(|&j| images[reps[j]].record.id.clone()).collect(),
            kind: DupKind::Near,
        });
    }

    DedupResult { retained: reps.iter().map(|&i| images[i].record.clone()).collect(), clusters }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Origin;
    use proptest::prelude::*;

    fn img(id: &str, hash: PHash) -> HashedImage {
        HashedImage {
            record: ImageRecord {
                id: id.into(),
                path: format!("{id}.png"),
                class_names: vec!["bulldozer".into()],
                origin: Origin::Original,
                width: 10,
                height: 10,
            },
            hash,
        }
    }

    #[test]
    fn identical_copies_collapse() {
        let r = dedup(&[img("a", 7), img("b", 7), img("c", 7)], 0, 10);
        assert_eq!(r.retained.len(), 1);
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].kind, DupKind::Exact);
        assert_eq!(r.clusters[0].members, vec!["a", "b", "c"]);
    }

    #[test]
    fn lookalikes_are_retained_as_near_cluster() {
        let r = dedup(&[img("shot1", 0), img("shot2", 0b11_1111)], 0, 10);
        assert_eq!(r.retained.len(), 2);
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].kind, DupKind::Near);
    }

    #[test]
    fn distinct_images_untouched() {
        let input = [img("a", 0), img("b", u64::MAX), img("c", 0xFFFF_FFFF)];
        let r = dedup(&input, 0, 10);
        assert_eq!(r.retained.len(), 3);
        assert!(r.clusters.is_empty());
        assert_eq!(dedup(&[], 0, 10), DedupResult::default());
    }

    proptest! {
        #[test]
        fn retained_images_are_never_exact_duplicates(
            hashes in prop::collection::vec(prop::sample::select(vec![0u64, 1, 3, 0xFF, 0xF0F0, u64::MAX, 0x8000_0000_0000_0001]), 0..30),
            exact in 0u32..4, extra in 0u32..12,
        ) {
            let images: Vec<HashedImage> = hashes.iter().enumerate().map(|(i, &h)| img(&format!("i{i}"), h)).collect();
            let r = dedup(&images, exact, exact + extra);
            let by_id = |id: &str| images.iter().find(|i| i.record.id == id).unwrap().hash;
            for (i, a) in r.retained.iter().enumerate() {
                for b in &r.retained[i + 1..] {
                    prop_assert!(hamming(by_id(&a.id), by_id(&b.id)) > exact);
                }
            }
            for c in &r.clusters {
                let t = if c.kind == DupKind::Exact { exact } else { exact + extra };
                for m in &c.members {
                    prop_assert!(hamming(by_id(&c.representative), by_id(m)) <= t);
                }
            }
        }
    }
}
