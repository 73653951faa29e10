//! PK batch sampling: P distinct identities x K camera-diverse images.

use std::collections::BTreeMap;

use crate::rng::SplitMix64;
use crate::synth::{Manifest, Split};
use crate::{Error, Result};

/// One epoch of batches over the train split. Each batch holds P distinct
/// persons with K images each (indices into `manifest.rows`), drawn
/// round-robin over that person's cameras; persons with fewer than K images
/// are sampled with replacement. Deterministic in `epoch_seed`.
pub fn pk_sampler(
    manifest: &Manifest,
    p: usize,
    k: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be positive".into()));
    }
    // person id -> camera id -> row indices, in manifest order
    let mut by_person: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        if row.split == Split::Train {
            by_person
                .entry(row.person_id)
                .or_default()
                .entry(row.camera_id)
                .or_default()
                .push(i);
        }
    }
    let n_persons = by_person.len();
    if p > n_persons {
        return Err(Error::Config(format!(
            "batch needs {p} distinct persons but the train split has {n_persons}"
        )));
    }
    let mut rng = SplitMix64::new(epoch_seed);
    let mut persons: Vec<usize> = by_person.keys().copied().collect();
    rng.shuffle(&mut persons);

    let n_batches = n_persons.div_ceil(p);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut chosen: Vec<usize> = persons[b * p..((b + 1) * p).min(n_persons)].to_vec();
        // pad the tail batch from the front of the shuffle; still P distinct
        let mut fill = 0;
        while chosen.len() < p {
            chosen.push(persons[fill]);
            fill += 1;
        }
        let mut batch = Vec::with_capacity(p * k);
        for pid in chosen {
            let cams = &by_person[&pid];
            let mut cam_rows: Vec<Vec<usize>> = cams.values().cloned().collect();
            for rows in cam_rows.iter_mut() {
                rng.shuffle(rows);
            }
            let mut cam_order: Vec<usize> = (0..cam_rows.len()).collect();
            rng.shuffle(&mut cam_order);
            let mut cursors = vec![0usize; cam_rows.len()];
            let mut turn = 0usize;
            for _ in 0..k {
                let cam = cam_order[turn % cam_order.len()];
                let rows = &cam_rows[cam];
                batch.push(rows[cursors[cam] % rows.len()]);
                cursors[cam] += 1;
                turn += 1;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ManifestRow;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn fake_manifest(persons: usize, cameras: usize, per_pair: usize) -> Manifest {
        let mut rows = Vec::new();
        for pid in 0..persons {
            for cid in 0..cameras {
                for i in 0..per_pair {
                    rows.push(ManifestRow {
                        image: PathBuf::from(format!("images/p{pid}_c{cid}_i{i}.ppm")),
                        person_id: pid,
                        camera_id: cid,
                        split: Split::Train,
                        mask: PathBuf::from("masks/x.pgm"),
                    });
                }
            }
        }
        Manifest {
            base_dir: PathBuf::from("."),
            rows,
        }
    }

    #[test]
    fn paper_batch_shape() {
        let m = fake_manifest(32, 6, 4);
        let batches = pk_sampler(&m, 16, 8, 1).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.len(), 128);
        }
    }

    #[test]
    fn singleton_batches() {
        let m = fake_manifest(3, 2, 2);
        let batches = pk_sampler(&m, 1, 1, 1).unwrap();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(b.len(), 1);
        }
    }

    #[test]
    fn batches_hold_exactly_p_distinct_persons() {
        let m = fake_manifest(10, 3, 2);
        for seed in 0..20 {
            let batches = pk_sampler(&m, 4, 3, seed).unwrap();
            for b in &batches {
                let ids: HashSet<usize> = b.iter().map(|i| m.rows[*i].person_id).collect();
                assert_eq!(ids.len(), 4);
                assert_eq!(b.len(), 12);
            }
        }
    }

    #[test]
    fn short_person_is_sampled_with_replacement_covering_all_images() {
        // one person, one camera, 3 images, K=8
        let m = fake_manifest(1, 1, 3);
        let batches = pk_sampler(&m, 1, 8, 7).unwrap();
        assert_eq!(batches.len(), 1);
        let batch = &batches[0];
        assert_eq!(batch.len(), 8);
        let unique: HashSet<usize> = batch.iter().copied().collect();
        assert_eq!(unique.len(), 3, "all 3 images drawn");
    }

    #[test]
    fn camera_diverse_within_person() {
        let m = fake_manifest(2, 4, 2);
        let batches = pk_sampler(&m, 2, 4, 3).unwrap();
        // K=4 draws over 4 cameras: round robin must touch every camera once
        for b in &batches {
            for pid in 0..2 {
                let cams: HashSet<usize> = b
                    .iter()
                    .filter(|i| m.rows[**i].person_id == pid)
                    .map(|i| m.rows[*i].camera_id)
                    .collect();
                assert_eq!(cams.len(), 4);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let m = fake_manifest(8, 3, 3);
        let a = pk_sampler(&m, 4, 4, 42).unwrap();
        let b = pk_sampler(&m, 4, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = pk_sampler(&m, 4, 4, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_persons_requested_is_an_error() {
        let m = fake_manifest(3, 2, 2);
        assert!(pk_sampler(&m, 4, 2, 1).is_err());
    }
}
