//! Evaluation: flip-averaged descriptors, CMC/mAP retrieval metrics under
//! the standard same-(person,camera) gallery exclusion, camera prediction
//! accuracy, mask IoU against ground truth, and attention-map export.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::ModelParams;
use crate::netpbm;
use crate::ops::horizontal_flip;
use crate::synth::{Manifest, ManifestRow, Split};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// Retrieval + auxiliary metrics for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// cmc[r-1] = fraction of queries with a correct match in the top r.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub camera_accuracy: Option<f64>,
    pub mean_mask_iou: Option<f64>,
    pub per_query_ap: Vec<f64>,
    pub n_queries: usize,
    /// Queries without any cross-camera positive, skipped but counted.
    pub n_excluded: usize,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> Option<f64> {
        self.cmc.get(r - 1).copied()
    }

    /// Line-oriented `metric\tvalue` rendering.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in [1usize, 5, 10, 20] {
            if let Some(v) = self.rank(r) {
                out.push_str(&format!("rank{r}\t{v}\n"));
            }
        }
        out.push_str(&format!("mAP\t{}\n", self.map));
        if let Some(v) = self.camera_accuracy {
            out.push_str(&format!("camera_accuracy\t{v}\n"));
        }
        if let Some(v) = self.mean_mask_iou {
            out.push_str(&format!("mean_mask_iou\t{v}\n"));
        }
        out.push_str(&format!("n_queries\t{}\n", self.n_queries));
        out.push_str(&format!("n_excluded\t{}\n", self.n_excluded));
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("retrieval:");
        for r in [1usize, 5, 10] {
            if let Some(v) = self.rank(r) {
                out.push_str(&format!(" rank-{r} {:.4}", v));
            }
        }
        out.push_str(&format!(" mAP {:.4}\n", self.map));
        if let Some(v) = self.camera_accuracy {
            out.push_str(&format!("camera accuracy: {:.4}\n", v));
        }
        if let Some(v) = self.mean_mask_iou {
            out.push_str(&format!("mean mask IoU: {:.4}\n", v));
        }
        out.push_str(&format!(
            "queries: {} evaluated, {} excluded (no cross-camera positive)\n",
            self.n_queries, self.n_excluded
        ));
        out
    }
}

/// Descriptor plus metadata for one gallery or query item.
#[derive(Debug, Clone)]
pub struct Item {
    pub descriptor: Vec<f32>,
    pub person_id: usize,
    pub camera_id: usize,
}

/// Cosine distance in f64; zero-norm vectors compare as orthogonal.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom < 1e-24 {
        return 1.0;
    }
    1.0 - dot / denom
}

/// Average precision of a ranked binary relevance list: precision at each
/// correct rank, averaged over the correct items.
pub fn ap_from_ranked_relevance(relevance: &[bool]) -> f64 {
    let total: usize = relevance.iter().filter(|r| **r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (i, rel) in relevance.iter().enumerate() {
        if *rel {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    acc / total as f64
}

/// Rank (1-based) of the first relevant item.
pub fn first_hit_rank(relevance: &[bool]) -> Option<usize> {
    relevance.iter().position(|r| *r).map(|i| i + 1)
}

/// Single-query retrieval: per query, gallery items sharing both person and
/// camera id are excluded; remaining items are ranked by cosine distance
/// (ties broken by gallery order). Queries with no cross-camera positive
/// are excluded and counted.
pub fn evaluate_reid(query: &[Item], gallery: &[Item]) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Contract("empty gallery".into()));
    }
    let mut first_ranks = Vec::new();
    let mut per_query_ap = Vec::new();
    let mut n_excluded = 0usize;
    let mut curve_len = 0usize;
    for q in query {
        let candidates: Vec<&Item> = gallery
            .iter()
            .filter(|g| !(g.person_id == q.person_id && g.camera_id == q.camera_id))
            .collect();
        let has_positive = candidates.iter().any(|g| g.person_id == q.person_id);
        if !has_positive {
            n_excluded += 1;
            continue;
        }
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .enumerate()
            .map(|(i, g)| (cosine_distance(&q.descriptor, &g.descriptor), i))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = scored
            .iter()
            .map(|(_, i)| candidates[*i].person_id == q.person_id)
            .collect();
        first_ranks.push(first_hit_rank(&relevance).expect("positive exists"));
        curve_len = curve_len.max(relevance.len());
        per_query_ap.push(ap_from_ranked_relevance(&relevance));
    }
    let n_queries = per_query_ap.len();
    if n_queries == 0 {
        return Err(Error::Contract(
            "no query has a cross-camera positive in the gallery".into(),
        ));
    }
    // every query with first hit at rank r counts toward all ranks >= r
    let mut cmc_hits = vec![0usize; curve_len];
    for rank in &first_ranks {
        for h in &mut cmc_hits[rank - 1..] {
            *h += 1;
        }
    }
    let cmc: Vec<f64> = cmc_hits
        .iter()
        .map(|h| *h as f64 / n_queries as f64)
        .collect();
    let map = per_query_ap.iter().sum::<f64>() / n_queries as f64;
    Ok(EvalReport {
        cmc,
        map,
        camera_accuracy: None,
        mean_mask_iou: None,
        per_query_ap,
        n_queries,
        n_excluded,
    })
}

/// Descriptors for a list of manifest rows plus the number of background
/// branch parameters the extraction touched (always zero by construction).
pub struct DescriptorBatch {
    pub items: Vec<Item>,
    pub bg_param_touches: usize,
}

const EVAL_BATCH: usize = 16;

/// Flip-averaged descriptor of one image: (d(x) + d(flip x)) / 2, eval-mode
/// statistics, foreground branch only.
pub fn extract_descriptor(image: &Tensor, params: &ModelParams) -> Result<Vec<f32>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "extract_descriptor",
            expected: vec![3, 0, 0],
            got: shape,
        });
    }
    let batch = stack(&[image.clone()])?;
    let descs = descriptors_for_batch(&batch, params)?;
    Ok(descs.into_iter().next().expect("one row"))
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let shape = images[0].shape();
    let mut vals = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: "descriptor batch",
                expected: shape,
                got: img.shape(),
            });
        }
        vals.extend_from_slice(&img.values());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(full, vals))
}

fn descriptors_for_batch(batch: &Tensor, params: &ModelParams) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::inference();
    let plain = params.forward_inference(&mut g, batch)?;
    let flipped_in = horizontal_flip(batch);
    let flipped = params.forward_inference(&mut g, &flipped_in)?;
    let bg_ids = params.bg_param_ids();
    debug_assert_eq!(g.touch_count(&bg_ids), 0);
    let n = batch.shape()[0];
    let d = plain.descriptor.numel() / n;
    let pv = plain.descriptor.values();
    let fv = flipped.descriptor.values();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(
            pv[i * d..(i + 1) * d]
                .iter()
                .zip(&fv[i * d..(i + 1) * d])
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        );
    }
    Ok(out)
}

/// Flip-averaged descriptors for `rows`, batched; instrumented against any
/// background-branch parameter read.
pub fn extract_descriptors(
    manifest: &Manifest,
    rows: &[&ManifestRow],
    params: &ModelParams,
) -> Result<DescriptorBatch> {
    let bg_ids = params.bg_param_ids();
    let mut items = Vec::with_capacity(rows.len());
    let mut bg_param_touches = 0usize;
    for chunk in rows.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<_>>()?;
        let batch = stack(&images)?;
        let mut g = Graph::inference();
        let plain = params.forward_inference(&mut g, &batch)?;
        let flipped_in = horizontal_flip(&batch);
        let flipped = params.forward_inference(&mut g, &flipped_in)?;
        bg_param_touches += g.touch_count(&bg_ids);
        let n = chunk.len();
        let d = plain.descriptor.numel() / n;
        let pv = plain.descriptor.values();
        let fv = flipped.descriptor.values();
        for (i, row) in chunk.iter().enumerate() {
            let descriptor: Vec<f32> = pv[i * d..(i + 1) * d]
                .iter()
                .zip(&fv[i * d..(i + 1) * d])
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            items.push(Item {
                descriptor,
                person_id: row.person_id,
                camera_id: row.camera_id,
            });
        }
    }
    Ok(DescriptorBatch {
        items,
        bg_param_touches,
    })
}

/// Fraction of rows whose camera is predicted correctly from the averaged
/// per-stripe camera logits (ties resolve to the lowest camera index).
pub fn camera_prediction_accuracy(
    manifest: &Manifest,
    rows: &[&ManifestRow],
    params: &ModelParams,
    camera_map: &BTreeMap<usize, usize>,
) -> Result<f64> {
    if params.bg_param_ids().is_empty() {
        return Err(Error::Contract(
            "camera prediction needs the background branch".into(),
        ));
    }
    if rows.is_empty() {
        return Err(Error::Contract("no rows to evaluate".into()));
    }
    let mut correct = 0usize;
    for chunk in rows.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<_>>()?;
        let batch = stack(&images)?;
        let mut g = Graph::inference();
        let out = params.forward(&mut g, &batch, false)?;
        let logits = out
            .bg_logits
            .as_ref()
            .ok_or_else(|| Error::Contract("background branch produced no logits".into()))?;
        let n = chunk.len();
        let k = params.config.n_cameras;
        let mut avg = vec![0.0f64; n * k];
        for l in logits {
            let lv = l.values();
            for (a, v) in avg.iter_mut().zip(lv.iter()) {
                *a += *v as f64;
            }
        }
        for (i, row) in chunk.iter().enumerate() {
            let pred = argmax_lowest_tie(&avg[i * k..(i + 1) * k]);
            let want = camera_map.get(&row.camera_id).copied();
            if Some(pred) == want {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Nearest-neighbor upsampling of a single-channel map to (h, w).
pub fn upsample_nearest(map: &Tensor, h: usize, w: usize) -> Tensor {
    let shape = map.shape();
    let (sh, sw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mv = map.values();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let sy = y * sh / h;
        for x in 0..w {
            let sx = x * sw / w;
            out[y * w + x] = mv[sy * sw + sx];
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// IoU of the thresholded, nearest-upsampled soft mask against the binary
/// ground truth; an empty union counts as 1.
pub fn mask_iou(zf: &Tensor, gt_mask: &Tensor, threshold: f32) -> f64 {
    let gt_shape = gt_mask.shape();
    let (h, w) = (gt_shape[gt_shape.len() - 2], gt_shape[gt_shape.len() - 1]);
    let up = upsample_nearest(zf, h, w);
    let uv = up.values();
    let gv = gt_mask.values();
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in uv.iter().zip(gv.iter()) {
        let p = *p > threshold;
        let g = *g > 0.5;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU of the predicted mask over `rows` at the given threshold.
pub fn mean_mask_iou(
    manifest: &Manifest,
    rows: &[&ManifestRow],
    params: &ModelParams,
    threshold: f32,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Contract("no rows to evaluate".into()));
    }
    let mut total = 0.0f64;
    for chunk in rows.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<_>>()?;
        let batch = stack(&images)?;
        let mut g = Graph::inference();
        let out = params.forward_inference(&mut g, &batch)?;
        let zf = out
            .fg_mask
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no attention module".into()))?;
        let zshape = zf.shape();
        let (hf, wf) = (zshape[2], zshape[3]);
        let zv = zf.values();
        for (i, row) in chunk.iter().enumerate() {
            let gt = manifest.load_mask(row)?;
            let per = Tensor::new(
                vec![1, hf, wf],
                zv[i * hf * wf..(i + 1) * hf * wf].to_vec(),
            );
            total += mask_iou(&per, &gt, threshold);
        }
    }
    Ok(total / rows.len() as f64)
}

/// Writes `<stem>_zf.pgm` and `<stem>_zb.pgm` per row: the soft mask and its
/// complement, nearest-upsampled to input size and scaled to [0,255].
pub fn export_attention_maps(
    manifest: &Manifest,
    rows: &[&ManifestRow],
    params: &ModelParams,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for row in rows {
        let image = manifest.load_image(row)?;
        let shape = image.shape();
        let (h, w) = (shape[1], shape[2]);
        let batch = stack(&[image])?;
        let mut g = Graph::inference();
        let out = params.forward_inference(&mut g, &batch)?;
        let zf = out
            .fg_mask
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no attention module".into()))?;
        let zshape = zf.shape();
        let flat = Tensor::new(vec![1, zshape[2], zshape[3]], zf.to_vec());
        let zf_up = upsample_nearest(&flat, h, w);
        let zb_up = Tensor::new(
            vec![1, h, w],
            zf_up.values().iter().map(|v| 1.0 - v).collect(),
        );
        let stem = row
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Contract(format!("bad image path {:?}", row.image)))?
            .to_string();
        netpbm::write_pgm(&out_dir.join(format!("{stem}_zf.pgm")), &zf_up)?;
        netpbm::write_pgm(&out_dir.join(format!("{stem}_zb.pgm")), &zb_up)?;
    }
    Ok(())
}

/// Full evaluation of a trained model on a dataset: retrieval metrics over
/// query/gallery, camera accuracy over rows with train-known cameras, and
/// mask IoU over the test split.
pub fn evaluate_model(
    manifest: &Manifest,
    params: &ModelParams,
    mask_threshold: f32,
) -> Result<EvalReport> {
    let query_rows: Vec<&ManifestRow> = manifest.rows_in(Split::Query).collect();
    let gallery_rows: Vec<&ManifestRow> = manifest.rows_in(Split::Gallery).collect();
    if query_rows.is_empty() || gallery_rows.is_empty() {
        return Err(Error::Contract("dataset has no query/gallery split".into()));
    }
    let query = extract_descriptors(manifest, &query_rows, params)?;
    let gallery = extract_descriptors(manifest, &gallery_rows, params)?;
    let mut report = evaluate_reid(&query.items, &gallery.items)?;

    let (_, camera_map) = crate::train::label_maps(manifest);
    let test_rows: Vec<&ManifestRow> = query_rows.iter().chain(&gallery_rows).copied().collect();
    let known: Vec<&ManifestRow> = test_rows
        .iter()
        .filter(|r| camera_map.contains_key(&r.camera_id))
        .copied()
        .collect();
    if !known.is_empty() && !params.bg_param_ids().is_empty() {
        report.camera_accuracy =
            Some(camera_prediction_accuracy(manifest, &known, params, &camera_map)?);
    }
    if params.tem.is_some() {
        report.mean_mask_iou = Some(mean_mask_iou(manifest, &test_rows, params, mask_threshold)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationConfig, ModelConfig};
    use crate::synth::{generate_dataset, DatasetSpec};

    fn item(descriptor: Vec<f32>, person_id: usize, camera_id: usize) -> Item {
        Item {
            descriptor,
            person_id,
            camera_id,
        }
    }

    #[test]
    fn ap_hand_enumerated_examples() {
        let ap = ap_from_ranked_relevance(&[true, false, true, false]);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        let ap = ap_from_ranked_relevance(&[false, true]);
        assert!((ap - 0.5).abs() < 1e-12);

        let ap = ap_from_ranked_relevance(&[true, true, true]);
        assert!((ap - 1.0).abs() < 1e-12);
        assert_eq!(first_hit_rank(&[false, true]), Some(2));
    }

    #[test]
    fn reid_on_constructed_geometry() {
        // query matches gallery item 1 exactly; item 0 is a decoy
        let query = vec![item(vec![1.0, 0.0], 7, 0)];
        let gallery = vec![
            item(vec![0.0, 1.0], 9, 1),
            item(vec![1.0, 0.1], 7, 1),
            item(vec![0.7, 0.7], 9, 2),
        ];
        let report = evaluate_reid(&query, &gallery).unwrap();
        assert_eq!(report.n_queries, 1);
        assert_eq!(report.rank(1), Some(1.0));
        assert!((report.map - 1.0).abs() < 1e-12);
        // cmc is non-decreasing and within [0,1]
        for w in report.cmc.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn same_person_same_camera_is_excluded() {
        let query = vec![item(vec![1.0, 0.0], 7, 0)];
        // the only positive shares the query camera: query excluded
        let gallery = vec![
            item(vec![1.0, 0.0], 7, 0),
            item(vec![0.0, 1.0], 9, 1),
        ];
        assert!(evaluate_reid(&query, &gallery).is_err());

        // with a second query that has a positive, the first is counted
        let query = vec![
            item(vec![1.0, 0.0], 7, 0),
            item(vec![0.0, 1.0], 9, 0),
        ];
        let report = evaluate_reid(&query, &gallery).unwrap();
        assert_eq!(report.n_queries, 1);
        assert_eq!(report.n_excluded, 1);
    }

    #[test]
    fn mask_iou_examples() {
        let gt = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mask_iou(&gt, &gt, 0.5), 1.0);

        let pred = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(mask_iou(&pred, &gt, 0.5), 0.0);

        // equal areas, half overlap: |I|=1, |U|=3
        let pred = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        assert!((mask_iou(&pred, &gt, 0.5) - 1.0 / 3.0).abs() < 1e-12);

        let empty = Tensor::zeros(vec![1, 2, 2]);
        assert_eq!(mask_iou(&empty, &empty, 0.5), 1.0);
    }

    #[test]
    fn upsample_nearest_repeats_blocks() {
        let m = Tensor::new(vec![1, 1, 2], vec![0.2, 0.8]);
        let up = upsample_nearest(&m, 2, 4);
        assert_eq!(up.to_vec(), vec![0.2, 0.2, 0.8, 0.8, 0.2, 0.2, 0.8, 0.8]);
    }

    #[test]
    fn single_camera_accuracy_is_one_by_construction() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_persons: 2,
            n_cameras: 2,
            images_per_pair: 2,
            height: 64,
            width: 32,
            master_seed: 9,
            unseen_scene: false,
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        // classifier with a single camera class: argmax is always correct
        let mut cfg = ModelConfig::desk(2, 1);
        cfg.input_h = 64;
        cfg.input_w = 32;
        cfg.ablation.k = 4;
        cfg.ablation.embed_dim = 4;
        let params = ModelParams::init(cfg, 2).unwrap();
        let mut camera_map = BTreeMap::new();
        camera_map.insert(0usize, 0usize);
        let rows: Vec<&ManifestRow> = manifest
            .rows
            .iter()
            .filter(|r| r.camera_id == 0)
            .collect();
        let acc = camera_prediction_accuracy(&manifest, &rows, &params, &camera_map).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        assert_eq!(argmax_lowest_tie(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest_tie(&[5.0, 5.0, 5.0]), 0);
    }

    fn small_setup() -> (tempfile::TempDir, Manifest, ModelParams) {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_persons: 4,
            n_cameras: 2,
            images_per_pair: 2,
            height: 64,
            width: 32,
            master_seed: 5,
            unseen_scene: false,
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let mut cfg = ModelConfig::desk(2, 2);
        cfg.input_h = 64;
        cfg.input_w = 32;
        cfg.ablation = AblationConfig::full();
        cfg.ablation.k = 8;
        cfg.ablation.embed_dim = 8;
        let params = ModelParams::init(cfg, 1).unwrap();
        (dir, manifest, params)
    }

    #[test]
    fn descriptor_extraction_only_touches_the_foreground_path() {
        let (_dir, manifest, params) = small_setup();
        let rows: Vec<&ManifestRow> = manifest.rows_in(Split::Query).collect();
        let batch = extract_descriptors(&manifest, &rows, &params).unwrap();
        assert_eq!(batch.bg_param_touches, 0);
        assert_eq!(batch.items.len(), rows.len());
        assert_eq!(batch.items[0].descriptor.len(), 15 * 8);
    }

    #[test]
    fn symmetric_image_descriptor_equals_unflipped_descriptor() {
        let (_dir, manifest, params) = small_setup();
        let img = manifest.load_image(&manifest.rows[0]).unwrap();
        // symmetrize the image so flip(x) == x
        let flipped = horizontal_flip(&img);
        let sym = Tensor::new(
            img.shape(),
            img.values()
                .iter()
                .zip(flipped.values().iter())
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        );
        let desc = extract_descriptor(&sym, &params).unwrap();
        let batch = stack(&[sym]).unwrap();
        let mut g = Graph::inference();
        let plain = params.forward_inference(&mut g, &batch).unwrap();
        for (a, b) in desc.iter().zip(plain.descriptor.values().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn evaluate_model_produces_full_report() {
        let (_dir, manifest, params) = small_setup();
        let report = evaluate_model(&manifest, &params, 0.5).unwrap();
        assert!(report.n_queries > 0);
        assert!(report.camera_accuracy.is_some());
        assert!(report.mean_mask_iou.is_some());
        for v in &report.cmc {
            assert!((0.0..=1.0).contains(v));
        }
        let tsv = report.to_tsv();
        assert!(tsv.contains("rank1\t"));
        assert!(tsv.contains("mAP\t"));
    }

    #[test]
    fn exported_maps_complement_to_255() {
        let (_dir, manifest, params) = small_setup();
        let out = tempfile::tempdir().unwrap();
        let rows: Vec<&ManifestRow> = manifest.rows_in(Split::Query).take(2).collect();
        export_attention_maps(&manifest, &rows, &params, out.path()).unwrap();
        let stem = rows[0].image.file_stem().unwrap().to_str().unwrap();
        let zf = netpbm::read_pgm(&out.path().join(format!("{stem}_zf.pgm"))).unwrap();
        let zb = netpbm::read_pgm(&out.path().join(format!("{stem}_zb.pgm"))).unwrap();
        for (a, b) in zf.values().iter().zip(zb.values().iter()) {
            let sum = (a * 255.0).round() + (b * 255.0).round();
            assert!((sum - 255.0).abs() <= 1.0, "sum {sum}");
        }
    }

    #[test]
    fn zero_head_exports_uniform_maps() {
        let (_dir, manifest, params) = small_setup();
        let tem = params.tem.as_ref().unwrap();
        tem.head.weight.copy_from(&vec![0.0; tem.head.weight.numel()]);
        if let Some(b) = &tem.head.bias {
            b.copy_from(&vec![0.0; b.numel()]);
        }
        let out = tempfile::tempdir().unwrap();
        let rows: Vec<&ManifestRow> = manifest.rows_in(Split::Query).take(1).collect();
        export_attention_maps(&manifest, &rows, &params, out.path()).unwrap();
        let stem = rows[0].image.file_stem().unwrap().to_str().unwrap();
        let zf = netpbm::read_pgm(&out.path().join(format!("{stem}_zf.pgm"))).unwrap();
        for v in zf.values().iter() {
            let px = (v * 255.0).round();
            assert!(px == 127.0 || px == 128.0, "pixel {px}");
        }
    }
}
