//! The training protocol: PK batches, random horizontal flips, SGD with the
//! warmup schedule, per-iteration loss trace, per-epoch checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use crate::checkpoint;
use crate::model::{overall_loss, ModelParams};
use crate::ops::horizontal_flip;
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{sample_seed, SplitMix64};
use crate::sampler::pk_sampler;
use crate::schedule::{lr_at_epoch, ScheduleConfig};
use crate::synth::{Manifest, Split};
use crate::tensor::{backward_pass, Graph, Tensor};
use crate::{Error, Result};

/// Everything a run needs besides the dataset and the model.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub flip_prob: f64,
    /// Sampler passes per epoch; each pass visits every train person once.
    pub passes_per_epoch: usize,
    /// Write the rolling checkpoint every this many epochs (0: only at the
    /// end). A final checkpoint is always written when out_dir is set.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::desk(),
            sgd: SgdConfig::default(),
            seed: 7,
            flip_prob: 0.5,
            passes_per_epoch: 1,
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

/// One loss-trace line: `iter,L,Lf,Lb,Lt`.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iter: usize,
    pub total: f32,
    pub fg: f32,
    pub bg: f32,
    pub tal: f32,
}

pub struct TrainResult {
    pub trace: Vec<TraceRow>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Maps raw train-split person/camera ids to contiguous class indices.
pub fn label_maps(manifest: &Manifest) -> (BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let mut persons = BTreeMap::new();
    let mut cameras = BTreeMap::new();
    for row in manifest.rows_in(Split::Train) {
        let next = persons.len();
        persons.entry(row.person_id).or_insert(next);
        let next = cameras.len();
        cameras.entry(row.camera_id).or_insert(next);
    }
    (persons, cameras)
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iter,L,Lf,Lb,Lt\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.iter, r.total, r.fg, r.bg, r.tal));
    }
    out
}

/// Runs the optimization loop; `on_epoch(epoch, params)` fires after each
/// epoch (checkpointing happens first).
pub fn train_loop(
    manifest: &Manifest,
    params: &ModelParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainResult> {
    config.schedule.validate()?;
    if config.passes_per_epoch == 0 {
        return Err(Error::Config("passes_per_epoch must be positive".into()));
    }
    let (person_map, camera_map) = label_maps(manifest);
    if person_map.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if person_map.len() > params.config.n_persons {
        return Err(Error::Config(format!(
            "{} train persons but the classifier has {} classes",
            person_map.len(),
            params.config.n_persons
        )));
    }
    if camera_map.len() > params.config.n_cameras {
        return Err(Error::Config(format!(
            "{} train cameras but the classifier has {} classes",
            camera_map.len(),
            params.config.n_cameras
        )));
    }

    let param_set = params.param_set();
    let mut opt = Sgd::new(config.sgd.clone())?;
    let mut cache: HashMap<usize, Tensor> = HashMap::new();
    let mut trace = Vec::new();
    let mut iter = 0usize;

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ckpt_path = config.out_dir.as_ref().map(|d| d.join("checkpoint.ckpt"));

    for epoch in 0..config.schedule.total_epochs {
        let lr = lr_at_epoch(epoch, &config.schedule);
        for pass in 0..config.passes_per_epoch {
            let batches = pk_sampler(
                manifest,
                config.schedule.batch_p,
                config.schedule.batch_k,
                sample_seed(config.seed, epoch as u64, pass as u64, 0),
            )?;
            let mut flip_rng =
                SplitMix64::new(sample_seed(config.seed, epoch as u64, pass as u64, 1));
            for batch in &batches {
                let (x, pids, cids) =
                    assemble_batch(manifest, batch, &person_map, &camera_map, &mut cache, |img| {
                        if flip_rng.bool(config.flip_prob) {
                            horizontal_flip(img)
                        } else {
                            img.clone()
                        }
                    })?;
                let mut g = Graph::new();
                let out = params.forward(&mut g, &x, true)?;
                let losses = overall_loss(&mut g, &out, &pids, &cids, &params.config.ablation)?;
                let row = TraceRow {
                    iter,
                    total: losses.total.item(),
                    fg: losses.fg.item(),
                    bg: losses.bg.item(),
                    tal: losses.tal.item(),
                };
                if !row.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "iteration {iter}: L={} Lf={} Lb={} Lt={}",
                        row.total, row.fg, row.bg, row.tal
                    )));
                }
                backward_pass(&mut g, &losses.total)?;
                opt.step(&param_set, lr)?;
                param_set.zero_grads();
                trace.push(row);
                iter += 1;
            }
        }
        if let Some(path) = &ckpt_path {
            let due = config.checkpoint_every != 0 && (epoch + 1) % config.checkpoint_every == 0;
            if due || epoch + 1 == config.schedule.total_epochs {
                checkpoint::save(&param_set, path)?;
            }
        }
        on_epoch(epoch, params)?;
    }

    if let Some(dir) = &config.out_dir {
        std::fs::write(dir.join("loss_trace.csv"), trace_to_csv(&trace))?;
    }
    Ok(TrainResult {
        trace,
        checkpoint_path: ckpt_path,
    })
}

fn assemble_batch(
    manifest: &Manifest,
    rows: &[usize],
    person_map: &BTreeMap<usize, usize>,
    camera_map: &BTreeMap<usize, usize>,
    cache: &mut HashMap<usize, Tensor>,
    mut augment: impl FnMut(&Tensor) -> Tensor,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let n = rows.len();
    let mut pids = Vec::with_capacity(n);
    let mut cids = Vec::with_capacity(n);
    let mut values: Vec<f32> = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for &ri in rows {
        if !cache.contains_key(&ri) {
            let img = manifest.load_image(&manifest.rows[ri])?;
            cache.insert(ri, img);
        }
        let img = augment(&cache[&ri]);
        let s = img.shape();
        match &shape {
            None => shape = Some(s),
            Some(prev) => {
                if *prev != s {
                    return Err(Error::ShapeMismatch {
                        context: "batch images",
                        expected: prev.clone(),
                        got: s,
                    });
                }
            }
        }
        values.extend_from_slice(&img.values());
        let row = &manifest.rows[ri];
        pids.push(*person_map.get(&row.person_id).ok_or_else(|| {
            Error::Contract(format!("person {} not in the train label map", row.person_id))
        })?);
        cids.push(*camera_map.get(&row.camera_id).ok_or_else(|| {
            Error::Contract(format!("camera {} not in the train label map", row.camera_id))
        })?);
    }
    let mut full = vec![n];
    full.extend(shape.expect("non-empty batch"));
    Ok((Tensor::new(full, values), pids, cids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationConfig, ModelConfig, TalVariant};
    use crate::synth::{generate_dataset, DatasetSpec};

    fn tiny_dataset(dir: &std::path::Path, persons: usize) -> Manifest {
        let spec = DatasetSpec {
            n_persons: persons,
            n_cameras: 2,
            images_per_pair: 2,
            height: 64,
            width: 32,
            master_seed: 5,
            unseen_scene: false,
        };
        generate_dataset(&spec, dir).unwrap()
    }

    fn tiny_model(n_persons: usize, n_cameras: usize, ablation: AblationConfig) -> ModelParams {
        let mut cfg = ModelConfig::desk(n_persons, n_cameras);
        cfg.input_h = 64;
        cfg.input_w = 32;
        cfg.ablation = ablation;
        cfg.ablation.k = 8;
        cfg.ablation.embed_dim = 8;
        ModelParams::init(cfg, 1).unwrap()
    }

    fn quick_schedule(epochs: usize, p: usize, k: usize, lr: f32) -> ScheduleConfig {
        ScheduleConfig {
            total_epochs: epochs,
            warmup_epochs: 0,
            lr_start: lr / 2.0,
            lr_peak: lr,
            decay_epochs: vec![],
            batch_p: p,
            batch_k: k,
        }
    }

    #[test]
    fn single_person_memorization() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2); // 1 train person, 4 images
        let params = tiny_model(2, 2, AblationConfig::baseline());
        let config = TrainConfig {
            schedule: quick_schedule(200, 1, 4, 0.05),
            seed: 3,
            out_dir: None,
            ..TrainConfig::default()
        };
        let result = train_loop(&manifest, &params, &config, |_, _| Ok(())).unwrap();
        assert_eq!(result.trace.len(), 200);
        let last = result.trace.last().unwrap();
        assert!(last.fg < 0.05, "final Lf = {}", last.fg);
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_trace() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4); // 2 train persons
        let config = TrainConfig {
            schedule: quick_schedule(5, 2, 2, 0.01),
            seed: 11,
            ..TrainConfig::default()
        };
        let mut traces = Vec::new();
        for _ in 0..2 {
            let params = tiny_model(2, 2, AblationConfig::full());
            let result = train_loop(&manifest, &params, &config, |_, _| Ok(())).unwrap();
            traces.push(result.trace);
        }
        assert_eq!(traces[0].len(), traces[1].len());
        for (a, b) in traces[0].iter().zip(&traces[1]) {
            assert!((a.total - b.total).abs() <= 1e-6);
            assert!((a.fg - b.fg).abs() <= 1e-6);
        }
    }

    #[test]
    fn disabled_tal_reports_zero_for_the_whole_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let mut ab = AblationConfig::full();
        ab.tal_variant = TalVariant::None;
        let params = tiny_model(2, 2, ab);
        let config = TrainConfig {
            schedule: quick_schedule(3, 2, 2, 0.01),
            seed: 2,
            ..TrainConfig::default()
        };
        let result = train_loop(&manifest, &params, &config, |_, _| Ok(())).unwrap();
        assert!(result.trace.iter().all(|r| r.tal == 0.0));
    }

    #[test]
    fn checkpoints_and_trace_are_written() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data.path(), 4);
        let params = tiny_model(2, 2, AblationConfig::baseline());
        let config = TrainConfig {
            schedule: quick_schedule(2, 2, 2, 0.01),
            seed: 2,
            out_dir: Some(out.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let mut epochs_seen = 0;
        let result = train_loop(&manifest, &params, &config, |_, _| {
            epochs_seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs_seen, 2);
        assert!(result.checkpoint_path.as_ref().unwrap().exists());
        let csv = std::fs::read_to_string(out.path().join("loss_trace.csv")).unwrap();
        assert!(csv.starts_with("iter,L,Lf,Lb,Lt\n"));
        assert_eq!(csv.lines().count(), 1 + result.trace.len());
    }
}
