// Quick probe: does the mask learn the right polarity on the desk benchmark?
use fanet_core::eval::mean_mask_iou;
use fanet_core::model::{AblationConfig, ModelConfig, ModelParams};
use fanet_core::schedule::ScheduleConfig;
use fanet_core::synth::{generate_dataset, DatasetSpec, Manifest, Split};
use fanet_core::train::{label_maps, train_loop, TrainConfig};
use std::path::Path;

fn mask_stats(manifest: &Manifest, params: &ModelParams) -> (f64, f64, f64) {
    use fanet_core::eval::upsample_nearest;
    use fanet_core::tensor::{Graph, Tensor};
    let rows: Vec<_> = manifest.rows.iter().filter(|r| r.split != Split::Train).take(48).collect();
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for row in &rows {
        let img = manifest.load_image(row).unwrap();
        let gt = manifest.load_mask(row).unwrap();
        let batch = Tensor::new({ let mut s = vec![1]; s.extend(img.shape()); s }, img.to_vec());
        let mut g = Graph::inference();
        let out = params.forward_inference(&mut g, &batch).unwrap();
        let zf = out.fg_mask.unwrap();
        let zs = zf.shape();
        let flat = Tensor::new(vec![1, zs[2], zs[3]], zf.to_vec());
        let up = upsample_nearest(&flat, 128, 48);
        for (u, m) in up.values().iter().zip(gt.values().iter()) {
            if *m > 0.5 { in_sum += *u as f64; in_n += 1; } else { out_sum += *u as f64; out_n += 1; }
        }
    }
    let rows2: Vec<_> = manifest.rows.iter().filter(|r| r.split != Split::Train).collect();
    let iou = mean_mask_iou(manifest, &rows2, params, 0.5).unwrap();
    (in_sum / in_n as f64, out_sum / out_n as f64, iou)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let passes: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr_peak: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.6);
    let dir = Path::new("/tmp/probe_data");
    let spec = DatasetSpec { master_seed: 7, ..DatasetSpec::default() };
    std::fs::create_dir_all(dir).unwrap();
    let manifest = generate_dataset(&spec, dir).unwrap();
    let (pmap, cmap) = label_maps(&manifest);
    let mut cfg = ModelConfig::desk(pmap.len(), cmap.len());
    cfg.ablation = AblationConfig::full();
    let params = ModelParams::init(cfg, 7).unwrap();
    let schedule = ScheduleConfig {
        total_epochs: epochs,
        warmup_epochs: 4,
        lr_start: lr_peak / 10.0,
        lr_peak,
        decay_epochs: vec![
            (epochs * 2 / 5 + 4, lr_peak / 10.0),
            (epochs * 4 / 5, lr_peak / 100.0),
        ],
        ..ScheduleConfig::desk()
    };
    let tc = TrainConfig {
        schedule,
        seed: 7,
        passes_per_epoch: passes,
        checkpoint_every: 0,
        out_dir: None,
        ..TrainConfig::default()
    };
    train_loop(&manifest, &params, &tc, |e, p| {
        if (e + 1) % 4 == 0 {
            let (inside, outside, iou) = mask_stats(&manifest, p);
            eprintln!("epoch {:>3}: Zf inside {:.3} outside {:.3} IoU {:.3}", e + 1, inside, outside, iou);
        }
        Ok(())
    })
    .unwrap();
}
