use fanet_core::checkpoint;
use fanet_core::model::{ModelConfig, ModelParams};
use fanet_core::synth::{Manifest, Split};
use fanet_core::tensor::Graph;
use fanet_core::eval::{mask_iou, upsample_nearest};
use fanet_core::tensor::Tensor;
use std::path::Path;

fn main() {
    let manifest = Manifest::load(Path::new("/tmp/deskdata")).unwrap();
    let cfg = ModelConfig::desk(16, 6);
    let params = ModelParams::init(cfg, 1).unwrap();
    checkpoint::load_into(&params.param_set(), Path::new("/tmp/deskrun_full2/checkpoint.ckpt")).unwrap();

    let rows: Vec<_> = manifest.rows.iter().filter(|r| r.split != Split::Train).take(48).collect();
    let mut in_sum = 0.0f64; let mut in_n = 0usize;
    let mut out_sum = 0.0f64; let mut out_n = 0usize;
    let mut hist = [0usize; 10];
    let mut iou_at = vec![0.0f64; 9];
    for row in &rows {
        let img = manifest.load_image(row).unwrap();
        let gt = manifest.load_mask(row).unwrap();
        let batch = Tensor::new({let mut s=vec![1]; s.extend(img.shape()); s}, img.to_vec());
        let mut g = Graph::inference();
        let out = params.forward_inference(&mut g, &batch).unwrap();
        let zf = out.fg_mask.unwrap();
        let zs = zf.shape();
        let flat = Tensor::new(vec![1, zs[2], zs[3]], zf.to_vec());
        let up = upsample_nearest(&flat, 128, 48);
        let uv = up.values();
        let gv = gt.values();
        for (u, gm) in uv.iter().zip(gv.iter()) {
            hist[((u * 10.0) as usize).min(9)] += 1;
            if *gm > 0.5 { in_sum += *u as f64; in_n += 1; } else { out_sum += *u as f64; out_n += 1; }
        }
        for (i, th) in (1..10).enumerate() {
            iou_at[i] += mask_iou(&flat, &gt, th as f32 / 10.0);
        }
    }
    println!("mean Zf inside mask:  {:.4}", in_sum / in_n as f64);
    println!("mean Zf outside mask: {:.4}", out_sum / out_n as f64);
    println!("Zf histogram (0.0-1.0 deciles): {:?}", hist);
    for (i, th) in (1..10).enumerate() {
        println!("IoU at threshold 0.{th}: {:.4}", iou_at[i] / rows.len() as f64);
    }
}
